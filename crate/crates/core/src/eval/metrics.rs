use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{EvalError, EvaluationRecord, Result};

/// Name of the merged glutamate + glutamine column.
pub const GLX: &str = "GLX";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaFormula {
    /// `sqrt(mean((p - eps)^2))`, with the deviation taken from the predictions.
    #[default]
    Printed,
    /// Standard deviation of the absolute errors `|a - p|`.
    Conventional,
}

/// Mean absolute error over all entries and its spread, using the printed
/// spread formula.
pub fn mean_abs_error(rec: &EvaluationRecord) -> Result<(f64, f64)> {
    mean_abs_error_with(rec, SigmaFormula::Printed)
}

pub fn mean_abs_error_with(rec: &EvaluationRecord, formula: SigmaFormula) -> Result<(f64, f64)> {
    let count = rec.actual.len();
    if count == 0 {
        return Err(EvalError::Shape("empty record".into()));
    }
    let n = count as f64;
    let eps = rec.actual.iter().zip(rec.predicted.iter()).map(|(a, p)| (a - p).abs()).sum::<f64>() / n;
    let var = match formula {
        SigmaFormula::Printed => rec.predicted.iter().map(|p| (p - eps) * (p - eps)).sum::<f64>() / n,
        SigmaFormula::Conventional => {
            rec.actual.iter().zip(rec.predicted.iter()).map(|(a, p)| ((a - p).abs() - eps).powi(2)).sum::<f64>() / n
        }
    };
    Ok((eps, var.sqrt()))
}

/// Per-metabolite mean absolute percentage error over entries with a
/// positive actual value; `None` where there are none.
pub fn mape_per_metabolite(rec: &EvaluationRecord) -> Vec<(String, Option<f64>)> {
    rec.labels
        .iter()
        .enumerate()
        .map(|(j, name)| {
            let mut sum = 0.0;
            let mut n = 0usize;
            for (a, p) in rec.actual.column(j).iter().zip(rec.predicted.column(j)) {
                if *a > 0.0 {
                    sum += 100.0 * (a - p).abs() / a;
                    n += 1;
                }
            }
            (name.clone(), (n > 0).then(|| sum / n as f64))
        })
        .collect()
}

/// Metabolite subset to report, optionally merging Glu and Gln first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reduction {
    /// Kept names, matched case-insensitively. [`GLX`] names the merged column.
    pub keep: Vec<String>,
    pub merge_glx: bool,
}

impl Reduction {
    /// From CLI text such as `"naa,gaba,glx"`.
    pub fn parse(keep: &str, merge_glx: bool) -> Result<Self> {
        let keep: Vec<String> = keep.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect();
        if keep.is_empty() {
            return Err(EvalError::InvalidReduction("no metabolites to keep".into()));
        }
        Ok(Self { keep, merge_glx })
    }
}

fn merge_glx_columns(labels: &[String], m: &Array2<f64>) -> Result<(Vec<String>, Array2<f64>)> {
    let find = |name: &str| labels.iter().position(|l| l.eq_ignore_ascii_case(name));
    let (Some(glu), Some(gln)) = (find("glu"), find("gln")) else {
        return Err(EvalError::InvalidReduction("GLX merge needs both Glu and Gln".into()));
    };
    let mut out_labels = Vec::new();
    let mut cols = Vec::new();
    for (j, l) in labels.iter().enumerate() {
        if j == glu {
            out_labels.push(GLX.to_string());
            cols.push(&m.column(glu) + &m.column(gln));
        } else if j != gln {
            out_labels.push(l.clone());
            cols.push(m.column(j).to_owned());
        }
    }
    let mut out = Array2::zeros((m.nrows(), cols.len()));
    for (j, c) in cols.iter().enumerate() {
        out.column_mut(j).assign(c);
    }
    Ok((out_labels, out))
}

/// Restricts a record to `reduction.keep` and renormalises each row to sum
/// to one. Rows whose actual or predicted kept values sum to zero are
/// dropped; their count is returned alongside.
pub fn rescale_reduced(rec: &EvaluationRecord, reduction: &Reduction) -> Result<(EvaluationRecord, usize)> {
    if reduction.keep.is_empty() {
        return Err(EvalError::InvalidReduction("no metabolites to keep".into()));
    }
    let (labels, actual, predicted) = if reduction.merge_glx {
        let (l, a) = merge_glx_columns(&rec.labels, &rec.actual)?;
        let (_, p) = merge_glx_columns(&rec.labels, &rec.predicted)?;
        (l, a, p)
    } else {
        (rec.labels.clone(), rec.actual.clone(), rec.predicted.clone())
    };
    let mut idx = Vec::new();
    for k in &reduction.keep {
        let j = labels
            .iter()
            .position(|l| l.eq_ignore_ascii_case(k))
            .ok_or_else(|| EvalError::InvalidReduction(format!("`{k}` is not among {labels:?}")))?;
        if idx.contains(&j) {
            return Err(EvalError::InvalidReduction(format!("`{k}` listed twice")));
        }
        idx.push(j);
    }
    idx.sort_unstable();
    let mut rows_a = Vec::new();
    let mut rows_p = Vec::new();
    let mut dropped = 0;
    for i in 0..actual.nrows() {
        let a: Vec<f64> = idx.iter().map(|&j| actual[[i, j]]).collect();
        let p: Vec<f64> = idx.iter().map(|&j| predicted[[i, j]]).collect();
        let (sa, sp): (f64, f64) = (a.iter().sum(), p.iter().sum());
        if sa <= 0.0 || sp <= 0.0 {
            dropped += 1;
            continue;
        }
        rows_a.extend(a.iter().map(|v| v / sa));
        rows_p.extend(p.iter().map(|v| v / sp));
    }
    let n = rows_a.len() / idx.len();
    let shape = (n, idx.len());
    let out = EvaluationRecord::new(
        idx.iter().map(|&j| labels[j].clone()).collect(),
        Array2::from_shape_vec(shape, rows_a).expect("row-major"),
        Array2::from_shape_vec(shape, rows_p).expect("row-major"),
    )?;
    Ok((out, dropped))
}
