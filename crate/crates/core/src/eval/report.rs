use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::{s, Array2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{mape_per_metabolite, mean_abs_error_with, rescale_reduced, Reduction, SigmaFormula};
use super::stats::{linregress, RegressionStats};
use super::{EvalError, EvaluationRecord, Result};
use crate::datagen::{Dataset, Sample};
use crate::fitting::NnlsFitter;
use crate::nn::Checkpoint;
use crate::preprocess::{assemble_batch, assemble_spectra, InputConfig, Scan};
use crate::signal::Spectrum;

/// Anything that maps windowed spectra to relative concentrations.
pub trait Quantifier: Sync {
    fn name(&self) -> String;
    /// Output order.
    fn metabolites(&self) -> &[String];
    fn input(&self) -> &InputConfig;
    fn quantify(&self, spectra: &[&Spectrum]) -> Result<Vec<f64>>;

    /// One row per sample, in [`Quantifier::metabolites`] order.
    fn quantify_samples(&self, samples: &[Sample]) -> Result<Array2<f64>> {
        let rows = samples
            .par_iter()
            .map(|s| self.quantify(&[&s.spectra.edit_off, &s.spectra.edit_on, &s.spectra.difference]))
            .collect::<Result<Vec<_>>>()?;
        let k = self.metabolites().len();
        Ok(Array2::from_shape_vec((rows.len(), k), rows.concat()).map_err(|e| EvalError::Shape(e.to_string()))?)
    }
}

impl Quantifier for Checkpoint {
    fn name(&self) -> String {
        match self.network.config() {
            Some(c) => format!("network/{}/{}", c.size, c.reduction),
            None => "network".into(),
        }
    }

    fn metabolites(&self) -> &[String] {
        &self.metabolites
    }

    fn input(&self) -> &InputConfig {
        &self.input
    }

    fn quantify(&self, spectra: &[&Spectrum]) -> Result<Vec<f64>> {
        let x = assemble_spectra(spectra, &self.input)?;
        Ok(self.network.predict_tensor(&x)?)
    }

    fn quantify_samples(&self, samples: &[Sample]) -> Result<Array2<f64>> {
        const CHUNK: usize = 256;
        let mut out = Array2::zeros((samples.len(), self.metabolites.len()));
        for (i, chunk) in samples.chunks(CHUNK).enumerate() {
            let x = assemble_batch(chunk, &self.input)?;
            let p = self.network.predict(&x)?;
            out.slice_mut(s![i * CHUNK..i * CHUNK + chunk.len(), ..]).assign(&p);
        }
        Ok(out)
    }
}

impl Quantifier for NnlsFitter {
    fn name(&self) -> String {
        "nnls".into()
    }

    fn metabolites(&self) -> &[String] {
        NnlsFitter::metabolites(self)
    }

    fn input(&self) -> &InputConfig {
        NnlsFitter::input(self)
    }

    fn quantify(&self, spectra: &[&Spectrum]) -> Result<Vec<f64>> {
        Ok(self.fit_spectra(spectra)?.values())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaboliteSummary {
    pub name: String,
    /// Percent; absent when no sample has a positive actual value.
    pub mape: Option<f64>,
    /// Predicted against actual; absent when either is constant.
    pub regression: Option<RegressionStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub model: String,
    pub dataset: String,
    pub records: usize,
    /// Rows skipped by the reduction because their kept values sum to zero.
    pub excluded_records: usize,
    pub reduction: Option<Reduction>,
    pub metabolites: Vec<String>,
    pub epsilon: f64,
    /// Printed spread formula.
    pub sigma: f64,
    /// Spread of the absolute errors.
    pub sigma_abs_error: f64,
    pub per_metabolite: Vec<MetaboliteSummary>,
    pub sample_names: Vec<String>,
    pub actual: Vec<Vec<f64>>,
    pub predicted: Vec<Vec<f64>>,
}

impl EvaluationReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn mape(&self, name: &str) -> Option<f64> {
        self.per_metabolite.iter().find(|m| m.name == name).and_then(|m| m.mape)
    }
}

fn rows(m: &Array2<f64>) -> Vec<Vec<f64>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

/// Summarises a record, applying `reduction` first when given.
pub fn evaluate_record(
    rec: &EvaluationRecord,
    reduction: Option<&Reduction>,
    model: &str,
    dataset: &str,
    sample_names: Vec<String>,
) -> Result<EvaluationReport> {
    let (rec, excluded) = match reduction {
        Some(r) => rescale_reduced(rec, r)?,
        None => (rec.clone(), 0),
    };
    if rec.samples() == 0 {
        return Err(EvalError::InvalidRecord("no samples left to evaluate".into()));
    }
    let (epsilon, sigma) = mean_abs_error_with(&rec, SigmaFormula::Printed)?;
    let (_, sigma_abs_error) = mean_abs_error_with(&rec, SigmaFormula::Conventional)?;
    let per_metabolite = mape_per_metabolite(&rec)
        .into_iter()
        .enumerate()
        .map(|(j, (name, mape))| {
            let a = rec.actual.column(j).to_vec();
            let p = rec.predicted.column(j).to_vec();
            MetaboliteSummary { name, mape, regression: linregress(&a, &p).ok() }
        })
        .collect();
    let sample_names = if excluded == 0 && sample_names.len() == rec.samples() { sample_names } else { Vec::new() };
    Ok(EvaluationReport {
        model: model.to_string(),
        dataset: dataset.to_string(),
        records: rec.samples(),
        excluded_records: excluded,
        reduction: reduction.cloned(),
        metabolites: rec.labels.clone(),
        epsilon,
        sigma,
        sigma_abs_error,
        per_metabolite,
        sample_names,
        actual: rows(&rec.actual),
        predicted: rows(&rec.predicted),
    })
}

/// Column order mapping from a quantifier's outputs onto `labels`.
fn reorder(q: &dyn Quantifier, labels: &[String], predicted: Array2<f64>) -> Result<Array2<f64>> {
    let names = q.metabolites();
    let idx = labels
        .iter()
        .map(|l| {
            names.iter().position(|n| n == l).ok_or_else(|| EvalError::Shape(format!("{} does not report {l}", q.name())))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Array2::from_shape_fn((predicted.nrows(), labels.len()), |(i, j)| predicted[[i, idx[j]]]))
}

/// Predicts every sample of a labelled dataset and summarises the result.
pub fn evaluate(q: &dyn Quantifier, dataset: &Dataset, reduction: Option<&Reduction>, name: &str) -> Result<EvaluationReport> {
    if dataset.is_empty() {
        return Err(EvalError::InvalidRecord("dataset is empty".into()));
    }
    let predicted = reorder(q, &dataset.metabolites, q.quantify_samples(&dataset.samples)?)?;
    let actual = Array2::from_shape_vec((dataset.len(), dataset.metabolites.len()), dataset.labels().concat())
        .map_err(|e| EvalError::Shape(e.to_string()))?;
    let rec = EvaluationRecord::new(dataset.metabolites.clone(), actual, predicted.mapv(|v| v.max(0.0)))?;
    evaluate_record(&rec, reduction, &q.name(), name, Vec::new())
}

/// One scanned phantom with its known composition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomEntry {
    pub name: String,
    /// Scan file, relative to the manifest's directory unless absolute.
    pub scan: PathBuf,
    /// Millimolar concentrations per metabolite.
    pub concentrations_mm: BTreeMap<String, f64>,
}

impl PhantomEntry {
    /// Molarities divided by their sum, in `order`; absent names read as 0.
    pub fn relative(&self, order: &[String]) -> Result<Vec<f64>> {
        if let Some(n) = self.concentrations_mm.keys().find(|k| !order.contains(k)) {
            return Err(EvalError::InvalidRecord(format!("phantom {} lists unknown metabolite {n}", self.name)));
        }
        let v: Vec<f64> = order.iter().map(|m| self.concentrations_mm.get(m).copied().unwrap_or(0.0)).collect();
        let total: f64 = v.iter().sum();
        if !(total > 0.0) || v.iter().any(|c| *c < 0.0) {
            return Err(EvalError::InvalidRecord(format!("phantom {} has no positive concentrations", self.name)));
        }
        Ok(v.iter().map(|c| c / total).collect())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PhantomManifest {
    pub phantoms: Vec<PhantomEntry>,
}

impl PhantomManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let mut m: PhantomManifest = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        let dir = path.parent().unwrap_or(Path::new("."));
        for e in &mut m.phantoms {
            if e.scan.is_relative() {
                e.scan = dir.join(&e.scan);
            }
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    /// The water/gel series with Glu 12 mM, Gln 3 mM, NAA 15 mM, Cr 8 mM
    /// and the given GABA levels.
    pub fn glx_series(prefix: &str, gaba_mm: &[f64], scan_dir: &Path) -> Self {
        let phantoms = gaba_mm
            .iter()
            .enumerate()
            .map(|(i, &g)| PhantomEntry {
                name: format!("{prefix}-{i:02}"),
                scan: scan_dir.join(format!("{prefix}-{i:02}.scan")),
                concentrations_mm: [("NAA", 15.0), ("Cr", 8.0), ("Glu", 12.0), ("Gln", 3.0), ("GABA", g)]
                    .into_iter()
                    .map(|(k, v)| (k.to_string(), v))
                    .collect(),
            })
            .collect();
        Self { phantoms }
    }
}

/// Quantifies the scans of a phantom manifest. Per-scan failures are
/// collected rather than aborting; the report covers the successful scans.
pub fn evaluate_phantoms(
    q: &dyn Quantifier,
    manifest: &PhantomManifest,
    reduction: Option<&Reduction>,
    name: &str,
) -> Result<(EvaluationReport, Vec<EvalError>)> {
    let labels = q.metabolites().to_vec();
    let mut actual = Vec::new();
    let mut predicted = Vec::new();
    let mut names = Vec::new();
    let mut failures = Vec::new();
    for e in &manifest.phantoms {
        let one = || -> Result<(Vec<f64>, Vec<f64>)> {
            let truth = e.relative(&labels)?;
            let scan = Scan::load(&e.scan)?;
            let spectra = scan.spectra(q.input())?;
            let refs: Vec<&Spectrum> = spectra.iter().collect();
            Ok((truth, q.quantify(&refs)?))
        };
        match one() {
            Ok((a, p)) => {
                actual.extend(a);
                predicted.extend(p.into_iter().map(|v| v.max(0.0)));
                names.push(e.name.clone());
            }
            Err(err) => failures.push(EvalError::File { path: e.scan.display().to_string(), source: Box::new(err) }),
        }
    }
    let n = names.len();
    let shape = (n, labels.len());
    let shape_err = |e: ndarray::ShapeError| EvalError::Shape(e.to_string());
    let rec = EvaluationRecord::new(
        labels,
        Array2::from_shape_vec(shape, actual).map_err(shape_err)?,
        Array2::from_shape_vec(shape, predicted).map_err(shape_err)?,
    )?;
    Ok((evaluate_record(&rec, reduction, &q.name(), name, names)?, failures))
}
