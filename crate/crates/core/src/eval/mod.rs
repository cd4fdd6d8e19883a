//! Accuracy metrics, regression statistics and evaluation reports.

mod metrics;
mod report;
mod stats;

use ndarray::Array2;
use thiserror::Error;

pub use self::metrics::{
    mape_per_metabolite, mean_abs_error, mean_abs_error_with, rescale_reduced, Reduction, SigmaFormula, GLX,
};
pub use self::report::{
    evaluate, evaluate_phantoms, evaluate_record, EvaluationReport, MetaboliteSummary, PhantomEntry, PhantomManifest,
    Quantifier,
};
pub use self::stats::{linregress, regularized_incomplete_beta, RegressionStats};

use crate::datagen::DatagenError;
use crate::fitting::FitError;
use crate::nn::NnError;
use crate::preprocess::PreprocessError;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid reduction: {0}")]
    InvalidReduction(String),
    #[error("regression needs at least three points and non-constant x")]
    DegenerateRegression,
    #[error("invalid record: {0}")]
    InvalidRecord(String),
    #[error("{path}: {source}")]
    File { path: String, source: Box<EvalError> },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed document: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Fit(#[from] FitError),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error(transparent)]
    Datagen(#[from] DatagenError),
}

pub type Result<T, E = EvalError> = std::result::Result<T, E>;

/// Actual and predicted relative concentrations, one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationRecord {
    pub labels: Vec<String>,
    pub actual: Array2<f64>,
    pub predicted: Array2<f64>,
}

impl EvaluationRecord {
    pub fn new(labels: Vec<String>, actual: Array2<f64>, predicted: Array2<f64>) -> Result<Self> {
        if actual.dim() != predicted.dim() || actual.ncols() != labels.len() {
            return Err(EvalError::Shape(format!(
                "actual {:?}, predicted {:?}, {} labels",
                actual.dim(),
                predicted.dim(),
                labels.len()
            )));
        }
        if let Some(v) = actual.iter().chain(predicted.iter()).find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(EvalError::InvalidRecord(format!("concentration {v} is negative or not finite")));
        }
        Ok(Self { labels, actual, predicted })
    }

    pub fn samples(&self) -> usize {
        self.actual.nrows()
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == name)
    }
}
