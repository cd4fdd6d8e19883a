//! Metabolite quantification for edited MR spectra with a convolutional
//! network trained on simulated basis mixtures.
//!
//! The pipeline runs basis synthesis ([`basis`]), quasi-random mixture
//! generation ([`datagen`]), input assembly ([`preprocess`]), network
//! training and inference ([`nn`]), with a non-negative least-squares
//! baseline ([`fitting`]) and accuracy reporting ([`eval`]).

pub mod archive;
pub mod basis;
pub mod datagen;
pub mod eval;
pub mod fitting;
pub mod nn;
pub mod preprocess;
pub mod signal;

use thiserror::Error;

pub use archive::ArchiveError;
pub use basis::{build_basis, default_definitions, parse_definitions, BasisError, BasisSet, MetaboliteModel};
pub use datagen::{generate_dataset, ConcentrationVector, Dataset, DatasetSpec, DatagenError, Sample, Split};
pub use eval::{evaluate, EvalError, EvaluationRecord, EvaluationReport, PhantomManifest, Quantifier, Reduction};
pub use fitting::{nnls_fit, FitError, FitResult, NnlsFitter};
pub use nn::{
    build_network, Checkpoint, Network, NetworkConfig, NnError, ReductionVariant, SizeVariant, TrainConfig,
    TrainOutcome,
};
pub use preprocess::{InputConfig, InputTensor, PreprocessError, Scan};
pub use signal::{AcquisitionKind, Component, PpmWindow, SignalError, Spectrum, TimeSignal};

/// Any error raised by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Signal(#[from] SignalError),
    #[error(transparent)]
    Basis(#[from] BasisError),
    #[error(transparent)]
    Datagen(#[from] DatagenError),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Fit(#[from] FitError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Archive(#[from] ArchiveError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
