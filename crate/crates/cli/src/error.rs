use std::fmt;
use std::path::Path;

use mrsquant_core::{
    ArchiveError, BasisError, DatagenError, EvalError, FitError, NnError, PreprocessError, SignalError,
};

/// Failure classes, each with its own exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Usage,
    Data,
    Numerical,
}

impl Kind {
    pub fn exit_code(self) -> u8 {
        match self {
            Kind::Usage => 1,
            Kind::Data => 2,
            Kind::Numerical => 3,
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub kind: Kind,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self { kind: Kind::Usage, message: message.into() }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self { kind: Kind::Data, message: message.into() }
    }

    /// Prefixes the message with the file it concerns.
    pub fn at(self, path: &Path) -> Self {
        Self { kind: self.kind, message: format!("{}: {}", path.display(), self.message) }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

fn eval_kind(e: &EvalError) -> Kind {
    match e {
        EvalError::DegenerateRegression => Kind::Numerical,
        EvalError::File { source, .. } => eval_kind(source),
        EvalError::Nn(e) => nn_kind(e),
        EvalError::Fit(e) => fit_kind(e),
        _ => Kind::Data,
    }
}

fn nn_kind(e: &NnError) -> Kind {
    match e {
        NnError::Divergence { .. } => Kind::Numerical,
        NnError::InvalidConfig(_) => Kind::Usage,
        _ => Kind::Data,
    }
}

fn fit_kind(e: &FitError) -> Kind {
    match e {
        FitError::Convergence { .. } => Kind::Numerical,
        _ => Kind::Data,
    }
}

macro_rules! from_core {
    ($($ty:ty => $kind:expr),* $(,)?) => {
        $(impl From<$ty> for CliError {
            fn from(e: $ty) -> Self {
                #[allow(clippy::redundant_closure_call)]
                let kind = ($kind)(&e);
                Self { kind, message: e.to_string() }
            }
        })*
    };
}

from_core! {
    SignalError => |_: &SignalError| Kind::Data,
    BasisError => |_: &BasisError| Kind::Data,
    DatagenError => |e: &DatagenError| match e {
        DatagenError::InvalidArgument(_) => Kind::Usage,
        _ => Kind::Data,
    },
    PreprocessError => |_: &PreprocessError| Kind::Data,
    ArchiveError => |_: &ArchiveError| Kind::Data,
    NnError => nn_kind,
    FitError => fit_kind,
    EvalError => eval_kind,
    std::io::Error => |_: &std::io::Error| Kind::Data,
    serde_json::Error => |_: &serde_json::Error| Kind::Data,
}
