use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Shape(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("matrix is not Hermitian (asymmetry {asym:.3e} > tolerance {tol:.3e})")]
    NonHermitian { asym: f64, tol: f64 },
    #[error("eigenvalue iteration did not converge after {0} iterations")]
    NonConvergence(usize),
    #[error("matrix is nearly defective (eigenvector condition {0:.3e})")]
    NearDefective(f64),
    #[error("matrix is not positive semidefinite (eigenvalue {0:.3e})")]
    NotPsd(f64),
    #[error("matrix is singular (pivot {pivot:.3e} at column {col})")]
    Singular { pivot: f64, col: usize },
    #[error("FFT length {0} is not a power of two")]
    BadLength(usize),
    #[error("eigenvalue {index} lies on the imaginary axis (Re = {re:.3e})")]
    OnImaginaryAxis { index: usize, re: f64 },
    #[error("system is not asymptotically stable (max Re = {0:.3e})")]
    Unstable(f64),
    #[error("evaluation point hits a pole (distance {0:.3e})")]
    PoleHit(f64),
    #[error("system is nearly uncontrollable or unobservable (sigma_min = {sigma_min:.3e}, rank tolerance {tol:.3e})")]
    NearlyUncontrollable { sigma_min: f64, tol: f64 },
    #[error("invalid reduction order {r} for system of order {n}")]
    BadOrder { r: usize, n: usize },
    #[error("eigenvalue {index} has non-negative real part {re:.3e}; EXP parameterization cannot represent it")]
    PositiveRealPart { index: usize, re: f64 },
    #[error("exponent overflow while materializing SSM (|L*lambda*delta| = {0:.3e})")]
    Overflow(f64),
    #[error("token {token} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { token: usize, vocab: usize },
    #[error("label {label} out of range for {n_classes} classes")]
    BadLabel { label: usize, n_classes: usize },
    #[error("non-finite gradient in tensor {0}")]
    NonFiniteGradient(String),
    #[error("parse error at row {row}: {msg}")]
    Parse { row: usize, msg: String },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("feature (layer {layer}, h {feature}): {source}")]
    Feature {
        layer: usize,
        feature: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("io error: {0}")]
    Io(String),
}

impl Error {
    /// Numerical failures (as opposed to bad input or configuration).
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::Feature { source, .. } => source.is_numerical(),
            Error::NonHermitian { .. }
            | Error::NonConvergence(_)
            | Error::NearDefective(_)
            | Error::NotPsd(_)
            | Error::Singular { .. }
            | Error::OnImaginaryAxis { .. }
            | Error::Unstable(_)
            | Error::PoleHit(_)
            | Error::NearlyUncontrollable { .. }
            | Error::PositiveRealPart { .. }
            | Error::Overflow(_)
            | Error::NonFinite(_)
            | Error::NonFiniteGradient(_) => true,
            _ => false,
        }
    }

    pub(crate) fn at_feature(self, layer: usize, feature: usize) -> Error {
        Error::Feature { layer, feature, source: Box::new(self) }
    }

    /// Re-tags a per-feature error with its layer index.
    pub(crate) fn in_layer(self, layer: usize) -> Error {
        match self {
            Error::Feature { feature, source, .. } => Error::Feature { layer, feature, source },
            other => other,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
