use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("matrix {name} is not positive (semi)definite: min eigenvalue {min_eigenvalue:e}")]
    NotPsd { name: String, min_eigenvalue: f64 },

    #[error("matrix {0} is not symmetric")]
    AsymmetricMatrix(String),

    #[error("matrix {name} contains non-finite entries")]
    NonFinite { name: String },

    #[error("innovation covariance is singular or ill-conditioned (condition {condition:e})")]
    SingularInnovation { condition: f64 },

    #[error("C_t does not exist: gamma right-hand side is indefinite (min eigenvalue {min_eigenvalue:e})")]
    IndefiniteGamma { min_eigenvalue: f64 },

    #[error("scalar EnSRF requires a scalar observation or diagonal R (m = {m})")]
    NotScalarObservation { m: usize },

    #[error("degenerate ensemble: anomaly matrix has no singular value above threshold")]
    DegenerateEnsemble,

    #[error("ensemble too small: N = {n_members}, need at least {required}")]
    EnsembleTooSmall { n_members: usize, required: usize },

    #[error("length mismatch for {what}: expected {expected}, found {found}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("gamma {0} outside [0, 1]")]
    InvalidGamma(f64),

    #[error("invalid variant: {0}")]
    InvalidVariant(String),

    #[error("time-varying model covers {available} steps, horizon {horizon} requested")]
    HorizonTooLong { horizon: usize, available: usize },

    #[error("step {step}: {source}")]
    AtStep {
        step: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn at_step(self, step: usize) -> Self {
        match self {
            e @ Error::AtStep { .. } => e,
            e => Error::AtStep {
                step,
                source: Box::new(e),
            },
        }
    }

    /// The error with any step annotation removed.
    pub fn root(&self) -> &Error {
        match self {
            Error::AtStep { source, .. } => source.root(),
            e => e,
        }
    }

    /// Whether the error is a numerical failure (existence or singularity)
    /// rather than a malformed input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self.root(),
            Error::SingularInnovation { .. }
                | Error::IndefiniteGamma { .. }
                | Error::DegenerateEnsemble
        )
    }
}
