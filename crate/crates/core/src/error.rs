use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("non-finite control at t = {t}: {detail}")]
    NonFiniteControl { t: f64, detail: String },

    #[error("degenerate flat output: speed {speed} below threshold")]
    DegenerateFlatness { speed: f64 },

    /// The reachability engine could not certify an enclosure. Never recovered
    /// silently: an unsound funnel is worse than no funnel.
    #[error("soundness failure at step {step} (t = {t}): {detail}")]
    Soundness { step: usize, t: f64, detail: String },

    #[error("funnel diverged out of the working box at step {step} (t = {t})")]
    Divergence { step: usize, t: f64 },

    #[error("no composable primitive available at step {step}")]
    NoComposablePrimitive { step: usize },

    #[error("contract violation: {0}")]
    ContractViolation(String),

    #[error("KL divergence is infinite: posterior puts mass {mass} on index {index} where the prior has none")]
    InfiniteKl { index: usize, mass: f64 },

    #[error("training diverged at iteration {iteration}")]
    TrainingDiverged { iteration: usize },

    #[error("stale artifact {path}: expected hash {expected}, found {found}")]
    StaleArtifact {
        path: String,
        expected: String,
        found: String,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed artifact {path}: {detail}")]
    Format { path: String, detail: String },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
