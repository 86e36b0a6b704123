use thiserror::Error;

/// Errors raised across the simulation, estimation and analysis stages.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("degenerate fit: {0}")]
    DegenerateFit(String),

    #[error("divergent discounted sum: rho * spectral radius = {0} >= 1")]
    DivergentSum(f64),

    #[error("non-convergent pricing: {0}")]
    NonConvergentPricing(String),

    #[error("insufficient tail data: {have} observations above the tail level, need {need}")]
    InsufficientTailData { have: usize, need: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// True for errors caused by the configuration rather than the data.
    pub fn is_config_error(&self) -> bool {
        match self {
            Error::Config(_) | Error::InvalidParameter(_) | Error::InvalidArgument(_) => true,
            Error::Stage { source, .. } => source.is_config_error(),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
