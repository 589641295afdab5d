use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("sampling exhausted: {0}")]
    SamplingExhausted(String),

    #[error("provider unavailable: {0}")]
    ProviderUnavailable(String),

    #[error("no imagery at ({lat:.6}, {lon:.6})")]
    NoImagery { lat: f64, lon: f64 },

    #[error("manifest build failed: {0}")]
    ManifestBuild(String),

    #[error("training diverged at epoch {epoch}, batch {batch}: loss = {loss}")]
    DivergedTraining { epoch: usize, batch: usize, loss: f64 },

    #[error("evaluation city {0} is present in the model's training classes")]
    Contamination(String),

    #[error("percentages undefined: no locations were evaluated")]
    UndefinedPercentage,

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
