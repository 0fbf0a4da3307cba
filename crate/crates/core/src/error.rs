use tecswin_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("invalid scale-shift variant id {0} (expected 1..=10)")]
    InvalidVariant(u8),
    #[error("invalid schedule: {0}")]
    Schedule(String),
    #[error("timestep {t} outside schedule range 0..={max}")]
    TimestepRange { t: usize, max: usize },
    #[error("{0}")]
    Text(String),
    #[error("search failed at stage {stage}: {source}")]
    Search {
        stage: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("metric failed: {0}")]
    Metric(String),
    #[error("matrix square root did not converge (residual {residual:e})")]
    MatrixSqrt { residual: f64 },
    #[error("training diverged at step {step}: loss {loss} (lr {lr:e})")]
    Diverged { step: usize, loss: f32, lr: f64 },
    #[error("image error: {0}")]
    Image(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
