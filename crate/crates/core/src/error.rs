use thiserror::Error;

pub type Result<T> = std::result::Result<T, PiciError>;

#[derive(Debug, Error)]
pub enum PiciError {
    #[error("invalid image: {0}")]
    InvalidImage(String),
    #[error("patch grid error: {0}")]
    PatchGrid(String),
    #[error("mask ratio {0} outside [0, 1)")]
    InvalidRatio(f64),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("cannot normalize a zero-norm vector")]
    ZeroNorm,
    #[error("temperature must be positive, got {0}")]
    InvalidTemperature(f64),
    #[error("invalid probability matrix: {0}")]
    InvalidProbability(String),
    #[error("cluster {cluster} received no probability mass in view {view}")]
    EmptyCluster { view: char, cluster: usize },
    #[error("metric input error: {0}")]
    Input(String),
    #[error("empty dataset: {0}")]
    EmptyDataset(String),
    #[error("non-finite loss in stage {stage} at epoch {epoch}, batch {batch}")]
    Divergence {
        stage: &'static str,
        epoch: usize,
        batch: usize,
    },
    #[error("stage error: {0}")]
    Stage(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
