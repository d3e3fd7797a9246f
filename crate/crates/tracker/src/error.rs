use thiserror::Error;

pub type Result<T, E = TrackerError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum TrackerError {
    #[error(transparent)]
    Core(#[from] grm_core::Error),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid box: {0}")]
    InvalidBox(String),

    #[error("invalid scenario: {0}")]
    Scenario(String),

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("non-finite loss at epoch {epoch}, step {step}{}: {source}", layer.map(|l| format!(", encoder layer {l}")).unwrap_or_default())]
    NonFinite {
        epoch: usize,
        step: usize,
        layer: Option<usize>,
        #[source]
        source: grm_core::Error,
    },

    #[error("tracker used before initialization")]
    Uninitialized,
}
