//! Tracking on top of the GRM encoder: crops, synthetic sequences, training,
//! inference and evaluation.

pub mod checkpoint;
pub mod crop;
pub mod error;
pub mod eval;
pub mod optim;
pub mod scenario;
pub mod track;
pub mod train;

pub use checkpoint::Checkpoint;
pub use error::{Result, TrackerError};
