use std::io::Write;

use grm_core::head::BBox;
use grm_tracker::eval::{evaluate, evaluate_checkpoint, held_out};
use grm_tracker::track::{FixedTracker, OracleTracker};
use grm_tracker::Checkpoint;

use super::write_json;
use crate::config::RunConfig;
use crate::error::CliError;
use crate::{EvalArgs, Stub};

/// A box far outside every canvas; never overlaps a target.
pub const WRONG_BOX: BBox = BBox {
    cx: -100.0,
    cy: -100.0,
    w: 10.0,
    h: 10.0,
};

pub fn run(a: &EvalArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let suite = a.suite.map(Into::into).unwrap_or(cfg.eval.suite);
    let sequences = held_out(suite, cfg.eval.sequences, cfg.eval.frames)?;
    let metrics = match (a.stub, &a.checkpoint) {
        (Some(Stub::Oracle), _) => evaluate(&mut OracleTracker, &sequences)?,
        (Some(Stub::Fixed), _) => evaluate(&mut FixedTracker(WRONG_BOX), &sequences)?,
        (None, Some(path)) => {
            let ckpt = Checkpoint::load(path)?;
            evaluate_checkpoint(&ckpt, &cfg.data.crop, &sequences)?
        }
        (None, None) => return Err(CliError::Config("eval needs a checkpoint or --stub".into())),
    };
    write_json(out, &metrics)
}
