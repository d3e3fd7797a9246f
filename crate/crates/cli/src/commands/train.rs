use std::io::Write;
use std::path::{Path, PathBuf};

use grm_tracker::train::{train, EpochStats, TrainOutput};
use log::info;
use serde::Serialize;

use super::{create_dir, opt_field, write_file, write_json};
use crate::config::RunConfig;
use crate::error::CliError;
use crate::TrainArgs;

pub const CHECKPOINT_FILE: &str = "checkpoint.grmc";
pub const LOSS_FILE: &str = "loss.csv";

#[derive(Debug, Serialize)]
pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub loss_csv: PathBuf,
    pub checkpoint_sha256: String,
    pub seed: u64,
    pub epochs: usize,
    pub final_loss: Option<f64>,
}

/// Per-epoch CSV: scalar losses, then the cross-relation fraction of every
/// encoder layer (empty for layers without a division).
pub fn loss_csv(history: &[EpochStats], depth: usize) -> String {
    let mut s = String::from("epoch,lr,loss,focal,giou,l1");
    for l in 1..=depth {
        s.push_str(&format!(",ea_fraction_layer{l}"));
    }
    s.push('\n');
    for h in history {
        s.push_str(&format!("{},{},{},{},{},{}", h.epoch, h.lr, h.loss, h.focal, h.giou, h.l1));
        for l in 0..depth {
            s.push(',');
            s.push_str(&opt_field(h.cross_fraction.get(l).copied().flatten()));
        }
        s.push('\n');
    }
    s
}

/// Trains `cfg` and writes the checkpoint and loss log into `dir`.
pub fn train_to_dir(cfg: &RunConfig, dir: &Path) -> Result<(TrainOutput, TrainSummary), CliError> {
    let tc = cfg.train_config();
    let output = train(&tc)?;
    create_dir(dir)?;
    let checkpoint = dir.join(CHECKPOINT_FILE);
    let loss = dir.join(LOSS_FILE);
    let bytes = output.checkpoint.to_bytes();
    write_file(&checkpoint, &bytes)?;
    write_file(&loss, loss_csv(&output.history, tc.model.depth).as_bytes())?;
    info!("wrote {}", checkpoint.display());
    let summary = TrainSummary {
        checkpoint,
        loss_csv: loss,
        checkpoint_sha256: output.checkpoint.digest(),
        seed: cfg.seed,
        epochs: output.history.len(),
        final_loss: output.history.last().map(|h| h.loss),
    };
    Ok((output, summary))
}

pub fn run(a: &TrainArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(&a.config)?;
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    if let Some(p) = a.policy {
        cfg.model.relation = p.into();
        cfg.validate()?;
    }
    let dir = a.out.clone().unwrap_or_else(|| cfg.out_dir.clone());
    let (_, summary) = train_to_dir(&cfg, &dir)?;
    write_json(out, &summary)
}
