//! Sequence-level tracking metrics.

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::crop::CropConfig;
use crate::error::{Result, TrackerError};
use crate::scenario::{generate_scenario, Sequence, Suite};
use crate::track::{GrmTracker, Tracker};
use crate::train::eval_scenario_seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Average overlap: per-sequence mean IoU, averaged over sequences.
    #[serde(rename = "mean_IoU")]
    pub mean_iou: f64,
    /// Fraction of frames with IoU above 0.5, averaged over sequences.
    pub sr50: f64,
    pub sr75: f64,
    /// Mean cross-relation token fraction per encoder layer.
    pub ea_fraction_per_layer: Vec<Option<f64>>,
    pub sequences: usize,
    pub frames: usize,
}

/// Held-out sequences of a suite; their seeds never occur in training.
pub fn held_out(suite: Suite, count: usize, frames: usize) -> Result<Vec<Sequence>> {
    (0..count)
        .map(|i| generate_scenario(&suite.scenario(eval_scenario_seed(i), frames)))
        .collect()
}

/// Runs `tracker` over every sequence, initialized from the first frame's
/// ground truth, and scores frames 1 onwards.
pub fn evaluate<T: Tracker + ?Sized>(tracker: &mut T, sequences: &[Sequence]) -> Result<Metrics> {
    let mut per_seq = Vec::new();
    let mut cross: Vec<(f64, usize)> = Vec::new();
    let mut frames = 0;
    for seq in sequences {
        if seq.len() < 2 {
            return Err(TrackerError::Scenario("evaluation needs at least two frames".into()));
        }
        let first = seq.frame(0);
        tracker.init(&first, seq.gt(0))?;
        let mut ious = Vec::with_capacity(seq.len() - 1);
        for t in 1..seq.len() {
            let pred = tracker.update(&seq.frame(t))?;
            ious.push(pred.bbox.iou(&seq.gt(t)));
            if cross.len() < pred.cross_fraction.len() {
                cross.resize(pred.cross_fraction.len(), (0.0, 0));
            }
            for (acc, f) in cross.iter_mut().zip(&pred.cross_fraction) {
                if let Some(f) = f {
                    acc.0 += f;
                    acc.1 += 1;
                }
            }
        }
        frames += ious.len();
        per_seq.push(ious);
    }
    let n = per_seq.len().max(1) as f64;
    let avg = |f: &dyn Fn(&[f64]) -> f64| per_seq.iter().map(|s| f(s)).sum::<f64>() / n;
    let frac_above = |s: &[f64], t: f64| s.iter().filter(|&&v| v > t).count() as f64 / s.len() as f64;
    Ok(Metrics {
        mean_iou: avg(&|s| s.iter().sum::<f64>() / s.len() as f64),
        sr50: avg(&|s| frac_above(s, 0.5)),
        sr75: avg(&|s| frac_above(s, 0.75)),
        ea_fraction_per_layer: cross.iter().map(|&(s, c)| (c > 0).then(|| s / c as f64)).collect(),
        sequences: per_seq.len(),
        frames,
    })
}

pub fn evaluate_checkpoint(ckpt: &Checkpoint, crop: &CropConfig, sequences: &[Sequence]) -> Result<Metrics> {
    evaluate(&mut GrmTracker::new(ckpt, *crop), sequences)
}
