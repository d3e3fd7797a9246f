//! Supervised training on (template, search) pairs cut from synthetic sequences.

use grm_core::head::{BBox, LossConfig};
use grm_core::model::{sample_loss, GrmParams, ModelConfig, Sample};
use grm_core::nn::{num_params, Module};
use grm_core::relation::{DivisionSampler, GumbelConfig, GumbelMode};
use grm_core::{Error, Tape, Tensor};
use log::{debug, info};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::crop::{crop_search, crop_template, CropConfig};
use crate::error::{Result, TrackerError};
use crate::optim::{AdamW, AdamWConfig};
use crate::scenario::{generate_scenario, Sequence, Suite};

/// Training scenarios use seeds below this; evaluation seeds start here.
pub const EVAL_SEED_BASE: u64 = 1 << 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub suite: Suite,
    /// Number of distinct training sequences.
    pub scenarios: usize,
    pub frames: usize,
    /// Template and search frames are `1..=max_gap` frames apart.
    pub max_gap: usize,
    /// Search-crop center shift, uniform in ± this many target sides per axis.
    pub center_jitter: f64,
    /// Search-crop size jitter, log-uniform in ± this.
    pub scale_jitter: f64,
    pub crop: CropConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            suite: Suite::Easy,
            scenarios: 200,
            frames: 30,
            max_gap: 10,
            center_jitter: 0.5,
            scale_jitter: 0.2,
            crop: CropConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub pairs_per_epoch: usize,
    /// Pairs whose gradients are averaged into one optimizer step.
    pub batch_size: usize,
    pub lr: f64,
    /// Epoch (0-based) from which the rate is multiplied by `decay_factor`;
    /// defaults to 80% of `epochs`.
    pub decay_epoch: Option<usize>,
    pub decay_factor: f64,
    pub optimizer: AdamWConfig,
    pub gumbel: GumbelConfig,
    pub loss: LossConfig,
    pub model: ModelConfig,
    pub data: DataConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 40,
            pairs_per_epoch: 500,
            batch_size: 8,
            lr: 1e-3,
            decay_epoch: None,
            decay_factor: 0.1,
            optimizer: AdamWConfig::default(),
            gumbel: GumbelConfig::default(),
            loss: LossConfig::default(),
            model: ModelConfig::default(),
            data: DataConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.gumbel.validate()?;
        self.loss.weights.validate()?;
        self.optimizer.validate()?;
        self.data.crop.validate()?;
        let bad = |msg: String| Err(TrackerError::Config(msg));
        if self.gumbel.mode != GumbelMode::Train {
            return bad("training needs gumbel.mode = train".into());
        }
        if self.pairs_per_epoch == 0 || self.batch_size == 0 {
            return bad("pairs_per_epoch and batch_size must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.decay_factor > 0.0 && self.decay_factor.is_finite()) {
            return bad(format!("lr = {} and decay_factor = {} must be positive", self.lr, self.decay_factor));
        }
        if let Some(d) = self.decay_epoch {
            if d >= self.epochs {
                return bad(format!("decay_epoch = {d} must be below epochs = {}", self.epochs));
            }
        }
        let d = &self.data;
        if d.scenarios == 0 || d.max_gap == 0 || d.frames <= d.max_gap {
            return bad(format!(
                "data needs scenarios > 0 and frames > max_gap > 0 (got {}, {}, {})",
                d.scenarios, d.frames, d.max_gap
            ));
        }
        if !(d.center_jitter >= 0.0 && d.center_jitter <= 1.0) || !(d.scale_jitter >= 0.0 && d.scale_jitter <= 1.0) {
            return bad("jitter amounts must lie in [0, 1]".into());
        }
        Ok(())
    }

    /// The smoke configuration: C=32, two layers, 50 pairs, 5 epochs.
    pub fn smoke() -> Self {
        let mut model = ModelConfig::default();
        model.patch.embed_dim = 32;
        model.depth = 2;
        model.num_heads = 2;
        model.division_layers = vec![2];
        Self {
            epochs: 5,
            pairs_per_epoch: 50,
            batch_size: 5,
            model,
            data: DataConfig {
                scenarios: 20,
                ..DataConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn decay_epoch(&self) -> usize {
        self.decay_epoch.unwrap_or(self.epochs * 4 / 5)
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch >= self.decay_epoch() {
            self.lr * self.decay_factor
        } else {
            self.lr
        }
    }
}

/// SplitMix64 finalizer; spreads nearby integers over the full range.
pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of training sequence `i`; always below [`EVAL_SEED_BASE`].
pub fn train_scenario_seed(seed: u64, i: usize) -> u64 {
    mix(mix(seed) ^ i as u64) % EVAL_SEED_BASE
}

/// Seed of held-out sequence `i`.
pub fn eval_scenario_seed(i: usize) -> u64 {
    EVAL_SEED_BASE + i as u64
}

pub fn training_sequences(cfg: &TrainConfig) -> Result<Vec<Sequence>> {
    (0..cfg.data.scenarios)
        .map(|i| generate_scenario(&cfg.data.suite.scenario(train_scenario_seed(cfg.seed, i), cfg.data.frames)))
        .collect()
}

/// Cuts one training pair out of `seq`.
pub fn make_pair<R: Rng>(seq: &Sequence, cfg: &TrainConfig, rng: &mut R) -> Result<Sample> {
    let d = &cfg.data;
    let patch = &cfg.model.patch;
    let gap = rng.random_range(1..=d.max_gap);
    let t = rng.random_range(0..seq.len() - gap);
    let z_frame = seq.frame(t);
    let (template, _) = crop_template(&z_frame.image, &seq.gt(t), &d.crop, patch.template_size)?;

    let gt = seq.gt(t + gap);
    let side = (gt.w * gt.h).sqrt();
    let mut shift = || rng.random_range(-1.0..=1.0) * d.center_jitter * side;
    let (dx, dy) = (shift(), shift());
    let scale = (rng.random_range(-1.0..=1.0) * d.scale_jitter).exp();
    let [width, height] = seq.spec.canvas;
    let anchor = BBox::new(
        (gt.cx + dx).clamp(0.0, width as f64),
        (gt.cy + dy).clamp(0.0, height as f64),
        gt.w * scale,
        gt.h * scale,
    );
    let x_frame = seq.frame(t + gap);
    let (search, record) = crop_search(&x_frame.image, &anchor, &d.crop, patch.search_size)?;
    Ok(Sample {
        template,
        search,
        gt: record.to_crop(&gt),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub focal: f64,
    pub giou: f64,
    pub l1: f64,
    /// Mean fraction of search tokens sent to the cross-relation category,
    /// per encoder layer (`None` for layers without a division).
    pub cross_fraction: Vec<Option<f64>>,
}

pub struct TrainOutput {
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochStats>,
}

fn nonfinite(epoch: usize, step: usize, e: Error) -> TrackerError {
    let layer = match &e {
        Error::Layer { layer, .. } => Some(*layer),
        _ => None,
    };
    match e.root() {
        Error::NonFinite { .. } => TrackerError::NonFinite {
            epoch,
            step,
            layer,
            source: e,
        },
        _ => TrackerError::Core(e),
    }
}

/// The parameters `train` starts from.
pub fn init_params(cfg: &TrainConfig) -> Result<GrmParams> {
    Ok(GrmParams::init(&cfg.model, &mut ChaCha8Rng::seed_from_u64(mix(cfg.seed)))?)
}

/// Trains from a seeded initialization.
pub fn train(cfg: &TrainConfig) -> Result<TrainOutput> {
    cfg.validate()?;
    train_from(cfg, init_params(cfg)?)
}

/// Trains starting from `params`. Deterministic in `(cfg, params)`.
pub fn train_from(cfg: &TrainConfig, mut params: GrmParams) -> Result<TrainOutput> {
    cfg.validate()?;
    info!(
        "training {} parameters for {} epochs x {} pairs",
        num_params(&params),
        cfg.epochs,
        cfg.pairs_per_epoch
    );
    let sequences = training_sequences(cfg)?;
    let mut sizes = Vec::new();
    params.visit("", &mut |_, t| sizes.push(t.len()));
    let mut opt = AdamW::new(cfg.optimizer, sizes.iter().copied());
    let depth = cfg.model.depth;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step = 0;

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed ^ mix(epoch as u64 + 1)));
        let mut sums = [0.0; 4];
        let mut cross = vec![(0.0, 0usize); depth];
        let mut grads: Vec<Vec<f64>> = sizes.iter().map(|&n| vec![0.0; n]).collect();
        let mut in_batch = 0;

        for pair in 0..cfg.pairs_per_epoch {
            let seq = &sequences[rng.random_range(0..sequences.len())];
            let sample = make_pair(seq, cfg, &mut rng)?;
            let gumbel = GumbelConfig {
                rng_seed: mix(cfg.gumbel.rng_seed ^ mix(cfg.seed) ^ (step as u64).wrapping_mul(0x1000_0001) ^ pair as u64),
                ..cfg.gumbel
            };
            let mut sampler = DivisionSampler::new(&gumbel)?;
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape);
            let (terms, out) = sample_loss(&mut tape, &bound, &cfg.model, &sample, &cfg.loss, &mut sampler)
                .map_err(|e| nonfinite(epoch, step, e))?;
            tape.backward(terms.total).map_err(|e| nonfinite(epoch, step, e))?;

            let mut k = 0;
            let mut finite = true;
            bound.visit("", &mut |_, v| {
                if let Some(g) = tape.grad(*v) {
                    for (acc, x) in grads[k].iter_mut().zip(g.data()) {
                        *acc += x;
                    }
                    finite &= g.is_finite();
                }
                k += 1;
            });
            if !finite {
                return Err(nonfinite(epoch, step, Error::NonFinite { op: "gradient" }));
            }
            for (s, v) in sums.iter_mut().zip([tape.value(terms.total).data()[0], terms.focal, terms.giou, terms.l1]) {
                *s += v;
            }
            for (acc, d) in cross.iter_mut().zip(&out.divisions) {
                if let Some(d) = d {
                    acc.0 += d.cross_fraction();
                    acc.1 += 1;
                }
            }

            in_batch += 1;
            if in_batch == cfg.batch_size || pair + 1 == cfg.pairs_per_epoch {
                let inv = 1.0 / in_batch as f64;
                grads.iter_mut().flatten().for_each(|g| *g *= inv);
                opt.update(&mut params, &mut grads, lr);
                grads.iter_mut().for_each(|g| g.fill(0.0));
                in_batch = 0;
                step += 1;
                let mut finite = true;
                params.visit("", &mut |_, t: &Tensor| finite &= t.is_finite());
                if !finite {
                    return Err(nonfinite(epoch, step, Error::NonFinite { op: "optimizer step" }));
                }
            }
        }

        let n = cfg.pairs_per_epoch as f64;
        let stats = EpochStats {
            epoch,
            lr,
            loss: sums[0] / n,
            focal: sums[1] / n,
            giou: sums[2] / n,
            l1: sums[3] / n,
            cross_fraction: cross.iter().map(|&(s, c)| (c > 0).then(|| s / c as f64)).collect(),
        };
        info!(
            "epoch {epoch}: loss {:.4} (focal {:.4}, giou {:.4}, l1 {:.4})",
            stats.loss, stats.focal, stats.giou, stats.l1
        );
        debug!("epoch {epoch}: cross fractions {:?}", stats.cross_fraction);
        history.push(stats);
    }

    Ok(TrainOutput {
        checkpoint: Checkpoint::new(cfg.model.clone(), params),
        history,
    })
}
