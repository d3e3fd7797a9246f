use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gumbel};
use serde::{Deserialize, Serialize};

use super::{Pooling, TokenCategory};
use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{module, Linear};
use crate::tensor::Tensor;

/// Floor applied to probabilities before taking logs.
pub const PI_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GumbelMode {
    #[default]
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GumbelConfig {
    pub tau: f64,
    pub rng_seed: u64,
    pub mode: GumbelMode,
}

impl Default for GumbelConfig {
    fn default() -> Self {
        Self {
            tau: 1.0,
            rng_seed: 0,
            mode: GumbelMode::Train,
        }
    }
}

impl GumbelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::Config(format!("gumbel tau must be positive, got {}", self.tau)));
        }
        Ok(())
    }
}

/// Per-token category probabilities and the sampled assignment.
///
/// Column 0 is the search-only category, column 1 the cross-relation one.
#[derive(Clone, Debug, PartialEq)]
pub struct Division {
    pub pi: Tensor,
    pub hard: Tensor,
    pub soft: Tensor,
}

impl Division {
    /// Division with every token fixed to the given categories; `pi` and `soft` equal `hard`.
    pub fn fixed(categories: &[TokenCategory]) -> Result<Self> {
        let hard = one_hot(categories)?;
        Ok(Self {
            pi: hard.clone(),
            soft: hard.clone(),
            hard,
        })
    }

    pub fn len(&self) -> usize {
        self.hard.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn categories(&self) -> Vec<TokenCategory> {
        self.hard
            .data()
            .chunks(2)
            .map(|r| if r[1] == 1.0 { TokenCategory::Cross } else { TokenCategory::SearchOnly })
            .collect()
    }

    /// Fraction of search tokens assigned to the cross-relation category.
    pub fn cross_fraction(&self) -> f64 {
        let n = self.len();
        self.hard.data().chunks(2).filter(|r| r[1] == 1.0).count() as f64 / n as f64
    }

    pub fn record(&self, layer: usize) -> DivisionRecord {
        DivisionRecord {
            layer,
            pi: self.pi.data().chunks(2).map(|r| [r[0], r[1]]).collect(),
            d: self.hard.data().chunks(2).map(|r| u8::from(r[1] == 1.0)).collect(),
        }
    }
}

/// Serialized form of one layer's division; `D[i] = 1` marks a cross-relation token.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DivisionRecord {
    pub layer: usize,
    pub pi: Vec<[f64; 2]>,
    #[serde(rename = "D")]
    pub d: Vec<u8>,
}

/// Encodes search-token categories as N×2 one-hot rows.
pub fn one_hot(categories: &[TokenCategory]) -> Result<Tensor> {
    if categories.is_empty() {
        return Err(Error::Empty { op: "one_hot" });
    }
    let mut data = Vec::with_capacity(categories.len() * 2);
    for (i, c) in categories.iter().enumerate() {
        match c {
            TokenCategory::SearchOnly => data.extend([1.0, 0.0]),
            TokenCategory::Cross => data.extend([0.0, 1.0]),
            TokenCategory::Template => {
                return Err(Error::InvalidDivision(format!(
                    "search token {i} cannot be in the template category"
                )))
            }
        }
    }
    Tensor::new([categories.len(), 2], data)
}

/// Row-wise argmax over two categories; ties go to the cross-relation category.
fn argmax_one_hot(scores: &Tensor) -> Tensor {
    let data = scores
        .data()
        .chunks(2)
        .flat_map(|r| if r[1] >= r[0] { [0.0, 1.0] } else { [1.0, 0.0] })
        .collect();
    Tensor::new(scores.shape(), data).expect("same shape")
}

/// Noise and outputs of one training-mode draw, kept for replay.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenDivision {
    pub noise: Tensor,
    pub hard: Tensor,
    pub soft: Tensor,
}

enum SamplerMode {
    Eval,
    Train(Box<ChaCha8Rng>),
    Replay(VecDeque<FrozenDivision>),
}

/// Source of division samples for one forward pass.
///
/// Training draws fresh Gumbel noise from a seeded stream and records every
/// draw. Replay reuses recorded draws in order: the hard sample stays fixed
/// and the forward value moves with the relaxation by `soft - soft_ref`, so
/// central differences see exactly the straight-through gradient.
pub struct DivisionSampler {
    tau: f64,
    mode: SamplerMode,
    recorded: Vec<FrozenDivision>,
}

impl DivisionSampler {
    pub fn new(cfg: &GumbelConfig) -> Result<Self> {
        cfg.validate()?;
        let mode = match cfg.mode {
            GumbelMode::Eval => SamplerMode::Eval,
            GumbelMode::Train => SamplerMode::Train(Box::new(ChaCha8Rng::seed_from_u64(cfg.rng_seed))),
        };
        Ok(Self {
            tau: cfg.tau,
            mode,
            recorded: Vec::new(),
        })
    }

    pub fn eval() -> Self {
        Self {
            tau: 1.0,
            mode: SamplerMode::Eval,
            recorded: Vec::new(),
        }
    }

    pub fn replay(tau: f64, frozen: Vec<FrozenDivision>) -> Result<Self> {
        GumbelConfig {
            tau,
            ..GumbelConfig::default()
        }
        .validate()?;
        Ok(Self {
            tau,
            mode: SamplerMode::Replay(frozen.into()),
            recorded: Vec::new(),
        })
    }

    pub fn is_eval(&self) -> bool {
        matches!(self.mode, SamplerMode::Eval)
    }

    pub fn take_recorded(&mut self) -> Vec<FrozenDivision> {
        std::mem::take(&mut self.recorded)
    }

    /// Samples a division from `pi` and returns it with the node carrying its
    /// forward value (N×2) for mask construction.
    pub fn sample(&mut self, tape: &mut Tape, pi: Var) -> Result<(Division, Var)> {
        let pi_value = tape.value(pi).clone();
        let (n, k) = pi_value.dims2()?;
        if k != 2 {
            return Err(Error::shape("gumbel_divide", format!("expected N×2 probabilities, got {n}×{k}")));
        }
        let (noise, frozen) = match &mut self.mode {
            SamplerMode::Eval => {
                let hard = argmax_one_hot(&pi_value);
                let st = tape.constant(hard.clone());
                let division = Division {
                    soft: pi_value.clone(),
                    pi: pi_value,
                    hard,
                };
                return Ok((division, st));
            }
            SamplerMode::Train(rng) => (gumbel_noise(n, rng.as_mut()), None),
            SamplerMode::Replay(queue) => {
                let f = queue
                    .pop_front()
                    .ok_or_else(|| Error::Usage("replay sampler ran out of recorded divisions".into()))?;
                if f.noise.shape() != pi_value.shape() {
                    return Err(Error::mismatch("gumbel_divide", f.noise.shape(), pi_value.shape()));
                }
                (f.noise.clone(), Some(f))
            }
        };
        let logp = tape.ln_clamped(pi, PI_FLOOR)?;
        let g = tape.constant(noise.clone());
        let perturbed = tape.add(logp, g)?;
        let scaled = tape.scale(perturbed, 1.0 / self.tau)?;
        let soft = tape.softmax_rows(scaled)?;
        let soft_value = tape.value(soft).clone();
        let (hard, st) = match frozen {
            None => {
                let hard = argmax_one_hot(tape.value(perturbed));
                let st = tape.straight_through(soft, &hard, None)?;
                self.recorded.push(FrozenDivision {
                    noise,
                    hard: hard.clone(),
                    soft: soft_value.clone(),
                });
                (hard, st)
            }
            Some(f) => {
                let st = tape.straight_through(soft, &f.hard, Some(&f.soft))?;
                (f.hard, st)
            }
        };
        let division = Division {
            pi: pi_value,
            hard,
            soft: soft_value,
        };
        Ok((division, st))
    }
}

fn gumbel_noise<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Tensor {
    let dist = Gumbel::new(0.0, 1.0).expect("unit Gumbel");
    let data = (0..n * 2).map(|_| dist.sample(rng)).collect();
    Tensor::new([n, 2], data).expect("n×2")
}

/// Samples a division for probabilities `pi` (N×2) outside any training graph.
pub fn gumbel_divide(pi: &Tensor, cfg: &GumbelConfig) -> Result<Division> {
    let mut sampler = DivisionSampler::new(cfg)?;
    let mut tape = Tape::new();
    let p = tape.constant(pi.clone());
    Ok(sampler.sample(&mut tape, p)?.0)
}

/// Division MLP: `2C → C/2 → C/4 → 2` with GELU between layers.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictorParams<T = Tensor> {
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
    pub fc3: Linear<T>,
}
module!(PredictorParams {}; fc1, fc2, fc3);

impl PredictorParams<Tensor> {
    pub fn init<R: Rng + ?Sized>(c: usize, rng: &mut R) -> Self {
        let h1 = (c / 2).max(1);
        let h2 = (c / 4).max(1);
        Self {
            fc1: Linear::init(2 * c, h1, rng),
            fc2: Linear::init(h1, h2, rng),
            fc3: Linear::init(h2, 2, rng),
        }
    }
}

/// Category probabilities (N_x×2) from the pooled template and each search token.
pub fn predict_division(
    tape: &mut Tape,
    e_z: Var,
    e_x: Var,
    params: Option<&PredictorParams<Var>>,
    pooling: Pooling,
) -> Result<Var> {
    let params = params.ok_or_else(|| {
        Error::Config("adaptive division requested for a layer without predictor parameters".into())
    })?;
    let n_x = tape.shape(e_x)[0];
    let pooled = match pooling {
        Pooling::Max => tape.max_rows(e_z)?,
        Pooling::Avg => tape.mean_rows(e_z)?,
    };
    let target = tape.gather_rows(pooled, &vec![0; n_x])?;
    let input = tape.concat_cols(&[target, e_x])?;
    let h = params.fc1.forward(tape, input)?;
    let h = tape.gelu(h)?;
    let h = params.fc2.forward(tape, h)?;
    let h = tape.gelu(h)?;
    let logits = params.fc3.forward(tape, h)?;
    tape.softmax_rows(logits)
}
