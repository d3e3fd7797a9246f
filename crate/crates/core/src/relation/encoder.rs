use rand::Rng;
use serde::{Deserialize, Serialize};

use super::attention::{attention, AttentionParams};
use super::division::{predict_division, Division, DivisionSampler, PredictorParams};
use super::mask::{mask_from_categories, mask_node};
use super::{Pooling, TokenCategory};
use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{module, LayerNorm, Linear};
use crate::tensor::Tensor;

/// Template and search token buffers between encoder layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerState {
    pub template: Var,
    pub search: Var,
}

/// Pre-norm Transformer block with an optional division predictor.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T = Tensor> {
    pub norm1: LayerNorm<T>,
    pub attn: AttentionParams<T>,
    pub norm2: LayerNorm<T>,
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
    pub predictor: Option<PredictorParams<T>>,
}
module!(LayerParams {}; norm1, attn, norm2, fc1, fc2, predictor);

impl LayerParams<Tensor> {
    pub fn init<R: Rng + ?Sized>(c: usize, with_predictor: bool, rng: &mut R) -> Self {
        Self {
            norm1: LayerNorm::new(c),
            attn: AttentionParams::init(c, rng),
            norm2: LayerNorm::new(c),
            fc1: Linear::init(c, 4 * c, rng),
            fc2: Linear::init(4 * c, c, rng),
            predictor: with_predictor.then(|| PredictorParams::init(c, rng)),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    pub num_heads: usize,
    pub pooling: Pooling,
}

/// How a layer decides the category of each search token.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LayerPolicy {
    /// No division module: full joint attention, nothing recorded.
    Plain,
    /// Predict and sample a division.
    Adaptive,
    /// Every search token is search-only.
    ForceAllSearchOnly,
    /// Every search token takes part in cross-relation modeling.
    ForceAllCross,
    Fixed(Vec<TokenCategory>),
}

/// Encoder-wide relation scheme.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelationMode {
    #[default]
    Adaptive,
    TwoStream,
    OneStream,
}

impl RelationMode {
    pub fn name(self) -> &'static str {
        match self {
            RelationMode::Adaptive => "adaptive",
            RelationMode::TwoStream => "two_stream",
            RelationMode::OneStream => "one_stream",
        }
    }
}

/// Per-layer policies for a stack of `depth` layers; `division_layers` are 1-based.
///
/// Two-stream runs every layer but the last with search-only tokens and
/// leaves the last as a plain joint layer acting as the correlation stage.
pub fn layer_policies(mode: RelationMode, depth: usize, division_layers: &[usize]) -> Result<Vec<LayerPolicy>> {
    if depth == 0 {
        return Err(Error::Config("encoder depth must be at least 1".into()));
    }
    if let Some(&bad) = division_layers.iter().find(|&&l| l == 0 || l > depth) {
        return Err(Error::Config(format!(
            "division layer {bad} outside 1..={depth}"
        )));
    }
    Ok((1..=depth)
        .map(|l| {
            let divided = division_layers.contains(&l);
            match mode {
                RelationMode::Adaptive if divided => LayerPolicy::Adaptive,
                RelationMode::OneStream if divided => LayerPolicy::ForceAllCross,
                RelationMode::TwoStream if l < depth => LayerPolicy::ForceAllSearchOnly,
                _ => LayerPolicy::Plain,
            }
        })
        .collect())
}

fn block(tape: &mut Tape, state: LayerState, p: &LayerParams<Var>, num_heads: usize, mask: Option<Var>) -> Result<LayerState> {
    let n_z = tape.shape(state.template)[0];
    let n_x = tape.shape(state.search)[0];
    let x = tape.concat_rows(&[state.template, state.search])?;
    let h = p.norm1.forward(tape, x)?;
    let a = attention(tape, h, h, mask, &p.attn, num_heads)?;
    let x = tape.add(x, a)?;
    let h = p.norm2.forward(tape, x)?;
    let h = p.fc1.forward(tape, h)?;
    let h = tape.gelu(h)?;
    let h = p.fc2.forward(tape, h)?;
    let out = tape.add(x, h)?;
    let z: Vec<usize> = (0..n_z).collect();
    let s: Vec<usize> = (n_z..n_z + n_x).collect();
    Ok(LayerState {
        template: tape.gather_rows(out, &z)?,
        search: tape.gather_rows(out, &s)?,
    })
}

/// Plain joint-attention layer over the concatenated tokens, without any mask.
pub fn one_stream_layer(tape: &mut Tape, state: LayerState, p: &LayerParams<Var>, num_heads: usize) -> Result<LayerState> {
    block(tape, state, p, num_heads, None)
}

/// One encoder layer under `policy`. Returns the division used, or `None`
/// for [`LayerPolicy::Plain`].
pub fn encoder_layer(
    tape: &mut Tape,
    state: LayerState,
    p: &LayerParams<Var>,
    cfg: &EncoderConfig,
    sampler: &mut DivisionSampler,
    policy: &LayerPolicy,
) -> Result<(LayerState, Option<Division>)> {
    let n_z = tape.shape(state.template)[0];
    let n_x = tape.shape(state.search)[0];
    let fixed = |cats: Vec<TokenCategory>| -> Result<(Division, Tensor)> {
        let mask = mask_from_categories(&cats, n_z)?;
        Ok((Division::fixed(&cats)?, mask.into_tensor()))
    };
    let (division, mask) = match policy {
        LayerPolicy::Adaptive => {
            let pi = predict_division(tape, state.template, state.search, p.predictor.as_ref(), cfg.pooling)?;
            let (division, st) = sampler.sample(tape, pi)?;
            let mask = mask_node(tape, st, n_z)?;
            (Some(division), mask)
        }
        LayerPolicy::Plain => {
            let (_, m) = fixed(vec![TokenCategory::Cross; n_x])?;
            (None, tape.constant(m))
        }
        LayerPolicy::ForceAllSearchOnly | LayerPolicy::ForceAllCross | LayerPolicy::Fixed(_) => {
            let cats = match policy {
                LayerPolicy::ForceAllSearchOnly => vec![TokenCategory::SearchOnly; n_x],
                LayerPolicy::ForceAllCross => vec![TokenCategory::Cross; n_x],
                LayerPolicy::Fixed(c) => c.clone(),
                _ => unreachable!(),
            };
            if cats.len() != n_x {
                return Err(Error::mismatch("encoder_layer", &[cats.len()], &[n_x]));
            }
            let (d, m) = fixed(cats)?;
            (Some(d), tape.constant(m))
        }
    };
    let next = block(tape, state, p, cfg.num_heads, Some(mask))?;
    Ok((next, division))
}

/// Applies the layers in sequence, recording each layer's division.
pub fn encoder_stack(
    tape: &mut Tape,
    mut state: LayerState,
    layers: &[LayerParams<Var>],
    policies: &[LayerPolicy],
    cfg: &EncoderConfig,
    sampler: &mut DivisionSampler,
) -> Result<(LayerState, Vec<Option<Division>>)> {
    if layers.is_empty() {
        return Err(Error::Config("encoder needs at least one layer".into()));
    }
    if layers.len() != policies.len() {
        return Err(Error::Config(format!(
            "{} layers but {} layer policies",
            layers.len(),
            policies.len()
        )));
    }
    if policies[0] == LayerPolicy::Adaptive {
        log::warn!("token division in the first encoder layer usually hurts accuracy");
    }
    let mut divisions = Vec::with_capacity(layers.len());
    for (i, (p, policy)) in layers.iter().zip(policies).enumerate() {
        let (next, division) = encoder_layer(tape, state, p, cfg, sampler, policy).map_err(|e| Error::Layer {
            layer: i + 1,
            source: Box::new(e),
        })?;
        state = next;
        divisions.push(division);
    }
    Ok((state, divisions))
}
