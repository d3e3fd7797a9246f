//! The full tracking network: patch embedding, relation encoder, head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::embedding::{embed_image, tokens_to_map, EmbedParams, Origin, PatchConfig, TokenBuffer};
use crate::error::{Error, Result};
use crate::gradcheck::{finite_diff_check_with, GradCheckOptions, GradCheckReport};
use crate::head::{head_forward, total_loss, BBox, HeadParams, HeadVars, LossConfig, LossTerms};
use crate::nn::{bind, bind_frozen, module, named_tensors, Module};
use crate::relation::{
    encoder_stack, layer_policies, Division, DivisionSampler, EncoderConfig, GumbelConfig,
    LayerParams, LayerPolicy, LayerState, Pooling, RelationMode,
};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub patch: PatchConfig,
    pub depth: usize,
    pub num_heads: usize,
    pub relation: RelationMode,
    /// 1-based encoder layers that carry a division module.
    pub division_layers: Vec<usize>,
    pub pooling: Pooling,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            patch: PatchConfig::default(),
            depth: 4,
            num_heads: 4,
            relation: RelationMode::Adaptive,
            division_layers: vec![2, 3, 4],
            pooling: Pooling::Max,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.patch.validate()?;
        let c = self.patch.embed_dim;
        if self.num_heads == 0 || c % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "num_heads = {} must divide embed_dim = {c}",
                self.num_heads
            )));
        }
        layer_policies(self.relation, self.depth, &self.division_layers)?;
        Ok(())
    }

    pub fn policies(&self) -> Result<Vec<LayerPolicy>> {
        layer_policies(self.relation, self.depth, &self.division_layers)
    }

    /// Smallest useful network: C=16, two layers, 4 template and 16 search tokens.
    pub fn tiny() -> Self {
        Self {
            patch: PatchConfig {
                patch_size: 8,
                embed_dim: 16,
                template_size: 16,
                search_size: 32,
            },
            depth: 2,
            num_heads: 2,
            relation: RelationMode::Adaptive,
            division_layers: vec![2],
            pooling: Pooling::Max,
        }
    }

    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            num_heads: self.num_heads,
            pooling: self.pooling,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GrmParams<T = Tensor> {
    pub embed: EmbedParams<T>,
    pub layers: Vec<LayerParams<T>>,
    pub head: HeadParams<T>,
}
module!(GrmParams {}; embed, layers, head);

impl GrmParams<Tensor> {
    /// Random initialization; only adaptive layers get predictor weights.
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.patch.embed_dim;
        let policies = cfg.policies()?;
        let embed = EmbedParams::init(&cfg.patch, rng);
        let layers = policies
            .iter()
            .map(|p| LayerParams::init(c, *p == LayerPolicy::Adaptive, rng))
            .collect();
        let head = HeadParams::init(c, rng);
        Ok(Self { embed, layers, head })
    }

    pub fn bind(&self, tape: &mut Tape) -> GrmParams<Var> {
        bind(self, tape)
    }

    pub fn bind_frozen(&self, tape: &mut Tape) -> GrmParams<Var> {
        bind_frozen(self, tape)
    }
}

pub struct ForwardOutput {
    pub head: HeadVars,
    pub divisions: Vec<Option<Division>>,
    pub search_tokens: TokenBuffer,
}

/// Embeds the template crop; the result is what a tracker keeps fixed.
pub fn embed_template(tape: &mut Tape, params: &GrmParams<Var>, cfg: &ModelConfig, template: &Tensor) -> Result<Var> {
    Ok(embed_image(tape, template, &cfg.patch, &params.embed, Origin::Template)?.tokens)
}

/// Runs the network on a template token buffer and a search crop.
pub fn forward_with_template(
    tape: &mut Tape,
    params: &GrmParams<Var>,
    cfg: &ModelConfig,
    template_tokens: Var,
    search: &Tensor,
    sampler: &mut DivisionSampler,
) -> Result<ForwardOutput> {
    let x = embed_image(tape, search, &cfg.patch, &params.embed, Origin::Search)?;
    let state = LayerState {
        template: template_tokens,
        search: x.tokens,
    };
    let policies = cfg.policies()?;
    let (out, divisions) = encoder_stack(tape, state, &params.layers, &policies, &cfg.encoder(), sampler)?;
    let search_tokens = TokenBuffer { tokens: out.search, ..x };
    let map = tokens_to_map(tape, &search_tokens)?;
    let head = head_forward(tape, map, &params.head)?;
    Ok(ForwardOutput {
        head,
        divisions,
        search_tokens,
    })
}

pub fn forward(
    tape: &mut Tape,
    params: &GrmParams<Var>,
    cfg: &ModelConfig,
    template: &Tensor,
    search: &Tensor,
    sampler: &mut DivisionSampler,
) -> Result<ForwardOutput> {
    let z = embed_template(tape, params, cfg, template)?;
    forward_with_template(tape, params, cfg, z, search, sampler)
}

/// One training example in crop coordinates.
#[derive(Clone, Debug)]
pub struct Sample {
    pub template: Tensor,
    pub search: Tensor,
    pub gt: BBox,
}

/// Forward pass plus loss for one sample, on bound parameters.
pub fn sample_loss(
    tape: &mut Tape,
    params: &GrmParams<Var>,
    cfg: &ModelConfig,
    sample: &Sample,
    loss: &LossConfig,
    sampler: &mut DivisionSampler,
) -> Result<(LossTerms, ForwardOutput)> {
    let out = forward(tape, params, cfg, &sample.template, &sample.search, sampler)?;
    let terms = total_loss(tape, &out.head, &sample.gt, loss)?;
    Ok((terms, out))
}

/// Finite-difference check of the full loss w.r.t. every parameter tensor.
///
/// Division noise is drawn once at the given parameters and replayed for
/// every perturbed evaluation, so the check covers the straight-through path.
pub fn check_gradients(
    cfg: &ModelConfig,
    params: &GrmParams,
    sample: &Sample,
    loss: &LossConfig,
    gumbel: &GumbelConfig,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let mut tape = Tape::new();
    let bound = params.bind_frozen(&mut tape);
    let mut sampler = DivisionSampler::new(gumbel)?;
    sample_loss(&mut tape, &bound, cfg, sample, loss, &mut sampler)?;
    let frozen = sampler.take_recorded();

    let named = named_tensors(params);
    finite_diff_check_with(
        |tape, vars| {
            let mut it = vars.iter().copied();
            let p = params.map(&mut |_| it.next().expect("one var per tensor"));
            let mut sampler = DivisionSampler::replay(gumbel.tau, frozen.clone())?;
            Ok(sample_loss(tape, &p, cfg, sample, loss, &mut sampler)?.0.total)
        },
        &named,
        opts,
    )
}
