//! Patch embedding of template and search crops into token sequences.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{module, Linear};
use crate::tensor::Tensor;

/// Patch and crop geometry. Crops are square.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PatchConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub template_size: usize,
    pub search_size: usize,
}

impl Default for PatchConfig {
    fn default() -> Self {
        Self {
            patch_size: 8,
            embed_dim: 64,
            template_size: 32,
            search_size: 64,
        }
    }
}

impl PatchConfig {
    pub fn validate(&self) -> Result<()> {
        let p = self.patch_size;
        if p == 0 || self.embed_dim == 0 {
            return Err(Error::Config("patch_size and embed_dim must be positive".into()));
        }
        for (name, side) in [("template_size", self.template_size), ("search_size", self.search_size)] {
            if side == 0 || side % p != 0 {
                return Err(Error::Config(format!(
                    "{name} = {side} is not a positive multiple of patch_size = {p}"
                )));
            }
        }
        Ok(())
    }

    pub fn template_grid(&self) -> usize {
        self.template_size / self.patch_size
    }

    pub fn search_grid(&self) -> usize {
        self.search_size / self.patch_size
    }

    /// Number of template tokens.
    pub fn n_z(&self) -> usize {
        self.template_grid().pow(2)
    }

    /// Number of search tokens.
    pub fn n_x(&self) -> usize {
        self.search_grid().pow(2)
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }
}

/// Splits a 3×H×W image into non-overlapping P×P patches.
///
/// Row `i` of the result is the `i`-th patch in row-major patch order,
/// flattened channel-major (`c`, then patch row, then patch column).
pub fn patchify(image: &Tensor, p: usize) -> Result<Tensor> {
    let (c, h, w) = image.dims3()?;
    if c != 3 {
        return Err(Error::shape("patchify", format!("expected 3 channels, got {c}")));
    }
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::shape(
            "patchify",
            format!("patch size {p} does not divide image {h}x{w}"),
        ));
    }
    let (gh, gw) = (h / p, w / p);
    let src = image.data();
    let mut out = Vec::with_capacity(c * h * w);
    for pr in 0..gh {
        for pc in 0..gw {
            for ch in 0..c {
                for y in 0..p {
                    let base = (ch * h + pr * p + y) * w + pc * p;
                    out.extend_from_slice(&src[base..base + p]);
                }
            }
        }
    }
    Tensor::new([gh * gw, c * p * p], out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Origin {
    Template,
    Search,
}

/// Token sequence with the grid it was cut from.
#[derive(Clone, Copy, Debug)]
pub struct TokenBuffer {
    pub tokens: Var,
    pub origin: Origin,
    pub rows: usize,
    pub cols: usize,
}

/// Shared patch projection plus one position embedding per input.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbedParams<T = Tensor> {
    pub proj: Linear<T>,
    pub pos_template: T,
    pub pos_search: T,
}
module!(EmbedParams { pos_template, pos_search }; proj);

impl EmbedParams<Tensor> {
    pub fn init<R: Rng + ?Sized>(cfg: &PatchConfig, rng: &mut R) -> Self {
        let c = cfg.embed_dim;
        Self {
            proj: Linear::init(cfg.patch_dim(), c, rng),
            pos_template: Tensor::randn([cfg.n_z(), c], 0.02, rng),
            pos_search: Tensor::randn([cfg.n_x(), c], 0.02, rng),
        }
    }
}

/// `linear(patches) + pos`.
pub fn embed_tokens(
    tape: &mut Tape,
    patches: Var,
    proj: &Linear<Var>,
    pos: Var,
    origin: Origin,
    grid: (usize, usize),
) -> Result<TokenBuffer> {
    let n = tape.shape(patches)[0];
    if tape.shape(pos)[0] != n || grid.0 * grid.1 != n {
        return Err(Error::mismatch("embed_tokens", tape.shape(patches), tape.shape(pos)));
    }
    let projected = proj.forward(tape, patches)?;
    if tape.shape(projected) != tape.shape(pos) {
        return Err(Error::mismatch("embed_tokens", tape.shape(projected), tape.shape(pos)));
    }
    let tokens = tape.add(projected, pos)?;
    Ok(TokenBuffer {
        tokens,
        origin,
        rows: grid.0,
        cols: grid.1,
    })
}

/// Patchifies and embeds one crop.
pub fn embed_image(
    tape: &mut Tape,
    image: &Tensor,
    cfg: &PatchConfig,
    params: &EmbedParams<Var>,
    origin: Origin,
) -> Result<TokenBuffer> {
    let patches = patchify(image, cfg.patch_size)?;
    let grid = image.shape()[1] / cfg.patch_size;
    let patches = tape.constant(patches);
    let pos = match origin {
        Origin::Template => params.pos_template,
        Origin::Search => params.pos_search,
    };
    embed_tokens(tape, patches, &params.proj, pos, origin, (grid, grid))
}

/// Rearranges search tokens (N×C) into a C×rows×cols feature map; token
/// `(r, c)` of the grid lands at `map[:, r, c]`.
pub fn tokens_to_map(tape: &mut Tape, buffer: &TokenBuffer) -> Result<Var> {
    if buffer.origin != Origin::Search {
        return Err(Error::Usage("only search tokens can be reshaped to a feature map".into()));
    }
    let c = tape.shape(buffer.tokens)[1];
    let t = tape.transpose(buffer.tokens)?;
    tape.reshape(t, [c, buffer.rows, buffer.cols])
}

/// Inverse of [`tokens_to_map`].
pub fn map_to_tokens(tape: &mut Tape, map: Var) -> Result<TokenBuffer> {
    let (c, rows, cols) = tape.value(map).dims3()?;
    let flat = tape.reshape(map, [c, rows * cols])?;
    let tokens = tape.transpose(flat)?;
    Ok(TokenBuffer {
        tokens,
        origin: Origin::Search,
        rows,
        cols,
    })
}
