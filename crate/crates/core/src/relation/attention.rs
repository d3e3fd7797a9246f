use rand::Rng;

use super::TokenCategory;
use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{module, Linear};
use crate::tensor::Tensor;

/// Query, key, value and output projections; heads split the columns evenly.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams<T = Tensor> {
    pub q: Linear<T>,
    pub k: Linear<T>,
    pub v: Linear<T>,
    pub o: Linear<T>,
}
module!(AttentionParams {}; q, k, v, o);

impl AttentionParams<Tensor> {
    pub fn init<R: Rng + ?Sized>(c: usize, rng: &mut R) -> Self {
        Self {
            q: Linear::init(c, c, rng),
            k: Linear::init(c, c, rng),
            v: Linear::init(c, c, rng),
            o: Linear::init(c, c, rng),
        }
    }
}

/// Multi-head attention of `queries` over `keys`, with an optional
/// multiplicative mask applied inside the softmax.
pub fn attention(
    tape: &mut Tape,
    queries: Var,
    keys: Var,
    mask: Option<Var>,
    params: &AttentionParams<Var>,
    num_heads: usize,
) -> Result<Var> {
    let c = tape.shape(queries)[1];
    if num_heads == 0 || c % num_heads != 0 {
        return Err(Error::Config(format!("{num_heads} heads do not divide width {c}")));
    }
    let dh = c / num_heads;
    let q = params.q.forward(tape, queries)?;
    let k = params.k.forward(tape, keys)?;
    let v = params.v.forward(tape, keys)?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(num_heads);
    for h in 0..num_heads {
        let (qh, kh, vh) = if num_heads == 1 {
            (q, k, v)
        } else {
            (
                tape.slice_cols(q, h * dh, (h + 1) * dh)?,
                tape.slice_cols(k, h * dh, (h + 1) * dh)?,
                tape.slice_cols(v, h * dh, (h + 1) * dh)?,
            )
        };
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, scale)?;
        let weights = match mask {
            Some(m) => tape.masked_softmax(scores, m)?,
            None => tape.softmax_rows(scores)?,
        };
        heads.push(tape.matmul(weights, vh)?);
    }
    let merged = if num_heads == 1 {
        heads[0]
    } else {
        tape.concat_cols(&heads)?
    };
    params.o.forward(tape, merged)
}

/// Self-attention over `tokens` restricted by `mask`; no residual.
pub fn masked_mha(
    tape: &mut Tape,
    tokens: Var,
    mask: Var,
    params: &AttentionParams<Var>,
    num_heads: usize,
) -> Result<Var> {
    attention(tape, tokens, tokens, Some(mask), params, num_heads)
}

/// Reference for [`masked_mha`] that runs the three relation rules as
/// separate attention calls and restores token order:
/// template queries over template and cross keys, search-only queries over
/// all search keys, cross queries over every key.
pub fn separate_mha_oracle(
    tape: &mut Tape,
    e_z: Var,
    e_x: Var,
    categories: &[TokenCategory],
    params: &AttentionParams<Var>,
    num_heads: usize,
) -> Result<Var> {
    let n_z = tape.shape(e_z)[0];
    let n_x = tape.shape(e_x)[0];
    if categories.len() != n_x {
        return Err(Error::mismatch("separate_mha_oracle", &[categories.len()], &[n_x]));
    }
    let pick = |want: TokenCategory| -> Vec<usize> {
        (0..n_x).filter(|&i| categories[i] == want).collect()
    };
    let only = pick(TokenCategory::SearchOnly);
    let cross = pick(TokenCategory::Cross);
    if only.len() + cross.len() != n_x {
        return Err(Error::InvalidDivision("search tokens must be search-only or cross".into()));
    }

    let mut outputs = Vec::new();
    let mut order = Vec::new();

    let cross_tokens = if cross.is_empty() {
        None
    } else {
        Some(tape.gather_rows(e_x, &cross)?)
    };
    let template_keys = match cross_tokens {
        Some(a) => tape.concat_rows(&[e_z, a])?,
        None => e_z,
    };
    outputs.push(attention(tape, e_z, template_keys, None, params, num_heads)?);
    order.extend(0..n_z);

    if !only.is_empty() {
        let queries = tape.gather_rows(e_x, &only)?;
        outputs.push(attention(tape, queries, e_x, None, params, num_heads)?);
        order.extend(only.iter().map(|i| n_z + i));
    }

    if let Some(a) = cross_tokens {
        let all = tape.concat_rows(&[e_z, e_x])?;
        outputs.push(attention(tape, a, all, None, params, num_heads)?);
        order.extend(cross.iter().map(|i| n_z + i));
    }

    let stacked = tape.concat_rows(&outputs)?;
    let mut inverse = vec![0; order.len()];
    for (pos, &token) in order.iter().enumerate() {
        inverse[token] = pos;
    }
    tape.gather_rows(stacked, &inverse)
}
