use super::TokenCategory;
use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Which query category may read from which key category, indexed
/// `[template, search-only, cross]`.
const RULES: [[f64; 3]; 3] = [[1.0, 0.0, 1.0], [0.0, 1.0, 1.0], [1.0, 1.0, 1.0]];

/// Whether a query token of category `query` may attend to a key of category `key`.
pub fn allowed(query: TokenCategory, key: TokenCategory) -> bool {
    RULES[query.index()][key.index()] == 1.0
}

/// Binary (N_z+N_x)² matrix; entry (i, j) is 1 when token i may attend to token j.
/// Template tokens come first.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMask {
    m: Tensor,
}

impl AttentionMask {
    pub fn tensor(&self) -> &Tensor {
        &self.m
    }

    pub fn into_tensor(self) -> Tensor {
        self.m
    }

    pub fn size(&self) -> usize {
        self.m.shape()[0]
    }

    pub fn allows(&self, i: usize, j: usize) -> bool {
        self.m.at2(i, j) == 1.0
    }
}

fn check_one_hot(d: &Tensor) -> Result<usize> {
    let (n, k) = d
        .dims2()
        .map_err(|_| Error::InvalidDivision(format!("expected N×2 assignment, got {:?}", d.shape())))?;
    if k != 2 {
        return Err(Error::InvalidDivision(format!("expected 2 columns, got {k}")));
    }
    for (i, r) in d.data().chunks(2).enumerate() {
        let binary = r.iter().all(|&v| v == 0.0 || v == 1.0);
        if !binary || r[0] + r[1] != 1.0 {
            return Err(Error::InvalidDivision(format!("row {i} = {r:?} is not one-hot")));
        }
    }
    Ok(n)
}

/// Evaluates the tri-category rules entrywise for a one-hot search assignment `d` (N_x×2).
pub fn build_mask(d: &Tensor, n_z: usize) -> Result<AttentionMask> {
    let n_x = check_one_hot(d)?;
    if n_z == 0 {
        return Err(Error::Empty { op: "build_mask" });
    }
    let n = n_z + n_x;
    let ext: Vec<[f64; 3]> = (0..n)
        .map(|i| {
            if i < n_z {
                [1.0, 0.0, 0.0]
            } else {
                let r = d.row(i - n_z);
                [0.0, r[0], r[1]]
            }
        })
        .collect();
    let mut m = Vec::with_capacity(n * n);
    for di in &ext {
        for dj in &ext {
            let v = di[0] * (dj[0] + dj[2]) + di[1] * (dj[1] + dj[2]) + di[2] * (dj[0] + dj[1] + dj[2]);
            m.push(v);
        }
    }
    Ok(AttentionMask {
        m: Tensor::new([n, n], m)?,
    })
}

pub fn mask_from_categories(categories: &[TokenCategory], n_z: usize) -> Result<AttentionMask> {
    build_mask(&super::one_hot(categories)?, n_z)
}

/// Mask as a graph node built from the straight-through assignment `st`
/// (N_x×2): `M = D̂·R·D̂ᵀ` with `D̂ = [template one-hots; 0 | st]`, so the
/// gradient reaches the division probabilities through the mask.
pub fn mask_node(tape: &mut Tape, st: Var, n_z: usize) -> Result<Var> {
    let (n_x, k) = tape.value(st).dims2()?;
    if k != 2 {
        return Err(Error::mismatch("mask_node", tape.shape(st), &[n_x, 2]));
    }
    let mut template = vec![0.0; n_z * 3];
    template.iter_mut().step_by(3).for_each(|v| *v = 1.0);
    let template = tape.constant(Tensor::new([n_z, 3], template)?);
    let pad = tape.constant(Tensor::zeros([n_x, 1]));
    let search = tape.concat_cols(&[pad, st])?;
    let ext = tape.concat_rows(&[template, search])?;
    let rules = tape.constant(Tensor::from_rows(&RULES)?);
    let left = tape.matmul(ext, rules)?;
    let ext_t = tape.transpose(ext)?;
    tape.matmul(left, ext_t)
}
