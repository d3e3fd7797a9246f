//! Parameter containers and the small layers built from tape primitives.
//!
//! Parameter structs are generic over their leaf type: `T = Tensor` for
//! stored weights, `T = Var` once they are registered on a tape.

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Structural traversal over a tree of parameters.
pub trait Module<T> {
    type With<U>;

    fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> Self::With<U>;

    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T));

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut T));
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Registers every tensor of `m` as a trainable leaf.
pub fn bind<M: Module<Tensor>>(m: &M, tape: &mut Tape) -> M::With<Var> {
    m.map(&mut |t| tape.param(t.clone()))
}

/// Registers every tensor of `m` as a constant (no gradients).
pub fn bind_frozen<M: Module<Tensor>>(m: &M, tape: &mut Tape) -> M::With<Var> {
    m.map(&mut |t| tape.constant(t.clone()))
}

/// Parameters as `(dotted name, tensor)` pairs in traversal order.
pub fn named_tensors<M: Module<Tensor>>(m: &M) -> Vec<(String, Tensor)> {
    let mut out = Vec::new();
    m.visit("", &mut |name, t| out.push((name, t.clone())));
    out
}

pub fn num_params<M: Module<Tensor>>(m: &M) -> usize {
    let mut n = 0;
    m.visit("", &mut |_, t| n += t.len());
    n
}

impl<T, M: Module<T>> Module<T> for Vec<M> {
    type With<U> = Vec<M::With<U>>;

    fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> Self::With<U> {
        self.iter().map(|m| m.map(f)).collect()
    }

    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        for (i, m) in self.iter().enumerate() {
            m.visit(&join(prefix, &i.to_string()), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut T)) {
        for (i, m) in self.iter_mut().enumerate() {
            m.visit_mut(&join(prefix, &i.to_string()), f);
        }
    }
}

impl<T, M: Module<T>> Module<T> for Option<M> {
    type With<U> = Option<M::With<U>>;

    fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> Self::With<U> {
        self.as_ref().map(|m| m.map(f))
    }

    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        if let Some(m) = self {
            m.visit(prefix, f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut T)) {
        if let Some(m) = self {
            m.visit_mut(prefix, f);
        }
    }
}

/// Implements [`Module`] for a struct whose fields are all leaves or modules.
macro_rules! module {
    ($name:ident { $($leaf:ident),* $(,)? } $(; $($sub:ident),* $(,)?)?) => {
        impl<T> $crate::nn::Module<T> for $name<T> {
            type With<U> = $name<U>;

            fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> $name<U> {
                $name {
                    $($leaf: f(&self.$leaf),)*
                    $($($sub: $crate::nn::Module::map(&self.$sub, f),)*)?
                }
            }

            fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
                $(f($crate::nn::join(prefix, stringify!($leaf)), &self.$leaf);)*
                $($($crate::nn::Module::visit(&self.$sub, &$crate::nn::join(prefix, stringify!($sub)), f);)*)?
            }

            fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut T)) {
                $(f($crate::nn::join(prefix, stringify!($leaf)), &mut self.$leaf);)*
                $($($crate::nn::Module::visit_mut(&mut self.$sub, &$crate::nn::join(prefix, stringify!($sub)), f);)*)?
            }
        }
    };
}
pub(crate) use module;

/// Affine map `x·W + b` with `W` stored as cin×cout.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T = Tensor> {
    pub weight: T,
    pub bias: T,
}
module!(Linear { weight, bias });

impl Linear<Tensor> {
    /// Xavier-uniform weights, zero bias.
    pub fn init<R: Rng + ?Sized>(cin: usize, cout: usize, rng: &mut R) -> Self {
        let bound = (6.0 / (cin + cout) as f64).sqrt();
        Self {
            weight: Tensor::uniform([cin, cout], bound, rng),
            bias: Tensor::zeros([cout]),
        }
    }

    pub fn zeros(cin: usize, cout: usize) -> Self {
        Self {
            weight: Tensor::zeros([cin, cout]),
            bias: Tensor::zeros([cout]),
        }
    }
}

impl Linear<Var> {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        linear(tape, x, self.weight, self.bias)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm<T = Tensor> {
    pub gamma: T,
    pub beta: T,
}
module!(LayerNorm { gamma, beta });

pub const LAYERNORM_EPS: f64 = 1e-6;

impl LayerNorm<Tensor> {
    pub fn new(c: usize) -> Self {
        Self {
            gamma: Tensor::ones([c]),
            beta: Tensor::zeros([c]),
        }
    }
}

impl LayerNorm<Var> {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        layernorm(tape, x, self.gamma, self.beta, LAYERNORM_EPS)
    }
}

pub fn linear(tape: &mut Tape, x: Var, weight: Var, bias: Var) -> Result<Var> {
    let y = tape.matmul(x, weight)?;
    tape.add_row(y, bias)
}

/// Per-row standardization followed by a per-column affine map.
pub fn layernorm(tape: &mut Tape, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
    let n = tape.standardize_rows(x, eps)?;
    let s = tape.mul_row(n, gamma)?;
    tape.add_row(s, beta)
}
