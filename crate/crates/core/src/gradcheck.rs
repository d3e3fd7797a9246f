//! Central finite-difference verification of tape gradients.

use crate::autograd::{OpKind, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Gradients with magnitude below this are compared in absolute terms.
pub const DEFAULT_REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub h: f64,
    pub rel_floor: f64,
    /// Corrupts one backward rule; used only by harness self-tests.
    pub fault: Option<(OpKind, f64)>,
}

impl GradCheckOptions {
    pub fn new(h: f64) -> Self {
        Self {
            h,
            rel_floor: DEFAULT_REL_FLOOR,
            fault: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamGradError {
    pub name: String,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub numel: usize,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub params: Vec<ParamGradError>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }

    /// Entry with the largest relative error.
    pub fn worst(&self) -> Option<&ParamGradError> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares tape gradients of `f` against central differences with step `h`.
///
/// `f` receives a fresh tape and the parameter leaves (in `params` order) and
/// must return a scalar loss node. It has to be deterministic: it is
/// evaluated twice at the base point and the two values must agree bitwise.
pub fn finite_diff_check<F>(f: F, params: &[(String, Tensor)], h: f64) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    finite_diff_check_with(f, params, &GradCheckOptions::new(h))
}

pub fn finite_diff_check_with<F>(
    mut f: F,
    params: &[(String, Tensor)],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&opts.h) {
        return Err(Error::Config(format!(
            "finite-difference step must lie in [1e-7, 1e-3], got {}",
            opts.h
        )));
    }
    let mut tensors: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();

    let mut tape = Tape::new();
    if let Some((kind, factor)) = opts.fault {
        tape.inject_fault(kind, factor);
    }
    let vars: Vec<Var> = tensors.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let base = tape.value(loss).data()[0];
    tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .map(|&v| tape.grad(v).expect("parameters require grad"))
        .collect();
    drop(tape);

    let again = evaluate(&mut f, &tensors)?;
    if again.to_bits() != base.to_bits() {
        return Err(Error::NonDeterministic {
            first: base,
            second: again,
        });
    }

    let mut report = GradCheckReport::default();
    for (p, (name, _)) in params.iter().enumerate() {
        let mut max_rel: f64 = 0.0;
        let mut max_abs: f64 = 0.0;
        for idx in 0..tensors[p].len() {
            let orig = tensors[p].data()[idx];
            tensors[p].data_mut()[idx] = orig + opts.h;
            let plus = evaluate(&mut f, &tensors)?;
            tensors[p].data_mut()[idx] = orig - opts.h;
            let minus = evaluate(&mut f, &tensors)?;
            tensors[p].data_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * opts.h);
            let a = analytic[p].data()[idx];
            max_abs = max_abs.max((a - numeric).abs());
            max_rel = max_rel.max(relative_error(a, numeric, opts.rel_floor));
        }
        report.params.push(ParamGradError {
            name: name.clone(),
            max_rel_err: max_rel,
            max_abs_err: max_abs,
            numel: tensors[p].len(),
        });
    }
    Ok(report)
}

fn evaluate<F>(f: &mut F, tensors: &[Tensor]) -> Result<f64>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = tensors.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    Ok(tape.value(loss).data()[0])
}
