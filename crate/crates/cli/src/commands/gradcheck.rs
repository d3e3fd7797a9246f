use std::io::Write;

use grm_core::autograd::OpKind;
use grm_core::gradcheck::{GradCheckOptions, GradCheckReport};
use grm_core::head::{BBox, LossConfig};
use grm_core::model::{check_gradients, GrmParams, ModelConfig, Sample};
use grm_core::relation::GumbelConfig;
use grm_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::CliError;
use crate::{GradCheckArgs, Scale};

pub const THRESHOLD: f64 = 1e-4;
pub const CSV_HEADER: &str = "parameter,numel,max_rel_err,max_abs_err,status";

/// Backward rules scaled by this factor under `--corrupt`.
const CORRUPT_FACTOR: f64 = 2.0;

fn random_sample(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Sample {
    let t = cfg.patch.template_size;
    let s = cfg.patch.search_size;
    Sample {
        template: Tensor::uniform([3, t, t], 0.5, rng).map(|v| v + 0.5),
        search: Tensor::uniform([3, s, s], 0.5, rng).map(|v| v + 0.5),
        gt: BBox::new(0.45, 0.55, 0.25, 0.3),
    }
}

pub fn grad_check(a: &GradCheckArgs) -> Result<GradCheckReport, CliError> {
    let cfg = match a.scale {
        Scale::Tiny => ModelConfig::tiny(),
    };
    if !(a.step > 0.0 && a.step.is_finite()) {
        return Err(CliError::Config(format!("step must be positive, got {}", a.step)));
    }
    let mut opts = GradCheckOptions::new(a.step);
    if let Some(name) = &a.corrupt {
        let kind = OpKind::from_name(name).ok_or_else(|| CliError::Config(format!("unknown op `{name}`")))?;
        opts.fault = Some((kind, CORRUPT_FACTOR));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let params = GrmParams::init(&cfg, &mut rng)?;
    let sample = random_sample(&cfg, &mut rng);
    Ok(check_gradients(
        &cfg,
        &params,
        &sample,
        &LossConfig::default(),
        &GumbelConfig::default(),
        &opts,
    )?)
}

pub fn to_csv(report: &GradCheckReport) -> String {
    let mut s = format!("{CSV_HEADER}\n");
    for p in &report.params {
        let status = if p.max_rel_err < THRESHOLD { "pass" } else { "fail" };
        s.push_str(&format!(
            "{},{},{:.3e},{:.3e},{status}\n",
            p.name, p.numel, p.max_rel_err, p.max_abs_err
        ));
    }
    s
}

pub fn run(a: &GradCheckArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let report = grad_check(a)?;
    write!(out, "{}", to_csv(&report)).map_err(|e| CliError::io("<stdout>", e))?;
    match report.worst() {
        Some(w) if !(w.max_rel_err < THRESHOLD) => Err(CliError::GradCheck {
            name: w.name.clone(),
            rel_err: w.max_rel_err,
        }),
        _ => Ok(()),
    }
}
