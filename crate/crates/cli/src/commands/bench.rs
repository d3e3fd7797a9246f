use std::io::Write;
use std::time::Instant;

use grm_core::nn::bind_frozen;
use grm_core::relation::{mask_from_categories, masked_mha, separate_mha_oracle, AttentionParams, TokenCategory};
use grm_core::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::CliError;
use crate::{BenchArgs, DivisionArg};

pub const CSV_HEADER: &str = "variant,iters,mean_ms,std_ms,speedup";

#[derive(Clone, Debug, Serialize)]
pub struct Timing {
    pub variant: &'static str,
    pub iters: usize,
    pub mean_ms: f64,
    pub std_ms: f64,
    /// Mean time of the separate path divided by this variant's mean time.
    pub speedup: f64,
}

fn categories(division: DivisionArg, n_x: usize, rng: &mut ChaCha8Rng) -> Vec<TokenCategory> {
    (0..n_x)
        .map(|_| match division {
            DivisionArg::AllA => TokenCategory::Cross,
            DivisionArg::AllS => TokenCategory::SearchOnly,
            DivisionArg::Random if rng.random_bool(0.5) => TokenCategory::Cross,
            DivisionArg::Random => TokenCategory::SearchOnly,
        })
        .collect()
}

fn mean_std(samples: &[f64]) -> (f64, f64) {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Times `iters` forward passes after one untimed warm-up. The tape is cut
/// back to its bound inputs after every pass, so all passes see the same state.
fn time<F>(tape: &mut Tape, iters: usize, mut f: F) -> Result<Vec<f64>, CliError>
where
    F: FnMut(&mut Tape) -> grm_core::Result<Var>,
{
    let base = tape.len();
    f(tape)?;
    tape.truncate(base);
    let mut out = Vec::with_capacity(iters);
    for _ in 0..iters {
        let start = Instant::now();
        let y = f(tape)?;
        std::hint::black_box(tape.value(y));
        out.push(start.elapsed().as_secs_f64() * 1e3);
        tape.truncate(base);
    }
    Ok(out)
}

pub fn bench(a: &BenchArgs) -> Result<[Timing; 2], CliError> {
    if a.n_z == 0 || a.n_x == 0 || a.heads == 0 || a.c == 0 || a.iters == 0 {
        return Err(CliError::Config("bench sizes and iters must be positive".into()));
    }
    if a.c % a.heads != 0 {
        return Err(CliError::Config(format!("{} heads do not divide c = {}", a.heads, a.c)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let params = AttentionParams::init(a.c, &mut rng);
    let e_z = Tensor::randn([a.n_z, a.c], 1.0, &mut rng);
    let e_x = Tensor::randn([a.n_x, a.c], 1.0, &mut rng);
    let cats = categories(a.division, a.n_x, &mut rng);
    let mask = mask_from_categories(&cats, a.n_z)?.into_tensor();

    let mut tape = Tape::new();
    let p = bind_frozen(&params, &mut tape);
    let z = tape.constant(e_z);
    let x = tape.constant(e_x);
    let tokens = tape.concat_rows(&[z, x])?;
    let m = tape.constant(mask);

    let masked = time(&mut tape, a.iters, |t| masked_mha(t, tokens, m, &p, a.heads))?;
    let separate = time(&mut tape, a.iters, |t| separate_mha_oracle(t, z, x, &cats, &p, a.heads))?;
    let (m_mean, m_std) = mean_std(&masked);
    let (s_mean, s_std) = mean_std(&separate);
    Ok([
        Timing {
            variant: "masked",
            iters: a.iters,
            mean_ms: m_mean,
            std_ms: m_std,
            speedup: s_mean / m_mean,
        },
        Timing {
            variant: "separate",
            iters: a.iters,
            mean_ms: s_mean,
            std_ms: s_std,
            speedup: 1.0,
        },
    ])
}

pub fn to_csv(rows: &[Timing]) -> String {
    let mut s = format!("{CSV_HEADER}\n");
    for r in rows {
        s.push_str(&format!("{},{},{:.4},{:.4},{:.4}\n", r.variant, r.iters, r.mean_ms, r.std_ms, r.speedup));
    }
    s
}

pub fn run(a: &BenchArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let rows = bench(a)?;
    write!(out, "{}", to_csv(&rows)).map_err(|e| CliError::io("<stdout>", e))
}
