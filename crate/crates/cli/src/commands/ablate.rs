use std::io::Write;
use std::path::{Path, PathBuf};

use grm_core::model::ModelConfig;
use grm_core::relation::{Pooling, RelationMode};
use grm_tracker::eval::{evaluate_checkpoint, held_out};
use log::info;

use super::opt_field;
use super::train::train_to_dir;
use crate::config::RunConfig;
use crate::error::CliError;
use crate::AblateArgs;

pub const CSV_HEADER: &str =
    "variant,relation,division_layers,pooling,mean_IoU,sr50,sr75,mean_ea_fraction,final_loss,checkpoint_sha256";

/// Which encoder layers carry a division module, relative to depth `L`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerRange {
    /// `2..=L`
    FromSecond,
    /// `1..=L`
    All,
    /// The last third-plus-one layers: `L - floor(2L/3) + 1 ..= L`.
    Upper,
}

impl LayerRange {
    pub fn layers(self, depth: usize) -> Vec<usize> {
        let start = match self {
            LayerRange::FromSecond => 2,
            LayerRange::All => 1,
            LayerRange::Upper => depth - 2 * depth / 3 + 1,
        };
        (start.min(depth).max(1)..=depth).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Variant {
    pub label: &'static str,
    pub relation: RelationMode,
    pub layers: LayerRange,
    pub pooling: Pooling,
}

const VARIANTS: [Variant; 7] = [
    Variant::new("#1", RelationMode::TwoStream, LayerRange::FromSecond, Pooling::Max),
    Variant::new("#2", RelationMode::OneStream, LayerRange::FromSecond, Pooling::Max),
    Variant::new("#5", RelationMode::Adaptive, LayerRange::FromSecond, Pooling::Max),
    Variant::new("#b", RelationMode::Adaptive, LayerRange::All, Pooling::Max),
    Variant::new("#c", RelationMode::Adaptive, LayerRange::Upper, Pooling::Max),
    Variant::new("#d", RelationMode::Adaptive, LayerRange::FromSecond, Pooling::Avg),
    // Max pooling from the second layer on: the full method again.
    Variant::new("#e", RelationMode::Adaptive, LayerRange::FromSecond, Pooling::Max),
];

impl Variant {
    const fn new(label: &'static str, relation: RelationMode, layers: LayerRange, pooling: Pooling) -> Self {
        Self {
            label,
            relation,
            layers,
            pooling,
        }
    }

    pub fn all() -> &'static [Variant] {
        &VARIANTS
    }

    pub fn from_label(label: &str) -> Result<Variant, CliError> {
        VARIANTS.iter().copied().find(|v| v.label == label).ok_or_else(|| {
            CliError::Config(format!("unknown ablation variant `{label}`; expected one of #1 #2 #5 #b #c #d #e"))
        })
    }

    /// The model of `base` with this variant's relation axes applied.
    pub fn resolve(&self, base: &ModelConfig) -> ModelConfig {
        ModelConfig {
            relation: self.relation,
            division_layers: self.layers.layers(base.depth),
            pooling: self.pooling,
            ..base.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: String,
    pub model: ModelConfig,
    pub mean_iou: f64,
    pub sr50: f64,
    pub sr75: f64,
    pub mean_ea_fraction: Option<f64>,
    pub final_loss: Option<f64>,
    pub checkpoint_sha256: String,
}

fn dir_name(label: &str) -> String {
    format!("variant_{}", label.trim_start_matches('#'))
}

/// Trains and evaluates every labelled variant on `cfg.ablate.suite` with the
/// same seed. Variants that resolve to an identical model share one run.
pub fn ablate(cfg: &RunConfig, labels: &[String], out_dir: &Path) -> Result<Vec<AblationRow>, CliError> {
    let suite = cfg.ablate.suite;
    let sequences = held_out(suite, cfg.eval.sequences, cfg.eval.frames)?;
    let mut rows: Vec<AblationRow> = Vec::new();
    for label in labels {
        let variant = Variant::from_label(label)?;
        let model = variant.resolve(&cfg.model);
        if let Some(done) = rows.iter().find(|r| r.model == model) {
            info!("{label} resolves to the same model as {}", done.variant);
            rows.push(AblationRow {
                variant: variant.label.into(),
                ..done.clone()
            });
            continue;
        }
        let mut run = cfg.clone();
        run.model = model.clone();
        run.data.suite = suite;
        run.validate()?;
        info!("training {label}");
        let (output, summary) = train_to_dir(&run, &out_dir.join(dir_name(variant.label)))?;
        let metrics = evaluate_checkpoint(&output.checkpoint, &run.data.crop, &sequences)?;
        let ea: Vec<f64> = metrics.ea_fraction_per_layer.iter().flatten().copied().collect();
        rows.push(AblationRow {
            variant: variant.label.into(),
            model,
            mean_iou: metrics.mean_iou,
            sr50: metrics.sr50,
            sr75: metrics.sr75,
            mean_ea_fraction: (!ea.is_empty()).then(|| ea.iter().sum::<f64>() / ea.len() as f64),
            final_loss: summary.final_loss,
            checkpoint_sha256: summary.checkpoint_sha256,
        });
    }
    Ok(rows)
}

pub fn to_csv(rows: &[AblationRow]) -> String {
    let mut s = format!("{CSV_HEADER}\n");
    for r in rows {
        let layers: Vec<String> = r.model.division_layers.iter().map(|l| l.to_string()).collect();
        let pooling = match r.model.pooling {
            Pooling::Max => "max",
            Pooling::Avg => "avg",
        };
        s.push_str(&format!(
            "{},{},{},{pooling},{},{},{},{},{},{}\n",
            r.variant,
            r.model.relation.name(),
            layers.join(" "),
            r.mean_iou,
            r.sr50,
            r.sr75,
            opt_field(r.mean_ea_fraction),
            opt_field(r.final_loss),
            r.checkpoint_sha256
        ));
    }
    s
}

pub fn run(a: &AblateArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(&a.config)?;
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    let labels = a.variants.clone().unwrap_or_else(|| cfg.ablate.variants.clone());
    let dir: PathBuf = a.out.clone().unwrap_or_else(|| cfg.out_dir.join("ablate"));
    let rows = ablate(&cfg, &labels, &dir)?;
    write!(out, "{}", to_csv(&rows)).map_err(|e| CliError::io("<stdout>", e))
}
