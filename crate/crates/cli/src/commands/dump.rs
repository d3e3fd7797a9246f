use std::io::Write;
use std::path::PathBuf;

use grm_core::relation::DivisionRecord;
use grm_tracker::crop::CropConfig;
use grm_tracker::eval::held_out;
use grm_tracker::scenario::{generate_scenario, Sequence, SyntheticScenario};
use grm_tracker::track::{init_track, track_step};
use grm_tracker::Checkpoint;
use serde::Serialize;

use super::{create_dir, write_file, write_json};
use crate::error::CliError;
use crate::DumpArgs;

#[derive(Debug, Serialize)]
pub struct DumpedLayer {
    pub layer: usize,
    pub json: PathBuf,
    pub pgm: PathBuf,
    pub cross_fraction: f64,
}

/// Binary PGM of a search grid: search-only cells are 0, cross cells 255.
pub fn division_pgm(record: &DivisionRecord, grid: usize) -> Result<Vec<u8>, CliError> {
    if record.d.len() != grid * grid {
        return Err(CliError::Config(format!(
            "layer {} has {} tokens, expected a {grid}x{grid} grid",
            record.layer,
            record.d.len()
        )));
    }
    let mut out = format!("P5\n{grid} {grid}\n255\n").into_bytes();
    out.extend(record.d.iter().map(|&d| if d == 1 { 255u8 } else { 0 }));
    Ok(out)
}

fn load_sequence(a: &DumpArgs) -> Result<Sequence, CliError> {
    match &a.scenario {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
            let spec: SyntheticScenario = serde_json::from_str(&text)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            Ok(generate_scenario(&spec)?)
        }
        None => {
            let mut seqs = held_out(a.suite.into(), a.index + 1, 30)?;
            Ok(seqs.swap_remove(a.index))
        }
    }
}

/// Tracks from the first frame up to `frame` and records the divisions
/// computed on that frame.
pub fn divisions_at(ckpt: &Checkpoint, crop: &CropConfig, seq: &Sequence, frame: usize) -> Result<Vec<DivisionRecord>, CliError> {
    if frame == 0 || frame >= seq.len() {
        return Err(CliError::Config(format!(
            "frame must be in 1..{}, got {frame}",
            seq.len()
        )));
    }
    let mut state = init_track(ckpt, crop, &seq.frame(0), seq.gt(0))?;
    let mut last = None;
    for t in 1..=frame {
        last = Some(track_step(ckpt, crop, &mut state, &seq.frame(t))?);
    }
    let step = last.expect("at least one tracked frame");
    Ok(step
        .divisions
        .iter()
        .enumerate()
        .filter_map(|(i, d)| d.as_ref().map(|d| d.record(i + 1)))
        .collect())
}

pub fn run(a: &DumpArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let seq = load_sequence(a)?;
    let records = divisions_at(&ckpt, &CropConfig::default(), &seq, a.frame)?;
    let grid = ckpt.config.patch.search_grid();
    create_dir(&a.out)?;
    let mut dumped = Vec::new();
    for r in &records {
        let json = a.out.join(format!("layer{}.json", r.layer));
        let pgm = a.out.join(format!("layer{}.pgm", r.layer));
        let text = serde_json::to_string_pretty(r).expect("record serializes");
        write_file(&json, text.as_bytes())?;
        write_file(&pgm, &division_pgm(r, grid)?)?;
        let cross = r.d.iter().filter(|&&d| d == 1).count() as f64 / r.d.len() as f64;
        dumped.push(DumpedLayer {
            layer: r.layer,
            json,
            pgm,
            cross_fraction: cross,
        });
    }
    write_json(out, &dumped)
}
