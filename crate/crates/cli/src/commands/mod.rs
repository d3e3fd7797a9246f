pub mod ablate;
pub mod bench;
pub mod dump;
pub mod eval;
pub mod gradcheck;
pub mod train;

use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::error::CliError;

pub(crate) fn write_json<T: Serialize>(out: &mut dyn Write, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("serializable output");
    writeln!(out, "{text}").map_err(|e| CliError::io("<stdout>", e))
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    std::fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

pub(crate) fn create_dir(path: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

/// Formats an optional number as a CSV field; `None` is left empty.
pub(crate) fn opt_field(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}
