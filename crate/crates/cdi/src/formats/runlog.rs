//! JSON-lines run logs: one object per training stage.

use std::io::Write;

use cdi_core::pipeline::StageReport;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLogEntry {
    /// Free-form run identifier, e.g. `ratio=0.5 seed=3`.
    pub run: String,
    /// The configuration the stage ran under.
    pub config: Value,
    #[serde(flatten)]
    pub report: StageReport,
}

pub fn write_entries<W: Write>(mut out: W, entries: &[RunLogEntry]) -> Result<()> {
    for e in entries {
        serde_json::to_writer(&mut out, e)?;
        out.write_all(b"\n").map_err(serde_json::Error::io)?;
    }
    Ok(())
}

pub fn parse(text: &str) -> Result<Vec<RunLogEntry>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}
