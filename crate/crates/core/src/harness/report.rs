//! Per-round reports: JSON lines while running, CSV summary afterwards.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::defense::DefenseDiagnostics;
use crate::error::{Error, Result};

/// Column order of the summary CSV.
pub const CSV_COLUMNS: [&str; 8] =
    ["round", "asr", "acc", "ds", "detected_tp", "detected_fp", "detected_fn", "median_update_norm"];

/// One round's metrics. `asr`, `acc` and `ds` are percentages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub asr: f64,
    pub acc: f64,
    pub ds: f64,
    pub selected: Vec<usize>,
    pub detected_malicious: Vec<usize>,
    pub detected_benign: Vec<usize>,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub median_update_norm: f64,
    pub n_r: Option<f64>,
    pub learning_rate: f64,
    pub grad_norm_sq: f64,
    pub grad_norm_sq_avg: f64,
    pub diagnostics: Option<DefenseDiagnostics>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CsvRow {
    round: usize,
    asr: f64,
    acc: f64,
    ds: f64,
    detected_tp: usize,
    detected_fp: usize,
    detected_fn: usize,
    median_update_norm: f64,
}

pub fn write_jsonl_line<W: Write>(out: &mut W, report: &RoundReport) -> Result<()> {
    serde_json::to_writer(&mut *out, report)?;
    out.write_all(b"\n")?;
    Ok(())
}

/// Reads reports back, requiring strictly increasing rounds.
pub fn read_jsonl<R: BufRead>(input: R) -> Result<Vec<RoundReport>> {
    let mut out: Vec<RoundReport> = Vec::new();
    for (n, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rep: RoundReport = serde_json::from_str(&line)?;
        if let Some(prev) = out.last() {
            if rep.round <= prev.round {
                return Err(Error::Config(format!(
                    "line {}: round {} does not follow round {}",
                    n + 1,
                    rep.round,
                    prev.round
                )));
            }
        }
        out.push(rep);
    }
    Ok(out)
}

pub fn write_summary_csv<W: Write>(out: W, reports: &[RoundReport]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in reports {
        w.serialize(CsvRow {
            round: r.round,
            asr: r.asr,
            acc: r.acc,
            ds: r.ds,
            detected_tp: r.tp,
            detected_fp: r.fp,
            detected_fn: r.fn_,
            median_update_norm: r.median_update_norm,
        })?;
    }
    if reports.is_empty() {
        w.write_record(CSV_COLUMNS)?;
    }
    w.flush()?;
    Ok(())
}
