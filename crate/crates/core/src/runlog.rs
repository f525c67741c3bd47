//! Persistent run artifacts: one JSON object per training round, an
//! optional halt marker when a budget trips mid-run, and the one-row
//! summary the comparison tables are built from. Serialization is
//! deterministic — same run, same bytes — so logs can be diffed.

use crate::error::{Error, Result};
use crate::fl::Phase;
use crate::scheduler::PolicyKind;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// What one round leaves behind. Radio and fairness fields are `None`
/// (JSON `null`) for pretraining rounds, which have no uplink.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    /// 1-based, continuous across both phases.
    pub round: u64,
    pub phase: Phase,
    pub selected: Vec<usize>,
    pub snr_db: Option<f64>,
    pub latency_s: f64,
    pub energy_j: f64,
    pub loss: f64,
    pub ppl: f64,
    pub mismatch_norm: f64,
    pub jain_so_far: Option<f64>,
    pub gini_so_far: Option<f64>,
    /// Policy anomalies worth surfacing: solver fallbacks, degenerate draws.
    pub note: Option<String>,
}

/// Exactly the column set external plotting consumes.
pub const SUMMARY_HEADER: &str =
    "policy,k,seed,jain_r30,gini_r30,ppl_r30,avg_snr_db,total_latency_s,total_energy_j";

/// End-of-run scalars at the fine-tuning horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub policy: PolicyKind,
    pub k: usize,
    pub seed: u64,
    pub jain_r30: f64,
    pub gini_r30: f64,
    pub ppl_r30: f64,
    pub avg_snr_db: f64,
    pub total_latency_s: f64,
    pub total_energy_j: f64,
}

impl RunSummary {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.policy,
            self.k,
            self.seed,
            self.jain_r30,
            self.gini_r30,
            self.ppl_r30,
            self.avg_snr_db,
            self.total_latency_s,
            self.total_energy_j
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct HaltLine {
    halt: String,
}

/// A full run: per-round records, the summary, and — if a budget cap was
/// hit mid-run — the violation report that ended it early.
#[derive(Debug, Clone, PartialEq)]
pub struct RunLog {
    pub records: Vec<RoundRecord>,
    pub summary: RunSummary,
    pub halt: Option<String>,
}

impl RunLog {
    /// One object per line; a trailing `{"halt": …}` object closes a
    /// truncated run.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for rec in &self.records {
            out.push_str(
                &serde_json::to_string(rec).map_err(|e| Error::Parse(e.to_string()))?,
            );
            out.push('\n');
        }
        if let Some(halt) = &self.halt {
            out.push_str(
                &serde_json::to_string(&HaltLine { halt: halt.clone() })
                    .map_err(|e| Error::Parse(e.to_string()))?,
            );
            out.push('\n');
        }
        Ok(out)
    }

    /// Inverse of [`RunLog::to_jsonl`] minus the summary (which lives in
    /// the CSV, not the stream).
    pub fn parse_jsonl(text: &str) -> Result<(Vec<RoundRecord>, Option<String>)> {
        let mut records = Vec::new();
        let mut halt = None;
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            if halt.is_some() {
                return Err(Error::Parse(format!("line {}: records after the halt marker", i + 1)));
            }
            if let Ok(rec) = serde_json::from_str::<RoundRecord>(line) {
                records.push(rec);
            } else {
                let h: HaltLine = serde_json::from_str(line)
                    .map_err(|e| Error::Parse(format!("line {}: {e}", i + 1)))?;
                halt = Some(h.halt);
            }
        }
        Ok((records, halt))
    }
}

/// Header plus one row per line, trailing newline included.
pub fn summary_csv(rows: &[String]) -> String {
    let mut out = String::from(SUMMARY_HEADER);
    out.push('\n');
    for row in rows {
        out.push_str(row);
        out.push('\n');
    }
    out
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    Ok(())
}

pub fn write_jsonl(path: &Path, log: &RunLog) -> Result<()> {
    ensure_parent(path)?;
    std::fs::write(path, log.to_jsonl()?)?;
    Ok(())
}

pub fn write_summary_csv(path: &Path, rows: &[String]) -> Result<()> {
    ensure_parent(path)?;
    std::fs::write(path, summary_csv(rows))?;
    Ok(())
}
