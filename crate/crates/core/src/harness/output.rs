use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::config::ExperimentConfig;
use super::metrics::Summary;
use super::runner::{ExperimentOutcome, RoundRecord};
use crate::error::{Error, Result};

pub const ROUNDS_HEADER: [&str; 4] = ["round", "accuracy", "agg_norm", "detection"];
pub const TRUST_HEADER: [&str; 7] = ["round", "client_id", "alpha", "s_c", "trust", "weight", "flagged"];

/// 17 significant digits.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(fmt_f64).unwrap_or_default()
}

#[derive(Serialize)]
struct SummaryFile<'a> {
    config: &'a ExperimentConfig,
    #[serde(flatten)]
    summary: &'a Summary,
}

#[derive(Serialize)]
struct FlagsFile<'a> {
    flagged: &'a [usize],
    malicious: &'a [usize],
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e))
}

pub fn write_rounds_csv(records: &[RoundRecord], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(ROUNDS_HEADER).map_err(|e| csv_err(path, e))?;
    for r in records {
        w.write_record([
            r.round.to_string(),
            fmt_f64(r.accuracy),
            fmt_f64(r.agg_norm),
            u8::from(r.detection).to_string(),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_trust_csv(records: &[RoundRecord], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(TRUST_HEADER).map_err(|e| csv_err(path, e))?;
    for r in records {
        for c in &r.clients {
            w.write_record([
                r.round.to_string(),
                c.client.to_string(),
                fmt_opt(c.alpha),
                fmt_opt(c.s_c),
                fmt_opt(c.trust),
                fmt_opt(c.weight),
                u8::from(c.flagged).to_string(),
            ])
            .map_err(|e| csv_err(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_json(value: &impl Serialize, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// `summary.json` contents: the config echo plus the summary fields.
pub fn summary_json(config: &ExperimentConfig, summary: &Summary) -> Result<String> {
    serde_json::to_string_pretty(&SummaryFile { config, summary }).map_err(|e| Error::invalid(e.to_string()))
}

/// Writes rounds.csv, trust.csv, summary.json and flags.json into `out_dir`
/// (created if missing) and returns their paths.
pub fn emit_outputs(outcome: &ExperimentOutcome, config: &ExperimentConfig, out_dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let rounds = out_dir.join("rounds.csv");
    let trust = out_dir.join("trust.csv");
    let summary = out_dir.join("summary.json");
    let flags = out_dir.join("flags.json");
    write_rounds_csv(&outcome.records, &rounds)?;
    write_trust_csv(&outcome.records, &trust)?;
    write_json(
        &SummaryFile {
            config,
            summary: &outcome.summary,
        },
        &summary,
    )?;
    write_json(
        &FlagsFile {
            flagged: &outcome.summary.flagged,
            malicious: &outcome.malicious,
        },
        &flags,
    )?;
    Ok(vec![rounds, trust, summary, flags])
}
