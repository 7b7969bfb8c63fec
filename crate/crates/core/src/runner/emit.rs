//! Machine-readable results: the metrics CSV with its fixed schema and the
//! per-run JSON summary. Files land atomically (write temp, then rename).

use crate::error::{Error, Result};
use crate::runner::config::ExperimentConfig;
use serde::Serialize;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

pub const CSV_HEADER: &str =
    "run_id,seed,epoch,split,loss,accuracy,precision,recall,f1,grad_var_max,grad_var_mean,wall_time_s";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Val => write!(f, "val"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct MetricsRecord {
    pub run_id: String,
    pub seed: u64,
    pub epoch: usize,
    pub split: Split,
    pub loss: f64,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// None when fewer than two optimizer steps happened this epoch
    /// (evaluation-only epochs included); written as an empty CSV field.
    pub grad_var_max: Option<f64>,
    pub grad_var_mean: Option<f64>,
    pub wall_time_s: f64,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl MetricsRecord {
    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            self.run_id,
            self.seed,
            self.epoch,
            self.split,
            self.loss,
            self.accuracy,
            self.precision,
            self.recall,
            self.f1,
            fmt_opt(self.grad_var_max),
            fmt_opt(self.grad_var_mean),
            self.wall_time_s
        )
    }

    pub fn from_csv_row(row: &str) -> Result<Self> {
        let fields: Vec<&str> = row.split(',').collect();
        if fields.len() != 12 {
            return Err(Error::Format(format!(
                "expected 12 CSV fields, got {} in '{row}'",
                fields.len()
            )));
        }
        let parse_f = |s: &str, what: &str| -> Result<f64> {
            s.parse()
                .map_err(|_| Error::Format(format!("bad {what} value '{s}'")))
        };
        let parse_opt = |s: &str, what: &str| -> Result<Option<f64>> {
            if s.is_empty() {
                Ok(None)
            } else {
                parse_f(s, what).map(Some)
            }
        };
        Ok(Self {
            run_id: fields[0].to_string(),
            seed: fields[1]
                .parse()
                .map_err(|_| Error::Format("bad seed".into()))?,
            epoch: fields[2]
                .parse()
                .map_err(|_| Error::Format("bad epoch".into()))?,
            split: match fields[3] {
                "train" => Split::Train,
                "val" => Split::Val,
                other => return Err(Error::Format(format!("bad split '{other}'"))),
            },
            loss: parse_f(fields[4], "loss")?,
            accuracy: parse_f(fields[5], "accuracy")?,
            precision: parse_f(fields[6], "precision")?,
            recall: parse_f(fields[7], "recall")?,
            f1: parse_f(fields[8], "f1")?,
            grad_var_max: parse_opt(fields[9], "grad_var_max")?,
            grad_var_mean: parse_opt(fields[10], "grad_var_mean")?,
            wall_time_s: parse_f(fields[11], "wall_time_s")?,
        })
    }
}

pub fn records_to_csv(records: &[MetricsRecord]) -> String {
    let mut out = String::with_capacity(64 * (records.len() + 1));
    out.push_str(CSV_HEADER);
    out.push('\n');
    for r in records {
        let _ = writeln!(out, "{}", r.to_csv_row());
    }
    out
}

pub fn parse_csv(text: &str) -> Result<Vec<MetricsRecord>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == CSV_HEADER => {}
        Some(h) => return Err(Error::Format(format!("unexpected CSV header '{h}'"))),
        None => return Err(Error::Format("empty CSV".into())),
    }
    lines.map(MetricsRecord::from_csv_row).collect()
}

/// Write-temp-then-rename within the destination directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .ok_or_else(|| Error::Io(std::io::Error::other("no parent dir")))?;
    std::fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".{}.tmp-{}",
        path.file_name().and_then(|n| n.to_str()).unwrap_or("out"),
        std::process::id()
    ));
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct SeedSummary {
    pub seed: u64,
    /// Earliest epoch with the highest validation accuracy.
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub best_val_loss: f64,
    pub final_val_accuracy: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub run_id: String,
    pub version: String,
    pub per_seed: Vec<SeedSummary>,
    pub config: ExperimentConfig,
}

/// Best epoch per seed: argmax of validation accuracy, ties to the earliest.
pub fn summarize(records: &[MetricsRecord], config: &ExperimentConfig) -> RunSummary {
    let run_id = config.run_id();
    let mut per_seed = Vec::new();
    let mut seeds: Vec<u64> = records.iter().map(|r| r.seed).collect();
    seeds.sort_unstable();
    seeds.dedup();
    for seed in seeds {
        let val_rows: Vec<&MetricsRecord> = records
            .iter()
            .filter(|r| r.seed == seed && r.split == Split::Val)
            .collect();
        if val_rows.is_empty() {
            continue;
        }
        let mut best = &val_rows[0];
        for row in &val_rows {
            if row.accuracy > best.accuracy {
                best = row;
            }
        }
        let last = val_rows.iter().max_by_key(|r| r.epoch).unwrap();
        per_seed.push(SeedSummary {
            seed,
            best_epoch: best.epoch,
            best_val_accuracy: best.accuracy,
            best_val_loss: best.loss,
            final_val_accuracy: last.accuracy,
        });
    }
    RunSummary {
        run_id,
        version: env!("CARGO_PKG_VERSION").to_string(),
        per_seed,
        config: config.clone(),
    }
}

/// Write the CSV and JSON summary; returns their paths.
pub fn emit_results(
    records: &[MetricsRecord],
    dir: &Path,
    config: &ExperimentConfig,
) -> Result<(PathBuf, PathBuf)> {
    let run_id = config.run_id();
    let csv_path = dir.join(format!("metrics_{run_id}.csv"));
    write_atomic(&csv_path, records_to_csv(records).as_bytes())?;
    let summary = summarize(records, config);
    let summary_path = dir.join(format!("summary_{run_id}.json"));
    write_atomic(
        &summary_path,
        serde_json::to_string_pretty(&summary)?.as_bytes(),
    )?;
    Ok((csv_path, summary_path))
}
