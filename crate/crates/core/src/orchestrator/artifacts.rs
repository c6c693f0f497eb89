//! On-disk run artifacts. Every file is a pure function of the run output,
//! so identical configs give byte-identical files.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::xai::ExplanationRecord;

use super::{RoundStatus, RunOutput};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const CHAIN_FILE: &str = "chain.json";
pub const EXPLANATIONS_FILE: &str = "explanations.jsonl";
pub const CONFIG_FILE: &str = "config.json";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ArtifactPaths {
    pub metrics: PathBuf,
    pub summary: PathBuf,
    pub chain: PathBuf,
    pub explanations: PathBuf,
    pub config: PathBuf,
}

impl ArtifactPaths {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            metrics: dir.join(METRICS_FILE),
            summary: dir.join(SUMMARY_FILE),
            chain: dir.join(CHAIN_FILE),
            explanations: dir.join(EXPLANATIONS_FILE),
            config: dir.join(CONFIG_FILE),
        }
    }
}

/// One CSV line per round. Integration columns are empty for aborted rounds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub round: u64,
    pub status: RoundStatus,
    pub participants: usize,
    pub global_version: u64,
    pub global_accuracy: f64,
    pub global_loss: f64,
    pub global_fpr: f64,
    pub integrated_accuracy: Option<f64>,
    pub integrated_fpr: Option<f64>,
    pub blocks_appended: usize,
    pub rejected: usize,
    pub agreement_rate: Option<f64>,
    pub epsilon_charged: f64,
}

fn jsonl<T: Serialize>(path: &Path, items: &[T]) -> std::io::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for it in items {
        serde_json::to_writer(&mut w, it)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

pub fn write_artifacts(out: &RunOutput, dir: &Path) -> std::io::Result<ArtifactPaths> {
    std::fs::create_dir_all(dir)?;
    let paths = ArtifactPaths::in_dir(dir);
    jsonl(&paths.metrics, &out.reports)?;
    jsonl(&paths.explanations, &out.explanations)?;

    let mut csv = csv::Writer::from_path(&paths.summary)?;
    for r in &out.reports {
        csv.serialize(SummaryRow {
            round: r.round,
            status: r.status,
            participants: r.participants.len(),
            global_version: r.global_version,
            global_accuracy: r.global_accuracy,
            global_loss: r.global_loss,
            global_fpr: r.global_fpr,
            integrated_accuracy: r.integrated_accuracy,
            integrated_fpr: r.integrated_fpr,
            blocks_appended: r.blocks_appended,
            rejected: r.rejected.len(),
            agreement_rate: r.agreement_rate,
            epsilon_charged: r.epsilon_charged.values().sum(),
        })
        .map_err(std::io::Error::other)?;
    }
    csv.flush()?;

    out.chain.export(&paths.chain).map_err(std::io::Error::other)?;
    std::fs::write(&paths.config, out.config.to_json())?;
    Ok(paths)
}

pub fn read_explanations(dir: &Path) -> std::io::Result<Vec<ExplanationRecord>> {
    let f = File::open(dir.join(EXPLANATIONS_FILE))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}
