//! Predictions JSONL and the per-epoch CSV training log.

use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::{bail, Context, Result};
use pln_core::eval::Prediction;
use pln_core::training::EpochRecord;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub query_id: usize,
    pub start_sec: f64,
    pub end_sec: f64,
    pub score: f64,
    pub stage: usize,
}

/// One line per prediction, queries in order, each query's list ranked.
pub fn write_predictions(path: &Path, preds: &[Vec<Prediction>], limit: usize) -> Result<()> {
    let mut out = Vec::new();
    for (q, list) in preds.iter().enumerate() {
        for p in list.iter().take(limit) {
            let rec = PredictionRecord {
                query_id: q,
                start_sec: p.start_sec,
                end_sec: p.end_sec,
                score: p.score,
                stage: p.stage,
            };
            serde_json::to_writer(&mut out, &rec)?;
            out.push(b'\n');
        }
    }
    fs::write(path, out).with_context(|| format!("writing {}", path.display()))
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Into::into))
        .collect()
}

pub fn log_header(n_stages: usize) -> Vec<String> {
    let mut h = vec!["epoch".to_string()];
    h.extend((1..=n_stages).map(|t| format!("stage_{t}_loss")));
    h.push("val_miou".into());
    h
}

/// Appends epoch rows to a CSV log, writing the header when the file is new.
pub struct TrainLog {
    writer: csv::Writer<fs::File>,
    n_stages: usize,
}

impl TrainLog {
    pub fn create(path: &Path, n_stages: usize) -> Result<Self> {
        let file = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
        let mut writer = csv::Writer::from_writer(file);
        writer.write_record(log_header(n_stages))?;
        writer.flush()?;
        Ok(Self { writer, n_stages })
    }

    /// Keeps rows up to `epochs_done` and appends after them.
    pub fn resume(path: &Path, n_stages: usize, epochs_done: usize) -> Result<Self> {
        let rows = if path.exists() { read_log(path)? } else { Vec::new() };
        let mut log = Self::create(path, n_stages)?;
        for row in rows.into_iter().filter(|r| r.epoch <= epochs_done) {
            log.push_row(&row)?;
        }
        Ok(log)
    }

    pub fn push(&mut self, rec: &EpochRecord) -> Result<()> {
        self.push_row(&LogRow {
            epoch: rec.epoch,
            stage_losses: rec.stage_losses.clone(),
            val_miou: rec.val_miou,
        })
    }

    fn push_row(&mut self, row: &LogRow) -> Result<()> {
        if row.stage_losses.len() != self.n_stages {
            bail!("log row with {} stage losses", row.stage_losses.len());
        }
        let mut fields = vec![row.epoch.to_string()];
        fields.extend(row.stage_losses.iter().map(|l| format!("{l:.10}")));
        fields.push(row.val_miou.map(|m| format!("{m:.10}")).unwrap_or_default());
        self.writer.write_record(fields)?;
        self.writer.flush()?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub stage_losses: Vec<f64>,
    pub val_miou: Option<f64>,
}

pub fn read_log(path: &Path) -> Result<Vec<LogRow>> {
    let mut reader = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let n_stages = reader.headers()?.len().saturating_sub(2);
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec?;
        let epoch = rec[0].parse()?;
        let stage_losses = (1..=n_stages).map(|k| rec[k].parse()).collect::<Result<_, _>>()?;
        let last = &rec[n_stages + 1];
        let val_miou = if last.is_empty() { None } else { Some(last.parse()?) };
        rows.push(LogRow {
            epoch,
            stage_losses,
            val_miou,
        });
    }
    Ok(rows)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    Ok(())
}
