//! Training configuration files, loss histories and evaluation reports.

use std::fs;
use std::path::Path;

use cmtl_core::train::{EpochRecord, EvaluationReport, ExperimentConfig, TrainingConfig};
use serde::Serialize;

use crate::{Error, Result};

/// Reads a configuration file. A JSON object with a `training` key is a full
/// experiment; any other object is read as bare training settings applied on
/// top of `base`.
pub fn load_config(path: &Path, base: ExperimentConfig) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::format(path, format!("bad JSON: {e}")))?;
    let bad = |e: serde_json::Error| Error::format(path, format!("bad config: {e}"));
    let cfg = if value.get("training").is_some() {
        serde_json::from_value(value).map_err(bad)?
    } else {
        let training: TrainingConfig = serde_json::from_value(value).map_err(bad)?;
        ExperimentConfig { training, ..base }
    };
    cfg.validate().map_err(|e| Error::format(path, e.to_string()))?;
    Ok(cfg)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("value serializes");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_report(path: &Path) -> Result<EvaluationReport> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, format!("bad report: {e}")))
}

/// CSV with columns `epoch, L, L_c, L_d`.
pub fn write_history(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let to_err = |e: csv::Error| Error::format(path, e.to_string());
    let mut w = csv::Writer::from_path(path).map_err(to_err)?;
    w.write_record(["epoch", "L", "L_c", "L_d"]).map_err(to_err)?;
    for r in history {
        w.write_record([
            r.epoch.to_string(),
            r.loss.to_string(),
            r.classification.to_string(),
            r.density.to_string(),
        ])
        .map_err(to_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_history(path: &Path) -> Result<Vec<EpochRecord>> {
    let to_err = |e: csv::Error| Error::format(path, e.to_string());
    let mut r = csv::Reader::from_path(path).map_err(to_err)?;
    r.records()
        .map(|rec| {
            let rec = rec.map_err(to_err)?;
            let num = |i: usize| -> Result<f64> {
                rec.get(i)
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| Error::format(path, format!("bad value in column {i}")))
            };
            Ok(EpochRecord {
                epoch: num(0)? as usize,
                loss: num(1)?,
                classification: num(2)?,
                density: num(3)?,
            })
        })
        .collect()
}
