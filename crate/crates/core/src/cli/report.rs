//! Writes `trials.csv`, `martingale_traces.csv`, `report.json` and, where the
//! experiment has them, `outcomes.csv`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Value};

use crate::error::{Error, Result};

use super::config::ExperimentConfig;
use super::experiments::{per_monitor, RunOutput};

pub const TRIALS_FILE: &str = "trials.csv";
pub const TRACES_FILE: &str = "martingale_traces.csv";
pub const REPORT_FILE: &str = "report.json";
pub const OUTCOMES_FILE: &str = "outcomes.csv";

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        source,
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(source) => io_err(path, source),
        other => Error::Io {
            path: path.display().to_string(),
            source: std::io::Error::other(format!("{other:?}")),
        },
    }
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T], header: &[&str]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// The `report.json` document.
pub fn report_json(cfg: &ExperimentConfig, out: &RunOutput) -> Value {
    let mut summary = serde_json::Map::new();
    summary.insert("per_monitor".into(), json!(per_monitor(&out.rows, out.censor_at)));
    for (k, v) in &out.extra_summary {
        summary.insert(k.clone(), v.clone());
    }
    let failed: Vec<usize> = out.failed.iter().map(|f| f.0).collect();
    json!({
        "config_echo": cfg,
        "summary": summary,
        "provenance": {
            "seed": cfg.seed,
            "version": env!("CARGO_PKG_VERSION"),
        },
        "complete": failed.is_empty(),
        "failed_trials": failed,
    })
}

/// Writes every output file into `cfg.output_dir` and returns their paths.
pub fn emit_reports(cfg: &ExperimentConfig, out: &RunOutput) -> Result<Vec<PathBuf>> {
    let dir = &cfg.output_dir;
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let mut written = Vec::new();

    let path = dir.join(TRIALS_FILE);
    write_rows(
        &path,
        &out.rows,
        &[
            "trial",
            "monitor",
            "shift",
            "iterations_until_alert",
            "alerted",
            "final_m",
        ],
    )?;
    written.push(path);

    let path = dir.join(TRACES_FILE);
    write_rows(&path, &out.traces, &["trial", "monitor", "episode", "m_value"])?;
    written.push(path);

    if let Some(o) = &out.outcomes {
        let path = dir.join(OUTCOMES_FILE);
        write_rows(&path, &o.rows, &o.header)?;
        written.push(path);
    }

    let path = dir.join(REPORT_FILE);
    let mut text = serde_json::to_string_pretty(&report_json(cfg, out)).expect("report values are finite");
    text.push('\n');
    fs::write(&path, text).map_err(|e| io_err(&path, e))?;
    written.push(path);
    Ok(written)
}
