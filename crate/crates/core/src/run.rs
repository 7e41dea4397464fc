//! Run directories: manifests, the overwrite policy and post-hoc traces of
//! `metrics.csv`.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::agent::TrainReport;
use crate::config::{ConfigError, TrainConfig};

pub const MANIFEST_FILE: &str = "manifest.toml";
pub const METRICS_FILE: &str = "metrics.csv";
pub const TRACE_FILE: &str = "residual_trace.csv";

#[derive(Debug, Error)]
pub enum RunError {
    #[error("{0} already exists; pass --overwrite to replace it")]
    Exists(PathBuf),
    #[error("{0} exists but has no {MANIFEST_FILE}; refusing to overwrite a directory that is not a run")]
    NotARun(PathBuf),
    #[error("no metrics at {0}")]
    MissingMetrics(PathBuf),
    #[error("{0} has no epochs")]
    EmptyRun(PathBuf),
    #[error("manifest {path}: {msg}")]
    Manifest { path: PathBuf, msg: String },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Content-derived run identifier: the first 16 hex digits of the SHA-256
/// of the serialized config, so identical configs share an id.
pub fn config_run_id(cfg: &TrainConfig) -> String {
    let digest = Sha256::digest(cfg.to_toml_string().as_bytes());
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

pub fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

/// Written once per run directory. `config` holds the fully resolved
/// configuration, so `train --from-manifest` reproduces the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub command: String,
    pub args: Vec<String>,
    pub version: String,
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Rayon worker count; `0` means the library default.
    pub workers: usize,
    pub started_unix: u64,
    pub finished_unix: Option<u64>,
    /// `running`, `ok` or the failure message.
    pub status: String,
    pub config: TrainConfig,
}

impl RunManifest {
    pub fn new(command: &str, args: Vec<String>, cfg: &TrainConfig, out_dir: &Path, workers: usize) -> Self {
        Self {
            run_id: config_run_id(cfg),
            command: command.to_string(),
            args,
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed: cfg.run.seed,
            out_dir: out_dir.to_path_buf(),
            workers,
            started_unix: unix_now(),
            finished_unix: None,
            status: "running".to_string(),
            config: cfg.clone(),
        }
    }

    pub fn write(&self, dir: &Path) -> Result<(), RunError> {
        let text = toml::to_string(self).map_err(|e| RunError::Manifest {
            path: dir.join(MANIFEST_FILE),
            msg: e.to_string(),
        })?;
        let mut f = std::fs::File::create(dir.join(MANIFEST_FILE))?;
        f.write_all(text.as_bytes())?;
        Ok(())
    }

    pub fn finish(&mut self, dir: &Path, status: &str) -> Result<(), RunError> {
        self.finished_unix = Some(unix_now());
        self.status = status.to_string();
        self.write(dir)
    }

    /// Accepts either the manifest file or the run directory holding it.
    pub fn read(path: &Path) -> Result<Self, RunError> {
        let file = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        let text = std::fs::read_to_string(&file)?;
        let m: RunManifest = toml::from_str(&text).map_err(|e| RunError::Manifest {
            path: file.clone(),
            msg: e.to_string(),
        })?;
        m.config.validate()?;
        Ok(m)
    }
}

/// Make `dir` ready for a fresh run. An existing non-empty directory is
/// only cleared under `overwrite`, and only if it holds a manifest.
pub fn prepare_out_dir(dir: &Path, overwrite: bool) -> Result<(), RunError> {
    if dir.exists() && std::fs::read_dir(dir)?.next().is_some() {
        if !overwrite {
            return Err(RunError::Exists(dir.to_path_buf()));
        }
        if !dir.join(MANIFEST_FILE).is_file() {
            return Err(RunError::NotARun(dir.to_path_buf()));
        }
        std::fs::remove_dir_all(dir)?;
    }
    std::fs::create_dir_all(dir)?;
    Ok(())
}

/// Parse a run's `metrics.csv`. Accepts the file or its directory.
pub fn read_metrics(path: &Path) -> Result<Vec<TrainReport>, RunError> {
    let file = if path.is_dir() { path.join(METRICS_FILE) } else { path.to_path_buf() };
    if !file.is_file() {
        return Err(RunError::MissingMetrics(file));
    }
    let mut r = csv::Reader::from_path(&file)?;
    let rows = r.deserialize().collect::<Result<Vec<TrainReport>, _>>()?;
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TraceRow {
    pub epoch: usize,
    pub eta: f64,
    /// `eta / max |eta|`, so the curve peaks at magnitude 1.
    pub eta_scaled: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualTrace {
    pub run_id: String,
    pub rows: Vec<TraceRow>,
    /// Epochs with a finite residual.
    pub finite: usize,
    /// Fraction of finite-residual epochs with `η > 0`.
    pub positive_fraction: f64,
    /// The same fraction over the first half of all epochs.
    pub early_positive_fraction: f64,
}

/// Scaled update-residual curve, one row per epoch. Epochs before the
/// first model fit carry NaN and are left out of the fractions.
pub fn residual_trace(reports: &[TrainReport]) -> ResidualTrace {
    let scale = reports
        .iter()
        .map(|r| r.eta.abs())
        .filter(|v| v.is_finite())
        .fold(0.0_f64, f64::max);
    let rows: Vec<TraceRow> = reports
        .iter()
        .map(|r| TraceRow {
            epoch: r.epoch,
            eta: r.eta,
            eta_scaled: if scale > 0.0 { r.eta / scale } else { r.eta },
        })
        .collect();
    let frac = |rs: &[TraceRow]| {
        let finite: Vec<f64> = rs.iter().map(|r| r.eta).filter(|v| v.is_finite()).collect();
        if finite.is_empty() {
            (0, f64::NAN)
        } else {
            (finite.len(), finite.iter().filter(|&&v| v > 0.0).count() as f64 / finite.len() as f64)
        }
    };
    let (finite, positive_fraction) = frac(&rows);
    let half = rows.len().div_ceil(2);
    let (_, early_positive_fraction) = frac(&rows[..half]);
    ResidualTrace {
        run_id: reports.first().map(|r| r.run_id.clone()).unwrap_or_default(),
        rows,
        finite,
        positive_fraction,
        early_positive_fraction,
    }
}

impl ResidualTrace {
    pub fn write_csv(&self, path: &Path) -> Result<(), RunError> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
        w.write_record(["run_id", "epoch", "eta", "eta_scaled"])?;
        for r in &self.rows {
            w.write_record([
                self.run_id.clone(),
                r.epoch.to_string(),
                r.eta.to_string(),
                r.eta_scaled.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Read a run directory's metrics and write its residual trace beside them.
pub fn write_residual_trace(run_dir: &Path, overwrite: bool) -> Result<ResidualTrace, RunError> {
    let reports = read_metrics(run_dir)?;
    if reports.is_empty() {
        return Err(RunError::EmptyRun(run_dir.to_path_buf()));
    }
    let out = run_dir.join(TRACE_FILE);
    if out.exists() && !overwrite {
        return Err(RunError::Exists(out));
    }
    let trace = residual_trace(&reports);
    trace.write_csv(&out)?;
    Ok(trace)
}
