//! One training run and its directory.
//!
//! A run directory is named `<strategy>-<id>`, where `id` is the first 16 hex
//! digits of SHA-256 over the canonical config echo and the dataset
//! checksum. It holds `config.toml`, `metrics.csv`, `model.ckpt` and, written
//! last, `manifest.json`. Everything except the manifest is a pure function
//! of the inputs.

use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use pmr_core::train::{self, RunLog};
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::config::LabConfig;
use crate::dataset_io::LoadedDataset;
use crate::error::{LabError, Result};
use crate::fsutil::{sha256_hex, write_atomic};
use crate::metrics_csv;

pub const TOOL_VERSION: &str = concat!("pmr-lab ", env!("CARGO_PKG_VERSION"));

pub const CONFIG_FILE: &str = "config.toml";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutputFile {
    pub name: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub run_id: String,
    pub strategy: String,
    pub seed: u64,
    /// Canonical echo of the resolved configuration.
    pub config: String,
    pub dataset_sha256: String,
    pub started_unix: u64,
    pub wall_clock_seconds: f64,
    pub outputs: Vec<OutputFile>,
    pub warnings: Vec<String>,
}

impl RunManifest {
    pub fn read(run_dir: &Path) -> Result<Self> {
        let path = run_dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(LabError::io(&path))?;
        serde_json::from_str(&text).map_err(|e| LabError::format(&path, e.to_string()))
    }
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub manifest: RunManifest,
    pub log: RunLog,
}

pub fn run_id(config_echo: &str, dataset_sha256: &str) -> String {
    let mut key = String::with_capacity(config_echo.len() + 80);
    key.push_str(config_echo);
    key.push_str("dataset = ");
    key.push_str(dataset_sha256);
    key.push('\n');
    sha256_hex(key.as_bytes())[..16].to_string()
}

/// Trains `cfg` on `data` and writes the run directory under `out_root`.
/// `notes` are recorded as manifest warnings alongside the run's own.
pub fn execute(
    cfg: &LabConfig,
    data: &LoadedDataset,
    out_root: &Path,
    notes: Vec<String>,
) -> Result<RunOutcome> {
    let started = Instant::now();
    let started_unix = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs());
    let echo = cfg.to_toml();
    let id = run_id(&echo, &data.sha256);
    let dir = out_root.join(format!("{}-{id}", cfg.train.strategy));

    let spec = cfg.model_spec(&data.spec);
    let (model, log) = train::run(&spec, &data.train, Some(&data.test), &cfg.train)?;

    let metrics = metrics_csv::to_csv(&log.metrics);
    let ckpt = checkpoint::encode(&model, &spec);
    let mut outputs = Vec::new();
    for (name, bytes) in [
        (CONFIG_FILE, echo.as_bytes()),
        (METRICS_FILE, &metrics[..]),
        (CHECKPOINT_FILE, &ckpt[..]),
    ] {
        write_atomic(&dir.join(name), bytes)?;
        outputs.push(OutputFile {
            name: name.into(),
            sha256: sha256_hex(bytes),
        });
    }
    let mut warnings = notes;
    warnings.extend(log.warnings.iter().cloned());
    let manifest = RunManifest {
        tool: TOOL_VERSION.into(),
        run_id: id,
        strategy: cfg.train.strategy.as_str().into(),
        seed: cfg.seed,
        config: echo,
        dataset_sha256: data.sha256.clone(),
        started_unix,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
        outputs,
        warnings,
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_atomic(&dir.join(MANIFEST_FILE), format!("{json}\n").as_bytes())?;
    Ok(RunOutcome { dir, manifest, log })
}
