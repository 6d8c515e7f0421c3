//! Subcommand implementations. Each returns its result instead of printing,
//! so the binary and the tests share one code path.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use pmr_core::data::{generate_dataset, DatasetSpec};
use pmr_core::diagnostics::{angle_curve, rho_curve, unimodal_score_curves};
use pmr_core::gradcheck::{run_suite, GradcheckOptions, GradcheckReport};
use pmr_core::train::{MetricsRow, Strategy};
use rayon::prelude::*;

use crate::config::{data_echo, LabConfig};
use crate::dataset_io::{self, DatasetManifest, LoadedDataset};
use crate::error::{LabError, Result};
use crate::fsutil::{sha256_hex, write_atomic};
use crate::metrics_csv;
use crate::run::{execute, RunOutcome, METRICS_FILE};

pub fn gen_data(config: &Path, out: &Path) -> Result<DatasetManifest> {
    let cfg = LabConfig::from_path(config)?;
    let (train, test) = generate_dataset(&cfg.data)?;
    dataset_io::write_dataset(out, &cfg.data, &train, &test)
}

pub fn train(config: &Path, data: &Path, out: &Path) -> Result<RunOutcome> {
    let cfg = LabConfig::from_path(config)?;
    let loaded = dataset_io::read_dataset(data)?;
    let mut notes = Vec::new();
    if loaded.spec != cfg.data {
        notes.push(format!(
            "data.* keys of the config differ from the dataset file; the file wins:\n{}",
            data_echo(&loaded.spec)
        ));
    }
    execute(&cfg, &loaded, out, notes)
}

pub fn gradcheck(seed: u64, corrupt: bool) -> Result<GradcheckReport> {
    Ok(run_suite(&GradcheckOptions {
        seed,
        corrupt,
        ..GradcheckOptions::default()
    })?)
}

/// One line per check: objective, head, distance, error, verdict.
pub fn format_gradcheck(report: &GradcheckReport) -> String {
    let mut s = String::new();
    for r in &report.results {
        let _ = writeln!(
            s,
            "{:<15} {:<7} {:<10} {:.3e}  {}",
            r.objective.as_str(),
            r.fusion,
            r.distance,
            r.max_rel_error,
            if r.passed() { "ok" } else { "FAIL" }
        );
    }
    s
}

fn csv_bytes<const N: usize>(header: [&str; N], rows: impl Iterator<Item = [String; N]>) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for r in rows {
        w.write_record(&r).expect("in-memory write");
    }
    w.into_inner().expect("in-memory flush")
}

fn num(v: f64) -> String {
    format!("{v:?}")
}

#[derive(Clone, Debug, Default)]
pub struct DiagnoseOutcome {
    pub written: Vec<PathBuf>,
    /// Tables that could not be built from this run, with the reason.
    pub skipped: Vec<(String, String)>,
}

/// Writes `angles.csv`, `scores.csv` and `rho.csv` (per-epoch means) next to
/// the run's metrics. Tables whose inputs the run did not log are skipped.
pub fn diagnose(run_dir: &Path) -> Result<DiagnoseOutcome> {
    let rows = metrics_csv::read(&run_dir.join(METRICS_FILE))?;
    let mut outcome = DiagnoseOutcome::default();
    let mut emit = |name: &str, bytes: std::result::Result<Vec<u8>, String>| -> Result<()> {
        match bytes {
            Ok(b) => {
                let path = run_dir.join(name);
                write_atomic(&path, &b)?;
                outcome.written.push(path);
            }
            Err(why) => outcome.skipped.push((name.to_string(), why)),
        }
        Ok(())
    };

    let angles = angle_curve(&rows);
    emit(
        "angles.csv",
        if angles.is_empty() {
            Err("no gradient angles were recorded".into())
        } else {
            Ok(csv_bytes(
                ["epoch", "angle0", "angle1", "count"],
                angles.iter().map(|p| {
                    [p.epoch.to_string(), num(p.angle0), num(p.angle1), p.count.to_string()]
                }),
            ))
        },
    )?;
    emit(
        "scores.csv",
        unimodal_score_curves(&rows)
            .map(|pts| {
                csv_bytes(
                    ["epoch", "s0", "s1", "sfu"],
                    pts.iter()
                        .map(|p| [p.epoch.to_string(), num(p.s0), num(p.s1), num(p.sfu)]),
                )
            })
            .map_err(|e| e.to_string()),
    )?;
    emit(
        "rho.csv",
        rho_curve(&rows)
            .map(|pts| {
                csv_bytes(
                    ["epoch", "rho", "abs_log_rho"],
                    pts.iter()
                        .map(|p| [p.epoch.to_string(), num(p.rho), num(p.abs_log_rho)]),
                )
            })
            .map_err(|e| e.to_string()),
    )?;
    Ok(outcome)
}

#[derive(Clone, Debug)]
pub struct Job {
    pub strategy: Strategy,
    pub seed: u64,
    pub result: std::result::Result<RunOutcome, String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub strategy: Strategy,
    pub runs: usize,
    pub failed: usize,
    pub test_acc_mean: Option<f64>,
    /// Population standard deviation over seeds.
    pub test_acc_std: Option<f64>,
    pub rho_mean: Option<f64>,
    pub train_acc_mean: Option<f64>,
    pub test_probe_acc0_mean: Option<f64>,
    pub test_probe_acc1_mean: Option<f64>,
}

pub const SUMMARY_COLUMNS: [&str; 9] = [
    "strategy",
    "runs",
    "failed",
    "test_acc_mean",
    "test_acc_std",
    "rho_mean",
    "train_acc_mean",
    "test_probe_acc0_mean",
    "test_probe_acc1_mean",
];

#[derive(Clone, Debug)]
pub struct CompareOutcome {
    pub jobs: Vec<Job>,
    pub summary: Vec<SummaryRow>,
    pub summary_path: PathBuf,
}

impl CompareOutcome {
    pub fn failures(&self) -> Vec<String> {
        self.jobs
            .iter()
            .filter_map(|j| {
                j.result
                    .as_ref()
                    .err()
                    .map(|e| format!("{} seed {}: {e}", j.strategy, j.seed))
            })
            .collect()
    }

    pub fn runs(&self, strategy: Strategy) -> impl Iterator<Item = &RunOutcome> {
        self.jobs
            .iter()
            .filter(move |j| j.strategy == strategy)
            .filter_map(|j| j.result.as_ref().ok())
    }
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn summarize(strategy: Strategy, jobs: &[&Job]) -> SummaryRow {
    let finals: Vec<&MetricsRow> = jobs
        .iter()
        .filter_map(|j| j.result.as_ref().ok())
        .filter_map(|o| o.log.final_epoch())
        .collect();
    let col = |f: fn(&MetricsRow) -> Option<f64>| -> Vec<f64> { finals.iter().filter_map(|r| f(r)).collect() };
    let acc = col(|r| r.test_acc);
    let test_acc_std = mean(&acc).map(|m| {
        let var = acc.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / acc.len() as f64;
        var.sqrt()
    });
    SummaryRow {
        strategy,
        runs: jobs.len(),
        failed: jobs.iter().filter(|j| j.result.is_err()).count(),
        test_acc_mean: mean(&acc),
        test_acc_std,
        rho_mean: mean(&col(|r| r.rho)),
        train_acc_mean: mean(&col(|r| Some(r.train_acc))),
        test_probe_acc0_mean: mean(&col(|r| r.test_probe_acc0)),
        test_probe_acc1_mean: mean(&col(|r| r.test_probe_acc1)),
    }
}

fn summary_csv(rows: &[SummaryRow]) -> Vec<u8> {
    let opt = |v: Option<f64>| v.map(num).unwrap_or_default();
    csv_bytes(
        SUMMARY_COLUMNS,
        rows.iter().map(|r| {
            [
                r.strategy.to_string(),
                r.runs.to_string(),
                r.failed.to_string(),
                opt(r.test_acc_mean),
                opt(r.test_acc_std),
                opt(r.rho_mean),
                opt(r.train_acc_mean),
                opt(r.test_probe_acc0_mean),
                opt(r.test_probe_acc1_mean),
            ]
        }),
    )
}

fn jobs_csv(jobs: &[Job]) -> Vec<u8> {
    csv_bytes(
        ["strategy", "seed", "status", "run_dir", "error"],
        jobs.iter().map(|j| {
            let (status, dir, err) = match &j.result {
                Ok(o) => ("ok", o.dir.display().to_string(), String::new()),
                Err(e) => ("failed", String::new(), e.clone()),
            };
            [j.strategy.to_string(), j.seed.to_string(), status.into(), dir, err]
        }),
    )
}

fn dataset_for(cfg: &LabConfig) -> pmr_core::Result<LoadedDataset> {
    let spec: DatasetSpec = cfg.data.clone();
    let (train, test) = generate_dataset(&spec)?;
    let sha256 = sha256_hex(&dataset_io::encode(&spec, &train, &test));
    Ok(LoadedDataset {
        spec,
        train,
        test,
        sha256,
    })
}

/// Runs every (strategy, seed) pair of `cfg` in parallel, each seed on its
/// own generated dataset, then writes `runs.csv` and `summary.csv` under
/// `out`. Run directories go to `out/runs`. Individual failures are recorded
/// rather than aborting the sweep.
pub fn compare_config(
    cfg: &LabConfig,
    strategies: &[Strategy],
    seeds: &[u64],
    out: &Path,
) -> Result<CompareOutcome> {
    if strategies.is_empty() {
        return Err(LabError::Usage("compare needs at least one strategy".into()));
    }
    if seeds.is_empty() {
        return Err(LabError::Usage("compare needs at least one seed".into()));
    }
    let runs_dir = out.join("runs");
    let datasets: Vec<(u64, std::result::Result<LoadedDataset, String>)> = seeds
        .par_iter()
        .map(|&s| (s, dataset_for(&cfg.with_seed(s)).map_err(|e| e.to_string())))
        .collect();
    let pairs: Vec<(Strategy, usize)> = strategies
        .iter()
        .flat_map(|&st| (0..seeds.len()).map(move |i| (st, i)))
        .collect();
    let jobs: Vec<Job> = pairs
        .par_iter()
        .map(|&(strategy, i)| {
            let (seed, data) = &datasets[i];
            let mut job_cfg = cfg.with_seed(*seed);
            job_cfg.train.strategy = strategy;
            let result = data.clone().and_then(|d| {
                execute(&job_cfg, &d, &runs_dir, Vec::new()).map_err(|e| e.to_string())
            });
            Job {
                strategy,
                seed: *seed,
                result,
            }
        })
        .collect();

    let summary: Vec<SummaryRow> = strategies
        .iter()
        .map(|&st| {
            let mine: Vec<&Job> = jobs.iter().filter(|j| j.strategy == st).collect();
            summarize(st, &mine)
        })
        .collect();
    write_atomic(&out.join("runs.csv"), &jobs_csv(&jobs))?;
    let summary_path = out.join("summary.csv");
    write_atomic(&summary_path, &summary_csv(&summary))?;
    Ok(CompareOutcome {
        jobs,
        summary,
        summary_path,
    })
}

pub fn compare(config: &Path, strategies: &[Strategy], seeds: &[u64], out: &Path) -> Result<CompareOutcome> {
    let cfg = LabConfig::from_path(config)?;
    compare_config(&cfg, strategies, seeds, out)
}

/// Parses `a,b,c`; an empty string is an empty list.
pub fn parse_list<T>(text: &str, what: &str) -> Result<Vec<T>>
where
    T: std::str::FromStr,
    T::Err: std::fmt::Display,
{
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse()
                .map_err(|e| LabError::Usage(format!("invalid {what} `{s}`: {e}")))
        })
        .collect()
}
