//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.
//!
//! The heavy runs go through `compare_config`, the same path as
//! `pmr-lab compare`, with seeds 1..=5 and default settings except where a
//! criterion needs otherwise.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use pmr_core::data::{generate_dataset, DatasetSpec};
use pmr_core::diagnostics::probe_accuracy;
use pmr_core::gradcheck::{run_suite, GradcheckOptions};
use pmr_core::model::{Activation, FusionHead, FusionVariant, ModelSpec, MultimodalModel};
use pmr_core::pmr::{compute_prototypes, modulation_coefficients, proto_posterior, Distance};
use pmr_core::train::{MetricsRow, Scope, Strategy};
use pmr_core::{SeededRng, Tensor2D};
use pmr_lab::commands::{compare_config, CompareOutcome};
use pmr_lab::dataset_io::LoadedDataset;
use pmr_lab::run::{execute, RunOutcome, METRICS_FILE};
use pmr_lab::{sha256_hex, LabConfig};

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn workdir() -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn config(text: &str) -> LabConfig {
    LabConfig::parse(text).expect("acceptance config parses")
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Final epoch row of every seed's run, in seed order.
fn finals(out: &CompareOutcome, strategy: Strategy) -> Vec<MetricsRow> {
    SEEDS
        .iter()
        .map(|&seed| {
            out.jobs
                .iter()
                .find(|j| j.strategy == strategy && j.seed == seed)
                .and_then(|j| j.result.as_ref().ok())
                .and_then(|o| o.log.final_epoch().cloned())
                .unwrap_or_else(|| panic!("{strategy} seed {seed} did not finish"))
        })
        .collect()
}

fn column(rows: &[MetricsRow], f: impl Fn(&MetricsRow) -> Option<f64>) -> Vec<f64> {
    rows.iter().map(|r| f(r).expect("value logged")).collect()
}

fn pts(v: f64) -> String {
    format!("{:.2}", 100.0 * v)
}

// ---------------------------------------------------------------- criterion 1

fn gradient_suite() -> Verdict {
    let t = Instant::now();
    let report = run_suite(&GradcheckOptions::default()).expect("suite runs");
    let secs = t.elapsed().as_secs_f64();
    let worst = report.results.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    verdict(
        report.all_passed() && secs < 30.0,
        format!(
            "{} checks, worst relative error {worst:.2e}, {secs:.1}s; failures {:?}",
            report.results.len(),
            report.failures()
        ),
    )
}

// ---------------------------------------------------------------- criterion 2

fn random_tensor(rows: usize, cols: usize, rng: &mut SeededRng) -> Tensor2D {
    let data = (0..rows * cols).map(|_| rng.normal()).collect();
    Tensor2D::new(rows, cols, data).unwrap()
}

fn naive_softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

fn naive_affine(x: &[f64], w: &Tensor2D, b: &[f64]) -> Vec<f64> {
    (0..w.rows())
        .map(|o| b[o] + (0..w.cols()).map(|i| w.get(o, i) * x[i]).sum::<f64>())
        .collect()
}

fn naive_encode(x: &[f64], layers: &[pmr_core::model::Dense]) -> Vec<f64> {
    layers.iter().fold(x.to_vec(), |h, l| {
        let a = naive_affine(&h, &l.weight, &l.bias);
        match l.activation {
            Activation::Relu => a.into_iter().map(|v| v.max(0.0)).collect(),
            Activation::Identity => a,
        }
    })
}

fn oracles() -> Verdict {
    let mut rng = SeededRng::new(2024);
    let mut worst: f64 = 0.0;
    let mut probe_mismatch = 0;
    for _ in 0..200 {
        let m = 2 + rng.below(5);
        let d = 1 + rng.below(8);
        let n = m + rng.below(51 - m);
        let mut labels: Vec<usize> = (0..n).map(|i| if i < m { i } else { rng.below(m) }).collect();
        rng.shuffle(&mut labels);
        let z = random_tensor(n, d, &mut rng);

        // class means by direct accumulation
        let protos = compute_prototypes(&z, &labels, m).unwrap();
        for k in 0..m {
            let members: Vec<usize> = (0..n).filter(|&i| labels[i] == k).collect();
            for j in 0..d {
                let mu = members.iter().map(|&i| z.get(i, j)).sum::<f64>() / members.len() as f64;
                worst = worst.max((protos.get(k, j) - mu).abs());
            }
        }

        let c = random_tensor(m, d, &mut rng);
        for dist in [Distance::SquaredEuclidean, Distance::Euclidean] {
            let post = proto_posterior(&z, &c, dist).unwrap();
            for i in 0..n {
                let neg: Vec<f64> = (0..m)
                    .map(|k| {
                        let sq: f64 = (0..d).map(|j| (z.get(i, j) - c.get(k, j)).powi(2)).sum();
                        -if dist == Distance::Euclidean { sq.sqrt() } else { sq }
                    })
                    .collect();
                for (k, p) in naive_softmax(&neg).into_iter().enumerate() {
                    worst = worst.max((post.get(i, k) - p).abs());
                }
            }
        }

        let brute = (0..n)
            .filter(|&i| {
                let mut best = (f64::INFINITY, 0);
                for k in 0..m {
                    let sq: f64 = (0..d).map(|j| (z.get(i, j) - c.get(k, j)).powi(2)).sum();
                    if sq < best.0 {
                        best = (sq, k);
                    }
                }
                best.1 == labels[i]
            })
            .count() as f64
            / n as f64;
        let acc = probe_accuracy(&z, &labels, &c).unwrap();
        if acc != brute {
            probe_mismatch += 1;
        }

        // per-modality scores of a random sum-head model
        let spec = ModelSpec {
            dim0: 1 + rng.below(8),
            dim1: 1 + rng.below(8),
            hidden_width: 1 + rng.below(8),
            hidden_layers: rng.below(3),
            rep_dim: 1 + rng.below(8),
            num_classes: m,
            fusion: FusionVariant::Sum,
        };
        let model = MultimodalModel::init(&spec, &mut rng).unwrap();
        let x0 = random_tensor(n, spec.dim0, &mut rng);
        let x1 = random_tensor(n, spec.dim1, &mut rng);
        let scores = model.unimodal_scores(&x0, &x1, &labels).unwrap();
        let FusionHead::Sum { w0, b0, w1, b1 } = &model.head else {
            unreachable!()
        };
        for i in 0..n {
            let l0 = naive_affine(&naive_encode(x0.row(i), &model.encoder0.layers), w0, b0);
            let l1 = naive_affine(&naive_encode(x1.row(i), &model.encoder1.layers), w1, b1);
            let fused: Vec<f64> = l0.iter().zip(&l1).map(|(a, b)| a + b).collect();
            let y = labels[i];
            worst = worst
                .max((scores.s0[i] - naive_softmax(&l0)[y]).abs())
                .max((scores.s1[i] - naive_softmax(&l1)[y]).abs())
                .max((scores.sfu[i] - naive_softmax(&fused)[y]).abs());
        }
    }
    verdict(
        worst <= 1e-10 && probe_mismatch == 0,
        format!("200 instances, max deviation {worst:.2e}, probe mismatches {probe_mismatch}"),
    )
}

// ---------------------------------------------------------------- criterion 3

fn dominant_data(seed: u64) -> LoadedDataset {
    let spec = DatasetSpec {
        seed,
        ..DatasetSpec::default()
    };
    let (train, test) = generate_dataset(&spec).unwrap();
    let sha256 = sha256_hex(&pmr_lab::dataset_io::encode(&spec, &train, &test));
    LoadedDataset {
        spec,
        train,
        test,
        sha256,
    }
}

fn metrics_bytes(run: &RunOutcome) -> Vec<u8> {
    std::fs::read(run.dir.join(METRICS_FILE)).unwrap()
}

fn reductions(dir: &Path) -> Verdict {
    let data = dominant_data(1);
    let mut failed = Vec::new();
    for fusion in FusionVariant::ALL {
        let base = format!("seed = 1\ntrain.epochs = 5\nmodel.fusion = \"{fusion}\"\n");
        let run = |extra: &str| {
            execute(&config(&format!("{base}{extra}")), &data, dir, Vec::new()).expect("run completes")
        };
        let joint = run("train.strategy = \"joint_ce\"\ntrain.reg_epochs = 5\n");
        let pmr0 = run("train.strategy = \"pmr\"\ntrain.reg_epochs = 5\ntrain.alpha = 0.0\ntrain.mu = 0.0\n");
        if metrics_bytes(&joint) != metrics_bytes(&pmr0) {
            failed.push(format!("{fusion}: pmr(0,0) != joint_ce"));
        }
        let no_reg = run("train.strategy = \"pmr\"\ntrain.reg_epochs = 0\n");
        let no_per = run("train.strategy = \"pmr_no_per\"\ntrain.reg_epochs = 5\n");
        if metrics_bytes(&no_reg) != metrics_bytes(&no_per) {
            failed.push(format!("{fusion}: pmr(E_r=0) != pmr_no_per"));
        }
        if metrics_bytes(&no_per) == metrics_bytes(&joint) {
            failed.push(format!("{fusion}: pmr_no_per is indistinguishable from joint_ce"));
        }
    }
    verdict(
        failed.is_empty(),
        if failed.is_empty() {
            "5-epoch runs, all four heads, metrics CSVs byte-identical".into()
        } else {
            failed.join("; ")
        },
    )
}

// ---------------------------------------------------------------- criterion 4

fn coefficients(all: &[&CompareOutcome]) -> Verdict {
    let table = [(1.0, (0.0, 0.0)), (2.0, (0.0, 1.0)), (0.5, (1.0, 0.0)), (0.8, (0.25, 0.0)), (1.3, (0.0, 0.3))];
    let mut table_ok = true;
    for (rho, (b, g)) in table {
        let (beta, gamma) = modulation_coefficients(rho).unwrap();
        // the table is decimal; exactness means the nearest double
        table_ok &= (beta - b).abs() <= 1e-15 && (gamma - g).abs() <= 1e-15;
    }
    let mut steps = 0usize;
    let mut violations = 0usize;
    for out in all {
        for job in &out.jobs {
            let Ok(run) = &job.result else { continue };
            for r in run.log.metrics.iter().filter(|r| r.scope == Scope::Step) {
                if let (Some(b), Some(g)) = (r.beta, r.gamma) {
                    steps += 1;
                    if b * g != 0.0 {
                        violations += 1;
                    }
                }
            }
        }
    }
    verdict(
        table_ok && violations == 0 && steps > 0,
        format!("table exact: {table_ok}; beta*gamma = 0 on {steps} logged steps, {violations} violations"),
    )
}

// ---------------------------------------------------------------- criterion 5

fn behaviour(dominant: &CompareOutcome, seconds: f64) -> Verdict {
    let joint = finals(dominant, Strategy::JointCe);
    let pmr = finals(dominant, Strategy::Pmr);
    let boost = finals(dominant, Strategy::AccBoost);
    let rho_j = column(&joint, |r| r.rho);
    let rho_p = column(&pmr, |r| r.rho);

    let a = rho_j.iter().filter(|&&r| r > 1.3).count();
    let b = rho_j
        .iter()
        .zip(&rho_p)
        .filter(|(j, p)| p.ln().abs() < j.ln().abs())
        .count();
    let slow = |rows: &[MetricsRow]| mean(&column(rows, |r| r.test_probe_acc1));
    let acc = |rows: &[MetricsRow]| mean(&column(rows, |r| r.test_acc));
    let c = slow(&pmr) - slow(&joint);
    let d = acc(&pmr) - acc(&joint);
    let e = slow(&pmr) - slow(&boost);
    let parts = [a >= 4, b >= 4, c >= 0.03, d >= -0.005, e > 0.0];
    let budget = seconds < 15.0 * 60.0;
    let detail = format!(
        "a: joint rho {:?} ({a}/5 > 1.3); b: pmr |log rho| smaller {b}/5; \
         c: slow probe pmr {} vs joint {} (+{} pts); d: test acc pmr {} vs joint {}; \
         e: slow probe pmr {} vs acc_boost {}; {seconds:.0}s for the 15 runs",
        rho_j.iter().map(|r| (r * 100.0).round() / 100.0).collect::<Vec<_>>(),
        pts(slow(&pmr)),
        pts(slow(&joint)),
        pts(c),
        pts(acc(&pmr)),
        pts(acc(&joint)),
        pts(slow(&pmr)),
        pts(slow(&boost)),
    );
    verdict(parts.iter().all(|&p| p) && budget, detail)
}

// ---------------------------------------------------------------- criterion 6

fn spurious(out: &CompareOutcome) -> Verdict {
    let uni = column(&finals(out, Strategy::Unimodal0), |r| r.test_acc);
    let chance = 1.0 / 6.0;
    let uni_ok = uni.iter().all(|a| (a - chance).abs() <= 0.05);
    let joint = mean(&column(&finals(out, Strategy::JointCe), |r| r.test_acc));
    let pmr = mean(&column(&finals(out, Strategy::Pmr), |r| r.test_acc));
    verdict(
        uni_ok && pmr - joint >= 0.02,
        format!(
            "unimodal0 test acc [{}] (chance {}); test acc pmr {} vs joint {} (+{} pts)",
            uni.iter().map(|&a| pts(a)).collect::<Vec<_>>().join(", "),
            pts(chance),
            pts(pmr),
            pts(joint),
            pts(pmr - joint)
        ),
    )
}

// ---------------------------------------------------------------- criterion 7

/// Means of consecutive equal blocks of the first half of the epoch curve.
fn first_half_blocks(epoch_angles: &[f64], blocks: usize) -> Vec<f64> {
    let half = &epoch_angles[..epoch_angles.len() / 2];
    let size = half.len() / blocks;
    half.chunks_exact(size).take(blocks).map(mean).collect()
}

fn angles(dominant: &CompareOutcome) -> Verdict {
    let mut acute_ok = 0;
    let mut rising = 0;
    let mut details = Vec::new();
    for run in dominant.runs(Strategy::JointCe) {
        let steps: Vec<&MetricsRow> = run
            .log
            .metrics
            .iter()
            .filter(|r| r.scope == Scope::Step && r.angle0.is_some())
            .collect();
        let acute = steps
            .iter()
            .filter(|r| r.angle0.unwrap() < 90.0 && r.angle1.unwrap() < 90.0)
            .count() as f64
            / steps.len() as f64;
        let curve: Vec<f64> = run.log.epoch_rows().map(|r| r.angle1.unwrap_or(f64::NAN)).collect();
        let blocks = first_half_blocks(&curve, 5);
        let mono = blocks.windows(2).all(|w| w[1] >= w[0]);
        acute_ok += usize::from(acute >= 0.95);
        rising += usize::from(mono);
        details.push(format!(
            "seed {}: acute {:.3}, slow blocks {:?}",
            run.manifest.seed,
            acute,
            blocks.iter().map(|b| (b * 10.0).round() / 10.0).collect::<Vec<_>>()
        ));
    }
    verdict(
        acute_ok == SEEDS.len() && rising >= 4,
        format!(
            "acute in >= 95% of steps {acute_ok}/5, slow-modality first-half block means non-decreasing {rising}/5; {}",
            details.join("; ")
        ),
    )
}

// ---------------------------------------------------------------- criterion 8

fn subset_scale(dominant: &CompareOutcome, small: &CompareOutcome, full: &CompareOutcome) -> Verdict {
    let acc = |o: &CompareOutcome| mean(&column(&finals(o, Strategy::Pmr), |r| r.test_acc));
    let slow = |o: &CompareOutcome| mean(&column(&finals(o, Strategy::Pmr), |r| r.test_probe_acc1));
    let complete = [small, dominant, full].iter().all(|o| o.failures().is_empty());
    let (a1, a10, a100) = (acc(small), acc(dominant), acc(full));
    verdict(
        complete && a100 >= a10 - 0.01,
        format!(
            "test acc 1% {} / 10% {} / 100% {}; slow probe {} / {} / {}",
            pts(a1),
            pts(a10),
            pts(a100),
            pts(slow(small)),
            pts(slow(dominant)),
            pts(slow(full))
        ),
    )
}

// ---------------------------------------------------------------- criterion 9

fn determinism(dir: &Path, dominant: &CompareOutcome) -> Verdict {
    let data = dominant_data(1);
    let mut mismatches = Vec::new();
    // one full-length run against its copy from the sweep
    let original = dominant
        .runs(Strategy::Pmr)
        .find(|r| r.manifest.seed == 1)
        .expect("pmr seed 1");
    let cfg = config(&original.manifest.config);
    let again = execute(&cfg, &data, &dir.join("repeat"), Vec::new()).unwrap();
    if metrics_bytes(&again) != metrics_bytes(original) {
        mismatches.push("pmr (100 epochs)".to_string());
    }
    // every strategy, short runs, twice each
    for strategy in Strategy::ALL {
        let cfg = config(&format!("seed = 1\ntrain.epochs = 5\ntrain.reg_epochs = 5\ntrain.strategy = \"{strategy}\"\n"));
        let a = execute(&cfg, &data, &dir.join("det-a"), Vec::new()).unwrap();
        let b = execute(&cfg, &data, &dir.join("det-b"), Vec::new()).unwrap();
        if metrics_bytes(&a) != metrics_bytes(&b) {
            mismatches.push(strategy.to_string());
        }
    }
    verdict(
        mismatches.is_empty(),
        if mismatches.is_empty() {
            "repeated runs byte-identical: pmr 100 epochs plus all 6 strategies at 5 epochs".into()
        } else {
            format!("differing metrics CSVs: {mismatches:?}")
        },
    )
}

// ------------------------------------------------------- supporting properties

fn supporting(dominant: &CompareOutcome) -> Vec<(&'static str, Verdict)> {
    let joint = finals(dominant, Strategy::JointCe);
    let gap = mean(&column(&joint, |r| r.test_probe_acc0)) - mean(&column(&joint, |r| r.test_probe_acc1));
    let u0 = mean(&column(&finals(dominant, Strategy::Unimodal0), |r| r.test_acc));
    let u1 = mean(&column(&finals(dominant, Strategy::Unimodal1), |r| r.test_acc));
    vec![
        (
            "joint_ce probe gap",
            verdict(gap >= 0.15, format!("modality 0 minus modality 1 probe accuracy {} pts", pts(gap))),
        ),
        (
            "unimodal ordering",
            verdict(u0 > u1, format!("unimodal0 {} vs unimodal1 {}", pts(u0), pts(u1))),
        ),
    ]
}

fn main() -> ExitCode {
    let dir = workdir();
    let sweep = |name: &str, text: &str, strategies: &[Strategy]| {
        let t = Instant::now();
        let out = compare_config(&config(text), strategies, &SEEDS, &dir.join(name)).expect("sweep runs");
        assert!(out.failures().is_empty(), "{name}: {:?}", out.failures());
        (out, t.elapsed().as_secs_f64())
    };

    let c1 = gradient_suite();
    let c2 = oracles();
    let c3 = reductions(&dir.join("reductions"));

    let (dominant, _) = sweep(
        "dominant",
        "seed = 0\n",
        &[Strategy::JointCe, Strategy::Pmr, Strategy::AccBoost],
    );
    let seconds: f64 = dominant
        .jobs
        .iter()
        .filter_map(|j| j.result.as_ref().ok())
        .map(|r| r.manifest.wall_clock_seconds)
        .sum();
    let (unimodal, _) = sweep("unimodal", "seed = 0\n", &[Strategy::Unimodal0, Strategy::Unimodal1]);
    let (spur, _) = sweep(
        "spurious",
        "seed = 0\ndata.scenario = \"spurious\"\n",
        &[Strategy::JointCe, Strategy::Pmr, Strategy::Unimodal0],
    );
    let (small, _) = sweep("subset-1", "seed = 0\ntrain.subset_fraction = 0.01\n", &[Strategy::Pmr]);
    let (full, _) = sweep("subset-100", "seed = 0\ntrain.subset_fraction = 1.0\n", &[Strategy::Pmr]);

    let c4 = coefficients(&[&dominant, &spur, &small, &full]);
    let c5 = behaviour(&dominant, seconds);
    let c6 = spurious(&spur);
    let c7 = angles(&dominant);
    let c8 = subset_scale(&dominant, &small, &full);
    let c9 = determinism(&dir.join("determinism"), &dominant);

    let mut merged = dominant.clone();
    merged.jobs.extend(unimodal.jobs.iter().cloned());

    let criteria = [c1, c2, c3, c4, c5, c6, c7, c8, c9];
    let mut all = true;
    println!();
    for (i, v) in criteria.iter().enumerate() {
        all &= v.pass;
        println!("criterion {}: {} ({})", i + 1, if v.pass { "PASS" } else { "FAIL" }, v.detail);
    }
    for (name, v) in supporting(&merged) {
        all &= v.pass;
        println!("property {name}: {} ({})", if v.pass { "PASS" } else { "FAIL" }, v.detail);
    }
    let _ = std::fs::remove_dir_all(&dir);
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
