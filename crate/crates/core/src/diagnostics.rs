//! Analysis instruments: gradient-direction angles between uni-modal and
//! fused objectives, nearest-prototype probes, linear probes on raw
//! features, and per-epoch curves over a metrics table.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::model::FusionVariant;
use crate::model::{ForwardCache, ForwardOutput, MultimodalModel, Parameters};
use crate::model::{Activation, Dense};
use crate::numerics::{check_labels, cross_entropy_batch, pairwise_sq_dist};
use crate::rng::SeededRng;
use crate::tensor::{dot, Tensor2D};
use crate::train::{MetricsRow, Scope};

/// Norm below which a gradient has no direction.
pub const MIN_GRAD_NORM: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AngleRecord {
    pub epoch: usize,
    pub step: usize,
    pub angle_modality0: f64,
    pub angle_modality1: f64,
}

/// Angle in degrees between two flat vectors.
pub fn gradient_angle(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("gradient_angle", a.len(), b.len()));
    }
    let na = libm::sqrt(dot(a, a));
    let nb = libm::sqrt(dot(b, b));
    if !(na >= MIN_GRAD_NORM && nb >= MIN_GRAD_NORM) {
        return Err(Error::UndefinedAngle);
    }
    // 2·atan2(|â − b̂|, |â + b̂|) stays accurate near 0° and 180°, where
    // acos of the cosine loses half the digits.
    let (mut diff, mut sum) = (0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (u, v) = (x / na, y / nb);
        diff += (u - v) * (u - v);
        sum += (u + v) * (u + v);
    }
    Ok((2.0 * libm::atan2(libm::sqrt(diff), libm::sqrt(sum))).to_degrees())
}

/// Encoder gradients of `CE(fused)` and of `CE(component m)` for both
/// modalities, from an existing sum-head forward pass.
pub fn modality_gradients(
    model: &MultimodalModel,
    out: &ForwardOutput,
    cache: &ForwardCache,
    labels: &[usize],
) -> Result<[(Vec<f64>, Vec<f64>); 2]> {
    let Some((l0, l1)) = &out.components else {
        return Err(Error::UnsupportedVariant {
            op: "gradient_angle",
            variant: model.head.variant().as_str(),
        });
    };
    let (_, d_fused) = cross_entropy_batch(&out.logits, labels)?;
    let (_, d0) = cross_entropy_batch(l0, labels)?;
    let (_, d1) = cross_entropy_batch(l1, labels)?;
    let multi = model.backward(cache, &d_fused)?.grads;
    // In a sum head the component-m logits reach only encoder m, so feeding
    // their gradient as if it were the fused one gives ∂CE(l_m)/∂θ^m there.
    let uni0 = model.backward(cache, &d0)?.grads.encoder0;
    let uni1 = model.backward(cache, &d1)?.grads.encoder1;
    Ok([
        (uni0.to_flat(), multi.encoder0.to_flat()),
        (uni1.to_flat(), multi.encoder1.to_flat()),
    ])
}

/// Uni-modal versus fused gradient angle for each encoder, both in degrees.
pub fn modality_gradient_angles(
    model: &MultimodalModel,
    out: &ForwardOutput,
    cache: &ForwardCache,
    labels: &[usize],
) -> Result<(f64, f64)> {
    let [(u0, m0), (u1, m1)] = modality_gradients(model, out, cache, labels)?;
    Ok((gradient_angle(&u0, &m0)?, gradient_angle(&u1, &m1)?))
}

/// Forward pass plus [`modality_gradient_angles`] on one batch.
pub fn gradient_angle_record(
    model: &MultimodalModel,
    x0: &Tensor2D,
    x1: &Tensor2D,
    labels: &[usize],
    epoch: usize,
    step: usize,
) -> Result<AngleRecord> {
    if model.head.variant() != FusionVariant::Sum {
        return Err(Error::UnsupportedVariant {
            op: "gradient_angle",
            variant: model.head.variant().as_str(),
        });
    }
    let (out, cache) = model.forward(x0, x1)?;
    let (a0, a1) = modality_gradient_angles(model, &out, &cache, labels)?;
    Ok(AngleRecord {
        epoch,
        step,
        angle_modality0: a0,
        angle_modality1: a1,
    })
}

/// Index of the smallest entry; ties go to the lowest index.
pub(crate) fn argmin(row: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate().skip(1) {
        if v < row[best] {
            best = k;
        }
    }
    best
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = k;
        }
    }
    best
}

/// Accuracy of the nearest-prototype classifier. The prototype posterior is
/// monotone in distance for both distance variants, so its argmax is the
/// squared-distance argmin.
pub fn probe_accuracy(reps: &Tensor2D, labels: &[usize], protos: &Tensor2D) -> Result<f64> {
    check_labels(labels, reps.rows(), protos.rows())?;
    if labels.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let d = pairwise_sq_dist(reps, protos)?;
    let hits = d
        .row_iter()
        .zip(labels)
        .filter(|(row, &y)| argmin(row) == y)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Argmax accuracy of a logits matrix.
pub fn logits_accuracy(logits: &Tensor2D, labels: &[usize]) -> Result<f64> {
    check_labels(labels, logits.rows(), logits.cols())?;
    if labels.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let hits = logits
        .row_iter()
        .zip(labels)
        .filter(|(row, &y)| argmax(row) == y)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Multinomial logistic regression on raw features by full-batch gradient
/// descent, evaluated on a held-out set. Features are standardized with the
/// training statistics.
pub fn linear_probe_accuracy(
    x_train: &Tensor2D,
    y_train: &[usize],
    x_test: &Tensor2D,
    y_test: &[usize],
    num_classes: usize,
    iterations: usize,
    lr: f64,
) -> Result<f64> {
    check_labels(y_train, x_train.rows(), num_classes)?;
    check_labels(y_test, x_test.rows(), num_classes)?;
    if x_train.cols() != x_test.cols() || x_train.rows() == 0 {
        return Err(Error::shape("linear_probe_accuracy", x_train.cols(), x_test.cols()));
    }
    let n = x_train.rows() as f64;
    let mean: Vec<f64> = x_train.column_sums().iter().map(|s| s / n).collect();
    let var: Vec<f64> = (0..x_train.cols())
        .map(|j| x_train.row_iter().map(|r| (r[j] - mean[j]) * (r[j] - mean[j])).sum::<f64>() / n)
        .collect();
    let standardize = |x: &Tensor2D| {
        let mut x = x.clone();
        for i in 0..x.rows() {
            for (j, v) in x.row_mut(i).iter_mut().enumerate() {
                *v = (*v - mean[j]) / libm::sqrt(var[j].max(1e-12));
            }
        }
        x
    };
    let xtr = standardize(x_train);
    let xte = standardize(x_test);
    let mut layer = Dense::init(xtr.cols(), num_classes, Activation::Identity, &mut SeededRng::new(0));
    layer.weight.scale(0.0);
    for _ in 0..iterations {
        let logits = layer.affine(&xtr)?;
        let (_, dl) = cross_entropy_batch(&logits, y_train)?;
        layer.weight.add_scaled(&dl.t_matmul(&xtr)?, -lr)?;
        for (b, g) in layer.bias.iter_mut().zip(dl.column_sums()) {
            *b -= lr * g;
        }
    }
    logits_accuracy(&layer.affine(&xte)?, y_test)
}

/// Per-epoch batch means of the per-modality scores.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScorePoint {
    pub epoch: usize,
    pub s0: f64,
    pub s1: f64,
    pub sfu: f64,
}

/// Per-epoch means of the logged ratio and of its magnitude on log scale.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RhoPoint {
    pub epoch: usize,
    pub rho: f64,
    pub abs_log_rho: f64,
}

/// Per-epoch means over the steps where angles were recorded.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AnglePoint {
    pub epoch: usize,
    pub angle0: f64,
    pub angle1: f64,
    pub count: usize,
}

fn step_rows_by_epoch(rows: &[MetricsRow]) -> Vec<(usize, Vec<&MetricsRow>)> {
    let mut out: Vec<(usize, Vec<&MetricsRow>)> = Vec::new();
    for r in rows.iter().filter(|r| r.scope == Scope::Step) {
        match out.last_mut() {
            Some((e, v)) if *e == r.epoch => v.push(r),
            _ => out.push((r.epoch, vec![r])),
        }
    }
    out
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    sum / n as f64
}

/// Fig. 2a-style table from step rows.
pub fn unimodal_score_curves(rows: &[MetricsRow]) -> Result<Vec<ScorePoint>> {
    step_rows_by_epoch(rows)
        .into_iter()
        .map(|(epoch, steps)| {
            let mut vals = Vec::with_capacity(steps.len());
            for r in &steps {
                match (r.s0, r.s1, r.sfu) {
                    (Some(a), Some(b), Some(c)) => vals.push((a, b, c)),
                    _ => {
                        return Err(Error::invalid(format!(
                            "step {} has no per-modality scores",
                            r.step
                        )))
                    }
                }
            }
            Ok(ScorePoint {
                epoch,
                s0: mean(vals.iter().map(|v| v.0)),
                s1: mean(vals.iter().map(|v| v.1)),
                sfu: mean(vals.iter().map(|v| v.2)),
            })
        })
        .collect()
}

pub fn rho_curve(rows: &[MetricsRow]) -> Result<Vec<RhoPoint>> {
    step_rows_by_epoch(rows)
        .into_iter()
        .map(|(epoch, steps)| {
            let rhos: Vec<f64> = steps
                .iter()
                .map(|r| r.rho.ok_or_else(|| Error::invalid(format!("step {} has no rho", r.step))))
                .collect::<Result<_>>()?;
            Ok(RhoPoint {
                epoch,
                rho: mean(rhos.iter().copied()),
                abs_log_rho: mean(rhos.iter().map(|r| libm::log(*r).abs())),
            })
        })
        .collect()
}

/// Epochs without any recorded angle are omitted.
pub fn angle_curve(rows: &[MetricsRow]) -> Vec<AnglePoint> {
    step_rows_by_epoch(rows)
        .into_iter()
        .filter_map(|(epoch, steps)| {
            let pairs: Vec<(f64, f64)> = steps
                .iter()
                .filter_map(|r| Some((r.angle0?, r.angle1?)))
                .collect();
            (!pairs.is_empty()).then(|| AnglePoint {
                epoch,
                angle0: mean(pairs.iter().map(|p| p.0)),
                angle1: mean(pairs.iter().map(|p| p.1)),
                count: pairs.len(),
            })
        })
        .collect()
}

/// Every recorded angle of a run.
pub fn angle_records(rows: &[MetricsRow]) -> Vec<AngleRecord> {
    rows.iter()
        .filter(|r| r.scope == Scope::Step)
        .filter_map(|r| {
            Some(AngleRecord {
                epoch: r.epoch,
                step: r.step,
                angle_modality0: r.angle0?,
                angle_modality1: r.angle1?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelSpec, Parameters};
    use crate::numerics::{cross_entropy, finite_diff_grad};
    use crate::pmr::{compute_prototypes, proto_posterior, Distance};
    use proptest::prelude::*;

    fn random(rows: usize, cols: usize, rng: &mut SeededRng) -> Tensor2D {
        let mut x = Tensor2D::zeros(rows, cols);
        x.as_mut_slice().iter_mut().for_each(|v| *v = rng.normal());
        x
    }

    #[test]
    fn angle_basics() {
        assert!(gradient_angle(&[1.0, 0.0], &[2.0, 0.0]).unwrap().abs() < 1e-12);
        assert!((gradient_angle(&[1.0, 0.0], &[0.0, 3.0]).unwrap() - 90.0).abs() < 1e-12);
        assert!((gradient_angle(&[1.0, 1.0], &[-1.0, -1.0]).unwrap() - 180.0).abs() < 1e-12);
        assert_eq!(gradient_angle(&[0.0, 0.0], &[1.0, 0.0]), Err(Error::UndefinedAngle));
        assert_eq!(gradient_angle(&[1e-13, 0.0], &[1.0, 0.0]), Err(Error::UndefinedAngle));
    }

    fn sum_model(seed: u64) -> MultimodalModel {
        let spec = ModelSpec {
            dim0: 4,
            dim1: 3,
            hidden_width: 6,
            hidden_layers: 1,
            rep_dim: 5,
            num_classes: 3,
            fusion: FusionVariant::Sum,
        };
        MultimodalModel::init(&spec, &mut SeededRng::new(seed)).unwrap()
    }

    #[test]
    fn silent_modality_one_gives_zero_angle_for_modality_zero() {
        let mut model = sum_model(1);
        if let crate::model::FusionHead::Sum { w1, b1, .. } = &mut model.head {
            w1.scale(0.0);
            b1.iter_mut().for_each(|b| *b = 0.0);
        }
        let mut rng = SeededRng::new(2);
        let (x0, x1) = (random(6, 4, &mut rng), random(6, 3, &mut rng));
        let labels = [0, 1, 2, 0, 1, 2];
        let (out, cache) = model.forward(&x0, &x1).unwrap();
        let [(u0, m0), _] = modality_gradients(&model, &out, &cache, &labels).unwrap();
        assert_eq!(u0, m0);
        assert!(gradient_angle(&u0, &m0).unwrap() < 1e-6);
    }

    #[test]
    fn angles_match_finite_difference_gradients() {
        for seed in 0..3 {
            let model = sum_model(10 + seed);
            let mut rng = SeededRng::new(20 + seed);
            let (x0, x1) = (random(7, 4, &mut rng), random(7, 3, &mut rng));
            let labels: Vec<usize> = (0..7).map(|_| rng.below(3)).collect();
            let (out, cache) = model.forward(&x0, &x1).unwrap();
            let (a0, a1) = modality_gradient_angles(&model, &out, &cache, &labels).unwrap();

            // objective per (modality, which logits), differentiated numerically
            let fd = |m: usize, fused: bool| -> Vec<f64> {
                let enc = if m == 0 { &model.encoder0 } else { &model.encoder1 };
                finite_diff_grad(
                    |p| {
                        let mut probe = model.clone();
                        let target = if m == 0 { &mut probe.encoder0 } else { &mut probe.encoder1 };
                        target.set_flat(p).unwrap();
                        let (o, _) = probe.forward(&x0, &x1).unwrap();
                        let (l0, l1) = o.components.unwrap();
                        let logits = if fused { o.logits } else if m == 0 { l0 } else { l1 };
                        logits
                            .row_iter()
                            .zip(&labels)
                            .map(|(r, &y)| cross_entropy(r, y).unwrap())
                            .sum::<f64>()
                            / 7.0
                    },
                    &enc.to_flat(),
                    1e-5,
                )
                .unwrap()
            };
            let b0 = gradient_angle(&fd(0, false), &fd(0, true)).unwrap();
            let b1 = gradient_angle(&fd(1, false), &fd(1, true)).unwrap();
            assert!((a0 - b0).abs() < 0.5, "{a0} vs {b0}");
            assert!((a1 - b1).abs() < 0.5, "{a1} vs {b1}");
        }
    }

    #[test]
    fn angle_record_needs_sum_head() {
        let spec = ModelSpec {
            fusion: FusionVariant::Concat,
            ..ModelSpec::default()
        };
        let model = MultimodalModel::init(&spec, &mut SeededRng::new(0)).unwrap();
        let x = Tensor2D::zeros(2, 20);
        assert!(matches!(
            gradient_angle_record(&model, &x, &x, &[0, 1], 0, 0),
            Err(Error::UnsupportedVariant { .. })
        ));
    }

    #[test]
    fn probe_accuracy_cases() {
        let protos = Tensor2D::from_rows(&[[0.0, 0.0], [3.0, 0.0], [0.0, 3.0]]).unwrap();
        assert_eq!(probe_accuracy(&protos, &[0, 1, 2], &protos).unwrap(), 1.0);
        let same = Tensor2D::filled(3, 2, 1.0);
        let reps = Tensor2D::from_rows(&[[5.0, 5.0], [0.0, 1.0], [2.0, 2.0], [9.0, 0.0]]).unwrap();
        assert_eq!(probe_accuracy(&reps, &[0, 1, 0, 2], &same).unwrap(), 0.5);
        assert!(probe_accuracy(&reps, &[0, 1, 0, 3], &same).is_err());
    }

    #[test]
    fn probe_matches_brute_force_and_posterior_argmax() {
        let mut rng = SeededRng::new(40);
        for _ in 0..20 {
            let n = 1 + rng.below(50);
            let m = 2 + rng.below(5);
            let d = 1 + rng.below(8);
            let reps = random(n, d, &mut rng);
            let protos = random(m, d, &mut rng);
            let labels: Vec<usize> = (0..n).map(|_| rng.below(m)).collect();
            let mut hits = 0;
            for i in 0..n {
                let mut best = (0, f64::INFINITY);
                for k in 0..m {
                    let s: f64 = (0..d).map(|j| (reps.get(i, j) - protos.get(k, j)).powi(2)).sum();
                    if s < best.1 {
                        best = (k, s);
                    }
                }
                hits += usize::from(best.0 == labels[i]);
                for dist in [Distance::SquaredEuclidean, Distance::Euclidean] {
                    let p = proto_posterior(&reps.select_rows(&[i]).unwrap(), &protos, dist).unwrap();
                    assert_eq!(argmax(p.row(0)), best.0);
                }
            }
            let acc = probe_accuracy(&reps, &labels, &protos).unwrap();
            assert!((acc - hits as f64 / n as f64).abs() < 1e-10);
        }
    }

    #[test]
    fn probe_on_own_class_means_of_separable_data_is_perfect() {
        let mut rng = SeededRng::new(4);
        let mut reps = Tensor2D::zeros(30, 2);
        let labels: Vec<usize> = (0..30).map(|i| i % 3).collect();
        for i in 0..30 {
            reps.set(i, 0, 10.0 * labels[i] as f64 + 0.1 * rng.normal());
        }
        let protos = compute_prototypes(&reps, &labels, 3).unwrap();
        assert_eq!(probe_accuracy(&reps, &labels, &protos).unwrap(), 1.0);
    }

    #[test]
    fn linear_probe_separates_clean_clusters_and_not_noise() {
        let mut rng = SeededRng::new(6);
        let labels: Vec<usize> = (0..200).map(|i| i % 4).collect();
        let mut clean = random(200, 5, &mut rng);
        for i in 0..200 {
            clean.set(i, labels[i], clean.get(i, labels[i]) + 8.0);
        }
        let acc = linear_probe_accuracy(&clean, &labels, &clean, &labels, 4, 200, 0.5).unwrap();
        assert!(acc > 0.98, "{acc}");
        let noise = random(200, 5, &mut rng);
        let test = random(200, 5, &mut rng);
        let acc = linear_probe_accuracy(&noise, &labels, &test, &labels, 4, 200, 0.5).unwrap();
        assert!((acc - 0.25).abs() < 0.12, "{acc}");
    }

    fn step(epoch: usize, step: usize, s: Option<(f64, f64, f64)>, rho: f64) -> MetricsRow {
        MetricsRow {
            epoch,
            step,
            s0: s.map(|v| v.0),
            s1: s.map(|v| v.1),
            sfu: s.map(|v| v.2),
            rho: Some(rho),
            ..MetricsRow::empty(Scope::Step)
        }
    }

    #[test]
    fn curves_are_per_epoch_step_means() {
        let rows = vec![
            step(0, 0, Some((0.1, 0.2, 0.3)), 2.0),
            step(0, 1, Some((0.3, 0.4, 0.5)), 0.5),
            MetricsRow {
                epoch: 0,
                s0: Some(100.0),
                ..MetricsRow::empty(Scope::Epoch)
            },
            step(1, 2, Some((0.5, 0.5, 0.5)), 1.0),
        ];
        let c = unimodal_score_curves(&rows).unwrap();
        assert_eq!(c.len(), 2);
        assert!((c[0].s0 - 0.2).abs() < 1e-15 && (c[0].sfu - 0.4).abs() < 1e-15);
        assert_eq!(c[1].s1, 0.5);
        let r = rho_curve(&rows).unwrap();
        assert!((r[0].rho - 1.25).abs() < 1e-15);
        assert!((r[0].abs_log_rho - libm::log(2.0)).abs() < 1e-15);

        let missing = vec![step(0, 0, None, 1.0)];
        assert!(unimodal_score_curves(&missing).is_err());
    }

    proptest! {
        #[test]
        fn angle_is_scale_invariant(
            a in proptest::collection::vec(-5.0f64..5.0, 6),
            b in proptest::collection::vec(-5.0f64..5.0, 6),
            s in 1e-3f64..1e3,
        ) {
            let base = gradient_angle(&a, &b);
            prop_assume!(base.is_ok());
            let base = base.unwrap();
            prop_assert!((0.0..=180.0).contains(&base));
            let scaled: Vec<f64> = a.iter().map(|v| v * s).collect();
            let other = gradient_angle(&scaled, &b).unwrap();
            prop_assert!((other - base).abs() <= 1e-9, "{other} vs {base}");
        }
    }
}
