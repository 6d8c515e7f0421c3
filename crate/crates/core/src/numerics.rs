//! Probability and distance kernels, plus the central-difference gradient
//! oracle that every analytic gradient in the crate is checked against.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor2D;

fn check_finite(values: &[f64], what: &str) -> Result<()> {
    if values.is_empty() {
        return Err(Error::invalid(format!("{what} is empty")));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid(format!("{what} contains non-finite values")));
    }
    Ok(())
}

/// `log Σ exp(x)` with max subtraction. Input must be non-empty and finite.
pub fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|&v| libm::exp(v - max)).sum();
    max + libm::log(sum)
}

pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    check_finite(logits, "logits")?;
    Ok(softmax_unchecked(logits))
}

pub(crate) fn softmax_unchecked(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&v| libm::exp(v - max)).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= sum);
    out
}

pub fn log_softmax(logits: &[f64]) -> Result<Vec<f64>> {
    check_finite(logits, "logits")?;
    let lse = log_sum_exp(logits);
    Ok(logits.iter().map(|&v| v - lse).collect())
}

/// `-log softmax(logits)[label]` through log-sum-exp.
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<f64> {
    check_finite(logits, "logits")?;
    if label >= logits.len() {
        return Err(Error::invalid(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    Ok((log_sum_exp(logits) - logits[label]).max(0.0))
}

/// Row-wise softmax.
pub fn softmax_rows(logits: &Tensor2D) -> Result<Tensor2D> {
    let mut out = Vec::with_capacity(logits.rows() * logits.cols());
    for row in logits.row_iter() {
        out.extend(softmax(row)?);
    }
    Tensor2D::new(logits.rows(), logits.cols(), out)
}

pub(crate) fn check_labels(labels: &[usize], rows: usize, classes: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::shape("labels", rows, labels.len()));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::invalid(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    Ok(())
}

/// Mean cross-entropy over a batch of logits and its gradient with respect
/// to the logits, `(softmax - onehot) / n`.
pub fn cross_entropy_batch(logits: &Tensor2D, labels: &[usize]) -> Result<(f64, Tensor2D)> {
    check_labels(labels, logits.rows(), logits.cols())?;
    let n = logits.rows();
    if n == 0 {
        return Err(Error::invalid("empty batch"));
    }
    let inv_n = 1.0 / n as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(n * logits.cols());
    for (row, &y) in logits.row_iter().zip(labels) {
        loss += cross_entropy(row, y)?;
        let mut p = softmax_unchecked(row);
        p[y] -= 1.0;
        grad.extend(p.into_iter().map(|v| v * inv_n));
    }
    Ok((loss * inv_n, Tensor2D::new(n, logits.cols(), grad)?))
}

/// Entry `(i, k)` is `Σ_j (points[i,j] - centers[k,j])²`.
pub fn pairwise_sq_dist(points: &Tensor2D, centers: &Tensor2D) -> Result<Tensor2D> {
    if points.cols() != centers.cols() {
        return Err(Error::shape(
            "pairwise_sq_dist",
            format!("feature dimension {}", points.cols()),
            centers.cols(),
        ));
    }
    let mut out = Tensor2D::zeros(points.rows(), centers.rows());
    for (i, p) in points.row_iter().enumerate() {
        for (k, c) in centers.row_iter().enumerate() {
            let d: f64 = p.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum();
            out.set(i, k, d);
        }
    }
    Ok(out)
}

/// Central differences `(f(p + h e_i) - f(p - h e_i)) / 2h` per coordinate.
pub fn finite_diff_grad<F>(mut f: F, params: &[f64], step: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::invalid(format!("step must be positive, got {step}")));
    }
    let mut probe = params.to_vec();
    let mut grad = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let orig = probe[i];
        probe[i] = orig + step;
        let plus = f(&probe);
        probe[i] = orig - step;
        let minus = f(&probe);
        probe[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::OracleFailure(format!(
                "non-finite function value at coordinate {i}"
            )));
        }
        grad.push((plus - minus) / (2.0 * step));
    }
    Ok(grad)
}

/// Relative-error floor: components whose magnitudes are both below this are
/// compared on an absolute scale.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

/// `max_i |a_i - b_i| / max(|a_i|, |b_i|, REL_ERROR_FLOOR)`.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &b)| (a - b).abs() / a.abs().max(b.abs()).max(REL_ERROR_FLOOR))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;

    #[test]
    fn softmax_examples() {
        let p = softmax(&[0.0, 0.0, 0.0]).unwrap();
        for v in &p {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let p = softmax(&[1000.0, 0.0]).unwrap();
        assert!((p[0] - 1.0).abs() < 1e-15 && p[1] >= 0.0 && p[1] < 1e-300);
        let p = softmax(&[1.0, 2.0]).unwrap();
        // 1 / (1 + e) and e / (1 + e)
        assert!((p[0] - 0.268_941_421_369_995_1).abs() < 1e-12);
        assert!((p[1] - 0.731_058_578_630_004_9).abs() < 1e-12);
        assert!(matches!(
            softmax(&[1.0, f64::INFINITY]),
            Err(Error::InvalidInput(_))
        ));
        assert!(softmax(&[]).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        for m in 2..7 {
            let ce = cross_entropy(&vec![0.3; m], m - 1).unwrap();
            assert!((ce - libm::log(m as f64)).abs() < 1e-14);
        }
        let ce = cross_entropy(&[10.0, -10.0], 0).unwrap();
        // -log(1 / (1 + e^-20)) = log1p(e^-20)
        assert!((ce - libm::log1p(libm::exp(-20.0))).abs() < 1e-14);
        assert!((ce - 2.061_153_620_314_381_5e-9).abs() < 1e-15);
        let ce = cross_entropy(&[0.0; 4], 2).unwrap();
        assert!((ce - 1.386_294_361_119_890_6).abs() < 1e-12);
        assert!(matches!(
            cross_entropy(&[0.0, 1.0], 2),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn pairwise_examples() {
        let p = Tensor2D::from_rows(&[[0.0, 0.0]]).unwrap();
        let c = Tensor2D::from_rows(&[[0.0, 0.0]]).unwrap();
        assert_eq!(pairwise_sq_dist(&p, &c).unwrap().as_slice(), &[0.0]);

        let p = Tensor2D::from_rows(&[[1.0, 0.0]]).unwrap();
        let c = Tensor2D::from_rows(&[[0.0, 0.0], [2.0, 0.0]]).unwrap();
        assert_eq!(pairwise_sq_dist(&p, &c).unwrap().as_slice(), &[1.0, 1.0]);

        let p = Tensor2D::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        let c = Tensor2D::from_rows(&[[0.0, 0.0]]).unwrap();
        let d = pairwise_sq_dist(&p, &c).unwrap();
        assert_eq!(d.shape(), (2, 1));
        assert_eq!(d.as_slice(), &[5.0, 25.0]);

        let bad = Tensor2D::zeros(1, 3);
        assert!(matches!(
            pairwise_sq_dist(&p, &bad),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn finite_diff_examples() {
        let g = finite_diff_grad(|p| p[0] * p[0], &[3.0], 1e-5).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-8);

        let g = finite_diff_grad(|_| 4.2, &[1.0, -2.0, 3.0], 1e-5).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));

        assert!(matches!(
            finite_diff_grad(|p| 1.0 / p[0], &[-1e-5], 1e-5),
            Err(Error::OracleFailure(_))
        ));
        assert!(finite_diff_grad(|p| p[0], &[1.0], 0.0).is_err());
    }

    #[test]
    fn finite_diff_matches_linear_softmax_closed_form() {
        // Two-class linear model, logits = W x, W is 2x3 flattened row-major.
        let x = [0.7, -1.3, 0.4];
        let y = 1usize;
        let w0 = [0.2, -0.1, 0.5, -0.3, 0.8, 0.1];
        let logits_of = |w: &[f64]| {
            [
                w[0] * x[0] + w[1] * x[1] + w[2] * x[2],
                w[3] * x[0] + w[4] * x[1] + w[5] * x[2],
            ]
        };
        let numeric = finite_diff_grad(
            |w| cross_entropy(&logits_of(w), y).unwrap(),
            &w0,
            1e-5,
        )
        .unwrap();
        let mut p = softmax(&logits_of(&w0)).unwrap();
        p[y] -= 1.0;
        let analytic: Vec<f64> = (0..6).map(|i| p[i / 3] * x[i % 3]).collect();
        assert!(max_relative_error(&analytic, &numeric) < 1e-6);
    }

    #[test]
    fn batch_cross_entropy_gradient() {
        let logits = Tensor2D::from_rows(&[[0.5, -0.2, 0.1], [1.0, 2.0, -1.0]]).unwrap();
        let labels = [2usize, 0];
        let (loss, grad) = cross_entropy_batch(&logits, &labels).unwrap();
        let numeric = finite_diff_grad(
            |v| {
                let t = Tensor2D::new(2, 3, v.to_vec()).unwrap();
                cross_entropy_batch(&t, &labels).unwrap().0
            },
            logits.as_slice(),
            1e-5,
        )
        .unwrap();
        assert!(max_relative_error(grad.as_slice(), &numeric) < 1e-7);
        let direct = (cross_entropy(logits.row(0), 2).unwrap()
            + cross_entropy(logits.row(1), 0).unwrap())
            / 2.0;
        assert_eq!(loss, direct);
    }

    proptest! {
        #[test]
        fn softmax_normalized_and_shift_invariant(
            logits in proptest::collection::vec(-50.0f64..50.0, 1..12),
            shift in -100.0f64..100.0,
        ) {
            let p = softmax(&logits).unwrap();
            let sum: f64 = p.iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-12);
            prop_assert!(p.iter().all(|&v| v > 0.0 && v <= 1.0));
            let shifted: Vec<f64> = logits.iter().map(|v| v + shift).collect();
            let q = softmax(&shifted).unwrap();
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }

        #[test]
        fn cross_entropy_nonnegative(
            logits in proptest::collection::vec(-30.0f64..30.0, 2..8),
            pick in 0usize..8,
        ) {
            let y = pick % logits.len();
            prop_assert!(cross_entropy(&logits, y).unwrap() >= 0.0);
        }

        #[test]
        fn pairwise_transpose_symmetry(
            a in proptest::collection::vec(-5.0f64..5.0, 6),
            b in proptest::collection::vec(-5.0f64..5.0, 9),
        ) {
            let p = Tensor2D::new(2, 3, a).unwrap();
            let c = Tensor2D::new(3, 3, b).unwrap();
            let pc = pairwise_sq_dist(&p, &c).unwrap();
            let cp = pairwise_sq_dist(&c, &p).unwrap();
            for i in 0..2 {
                for k in 0..3 {
                    prop_assert_eq!(pc.get(i, k), cp.get(k, i));
                    prop_assert!(pc.get(i, k) >= 0.0);
                }
            }
        }

        #[test]
        fn finite_diff_exact_on_quadratics(
            coeffs in proptest::collection::vec(-3.0f64..3.0, 3),
            cross in -2.0f64..2.0,
            at in proptest::collection::vec(-4.0f64..4.0, 2),
        ) {
            // f = a x² + b y² + c x y + cross·x + 1
            let f = |p: &[f64]| {
                coeffs[0] * p[0] * p[0] + coeffs[1] * p[1] * p[1]
                    + coeffs[2] * p[0] * p[1] + cross * p[0] + 1.0
            };
            let g = finite_diff_grad(f, &at, 1e-5).unwrap();
            let gx = 2.0 * coeffs[0] * at[0] + coeffs[2] * at[1] + cross;
            let gy = 2.0 * coeffs[1] * at[1] + coeffs[2] * at[0];
            prop_assert!((g[0] - gx).abs() <= 1e-8);
            prop_assert!((g[1] - gy).abs() <= 1e-8);
        }
    }
}
