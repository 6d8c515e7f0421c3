//! Prototype-based modality rebalancing.
//!
//! Class prototypes (per-modality centroids of representations) give a
//! classifier-free posterior for each modality. The batch ratio of
//! ground-truth posteriors measures which modality is ahead; the lagging one
//! receives a prototypical cross-entropy term that pulls its representations
//! toward their class prototype, and during the first few epochs the leading
//! one receives a negative entropy term that keeps its posterior from
//! collapsing early. Both terms act on representations only, so their
//! gradients enter each encoder directly and never pass through the fusion
//! head.
//!
//! Notes on the exact forms used here:
//!
//! * The imbalance ratio sums each modality's posterior probability of the
//!   ground-truth class over the same mini-batch.
//! * The entropy term is the Shannon entropy of the full class posterior of
//!   the modality it names: `H⁰` over `z⁰` against `c⁰`, `H¹` over `z¹`
//!   against `c¹`.
//! * Prototypes are constants inside a step; they move only between epochs.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::error::{Error, Result};
use crate::numerics::{check_labels, log_sum_exp, pairwise_sq_dist};
use crate::tensor::Tensor2D;

/// The distance `d(z, c)` inside the prototype posterior.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum Distance {
    #[default]
    SquaredEuclidean,
    Euclidean,
}

impl Distance {
    pub fn as_str(self) -> &'static str {
        match self {
            Distance::SquaredEuclidean => "squared",
            Distance::Euclidean => "euclidean",
        }
    }
}

impl fmt::Display for Distance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Distance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "squared" => Ok(Distance::SquaredEuclidean),
            "euclidean" => Ok(Distance::Euclidean),
            _ => Err(Error::invalid(format!("unknown distance `{s}`"))),
        }
    }
}

/// `[n × M]` matrix of `d(z_i, c_k)`.
pub fn distances(reps: &Tensor2D, protos: &Tensor2D, distance: Distance) -> Result<Tensor2D> {
    let sq = pairwise_sq_dist(reps, protos)?;
    Ok(match distance {
        Distance::SquaredEuclidean => sq,
        Distance::Euclidean => sq.map(libm::sqrt),
    })
}

/// Per-class means and counts. Rows of empty classes are zero.
pub fn class_means(
    reps: &Tensor2D,
    labels: &[usize],
    num_classes: usize,
) -> Result<(Tensor2D, Vec<usize>)> {
    check_labels(labels, reps.rows(), num_classes)?;
    let mut sums = Tensor2D::zeros(num_classes, reps.cols());
    let mut counts = vec![0usize; num_classes];
    for (row, &y) in reps.row_iter().zip(labels) {
        counts[y] += 1;
        for (s, v) in sums.row_mut(y).iter_mut().zip(row) {
            *s += v;
        }
    }
    for (k, &c) in counts.iter().enumerate() {
        if c > 0 {
            let inv = 1.0 / c as f64;
            sums.row_mut(k).iter_mut().for_each(|s| *s *= inv);
        }
    }
    Ok((sums, counts))
}

/// Centroid of each class. Fails with [`Error::MissingClass`] on the first
/// class without samples.
pub fn compute_prototypes(reps: &Tensor2D, labels: &[usize], num_classes: usize) -> Result<Tensor2D> {
    let (means, counts) = class_means(reps, labels, num_classes)?;
    if let Some(k) = counts.iter().position(|&c| c == 0) {
        return Err(Error::MissingClass(k));
    }
    Ok(means)
}

/// Per-modality prototypes with momentum refresh between epochs.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeBank {
    protos: [Tensor2D; 2],
    counts: [Vec<usize>; 2],
    epsilon: f64,
    initialized: bool,
}

impl PrototypeBank {
    /// Empty bank; the first refresh installs prototypes without momentum.
    pub fn new(num_classes: usize, dim0: usize, dim1: usize, epsilon: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&epsilon) {
            return Err(Error::invalid(format!("epsilon {epsilon} outside [0, 1]")));
        }
        Ok(Self {
            protos: [
                Tensor2D::zeros(num_classes, dim0),
                Tensor2D::zeros(num_classes, dim1),
            ],
            counts: [vec![0; num_classes], vec![0; num_classes]],
            epsilon,
            initialized: false,
        })
    }

    pub fn from_prototypes(p0: Tensor2D, p1: Tensor2D, epsilon: f64) -> Result<Self> {
        if p0.rows() != p1.rows() {
            return Err(Error::shape("PrototypeBank", p0.rows(), p1.rows()));
        }
        let mut bank = Self::new(p0.rows(), p0.cols(), p1.cols(), epsilon)?;
        bank.protos = [p0, p1];
        bank.initialized = true;
        Ok(bank)
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    pub fn num_classes(&self) -> usize {
        self.protos[0].rows()
    }

    pub fn prototypes(&self, modality: usize) -> &Tensor2D {
        &self.protos[modality]
    }

    /// Sample counts per class from the last refresh.
    pub fn counts(&self, modality: usize) -> &[usize] {
        &self.counts[modality]
    }

    /// `c ← ε c + (1 − ε) c_new` row by row for both modalities. An
    /// uninitialized bank takes the new prototypes as they are.
    pub fn momentum_update(&mut self, new0: &Tensor2D, new1: &Tensor2D) -> Result<()> {
        let all = vec![true; self.num_classes()];
        self.blend(new0, new1, &all, &all)
    }

    fn blend(
        &mut self,
        new0: &Tensor2D,
        new1: &Tensor2D,
        rows0: &[bool],
        rows1: &[bool],
    ) -> Result<()> {
        for (m, new) in [new0, new1].into_iter().enumerate() {
            if !self.protos[m].same_shape(new) {
                return Err(Error::shape(
                    "momentum_update",
                    format!("{}x{}", self.protos[m].rows(), self.protos[m].cols()),
                    format!("{}x{}", new.rows(), new.cols()),
                ));
            }
        }
        let eps = self.epsilon;
        let init = self.initialized;
        for (m, (new, rows)) in [(new0, rows0), (new1, rows1)].into_iter().enumerate() {
            for (k, &take) in rows.iter().enumerate() {
                if !take {
                    continue;
                }
                let dst = self.protos[m].row_mut(k);
                if init {
                    for (c, &n) in dst.iter_mut().zip(new.row(k)) {
                        *c = eps * *c + (1.0 - eps) * n;
                    }
                } else {
                    dst.copy_from_slice(new.row(k));
                }
            }
        }
        self.initialized = true;
        Ok(())
    }

    /// Recomputes class centroids from subset representations and blends them
    /// in. Classes absent from the subset keep their previous prototype; they
    /// are returned as `(modality, class)` pairs.
    pub fn refresh(
        &mut self,
        z0: &Tensor2D,
        z1: &Tensor2D,
        labels: &[usize],
    ) -> Result<Vec<(usize, usize)>> {
        let m = self.num_classes();
        let (new0, counts0) = class_means(z0, labels, m)?;
        let (new1, counts1) = class_means(z1, labels, m)?;
        let present0: Vec<bool> = counts0.iter().map(|&c| c > 0).collect();
        let present1: Vec<bool> = counts1.iter().map(|&c| c > 0).collect();
        let missing = present0
            .iter()
            .enumerate()
            .filter(|(_, &p)| !p)
            .map(|(k, _)| (0, k))
            .chain(
                present1
                    .iter()
                    .enumerate()
                    .filter(|(_, &p)| !p)
                    .map(|(k, _)| (1, k)),
            )
            .collect();
        self.blend(&new0, &new1, &present0, &present1)?;
        self.counts = [counts0, counts1];
        Ok(missing)
    }
}

/// `p(y = k | z) = exp(−d(z, c_k)) / Σ_k' exp(−d(z, c_k'))` for every row.
pub fn proto_posterior(reps: &Tensor2D, protos: &Tensor2D, distance: Distance) -> Result<Tensor2D> {
    let mut out = distances(reps, protos, distance)?;
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        row.iter_mut().for_each(|d| *d = -*d);
        let lse = log_sum_exp(row);
        row.iter_mut().for_each(|a| *a = libm::exp(*a - lse));
    }
    Ok(out)
}

/// Posterior mass on each sample's own label.
pub fn true_class_posteriors(posterior: &Tensor2D, labels: &[usize]) -> Result<Vec<f64>> {
    check_labels(labels, posterior.rows(), posterior.cols())?;
    Ok(posterior
        .row_iter()
        .zip(labels)
        .map(|(row, &y)| row[y])
        .collect())
}

/// `ρ = Σ_i p⁰_i / Σ_i p¹_i` over one mini-batch.
pub fn imbalance_ratio(p0_true: &[f64], p1_true: &[f64]) -> Result<f64> {
    if p0_true.is_empty() || p0_true.len() != p1_true.len() {
        return Err(Error::shape(
            "imbalance_ratio",
            format!("two equal non-empty batches ({})", p0_true.len()),
            p1_true.len(),
        ));
    }
    let num: f64 = p0_true.iter().sum();
    let den: f64 = p1_true.iter().sum();
    if !(den > 0.0) || !num.is_finite() || !den.is_finite() {
        return Err(Error::invalid(format!(
            "imbalance ratio undefined for sums {num} / {den}"
        )));
    }
    Ok(num / den)
}

/// Bounds applied to `ρ` before deriving coefficients.
pub const RHO_CLAMP: (f64, f64) = (1e-6, 1e6);

fn clip(lo: f64, v: f64, hi: f64) -> f64 {
    v.max(lo).min(hi)
}

/// `(β, γ)`: `ρ < 1` gives `β = clip(0, 1/ρ − 1, 1), γ = 0`; otherwise
/// `β = 0, γ = clip(0, ρ − 1, 1)`.
pub fn modulation_coefficients(rho: f64) -> Result<(f64, f64)> {
    if !(rho > 0.0) || rho.is_nan() {
        return Err(Error::invalid(format!("rho must be positive, got {rho}")));
    }
    let rho = clip(RHO_CLAMP.0, rho, RHO_CLAMP.1);
    if rho < 1.0 {
        Ok((clip(0.0, 1.0 / rho - 1.0, 1.0), 0.0))
    } else {
        Ok((0.0, clip(0.0, rho - 1.0, 1.0)))
    }
}

/// Coefficients and hyperparameters in force for one training step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModulationState {
    pub rho: f64,
    pub beta: f64,
    pub gamma: f64,
    pub alpha: f64,
    pub mu: f64,
    pub reg_epochs: usize,
    pub epoch: usize,
}

impl ModulationState {
    pub fn new(rho: f64, alpha: f64, mu: f64, reg_epochs: usize, epoch: usize) -> Result<Self> {
        if !(alpha >= 0.0) || !(mu >= 0.0) {
            return Err(Error::invalid("alpha and mu must be non-negative"));
        }
        let (beta, gamma) = modulation_coefficients(rho)?;
        Ok(Self {
            rho,
            beta,
            gamma,
            alpha,
            mu,
            reg_epochs,
            epoch,
        })
    }

    /// Whether the entropy terms apply at this epoch.
    pub fn per_active(&self) -> bool {
        self.epoch < self.reg_epochs
    }

    /// Weights of `L_PCE⁰`, `L_PCE¹` in the acceleration loss.
    pub fn pce_weights(&self) -> (f64, f64) {
        (self.alpha * self.beta, self.alpha * self.gamma)
    }

    /// Weights of `H⁰`, `H¹` subtracted in the final loss; zero once the
    /// regularization window has passed. Note the crossing: `H⁰` (the
    /// leading modality when `ρ ≥ 1`) is weighted by `γ`.
    pub fn entropy_weights(&self) -> (f64, f64) {
        if self.per_active() {
            (self.mu * self.gamma, self.mu * self.beta)
        } else {
            (0.0, 0.0)
        }
    }
}

/// `L_acc = L_CE + αβ L_PCE⁰ + αγ L_PCE¹`.
pub fn acceleration_loss(ce: f64, pce0: f64, pce1: f64, state: &ModulationState) -> f64 {
    let (w0, w1) = state.pce_weights();
    let mut loss = ce;
    if w0 != 0.0 {
        loss += w0 * pce0;
    }
    if w1 != 0.0 {
        loss += w1 * pce1;
    }
    loss
}

/// `L_final = L_acc − μγ H⁰ − μβ H¹` while `epoch < E_r`, else `L_acc`.
pub fn final_loss(acc: f64, h0: f64, h1: f64, state: &ModulationState) -> f64 {
    let (w0, w1) = state.entropy_weights();
    let mut loss = acc;
    if w0 != 0.0 {
        loss -= w0 * h0;
    }
    if w1 != 0.0 {
        loss -= w1 * h1;
    }
    loss
}

/// Accumulates `Σ_k w_k ∂(−d_k)/∂z` into `out` for one sample.
fn push_logit_grad(
    out: &mut [f64],
    z: &[f64],
    protos: &Tensor2D,
    dist_row: &[f64],
    weights: &[f64],
    distance: Distance,
) {
    for (k, &w) in weights.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        let c = protos.row(k);
        let factor = match distance {
            // ∂(−‖z − c‖²)/∂z = −2 (z − c)
            Distance::SquaredEuclidean => -2.0 * w,
            // ∂(−‖z − c‖)/∂z = −(z − c)/‖z − c‖, zero at the centre
            Distance::Euclidean => {
                if dist_row[k] > 0.0 {
                    -w / dist_row[k]
                } else {
                    0.0
                }
            }
        };
        for ((o, &zj), &cj) in out.iter_mut().zip(z).zip(c) {
            *o += factor * (zj - cj);
        }
    }
}

/// Mean prototypical cross-entropy `−log p(y_i | z_i)` and its gradient with
/// respect to the representations (prototypes held constant).
pub fn pce_loss(
    reps: &Tensor2D,
    labels: &[usize],
    protos: &Tensor2D,
    distance: Distance,
) -> Result<(f64, Tensor2D)> {
    check_labels(labels, reps.rows(), protos.rows())?;
    let n = reps.rows();
    if n == 0 {
        return Err(Error::invalid("empty batch"));
    }
    let d = distances(reps, protos, distance)?;
    let inv_n = 1.0 / n as f64;
    let mut loss = 0.0;
    let mut grad = Tensor2D::zeros(n, reps.cols());
    let mut weights = vec![0.0; protos.rows()];
    for i in 0..n {
        let logits: Vec<f64> = d.row(i).iter().map(|v| -v).collect();
        let lse = log_sum_exp(&logits);
        let y = labels[i];
        loss += lse - logits[y];
        for (w, &a) in weights.iter_mut().zip(&logits) {
            *w = libm::exp(a - lse) * inv_n;
        }
        weights[y] -= inv_n;
        push_logit_grad(grad.row_mut(i), reps.row(i), protos, d.row(i), &weights, distance);
    }
    Ok((loss * inv_n, grad))
}

/// Mean Shannon entropy of the prototype posterior and its gradient with
/// respect to the representations (prototypes held constant).
pub fn per_entropy(reps: &Tensor2D, protos: &Tensor2D, distance: Distance) -> Result<(f64, Tensor2D)> {
    let n = reps.rows();
    if n == 0 {
        return Err(Error::invalid("empty batch"));
    }
    let d = distances(reps, protos, distance)?;
    let inv_n = 1.0 / n as f64;
    let mut total = 0.0;
    let mut grad = Tensor2D::zeros(n, reps.cols());
    let mut weights = vec![0.0; protos.rows()];
    for i in 0..n {
        let logits: Vec<f64> = d.row(i).iter().map(|v| -v).collect();
        let lse = log_sum_exp(&logits);
        let log_p: Vec<f64> = logits.iter().map(|a| a - lse).collect();
        let h: f64 = -log_p.iter().map(|&lp| libm::exp(lp) * lp).sum::<f64>();
        total += h;
        // ∂H/∂a_k = −p_k (log p_k + H)
        for (w, &lp) in weights.iter_mut().zip(&log_p) {
            *w = -libm::exp(lp) * (lp + h) * inv_n;
        }
        push_logit_grad(grad.row_mut(i), reps.row(i), protos, d.row(i), &weights, distance);
    }
    Ok((total * inv_n, grad))
}
