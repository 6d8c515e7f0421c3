//! Training loops: PMR with and without the entropy term, the joint-CE
//! baseline, the gradient-magnitude boost baseline and uni-modal baselines,
//! all on momentum SGD.
//!
//! Every multimodal strategy logs the same quantities (prototype-based ρ,
//! β, γ, PCE and entropy values) so curves are comparable; only PMR feeds
//! them back into the gradient. Terms with a zero coefficient are skipped
//! rather than multiplied by zero, which is what makes `pmr` with `α = μ = 0`
//! bitwise identical to `joint_ce`.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::data::{sample_subset, MultimodalDataset};
use crate::diagnostics::{logits_accuracy, modality_gradient_angles, probe_accuracy};
use crate::error::{Error, Result};
use crate::model::FusionVariant;
use crate::model::{scores_from_output, ModelSpec, MultimodalModel, Parameters, UnimodalModel};
use crate::numerics::cross_entropy_batch;
use crate::pmr::{
    acceleration_loss, compute_prototypes, final_loss, imbalance_ratio, pce_loss, per_entropy,
    proto_posterior, true_class_posteriors, Distance, ModulationState, PrototypeBank, RHO_CLAMP,
};
use crate::rng::{stream, SeededRng};
use crate::tensor::Tensor2D;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum Strategy {
    #[default]
    Pmr,
    PmrNoPer,
    JointCe,
    AccBoost,
    Unimodal0,
    Unimodal1,
}

impl Strategy {
    pub const ALL: [Strategy; 6] = [
        Strategy::Pmr,
        Strategy::PmrNoPer,
        Strategy::JointCe,
        Strategy::AccBoost,
        Strategy::Unimodal0,
        Strategy::Unimodal1,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Pmr => "pmr",
            Strategy::PmrNoPer => "pmr_no_per",
            Strategy::JointCe => "joint_ce",
            Strategy::AccBoost => "acc_boost",
            Strategy::Unimodal0 => "unimodal0",
            Strategy::Unimodal1 => "unimodal1",
        }
    }

    pub fn unimodal_modality(self) -> Option<usize> {
        match self {
            Strategy::Unimodal0 => Some(0),
            Strategy::Unimodal1 => Some(1),
            _ => None,
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown strategy `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum LrSchedule {
    /// Straight line from `lr_initial` at epoch 0 to `lr_final` at `E − 1`.
    #[default]
    Linear,
    /// `lr_initial` for the first `⌊E/2⌋` epochs, `lr_final` after.
    Step,
}

impl LrSchedule {
    pub fn as_str(self) -> &'static str {
        match self {
            LrSchedule::Linear => "linear",
            LrSchedule::Step => "step",
        }
    }
}

impl FromStr for LrSchedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(LrSchedule::Linear),
            "step" => Ok(LrSchedule::Step),
            _ => Err(Error::invalid(format!("unknown lr schedule `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub strategy: Strategy,
    pub epochs: usize,
    pub reg_epochs: usize,
    pub batch_size: usize,
    pub lr_initial: f64,
    pub lr_final: f64,
    pub lr_schedule: LrSchedule,
    pub momentum: f64,
    pub weight_decay: f64,
    pub alpha: f64,
    pub mu: f64,
    pub epsilon: f64,
    pub subset_fraction: f64,
    pub distance: Distance,
    /// Gradient angles every this many steps; 0 disables them.
    pub diag_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Pmr,
            epochs: 100,
            reg_epochs: 10,
            batch_size: 64,
            lr_initial: 1e-3,
            lr_final: 1e-4,
            lr_schedule: LrSchedule::Linear,
            momentum: 0.9,
            weight_decay: 1e-4,
            alpha: 1.0,
            mu: 1e-2,
            epsilon: 0.5,
            subset_fraction: 0.1,
            distance: Distance::SquaredEuclidean,
            diag_every: 10,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidInput(msg));
        if self.reg_epochs > self.epochs {
            return bad(format!(
                "reg_epochs {} exceeds epochs {}",
                self.reg_epochs, self.epochs
            ));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.lr_final >= 0.0 && self.lr_final <= self.lr_initial && self.lr_initial.is_finite())
        {
            return bad(format!(
                "need 0 <= lr_final <= lr_initial, got {} and {}",
                self.lr_final, self.lr_initial
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} outside [0, 1)", self.momentum));
        }
        for (name, v) in [
            ("weight_decay", self.weight_decay),
            ("alpha", self.alpha),
            ("mu", self.mu),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be non-negative, got {v}"));
            }
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return bad(format!("epsilon {} outside [0, 1]", self.epsilon));
        }
        if !(self.subset_fraction > 0.0 && self.subset_fraction <= 1.0) {
            return bad(format!("subset_fraction {} outside (0, 1]", self.subset_fraction));
        }
        Ok(())
    }

    /// Learning rate in force during `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if self.epochs <= 1 {
            return self.lr_initial;
        }
        match self.lr_schedule {
            LrSchedule::Linear => {
                if epoch + 1 >= self.epochs {
                    return self.lr_final;
                }
                let t = epoch as f64 / (self.epochs - 1) as f64;
                self.lr_initial + (self.lr_final - self.lr_initial) * t
            }
            LrSchedule::Step => {
                if epoch < self.epochs / 2 {
                    self.lr_initial
                } else {
                    self.lr_final
                }
            }
        }
    }
}

/// Momentum buffers congruent with the parameters they drive.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<V> {
    pub velocity: V,
    pub lr: f64,
}

impl<V: Parameters> OptimizerState<V> {
    pub fn new(mut velocity: V, lr: f64) -> Self {
        velocity.fill_zero();
        Self { velocity, lr }
    }
}

/// `v ← m·v + (g + wd·p)`, `p ← p − lr·v`.
pub fn sgd_step<P, G, V>(
    params: &mut P,
    grads: &G,
    opt: &mut OptimizerState<V>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()>
where
    P: Parameters,
    G: Parameters,
    V: Parameters,
{
    params.check_congruent(grads)?;
    params.check_congruent(&opt.velocity)?;
    opt.lr = lr;
    let g = grads.param_slices();
    let v = opt.velocity.param_slices_mut();
    let p = params.param_slices_mut();
    for ((p, g), v) in p.into_iter().zip(g).zip(v) {
        for ((p, &g), v) in p.iter_mut().zip(g).zip(v.iter_mut()) {
            let g = if weight_decay != 0.0 { g + weight_decay * *p } else { g };
            *v = momentum * *v + g;
            *p -= lr * *v;
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum Scope {
    #[default]
    Step,
    Epoch,
}

impl Scope {
    pub fn as_str(self) -> &'static str {
        match self {
            Scope::Step => "step",
            Scope::Epoch => "epoch",
        }
    }
}

impl FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "step" => Ok(Scope::Step),
            "epoch" => Ok(Scope::Epoch),
            _ => Err(Error::invalid(format!("unknown scope `{s}`"))),
        }
    }
}

/// One training record. Step rows describe a mini-batch before its update;
/// epoch rows hold the means of that epoch's step rows plus held-out
/// metrics measured after the epoch. Fields that do not apply to a strategy
/// are `None`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsRow {
    pub scope: Scope,
    pub epoch: usize,
    pub step: usize,
    pub loss_ce: f64,
    pub loss_pce0: Option<f64>,
    pub loss_pce1: Option<f64>,
    pub entropy0: Option<f64>,
    pub entropy1: Option<f64>,
    pub loss_final: f64,
    pub rho: Option<f64>,
    pub beta: Option<f64>,
    pub gamma: Option<f64>,
    pub train_acc: f64,
    pub probe_acc0: Option<f64>,
    pub probe_acc1: Option<f64>,
    pub test_acc: Option<f64>,
    pub test_probe_acc0: Option<f64>,
    pub test_probe_acc1: Option<f64>,
    pub s0: Option<f64>,
    pub s1: Option<f64>,
    pub sfu: Option<f64>,
    pub angle0: Option<f64>,
    pub angle1: Option<f64>,
}

/// Column order of the metrics table.
pub const METRICS_COLUMNS: [&str; 23] = [
    "scope",
    "epoch",
    "step",
    "loss_ce",
    "loss_pce0",
    "loss_pce1",
    "entropy0",
    "entropy1",
    "loss_final",
    "rho",
    "beta",
    "gamma",
    "train_acc",
    "probe_acc0",
    "probe_acc1",
    "test_acc",
    "test_probe_acc0",
    "test_probe_acc1",
    "s0",
    "s1",
    "sfu",
    "angle0",
    "angle1",
];

impl MetricsRow {
    pub fn empty(scope: Scope) -> Self {
        Self {
            scope,
            ..Self::default()
        }
    }

    /// Numeric columns after `scope`, `epoch`, `step`, in
    /// [`METRICS_COLUMNS`] order.
    pub fn values(&self) -> [Option<f64>; 20] {
        [
            Some(self.loss_ce),
            self.loss_pce0,
            self.loss_pce1,
            self.entropy0,
            self.entropy1,
            Some(self.loss_final),
            self.rho,
            self.beta,
            self.gamma,
            Some(self.train_acc),
            self.probe_acc0,
            self.probe_acc1,
            self.test_acc,
            self.test_probe_acc0,
            self.test_probe_acc1,
            self.s0,
            self.s1,
            self.sfu,
            self.angle0,
            self.angle1,
        ]
    }

    /// Inverse of [`Self::values`]. The three required columns must be
    /// present.
    pub fn from_values(scope: Scope, epoch: usize, step: usize, v: [Option<f64>; 20]) -> Result<Self> {
        let req = |x: Option<f64>, name: &str| {
            x.ok_or_else(|| Error::invalid(format!("missing value for {name}")))
        };
        Ok(Self {
            scope,
            epoch,
            step,
            loss_ce: req(v[0], "loss_ce")?,
            loss_pce0: v[1],
            loss_pce1: v[2],
            entropy0: v[3],
            entropy1: v[4],
            loss_final: req(v[5], "loss_final")?,
            rho: v[6],
            beta: v[7],
            gamma: v[8],
            train_acc: req(v[9], "train_acc")?,
            probe_acc0: v[10],
            probe_acc1: v[11],
            test_acc: v[12],
            test_probe_acc0: v[13],
            test_probe_acc1: v[14],
            s0: v[15],
            s1: v[16],
            sfu: v[17],
            angle0: v[18],
            angle1: v[19],
        })
    }

    pub fn is_finite(&self) -> bool {
        self.values().iter().flatten().all(|v| v.is_finite())
    }
}

/// Metrics and non-fatal events of one run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunLog {
    pub metrics: Vec<MetricsRow>,
    pub warnings: Vec<String>,
}

impl RunLog {
    pub fn epoch_rows(&self) -> impl Iterator<Item = &MetricsRow> {
        self.metrics.iter().filter(|r| r.scope == Scope::Epoch)
    }

    pub fn final_epoch(&self) -> Option<&MetricsRow> {
        self.epoch_rows().last()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TrainedModel {
    Multimodal(MultimodalModel),
    Unimodal(UnimodalModel),
}

/// `(slow modality, factor)` for the magnitude-boost baseline: the modality
/// behind by `ratio = perf0 / perf1` gets its encoder gradients multiplied
/// by `1 + clip(0, r − 1, 1)`, `r` being the ratio in its disfavour.
pub fn acc_boost_factor(ratio: f64) -> Result<(usize, f64)> {
    if !(ratio > 0.0) || ratio.is_nan() {
        return Err(Error::invalid(format!("ratio must be positive, got {ratio}")));
    }
    let ratio = ratio.clamp(RHO_CLAMP.0, RHO_CLAMP.1);
    if ratio >= 1.0 {
        Ok((1, 1.0 + (ratio - 1.0).clamp(0.0, 1.0)))
    } else {
        Ok((0, 1.0 + (1.0 / ratio - 1.0).clamp(0.0, 1.0)))
    }
}

/// Ratio of two non-negative sums, pinned to [`RHO_CLAMP`] when a sum
/// underflows to zero.
fn sum_ratio(a: &[f64], b: &[f64]) -> Result<f64> {
    let sa: f64 = a.iter().sum();
    let sb: f64 = b.iter().sum();
    Ok(match (sa > 0.0, sb > 0.0) {
        (true, true) => imbalance_ratio(a, b)?.clamp(RHO_CLAMP.0, RHO_CLAMP.1),
        (true, false) => RHO_CLAMP.1,
        (false, true) => RHO_CLAMP.0,
        (false, false) => 1.0,
    })
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Means of an epoch's step rows; optional columns average over the rows
/// that carry them.
fn summarize(epoch: usize, step: usize, rows: &[MetricsRow]) -> MetricsRow {
    let cols: Vec<[Option<f64>; 20]> = rows.iter().map(MetricsRow::values).collect();
    let mut out = [None; 20];
    for (j, slot) in out.iter_mut().enumerate() {
        let present: Vec<f64> = cols.iter().filter_map(|c| c[j]).collect();
        if !present.is_empty() {
            *slot = Some(mean(&present));
        }
    }
    MetricsRow::from_values(Scope::Epoch, epoch, step, out).expect("required columns present")
}

fn check_inputs(model_dims: (usize, usize), classes: usize, data: &MultimodalDataset) -> Result<()> {
    if model_dims != (data.x0.cols(), data.x1.cols()) {
        return Err(Error::shape(
            "training data",
            format!("{model_dims:?}"),
            format!("({}, {})", data.x0.cols(), data.x1.cols()),
        ));
    }
    if classes != data.num_classes {
        return Err(Error::invalid(format!(
            "model has {classes} classes, data has {}",
            data.num_classes
        )));
    }
    Ok(())
}

fn steps_per_epoch(config: &TrainConfig, n: usize) -> Result<usize> {
    let steps = n / config.batch_size;
    if steps == 0 && config.epochs > 0 {
        return Err(Error::invalid(format!(
            "batch size {} exceeds the {n} training samples",
            config.batch_size
        )));
    }
    Ok(steps)
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Mode {
    Pmr { per: bool },
    Joint,
    Boost,
}

/// `w_pce · ∂PCE/∂z − w_h · ∂H/∂z`, or `None` when both weights are zero.
fn extra_dz(w_pce: f64, g_pce: &Tensor2D, w_h: f64, g_h: &Tensor2D) -> Result<Option<Tensor2D>> {
    if w_pce == 0.0 && w_h == 0.0 {
        return Ok(None);
    }
    let mut dz = Tensor2D::zeros(g_pce.rows(), g_pce.cols());
    if w_pce != 0.0 {
        dz.add_scaled(g_pce, w_pce)?;
    }
    if w_h != 0.0 {
        dz.add_scaled(g_h, -w_h)?;
    }
    Ok(Some(dz))
}

fn held_out_multimodal(
    model: &MultimodalModel,
    train: &MultimodalDataset,
    test: &MultimodalDataset,
    row: &mut MetricsRow,
) -> Result<()> {
    let m = model.num_classes();
    let p0 = compute_prototypes(&model.encoder0.forward(&train.x0)?, &train.labels, m)?;
    let p1 = compute_prototypes(&model.encoder1.forward(&train.x1)?, &train.labels, m)?;
    let z0 = model.encoder0.forward(&test.x0)?;
    let z1 = model.encoder1.forward(&test.x1)?;
    let logits = model.head.forward(&z0, &z1)?.0.logits;
    row.test_acc = Some(logits_accuracy(&logits, &test.labels)?);
    row.test_probe_acc0 = Some(probe_accuracy(&z0, &test.labels, &p0)?);
    row.test_probe_acc1 = Some(probe_accuracy(&z1, &test.labels, &p1)?);
    Ok(())
}

fn train_multimodal(
    mut model: MultimodalModel,
    train: &MultimodalDataset,
    test: Option<&MultimodalDataset>,
    config: &TrainConfig,
    mode: Mode,
) -> Result<(MultimodalModel, RunLog)> {
    config.validate()?;
    check_inputs(
        (model.encoder0.input_dim(), model.encoder1.input_dim()),
        model.num_classes(),
        train,
    )?;
    if let Some(test) = test {
        check_inputs(
            (model.encoder0.input_dim(), model.encoder1.input_dim()),
            model.num_classes(),
            test,
        )?;
    }
    let variant = model.head.variant();
    if mode == Mode::Boost && !matches!(variant, FusionVariant::Sum | FusionVariant::Concat) {
        return Err(Error::UnsupportedVariant {
            op: "acc_boost",
            variant: variant.as_str(),
        });
    }
    let steps = steps_per_epoch(config, train.len())?;
    let num_classes = model.num_classes();
    let (alpha, mu) = match mode {
        Mode::Pmr { per: true } => (config.alpha, config.mu),
        Mode::Pmr { per: false } => (config.alpha, 0.0),
        Mode::Joint | Mode::Boost => (0.0, 0.0),
    };
    let dist = config.distance;
    let batch = config.batch_size;

    let subset = sample_subset(train, config.subset_fraction, config.seed)?;
    let (sub0, sub1, sub_labels) = train.batch(&subset)?;
    let mut bank = PrototypeBank::new(
        num_classes,
        model.encoder0.output_dim(),
        model.encoder1.output_dim(),
        config.epsilon,
    )?;
    let mut opt = OptimizerState::new(model.zero_grads(), config.lr_initial);
    let mut shuffle_rng = SeededRng::with_stream(config.seed, stream::SHUFFLE);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = RunLog::default();
    let mut global_step = 0usize;

    for epoch in 0..config.epochs {
        let lr = config.lr_at(epoch);
        let z0s = model.encoder0.forward(&sub0)?;
        let z1s = model.encoder1.forward(&sub1)?;
        for (m, k) in bank.refresh(&z0s, &z1s, &sub_labels)? {
            log.warnings.push(format!(
                "epoch {epoch}: class {k} absent from subset, modality {m} keeps its prototype"
            ));
        }
        shuffle_rng.shuffle(&mut order);
        let mut rows = Vec::with_capacity(steps);

        for b in 0..steps {
            let (x0, x1, y) = train.batch(&order[b * batch..(b + 1) * batch])?;
            let (out, cache) = model.forward(&x0, &x1)?;
            let (ce, dlogits) = cross_entropy_batch(&out.logits, &y)?;
            let (c0, c1) = (bank.prototypes(0), bank.prototypes(1));

            let post0 = proto_posterior(&out.z0, c0, dist)?;
            let post1 = proto_posterior(&out.z1, c1, dist)?;
            let rho = sum_ratio(
                &true_class_posteriors(&post0, &y)?,
                &true_class_posteriors(&post1, &y)?,
            )?;
            let state = ModulationState::new(rho, alpha, mu, config.reg_epochs, epoch)?;
            let (pce0, g_pce0) = pce_loss(&out.z0, &y, c0, dist)?;
            let (pce1, g_pce1) = pce_loss(&out.z1, &y, c1, dist)?;
            let (h0, g_h0) = per_entropy(&out.z0, c0, dist)?;
            let (h1, g_h1) = per_entropy(&out.z1, c1, dist)?;
            let loss = final_loss(acceleration_loss(ce, pce0, pce1, &state), h0, h1, &state);
            if !loss.is_finite() {
                return Err(Error::InvalidState(format!(
                    "loss diverged at epoch {epoch}, step {global_step}"
                )));
            }

            let scores = match out.components {
                Some(_) => Some(scores_from_output(&out, &y)?),
                None => None,
            };
            let mut angles = (None, None);
            if variant == FusionVariant::Sum
                && config.diag_every > 0
                && global_step % config.diag_every == 0
            {
                match modality_gradient_angles(&model, &out, &cache, &y) {
                    Ok((a0, a1)) => angles = (Some(a0), Some(a1)),
                    Err(Error::UndefinedAngle) => log
                        .warnings
                        .push(format!("step {global_step}: gradient angle undefined")),
                    Err(e) => return Err(e),
                }
            }

            let (wp0, wp1) = state.pce_weights();
            let (wh0, wh1) = state.entropy_weights();
            let extra0 = extra_dz(wp0, &g_pce0, wh0, &g_h0)?;
            let extra1 = extra_dz(wp1, &g_pce1, wh1, &g_h1)?;
            let mut grads = model
                .backward_with(&cache, &dlogits, extra0.as_ref(), extra1.as_ref())?
                .grads;

            if mode == Mode::Boost {
                let ratio = match &scores {
                    Some(s) => sum_ratio(&s.s0, &s.s1)?,
                    None => rho,
                };
                let (slow, factor) = acc_boost_factor(ratio)?;
                if factor != 1.0 {
                    if slow == 0 {
                        grads.encoder0.scale_all(factor);
                    } else {
                        grads.encoder1.scale_all(factor);
                    }
                }
            }

            let probe0 = probe_accuracy(&out.z0, &y, c0)?;
            let probe1 = probe_accuracy(&out.z1, &y, c1)?;
            let row = MetricsRow {
                scope: Scope::Step,
                epoch,
                step: global_step,
                loss_ce: ce,
                loss_pce0: Some(pce0),
                loss_pce1: Some(pce1),
                entropy0: Some(h0),
                entropy1: Some(h1),
                loss_final: loss,
                rho: Some(rho),
                beta: Some(state.beta),
                gamma: Some(state.gamma),
                train_acc: logits_accuracy(&out.logits, &y)?,
                probe_acc0: Some(probe0),
                probe_acc1: Some(probe1),
                s0: scores.as_ref().map(|s| mean(&s.s0)),
                s1: scores.as_ref().map(|s| mean(&s.s1)),
                sfu: scores.as_ref().map(|s| mean(&s.sfu)),
                angle0: angles.0,
                angle1: angles.1,
                ..MetricsRow::empty(Scope::Step)
            };
            rows.push(row);

            sgd_step(&mut model, &grads, &mut opt, lr, config.momentum, config.weight_decay)?;
            global_step += 1;
        }

        let mut summary = summarize(epoch, global_step - 1, &rows);
        if let Some(test) = test {
            held_out_multimodal(&model, train, test, &mut summary)?;
        }
        if !summary.is_finite() {
            return Err(Error::InvalidState(format!("non-finite metrics at epoch {epoch}")));
        }
        log.metrics.extend(rows);
        log.metrics.push(summary);
    }
    Ok((model, log))
}

fn expect_strategy(config: &TrainConfig, allowed: &[Strategy], op: &str) -> Result<()> {
    if allowed.contains(&config.strategy) {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "{op} cannot run strategy {}",
            config.strategy
        )))
    }
}

/// PMR (`pmr`) or PMR without the entropy term (`pmr_no_per`).
pub fn train_pmr(
    model: MultimodalModel,
    train: &MultimodalDataset,
    test: Option<&MultimodalDataset>,
    config: &TrainConfig,
) -> Result<(MultimodalModel, RunLog)> {
    expect_strategy(config, &[Strategy::Pmr, Strategy::PmrNoPer], "train_pmr")?;
    let per = config.strategy == Strategy::Pmr;
    train_multimodal(model, train, test, config, Mode::Pmr { per })
}

/// Plain cross-entropy on the fused logits.
pub fn train_baseline(
    model: MultimodalModel,
    train: &MultimodalDataset,
    test: Option<&MultimodalDataset>,
    config: &TrainConfig,
) -> Result<(MultimodalModel, RunLog)> {
    expect_strategy(config, &[Strategy::JointCe], "train_baseline")?;
    train_multimodal(model, train, test, config, Mode::Joint)
}

/// Cross-entropy with the slow modality's encoder gradients scaled up.
/// The performance ratio comes from the per-modality scores of a sum head,
/// or from the prototype ratio with a concatenation head.
pub fn train_acc_boost(
    model: MultimodalModel,
    train: &MultimodalDataset,
    test: Option<&MultimodalDataset>,
    config: &TrainConfig,
) -> Result<(MultimodalModel, RunLog)> {
    expect_strategy(config, &[Strategy::AccBoost], "train_acc_boost")?;
    train_multimodal(model, train, test, config, Mode::Boost)
}

/// Single encoder with a linear classifier on one modality.
pub fn train_unimodal(
    mut model: UnimodalModel,
    train: &MultimodalDataset,
    test: Option<&MultimodalDataset>,
    config: &TrainConfig,
) -> Result<(UnimodalModel, RunLog)> {
    expect_strategy(config, &[Strategy::Unimodal0, Strategy::Unimodal1], "train_unimodal")?;
    config.validate()?;
    let m = model.modality;
    if config.strategy.unimodal_modality() != Some(m) {
        return Err(Error::invalid(format!(
            "strategy {} does not match a modality-{m} model",
            config.strategy
        )));
    }
    let dim = model.encoder.input_dim();
    let num_classes = model.num_classes();
    for data in core::iter::once(train).chain(test) {
        if data.modality(m).cols() != dim || data.num_classes != num_classes {
            return Err(Error::shape(
                "training data",
                format!("{dim} features, {num_classes} classes"),
                format!("{} features, {} classes", data.modality(m).cols(), data.num_classes),
            ));
        }
    }
    let steps = steps_per_epoch(config, train.len())?;
    let batch = config.batch_size;
    let subset = sample_subset(train, config.subset_fraction, config.seed)?;
    let sub_x = train.modality(m).select_rows(&subset)?;
    let sub_labels: Vec<usize> = subset.iter().map(|&i| train.labels[i]).collect();
    let rep = model.encoder.output_dim();
    // both slots of the bank track the same representation
    let mut bank = PrototypeBank::new(num_classes, rep, rep, config.epsilon)?;
    let mut opt = OptimizerState::new(model.clone(), config.lr_initial);
    let mut shuffle_rng = SeededRng::with_stream(config.seed, stream::SHUFFLE);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = RunLog::default();
    let mut global_step = 0usize;

    for epoch in 0..config.epochs {
        let lr = config.lr_at(epoch);
        let zs = model.encoder.forward(&sub_x)?;
        for (_, k) in bank.refresh(&zs, &zs, &sub_labels)?.into_iter().filter(|p| p.0 == 0) {
            log.warnings.push(format!(
                "epoch {epoch}: class {k} absent from subset, prototype kept"
            ));
        }
        shuffle_rng.shuffle(&mut order);
        let mut rows = Vec::with_capacity(steps);
        for b in 0..steps {
            let idx = &order[b * batch..(b + 1) * batch];
            let x = train.modality(m).select_rows(idx)?;
            let y: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();
            let (z, logits, cache) = model.forward(&x)?;
            let (ce, dlogits) = cross_entropy_batch(&logits, &y)?;
            if !ce.is_finite() {
                return Err(Error::InvalidState(format!(
                    "loss diverged at epoch {epoch}, step {global_step}"
                )));
            }
            let probe = Some(probe_accuracy(&z, &y, bank.prototypes(0))?);
            let mut row = MetricsRow {
                scope: Scope::Step,
                epoch,
                step: global_step,
                loss_ce: ce,
                loss_final: ce,
                train_acc: logits_accuracy(&logits, &y)?,
                ..MetricsRow::empty(Scope::Step)
            };
            if m == 0 {
                row.probe_acc0 = probe;
            } else {
                row.probe_acc1 = probe;
            }
            rows.push(row);
            let grads = model.backward(&cache, &dlogits)?;
            sgd_step(&mut model, &grads, &mut opt, lr, config.momentum, config.weight_decay)?;
            global_step += 1;
        }
        let mut summary = summarize(epoch, global_step - 1, &rows);
        if let Some(test) = test {
            let protos = compute_prototypes(
                &model.encoder.forward(train.modality(m))?,
                &train.labels,
                num_classes,
            )?;
            let z = model.encoder.forward(test.modality(m))?;
            let logits = model.classifier.affine(&z)?;
            summary.test_acc = Some(logits_accuracy(&logits, &test.labels)?);
            let probe = Some(probe_accuracy(&z, &test.labels, &protos)?);
            if m == 0 {
                summary.test_probe_acc0 = probe;
            } else {
                summary.test_probe_acc1 = probe;
            }
        }
        log.metrics.extend(rows);
        log.metrics.push(summary);
    }
    Ok((model, log))
}

/// Initializes a model from `config.seed` and trains it with
/// `config.strategy`.
pub fn run(
    spec: &ModelSpec,
    train: &MultimodalDataset,
    test: Option<&MultimodalDataset>,
    config: &TrainConfig,
) -> Result<(TrainedModel, RunLog)> {
    let mut rng = SeededRng::with_stream(config.seed, stream::MODEL_INIT);
    if let Some(m) = config.strategy.unimodal_modality() {
        let model = UnimodalModel::init(spec, m, &mut rng)?;
        let (model, log) = train_unimodal(model, train, test, config)?;
        return Ok((TrainedModel::Unimodal(model), log));
    }
    let model = MultimodalModel::init(spec, &mut rng)?;
    let (model, log) = match config.strategy {
        Strategy::Pmr | Strategy::PmrNoPer => train_pmr(model, train, test, config)?,
        Strategy::JointCe => train_baseline(model, train, test, config)?,
        Strategy::AccBoost => train_acc_boost(model, train, test, config)?,
        Strategy::Unimodal0 | Strategy::Unimodal1 => unreachable!("handled above"),
    };
    Ok((TrainedModel::Multimodal(model), log))
}
