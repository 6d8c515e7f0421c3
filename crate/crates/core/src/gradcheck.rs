//! Finite-difference check of every analytic gradient the training loop
//! uses, through every fusion head.
//!
//! Each case builds a random small model (hidden width ≤ 8, batch ≤ 8) and
//! random prototypes, then compares the full parameter gradient of one
//! objective against central differences over all parameters. Instances
//! with a hidden pre-activation close to a ReLU kink are redrawn, since
//! there the finite difference straddles the kink and measures nothing.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::model::{FusionVariant, ModelSpec, MultimodalModel, Parameters};
use crate::numerics::{cross_entropy_batch, finite_diff_grad, max_relative_error};
use crate::pmr::{
    acceleration_loss, final_loss, pce_loss, per_entropy, Distance, ModulationState,
};
use crate::rng::{stream, SeededRng};
use crate::tensor::Tensor2D;

pub const TOLERANCE: f64 = 1e-4;
pub const STEP: f64 = 1e-5;
/// Minimum `|pre-activation|` of a hidden unit for an instance to be used.
pub const KINK_MARGIN: f64 = 1e-4;

/// Objectives under test.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Objective {
    CrossEntropy,
    Pce0,
    Pce1,
    Entropy0,
    Entropy1,
    /// Full PMR loss with `ρ > 1` (PCE on modality 1, entropy on 0).
    FinalHigh,
    /// Full PMR loss with `ρ < 1`.
    FinalLow,
}

impl Objective {
    pub const ALL: [Objective; 7] = [
        Objective::CrossEntropy,
        Objective::Pce0,
        Objective::Pce1,
        Objective::Entropy0,
        Objective::Entropy1,
        Objective::FinalHigh,
        Objective::FinalLow,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Objective::CrossEntropy => "ce",
            Objective::Pce0 => "pce0",
            Objective::Pce1 => "pce1",
            Objective::Entropy0 => "per0",
            Objective::Entropy1 => "per1",
            Objective::FinalHigh => "final_rho_high",
            Objective::FinalLow => "final_rho_low",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub objective: Objective,
    pub fusion: FusionVariant,
    pub distance: Distance,
    pub max_rel_error: f64,
    pub num_params: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= TOLERANCE
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradcheckReport {
    pub results: Vec<CheckResult>,
}

impl GradcheckReport {
    pub fn all_passed(&self) -> bool {
        self.results.iter().all(CheckResult::passed)
    }

    pub fn failures(&self) -> Vec<String> {
        self.results
            .iter()
            .filter(|r| !r.passed())
            .map(|r| {
                format!(
                    "{} / {} / {}: {:.3e}",
                    r.objective.as_str(),
                    r.fusion,
                    r.distance,
                    r.max_rel_error
                )
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradcheckOptions {
    pub seed: u64,
    /// Instances per (objective, head, distance).
    pub trials: usize,
    /// Test hook: perturbs every analytic gradient so the suite must fail.
    pub corrupt: bool,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            trials: 2,
            corrupt: false,
        }
    }
}

struct Instance {
    model: MultimodalModel,
    x0: Tensor2D,
    x1: Tensor2D,
    labels: Vec<usize>,
    c0: Tensor2D,
    c1: Tensor2D,
}

fn random(rows: usize, cols: usize, scale: f64, rng: &mut SeededRng) -> Tensor2D {
    let mut t = Tensor2D::zeros(rows, cols);
    t.as_mut_slice()
        .iter_mut()
        .for_each(|v| *v = scale * rng.normal());
    t
}

fn instance(fusion: FusionVariant, rng: &mut SeededRng) -> Result<Instance> {
    for _ in 0..1000 {
        let spec = ModelSpec {
            dim0: 2 + rng.below(4),
            dim1: 2 + rng.below(4),
            hidden_width: 3 + rng.below(6),
            hidden_layers: 1 + rng.below(2),
            rep_dim: 2 + rng.below(4),
            num_classes: 2 + rng.below(3),
            fusion,
        };
        let n = 3 + rng.below(6);
        let model = MultimodalModel::init(&spec, rng)?;
        let x0 = random(n, spec.dim0, 1.0, rng);
        let x1 = random(n, spec.dim1, 1.0, rng);
        let kink = model
            .encoder0
            .min_abs_hidden_preactivation(&x0)?
            .min(model.encoder1.min_abs_hidden_preactivation(&x1)?);
        if kink <= KINK_MARGIN {
            continue;
        }
        let labels = (0..n).map(|_| rng.below(spec.num_classes)).collect();
        let c0 = random(spec.num_classes, spec.rep_dim, 0.5, rng);
        let c1 = random(spec.num_classes, spec.rep_dim, 0.5, rng);
        return Ok(Instance {
            model,
            x0,
            x1,
            labels,
            c0,
            c1,
        });
    }
    Err(Error::OracleFailure("no kink-free instance found".into()))
}

fn modulation(objective: Objective) -> Option<ModulationState> {
    // coefficients are constants of the step, so a fixed state is exact
    let rho = match objective {
        Objective::FinalHigh => 1.6,
        Objective::FinalLow => 0.7,
        _ => return None,
    };
    Some(ModulationState::new(rho, 1.5, 0.3, 10, 0).expect("valid state"))
}

/// Loss value and analytic parameter gradient (flat) for one objective.
fn loss_and_grad(
    inst: &Instance,
    model: &MultimodalModel,
    objective: Objective,
    distance: Distance,
    want_grad: bool,
) -> Result<(f64, Vec<f64>)> {
    let (out, cache) = model.forward(&inst.x0, &inst.x1)?;
    let y = &inst.labels;
    let zero = Tensor2D::zeros(out.logits.rows(), out.logits.cols());
    let (loss, dlogits, dz0, dz1) = match objective {
        Objective::CrossEntropy => {
            let (l, d) = cross_entropy_batch(&out.logits, y)?;
            (l, d, None, None)
        }
        Objective::Pce0 => {
            let (l, g) = pce_loss(&out.z0, y, &inst.c0, distance)?;
            (l, zero, Some(g), None)
        }
        Objective::Pce1 => {
            let (l, g) = pce_loss(&out.z1, y, &inst.c1, distance)?;
            (l, zero, None, Some(g))
        }
        Objective::Entropy0 => {
            let (l, g) = per_entropy(&out.z0, &inst.c0, distance)?;
            (l, zero, Some(g), None)
        }
        Objective::Entropy1 => {
            let (l, g) = per_entropy(&out.z1, &inst.c1, distance)?;
            (l, zero, None, Some(g))
        }
        Objective::FinalHigh | Objective::FinalLow => {
            let state = modulation(objective).expect("final objective");
            let (ce, d) = cross_entropy_batch(&out.logits, y)?;
            let (p0, gp0) = pce_loss(&out.z0, y, &inst.c0, distance)?;
            let (p1, gp1) = pce_loss(&out.z1, y, &inst.c1, distance)?;
            let (h0, gh0) = per_entropy(&out.z0, &inst.c0, distance)?;
            let (h1, gh1) = per_entropy(&out.z1, &inst.c1, distance)?;
            let loss = final_loss(acceleration_loss(ce, p0, p1, &state), h0, h1, &state);
            let (wp0, wp1) = state.pce_weights();
            let (wh0, wh1) = state.entropy_weights();
            let mut e0 = gp0;
            e0.scale(wp0);
            e0.add_scaled(&gh0, -wh0)?;
            let mut e1 = gp1;
            e1.scale(wp1);
            e1.add_scaled(&gh1, -wh1)?;
            (loss, d, Some(e0), Some(e1))
        }
    };
    if !want_grad {
        return Ok((loss, Vec::new()));
    }
    let grads = model
        .backward_with(&cache, &dlogits, dz0.as_ref(), dz1.as_ref())?
        .grads;
    Ok((loss, grads.to_flat()))
}

/// Max relative error of one objective on one instance.
fn check_one(
    inst: &Instance,
    objective: Objective,
    distance: Distance,
    corrupt: bool,
) -> Result<f64> {
    let (_, mut analytic) = loss_and_grad(inst, &inst.model, objective, distance, true)?;
    if corrupt {
        for (i, g) in analytic.iter_mut().enumerate() {
            *g = *g * 1.01 + if i % 2 == 0 { 1e-2 } else { -1e-2 };
        }
    }
    let mut probe = inst.model.clone();
    let numeric = finite_diff_grad(
        |p| {
            probe.set_flat(p).expect("same layout");
            loss_and_grad(inst, &probe, objective, distance, false)
                .map(|r| r.0)
                .unwrap_or(f64::NAN)
        },
        &inst.model.to_flat(),
        STEP,
    )?;
    Ok(max_relative_error(&analytic, &numeric))
}

/// Runs every (objective, head, distance) combination.
pub fn run_suite(options: &GradcheckOptions) -> Result<GradcheckReport> {
    let mut rng = SeededRng::with_stream(options.seed, stream::GRADCHECK);
    let mut report = GradcheckReport::default();
    for fusion in FusionVariant::ALL {
        for distance in [Distance::SquaredEuclidean, Distance::Euclidean] {
            let instances: Vec<Instance> = (0..options.trials.max(1))
                .map(|_| instance(fusion, &mut rng))
                .collect::<Result<_>>()?;
            for objective in Objective::ALL {
                let mut worst: f64 = 0.0;
                for inst in &instances {
                    worst = worst.max(check_one(inst, objective, distance, options.corrupt)?);
                }
                report.results.push(CheckResult {
                    objective,
                    fusion,
                    distance,
                    max_rel_error: worst,
                    num_params: instances[0].model.num_params(),
                });
            }
        }
    }
    Ok(report)
}
