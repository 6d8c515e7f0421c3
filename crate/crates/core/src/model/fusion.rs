//! Fusion heads mapping two representations to class logits.
//!
//! * `Concat`: `W [z⁰; z¹] + b`.
//! * `Sum`: `(W⁰ z⁰ + b⁰) + (W¹ z¹ + b¹)`; the two components are exposed.
//! * `Film`: `scale, shift = affine(z⁰)`, `z' = scale ⊙ z¹ + shift`, `W z' + b`.
//! * `Gated`: `g = σ(affine([z⁰; z¹]))`, `z' = g ⊙ P₀z⁰ + (1 − g) ⊙ P₁z¹`,
//!   `W z' + b`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use super::encoder::uniform_weight;
use super::params::Parameters;
use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor2D;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FusionVariant {
    Concat,
    Sum,
    Film,
    Gated,
}

impl FusionVariant {
    pub const ALL: [FusionVariant; 4] = [
        FusionVariant::Concat,
        FusionVariant::Sum,
        FusionVariant::Film,
        FusionVariant::Gated,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FusionVariant::Concat => "concat",
            FusionVariant::Sum => "sum",
            FusionVariant::Film => "film",
            FusionVariant::Gated => "gated",
        }
    }
}

impl fmt::Display for FusionVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FusionVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FusionVariant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown fusion variant `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum FusionHead {
    Concat {
        weight: Tensor2D,
        bias: Vec<f64>,
        /// Width of `z⁰`; columns `..d0` of `weight` act on it.
        d0: usize,
    },
    Sum {
        w0: Tensor2D,
        b0: Vec<f64>,
        w1: Tensor2D,
        b1: Vec<f64>,
    },
    Film {
        scale_w: Tensor2D,
        scale_b: Vec<f64>,
        shift_w: Tensor2D,
        shift_b: Vec<f64>,
        weight: Tensor2D,
        bias: Vec<f64>,
    },
    Gated {
        gate_w: Tensor2D,
        gate_b: Vec<f64>,
        proj0: Tensor2D,
        proj1: Tensor2D,
        weight: Tensor2D,
        bias: Vec<f64>,
    },
}

/// Forward products kept for [`FusionHead::backward`].
#[derive(Clone, Debug)]
pub enum HeadCache {
    Concat {
        zc: Tensor2D,
    },
    Sum {
        z0: Tensor2D,
        z1: Tensor2D,
    },
    Film {
        z0: Tensor2D,
        z1: Tensor2D,
        scale: Tensor2D,
        fused: Tensor2D,
    },
    Gated {
        zc: Tensor2D,
        gate: Tensor2D,
        h0: Tensor2D,
        h1: Tensor2D,
        fused: Tensor2D,
    },
}

impl HeadCache {
    fn variant(&self) -> FusionVariant {
        match self {
            HeadCache::Concat { .. } => FusionVariant::Concat,
            HeadCache::Sum { .. } => FusionVariant::Sum,
            HeadCache::Film { .. } => FusionVariant::Film,
            HeadCache::Gated { .. } => FusionVariant::Gated,
        }
    }

    fn batch_size(&self) -> usize {
        match self {
            HeadCache::Concat { zc } | HeadCache::Gated { zc, .. } => zc.rows(),
            HeadCache::Sum { z0, .. } | HeadCache::Film { z0, .. } => z0.rows(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct FusionOutput {
    pub logits: Tensor2D,
    /// `(W⁰z⁰ + b⁰, W¹z¹ + b¹)` for the sum head; `logits` is their
    /// elementwise sum.
    pub components: Option<(Tensor2D, Tensor2D)>,
}

/// Head gradients plus `dL/dz⁰`, `dL/dz¹`.
#[derive(Clone, Debug)]
pub struct HeadBackward {
    pub grads: FusionHead,
    pub dz0: Tensor2D,
    pub dz1: Tensor2D,
}

fn affine(x: &Tensor2D, w: &Tensor2D, b: &[f64]) -> Result<Tensor2D> {
    let mut out = x.matmul_t(w)?;
    out.add_row_vector(b)?;
    Ok(out)
}

#[inline]
fn sigmoid(a: f64) -> f64 {
    if a >= 0.0 {
        1.0 / (1.0 + libm::exp(-a))
    } else {
        let e = libm::exp(a);
        e / (1.0 + e)
    }
}

impl FusionHead {
    /// Fresh head for representation widths `d0`, `d1` and `classes` outputs.
    /// The film head modulates in the `d1`-wide space of `z¹`; the gated head
    /// mixes in a `max(d0, d1)`-wide projected space.
    pub fn init(
        variant: FusionVariant,
        d0: usize,
        d1: usize,
        classes: usize,
        rng: &mut SeededRng,
    ) -> Self {
        match variant {
            FusionVariant::Concat => FusionHead::Concat {
                weight: uniform_weight(classes, d0 + d1, rng),
                bias: vec![0.0; classes],
                d0,
            },
            FusionVariant::Sum => FusionHead::Sum {
                w0: uniform_weight(classes, d0, rng),
                b0: vec![0.0; classes],
                w1: uniform_weight(classes, d1, rng),
                b1: vec![0.0; classes],
            },
            FusionVariant::Film => FusionHead::Film {
                scale_w: uniform_weight(d1, d0, rng),
                scale_b: vec![0.0; d1],
                shift_w: uniform_weight(d1, d0, rng),
                shift_b: vec![0.0; d1],
                weight: uniform_weight(classes, d1, rng),
                bias: vec![0.0; classes],
            },
            FusionVariant::Gated => {
                let dh = d0.max(d1);
                FusionHead::Gated {
                    gate_w: uniform_weight(dh, d0 + d1, rng),
                    gate_b: vec![0.0; dh],
                    proj0: uniform_weight(dh, d0, rng),
                    proj1: uniform_weight(dh, d1, rng),
                    weight: uniform_weight(classes, dh, rng),
                    bias: vec![0.0; classes],
                }
            }
        }
    }

    pub fn variant(&self) -> FusionVariant {
        match self {
            FusionHead::Concat { .. } => FusionVariant::Concat,
            FusionHead::Sum { .. } => FusionVariant::Sum,
            FusionHead::Film { .. } => FusionVariant::Film,
            FusionHead::Gated { .. } => FusionVariant::Gated,
        }
    }

    /// Expected `(d0, d1)`.
    pub fn input_dims(&self) -> (usize, usize) {
        match self {
            FusionHead::Concat { weight, d0, .. } => (*d0, weight.cols() - d0),
            FusionHead::Sum { w0, w1, .. } => (w0.cols(), w1.cols()),
            FusionHead::Film { scale_w, .. } => (scale_w.cols(), scale_w.rows()),
            FusionHead::Gated { proj0, proj1, .. } => (proj0.cols(), proj1.cols()),
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            FusionHead::Concat { bias, .. }
            | FusionHead::Film { bias, .. }
            | FusionHead::Gated { bias, .. } => bias.len(),
            FusionHead::Sum { b0, .. } => b0.len(),
        }
    }

    /// Whether the head accepts representations of widths `d0` and `d1`.
    pub fn accepts(&self, d0: usize, d1: usize) -> bool {
        self.input_dims() == (d0, d1)
    }

    fn check_inputs(&self, z0: &Tensor2D, z1: &Tensor2D) -> Result<()> {
        if z0.rows() != z1.rows() {
            return Err(Error::shape("fuse_forward", z0.rows(), z1.rows()));
        }
        if !self.accepts(z0.cols(), z1.cols()) {
            return Err(Error::shape(
                "fuse_forward",
                format!("{:?} head input dims {:?}", self.variant(), self.input_dims()),
                format!("({}, {})", z0.cols(), z1.cols()),
            ));
        }
        Ok(())
    }

    pub fn forward(&self, z0: &Tensor2D, z1: &Tensor2D) -> Result<(FusionOutput, HeadCache)> {
        self.check_inputs(z0, z1)?;
        match self {
            FusionHead::Concat { weight, bias, .. } => {
                let zc = Tensor2D::hconcat(z0, z1)?;
                let logits = affine(&zc, weight, bias)?;
                Ok((
                    FusionOutput {
                        logits,
                        components: None,
                    },
                    HeadCache::Concat { zc },
                ))
            }
            FusionHead::Sum { w0, b0, w1, b1 } => {
                let l0 = affine(z0, w0, b0)?;
                let l1 = affine(z1, w1, b1)?;
                let logits = l0.add(&l1)?;
                Ok((
                    FusionOutput {
                        logits,
                        components: Some((l0, l1)),
                    },
                    HeadCache::Sum {
                        z0: z0.clone(),
                        z1: z1.clone(),
                    },
                ))
            }
            FusionHead::Film {
                scale_w,
                scale_b,
                shift_w,
                shift_b,
                weight,
                bias,
            } => {
                let scale = affine(z0, scale_w, scale_b)?;
                let shift = affine(z0, shift_w, shift_b)?;
                let fused = scale.hadamard(z1)?.add(&shift)?;
                let logits = affine(&fused, weight, bias)?;
                Ok((
                    FusionOutput {
                        logits,
                        components: None,
                    },
                    HeadCache::Film {
                        z0: z0.clone(),
                        z1: z1.clone(),
                        scale,
                        fused,
                    },
                ))
            }
            FusionHead::Gated {
                gate_w,
                gate_b,
                proj0,
                proj1,
                weight,
                bias,
            } => {
                let zc = Tensor2D::hconcat(z0, z1)?;
                let gate = affine(&zc, gate_w, gate_b)?.map(sigmoid);
                let h0 = z0.matmul_t(proj0)?;
                let h1 = z1.matmul_t(proj1)?;
                let mut fused = Tensor2D::zeros(h0.rows(), h0.cols());
                for (((f, &g), &a), &b) in fused
                    .as_mut_slice()
                    .iter_mut()
                    .zip(gate.as_slice())
                    .zip(h0.as_slice())
                    .zip(h1.as_slice())
                {
                    *f = g * a + (1.0 - g) * b;
                }
                let logits = affine(&fused, weight, bias)?;
                Ok((
                    FusionOutput {
                        logits,
                        components: None,
                    },
                    HeadCache::Gated {
                        zc,
                        gate,
                        h0,
                        h1,
                        fused,
                    },
                ))
            }
        }
    }

    pub fn backward(&self, cache: &HeadCache, dlogits: &Tensor2D) -> Result<HeadBackward> {
        if cache.variant() != self.variant() {
            return Err(Error::InvalidState(format!(
                "{} cache passed to {} head",
                cache.variant(),
                self.variant()
            )));
        }
        if dlogits.shape() != (cache.batch_size(), self.num_classes()) {
            return Err(Error::shape(
                "head backward",
                format!("{}x{}", cache.batch_size(), self.num_classes()),
                format!("{}x{}", dlogits.rows(), dlogits.cols()),
            ));
        }
        let g = dlogits;
        match (self, cache) {
            (FusionHead::Concat { weight, d0, .. }, HeadCache::Concat { zc }) => {
                if zc.cols() != weight.cols() {
                    return Err(Error::InvalidState("stale concat cache".into()));
                }
                let dzc = g.matmul(weight)?;
                let (dz0, dz1) = dzc.split_cols(*d0)?;
                Ok(HeadBackward {
                    grads: FusionHead::Concat {
                        weight: g.t_matmul(zc)?,
                        bias: g.column_sums(),
                        d0: *d0,
                    },
                    dz0,
                    dz1,
                })
            }
            (FusionHead::Sum { w0, w1, .. }, HeadCache::Sum { z0, z1 }) => {
                let db = g.column_sums();
                Ok(HeadBackward {
                    grads: FusionHead::Sum {
                        w0: g.t_matmul(z0)?,
                        b0: db.clone(),
                        w1: g.t_matmul(z1)?,
                        b1: db,
                    },
                    dz0: g.matmul(w0)?,
                    dz1: g.matmul(w1)?,
                })
            }
            (
                FusionHead::Film {
                    scale_w,
                    shift_w,
                    weight,
                    ..
                },
                HeadCache::Film {
                    z0,
                    z1,
                    scale,
                    fused,
                },
            ) => {
                let d_fused = g.matmul(weight)?;
                let d_scale = d_fused.hadamard(z1)?;
                let d_shift = &d_fused;
                let dz1 = d_fused.hadamard(scale)?;
                let mut dz0 = d_scale.matmul(scale_w)?;
                dz0.add_assign(&d_shift.matmul(shift_w)?)?;
                Ok(HeadBackward {
                    grads: FusionHead::Film {
                        scale_w: d_scale.t_matmul(z0)?,
                        scale_b: d_scale.column_sums(),
                        shift_w: d_shift.t_matmul(z0)?,
                        shift_b: d_shift.column_sums(),
                        weight: g.t_matmul(fused)?,
                        bias: g.column_sums(),
                    },
                    dz0,
                    dz1,
                })
            }
            (
                FusionHead::Gated {
                    gate_w,
                    proj0,
                    proj1,
                    weight,
                    ..
                },
                HeadCache::Gated {
                    zc,
                    gate,
                    h0,
                    h1,
                    fused,
                },
            ) => {
                let d_fused = g.matmul(weight)?;
                let n = d_fused.rows();
                let dh = d_fused.cols();
                let mut d_pre_gate = Tensor2D::zeros(n, dh);
                let mut d_h0 = Tensor2D::zeros(n, dh);
                let mut d_h1 = Tensor2D::zeros(n, dh);
                for i in 0..n * dh {
                    let df = d_fused.as_slice()[i];
                    let gv = gate.as_slice()[i];
                    let dg = df * (h0.as_slice()[i] - h1.as_slice()[i]);
                    d_pre_gate.as_mut_slice()[i] = dg * gv * (1.0 - gv);
                    d_h0.as_mut_slice()[i] = df * gv;
                    d_h1.as_mut_slice()[i] = df * (1.0 - gv);
                }
                let d0 = proj0.cols();
                let (z0, z1) = zc.split_cols(d0)?;
                let dzc = d_pre_gate.matmul(gate_w)?;
                let (mut dz0, mut dz1) = dzc.split_cols(d0)?;
                dz0.add_assign(&d_h0.matmul(proj0)?)?;
                dz1.add_assign(&d_h1.matmul(proj1)?)?;
                Ok(HeadBackward {
                    grads: FusionHead::Gated {
                        gate_w: d_pre_gate.t_matmul(zc)?,
                        gate_b: d_pre_gate.column_sums(),
                        proj0: d_h0.t_matmul(&z0)?,
                        proj1: d_h1.t_matmul(&z1)?,
                        weight: g.t_matmul(fused)?,
                        bias: g.column_sums(),
                    },
                    dz0,
                    dz1,
                })
            }
            _ => unreachable!("variant checked above"),
        }
    }
}

impl Parameters for FusionHead {
    fn param_slices(&self) -> Vec<&[f64]> {
        match self {
            FusionHead::Concat { weight, bias, .. } => vec![weight.as_slice(), bias],
            FusionHead::Sum { w0, b0, w1, b1 } => {
                vec![w0.as_slice(), b0, w1.as_slice(), b1]
            }
            FusionHead::Film {
                scale_w,
                scale_b,
                shift_w,
                shift_b,
                weight,
                bias,
            } => vec![
                scale_w.as_slice(),
                scale_b,
                shift_w.as_slice(),
                shift_b,
                weight.as_slice(),
                bias,
            ],
            FusionHead::Gated {
                gate_w,
                gate_b,
                proj0,
                proj1,
                weight,
                bias,
            } => vec![
                gate_w.as_slice(),
                gate_b,
                proj0.as_slice(),
                proj1.as_slice(),
                weight.as_slice(),
                bias,
            ],
        }
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        match self {
            FusionHead::Concat { weight, bias, .. } => vec![weight.as_mut_slice(), bias],
            FusionHead::Sum { w0, b0, w1, b1 } => {
                vec![w0.as_mut_slice(), b0, w1.as_mut_slice(), b1]
            }
            FusionHead::Film {
                scale_w,
                scale_b,
                shift_w,
                shift_b,
                weight,
                bias,
            } => vec![
                scale_w.as_mut_slice(),
                scale_b,
                shift_w.as_mut_slice(),
                shift_b,
                weight.as_mut_slice(),
                bias,
            ],
            FusionHead::Gated {
                gate_w,
                gate_b,
                proj0,
                proj1,
                weight,
                bias,
            } => vec![
                gate_w.as_mut_slice(),
                gate_b,
                proj0.as_mut_slice(),
                proj1.as_mut_slice(),
                weight.as_mut_slice(),
                bias,
            ],
        }
    }
}
