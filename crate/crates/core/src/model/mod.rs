//! Two-branch multimodal classifier: one MLP encoder per modality, a fusion
//! head, exact forward and backward passes.

mod encoder;
mod fusion;
mod params;

pub use encoder::{Activation, Dense, EncoderCache, EncoderParams};
pub use fusion::{FusionHead, FusionOutput, FusionVariant, HeadBackward, HeadCache};
pub use params::Parameters;

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::numerics::{check_labels, softmax_unchecked};
use crate::rng::SeededRng;
use crate::tensor::Tensor2D;

/// Architecture knobs shared by the multimodal and unimodal models.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub dim0: usize,
    pub dim1: usize,
    pub hidden_width: usize,
    pub hidden_layers: usize,
    pub rep_dim: usize,
    pub num_classes: usize,
    pub fusion: FusionVariant,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            dim0: 20,
            dim1: 20,
            hidden_width: 32,
            hidden_layers: 1,
            rep_dim: 16,
            num_classes: 6,
            fusion: FusionVariant::Sum,
        }
    }
}

impl ModelSpec {
    pub fn encoder_dims(&self, input: usize) -> Vec<usize> {
        let mut dims = Vec::with_capacity(self.hidden_layers + 2);
        dims.push(input);
        dims.extend(core::iter::repeat_n(self.hidden_width, self.hidden_layers));
        dims.push(self.rep_dim);
        dims
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultimodalModel {
    pub encoder0: EncoderParams,
    pub encoder1: EncoderParams,
    pub head: FusionHead,
    num_classes: usize,
    // bumped on every mutable parameter access, so caches can detect staleness
    version: u64,
}

/// Same shape tree as [`MultimodalModel`], holding `∂L/∂θ`.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads {
    pub encoder0: EncoderParams,
    pub encoder1: EncoderParams,
    pub head: FusionHead,
}

#[derive(Clone, Debug)]
pub struct ForwardCache {
    version: u64,
    enc0: EncoderCache,
    enc1: EncoderCache,
    head: HeadCache,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub z0: Tensor2D,
    pub z1: Tensor2D,
    pub logits: Tensor2D,
    pub components: Option<(Tensor2D, Tensor2D)>,
}

#[derive(Clone, Debug)]
pub struct ModelBackward {
    pub grads: ParamGrads,
    /// `∂L/∂z⁰` arriving from the head.
    pub dz0: Tensor2D,
    /// `∂L/∂z¹` arriving from the head.
    pub dz1: Tensor2D,
}

/// Per-sample ground-truth probabilities of the sum head's two components and
/// of their fusion.
#[derive(Clone, Debug, PartialEq)]
pub struct UnimodalScores {
    pub s0: Vec<f64>,
    pub s1: Vec<f64>,
    pub sfu: Vec<f64>,
}

impl MultimodalModel {
    pub fn new(
        encoder0: EncoderParams,
        encoder1: EncoderParams,
        head: FusionHead,
        num_classes: usize,
    ) -> Result<Self> {
        if !head.accepts(encoder0.output_dim(), encoder1.output_dim()) {
            return Err(Error::shape(
                "MultimodalModel::new",
                format!("{} head inputs {:?}", head.variant(), head.input_dims()),
                format!("({}, {})", encoder0.output_dim(), encoder1.output_dim()),
            ));
        }
        if head.num_classes() != num_classes || num_classes < 2 {
            return Err(Error::invalid(format!(
                "head has {} outputs, model declares {num_classes} classes",
                head.num_classes()
            )));
        }
        Ok(Self {
            encoder0,
            encoder1,
            head,
            num_classes,
            version: 0,
        })
    }

    /// Encoders first, then head, all from `rng` in a fixed order.
    pub fn init(spec: &ModelSpec, rng: &mut SeededRng) -> Result<Self> {
        let encoder0 = EncoderParams::init(&spec.encoder_dims(spec.dim0), rng)?;
        let encoder1 = EncoderParams::init(&spec.encoder_dims(spec.dim1), rng)?;
        let head = FusionHead::init(
            spec.fusion,
            spec.rep_dim,
            spec.rep_dim,
            spec.num_classes,
            rng,
        );
        Self::new(encoder0, encoder1, head, spec.num_classes)
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn zero_grads(&self) -> ParamGrads {
        let mut g = ParamGrads {
            encoder0: self.encoder0.clone(),
            encoder1: self.encoder1.clone(),
            head: self.head.clone(),
        };
        g.fill_zero();
        g
    }

    pub fn forward(&self, x0: &Tensor2D, x1: &Tensor2D) -> Result<(ForwardOutput, ForwardCache)> {
        if x0.rows() != x1.rows() {
            return Err(Error::shape("forward", x0.rows(), x1.rows()));
        }
        let (z0, enc0) = self.encoder0.encode(x0)?;
        let (z1, enc1) = self.encoder1.encode(x1)?;
        let (out, head) = self.head.forward(&z0, &z1)?;
        Ok((
            ForwardOutput {
                z0,
                z1,
                logits: out.logits,
                components: out.components,
            },
            ForwardCache {
                version: self.version,
                enc0,
                enc1,
                head,
            },
        ))
    }

    /// Logits only.
    pub fn predict_logits(&self, x0: &Tensor2D, x1: &Tensor2D) -> Result<Tensor2D> {
        let z0 = self.encoder0.forward(x0)?;
        let z1 = self.encoder1.forward(x1)?;
        Ok(self.head.forward(&z0, &z1)?.0.logits)
    }

    /// Reverse-mode gradients for every parameter and both representations.
    pub fn backward(&self, cache: &ForwardCache, dlogits: &Tensor2D) -> Result<ModelBackward> {
        self.backward_with(cache, dlogits, None, None)
    }

    /// Like [`Self::backward`], with extra `∂L/∂z` terms injected straight
    /// into each encoder. Objectives defined on representations alone (the
    /// prototype losses) enter the model here and never touch the head.
    pub fn backward_with(
        &self,
        cache: &ForwardCache,
        dlogits: &Tensor2D,
        extra_dz0: Option<&Tensor2D>,
        extra_dz1: Option<&Tensor2D>,
    ) -> Result<ModelBackward> {
        if cache.version != self.version {
            return Err(Error::InvalidState(format!(
                "forward cache from model version {}, model is at {}",
                cache.version, self.version
            )));
        }
        let head = self.head.backward(&cache.head, dlogits)?;
        let enc0 = match extra_dz0 {
            Some(extra) => self.encoder0.backward(&cache.enc0, &head.dz0.add(extra)?)?,
            None => self.encoder0.backward(&cache.enc0, &head.dz0)?,
        };
        let enc1 = match extra_dz1 {
            Some(extra) => self.encoder1.backward(&cache.enc1, &head.dz1.add(extra)?)?,
            None => self.encoder1.backward(&cache.enc1, &head.dz1)?,
        };
        Ok(ModelBackward {
            grads: ParamGrads {
                encoder0: enc0,
                encoder1: enc1,
                head: head.grads,
            },
            dz0: head.dz0,
            dz1: head.dz1,
        })
    }

    /// Ground-truth softmax scores of each sum-head component and of the
    /// fused logits.
    pub fn unimodal_scores(
        &self,
        x0: &Tensor2D,
        x1: &Tensor2D,
        labels: &[usize],
    ) -> Result<UnimodalScores> {
        if self.head.variant() != FusionVariant::Sum {
            return Err(Error::UnsupportedVariant {
                op: "unimodal_scores",
                variant: self.head.variant().as_str(),
            });
        }
        let (out, _) = self.forward(x0, x1)?;
        scores_from_output(&out, labels)
    }
}

/// Computes [`UnimodalScores`] from a sum-head forward output.
pub fn scores_from_output(out: &ForwardOutput, labels: &[usize]) -> Result<UnimodalScores> {
    let Some((l0, l1)) = &out.components else {
        return Err(Error::UnsupportedVariant {
            op: "unimodal_scores",
            variant: "non-sum",
        });
    };
    check_labels(labels, out.logits.rows(), out.logits.cols())?;
    let pick = |t: &Tensor2D| -> Vec<f64> {
        t.row_iter()
            .zip(labels)
            .map(|(row, &y)| softmax_unchecked(row)[y])
            .collect()
    };
    Ok(UnimodalScores {
        s0: pick(l0),
        s1: pick(l1),
        sfu: pick(&out.logits),
    })
}

impl Parameters for MultimodalModel {
    fn param_slices(&self) -> Vec<&[f64]> {
        let mut v = self.encoder0.param_slices();
        v.extend(self.encoder1.param_slices());
        v.extend(self.head.param_slices());
        v
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.version += 1;
        let mut v = self.encoder0.param_slices_mut();
        v.extend(self.encoder1.param_slices_mut());
        v.extend(self.head.param_slices_mut());
        v
    }
}

impl Parameters for ParamGrads {
    fn param_slices(&self) -> Vec<&[f64]> {
        let mut v = self.encoder0.param_slices();
        v.extend(self.encoder1.param_slices());
        v.extend(self.head.param_slices());
        v
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = self.encoder0.param_slices_mut();
        v.extend(self.encoder1.param_slices_mut());
        v.extend(self.head.param_slices_mut());
        v
    }
}

/// Single encoder plus a linear classifier, for the uni-modal baselines.
#[derive(Clone, Debug, PartialEq)]
pub struct UnimodalModel {
    pub modality: usize,
    pub encoder: EncoderParams,
    pub classifier: Dense,
}

#[derive(Clone, Debug)]
pub struct UnimodalCache {
    enc: EncoderCache,
    z: Tensor2D,
}

impl UnimodalModel {
    pub fn init(spec: &ModelSpec, modality: usize, rng: &mut SeededRng) -> Result<Self> {
        let input = match modality {
            0 => spec.dim0,
            1 => spec.dim1,
            m => return Err(Error::invalid(format!("modality {m} out of range"))),
        };
        let encoder = EncoderParams::init(&spec.encoder_dims(input), rng)?;
        let classifier = Dense::init(spec.rep_dim, spec.num_classes, Activation::Identity, rng);
        Ok(Self {
            modality,
            encoder,
            classifier,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.classifier.output_dim()
    }

    pub fn forward(&self, x: &Tensor2D) -> Result<(Tensor2D, Tensor2D, UnimodalCache)> {
        let (z, enc) = self.encoder.encode(x)?;
        let logits = self.classifier.affine(&z)?;
        Ok((z.clone(), logits, UnimodalCache { enc, z }))
    }

    pub fn predict_logits(&self, x: &Tensor2D) -> Result<Tensor2D> {
        self.classifier.affine(&self.encoder.forward(x)?)
    }

    /// Gradients in a `UnimodalModel`-shaped container.
    pub fn backward(&self, cache: &UnimodalCache, dlogits: &Tensor2D) -> Result<UnimodalModel> {
        if dlogits.shape() != (cache.z.rows(), self.num_classes()) {
            return Err(Error::shape(
                "unimodal backward",
                format!("{}x{}", cache.z.rows(), self.num_classes()),
                format!("{}x{}", dlogits.rows(), dlogits.cols()),
            ));
        }
        let classifier = Dense {
            weight: dlogits.t_matmul(&cache.z)?,
            bias: dlogits.column_sums(),
            activation: Activation::Identity,
        };
        let dz = dlogits.matmul(&self.classifier.weight)?;
        let encoder = self.encoder.backward(&cache.enc, &dz)?;
        Ok(UnimodalModel {
            modality: self.modality,
            encoder,
            classifier,
        })
    }
}

impl Parameters for UnimodalModel {
    fn param_slices(&self) -> Vec<&[f64]> {
        let mut v = self.encoder.param_slices();
        v.extend(self.classifier.param_slices());
        v
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = self.encoder.param_slices_mut();
        v.extend(self.classifier.param_slices_mut());
        v
    }
}
