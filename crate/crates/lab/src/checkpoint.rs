//! Model checkpoints: a JSON header naming every tensor and its shape,
//! followed by the raw parameters.
//!
//! ```text
//! b"PMRCKPT\0"  u32 version  u32 header_len  header (JSON)  f64 LE × num_params
//! ```
//!
//! Tensors appear in parameter-traversal order, so loading is a shape check
//! plus one `set_flat`, and the round trip is bit-exact.

use std::path::Path;

use pmr_core::model::{
    Dense, EncoderParams, FusionHead, FusionVariant, ModelSpec, MultimodalModel, Parameters,
    UnimodalModel,
};
use pmr_core::train::TrainedModel;
use pmr_core::SeededRng;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::fsutil::write_atomic;

const MAGIC: &[u8; 8] = b"PMRCKPT\0";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecHeader {
    pub dim0: usize,
    pub dim1: usize,
    pub hidden_width: usize,
    pub hidden_layers: usize,
    pub rep_dim: usize,
    pub num_classes: usize,
    pub fusion: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Header {
    /// `multimodal` or `unimodal`.
    pub kind: String,
    /// Input modality of a unimodal model.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub modality: Option<usize>,
    pub spec: SpecHeader,
    pub tensors: Vec<TensorEntry>,
}

fn entry(name: String, shape: Vec<usize>) -> TensorEntry {
    TensorEntry { name, shape }
}

fn dense_entries(prefix: &str, d: &Dense, out: &mut Vec<TensorEntry>) {
    out.push(entry(format!("{prefix}.weight"), vec![d.weight.rows(), d.weight.cols()]));
    out.push(entry(format!("{prefix}.bias"), vec![d.bias.len()]));
}

fn encoder_entries(prefix: &str, e: &EncoderParams, out: &mut Vec<TensorEntry>) {
    for (i, layer) in e.layers.iter().enumerate() {
        dense_entries(&format!("{prefix}.layers.{i}"), layer, out);
    }
}

fn head_entries(h: &FusionHead, out: &mut Vec<TensorEntry>) {
    let mat = |t: &pmr_core::Tensor2D| vec![t.rows(), t.cols()];
    let named: Vec<(&str, Vec<usize>)> = match h {
        FusionHead::Concat { weight, bias, .. } => {
            vec![("weight", mat(weight)), ("bias", vec![bias.len()])]
        }
        FusionHead::Sum { w0, b0, w1, b1 } => vec![
            ("w0", mat(w0)),
            ("b0", vec![b0.len()]),
            ("w1", mat(w1)),
            ("b1", vec![b1.len()]),
        ],
        FusionHead::Film {
            scale_w,
            scale_b,
            shift_w,
            shift_b,
            weight,
            bias,
        } => vec![
            ("scale_w", mat(scale_w)),
            ("scale_b", vec![scale_b.len()]),
            ("shift_w", mat(shift_w)),
            ("shift_b", vec![shift_b.len()]),
            ("weight", mat(weight)),
            ("bias", vec![bias.len()]),
        ],
        FusionHead::Gated {
            gate_w,
            gate_b,
            proj0,
            proj1,
            weight,
            bias,
        } => vec![
            ("gate_w", mat(gate_w)),
            ("gate_b", vec![gate_b.len()]),
            ("proj0", mat(proj0)),
            ("proj1", mat(proj1)),
            ("weight", mat(weight)),
            ("bias", vec![bias.len()]),
        ],
    };
    out.extend(named.into_iter().map(|(n, s)| entry(format!("head.{}.{n}", h.variant()), s)));
}

fn spec_header(spec: &ModelSpec) -> SpecHeader {
    SpecHeader {
        dim0: spec.dim0,
        dim1: spec.dim1,
        hidden_width: spec.hidden_width,
        hidden_layers: spec.hidden_layers,
        rep_dim: spec.rep_dim,
        num_classes: spec.num_classes,
        fusion: spec.fusion.as_str().into(),
    }
}

fn tensor_entries(model: &TrainedModel) -> Vec<TensorEntry> {
    let mut out = Vec::new();
    match model {
        TrainedModel::Multimodal(m) => {
            encoder_entries("encoder0", &m.encoder0, &mut out);
            encoder_entries("encoder1", &m.encoder1, &mut out);
            head_entries(&m.head, &mut out);
        }
        TrainedModel::Unimodal(u) => {
            encoder_entries("encoder", &u.encoder, &mut out);
            dense_entries("classifier", &u.classifier, &mut out);
        }
    }
    out
}

fn flat(model: &TrainedModel) -> Vec<f64> {
    match model {
        TrainedModel::Multimodal(m) => m.to_flat(),
        TrainedModel::Unimodal(u) => u.to_flat(),
    }
}

pub fn header(model: &TrainedModel, spec: &ModelSpec) -> Header {
    let (kind, modality) = match model {
        TrainedModel::Multimodal(_) => ("multimodal", None),
        TrainedModel::Unimodal(u) => ("unimodal", Some(u.modality)),
    };
    Header {
        kind: kind.into(),
        modality,
        spec: spec_header(spec),
        tensors: tensor_entries(model),
    }
}

pub fn encode(model: &TrainedModel, spec: &ModelSpec) -> Vec<u8> {
    let header = serde_json::to_vec(&header(model, spec)).expect("header serializes");
    let params = flat(model);
    let mut out = Vec::with_capacity(16 + header.len() + 8 * params.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for v in params {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(buf: &[u8]) -> std::result::Result<(TrainedModel, ModelSpec), String> {
    if buf.len() < 16 || &buf[..8] != MAGIC {
        return Err("not a checkpoint (bad magic)".into());
    }
    let version = u32::from_le_bytes(buf[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(format!("unsupported checkpoint version {version}"));
    }
    let hlen = u32::from_le_bytes(buf[12..16].try_into().unwrap()) as usize;
    let body_start = 16usize.checked_add(hlen).filter(|&e| e <= buf.len()).ok_or("truncated header")?;
    let header: Header =
        serde_json::from_slice(&buf[16..body_start]).map_err(|e| format!("header: {e}"))?;
    let s = &header.spec;
    let spec = ModelSpec {
        dim0: s.dim0,
        dim1: s.dim1,
        hidden_width: s.hidden_width,
        hidden_layers: s.hidden_layers,
        rep_dim: s.rep_dim,
        num_classes: s.num_classes,
        fusion: s.fusion.parse::<FusionVariant>().map_err(|e| e.to_string())?,
    };
    // a freshly initialized model supplies the layout to fill
    let mut rng = SeededRng::new(0);
    let mut model = match (header.kind.as_str(), header.modality) {
        ("multimodal", None) => {
            TrainedModel::Multimodal(MultimodalModel::init(&spec, &mut rng).map_err(|e| e.to_string())?)
        }
        ("unimodal", Some(m)) => {
            TrainedModel::Unimodal(UnimodalModel::init(&spec, m, &mut rng).map_err(|e| e.to_string())?)
        }
        (kind, _) => return Err(format!("unknown checkpoint kind `{kind}`")),
    };
    if tensor_entries(&model) != header.tensors {
        return Err("tensor list does not match the declared architecture".into());
    }
    let body = &buf[body_start..];
    if body.len() % 8 != 0 {
        return Err("parameter block is not a whole number of f64".into());
    }
    let params: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let set = match &mut model {
        TrainedModel::Multimodal(m) => m.set_flat(&params),
        TrainedModel::Unimodal(u) => u.set_flat(&params),
    };
    set.map_err(|e| e.to_string())?;
    Ok((model, spec))
}

pub fn save(path: &Path, model: &TrainedModel, spec: &ModelSpec) -> Result<()> {
    write_atomic(path, &encode(model, spec))
}

pub fn load(path: &Path) -> Result<(TrainedModel, ModelSpec)> {
    let buf = std::fs::read(path).map_err(LabError::io(path))?;
    decode(&buf).map_err(|m| LabError::format(path, m))
}
