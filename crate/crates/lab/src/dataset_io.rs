//! Binary dataset files and their sidecar manifests.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"PMRDATA\0"  u32 version  u32 echo_len  echo (UTF-8 `seed`/`data.*` lines)
//! split × 2 (train, test):
//!   u32 n  u32 d0  u32 d1  u32 num_classes
//!   n·d0 f64   n·d1 f64   n u32 labels
//! ```
//!
//! The sidecar `<file>.manifest.json` records the spec and the SHA-256 of
//! the data file.

use std::path::{Path, PathBuf};

use pmr_core::data::{DatasetSpec, MultimodalDataset, Split};
use pmr_core::Tensor2D;
use serde::{Deserialize, Serialize};

use crate::config::{data_echo, parse_data_echo};
use crate::error::{LabError, Result};
use crate::fsutil::{sha256_hex, write_atomic};

const MAGIC: &[u8; 8] = b"PMRDATA\0";
const VERSION: u32 = 1;
pub const FORMAT_TAG: &str = "pmr-dataset-v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub seed: u64,
    pub spec: String,
    pub sha256: String,
    pub bytes: u64,
    pub train_samples: usize,
    pub test_samples: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoadedDataset {
    pub spec: DatasetSpec,
    pub train: MultimodalDataset,
    pub test: MultimodalDataset,
    pub sha256: String,
}

pub fn manifest_path(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".manifest.json");
    PathBuf::from(name)
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    let v = u32::try_from(v).expect("dataset dimension exceeds u32");
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_split(out: &mut Vec<u8>, ds: &MultimodalDataset) {
    put_u32(out, ds.len());
    put_u32(out, ds.x0.cols());
    put_u32(out, ds.x1.cols());
    put_u32(out, ds.num_classes);
    for v in ds.x0.as_slice().iter().chain(ds.x1.as_slice()) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &y in &ds.labels {
        put_u32(out, y);
    }
}

pub fn encode(spec: &DatasetSpec, train: &MultimodalDataset, test: &MultimodalDataset) -> Vec<u8> {
    let echo = data_echo(spec);
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_u32(&mut out, echo.len());
    out.extend_from_slice(echo.as_bytes());
    put_split(&mut out, train);
    put_split(&mut out, test);
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn bytes(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| format!("truncated at byte {}", self.pos))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<usize, String> {
        let b = self.bytes(4)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()) as usize)
    }

    fn f64s(&mut self, n: usize) -> std::result::Result<Vec<f64>, String> {
        let len = n.checked_mul(8).ok_or("size overflow")?;
        Ok(self
            .bytes(len)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn split(&mut self, split: Split) -> std::result::Result<MultimodalDataset, String> {
        let (n, d0, d1, m) = (self.u32()?, self.u32()?, self.u32()?, self.u32()?);
        let x0 = Tensor2D::new(n, d0, self.f64s(n * d0)?).map_err(|e| e.to_string())?;
        let x1 = Tensor2D::new(n, d1, self.f64s(n * d1)?).map_err(|e| e.to_string())?;
        let labels = (0..n).map(|_| self.u32()).collect::<std::result::Result<_, _>>()?;
        MultimodalDataset::new(x0, x1, labels, m, split).map_err(|e| format!("{} split: {e}", split.as_str()))
    }
}

pub fn decode(buf: &[u8]) -> std::result::Result<(DatasetSpec, MultimodalDataset, MultimodalDataset), String> {
    let mut r = Reader { buf, pos: 0 };
    if r.bytes(8)? != MAGIC {
        return Err("not a dataset file (bad magic)".into());
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(format!("unsupported dataset format version {version}"));
    }
    let len = r.u32()?;
    let echo = std::str::from_utf8(r.bytes(len)?).map_err(|_| "spec echo is not UTF-8")?;
    let spec = parse_data_echo(echo).map_err(|e| format!("spec echo: {e}"))?;
    let train = r.split(Split::Train)?;
    let test = r.split(Split::Test)?;
    if r.pos != buf.len() {
        return Err(format!("{} trailing bytes", buf.len() - r.pos));
    }
    Ok((spec, train, test))
}

/// Writes the data file and its sidecar manifest; returns the manifest.
pub fn write_dataset(
    path: &Path,
    spec: &DatasetSpec,
    train: &MultimodalDataset,
    test: &MultimodalDataset,
) -> Result<DatasetManifest> {
    let bytes = encode(spec, train, test);
    let manifest = DatasetManifest {
        format: FORMAT_TAG.into(),
        seed: spec.seed,
        spec: data_echo(spec),
        sha256: sha256_hex(&bytes),
        bytes: bytes.len() as u64,
        train_samples: train.len(),
        test_samples: test.len(),
    };
    write_atomic(path, &bytes)?;
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_atomic(&manifest_path(path), format!("{json}\n").as_bytes())?;
    Ok(manifest)
}

/// Loads a dataset, refusing it unless its sidecar checksum matches.
pub fn read_dataset(path: &Path) -> Result<LoadedDataset> {
    let bytes = std::fs::read(path).map_err(LabError::io(path))?;
    let mpath = manifest_path(path);
    let text = std::fs::read_to_string(&mpath)
        .map_err(|e| LabError::Integrity(format!("{}: {e}", mpath.display())))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)
        .map_err(|e| LabError::Integrity(format!("{}: {e}", mpath.display())))?;
    let sha256 = sha256_hex(&bytes);
    if manifest.sha256 != sha256 {
        return Err(LabError::Integrity(format!(
            "checksum mismatch for {}: manifest {} but file {}",
            path.display(),
            manifest.sha256,
            sha256
        )));
    }
    let (spec, train, test) = decode(&bytes).map_err(|m| LabError::format(path, m))?;
    Ok(LoadedDataset {
        spec,
        train,
        test,
        sha256,
    })
}
