//! Binary checkpoint layout (all integers and floats little-endian):
//!
//! ```text
//! magic      8 bytes   "FDIAMLP\0"
//! version    u32       1
//! tensors    u32       count
//! per tensor u32 ndim, then ndim x u64 dims   (shape table)
//! payload    f64 x Σ sizes, tensors in canonical order
//! ```
//!
//! Tensor order is `dense{l}.weight, dense{l}.bias, norm{l}.gamma,
//! norm{l}.beta, norm{l}.running_mean, norm{l}.running_var` per hidden
//! layer `l`, then the output `dense` pair. A JSON manifest next to the
//! binary names each tensor and carries the feature scaler.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::Scaler;
use crate::error::{Error, Result};

use super::model::{BatchNorm, Dense, ModelParams};

pub const MAGIC: &[u8; 8] = b"FDIAMLP\0";
pub const VERSION: u32 = 1;

impl ModelParams {
    /// Canonical byte encoding; equal parameters give equal bytes.
    pub fn to_bytes(&self) -> Vec<u8> {
        let layout = self.layout();
        let mut out = Vec::with_capacity(16 + 8 * self.len() + 32 * layout.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(layout.len() as u32).to_le_bytes());
        for (_, _, shape) in &layout {
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &d in shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
        }
        for s in self.slices() {
            for x in s {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Schema("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Schema(format!("unsupported checkpoint version {version}")));
        }
        let count = r.u32()? as usize;
        let mut shapes = Vec::with_capacity(count);
        for _ in 0..count {
            let nd = r.u32()? as usize;
            if nd == 0 || nd > 2 {
                return Err(Error::Schema(format!("tensor rank {nd} not supported")));
            }
            shapes.push((0..nd).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?);
        }
        // hidden layers contribute 6 tensors, the output layer 2
        if count < 2 || !(count - 2).is_multiple_of(6) {
            return Err(Error::Schema(format!("unexpected tensor count {count}")));
        }
        let hidden = (count - 2) / 6;
        let mut dense = Vec::new();
        let mut norms = Vec::new();
        let mut shape_iter = shapes.iter();
        for l in 0..=hidden {
            let ws = shape_iter.next().expect("counted");
            if ws.len() != 2 {
                return Err(Error::Schema(format!("dense{l}.weight must be a matrix")));
            }
            let weights = Array2::from_shape_vec((ws[0], ws[1]), r.floats(ws[0] * ws[1])?)
                .map_err(|e| Error::Schema(e.to_string()))?;
            let bias = vec_tensor(&mut r, shape_iter.next().expect("counted"), ws[1])?;
            dense.push(Dense { weights, bias });
            if l < hidden {
                let h = ws[1];
                let mut t = || vec_tensor(&mut r, shape_iter.next().expect("counted"), h);
                norms.push(BatchNorm {
                    gamma: t()?,
                    beta: t()?,
                    running_mean: t()?,
                    running_var: t()?,
                });
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Schema(format!("{} trailing bytes after payload", bytes.len() - r.pos)));
        }
        for w in dense.windows(2) {
            if w[0].weights.ncols() != w[1].weights.nrows() {
                return Err(Error::Schema("layer widths do not chain".into()));
            }
        }
        Ok(ModelParams { dense, norms })
    }

    /// Hex SHA-256 of [`ModelParams::to_bytes`].
    pub fn digest(&self) -> String {
        hex(&Sha256::digest(self.to_bytes()))
    }
}

fn vec_tensor(r: &mut Reader, shape: &[usize], expected: usize) -> Result<Array1<f64>> {
    if shape != [expected] {
        return Err(Error::Schema(format!("expected vector of length {expected}, found shape {shape:?}")));
    }
    Ok(Array1::from_vec(r.floats(expected)?))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| Error::Schema("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn floats(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Schema("tensor too large".into()))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalerEntry {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub input: usize,
    pub hidden: Vec<usize>,
    pub output: usize,
    pub tensors: Vec<TensorEntry>,
    pub payload_sha256: String,
    pub scaler: Option<ScalerEntry>,
    pub rounds: usize,
}

pub fn manifest_path(bin: &Path) -> PathBuf {
    bin.with_extension("json")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub scaler: Option<Scaler>,
    pub rounds: usize,
}

/// Writes `path` (binary) and the manifest at `path` with a `.json` extension.
pub fn save_checkpoint(path: impl AsRef<Path>, params: &ModelParams, scaler: Option<&Scaler>, rounds: usize) -> Result<()> {
    let path = path.as_ref();
    let bytes = params.to_bytes();
    let arch = params.architecture();
    let manifest = Manifest {
        format: "fedfdi-mlp".into(),
        version: VERSION,
        input: arch.input,
        hidden: arch.hidden,
        output: arch.output,
        tensors: params
            .layout()
            .into_iter()
            .map(|(name, _, shape)| TensorEntry { name, shape })
            .collect(),
        payload_sha256: hex(&Sha256::digest(&bytes)),
        scaler: scaler.map(|s| ScalerEntry {
            mean: s.mean.clone(),
            std: s.std.clone(),
        }),
        rounds,
    };
    fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    let mp = manifest_path(path);
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Schema(e.to_string()))?;
    fs::write(&mp, json + "\n").map_err(|e| Error::io(&mp, e))
}

/// Reads a checkpoint and cross-checks it against its manifest.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mp = manifest_path(path);
    let text = fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Schema(format!("{}: {e}", mp.display())))?;
    if manifest.payload_sha256 != hex(&Sha256::digest(&bytes)) {
        return Err(Error::Schema("checkpoint/manifest mismatch: payload digest differs".into()));
    }
    let params = ModelParams::from_bytes(&bytes)?;
    let arch = params.architecture();
    let names: Vec<TensorEntry> = params
        .layout()
        .into_iter()
        .map(|(name, _, shape)| TensorEntry { name, shape })
        .collect();
    if arch.input != manifest.input || arch.hidden != manifest.hidden || arch.output != manifest.output || names != manifest.tensors {
        return Err(Error::Schema("checkpoint/manifest mismatch: architecture differs".into()));
    }
    let scaler = manifest.scaler.map(|s| Scaler { mean: s.mean, std: s.std });
    if let Some(s) = &scaler {
        if s.mean.len() != arch.input || s.std.len() != arch.input {
            return Err(Error::Schema("checkpoint/manifest mismatch: scaler width".into()));
        }
    }
    Ok(Checkpoint {
        params,
        scaler,
        rounds: manifest.rounds,
    })
}
