//! STGT binary tensors: `b"STGT"`, a version byte, a little-endian `u32`
//! header length, the JSON header, then the row-major `f32` LE payload.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"STGT";
pub const VERSION: u8 = 1;
const DTYPE: &str = "float32";

/// How a BPS tensor encodes base-point relations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BpsVariant {
    /// Nearest-point distances.
    Distance,
    /// Offset vectors to the nearest point.
    Delta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    shape: Vec<usize>,
    role: String,
    dtype: String,
    #[serde(default)]
    bps_variant: Option<BpsVariant>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub role: String,
    pub bps_variant: Option<BpsVariant>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, role: impl Into<String>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Tensor(format!("shape {shape:?} needs {expected} values, got {}", data.len())));
        }
        Ok(Self { shape, role: role.into(), bps_variant: None, data })
    }

    /// Narrows `f64` values to the stored `f32`.
    pub fn from_f64(shape: Vec<usize>, role: impl Into<String>, data: &[f64]) -> Result<Self> {
        Self::new(shape, role, data.iter().map(|&v| v as f32).collect())
    }

    pub fn with_bps_variant(mut self, v: BpsVariant) -> Self {
        self.bps_variant = Some(v);
        self
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| f64::from(v)).collect()
    }

    /// Rows of a rank-2 tensor as `f64` vectors.
    pub fn rows(&self) -> Result<Vec<Vec<f64>>> {
        match self.shape.as_slice() {
            [_, cols] => {
                Ok(self.data.chunks(*cols.max(&1)).map(|r| r.iter().map(|&v| f64::from(v)).collect()).collect())
            }
            _ => Err(Error::Tensor(format!("expected a rank-2 tensor, got shape {:?}", self.shape))),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&Header {
            shape: self.shape.clone(),
            role: self.role.clone(),
            dtype: DTYPE.into(),
            bps_variant: self.bps_variant,
        })
        .expect("header serialises");
        let mut out = Vec::with_capacity(9 + header.len() + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 9 || &bytes[..4] != MAGIC {
            return Err(Error::Tensor("missing STGT magic".into()));
        }
        if bytes[4] != VERSION {
            return Err(Error::Tensor(format!("unsupported version {}", bytes[4])));
        }
        let hlen = u32::from_le_bytes(bytes[5..9].try_into().expect("4 bytes")) as usize;
        let body = &bytes[9..];
        if body.len() < hlen {
            return Err(Error::Tensor("truncated header".into()));
        }
        let header: Header =
            serde_json::from_slice(&body[..hlen]).map_err(|e| Error::Tensor(format!("bad header: {e}")))?;
        if header.dtype != DTYPE {
            return Err(Error::Tensor(format!("unsupported dtype {:?}", header.dtype)));
        }
        let payload = &body[hlen..];
        let count: usize = header.shape.iter().product();
        if payload.len() != 4 * count {
            return Err(Error::Tensor(format!(
                "payload has {} bytes, shape {:?} needs {}",
                payload.len(),
                header.shape,
                4 * count
            )));
        }
        let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        Ok(Self { shape: header.shape, role: header.role, bps_variant: header.bps_variant, data })
    }
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Tensor::from_bytes(&bytes).map_err(|e| match e {
        Error::Tensor(msg) => Error::Tensor(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    super::write_bytes(path, &t.to_bytes())
}
