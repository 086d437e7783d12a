use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"G4DT";

/// Dense float32 array stored as `G4DT`:
///
/// ```text
/// offset 0        4 bytes   ASCII "G4DT"
/// offset 4        u32 LE    ndim
/// offset 8        u32 LE    dims[0], ..., dims[ndim-1]
/// offset 8+4*ndim f32 LE    prod(dims) values, row-major (last axis fastest)
/// ```
///
/// No padding, no trailing bytes. A zero-dimensional tensor holds one value.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n = element_count(&dims).ok_or_else(|| Error::invalid("tensor dims", format!("{dims:?} overflow")))?;
        if data.len() != n {
            return Err(Error::shape("tensor payload", n, data.len()));
        }
        Ok(Self { dims, data })
    }

    /// Narrows each value to `f32`.
    pub fn from_f64(dims: Vec<usize>, data: &[f64]) -> Result<Self> {
        Self::new(dims, data.iter().map(|&v| v as f32).collect())
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| f64::from(v)).collect()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 4 * self.dims.len() + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.dims.len() as u32).to_le_bytes());
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// `source` names the input in diagnostics.
    pub fn decode(bytes: &[u8], source: &str) -> Result<Self> {
        let bad = |at: usize, reason: String| Error::format("G4DT tensor", format!("{source} byte {at}"), reason);
        if bytes.len() < 8 {
            return Err(bad(0, format!("{} bytes is shorter than the 8-byte header", bytes.len())));
        }
        if &bytes[..4] != MAGIC {
            return Err(bad(0, format!("magic {:?} is not \"G4DT\"", String::from_utf8_lossy(&bytes[..4]))));
        }
        let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
        let ndim = word(4);
        let header = 8usize
            .checked_add(ndim.checked_mul(4).ok_or_else(|| bad(4, format!("ndim {ndim} is too large")))?)
            .ok_or_else(|| bad(4, format!("ndim {ndim} is too large")))?;
        if bytes.len() < header {
            return Err(bad(8, format!("header declares {ndim} dims but the file ends at byte {}", bytes.len())));
        }
        let dims: Vec<usize> = (0..ndim).map(|i| word(8 + 4 * i)).collect();
        let n = element_count(&dims).ok_or_else(|| bad(8, format!("dims {dims:?} overflow")))?;
        let payload = bytes.len() - header;
        if n.checked_mul(4) != Some(payload) {
            return Err(bad(header, format!("dims {dims:?} need {n} values but the payload has {payload} bytes")));
        }
        let data = bytes[header..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self { dims, data })
    }
}

fn element_count(dims: &[usize]) -> Option<usize> {
    dims.iter().try_fold(1usize, |acc, &d| {
        if d > u32::MAX as usize {
            None
        } else {
            acc.checked_mul(d)
        }
    })
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Tensor::decode(&bytes, &path.display().to_string())
}

pub fn write_tensor(path: impl AsRef<Path>, tensor: &Tensor) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, tensor.encode()).map_err(|e| Error::io(path, e))
}
