//! `EMB1` embedding dumps.
//!
//! ```text
//! magic  "EMB1"
//! u32    version (1)
//! u64    count
//! u32    D
//! f32[count·D] rows
//! u32[count]   labels (optional; present iff the bytes remain)
//! u32    CRC32 of every preceding byte
//! ```

use std::path::Path;

use crate::binio::{read_file, write_file, Reader, Writer};
use crate::error::{Error, Result};
use crate::ndiff::Tensor;

const MAGIC: &[u8; 4] = b"EMB1";
const VERSION: u32 = 1;

/// Rows of 32-bit embeddings with optional integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingDump {
    dim: usize,
    rows: Vec<f32>,
    labels: Option<Vec<u32>>,
}

impl EmbeddingDump {
    pub fn new(dim: usize, rows: Vec<f32>, labels: Option<Vec<u32>>) -> Result<Self> {
        if dim == 0 || rows.len() % dim != 0 {
            return Err(Error::Shape(format!("{} values do not form rows of {dim}", rows.len())));
        }
        if let Some(l) = &labels {
            if l.len() != rows.len() / dim {
                return Err(Error::Shape("label count differs from row count".into()));
            }
        }
        Ok(Self { dim, rows, labels })
    }

    /// Rounds a 64-bit matrix to 32-bit rows.
    pub fn from_tensor(t: &Tensor<f64>, labels: Option<Vec<u32>>) -> Result<Self> {
        Self::new(t.cols(), t.data().iter().map(|&v| v as f32).collect(), labels)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn count(&self) -> usize {
        self.rows.len() / self.dim
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }

    pub fn labels(&self) -> Option<&[u32]> {
        self.labels.as_deref()
    }

    pub fn to_tensor(&self) -> Tensor<f64> {
        Tensor::new(vec![self.count(), self.dim], self.rows.iter().map(|&v| v as f64).collect())
            .expect("validated at construction")
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(MAGIC);
        w.u32(VERSION);
        w.u64(self.count() as u64);
        w.u32(self.dim as u32);
        self.rows.iter().for_each(|&v| w.f32(v));
        if let Some(l) = &self.labels {
            l.iter().for_each(|&v| w.u32(v));
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut head = Reader::raw(bytes);
        let magic = head.take(4).map_err(|_| Error::BadFormat("missing EMB1 magic".into()))?;
        if magic != MAGIC {
            return Err(Error::BadFormat(format!("bad magic {magic:?}, expected EMB1")));
        }
        let version = head.u32()?;
        if version != VERSION {
            return Err(Error::Version {
                found: version,
                expected: VERSION,
            });
        }
        let count = head.u64()? as usize;
        let dim = head.u32()? as usize;
        if dim == 0 {
            return Err(Error::BadFormat("D = 0".into()));
        }
        let body = count.checked_mul(dim).and_then(|n| n.checked_mul(4)).ok_or(Error::Truncated)?;
        let base = 4 + 4 + 8 + 4 + body + 4;
        let has_labels = if bytes.len() == base {
            false
        } else if bytes.len() == base + 4 * count {
            true
        } else if bytes.len() < base {
            return Err(Error::Truncated);
        } else {
            return Err(Error::BadFormat("unexpected EMB1 length".into()));
        };
        let mut r = Reader::checked(bytes)?;
        r.take(20)?;
        let rows = (0..count * dim).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
        let labels = if has_labels {
            Some((0..count).map(|_| r.u32()).collect::<Result<Vec<_>>>()?)
        } else {
            None
        };
        r.expect_end()?;
        Self::new(dim, rows, labels)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }
}
