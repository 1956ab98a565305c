//! Line-delimited JSON token dumps: one image per line,
//! `{"grid":[rows,cols],"indices":[[...] per patch]}` with global ids.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Scheme;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenRecord {
    pub grid: [usize; 2],
    pub indices: Vec<Vec<usize>>,
    /// Omitted for the default product quantizer.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scheme: Option<Scheme>,
}

impl TokenRecord {
    pub fn new(grid: (usize, usize), indices: Vec<Vec<usize>>, scheme: Scheme) -> Self {
        Self {
            grid: [grid.0, grid.1],
            indices,
            scheme: (scheme != Scheme::Vq).then_some(scheme),
        }
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme.unwrap_or_default()
    }
}

pub fn write_token_dump(path: &Path, records: &[TokenRecord]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_token_dump(path: &Path) -> Result<Vec<TokenRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let r: TokenRecord = serde_json::from_str(&line)?;
        if r.grid[0] * r.grid[1] != r.indices.len() {
            return Err(Error::BadFormat(format!(
                "line {}: grid {:?} does not hold {} patches",
                n + 1,
                r.grid,
                r.indices.len()
            )));
        }
        out.push(r);
    }
    Ok(out)
}
