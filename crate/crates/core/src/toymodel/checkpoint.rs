//! `KLX1` training checkpoints.
//!
//! Little-endian layout, parameters always stored as f64:
//!
//! ```text
//! magic    "KLX1"
//! u32      version (1)
//! [u8;32]  SHA-256 of the config JSON
//! str      config JSON (u32 length + UTF-8)
//! u64      optimizer step
//! [u8;32]  data RNG seed
//! u128     data RNG word position
//! u64      data RNG stream
//! u8       codebook present
//! u64      codebook byte length, then CBK1 bytes (if present)
//! u32      parameter count, then per parameter:
//!            str name, u8 requires_grad, u32 ndim, u64[ndim] shape, f64[] values
//! u32      moment count, then per entry: str name, f64[] m, f64[] v
//! u32      CRC32 of every preceding byte
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use sha2::{Digest, Sha256};

use super::{AdamState, Model, ModelConfig, TrainState};
use crate::binio::{read_file, write_file, Reader, Writer};
use crate::codebook::Codebook;
use crate::error::{Error, Result};
use crate::ndiff::{DiffArray, ParamSet, Real, Tensor};

const MAGIC: &[u8; 4] = b"KLX1";
const VERSION: u32 = 1;

/// Checkpoint contents independent of the run precision.
pub struct Checkpoint;

fn write_tensor(w: &mut Writer, t: &[f64]) {
    for &v in t {
        w.f64(v);
    }
}

fn read_vals(r: &mut Reader<'_>, n: usize) -> Result<Vec<f64>> {
    if r.remaining() < n.saturating_mul(8) {
        return Err(Error::Truncated);
    }
    (0..n).map(|_| r.f64()).collect()
}

impl Checkpoint {
    pub fn to_bytes<T: Real>(state: &TrainState<T>) -> Result<Vec<u8>> {
        let model = &state.model;
        let json = serde_json::to_string(model.config())?;
        let mut w = Writer::new();
        w.bytes(MAGIC);
        w.u32(VERSION);
        w.bytes(&Sha256::digest(json.as_bytes()));
        w.str(&json);
        w.u64(state.step);
        w.bytes(&state.rng.get_seed());
        w.u128(state.rng.get_word_pos());
        w.u64(state.rng.get_stream());
        match model.codebook()? {
            Some(cb) => {
                let b = cb.to_bytes();
                w.u8(1);
                w.u64(b.len() as u64);
                w.bytes(&b);
            }
            None => w.u8(0),
        }
        let params = model.params();
        w.u32(params.len() as u32);
        for (name, p) in params.iter() {
            w.str(name);
            w.u8(p.requires_grad() as u8);
            w.u32(p.shape().len() as u32);
            for &d in p.shape() {
                w.u64(d as u64);
            }
            let vals: Vec<f64> = p.values().data().iter().map(|x| x.f64()).collect();
            write_tensor(&mut w, &vals);
        }
        w.u32(state.adam.m.len() as u32);
        for (name, m) in &state.adam.m {
            let v = state.adam.v.get(name).expect("paired moments");
            w.str(name);
            write_tensor(&mut w, m.data());
            write_tensor(&mut w, v.data());
        }
        Ok(w.finish())
    }

    pub fn from_bytes<T: Real>(bytes: &[u8]) -> Result<TrainState<T>> {
        let mut head = Reader::raw(bytes);
        let magic = head.take(4).map_err(|_| Error::BadFormat("missing KLX1 magic".into()))?;
        if magic != MAGIC {
            return Err(Error::BadFormat(format!("bad magic {magic:?}, expected KLX1")));
        }
        let version = head.u32()?;
        if version != VERSION {
            return Err(Error::Version {
                found: version,
                expected: VERSION,
            });
        }
        let mut r = Reader::checked(bytes)?;
        r.take(8)?;
        let digest = r.take(32)?.to_vec();
        let json = r.str()?;
        if Sha256::digest(json.as_bytes()).as_slice() != digest.as_slice() {
            return Err(Error::BadFormat("config digest mismatch".into()));
        }
        let cfg: ModelConfig = serde_json::from_str(&json)?;
        if cfg.precision != T::PRECISION {
            return Err(Error::InvalidArgument(format!(
                "checkpoint precision {:?} loaded as {:?}",
                cfg.precision,
                T::PRECISION
            )));
        }
        let step = r.u64()?;
        let seed: [u8; 32] = r.take(32)?.try_into().unwrap();
        let word_pos = r.u128()?;
        let stream = r.u64()?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(stream);
        rng.set_word_pos(word_pos);
        let codebook = match r.u8()? {
            0 => None,
            1 => {
                let n = r.u64()? as usize;
                Some(Codebook::from_bytes(r.take(n)?)?)
            }
            f => return Err(Error::BadFormat(format!("invalid codebook flag {f}"))),
        };
        let mut params = ParamSet::new(cfg.backbone.seed);
        let np = r.u32()?;
        let mut shapes = BTreeMap::new();
        for _ in 0..np {
            let name = r.str()?;
            let rg = match r.u8()? {
                0 => false,
                1 => true,
                f => return Err(Error::BadFormat(format!("invalid requires_grad flag {f}"))),
            };
            let nd = r.u32()? as usize;
            let shape = (0..nd).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::BadFormat(format!("shape {shape:?} overflows")))?;
            let vals = read_vals(&mut r, n)?;
            let t = Tensor::new(shape.clone(), vals.into_iter().map(T::c).collect())?;
            params
                .insert_array(name.clone(), DiffArray::new(t, rg))
                .map_err(|e| Error::BadFormat(e.to_string()))?;
            shapes.insert(name, shape);
        }
        let mut adam = AdamState::default();
        let nm = r.u32()?;
        for _ in 0..nm {
            let name = r.str()?;
            let shape = shapes
                .get(&name)
                .ok_or_else(|| Error::BadFormat(format!("moments for unknown parameter `{name}`")))?
                .clone();
            let n = shape.iter().product();
            let m = Tensor::new(shape.clone(), read_vals(&mut r, n)?)?;
            let v = Tensor::new(shape, read_vals(&mut r, n)?)?;
            adam.m.insert(name.clone(), m);
            adam.v.insert(name, v);
        }
        r.expect_end()?;
        let model = Model::from_parts(cfg, params, codebook)?;
        Ok(TrainState {
            model,
            adam,
            step,
            rng,
        })
    }
}

pub fn save_checkpoint<T: Real>(path: &Path, state: &TrainState<T>) -> Result<()> {
    write_file(path, &Checkpoint::to_bytes(state)?)
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<TrainState<T>> {
    Checkpoint::from_bytes(&read_file(path)?)
}
