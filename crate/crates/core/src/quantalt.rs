//! Alternative quantizers for the scheme ablation: finite scalar
//! quantization (per-dimension rounding to a fixed level grid) and greedy
//! residual quantization. Both implement [`PatchQuantizer`].

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codebook::{kmeans, nearest_row};
use crate::error::{Error, Result};
use crate::ndiff::Tensor;
use crate::pq::{PQConfig, PatchQuantizer, Scheme, SubspaceProjector};

/// Map applied to each coordinate before rounding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Squash {
    /// `bound · tanh(x / bound)`.
    #[default]
    Tanh,
    /// Clamp to `[-bound, bound]`; level vectors are fixed points.
    Clamp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FSQConfig {
    pub levels: Vec<usize>,
    pub bound: f64,
    #[serde(default)]
    pub squash: Squash,
}

impl FSQConfig {
    pub fn new(levels: Vec<usize>) -> Result<Self> {
        let cfg = Self {
            levels,
            bound: 1.0,
            squash: Squash::Tanh,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels.is_empty() || self.levels.iter().any(|&l| l < 2) {
            return Err(Error::InvalidArgument(format!(
                "FSQ needs at least one dimension and every level count >= 2, got {:?}",
                self.levels
            )));
        }
        if !(self.bound > 0.0 && self.bound.is_finite()) {
            return Err(Error::InvalidArgument(format!("FSQ bound must be > 0, got {}", self.bound)));
        }
        self.levels
            .iter()
            .try_fold(1usize, |acc, &l| acc.checked_mul(l))
            .ok_or_else(|| Error::InvalidArgument("FSQ index space overflows".into()))?;
        Ok(())
    }

    pub fn dims(&self) -> usize {
        self.levels.len()
    }

    /// `Π L_j`.
    pub fn cardinality(&self) -> usize {
        self.levels.iter().product()
    }

    /// Value of level `k` of dimension `j`; evenly spaced in `[-bound, bound]`.
    pub fn level_value(&self, j: usize, k: usize) -> f64 {
        let l = self.levels[j];
        self.bound * (2.0 * k as f64 / (l - 1) as f64 - 1.0)
    }

    fn squash(&self, x: f64) -> f64 {
        match self.squash {
            Squash::Tanh => self.bound * (x / self.bound).tanh(),
            Squash::Clamp => x.clamp(-self.bound, self.bound),
        }
    }

    /// Mixed-radix index of per-dimension level indices; dimension 0 is the
    /// least significant digit.
    pub fn encode(&self, digits: &[usize]) -> Result<usize> {
        if digits.len() != self.dims() {
            return Err(Error::Shape(format!("{} digits for {} dims", digits.len(), self.dims())));
        }
        let mut index = 0;
        for (&k, &l) in digits.iter().zip(&self.levels).rev() {
            if k >= l {
                return Err(Error::OutOfRange { index: k, bound: l });
            }
            index = index * l + k;
        }
        Ok(index)
    }

    pub fn decode(&self, mut index: usize) -> Result<Vec<usize>> {
        if index >= self.cardinality() {
            return Err(Error::OutOfRange {
                index,
                bound: self.cardinality(),
            });
        }
        Ok(self
            .levels
            .iter()
            .map(|&l| {
                let k = index % l;
                index /= l;
                k
            })
            .collect())
    }

    pub fn level_vector(&self, digits: &[usize]) -> Vec<f64> {
        digits.iter().enumerate().map(|(j, &k)| self.level_value(j, k)).collect()
    }
}

/// Squashes, rounds each coordinate to its nearest level, and returns the
/// flat index with the level vector.
pub fn fsq_quantize(z: &[f64], cfg: &FSQConfig) -> Result<(usize, Vec<f64>)> {
    if z.len() != cfg.dims() {
        return Err(Error::Shape(format!("FSQ input has dim {}, levels give {}", z.len(), cfg.dims())));
    }
    let digits: Vec<usize> = z
        .iter()
        .zip(&cfg.levels)
        .map(|(&x, &l)| {
            let y = cfg.squash(x);
            let t = (y / cfg.bound + 1.0) * 0.5 * (l - 1) as f64;
            (t.round().max(0.0) as usize).min(l - 1)
        })
        .collect();
    Ok((cfg.encode(&digits)?, cfg.level_vector(&digits)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RQConfig {
    layers: Vec<Tensor<f64>>,
}

impl RQConfig {
    pub fn new(layers: Vec<Tensor<f64>>) -> Result<Self> {
        let d = layers
            .first()
            .ok_or_else(|| Error::InvalidArgument("RQ needs at least one layer".into()))?
            .cols();
        for (l, t) in layers.iter().enumerate() {
            if t.shape().len() != 2 || t.cols() != d || t.rows() == 0 {
                return Err(Error::Shape(format!("RQ layer {l} has shape {:?}, dim is {d}", t.shape())));
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Tensor<f64>] {
        &self.layers
    }

    pub fn dim(&self) -> usize {
        self.layers[0].cols()
    }

    /// Fits each layer by k-means on the residuals left by the previous
    /// layers. With `zero_entry`, row 0 of every layer is the zero vector and
    /// the other `k - 1` rows come from k-means.
    pub fn fit(points: &Tensor<f64>, n_layers: usize, k: usize, iters: usize, zero_entry: bool, seed: u64) -> Result<Self> {
        let fitted = if zero_entry { k.saturating_sub(1) } else { k };
        if n_layers == 0 || fitted == 0 {
            return Err(Error::InvalidArgument(format!(
                "RQ fit needs layers >= 1 and enough entries (layers={n_layers} k={k})"
            )));
        }
        let mut residual = points.clone();
        let mut layers = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            let km = kmeans(&residual, fitted, iters, seed.wrapping_add(l as u64))?;
            let table = if zero_entry {
                let mut data = vec![0.0; residual.cols()];
                data.extend_from_slice(km.centers.data());
                Tensor::new(vec![k, residual.cols()], data)?
            } else {
                km.centers
            };
            for r in 0..residual.rows() {
                let (ix, _) = nearest_row(residual.row(r), &table);
                let e = table.row(ix).to_vec();
                residual.row_mut(r).iter_mut().zip(&e).for_each(|(x, y)| *x -= y);
            }
            layers.push(table);
        }
        Self::new(layers)
    }
}

/// Result of [`rq_quantize`].
#[derive(Debug, Clone, PartialEq)]
pub struct RqCode {
    pub indices: Vec<usize>,
    /// Sum of the selected entries.
    pub z_q: Vec<f64>,
    /// `‖residual‖` before layer 0 and after every layer.
    pub residual_norms: Vec<f64>,
}

/// Greedy residual quantization: layer `l` picks the entry nearest to what
/// the earlier layers left over.
pub fn rq_quantize(z: &[f64], cfg: &RQConfig) -> Result<RqCode> {
    if z.len() != cfg.dim() {
        return Err(Error::Shape(format!("RQ input has dim {}, layers have {}", z.len(), cfg.dim())));
    }
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut residual = z.to_vec();
    let mut z_q = vec![0.0; z.len()];
    let mut indices = Vec::with_capacity(cfg.layers.len());
    let mut residual_norms = vec![norm(&residual)];
    for layer in &cfg.layers {
        let (ix, _) = nearest_row(&residual, layer);
        for ((r, q), &e) in residual.iter_mut().zip(z_q.iter_mut()).zip(layer.row(ix)) {
            *r -= e;
            *q += e;
        }
        indices.push(ix);
        residual_norms.push(norm(&residual));
    }
    Ok(RqCode {
        indices,
        z_q,
        residual_norms,
    })
}

fn projection(dim: usize, out: usize, seed: u64) -> Result<Tensor<f64>> {
    let cfg = PQConfig::new(dim, out, 1, 1, seed)?;
    Ok(SubspaceProjector::orthonormal(&cfg).mat(0).clone())
}

fn project(z: &[f64], m: &Tensor<f64>) -> Result<Vec<f64>> {
    if z.len() != m.rows() {
        return Err(Error::Shape(format!("patch has dim {}, projection expects {}", z.len(), m.rows())));
    }
    let mut out = vec![0.0; m.cols()];
    for (r, &x) in z.iter().enumerate() {
        out.iter_mut().zip(m.row(r)).for_each(|(o, &w)| *o += x * w);
    }
    Ok(out)
}

/// FSQ behind a seeded `D × dims` projection; one flat id per patch.
#[derive(Debug, Clone)]
pub struct FsqQuantizer {
    cfg: FSQConfig,
    proj: Tensor<f64>,
}

impl FsqQuantizer {
    pub fn new(dim: usize, cfg: FSQConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let proj = projection(dim, cfg.dims(), seed)?;
        Ok(Self { cfg, proj })
    }

    /// Scales the projection so that projected training points spread over
    /// the level grid (each output coordinate gets unit variance).
    pub fn normalized(dim: usize, cfg: FSQConfig, points: &Tensor<f64>, seed: u64) -> Result<Self> {
        let mut q = Self::new(dim, cfg, seed)?;
        let projected = points.matmul(&q.proj)?;
        let n = projected.rows().max(1) as f64;
        for c in 0..projected.cols() {
            let col: Vec<f64> = (0..projected.rows()).map(|r| projected.row(r)[c]).collect();
            let mean = col.iter().sum::<f64>() / n;
            let sd = (col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
            if sd > 1e-12 {
                for r in 0..q.proj.rows() {
                    q.proj.row_mut(r)[c] /= sd;
                }
            }
        }
        Ok(q)
    }

    pub fn config(&self) -> &FSQConfig {
        &self.cfg
    }
}

impl PatchQuantizer for FsqQuantizer {
    fn scheme(&self) -> Scheme {
        Scheme::Fsq
    }

    fn input_dim(&self) -> usize {
        self.proj.rows()
    }

    fn code_len(&self) -> usize {
        1
    }

    fn vocab_size(&self) -> usize {
        self.cfg.cardinality()
    }

    fn position_range(&self, _j: usize) -> Range<usize> {
        0..self.cfg.cardinality()
    }

    fn capacity_bits(&self) -> f64 {
        (self.cfg.cardinality() as f64).log2()
    }

    fn encode(&self, z: &[f64]) -> Result<(Vec<usize>, Vec<f64>)> {
        let (ix, q) = fsq_quantize(&project(z, &self.proj)?, &self.cfg)?;
        Ok((vec![ix], q))
    }
}

/// RQ behind a seeded `D × d` projection; layer `l` ids are offset by the
/// sizes of the layers before it.
#[derive(Debug, Clone)]
pub struct RqQuantizer {
    cfg: RQConfig,
    proj: Tensor<f64>,
    offsets: Vec<usize>,
}

impl RqQuantizer {
    pub fn new(dim: usize, cfg: RQConfig, seed: u64) -> Result<Self> {
        let proj = projection(dim, cfg.dim(), seed)?;
        Self::with_projection(cfg, proj)
    }

    pub fn with_projection(cfg: RQConfig, proj: Tensor<f64>) -> Result<Self> {
        if proj.cols() != cfg.dim() {
            return Err(Error::Shape("projection does not reach the RQ dim".into()));
        }
        let mut offsets = Vec::with_capacity(cfg.layers.len());
        let mut acc = 0;
        for l in &cfg.layers {
            offsets.push(acc);
            acc += l.rows();
        }
        Ok(Self { cfg, proj, offsets })
    }

    /// Projects `points`, then fits the layers on them.
    pub fn fit(
        points: &Tensor<f64>,
        d: usize,
        n_layers: usize,
        k: usize,
        iters: usize,
        zero_entry: bool,
        seed: u64,
    ) -> Result<Self> {
        let proj = projection(points.cols(), d, seed)?;
        let projected = points.matmul(&proj)?;
        let cfg = RQConfig::fit(&projected, n_layers, k, iters, zero_entry, seed)?;
        Self::with_projection(cfg, proj)
    }

    pub fn config(&self) -> &RQConfig {
        &self.cfg
    }
}

impl PatchQuantizer for RqQuantizer {
    fn scheme(&self) -> Scheme {
        Scheme::Rq
    }

    fn input_dim(&self) -> usize {
        self.proj.rows()
    }

    fn code_len(&self) -> usize {
        self.cfg.layers.len()
    }

    fn vocab_size(&self) -> usize {
        self.cfg.layers.iter().map(Tensor::rows).sum()
    }

    fn position_range(&self, j: usize) -> Range<usize> {
        self.offsets[j]..self.offsets[j] + self.cfg.layers[j].rows()
    }

    fn capacity_bits(&self) -> f64 {
        self.cfg.layers.iter().map(|l| (l.rows() as f64).log2()).sum()
    }

    fn encode(&self, z: &[f64]) -> Result<(Vec<usize>, Vec<f64>)> {
        let code = rq_quantize(&project(z, &self.proj)?, &self.cfg)?;
        let ids = code.indices.iter().zip(&self.offsets).map(|(i, o)| i + o).collect();
        Ok((ids, code.z_q))
    }
}

/// Seeded random stand-in layers, `n_layers × k × d`.
pub fn random_rq(n_layers: usize, k: usize, d: usize, seed: u64) -> Result<RQConfig> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    RQConfig::new((0..n_layers).map(|_| Tensor::randn(&[k, d], 1.0, &mut rng)).collect())
}
