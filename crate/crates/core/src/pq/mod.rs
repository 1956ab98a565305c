//! Product quantization of patch embeddings.
//!
//! A `D`-dim patch embedding is projected into `N` subspaces of dim `d`,
//! each subspace is snapped to its nearest effective codebook entry, and
//! the straight-through sub-vectors are fused into one `d`-dim token.
//! Two paths share the same selection rule: plain `f64` functions for
//! tokenization and oracle checks, and tape-recorded versions in
//! [`tape`] for training.

mod dump;
pub mod tape;

pub use dump::{read_token_dump, write_token_dump, TokenRecord};

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codebook::{nearest_row, sq_dist, Codebook};
use crate::error::{Error, Result};
use crate::ndiff::Tensor;

/// Quantization scheme tag used in token dumps and run configs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    #[default]
    Vq,
    Fsq,
    Rq,
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Scheme::Vq => "vq",
            Scheme::Fsq => "fsq",
            Scheme::Rq => "rq",
        })
    }
}

impl std::str::FromStr for Scheme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vq" | "pq" => Ok(Scheme::Vq),
            "fsq" => Ok(Scheme::Fsq),
            "rq" => Ok(Scheme::Rq),
            _ => Err(Error::InvalidArgument(format!("unknown scheme `{s}`"))),
        }
    }
}

/// How the `N` straight-through sub-vectors become one token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fusion {
    #[default]
    Sum,
    Mean,
}

fn default_beta() -> f64 {
    0.25
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PQConfig {
    /// Input patch-embedding dim `D`.
    pub dim: usize,
    /// Subspace dim `d`.
    pub sub_dim: usize,
    /// Number of subspaces `N`.
    pub n_sub: usize,
    /// Total codebook size `S`.
    pub size: usize,
    /// Commitment weight.
    #[serde(default = "default_beta")]
    pub beta: f64,
    pub seed: u64,
    #[serde(default)]
    pub fusion: Fusion,
    /// All subspaces search one pool of `S` entries instead of their own
    /// sub-codebook of `S / N`.
    #[serde(default)]
    pub shared: bool,
    /// Let the downstream loss reach the selected entries through the fused
    /// token. Off by default: the fused token is straight-through, so only
    /// the codebook term trains the entries.
    #[serde(default)]
    pub ntp_into_codebook: bool,
}

impl PQConfig {
    pub fn new(dim: usize, sub_dim: usize, n_sub: usize, size: usize, seed: u64) -> Result<Self> {
        let cfg = Self {
            dim,
            sub_dim,
            n_sub,
            size,
            beta: default_beta(),
            seed,
            fusion: Fusion::Sum,
            shared: false,
            ntp_into_codebook: false,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.sub_dim == 0 || self.n_sub == 0 || self.size == 0 {
            return Err(Error::InvalidArgument(format!(
                "PQ dims must be >= 1 (D={} d={} N={} S={})",
                self.dim, self.sub_dim, self.n_sub, self.size
            )));
        }
        if self.size % self.n_sub != 0 {
            return Err(Error::InvalidArgument(format!(
                "N = {} does not divide S = {}",
                self.n_sub, self.size
            )));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::InvalidArgument(format!("beta must be >= 0, got {}", self.beta)));
        }
        Ok(())
    }

    /// Entries searched per subspace.
    pub fn k(&self) -> usize {
        if self.shared {
            self.size
        } else {
            self.size / self.n_sub
        }
    }

    /// Sub-codebook count the codebook must have.
    pub fn codebook_parts(&self) -> usize {
        if self.shared {
            1
        } else {
            self.n_sub
        }
    }

    /// Sub-codebook serving subspace `i`.
    pub fn part_of(&self, i: usize) -> usize {
        if self.shared {
            0
        } else {
            i
        }
    }

    /// Offset added to subspace `i`'s local index to form its global id.
    pub fn id_base(&self, i: usize) -> usize {
        self.part_of(i) * self.k()
    }

    pub fn capacity_bits(&self) -> f64 {
        capacity_bits(self.n_sub, self.k())
    }

    pub(crate) fn check_codebook(&self, cb: &Codebook) -> Result<()> {
        if cb.s() != self.size || cb.d() != self.sub_dim || cb.n() != self.codebook_parts() {
            return Err(Error::Shape(format!(
                "codebook S={} N={} d={} does not fit config S={} parts={} d={}",
                cb.s(),
                cb.n(),
                cb.d(),
                self.size,
                self.codebook_parts(),
                self.sub_dim
            )));
        }
        Ok(())
    }
}

/// `N` learnable `D × d` projections.
#[derive(Debug, Clone, PartialEq)]
pub struct SubspaceProjector {
    mats: Vec<Tensor<f64>>,
}

fn orthonormal(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    // Gram-Schmidt over the shorter side so the result has orthonormal
    // columns (rows >= cols) or orthonormal rows (rows < cols).
    let (count, len) = (rows.min(cols), rows.max(cols));
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut v: Vec<f64> = (0..len).map(|_| crate::synth::gaussian(rng)).collect();
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            basis.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    let mut out = Tensor::zeros(&[rows, cols]);
    for (k, b) in basis.iter().enumerate() {
        for (j, &x) in b.iter().enumerate() {
            let (r, c) = if rows >= cols { (j, k) } else { (k, j) };
            out.data_mut()[r * cols + c] = x;
        }
    }
    out
}

impl SubspaceProjector {
    pub fn new(mats: Vec<Tensor<f64>>) -> Result<Self> {
        let first = mats.first().ok_or_else(|| Error::InvalidArgument("no projections".into()))?;
        let shape = first.shape().to_vec();
        if shape.len() != 2 || mats.iter().any(|m| m.shape() != shape.as_slice()) {
            return Err(Error::Shape("projections must all be D×d".into()));
        }
        Ok(Self { mats })
    }

    /// Seeded projections with orthonormal columns.
    pub fn orthonormal(cfg: &PQConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5052_4f4a);
        let mats = (0..cfg.n_sub)
            .map(|_| orthonormal(cfg.dim, cfg.sub_dim, &mut rng))
            .collect();
        Self { mats }
    }

    /// `N` copies of the `D × D` identity.
    pub fn identity(dim: usize, n: usize) -> Self {
        Self {
            mats: vec![Tensor::eye(dim); n],
        }
    }

    pub fn n(&self) -> usize {
        self.mats.len()
    }

    pub fn input_dim(&self) -> usize {
        self.mats[0].rows()
    }

    pub fn sub_dim(&self) -> usize {
        self.mats[0].cols()
    }

    pub fn mat(&self, i: usize) -> &Tensor<f64> {
        &self.mats[i]
    }

    pub fn mats(&self) -> &[Tensor<f64>] {
        &self.mats
    }

    pub fn set_mat(&mut self, i: usize, m: Tensor<f64>) -> Result<()> {
        if m.shape() != self.mats[i].shape() {
            return Err(Error::Shape(format!("projection {i} has shape {:?}", m.shape())));
        }
        self.mats[i] = m;
        Ok(())
    }
}

/// One quantized patch.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedPatch {
    /// Sub-codebook-local index per subspace.
    pub indices: Vec<usize>,
    pub z_sub: Vec<Vec<f64>>,
    pub z_q: Vec<Vec<f64>>,
    pub fused: Vec<f64>,
    /// `(1/N) Σ ‖sg[z_sub] − z_q‖²`
    pub codebook_term: f64,
    /// `(1/N) Σ ‖z_sub − sg[z_q]‖²`, before the `β` weight.
    pub commitment_term: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedImage {
    pub grid: (usize, usize),
    pub patches: Vec<QuantizedPatch>,
    /// Entries per subspace, for global ids.
    pub k: usize,
    pub shared: bool,
}

impl QuantizedImage {
    pub fn p(&self) -> usize {
        self.patches.len()
    }

    /// Global visual ids of patch `p`: local index plus its subspace base.
    pub fn global_codes(&self, p: usize) -> Vec<usize> {
        self.patches[p]
            .indices
            .iter()
            .enumerate()
            .map(|(i, &ix)| if self.shared { ix } else { ix + i * self.k })
            .collect()
    }

    pub fn all_global_codes(&self) -> Vec<Vec<usize>> {
        (0..self.p()).map(|p| self.global_codes(p)).collect()
    }
}

/// `z_sub_i = z · P_i` for every subspace.
pub fn project_subspaces(z: &[f64], proj: &SubspaceProjector) -> Result<Vec<Vec<f64>>> {
    if z.len() != proj.input_dim() {
        return Err(Error::Shape(format!(
            "patch has dim {}, projector expects {}",
            z.len(),
            proj.input_dim()
        )));
    }
    let d = proj.sub_dim();
    Ok(proj
        .mats
        .iter()
        .map(|m| {
            let mut out = vec![0.0; d];
            for (r, &x) in z.iter().enumerate() {
                for (o, &w) in out.iter_mut().zip(m.row(r)) {
                    *o += x * w;
                }
            }
            out
        })
        .collect())
}

/// Nearest effective entry of sub-codebook `i` to `z_sub`; ties go to the
/// lowest index.
pub fn nearest(z_sub: &[f64], cb: &Codebook, i: usize) -> Result<(usize, Vec<f64>)> {
    let entries = cb.effective_entries(i)?;
    nearest_in(z_sub, &entries)
}

pub(crate) fn nearest_in(z_sub: &[f64], entries: &Tensor<f64>) -> Result<(usize, Vec<f64>)> {
    if entries.rows() == 0 {
        return Err(Error::InvalidArgument("empty sub-codebook".into()));
    }
    if z_sub.len() != entries.cols() {
        return Err(Error::Shape(format!(
            "sub-vector has dim {}, entries have dim {}",
            z_sub.len(),
            entries.cols()
        )));
    }
    let (ix, _) = nearest_row(z_sub, entries);
    Ok((ix, entries.row(ix).to_vec()))
}

/// Forward value of the straight-through estimator, `z_sub + sg(z_q − z_sub)`,
/// which is `z_q`. Gradients are handled by the tape version.
///
/// # Panics
/// If the lengths differ.
pub fn straight_through(z_sub: &[f64], z_q: &[f64]) -> Vec<f64> {
    assert_eq!(z_sub.len(), z_q.len(), "straight_through: dim mismatch");
    z_q.to_vec()
}

/// `(1/N) Σ (‖sg[z_sub] − z_q‖² + β ‖z_sub − sg[z_q]‖²)`.
pub fn vq_loss(patch: &QuantizedPatch, beta: f64) -> f64 {
    patch.codebook_term + beta * patch.commitment_term
}

/// Bits per patch of `N` independent `K`-way codes.
pub fn capacity_bits(n: usize, k: usize) -> f64 {
    n as f64 * (k as f64).log2()
}

/// Effective entries per subspace, computed once for a batch of patches.
#[derive(Debug, Clone)]
pub struct PqTables {
    cfg: PQConfig,
    entries: Vec<Tensor<f64>>,
}

impl PqTables {
    pub fn new(cfg: &PQConfig, cb: &Codebook) -> Result<Self> {
        cfg.validate()?;
        cfg.check_codebook(cb)?;
        let entries = (0..cb.n()).map(|i| cb.effective_entries(i)).collect::<Result<_>>()?;
        Ok(Self {
            cfg: cfg.clone(),
            entries,
        })
    }

    pub fn entries(&self, i: usize) -> &Tensor<f64> {
        &self.entries[self.cfg.part_of(i)]
    }

    pub fn quantize(&self, z: &[f64], proj: &SubspaceProjector) -> Result<QuantizedPatch> {
        let cfg = &self.cfg;
        if proj.n() != cfg.n_sub || proj.sub_dim() != cfg.sub_dim {
            return Err(Error::Shape(format!(
                "projector has {} maps to dim {}, config wants {} to dim {}",
                proj.n(),
                proj.sub_dim(),
                cfg.n_sub,
                cfg.sub_dim
            )));
        }
        let z_sub = project_subspaces(z, proj)?;
        let mut indices = Vec::with_capacity(cfg.n_sub);
        let mut z_q = Vec::with_capacity(cfg.n_sub);
        let mut fused = vec![0.0; cfg.sub_dim];
        let mut dist = 0.0;
        for (i, zs) in z_sub.iter().enumerate() {
            let (ix, q) = nearest_in(zs, self.entries(i))?;
            dist += sq_dist(zs, &q);
            for (f, x) in fused.iter_mut().zip(straight_through(zs, &q)) {
                *f += x;
            }
            indices.push(ix);
            z_q.push(q);
        }
        if cfg.fusion == Fusion::Mean {
            let n = cfg.n_sub as f64;
            fused.iter_mut().for_each(|f| *f /= n);
        }
        // Both terms have the same forward value; they differ only in where
        // the stop-gradient sits.
        let term = dist / cfg.n_sub as f64;
        Ok(QuantizedPatch {
            indices,
            z_sub,
            z_q,
            fused,
            codebook_term: term,
            commitment_term: term,
        })
    }

    /// Quantizes every row of a `P × D` embedding matrix in parallel.
    pub fn quantize_image(
        &self,
        embeddings: &Tensor<f64>,
        grid: (usize, usize),
        proj: &SubspaceProjector,
    ) -> Result<QuantizedImage> {
        let p = embeddings.rows();
        if p == 0 || grid.0 * grid.1 != p {
            return Err(Error::Shape(format!("grid {grid:?} does not hold {p} patches")));
        }
        let patches = (0..p)
            .into_par_iter()
            .map(|r| self.quantize(embeddings.row(r), proj))
            .collect::<Result<Vec<_>>>()?;
        Ok(QuantizedImage {
            grid,
            patches,
            k: self.cfg.k(),
            shared: self.cfg.shared,
        })
    }
}

pub fn quantize_patch(
    z: &[f64],
    cfg: &PQConfig,
    proj: &SubspaceProjector,
    cb: &Codebook,
) -> Result<QuantizedPatch> {
    PqTables::new(cfg, cb)?.quantize(z, proj)
}

pub fn quantize_image(
    embeddings: &Tensor<f64>,
    grid: (usize, usize),
    cfg: &PQConfig,
    proj: &SubspaceProjector,
    cb: &Codebook,
) -> Result<QuantizedImage> {
    PqTables::new(cfg, cb)?.quantize_image(embeddings, grid, proj)
}

/// Unified embedding table: text rows, then every effective entry pushed
/// through the up-projector chain, then `specials` zero rows.
pub fn build_unified_table(
    cb: &Codebook,
    up_projectors: &[Tensor<f64>],
    text_table: &Tensor<f64>,
    specials: usize,
) -> Result<Tensor<f64>> {
    let mut visual = cb.all_effective_entries()?;
    for (j, up) in up_projectors.iter().enumerate() {
        if up.shape().len() != 2 || up.rows() != visual.cols() {
            return Err(Error::Shape(format!(
                "up-projector {j} has shape {:?}, input dim is {}",
                up.shape(),
                visual.cols()
            )));
        }
        visual = visual.matmul(up)?;
    }
    let dm = visual.cols();
    if text_table.shape().len() != 2 || text_table.cols() != dm {
        return Err(Error::Shape(format!(
            "text table has shape {:?}, model dim is {dm}",
            text_table.shape()
        )));
    }
    let mut data = Vec::with_capacity((text_table.rows() + visual.rows() + specials) * dm);
    data.extend_from_slice(text_table.data());
    data.extend_from_slice(visual.data());
    data.resize(data.len() + specials * dm, 0.0);
    Tensor::new(vec![text_table.rows() + visual.rows() + specials, dm], data)
}

/// Common contract of the patch quantizers, so tokenization and ablations
/// can swap schemes.
pub trait PatchQuantizer: Send + Sync {
    fn scheme(&self) -> Scheme;
    fn input_dim(&self) -> usize;
    /// Ids emitted per patch.
    fn code_len(&self) -> usize;
    /// Size of the global id space.
    fn vocab_size(&self) -> usize;
    /// Global ids that position `j` of a code can take.
    fn position_range(&self, j: usize) -> Range<usize>;
    fn capacity_bits(&self) -> f64;
    /// Global ids and the reconstructed (fused) vector.
    fn encode(&self, z: &[f64]) -> Result<(Vec<usize>, Vec<f64>)>;
}

/// The product quantizer behind [`PatchQuantizer`].
#[derive(Debug, Clone)]
pub struct ProductQuantizer {
    tables: PqTables,
    proj: SubspaceProjector,
}

impl ProductQuantizer {
    pub fn new(cfg: &PQConfig, proj: SubspaceProjector, cb: &Codebook) -> Result<Self> {
        if proj.input_dim() != cfg.dim || proj.n() != cfg.n_sub || proj.sub_dim() != cfg.sub_dim {
            return Err(Error::Shape("projector does not match config".into()));
        }
        Ok(Self {
            tables: PqTables::new(cfg, cb)?,
            proj,
        })
    }

    pub fn config(&self) -> &PQConfig {
        &self.tables.cfg
    }

    pub fn quantize(&self, z: &[f64]) -> Result<QuantizedPatch> {
        self.tables.quantize(z, &self.proj)
    }

    pub fn quantize_image(&self, embeddings: &Tensor<f64>, grid: (usize, usize)) -> Result<QuantizedImage> {
        self.tables.quantize_image(embeddings, grid, &self.proj)
    }
}

impl PatchQuantizer for ProductQuantizer {
    fn scheme(&self) -> Scheme {
        Scheme::Vq
    }

    fn input_dim(&self) -> usize {
        self.tables.cfg.dim
    }

    fn code_len(&self) -> usize {
        self.tables.cfg.n_sub
    }

    fn vocab_size(&self) -> usize {
        self.tables.cfg.size
    }

    fn position_range(&self, j: usize) -> Range<usize> {
        let base = self.tables.cfg.id_base(j);
        base..base + self.tables.cfg.k()
    }

    fn capacity_bits(&self) -> f64 {
        self.tables.cfg.capacity_bits()
    }

    fn encode(&self, z: &[f64]) -> Result<(Vec<usize>, Vec<f64>)> {
        let q = self.quantize(z)?;
        let cfg = &self.tables.cfg;
        let ids = q.indices.iter().enumerate().map(|(i, &ix)| ix + cfg.id_base(i)).collect();
        Ok((ids, q.fused))
    }
}

/// Fraction of the ids at each code position that occur in `codes`.
pub fn utilization(q: &dyn PatchQuantizer, codes: &[Vec<usize>]) -> Vec<f64> {
    (0..q.code_len())
        .map(|j| {
            let range = q.position_range(j);
            let mut seen = vec![false; range.len()];
            for c in codes {
                if let Some(&id) = c.get(j) {
                    if range.contains(&id) {
                        seen[id - range.start] = true;
                    }
                }
            }
            seen.iter().filter(|&&s| s).count() as f64 / range.len() as f64
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codebook::partition_with;
    use crate::codebook::PartitionOrder;

    fn rows(r: &[&[f64]]) -> Tensor<f64> {
        Tensor::from_rows(&r.iter().map(|x| x.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn identity_projection_is_a_no_op_and_zero_maps_to_zero() {
        let p = SubspaceProjector::identity(3, 1);
        assert_eq!(project_subspaces(&[1.0, -2.0, 0.5], &p).unwrap(), vec![vec![1.0, -2.0, 0.5]]);
        let cfg = PQConfig::new(5, 2, 3, 6, 1).unwrap();
        let p = SubspaceProjector::orthonormal(&cfg);
        assert!(project_subspaces(&[0.0; 5], &p).unwrap().iter().flatten().all(|&x| x == 0.0));
        assert!(project_subspaces(&[0.0; 4], &p).is_err());
    }

    #[test]
    fn orthonormal_init_has_orthonormal_columns() {
        let cfg = PQConfig::new(6, 3, 2, 4, 9).unwrap();
        let p = SubspaceProjector::orthonormal(&cfg);
        for m in p.mats() {
            let g = m.transpose().matmul(m).unwrap();
            for r in 0..3 {
                for c in 0..3 {
                    let want = if r == c { 1.0 } else { 0.0 };
                    assert!((g.data()[r * 3 + c] - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn exact_entry_hits_distance_zero_and_ties_go_low() {
        let mut centers = Tensor::zeros(&[8, 2]);
        for r in 0..8 {
            centers.row_mut(r).copy_from_slice(&[r as f64, 10.0 * r as f64]);
        }
        let cb = partition_with(centers, 1, 0, PartitionOrder::Identity).unwrap();
        let (ix, q) = nearest(&[5.0, 50.0], &cb, 0).unwrap();
        assert_eq!((ix, q), (5, vec![5.0, 50.0]));

        // entries 2 and 7 mirror each other about the query
        let mut c = Tensor::full(&[8, 2], 100.0);
        c.row_mut(2).copy_from_slice(&[-1.0, 0.0]);
        c.row_mut(7).copy_from_slice(&[1.0, 0.0]);
        let cb = partition_with(c, 1, 0, PartitionOrder::Identity).unwrap();
        assert_eq!(nearest(&[0.0, 0.0], &cb, 0).unwrap().0, 2);
    }

    #[test]
    fn single_subspace_exact_query_has_zero_loss() {
        let cb = partition_with(rows(&[&[0.0, 1.0], &[2.0, 3.0]]), 1, 0, PartitionOrder::Identity).unwrap();
        let cfg = PQConfig::new(2, 2, 1, 2, 0).unwrap();
        let q = quantize_patch(&[2.0, 3.0], &cfg, &SubspaceProjector::identity(2, 1), &cb).unwrap();
        assert_eq!(q.fused, vec![2.0, 3.0]);
        assert_eq!(vq_loss(&q, cfg.beta), 0.0);
    }

    #[test]
    fn vq_loss_direct_evaluation() {
        let q = QuantizedPatch {
            indices: vec![0],
            z_sub: vec![vec![1.0, 0.0]],
            z_q: vec![vec![0.0, 0.0]],
            fused: vec![0.0, 0.0],
            codebook_term: 1.0,
            commitment_term: 1.0,
        };
        assert_eq!(vq_loss(&q, 0.25), 1.25);
        assert_eq!(vq_loss(&q, 0.0), 1.0);
    }

    #[test]
    fn sum_fusion_of_equal_sub_vectors() {
        // eight identical subspaces all picking the same entry
        let mut c = Tensor::full(&[8, 2], 50.0);
        c.row_mut(3).copy_from_slice(&[1.0, -1.0]);
        let cb = partition_with(c, 1, 0, PartitionOrder::Identity).unwrap();
        let mut cfg = PQConfig::new(2, 2, 8, 8, 0).unwrap();
        cfg.shared = true;
        let q = quantize_patch(&[1.1, -0.9], &cfg, &SubspaceProjector::identity(2, 8), &cb).unwrap();
        assert_eq!(q.fused, vec![8.0, -8.0]);
    }

    #[test]
    fn capacity() {
        assert_eq!(capacity_bits(1, 65_536), 16.0);
        assert_eq!(capacity_bits(8, 8_192), 104.0);
        assert_eq!(capacity_bits(1, 1), 0.0);
        for n in 1..16 {
            assert!(capacity_bits(n + 1, 2) > capacity_bits(n, 2));
        }
    }

    #[test]
    fn unified_table_layout() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cb = crate::codebook::partition(Tensor::randn(&[16, 3], 1.0, &mut rng), 4, 1).unwrap();
        let text = Tensor::randn(&[100, 3], 1.0, &mut rng);
        let t = build_unified_table(&cb, &[], &text, 6).unwrap();
        assert_eq!(t.shape(), &[122, 3]);
        assert_eq!(t.row(100), cb.all_effective_entries().unwrap().row(0));
        assert!(t.row(121).iter().all(|&x| x == 0.0));

        let a = Tensor::randn(&[3, 5], 1.0, &mut rng);
        let b = Tensor::randn(&[5, 4], 1.0, &mut rng);
        let text4 = Tensor::zeros(&[2, 4]);
        let chained = build_unified_table(&cb, &[a.clone(), b.clone()], &text4, 0).unwrap();
        let single = build_unified_table(&cb, &[a.matmul(&b).unwrap()], &text4, 0).unwrap();
        for (x, y) in chained.data().iter().zip(single.data()) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!(build_unified_table(&cb, &[b], &text4, 0).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(PQConfig::new(4, 2, 3, 8, 0).is_err());
        assert!(PQConfig::new(0, 2, 1, 8, 0).is_err());
        let mut cfg = PQConfig::new(4, 2, 2, 8, 0).unwrap();
        cfg.beta = -1.0;
        assert!(cfg.validate().is_err());
        assert_eq!("fsq".parse::<Scheme>().unwrap(), Scheme::Fsq);
        assert!("lfq".parse::<Scheme>().is_err());
    }
}
