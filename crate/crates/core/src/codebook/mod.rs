//! Codebook lifecycle: k-means initialization, random partition into `N`
//! equal sub-codebooks, and frozen centers seen through learnable
//! per-subspace `d × d` projections (`effective = center · W_i`).

mod format;
mod kmeans;

pub use kmeans::{kmeans, KMeansResult};
pub(crate) use kmeans::{nearest_row, sq_dist};

use std::ops::Range;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndiff::{Real, Tape, Tensor, Var};

/// How entry indices are assigned to sub-codebooks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PartitionOrder {
    /// Seeded random permutation.
    #[default]
    Random,
    /// Entries `[iK, (i+1)K)` go to sub-codebook `i`.
    Identity,
}

/// `S` frozen centers split into `N` sub-codebooks of `K = S / N` entries.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    centers: Tensor<f64>,
    n_sub: usize,
    partition: Vec<u32>,
    w: Vec<Tensor<f64>>,
    seed: u64,
}

impl Codebook {
    /// Assembles a codebook, checking every structural invariant.
    pub fn new(
        centers: Tensor<f64>,
        n_sub: usize,
        partition: Vec<u32>,
        w: Vec<Tensor<f64>>,
        seed: u64,
    ) -> Result<Self> {
        if centers.shape().len() != 2 {
            return Err(Error::Shape(format!("centers must be S×d, got {:?}", centers.shape())));
        }
        let (s, d) = (centers.rows(), centers.cols());
        if s == 0 || d == 0 {
            return Err(Error::InvalidArgument("codebook needs S >= 1 and d >= 1".into()));
        }
        if n_sub == 0 || s % n_sub != 0 {
            return Err(Error::InvalidArgument(format!(
                "sub-codebook count {n_sub} does not divide S = {s}"
            )));
        }
        if partition.len() != s {
            return Err(Error::Shape(format!("partition has {} entries, S = {s}", partition.len())));
        }
        let mut seen = vec![false; s];
        for &p in &partition {
            let p = p as usize;
            if p >= s || seen[p] {
                return Err(Error::InvalidArgument("partition is not a permutation of [0, S)".into()));
            }
            seen[p] = true;
        }
        if w.len() != n_sub || w.iter().any(|m| m.shape() != [d, d]) {
            return Err(Error::Shape(format!("expected {n_sub} projection matrices of {d}×{d}")));
        }
        Ok(Self {
            centers,
            n_sub,
            partition,
            w,
            seed,
        })
    }

    /// Total entry count `S`.
    pub fn s(&self) -> usize {
        self.centers.rows()
    }

    /// Sub-codebook count `N`.
    pub fn n(&self) -> usize {
        self.n_sub
    }

    /// Entries per sub-codebook `K = S / N`.
    pub fn k(&self) -> usize {
        self.s() / self.n_sub
    }

    /// Code dimension `d`.
    pub fn d(&self) -> usize {
        self.centers.cols()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn centers(&self) -> &Tensor<f64> {
        &self.centers
    }

    pub fn partition(&self) -> &[u32] {
        &self.partition
    }

    /// Positions in the permutation owned by sub-codebook `i`.
    pub fn sub_range(&self, i: usize) -> Range<usize> {
        i * self.k()..(i + 1) * self.k()
    }

    pub fn w(&self, i: usize) -> &Tensor<f64> {
        &self.w[i]
    }

    pub fn ws(&self) -> &[Tensor<f64>] {
        &self.w
    }

    /// Replaces projection `i`; shape must stay `d × d`.
    pub fn set_w(&mut self, i: usize, w: Tensor<f64>) -> Result<()> {
        self.check_subspace(i)?;
        if w.shape() != [self.d(), self.d()] {
            return Err(Error::Shape(format!("W_{i} must be {0}×{0}, got {1:?}", self.d(), w.shape())));
        }
        self.w[i] = w;
        Ok(())
    }

    pub(crate) fn check_subspace(&self, i: usize) -> Result<()> {
        if i >= self.n_sub {
            return Err(Error::OutOfRange {
                index: i,
                bound: self.n_sub,
            });
        }
        Ok(())
    }

    /// Frozen centers of sub-codebook `i`, `K × d`, in partition order.
    pub fn sub_centers(&self, i: usize) -> Result<Tensor<f64>> {
        self.check_subspace(i)?;
        let rows: Vec<Vec<f64>> = self.partition[self.sub_range(i)]
            .iter()
            .map(|&p| self.centers.row(p as usize).to_vec())
            .collect();
        Tensor::from_rows(&rows)
    }

    /// Effective entries of sub-codebook `i`: each frozen center row times `W_i`.
    pub fn effective_entries(&self, i: usize) -> Result<Tensor<f64>> {
        self.sub_centers(i)?.matmul(&self.w[i])
    }

    /// All effective entries, `S × d`, sub-codebook by sub-codebook.
    pub fn all_effective_entries(&self) -> Result<Tensor<f64>> {
        let mut rows = Vec::with_capacity(self.s());
        for i in 0..self.n_sub {
            let e = self.effective_entries(i)?;
            rows.extend((0..e.rows()).map(|r| e.row(r).to_vec()));
        }
        Tensor::from_rows(&rows)
    }

    /// Records the effective entries of sub-codebook `i` on a tape, with
    /// `w` the tape variable holding `W_i`. Differentiable in `w` only; the
    /// centers enter as constants.
    pub fn effective_entries_on<T: Real>(&self, tape: &Tape<T>, i: usize, w: Var) -> Result<Var> {
        let sub = self.sub_centers(i)?.cast::<T>();
        if tape.shape(w) != [self.d(), self.d()] {
            return Err(Error::Shape(format!("W_{i} variable has shape {:?}", tape.shape(w))));
        }
        let c = tape.constant(sub);
        Ok(tape.matmul(c, w))
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        crate::binio::write_file(path, &self.to_bytes())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_bytes(&crate::binio::read_file(path)?)
    }
}

/// Splits `centers` into `n` equal sub-codebooks using a seeded random
/// permutation, with every projection initialized to the identity.
pub fn partition(centers: Tensor<f64>, n: usize, seed: u64) -> Result<Codebook> {
    partition_with(centers, n, seed, PartitionOrder::Random)
}

pub fn partition_with(centers: Tensor<f64>, n: usize, seed: u64, order: PartitionOrder) -> Result<Codebook> {
    let (s, d) = (centers.rows(), centers.cols());
    if n == 0 || s % n != 0 {
        return Err(Error::InvalidArgument(format!(
            "sub-codebook count {n} does not divide S = {s}"
        )));
    }
    let mut perm: Vec<u32> = (0..s as u32).collect();
    if order == PartitionOrder::Random {
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    let w = vec![Tensor::eye(d); n];
    Codebook::new(centers, n, perm, w, seed)
}
