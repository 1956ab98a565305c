//! Synthetic corpora and independent reference implementations.
//!
//! Every generator is a pure function of its spec, seed included.

mod emb;
mod grid;

pub use emb::EmbeddingDump;
pub use grid::{gen_grid_task, GridExample, GridTask, GridTaskSpec, TextVocab};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndiff::Tensor;

/// Gaussian mixture in `dim` dimensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub components: usize,
    pub dim: usize,
    /// Minimum pairwise distance between component means.
    pub means_scale: f64,
    pub sigma: f64,
    pub per_component: usize,
    pub seed: u64,
}

/// Points with their true component labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Mixture {
    pub points: Tensor<f64>,
    pub labels: Vec<u32>,
    pub means: Tensor<f64>,
}

impl Mixture {
    /// Within-cluster squared distance using the true labels and the
    /// empirical mean of each labelled group.
    pub fn true_label_cost(&self) -> f64 {
        let k = self.means.rows();
        let d = self.points.cols();
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for (i, &l) in self.labels.iter().enumerate() {
            counts[l as usize] += 1;
            for (s, &x) in sums[l as usize].iter_mut().zip(self.points.row(i)) {
                *s += x;
            }
        }
        for (s, &c) in sums.iter_mut().zip(&counts) {
            s.iter_mut().for_each(|v| *v /= c.max(1) as f64);
        }
        self.labels
            .iter()
            .enumerate()
            .map(|(i, &l)| {
                self.points
                    .row(i)
                    .iter()
                    .zip(&sums[l as usize])
                    .map(|(x, m)| (x - m) * (x - m))
                    .sum::<f64>()
            })
            .sum()
    }
}

pub(crate) fn gaussian(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Draws component means (rejection-sampled to respect `means_scale`) and
/// `per_component` points around each.
pub fn gen_mixture(spec: &MixtureSpec) -> Result<Mixture> {
    if !(spec.sigma > 0.0) || spec.components == 0 || spec.per_component == 0 || spec.dim == 0 {
        return Err(Error::InvalidArgument(format!("invalid mixture spec {spec:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut means: Vec<Vec<f64>> = Vec::with_capacity(spec.components);
    let mut spread = spec.means_scale.max(f64::MIN_POSITIVE);
    while means.len() < spec.components {
        let mut placed = false;
        for _ in 0..1000 {
            let cand: Vec<f64> = (0..spec.dim).map(|_| gaussian(&mut rng) * spread).collect();
            let ok = means.iter().all(|m| {
                m.iter().zip(&cand).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt() >= spec.means_scale
            });
            if ok {
                means.push(cand);
                placed = true;
                break;
            }
        }
        if !placed {
            spread *= 2.0;
        }
    }
    let mut rows = Vec::with_capacity(spec.components * spec.per_component);
    let mut labels = Vec::with_capacity(rows.capacity());
    for (c, m) in means.iter().enumerate() {
        for _ in 0..spec.per_component {
            rows.push(m.iter().map(|&v| v + spec.sigma * gaussian(&mut rng)).collect::<Vec<_>>());
            labels.push(c as u32);
        }
    }
    Ok(Mixture {
        points: Tensor::from_rows(&rows)?,
        labels,
        means: Tensor::from_rows(&means)?,
    })
}

/// Mixture around explicitly given means.
pub fn gen_mixture_at(means: &Tensor<f64>, sigma: f64, per_component: usize, seed: u64) -> Result<Mixture> {
    if !(sigma > 0.0) || per_component == 0 {
        return Err(Error::InvalidArgument("sigma must be > 0 and per_component >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for c in 0..means.rows() {
        for _ in 0..per_component {
            rows.push(means.row(c).iter().map(|&v| v + sigma * gaussian(&mut rng)).collect::<Vec<_>>());
            labels.push(c as u32);
        }
    }
    Ok(Mixture {
        points: Tensor::from_rows(&rows)?,
        labels,
        means: means.clone(),
    })
}

/// Exhaustive nearest-row scan by squared Euclidean distance; the first
/// (lowest) index wins ties.
pub fn brute_quantize(z: &[f64], entries: &Tensor<f64>) -> Result<usize> {
    if entries.is_empty() || entries.rows() == 0 {
        return Err(Error::InvalidArgument("empty codebook".into()));
    }
    if entries.cols() != z.len() {
        return Err(Error::Shape(format!("query dim {} vs entry dim {}", z.len(), entries.cols())));
    }
    let mut best_index = 0;
    let mut best_dist = f64::INFINITY;
    for r in 0..entries.rows() {
        let mut dist = 0.0;
        for (a, b) in z.iter().zip(entries.row(r)) {
            let diff = a - b;
            dist += diff * diff;
        }
        if dist < best_dist {
            best_dist = dist;
            best_index = r;
        }
    }
    Ok(best_index)
}

/// Adjusted Rand index between two labelings of the same points.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len();
    let ka = a.iter().max().map_or(0, |m| m + 1);
    let kb = b.iter().max().map_or(0, |m| m + 1);
    let mut table = vec![0u64; ka * kb];
    for (&x, &y) in a.iter().zip(b) {
        table[x * kb + y] += 1;
    }
    let c2 = |v: u64| (v * v.saturating_sub(1)) as f64 / 2.0;
    let index: f64 = table.iter().map(|&v| c2(v)).sum();
    let rows: f64 = (0..ka).map(|i| c2(table[i * kb..(i + 1) * kb].iter().sum())).sum();
    let cols: f64 = (0..kb).map(|j| c2((0..ka).map(|i| table[i * kb + j]).sum())).sum();
    let total = c2(n as u64);
    let expected = rows * cols / total;
    let max = 0.5 * (rows + cols);
    if max == expected {
        return 1.0;
    }
    (index - expected) / (max - expected)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_sigma_collapses_onto_means() {
        let spec = MixtureSpec {
            components: 3,
            dim: 4,
            means_scale: 5.0,
            sigma: 1e-300,
            per_component: 10,
            seed: 2,
        };
        let m = gen_mixture(&spec).unwrap();
        for (i, &l) in m.labels.iter().enumerate() {
            assert_eq!(m.points.row(i), m.means.row(l as usize));
        }
    }

    #[test]
    fn mixture_means_respect_minimum_separation() {
        let spec = MixtureSpec {
            components: 8,
            dim: 2,
            means_scale: 3.0,
            sigma: 0.3,
            per_component: 5,
            seed: 9,
        };
        let m = gen_mixture(&spec).unwrap();
        for i in 0..8 {
            for j in 0..i {
                let d: f64 = m.means.row(i).iter().zip(m.means.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
                assert!(d.sqrt() >= 3.0);
            }
        }
        assert_eq!(gen_mixture(&spec).unwrap(), m);
    }

    #[test]
    fn brute_quantize_base_cases() {
        let one = Tensor::from_rows(&[vec![5.0, 5.0]]).unwrap();
        assert_eq!(brute_quantize(&[-3.0, 1.0], &one).unwrap(), 0);
        let pair = Tensor::from_rows(&[vec![1.0, 0.0], vec![-1.0, 0.0]]).unwrap();
        assert_eq!(brute_quantize(&[0.0, 0.0], &pair).unwrap(), 0);
        assert!(brute_quantize(&[0.0], &pair).is_err());
    }

    #[test]
    fn ari_extremes() {
        let a = [0, 0, 1, 1, 2, 2];
        assert!((adjusted_rand_index(&a, &[5, 5, 3, 3, 0, 0]) - 1.0).abs() < 1e-12);
        // reference value from sklearn.metrics.adjusted_rand_score
        let ari = adjusted_rand_index(&[0, 0, 1, 1], &[0, 0, 1, 2]);
        assert!((ari - 0.5714285714285714).abs() < 1e-12, "{ari}");
    }
}
