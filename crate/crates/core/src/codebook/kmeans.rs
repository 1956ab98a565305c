//! Lloyd's k-means with k-means++ seeding.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::ndiff::Tensor;

/// Output of [`kmeans`].
#[derive(Debug, Clone)]
pub struct KMeansResult {
    /// `S × d` cluster centers.
    pub centers: Tensor<f64>,
    /// Cluster index of every input point.
    pub assignments: Vec<usize>,
    /// Total within-cluster squared distance after each assignment step;
    /// entry 0 is the cost of the seeding.
    pub costs: Vec<f64>,
    /// Whether the assignment reached a fixpoint before `max_iters`.
    pub converged: bool,
}

impl KMeansResult {
    pub fn final_cost(&self) -> f64 {
        *self.costs.last().expect("at least one cost")
    }
}

#[inline]
pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest row of `centers` to `x`; ties go to the lowest index.
pub(crate) fn nearest_row(x: &[f64], centers: &Tensor<f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for c in 0..centers.rows() {
        let d = sq_dist(x, centers.row(c));
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn assign(points: &Tensor<f64>, centers: &Tensor<f64>) -> Vec<(usize, f64)> {
    (0..points.rows())
        .into_par_iter()
        .map(|i| nearest_row(points.row(i), centers))
        .collect()
}

/// Greedy k-means++: each new center is the best of `2 + ln s` D²-weighted
/// candidates by resulting potential.
fn seed_plus_plus(points: &Tensor<f64>, s: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let (m, d) = (points.rows(), points.cols());
    let trials = 2 + (s as f64).ln().floor() as usize;
    let mut centers = Tensor::zeros(&[s, d]);
    let first = rng.random_range(0..m);
    centers.row_mut(0).copy_from_slice(points.row(first));
    let mut dist: Vec<f64> = (0..m).map(|i| sq_dist(points.row(i), points.row(first))).collect();
    for c in 1..s {
        let total: f64 = dist.iter().sum();
        let candidates: Vec<usize> = (0..trials)
            .map(|_| {
                if total > 0.0 {
                    let mut target = rng.random::<f64>() * total;
                    let mut chosen = m - 1;
                    for (i, &w) in dist.iter().enumerate() {
                        if target < w {
                            chosen = i;
                            break;
                        }
                        target -= w;
                    }
                    chosen
                } else {
                    rng.random_range(0..m)
                }
            })
            .collect();
        let (pick, next) = candidates
            .iter()
            .map(|&cand| {
                let nd: Vec<f64> = (0..m)
                    .into_par_iter()
                    .map(|i| dist[i].min(sq_dist(points.row(i), points.row(cand))))
                    .collect();
                (cand, nd)
            })
            .min_by(|a, b| a.1.iter().sum::<f64>().total_cmp(&b.1.iter().sum::<f64>()))
            .unwrap();
        centers.row_mut(c).copy_from_slice(points.row(pick));
        dist = next;
    }
    centers
}

fn update_centers(points: &Tensor<f64>, assignments: &[(usize, f64)], s: usize) -> (Tensor<f64>, Vec<usize>) {
    let d = points.cols();
    let mut sums = Tensor::zeros(&[s, d]);
    let mut counts = vec![0usize; s];
    for (i, &(c, _)) in assignments.iter().enumerate() {
        counts[c] += 1;
        for (acc, &x) in sums.row_mut(c).iter_mut().zip(points.row(i)) {
            *acc += x;
        }
    }
    for c in 0..s {
        if counts[c] > 0 {
            let inv = 1.0 / counts[c] as f64;
            sums.row_mut(c).iter_mut().for_each(|v| *v *= inv);
        }
    }
    (sums, counts)
}

/// Moves each empty cluster onto the farthest point of the currently
/// highest-cost cluster.
fn reseed_empty(
    points: &Tensor<f64>,
    centers: &mut Tensor<f64>,
    assignments: &mut [(usize, f64)],
    counts: &mut [usize],
) {
    let s = counts.len();
    while let Some(empty) = counts.iter().position(|&c| c == 0) {
        let mut cost = vec![0.0; s];
        for &(c, dd) in assignments.iter() {
            cost[c] += dd;
        }
        let worst = (0..s)
            .filter(|&c| counts[c] > 1)
            .max_by(|&a, &b| cost[a].total_cmp(&cost[b]).then(b.cmp(&a)))
            .expect("M >= S guarantees a splittable cluster");
        let far = assignments
            .iter()
            .enumerate()
            .filter(|(_, (c, _))| *c == worst)
            .max_by(|a, b| a.1 .1.total_cmp(&b.1 .1).then(b.0.cmp(&a.0)))
            .map(|(i, _)| i)
            .unwrap();
        centers.row_mut(empty).copy_from_slice(points.row(far));
        assignments[far] = (empty, 0.0);
        counts[worst] -= 1;
        counts[empty] += 1;
    }
}

/// Clusters the rows of `points` (`M × d`) into `s` groups.
///
/// Lloyd's iterations from k-means++ seeding; stops after `max_iters` update
/// steps or when assignments stop changing. The recorded cost sequence is
/// non-increasing.
pub fn kmeans(points: &Tensor<f64>, s: usize, max_iters: usize, seed: u64) -> Result<KMeansResult> {
    let m = if points.is_empty() { 0 } else { points.rows() };
    if m == 0 {
        return Err(Error::InvalidArgument("k-means on empty input".into()));
    }
    if s == 0 || m < s {
        return Err(Error::InvalidArgument(format!(
            "k-means needs 1 <= clusters <= points, got {s} clusters for {m} points"
        )));
    }
    if max_iters == 0 {
        return Err(Error::InvalidArgument("max_iters must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = seed_plus_plus(points, s, &mut rng);
    let mut assignments = assign(points, &centers);
    let mut costs = vec![assignments.iter().map(|a| a.1).sum::<f64>()];
    let mut converged = false;

    for _ in 0..max_iters {
        let (mut next, mut counts) = update_centers(points, &assignments, s);
        let mut reassigned = assignments.clone();
        reseed_empty(points, &mut next, &mut reassigned, &mut counts);
        let fresh = assign(points, &next);
        let cost: f64 = fresh.iter().map(|a| a.1).sum();
        let prev = *costs.last().unwrap();
        if cost > prev {
            // rounding-level regression at a fixpoint; keep the previous state
            converged = true;
            break;
        }
        let unchanged = fresh.iter().zip(&assignments).all(|(a, b)| a.0 == b.0);
        centers = next;
        assignments = fresh;
        costs.push(cost);
        if unchanged {
            converged = true;
            break;
        }
    }

    Ok(KMeansResult {
        centers,
        assignments: assignments.into_iter().map(|a| a.0).collect(),
        costs,
        converged,
    })
}
