//! K-means with k-means++ seeding, centroid-cosine confidences, centroid
//! alignment across re-clusterings and over-clustering based K estimation.

mod hungarian;

pub use hungarian::{hungarian, Assignment};

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::linalg::{cosine, sq_dist, Matrix};
use crate::rng::{derive_seed, SplitMix64};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    /// `k × dim`
    pub centroids: Matrix,
    pub assignments: Vec<usize>,
    /// Cosine between each point and its centroid (0 where undefined).
    pub confidences: Vec<f64>,
    pub k: usize,
    /// Sum of squared distances to the assigned centroids.
    pub inertia: f64,
    /// Inertia after every assignment step, first one included.
    pub inertia_history: Vec<f64>,
}

impl ClusterModel {
    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        self.assignments.iter().for_each(|&a| sizes[a] += 1);
        sizes
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KMeansOptions {
    pub max_iter: usize,
    /// Stop once no centroid moves farther than this.
    pub tol: f64,
    /// Independent k-means++ restarts; the lowest final inertia wins.
    pub n_init: usize,
}

impl Default for KMeansOptions {
    fn default() -> Self {
        Self {
            max_iter: 100,
            tol: 1e-4,
            n_init: 10,
        }
    }
}

fn nearest(point: &[f64], centroids: &Matrix) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, row) in centroids.iter_rows().enumerate() {
        let d = sq_dist(point, row);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// D²-weighted draw; uniform when every weight is zero.
fn weighted_pick(d2: &[f64], total: f64, rng: &mut SplitMix64) -> usize {
    if !(total > 0.0) {
        return rng.below(d2.len());
    }
    let target = rng.next_f64() * total;
    let mut acc = 0.0;
    let mut chosen = None;
    for (i, &w) in d2.iter().enumerate() {
        if w > 0.0 {
            chosen = Some(i);
            acc += w;
            if acc > target {
                break;
            }
        }
    }
    chosen.expect("positive total weight")
}

/// Greedy k-means++: each new centre is the best of `2 + ⌊ln k⌋` D²-weighted
/// candidates, judged by the potential it leaves.
fn plus_plus_init(points: &Matrix, k: usize, rng: &mut SplitMix64) -> Matrix {
    let n = points.rows();
    let trials = 2 + libm::log(k as f64) as usize;
    let mut centroids = Matrix::zeros(k, points.cols());
    let first = rng.below(n);
    centroids.row_mut(0).copy_from_slice(points.row(first));
    let mut d2: Vec<f64> = points.iter_rows().map(|p| sq_dist(p, points.row(first))).collect();
    let mut candidate_d2 = vec![0.0; n];
    let mut best_d2 = vec![0.0; n];
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let mut best: Option<(usize, f64)> = None;
        for _ in 0..trials {
            let cand = weighted_pick(&d2, total, rng);
            let mut potential = 0.0;
            for (i, p) in points.iter_rows().enumerate() {
                candidate_d2[i] = d2[i].min(sq_dist(p, points.row(cand)));
                potential += candidate_d2[i];
            }
            if best.is_none_or(|(_, b)| potential < b) {
                best = Some((cand, potential));
                core::mem::swap(&mut best_d2, &mut candidate_d2);
            }
        }
        let (pick, _) = best.expect("at least one trial");
        centroids.row_mut(c).copy_from_slice(points.row(pick));
        core::mem::swap(&mut d2, &mut best_d2);
    }
    centroids
}

/// Nearest-centroid assignment; returns the inertia.
fn assign(points: &Matrix, centroids: &Matrix, assignments: &mut [usize], dists: &mut [f64]) -> f64 {
    let mut inertia = 0.0;
    for (i, p) in points.iter_rows().enumerate() {
        let (c, d) = nearest(p, centroids);
        assignments[i] = c;
        dists[i] = d;
        inertia += d;
    }
    inertia
}

/// Moves the point farthest from its centroid into each empty cluster.
fn repair_empty(centroids: &mut Matrix, points: &Matrix, assignments: &mut [usize], dists: &mut [f64]) -> f64 {
    let k = centroids.rows();
    let mut sizes = vec![0usize; k];
    assignments.iter().for_each(|&a| sizes[a] += 1);
    for c in 0..k {
        if sizes[c] > 0 {
            continue;
        }
        let donor = (0..assignments.len())
            .filter(|&i| sizes[assignments[i]] > 1)
            .fold(None::<usize>, |best, i| match best {
                Some(b) if dists[b] >= dists[i] => Some(b),
                _ => Some(i),
            });
        let Some(i) = donor else { break };
        sizes[assignments[i]] -= 1;
        sizes[c] = 1;
        assignments[i] = c;
        dists[i] = 0.0;
        centroids.row_mut(c).copy_from_slice(points.row(i));
    }
    dists.iter().sum()
}

fn means(points: &Matrix, assignments: &[usize], previous: &Matrix) -> Matrix {
    let k = previous.rows();
    let mut sums = Matrix::zeros(k, points.cols());
    let mut counts = vec![0usize; k];
    for (p, &a) in points.iter_rows().zip(assignments) {
        crate::linalg::axpy(1.0, p, sums.row_mut(a));
        counts[a] += 1;
    }
    for c in 0..k {
        if counts[c] == 0 {
            sums.row_mut(c).copy_from_slice(previous.row(c));
        } else {
            let inv = 1.0 / counts[c] as f64;
            sums.row_mut(c).iter_mut().for_each(|v| *v *= inv);
        }
    }
    sums
}

/// Lloyd's algorithm from k-means++ starts, keeping the restart with the
/// lowest inertia (earliest on ties). Restart `r` is seeded with
/// `derive_seed(seed, r)`.
pub fn kmeans(points: &Matrix, k: usize, seed: u64, opts: &KMeansOptions) -> Result<ClusterModel> {
    let n = points.rows();
    if k == 0 || n < k {
        return Err(Error::TooFewPoints { points: n, clusters: k });
    }
    if !points.is_finite() {
        return Err(Error::NonFinite("points".into()));
    }
    let mut best: Option<ClusterModel> = None;
    for r in 0..opts.n_init.max(1) {
        let model = lloyd(points, k, derive_seed(seed, r as u64), opts);
        if best.as_ref().is_none_or(|b| model.inertia < b.inertia) {
            best = Some(model);
        }
    }
    Ok(best.expect("at least one restart"))
}

fn lloyd(points: &Matrix, k: usize, seed: u64, opts: &KMeansOptions) -> ClusterModel {
    let n = points.rows();
    let mut rng = SplitMix64::new(seed);
    let mut centroids = plus_plus_init(points, k, &mut rng);
    let mut assignments = vec![0usize; n];
    let mut dists = vec![0.0; n];
    assign(points, &centroids, &mut assignments, &mut dists);
    let mut inertia = repair_empty(&mut centroids, points, &mut assignments, &mut dists);
    let mut history = vec![inertia];
    for _ in 0..opts.max_iter {
        let updated = means(points, &assignments, &centroids);
        let shift = updated
            .iter_rows()
            .zip(centroids.iter_rows())
            .map(|(a, b)| sq_dist(a, b))
            .fold(0.0, f64::max);
        centroids = updated;
        assign(points, &centroids, &mut assignments, &mut dists);
        inertia = repair_empty(&mut centroids, points, &mut assignments, &mut dists);
        history.push(inertia);
        if libm::sqrt(shift) < opts.tol {
            break;
        }
    }
    let confidences = points
        .iter_rows()
        .zip(&assignments)
        .map(|(p, &a)| cosine(p, centroids.row(a)).unwrap_or(0.0))
        .collect();
    ClusterModel {
        centroids,
        assignments,
        confidences,
        k,
        inertia,
        inertia_history: history,
    }
}

/// Cosine similarity between each point and its assigned centroid.
pub fn confidence_scores(model: &ClusterModel, points: &Matrix) -> Result<Vec<f64>> {
    if points.rows() != model.assignments.len() {
        return Err(Error::DimensionMismatch {
            expected: model.assignments.len(),
            actual: points.rows(),
        });
    }
    if points.cols() != model.centroids.cols() {
        return Err(Error::DimensionMismatch {
            expected: model.centroids.cols(),
            actual: points.cols(),
        });
    }
    points
        .iter_rows()
        .zip(&model.assignments)
        .enumerate()
        .map(|(i, (p, &a))| {
            cosine(p, model.centroids.row(a))
                .ok_or_else(|| Error::DegenerateGeometry(format!("zero norm at point {i} or centroid {a}")))
        })
        .collect()
}

/// Correspondence between the clusters of two successive clusterings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentMap {
    /// `old_to_new[i]` is the current cluster matched to previous cluster `i`.
    pub old_to_new: Vec<Option<usize>>,
    /// Current clusters without a previous partner, ascending.
    pub unmatched: Vec<usize>,
    /// Aligned label of each current cluster: matched clusters take their
    /// partner's index, unmatched ones fresh indices from `K_old` upwards.
    pub relabel: Vec<usize>,
}

/// Matches current centroids to previous ones by minimum total squared
/// distance.
pub fn align_centroids(prev: &ClusterModel, cur: &ClusterModel) -> Result<AlignmentMap> {
    let d = prev.centroids.cols();
    if cur.centroids.cols() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            actual: cur.centroids.cols(),
        });
    }
    let k_old = prev.centroids.rows();
    let k_new = cur.centroids.rows();
    let mut old_to_new = vec![None; k_old];
    if k_old <= k_new {
        let mut cost = Matrix::zeros(k_old, k_new);
        for i in 0..k_old {
            for j in 0..k_new {
                cost.set(i, j, sq_dist(prev.centroids.row(i), cur.centroids.row(j)));
            }
        }
        for (i, j) in hungarian(&cost)?.row_to_col.into_iter().enumerate() {
            old_to_new[i] = Some(j);
        }
    } else {
        let mut cost = Matrix::zeros(k_new, k_old);
        for j in 0..k_new {
            for i in 0..k_old {
                cost.set(j, i, sq_dist(prev.centroids.row(i), cur.centroids.row(j)));
            }
        }
        for (j, i) in hungarian(&cost)?.row_to_col.into_iter().enumerate() {
            old_to_new[i] = Some(j);
        }
    }
    let mut relabel = vec![usize::MAX; k_new];
    for (i, j) in old_to_new.iter().enumerate() {
        if let Some(j) = j {
            relabel[*j] = i;
        }
    }
    let mut unmatched = Vec::new();
    let mut fresh = k_old;
    for (j, r) in relabel.iter_mut().enumerate() {
        if *r == usize::MAX {
            *r = fresh;
            fresh += 1;
            unmatched.push(j);
        }
    }
    Ok(AlignmentMap {
        old_to_new,
        unmatched,
        relabel,
    })
}

/// Renames the clusters of `model` through `map.relabel`.
///
/// Needs `K_new ≥ K_old` so the aligned labels stay within `0..k`.
pub fn apply_alignment(model: &ClusterModel, map: &AlignmentMap) -> Result<ClusterModel> {
    if map.relabel.len() != model.k {
        return Err(Error::DimensionMismatch {
            expected: model.k,
            actual: map.relabel.len(),
        });
    }
    if map.relabel.iter().any(|&r| r >= model.k) {
        return Err(Error::InvalidArgument(
            "alignment onto more previous clusters than current ones cannot be applied".into(),
        ));
    }
    let mut centroids = Matrix::zeros(model.k, model.centroids.cols());
    for (j, &r) in map.relabel.iter().enumerate() {
        centroids.row_mut(r).copy_from_slice(model.centroids.row(j));
    }
    Ok(ClusterModel {
        centroids,
        assignments: model.assignments.iter().map(|&a| map.relabel[a]).collect(),
        ..model.clone()
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KEstimate {
    pub k: usize,
    /// Over-clustering size actually used (clamped to the number of points).
    pub k_prime: usize,
    pub clamped: bool,
    /// Expected mean cluster size `N / K′`.
    pub threshold: f64,
    pub cluster_sizes: Vec<usize>,
}

/// Over-clusters with `k_prime` clusters and counts those at least as large as
/// the mean size `N / k_prime`. If none qualifies, returns how many nonempty
/// clusters share the largest size.
pub fn estimate_k(points: &Matrix, k_prime: usize, seed: u64, opts: &KMeansOptions) -> Result<KEstimate> {
    let n = points.rows();
    if n == 0 || k_prime == 0 {
        return Err(Error::TooFewPoints { points: n, clusters: k_prime });
    }
    let clamped = k_prime > n;
    let k_prime = k_prime.min(n);
    let model = kmeans(points, k_prime, seed, opts)?;
    let sizes = model.sizes();
    // size ≥ N/K′  ⇔  size·K′ ≥ N
    let mut k = sizes.iter().filter(|&&s| s * k_prime >= n).count();
    if k == 0 {
        let max = sizes.iter().copied().max().unwrap_or(0);
        k = sizes.iter().filter(|&&s| s == max && s > 0).count();
    }
    Ok(KEstimate {
        k: k.max(1),
        k_prime,
        clamped,
        threshold: n as f64 / k_prime as f64,
        cluster_sizes: sizes,
    })
}
