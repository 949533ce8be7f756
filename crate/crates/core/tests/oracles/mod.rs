//! Independent reference implementations used only by tests.
//!
//! Nothing here calls the code paths being checked: gradients are compared
//! against central differences of the loss value, the assignment solver
//! against exhaustive permutation search, and the metrics against direct
//! pair-counting and mapping enumeration.

#![allow(dead_code)]

use std::collections::HashMap;

use cdi_core::encoder::{EncoderParams, Gradients};

pub const FD_EPS: f64 = 1e-4;
pub const FD_REL_TOL: f64 = 1e-4;

/// Worst relative error between analytic gradient and central differences,
/// measured as `|a − fd| / (|a| + 1e-8)` over every parameter coordinate.
pub fn max_fd_error<F>(params: &EncoderParams, grads: &Gradients, loss: F) -> (f64, usize)
where
    F: Fn(&EncoderParams) -> f64,
{
    let analytic: Vec<f64> = grads.slices().into_iter().flatten().copied().collect();
    let mut worst = 0.0f64;
    for k in 0..analytic.len() {
        let plus = nudge(params, k, FD_EPS);
        let minus = nudge(params, k, -FD_EPS);
        let fd = (loss(&plus) - loss(&minus)) / (2.0 * FD_EPS);
        let rel = (analytic[k] - fd).abs() / (analytic[k].abs() + 1e-8);
        worst = worst.max(rel);
    }
    (worst, analytic.len())
}

fn nudge(params: &EncoderParams, flat: usize, delta: f64) -> EncoderParams {
    let mut p = params.clone();
    let mut k = flat;
    for s in p.slices_mut() {
        if k < s.len() {
            s[k] += delta;
            return p;
        }
        k -= s.len();
    }
    panic!("coordinate {flat} out of range");
}

/// Minimum assignment cost by trying every injective row → column map.
pub fn brute_force_assignment(cost: &[Vec<f64>]) -> f64 {
    fn go(cost: &[Vec<f64>], row: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
        if row == cost.len() {
            *best = best.min(acc);
            return;
        }
        for j in 0..used.len() {
            if !used[j] {
                used[j] = true;
                go(cost, row + 1, used, acc + cost[row][j], best);
                used[j] = false;
            }
        }
    }
    let cols = cost.first().map_or(0, Vec::len);
    let mut best = f64::INFINITY;
    go(cost, 0, &mut vec![false; cols], 0.0, &mut best);
    best
}

fn entropy_of(counts: impl Iterator<Item = usize>, n: f64) -> f64 {
    counts
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// NMI through `I = H(U) + H(V) − H(U, V)` on hash-map counts.
pub fn nmi_oracle(a: &[usize], b: &[usize]) -> f64 {
    let n = a.len() as f64;
    let mut ca: HashMap<usize, usize> = HashMap::new();
    let mut cb: HashMap<usize, usize> = HashMap::new();
    let mut cab: HashMap<(usize, usize), usize> = HashMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *ca.entry(x).or_default() += 1;
        *cb.entry(y).or_default() += 1;
        *cab.entry((x, y)).or_default() += 1;
    }
    let ha = entropy_of(ca.values().copied(), n);
    let hb = entropy_of(cb.values().copied(), n);
    let hab = entropy_of(cab.values().copied(), n);
    // identical partitions up to renaming
    if cab.len() == ca.len() && cab.len() == cb.len() {
        return 1.0;
    }
    if ha == 0.0 || hb == 0.0 {
        return 0.0;
    }
    ((ha + hb - hab) / (ha * hb).sqrt()).clamp(0.0, 1.0)
}

/// ARI from the four pair-agreement counts.
pub fn ari_oracle(a: &[usize], b: &[usize]) -> f64 {
    let (mut ss, mut sd, mut ds, mut dd) = (0f64, 0f64, 0f64, 0f64);
    for i in 0..a.len() {
        for j in i + 1..a.len() {
            match (a[i] == a[j], b[i] == b[j]) {
                (true, true) => ss += 1.0,
                (true, false) => sd += 1.0,
                (false, true) => ds += 1.0,
                (false, false) => dd += 1.0,
            }
        }
    }
    let den = (ss + sd) * (sd + dd) + (ss + ds) * (ds + dd);
    if den == 0.0 {
        return 1.0;
    }
    2.0 * (ss * dd - sd * ds) / den
}

/// Best accuracy over every injective (partial) map of clusters to classes.
pub fn acc_oracle(truth: &[usize], pred: &[usize]) -> f64 {
    let mut clusters: Vec<usize> = pred.to_vec();
    clusters.sort_unstable();
    clusters.dedup();
    let mut classes: Vec<usize> = truth.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let mut best = 0usize;
    let mut mapping: Vec<Option<usize>> = vec![None; clusters.len()];
    fn go(
        idx: usize,
        clusters: &[usize],
        classes: &[usize],
        used: &mut Vec<bool>,
        mapping: &mut Vec<Option<usize>>,
        truth: &[usize],
        pred: &[usize],
        best: &mut usize,
    ) {
        if idx == clusters.len() {
            let hits = truth
                .iter()
                .zip(pred)
                .filter(|(t, p)| {
                    let ci = clusters.iter().position(|c| c == *p).unwrap();
                    mapping[ci] == Some(**t)
                })
                .count();
            *best = (*best).max(hits);
            return;
        }
        go(idx + 1, clusters, classes, used, mapping, truth, pred, best);
        for (k, &cls) in classes.iter().enumerate() {
            if !used[k] {
                used[k] = true;
                mapping[idx] = Some(cls);
                go(idx + 1, clusters, classes, used, mapping, truth, pred, best);
                mapping[idx] = None;
                used[k] = false;
            }
        }
    }
    let mut used = vec![false; classes.len()];
    go(0, &clusters, &classes, &mut used, &mut mapping, truth, pred, &mut best);
    best as f64 / truth.len() as f64
}

/// Fraction of points whose nearest centre (by brute force) is their own.
pub fn nearest_center_accuracy(points: &[Vec<f64>], labels: &[usize], centers: &[Vec<f64>]) -> f64 {
    let hits = points
        .iter()
        .zip(labels)
        .filter(|(p, &y)| {
            let d = |c: &Vec<f64>| p.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            let best = (0..centers.len())
                .min_by(|&i, &j| d(&centers[i]).partial_cmp(&d(&centers[j])).unwrap())
                .unwrap();
            best == y
        })
        .count();
    hits as f64 / points.len() as f64
}

/// Contrastive loss evaluated straight from its definition on given views.
pub fn ucl_formula(anchors: &[Vec<f64>], positives: &[Vec<f64>], tau: f64) -> f64 {
    let cos = |a: &Vec<f64>, b: &Vec<f64>| {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    };
    let n = anchors.len();
    let mut total = 0.0;
    for i in 0..n {
        let num = (cos(&anchors[i], &positives[i]) / tau).exp();
        let den: f64 = (0..n).map(|j| (cos(&anchors[i], &positives[j]) / tau).exp()).sum();
        total -= (num / den).ln();
    }
    total / n as f64
}

/// Tiny deterministic generator so oracle inputs do not depend on the crate's RNG.
pub struct Lcg(pub u64);

impl Lcg {
    pub fn next_u64(&mut self) -> u64 {
        self.0 = self.0.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        self.0 >> 11
    }

    pub fn uniform(&mut self) -> f64 {
        self.next_u64() as f64 / (1u64 << 53) as f64
    }

    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn below(&mut self, n: usize) -> usize {
        (self.next_u64() % n as u64) as usize
    }
}
