//! External clustering metrics: NMI, ARI and Hungarian-matched accuracy.
//!
//! All functions accept any ordered label type, so gold intent names and
//! integer cluster ids can be compared directly.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use crate::clustering::hungarian;
use crate::linalg::Matrix;
use crate::{Error, Result};

/// Contingency counts between two labelings.
struct Contingency {
    n: usize,
    /// `table[i][j]` = points with true class `i` and predicted cluster `j`.
    table: Vec<Vec<u64>>,
    row_sums: Vec<u64>,
    col_sums: Vec<u64>,
}

fn dense_ids<T: Ord>(labels: &[T]) -> (Vec<usize>, usize) {
    let mut ids = BTreeMap::new();
    let out = labels
        .iter()
        .map(|l| {
            let next = ids.len();
            *ids.entry(l).or_insert(next)
        })
        .collect();
    (out, ids.len())
}

fn contingency<T: Ord, U: Ord>(y_true: &[T], y_pred: &[U], min_len: usize) -> Result<Contingency> {
    if y_true.len() != y_pred.len() {
        return Err(Error::DimensionMismatch {
            expected: y_true.len(),
            actual: y_pred.len(),
        });
    }
    if y_true.len() < min_len {
        return Err(Error::InvalidArgument(alloc::format!(
            "need at least {min_len} labels, got {}",
            y_true.len()
        )));
    }
    let (t, nt) = dense_ids(y_true);
    let (p, np) = dense_ids(y_pred);
    let mut table = vec![vec![0u64; np]; nt];
    for (&a, &b) in t.iter().zip(&p) {
        table[a][b] += 1;
    }
    let row_sums = table.iter().map(|r| r.iter().sum()).collect();
    let col_sums = (0..np).map(|j| table.iter().map(|r| r[j]).sum()).collect();
    Ok(Contingency {
        n: y_true.len(),
        table,
        row_sums,
        col_sums,
    })
}

fn entropy(counts: &[u64], n: f64) -> f64 {
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * libm::log(p)
        })
        .sum()
}

/// Normalized mutual information with geometric-mean normalisation.
///
/// Two single-cluster labelings score 1; a single-cluster labeling against a
/// non-trivial one scores 0.
pub fn nmi<T: Ord, U: Ord>(y_true: &[T], y_pred: &[U]) -> Result<f64> {
    let c = contingency(y_true, y_pred, 1)?;
    let n = c.n as f64;
    let h_true = entropy(&c.row_sums, n);
    let h_pred = entropy(&c.col_sums, n);
    let is_bijection = c.row_sums.len() == c.col_sums.len()
        && c.table.iter().all(|r| r.iter().filter(|&&v| v > 0).count() == 1);
    if is_bijection {
        return Ok(1.0);
    }
    if h_true == 0.0 || h_pred == 0.0 {
        return Ok(0.0);
    }
    let mut mi = 0.0;
    for (i, row) in c.table.iter().enumerate() {
        for (j, &nij) in row.iter().enumerate() {
            if nij > 0 {
                let nij = nij as f64;
                mi += nij / n * libm::log(n * nij / (c.row_sums[i] as f64 * c.col_sums[j] as f64));
            }
        }
    }
    Ok((mi / libm::sqrt(h_true * h_pred)).clamp(0.0, 1.0))
}

fn pairs(x: u64) -> u128 {
    let x = u128::from(x);
    x * x.saturating_sub(1) / 2
}

/// Adjusted Rand index, evaluated in exact integer arithmetic up to the final
/// division.
pub fn ari<T: Ord, U: Ord>(y_true: &[T], y_pred: &[U]) -> Result<f64> {
    let c = contingency(y_true, y_pred, 2)?;
    let index: u128 = c.table.iter().flatten().map(|&v| pairs(v)).sum();
    let sum_a: u128 = c.row_sums.iter().map(|&v| pairs(v)).sum();
    let sum_b: u128 = c.col_sums.iter().map(|&v| pairs(v)).sum();
    let total = pairs(c.n as u64);
    // (index − E) / (M − E) with E = ΣaΣb/C(n,2) and M = (Σa+Σb)/2, scaled by 2·C(n,2)
    let num = 2 * (index * total) as i128 - 2 * (sum_a * sum_b) as i128;
    let den = ((sum_a + sum_b) * total) as i128 - 2 * (sum_a * sum_b) as i128;
    if den == 0 {
        return Ok(1.0);
    }
    Ok(num as f64 / den as f64)
}

/// Accuracy under the best injective mapping of predicted clusters to classes.
pub fn clustering_accuracy<T: Ord, U: Ord>(y_true: &[T], y_pred: &[U]) -> Result<f64> {
    let c = contingency(y_true, y_pred, 1)?;
    let classes = c.row_sums.len();
    let clusters = c.col_sums.len();
    let max = c.table.iter().flatten().copied().max().unwrap_or(0) as f64;
    // minimise (max − count) so every entry stays nonnegative
    let cost = if clusters <= classes {
        let mut m = Matrix::zeros(clusters, classes);
        for (i, row) in c.table.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                m.set(j, i, max - v as f64);
            }
        }
        m
    } else {
        let mut m = Matrix::zeros(classes, clusters);
        for (i, row) in c.table.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                m.set(i, j, max - v as f64);
            }
        }
        m
    };
    let a = hungarian(&cost)?;
    let matched = a.row_to_col.len() as f64 * max - a.total_cost;
    Ok(matched / c.n as f64)
}

/// The (ACC, ARI, NMI) triple reported for every evaluation.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MetricTriple {
    pub acc: f64,
    pub ari: f64,
    pub nmi: f64,
}

pub fn evaluate_labels<T: Ord, U: Ord>(y_true: &[T], y_pred: &[U]) -> Result<MetricTriple> {
    Ok(MetricTriple {
        acc: clustering_accuracy(y_true, y_pred)?,
        ari: ari(y_true, y_pred)?,
        nmi: nmi(y_true, y_pred)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nmi_cases() {
        assert_eq!(nmi(&[0, 0, 1, 1], &[5, 5, 7, 7]).unwrap(), 1.0);
        assert_eq!(nmi(&[0, 0, 1, 1], &[0, 0, 0, 0]).unwrap(), 0.0);
        assert_eq!(nmi(&[0, 0, 1, 1], &[0, 1, 0, 1]).unwrap(), 0.0);
        assert_eq!(nmi(&[3, 3, 3], &["a", "a", "a"]).unwrap(), 1.0);
        assert!(nmi(&[0, 1], &[0]).is_err());
    }

    #[test]
    fn ari_cases() {
        assert_eq!(ari(&[0, 0, 1, 1], &[1, 1, 0, 0]).unwrap(), 1.0);
        assert_eq!(ari(&[0, 0, 1, 1], &[0, 0, 1, 2]).unwrap(), 4.0 / 7.0);
        assert!(ari(&[0], &[0]).is_err());
        assert!(ari(&[0, 1], &[0]).is_err());
    }

    #[test]
    fn acc_cases() {
        assert_eq!(clustering_accuracy(&[0, 0, 1, 1], &[1, 1, 0, 0]).unwrap(), 1.0);
        assert_eq!(clustering_accuracy(&[0, 1, 2, 0, 1, 2], &[9; 6]).unwrap(), 1.0 / 3.0);
        assert_eq!(clustering_accuracy(&["a", "a", "b"], &[0, 1, 2]).unwrap(), 2.0 / 3.0);
    }
}
