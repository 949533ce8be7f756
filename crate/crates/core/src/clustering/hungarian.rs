//! Minimum-cost assignment by the Hungarian method with row/column potentials
//! (shortest augmenting paths, O(n²m)).

use alloc::vec;
use alloc::vec::Vec;

use crate::linalg::Matrix;
use crate::{Error, Result};

/// Optimal assignment of every row to a distinct column.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// `row_to_col[i]` is the column assigned to row `i`.
    pub row_to_col: Vec<usize>,
    pub total_cost: f64,
}

/// Solves the rectangular assignment problem for `rows ≤ cols`.
pub fn hungarian(cost: &Matrix) -> Result<Assignment> {
    let n = cost.rows();
    let m = cost.cols();
    if n > m {
        return Err(Error::InvalidArgument(alloc::format!(
            "assignment needs rows <= cols, got {n}x{m}; transpose or pad the matrix"
        )));
    }
    if !cost.is_finite() {
        return Err(Error::NonFinite("cost matrix".into()));
    }
    if n == 0 {
        return Ok(Assignment {
            row_to_col: Vec::new(),
            total_cost: 0.0,
        });
    }
    // 1-based with a virtual column 0
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    let mut col_owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for row in 1..=n {
        col_owner[0] = row;
        let mut j0 = 0;
        let mut min_v = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = col_owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let reduced = cost.get(i0 - 1, j - 1) - u[i0] - v[j];
                if reduced < min_v[j] {
                    min_v[j] = reduced;
                    way[j] = j0;
                }
                if min_v[j] < delta {
                    delta = min_v[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[col_owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    min_v[j] -= delta;
                }
            }
            j0 = j1;
            if col_owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            col_owner[j0] = col_owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![0usize; n];
    for j in 1..=m {
        if col_owner[j] != 0 {
            row_to_col[col_owner[j] - 1] = j - 1;
        }
    }
    let total_cost = row_to_col
        .iter()
        .enumerate()
        .map(|(i, &j)| cost.get(i, j))
        .sum();
    Ok(Assignment {
        row_to_col,
        total_cost,
    })
}
