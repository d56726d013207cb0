//! Exact minimum-cost assignment on square matrices.

use crate::error::{Error, Result};

/// Solves the n x n minimum-cost assignment problem in O(n^3) by shortest
/// augmenting paths over dual potentials. `costs` is row-major and must be
/// finite. Returns the column chosen for each row and the total cost.
pub fn solve(costs: &[f64], n: usize) -> Result<(Vec<usize>, f64)> {
    if n == 0 {
        return Err(Error::InvalidArgument("assignment needs at least one row".into()));
    }
    if costs.len() != n * n {
        return Err(Error::Shape(format!("cost matrix has {} entries for n={n}", costs.len())));
    }
    if costs.iter().any(|c| !c.is_finite()) {
        return Err(Error::InvalidArgument("assignment costs must be finite".into()));
    }

    // 1-indexed duals and matching; p[j] is the row matched to column j.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = costs[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut row_to_col = vec![0usize; n];
    for j in 1..=n {
        row_to_col[p[j] - 1] = j - 1;
    }
    let total = (0..n).map(|i| costs[i * n + row_to_col[i]]).sum();
    Ok((row_to_col, total))
}
