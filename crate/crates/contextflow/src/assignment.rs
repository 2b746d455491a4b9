//! Exact minimum-cost assignment via the Hungarian algorithm with potentials
//! (shortest augmenting paths, O(n^2 m) for an n x m cost matrix, n <= m).

use ndarray::Array2;

use crate::error::{Error, Result};

/// Assign each row to a distinct column minimizing total cost.
///
/// Requires `nrows <= ncols` and finite costs. Returns the column chosen for
/// each row and the optimal total cost.
pub fn solve_assignment(cost: &Array2<f64>) -> Result<(Vec<usize>, f64)> {
    let n = cost.nrows();
    let m = cost.ncols();
    if n == 0 {
        return Ok((Vec::new(), 0.0));
    }
    if n > m {
        return Err(Error::ShapeMismatch {
            context: "assignment",
            expected: "nrows <= ncols".to_string(),
            actual: format!("{n} x {m}"),
        });
    }
    for ((r, c), v) in cost.indexed_iter() {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                context: "assignment cost".to_string(),
                location: format!("row {r}, column {c}"),
            });
        }
    }

    // 1-indexed arrays with a virtual column 0 holding the row being inserted.
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut assigned_row = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];

    for i in 1..=n {
        assigned_row[0] = i;
        let mut j0 = 0usize;
        let mut min_reduced = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = assigned_row[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=m {
                if !used[j] {
                    let cur = cost[[i0 - 1, j - 1]] - u[i0] - v[j];
                    if cur < min_reduced[j] {
                        min_reduced[j] = cur;
                        way[j] = j0;
                    }
                    if min_reduced[j] < delta {
                        delta = min_reduced[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[assigned_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    min_reduced[j] -= delta;
                }
            }
            j0 = j1;
            if assigned_row[j0] == 0 {
                break;
            }
        }
        // Walk the augmenting path back, flipping assignments.
        loop {
            let j1 = way[j0];
            assigned_row[j0] = assigned_row[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut assignment = vec![usize::MAX; n];
    for j in 1..=m {
        if assigned_row[j] != 0 {
            assignment[assigned_row[j] - 1] = j - 1;
        }
    }
    let total = assignment
        .iter()
        .enumerate()
        .map(|(i, &j)| cost[[i, j]])
        .sum();
    Ok((assignment, total))
}
