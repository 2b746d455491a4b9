//! Spatial priors: radius neighborhoods, neighborhood-mean expression profiles,
//! spatial-smoothness and ligand-receptor dissimilarity matrices, and their
//! combination into the transitional plausibility matrix.

use std::collections::HashMap;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::slice::SpatialSlice;

/// Exhaustive scan is faster than grid bucketing below this cell count.
const GRID_THRESHOLD: usize = 256;

/// Per-cell lists of all cells within Euclidean radius `radius`, self included.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NeighborIndex {
    pub radius: f64,
    /// `lists[k]` holds the indices of the neighbors of cell `k`, ascending.
    pub lists: Vec<Vec<usize>>,
}

impl NeighborIndex {
    pub fn n(&self) -> usize {
        self.lists.len()
    }
}

/// Nonnegative transition-implausibility costs between the cells of two slices,
/// together with the trade-off weight used to build them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlausibilityMatrix {
    pub values: Array2<f64>,
    pub lambda: f64,
}

/// Default neighborhood radius: 5% of the coordinate bounding-box diagonal.
pub fn default_radius(slice: &SpatialSlice) -> f64 {
    let mut min = [f64::INFINITY; 2];
    let mut max = [f64::NEG_INFINITY; 2];
    for row in slice.coords.rows() {
        for a in 0..2 {
            min[a] = min[a].min(row[a]);
            max[a] = max[a].max(row[a]);
        }
    }
    let diag = ((max[0] - min[0]).powi(2) + (max[1] - min[1]).powi(2)).sqrt();
    if diag > 0.0 {
        0.05 * diag
    } else {
        // Degenerate layout (all cells at one point): any positive radius works.
        1.0
    }
}

/// Collect, for every cell, the indices of all cells within `radius` (self included).
///
/// Uses a uniform grid bucketed at cell size `radius` for larger slices and an
/// exhaustive scan below [`GRID_THRESHOLD`]; both produce identical sorted lists.
pub fn build_neighbor_index(slice: &SpatialSlice, radius: f64) -> Result<NeighborIndex> {
    if !radius.is_finite() || radius <= 0.0 {
        return Err(Error::InvalidParameter {
            name: "radius",
            message: "must be positive",
            value: radius,
        });
    }
    let n = slice.n();
    if n == 0 {
        return Err(Error::EmptySlice);
    }
    let coords = &slice.coords;
    let r2 = radius * radius;
    let lists = if n < GRID_THRESHOLD {
        let mut lists = vec![Vec::new(); n];
        for k in 0..n {
            for l in 0..n {
                let dx = coords[[k, 0]] - coords[[l, 0]];
                let dy = coords[[k, 1]] - coords[[l, 1]];
                if dx * dx + dy * dy <= r2 {
                    lists[k].push(l);
                }
            }
        }
        lists
    } else {
        // Bucket cells on a grid of pitch `radius`; candidates live in the 3x3
        // block of buckets around the query cell.
        let key = |x: f64, y: f64| -> (i64, i64) {
            ((x / radius).floor() as i64, (y / radius).floor() as i64)
        };
        let mut buckets: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
        for k in 0..n {
            buckets
                .entry(key(coords[[k, 0]], coords[[k, 1]]))
                .or_default()
                .push(k);
        }
        let mut lists = vec![Vec::new(); n];
        for k in 0..n {
            let (bx, by) = key(coords[[k, 0]], coords[[k, 1]]);
            for gx in bx - 1..=bx + 1 {
                for gy in by - 1..=by + 1 {
                    if let Some(candidates) = buckets.get(&(gx, gy)) {
                        for &l in candidates {
                            let dx = coords[[k, 0]] - coords[[l, 0]];
                            let dy = coords[[k, 1]] - coords[[l, 1]];
                            if dx * dx + dy * dy <= r2 {
                                lists[k].push(l);
                            }
                        }
                    }
                }
            }
            lists[k].sort_unstable();
        }
        lists
    };
    Ok(NeighborIndex { radius, lists })
}

/// Arithmetic mean of the expression rows over the neighborhood of cell `k`.
pub fn neighborhood_mean_expression(
    slice: &SpatialSlice,
    index: &NeighborIndex,
    k: usize,
) -> Result<Array1<f64>> {
    if index.n() != slice.n() {
        return Err(Error::ShapeMismatch {
            context: "neighbor index",
            expected: format!("{} cells", slice.n()),
            actual: format!("{} cells", index.n()),
        });
    }
    if k >= slice.n() {
        return Err(Error::IndexOutOfRange {
            context: "cell index",
            index: k,
            len: slice.n(),
        });
    }
    Ok(mean_rows(&slice.expr, &index.lists[k]))
}

fn mean_rows(m: &Array2<f64>, rows: &[usize]) -> Array1<f64> {
    let mut acc = Array1::zeros(m.ncols());
    for &r in rows {
        acc += &m.row(r);
    }
    acc / rows.len() as f64
}

/// All neighborhood means of a matrix at once, one row per cell.
fn neighborhood_means(m: &Array2<f64>, index: &NeighborIndex) -> Array2<f64> {
    let mut out = Array2::zeros((index.n(), m.ncols()));
    for k in 0..index.n() {
        out.row_mut(k).assign(&mean_rows(m, &index.lists[k]));
    }
    out
}

fn squared_distance_matrix(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros((a.nrows(), b.nrows()));
    for k in 0..a.nrows() {
        for l in 0..b.nrows() {
            let mut acc = 0.0;
            for c in 0..a.ncols() {
                let d = a[[k, c]] - b[[l, c]];
                acc += d * d;
            }
            out[[k, l]] = acc;
        }
    }
    out
}

/// Spatial-smoothness dissimilarity: entry `(k, l)` is the squared L2 distance
/// between the neighborhood-mean expression of cell `k` in `slice_a` and cell `l`
/// in `slice_b`, with neighborhoods of radius `radius` inside each slice.
pub fn spatial_smoothness(
    slice_a: &SpatialSlice,
    slice_b: &SpatialSlice,
    radius: f64,
) -> Result<Array2<f64>> {
    spatial_smoothness_with_radii(slice_a, slice_b, radius, radius)
}

/// Ligand-receptor dissimilarity: entry `(k, l)` is the squared L2 distance
/// between the neighborhood-mean LR feature vectors of the two cells.
pub fn lr_dissimilarity(
    slice_a: &SpatialSlice,
    slice_b: &SpatialSlice,
    radius: f64,
) -> Result<Array2<f64>> {
    lr_dissimilarity_with_radii(slice_a, slice_b, radius, radius)
}

/// Local ligand-receptor activity score.
///
/// For cell `k` and pair `m`, takes the ligand-gene expression over the
/// neighborhood of `k` (fixed ascending neighbor order) and the matching
/// receptor-gene vector, and returns their cosine similarity; 0 when either
/// vector has zero norm.
pub fn local_lr_score(
    slice: &SpatialSlice,
    ligand_cols: &[usize],
    receptor_cols: &[usize],
    radius: f64,
) -> Result<Array2<f64>> {
    if ligand_cols.is_empty() || ligand_cols.len() != receptor_cols.len() {
        return Err(Error::InvalidParameter {
            name: "lr pairs",
            message: "need equal, nonzero numbers of ligand and receptor columns",
            value: ligand_cols.len() as f64,
        });
    }
    let d = slice.dim();
    for &c in ligand_cols.iter().chain(receptor_cols) {
        if c >= d {
            return Err(Error::IndexOutOfRange {
                context: "gene column",
                index: c,
                len: d,
            });
        }
    }
    let index = build_neighbor_index(slice, radius)?;
    let n = slice.n();
    let p = ligand_cols.len();
    let mut out = Array2::zeros((n, p));
    for k in 0..n {
        let neighbors = &index.lists[k];
        for m in 0..p {
            let mut dot = 0.0;
            let mut norm_l = 0.0;
            let mut norm_r = 0.0;
            for &j in neighbors {
                let lig = slice.expr[[j, ligand_cols[m]]];
                let rec = slice.expr[[j, receptor_cols[m]]];
                dot += lig * rec;
                norm_l += lig * lig;
                norm_r += rec * rec;
            }
            out[[k, m]] = if norm_l > 0.0 && norm_r > 0.0 {
                dot / (norm_l.sqrt() * norm_r.sqrt())
            } else {
                0.0
            };
        }
    }
    Ok(out)
}

/// Combine spatial-smoothness and ligand-receptor dissimilarities into the
/// transitional plausibility matrix: `lambda * ss + (1 - lambda) * lr`.
///
/// `lr` may be omitted only when `lambda == 1`.
pub fn build_tpm(
    ss: &Array2<f64>,
    lr: Option<&Array2<f64>>,
    lambda: f64,
) -> Result<PlausibilityMatrix> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidParameter {
            name: "lambda",
            message: "must lie in [0, 1]",
            value: lambda,
        });
    }
    let values = match lr {
        Some(lr) => {
            if lr.dim() != ss.dim() {
                return Err(Error::ShapeMismatch {
                    context: "tpm inputs",
                    expected: format!("{:?}", ss.dim()),
                    actual: format!("{:?}", lr.dim()),
                });
            }
            let mut out = Array2::zeros(ss.raw_dim());
            for ((k, l), v) in out.indexed_iter_mut() {
                *v = lambda * ss[[k, l]] + (1.0 - lambda) * lr[[k, l]];
            }
            out
        }
        None => {
            if lambda < 1.0 {
                return Err(Error::InvalidParameter {
                    name: "lambda",
                    message: "must be 1 when lr dissimilarity is absent",
                    value: lambda,
                });
            }
            ss.clone()
        }
    };
    Ok(PlausibilityMatrix { values, lambda })
}

/// Build the plausibility matrix for a pair of slices from scratch: spatial
/// smoothness at `radius` (per-slice default when `None`), plus LR dissimilarity
/// when both slices carry LR features and `lambda < 1`.
pub fn tpm_for_pair(
    slice_a: &SpatialSlice,
    slice_b: &SpatialSlice,
    lambda: f64,
    radius: Option<f64>,
) -> Result<PlausibilityMatrix> {
    let r_a = radius.unwrap_or_else(|| default_radius(slice_a));
    let r_b = radius.unwrap_or_else(|| default_radius(slice_b));
    let ss = spatial_smoothness_with_radii(slice_a, slice_b, r_a, r_b)?;
    let lr = if lambda < 1.0 {
        Some(lr_dissimilarity_with_radii(slice_a, slice_b, r_a, r_b)?)
    } else {
        None
    };
    build_tpm(&ss, lr.as_ref(), lambda)
}

fn spatial_smoothness_with_radii(
    slice_a: &SpatialSlice,
    slice_b: &SpatialSlice,
    r_a: f64,
    r_b: f64,
) -> Result<Array2<f64>> {
    if slice_a.dim() != slice_b.dim() {
        return Err(Error::ShapeMismatch {
            context: "spatial smoothness feature dimension",
            expected: format!("{}", slice_a.dim()),
            actual: format!("{}", slice_b.dim()),
        });
    }
    let idx_a = build_neighbor_index(slice_a, r_a)?;
    let idx_b = build_neighbor_index(slice_b, r_b)?;
    let means_a = neighborhood_means(&slice_a.expr, &idx_a);
    let means_b = neighborhood_means(&slice_b.expr, &idx_b);
    Ok(squared_distance_matrix(&means_a, &means_b))
}

fn lr_dissimilarity_with_radii(
    slice_a: &SpatialSlice,
    slice_b: &SpatialSlice,
    r_a: f64,
    r_b: f64,
) -> Result<Array2<f64>> {
    let lr_a = slice_a.lr.as_ref().ok_or(Error::MissingLrFeatures)?;
    let lr_b = slice_b.lr.as_ref().ok_or(Error::MissingLrFeatures)?;
    if lr_a.ncols() != lr_b.ncols() {
        return Err(Error::ShapeMismatch {
            context: "lr feature dimension",
            expected: format!("{}", lr_a.ncols()),
            actual: format!("{}", lr_b.ncols()),
        });
    }
    let idx_a = build_neighbor_index(slice_a, r_a)?;
    let idx_b = build_neighbor_index(slice_b, r_b)?;
    let means_a = neighborhood_means(lr_a, &idx_a);
    let means_b = neighborhood_means(lr_b, &idx_b);
    Ok(squared_distance_matrix(&means_a, &means_b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn slice_from(expr: Array2<f64>, coords: Array2<f64>) -> SpatialSlice {
        SpatialSlice::new(0.0, expr, coords, None, None).unwrap()
    }

    fn random_slice(rng: &mut ChaCha8Rng, n: usize, d: usize, p: Option<usize>) -> SpatialSlice {
        let expr = Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0));
        let coords = Array2::from_shape_fn((n, 2), |_| rng.random_range(0.0..4.0));
        let lr = p.map(|p| Array2::from_shape_fn((n, p), |_| rng.random_range(-1.0..1.0)));
        SpatialSlice::new(0.0, expr, coords, lr, None).unwrap()
    }

    /// Naive recomputation of neighborhood means and squared distances.
    fn naive_ss(a: &SpatialSlice, b: &SpatialSlice, r: f64) -> Array2<f64> {
        let nb = |s: &SpatialSlice, k: usize| -> Array1<f64> {
            let mut acc = Array1::zeros(s.dim());
            let mut count = 0.0;
            for l in 0..s.n() {
                let dx = s.coords[[k, 0]] - s.coords[[l, 0]];
                let dy = s.coords[[k, 1]] - s.coords[[l, 1]];
                if (dx * dx + dy * dy).sqrt() <= r {
                    acc += &s.expr.row(l);
                    count += 1.0;
                }
            }
            acc / count
        };
        let mut out = Array2::zeros((a.n(), b.n()));
        for k in 0..a.n() {
            for l in 0..b.n() {
                let diff = &nb(a, k) - &nb(b, l);
                out[[k, l]] = diff.iter().map(|v| v * v).sum();
            }
        }
        out
    }

    #[test]
    fn collinear_cells_radius_window() {
        let s = slice_from(
            array![[0.0], [0.0], [0.0]],
            array![[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]],
        );
        let idx = build_neighbor_index(&s, 1.1).unwrap();
        assert_eq!(idx.lists, vec![vec![0, 1], vec![0, 1, 2], vec![1, 2]]);
    }

    #[test]
    fn tiny_radius_gives_singletons_and_large_gives_all() {
        let s = slice_from(
            array![[0.0], [0.0], [0.0]],
            array![[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]],
        );
        let idx = build_neighbor_index(&s, 0.5).unwrap();
        assert_eq!(idx.lists, vec![vec![0], vec![1], vec![2]]);
        let idx = build_neighbor_index(&s, 10.0).unwrap();
        assert!(idx.lists.iter().all(|l| l == &vec![0, 1, 2]));
    }

    #[test]
    fn non_positive_radius_rejected() {
        let s = slice_from(array![[0.0]], array![[0.0, 0.0]]);
        assert!(build_neighbor_index(&s, 0.0).is_err());
        assert!(build_neighbor_index(&s, -1.0).is_err());
    }

    #[test]
    fn grid_matches_exhaustive_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = GRID_THRESHOLD + 40;
        let expr = Array2::zeros((n, 1));
        let coords = Array2::from_shape_fn((n, 2), |_| rng.random_range(0.0..10.0));
        let s = slice_from(expr, coords);
        let grid = build_neighbor_index(&s, 0.9).unwrap();
        // Exhaustive reference on the same data.
        let mut reference = vec![Vec::new(); n];
        for (k, list) in reference.iter_mut().enumerate() {
            for l in 0..n {
                let dx = s.coords[[k, 0]] - s.coords[[l, 0]];
                let dy = s.coords[[k, 1]] - s.coords[[l, 1]];
                if dx * dx + dy * dy <= 0.81 {
                    list.push(l);
                }
            }
        }
        assert_eq!(grid.lists, reference);
    }

    #[test]
    fn isolated_cell_mean_is_own_row() {
        let s = slice_from(
            array![[3.0, 4.0], [5.0, 6.0]],
            array![[0.0, 0.0], [100.0, 0.0]],
        );
        let idx = build_neighbor_index(&s, 1.0).unwrap();
        let mean = neighborhood_mean_expression(&s, &idx, 0).unwrap();
        assert_eq!(mean, array![3.0, 4.0]);
    }

    #[test]
    fn two_neighbor_mean_is_average() {
        let s = slice_from(array![[0.0, 2.0], [2.0, 0.0]], array![[0.0, 0.0], [0.5, 0.0]]);
        let idx = build_neighbor_index(&s, 1.0).unwrap();
        let mean = neighborhood_mean_expression(&s, &idx, 0).unwrap();
        assert_eq!(mean, array![1.0, 1.0]);
    }

    #[test]
    fn mean_matches_per_cell_summation_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let s = random_slice(&mut rng, 5, 3, None);
        let idx = build_neighbor_index(&s, 1.5).unwrap();
        for k in 0..s.n() {
            let mean = neighborhood_mean_expression(&s, &idx, k).unwrap();
            let mut acc = Array1::zeros(3);
            for &j in &idx.lists[k] {
                acc += &s.expr.row(j);
            }
            acc /= idx.lists[k].len() as f64;
            for (a, b) in mean.iter().zip(acc.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn smoothness_zero_on_identical_slices_diagonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = random_slice(&mut rng, 6, 4, None);
        let ss = spatial_smoothness(&s, &s, 1.0).unwrap();
        for k in 0..s.n() {
            assert_eq!(ss[[k, k]], 0.0);
        }
    }

    #[test]
    fn smoothness_singletons() {
        let a = slice_from(array![[0.0, 0.0]], array![[0.0, 0.0]]);
        let b = slice_from(array![[3.0, 4.0]], array![[0.0, 0.0]]);
        let ss = spatial_smoothness(&a, &b, 1.0).unwrap();
        assert!((ss[[0, 0]] - 25.0).abs() < 1e-12);
    }

    #[test]
    fn smoothness_matches_bruteforce_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_slice(&mut rng, 4, 3, None);
        let b = random_slice(&mut rng, 5, 3, None);
        let got = spatial_smoothness(&a, &b, 1.2).unwrap();
        let want = naive_ss(&a, &b, 1.2);
        for (g, w) in got.iter().zip(want.iter()) {
            assert!((g - w).abs() <= 1e-10 * w.abs().max(1.0));
        }
    }

    #[test]
    fn smoothness_transpose_symmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = random_slice(&mut rng, 4, 2, None);
        let b = random_slice(&mut rng, 6, 2, None);
        let ab = spatial_smoothness(&a, &b, 1.0).unwrap();
        let ba = spatial_smoothness(&b, &a, 1.0).unwrap();
        for k in 0..a.n() {
            for l in 0..b.n() {
                assert!((ab[[k, l]] - ba[[l, k]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn lr_dissimilarity_requires_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_slice(&mut rng, 3, 2, Some(2));
        let bare = random_slice(&mut rng, 3, 2, None);
        assert!(matches!(
            lr_dissimilarity(&a, &bare, 1.0),
            Err(Error::MissingLrFeatures)
        ));
    }

    #[test]
    fn lr_dissimilarity_singletons() {
        let mut a = slice_from(array![[0.0]], array![[0.0, 0.0]]);
        a.lr = Some(array![[1.0, 0.0]]);
        let mut b = slice_from(array![[0.0]], array![[0.0, 0.0]]);
        b.lr = Some(array![[0.0, 1.0]]);
        let lr = lr_dissimilarity(&a, &b, 1.0).unwrap();
        assert!((lr[[0, 0]] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn lr_dissimilarity_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let a = random_slice(&mut rng, 4, 2, Some(3));
        let b = random_slice(&mut rng, 4, 2, Some(3));
        let got = lr_dissimilarity(&a, &b, 1.3).unwrap();
        // Same naive oracle but over lr features.
        let a_lr = SpatialSlice::new(0.0, a.lr.clone().unwrap(), a.coords.clone(), None, None).unwrap();
        let b_lr = SpatialSlice::new(0.0, b.lr.clone().unwrap(), b.coords.clone(), None, None).unwrap();
        let want = naive_ss(&a_lr, &b_lr, 1.3);
        for (g, w) in got.iter().zip(want.iter()) {
            assert!((g - w).abs() <= 1e-10 * w.abs().max(1.0));
        }
    }

    #[test]
    fn lr_score_self_pair_is_one() {
        let s = slice_from(
            array![[1.0, 1.0], [2.0, 2.0]],
            array![[0.0, 0.0], [0.1, 0.0]],
        );
        let scores = local_lr_score(&s, &[0], &[0], 1.0).unwrap();
        for v in scores.iter() {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn lr_score_zero_ligand_gives_zero() {
        let s = slice_from(
            array![[0.0, 1.0], [0.0, 2.0]],
            array![[0.0, 0.0], [0.1, 0.0]],
        );
        let scores = local_lr_score(&s, &[0], &[1], 1.0).unwrap();
        assert!(scores.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn lr_score_matches_direct_cosine() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let s = random_slice(&mut rng, 6, 4, None);
        let got = local_lr_score(&s, &[0, 2], &[1, 3], 1.5).unwrap();
        let idx = build_neighbor_index(&s, 1.5).unwrap();
        for k in 0..6 {
            for (m, (&lc, &rc)) in [0usize, 2].iter().zip(&[1usize, 3]).enumerate() {
                let lig: Vec<f64> = idx.lists[k].iter().map(|&j| s.expr[[j, lc]]).collect();
                let rec: Vec<f64> = idx.lists[k].iter().map(|&j| s.expr[[j, rc]]).collect();
                let dot: f64 = lig.iter().zip(&rec).map(|(a, b)| a * b).sum();
                let nl: f64 = lig.iter().map(|a| a * a).sum::<f64>().sqrt();
                let nr: f64 = rec.iter().map(|a| a * a).sum::<f64>().sqrt();
                let want = if nl > 0.0 && nr > 0.0 { dot / (nl * nr) } else { 0.0 };
                assert!((got[[k, m]] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn lr_score_rejects_bad_columns() {
        let s = slice_from(array![[0.0, 1.0]], array![[0.0, 0.0]]);
        assert!(local_lr_score(&s, &[], &[], 1.0).is_err());
        assert!(local_lr_score(&s, &[0], &[5], 1.0).is_err());
    }

    #[test]
    fn tpm_endpoints_and_midpoint() {
        let ss = array![[0.0, 2.0], [4.0, 6.0]];
        let lr = array![[2.0, 0.0], [0.0, 2.0]];
        let at_one = build_tpm(&ss, Some(&lr), 1.0).unwrap();
        assert_eq!(at_one.values, ss);
        let at_zero = build_tpm(&ss, Some(&lr), 0.0).unwrap();
        assert_eq!(at_zero.values, lr);
        let mid = build_tpm(&ss, Some(&lr), 0.5).unwrap();
        assert_eq!(mid.values, array![[1.0, 1.0], [2.0, 4.0]]);
    }

    #[test]
    fn tpm_rejects_missing_lr_below_one() {
        let ss = array![[0.0]];
        assert!(build_tpm(&ss, None, 0.5).is_err());
        assert!(build_tpm(&ss, None, 1.0).is_ok());
    }

    #[test]
    fn tpm_rejects_out_of_range_lambda() {
        let ss = array![[0.0]];
        let lr = array![[0.0]];
        assert!(build_tpm(&ss, Some(&lr), -0.1).is_err());
        assert!(build_tpm(&ss, Some(&lr), 1.1).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn prop_smoothness_matches_naive_recomputation(
            seed in 0u64..10_000,
            n_a in 1usize..=10,
            n_b in 1usize..=10,
            radius in 0.3f64..3.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_slice(&mut rng, n_a, 3, None);
            let b = random_slice(&mut rng, n_b, 3, None);
            let got = spatial_smoothness(&a, &b, radius).unwrap();
            let want = naive_ss(&a, &b, radius);
            for (g, w) in got.iter().zip(want.iter()) {
                prop_assert!((g - w).abs() <= 1e-10 * w.abs().max(1.0));
                prop_assert!(*g >= 0.0);
            }
        }
    }

    #[test]
    fn index_size_mismatch_rejected() {
        let a = slice_from(array![[0.0]], array![[0.0, 0.0]]);
        let b = slice_from(array![[0.0], [1.0]], array![[0.0, 0.0], [1.0, 0.0]]);
        let idx_b = build_neighbor_index(&b, 1.0).unwrap();
        assert!(matches!(
            neighborhood_mean_expression(&a, &idx_b, 0),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn smoothness_dimension_mismatch_rejected() {
        let a = slice_from(array![[0.0, 1.0]], array![[0.0, 0.0]]);
        let b = slice_from(array![[0.0]], array![[0.0, 0.0]]);
        assert!(matches!(
            spatial_smoothness(&a, &b, 1.0),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn tpm_affine_in_lambda() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let ss = Array2::from_shape_fn((3, 4), |_| rng.random_range(0.0..5.0));
        let lr = Array2::from_shape_fn((3, 4), |_| rng.random_range(0.0..5.0));
        let a = build_tpm(&ss, Some(&lr), 0.0).unwrap().values;
        let b = build_tpm(&ss, Some(&lr), 1.0).unwrap().values;
        let mid = build_tpm(&ss, Some(&lr), 0.5).unwrap().values;
        for ((m, a), b) in mid.iter().zip(a.iter()).zip(b.iter()) {
            assert!((m - 0.5 * (a + b)).abs() < 1e-12);
        }
    }
}
