//! Two-sample evaluation metrics: exact 2-Wasserstein, cell-type-weighted
//! Wasserstein, multi-kernel MMD, energy distance, cell-type KL divergence, and
//! implausible-transition counting on sampled couplings.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::Array2;
use rand::seq::index;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::assignment::solve_assignment;
use crate::error::{Error, Result};
use crate::slice::SpatialSlice;
use crate::transport::{euclidean_cost, sample_pairs, Coupling};

/// RBF bandwidths averaged by [`mmd_rbf_multi`].
pub const MMD_GAMMAS: [f64; 6] = [2.0, 1.0, 0.5, 0.1, 0.01, 0.005];

/// Subsampling controls for the exact Wasserstein estimate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct W2Options {
    /// Maximum points used per side; the exact assignment solver runs on equal
    /// sizes, so both sides are drawn down to the common working size.
    pub cap_per_side: usize,
    pub seed: u64,
}

impl Default for W2Options {
    fn default() -> Self {
        Self {
            cap_per_side: 512,
            seed: 0,
        }
    }
}

/// 2-Wasserstein value plus a record of any subsampling that produced it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct W2Report {
    pub value: f64,
    pub n_x_input: usize,
    pub n_y_input: usize,
    /// Common working size after capping and equalizing.
    pub n_used: usize,
    pub subsampled: bool,
    pub seed: u64,
}

/// Exact 2-Wasserstein distance between empirical point sets with uniform
/// weights: the square root of the minimal mean squared matched distance.
pub fn w2(x: &Array2<f64>, y: &Array2<f64>) -> Result<f64> {
    Ok(w2_report(x, y, &W2Options::default())?.value)
}

pub fn w2_report(x: &Array2<f64>, y: &Array2<f64>, opts: &W2Options) -> Result<W2Report> {
    if x.nrows() == 0 || y.nrows() == 0 {
        return Err(Error::InsufficientData(
            "w2 needs nonempty point sets".to_string(),
        ));
    }
    if x.ncols() != y.ncols() {
        return Err(Error::ShapeMismatch {
            context: "w2 inputs",
            expected: format!("{} columns", x.ncols()),
            actual: format!("{} columns", y.ncols()),
        });
    }
    let n_used = x.nrows().min(y.nrows()).min(opts.cap_per_side.max(1));
    let subsampled = n_used != x.nrows() || n_used != y.nrows();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let xs = subsample_rows(x, n_used, &mut rng);
    let ys = subsample_rows(y, n_used, &mut rng);
    let cost = euclidean_cost(&xs, &ys)?;
    let (_, total) = solve_assignment(&cost.values)?;
    Ok(W2Report {
        value: (total / n_used as f64).sqrt(),
        n_x_input: x.nrows(),
        n_y_input: y.nrows(),
        n_used,
        subsampled,
        seed: opts.seed,
    })
}

fn subsample_rows<R: Rng>(m: &Array2<f64>, count: usize, rng: &mut R) -> Array2<f64> {
    if count == m.nrows() {
        return m.clone();
    }
    let mut indices = index::sample(rng, m.nrows(), count).into_vec();
    indices.sort_unstable();
    let mut out = Array2::zeros((count, m.ncols()));
    for (row, &i) in indices.iter().enumerate() {
        out.row_mut(row).assign(&m.row(i));
    }
    out
}

/// Nearest-centroid cell-type classifier fitted on labeled reference slices.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CentroidClassifier {
    labels: Vec<String>,
    centroids: Array2<f64>,
}

impl CentroidClassifier {
    /// Fit per-class mean expression over all cells of the reference slices.
    pub fn fit(slices: &[&SpatialSlice]) -> Result<Self> {
        let mut sums: BTreeMap<String, (Vec<f64>, usize)> = BTreeMap::new();
        let mut dim = None;
        for slice in slices {
            let labels = slice.labels.as_ref().ok_or(Error::MissingLabels)?;
            let d = slice.dim();
            if *dim.get_or_insert(d) != d {
                return Err(Error::ShapeMismatch {
                    context: "classifier reference slices",
                    expected: format!("{} features", dim.unwrap()),
                    actual: format!("{d} features"),
                });
            }
            for (row, label) in slice.expr.rows().into_iter().zip(labels) {
                let entry = sums
                    .entry(label.clone())
                    .or_insert_with(|| (vec![0.0; d], 0));
                for (acc, v) in entry.0.iter_mut().zip(row.iter()) {
                    *acc += v;
                }
                entry.1 += 1;
            }
        }
        if sums.is_empty() {
            return Err(Error::InsufficientData(
                "no labeled cells to fit the classifier".to_string(),
            ));
        }
        let d = dim.unwrap();
        let labels: Vec<String> = sums.keys().cloned().collect();
        let mut centroids = Array2::zeros((labels.len(), d));
        for (c, label) in labels.iter().enumerate() {
            let (sum, count) = &sums[label];
            for (j, v) in sum.iter().enumerate() {
                centroids[[c, j]] = v / *count as f64;
            }
        }
        Ok(Self { labels, centroids })
    }

    pub fn classes(&self) -> &[String] {
        &self.labels
    }

    pub fn dim(&self) -> usize {
        self.centroids.ncols()
    }

    /// Class of the nearest centroid; ties break toward the lexicographically
    /// first label.
    pub fn predict(&self, points: &Array2<f64>) -> Result<Vec<String>> {
        if points.ncols() != self.dim() {
            return Err(Error::ShapeMismatch {
                context: "classifier input",
                expected: format!("{} columns", self.dim()),
                actual: format!("{} columns", points.ncols()),
            });
        }
        let mut out = Vec::with_capacity(points.nrows());
        for row in points.rows() {
            let mut best = 0;
            let mut best_dist = f64::INFINITY;
            for (c, centroid) in self.centroids.rows().into_iter().enumerate() {
                let dist: f64 = row
                    .iter()
                    .zip(centroid.iter())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                if dist < best_dist {
                    best_dist = dist;
                    best = c;
                }
            }
            out.push(self.labels[best].clone());
        }
        Ok(out)
    }
}

/// One class term of the weighted Wasserstein distance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassW2 {
    pub label: String,
    pub weight: f64,
    pub value: f64,
    /// No predicted points fell in this class; the term compares the true class
    /// against the whole predicted set instead.
    pub empty_prediction: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WeightedW2Report {
    pub value: f64,
    pub per_class: Vec<ClassW2>,
}

/// Class-frequency-weighted Wasserstein distance between a labeled truth set
/// and a predicted set classified by `clf`.
pub fn weighted_w2(
    x_true: &Array2<f64>,
    labels_true: &[String],
    x_pred: &Array2<f64>,
    clf: &CentroidClassifier,
    opts: &W2Options,
) -> Result<WeightedW2Report> {
    if labels_true.len() != x_true.nrows() {
        return Err(Error::ShapeMismatch {
            context: "weighted w2 labels",
            expected: format!("{} labels", x_true.nrows()),
            actual: format!("{} labels", labels_true.len()),
        });
    }
    if x_true.nrows() == 0 || x_pred.nrows() == 0 {
        return Err(Error::InsufficientData(
            "weighted w2 needs nonempty point sets".to_string(),
        ));
    }
    let known: BTreeSet<&String> = clf.classes().iter().collect();
    for label in labels_true {
        if !known.contains(label) {
            return Err(Error::InvalidMarginal {
                which: "labels",
                message: format!("true label {label:?} unknown to the classifier"),
            });
        }
    }
    let labels_pred = clf.predict(x_pred)?;
    let total = x_true.nrows() as f64;
    let mut per_class = Vec::new();
    let mut value = 0.0;
    for class in clf.classes() {
        let true_rows: Vec<usize> = labels_true
            .iter()
            .enumerate()
            .filter(|(_, l)| *l == class)
            .map(|(i, _)| i)
            .collect();
        if true_rows.is_empty() {
            continue;
        }
        let pred_rows: Vec<usize> = labels_pred
            .iter()
            .enumerate()
            .filter(|(_, l)| *l == class)
            .map(|(i, _)| i)
            .collect();
        let weight = true_rows.len() as f64 / total;
        let x_c = take_rows(x_true, &true_rows);
        let (class_value, empty_prediction) = if pred_rows.is_empty() {
            (w2_report(&x_c, x_pred, opts)?.value, true)
        } else {
            let y_c = take_rows(x_pred, &pred_rows);
            (w2_report(&x_c, &y_c, opts)?.value, false)
        };
        value += weight * class_value;
        per_class.push(ClassW2 {
            label: class.clone(),
            weight,
            value: class_value,
            empty_prediction,
        });
    }
    Ok(WeightedW2Report { value, per_class })
}

fn take_rows(m: &Array2<f64>, rows: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros((rows.len(), m.ncols()));
    for (r, &i) in rows.iter().enumerate() {
        out.row_mut(r).assign(&m.row(i));
    }
    out
}

/// Unbiased squared maximum mean discrepancy with RBF kernels, averaged over
/// the bandwidths in [`MMD_GAMMAS`]. May be slightly negative near zero.
pub fn mmd_rbf_multi(x: &Array2<f64>, y: &Array2<f64>) -> Result<f64> {
    let m = x.nrows();
    let n = y.nrows();
    if m < 2 || n < 2 {
        return Err(Error::InsufficientData(format!(
            "unbiased mmd needs at least 2 samples per side, got {m} and {n}"
        )));
    }
    if x.ncols() != y.ncols() {
        return Err(Error::ShapeMismatch {
            context: "mmd inputs",
            expected: format!("{} columns", x.ncols()),
            actual: format!("{} columns", y.ncols()),
        });
    }
    let d2_xx = euclidean_cost(x, x)?.values;
    let d2_yy = euclidean_cost(y, y)?.values;
    let d2_xy = euclidean_cost(x, y)?.values;
    let mut acc = 0.0;
    for gamma in MMD_GAMMAS {
        let mut sum_xx = 0.0;
        for i in 0..m {
            for i2 in 0..m {
                if i != i2 {
                    sum_xx += (-gamma * d2_xx[[i, i2]]).exp();
                }
            }
        }
        let mut sum_yy = 0.0;
        for j in 0..n {
            for j2 in 0..n {
                if j != j2 {
                    sum_yy += (-gamma * d2_yy[[j, j2]]).exp();
                }
            }
        }
        let mut sum_xy = 0.0;
        for i in 0..m {
            for j in 0..n {
                sum_xy += (-gamma * d2_xy[[i, j]]).exp();
            }
        }
        acc += sum_xx / (m * (m - 1)) as f64 + sum_yy / (n * (n - 1)) as f64
            - 2.0 * sum_xy / (m * n) as f64;
    }
    Ok(acc / MMD_GAMMAS.len() as f64)
}

/// Squared empirical energy distance with within-sample sums over all ordered
/// pairs, self-pairs included.
pub fn energy_distance(x: &Array2<f64>, y: &Array2<f64>) -> Result<f64> {
    let m = x.nrows();
    let n = y.nrows();
    if m == 0 || n == 0 {
        return Err(Error::InsufficientData(
            "energy distance needs nonempty point sets".to_string(),
        ));
    }
    if x.ncols() != y.ncols() {
        return Err(Error::ShapeMismatch {
            context: "energy distance inputs",
            expected: format!("{} columns", x.ncols()),
            actual: format!("{} columns", y.ncols()),
        });
    }
    let dist = |a: &Array2<f64>, i: usize, b: &Array2<f64>, j: usize| -> f64 {
        let mut acc = 0.0;
        for c in 0..a.ncols() {
            let d = a[[i, c]] - b[[j, c]];
            acc += d * d;
        }
        acc.sqrt()
    };
    let mut s_xy = 0.0;
    for i in 0..m {
        for j in 0..n {
            s_xy += dist(x, i, y, j);
        }
    }
    let mut s_xx = 0.0;
    for i in 0..m {
        for i2 in 0..m {
            s_xx += dist(x, i, x, i2);
        }
    }
    let mut s_yy = 0.0;
    for j in 0..n {
        for j2 in 0..n {
            s_yy += dist(y, j, y, j2);
        }
    }
    Ok(2.0 * s_xy / (m * n) as f64 - s_xx / (m * m) as f64 - s_yy / (n * n) as f64)
}

/// Pseudo-count added to each class before normalizing label histograms.
pub const KL_PSEUDO_COUNT: f64 = 1e-8;

/// KL divergence `KL(true || pred)` between label histograms over `vocab`,
/// smoothed so disjoint supports stay finite.
pub fn celltype_kl(labels_true: &[String], labels_pred: &[String], vocab: &[String]) -> Result<f64> {
    if labels_true.is_empty() || labels_pred.is_empty() {
        return Err(Error::InsufficientData(
            "cell-type KL needs nonempty label sets".to_string(),
        ));
    }
    if vocab.is_empty() {
        return Err(Error::InsufficientData(
            "cell-type KL needs a nonempty vocabulary".to_string(),
        ));
    }
    let positions: BTreeMap<&String, usize> =
        vocab.iter().enumerate().map(|(i, l)| (l, i)).collect();
    let histogram = |labels: &[String]| -> Result<Vec<f64>> {
        let mut counts = vec![KL_PSEUDO_COUNT; vocab.len()];
        for label in labels {
            let idx = positions.get(label).ok_or_else(|| Error::InvalidMarginal {
                which: "labels",
                message: format!("label {label:?} missing from vocabulary"),
            })?;
            counts[*idx] += 1.0;
        }
        let total: f64 = counts.iter().sum();
        Ok(counts.into_iter().map(|c| c / total).collect())
    };
    let p = histogram(labels_true)?;
    let q = histogram(labels_pred)?;
    Ok(p.iter()
        .zip(&q)
        .map(|(p, q)| if *p > 0.0 { p * (p / q).ln() } else { 0.0 })
        .sum())
}

/// Forbidden (source label, target label) transitions.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TransitionRuleSet {
    pub forbidden: BTreeSet<(String, String)>,
}

impl TransitionRuleSet {
    pub fn new(pairs: impl IntoIterator<Item = (String, String)>) -> Self {
        Self {
            forbidden: pairs.into_iter().collect(),
        }
    }

    pub fn is_forbidden(&self, source: &str, target: &str) -> bool {
        self.forbidden
            .contains(&(source.to_string(), target.to_string()))
    }

    /// Every label mentioned by a rule must belong to the vocabulary.
    pub fn validate_against(&self, vocab: &[String]) -> Result<()> {
        for (a, b) in &self.forbidden {
            if !vocab.contains(a) || !vocab.contains(b) {
                return Err(Error::InvalidMarginal {
                    which: "rules",
                    message: format!("rule ({a:?}, {b:?}) uses labels outside the vocabulary"),
                });
            }
        }
        Ok(())
    }
}

/// Draw `samples` coupled pairs from the plan and count those whose label pair
/// is forbidden. Deterministic given the generator state.
pub fn count_implausible<R: Rng>(
    coupling: &Coupling,
    labels_a: &[String],
    labels_b: &[String],
    rules: &TransitionRuleSet,
    samples: usize,
    rng: &mut R,
) -> Result<usize> {
    let (na, nb) = coupling.plan.dim();
    if labels_a.len() != na || labels_b.len() != nb {
        return Err(Error::ShapeMismatch {
            context: "implausible-transition labels",
            expected: format!("{na} and {nb}"),
            actual: format!("{} and {}", labels_a.len(), labels_b.len()),
        });
    }
    let pairs = sample_pairs(coupling, samples, rng)?;
    Ok(pairs
        .into_iter()
        .filter(|&(k, l)| rules.is_forbidden(&labels_a[k], &labels_b[l]))
        .count())
}
