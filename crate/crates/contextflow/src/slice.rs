//! Core data carriers: a single spatial snapshot and an ordered sequence of them.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One measured time point: expression features, 2-D spatial coordinates, and
/// optional ligand-receptor activity scores and cell-type labels.
///
/// Row `k` of every field describes the same cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpatialSlice {
    /// Normalized time in `[0, 1]`.
    pub time: f64,
    /// `n x d` expression features (log-normalized components, unitless).
    pub expr: Array2<f64>,
    /// `n x 2` spatial positions in tissue-relative units.
    pub coords: Array2<f64>,
    /// Optional `n x p` ligand-receptor activity scores.
    pub lr: Option<Array2<f64>>,
    /// Optional per-cell type labels.
    pub labels: Option<Vec<String>>,
}

impl SpatialSlice {
    /// Build a slice, enforcing the row-count, finiteness, and time-range invariants.
    pub fn new(
        time: f64,
        expr: Array2<f64>,
        coords: Array2<f64>,
        lr: Option<Array2<f64>>,
        labels: Option<Vec<String>>,
    ) -> Result<Self> {
        let slice = Self {
            time,
            expr,
            coords,
            lr,
            labels,
        };
        slice.validate()?;
        Ok(slice)
    }

    /// Number of cells.
    pub fn n(&self) -> usize {
        self.expr.nrows()
    }

    /// Expression feature dimension.
    pub fn dim(&self) -> usize {
        self.expr.ncols()
    }

    /// Ligand-receptor feature dimension, if present.
    pub fn lr_dim(&self) -> Option<usize> {
        self.lr.as_ref().map(|m| m.ncols())
    }

    /// Check every invariant; used both at construction and by the dataset loader.
    pub fn validate(&self) -> Result<()> {
        let n = self.expr.nrows();
        if n == 0 {
            return Err(Error::EmptySlice);
        }
        if !(0.0..=1.0).contains(&self.time) {
            return Err(Error::InvalidParameter {
                name: "time",
                message: "must lie in [0, 1]",
                value: self.time,
            });
        }
        if self.coords.nrows() != n || self.coords.ncols() != 2 {
            return Err(Error::ShapeMismatch {
                context: "slice coords",
                expected: format!("{n} x 2"),
                actual: format!("{} x {}", self.coords.nrows(), self.coords.ncols()),
            });
        }
        if let Some(lr) = &self.lr {
            if lr.nrows() != n {
                return Err(Error::ShapeMismatch {
                    context: "slice lr features",
                    expected: format!("{n} rows"),
                    actual: format!("{} rows", lr.nrows()),
                });
            }
        }
        if let Some(labels) = &self.labels {
            if labels.len() != n {
                return Err(Error::ShapeMismatch {
                    context: "slice labels",
                    expected: format!("{n} entries"),
                    actual: format!("{} entries", labels.len()),
                });
            }
        }
        check_finite(&self.expr, "expr")?;
        check_finite(&self.coords, "coords")?;
        if let Some(lr) = &self.lr {
            check_finite(lr, "lr features")?;
        }
        Ok(())
    }

    /// Extract the sub-slice given by `indices` (used for minibatching).
    pub fn select(&self, indices: &[usize]) -> Result<SpatialSlice> {
        let n = self.n();
        for &i in indices {
            if i >= n {
                return Err(Error::IndexOutOfRange {
                    context: "slice select",
                    index: i,
                    len: n,
                });
            }
        }
        let take_rows = |m: &Array2<f64>| {
            let mut out = Array2::zeros((indices.len(), m.ncols()));
            for (row, &i) in indices.iter().enumerate() {
                out.row_mut(row).assign(&m.row(i));
            }
            out
        };
        Ok(SpatialSlice {
            time: self.time,
            expr: take_rows(&self.expr),
            coords: take_rows(&self.coords),
            lr: self.lr.as_ref().map(take_rows),
            labels: self
                .labels
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i].clone()).collect()),
        })
    }
}

fn check_finite(m: &Array2<f64>, context: &str) -> Result<()> {
    for ((r, c), v) in m.indexed_iter() {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                context: context.to_string(),
                location: format!("row {r}, column {c}"),
            });
        }
    }
    Ok(())
}

/// An ordered sequence of slices with strictly increasing times normalized so the
/// first slice sits at 0 and the last at 1.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LongitudinalDataset {
    slices: Vec<SpatialSlice>,
}

impl LongitudinalDataset {
    /// Build from slices whose times are already normalized to span `[0, 1]`.
    pub fn new(slices: Vec<SpatialSlice>) -> Result<Self> {
        if slices.len() < 2 {
            return Err(Error::InsufficientData(format!(
                "need at least 2 slices, got {}",
                slices.len()
            )));
        }
        for w in slices.windows(2) {
            if w[1].time <= w[0].time {
                return Err(Error::InvalidParameter {
                    name: "slice times",
                    message: "must be strictly increasing",
                    value: w[1].time,
                });
            }
        }
        if slices[0].time != 0.0 || slices[slices.len() - 1].time != 1.0 {
            return Err(Error::InvalidParameter {
                name: "slice times",
                message: "must span [0, 1] after normalization",
                value: slices[0].time,
            });
        }
        let d = slices[0].dim();
        for s in &slices {
            if s.dim() != d {
                return Err(Error::ShapeMismatch {
                    context: "dataset feature dimension",
                    expected: format!("{d}"),
                    actual: format!("{}", s.dim()),
                });
            }
        }
        Ok(Self { slices })
    }

    /// Build from slices carrying raw acquisition times; times are mapped affinely
    /// onto `[0, 1]`.
    pub fn from_raw_times(mut slices: Vec<SpatialSlice>, raw_times: &[f64]) -> Result<Self> {
        if slices.len() != raw_times.len() {
            return Err(Error::ShapeMismatch {
                context: "raw times",
                expected: format!("{} entries", slices.len()),
                actual: format!("{} entries", raw_times.len()),
            });
        }
        if slices.len() < 2 {
            return Err(Error::InsufficientData(format!(
                "need at least 2 slices, got {}",
                slices.len()
            )));
        }
        let t0 = raw_times[0];
        let t1 = raw_times[raw_times.len() - 1];
        if !(t1 - t0).is_finite() || t1 <= t0 {
            return Err(Error::InvalidParameter {
                name: "raw times",
                message: "must be strictly increasing",
                value: t1,
            });
        }
        for (slice, &raw) in slices.iter_mut().zip(raw_times) {
            slice.time = (raw - t0) / (t1 - t0);
        }
        // Clamp endpoint rounding so the [0, 1] span invariant holds exactly.
        slices[0].time = 0.0;
        let last = slices.len() - 1;
        slices[last].time = 1.0;
        Self::new(slices)
    }

    pub fn slices(&self) -> &[SpatialSlice] {
        &self.slices
    }

    pub fn len(&self) -> usize {
        self.slices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slices.is_empty()
    }

    pub fn slice(&self, i: usize) -> Result<&SpatialSlice> {
        self.slices.get(i).ok_or(Error::IndexOutOfRange {
            context: "dataset slice",
            index: i,
            len: self.slices.len(),
        })
    }

    /// Sorted, de-duplicated label vocabulary across all labeled slices.
    pub fn label_vocab(&self) -> Vec<String> {
        let mut vocab: Vec<String> = self
            .slices
            .iter()
            .filter_map(|s| s.labels.as_ref())
            .flatten()
            .cloned()
            .collect();
        vocab.sort();
        vocab.dedup();
        vocab
    }
}
