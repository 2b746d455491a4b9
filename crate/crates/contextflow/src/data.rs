//! Dataset persistence and generation: one CSV per time point plus a JSON
//! manifest, a synthetic blob-drift generator for desk-scale experiments, and
//! checksummed velocity-field checkpoints.
//!
//! Slice CSV columns are `x,y,label,f1..fd[,lr1..lrp]` with a required header;
//! lines starting with `#` carry provenance and are skipped on read.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::slice::{LongitudinalDataset, SpatialSlice};
use crate::trainer::TrainConfig;
use crate::velocity::{OptimizerState, VelocityField};

pub const MANIFEST_VERSION: u32 = 1;
pub const CHECKPOINT_VERSION: u32 = 1;

/// FNV-1a 64-bit hash; used for config identities and artifact checksums.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Hash of a serializable value's canonical JSON (object keys sorted).
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    let canonical = serde_json::to_value(value)?;
    let bytes = serde_json::to_vec(&canonical)?;
    Ok(format!("{:016x}", fnv1a64(&bytes)))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestSlice {
    pub path: String,
    pub time: f64,
    pub n: usize,
}

/// On-disk dataset description: ordered slice files with raw times.
///
/// When slice files carry no precomputed LR columns (`lr_dim == 0`), an
/// optional `lr_pairs` list of (ligand column, receptor column) indices into
/// the feature columns lets the loader derive per-cell LR activity scores via
/// [`crate::geometry::local_lr_score`]; precomputed columns take precedence.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub feature_dim: usize,
    #[serde(default)]
    pub lr_dim: usize,
    #[serde(default)]
    pub lr_pairs: Option<Vec<(usize, usize)>>,
    /// Neighborhood radius for derived LR scores; per-slice default when absent.
    #[serde(default)]
    pub lr_radius: Option<f64>,
    #[serde(default)]
    pub label_vocab: Option<Vec<String>>,
    pub slices: Vec<ManifestSlice>,
}

/// Read a manifest and all referenced slice CSVs; validates every slice
/// invariant and maps raw times affinely onto `[0, 1]`.
pub fn load_dataset(manifest_path: &Path) -> Result<LongitudinalDataset> {
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::Schema {
        path: manifest_path.display().to_string(),
        line: 0,
        message: format!("cannot read manifest: {e}"),
    })?;
    let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::Schema {
        path: manifest_path.display().to_string(),
        line: e.line(),
        message: format!("manifest parse error: {e}"),
    })?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::VersionMismatch {
            found: manifest.version,
            expected: MANIFEST_VERSION,
        });
    }
    if manifest.slices.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "manifest lists {} slices; need at least 2",
            manifest.slices.len()
        )));
    }
    for w in manifest.slices.windows(2) {
        if w[1].time <= w[0].time {
            return Err(Error::Schema {
                path: manifest_path.display().to_string(),
                line: 0,
                message: format!(
                    "slice times must be strictly increasing ({} then {})",
                    w[0].time, w[1].time
                ),
            });
        }
    }
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let mut slices = Vec::with_capacity(manifest.slices.len());
    let mut raw_times = Vec::with_capacity(manifest.slices.len());
    for entry in &manifest.slices {
        let slice_path = base.join(&entry.path);
        let mut slice = read_slice_csv(&slice_path, manifest.feature_dim, manifest.lr_dim)?;
        if manifest.lr_dim == 0 {
            if let Some(pairs) = &manifest.lr_pairs {
                let ligands: Vec<usize> = pairs.iter().map(|p| p.0).collect();
                let receptors: Vec<usize> = pairs.iter().map(|p| p.1).collect();
                let radius = manifest
                    .lr_radius
                    .unwrap_or_else(|| crate::geometry::default_radius(&slice));
                slice.lr = Some(crate::geometry::local_lr_score(
                    &slice, &ligands, &receptors, radius,
                )?);
            }
        }
        if slice.n() != entry.n {
            return Err(Error::Schema {
                path: slice_path.display().to_string(),
                line: 0,
                message: format!(
                    "manifest says {} cells but file holds {}",
                    entry.n,
                    slice.n()
                ),
            });
        }
        raw_times.push(entry.time);
        slices.push(slice);
    }
    LongitudinalDataset::from_raw_times(slices, &raw_times)
}

/// Write a dataset as `manifest.json` plus one `slice_<i>.csv` per time point.
/// Returns the manifest path.
pub fn save_dataset(dataset: &LongitudinalDataset, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::new();
    let lr_dim = dataset.slices()[0].lr_dim().unwrap_or(0);
    for (i, slice) in dataset.slices().iter().enumerate() {
        let name = format!("slice_{i}.csv");
        write_slice_csv(slice, &dir.join(&name), &[])?;
        entries.push(ManifestSlice {
            path: name,
            time: slice.time,
            n: slice.n(),
        });
    }
    let vocab = dataset.label_vocab();
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        feature_dim: dataset.slices()[0].dim(),
        lr_dim,
        lr_pairs: None,
        lr_radius: None,
        label_vocab: if vocab.is_empty() { None } else { Some(vocab) },
        slices: entries,
    };
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(path)
}

fn expected_header(d: usize, p: usize) -> String {
    let mut header = String::from("x,y,label");
    for i in 1..=d {
        let _ = write!(header, ",f{i}");
    }
    for i in 1..=p {
        let _ = write!(header, ",lr{i}");
    }
    header
}

/// Write one slice in the dataset CSV format. `provenance` lines are emitted as
/// `# ...` comments above the header.
pub fn write_slice_csv(slice: &SpatialSlice, path: &Path, provenance: &[String]) -> Result<()> {
    let d = slice.dim();
    let p = slice.lr_dim().unwrap_or(0);
    let mut out = String::new();
    for line in provenance {
        let _ = writeln!(out, "# {line}");
    }
    let _ = writeln!(out, "{}", expected_header(d, p));
    for k in 0..slice.n() {
        let label = slice
            .labels
            .as_ref()
            .map(|l| l[k].as_str())
            .unwrap_or_default();
        let _ = write!(out, "{},{},{}", slice.coords[[k, 0]], slice.coords[[k, 1]], label);
        for c in 0..d {
            let _ = write!(out, ",{}", slice.expr[[k, c]]);
        }
        if let Some(lr) = &slice.lr {
            for c in 0..p {
                let _ = write!(out, ",{}", lr[[k, c]]);
            }
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Parse one slice CSV; the slice's time is set to 0 and patched by the caller.
pub fn read_slice_csv(path: &Path, feature_dim: usize, lr_dim: usize) -> Result<SpatialSlice> {
    let display = path.display().to_string();
    let text = fs::read_to_string(path).map_err(|e| Error::Schema {
        path: display.clone(),
        line: 0,
        message: format!("cannot read slice file: {e}"),
    })?;
    let schema_err = |line: usize, message: String| Error::Schema {
        path: display.clone(),
        line,
        message,
    };
    let expected_cols = 3 + feature_dim + lr_dim;
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l))
        .filter(|(_, l)| !l.starts_with('#') && !l.trim().is_empty());
    let (header_line, header) = lines
        .next()
        .ok_or_else(|| schema_err(0, "file has no header".to_string()))?;
    let header_fields: Vec<&str> = header.split(',').collect();
    if header_fields.len() != expected_cols
        || header_fields[..3] != ["x", "y", "label"]
    {
        return Err(schema_err(
            header_line,
            format!(
                "bad header: expected {:?}, got {:?}",
                expected_header(feature_dim, lr_dim),
                header
            ),
        ));
    }

    let mut coords_rows = Vec::new();
    let mut expr_rows = Vec::new();
    let mut lr_rows = Vec::new();
    let mut labels = Vec::new();
    for (line_no, line) in lines {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != expected_cols {
            return Err(schema_err(
                line_no,
                format!("expected {expected_cols} columns, got {}", fields.len()),
            ));
        }
        let parse = |raw: &str, column: &str| -> Result<f64> {
            let value: f64 = raw.trim().parse().map_err(|_| {
                schema_err(line_no, format!("column {column}: cannot parse {raw:?}"))
            })?;
            if !value.is_finite() {
                return Err(schema_err(
                    line_no,
                    format!("column {column}: non-finite value {raw:?}"),
                ));
            }
            Ok(value)
        };
        coords_rows.push([parse(fields[0], "x")?, parse(fields[1], "y")?]);
        labels.push(fields[2].trim().to_string());
        let mut expr_row = Vec::with_capacity(feature_dim);
        for c in 0..feature_dim {
            expr_row.push(parse(fields[3 + c], &format!("f{}", c + 1))?);
        }
        expr_rows.push(expr_row);
        if lr_dim > 0 {
            let mut lr_row = Vec::with_capacity(lr_dim);
            for c in 0..lr_dim {
                lr_row.push(parse(fields[3 + feature_dim + c], &format!("lr{}", c + 1))?);
            }
            lr_rows.push(lr_row);
        }
    }
    let n = coords_rows.len();
    if n == 0 {
        return Err(schema_err(0, "slice file has no data rows".to_string()));
    }
    let coords = Array2::from_shape_fn((n, 2), |(r, c)| coords_rows[r][c]);
    let expr = Array2::from_shape_fn((n, feature_dim), |(r, c)| expr_rows[r][c]);
    let lr = if lr_dim > 0 {
        Some(Array2::from_shape_fn((n, lr_dim), |(r, c)| lr_rows[r][c]))
    } else {
        None
    };
    let empty_labels = labels.iter().filter(|l| l.is_empty()).count();
    let labels = if empty_labels == n {
        None
    } else if empty_labels == 0 {
        Some(labels)
    } else {
        return Err(schema_err(
            0,
            format!("{empty_labels} of {n} labels empty; label all cells or none"),
        ));
    };
    SpatialSlice::new(0.0, expr, coords, lr, labels).map_err(|e| Error::Schema {
        path: display.clone(),
        line: 0,
        message: format!("slice invariant violated: {e}"),
    })
}

/// Synthetic longitudinal dataset: one Gaussian expression blob per cell type
/// drifting (and optionally curving) over time, types pinned to disjoint
/// spatial regions, LR features correlated with the region.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub time_points: usize,
    pub cells_per_slice: usize,
    pub num_types: usize,
    pub feature_dim: usize,
    pub lr_dim: usize,
    /// Expression blob standard deviation.
    pub expr_noise: f64,
    /// Per-type expression blob center at t = 0; defaults to 3k on feature 0.
    pub type_centers: Option<Vec<Vec<f64>>>,
    /// Per-type drift per unit time; defaults to zero.
    pub type_drift: Option<Vec<Vec<f64>>>,
    /// Per-type curvature, applied as `curve * 4 t (1 - t)`; defaults to zero.
    pub type_curve: Option<Vec<Vec<f64>>>,
    /// Per-type spatial region centers; defaults to a circle of radius 10.
    pub spatial_centers: Option<Vec<[f64; 2]>>,
    /// Half-width of the uniform spatial scatter around the region center.
    pub spatial_spread: f64,
    /// Mean signal of the type's LR signature entries.
    pub lr_strength: f64,
    pub lr_noise: f64,
    /// Forbidden (source type, target type) transitions carried as metadata.
    pub forbidden: Vec<(String, String)>,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            time_points: 3,
            cells_per_slice: 200,
            num_types: 2,
            feature_dim: 10,
            lr_dim: 0,
            expr_noise: 0.05,
            type_centers: None,
            type_drift: None,
            type_curve: None,
            spatial_centers: None,
            spatial_spread: 1.0,
            lr_strength: 1.0,
            lr_noise: 0.1,
            forbidden: Vec::new(),
            seed: 0,
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        if self.time_points < 2 {
            return Err(Error::InvalidParameter {
                name: "time_points",
                message: "need at least 2 time points",
                value: self.time_points as f64,
            });
        }
        if self.num_types == 0 || self.cells_per_slice == 0 || self.feature_dim == 0 {
            return Err(Error::InvalidParameter {
                name: "synthetic config",
                message: "types, cells, and feature dim must be positive",
                value: 0.0,
            });
        }
        if self.cells_per_slice < self.num_types {
            return Err(Error::InvalidParameter {
                name: "cells_per_slice",
                message: "need at least one cell per type",
                value: self.cells_per_slice as f64,
            });
        }
        let check = |name: &'static str, field: &Option<Vec<Vec<f64>>>| -> Result<()> {
            if let Some(rows) = field {
                if rows.len() != self.num_types
                    || rows.iter().any(|r| r.len() != self.feature_dim)
                {
                    return Err(Error::InvalidParameter {
                        name,
                        message: "needs one vector of length feature_dim per type",
                        value: rows.len() as f64,
                    });
                }
            }
            Ok(())
        };
        check("type_centers", &self.type_centers)?;
        check("type_drift", &self.type_drift)?;
        check("type_curve", &self.type_curve)?;
        if let Some(centers) = &self.spatial_centers {
            if centers.len() != self.num_types {
                return Err(Error::InvalidParameter {
                    name: "spatial_centers",
                    message: "needs one center per type",
                    value: centers.len() as f64,
                });
            }
        }
        Ok(())
    }

    pub fn type_label(&self, k: usize) -> String {
        format!("type{k}")
    }

    fn center(&self, k: usize, c: usize) -> f64 {
        match &self.type_centers {
            Some(rows) => rows[k][c],
            None => {
                if c == 0 {
                    3.0 * k as f64
                } else {
                    0.0
                }
            }
        }
    }

    fn drift(&self, k: usize, c: usize) -> f64 {
        self.type_drift.as_ref().map_or(0.0, |rows| rows[k][c])
    }

    fn curve(&self, k: usize, c: usize) -> f64 {
        self.type_curve.as_ref().map_or(0.0, |rows| rows[k][c])
    }

    /// Expression blob mean of type `k` at normalized time `t`.
    pub fn mean_at(&self, k: usize, t: f64) -> Vec<f64> {
        (0..self.feature_dim)
            .map(|c| self.center(k, c) + t * self.drift(k, c) + 4.0 * t * (1.0 - t) * self.curve(k, c))
            .collect()
    }

    fn spatial_center(&self, k: usize) -> [f64; 2] {
        match &self.spatial_centers {
            Some(centers) => centers[k],
            None => {
                let angle = std::f64::consts::TAU * k as f64 / self.num_types as f64;
                [10.0 * angle.cos(), 10.0 * angle.sin()]
            }
        }
    }

    /// LR signature of type `k`: strength on the entries congruent to `k`.
    fn lr_signature(&self, k: usize, c: usize) -> f64 {
        if self.num_types > 0 && c % self.num_types == k {
            self.lr_strength
        } else {
            0.0
        }
    }
}

/// Generate the synthetic dataset described by `cfg`; deterministic per seed.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<LongitudinalDataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let per_type = cfg.cells_per_slice / cfg.num_types;
    let remainder = cfg.cells_per_slice % cfg.num_types;
    let mut slices = Vec::with_capacity(cfg.time_points);
    for i in 0..cfg.time_points {
        let t = i as f64 / (cfg.time_points - 1) as f64;
        let n = cfg.cells_per_slice;
        let mut expr = Array2::zeros((n, cfg.feature_dim));
        let mut coords = Array2::zeros((n, 2));
        let mut lr = if cfg.lr_dim > 0 {
            Some(Array2::zeros((n, cfg.lr_dim)))
        } else {
            None
        };
        let mut labels = Vec::with_capacity(n);
        let mut row = 0;
        for k in 0..cfg.num_types {
            let count = per_type + usize::from(k < remainder);
            let mean = cfg.mean_at(k, t);
            let spatial = cfg.spatial_center(k);
            for _ in 0..count {
                for c in 0..cfg.feature_dim {
                    let noise: f64 = StandardNormal.sample(&mut rng);
                    expr[[row, c]] = mean[c] + cfg.expr_noise * noise;
                }
                coords[[row, 0]] =
                    spatial[0] + cfg.spatial_spread * rng.random_range(-1.0..1.0);
                coords[[row, 1]] =
                    spatial[1] + cfg.spatial_spread * rng.random_range(-1.0..1.0);
                if let Some(lr) = lr.as_mut() {
                    for c in 0..cfg.lr_dim {
                        let noise: f64 = StandardNormal.sample(&mut rng);
                        lr[[row, c]] = cfg.lr_signature(k, c) + cfg.lr_noise * noise;
                    }
                }
                labels.push(cfg.type_label(k));
                row += 1;
            }
        }
        slices.push(SpatialSlice::new(t, expr, coords, lr, Some(labels))?);
    }
    LongitudinalDataset::new(slices)
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointPayload {
    version: u32,
    crate_version: String,
    config_hash: String,
    field: VelocityField,
    optimizer: OptimizerState,
    config: TrainConfig,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointFile {
    payload: serde_json::Value,
    checksum: String,
}

/// Persist the trained field, optimizer state, and the config that produced
/// them; the payload is checksummed against corruption.
pub fn save_checkpoint(
    path: &Path,
    field: &VelocityField,
    optimizer: &OptimizerState,
    config: &TrainConfig,
) -> Result<()> {
    let payload = serde_json::to_value(CheckpointPayload {
        version: CHECKPOINT_VERSION,
        crate_version: env!("CARGO_PKG_VERSION").to_string(),
        config_hash: config_hash(config)?,
        field: field.clone(),
        optimizer: optimizer.clone(),
        config: config.clone(),
    })?;
    let checksum = format!("{:016x}", fnv1a64(&serde_json::to_vec(&payload)?));
    let file = CheckpointFile { payload, checksum };
    fs::write(path, serde_json::to_string(&file)?)?;
    Ok(())
}

/// Load a checkpoint, verifying checksum, format version, and parameter shape
/// consistency.
pub fn load_checkpoint(path: &Path) -> Result<(VelocityField, OptimizerState, TrainConfig)> {
    let text = fs::read_to_string(path)?;
    let file: CheckpointFile = serde_json::from_str(&text).map_err(|e| Error::Schema {
        path: path.display().to_string(),
        line: e.line(),
        message: format!("corrupt checkpoint: {e}"),
    })?;
    let computed = format!("{:016x}", fnv1a64(&serde_json::to_vec(&file.payload)?));
    if computed != file.checksum {
        return Err(Error::ChecksumMismatch {
            stored: file.checksum,
            computed,
        });
    }
    let payload: CheckpointPayload = serde_json::from_value(file.payload)?;
    if payload.version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            found: payload.version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let expected_hash = config_hash(&payload.config)?;
    if payload.config_hash != expected_hash {
        return Err(Error::ChecksumMismatch {
            stored: payload.config_hash,
            computed: expected_hash,
        });
    }
    let field = payload.field;
    let expected_layers = field.dims.len().saturating_sub(1);
    if field.weights.len() != expected_layers
        || field
            .weights
            .iter()
            .zip(field.dims.windows(2))
            .any(|(w, d)| w.dim() != (d[1], d[0]))
    {
        return Err(Error::ShapeMismatch {
            context: "checkpoint field",
            expected: format!("{:?} layer dims", field.dims),
            actual: "inconsistent weight shapes".to_string(),
        });
    }
    Ok((field, payload.optimizer, payload.config))
}
