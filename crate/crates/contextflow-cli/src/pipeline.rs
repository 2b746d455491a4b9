//! Command implementations: every artifact embeds the crate version, the
//! resolved configuration, and its hash; wall-clock timestamps live in a
//! separate `meta` block so payloads stay byte-reproducible.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use contextflow::data::{
    config_hash, fnv1a64, generate_synthetic, load_checkpoint, load_dataset, save_checkpoint,
    save_dataset, write_slice_csv, SynthConfig,
};
use contextflow::error::{Error, Result};
use contextflow::metrics::{
    celltype_kl, count_implausible, energy_distance, mmd_rbf_multi, w2_report, weighted_w2,
    CentroidClassifier, TransitionRuleSet, W2Options, W2Report, WeightedW2Report,
};
use contextflow::sampler::{ivp_sample, next_step_sample, IntegrationConfig};
use contextflow::slice::{LongitudinalDataset, SpatialSlice};
use contextflow::trainer::{make_coupling, train, TrainConfig};
use contextflow::velocity::VelocityField;

use crate::runspec::{MetricKind, RunSpec, SamplingMode, TrainOverrides};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Number of coupled pairs drawn when counting implausible transitions.
const IMPLAUSIBLE_SAMPLES: usize = 5000;
/// Per-slice cell cap for the diagnostic coupling solve.
const DIAGNOSTIC_CELL_CAP: usize = 256;

fn now_unix() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Wrapper separating reproducible content from wall-clock metadata.
#[derive(Debug, Serialize, Deserialize)]
pub struct Artifact<T> {
    pub meta: ArtifactMeta,
    pub payload: T,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ArtifactMeta {
    pub timestamp_unix: u64,
}

pub fn write_artifact<T: Serialize>(path: &Path, payload: &T) -> Result<()> {
    let artifact = Artifact {
        meta: ArtifactMeta {
            timestamp_unix: now_unix(),
        },
        payload,
    };
    fs::write(path, serde_json::to_string_pretty(&artifact)?)?;
    Ok(())
}

/// Merge the optional config file with flag overrides (flags win).
pub fn resolve_spec(config: Option<&Path>, overrides: &TrainOverrides) -> Result<RunSpec> {
    let mut spec = match config {
        Some(path) => RunSpec::load(path)?,
        None => RunSpec::default(),
    };
    overrides.apply(&mut spec.train)?;
    Ok(spec)
}

pub fn cmd_generate(config: Option<&Path>, seed: Option<u64>, out: &Path) -> Result<()> {
    let mut cfg = match config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::Schema {
                path: path.display().to_string(),
                line: 0,
                message: format!("cannot read config: {e}"),
            })?;
            serde_json::from_str::<SynthConfig>(&text).map_err(|e| Error::Schema {
                path: path.display().to_string(),
                line: e.line(),
                message: format!("config parse error: {e}"),
            })?
        }
        None => SynthConfig::default(),
    };
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    let dataset = generate_synthetic(&cfg)?;
    let manifest = save_dataset(&dataset, out)?;

    #[derive(Serialize)]
    struct GeneratePayload<'a> {
        version: &'a str,
        config_hash: String,
        config: &'a SynthConfig,
        manifest: String,
    }
    write_artifact(
        &out.join("synth_config.json"),
        &GeneratePayload {
            version: VERSION,
            config_hash: config_hash(&cfg)?,
            config: &cfg,
            manifest: manifest.display().to_string(),
        },
    )?;
    println!("wrote dataset to {}", manifest.display());
    Ok(())
}

#[derive(Debug, Serialize, Deserialize, Clone)]
pub struct CouplingDiagnostic {
    pub source_slice: usize,
    pub target_slice: usize,
    pub samples: usize,
    pub implausible: usize,
}

#[derive(Debug, Serialize)]
struct TrainPayload<'a> {
    version: &'a str,
    config_hash: String,
    train_config: &'a TrainConfig,
    final_loss: Option<f64>,
    coupling_diagnostics: Option<Vec<CouplingDiagnostic>>,
}

/// Train, write checkpoint + JSON-lines log + metadata; optionally count
/// implausible transitions of the final couplings against a rule set.
pub fn cmd_train(
    dataset_path: &Path,
    config: Option<&Path>,
    overrides: &TrainOverrides,
    rules: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let spec = resolve_spec(config, overrides)?;
    let dataset = load_dataset(dataset_path)?;
    let outcome = train(&dataset, &spec.train)?;
    fs::create_dir_all(out)?;
    save_checkpoint(
        &out.join("checkpoint.json"),
        &outcome.field,
        &outcome.optimizer,
        &spec.train,
    )?;
    write_train_log(&out.join("train_log.jsonl"), &spec.train, &outcome.log)?;

    let diagnostics = match rules {
        Some(rules_path) => Some(coupling_diagnostics(
            &dataset,
            &spec.train,
            &load_rules(rules_path)?,
        )?),
        None => None,
    };
    write_artifact(
        &out.join("train_meta.json"),
        &TrainPayload {
            version: VERSION,
            config_hash: config_hash(&spec.train)?,
            train_config: &spec.train,
            final_loss: outcome.log.epochs.last().map(|e| e.loss),
            coupling_diagnostics: diagnostics,
        },
    )?;
    println!(
        "wrote checkpoint to {}",
        out.join("checkpoint.json").display()
    );
    Ok(())
}

pub fn load_rules(path: &Path) -> Result<TransitionRuleSet> {
    let text = fs::read_to_string(path).map_err(|e| Error::Schema {
        path: path.display().to_string(),
        line: 0,
        message: format!("cannot read rules: {e}"),
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Schema {
        path: path.display().to_string(),
        line: e.line(),
        message: format!("rules parse error: {e}"),
    })
}

/// Count forbidden transitions in the final coupling of every trained pair,
/// on a capped per-slice subsample.
pub fn coupling_diagnostics(
    dataset: &LongitudinalDataset,
    cfg: &TrainConfig,
    rules: &TransitionRuleSet,
) -> Result<Vec<CouplingDiagnostic>> {
    rules.validate_against(&dataset.label_vocab())?;
    let kept: Vec<usize> = (0..dataset.len())
        .filter(|i| !cfg.holdout.contains(i))
        .collect();
    let mut out = Vec::new();
    for pair in kept.windows(2) {
        let (i, j) = (pair[0], pair[1]);
        let mut rng =
            ChaCha8Rng::seed_from_u64(cfg.seed ^ fnv1a64(format!("{i}-{j}").as_bytes()));
        let sub_i = capped_subsample(dataset.slice(i)?, DIAGNOSTIC_CELL_CAP, &mut rng)?;
        let sub_j = capped_subsample(dataset.slice(j)?, DIAGNOSTIC_CELL_CAP, &mut rng)?;
        let labels_i = sub_i.labels.clone().ok_or(Error::MissingLabels)?;
        let labels_j = sub_j.labels.clone().ok_or(Error::MissingLabels)?;
        let coupling = make_coupling(&sub_i, &sub_j, cfg)?;
        let implausible = count_implausible(
            &coupling,
            &labels_i,
            &labels_j,
            rules,
            IMPLAUSIBLE_SAMPLES,
            &mut rng,
        )?;
        out.push(CouplingDiagnostic {
            source_slice: i,
            target_slice: j,
            samples: IMPLAUSIBLE_SAMPLES,
            implausible,
        });
    }
    Ok(out)
}

fn capped_subsample(
    slice: &SpatialSlice,
    cap: usize,
    rng: &mut ChaCha8Rng,
) -> Result<SpatialSlice> {
    if slice.n() <= cap {
        return Ok(slice.clone());
    }
    let mut indices = rand::seq::index::sample(rng, slice.n(), cap).into_vec();
    indices.sort_unstable();
    slice.select(&indices)
}

/// JSON-lines log: one header object naming the version and config hash, then
/// one object per epoch.
fn write_train_log(
    path: &Path,
    cfg: &TrainConfig,
    log: &contextflow::trainer::TrainLog,
) -> Result<()> {
    let header = serde_json::json!({
        "version": VERSION,
        "config_hash": config_hash(cfg)?,
    });
    let mut text = serde_json::to_string(&header)?;
    text.push('\n');
    text.push_str(&log.to_jsonl());
    fs::write(path, text)?;
    Ok(())
}

fn run_sampler(
    field: &VelocityField,
    dataset: &LongitudinalDataset,
    mode: SamplingMode,
    target_index: usize,
    integration: &IntegrationConfig,
    holdout: &[usize],
) -> Result<Array2<f64>> {
    match mode {
        SamplingMode::Ivp => ivp_sample(field, dataset, target_index, integration),
        SamplingMode::NextStep => {
            next_step_sample(field, dataset, target_index, integration, holdout)
        }
    }
}

/// Integrate a trained field to the target time and write the predicted slice
/// in the dataset CSV format with a provenance header. Predicted cells carry
/// no spatial coordinates (written as zeros) and no labels.
pub fn cmd_sample(
    checkpoint: &Path,
    dataset_path: &Path,
    mode: SamplingMode,
    target_index: usize,
    integration: &IntegrationConfig,
    holdout: &[usize],
    out: &Path,
) -> Result<()> {
    let (field, _, train_config) = load_checkpoint(checkpoint)?;
    let dataset = load_dataset(dataset_path)?;
    let predicted = run_sampler(&field, &dataset, mode, target_index, integration, holdout)?;
    let n = predicted.nrows();
    let slice = SpatialSlice::new(
        dataset.slice(target_index)?.time,
        predicted,
        Array2::zeros((n, 2)),
        None,
        None,
    )?;
    let checkpoint_hash = format!("{:016x}", fnv1a64(&fs::read(checkpoint)?));
    let provenance = vec![
        format!("contextflow {VERSION}"),
        format!("checkpoint_hash: {checkpoint_hash}"),
        format!("train_config_hash: {}", config_hash(&train_config)?),
        format!("sampling_mode: {mode}"),
        format!("target_index: {target_index}"),
        format!(
            "integration: {:?} x {}",
            integration.method, integration.steps_per_unit_time
        ),
    ];
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    write_slice_csv(&slice, out, &provenance)?;
    println!("wrote predicted slice to {}", out.display());
    Ok(())
}

/// One metric's report in the output JSON.
#[derive(Debug, Serialize, Deserialize, Clone)]
#[serde(untagged)]
pub enum MetricReport {
    W2(W2Report),
    WeightedW2(WeightedW2Report),
    Scalar { value: f64 },
}

impl MetricReport {
    pub fn value(&self) -> f64 {
        match self {
            MetricReport::W2(r) => r.value,
            MetricReport::WeightedW2(r) => r.value,
            MetricReport::Scalar { value } => *value,
        }
    }
}

/// Compute the selected metrics between a predicted expression matrix and the
/// ground-truth slice.
pub fn evaluate_metrics(
    predicted: &Array2<f64>,
    dataset: &LongitudinalDataset,
    target_index: usize,
    holdout: &[usize],
    metrics: &[MetricKind],
    seed: u64,
) -> Result<BTreeMap<String, MetricReport>> {
    let truth = dataset.slice(target_index)?;
    let opts = W2Options {
        cap_per_side: 512,
        seed,
    };
    let needs_classifier = metrics
        .iter()
        .any(|m| matches!(m, MetricKind::WeightedW2 | MetricKind::Kl));
    let classifier = if needs_classifier {
        let reference: Vec<&SpatialSlice> = (0..dataset.len())
            .filter(|i| !holdout.contains(i))
            .map(|i| dataset.slice(i))
            .collect::<Result<_>>()?;
        Some(CentroidClassifier::fit(&reference)?)
    } else {
        None
    };
    let mut out = BTreeMap::new();
    for metric in metrics {
        let report = match metric {
            MetricKind::W2 => MetricReport::W2(w2_report(&truth.expr, predicted, &opts)?),
            MetricKind::WeightedW2 => {
                let labels = truth.labels.as_ref().ok_or(Error::MissingLabels)?;
                let clf = classifier.as_ref().unwrap();
                MetricReport::WeightedW2(weighted_w2(
                    &truth.expr,
                    labels,
                    predicted,
                    clf,
                    &opts,
                )?)
            }
            MetricKind::Mmd => MetricReport::Scalar {
                value: mmd_rbf_multi(&truth.expr, predicted)?,
            },
            MetricKind::Energy => MetricReport::Scalar {
                value: energy_distance(&truth.expr, predicted)?,
            },
            MetricKind::Kl => {
                let labels_true = truth.labels.as_ref().ok_or(Error::MissingLabels)?;
                let clf = classifier.as_ref().unwrap();
                let labels_pred = clf.predict(predicted)?;
                let vocab = dataset.label_vocab();
                MetricReport::Scalar {
                    value: celltype_kl(labels_true, &labels_pred, &vocab)?,
                }
            }
        };
        out.insert(metric.to_string(), report);
    }
    Ok(out)
}

#[derive(Debug, Serialize)]
struct EvaluatePayload {
    version: String,
    config_hash: String,
    predicted: String,
    dataset: String,
    target_index: usize,
    holdout: Vec<usize>,
    subsample_seed: u64,
    metrics: BTreeMap<String, MetricReport>,
}

pub fn cmd_evaluate(
    predicted_path: &Path,
    dataset_path: &Path,
    target_index: usize,
    holdout: &[usize],
    metrics: &[MetricKind],
    seed: u64,
    out: &Path,
) -> Result<()> {
    let dataset = load_dataset(dataset_path)?;
    let d = dataset.slice(0)?.dim();
    let predicted = contextflow::data::read_slice_csv(predicted_path, d, 0)?;
    let reports = evaluate_metrics(
        &predicted.expr,
        &dataset,
        target_index,
        holdout,
        metrics,
        seed,
    )?;
    let payload = EvaluatePayload {
        version: VERSION.to_string(),
        config_hash: config_hash(&(
            target_index,
            holdout,
            metrics.iter().map(|m| m.to_string()).collect::<Vec<_>>(),
            seed,
        ))?,
        predicted: predicted_path.display().to_string(),
        dataset: dataset_path.display().to_string(),
        target_index,
        holdout: holdout.to_vec(),
        subsample_seed: seed,
        metrics: reports,
    };
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    write_artifact(out, &payload)?;
    println!("wrote metrics to {}", out.display());
    Ok(())
}

/// One ablation grid cell after normalizing away parameters the mode ignores.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblateCell {
    pub mode: contextflow::trainer::CouplingMode,
    pub lambda: Option<f64>,
    pub alpha: Option<f64>,
    pub epsilon: Option<f64>,
}

impl AblateCell {
    fn normalize(
        mode: contextflow::trainer::CouplingMode,
        lambda: f64,
        alpha: f64,
        epsilon: f64,
    ) -> Self {
        use contextflow::trainer::CouplingMode::*;
        match mode {
            Random => Self {
                mode,
                lambda: None,
                alpha: None,
                epsilon: None,
            },
            Eot => Self {
                mode,
                lambda: None,
                alpha: None,
                epsilon: Some(epsilon),
            },
            Pacm => Self {
                mode,
                lambda: Some(lambda),
                alpha: Some(alpha),
                epsilon: Some(epsilon),
            },
            Paer => Self {
                mode,
                lambda: Some(lambda),
                alpha: None,
                epsilon: Some(epsilon),
            },
        }
    }

    pub fn dir_name(&self) -> String {
        let mut name = self.mode.to_string();
        if let Some(l) = self.lambda {
            let _ = write!(name, "_l{l:.2}");
        }
        if let Some(a) = self.alpha {
            let _ = write!(name, "_a{a:.2}");
        }
        if let Some(e) = self.epsilon {
            let _ = write!(name, "_e{e}");
        }
        name
    }

    fn apply_to(&self, cfg: &mut TrainConfig) {
        cfg.coupling_mode = self.mode;
        if let Some(l) = self.lambda {
            cfg.lambda = l;
        }
        if let Some(a) = self.alpha {
            cfg.alpha = a;
        }
        if let Some(e) = self.epsilon {
            cfg.epsilon = e;
        }
    }
}

#[derive(Debug, Serialize)]
struct RunPayload<'a> {
    version: &'a str,
    config_hash: String,
    run_spec: &'a RunSpec,
    dataset: String,
    metrics: BTreeMap<String, MetricReport>,
    coupling_diagnostics: Option<Vec<CouplingDiagnostic>>,
}

/// Train + sample + evaluate with one resolved spec; returns the metric map.
pub fn run_cell(
    dataset: &LongitudinalDataset,
    dataset_path: &Path,
    spec: &RunSpec,
    rules: Option<&TransitionRuleSet>,
    out_dir: &Path,
) -> Result<BTreeMap<String, MetricReport>> {
    fs::create_dir_all(out_dir)?;
    let outcome = train(dataset, &spec.train)?;
    save_checkpoint(
        &out_dir.join("checkpoint.json"),
        &outcome.field,
        &outcome.optimizer,
        &spec.train,
    )?;
    write_train_log(&out_dir.join("train_log.jsonl"), &spec.train, &outcome.log)?;
    let predicted = run_sampler(
        &outcome.field,
        dataset,
        spec.sampling_mode,
        spec.target_index,
        &spec.integration,
        &spec.train.holdout,
    )?;
    let reports = evaluate_metrics(
        &predicted,
        dataset,
        spec.target_index,
        &spec.train.holdout,
        &spec.metrics,
        spec.train.seed,
    )?;
    let diagnostics = match rules {
        Some(rules) => Some(coupling_diagnostics(dataset, &spec.train, rules)?),
        None => None,
    };
    write_artifact(
        &out_dir.join("metrics.json"),
        &RunPayload {
            version: VERSION,
            config_hash: config_hash(spec)?,
            run_spec: spec,
            dataset: dataset_path.display().to_string(),
            metrics: reports.clone(),
            coupling_diagnostics: diagnostics,
        },
    )?;
    Ok(reports)
}

#[derive(Debug, Serialize)]
struct AggregateRow {
    mode: String,
    lambda: Option<f64>,
    alpha: Option<f64>,
    epsilon: Option<f64>,
    seeds: usize,
    metrics: BTreeMap<String, MeanStd>,
}

#[derive(Debug, Serialize)]
struct MeanStd {
    mean: f64,
    std: f64,
}

/// Run the full coupling-mode x lambda x alpha x epsilon sweep over all seeds;
/// one metrics JSON per cell and seed, plus an aggregate table.
///
/// Cells run in parallel; each run is single-threaded and seed-deterministic,
/// so the artifacts are reproducible regardless of scheduling.
pub fn cmd_ablate(
    dataset_path: &Path,
    config: &Path,
    overrides: &TrainOverrides,
    rules: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let base = resolve_spec(Some(config), overrides)?;
    let grid = base.ablate.clone().ok_or_else(|| Error::Schema {
        path: config.display().to_string(),
        line: 0,
        message: "ablate command needs an `ablate` grid in the config".to_string(),
    })?;
    if grid.modes.is_empty() || grid.seeds.is_empty() {
        return Err(Error::Schema {
            path: config.display().to_string(),
            line: 0,
            message: "ablate grid needs at least one mode and one seed".to_string(),
        });
    }
    let rules = match rules {
        Some(path) => Some(load_rules(path)?),
        None => None,
    };
    let dataset = load_dataset(dataset_path)?;

    let epsilons = if grid.epsilons.is_empty() {
        vec![base.train.epsilon]
    } else {
        grid.epsilons.clone()
    };
    let mut cells = Vec::new();
    for &mode in &grid.modes {
        for &lambda in &grid.lambdas {
            for &alpha in &grid.alphas {
                for &epsilon in &epsilons {
                    let cell = AblateCell::normalize(mode, lambda, alpha, epsilon);
                    if !cells.contains(&cell) {
                        cells.push(cell);
                    }
                }
            }
        }
    }

    fs::create_dir_all(out)?;
    type CellResult = (usize, usize, BTreeMap<String, MetricReport>);
    let jobs: Vec<(usize, usize)> = (0..cells.len())
        .flat_map(|c| (0..grid.seeds.len()).map(move |s| (c, s)))
        .collect();
    let results: Vec<Result<CellResult>> = jobs
        .par_iter()
        .map(|&(c, s)| {
            let cell = &cells[c];
            let seed = grid.seeds[s];
            let mut spec = base.clone();
            spec.ablate = None;
            cell.apply_to(&mut spec.train);
            spec.train.seed = seed;
            let dir = out.join(cell.dir_name()).join(format!("seed_{seed}"));
            let reports = run_cell(&dataset, dataset_path, &spec, rules.as_ref(), &dir)?;
            Ok((c, s, reports))
        })
        .collect();

    let mut per_cell: Vec<BTreeMap<String, Vec<f64>>> = vec![BTreeMap::new(); cells.len()];
    for result in results {
        let (c, _, reports) = result?;
        for (name, report) in reports {
            per_cell[c].entry(name).or_default().push(report.value());
        }
    }
    let rows: Vec<AggregateRow> = cells
        .iter()
        .zip(&per_cell)
        .map(|(cell, metrics)| AggregateRow {
            mode: cell.mode.to_string(),
            lambda: cell.lambda,
            alpha: cell.alpha,
            epsilon: cell.epsilon,
            seeds: grid.seeds.len(),
            metrics: metrics
                .iter()
                .map(|(name, values)| (name.clone(), mean_std(values)))
                .collect(),
        })
        .collect();

    #[derive(Serialize)]
    struct AblatePayload<'a> {
        version: &'a str,
        config_hash: String,
        run_spec: &'a RunSpec,
        dataset: String,
        rows: &'a [AggregateRow],
    }
    write_artifact(
        &out.join("aggregate.json"),
        &AblatePayload {
            version: VERSION,
            config_hash: config_hash(&base)?,
            run_spec: &base,
            dataset: dataset_path.display().to_string(),
            rows: &rows,
        },
    )?;
    fs::write(out.join("aggregate.csv"), aggregate_csv(&rows))?;
    println!(
        "ran {} cells x {} seeds; aggregate at {}",
        cells.len(),
        grid.seeds.len(),
        out.join("aggregate.json").display()
    );
    Ok(())
}

fn mean_std(values: &[f64]) -> MeanStd {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    MeanStd {
        mean,
        std: var.sqrt(),
    }
}

fn aggregate_csv(rows: &[AggregateRow]) -> String {
    let mut metric_names: Vec<&String> = rows
        .iter()
        .flat_map(|r| r.metrics.keys())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    metric_names.dedup();
    let mut out = String::from("mode,lambda,alpha,epsilon,seeds");
    for name in &metric_names {
        let _ = write!(out, ",{name}_mean,{name}_std");
    }
    out.push('\n');
    let fmt_opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
    for row in rows {
        let _ = write!(
            out,
            "{},{},{},{},{}",
            row.mode,
            fmt_opt(row.lambda),
            fmt_opt(row.alpha),
            fmt_opt(row.epsilon),
            row.seeds
        );
        for name in &metric_names {
            match row.metrics.get(*name) {
                Some(ms) => {
                    let _ = write!(out, ",{},{}", ms.mean, ms.std);
                }
                None => out.push_str(",,"),
            }
        }
        out.push('\n');
    }
    out
}
