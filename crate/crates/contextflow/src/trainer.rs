//! End-to-end training: per-pair plausibility matrices, coupling solves,
//! conditional-path sampling, loss accumulation, and optimizer steps.
//!
//! Each epoch walks every consecutive pair of non-held-out slices, draws a
//! minibatch from each side, solves the configured coupling, samples coupled
//! pairs and interpolation times, and accumulates the regression loss; one
//! optimizer step is taken after the pair loop (or per pair behind a flag).
//! One interpolation time is drawn per coupled pair, not one per minibatch,
//! which lowers the variance of the regression estimator.

use ndarray::{Array1, Array2};
use rand::seq::index;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::tpm_for_pair;
use crate::slice::{LongitudinalDataset, SpatialSlice};
use crate::transport::{
    euclidean_cost, pacm_cost, sample_pairs, sinkhorn_eot, sinkhorn_paer, uniform_marginal,
    Coupling, SinkhornConfig,
};
use crate::velocity::{
    adam_step, init_field, loss_and_grad, Gradients, OptimizerState, TrainBatch, VelocityField,
};

/// How source and target minibatches are coupled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CouplingMode {
    /// Independent product coupling.
    Random,
    /// Entropic OT on the squared-Euclidean expression cost.
    Eot,
    /// Entropic OT on the prior-blended cost matrix.
    Pacm,
    /// Entropic OT with prior-aware entropy regularization.
    Paer,
}

impl std::str::FromStr for CouplingMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Self::Random),
            "eot" => Ok(Self::Eot),
            "pacm" => Ok(Self::Pacm),
            "paer" => Ok(Self::Paer),
            _ => Err(Error::InvalidParameter {
                name: "coupling mode",
                message: "expected one of random, eot, pacm, paer",
                value: f64::NAN,
            }),
        }
    }
}

impl std::fmt::Display for CouplingMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Self::Random => "random",
            Self::Eot => "eot",
            Self::Pacm => "pacm",
            Self::Paer => "paer",
        };
        f.write_str(s)
    }
}

/// All training hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub coupling_mode: CouplingMode,
    /// Spatial-smoothness vs ligand-receptor trade-off in the plausibility matrix.
    pub lambda: f64,
    /// Expression-cost vs prior trade-off in the blended cost.
    pub alpha: f64,
    /// Entropy regularization strength.
    pub epsilon: f64,
    /// Conditional path noise standard deviation.
    pub sigma: f64,
    /// Learning rate.
    pub eta: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Neighborhood radius; per-slice default (5% of the bounding-box diagonal)
    /// when absent.
    pub radius: Option<f64>,
    /// Dataset slice indices excluded from training.
    pub holdout: Vec<usize>,
    pub seed: u64,
    /// Hidden layer widths of the velocity network.
    pub hidden: Vec<usize>,
    /// Take an optimizer step after every pair instead of once per epoch.
    pub per_pair_update: bool,
    pub sinkhorn_max_iters: usize,
    pub sinkhorn_tol: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            coupling_mode: CouplingMode::Eot,
            lambda: 1.0,
            alpha: 0.5,
            epsilon: 0.1,
            sigma: 0.05,
            eta: 3e-3,
            batch_size: 64,
            epochs: 400,
            radius: None,
            holdout: Vec::new(),
            seed: 0,
            hidden: vec![64, 64, 64],
            per_pair_update: false,
            sinkhorn_max_iters: 2000,
            sinkhorn_tol: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, value) in [("lambda", self.lambda), ("alpha", self.alpha)] {
            if !(0.0..=1.0).contains(&value) {
                return Err(Error::InvalidParameter {
                    name,
                    message: "must lie in [0, 1]",
                    value,
                });
            }
        }
        if !self.epsilon.is_finite() || self.epsilon <= 0.0 {
            return Err(Error::InvalidParameter {
                name: "epsilon",
                message: "must be positive",
                value: self.epsilon,
            });
        }
        if !self.sigma.is_finite() || self.sigma < 0.0 {
            return Err(Error::InvalidParameter {
                name: "sigma",
                message: "must be nonnegative",
                value: self.sigma,
            });
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidParameter {
                name: "batch_size",
                message: "must be at least 1",
                value: 0.0,
            });
        }
        Ok(())
    }

    fn sinkhorn(&self) -> SinkhornConfig {
        SinkhornConfig {
            epsilon: self.epsilon,
            max_iters: self.sinkhorn_max_iters,
            tol_marginal: self.sinkhorn_tol,
            log_domain: true,
        }
    }
}

/// One point on the conditional probability path between a coupled pair, plus
/// the target velocity of that path.
///
/// The state interpolates the endpoints linearly in time with isotropic noise
/// `sigma`; the target is the straight-line slope `(x_j - x_i) / (t_j - t_i)`.
pub fn sample_conditional_path<R: Rng>(
    x_i: &Array1<f64>,
    x_j: &Array1<f64>,
    t_i: f64,
    t_j: f64,
    t: f64,
    sigma: f64,
    rng: &mut R,
) -> Result<(Array1<f64>, Array1<f64>)> {
    if t_i >= t_j {
        return Err(Error::InvalidParameter {
            name: "t_i",
            message: "pair times must satisfy t_i < t_j",
            value: t_i,
        });
    }
    if t < t_i || t > t_j {
        return Err(Error::InvalidParameter {
            name: "t",
            message: "interpolation time must lie in [t_i, t_j]",
            value: t,
        });
    }
    if x_i.len() != x_j.len() {
        return Err(Error::ShapeMismatch {
            context: "conditional path endpoints",
            expected: format!("{}", x_i.len()),
            actual: format!("{}", x_j.len()),
        });
    }
    let span = t_j - t_i;
    let w_i = (t_j - t) / span;
    let w_j = (t - t_i) / span;
    let mut x_t = Array1::zeros(x_i.len());
    for c in 0..x_i.len() {
        let noise: f64 = StandardNormal.sample(rng);
        x_t[c] = w_i * x_i[c] + w_j * x_j[c] + sigma * noise;
    }
    let u_target = (x_j - x_i) / span;
    Ok((x_t, u_target))
}

/// Solve the configured coupling between two minibatches.
pub fn make_coupling(
    mb_i: &SpatialSlice,
    mb_j: &SpatialSlice,
    cfg: &TrainConfig,
) -> Result<Coupling> {
    cfg.validate()?;
    let a = uniform_marginal(mb_i.n());
    let b = uniform_marginal(mb_j.n());
    match cfg.coupling_mode {
        CouplingMode::Random => {
            let plan = Array2::from_shape_fn((mb_i.n(), mb_j.n()), |(k, l)| a[k] * b[l]);
            Ok(Coupling {
                plan,
                row_marginal: a,
                col_marginal: b,
                converged: true,
                iterations: 0,
                marginal_error: 0.0,
            })
        }
        CouplingMode::Eot => {
            let cost = euclidean_cost(&mb_i.expr, &mb_j.expr)?.max_normalized();
            sinkhorn_eot(&cost, &cfg.sinkhorn(), &a, &b)
        }
        CouplingMode::Pacm => {
            let cost = euclidean_cost(&mb_i.expr, &mb_j.expr)?;
            let tpm = tpm_for_pair(mb_i, mb_j, cfg.lambda, cfg.radius)?;
            let blended = pacm_cost(&cost, &tpm, cfg.alpha)?;
            sinkhorn_eot(&blended, &cfg.sinkhorn(), &a, &b)
        }
        CouplingMode::Paer => {
            let cost = euclidean_cost(&mb_i.expr, &mb_j.expr)?.max_normalized();
            let tpm = tpm_for_pair(mb_i, mb_j, cfg.lambda, cfg.radius)?;
            sinkhorn_paer(&cost, &tpm, &cfg.sinkhorn(), &a, &b)
        }
    }
}

/// Coupling diagnostics for one slice pair in one epoch.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PairRecord {
    pub source_slice: usize,
    pub target_slice: usize,
    pub sinkhorn_iterations: usize,
    pub marginal_error: f64,
    pub converged: bool,
    pub loss: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean regression loss over the epoch's pairs.
    pub loss: f64,
    pub pairs: Vec<PairRecord>,
}

/// Full training log plus per-slice minibatch draw counters (used to verify
/// holdout isolation).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    pub slice_usage: Vec<usize>,
}

impl TrainLog {
    /// One JSON object per epoch, newline separated.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for record in &self.epochs {
            out.push_str(&serde_json::to_string(record).expect("epoch record serializes"));
            out.push('\n');
        }
        out
    }
}

pub struct TrainOutcome {
    pub field: VelocityField,
    pub optimizer: OptimizerState,
    pub log: TrainLog,
}

/// Train a velocity field on all consecutive non-held-out slice pairs.
pub fn train(dataset: &LongitudinalDataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let kept: Vec<usize> = (0..dataset.len())
        .filter(|i| !cfg.holdout.contains(i))
        .collect();
    if kept.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "{} non-held-out slices; need at least 2",
            kept.len()
        )));
    }
    let pairs: Vec<(usize, usize)> = kept.windows(2).map(|w| (w[0], w[1])).collect();
    let d = dataset.slice(0)?.dim();
    let mut field = init_field(d, &cfg.hidden, cfg.seed)?;
    let mut optimizer = OptimizerState::new(&field, cfg.eta);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut slice_usage = vec![0usize; dataset.len()];
    let mut epochs = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let mut accumulated = Gradients::zeros_like(&field);
        let mut pair_records = Vec::with_capacity(pairs.len());
        let mut loss_sum = 0.0;
        for &(i, j) in &pairs {
            let slice_i = dataset.slice(i)?;
            let slice_j = dataset.slice(j)?;
            let mb_i = draw_minibatch(slice_i, cfg.batch_size, &mut rng)?;
            let mb_j = draw_minibatch(slice_j, cfg.batch_size, &mut rng)?;
            slice_usage[i] += 1;
            slice_usage[j] += 1;

            let coupling = make_coupling(&mb_i, &mb_j, cfg)?;
            let coupled = sample_pairs(&coupling, cfg.batch_size, &mut rng)?;
            let mut times = Vec::with_capacity(coupled.len());
            let mut states = Array2::zeros((coupled.len(), d));
            let mut targets = Array2::zeros((coupled.len(), d));
            for (s, &(k, l)) in coupled.iter().enumerate() {
                let t = rng.random_range(slice_i.time..slice_j.time);
                let (x_t, u_target) = sample_conditional_path(
                    &mb_i.expr.row(k).to_owned(),
                    &mb_j.expr.row(l).to_owned(),
                    slice_i.time,
                    slice_j.time,
                    t,
                    cfg.sigma,
                    &mut rng,
                )?;
                times.push(t);
                states.row_mut(s).assign(&x_t);
                targets.row_mut(s).assign(&u_target);
            }
            let batch = TrainBatch {
                times,
                states,
                targets,
            };
            let (loss, grads) = loss_and_grad(&field, &batch)?;
            loss_sum += loss;
            pair_records.push(PairRecord {
                source_slice: i,
                target_slice: j,
                sinkhorn_iterations: coupling.iterations,
                marginal_error: coupling.marginal_error,
                converged: coupling.converged,
                loss,
            });
            if cfg.per_pair_update {
                adam_step(&mut field, &mut optimizer, &grads)?;
            } else {
                accumulated.add_assign(&grads);
            }
        }
        let mean_loss = loss_sum / pairs.len() as f64;
        if !mean_loss.is_finite() {
            return Err(Error::Diverged(format!(
                "non-finite epoch loss {mean_loss} at epoch {epoch}"
            )));
        }
        if !cfg.per_pair_update {
            accumulated.scale(1.0 / pairs.len() as f64);
            adam_step(&mut field, &mut optimizer, &accumulated)?;
        }
        epochs.push(EpochRecord {
            epoch,
            loss: mean_loss,
            pairs: pair_records,
        });
    }

    Ok(TrainOutcome {
        field,
        optimizer,
        log: TrainLog {
            epochs,
            slice_usage,
        },
    })
}

/// Sample `min(batch_size, n)` distinct cells uniformly without replacement.
fn draw_minibatch<R: Rng>(
    slice: &SpatialSlice,
    batch_size: usize,
    rng: &mut R,
) -> Result<SpatialSlice> {
    let amount = batch_size.min(slice.n());
    let indices = index::sample(rng, slice.n(), amount).into_vec();
    slice.select(&indices)
}
