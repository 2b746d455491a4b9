//! Deterministic fixed-step ODE integration of a velocity field, plus the two
//! trajectory sampling modes: from the first observed slice (initial value
//! problem) or from the immediately preceding one (next step).

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::slice::LongitudinalDataset;
use crate::velocity::Velocity;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IntegrationMethod {
    Euler,
    Rk4,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IntegrationConfig {
    pub method: IntegrationMethod,
    pub steps_per_unit_time: usize,
}

impl Default for IntegrationConfig {
    fn default() -> Self {
        Self {
            method: IntegrationMethod::Rk4,
            steps_per_unit_time: 100,
        }
    }
}

/// Integrate every row of `x0` independently from `t_start` to `t_end`.
///
/// The step count is `ceil(steps_per_unit_time * (t_end - t_start))`. A
/// zero-length interval returns the input unchanged.
pub fn integrate<V: Velocity>(
    field: &V,
    x0: &Array2<f64>,
    t_start: f64,
    t_end: f64,
    cfg: &IntegrationConfig,
) -> Result<Array2<f64>> {
    if cfg.steps_per_unit_time == 0 {
        return Err(Error::InvalidParameter {
            name: "steps_per_unit_time",
            message: "must be at least 1",
            value: 0.0,
        });
    }
    if t_end < t_start {
        return Err(Error::InvalidParameter {
            name: "t_end",
            message: "must not precede t_start",
            value: t_end,
        });
    }
    if t_end == t_start {
        return Ok(x0.clone());
    }
    let span = t_end - t_start;
    let steps = (cfg.steps_per_unit_time as f64 * span).ceil().max(1.0) as usize;
    let h = span / steps as f64;
    let mut state = x0.clone();
    for step in 0..steps {
        let t = t_start + step as f64 * h;
        state = match cfg.method {
            IntegrationMethod::Euler => {
                let k1 = field.eval_batch(t, &state)?;
                state + &(k1 * h)
            }
            IntegrationMethod::Rk4 => {
                let k1 = field.eval_batch(t, &state)?;
                let k2 = field.eval_batch(t + 0.5 * h, &(&state + &(&k1 * (0.5 * h))))?;
                let k3 = field.eval_batch(t + 0.5 * h, &(&state + &(&k2 * (0.5 * h))))?;
                let k4 = field.eval_batch(t + h, &(&state + &(&k3 * h)))?;
                let increment = (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
                state + &increment
            }
        };
        if state.iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged(format!(
                "non-finite state at integration step {step} (t = {t})"
            )));
        }
    }
    Ok(state)
}

/// Integrate the first slice's expressions all the way to the target time.
///
/// `target_index == 0` is the degenerate zero-length case and returns the first
/// slice unchanged.
pub fn ivp_sample<V: Velocity>(
    field: &V,
    dataset: &LongitudinalDataset,
    target_index: usize,
    cfg: &IntegrationConfig,
) -> Result<Array2<f64>> {
    let start = dataset.slice(0)?;
    let target = dataset.slice(target_index)?;
    integrate(field, &start.expr, start.time, target.time, cfg)
}

/// Integrate from the slice immediately preceding the target.
///
/// `holdout` lists slice indices unavailable as starting points; a held-out
/// predecessor is an error rather than a silent fallback.
pub fn next_step_sample<V: Velocity>(
    field: &V,
    dataset: &LongitudinalDataset,
    target_index: usize,
    cfg: &IntegrationConfig,
    holdout: &[usize],
) -> Result<Array2<f64>> {
    if target_index == 0 {
        return Err(Error::InvalidParameter {
            name: "target_index",
            message: "next-step sampling needs a preceding slice",
            value: 0.0,
        });
    }
    let source_index = target_index - 1;
    if holdout.contains(&source_index) {
        return Err(Error::InsufficientData(format!(
            "preceding slice {source_index} is held out and unavailable"
        )));
    }
    let source = dataset.slice(source_index)?;
    let target = dataset.slice(target_index)?;
    if source.time == target.time {
        return Err(Error::InvalidParameter {
            name: "target_index",
            message: "zero-length interval between source and target",
            value: target.time,
        });
    }
    integrate(field, &source.expr, source.time, target.time, cfg)
}
