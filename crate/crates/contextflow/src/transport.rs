//! Entropic optimal transport with optional transition priors.
//!
//! Three solver entry points share one Sinkhorn core:
//! - [`sinkhorn_eot`]: plain entropic OT on a cost matrix (Gibbs kernel
//!   `exp(-C / epsilon)`),
//! - [`sinkhorn_paer`]: entropy regularization taken relative to a prior joint
//!   probability induced by a plausibility matrix; the kernel becomes
//!   `Mhat .* exp(-C / epsilon)` where `Mhat` is the row-wise softmax of `-M`,
//! - [`pacm_cost`]: blends the plausibility matrix into the transport cost
//!   itself (both matrices max-normalized first), to be solved with
//!   [`sinkhorn_eot`].
//!
//! [`exact_ot`] provides an unregularized reference solution at small scale via
//! the assignment solver, and [`sample_pairs`] draws coupled index pairs from a
//! plan.
//!
//! Max-normalizing costs before the blend flattens the scale differences between
//! modalities but also diffuses the resulting couplings, much like raising
//! `epsilon`; callers comparing plans across cost constructions should keep the
//! normalization in mind.

use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::assignment::solve_assignment;
use crate::error::{Error, Result};
use crate::geometry::PlausibilityMatrix;

/// Hard cap on `n_a * n_b` for the exact solver.
pub const EXACT_OT_CELL_CAP: usize = 4096;

/// Nonnegative, finite pairwise transport costs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CostMatrix {
    pub values: Array2<f64>,
}

impl CostMatrix {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        for ((r, c), v) in values.indexed_iter() {
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    context: "cost matrix".to_string(),
                    location: format!("row {r}, column {c}"),
                });
            }
            if *v < 0.0 {
                return Err(Error::InvalidParameter {
                    name: "cost",
                    message: "entries must be nonnegative",
                    value: *v,
                });
            }
        }
        Ok(Self { values })
    }

    pub fn nrows(&self) -> usize {
        self.values.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.values.ncols()
    }

    /// Divide by the maximum entry; an all-zero matrix is left untouched.
    pub fn max_normalized(&self) -> CostMatrix {
        let max = self.values.iter().cloned().fold(0.0, f64::max);
        if max > 0.0 {
            CostMatrix {
                values: &self.values / max,
            }
        } else {
            self.clone()
        }
    }
}

/// Squared Euclidean distances between the rows of two matrices.
pub fn euclidean_cost(xa: &Array2<f64>, xb: &Array2<f64>) -> Result<CostMatrix> {
    if xa.ncols() != xb.ncols() {
        return Err(Error::ShapeMismatch {
            context: "euclidean cost",
            expected: format!("{} columns", xa.ncols()),
            actual: format!("{} columns", xb.ncols()),
        });
    }
    let mut values = Array2::zeros((xa.nrows(), xb.nrows()));
    for k in 0..xa.nrows() {
        for l in 0..xb.nrows() {
            let mut acc = 0.0;
            for c in 0..xa.ncols() {
                let d = xa[[k, c]] - xb[[l, c]];
                acc += d * d;
            }
            values[[k, l]] = acc;
        }
    }
    CostMatrix::new(values)
}

/// Sinkhorn solver settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SinkhornConfig {
    /// Entropy regularization strength.
    pub epsilon: f64,
    /// Iteration cap.
    pub max_iters: usize,
    /// L-infinity marginal violation below which the solve counts as converged.
    pub tol_marginal: f64,
    /// Run the updates on dual potentials with log-sum-exp reductions.
    pub log_domain: bool,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.1,
            max_iters: 2000,
            tol_marginal: 1e-8,
            log_domain: true,
        }
    }
}

impl SinkhornConfig {
    fn validate(&self) -> Result<()> {
        if !self.epsilon.is_finite() || self.epsilon <= 0.0 {
            return Err(Error::InvalidParameter {
                name: "epsilon",
                message: "must be positive",
                value: self.epsilon,
            });
        }
        if !self.tol_marginal.is_finite() || self.tol_marginal <= 0.0 {
            return Err(Error::InvalidParameter {
                name: "tol_marginal",
                message: "must be positive",
                value: self.tol_marginal,
            });
        }
        Ok(())
    }
}

/// A transport plan with its prescribed marginals and solve diagnostics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Coupling {
    pub plan: Array2<f64>,
    pub row_marginal: Array1<f64>,
    pub col_marginal: Array1<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// L-infinity violation of the marginal constraints at the final iterate.
    pub marginal_error: f64,
}

impl Coupling {
    /// Transport part of the objective, `sum(plan * cost)`.
    pub fn transport_cost(&self, cost: &CostMatrix) -> f64 {
        self.plan
            .iter()
            .zip(cost.values.iter())
            .map(|(p, c)| p * c)
            .sum()
    }
}

/// Uniform probability vector of length `n`.
pub fn uniform_marginal(n: usize) -> Array1<f64> {
    Array1::from_elem(n, 1.0 / n as f64)
}

fn validate_marginals(a: &Array1<f64>, b: &Array1<f64>, na: usize, nb: usize) -> Result<()> {
    if a.len() != na || b.len() != nb {
        return Err(Error::ShapeMismatch {
            context: "marginals",
            expected: format!("{na} and {nb}"),
            actual: format!("{} and {}", a.len(), b.len()),
        });
    }
    for (which, m) in [("row", a), ("column", b)] {
        if m.iter().any(|v| !v.is_finite() || *v <= 0.0) {
            return Err(Error::InvalidMarginal {
                which,
                message: "entries must be strictly positive".to_string(),
            });
        }
        let sum: f64 = m.iter().sum();
        if (sum - 1.0).abs() > 1e-8 {
            return Err(Error::InvalidMarginal {
                which,
                message: format!("must sum to 1, got {sum}"),
            });
        }
    }
    Ok(())
}

/// Plain entropic OT: minimize `sum(plan * C) + epsilon * KL(plan | a x b)`
/// subject to the marginal constraints, by Sinkhorn scaling of the kernel
/// `exp(-C / epsilon)`.
pub fn sinkhorn_eot(
    cost: &CostMatrix,
    cfg: &SinkhornConfig,
    a: &Array1<f64>,
    b: &Array1<f64>,
) -> Result<Coupling> {
    cfg.validate()?;
    validate_marginals(a, b, cost.nrows(), cost.ncols())?;
    let log_kernel = cost.values.mapv(|c| -c / cfg.epsilon);
    sinkhorn_core(&log_kernel, cfg, a, b)
}

/// Prior-aware entropy regularization: the entropy term is taken relative to the
/// prior joint probability matrix induced by the plausibility matrix `M` (row-wise
/// softmax of `-M`), giving the kernel `Mhat .* exp(-C / epsilon)`.
pub fn sinkhorn_paer(
    cost: &CostMatrix,
    prior: &PlausibilityMatrix,
    cfg: &SinkhornConfig,
    a: &Array1<f64>,
    b: &Array1<f64>,
) -> Result<Coupling> {
    cfg.validate()?;
    validate_marginals(a, b, cost.nrows(), cost.ncols())?;
    if prior.values.dim() != cost.values.dim() {
        return Err(Error::ShapeMismatch {
            context: "plausibility matrix",
            expected: format!("{:?}", cost.values.dim()),
            actual: format!("{:?}", prior.values.dim()),
        });
    }
    for ((r, c), v) in prior.values.indexed_iter() {
        if !v.is_finite() || *v < 0.0 {
            return Err(Error::NonFinite {
                context: "plausibility matrix".to_string(),
                location: format!("row {r}, column {c}"),
            });
        }
    }
    let log_prior = log_row_softmax_neg(&prior.values);
    if !cfg.log_domain {
        // The materialized prior can underflow when M is sharp at this scale.
        for (r, row) in log_prior.rows().into_iter().enumerate() {
            if row.iter().all(|&lp| lp.exp() == 0.0) {
                return Err(Error::PriorTooSharp { row: r });
            }
        }
    }
    let mut log_kernel = log_prior;
    for (lk, c) in log_kernel.iter_mut().zip(cost.values.iter()) {
        *lk -= c / cfg.epsilon;
    }
    sinkhorn_core(&log_kernel, cfg, a, b)
}

/// Row-wise `log softmax(-M)`: entry `(k, l)` is `-M[k,l] - log sum_l' exp(-M[k,l'])`.
fn log_row_softmax_neg(m: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(m.raw_dim());
    for (k, row) in m.rows().into_iter().enumerate() {
        // Stabilize around the row minimum of M, the maximum of -M.
        let min = row.iter().cloned().fold(f64::INFINITY, f64::min);
        let mut sum = 0.0;
        for &v in row.iter() {
            sum += (min - v).exp();
        }
        let lse = -min + sum.ln();
        for (l, &v) in row.iter().enumerate() {
            out[[k, l]] = -v - lse;
        }
    }
    out
}

/// Shared Sinkhorn iteration on a log-domain kernel.
fn sinkhorn_core(
    log_kernel: &Array2<f64>,
    cfg: &SinkhornConfig,
    a: &Array1<f64>,
    b: &Array1<f64>,
) -> Result<Coupling> {
    if log_kernel.iter().any(|v| v.is_nan()) {
        return Err(Error::DegenerateKernel(
            "kernel exponent is NaN".to_string(),
        ));
    }
    if cfg.log_domain {
        sinkhorn_log_domain(log_kernel, cfg, a, b)
    } else {
        sinkhorn_plain(&log_kernel.mapv(f64::exp), cfg, a, b)
    }
}

fn sinkhorn_log_domain(
    log_kernel: &Array2<f64>,
    cfg: &SinkhornConfig,
    a: &Array1<f64>,
    b: &Array1<f64>,
) -> Result<Coupling> {
    let (na, nb) = log_kernel.dim();
    let log_a = a.mapv(f64::ln);
    let log_b = b.mapv(f64::ln);
    let mut phi = Array1::<f64>::zeros(na);
    let mut psi = Array1::<f64>::zeros(nb);

    let mut iterations = 0;
    let mut converged = false;
    let mut marginal_error = f64::INFINITY;
    while iterations < cfg.max_iters {
        // phi update: rows hit their marginal exactly.
        for k in 0..na {
            let mut max = f64::NEG_INFINITY;
            for l in 0..nb {
                let v = log_kernel[[k, l]] + psi[l];
                if v > max {
                    max = v;
                }
            }
            if max == f64::NEG_INFINITY {
                return Err(Error::DegenerateKernel(format!(
                    "kernel row {k} has no mass; marginals unreachable"
                )));
            }
            let mut sum = 0.0;
            for l in 0..nb {
                sum += (log_kernel[[k, l]] + psi[l] - max).exp();
            }
            phi[k] = log_a[k] - (max + sum.ln());
        }
        // psi update: columns hit their marginal exactly.
        for l in 0..nb {
            let mut max = f64::NEG_INFINITY;
            for k in 0..na {
                let v = log_kernel[[k, l]] + phi[k];
                if v > max {
                    max = v;
                }
            }
            if max == f64::NEG_INFINITY {
                return Err(Error::DegenerateKernel(format!(
                    "kernel column {l} has no mass; marginals unreachable"
                )));
            }
            let mut sum = 0.0;
            for k in 0..na {
                sum += (log_kernel[[k, l]] + phi[k] - max).exp();
            }
            psi[l] = log_b[l] - (max + sum.ln());
        }
        iterations += 1;
        if phi.iter().chain(psi.iter()).any(|v| !v.is_finite()) {
            return Err(Error::DegenerateKernel(
                "non-finite dual potential after stabilization".to_string(),
            ));
        }
        if iterations % 10 == 0 || iterations == cfg.max_iters {
            marginal_error = log_domain_marginal_error(log_kernel, &phi, &psi, a, b);
            if marginal_error <= cfg.tol_marginal {
                converged = true;
                break;
            }
        }
    }

    let mut plan = Array2::zeros((na, nb));
    for k in 0..na {
        for l in 0..nb {
            plan[[k, l]] = (phi[k] + log_kernel[[k, l]] + psi[l]).exp();
        }
    }
    if !converged {
        marginal_error = plan_marginal_error(&plan, a, b);
    }
    Ok(Coupling {
        plan,
        row_marginal: a.clone(),
        col_marginal: b.clone(),
        converged,
        iterations,
        marginal_error,
    })
}

fn log_domain_marginal_error(
    log_kernel: &Array2<f64>,
    phi: &Array1<f64>,
    psi: &Array1<f64>,
    a: &Array1<f64>,
    b: &Array1<f64>,
) -> f64 {
    let (na, nb) = log_kernel.dim();
    let mut err: f64 = 0.0;
    for k in 0..na {
        let mut sum = 0.0;
        for l in 0..nb {
            sum += (phi[k] + log_kernel[[k, l]] + psi[l]).exp();
        }
        err = err.max((sum - a[k]).abs());
    }
    for l in 0..nb {
        let mut sum = 0.0;
        for k in 0..na {
            sum += (phi[k] + log_kernel[[k, l]] + psi[l]).exp();
        }
        err = err.max((sum - b[l]).abs());
    }
    err
}

fn plan_marginal_error(plan: &Array2<f64>, a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    let mut err: f64 = 0.0;
    for (k, row) in plan.rows().into_iter().enumerate() {
        err = err.max((row.sum() - a[k]).abs());
    }
    for (l, col) in plan.columns().into_iter().enumerate() {
        err = err.max((col.sum() - b[l]).abs());
    }
    err
}

fn sinkhorn_plain(
    kernel: &Array2<f64>,
    cfg: &SinkhornConfig,
    a: &Array1<f64>,
    b: &Array1<f64>,
) -> Result<Coupling> {
    let (na, nb) = kernel.dim();
    for (k, row) in kernel.rows().into_iter().enumerate() {
        if row.sum() == 0.0 {
            return Err(Error::DegenerateKernel(format!(
                "kernel row {k} is zero; marginals unreachable"
            )));
        }
    }
    for (l, col) in kernel.columns().into_iter().enumerate() {
        if col.sum() == 0.0 {
            return Err(Error::DegenerateKernel(format!(
                "kernel column {l} is zero; marginals unreachable"
            )));
        }
    }
    let mut u = Array1::<f64>::ones(na);
    let mut v = Array1::<f64>::ones(nb);
    let mut iterations = 0;
    let mut converged = false;
    let mut marginal_error = f64::INFINITY;
    while iterations < cfg.max_iters {
        for k in 0..na {
            let mut kv = 0.0;
            for l in 0..nb {
                kv += kernel[[k, l]] * v[l];
            }
            u[k] = a[k] / kv;
        }
        for l in 0..nb {
            let mut ku = 0.0;
            for k in 0..na {
                ku += kernel[[k, l]] * u[k];
            }
            v[l] = b[l] / ku;
        }
        iterations += 1;
        if u.iter().chain(v.iter()).any(|x| !x.is_finite()) {
            return Err(Error::DegenerateKernel(
                "non-finite scaling vector; use log-domain mode".to_string(),
            ));
        }
        if iterations % 10 == 0 || iterations == cfg.max_iters {
            let plan = scaled_plan(kernel, &u, &v);
            marginal_error = plan_marginal_error(&plan, a, b);
            if marginal_error <= cfg.tol_marginal {
                converged = true;
                break;
            }
        }
    }
    let plan = scaled_plan(kernel, &u, &v);
    if !converged {
        marginal_error = plan_marginal_error(&plan, a, b);
    }
    Ok(Coupling {
        plan,
        row_marginal: a.clone(),
        col_marginal: b.clone(),
        converged,
        iterations,
        marginal_error,
    })
}

fn scaled_plan(kernel: &Array2<f64>, u: &Array1<f64>, v: &Array1<f64>) -> Array2<f64> {
    let mut plan = kernel.clone();
    for ((k, l), p) in plan.indexed_iter_mut() {
        *p *= u[k] * v[l];
    }
    plan
}

/// Blend a plausibility matrix into the transport cost: both matrices are
/// divided by their own maximum (an all-zero matrix stays zero), then combined
/// as `alpha * cost + (1 - alpha) * prior`.
pub fn pacm_cost(
    cost: &CostMatrix,
    prior: &PlausibilityMatrix,
    alpha: f64,
) -> Result<CostMatrix> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidParameter {
            name: "alpha",
            message: "must lie in [0, 1]",
            value: alpha,
        });
    }
    if prior.values.dim() != cost.values.dim() {
        return Err(Error::ShapeMismatch {
            context: "pacm cost",
            expected: format!("{:?}", cost.values.dim()),
            actual: format!("{:?}", prior.values.dim()),
        });
    }
    let c_norm = cost.max_normalized();
    let m_max = prior.values.iter().cloned().fold(0.0, f64::max);
    let mut values = Array2::zeros(cost.values.raw_dim());
    for ((k, l), v) in values.indexed_iter_mut() {
        let m = if m_max > 0.0 {
            prior.values[[k, l]] / m_max
        } else {
            0.0
        };
        *v = alpha * c_norm.values[[k, l]] + (1.0 - alpha) * m;
    }
    CostMatrix::new(values)
}

/// Exact (unregularized) OT at small scale.
///
/// Uniform square problems reduce directly to an assignment; other uniform or
/// rational marginals are expanded into unit-mass copies first. The expansion
/// and the input are both capped at [`EXACT_OT_CELL_CAP`] cells.
pub fn exact_ot(cost: &CostMatrix, a: &Array1<f64>, b: &Array1<f64>) -> Result<Coupling> {
    let (na, nb) = cost.values.dim();
    if na * nb > EXACT_OT_CELL_CAP {
        return Err(Error::ProblemTooLarge {
            message: format!("{na} x {nb} exceeds {EXACT_OT_CELL_CAP} cells"),
        });
    }
    validate_marginals(a, b, na, nb)?;

    let uniform_square = na == nb
        && a.iter().all(|&v| (v - 1.0 / na as f64).abs() < 1e-12)
        && b.iter().all(|&v| (v - 1.0 / nb as f64).abs() < 1e-12);
    let plan = if uniform_square {
        let (assignment, _) = solve_assignment(&cost.values)?;
        let mut plan = Array2::zeros((na, nb));
        for (k, &l) in assignment.iter().enumerate() {
            plan[[k, l]] = 1.0 / na as f64;
        }
        plan
    } else {
        let expansion = find_integral_expansion(a, b)?;
        let row_counts: Vec<usize> = a
            .iter()
            .map(|&v| (v * expansion as f64).round() as usize)
            .collect();
        let col_counts: Vec<usize> = b
            .iter()
            .map(|&v| (v * expansion as f64).round() as usize)
            .collect();
        let row_of: Vec<usize> = row_counts
            .iter()
            .enumerate()
            .flat_map(|(k, &c)| std::iter::repeat_n(k, c))
            .collect();
        let col_of: Vec<usize> = col_counts
            .iter()
            .enumerate()
            .flat_map(|(l, &c)| std::iter::repeat_n(l, c))
            .collect();
        let expanded = Array2::from_shape_fn((expansion, expansion), |(i, j)| {
            cost.values[[row_of[i], col_of[j]]]
        });
        let (assignment, _) = solve_assignment(&expanded)?;
        let mut plan = Array2::zeros((na, nb));
        for (i, &j) in assignment.iter().enumerate() {
            plan[[row_of[i], col_of[j]]] += 1.0 / expansion as f64;
        }
        plan
    };
    let marginal_error = plan_marginal_error(&plan, a, b);
    Ok(Coupling {
        plan,
        row_marginal: a.clone(),
        col_marginal: b.clone(),
        converged: true,
        iterations: 0,
        marginal_error,
    })
}

/// Smallest copy count `N` making both marginals integral, capped so the
/// expanded assignment stays tractable.
fn find_integral_expansion(a: &Array1<f64>, b: &Array1<f64>) -> Result<usize> {
    let max_expansion = EXACT_OT_CELL_CAP;
    let lower = a.len().max(b.len());
    for n in lower..=max_expansion {
        let nf = n as f64;
        let integral = |m: &Array1<f64>| {
            let mut total = 0usize;
            for &v in m.iter() {
                let scaled = v * nf;
                let rounded = scaled.round();
                if (scaled - rounded).abs() > 1e-6 || rounded < 1.0 {
                    return None;
                }
                total += rounded as usize;
            }
            Some(total)
        };
        if let (Some(ta), Some(tb)) = (integral(a), integral(b)) {
            if ta == n && tb == n {
                return Ok(n);
            }
        }
    }
    Err(Error::ProblemTooLarge {
        message: format!("no integral expansion of the marginals below {max_expansion}"),
    })
}

/// Draw `count` coupled index pairs i.i.d. with probability proportional to the
/// plan entries. Deterministic given the generator state.
pub fn sample_pairs<R: Rng>(
    coupling: &Coupling,
    count: usize,
    rng: &mut R,
) -> Result<Vec<(usize, usize)>> {
    let plan = &coupling.plan;
    let (na, nb) = plan.dim();
    let mut cumulative = Vec::with_capacity(na * nb);
    let mut total = 0.0;
    for v in plan.iter() {
        total += v.max(0.0);
        cumulative.push(total);
    }
    if !total.is_finite() || total <= 0.0 {
        return Err(Error::DegeneratePlan(total));
    }
    let mut pairs = Vec::with_capacity(count);
    for _ in 0..count {
        let x = rng.random::<f64>() * total;
        let idx = cumulative.partition_point(|&c| c <= x).min(na * nb - 1);
        pairs.push((idx / nb, idx % nb));
    }
    Ok(pairs)
}
