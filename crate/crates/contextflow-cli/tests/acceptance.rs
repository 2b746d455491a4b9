//! Acceptance suite: one test per criterion, each printing a PASS line with
//! the measured quantities. Oracles here are independent of the solver paths
//! they check (mirror descent for the prior-regularized transport objective,
//! permutation enumeration for assignments, finite differences for gradients,
//! closed-form ODE solutions for the integrator).

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;

use ndarray::{array, Array1, Array2, Axis};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use contextflow::data::{generate_synthetic, SynthConfig};
use contextflow::error::Result;
use contextflow::geometry::PlausibilityMatrix;
use contextflow::metrics::{
    count_implausible, energy_distance, mmd_rbf_multi, w2, TransitionRuleSet, MMD_GAMMAS,
};
use contextflow::sampler::{
    integrate, ivp_sample, next_step_sample, IntegrationConfig, IntegrationMethod,
};
use contextflow::trainer::{make_coupling, train, CouplingMode, TrainConfig};
use contextflow::transport::{
    exact_ot, sinkhorn_eot, sinkhorn_paer, uniform_marginal, CostMatrix, SinkhornConfig,
};
use contextflow::velocity::{init_field, loss_and_grad, TrainBatch, Velocity, VelocityField};

// ---------------------------------------------------------------------------
// Shared oracle helpers
// ---------------------------------------------------------------------------

/// Row-wise log softmax of `-M`, written independently of the transport module.
fn log_row_softmax_neg(m: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(m.raw_dim());
    for (k, row) in m.rows().into_iter().enumerate() {
        let min = row.iter().cloned().fold(f64::INFINITY, f64::min);
        let sum: f64 = row.iter().map(|&v| (min - v).exp()).sum();
        let lse = -min + sum.ln();
        for (l, &v) in row.iter().enumerate() {
            out[[k, l]] = -v - lse;
        }
    }
    out
}

/// Direct constrained minimization of the prior-relative entropic transport
/// objective `sum(P C) + eps * sum(P log(P / Mhat))` by augmented-Lagrangian
/// mirror descent on the plan entries. No Sinkhorn scaling is involved.
fn paer_objective_oracle(
    c: &Array2<f64>,
    log_mhat: &Array2<f64>,
    eps: f64,
    a: &Array1<f64>,
    b: &Array1<f64>,
) -> Array2<f64> {
    let (na, nb) = c.dim();
    let mut log_p = Array2::from_shape_fn((na, nb), |(k, l)| (a[k] * b[l]).ln());
    let mut mu = Array1::<f64>::zeros(na);
    let mut nu = Array1::<f64>::zeros(nb);
    let mut rho = 1.0f64;
    for _outer in 0..400 {
        for _inner in 0..20_000 {
            let p = log_p.mapv(f64::exp);
            let row_err = &p.sum_axis(Axis(1)) - a;
            let col_err = &p.sum_axis(Axis(0)) - b;
            let eta = 0.3 / (eps + rho);
            let mut max_step = 0.0f64;
            for k in 0..na {
                for l in 0..nb {
                    let grad = c[[k, l]]
                        + eps * (log_p[[k, l]] + 1.0 - log_mhat[[k, l]])
                        + mu[k]
                        + nu[l]
                        + rho * (row_err[k] + col_err[l]);
                    let step = eta * grad;
                    log_p[[k, l]] -= step;
                    max_step = max_step.max(step.abs());
                }
            }
            if max_step < 1e-13 {
                break;
            }
        }
        let p = log_p.mapv(f64::exp);
        let row_err = &p.sum_axis(Axis(1)) - a;
        let col_err = &p.sum_axis(Axis(0)) - b;
        let err = row_err
            .iter()
            .chain(col_err.iter())
            .fold(0.0f64, |m, v| m.max(v.abs()));
        if err < 1e-12 && rho > 1e4 {
            break;
        }
        for k in 0..na {
            mu[k] += rho * row_err[k];
        }
        for l in 0..nb {
            nu[l] += rho * col_err[l];
        }
        rho = (rho * 2.0).min(1e8);
    }
    log_p.mapv(f64::exp)
}

fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

// ---------------------------------------------------------------------------
// Criterion 1: prior-aware Sinkhorn vs direct objective minimization
// ---------------------------------------------------------------------------

#[test]
fn criterion_01_paer_matches_objective_oracle() {
    let start = std::time::Instant::now();

    // Anchor the oracle itself on a 2x2 problem with a closed-form optimum:
    // C = [[0,1],[1,0]], uniform prior, plan [[p, 1/2-p], [1/2-p, p]] with
    // p = (1/2) e^{1/eps} / (1 + e^{1/eps}).
    let eps = 0.5;
    let c2 = array![[0.0, 1.0], [1.0, 0.0]];
    let uniform_prior = Array2::from_elem((2, 2), 1.0);
    let anchor = paer_objective_oracle(
        &c2,
        &log_row_softmax_neg(&uniform_prior),
        eps,
        &uniform_marginal(2),
        &uniform_marginal(2),
    );
    let p_analytic = 0.5 * (1.0f64 / eps).exp() / (1.0 + (1.0f64 / eps).exp());
    assert!(
        (anchor[[0, 0]] - p_analytic).abs() < 1e-8,
        "oracle self-check failed: {} vs {}",
        anchor[[0, 0]],
        p_analytic
    );

    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let a = uniform_marginal(6);
    let b = uniform_marginal(8);
    let mut worst_plan_diff = 0.0f64;
    let mut worst_rank1 = 0.0f64;
    for _ in 0..20 {
        let c = Array2::from_shape_fn((6, 8), |_| rng.random_range(0.0..2.0));
        let m = Array2::from_shape_fn((6, 8), |_| rng.random_range(0.0..3.0));
        let cost = CostMatrix::new(c.clone()).unwrap();
        let prior = PlausibilityMatrix {
            values: m.clone(),
            lambda: 1.0,
        };
        let cfg = SinkhornConfig {
            epsilon: eps,
            max_iters: 100_000,
            tol_marginal: 1e-12,
            log_domain: true,
        };
        let solved = sinkhorn_paer(&cost, &prior, &cfg, &a, &b).unwrap();
        assert!(solved.converged);

        let log_mhat = log_row_softmax_neg(&m);
        let oracle = paer_objective_oracle(&c, &log_mhat, eps, &a, &b);
        worst_plan_diff = worst_plan_diff.max(max_abs_diff(&solved.plan, &oracle));

        // Kernel factorization: log(plan) - log(K) must be phi_k + psi_l.
        let residual = Array2::from_shape_fn((6, 8), |(k, l)| {
            solved.plan[[k, l]].ln() - (log_mhat[[k, l]] - c[[k, l]] / eps)
        });
        for k in 0..6 {
            for l in 0..8 {
                let cross =
                    residual[[k, l]] - residual[[k, 0]] - residual[[0, l]] + residual[[0, 0]];
                worst_rank1 = worst_rank1.max(cross.abs());
            }
        }
    }
    assert!(
        worst_plan_diff < 1e-4,
        "plan vs oracle max-norm {worst_plan_diff}"
    );
    assert!(worst_rank1 < 1e-6, "rank-1 residual {worst_rank1}");
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs() < 60, "took {elapsed:?}");
    println!(
        "criterion 1 PASS: 20 problems, plan vs oracle {worst_plan_diff:.2e} (tol 1e-4), \
         rank-1 residual {worst_rank1:.2e} (tol 1e-6), {elapsed:?}"
    );
}

// ---------------------------------------------------------------------------
// Criterion 2: epsilon limits
// ---------------------------------------------------------------------------

#[test]
fn criterion_02_epsilon_limits() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);

    // Large epsilon: prior-aware plan converges to the balanced prior alone.
    let mut worst_prior_diff = 0.0f64;
    for _ in 0..5 {
        let (na, nb) = (5, 7);
        let c = Array2::from_shape_fn((na, nb), |_| rng.random_range(0.0..2.0));
        let m = Array2::from_shape_fn((na, nb), |_| rng.random_range(0.0..3.0));
        let a = uniform_marginal(na);
        let b = uniform_marginal(nb);
        let cfg = SinkhornConfig {
            epsilon: 1e9,
            max_iters: 100_000,
            tol_marginal: 1e-12,
            ..Default::default()
        };
        let solved = sinkhorn_paer(
            &CostMatrix::new(c).unwrap(),
            &PlausibilityMatrix {
                values: m.clone(),
                lambda: 1.0,
            },
            &cfg,
            &a,
            &b,
        )
        .unwrap();

        // Balance the prior alone with a plain scaling loop (no cost term).
        let mut mhat = Array2::zeros((na, nb));
        for k in 0..na {
            let row_sum: f64 = (0..nb).map(|l| (-m[[k, l]]).exp()).sum();
            for l in 0..nb {
                mhat[[k, l]] = (-m[[k, l]]).exp() / row_sum;
            }
        }
        let mut u = Array1::<f64>::ones(na);
        let mut v = Array1::<f64>::ones(nb);
        for _ in 0..200_000 {
            for k in 0..na {
                let s: f64 = (0..nb).map(|l| mhat[[k, l]] * v[l]).sum();
                u[k] = a[k] / s;
            }
            for l in 0..nb {
                let s: f64 = (0..na).map(|k| mhat[[k, l]] * u[k]).sum();
                v[l] = b[l] / s;
            }
        }
        let balanced = Array2::from_shape_fn((na, nb), |(k, l)| u[k] * mhat[[k, l]] * v[l]);
        worst_prior_diff = worst_prior_diff.max(max_abs_diff(&solved.plan, &balanced));
    }
    assert!(
        worst_prior_diff < 1e-4,
        "large-epsilon plan vs balanced prior {worst_prior_diff}"
    );

    // Small epsilon: transport cost within 1% of the exact solver on 8x8
    // uniform problems built from well-separated clouds.
    let mut worst_rel = 0.0f64;
    for _ in 0..5 {
        let x = Array2::from_shape_fn((8, 2), |_| rng.random_range(0.0..1.0));
        let mut y = Array2::from_shape_fn((8, 2), |_| rng.random_range(0.0..1.0));
        for mut row in y.rows_mut() {
            row[0] += 3.0;
        }
        let cost = contextflow::transport::euclidean_cost(&x, &y).unwrap();
        let a = uniform_marginal(8);
        let b = uniform_marginal(8);
        let exact = exact_ot(&cost, &a, &b).unwrap().transport_cost(&cost);
        let cfg = SinkhornConfig {
            epsilon: 0.01,
            max_iters: 400_000,
            tol_marginal: 1e-9,
            ..Default::default()
        };
        let eot = sinkhorn_eot(&cost, &cfg, &a, &b).unwrap();
        let rel = (eot.transport_cost(&cost) - exact).abs() / exact;
        worst_rel = worst_rel.max(rel);
    }
    assert!(worst_rel <= 0.01, "eot vs exact relative gap {worst_rel}");
    println!(
        "criterion 2 PASS: balanced-prior gap {worst_prior_diff:.2e} (tol 1e-4), \
         small-epsilon objective gap {:.3}% (tol 1%)",
        100.0 * worst_rel
    );
}

// ---------------------------------------------------------------------------
// Criterion 3: uniform prior neutrality
// ---------------------------------------------------------------------------

#[test]
fn criterion_03_uniform_prior_neutrality() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let na = rng.random_range(3..10);
        let nb = rng.random_range(3..10);
        let c = Array2::from_shape_fn((na, nb), |_| rng.random_range(0.0..2.0));
        let constant = rng.random_range(0.0..5.0);
        let a = uniform_marginal(na);
        let b = uniform_marginal(nb);
        let cfg = SinkhornConfig::default();
        let cost = CostMatrix::new(c).unwrap();
        let eot = sinkhorn_eot(&cost, &cfg, &a, &b).unwrap();
        let paer = sinkhorn_paer(
            &cost,
            &PlausibilityMatrix {
                values: Array2::from_elem((na, nb), constant),
                lambda: 1.0,
            },
            &cfg,
            &a,
            &b,
        )
        .unwrap();
        worst = worst.max(max_abs_diff(&eot.plan, &paer.plan));
    }
    assert!(worst < 1e-8, "uniform prior deviation {worst}");
    println!("criterion 3 PASS: 20 instances, max plan deviation {worst:.2e} (tol 1e-8)");
}

// ---------------------------------------------------------------------------
// Criterion 4: gradient suite vs central finite differences
// ---------------------------------------------------------------------------

#[test]
fn criterion_04_gradient_suite() {
    let start = std::time::Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut worst_rel = 0.0f64;
    let mut checked = 0usize;
    for instance in 0..50u64 {
        let d = rng.random_range(1..=5);
        let depth = rng.random_range(1..=3);
        let hidden: Vec<usize> = (0..depth).map(|_| rng.random_range(3..=8)).collect();
        let batch_size = rng.random_range(1..=8);
        let mut field = init_field(d, &hidden, instance).unwrap();
        for w in &mut field.weights {
            w.mapv_inplace(|_| rng.random_range(-0.8..0.8));
        }
        for bias in &mut field.biases {
            bias.mapv_inplace(|_| rng.random_range(-0.4..0.4));
        }
        let batch = TrainBatch {
            times: (0..batch_size).map(|_| rng.random_range(0.0..1.0)).collect(),
            states: Array2::from_shape_fn((batch_size, d), |_| rng.random_range(-1.0..1.0)),
            targets: Array2::from_shape_fn((batch_size, d), |_| rng.random_range(-1.0..1.0)),
        };
        let (_, grads) = loss_and_grad(&field, &batch).unwrap();

        let h = 1e-5;
        let mut check = |perturb: &dyn Fn(&mut VelocityField, f64), analytic: f64| {
            let mut plus = field.clone();
            perturb(&mut plus, h);
            let (lp, _) = loss_and_grad(&plus, &batch).unwrap();
            let mut minus = field.clone();
            perturb(&mut minus, -h);
            let (lm, _) = loss_and_grad(&minus, &batch).unwrap();
            let numeric = (lp - lm) / (2.0 * h);
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-4);
            worst_rel = worst_rel.max(rel);
            checked += 1;
            assert!(
                rel < 1e-4,
                "gradient mismatch: analytic {analytic}, numeric {numeric}, rel {rel}"
            );
        };
        for i in 0..field.layer_count() {
            for o in 0..field.weights[i].nrows() {
                for j in 0..field.weights[i].ncols() {
                    check(
                        &|f: &mut VelocityField, delta: f64| f.weights[i][[o, j]] += delta,
                        grads.weights[i][[o, j]],
                    );
                }
                check(
                    &|f: &mut VelocityField, delta: f64| f.biases[i][o] += delta,
                    grads.biases[i][o],
                );
            }
        }
    }
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs() < 60, "took {elapsed:?}");
    println!(
        "criterion 4 PASS: 50 instances, {checked} coordinates, worst relative error \
         {worst_rel:.2e} (tol 1e-4), {elapsed:?}"
    );
}

// ---------------------------------------------------------------------------
// Criterion 8: metric suite exactness
// ---------------------------------------------------------------------------

/// Minimal mean squared matched cost over all permutations (n <= 5).
fn w2_enumeration_oracle(x: &Array2<f64>, y: &Array2<f64>) -> f64 {
    let n = x.nrows();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = f64::INFINITY;
    fn visit(
        perm: &mut Vec<usize>,
        k: usize,
        x: &Array2<f64>,
        y: &Array2<f64>,
        best: &mut f64,
    ) {
        let n = perm.len();
        if k == n {
            let mut total = 0.0;
            for i in 0..n {
                for c in 0..x.ncols() {
                    let d = x[[i, c]] - y[[perm[i], c]];
                    total += d * d;
                }
            }
            *best = best.min(total / n as f64);
            return;
        }
        for i in k..n {
            perm.swap(k, i);
            visit(perm, k + 1, x, y, best);
            perm.swap(k, i);
        }
    }
    visit(&mut perm, 0, x, y, &mut best);
    best.sqrt()
}

#[test]
fn criterion_08_metric_suite_exactness() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);

    // w2 vs permutation enumeration on 4- and 5-point sets.
    let mut worst_w2 = 0.0f64;
    for n in [4usize, 5] {
        for _ in 0..5 {
            let x = Array2::from_shape_fn((n, 2), |_| rng.random_range(-2.0..2.0));
            let y = Array2::from_shape_fn((n, 2), |_| rng.random_range(-2.0..2.0));
            let got = w2(&x, &y).unwrap();
            let want = w2_enumeration_oracle(&x, &y);
            worst_w2 = worst_w2.max((got - want).abs());
        }
    }
    assert!(worst_w2 < 1e-10, "w2 vs enumeration {worst_w2}");

    // Energy distance vs a triple-loop recomputation on <= 5-point sets.
    let mut worst_energy = 0.0f64;
    for _ in 0..5 {
        let m = rng.random_range(2..=5);
        let n = rng.random_range(2..=5);
        let x = Array2::from_shape_fn((m, 3), |_| rng.random_range(-2.0..2.0));
        let y = Array2::from_shape_fn((n, 3), |_| rng.random_range(-2.0..2.0));
        let got = energy_distance(&x, &y).unwrap();
        let dist = |a: &Array2<f64>, i: usize, b: &Array2<f64>, j: usize| {
            (0..3)
                .map(|c| (a[[i, c]] - b[[j, c]]).powi(2))
                .sum::<f64>()
                .sqrt()
        };
        let mut cross = 0.0;
        for i in 0..m {
            for j in 0..n {
                cross += dist(&x, i, &y, j);
            }
        }
        let mut wx = 0.0;
        for i in 0..m {
            for j in 0..m {
                wx += dist(&x, i, &x, j);
            }
        }
        let mut wy = 0.0;
        for i in 0..n {
            for j in 0..n {
                wy += dist(&y, i, &y, j);
            }
        }
        let want = 2.0 * cross / (m * n) as f64 - wx / (m * m) as f64 - wy / (n * n) as f64;
        worst_energy = worst_energy.max((got - want).abs());
    }
    assert!(worst_energy < 1e-10, "energy vs oracle {worst_energy}");

    // MMD vs direct term-by-term summation on <= 5-point sets.
    let mut worst_mmd = 0.0f64;
    for _ in 0..5 {
        let m = rng.random_range(2..=5);
        let n = rng.random_range(2..=5);
        let x = Array2::from_shape_fn((m, 2), |_| rng.random_range(-2.0..2.0));
        let y = Array2::from_shape_fn((n, 2), |_| rng.random_range(-2.0..2.0));
        let got = mmd_rbf_multi(&x, &y).unwrap();
        let mut want = 0.0;
        for gamma in MMD_GAMMAS {
            let kernel = |a: &Array2<f64>, i: usize, b: &Array2<f64>, j: usize| {
                (-gamma
                    * (0..2)
                        .map(|c| (a[[i, c]] - b[[j, c]]).powi(2))
                        .sum::<f64>())
                .exp()
            };
            let mut s_xx = 0.0;
            for i in 0..m {
                for j in 0..m {
                    if i != j {
                        s_xx += kernel(&x, i, &x, j);
                    }
                }
            }
            let mut s_yy = 0.0;
            for i in 0..n {
                for j in 0..n {
                    if i != j {
                        s_yy += kernel(&y, i, &y, j);
                    }
                }
            }
            let mut s_xy = 0.0;
            for i in 0..m {
                for j in 0..n {
                    s_xy += kernel(&x, i, &y, j);
                }
            }
            want += s_xx / (m * (m - 1)) as f64 + s_yy / (n * (n - 1)) as f64
                - 2.0 * s_xy / (m * n) as f64;
        }
        want /= MMD_GAMMAS.len() as f64;
        worst_mmd = worst_mmd.max((got - want).abs());
    }
    assert!(worst_mmd < 1e-10, "mmd vs oracle {worst_mmd}");

    // Exactness pins: identical multisets and shifted singletons.
    let x = Array2::from_shape_fn((5, 3), |_| rng.random_range(-2.0..2.0));
    assert_eq!(energy_distance(&x, &x).unwrap(), 0.0);
    let shift = 2.75;
    let a = array![[1.0, -0.5]];
    let b = array![[1.0, -0.5 + shift]];
    assert!((w2(&a, &b).unwrap() - shift).abs() < 1e-12);

    println!(
        "criterion 8 PASS: w2 {worst_w2:.2e}, energy {worst_energy:.2e}, mmd {worst_mmd:.2e} \
         (tol 1e-10 each); identical-multiset energy exactly 0; singleton shift recovered"
    );
}

// ---------------------------------------------------------------------------
// Criterion 10: ODE convergence on the exponential field
// ---------------------------------------------------------------------------

struct ExponentialField;

impl Velocity for ExponentialField {
    fn data_dim(&self) -> usize {
        1
    }
    fn eval_batch(&self, _t: f64, states: &Array2<f64>) -> Result<Array2<f64>> {
        Ok(states.clone())
    }
}

#[test]
fn criterion_10_ode_convergence() {
    let x0 = array![[1.0]];
    let err_at = |steps: usize| {
        let cfg = IntegrationConfig {
            method: IntegrationMethod::Rk4,
            steps_per_unit_time: steps,
        };
        let out = integrate(&ExponentialField, &x0, 0.0, 1.0, &cfg).unwrap();
        (out[[0, 0]] - std::f64::consts::E).abs()
    };
    let err_100 = err_at(100);
    assert!(err_100 < 1e-6, "rk4 error at 100 steps: {err_100}");
    let ratio = err_at(50) / err_100;
    assert!(
        (12.0..=20.0).contains(&ratio),
        "step-halving ratio {ratio} outside [12, 20]"
    );
    println!(
        "criterion 10 PASS: |x(1) - e| = {err_100:.2e} at 100 steps (tol 1e-6), \
         halving ratio {ratio:.2} in [12, 20]"
    );
}

// ---------------------------------------------------------------------------
// Criterion 5: end-to-end flow recovery on the constant-shift dataset
// ---------------------------------------------------------------------------

/// 3 time points, 2 types, d = 10, 300 cells per slice; both types share one
/// constant drift so the true velocity field is a constant.
fn constant_shift_config(seed: u64) -> SynthConfig {
    let mut drift = vec![0.0; 10];
    drift[0] = 1.2;
    drift[1] = -0.9;
    SynthConfig {
        time_points: 3,
        cells_per_slice: 300,
        num_types: 2,
        feature_dim: 10,
        expr_noise: 0.05,
        // Types share the expression blob (they differ by label and spatial
        // region); the shift acts identically on both.
        type_centers: Some(vec![vec![0.0; 10], vec![0.0; 10]]),
        type_drift: Some(vec![drift.clone(), drift]),
        seed,
        ..Default::default()
    }
}

#[test]
fn criterion_05_constant_shift_recovery() {
    let start = std::time::Instant::now();
    let dataset = generate_synthetic(&constant_shift_config(1)).unwrap();
    let cfg = TrainConfig {
        coupling_mode: CouplingMode::Eot,
        epochs: 600,
        batch_size: 100,
        hidden: vec![32, 32],
        eta: 0.01,
        sigma: 0.01,
        seed: 1,
        per_pair_update: true,
        sinkhorn_max_iters: 150,
        sinkhorn_tol: 1e-6,
        ..Default::default()
    };
    assert!(cfg.epochs <= 2000);
    let outcome = train(&dataset, &cfg).unwrap();
    let integration = IntegrationConfig::default();
    let truth = &dataset.slice(2).unwrap().expr;

    let next = next_step_sample(&outcome.field, &dataset, 2, &integration, &[]).unwrap();
    let next_w2 = w2(truth, &next).unwrap();
    let ivp = ivp_sample(&outcome.field, &dataset, 2, &integration).unwrap();
    let ivp_w2 = w2(truth, &ivp).unwrap();
    let elapsed = start.elapsed();

    assert!(next_w2 < 0.15, "next-step W2 {next_w2}");
    assert!(ivp_w2 < 0.3, "ivp W2 {ivp_w2}");
    assert!(elapsed.as_secs() < 600, "took {elapsed:?}");
    println!(
        "criterion 5 PASS: next-step W2 {next_w2:.4} (tol 0.15), ivp W2 {ivp_w2:.4} (tol 0.3), \
         {} epochs, {elapsed:?}",
        cfg.epochs
    );
}

// ---------------------------------------------------------------------------
// Criterion 6: fewer implausible transitions under the informative prior
// ---------------------------------------------------------------------------

#[test]
fn criterion_06_implausible_transition_direction() {
    let start = std::time::Instant::now();
    let rules = TransitionRuleSet::new([
        ("type0".to_string(), "type1".to_string()),
        ("type1".to_string(), "type0".to_string()),
    ]);
    let mut wins = 0;
    let mut counts = Vec::new();
    for seed in 0..10u64 {
        // Expression blobs overlap per cell (noise comparable to the mean gap)
        // while the types stay spatially separated, so the smoothness prior is
        // informative where the raw expression cost is not.
        let synth = SynthConfig {
            time_points: 2,
            cells_per_slice: 256,
            num_types: 2,
            feature_dim: 4,
            expr_noise: 1.0,
            type_centers: Some(vec![vec![0.0; 4], vec![1.0; 4]]),
            seed,
            ..Default::default()
        };
        let dataset = generate_synthetic(&synth).unwrap();
        let s0 = dataset.slice(0).unwrap();
        let s1 = dataset.slice(1).unwrap();
        let labels0 = s0.labels.clone().unwrap();
        let labels1 = s1.labels.clone().unwrap();

        let base = TrainConfig {
            lambda: 1.0,
            epsilon: 0.1,
            sinkhorn_max_iters: 2000,
            sinkhorn_tol: 1e-8,
            ..Default::default()
        };
        let eot_cfg = TrainConfig {
            coupling_mode: CouplingMode::Eot,
            ..base.clone()
        };
        let paer_cfg = TrainConfig {
            coupling_mode: CouplingMode::Paer,
            ..base
        };
        let eot_coupling = make_coupling(s0, s1, &eot_cfg).unwrap();
        let paer_coupling = make_coupling(s0, s1, &paer_cfg).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let eot_count =
            count_implausible(&eot_coupling, &labels0, &labels1, &rules, 5000, &mut rng)
                .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let paer_count =
            count_implausible(&paer_coupling, &labels0, &labels1, &rules, 5000, &mut rng)
                .unwrap();
        counts.push((eot_count, paer_count));
        if (paer_count as f64) <= 0.7 * eot_count as f64 {
            wins += 1;
        }
    }
    let elapsed = start.elapsed();
    assert!(
        wins >= 8,
        "prior reduced implausible transitions by >= 30% in only {wins}/10 seeds: {counts:?}"
    );
    let (eot_sum, paer_sum) = counts
        .iter()
        .fold((0, 0), |(a, b), &(e, p)| (a + e, b + p));
    println!(
        "criterion 6 PASS: {wins}/10 seeds with >= 30% reduction (need >= 8); \
         mean counts eot {:.0}, paer {:.0} of 5000; {elapsed:?}",
        eot_sum as f64 / 10.0,
        paer_sum as f64 / 10.0
    );
}

// ---------------------------------------------------------------------------
// Criterion 7: holdout interpolation, prior-aware vs plain OT couplings
// ---------------------------------------------------------------------------

/// 5 time points, curved type-dependent drift. The two types cross in the
/// first expression dimension (so pairing each type with itself across the
/// held-out gap costs more than swapping), curve in opposite directions in the
/// second, and differ by a static offset in three further dimensions that is
/// small against the entropic blur of the raw-cost coupling but decisive for
/// the neighborhood-mean prior. Plain OT couplings therefore swap the types
/// across the gap while the prior-aware ones keep each on its own track.
fn curved_drift_config(seed: u64, cells: usize) -> SynthConfig {
    let s = 0.866;
    SynthConfig {
        time_points: 5,
        cells_per_slice: cells,
        num_types: 2,
        feature_dim: 6,
        expr_noise: 0.8,
        type_centers: Some(vec![
            vec![2.5, 0.0, s, s, s, 0.0],
            vec![-2.5, 0.0, -s, -s, -s, 0.0],
        ]),
        type_drift: Some(vec![
            vec![-5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
            vec![5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        ]),
        type_curve: Some(vec![
            vec![0.0, 0.5, 0.0, 0.0, 0.0, 0.0],
            vec![0.0, -0.5, 0.0, 0.0, 0.0, 0.0],
        ]),
        seed,
        ..Default::default()
    }
}

fn holdout_w2_for_mode(
    dataset: &contextflow::slice::LongitudinalDataset,
    mode: CouplingMode,
    seed: u64,
    cells: usize,
) -> f64 {
    let cfg = TrainConfig {
        coupling_mode: mode,
        lambda: 1.0,
        epsilon: 0.1,
        epochs: 350,
        batch_size: cells,
        hidden: vec![32, 32],
        eta: 0.01,
        sigma: 0.01,
        holdout: vec![2],
        seed,
        per_pair_update: true,
        sinkhorn_max_iters: 150,
        sinkhorn_tol: 1e-6,
        ..Default::default()
    };
    let outcome = train(dataset, &cfg).unwrap();
    let predicted =
        next_step_sample(&outcome.field, dataset, 2, &IntegrationConfig::default(), &[])
            .unwrap();
    w2(&dataset.slice(2).unwrap().expr, &predicted).unwrap()
}

#[test]
fn criterion_07_interpolation_direction() {
    let start = std::time::Instant::now();
    let cells = 80;
    let mut ctfh = Vec::new();
    let mut motfm = Vec::new();
    for seed in 0..10u64 {
        let dataset = generate_synthetic(&curved_drift_config(seed, cells)).unwrap();
        ctfh.push(holdout_w2_for_mode(&dataset, CouplingMode::Paer, seed, cells));
        motfm.push(holdout_w2_for_mode(&dataset, CouplingMode::Eot, seed, cells));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let mean_ctfh = mean(&ctfh);
    let mean_motfm = mean(&motfm);
    let wins = ctfh
        .iter()
        .zip(&motfm)
        .filter(|(c, m)| c < m)
        .count();
    // One-sided sign test: P(Binomial(10, 1/2) >= wins).
    let p_value: f64 = (wins..=10)
        .map(|k| binomial_coefficient(10, k as u64) as f64)
        .sum::<f64>()
        / 1024.0;
    let elapsed = start.elapsed();
    assert!(
        mean_ctfh <= mean_motfm,
        "mean holdout W2: prior-aware {mean_ctfh} vs plain {mean_motfm}"
    );
    assert!(
        wins >= 8,
        "prior-aware won only {wins}/10 paired seeds (sign test p {p_value:.3}); \
         ctfh {ctfh:?} motfm {motfm:?}"
    );
    assert!(elapsed.as_secs() < 1800, "took {elapsed:?}");
    println!(
        "criterion 7 PASS: mean holdout W2 prior-aware {mean_ctfh:.4} <= plain {mean_motfm:.4}; \
         {wins}/10 paired wins, sign test p = {p_value:.4}; {elapsed:?}"
    );
}

fn binomial_coefficient(n: u64, k: u64) -> u64 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut result = 1u64;
    for i in 0..k {
        result = result * (n - i) / (i + 1);
    }
    result
}

// ---------------------------------------------------------------------------
// Criterion 9: ablate determinism at the binary level
// ---------------------------------------------------------------------------

fn run_binary(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_contextflow"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn payload_of(path: &Path) -> serde_json::Value {
    let text = std::fs::read_to_string(path).unwrap();
    let full: serde_json::Value = serde_json::from_str(&text).unwrap();
    full["payload"].clone()
}

#[test]
fn criterion_09_ablate_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let synth = serde_json::json!({
        "time_points": 3,
        "cells_per_slice": 40,
        "num_types": 2,
        "feature_dim": 3,
        "expr_noise": 0.1,
        "type_drift": [[0.8, 0.0, 0.0], [0.8, 0.0, 0.0]],
        "seed": 2
    });
    let synth_path = dir.path().join("synth.json");
    std::fs::write(&synth_path, synth.to_string()).unwrap();
    let data_dir = dir.path().join("data");
    let out = run_binary(&[
        "generate",
        "--config",
        synth_path.to_str().unwrap(),
        "--out",
        data_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let run_cfg = serde_json::json!({
        "train": {
            "epochs": 5,
            "batch_size": 24,
            "hidden": [8, 8],
            "holdout": [1],
            "sinkhorn_max_iters": 200,
            "sinkhorn_tol": 1e-6
        },
        "sampling_mode": "next-step",
        "target_index": 1,
        "metrics": ["w2", "energy", "mmd"],
        "ablate": {
            "modes": ["eot", "paer"],
            "lambdas": [1.0],
            "alphas": [0.5],
            "epsilons": [0.1],
            "seeds": [0, 1]
        }
    });
    let cfg_path = dir.path().join("run.json");
    std::fs::write(&cfg_path, run_cfg.to_string()).unwrap();

    let manifest = data_dir.join("manifest.json");
    let mut payload_sets = Vec::new();
    for name in ["sweep_a", "sweep_b"] {
        let sweep_dir = dir.path().join(name);
        let out = run_binary(&[
            "ablate",
            "--dataset",
            manifest.to_str().unwrap(),
            "--config",
            cfg_path.to_str().unwrap(),
            "--out",
            sweep_dir.to_str().unwrap(),
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let mut payloads = BTreeMap::new();
        for cell in std::fs::read_dir(&sweep_dir).unwrap() {
            let cell = cell.unwrap().path();
            if cell.is_dir() {
                for seed_dir in std::fs::read_dir(&cell).unwrap() {
                    let metrics = seed_dir.unwrap().path().join("metrics.json");
                    let key = metrics
                        .strip_prefix(&sweep_dir)
                        .unwrap()
                        .display()
                        .to_string();
                    payloads.insert(key, payload_of(&metrics));
                }
            }
        }
        payloads.insert(
            "aggregate.json".to_string(),
            payload_of(&sweep_dir.join("aggregate.json")),
        );
        payload_sets.push(payloads);
    }
    assert_eq!(payload_sets[0].len(), 5, "expected 4 cells + aggregate");
    for (key, payload) in &payload_sets[0] {
        assert_eq!(
            serde_json::to_string(payload).unwrap(),
            serde_json::to_string(&payload_sets[1][key]).unwrap(),
            "payload differs for {key}"
        );
    }
    println!(
        "criterion 9 PASS: {} artifact payloads byte-identical across two ablate invocations",
        payload_sets[0].len()
    );
}
