//! The neural velocity field `u(t, x)`: a small MLP over the state concatenated
//! with a sinusoidal time embedding, with hand-rolled reverse-mode gradients of
//! the flow-matching regression loss and a bias-corrected Adam update.
//!
//! Linear layers are evaluated row by row with a fixed reduction order, so batch
//! evaluation is bitwise identical to per-sample evaluation.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Width of the time embedding: the raw scalar plus four sinusoidal features.
pub const TIME_EMBED_DIM: usize = 5;

/// Smooth nonlinearity used between layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Silu,
    Tanh,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Silu => x * sigmoid(x),
            Activation::Tanh => x.tanh(),
        }
    }

    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
            Activation::Tanh => 1.0 - x.tanh().powi(2),
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `[t, sin(2 pi t), cos(2 pi t), sin(4 pi t), cos(4 pi t)]`.
pub fn time_embedding(t: f64) -> [f64; TIME_EMBED_DIM] {
    let tau = std::f64::consts::TAU;
    [
        t,
        (tau * t).sin(),
        (tau * t).cos(),
        (2.0 * tau * t).sin(),
        (2.0 * tau * t).cos(),
    ]
}

/// MLP parameters mapping `(x, embed(t))` to a velocity in data space.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VelocityField {
    /// Layer widths, input first: `[d + TIME_EMBED_DIM, hidden..., d]`.
    pub dims: Vec<usize>,
    /// `weights[i]` has shape `(dims[i+1], dims[i])`.
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
    pub activation: Activation,
}

/// Evaluation interface used by the ODE sampler; lets tests integrate analytic
/// fields alongside trained ones.
pub trait Velocity {
    fn data_dim(&self) -> usize;
    /// Velocities for every row of `states` at one shared time.
    fn eval_batch(&self, t: f64, states: &Array2<f64>) -> Result<Array2<f64>>;
}

impl VelocityField {
    /// Data-space dimension.
    pub fn dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn layer_count(&self) -> usize {
        self.weights.len()
    }

    /// Velocity at a single `(t, x)`.
    pub fn forward(&self, t: f64, x: &Array1<f64>) -> Result<Array1<f64>> {
        if x.len() != self.dim() {
            return Err(Error::ShapeMismatch {
                context: "velocity input",
                expected: format!("{}", self.dim()),
                actual: format!("{}", x.len()),
            });
        }
        if !t.is_finite() || x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "velocity input".to_string(),
                location: "forward arguments".to_string(),
            });
        }
        let states = x.clone().insert_axis(ndarray::Axis(0));
        let out = self.forward_times(&[t], &states)?;
        Ok(out.row(0).to_owned())
    }

    /// Velocities for a batch with one time per row.
    pub fn forward_times(&self, times: &[f64], states: &Array2<f64>) -> Result<Array2<f64>> {
        let caches = self.forward_cached(times, states)?;
        Ok(caches.activations.last().unwrap().clone())
    }

    fn embed_inputs(&self, times: &[f64], states: &Array2<f64>) -> Result<Array2<f64>> {
        let d = self.dim();
        let batch = states.nrows();
        if states.ncols() != d || times.len() != batch {
            return Err(Error::ShapeMismatch {
                context: "velocity batch",
                expected: format!("{batch} x {d} states with {batch} times"),
                actual: format!(
                    "{} x {} states with {} times",
                    states.nrows(),
                    states.ncols(),
                    times.len()
                ),
            });
        }
        let mut z = Array2::zeros((batch, d + TIME_EMBED_DIM));
        for (s, &t) in times.iter().enumerate() {
            if !t.is_finite() {
                return Err(Error::NonFinite {
                    context: "velocity input".to_string(),
                    location: format!("time of sample {s}"),
                });
            }
            for c in 0..d {
                z[[s, c]] = states[[s, c]];
            }
            for (c, v) in time_embedding(t).into_iter().enumerate() {
                z[[s, d + c]] = v;
            }
        }
        Ok(z)
    }

    fn forward_cached(&self, times: &[f64], states: &Array2<f64>) -> Result<ForwardCache> {
        let z = self.embed_inputs(times, states)?;
        let layers = self.layer_count();
        let mut activations = Vec::with_capacity(layers + 1);
        let mut pre_activations = Vec::with_capacity(layers);
        activations.push(z);
        for i in 0..layers {
            let pre = linear(activations.last().unwrap(), &self.weights[i], &self.biases[i]);
            let post = if i + 1 < layers {
                pre.mapv(|v| self.activation.apply(v))
            } else {
                pre.clone()
            };
            pre_activations.push(pre);
            activations.push(post);
        }
        if activations
            .last()
            .unwrap()
            .iter()
            .any(|v| !v.is_finite())
        {
            return Err(Error::Diverged(
                "non-finite activation in velocity network".to_string(),
            ));
        }
        Ok(ForwardCache {
            activations,
            pre_activations,
        })
    }
}

impl Velocity for VelocityField {
    fn data_dim(&self) -> usize {
        self.dim()
    }

    fn eval_batch(&self, t: f64, states: &Array2<f64>) -> Result<Array2<f64>> {
        let times = vec![t; states.nrows()];
        self.forward_times(&times, states)
    }
}

struct ForwardCache {
    activations: Vec<Array2<f64>>,
    pre_activations: Vec<Array2<f64>>,
}

/// Row-wise `a W^T + b` with a fixed per-output reduction order.
fn linear(a: &Array2<f64>, w: &Array2<f64>, b: &Array1<f64>) -> Array2<f64> {
    let (batch, input) = a.dim();
    let output = w.nrows();
    let mut out = Array2::zeros((batch, output));
    for s in 0..batch {
        for o in 0..output {
            let mut acc = b[o];
            for j in 0..input {
                acc += w[[o, j]] * a[[s, j]];
            }
            out[[s, o]] = acc;
        }
    }
    out
}

/// Initialize a field with `hidden` layer widths.
///
/// Hidden weights are drawn from a fan-in-scaled symmetric uniform distribution;
/// the output layer starts at zero so the initial velocity is identically zero.
pub fn init_field(d: usize, hidden: &[usize], seed: u64) -> Result<VelocityField> {
    if d == 0 {
        return Err(Error::InvalidParameter {
            name: "d",
            message: "data dimension must be positive",
            value: 0.0,
        });
    }
    if hidden.is_empty() || hidden.contains(&0) {
        return Err(Error::InvalidParameter {
            name: "hidden",
            message: "hidden widths must be nonempty and positive",
            value: 0.0,
        });
    }
    let mut dims = Vec::with_capacity(hidden.len() + 2);
    dims.push(d + TIME_EMBED_DIM);
    dims.extend_from_slice(hidden);
    dims.push(d);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = dims.len() - 1;
    let mut weights = Vec::with_capacity(layers);
    let mut biases = Vec::with_capacity(layers);
    for i in 0..layers {
        let (fan_in, fan_out) = (dims[i], dims[i + 1]);
        let weight = if i + 1 < layers {
            let scale = 1.0 / (fan_in as f64).sqrt();
            Array2::from_shape_fn((fan_out, fan_in), |_| rng.random_range(-scale..scale))
        } else {
            Array2::zeros((fan_out, fan_in))
        };
        weights.push(weight);
        biases.push(Array1::zeros(fan_out));
    }
    Ok(VelocityField {
        dims,
        weights,
        biases,
        activation: Activation::Silu,
    })
}

/// One training batch: per-sample times, interpolated states, and target velocities.
#[derive(Debug, Clone)]
pub struct TrainBatch {
    pub times: Vec<f64>,
    pub states: Array2<f64>,
    pub targets: Array2<f64>,
}

/// Parameter gradients, shaped like the field.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

impl Gradients {
    pub fn zeros_like(field: &VelocityField) -> Self {
        Self {
            weights: field.weights.iter().map(|w| Array2::zeros(w.raw_dim())).collect(),
            biases: field.biases.iter().map(|b| Array1::zeros(b.raw_dim())).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += b;
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            *a += b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for w in &mut self.weights {
            w.mapv_inplace(|v| v * factor);
        }
        for b in &mut self.biases {
            b.mapv_inplace(|v| v * factor);
        }
    }
}

/// Mean squared-residual loss over the batch and its exact parameter gradients.
///
/// The loss is `mean_s || u(t_s, x_s) - target_s ||^2`.
pub fn loss_and_grad(field: &VelocityField, batch: &TrainBatch) -> Result<(f64, Gradients)> {
    let b = batch.states.nrows();
    if b == 0 {
        return Err(Error::InsufficientData("empty training batch".to_string()));
    }
    if batch.targets.dim() != batch.states.dim() {
        return Err(Error::ShapeMismatch {
            context: "batch targets",
            expected: format!("{:?}", batch.states.dim()),
            actual: format!("{:?}", batch.targets.dim()),
        });
    }
    let cache = field.forward_cached(&batch.times, &batch.states)?;
    let out = cache.activations.last().unwrap();
    let mut loss = 0.0;
    let mut delta = Array2::zeros(out.raw_dim());
    for s in 0..b {
        for c in 0..field.dim() {
            let r = out[[s, c]] - batch.targets[[s, c]];
            loss += r * r;
            delta[[s, c]] = 2.0 * r / b as f64;
        }
    }
    loss /= b as f64;
    if !loss.is_finite() {
        return Err(Error::Diverged(format!("non-finite loss {loss}")));
    }

    let layers = field.layer_count();
    let mut grads = Gradients::zeros_like(field);
    for i in (0..layers).rev() {
        let input = &cache.activations[i];
        let (batch_n, in_dim) = input.dim();
        let out_dim = field.weights[i].nrows();
        for o in 0..out_dim {
            for j in 0..in_dim {
                let mut acc = 0.0;
                for s in 0..batch_n {
                    acc += delta[[s, o]] * input[[s, j]];
                }
                grads.weights[i][[o, j]] = acc;
            }
            let mut acc = 0.0;
            for s in 0..batch_n {
                acc += delta[[s, o]];
            }
            grads.biases[i][o] = acc;
        }
        if i > 0 {
            let pre = &cache.pre_activations[i - 1];
            let mut next_delta = Array2::zeros((batch_n, in_dim));
            for s in 0..batch_n {
                for j in 0..in_dim {
                    let mut acc = 0.0;
                    for o in 0..out_dim {
                        acc += delta[[s, o]] * field.weights[i][[o, j]];
                    }
                    next_delta[[s, j]] = acc * field.activation.derivative(pre[[s, j]]);
                }
            }
            delta = next_delta;
        }
    }
    Ok((loss, grads))
}

/// Adam accumulator state mirroring the field's parameter shapes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimizerState {
    pub eta: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m_weights: Vec<Array2<f64>>,
    pub v_weights: Vec<Array2<f64>>,
    pub m_biases: Vec<Array1<f64>>,
    pub v_biases: Vec<Array1<f64>>,
}

impl OptimizerState {
    pub fn new(field: &VelocityField, eta: f64) -> Self {
        Self {
            eta,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m_weights: field.weights.iter().map(|w| Array2::zeros(w.raw_dim())).collect(),
            v_weights: field.weights.iter().map(|w| Array2::zeros(w.raw_dim())).collect(),
            m_biases: field.biases.iter().map(|b| Array1::zeros(b.raw_dim())).collect(),
            v_biases: field.biases.iter().map(|b| Array1::zeros(b.raw_dim())).collect(),
        }
    }
}

/// Bias-corrected adaptive-moment update; increments the step counter.
pub fn adam_step(
    field: &mut VelocityField,
    state: &mut OptimizerState,
    grads: &Gradients,
) -> Result<()> {
    if grads.weights.len() != field.weights.len()
        || grads
            .weights
            .iter()
            .zip(&field.weights)
            .any(|(g, w)| g.dim() != w.dim())
    {
        return Err(Error::ShapeMismatch {
            context: "adam gradients",
            expected: format!("{} layers", field.weights.len()),
            actual: format!("{} layers", grads.weights.len()),
        });
    }
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - state.beta1.powf(t);
    let bc2 = 1.0 - state.beta2.powf(t);
    let (beta1, beta2, eta, eps) = (state.beta1, state.beta2, state.eta, state.eps);

    let update = |param: &mut f64, m: &mut f64, v: &mut f64, g: f64| {
        *m = beta1 * *m + (1.0 - beta1) * g;
        *v = beta2 * *v + (1.0 - beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *param -= eta * m_hat / (v_hat.sqrt() + eps);
    };
    for i in 0..field.weights.len() {
        for ((p, m), (v, g)) in field.weights[i]
            .iter_mut()
            .zip(state.m_weights[i].iter_mut())
            .zip(state.v_weights[i].iter_mut().zip(grads.weights[i].iter()))
        {
            update(p, m, v, *g);
        }
        for ((p, m), (v, g)) in field.biases[i]
            .iter_mut()
            .zip(state.m_biases[i].iter_mut())
            .zip(state.v_biases[i].iter_mut().zip(grads.biases[i].iter()))
        {
            update(p, m, v, *g);
        }
    }
    Ok(())
}
