//! Deep Q-network built from scratch: a two-hidden-layer ReLU MLP, a replay
//! buffer, epsilon-greedy action selection and TD(0) minibatch SGD against a
//! lagged target network.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mdp::AgentState;

#[derive(Debug, Error, PartialEq)]
pub enum DqnError {
    #[error("input has {got} features, network expects {expected}")]
    InputDim { expected: usize, got: usize },
    #[error("architecture mismatch: {left:?} vs {right:?}")]
    Architecture { left: [usize; 4], right: [usize; 4] },
    #[error("parameter vector has {got} entries, architecture needs {expected}")]
    ParamCount { expected: usize, got: usize },
    #[error("action {action} out of range for {n_actions} outputs")]
    Action { action: usize, n_actions: usize },
    #[error("replay buffer holds {have} experiences, {need} requested")]
    Undersized { have: usize, need: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("non-finite loss {loss} (max |target| = {max_target}, max |q| = {max_q})")]
    NonFiniteLoss {
        loss: f64,
        max_target: f64,
        max_q: f64,
    },
    #[error("parameters became non-finite after the update")]
    NonFiniteParams,
    #[error("invalid hyperparameters: {0}")]
    Hyper(String),
}

/// Parameters of a `[input, hidden1, hidden2, output]` MLP.
///
/// All parameters live in one flat vector in canonical order: for each layer,
/// the `out x in` weight matrix row-major, then the `out` biases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QNetwork {
    dims: [usize; 4],
    params: Vec<f64>,
}

/// Number of parameters of a `[in, h1, h2, out]` network.
pub fn param_count(dims: [usize; 4]) -> usize {
    dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

/// (weight offset, bias offset) of layer `l`.
fn layer_offsets(dims: &[usize; 4], l: usize) -> (usize, usize) {
    let start: usize = (0..l).map(|i| dims[i] * dims[i + 1] + dims[i + 1]).sum();
    (start, start + dims[l] * dims[l + 1])
}

/// Activations kept for the backward pass.
struct Trace {
    z1: Vec<f64>,
    h1: Vec<f64>,
    z2: Vec<f64>,
    h2: Vec<f64>,
    q: Vec<f64>,
}

impl QNetwork {
    pub fn zeros(dims: [usize; 4]) -> Self {
        Self {
            dims,
            params: vec![0.0; param_count(dims)],
        }
    }

    /// Uniform Glorot init per layer, zero biases.
    pub fn glorot<R: Rng + ?Sized>(dims: [usize; 4], rng: &mut R) -> Self {
        let mut net = Self::zeros(dims);
        for l in 0..3 {
            let (w, b) = layer_offsets(&dims, l);
            let limit = (6.0 / (dims[l] + dims[l + 1]) as f64).sqrt();
            for p in &mut net.params[w..b] {
                *p = rng.gen_range(-limit..limit);
            }
        }
        net
    }

    pub fn from_flat(dims: [usize; 4], params: Vec<f64>) -> Result<Self, DqnError> {
        let expected = param_count(dims);
        if params.len() != expected {
            return Err(DqnError::ParamCount {
                expected,
                got: params.len(),
            });
        }
        Ok(Self { dims, params })
    }

    pub fn layer_dims(&self) -> [usize; 4] {
        self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn n_actions(&self) -> usize {
        self.dims[3]
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn into_params(self) -> Vec<f64> {
        self.params
    }

    /// Weight `(row, col)` of layer `l` (0-based).
    pub fn weight(&self, l: usize, row: usize, col: usize) -> f64 {
        let (w, _) = layer_offsets(&self.dims, l);
        self.params[w + row * self.dims[l] + col]
    }

    pub fn set_weight(&mut self, l: usize, row: usize, col: usize, v: f64) {
        let (w, _) = layer_offsets(&self.dims, l);
        self.params[w + row * self.dims[l] + col] = v;
    }

    pub fn set_bias(&mut self, l: usize, row: usize, v: f64) {
        let (_, b) = layer_offsets(&self.dims, l);
        self.params[b + row] = v;
    }

    pub fn same_architecture(&self, other: &QNetwork) -> Result<(), DqnError> {
        if self.dims != other.dims {
            return Err(DqnError::Architecture {
                left: self.dims,
                right: other.dims,
            });
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }

    fn affine(&self, l: usize, input: &[f64], out: &mut Vec<f64>) {
        let (w, b) = layer_offsets(&self.dims, l);
        let n_in = self.dims[l];
        let weights = &self.params[w..b];
        let bias = &self.params[b..b + self.dims[l + 1]];
        out.clear();
        out.extend(
            weights
                .chunks_exact(n_in)
                .zip(bias)
                .map(|(row, bias)| row.iter().zip(input).fold(*bias, |acc, (w, x)| acc + w * x)),
        );
    }

    fn trace(&self, input: &[f64]) -> Trace {
        let relu = |z: &[f64]| z.iter().map(|v| v.max(0.0)).collect::<Vec<_>>();
        let mut z1 = Vec::with_capacity(self.dims[1]);
        self.affine(0, input, &mut z1);
        let h1 = relu(&z1);
        let mut z2 = Vec::with_capacity(self.dims[2]);
        self.affine(1, &h1, &mut z2);
        let h2 = relu(&z2);
        let mut q = Vec::with_capacity(self.dims[3]);
        self.affine(2, &h2, &mut q);
        Trace { z1, h1, z2, h2, q }
    }

    /// Q-values for every action.
    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>, DqnError> {
        if input.len() != self.dims[0] {
            return Err(DqnError::InputDim {
                expected: self.dims[0],
                got: input.len(),
            });
        }
        Ok(self.trace(input).q)
    }

    /// Mean squared error between `q(s, a)` and fixed targets, and its
    /// gradient with respect to every parameter (canonical order).
    pub fn loss_and_gradient(
        &self,
        samples: &[(&[f64], usize, f64)],
    ) -> Result<(f64, Vec<f64>), DqnError> {
        if samples.is_empty() {
            return Err(DqnError::EmptyBatch);
        }
        let d = self.dims;
        let mut grad = vec![0.0; self.params.len()];
        let (w1, b1) = layer_offsets(&d, 0);
        let (w2, b2) = layer_offsets(&d, 1);
        let (w3, b3) = layer_offsets(&d, 2);
        let scale = 1.0 / samples.len() as f64;
        let mut loss = 0.0;
        let mut dz2 = vec![0.0; d[2]];
        let mut dz1 = vec![0.0; d[1]];

        for &(x, a, y) in samples {
            if x.len() != d[0] {
                return Err(DqnError::InputDim {
                    expected: d[0],
                    got: x.len(),
                });
            }
            if a >= d[3] {
                return Err(DqnError::Action {
                    action: a,
                    n_actions: d[3],
                });
            }
            let t = self.trace(x);
            let err = t.q[a] - y;
            loss += err * err * scale;
            let g = 2.0 * err * scale;

            // Output layer: only row `a` receives gradient.
            let row3 = w3 + a * d[2];
            for k in 0..d[2] {
                grad[row3 + k] += g * t.h2[k];
                dz2[k] = if t.z2[k] > 0.0 {
                    g * self.params[row3 + k]
                } else {
                    0.0
                };
            }
            grad[b3 + a] += g;

            dz1.iter_mut().for_each(|v| *v = 0.0);
            for k in 0..d[2] {
                if dz2[k] == 0.0 {
                    continue;
                }
                let row = w2 + k * d[1];
                for m in 0..d[1] {
                    grad[row + m] += dz2[k] * t.h1[m];
                    dz1[m] += self.params[row + m] * dz2[k];
                }
                grad[b2 + k] += dz2[k];
            }

            for m in 0..d[1] {
                if t.z1[m] <= 0.0 {
                    continue;
                }
                let row = w1 + m * d[0];
                for n in 0..d[0] {
                    grad[row + n] += dz1[m] * x[n];
                }
                grad[b1 + m] += dz1[m];
            }
        }
        Ok((loss, grad))
    }

    /// `params -= alpha * grad`.
    pub fn sgd_step(&mut self, grad: &[f64], alpha: f64) {
        for (p, g) in self.params.iter_mut().zip(grad) {
            *p -= alpha * g;
        }
    }
}

/// Epsilon-greedy selection. Ties at the argmax go to the lowest index.
pub fn select_action<R: Rng + ?Sized>(q_values: &[f64], epsilon: f64, rng: &mut R) -> usize {
    assert!(!q_values.is_empty(), "no actions to select from");
    if rng.gen::<f64>() < epsilon {
        return rng.gen_range(0..q_values.len());
    }
    argmax(q_values)
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Experience {
    pub state: AgentState,
    pub action: usize,
    pub reward: f64,
    pub next_state: AgentState,
}

/// Bounded FIFO ring of experiences.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<Experience>,
    /// Slot the next push overwrites once full.
    head: usize,
    inserted: u64,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self {
            capacity,
            items: Vec::with_capacity(capacity.min(4096)),
            head: 0,
            inserted: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn inserted(&self) -> u64 {
        self.inserted
    }

    pub fn push(&mut self, e: Experience) {
        if self.items.len() < self.capacity {
            self.items.push(e);
        } else {
            self.items[self.head] = e;
            self.head = (self.head + 1) % self.capacity;
        }
        self.inserted += 1;
    }

    /// Oldest first.
    pub fn iter(&self) -> impl Iterator<Item = &Experience> {
        let (newer, older) = self.items.split_at(self.head);
        older.iter().chain(newer)
    }

    /// Uniform sample without replacement.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        batch_size: usize,
        rng: &mut R,
    ) -> Result<Vec<&Experience>, DqnError> {
        if batch_size == 0 {
            return Err(DqnError::EmptyBatch);
        }
        if self.items.len() < batch_size {
            return Err(DqnError::Undersized {
                have: self.items.len(),
                need: batch_size,
            });
        }
        Ok(index::sample(rng, self.items.len(), batch_size)
            .into_iter()
            .map(|i| &self.items[i])
            .collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpsilonSchedule {
    pub start: f64,
    pub end: f64,
    pub decay_steps: u64,
}

impl Default for EpsilonSchedule {
    fn default() -> Self {
        Self {
            start: 1.0,
            end: 0.05,
            decay_steps: 2000,
        }
    }
}

impl EpsilonSchedule {
    /// Linear from `start` to `end` over `decay_steps`, then held at `end`.
    pub fn at(&self, step: u64) -> f64 {
        if self.decay_steps == 0 || step >= self.decay_steps {
            return self.end;
        }
        let frac = step as f64 / self.decay_steps as f64;
        self.start + (self.end - self.start) * frac
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hyperparams {
    pub gamma: f64,
    pub alpha: f64,
    pub batch_size: usize,
    pub target_sync_period: u64,
    pub epsilon: EpsilonSchedule,
    pub aggregation_period: u64,
    pub hidden: [usize; 2],
    pub replay_capacity: usize,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            gamma: 0.9,
            alpha: 1e-3,
            batch_size: 32,
            target_sync_period: 100,
            epsilon: EpsilonSchedule::default(),
            aggregation_period: 50,
            hidden: [64, 64],
            replay_capacity: 10_000,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<(), DqnError> {
        let bad = |m: &str| Err(DqnError::Hyper(m.to_string()));
        if !(0.0..1.0).contains(&self.gamma) {
            return bad("gamma must lie in [0, 1)");
        }
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return bad("alpha must be > 0");
        }
        if self.batch_size == 0 || self.replay_capacity < self.batch_size {
            return bad("batch_size must be >= 1 and fit in the replay buffer");
        }
        if self.target_sync_period == 0 || self.aggregation_period == 0 {
            return bad("periods must be >= 1");
        }
        let e = &self.epsilon;
        if !((0.0..=1.0).contains(&e.start) && (0.0..=1.0).contains(&e.end)) {
            return bad("epsilon schedule must stay within [0, 1]");
        }
        if self.hidden.contains(&0) {
            return bad("hidden layers must be non-empty");
        }
        Ok(())
    }

    pub fn layer_dims(&self, input: usize, n_actions: usize) -> [usize; 4] {
        [input, self.hidden[0], self.hidden[1], n_actions]
    }
}

/// `y_j = r_j + gamma * max_a' q_target(s'_j, a')`.
pub fn td_targets(
    batch: &[&Experience],
    target_net: &QNetwork,
    gamma: f64,
) -> Result<Vec<f64>, DqnError> {
    if batch.is_empty() {
        return Err(DqnError::EmptyBatch);
    }
    batch
        .iter()
        .map(|e| {
            let q = target_net.forward(e.next_state.as_slice())?;
            let best = q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            Ok(e.reward + gamma * best)
        })
        .collect()
}

/// One gradient-descent step on the batch. Returns the loss before the step.
pub fn train_batch(
    net: &mut QNetwork,
    target_net: &QNetwork,
    batch: &[&Experience],
    hyper: &Hyperparams,
) -> Result<f64, DqnError> {
    net.same_architecture(target_net)?;
    let targets = td_targets(batch, target_net, hyper.gamma)?;
    let samples: Vec<(&[f64], usize, f64)> = batch
        .iter()
        .zip(&targets)
        .map(|(e, &y)| (e.state.as_slice(), e.action, y))
        .collect();
    let (loss, grad) = net.loss_and_gradient(&samples)?;
    if !loss.is_finite() {
        let max_target = targets.iter().fold(0.0f64, |m, y| m.max(y.abs()));
        let max_q = samples
            .iter()
            .filter_map(|(s, _, _)| net.forward(s).ok())
            .flatten()
            .fold(0.0f64, |m, q| m.max(q.abs()));
        return Err(DqnError::NonFiniteLoss {
            loss,
            max_target,
            max_q,
        });
    }
    net.sgd_step(&grad, hyper.alpha);
    if !net.is_finite() {
        return Err(DqnError::NonFiniteParams);
    }
    Ok(loss)
}

/// Copies the online parameters into the target network.
pub fn sync_target(net: &QNetwork, target_net: &mut QNetwork) -> Result<(), DqnError> {
    net.same_architecture(target_net)?;
    target_net.params.copy_from_slice(&net.params);
    Ok(())
}

/// `sum_t gamma^t r_t`, accumulated front to back.
pub fn discounted_return(rewards: &[f64], gamma: f64) -> f64 {
    let mut total = 0.0;
    let mut discount = 1.0;
    for r in rewards {
        total += discount * r;
        discount *= gamma;
    }
    total
}

/// One learning agent: online network, target network and its own replay memory.
#[derive(Debug, Clone)]
pub struct DqnAgent {
    pub online: QNetwork,
    pub target: QNetwork,
    pub replay: ReplayBuffer,
}

impl DqnAgent {
    pub fn new(model: QNetwork, replay_capacity: usize) -> Self {
        Self {
            target: model.clone(),
            online: model,
            replay: ReplayBuffer::new(replay_capacity),
        }
    }
}
