//! The placement policy: graph encoder plus a per-location softmax head,
//! decoded one node at a time in the environment's order.
//!
//! Logits for node `i` are `a_j . h_i + d_j * usage[j] + b_j`. Masked
//! locations are left out of the normalisation entirely, so their
//! probability is exactly zero.

mod encoder;
mod params;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{Environment, StepState};
use crate::error::{Error, Result};

pub use encoder::{encode, feature_width, node_features, Encoding};
pub use params::{init_params, EncoderKind, Hyper, Layout, PolicyParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodeMode {
    Sample,
    /// Argmax, ties to the lowest location index.
    Greedy,
}

/// One placement episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub actions: Vec<usize>,
    pub logps: Vec<f64>,
    /// Entropy of the action distribution at each decided step.
    pub entropies: Vec<f64>,
    /// One entry per attempted step. An aborted episode has one more entry
    /// than `actions`, holding the dead-end penalty.
    pub step_rewards: Vec<f64>,
    pub episode_return: f64,
    pub aborted: bool,
}

impl Trajectory {
    pub fn log_prob(&self) -> f64 {
        self.logps.iter().sum()
    }

    pub fn mean_entropy(&self) -> f64 {
        if self.entropies.is_empty() {
            0.0
        } else {
            self.entropies.iter().sum::<f64>() / self.entropies.len() as f64
        }
    }
}

/// Masked softmax over one step's logits.
#[derive(Debug, Clone)]
pub struct StepDist {
    pub probs: Vec<f64>,
    pub logits: Vec<f64>,
    /// `max + ln(sum exp(logit - max))` over unmasked entries.
    pub log_norm: f64,
}

impl StepDist {
    pub fn new(logits: Vec<f64>, mask: &[bool]) -> Result<Self> {
        let max = logits
            .iter()
            .zip(mask)
            .filter(|(_, &ok)| ok)
            .map(|(&z, _)| z)
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(Error::DeadEnd);
        }
        let mut probs: Vec<f64> = logits
            .iter()
            .zip(mask)
            .map(|(&z, &ok)| if ok { (z - max).exp() } else { 0.0 })
            .collect();
        let sum: f64 = probs.iter().sum();
        probs.iter_mut().for_each(|p| *p /= sum);
        Ok(Self { probs, logits, log_norm: max + sum.ln() })
    }

    pub fn log_prob(&self, a: usize) -> f64 {
        self.logits[a] - self.log_norm
    }

    pub fn entropy(&self) -> f64 {
        self.probs
            .iter()
            .enumerate()
            .filter(|(_, &p)| p > 0.0)
            .map(|(j, &p)| -p * self.log_prob(j))
            .sum()
    }

    fn greedy(&self, mask: &[bool]) -> usize {
        let mut best = None;
        for (j, (&z, &ok)) in self.logits.iter().zip(mask).enumerate() {
            if ok && best.is_none_or(|b: usize| z > self.logits[b]) {
                best = Some(j);
            }
        }
        best.expect("mask has a feasible entry")
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut last = 0;
        for (j, &p) in self.probs.iter().enumerate() {
            if p > 0.0 {
                acc += p;
                last = j;
                if u < acc {
                    return j;
                }
            }
        }
        last
    }
}

pub fn logits(params: &PolicyParams, h: &[f64], usage: &[f64]) -> Vec<f64> {
    let layout = params.layout();
    let w = &params.weights;
    (0..params.hyper.locations)
        .map(|j| {
            let a = &w[layout.head_a(j)];
            a.iter().zip(h).map(|(x, y)| x * y).sum::<f64>() + w[layout.head_d(j)] * usage[j] + w[layout.head_b(j)]
        })
        .collect()
}

/// Probability of placing the embedded node on each location.
pub fn action_distribution(params: &PolicyParams, h: &[f64], state: &StepState, mask: &[bool]) -> Result<Vec<f64>> {
    if h.len() != params.hyper.hidden || mask.len() != params.hyper.locations || state.usage.len() != mask.len() {
        return Err(Error::Dimension(format!(
            "embedding {} / mask {} / usage {} vs policy D={} M={}",
            h.len(),
            mask.len(),
            state.usage.len(),
            params.hyper.hidden,
            params.hyper.locations
        )));
    }
    Ok(StepDist::new(logits(params, h, &state.usage), mask)?.probs)
}

/// Checks that `params` can drive `env`.
pub fn check_compatible<E: Environment + ?Sized>(env: &E, params: &PolicyParams) -> Result<()> {
    if params.hyper.locations != env.num_locations() {
        return Err(Error::Dimension(format!(
            "policy has M={} locations, environment has M={}",
            params.hyper.locations,
            env.num_locations()
        )));
    }
    encoder::check_dims(env.graph(), params)
}

pub fn sample_rollout<E, R>(env: &E, params: &PolicyParams, rng: &mut R, mode: DecodeMode) -> Result<Trajectory>
where
    E: Environment + ?Sized,
    R: Rng + ?Sized,
{
    check_compatible(env, params)?;
    let enc = encode(env.graph(), params)?;
    Ok(rollout_encoded(env, params, &enc, rng, mode))
}

/// Rollout reusing a precomputed encoding of `env.graph()`.
pub fn rollout_encoded<E, R>(env: &E, params: &PolicyParams, enc: &Encoding, rng: &mut R, mode: DecodeMode) -> Trajectory
where
    E: Environment + ?Sized,
    R: Rng + ?Sized,
{
    let n = env.num_nodes();
    let mut state = env.initial_state();
    let mut traj = Trajectory {
        actions: Vec::with_capacity(n),
        logps: Vec::with_capacity(n),
        entropies: Vec::with_capacity(n),
        step_rewards: Vec::with_capacity(n),
        episode_return: 0.0,
        aborted: false,
    };
    while let Some(node) = env.current_node(&state) {
        let mask = env.step_mask(&state);
        let dist = match StepDist::new(logits(params, enc.embedding(node), &state.usage), &mask) {
            Ok(d) => d,
            Err(_) => {
                traj.step_rewards.push(env.dead_end_reward(&state));
                traj.aborted = true;
                break;
            }
        };
        let a = match mode {
            DecodeMode::Greedy => dist.greedy(&mask),
            DecodeMode::Sample => dist.sample(rng),
        };
        traj.actions.push(a);
        traj.logps.push(dist.log_prob(a));
        traj.entropies.push(dist.entropy());
        traj.step_rewards.push(env.apply(&mut state, a));
    }
    traj.episode_return = traj.step_rewards.iter().sum();
    traj
}

/// Reverse-mode accumulation of weighted trajectory gradients.
///
/// Head gradients are accumulated per step; gradients reaching the node
/// embeddings are summed and pushed through the encoder once in
/// [`GradAccumulator::finish`].
pub struct GradAccumulator<'a> {
    params: &'a PolicyParams,
    enc: &'a Encoding,
    grad: Vec<f64>,
    d_emb: Vec<f64>,
}

impl<'a> GradAccumulator<'a> {
    pub fn new(params: &'a PolicyParams, enc: &'a Encoding) -> Self {
        Self {
            params,
            enc,
            grad: vec![0.0; params.weights.len()],
            d_emb: vec![0.0; enc.num_nodes() * enc.hidden()],
        }
    }

    /// Adds `logp_weight * grad(sum log p) + entropy_weight * grad(mean step entropy)`.
    pub fn add<E: Environment + ?Sized>(
        &mut self,
        env: &E,
        traj: &Trajectory,
        logp_weight: f64,
        entropy_weight: f64,
    ) -> Result<()> {
        let m = self.params.hyper.locations;
        let d = self.params.hyper.hidden;
        let layout = self.params.layout();
        let w = &self.params.weights;
        if traj.actions.len() > env.num_nodes() {
            return Err(Error::Dimension(format!(
                "trajectory has {} actions for {} nodes",
                traj.actions.len(),
                env.num_nodes()
            )));
        }
        let steps = traj.actions.len().max(1) as f64;
        let mut state = env.initial_state();
        let mut gz = vec![0.0; m];
        for (t, &a) in traj.actions.iter().enumerate() {
            let node = env.current_node(&state).expect("bounded by node count");
            let mask = env.step_mask(&state);
            if a >= m || !mask[a] {
                return Err(Error::State(format!("action {a} at step {t} is not feasible")));
            }
            let h = self.enc.embedding(node);
            let dist = StepDist::new(logits(self.params, h, &state.usage), &mask)?;
            let entropy = if entropy_weight != 0.0 { dist.entropy() } else { 0.0 };
            for (j, g) in gz.iter_mut().enumerate() {
                let p = dist.probs[j];
                *g = if p > 0.0 {
                    let score = if j == a { 1.0 - p } else { -p };
                    let ent = if entropy_weight != 0.0 { -p * (dist.log_prob(j) + entropy) / steps } else { 0.0 };
                    logp_weight * score + entropy_weight * ent
                } else {
                    0.0
                };
            }
            let dh = &mut self.d_emb[node * d..(node + 1) * d];
            for (j, &g) in gz.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                let a_range = layout.head_a(j);
                for (k, (da, &x)) in self.grad[a_range.clone()].iter_mut().zip(h).enumerate() {
                    *da += g * x;
                    dh[k] += g * w[a_range.start + k];
                }
                self.grad[layout.head_d(j)] += g * state.usage[j];
                self.grad[layout.head_b(j)] += g;
            }
            env.apply(&mut state, a);
        }
        Ok(())
    }

    pub fn finish(mut self) -> Vec<f64> {
        self.enc.backward(self.params, &self.d_emb, &mut self.grad);
        self.grad
    }
}

/// Gradient of `sum_t log p(a_t)` with respect to every weight, in the
/// canonical parameter layout.
pub fn trajectory_grad<E: Environment + ?Sized>(env: &E, params: &PolicyParams, traj: &Trajectory) -> Result<Vec<f64>> {
    check_compatible(env, params)?;
    let enc = encode(env.graph(), params)?;
    let mut acc = GradAccumulator::new(params, &enc);
    acc.add(env, traj, 1.0, 0.0)?;
    Ok(acc.finish())
}

/// Replays `actions` and returns the per-step log-probabilities, or `None`
/// if some action is infeasible.
pub fn replay_logps<E: Environment + ?Sized>(env: &E, params: &PolicyParams, actions: &[usize]) -> Result<Option<Vec<f64>>> {
    check_compatible(env, params)?;
    let enc = encode(env.graph(), params)?;
    let mut state = env.initial_state();
    let mut out = Vec::with_capacity(actions.len());
    for &a in actions {
        let Some(node) = env.current_node(&state) else { return Ok(None) };
        let mask = env.step_mask(&state);
        if a >= mask.len() || !mask[a] {
            return Ok(None);
        }
        let dist = StepDist::new(logits(params, enc.embedding(node), &state.usage), &mask)?;
        out.push(dist.log_prob(a));
        env.apply(&mut state, a);
    }
    Ok(Some(out))
}

#[cfg(test)]
mod tests;
