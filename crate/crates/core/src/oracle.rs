//! Brute-force ground truth for small instances.
//!
//! Two enumerations are provided. [`enumerate_placements`] walks the raw
//! `M^N` assignment space and scores every capacity-feasible placement with
//! the environment's own cost functions. [`for_each_trajectory`] walks the
//! tree of decisions the sequential policy can actually make (same order,
//! same masks, dead ends included), which makes the expected reward and its
//! gradient finite sums.

use serde::{Deserialize, Serialize};

use crate::env::{ConstraintMode, Environment, StepState};
use crate::error::{Error, Result};
use crate::policy::{check_compatible, encode, Encoding, GradAccumulator, PolicyParams, StepDist};

pub const DEFAULT_LIMIT: u64 = 1_000_000;
/// Largest feasible count for which the full (placement, reward) table is kept.
pub const TABLE_LIMIT: usize = 65_536;

/// Neumaier compensated sum.
#[derive(Debug, Default, Clone, Copy)]
pub struct CompensatedSum {
    sum: f64,
    carry: f64,
}

impl CompensatedSum {
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.carry += (self.sum - t) + x;
        } else {
            self.carry += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.carry
    }
}

fn check_size(m: usize, n: usize, limit: u64) -> Result<()> {
    let size = (m as u128).checked_pow(n as u32);
    match size {
        Some(s) if s <= limit as u128 => Ok(()),
        Some(s) => Err(Error::TooLarge { size: format!("{m}^{n} = {s}"), limit }),
        None => Err(Error::TooLarge { size: format!("{m}^{n}"), limit }),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnumerationResult {
    /// Number of placements that pass the constraint filter.
    pub count: usize,
    pub optimal_reward: f64,
    /// Every placement achieving `optimal_reward`, in lexicographic order.
    pub optimal: Vec<Vec<usize>>,
    /// Mean reward over the counted placements.
    pub mean_reward: f64,
    pub table: Option<Vec<(Vec<usize>, f64)>>,
}

/// Scores all `M^N` assignments in lexicographic order (node 0 most
/// significant). Under mask mode, capacity-infeasible placements are skipped.
pub fn enumerate_placements<E: Environment + ?Sized>(env: &E, limit: u64) -> Result<EnumerationResult> {
    let (n, m) = (env.num_nodes(), env.num_locations());
    check_size(m, n, limit)?;
    let filter = env.constraint_mode() == ConstraintMode::Mask;

    let mut assign = vec![0usize; n];
    let mut count = 0;
    let mut best = f64::NEG_INFINITY;
    let mut optimal = Vec::new();
    let mut total = CompensatedSum::default();
    let mut table = Vec::new();
    let mut keep_table = true;
    loop {
        if !filter || env.is_feasible(&assign) {
            let r = env.placement_return(&assign);
            count += 1;
            total.add(r);
            if r > best {
                best = r;
                optimal.clear();
            }
            if r == best {
                optimal.push(assign.clone());
            }
            if keep_table {
                if table.len() < TABLE_LIMIT {
                    table.push((assign.clone(), r));
                } else {
                    keep_table = false;
                    table = Vec::new();
                }
            }
        }
        // odometer increment, last node fastest
        let mut pos = n;
        loop {
            if pos == 0 {
                let mean_reward = if count > 0 { total.value() / count as f64 } else { f64::NAN };
                return Ok(EnumerationResult {
                    count,
                    optimal_reward: best,
                    optimal,
                    mean_reward,
                    table: keep_table.then_some(table),
                });
            }
            pos -= 1;
            assign[pos] += 1;
            if assign[pos] < m {
                break;
            }
            assign[pos] = 0;
        }
    }
}

/// A complete path through the sequential decision tree.
#[derive(Debug, Clone, Copy)]
pub struct Leaf<'a> {
    pub actions: &'a [usize],
    pub prob: f64,
    pub episode_return: f64,
    pub aborted: bool,
}

struct Walker<'a, E: ?Sized, F> {
    env: &'a E,
    params: &'a PolicyParams,
    enc: &'a Encoding,
    actions: Vec<usize>,
    visit: F,
    leaves: usize,
}

impl<E: Environment + ?Sized, F: FnMut(&Leaf<'_>)> Walker<'_, E, F> {
    fn walk(&mut self, state: &StepState, prob: f64, ret: f64) {
        let Some(node) = self.env.current_node(state) else {
            self.leaves += 1;
            (self.visit)(&Leaf { actions: &self.actions, prob, episode_return: ret, aborted: false });
            return;
        };
        let mask = self.env.step_mask(state);
        let logits = crate::policy::logits(self.params, self.enc.embedding(node), &state.usage);
        let Ok(dist) = StepDist::new(logits, &mask) else {
            self.leaves += 1;
            let ret = ret + self.env.dead_end_reward(state);
            (self.visit)(&Leaf { actions: &self.actions, prob, episode_return: ret, aborted: true });
            return;
        };
        for (a, &ok) in mask.iter().enumerate() {
            if !ok {
                continue;
            }
            let mut next = state.clone();
            let r = self.env.apply(&mut next, a);
            self.actions.push(a);
            self.walk(&next, prob * dist.probs[a], ret + r);
            self.actions.pop();
        }
    }
}

/// Visits every trajectory the policy can produce, in depth-first order by
/// ascending action. Returns the number of leaves.
pub fn for_each_trajectory<E, F>(env: &E, params: &PolicyParams, limit: u64, visit: F) -> Result<usize>
where
    E: Environment + ?Sized,
    F: FnMut(&Leaf<'_>),
{
    check_size(env.num_locations(), env.num_nodes(), limit)?;
    check_compatible(env, params)?;
    let enc = encode(env.graph(), params)?;
    let mut walker = Walker { env, params, enc: &enc, actions: Vec::new(), visit, leaves: 0 };
    walker.walk(&env.initial_state(), 1.0, 0.0);
    Ok(walker.leaves)
}

/// Expected episode return under the policy, as an exact finite sum.
pub fn exact_expected_reward<E: Environment + ?Sized>(env: &E, params: &PolicyParams, limit: u64) -> Result<f64> {
    let mut sum = CompensatedSum::default();
    for_each_trajectory(env, params, limit, |leaf| sum.add(leaf.prob * leaf.episode_return))?;
    Ok(sum.value())
}

/// `sum_l pi(l) * grad log pi(l) * advantage(R_l)` over every trajectory.
pub fn exact_score_gradient<E, A>(env: &E, params: &PolicyParams, limit: u64, advantage: A) -> Result<Vec<f64>>
where
    E: Environment + ?Sized,
    A: Fn(f64) -> f64,
{
    let mut leaves = Vec::new();
    for_each_trajectory(env, params, limit, |leaf| {
        leaves.push((leaf.actions.to_vec(), leaf.prob, leaf.episode_return));
    })?;
    let enc = encode(env.graph(), params)?;
    let mut acc = GradAccumulator::new(params, &enc);
    for (actions, prob, ret) in leaves {
        let traj = crate::policy::Trajectory {
            actions,
            logps: Vec::new(),
            entropies: Vec::new(),
            step_rewards: Vec::new(),
            episode_return: ret,
            aborted: false,
        };
        acc.add(env, &traj, prob * advantage(ret), 0.0)?;
    }
    Ok(acc.finish())
}

/// Exact gradient of the expected return.
pub fn exact_gradient<E: Environment + ?Sized>(env: &E, params: &PolicyParams, limit: u64) -> Result<Vec<f64>> {
    exact_score_gradient(env, params, limit, |r| r)
}

/// `sum_l R_l * grad pi(l)`, with each trajectory probability differentiated
/// by central differences. Agrees with [`exact_gradient`] by the
/// log-derivative identity `grad pi = pi * grad log pi`.
pub fn probability_weighted_gradient<E: Environment + ?Sized>(
    env: &E,
    params: &PolicyParams,
    limit: u64,
    eps: f64,
) -> Result<Vec<f64>> {
    let mut returns = Vec::new();
    for_each_trajectory(env, params, limit, |leaf| returns.push(leaf.episode_return))?;
    let probs_at = |p: &PolicyParams| -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(returns.len());
        for_each_trajectory(env, p, limit, |leaf| out.push(leaf.prob))?;
        Ok(out)
    };
    let mut probe = params.clone();
    let mut grad = Vec::with_capacity(params.weights.len());
    for k in 0..params.weights.len() {
        let w = params.weights[k];
        probe.weights[k] = w + eps;
        let up = probs_at(&probe)?;
        probe.weights[k] = w - eps;
        let down = probs_at(&probe)?;
        probe.weights[k] = w;
        let mut sum = CompensatedSum::default();
        for ((u, d), r) in up.iter().zip(&down).zip(&returns) {
            sum.add((u - d) / (2.0 * eps) * r);
        }
        grad.push(sum.value());
    }
    Ok(grad)
}

/// Central differences `(f(x + eps e_k) - f(x - eps e_k)) / 2 eps`.
pub fn finite_diff_gradient<F>(f: F, x: &[f64], eps: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> f64,
{
    if !(eps > 0.0) {
        return Err(Error::InvalidParams(format!("finite difference step {eps} must be > 0")));
    }
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for k in 0..x.len() {
        probe[k] = x[k] + eps;
        let up = f(&probe);
        probe[k] = x[k] - eps;
        let down = f(&probe);
        probe[k] = x[k];
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFiniteValue { coord: k });
        }
        grad.push((up - down) / (2.0 * eps));
    }
    Ok(grad)
}

/// Summary printed by the `oracle` subcommand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub count: usize,
    pub optimal_reward: f64,
    pub optimal_placements: Vec<Vec<usize>>,
    pub expected_reward: Option<f64>,
}

pub fn oracle_report<E: Environment + ?Sized>(env: &E, params: Option<&PolicyParams>, limit: u64) -> Result<OracleReport> {
    let result = enumerate_placements(env, limit)?;
    let expected_reward = params.map(|p| exact_expected_reward(env, p, limit)).transpose()?;
    Ok(OracleReport {
        count: result.count,
        optimal_reward: result.optimal_reward,
        optimal_placements: result.optimal.into_iter().take(10).collect(),
        expected_reward,
    })
}
