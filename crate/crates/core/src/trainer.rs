//! REINFORCE training with an exponential-moving-average baseline.
//!
//! One graph: advantages are `R - b` with `b` the EMA of batch mean returns.
//! Several graphs: each iteration draws one graph uniformly and normalises
//! its returns by that graph's running mean and standard deviation over the
//! last [`NORM_WINDOW`] returns.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::Environment;
use crate::error::{Error, Result};
use crate::policy::{
    check_compatible, encode, feature_width, init_params, rollout_encoded, DecodeMode, EncoderKind, GradAccumulator,
    Hyper, PolicyParams, Trajectory,
};

pub const NORM_WINDOW: usize = 100;
pub const STD_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub baseline_decay: f64,
    pub entropy_weight: f64,
    /// `None` disables clipping.
    pub grad_clip_norm: Option<f64>,
    pub discount: f64,
    pub seed: u64,
    pub eval_samples: usize,
    /// Rollout worker threads. Results do not depend on this value.
    pub threads: usize,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            batch_size: 16,
            iterations: 200,
            baseline_decay: 0.9,
            entropy_weight: 0.0,
            grad_clip_norm: None,
            discount: 1.0,
            seed: 0,
            eval_samples: 16,
            threads: 1,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParams(msg));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate {} must be > 0", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.baseline_decay) {
            return bad(format!("baseline_decay {} must be in [0, 1)", self.baseline_decay));
        }
        if !(self.entropy_weight >= 0.0 && self.entropy_weight.is_finite()) {
            return bad(format!("entropy_weight {} must be >= 0", self.entropy_weight));
        }
        if let Some(c) = self.grad_clip_norm {
            if !(c > 0.0 && c.is_finite()) {
                return bad(format!("grad_clip_norm {c} must be > 0"));
            }
        }
        if !(self.discount > 0.0 && self.discount <= 1.0) {
            return bad(format!("discount {} must be in (0, 1]", self.discount));
        }
        if self.threads == 0 {
            return bad("threads must be >= 1".into());
        }
        Ok(())
    }
}

/// Encoder shape chosen by the user; feature width and location count come
/// from the environment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub hidden: usize,
    pub rounds: usize,
    pub encoder: EncoderKind,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self { hidden: 8, rounds: 2, encoder: EncoderKind::MessagePassing }
    }
}

impl PolicyConfig {
    pub fn hyper_for<E: Environment + ?Sized>(&self, env: &E) -> Hyper {
        Hyper {
            features: feature_width(env.graph()),
            hidden: self.hidden,
            rounds: self.rounds,
            locations: env.num_locations(),
            encoder: self.encoder,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    pub iter: usize,
    pub mean_return: f64,
    pub best_return: f64,
    pub baseline: f64,
    pub mean_entropy: f64,
    pub abort_rate: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<IterRecord>,
}

pub const HISTORY_HEADER: &str = "iter,mean_return,best_return,baseline,mean_entropy,abort_rate";

/// Decimal rendering with 9 significant digits.
pub fn format_sig9(x: f64) -> String {
    if !x.is_finite() {
        return format!("{x}");
    }
    if x == 0.0 {
        return "0".into();
    }
    let sci = format!("{x:.8e}");
    let exp: i32 = sci[sci.find('e').expect("exponent") + 1..].parse().expect("integer exponent");
    let decimals = (8 - exp).max(0) as usize;
    format!("{x:.decimals$}")
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(HISTORY_HEADER);
        out.push('\n');
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.iter,
                format_sig9(r.mean_return),
                format_sig9(r.best_return),
                format_sig9(r.baseline),
                format_sig9(r.mean_entropy),
                format_sig9(r.abort_rate)
            );
        }
        out
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_csv().as_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let perr = |message: String| Error::Parse { context: "history csv".into(), message };
        let mut lines = text.lines();
        if lines.next() != Some(HISTORY_HEADER) {
            return Err(perr("missing or wrong header".into()));
        }
        let mut records = Vec::new();
        for (i, line) in lines.enumerate() {
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 6 {
                return Err(perr(format!("row {}: expected 6 columns, got {}", i + 1, cols.len())));
            }
            let f = |k: usize| cols[k].parse::<f64>().map_err(|e| perr(format!("row {}: {e}", i + 1)));
            records.push(IterRecord {
                iter: cols[0].parse().map_err(|e| perr(format!("row {}: {e}", i + 1)))?,
                mean_return: f(1)?,
                best_return: f(2)?,
                baseline: f(3)?,
                mean_entropy: f(4)?,
                abort_rate: f(5)?,
            });
        }
        Ok(Self { records })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestPlacement {
    pub graph: usize,
    pub placement: Vec<usize>,
    pub episode_return: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: PolicyParams,
    pub history: TrainHistory,
    /// Best non-aborted placement sampled on each graph, if any.
    pub best: Vec<Option<BestPlacement>>,
}

/// `sum_t gamma^t r_t`.
pub fn episode_return(traj: &Trajectory, discount: f64) -> f64 {
    let mut scale = 1.0;
    let mut total = 0.0;
    for r in &traj.step_rewards {
        total += scale * r;
        scale *= discount;
    }
    total
}

pub fn baseline_update(b: Option<f64>, batch_mean: f64, decay: f64) -> f64 {
    match b {
        None => batch_mean,
        Some(b) => decay * b + (1.0 - decay) * batch_mean,
    }
}

/// `(1/B) sum_b adv_b grad log pi(traj_b) + entropy_weight * grad mean entropy`.
pub fn policy_gradient<E: Environment + ?Sized>(
    env: &E,
    params: &PolicyParams,
    batch: &[Trajectory],
    advantages: &[f64],
    entropy_weight: f64,
) -> Result<Vec<f64>> {
    if batch.is_empty() || batch.len() != advantages.len() {
        return Err(Error::InvalidParams(format!(
            "batch of {} trajectories with {} advantages",
            batch.len(),
            advantages.len()
        )));
    }
    check_compatible(env, params)?;
    let enc = encode(env.graph(), params)?;
    let scale = 1.0 / batch.len() as f64;
    let mut acc = GradAccumulator::new(params, &enc);
    for (traj, &adv) in batch.iter().zip(advantages) {
        acc.add(env, traj, adv * scale, entropy_weight * scale)?;
    }
    Ok(acc.finish())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateStats {
    pub grad_norm: f64,
    pub clipped: bool,
}

/// Gradient ascent step `theta += lr * g`, clipping `g` to `clip` first.
pub fn apply_gradient(
    params: &mut PolicyParams,
    mut grad: Vec<f64>,
    learning_rate: f64,
    clip: Option<f64>,
    iter: usize,
) -> Result<UpdateStats> {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if !norm.is_finite() {
        return Err(Error::NonFiniteGradient { iter, norm });
    }
    let clipped = matches!(clip, Some(c) if norm > c);
    if let (true, Some(c)) = (clipped, clip) {
        grad.iter_mut().for_each(|g| *g *= c / norm);
    }
    for (w, g) in params.weights.iter_mut().zip(&grad) {
        *w += learning_rate * g;
    }
    Ok(UpdateStats { grad_norm: norm, clipped })
}

/// One REINFORCE step with scalar baseline `b`.
pub fn reinforce_update<E: Environment + ?Sized>(
    env: &E,
    params: &mut PolicyParams,
    batch: &[Trajectory],
    baseline: f64,
    cfg: &TrainerConfig,
    iter: usize,
) -> Result<UpdateStats> {
    let adv: Vec<f64> = batch.iter().map(|t| episode_return(t, cfg.discount) - baseline).collect();
    let grad = policy_gradient(env, params, batch, &adv, cfg.entropy_weight)?;
    apply_gradient(params, grad, cfg.learning_rate, cfg.grad_clip_norm, iter)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent stream for rollout `b` of iteration `iter`.
fn rollout_rng(seed: u64, iter: usize, b: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix(splitmix(splitmix(seed) ^ iter as u64) ^ b as u64))
}

fn collect_batch<E: Environment + ?Sized>(
    env: &E,
    params: &PolicyParams,
    cfg: &TrainerConfig,
    iter: usize,
    pool: Option<&rayon::ThreadPool>,
) -> Result<Vec<Trajectory>> {
    let enc = encode(env.graph(), params)?;
    let one = |b: usize| rollout_encoded(env, params, &enc, &mut rollout_rng(cfg.seed, iter, b), DecodeMode::Sample);
    Ok(match pool {
        Some(pool) => pool.install(|| (0..cfg.batch_size).into_par_iter().map(one).collect()),
        None => (0..cfg.batch_size).map(one).collect(),
    })
}

fn mean_std(xs: &VecDeque<f64>) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Trains one policy on `envs`. A single environment uses the EMA baseline;
/// several use per-graph return normalisation with uniform graph sampling.
pub fn train<E: Environment>(envs: &[E], policy: &PolicyConfig, cfg: &TrainerConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let first = envs.first().ok_or_else(|| Error::InvalidParams("no training graphs".into()))?;
    let hyper = policy.hyper_for(first);
    let mut params = init_params(cfg.seed, hyper)?;
    for env in envs {
        check_compatible(env, &params)?;
    }
    let pool = if cfg.threads > 1 {
        Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(cfg.threads)
                .build()
                .map_err(|e| Error::InvalidParams(format!("thread pool: {e}")))?,
        )
    } else {
        None
    };

    let multi = envs.len() > 1;
    let mut pick_rng = ChaCha8Rng::seed_from_u64(splitmix(cfg.seed ^ 0x5eed_6a9f));
    let mut baseline: Option<f64> = None;
    let mut windows: Vec<VecDeque<f64>> = vec![VecDeque::with_capacity(NORM_WINDOW); envs.len()];
    let mut best: Vec<Option<BestPlacement>> = vec![None; envs.len()];
    let mut best_so_far = f64::NEG_INFINITY;
    let mut history = TrainHistory::default();

    for iter in 0..cfg.iterations {
        let g = if multi { pick_rng.gen_range(0..envs.len()) } else { 0 };
        let env = &envs[g];
        let batch = collect_batch(env, &params, cfg, iter, pool.as_ref())?;
        let returns: Vec<f64> = batch.iter().map(|t| episode_return(t, cfg.discount)).collect();
        let mean_return = returns.iter().sum::<f64>() / returns.len() as f64;

        for t in batch.iter().filter(|t| !t.aborted) {
            let r = t.episode_return;
            if best[g].as_ref().is_none_or(|b| r > b.episode_return) {
                let placement = env.placement_of(&t.actions).locations()?;
                best[g] = Some(BestPlacement { graph: g, placement, episode_return: r });
            }
            best_so_far = best_so_far.max(r);
        }

        let (advantages, reported_baseline): (Vec<f64>, f64) = if multi {
            let w = &mut windows[g];
            for &r in &returns {
                if w.len() == NORM_WINDOW {
                    w.pop_front();
                }
                w.push_back(r);
            }
            let (mu, sigma) = mean_std(w);
            let sigma = sigma.max(STD_FLOOR);
            (returns.iter().map(|r| (r - mu) / sigma).collect(), mu)
        } else {
            let b = baseline.unwrap_or(mean_return);
            baseline = Some(baseline_update(baseline, mean_return, cfg.baseline_decay));
            (returns.iter().map(|r| r - b).collect(), b)
        };

        let grad = policy_gradient(env, &params, &batch, &advantages, cfg.entropy_weight)?;
        apply_gradient(&mut params, grad, cfg.learning_rate, cfg.grad_clip_norm, iter)?;

        let b = batch.len() as f64;
        history.records.push(IterRecord {
            iter,
            mean_return,
            best_return: best_so_far,
            baseline: reported_baseline,
            mean_entropy: batch.iter().map(Trajectory::mean_entropy).sum::<f64>() / b,
            abort_rate: batch.iter().filter(|t| t.aborted).count() as f64 / b,
        });
    }
    Ok(TrainOutcome { params, history, best })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub greedy_return: f64,
    pub greedy_aborted: bool,
    pub best_return: f64,
    pub best_placement: Vec<usize>,
}

/// Best of one greedy and `samples` sampled rollouts, over non-aborted ones.
pub fn evaluate<E: Environment + ?Sized>(env: &E, params: &PolicyParams, samples: usize, seed: u64) -> Result<Evaluation> {
    check_compatible(env, params)?;
    let enc = encode(env.graph(), params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let greedy = rollout_encoded(env, params, &enc, &mut rng, DecodeMode::Greedy);
    let mut best: Option<&Trajectory> = (!greedy.aborted).then_some(&greedy);
    let sampled: Vec<Trajectory> =
        (0..samples).map(|_| rollout_encoded(env, params, &enc, &mut rng, DecodeMode::Sample)).collect();
    for t in sampled.iter().filter(|t| !t.aborted) {
        if best.is_none_or(|b| t.episode_return > b.episode_return) {
            best = Some(t);
        }
    }
    let best = best.ok_or(Error::NoFeasibleSample)?;
    let (best_return, best_placement) = (best.episode_return, env.placement_of(&best.actions).locations()?);
    Ok(Evaluation { greedy_return: greedy.episode_return, greedy_aborted: greedy.aborted, best_return, best_placement })
}
