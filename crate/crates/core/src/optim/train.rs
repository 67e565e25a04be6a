//! GRPO training loop, evaluation, likelihood warm start and checkpoints.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::grpo::{grpo_loss, old_log_probs, reference_log_dists, GroupBatch, GrpoError, LossConfig};
use super::policy::{ContextTracker, DifferentiablePolicy, Mode, Policy, TabularSoftmaxPolicy};
use super::rollout::{run_episode, Episode, RolloutConfig};
use super::vocab::{encode, Token};
use crate::distill::CropConfig;
use crate::distill::DatasetRecord;
use crate::num::{softmax, Scalar};
use crate::scene::TaskInstance;
use crate::seed;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("no tasks to train on")]
    NoTasks,
    #[error(transparent)]
    Grpo(#[from] GrpoError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GrpoConfig {
    pub group_size: usize,
    pub clip_ratio: f64,
    pub kl_coeff: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub warmup_ratio: f64,
    pub grad_clip: f64,
    pub iterations: usize,
    pub tasks_per_iter: usize,
    pub max_turns: usize,
    pub turn_token_cap: usize,
    pub single_token_cap: usize,
    pub temperature: f64,
    pub top_p: f64,
    pub diversity_bonus: bool,
    pub lambda_fmt: f64,
    pub lambda_task: f64,
    pub crop: CropConfig,
}

impl GrpoConfig {
    pub fn single() -> Self {
        Self {
            group_size: 5,
            clip_ratio: 0.28,
            kl_coeff: 0.01,
            learning_rate: 0.05,
            weight_decay: 0.01,
            warmup_ratio: 0.05,
            grad_clip: 1.0,
            iterations: 500,
            tasks_per_iter: 8,
            max_turns: 5,
            turn_token_cap: 24,
            single_token_cap: 48,
            temperature: 1.0,
            top_p: 0.99,
            diversity_bonus: true,
            lambda_fmt: 1.0,
            lambda_task: 1.0,
            crop: CropConfig::default(),
        }
    }

    pub fn multiturn() -> Self {
        Self { group_size: 8, grad_clip: 0.2, ..Self::single() }
    }

    pub fn for_mode(mode: Mode) -> Self {
        match mode {
            Mode::Single => Self::single(),
            Mode::Multi => Self::multiturn(),
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if self.group_size < 2 {
            return bad("group_size must be at least 2");
        }
        if !(self.clip_ratio > 0.0 && self.clip_ratio < 1.0) {
            return bad("clip_ratio must lie in (0, 1)");
        }
        if self.kl_coeff < 0.0 || self.learning_rate < 0.0 || self.weight_decay < 0.0 {
            return bad("kl_coeff, learning_rate and weight_decay must be nonnegative");
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) || self.temperature < 0.0 {
            return bad("top_p must lie in (0, 1] and temperature must be nonnegative");
        }
        if self.grad_clip <= 0.0 || self.tasks_per_iter == 0 || self.max_turns == 0 {
            return bad("grad_clip, tasks_per_iter and max_turns must be positive");
        }
        Ok(())
    }

    pub fn rollout(&self) -> RolloutConfig {
        RolloutConfig {
            max_turns: self.max_turns,
            turn_token_cap: self.turn_token_cap,
            single_token_cap: self.single_token_cap,
            temperature: self.temperature,
            top_p: self.top_p,
            crop: self.crop,
            diversity_bonus: self.diversity_bonus,
            lambda_fmt: self.lambda_fmt,
            lambda_task: self.lambda_task,
            keep_observations: false,
        }
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig { clip_ratio: self.clip_ratio, kl_coeff: self.kl_coeff }
    }
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self::single()
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterMetrics {
    pub iter: usize,
    pub mean_reward: f64,
    pub fmt_rate: f64,
    pub mean_turns: f64,
    pub mean_tool_calls: f64,
    pub mean_task: f64,
    pub loss: f64,
    pub kl: f64,
    pub grad_norm: f64,
}

/// Aggregate rollout statistics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RolloutStats {
    pub episodes: usize,
    pub mean_reward: f64,
    pub fmt_rate: f64,
    pub accuracy: f64,
    pub mean_task: f64,
    pub mean_turns: f64,
    pub mean_tool_calls: f64,
}

pub fn summarize<S: Scalar>(episodes: &[Episode<S>]) -> RolloutStats {
    let n = episodes.len().max(1) as f64;
    let avg = |f: &dyn Fn(&Episode<S>) -> f64| episodes.iter().map(f).sum::<f64>() / n;
    RolloutStats {
        episodes: episodes.len(),
        mean_reward: avg(&|e| e.reward.total.as_f64()),
        fmt_rate: avg(&|e| f64::from(u8::from(e.reward.r_grammar.as_f64() >= 1.0))),
        accuracy: avg(&|e| f64::from(u8::from(e.reward.r_task.as_f64() >= 1.0))),
        mean_task: avg(&|e| e.reward.r_task.as_f64()),
        mean_turns: avg(&|e| e.trajectory.turns as f64),
        mean_tool_calls: avg(&|e| e.trajectory.tool_calls.len() as f64),
    }
}

/// Rolls out `policy` once per task with per-task seeded generators.
pub fn evaluate<S: Scalar, P: Policy<S> + ?Sized>(
    policy: &P,
    tasks: &[TaskInstance],
    mode: Mode,
    cfg: &RolloutConfig,
    seed_root: u64,
) -> Vec<Episode<S>> {
    tasks
        .par_iter()
        .enumerate()
        .map(|(i, t)| run_episode(policy, t, mode, cfg, &mut seed::rng(seed_root, &[0xE7A1, i as u64])))
        .collect()
}

/// AdamW state for a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<S> {
    m: Vec<S>,
    v: Vec<S>,
    t: i32,
}

impl<S: Scalar> AdamW<S> {
    pub const BETA1: f64 = 0.9;
    pub const BETA2: f64 = 0.999;
    pub const EPS: f64 = 1e-8;

    pub fn new(n: usize) -> Self {
        Self { m: vec![S::zero(); n], v: vec![S::zero(); n], t: 0 }
    }

    pub fn step(&mut self, params: &mut [S], grad: &[S], lr: f64, weight_decay: f64) {
        self.t += 1;
        let (b1, b2) = (S::of(Self::BETA1), S::of(Self::BETA2));
        let c1 = S::one() - b1.powi(self.t);
        let c2 = S::one() - b2.powi(self.t);
        let lr = S::of(lr);
        let wd = S::of(weight_decay);
        for (((w, &g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            if g == S::zero() && *m == S::zero() {
                continue;
            }
            *m = b1 * *m + (S::one() - b1) * g;
            *v = b2 * *v + (S::one() - b2) * g * g;
            let update = (*m / c1) / ((*v / c2).sqrt() + S::of(Self::EPS));
            *w -= lr * (update + wd * *w);
        }
    }
}

/// Scales `grad` down to at most `max_norm`; returns the norm before scaling.
pub fn clip_grad_norm<S: Scalar>(grad: &mut [S], max_norm: f64) -> f64 {
    let norm = grad.iter().map(|g| g.as_f64().powi(2)).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = S::of(max_norm / norm);
        for g in grad.iter_mut() {
            *g *= scale;
        }
    }
    norm
}

fn warmup_lr(cfg: &GrpoConfig, iter: usize) -> f64 {
    let warm = (cfg.warmup_ratio * cfg.iterations as f64).ceil().max(1.0);
    cfg.learning_rate * ((iter + 1) as f64 / warm).min(1.0)
}

/// Runs GRPO. `reference` is the frozen KL anchor; the old policy is a
/// snapshot of `policy` at the start of every iteration. `on_iter` sees each
/// iteration's metrics as they are produced.
pub fn train<S: Scalar>(
    policy: &mut TabularSoftmaxPolicy<S>,
    reference: &TabularSoftmaxPolicy<S>,
    tasks: &[TaskInstance],
    mode: Mode,
    cfg: &GrpoConfig,
    seed_root: u64,
    mut on_iter: impl FnMut(&IterMetrics),
) -> Result<Vec<IterMetrics>, TrainError> {
    cfg.validate()?;
    if tasks.is_empty() {
        return Err(TrainError::NoTasks);
    }
    let rcfg = cfg.rollout();
    let lcfg = cfg.loss();
    let mut opt = AdamW::new(policy.num_parameters());
    let mut log = Vec::with_capacity(cfg.iterations);
    for iter in 0..cfg.iterations {
        let mut pick = seed::rng(seed_root, &[0x7A15, iter as u64]);
        let chosen: Vec<&TaskInstance> =
            (0..cfg.tasks_per_iter).map(|_| &tasks[pick.gen_range(0..tasks.len())]).collect();
        let old = policy.clone();
        let jobs: Vec<(usize, usize)> =
            (0..chosen.len()).flat_map(|i| (0..cfg.group_size).map(move |g| (i, g))).collect();
        let episodes: Vec<Episode<S>> = jobs
            .par_iter()
            .map(|&(i, g)| {
                let mut rng = seed::rng(seed_root, &[0x2011, iter as u64, i as u64, g as u64]);
                run_episode(&old, chosen[i], mode, &rcfg, &mut rng)
            })
            .collect();
        let stats = summarize(&episodes);
        let groups: Vec<GroupBatch<S>> = episodes
            .chunks(cfg.group_size)
            .zip(&chosen)
            .map(|(eps, t)| {
                let trajs = eps.iter().map(|e| e.trajectory.clone()).collect();
                let rewards = eps.iter().map(|e| e.reward.total).collect();
                GroupBatch::new((*t).clone(), mode, trajs, rewards)
            })
            .collect::<Result<_, _>>()?;
        let parts: Vec<Option<(Vec<S>, f64, f64)>> = groups
            .par_iter()
            .map(|b| {
                if b.is_degenerate() {
                    return None;
                }
                let olp = old_log_probs(&old, b);
                let rld = reference_log_dists(reference, b);
                grpo_loss(b, &*policy, &olp, &rld, &lcfg).ok().map(|o| (o.grad, o.loss.as_f64(), o.kl.as_f64()))
            })
            .collect();
        let used = parts.iter().flatten().count();
        let mut grad = vec![S::zero(); policy.num_parameters()];
        let (mut loss, mut kl) = (0.0, 0.0);
        for (g, l, k) in parts.iter().flatten() {
            for (a, b) in grad.iter_mut().zip(g) {
                *a += *b;
            }
            loss += l;
            kl += k;
        }
        let mut grad_norm = 0.0;
        if used > 0 {
            let inv = S::one() / S::of_usize(used);
            grad.iter_mut().for_each(|g| *g *= inv);
            loss /= used as f64;
            kl /= used as f64;
            grad_norm = clip_grad_norm(&mut grad, cfg.grad_clip);
            if cfg.learning_rate > 0.0 {
                opt.step(&mut policy.params, &grad, warmup_lr(cfg, iter), cfg.weight_decay);
            }
        }
        let m = IterMetrics {
            iter,
            mean_reward: stats.mean_reward,
            fmt_rate: stats.fmt_rate,
            mean_turns: stats.mean_turns,
            mean_tool_calls: stats.mean_tool_calls,
            mean_task: stats.mean_task,
            loss,
            kl,
            grad_norm,
        };
        on_iter(&m);
        log.push(m);
    }
    Ok(log)
}

/// One supervised example: a task and the token encoding of a target text.
#[derive(Debug, Clone, PartialEq)]
pub struct Demonstration {
    pub task: TaskInstance,
    pub mode: Mode,
    pub tokens: Vec<Token>,
}

/// Encodes dataset records against their tasks. Records whose task is
/// unknown or whose text is not expressible in the token language are
/// skipped; the second value counts them.
pub fn demonstrations(
    records: &[DatasetRecord],
    tasks: &[TaskInstance],
    mode: Mode,
    obs_size: u32,
) -> (Vec<Demonstration>, usize) {
    let by_id: HashMap<String, &TaskInstance> = tasks.iter().map(|t| (t.id(), t)).collect();
    let mut skipped = 0;
    let demos = records
        .iter()
        .filter_map(|r| {
            let demo = by_id.get(&r.task_id).and_then(|t| {
                encode(&r.text, t, obs_size).ok().map(|tokens| Demonstration { task: (*t).clone(), mode, tokens })
            });
            skipped += usize::from(demo.is_none());
            demo
        })
        .collect();
    (demos, skipped)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WarmStartConfig {
    pub epochs: usize,
    pub learning_rate: f64,
}

impl Default for WarmStartConfig {
    fn default() -> Self {
        Self { epochs: 3, learning_rate: 0.5 }
    }
}

/// Maximizes the log-likelihood of the demonstrations' policy tokens with
/// per-token SGD steps, in a seeded shuffled order each epoch. Returns
/// the mean negative log-likelihood per token of each epoch.
pub fn likelihood_fit<S: Scalar>(
    policy: &mut TabularSoftmaxPolicy<S>,
    demos: &[Demonstration],
    cfg: &WarmStartConfig,
    seed_root: u64,
) -> Vec<f64> {
    let mut order: Vec<usize> = (0..demos.len()).collect();
    let lr = S::of(cfg.learning_rate);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut seed::rng(seed_root, &[0x5F7, epoch as u64]));
        let (mut nll, mut count) = (0.0, 0usize);
        for &d in &order {
            let demo = &demos[d];
            let mut tracker = ContextTracker::new(&demo.task, demo.mode);
            let steps: Vec<_> = demo
                .tokens
                .iter()
                .map(|&tok| {
                    let ctx = *tracker.context();
                    tracker.push(tok);
                    (ctx, tok)
                })
                .collect();
            for (ctx, tok) in steps {
                let Some(a) = tok.policy_index() else { continue };
                let p = softmax(&policy.logits(&ctx));
                nll -= p[a].as_f64().ln();
                count += 1;
                // Descent on −log p(a): logits move by lr·(δ_a − p).
                let dz: Vec<S> = p
                    .iter()
                    .enumerate()
                    .map(|(k, &pk)| -lr * (if k == a { S::one() } else { S::zero() } - pk))
                    .collect();
                apply_row_update(policy, &ctx, &dz);
            }
        }
        history.push(nll / count.max(1) as f64);
    }
    history
}

fn apply_row_update<S: Scalar>(policy: &mut TabularSoftmaxPolicy<S>, ctx: &super::policy::Context, dz: &[S]) {
    let dims = super::vocab::POLICY_VOCAB;
    for r in policy.rows(ctx) {
        for (w, &d) in policy.params[r * dims..(r + 1) * dims].iter_mut().zip(dz) {
            *w -= d;
        }
    }
}

pub const CHECKPOINT_FORMAT: &str = "grounded-rl/tabular-policy";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Versioned policy checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub mode: Mode,
    pub config: GrpoConfig,
    pub buckets: usize,
    pub parameters: Vec<f64>,
}

impl Checkpoint {
    pub fn new<S: Scalar>(policy: &TabularSoftmaxPolicy<S>, mode: Mode, config: GrpoConfig) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            mode,
            config,
            buckets: policy.buckets,
            parameters: policy.params.iter().map(|p| p.as_f64()).collect(),
        }
    }

    pub fn policy<S: Scalar>(&self) -> Result<TabularSoftmaxPolicy<S>, TrainError> {
        if self.format != CHECKPOINT_FORMAT || self.version != CHECKPOINT_VERSION {
            return Err(TrainError::Checkpoint(format!("unsupported checkpoint {} v{}", self.format, self.version)));
        }
        if self.parameters.len() != self.buckets * super::vocab::POLICY_VOCAB {
            return Err(TrainError::Checkpoint("parameter count does not match bucket count".into()));
        }
        Ok(TabularSoftmaxPolicy { buckets: self.buckets, params: self.parameters.iter().map(|&p| S::of(p)).collect() })
    }
}
