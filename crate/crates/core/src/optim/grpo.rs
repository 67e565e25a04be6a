//! Group-relative policy optimization: centered advantages and the clipped,
//! length-normalized surrogate with an exact categorical KL penalty.
//!
//! For a group of `G` trajectories with advantages `A_i`,
//!
//! ```text
//! L = -(1/G) Σ_i (1/|τ_i|) Σ_t m_t · min(ρ_t A_i, clip(ρ_t, 1-ε, 1+ε) A_i)
//!     + β (1/G) Σ_i (1/|τ_i|) Σ_t m_t · KL(π_θ(·|s_t) ‖ π_ref(·|s_t))
//! ```
//!
//! where `ρ_t = π_θ(a_t|s_t) / π_old(a_t|s_t)` and `|τ_i|` counts unmasked
//! tokens.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::policy::{sequence_log_probs, Context, ContextTracker, DifferentiablePolicy, Mode};
use super::rollout::Trajectory;
use crate::num::{mean, softmax, Scalar};
use crate::scene::TaskInstance;
use crate::seed::Rng;

#[derive(Debug, Error, PartialEq)]
pub enum GrpoError {
    #[error("expected {expected} rewards, got {got}")]
    GroupSize { expected: usize, got: usize },
    #[error("every token in the batch is masked")]
    DegenerateBatch,
    #[error("mask length {mask} differs from token length {tokens}")]
    MaskLength { mask: usize, tokens: usize },
}

/// Centered advantages `r_i - mean(r)`.
pub fn compute_advantages<S: Scalar>(rewards: &[S], group_size: usize) -> Result<Vec<S>, GrpoError> {
    if rewards.len() != group_size {
        return Err(GrpoError::GroupSize { expected: group_size, got: rewards.len() });
    }
    let m = mean(rewards);
    Ok(rewards.iter().map(|&r| r - m).collect())
}

/// `G` trajectories of one task with their rewards and advantages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct GroupBatch<S> {
    pub task: TaskInstance,
    pub mode: Mode,
    pub trajectories: Vec<Trajectory>,
    pub rewards: Vec<S>,
    pub advantages: Vec<S>,
}

impl<S: Scalar> GroupBatch<S> {
    pub fn new(
        task: TaskInstance,
        mode: Mode,
        trajectories: Vec<Trajectory>,
        rewards: Vec<S>,
    ) -> Result<Self, GrpoError> {
        let advantages = compute_advantages(&rewards, trajectories.len())?;
        for t in &trajectories {
            if t.mask.len() != t.tokens.len() {
                return Err(GrpoError::MaskLength { mask: t.mask.len(), tokens: t.tokens.len() });
            }
        }
        Ok(Self { task, mode, trajectories, rewards, advantages })
    }

    pub fn group_size(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_degenerate(&self) -> bool {
        self.trajectories.iter().all(|t| !t.mask.iter().any(|&m| m))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub clip_ratio: f64,
    pub kl_coeff: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { clip_ratio: 0.2, kl_coeff: 0.01 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput<S> {
    pub loss: S,
    /// The clipped surrogate objective (before negation).
    pub surrogate: S,
    /// The length-normalized mean KL (before scaling by β).
    pub kl: S,
    pub grad: Vec<S>,
}

/// Log-probability of each sampled token under `policy` (0 at environment
/// positions).
pub fn old_log_probs<S: Scalar, P: DifferentiablePolicy<S>>(policy: &P, batch: &GroupBatch<S>) -> Vec<Vec<S>> {
    batch.trajectories.iter().map(|t| sequence_log_probs(policy, &batch.task, batch.mode, &t.tokens)).collect()
}

/// Full log-distribution at every position (empty at environment positions).
pub fn reference_log_dists<S: Scalar, P: DifferentiablePolicy<S>>(
    policy: &P,
    batch: &GroupBatch<S>,
) -> Vec<Vec<Vec<S>>> {
    batch
        .trajectories
        .iter()
        .map(|t| {
            let mut tracker = ContextTracker::new(&batch.task, batch.mode);
            t.tokens
                .iter()
                .map(|&tok| {
                    let d = if tok.is_env() { vec![] } else { policy.log_distribution(tracker.context()) };
                    tracker.push(tok);
                    d
                })
                .collect()
        })
        .collect()
}

fn unmasked(t: &Trajectory) -> usize {
    t.mask.iter().filter(|&&m| m).count()
}

/// Loss and exact gradient with respect to the policy parameters.
pub fn grpo_loss<S: Scalar, P: DifferentiablePolicy<S>>(
    batch: &GroupBatch<S>,
    policy: &P,
    old_logprobs: &[Vec<S>],
    ref_log_dists: &[Vec<Vec<S>>],
    cfg: &LossConfig,
) -> Result<LossOutput<S>, GrpoError> {
    if batch.is_degenerate() {
        return Err(GrpoError::DegenerateBatch);
    }
    let g = S::of_usize(batch.group_size());
    let eps = S::of(cfg.clip_ratio);
    let beta = S::of(cfg.kl_coeff);
    let (lo, hi) = (S::one() - eps, S::one() + eps);
    let mut grad = vec![S::zero(); policy.parameters().len()];
    let mut surrogate = S::zero();
    let mut kl_total = S::zero();
    for (i, traj) in batch.trajectories.iter().enumerate() {
        let len = unmasked(traj);
        if len == 0 {
            continue;
        }
        let w = S::one() / (g * S::of_usize(len));
        let adv = batch.advantages[i];
        let mut tracker = ContextTracker::new(&batch.task, batch.mode);
        for (t, &tok) in traj.tokens.iter().enumerate() {
            if traj.mask[t] {
                let a = tok.policy_index().expect("unmasked tokens come from the policy");
                let ctx = tracker.context();
                let z = policy.logits(ctx);
                let p = softmax(&z);
                let logp: Vec<S> = p.iter().map(|&x| x.ln()).collect();
                let rho = (logp[a] - old_logprobs[i][t]).exp();
                let unclipped = rho * adv;
                let clipped = rho.max(lo).min(hi) * adv;
                let mut dz = vec![S::zero(); p.len()];
                if unclipped <= clipped {
                    surrogate += w * unclipped;
                    // d(ρA)/dz_k = ρA(δ_ak − p_k); the loss carries a minus sign.
                    for (k, d) in dz.iter_mut().enumerate() {
                        let delta = if k == a { S::one() } else { S::zero() };
                        *d -= w * unclipped * (delta - p[k]);
                    }
                } else {
                    surrogate += w * clipped;
                }
                let q = &ref_log_dists[i][t];
                let kl_t: S = p.iter().zip(&logp).zip(q).map(|((&pk, &lk), &mk)| pk * (lk - mk)).sum();
                kl_total += w * kl_t;
                for (k, d) in dz.iter_mut().enumerate() {
                    *d += beta * w * p[k] * (logp[k] - q[k] - kl_t);
                }
                policy.backprop(ctx, &dz, &mut grad);
            }
            tracker.push(tok);
        }
    }
    Ok(LossOutput { loss: -surrogate + beta * kl_total, surrogate, kl: kl_total, grad })
}

/// Contexts that occur at masked positions and never at unmasked ones.
/// Changing the policy only at these contexts cannot change the loss.
pub fn masked_only_contexts<S: Scalar>(batch: &GroupBatch<S>) -> HashSet<Context> {
    let (mut masked, mut live) = (HashSet::new(), HashSet::new());
    for traj in &batch.trajectories {
        let mut tracker = ContextTracker::new(&batch.task, batch.mode);
        for (t, &tok) in traj.tokens.iter().enumerate() {
            let ctx = *tracker.context();
            if traj.mask[t] {
                live.insert(ctx);
            } else {
                masked.insert(ctx);
            }
            tracker.push(tok);
        }
    }
    masked.retain(|c| !live.contains(c));
    masked
}

/// Parameters touched by unmasked positions of the batch.
pub fn active_parameters<S: Scalar, P: DifferentiablePolicy<S>>(policy: &P, batch: &GroupBatch<S>) -> Vec<usize> {
    let mut out = Vec::new();
    for traj in &batch.trajectories {
        let mut tracker = ContextTracker::new(&batch.task, batch.mode);
        for (t, &tok) in traj.tokens.iter().enumerate() {
            if traj.mask[t] {
                out.extend(policy.active_parameters(tracker.context()));
            }
            tracker.push(tok);
        }
    }
    out.sort_unstable();
    out.dedup();
    out
}

/// Compares the analytic gradient with central differences over `samples`
/// randomly chosen active parameters. Returns the largest relative error
/// `|g − g_fd| / max(1e-12, |g_fd|)`.
#[allow(clippy::too_many_arguments)]
pub fn finite_diff_check<S: Scalar, P: DifferentiablePolicy<S>>(
    policy: &P,
    batch: &GroupBatch<S>,
    old_logprobs: &[Vec<S>],
    ref_log_dists: &[Vec<Vec<S>>],
    cfg: &LossConfig,
    h: f64,
    samples: usize,
    rng: &mut Rng,
) -> Result<f64, GrpoError> {
    let analytic = grpo_loss(batch, policy, old_logprobs, ref_log_dists, cfg)?.grad;
    let mut candidates = active_parameters(policy, batch);
    candidates.shuffle(rng);
    candidates.truncate(samples);
    let mut probe = policy.clone();
    let mut worst = 0.0f64;
    for &j in &candidates {
        let base = probe.parameters()[j];
        probe.parameters_mut()[j] = base + S::of(h);
        let up = grpo_loss(batch, &probe, old_logprobs, ref_log_dists, cfg)?.loss;
        probe.parameters_mut()[j] = base - S::of(h);
        let down = grpo_loss(batch, &probe, old_logprobs, ref_log_dists, cfg)?.loss;
        probe.parameters_mut()[j] = base;
        let fd = (up - down).as_f64() / (2.0 * h);
        let err = (analytic[j].as_f64() - fd).abs() / fd.abs().max(1e-12);
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Parameters drawn from `N(0, sd²)` by Box–Muller.
pub fn randomize<S: Scalar, P: DifferentiablePolicy<S>>(policy: &mut P, sd: f64, rng: &mut Rng) {
    for w in policy.parameters_mut() {
        let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.gen();
        *w = S::of(sd * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos());
    }
}
