//! Clipped surrogate objectives over a batch of rollout groups.
//!
//! All objectives are maximisation targets. Gradients are exact with respect
//! to the policy logits, with zero gradient through a clipped branch that is
//! binding. Group accumulation runs in ascending group order.

use serde::{Deserialize, Serialize};

use crate::env::{log_softmax, Gradient, PolicyParams, Rollout, SyntheticTask, Token};
use crate::error::{Error, Result};
use crate::group_stats::{normalized_p, RewardGroup};

/// Floor on the group standard deviation used by [`group_advantages`].
pub const STD_FLOOR: f64 = 1e-6;

/// `(r - mean) / max(std, 1e-6)` with the sample standard deviation
/// (divisor `G - 1`). Constant groups get exactly zero.
pub fn group_advantages(rewards: &[f64]) -> Vec<f64> {
    let n = rewards.len();
    if n == 0 || rewards.iter().all(|&r| r == rewards[0]) {
        return vec![0.0; n];
    }
    let nf = n as f64;
    let mean = rewards.iter().sum::<f64>() / nf;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (nf - 1.0);
    let std = var.sqrt().max(STD_FLOOR);
    rewards.iter().map(|r| (r - mean) / std).collect()
}

/// One query with its rollouts and derived per-group quantities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Group {
    pub task: SyntheticTask,
    pub rollouts: Vec<Rollout>,
    pub advantages: Vec<f64>,
    pub p: f64,
}

impl Group {
    pub fn new(task: SyntheticTask, rollouts: Vec<Rollout>) -> Result<Self> {
        let rewards: Vec<f64> = rollouts.iter().map(|r| r.reward).collect();
        let p = normalized_p(&RewardGroup::new(rewards.clone())?);
        if let Some(r) = rollouts.iter().find(|r| r.is_empty()) {
            return Err(Error::InvalidRollout(format!("empty rollout for query {}", r.query_id)));
        }
        Ok(Self {
            task,
            advantages: group_advantages(&rewards),
            rollouts,
            p,
        })
    }

    pub fn g(&self) -> usize {
        self.rollouts.len()
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.rollouts.iter().map(|r| r.reward).collect()
    }

    /// Success count; rewards from the verifier are always binary.
    pub fn k(&self) -> usize {
        self.rollouts.iter().filter(|r| r.reward == 1.0).count()
    }

    /// DAPO's dynamic-sampling constraint `0 < k < G`.
    pub fn is_mixed(&self) -> bool {
        let k = self.k();
        k > 0 && k < self.g()
    }

    pub fn total_tokens(&self) -> usize {
        self.rollouts.iter().map(Rollout::len).sum()
    }
}

/// Groups for one update plus the `kappa` in force for the step.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RolloutBatch {
    pub groups: Vec<Group>,
    pub kappa: f64,
}

impl RolloutBatch {
    pub fn new(groups: Vec<Group>, kappa: f64) -> Result<Self> {
        if let Some(first) = groups.first() {
            if let Some(g) = groups.iter().find(|g| g.g() != first.g()) {
                return Err(Error::InvalidGroup(format!(
                    "mixed group sizes {} and {} in one batch",
                    first.g(),
                    g.g()
                )));
            }
        }
        Ok(Self { groups, kappa })
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum ClipConfig {
    Symmetric { eps: f64 },
    Asymmetric { eps_low: f64, eps_high: f64 },
    Sequence { eps: f64 },
}

impl ClipConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            ClipConfig::Symmetric { eps } | ClipConfig::Sequence { eps } => eps > 0.0,
            ClipConfig::Asymmetric { eps_low, eps_high } => {
                eps_low > 0.0 && eps_high > 0.0 && eps_high >= eps_low
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid clip config {self:?}")))
        }
    }

    /// Ratio interval `[1 - low, 1 + high]`.
    pub fn bounds(&self) -> (f64, f64) {
        match *self {
            ClipConfig::Symmetric { eps } | ClipConfig::Sequence { eps } => (1.0 - eps, 1.0 + eps),
            ClipConfig::Asymmetric { eps_low, eps_high } => (1.0 - eps_low, 1.0 + eps_high),
        }
    }
}

/// Objective value, gradient and the per-group mask that was applied.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveOutput {
    pub value: f64,
    pub gradient: Gradient,
    pub mask: Vec<bool>,
}

/// `min(r A, clip(r, lo, hi) A)` and its derivative with respect to `r`.
pub fn clipped_surrogate(ratio: f64, adv: f64, lo: f64, hi: f64) -> (f64, f64) {
    if adv > 0.0 && ratio > hi {
        (hi * adv, 0.0)
    } else if adv < 0.0 && ratio < lo {
        (lo * adv, 0.0)
    } else {
        (ratio * adv, adv)
    }
}

pub fn token_ratio(
    params_new: &PolicyParams,
    logprob_old: f64,
    task: &SyntheticTask,
    token: Token,
    position: usize,
) -> f64 {
    (params_new.token_logprob(task, position, token) - logprob_old).exp()
}

/// Length-normalised sequence ratio, computed as `exp(mean(log new - log old))`.
pub fn sequence_ratio(params_new: &PolicyParams, task: &SyntheticTask, rollout: &Rollout) -> f64 {
    let ctx = params_new.context_of(task);
    let sum: f64 = rollout
        .tokens
        .iter()
        .zip(&rollout.logprobs_old)
        .enumerate()
        .map(|(pos, (&tok, &old))| log_softmax(params_new.row(ctx, pos))[tok as usize] - old)
        .sum();
    (sum / rollout.len() as f64).exp()
}

/// Log-softmax rows of one query, positions `0..n`.
fn group_rows(params: &PolicyParams, task: &SyntheticTask, n: usize) -> Vec<Vec<f64>> {
    let ctx = params.context_of(task);
    (0..n).map(|pos| log_softmax(params.row(ctx, pos))).collect()
}

/// Adds `coef * grad log pi(token)` at (ctx, pos) to `grad`.
fn add_score(grad: &mut Gradient, ctx: usize, pos: usize, row: &[f64], token: Token, coef: f64) {
    if coef == 0.0 {
        return;
    }
    let start = grad.shape.row_start(ctx, pos);
    for (c, lp) in row.iter().enumerate() {
        grad.data[start + c] -= coef * lp.exp();
    }
    grad.data[start + token as usize] += coef;
}

fn check_batch(batch: &RolloutBatch, params: &PolicyParams) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    for g in &batch.groups {
        if params.context_of(&g.task) >= params.shape.contexts {
            return Err(Error::InvalidRollout(format!(
                "query {} has no logit row",
                g.task.query_id
            )));
        }
    }
    Ok(())
}

/// Token-level surrogate with a per-rollout weight on each token term.
fn token_level(
    groups: &[&Group],
    params: &PolicyParams,
    lo: f64,
    hi: f64,
    weight: impl Fn(&Group, &Rollout) -> f64,
) -> (f64, Gradient) {
    let mut grad = Gradient::zeros(params.shape);
    let mut value = 0.0;
    for group in groups {
        let ctx = params.context_of(&group.task);
        let max_len = group.rollouts.iter().map(Rollout::len).max().unwrap_or(0);
        let rows = group_rows(params, &group.task, max_len);
        for (rollout, &adv) in group.rollouts.iter().zip(&group.advantages) {
            let w = weight(group, rollout);
            if w == 0.0 {
                continue;
            }
            for (pos, (&tok, &old)) in rollout.tokens.iter().zip(&rollout.logprobs_old).enumerate() {
                let ratio = (rows[pos][tok as usize] - old).exp();
                let (v, dv) = clipped_surrogate(ratio, adv, lo, hi);
                value += w * v;
                add_score(&mut grad, ctx, pos, &rows[pos], tok, w * dv * ratio);
            }
        }
    }
    (value, grad)
}

fn grpo_masked(
    batch: &RolloutBatch,
    params: &PolicyParams,
    clip: &ClipConfig,
    mask: Vec<bool>,
) -> Result<ObjectiveOutput> {
    clip.validate()?;
    check_batch(batch, params)?;
    let (lo, hi) = clip.bounds();
    let n = batch.len() as f64;
    let kept: Vec<&Group> = batch
        .groups
        .iter()
        .zip(&mask)
        .filter_map(|(g, &m)| m.then_some(g))
        .collect();
    let (value, gradient) = token_level(&kept, params, lo, hi, |g, r| {
        1.0 / (n * g.g() as f64 * r.len() as f64)
    });
    Ok(ObjectiveOutput {
        value,
        gradient,
        mask,
    })
}

/// Group-relative objective: per-sequence length normalisation, `1/G` per
/// group, mean over groups.
pub fn grpo_objective(
    batch: &RolloutBatch,
    params_new: &PolicyParams,
    clip: &ClipConfig,
) -> Result<ObjectiveOutput> {
    grpo_masked(batch, params_new, clip, vec![true; batch.len()])
}

/// Variance-masked GRPO: a group contributes only when its `p >= kappa`.
/// Masked groups still count in the `1/N` group mean.
pub fn vcrl_objective(
    batch: &RolloutBatch,
    params_new: &PolicyParams,
    clip: &ClipConfig,
    kappa: f64,
) -> Result<ObjectiveOutput> {
    let mask = vcrl_mask(batch, kappa);
    grpo_masked(batch, params_new, clip, mask)
}

pub fn vcrl_mask(batch: &RolloutBatch, kappa: f64) -> Vec<bool> {
    batch.groups.iter().map(|g| g.p >= kappa).collect()
}

/// Token-level aggregation (`1 / sum |y_i|` per group) over groups with
/// `0 < k < G`, asymmetric clip range.
pub fn dapo_objective(
    batch: &RolloutBatch,
    params_new: &PolicyParams,
    clip: &ClipConfig,
) -> Result<ObjectiveOutput> {
    clip.validate()?;
    check_batch(batch, params_new)?;
    let mask: Vec<bool> = batch.groups.iter().map(Group::is_mixed).collect();
    let kept: Vec<&Group> = batch
        .groups
        .iter()
        .zip(&mask)
        .filter_map(|(g, &m)| m.then_some(g))
        .collect();
    if kept.is_empty() {
        return Err(Error::EmptyAfterFilter);
    }
    let (lo, hi) = clip.bounds();
    let n = kept.len() as f64;
    let (value, gradient) = token_level(&kept, params_new, lo, hi, |g, _| {
        1.0 / (n * g.total_tokens() as f64)
    });
    Ok(ObjectiveOutput {
        value,
        gradient,
        mask,
    })
}

/// Sequence-level ratio objective with sequence advantages.
pub fn gspo_objective(
    batch: &RolloutBatch,
    params_new: &PolicyParams,
    clip: &ClipConfig,
) -> Result<ObjectiveOutput> {
    clip.validate()?;
    check_batch(batch, params_new)?;
    let (lo, hi) = clip.bounds();
    let n = batch.len() as f64;
    let mut grad = Gradient::zeros(params_new.shape);
    let mut value = 0.0;
    for group in &batch.groups {
        let ctx = params_new.context_of(&group.task);
        let max_len = group.rollouts.iter().map(Rollout::len).max().unwrap_or(0);
        let rows = group_rows(params_new, &group.task, max_len);
        let w = 1.0 / (n * group.g() as f64);
        for (rollout, &adv) in group.rollouts.iter().zip(&group.advantages) {
            let len = rollout.len() as f64;
            let log_s: f64 = rollout
                .tokens
                .iter()
                .zip(&rollout.logprobs_old)
                .enumerate()
                .map(|(pos, (&tok, &old))| rows[pos][tok as usize] - old)
                .sum::<f64>()
                / len;
            let s = log_s.exp();
            let (v, dv) = clipped_surrogate(s, adv, lo, hi);
            value += w * v;
            let coef = w * dv * s / len;
            for (pos, &tok) in rollout.tokens.iter().enumerate() {
                add_score(&mut grad, ctx, pos, &rows[pos], tok, coef);
            }
        }
    }
    Ok(ObjectiveOutput {
        value,
        gradient: grad,
        mask: vec![true; batch.len()],
    })
}

/// Norms of each token's score vector `grad log pi`, unmasked and with the
/// variance mask applied.
pub fn term_gradnorms(batch: &RolloutBatch, params_new: &PolicyParams, kappa: f64) -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    for group in &batch.groups {
        let m = if group.p >= kappa { 1.0 } else { 0.0 };
        let max_len = group.rollouts.iter().map(Rollout::len).max().unwrap_or(0);
        let rows = group_rows(params_new, &group.task, max_len);
        for rollout in &group.rollouts {
            for (pos, &tok) in rollout.tokens.iter().enumerate() {
                let full = rows[pos]
                    .iter()
                    .enumerate()
                    .map(|(c, lp)| {
                        let d = if c == tok as usize { 1.0 } else { 0.0 } - lp.exp();
                        d * d
                    })
                    .sum::<f64>()
                    .sqrt();
                out.push((m * full, full));
            }
        }
    }
    out
}

/// Checks `||m grad log pi|| <= ||grad log pi||` for every token term.
pub fn per_term_gradnorm_check(batch: &RolloutBatch, params_new: &PolicyParams, kappa: f64) -> bool {
    term_gradnorms(batch, params_new, kappa)
        .iter()
        .all(|&(masked, full)| masked <= full)
}
