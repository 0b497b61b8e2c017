//! Rewards, group-relative advantages, and the two KL estimators.
//!
//! Both KL estimators target `KL(p′ ‖ p_φ)`. The per-token forms sum
//! importance-weighted Bregman terms over the trace. The sequence forms apply
//! the same construction once to whole-trace ratios; they stay unbiased at
//! any trace length, while the per-token sums are exact only for single-token
//! traces.

use serde::{Deserialize, Serialize};

use crate::coupled::{CompositeView, ScoredRollout};
use crate::error::{Error, Result};
use crate::tasks::LayoutMode;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardVariant {
    #[default]
    LogProbMean,
    LogProbSum,
    ProbMean,
    ProbSum,
}

impl RewardVariant {
    pub const ALL: [RewardVariant; 4] = [
        RewardVariant::LogProbMean,
        RewardVariant::LogProbSum,
        RewardVariant::ProbMean,
        RewardVariant::ProbSum,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RewardVariant::LogProbMean => "log_prob_mean",
            RewardVariant::LogProbSum => "log_prob_sum",
            RewardVariant::ProbMean => "prob_mean",
            RewardVariant::ProbSum => "prob_sum",
        }
    }
}

impl std::str::FromStr for RewardVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown reward variant {s:?}")))
    }
}

/// Reward from per-token answer log-probabilities.
pub fn reward_from_log_probs(answer_logp: &[f64], variant: RewardVariant) -> Result<f64> {
    if answer_logp.is_empty() {
        return Err(Error::InvalidArgument("empty answer span".into()));
    }
    let n = answer_logp.len() as f64;
    Ok(match variant {
        RewardVariant::LogProbMean => answer_logp.iter().sum::<f64>() / n,
        RewardVariant::LogProbSum => answer_logp.iter().sum(),
        RewardVariant::ProbMean => answer_logp.iter().map(|l| l.exp()).sum::<f64>() / n,
        RewardVariant::ProbSum => answer_logp.iter().map(|l| l.exp()).sum(),
    })
}

pub fn compute_reward(rollout: &ScoredRollout, variant: RewardVariant) -> Result<f64> {
    reward_from_log_probs(&rollout.answer_logp, variant)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineScope {
    #[default]
    Group,
    Batch,
}

/// Rewards minus their mean; no variance normalization.
pub fn compute_advantages(rewards: &[f64]) -> Vec<f64> {
    if rewards.is_empty() {
        return Vec::new();
    }
    let mean = rewards.iter().sum::<f64>() / rewards.len() as f64;
    rewards.iter().map(|r| r - mean).collect()
}

/// Fills `reward` and `advantage` on every rollout. Each inner vector is one
/// sampling group.
pub fn assign_rewards_and_advantages(
    groups: &mut [Vec<ScoredRollout>],
    variant: RewardVariant,
    scope: BaselineScope,
) -> Result<()> {
    for r in groups.iter_mut().flatten() {
        r.reward = Some(compute_reward(r, variant)?);
    }
    let reward = |r: &ScoredRollout| r.reward.expect("assigned above");
    match scope {
        BaselineScope::Group => {
            for g in groups.iter_mut() {
                let adv = compute_advantages(&g.iter().map(reward).collect::<Vec<_>>());
                for (r, a) in g.iter_mut().zip(adv) {
                    r.advantage = Some(a);
                }
            }
        }
        BaselineScope::Batch => {
            let all: Vec<f64> = groups.iter().flatten().map(reward).collect();
            let adv = compute_advantages(&all);
            for (r, a) in groups.iter_mut().flatten().zip(adv) {
                r.advantage = Some(a);
            }
        }
    }
    Ok(())
}

/// Identity up to `threshold`, logarithmic growth beyond it.
pub fn soft_clip(ratio: f64, threshold: f64) -> Result<f64> {
    if ratio.is_nan() || ratio <= 0.0 {
        return Err(Error::InvalidArgument(format!("soft clip needs a positive ratio, got {ratio}")));
    }
    Ok(crate::autodiff::soft_clip_value(ratio, threshold))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorForm {
    /// Per-token ratios, summed over the trace.
    #[default]
    Token,
    /// One whole-trace ratio per rollout.
    Sequence,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KlTerm {
    pub per_token: Vec<f64>,
    pub total: f64,
    pub skipped: bool,
}

impl KlTerm {
    fn skipped(len: usize) -> Self {
        Self {
            per_token: vec![0.0; len],
            total: 0.0,
            skipped: true,
        }
    }

    fn from_terms(per_token: Vec<f64>) -> Self {
        Self {
            total: per_token.iter().sum(),
            per_token,
            skipped: false,
        }
    }
}

/// `w ln w − (w − 1)` with `w = ½ + ½·softclip(r)`.
pub fn prior_contribution(r: f64, threshold: f64) -> f64 {
    let w = 0.5 + 0.5 * crate::autodiff::soft_clip_value(r, threshold);
    w * w.ln() - (w - 1.0)
}

/// `w ln(½ + ½r) + (w − 1)` with `w = ½ + softclip(1/r)/2`.
pub fn posterior_contribution(r: f64, threshold: f64) -> f64 {
    let w = 0.5 + 0.5 * crate::autodiff::soft_clip_value(1.0 / r, threshold);
    w * (0.5 + 0.5 * r).ln() + (w - 1.0)
}

/// Per-token estimator for prior-mode rollouts.
pub fn kl_estimate_prior(view: &CompositeView, truncated: bool, threshold: f64) -> KlTerm {
    if truncated {
        return KlTerm::skipped(view.len());
    }
    KlTerm::from_terms(view.ratio_r.iter().map(|&r| prior_contribution(r, threshold)).collect())
}

/// Per-token estimator for posterior-mode rollouts.
pub fn kl_estimate_posterior(view: &CompositeView, truncated: bool, threshold: f64) -> KlTerm {
    if truncated {
        return KlTerm::skipped(view.len());
    }
    // ln(½ + ½r) = composite − prior, which stays finite when r overflows.
    let terms = view
        .ratio_r
        .iter()
        .zip(view.composite_logp.iter().zip(&view.prior_logp))
        .map(|(&r, (&c, &p))| {
            let w = 0.5 + 0.5 * crate::autodiff::soft_clip_value(1.0 / r, threshold);
            w * (c - p) + (w - 1.0)
        })
        .collect();
    KlTerm::from_terms(terms)
}

/// Whole-trace estimator: `w ln(p′/p) ∓ (w − 1)` with `w = softclip(p′/p_mode)`.
pub fn kl_estimate_sequence(view: &CompositeView, mode: LayoutMode, truncated: bool, threshold: f64) -> KlTerm {
    if truncated {
        return KlTerm::skipped(view.len());
    }
    let (p, q, c) = view.totals();
    let log_ratio_prior = c - p;
    let total = match mode {
        LayoutMode::Prior => {
            let w = crate::autodiff::soft_clip_value(log_ratio_prior.exp(), threshold);
            w * w.ln() - (w - 1.0)
        }
        LayoutMode::Posterior => {
            let w = crate::autodiff::soft_clip_value((c - q).exp(), threshold);
            w * log_ratio_prior + (w - 1.0)
        }
    };
    KlTerm {
        per_token: Vec::new(),
        total,
        skipped: false,
    }
}

/// Mode-matching estimator in the requested form.
pub fn kl_estimate(view: &CompositeView, mode: LayoutMode, truncated: bool, threshold: f64, form: EstimatorForm) -> KlTerm {
    match (form, mode) {
        (EstimatorForm::Token, LayoutMode::Prior) => kl_estimate_prior(view, truncated, threshold),
        (EstimatorForm::Token, LayoutMode::Posterior) => kl_estimate_posterior(view, truncated, threshold),
        (EstimatorForm::Sequence, _) => kl_estimate_sequence(view, mode, truncated, threshold),
    }
}
