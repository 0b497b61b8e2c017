//! Comparison gradient estimators sharing the CoVRL plumbing.
//!
//! | method   | samples from | reward on the trace score                  | answer term            |
//! |----------|--------------|--------------------------------------------|------------------------|
//! | jlb      | prior        | `log π(y|x,z)`                             | NLL, weight 1          |
//! | latro    | prior        | `log π(y|x,z) − β log(π(z|x)/π_ref(z|x))`  | NLL, weight 1          |
//! | verifree | prior        | `π(y|x,z)`                                 | NLL, weight `π(y|x,z)` |
//! | rlpr     | prior        | mean token probability of `y`              | joint with the trace   |
//! | ravr     | posterior    | `max(0, log π(y|x,z) − b)`                 | `k3 · ∇R` coupling     |
//!
//! RAVR's baseline `b` is the mean answer log-likelihood over prior-mode
//! rollouts drawn for the same question. Its coupling term weights `∇R` by a
//! per-rollout `k3` estimate of `KL(q ‖ p)` built from the whole-trace ratio
//! `p(z|x)/q(z|x,y)`, with the weight held constant.

use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::autodiff::{Graph, Var};
use crate::coupled::{sample_trace, ScoredRollout};
use crate::error::{Error, Result};
use crate::estimators::{compute_advantages, BaselineScope};
use crate::policy::{PolicyModel, SamplingParams};
use crate::tasks::{render_context, LayoutMode, TaskInstance};
use crate::training::loss::{clipped_term, Aggregation, BoundRollout};
use crate::training::{run_training, EvalReport, TrainingConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    #[default]
    Covrl,
    Jlb,
    Latro,
    Verifree,
    Rlpr,
    Ravr,
}

impl Method {
    pub const ALL: [Method; 6] = [Method::Covrl, Method::Jlb, Method::Latro, Method::Verifree, Method::Rlpr, Method::Ravr];
    pub const BASELINES: [Method; 5] = [Method::Jlb, Method::Latro, Method::Verifree, Method::Rlpr, Method::Ravr];

    pub fn name(self) -> &'static str {
        match self {
            Method::Covrl => "covrl",
            Method::Jlb => "jlb",
            Method::Latro => "latro",
            Method::Verifree => "verifree",
            Method::Rlpr => "rlpr",
            Method::Ravr => "ravr",
        }
    }

    /// Layout whose rollouts feed the policy term.
    pub fn policy_mode(self) -> Option<LayoutMode> {
        match self {
            Method::Covrl => None,
            Method::Ravr => Some(LayoutMode::Posterior),
            _ => Some(LayoutMode::Prior),
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BaselineSpec<'a> {
    pub method: Method,
    /// LaTRO's reference-KL weight.
    pub beta: f64,
    /// LaTRO's frozen reference policy.
    pub reference: Option<&'a PolicyModel>,
}

impl BaselineSpec<'_> {
    pub fn validate(&self) -> Result<()> {
        if self.method == Method::Covrl {
            return Err(Error::InvalidArgument("covrl is not a baseline method".into()));
        }
        if self.beta < 0.0 {
            return Err(Error::InvalidArgument(format!("negative beta {}", self.beta)));
        }
        if (self.method == Method::Latro) != self.reference.is_some() {
            return Err(Error::InvalidArgument("a reference model is required for latro and only for latro".into()));
        }
        Ok(())
    }
}

/// Rollouts for one question: `group_size` from the method's layout, plus
/// `group_size` prior-mode rollouts for RAVR's baseline.
pub fn sample_group(
    method: Method,
    model: &PolicyModel,
    instance: &TaskInstance,
    group_size: usize,
    sampling: &SamplingParams,
    rng: &mut impl Rng,
) -> Result<Vec<ScoredRollout>> {
    let mode = method
        .policy_mode()
        .ok_or_else(|| Error::InvalidArgument("covrl uses the hybrid sampler".into()))?;
    let mut modes = vec![mode; group_size];
    if method == Method::Ravr {
        modes.extend(std::iter::repeat(LayoutMode::Prior).take(group_size));
    }
    modes
        .into_iter()
        .map(|m| {
            let (trace, truncated) = sample_trace(model, instance, m, sampling, rng)?;
            ScoredRollout::score(model, instance, trace, m, truncated)
        })
        .collect()
}

fn answer_log_likelihood(r: &ScoredRollout) -> f64 {
    r.answer_logp.iter().sum()
}

/// Method reward of one rollout. `ravr_baseline` is only read for RAVR.
pub fn method_reward(spec: &BaselineSpec, r: &ScoredRollout, ravr_baseline: f64) -> Result<f64> {
    let ll = answer_log_likelihood(r);
    Ok(match spec.method {
        Method::Covrl => return Err(Error::InvalidArgument("covrl is not a baseline method".into())),
        Method::Jlb => ll,
        Method::Latro => {
            let reference = spec
                .reference
                .ok_or_else(|| Error::InvalidArgument("latro needs a reference model".into()))?;
            let root = render_context(&r.instance, LayoutMode::Prior, reference.vocab());
            let ref_ll: f64 = reference.score_sequence(&root, &r.trace)?.iter().sum();
            let own: f64 = r.view.prior_logp.iter().sum();
            ll - spec.beta * (own - ref_ll)
        }
        Method::Verifree => ll.exp(),
        Method::Rlpr => r.answer_logp.iter().map(|l| l.exp()).sum::<f64>() / r.answer_logp.len() as f64,
        Method::Ravr => match r.behavior_mode {
            LayoutMode::Posterior => (ll - ravr_baseline).max(0.0),
            LayoutMode::Prior => ll,
        },
    })
}

/// RAVR baseline of a group: mean answer log-likelihood of its prior rollouts.
pub fn ravr_baseline(group: &[ScoredRollout]) -> f64 {
    let prior: Vec<f64> = group
        .iter()
        .filter(|r| r.behavior_mode == LayoutMode::Prior)
        .map(answer_log_likelihood)
        .collect();
    if prior.is_empty() {
        0.0
    } else {
        prior.iter().sum::<f64>() / prior.len() as f64
    }
}

/// Sets rewards and advantages. With `center`, prior-sampled methods use
/// group- or batch-centered advantages; otherwise the raw reward. RAVR's
/// reward is already baseline-relative and is never re-centered.
pub fn assign_rewards(spec: &BaselineSpec, groups: &mut [Vec<ScoredRollout>], scope: BaselineScope, center: bool) -> Result<()> {
    spec.validate()?;
    for g in groups.iter_mut() {
        let b = ravr_baseline(g);
        for r in g.iter_mut() {
            let reward = method_reward(spec, r, b)?;
            r.reward = Some(reward);
            r.advantage = Some(reward);
        }
    }
    if !center || spec.method == Method::Ravr {
        return Ok(());
    }
    let reward = |r: &ScoredRollout| r.reward.expect("assigned above");
    match scope {
        BaselineScope::Group => {
            for g in groups.iter_mut() {
                let adv = compute_advantages(&g.iter().map(reward).collect::<Vec<_>>());
                g.iter_mut().zip(adv).for_each(|(r, a)| r.advantage = Some(a));
            }
        }
        BaselineScope::Batch => {
            let adv = compute_advantages(&groups.iter().flatten().map(reward).collect::<Vec<_>>());
            groups.iter_mut().flatten().zip(adv).for_each(|(r, a)| r.advantage = Some(a));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy)]
pub struct BaselineLossParts {
    pub total: Var,
    pub policy: Var,
    pub nll: Var,
    pub coupling: Var,
    pub clip_fraction: f64,
}

/// Loss whose negative gradient is the method's estimator. Rollouts must
/// already carry rewards and advantages.
pub fn baseline_loss(
    g: &mut Graph,
    spec: &BaselineSpec,
    bound: &[BoundRollout],
    rollouts: &[ScoredRollout],
    clip: Option<f64>,
    agg: Aggregation,
) -> Result<BaselineLossParts> {
    spec.validate()?;
    let mode = spec.method.policy_mode().expect("validated baseline");
    let mut policy_terms: Vec<Vec<Var>> = Vec::new();
    let mut nll_terms = Vec::new();
    let mut coupling_terms = Vec::new();
    let (mut clipped, mut count) = (0usize, 0usize);
    for (b, r) in bound.iter().zip(rollouts) {
        if r.behavior_mode != mode {
            if spec.method == Method::Ravr && r.behavior_mode == LayoutMode::Prior {
                continue;
            }
            return Err(Error::InvalidArgument(format!(
                "{} consumes {:?} rollouts, got {:?}",
                spec.method.name(),
                mode,
                r.behavior_mode
            )));
        }
        let adv = r
            .advantage
            .ok_or_else(|| Error::InvalidArgument("rollout has no advantage".into()))?;
        let mut scored: Vec<(Var, f64)> = b.trace_prior().iter().copied().zip(r.view.prior_logp.iter().copied()).collect();
        if spec.method == Method::Rlpr {
            scored.extend(b.answer().iter().copied().zip(r.answer_logp.iter().copied()));
        }
        let mut terms = Vec::with_capacity(scored.len());
        for (lp, held) in scored {
            let lr = g.add_const(lp, -held);
            let (t, hit) = clipped_term(g, lr, adv, clip);
            terms.push(t);
            clipped += hit as usize;
            count += 1;
        }
        policy_terms.push(terms);
        let ll = g.sum(b.answer());
        match spec.method {
            Method::Jlb | Method::Latro => nll_terms.push(g.neg(ll)),
            Method::Verifree => {
                let w = r.answer_logp.iter().sum::<f64>().exp();
                nll_terms.push(g.scale(ll, -w));
            }
            Method::Ravr => {
                let reward = r.reward.unwrap_or(0.0);
                if reward > 0.0 {
                    let (p, q, _) = r.view.totals();
                    let rho = (p - q).exp();
                    let k3 = (rho - 1.0) - (p - q);
                    coupling_terms.push(g.scale(ll, -k3));
                }
            }
            _ => {}
        }
    }
    let policy_obj = match agg {
        Aggregation::TokenMean => {
            let all: Vec<Var> = policy_terms.iter().flatten().copied().collect();
            g.mean(&all)
        }
        Aggregation::RolloutSum => {
            let sums: Vec<Var> = policy_terms.iter().map(|t| g.sum(t)).collect();
            g.mean(&sums)
        }
    };
    let policy = g.neg(policy_obj);
    let nll = g.mean(&nll_terms);
    let n_policy = policy_terms.len().max(1) as f64;
    let coupling_sum = g.sum(&coupling_terms);
    let coupling = g.scale(coupling_sum, 1.0 / n_policy);
    let partial = g.add(policy, nll);
    let total = g.add(partial, coupling);
    Ok(BaselineLossParts {
        total,
        policy,
        nll,
        coupling,
        clip_fraction: if count == 0 { 0.0 } else { clipped as f64 / count as f64 },
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub method: Method,
    pub seed: u64,
    pub final_accuracy: f64,
    /// First evaluation step at or above the threshold, if any.
    pub steps_to_threshold: Option<u64>,
    pub eval_curve: Vec<EvalReport>,
    pub final_mean_reward_prior: f64,
}

/// Trains every method on every seed with otherwise identical settings. Each
/// run writes to `out/<method>/seed-<seed>` when `out` is given.
pub fn run_baseline_comparison(
    methods: &[Method],
    shared: &TrainingConfig,
    seeds: &[u64],
    threshold: f64,
    out: Option<&Path>,
) -> Result<Vec<ComparisonRow>> {
    if methods.len() < 2 {
        return Err(Error::Config("a comparison needs at least two methods".into()));
    }
    let mut rows = Vec::new();
    for &method in methods {
        for &seed in seeds {
            let mut cfg = shared.clone();
            cfg.method = method;
            cfg.seed = Some(seed);
            let dir = out.map(|o| o.join(method.name()).join(format!("seed-{seed}")));
            let run = run_training(&cfg, dir.as_deref())?;
            let tail = run.state.history.len().saturating_sub(10);
            let recent = &run.state.history[tail..];
            rows.push(ComparisonRow {
                method,
                seed,
                final_accuracy: run.final_accuracy(),
                steps_to_threshold: run.evals.iter().find(|e| e.accuracy >= threshold).map(|e| e.step),
                final_mean_reward_prior: recent.iter().map(|m| m.mean_reward_prior).sum::<f64>() / recent.len().max(1) as f64,
                eval_curve: run.evals,
            });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coupled::tabular_rows_for;
    use crate::gradcheck::finite_difference_check;
    use crate::policy::{ArchConfig, TabularConfig};
    use crate::tasks::{ArithOp, TaskGenerator, TaskSpec};
    use crate::training::loss::bind_all;
    use crate::vocab::Vocabulary;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (PolicyModel, TaskInstance) {
        let vocab = Vocabulary::arithmetic(3, false).unwrap();
        let spec = TaskSpec { modulus: 3, ops: vec![ArithOp::Add], ..TaskSpec::default() };
        let gen = TaskGenerator::new(spec, &vocab, 2).unwrap();
        let inst = gen.from_chain(0, &[(ArithOp::Add, 1)]);
        let rows = tabular_rows_for(std::slice::from_ref(&inst), &vocab, 2);
        let arch = ArchConfig::Tabular(TabularConfig { rows, init_scale: 1.0 });
        (PolicyModel::init(vocab, 16, arch, 12).unwrap(), inst)
    }

    fn group(method: Method, model: &PolicyModel, inst: &TaskInstance, seed: u64) -> Vec<ScoredRollout> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        sample_group(method, model, inst, 6, &SamplingParams::default().with_budget(2), &mut rng).unwrap()
    }

    #[test]
    fn mode_discipline() {
        let (model, inst) = setup();
        for m in Method::BASELINES {
            let g = group(m, &model, &inst, 1);
            let policy: Vec<_> = g.iter().filter(|r| Some(r.behavior_mode) == m.policy_mode()).collect();
            assert_eq!(policy.len(), 6);
            if m != Method::Ravr {
                assert!(g.iter().all(|r| r.behavior_mode == LayoutMode::Prior));
            }
        }
        assert!(sample_group(Method::Covrl, &model, &inst, 2, &SamplingParams::default(), &mut ChaCha8Rng::seed_from_u64(0)).is_err());
        // A prior-sampling baseline refuses posterior rollouts.
        let mut post = group(Method::Ravr, &model, &inst, 2);
        post.iter_mut().for_each(|r| r.advantage = Some(0.0));
        let spec = BaselineSpec { method: Method::Jlb, beta: 0.0, reference: None };
        let mut g = Graph::new(&model);
        let b = bind_all(&mut g, &post, true).unwrap();
        assert!(baseline_loss(&mut g, &spec, &b, &post, None, Aggregation::RolloutSum).is_err());
    }

    #[test]
    fn latro_with_zero_beta_is_jlb_bitwise() {
        let (model, inst) = setup();
        let reference = model.clone();
        let mut a = vec![group(Method::Jlb, &model, &inst, 4)];
        let mut b = a.clone();
        let jlb = BaselineSpec { method: Method::Jlb, beta: 0.0, reference: None };
        let latro = BaselineSpec { method: Method::Latro, beta: 0.0, reference: Some(&reference) };
        assign_rewards(&jlb, &mut a, BaselineScope::Group, true).unwrap();
        assign_rewards(&latro, &mut b, BaselineScope::Group, true).unwrap();
        let (ra, rb) = (&a[0], &b[0]);
        let mut ga = Graph::new(&model);
        let ba = bind_all(&mut ga, ra, true).unwrap();
        let la = baseline_loss(&mut ga, &jlb, &ba, ra, Some(0.3), Aggregation::TokenMean).unwrap();
        let mut gb = Graph::new(&model);
        let bb = bind_all(&mut gb, rb, true).unwrap();
        let lb = baseline_loss(&mut gb, &latro, &bb, rb, Some(0.3), Aggregation::TokenMean).unwrap();
        assert_eq!(ga.value(la.total).to_bits(), gb.value(lb.total).to_bits());
        let (x, y) = (ga.backward(la.total).unwrap(), gb.backward(lb.total).unwrap());
        assert!(x.values().iter().zip(y.values()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    #[test]
    fn verifree_weight_is_sequence_probability() {
        let (model, inst) = setup();
        let mut r = group(Method::Verifree, &model, &inst, 5).remove(0);
        r.answer_logp = vec![0.5f64.ln(), 0.25f64.ln()];
        let spec = BaselineSpec { method: Method::Verifree, beta: 0.0, reference: None };
        assert!((method_reward(&spec, &r, 0.0).unwrap() - 0.125).abs() < 1e-15);
    }

    #[test]
    fn ravr_clamps_low_rewards() {
        let (model, inst) = setup();
        let mut groups = vec![group(Method::Ravr, &model, &inst, 6)];
        // Push every posterior answer log-likelihood below the prior baseline.
        for r in groups[0].iter_mut() {
            if r.behavior_mode == LayoutMode::Posterior {
                r.answer_logp = vec![-50.0; r.answer_logp.len()];
            }
        }
        let spec = BaselineSpec { method: Method::Ravr, beta: 0.0, reference: None };
        assign_rewards(&spec, &mut groups, BaselineScope::Group, true).unwrap();
        let rs = &groups[0];
        assert!(rs.iter().filter(|r| r.behavior_mode == LayoutMode::Posterior).all(|r| r.reward == Some(0.0)));
        let mut g = Graph::new(&model);
        let b = bind_all(&mut g, rs, true).unwrap();
        let parts = baseline_loss(&mut g, &spec, &b, rs, None, Aggregation::RolloutSum).unwrap();
        let grad = g.backward(parts.policy).unwrap();
        assert!(grad.values().iter().all(|&x| x == 0.0));
        assert_eq!(g.value(parts.coupling), 0.0);
    }

    #[test]
    fn spec_validation() {
        let (model, _) = setup();
        assert!(BaselineSpec { method: Method::Latro, beta: 0.1, reference: None }.validate().is_err());
        assert!(BaselineSpec { method: Method::Jlb, beta: 0.0, reference: Some(&model) }.validate().is_err());
        assert!(BaselineSpec { method: Method::Jlb, beta: -1.0, reference: None }.validate().is_err());
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
    }

    #[test]
    fn baseline_losses_pass_finite_differences() {
        let (model, inst) = setup();
        let reference = {
            let mut r = model.clone();
            r.params_mut().iter_mut().for_each(|p| *p *= 0.5);
            r
        };
        for m in Method::BASELINES {
            let spec = BaselineSpec {
                method: m,
                beta: 0.3,
                reference: (m == Method::Latro).then_some(&reference),
            };
            let mut groups = vec![group(m, &model, &inst, 7)];
            assign_rewards(&spec, &mut groups, BaselineScope::Group, true).unwrap();
            let rs = groups.remove(0);
            let loss = |g: &mut Graph| -> Result<Var> {
                let b = bind_all(g, &rs, false)?;
                Ok(baseline_loss(g, &spec, &b, &rs, Some(0.3), Aggregation::TokenMean)?.total)
            };
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            // Rewards, advantages and stop-gradient weights are constants, so
            // the check covers the differentiable path only.
            let rep = finite_difference_check(&model, loss, 300, 1e-4, &mut rng).unwrap();
            assert!(rep.pass, "{}: {}", m.name(), rep.max_rel_err);
        }
    }
}
