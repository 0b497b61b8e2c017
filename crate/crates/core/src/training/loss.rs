//! Differentiable loss terms over scored rollouts.

use crate::autodiff::{Graph, Var};
use crate::coupled::{score_passes, ScoredRollout};
use crate::error::{Error, Result};
use crate::estimators::EstimatorForm;
use crate::tasks::LayoutMode;

/// Leaves of one rollout's two forward passes.
#[derive(Debug, Clone)]
pub struct BoundRollout {
    pub prior: Vec<Var>,
    pub posterior: Vec<Var>,
    pub trace_len: usize,
    pub answer_offset: usize,
    pub answer_len: usize,
}

impl BoundRollout {
    pub fn trace_prior(&self) -> &[Var] {
        &self.prior[..self.trace_len]
    }

    pub fn answer(&self) -> &[Var] {
        &self.prior[self.answer_offset..self.answer_offset + self.answer_len]
    }

    pub fn column(&self, mode: LayoutMode) -> &[Var] {
        match mode {
            LayoutMode::Prior => self.trace_prior(),
            LayoutMode::Posterior => &self.posterior,
        }
    }
}

/// Registers `rollout` on `g`. With `reuse`, the passes recorded at sampling
/// time are adopted; they must come from the graph's current parameters.
pub fn bind(g: &mut Graph, rollout: &ScoredRollout, reuse: bool) -> Result<BoundRollout> {
    let layout = rollout.layout(g.model().vocab());
    let passes = match (&rollout.passes, reuse) {
        (Some(p), true) => p.clone(),
        _ => score_passes(g.model(), &layout)?,
    };
    Ok(BoundRollout {
        prior: g.adopt(passes.prior),
        posterior: g.adopt(passes.posterior),
        trace_len: layout.trace_len,
        answer_offset: layout.answer_offset,
        answer_len: layout.answer_len,
    })
}

pub fn bind_all(g: &mut Graph, rollouts: &[ScoredRollout], reuse: bool) -> Result<Vec<BoundRollout>> {
    rollouts.iter().map(|r| bind(g, r, reuse)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Aggregation {
    /// Mean over every term of every rollout.
    #[default]
    TokenMean,
    /// Mean over rollouts of each rollout's summed terms.
    RolloutSum,
}

fn aggregate(g: &mut Graph, per_rollout: &[Vec<Var>], agg: Aggregation) -> Var {
    match agg {
        Aggregation::TokenMean => {
            let all: Vec<Var> = per_rollout.iter().flatten().copied().collect();
            g.mean(&all)
        }
        Aggregation::RolloutSum => {
            let sums: Vec<Var> = per_rollout.iter().map(|t| g.sum(t)).collect();
            g.mean(&sums)
        }
    }
}

/// `min(ρÂ, clip(ρ)Â)` for one log-ratio node; `None` disables clipping.
/// Returns the term and whether the ratio left the trust region.
pub fn clipped_term(g: &mut Graph, log_ratio: Var, advantage: f64, clip: Option<f64>) -> (Var, bool) {
    let ratio = g.exp(log_ratio);
    let plain = g.scale(ratio, advantage);
    match clip {
        None => (plain, false),
        Some(eps) => {
            let rv = g.value(ratio);
            let clamped = g.clamp(ratio, 1.0 - eps, 1.0 + eps);
            let clipped = g.scale(clamped, advantage);
            (g.min(plain, clipped), rv < 1.0 - eps || rv > 1.0 + eps)
        }
    }
}

fn advantage_of(r: &ScoredRollout) -> Result<f64> {
    r.advantage
        .ok_or_else(|| Error::InvalidArgument(format!("rollout for {} has no advantage", r.instance.task_id)))
}

/// Negated clipped surrogate on the composite with the sampling mode's
/// probabilities as the behavior policy. Returns the loss and the clipped
/// fraction of ratio terms.
pub fn grpo_surrogate(
    g: &mut Graph,
    bound: &[BoundRollout],
    rollouts: &[ScoredRollout],
    clip: Option<f64>,
    form: EstimatorForm,
    agg: Aggregation,
) -> Result<(Var, f64)> {
    let mut per_rollout = Vec::with_capacity(rollouts.len());
    let (mut clipped, mut count) = (0usize, 0usize);
    for (b, r) in bound.iter().zip(rollouts) {
        let adv = advantage_of(r)?;
        let composite: Vec<Var> = b
            .trace_prior()
            .iter()
            .zip(&b.posterior)
            .map(|(&p, &q)| g.log_mix_half(p, q))
            .collect();
        let mut terms = Vec::new();
        match form {
            EstimatorForm::Token => {
                for (&c, &beh) in composite.iter().zip(&r.behavior_logp) {
                    let lr = g.add_const(c, -beh);
                    let (t, hit) = clipped_term(g, lr, adv, clip);
                    terms.push(t);
                    clipped += hit as usize;
                    count += 1;
                }
            }
            EstimatorForm::Sequence => {
                let c = g.sum(&composite);
                let lr = g.add_const(c, -r.behavior_logp.iter().sum::<f64>());
                let (t, hit) = clipped_term(g, lr, adv, clip);
                terms.push(t);
                clipped += hit as usize;
                count += 1;
            }
        }
        per_rollout.push(terms);
    }
    let obj = aggregate(g, &per_rollout, agg);
    let frac = if count == 0 { 0.0 } else { clipped as f64 / count as f64 };
    Ok((g.neg(obj), frac))
}

/// Mean answer NLL over valid-format rollouts with positive advantage.
pub fn selective_nll(g: &mut Graph, bound: &[BoundRollout], rollouts: &[ScoredRollout]) -> Result<Var> {
    let mut per = Vec::new();
    for (b, r) in bound.iter().zip(rollouts) {
        if r.parsed.valid_format && advantage_of(r)? > 0.0 {
            let m = g.mean(b.answer());
            per.push(g.neg(m));
        }
    }
    Ok(g.mean(&per))
}

/// Mode-matching KL estimator for one rollout.
pub fn kl_node(g: &mut Graph, b: &BoundRollout, mode: LayoutMode, threshold: f64, form: EstimatorForm) -> Var {
    let pairs: Vec<(Var, Var)> = b.trace_prior().iter().copied().zip(b.posterior.iter().copied()).collect();
    match form {
        EstimatorForm::Token => {
            let terms: Vec<Var> = pairs
                .into_iter()
                .map(|(p, q)| match mode {
                    LayoutMode::Prior => {
                        let d = g.sub(q, p);
                        let r = g.exp(d);
                        let sc = g.soft_clip(r, threshold);
                        let half = g.scale(sc, 0.5);
                        let w = g.add_const(half, 0.5);
                        bregman_prior(g, w)
                    }
                    LayoutMode::Posterior => {
                        let d = g.sub(p, q);
                        let inv = g.exp(d);
                        let sc = g.soft_clip(inv, threshold);
                        let half = g.scale(sc, 0.5);
                        let w = g.add_const(half, 0.5);
                        let c = g.log_mix_half(p, q);
                        let log_a = g.sub(c, p);
                        bregman_posterior(g, w, log_a)
                    }
                })
                .collect();
            g.sum(&terms)
        }
        EstimatorForm::Sequence => {
            let (ps, qs): (Vec<Var>, Vec<Var>) = pairs.iter().copied().unzip();
            let comp: Vec<Var> = pairs.iter().map(|&(p, q)| g.log_mix_half(p, q)).collect();
            let c = g.sum(&comp);
            let p = g.sum(&ps);
            let log_a = g.sub(c, p);
            match mode {
                LayoutMode::Prior => {
                    let a = g.exp(log_a);
                    let w = g.soft_clip(a, threshold);
                    bregman_prior(g, w)
                }
                LayoutMode::Posterior => {
                    let q = g.sum(&qs);
                    let d = g.sub(c, q);
                    let b_ratio = g.exp(d);
                    let w = g.soft_clip(b_ratio, threshold);
                    bregman_posterior(g, w, log_a)
                }
            }
        }
    }
}

/// `w ln w − (w − 1)`.
fn bregman_prior(g: &mut Graph, w: Var) -> Var {
    let lw = g.ln(w);
    let wlw = g.mul(w, lw);
    let wm1 = g.add_const(w, -1.0);
    g.sub(wlw, wm1)
}

/// `w · log_a + (w − 1)`.
fn bregman_posterior(g: &mut Graph, w: Var, log_a: Var) -> Var {
    let prod = g.mul(w, log_a);
    let wm1 = g.add_const(w, -1.0);
    g.add(prod, wm1)
}

/// Mean KL estimate over rollouts that were not truncated.
pub fn kl_loss(g: &mut Graph, bound: &[BoundRollout], rollouts: &[ScoredRollout], threshold: f64, form: EstimatorForm) -> Var {
    let terms: Vec<Var> = bound
        .iter()
        .zip(rollouts)
        .filter(|(_, r)| !r.truncated)
        .map(|(b, r)| kl_node(g, b, r.behavior_mode, threshold, form))
        .collect();
    g.mean(&terms)
}

#[derive(Debug, Clone, Copy)]
pub struct LossWeights {
    pub clip_epsilon: Option<f64>,
    pub lambda_nll: f64,
    pub lambda_kl: f64,
    pub softclip_threshold: f64,
    pub surrogate_form: EstimatorForm,
    pub kl_form: EstimatorForm,
    pub aggregation: Aggregation,
}

#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub total: Var,
    pub surrogate: Var,
    pub nll: Var,
    pub kl: Var,
    pub clip_fraction: f64,
}

/// Surrogate plus weighted selective NLL plus weighted KL.
pub fn total_loss(g: &mut Graph, bound: &[BoundRollout], rollouts: &[ScoredRollout], w: &LossWeights) -> Result<LossParts> {
    let (surrogate, clip_fraction) = grpo_surrogate(g, bound, rollouts, w.clip_epsilon, w.surrogate_form, w.aggregation)?;
    let nll = selective_nll(g, bound, rollouts)?;
    let kl = kl_loss(g, bound, rollouts, w.softclip_threshold, w.kl_form);
    let wn = g.scale(nll, w.lambda_nll);
    let wk = g.scale(kl, w.lambda_kl);
    let partial = g.add(surrogate, wn);
    let total = g.add(partial, wk);
    Ok(LossParts {
        total,
        surrogate,
        nll,
        kl,
        clip_fraction,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coupled::{tabular_rows_for, CompositeView};
    use crate::estimators::{kl_estimate, EstimatorForm};
    use crate::gradcheck::finite_difference_check;
    use crate::policy::{ArchConfig, GruConfig, PolicyModel, TabularConfig};
    use crate::tasks::{ArithOp, TaskGenerator, TaskInstance, TaskSpec};
    use crate::vocab::Vocabulary;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(neural: bool) -> (PolicyModel, TaskInstance) {
        let vocab = Vocabulary::arithmetic(3, false).unwrap();
        let spec = TaskSpec { modulus: 3, ops: vec![ArithOp::Add], ..TaskSpec::default() };
        let gen = TaskGenerator::new(spec, &vocab, 2).unwrap();
        let inst = gen.from_chain(2, &[(ArithOp::Add, 2)]);
        let arch = if neural {
            ArchConfig::Neural(GruConfig { embed_dim: 3, hidden_dim: 4, readout_dim: 0 })
        } else {
            ArchConfig::Tabular(TabularConfig {
                rows: tabular_rows_for(std::slice::from_ref(&inst), &vocab, 2),
                init_scale: 1.5,
            })
        };
        (PolicyModel::init(vocab, 24, arch, 8).unwrap(), inst)
    }

    fn rollouts(model: &PolicyModel, inst: &TaskInstance) -> Vec<ScoredRollout> {
        let sp = model.vocab().specials();
        let traces: [(Vec<u32>, LayoutMode, bool); 4] = [
            (vec![1, sp.think_close], LayoutMode::Prior, false),
            (vec![0, 2], LayoutMode::Posterior, true),
            (vec![sp.think_close], LayoutMode::Posterior, false),
            (vec![2, 1], LayoutMode::Prior, true),
        ];
        let advs = [0.7, -0.2, 0.4, -0.9];
        traces
            .into_iter()
            .zip(advs)
            .map(|((z, m, t), a)| {
                let mut r = ScoredRollout::score(model, inst, z, m, t).unwrap();
                r.advantage = Some(a);
                r
            })
            .collect()
    }

    fn weights(form: EstimatorForm) -> LossWeights {
        LossWeights {
            clip_epsilon: Some(0.3),
            lambda_nll: 0.8,
            lambda_kl: 1.3,
            softclip_threshold: 10.0,
            surrogate_form: form,
            kl_form: form,
            aggregation: Aggregation::TokenMean,
        }
    }

    #[test]
    fn clipped_term_examples() {
        let (model, _) = setup(false);
        let mut g = Graph::new(&model);
        let lr = g.constant(1.5f64.ln());
        let (t, hit) = clipped_term(&mut g, lr, 1.0, Some(0.3));
        assert!((g.value(t) - 1.3).abs() < 1e-12 && hit);
        let lr = g.constant(2.0f64.ln());
        let (t, _) = clipped_term(&mut g, lr, -1.0, Some(0.3));
        assert!((g.value(t) + 2.0).abs() < 1e-12);
    }

    #[test]
    fn total_loss_passes_finite_differences() {
        for neural in [false, true] {
            let (model, inst) = setup(neural);
            let rs = rollouts(&model, &inst);
            for form in [EstimatorForm::Token, EstimatorForm::Sequence] {
                let loss = |g: &mut Graph| -> Result<Var> {
                    let b = bind_all(g, &rs, false)?;
                    Ok(total_loss(g, &b, &rs, &weights(form))?.total)
                };
                let mut rng = ChaCha8Rng::seed_from_u64(3);
                let rep = finite_difference_check(&model, loss, 400, 1e-4, &mut rng).unwrap();
                assert!(rep.pass, "neural={neural} {form:?}: {}", rep.max_rel_err);
            }
        }
    }

    #[test]
    fn zero_lambdas_leave_surrogate() {
        let (model, inst) = setup(false);
        let rs = rollouts(&model, &inst);
        let mut g = Graph::new(&model);
        let b = bind_all(&mut g, &rs, true).unwrap();
        let w = LossWeights { lambda_kl: 0.0, lambda_nll: 0.0, ..weights(EstimatorForm::Token) };
        let parts = total_loss(&mut g, &b, &rs, &w).unwrap();
        assert_eq!(g.value(parts.total), g.value(parts.surrogate));
    }

    #[test]
    fn kl_nodes_match_scalar_estimators() {
        let (model, inst) = setup(false);
        let rs = rollouts(&model, &inst);
        let mut g = Graph::new(&model);
        let b = bind_all(&mut g, &rs, true).unwrap();
        for form in [EstimatorForm::Token, EstimatorForm::Sequence] {
            for (br, r) in b.iter().zip(&rs) {
                let node = kl_node(&mut g, br, r.behavior_mode, 10.0, form);
                let scalar = kl_estimate(&r.view, r.behavior_mode, false, 10.0, form).total;
                assert!((g.value(node) - scalar).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn truncated_rollouts_drop_out_of_kl() {
        let (model, inst) = setup(false);
        let mut rs = rollouts(&model, &inst);
        rs.iter_mut().for_each(|r| r.truncated = true);
        let mut g = Graph::new(&model);
        let b = bind_all(&mut g, &rs, true).unwrap();
        let kl = kl_loss(&mut g, &b, &rs, 10.0, EstimatorForm::Token);
        assert_eq!(g.value(kl), 0.0);
    }

    #[test]
    fn selection_rules() {
        let (model, inst) = setup(false);
        let mut rs = rollouts(&model, &inst);
        let mut g = Graph::new(&model);
        let b = bind_all(&mut g, &rs, true).unwrap();
        rs.iter_mut().for_each(|r| r.advantage = Some(-1.0));
        let nll = selective_nll(&mut g, &b, &rs).unwrap();
        assert_eq!(g.value(nll), 0.0);
        // Only the first rollout is valid and positive.
        rs[0].advantage = Some(1.0);
        rs[1].advantage = Some(1.0);
        assert!(!rs[1].parsed.valid_format);
        let nll = selective_nll(&mut g, &b, &rs).unwrap();
        let expected = -rs[0].answer_logp.iter().sum::<f64>() / rs[0].answer_logp.len() as f64;
        assert!((g.value(nll) - expected).abs() < 1e-12);
        rs[0].advantage = None;
        assert!(selective_nll(&mut g, &b, &rs).is_err());
    }

    #[test]
    fn off_policy_gradient_carries_the_importance_factor() {
        // Prior-mode rollout: unclipped token surrogate gradient equals
        // (p′/p) · Â · ∇ln p′ at the sampled token.
        let (model, inst) = setup(false);
        let mut r = ScoredRollout::score(&model, &inst, vec![1, 0], LayoutMode::Prior, true).unwrap();
        r.advantage = Some(0.9);
        let view: &CompositeView = &r.view;
        let w0 = (view.composite_logp[0] - view.prior_logp[0]).exp();
        let w1 = (view.composite_logp[1] - view.prior_logp[1]).exp();
        let mut g = Graph::new(&model);
        let b = bind(&mut g, &r, true).unwrap();
        let (loss, _) = grpo_surrogate(&mut g, std::slice::from_ref(&b), std::slice::from_ref(&r), None, EstimatorForm::Token, Aggregation::RolloutSum).unwrap();
        let grad = g.backward(loss).unwrap();
        let mut h = Graph::new(&model);
        let bh = bind(&mut h, &r, true).unwrap();
        let c0 = h.log_mix_half(bh.prior[0], bh.posterior[0]);
        let c1 = h.log_mix_half(bh.prior[1], bh.posterior[1]);
        let a = h.scale(c0, -0.9 * w0);
        let bb = h.scale(c1, -0.9 * w1);
        let s = h.add(a, bb);
        let reference = h.backward(s).unwrap();
        for (x, y) in grad.values().iter().zip(reference.values()) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
