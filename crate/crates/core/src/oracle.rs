//! Exact answers by enumeration on tiny tabular instances, and Monte-Carlo
//! harnesses that compare sampled estimators against them.
//!
//! An [`OracleCase`] restricts the tabular rows at trace positions to content
//! tokens (plus the think delimiter in terminated spaces), so the sampler can
//! only produce traces from the enumerated space and every sequence-level
//! distribution over that space sums to one.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

use crate::autodiff::{Graph, GradientVector, Var};
use crate::baselines::{self, BaselineSpec, Method};
use crate::coupled::{sample_hybrid, sample_trace, CompositeView, HybridConfig, RolloutLayout, ScoredRollout};
use crate::error::{Error, Result};
use crate::estimators::{assign_rewards_and_advantages, compute_reward, kl_estimate, BaselineScope, EstimatorForm, RewardVariant};
use crate::gradcheck::finite_difference_check;
use crate::policy::{ArchConfig, BackendKind, GruConfig, PolicyModel, SamplingParams, TabularConfig, TabularRow};
use crate::tasks::{LayoutMode, TaskInstance};
use crate::training::loss::{bind, bind_all, grpo_surrogate, kl_loss, selective_nll, Aggregation};
use crate::vocab::{Token, Vocabulary};

/// Upper bound on the number of enumerated traces.
pub const ENUMERATION_GUARD: usize = 1_000_000;

pub const MIN_MC_SAMPLES: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Termination {
    /// Exactly `max_len` content tokens.
    Fixed,
    /// Up to `max_len` content tokens followed by the given terminator.
    Terminated(Token),
}

/// All traces over `content` up to `max_len` tokens.
pub fn enumerate_traces(content: &[Token], max_len: usize, termination: Termination) -> Result<Vec<Vec<Token>>> {
    let size = (content.len() as f64).powi(max_len as i32);
    if size > ENUMERATION_GUARD as f64 {
        return Err(Error::InvalidArgument(format!(
            "{}^{} traces exceed the enumeration guard of {ENUMERATION_GUARD}",
            content.len(),
            max_len
        )));
    }
    let mut layer: Vec<Vec<Token>> = vec![Vec::new()];
    let mut out = Vec::new();
    for depth in 0..=max_len {
        if let Termination::Terminated(end) = termination {
            out.extend(layer.iter().map(|z| {
                let mut t = z.clone();
                t.push(end);
                t
            }));
        }
        if depth == max_len {
            break;
        }
        layer = layer
            .iter()
            .flat_map(|z| {
                content.iter().map(move |&c| {
                    let mut t = z.clone();
                    t.push(c);
                    t
                })
            })
            .collect();
    }
    if termination == Termination::Fixed {
        out = layer;
    }
    Ok(out)
}

/// A distribution over an explicit list of traces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnumeratedSpace {
    pub traces: Vec<Vec<Token>>,
    pub probabilities: Vec<f64>,
}

impl EnumeratedSpace {
    pub fn new(traces: Vec<Vec<Token>>, probabilities: Vec<f64>) -> Result<Self> {
        if traces.len() != probabilities.len() {
            return Err(Error::LengthMismatch(traces.len(), probabilities.len()));
        }
        let total: f64 = probabilities.iter().sum();
        if (total - 1.0).abs() > 1e-10 {
            return Err(Error::InvalidArgument(format!("probabilities sum to {total}")));
        }
        let mut seen = std::collections::HashSet::new();
        if !traces.iter().all(|z| seen.insert(z)) {
            return Err(Error::InvalidArgument("duplicate trace in space".into()));
        }
        Ok(Self { traces, probabilities })
    }
}

/// Distributions over a case's trace space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Dist {
    Prior,
    Posterior,
    Composite,
    /// `p(y|z,x) p(z|x) / p(y|x)`.
    TruePosterior,
    /// Whole-trace mixture with prior weight `alpha`.
    Hybrid(f64),
}

/// Exact per-trace quantities.
#[derive(Debug, Clone)]
pub struct TraceStats {
    pub trace: Vec<Token>,
    pub view: CompositeView,
    pub answer_logp: Vec<f64>,
    /// `ln p(z|x)`, `ln q(z|x,y)`, `ln p′(z|x,y)`.
    pub prior: f64,
    pub posterior: f64,
    pub composite: f64,
}

impl TraceStats {
    pub fn answer_ll(&self) -> f64 {
        self.answer_logp.iter().sum()
    }

    pub fn log_prob(&self, mode: LayoutMode) -> f64 {
        match mode {
            LayoutMode::Prior => self.prior,
            LayoutMode::Posterior => self.posterior,
        }
    }
}

fn require_tabular(model: &PolicyModel) -> Result<()> {
    match model.backend() {
        BackendKind::Tabular => Ok(()),
        BackendKind::Neural => Err(Error::Unsupported("oracles need the tabular backend".into())),
    }
}

/// Scores every trace of a space exactly.
#[derive(Debug, Clone)]
pub struct Enumeration {
    pub stats: Vec<TraceStats>,
    index: HashMap<Vec<Token>, usize>,
}

impl Enumeration {
    pub fn new(model: &PolicyModel, instance: &TaskInstance, traces: &[Vec<Token>]) -> Result<Self> {
        require_tabular(model)?;
        if traces.len() > ENUMERATION_GUARD {
            return Err(Error::InvalidArgument("trace space exceeds the enumeration guard".into()));
        }
        let mut stats = Vec::with_capacity(traces.len());
        let mut index = HashMap::new();
        for z in traces {
            let r = ScoredRollout::score(model, instance, z.clone(), LayoutMode::Prior, false)?;
            let (prior, posterior, composite) = r.view.totals();
            if index.insert(z.clone(), stats.len()).is_some() {
                return Err(Error::InvalidArgument("duplicate trace in space".into()));
            }
            stats.push(TraceStats { trace: z.clone(), view: r.view, answer_logp: r.answer_logp, prior, posterior, composite });
        }
        Ok(Self { stats, index })
    }

    pub fn get(&self, trace: &[Token]) -> Result<&TraceStats> {
        self.index
            .get(trace)
            .map(|&i| &self.stats[i])
            .ok_or_else(|| Error::InvalidArgument(format!("trace {trace:?} is outside the enumerated space")))
    }

    pub fn traces(&self) -> Vec<Vec<Token>> {
        self.stats.iter().map(|s| s.trace.clone()).collect()
    }

    /// `ln p(y|x)`.
    pub fn log_marginal(&self) -> f64 {
        log_sum_exp(self.stats.iter().map(|s| s.prior + s.answer_ll()))
    }

    pub fn probabilities(&self, dist: Dist) -> Vec<f64> {
        match dist {
            Dist::Prior => self.stats.iter().map(|s| s.prior.exp()).collect(),
            Dist::Posterior => self.stats.iter().map(|s| s.posterior.exp()).collect(),
            Dist::Composite => self.stats.iter().map(|s| s.composite.exp()).collect(),
            Dist::TruePosterior => {
                let lm = self.log_marginal();
                self.stats.iter().map(|s| (s.prior + s.answer_ll() - lm).exp()).collect()
            }
            Dist::Hybrid(a) => self
                .stats
                .iter()
                .map(|s| a * s.prior.exp() + (1.0 - a) * s.posterior.exp())
                .collect(),
        }
    }

    pub fn space(&self, dist: Dist) -> Result<EnumeratedSpace> {
        EnumeratedSpace::new(self.traces(), self.probabilities(dist))
    }

    pub fn kl(&self, from: Dist, to: Dist) -> Result<f64> {
        kl_between(&self.probabilities(from), &self.probabilities(to))
    }

    /// `E_q[ln p(y|z,x) + ln p(z|x) − ln q(z)]`.
    pub fn elbo(&self, q: Dist) -> f64 {
        self.probabilities(q)
            .iter()
            .zip(&self.stats)
            .filter(|(&w, _)| w > 0.0)
            .map(|(&w, s)| w * (s.answer_ll() + s.prior - w.ln()))
            .sum()
    }

    /// Exact expectation of a KL estimator under its own sampling mode.
    pub fn kl_estimator_expectation(&self, mode: LayoutMode, form: EstimatorForm) -> f64 {
        self.stats
            .iter()
            .map(|s| s.log_prob(mode).exp() * kl_estimate(&s.view, mode, false, f64::INFINITY, form).total)
            .sum()
    }

    /// `E_hybrid[p′/p_hybrid − 1]`.
    pub fn control_variate_mean(&self, alpha: f64) -> f64 {
        let hybrid = self.probabilities(Dist::Hybrid(alpha));
        self.stats
            .iter()
            .zip(hybrid)
            .map(|(s, h)| h * (s.composite.exp() / h - 1.0))
            .sum()
    }
}

fn log_sum_exp(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn kl_between(from: &[f64], to: &[f64]) -> Result<f64> {
    let mut kl = 0.0;
    for (&f, &t) in from.iter().zip(to) {
        if f == 0.0 {
            continue;
        }
        if t <= 0.0 {
            return Err(Error::InvalidArgument("KL support mismatch: target assigns zero probability".into()));
        }
        kl += f * (f / t).ln();
    }
    Ok(kl)
}

/// `p(y|x)` summed over `traces`.
pub fn exact_marginal(model: &PolicyModel, instance: &TaskInstance, traces: &[Vec<Token>]) -> Result<f64> {
    Ok(Enumeration::new(model, instance, traces)?.log_marginal().exp())
}

pub fn exact_kl(model: &PolicyModel, instance: &TaskInstance, traces: &[Vec<Token>], from: Dist, to: Dist) -> Result<f64> {
    Enumeration::new(model, instance, traces)?.kl(from, to)
}

/// `Σ_z p′(z) R(z) ∇ln p′(z)` as an ascent direction.
pub fn exact_reconstruction_gradient(
    model: &PolicyModel,
    instance: &TaskInstance,
    traces: &[Vec<Token>],
    variant: RewardVariant,
) -> Result<GradientVector> {
    let en = Enumeration::new(model, instance, traces)?;
    let mut g = Graph::new(model);
    let mut terms = Vec::with_capacity(traces.len());
    for s in &en.stats {
        let r = ScoredRollout::score(model, instance, s.trace.clone(), LayoutMode::Prior, false)?;
        let b = bind(&mut g, &r, false)?;
        let comp: Vec<Var> = b.trace_prior().iter().zip(&b.posterior).map(|(&p, &q)| g.log_mix_half(p, q)).collect();
        let c = g.sum(&comp);
        let reward = compute_reward(&r, variant)?;
        terms.push(g.scale(c, s.composite.exp() * reward));
    }
    let obj = g.sum(&terms);
    g.backward(obj)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub exact_value: f64,
    pub mc_mean: f64,
    pub mc_stderr: f64,
    pub z_score: f64,
    pub n_samples: usize,
    pub pass: bool,
}

impl ValidationReport {
    pub fn from_moments(exact: f64, mean: f64, stderr: f64, n: usize) -> Self {
        let diff = mean - exact;
        let z_score = if stderr > 0.0 {
            diff / stderr
        } else if diff.abs() <= 1e-12 * exact.abs().max(1.0) {
            0.0
        } else {
            diff.signum() * f64::INFINITY
        };
        Self { exact_value: exact, mc_mean: mean, mc_stderr: stderr, z_score, n_samples: n, pass: z_score.abs() <= 3.0 }
    }
}

/// Running mean and variance per coordinate.
#[derive(Debug, Clone)]
struct Welford {
    n: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Welford {
    fn new(dim: usize) -> Self {
        Self { n: 0, mean: vec![0.0; dim], m2: vec![0.0; dim] }
    }

    fn push(&mut self, x: &[f64]) {
        self.n += 1;
        for ((m, s), &v) in self.mean.iter_mut().zip(&mut self.m2).zip(x) {
            let d = v - *m;
            *m += d / self.n as f64;
            *s += d * (v - *m);
        }
    }

    fn stderr(&self, i: usize) -> f64 {
        (self.m2[i] / (self.n - 1) as f64 / self.n as f64).sqrt()
    }
}

/// Draws `n` samples and compares the estimator's mean with `exact_value`.
pub fn mc_validate<S>(
    mut sampler: impl FnMut(&mut ChaCha8Rng) -> Result<S>,
    estimator: impl Fn(&S) -> f64,
    exact_value: f64,
    n: usize,
    seed: u64,
) -> Result<ValidationReport> {
    let mut reports = mc_validate_vector(|rng| Ok(vec![estimator(&sampler(rng)?)]), &[exact_value], n, seed)?;
    Ok(reports.remove(0))
}

/// Entrywise version of [`mc_validate`] for vector-valued estimators.
pub fn mc_validate_vector(
    mut sample: impl FnMut(&mut ChaCha8Rng) -> Result<Vec<f64>>,
    exact: &[f64],
    n: usize,
    seed: u64,
) -> Result<Vec<ValidationReport>> {
    if n < MIN_MC_SAMPLES {
        return Err(Error::InvalidArgument(format!("{n} samples; at least {MIN_MC_SAMPLES} required")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = Welford::new(exact.len());
    for _ in 0..n {
        let x = sample(&mut rng)?;
        if x.len() != exact.len() {
            return Err(Error::LengthMismatch(x.len(), exact.len()));
        }
        acc.push(&x);
    }
    Ok((0..exact.len())
        .map(|i| ValidationReport::from_moments(exact[i], acc.mean[i], acc.stderr(i), n))
        .collect())
}

/// Worst entry of an entrywise comparison.
pub fn worst(reports: &[ValidationReport]) -> ValidationReport {
    *reports
        .iter()
        .max_by(|a, b| a.z_score.abs().total_cmp(&b.z_score.abs()))
        .expect("non-empty report list")
}

/// A random tabular model with restricted trace rows, one instance, and the
/// enumerated trace space.
#[derive(Debug, Clone)]
pub struct OracleCase {
    pub model: PolicyModel,
    pub instance: TaskInstance,
    pub traces: Vec<Vec<Token>>,
    pub trace_len: usize,
    pub termination: Termination,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CaseShape {
    pub content: usize,
    pub trace_len: usize,
    pub answer_len: usize,
    pub terminated: bool,
    pub init_scale: f64,
}

impl Default for CaseShape {
    fn default() -> Self {
        Self { content: 3, trace_len: 2, answer_len: 2, terminated: false, init_scale: 1.0 }
    }
}

impl OracleCase {
    pub fn random(shape: CaseShape, seed: u64) -> Result<Self> {
        let vocab = Vocabulary::symbolic(shape.content)?;
        let content = vocab.content_tokens();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pick = |n: usize| -> Vec<Token> { (0..n).map(|_| content[rng.gen_range(0..content.len())]).collect() };
        let question_tokens = pick(2);
        let answer_tokens = pick(shape.answer_len);
        let instance = TaskInstance {
            task_id: format!("oracle-{seed}"),
            question_tokens,
            answer_tokens,
            difficulty: 1,
            reference_trace: Vec::new(),
        };
        let termination = if shape.terminated {
            Termination::Terminated(vocab.specials().think_close)
        } else {
            Termination::Fixed
        };
        let traces = enumerate_traces(&content, shape.trace_len, termination)?;
        let rows = oracle_rows(&instance, &vocab, &traces, termination);
        let ctx = 2 + shape.answer_len * 2 + shape.trace_len + 8;
        let arch = ArchConfig::Tabular(TabularConfig { rows, init_scale: shape.init_scale });
        let model = PolicyModel::init(vocab, ctx, arch, seed)?;
        Ok(Self { model, instance, traces, trace_len: shape.trace_len, termination })
    }

    /// The same case with fresh parameters.
    pub fn reinit(&self, seed: u64) -> Result<PolicyModel> {
        PolicyModel::init(self.model.vocab().clone(), self.model.context_length(), self.model.arch().clone(), seed)
    }

    pub fn sampling(&self) -> SamplingParams {
        let extra = matches!(self.termination, Termination::Terminated(_)) as usize;
        SamplingParams::default().with_budget(self.trace_len + extra)
    }

    pub fn enumerate(&self) -> Result<Enumeration> {
        Enumeration::new(&self.model, &self.instance, &self.traces)
    }

    /// Samples a trace in `mode` with the real sampler.
    pub fn sample(&self, mode: LayoutMode, rng: &mut impl Rng) -> Result<Vec<Token>> {
        Ok(sample_trace(&self.model, &self.instance, mode, &self.sampling(), rng)?.0)
    }
}

/// Tabular rows for an oracle case. Trace positions draw from content tokens
/// only (plus the terminator, which is forced at the length limit).
fn oracle_rows(instance: &TaskInstance, vocab: &Vocabulary, traces: &[Vec<Token>], termination: Termination) -> Vec<TabularRow> {
    let content = vocab.content_tokens();
    let max_len = traces.iter().map(|z| z.len()).max().unwrap_or(0);
    let support = |i: usize| -> Vec<Token> {
        match termination {
            Termination::Fixed => content.clone(),
            Termination::Terminated(end) if i + 1 == max_len => vec![end],
            Termination::Terminated(end) => content.iter().copied().chain([end]).collect(),
        }
    };
    let mut seen: HashMap<Vec<Token>, ()> = HashMap::new();
    let mut rows = Vec::new();
    for z in traces {
        let l = RolloutLayout::new(instance, z, vocab);
        for i in 0..l.trace_len {
            for ctx in [&l.prior_tokens[..l.prior_from + i], &l.posterior_tokens[..l.posterior_from + i]] {
                if seen.insert(ctx.to_vec(), ()).is_none() {
                    rows.push(TabularRow { context: ctx.to_vec(), support: Some(support(i)) });
                }
            }
        }
        for ctx in l.contexts() {
            if seen.insert(ctx.to_vec(), ()).is_none() {
                rows.push(TabularRow::full(ctx.to_vec()));
            }
        }
    }
    rows
}

/// MC check of a KL estimator against `KL(p′ ‖ p)` with mode-matched
/// samples. `bias` is added to every sample as a fault-injection hook.
pub fn validate_kl_estimator(
    case: &OracleCase,
    mode: LayoutMode,
    form: EstimatorForm,
    n: usize,
    seed: u64,
    bias: f64,
) -> Result<ValidationReport> {
    let en = case.enumerate()?;
    let exact = en.kl(Dist::Composite, Dist::Prior)?;
    mc_validate(
        |rng| case.sample(mode, rng),
        |z| kl_estimate(&en.get(z).expect("sampler stays in the space").view, mode, false, f64::INFINITY, form).total + bias,
        exact,
        n,
        seed,
    )
}

/// Per-sample gradient estimates keyed by sampling mode and trace.
type GradCache = HashMap<(LayoutMode, Vec<Token>), Vec<f64>>;

/// MC check of the unclipped surrogate gradient under hybrid sampling
/// against the exact reconstruction gradient, entrywise. The reward is
/// `LogProbSum`, used as the advantage directly.
pub fn validate_surrogate_gradient(
    case: &OracleCase,
    alpha: f64,
    form: EstimatorForm,
    n: usize,
    seed: u64,
) -> Result<Vec<ValidationReport>> {
    let variant = RewardVariant::LogProbSum;
    let exact = exact_reconstruction_gradient(&case.model, &case.instance, &case.traces, variant)?;
    let hybrid = HybridConfig { alpha, group_size: 1 };
    let sampling = case.sampling();
    let mut cache = GradCache::new();
    mc_validate_vector(
        |rng| {
            let mut r = sample_hybrid(&case.model, &case.instance, &hybrid, &sampling, rng)?.remove(0);
            let key = (r.behavior_mode, r.trace.clone());
            if let Some(v) = cache.get(&key) {
                return Ok(v.clone());
            }
            let reward = compute_reward(&r, variant)?;
            r.reward = Some(reward);
            r.advantage = Some(reward);
            let rs = [r];
            let mut g = Graph::new(&case.model);
            let b = bind_all(&mut g, &rs, true)?;
            let (loss, _) = grpo_surrogate(&mut g, &b, &rs, None, form, Aggregation::RolloutSum)?;
            let v: Vec<f64> = g.backward(loss)?.values().iter().map(|x| -x).collect();
            cache.insert(key, v.clone());
            Ok(v)
        },
        exact.values(),
        n,
        seed,
    )
}

/// The printed gradient of a baseline method as an ascent direction,
/// evaluated exactly over the case's trace space. RAVR uses the exact
/// prior-mode baseline.
pub fn baseline_closed_form(case: &OracleCase, spec: &BaselineSpec) -> Result<GradientVector> {
    spec.validate()?;
    let en = case.enumerate()?;
    let b0 = ravr_exact_baseline(&en);
    let ref_en = match spec.reference {
        Some(r) => Some(Enumeration::new(r, &case.instance, &case.traces)?),
        None => None,
    };
    let mut g = Graph::new(&case.model);
    let mut terms = Vec::new();
    for (i, s) in en.stats.iter().enumerate() {
        let ll = s.answer_ll();
        let (weight, a, b) = match spec.method {
            Method::Jlb => (s.prior.exp(), ll, 1.0),
            Method::Latro => {
                let pref = ref_en.as_ref().expect("validated").stats[i].prior;
                (s.prior.exp(), ll - spec.beta * (s.prior - pref), 1.0)
            }
            Method::Verifree => (s.prior.exp(), ll.exp(), ll.exp()),
            Method::Rlpr => {
                let m = s.answer_logp.iter().map(|l| l.exp()).sum::<f64>() / s.answer_logp.len() as f64;
                (s.prior.exp(), m, m)
            }
            Method::Ravr => {
                let reward = (ll - b0).max(0.0);
                let log_rho = s.prior - s.posterior;
                let k3 = log_rho.exp() - 1.0 - log_rho;
                (s.posterior.exp(), reward, if reward > 0.0 { k3 } else { 0.0 })
            }
            Method::Covrl => unreachable!("validated"),
        };
        let r = ScoredRollout::score(&case.model, &case.instance, s.trace.clone(), LayoutMode::Prior, false)?;
        let bound = bind(&mut g, &r, false)?;
        let lz = g.sum(bound.trace_prior());
        let ly = g.sum(bound.answer());
        let tz = g.scale(lz, weight * a);
        let ty = g.scale(ly, weight * b);
        terms.push(tz);
        terms.push(ty);
    }
    let obj = g.sum(&terms);
    g.backward(obj)
}

fn ravr_exact_baseline(en: &Enumeration) -> f64 {
    en.stats.iter().map(|s| s.prior.exp() * s.answer_ll()).sum()
}

/// MC check of a baseline's single-rollout gradient estimate against
/// [`baseline_closed_form`], entrywise. Rewards are used raw.
pub fn validate_baseline_gradient(case: &OracleCase, spec: &BaselineSpec, n: usize, seed: u64) -> Result<Vec<ValidationReport>> {
    let exact = baseline_closed_form(case, spec)?;
    let b0 = ravr_exact_baseline(&case.enumerate()?);
    let mode = spec.method.policy_mode().expect("validated baseline");
    let sampling = case.sampling();
    let mut cache = GradCache::new();
    mc_validate_vector(
        |rng| {
            let group = baselines::sample_group(spec.method, &case.model, &case.instance, 1, &sampling, rng)?;
            let mut r = group.into_iter().find(|r| r.behavior_mode == mode).expect("policy-mode rollout");
            let key = (mode, r.trace.clone());
            if let Some(v) = cache.get(&key) {
                return Ok(v.clone());
            }
            let reward = baselines::method_reward(spec, &r, b0)?;
            r.reward = Some(reward);
            r.advantage = Some(reward);
            let rs = [r];
            let mut g = Graph::new(&case.model);
            let b = bind_all(&mut g, &rs, true)?;
            let parts = baselines::baseline_loss(&mut g, spec, &b, &rs, None, Aggregation::RolloutSum)?;
            let v: Vec<f64> = g.backward(parts.total)?.values().iter().map(|x| -x).collect();
            cache.insert(key, v.clone());
            Ok(v)
        },
        exact.values(),
        n,
        seed,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExactCheck {
    pub value: f64,
    pub reference: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl ExactCheck {
    pub fn new(value: f64, reference: f64, tolerance: f64) -> Self {
        Self { value, reference, tolerance, pass: (value - reference).abs() <= tolerance }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Outcome {
    MonteCarlo(ValidationReport),
    Exact(ExactCheck),
}

impl Outcome {
    pub fn pass(&self) -> bool {
        match self {
            Outcome::MonteCarlo(r) => r.pass,
            Outcome::Exact(c) => c.pass,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteEntry {
    pub name: String,
    #[serde(flatten)]
    pub outcome: Outcome,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SuiteOptions {
    pub seed: u64,
    pub samples: usize,
    /// Added to every KL estimator sample.
    pub inject_bias: f64,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self { seed: 0, samples: 20_000, inject_bias: 0.0 }
    }
}

pub const SUITE_NAMES: [&str; 17] = [
    "normalization/fixed",
    "normalization/terminated",
    "control_variate/alpha=0.1",
    "control_variate/alpha=0.5",
    "control_variate/alpha=0.9",
    "kl_unbiased/prior/token/L=1",
    "kl_unbiased/posterior/token/L=1",
    "kl_unbiased/prior/sequence/L=2",
    "kl_unbiased/posterior/sequence/L=2",
    "kl_expectations_agree/sequence",
    "surrogate_gradient/sequence/projection",
    "gradcheck/nll",
    "gradcheck/surrogate",
    "gradcheck/kl",
    "elbo_sandwich/prior",
    "elbo_sandwich/posterior",
    "elbo_sandwich/composite",
];

/// The documented validation suite, in [`SUITE_NAMES`] order.
pub fn run_validation_suite(opts: &SuiteOptions) -> Result<Vec<SuiteEntry>> {
    let s = opts.seed;
    let n = opts.samples;
    let l2 = CaseShape::default();
    let l1 = CaseShape { trace_len: 1, ..l2 };
    let term = CaseShape { terminated: true, ..l2 };
    let mut out: Vec<Outcome> = Vec::new();

    for shape in [l2, term] {
        let mut worst_dev: f64 = 0.0;
        for i in 0..4 {
            let en = OracleCase::random(shape, s.wrapping_add(i))?.enumerate()?;
            let total: f64 = en.probabilities(Dist::Composite).iter().sum();
            worst_dev = worst_dev.max((total - 1.0).abs());
        }
        out.push(Outcome::Exact(ExactCheck::new(1.0 + worst_dev, 1.0, 1e-8)));
    }

    let cv = OracleCase::random(term, s.wrapping_add(10))?.enumerate()?;
    for alpha in [0.1, 0.5, 0.9] {
        out.push(Outcome::Exact(ExactCheck::new(cv.control_variate_mean(alpha), 0.0, 1e-10)));
    }

    let c1 = OracleCase::random(l1, s.wrapping_add(20))?;
    let c2 = OracleCase::random(l2, s.wrapping_add(21))?;
    for (case, form) in [(&c1, EstimatorForm::Token), (&c2, EstimatorForm::Sequence)] {
        for (k, mode) in [LayoutMode::Prior, LayoutMode::Posterior].into_iter().enumerate() {
            let seed = s.wrapping_add(100 + k as u64);
            out.push(Outcome::MonteCarlo(validate_kl_estimator(case, mode, form, n, seed, opts.inject_bias)?));
        }
    }

    let en2 = c2.enumerate()?;
    let exact_kl = en2.kl(Dist::Composite, Dist::Prior)?;
    let prior_e = en2.kl_estimator_expectation(LayoutMode::Prior, EstimatorForm::Sequence);
    let post_e = en2.kl_estimator_expectation(LayoutMode::Posterior, EstimatorForm::Sequence);
    let spread = (prior_e - exact_kl).abs().max((post_e - exact_kl).abs());
    out.push(Outcome::Exact(ExactCheck::new(exact_kl + spread, exact_kl, 1e-8)));

    let reports = validate_surrogate_gradient(&c2, 0.5, EstimatorForm::Sequence, n, s.wrapping_add(200))?;
    out.push(Outcome::MonteCarlo(project(&reports, s.wrapping_add(201))));

    for (i, part) in ["nll", "surrogate", "kl"].into_iter().enumerate() {
        out.push(Outcome::Exact(gradcheck_part(part, s.wrapping_add(300 + i as u64))?));
    }

    let elbo_case = OracleCase::random(term, s.wrapping_add(400))?.enumerate()?;
    let lm = elbo_case.log_marginal();
    for q in [Dist::Prior, Dist::Posterior, Dist::Composite] {
        let gap = lm - elbo_case.elbo(q);
        out.push(Outcome::Exact(ExactCheck::new(gap, elbo_case.kl(q, Dist::TruePosterior)?, 1e-8)));
    }

    Ok(SUITE_NAMES
        .iter()
        .zip(out)
        .map(|(name, outcome)| SuiteEntry { name: name.to_string(), outcome })
        .collect())
}

/// Collapses an entrywise comparison to its projection on a random unit
/// direction. The per-entry moments are not independent, so the projected
/// standard error is recomputed conservatively from the entrywise ones.
fn project(reports: &[ValidationReport], seed: u64) -> ValidationReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u: Vec<f64> = (0..reports.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
    let norm = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let dot = |f: &dyn Fn(&ValidationReport) -> f64| reports.iter().zip(&u).map(|(r, w)| f(r) * w / norm).sum::<f64>();
    let exact = dot(&|r| r.exact_value);
    let mean = dot(&|r| r.mc_mean);
    // Triangle inequality bound on the projected standard deviation.
    let stderr = reports.iter().zip(&u).map(|(r, w)| r.mc_stderr * w.abs() / norm).sum::<f64>();
    ValidationReport::from_moments(exact, mean, stderr, reports[0].n_samples)
}

/// Finite-difference check of one loss part on a tabular and a neural model.
/// Reports the worse relative error of the two.
pub fn gradcheck_part(part: &str, seed: u64) -> Result<ExactCheck> {
    let case = OracleCase::random(CaseShape { terminated: true, init_scale: 1.5, ..CaseShape::default() }, seed)?;
    let neural = PolicyModel::init(
        case.model.vocab().clone(),
        case.model.context_length(),
        ArchConfig::Neural(GruConfig { embed_dim: 3, hidden_dim: 4, readout_dim: 3 }),
        seed,
    )?;
    let mut worst_err: f64 = 0.0;
    for model in [&case.model, &neural] {
        let modes = [LayoutMode::Prior, LayoutMode::Posterior];
        let mut rollouts: Vec<ScoredRollout> = case
            .traces
            .iter()
            .step_by(3)
            .take(4)
            .enumerate()
            .map(|(i, z)| ScoredRollout::score(model, &case.instance, z.clone(), modes[i % 2], false))
            .collect::<Result<_>>()?;
        let mut groups = vec![std::mem::take(&mut rollouts)];
        assign_rewards_and_advantages(&mut groups, RewardVariant::LogProbMean, BaselineScope::Group)?;
        let rollouts = groups.remove(0);
        let loss = |g: &mut Graph| -> Result<Var> {
            let b = bind_all(g, &rollouts, false)?;
            match part {
                "nll" => selective_nll(g, &b, &rollouts),
                "surrogate" => Ok(grpo_surrogate(g, &b, &rollouts, Some(0.3), EstimatorForm::Token, Aggregation::TokenMean)?.0),
                "kl" => Ok(kl_loss(g, &b, &rollouts, 10.0, EstimatorForm::Token)),
                other => Err(Error::InvalidArgument(format!("unknown loss part {other}"))),
            }
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rep = finite_difference_check(model, loss, 200, 1e-4, &mut rng)?;
        worst_err = worst_err.max(rep.max_rel_err);
    }
    Ok(ExactCheck::new(worst_err, 0.0, 1e-4))
}
