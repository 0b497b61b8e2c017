//! Prior/posterior views of a trace, the token-level composite `p′`, and the
//! hybrid sampler.
//!
//! A trace `z` is the canonical token run the model emits after THINK_OPEN,
//! including the closing THINK_CLOSE when it was produced. Token `t` of `z` is
//! scored at offset `t` after THINK_OPEN in both layouts, so the two columns of
//! a [`CompositeView`] line up even though the absolute positions differ.
//!
//! The answer is scored in the prior layout only: the prior context, then `z`,
//! then THINK_CLOSE when `z` lacks it, then ANSWER_OPEN, then `y` and
//! ANSWER_CLOSE. One prior forward pass covers both the trace and the answer.

use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::io::Write;

use crate::autodiff::log_mix_half;
use crate::error::{Error, Result};
use crate::policy::{Forward, PolicyModel, SamplingParams, TabularRow};
use crate::tasks::{canonicalize_tokens, render_context, validate_format, LayoutMode, ParsedResponse, TaskInstance};
use crate::vocab::{Token, Vocabulary, ANSWER_CLOSE_STR, ANSWER_OPEN_STR, THINK_CLOSE_STR, THINK_OPEN_STR};

/// Elementwise equal mixture of two next-token distributions.
pub fn composite_token_dist(prior: &[f64], posterior: &[f64]) -> Result<Vec<f64>> {
    if prior.len() != posterior.len() {
        return Err(Error::LengthMismatch(prior.len(), posterior.len()));
    }
    Ok(prior.iter().zip(posterior).map(|(p, q)| 0.5 * p + 0.5 * q).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositeView {
    pub prior_logp: Vec<f64>,
    pub posterior_logp: Vec<f64>,
    pub composite_logp: Vec<f64>,
    /// `q/p` per token.
    pub ratio_r: Vec<f64>,
}

impl CompositeView {
    pub fn from_columns(prior_logp: Vec<f64>, posterior_logp: Vec<f64>) -> Result<Self> {
        if prior_logp.len() != posterior_logp.len() {
            return Err(Error::LengthMismatch(prior_logp.len(), posterior_logp.len()));
        }
        let composite_logp = prior_logp
            .iter()
            .zip(&posterior_logp)
            .map(|(&a, &b)| log_mix_half(a, b))
            .collect();
        let ratio_r = prior_logp
            .iter()
            .zip(&posterior_logp)
            .map(|(&a, &b)| (b - a).exp())
            .collect();
        Ok(Self {
            prior_logp,
            posterior_logp,
            composite_logp,
            ratio_r,
        })
    }

    pub fn len(&self) -> usize {
        self.prior_logp.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prior_logp.is_empty()
    }

    pub fn column(&self, mode: LayoutMode) -> &[f64] {
        match mode {
            LayoutMode::Prior => &self.prior_logp,
            LayoutMode::Posterior => &self.posterior_logp,
        }
    }

    /// Sequence-level log-probabilities `(prior, posterior, composite)`.
    pub fn totals(&self) -> (f64, f64, f64) {
        (
            self.prior_logp.iter().sum(),
            self.posterior_logp.iter().sum(),
            self.composite_logp.iter().sum(),
        )
    }
}

/// Token sequences and offsets used to score one trace.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RolloutLayout {
    pub prior_tokens: Vec<Token>,
    pub prior_from: usize,
    pub posterior_tokens: Vec<Token>,
    pub posterior_from: usize,
    pub trace_len: usize,
    /// Offset of the first answer token within the prior pass.
    pub answer_offset: usize,
    /// Answer tokens plus ANSWER_CLOSE.
    pub answer_len: usize,
}

impl RolloutLayout {
    pub fn new(instance: &TaskInstance, trace: &[Token], vocab: &Vocabulary) -> Self {
        let sp = vocab.specials();
        let prior_root = render_context(instance, LayoutMode::Prior, vocab);
        let posterior_root = render_context(instance, LayoutMode::Posterior, vocab);
        let mut prior_tokens = prior_root.clone();
        prior_tokens.extend_from_slice(trace);
        if trace.last() != Some(&sp.think_close) {
            prior_tokens.push(sp.think_close);
        }
        prior_tokens.push(sp.answer_open);
        let answer_offset = prior_tokens.len() - prior_root.len();
        prior_tokens.extend_from_slice(&instance.answer_tokens);
        prior_tokens.push(sp.answer_close);
        let mut posterior_tokens = posterior_root.clone();
        posterior_tokens.extend_from_slice(trace);
        Self {
            prior_from: prior_root.len(),
            prior_tokens,
            posterior_from: posterior_root.len(),
            posterior_tokens,
            trace_len: trace.len(),
            answer_offset,
            answer_len: instance.answer_tokens.len() + 1,
        }
    }

    /// Every context whose next-token distribution scoring touches.
    pub fn contexts(&self) -> impl Iterator<Item = &[Token]> {
        let prior = (self.prior_from..self.prior_tokens.len()).map(|p| &self.prior_tokens[..p]);
        let post = (self.posterior_from..self.posterior_tokens.len()).map(|p| &self.posterior_tokens[..p]);
        prior.chain(post)
    }
}

/// Forward passes of one trace under both layouts.
#[derive(Debug, Clone)]
pub struct RolloutPasses {
    pub prior: Forward,
    pub posterior: Forward,
}

pub fn score_passes(model: &PolicyModel, layout: &RolloutLayout) -> Result<RolloutPasses> {
    Ok(RolloutPasses {
        prior: model.forward(&layout.prior_tokens, layout.prior_from)?,
        posterior: model.forward(&layout.posterior_tokens, layout.posterior_from)?,
    })
}

fn view_from_passes(layout: &RolloutLayout, passes: &RolloutPasses) -> Result<CompositeView> {
    CompositeView::from_columns(
        passes.prior.logp[..layout.trace_len].to_vec(),
        passes.posterior.logp.clone(),
    )
}

fn answer_from_passes(layout: &RolloutLayout, passes: &RolloutPasses) -> Vec<f64> {
    passes.prior.logp[layout.answer_offset..layout.answer_offset + layout.answer_len].to_vec()
}

/// Scores `trace` under both layouts.
pub fn composite_log_prob(model: &PolicyModel, instance: &TaskInstance, trace: &[Token]) -> Result<CompositeView> {
    let layout = RolloutLayout::new(instance, trace, model.vocab());
    view_from_passes(&layout, &score_passes(model, &layout)?)
}

/// Per-token `log p(y_t | x, z, y_<t)` over the answer and its closing delimiter.
pub fn answer_log_probs(model: &PolicyModel, instance: &TaskInstance, trace: &[Token]) -> Result<Vec<f64>> {
    let layout = RolloutLayout::new(instance, trace, model.vocab());
    let fwd = model.forward(&layout.prior_tokens, layout.prior_from + layout.answer_offset)?;
    Ok(fwd.logp)
}

#[derive(Debug, Clone)]
pub struct ScoredRollout {
    pub instance: TaskInstance,
    pub trace: Vec<Token>,
    pub behavior_mode: LayoutMode,
    pub behavior_logp: Vec<f64>,
    pub view: CompositeView,
    pub truncated: bool,
    pub parsed: ParsedResponse,
    /// Per-token answer log-probabilities in the prior layout after `trace`.
    pub answer_logp: Vec<f64>,
    pub reward: Option<f64>,
    pub advantage: Option<f64>,
    /// Passes recorded at sampling time, reusable while parameters are unchanged.
    pub passes: Option<RolloutPasses>,
}

impl ScoredRollout {
    /// Scores an externally supplied trace as if `mode` had produced it.
    pub fn score(model: &PolicyModel, instance: &TaskInstance, trace: Vec<Token>, mode: LayoutMode, truncated: bool) -> Result<Self> {
        let vocab = model.vocab();
        let layout = RolloutLayout::new(instance, &trace, vocab);
        let passes = score_passes(model, &layout)?;
        let view = view_from_passes(&layout, &passes)?;
        let answer_logp = answer_from_passes(&layout, &passes);
        let parsed = parse_trace(instance, &trace, mode, vocab);
        Ok(Self {
            instance: instance.clone(),
            behavior_logp: view.column(mode).to_vec(),
            behavior_mode: mode,
            trace,
            view,
            truncated,
            parsed,
            answer_logp,
            reward: None,
            advantage: None,
            passes: Some(passes),
        })
    }

    /// Layout used to score this rollout.
    pub fn layout(&self, vocab: &Vocabulary) -> RolloutLayout {
        RolloutLayout::new(&self.instance, &self.trace, vocab)
    }
}

/// Full response implied by a trace and the ground-truth answer, checked
/// against the template of `mode`.
fn parse_trace(instance: &TaskInstance, trace: &[Token], mode: LayoutMode, vocab: &Vocabulary) -> ParsedResponse {
    let sp = vocab.specials();
    let mut think = vec![sp.think_open];
    think.extend_from_slice(trace);
    let mut answer = vec![sp.answer_open];
    answer.extend_from_slice(&instance.answer_tokens);
    answer.push(sp.answer_close);
    let full = match mode {
        LayoutMode::Prior => [think, answer].concat(),
        LayoutMode::Posterior => [answer, think].concat(),
    };
    validate_format(&full, mode, vocab)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HybridConfig {
    /// Probability of drawing a whole trace from the prior layout.
    pub alpha: f64,
    pub group_size: usize,
}

impl Default for HybridConfig {
    fn default() -> Self {
        Self { alpha: 0.5, group_size: 8 }
    }
}

impl HybridConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if self.group_size == 0 {
            return Err(Error::Config("group_size must be at least 1".into()));
        }
        Ok(())
    }
}

/// Draws a trace from the layout of `mode`, stopping at THINK_CLOSE.
pub fn sample_trace(
    model: &PolicyModel,
    instance: &TaskInstance,
    mode: LayoutMode,
    sampling: &SamplingParams,
    rng: &mut impl Rng,
) -> Result<(Vec<Token>, bool)> {
    let vocab = model.vocab();
    let mut params = sampling.clone();
    for delim in [THINK_CLOSE_STR, THINK_OPEN_STR, ANSWER_OPEN_STR, ANSWER_CLOSE_STR] {
        if !params.stop_strings.iter().any(|s| s == delim) {
            params.stop_strings.push(delim.to_string());
        }
    }
    let ctx = render_context(instance, mode, vocab);
    let sample = model.sample_sequence(&ctx, &params, rng)?;
    Ok((canonicalize_tokens(&sample.tokens, vocab), sample.truncated))
}

/// Draws `group_size` rollouts, each wholly from the prior with probability
/// `alpha` and otherwise from the posterior.
pub fn sample_hybrid(
    model: &PolicyModel,
    instance: &TaskInstance,
    hybrid: &HybridConfig,
    sampling: &SamplingParams,
    rng: &mut impl Rng,
) -> Result<Vec<ScoredRollout>> {
    hybrid.validate()?;
    (0..hybrid.group_size)
        .map(|_| {
            let mode = if rng.gen_bool(hybrid.alpha) {
                LayoutMode::Prior
            } else {
                LayoutMode::Posterior
            };
            let (trace, truncated) = sample_trace(model, instance, mode, sampling, rng)?;
            ScoredRollout::score(model, instance, trace, mode, truncated)
        })
        .collect()
}

/// Every canonical trace the sampler can return within `budget` tokens when
/// the vocabulary has no spelling glyphs.
pub fn reachable_traces(vocab: &Vocabulary, budget: usize) -> Vec<Vec<Token>> {
    let mut out = vec![Vec::new()];
    let mut frontier = vec![Vec::new()];
    for _ in 0..budget {
        let mut next = Vec::new();
        for prefix in &frontier {
            for t in vocab.all_tokens() {
                let mut z: Vec<Token> = prefix.clone();
                z.push(t);
                if !vocab.is_special(t) {
                    next.push(z.clone());
                }
                out.push(z);
            }
        }
        frontier = next;
    }
    out
}

/// Full-support tabular rows covering sampling, scoring, and greedy
/// evaluation of every reachable trace for each instance.
pub fn tabular_rows_for(instances: &[TaskInstance], vocab: &Vocabulary, budget: usize) -> Vec<TabularRow> {
    let traces = reachable_traces(vocab, budget);
    let mut seen: HashSet<Vec<Token>> = HashSet::new();
    let mut rows = Vec::new();
    for inst in instances {
        for z in &traces {
            let layout = RolloutLayout::new(inst, z, vocab);
            for ctx in layout.contexts() {
                if !seen.contains(ctx) {
                    seen.insert(ctx.to_vec());
                    rows.push(TabularRow::full(ctx.to_vec()));
                }
            }
        }
    }
    rows
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RolloutRecord {
    pub task_id: String,
    pub mode: LayoutMode,
    pub trace: Vec<Token>,
    pub prior_logp: Vec<f64>,
    pub posterior_logp: Vec<f64>,
    pub composite_logp: Vec<f64>,
    pub behavior_logp: Vec<f64>,
    pub truncated: bool,
}

impl From<&ScoredRollout> for RolloutRecord {
    fn from(r: &ScoredRollout) -> Self {
        Self {
            task_id: r.instance.task_id.clone(),
            mode: r.behavior_mode,
            trace: r.trace.clone(),
            prior_logp: r.view.prior_logp.clone(),
            posterior_logp: r.view.posterior_logp.clone(),
            composite_logp: r.view.composite_logp.clone(),
            behavior_logp: r.behavior_logp.clone(),
            truncated: r.truncated,
        }
    }
}

/// Writes one JSON record per rollout.
pub fn write_rollout_dump(rollouts: &[ScoredRollout], mut out: impl Write) -> Result<()> {
    for r in rollouts {
        serde_json::to_writer(&mut out, &RolloutRecord::from(r))?;
        out.write_all(b"\n")?;
    }
    Ok(())
}
