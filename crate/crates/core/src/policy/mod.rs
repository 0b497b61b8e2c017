//! Autoregressive categorical sequence models.
//!
//! A [`PolicyModel`] owns a flat `f64` parameter vector and one of two
//! backends. Both expose the same contract: next-token distributions,
//! per-token scoring of a sequence with a cache for backpropagation, and
//! incremental sampling.

mod checkpoint;
pub(crate) mod checkpoint_io {
    pub(crate) use super::checkpoint::{field, parse_field, read_f64s, read_header, write_f64s};
}
mod gru;
mod tabular;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_FORMAT};
pub use gru::GruConfig;
pub use tabular::{TabularConfig, TabularRow, TABULAR_MAX_CONTEXT};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::{Token, Vocabulary};
use gru::{GruCache, GruLayout};
use tabular::TabularLayout;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Tabular,
    Neural,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "backend", rename_all = "lowercase")]
pub enum ArchConfig {
    Tabular(TabularConfig),
    Neural(GruConfig),
}

impl ArchConfig {
    pub fn kind(&self) -> BackendKind {
        match self {
            ArchConfig::Tabular(_) => BackendKind::Tabular,
            ArchConfig::Neural(_) => BackendKind::Neural,
        }
    }
}

#[derive(Debug, Clone)]
enum Layout {
    Tabular(TabularLayout),
    Neural(GruLayout),
}

#[derive(Debug, Clone)]
pub struct PolicyModel {
    vocab: Vocabulary,
    context_length: usize,
    arch: ArchConfig,
    layout: Layout,
    params: Vec<f64>,
    think_grammar: bool,
}

/// Scores of `tokens[from..]` plus whatever the backend needs for backward.
#[derive(Debug, Clone)]
pub struct Forward {
    tokens: Vec<Token>,
    from: usize,
    /// Full next-token distribution at each scored position.
    pub probs: Vec<Vec<f64>>,
    /// `log p(tokens[from + i] | tokens[..from + i])`.
    pub logp: Vec<f64>,
    cache: Cache,
}

#[derive(Debug, Clone)]
enum Cache {
    Tabular(Vec<usize>),
    Neural(GruCache),
}

impl Forward {
    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn from(&self) -> usize {
        self.from
    }

    pub fn total(&self) -> f64 {
        self.logp.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingParams {
    pub temperature: f64,
    pub top_p: f64,
    pub max_new_tokens: usize,
    /// Generation stops once the decoded output ends with any of these.
    pub stop_strings: Vec<String>,
}

impl Default for SamplingParams {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            top_p: 1.0,
            max_new_tokens: 32,
            stop_strings: Vec::new(),
        }
    }
}

impl SamplingParams {
    pub fn validate(&self, context_length: usize) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "top_p must lie in (0, 1], got {}",
                self.top_p
            )));
        }
        if self.max_new_tokens == 0 || self.max_new_tokens > context_length {
            return Err(Error::InvalidArgument(format!(
                "max_new_tokens must lie in 1..={context_length}, got {}",
                self.max_new_tokens
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampledSequence {
    pub tokens: Vec<Token>,
    /// Log-probabilities under the unadjusted model distribution.
    pub logp: Vec<f64>,
    pub truncated: bool,
}

impl PolicyModel {
    /// Deterministic in `(vocab, context_length, arch, seed)`.
    pub fn init(vocab: Vocabulary, context_length: usize, arch: ArchConfig, seed: u64) -> Result<Self> {
        if context_length == 0 {
            return Err(Error::Config("context length must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (layout, params) = match &arch {
            ArchConfig::Tabular(cfg) => {
                if !(cfg.init_scale >= 0.0 && cfg.init_scale.is_finite()) {
                    return Err(Error::Config("tabular init_scale must be finite and non-negative".into()));
                }
                let layout = TabularLayout::new(cfg, vocab.size(), context_length)?;
                let params = (0..layout.num_params())
                    .map(|_| {
                        let z: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng);
                        cfg.init_scale * z
                    })
                    .collect();
                (Layout::Tabular(layout), params)
            }
            ArchConfig::Neural(cfg) => {
                if cfg.embed_dim == 0 || cfg.hidden_dim == 0 {
                    return Err(Error::Config("neural dimensions must be positive".into()));
                }
                let layout = GruLayout::new(cfg, vocab.size());
                let mut params = vec![0.0; layout.num_params()];
                layout.init(&mut params, &mut rng);
                (Layout::Neural(layout), params)
            }
        };
        Ok(Self {
            vocab,
            context_length,
            arch,
            layout,
            params,
            think_grammar: false,
        })
    }

    pub(crate) fn from_parts(vocab: Vocabulary, context_length: usize, arch: ArchConfig, params: Vec<f64>) -> Result<Self> {
        let mut model = Self::init(vocab, context_length, arch, 0)?;
        if params.len() != model.params.len() {
            return Err(Error::LengthMismatch(params.len(), model.params.len()));
        }
        model.params = params;
        Ok(model)
    }

    /// Inside an open think span, restrict every next-token distribution to
    /// content tokens and THINK_CLOSE, renormalized. Sampling, scoring and
    /// gradients all see the restricted distribution.
    pub fn with_think_grammar(mut self, on: bool) -> Self {
        self.think_grammar = on;
        self
    }

    pub fn think_grammar(&self) -> bool {
        self.think_grammar
    }

    fn in_think_span(&self, context: &[Token]) -> bool {
        let sp = self.vocab.specials();
        context
            .iter()
            .rev()
            .find(|&&t| t == sp.think_open || t == sp.think_close)
            .is_some_and(|&t| t == sp.think_open)
    }

    fn restrict(&self, context: &[Token], p: &mut [f64], lp: &mut [f64]) {
        if !self.think_grammar || !self.in_think_span(context) {
            return;
        }
        let close = self.vocab.specials().think_close;
        let allowed = |t: usize| t as Token == close || !self.vocab.is_special(t as Token);
        let mass: f64 = (0..p.len()).filter(|&t| allowed(t)).map(|t| p[t]).sum();
        if !(mass > 0.0) {
            return;
        }
        let log_mass = mass.ln();
        for t in 0..p.len() {
            if allowed(t) {
                p[t] /= mass;
                lp[t] -= log_mass;
            } else {
                p[t] = 0.0;
                lp[t] = f64::NEG_INFINITY;
            }
        }
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn context_length(&self) -> usize {
        self.context_length
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn backend(&self) -> BackendKind {
        self.arch.kind()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Number of tabular rows; `None` for the neural backend.
    pub fn tabular_rows(&self) -> Option<usize> {
        match &self.layout {
            Layout::Tabular(t) => Some(t.num_rows()),
            Layout::Neural(_) => None,
        }
    }

    /// Parameter index range of the tabular row for `context`.
    pub fn tabular_row_range(&self, context: &[Token]) -> Result<(std::ops::Range<usize>, Vec<Token>)> {
        match &self.layout {
            Layout::Tabular(t) => {
                let row = t.row_of(context)?;
                let (range, support) = t.row_slice(row);
                Ok((range, support.to_vec()))
            }
            Layout::Neural(_) => Err(Error::Unsupported("row access on the neural backend".into())),
        }
    }

    /// Overwrites the logits of a tabular row; `logits` is indexed like the row's support.
    pub fn set_tabular_logits(&mut self, context: &[Token], logits: &[f64]) -> Result<()> {
        let (range, _) = self.tabular_row_range(context)?;
        if range.len() != logits.len() {
            return Err(Error::LengthMismatch(logits.len(), range.len()));
        }
        self.params[range].copy_from_slice(logits);
        Ok(())
    }

    /// Next-token distribution; temperature-free.
    pub fn next_token_dist(&self, context: &[Token]) -> Result<Vec<f64>> {
        if context.len() >= self.context_length {
            return Err(Error::ContextTooLong {
                len: context.len(),
                max: self.context_length - 1,
            });
        }
        self.vocab.check(context)?;
        let mut cursor = self.cursor(&context[..0])?;
        for &t in context {
            cursor.push_unchecked(t);
        }
        cursor.dist()
    }

    /// Per-token log-probabilities of `sequence` continuing `context`.
    pub fn score_sequence(&self, context: &[Token], sequence: &[Token]) -> Result<Vec<f64>> {
        let mut tokens = context.to_vec();
        tokens.extend_from_slice(sequence);
        Ok(self.forward(&tokens, context.len())?.logp)
    }

    /// Scores `tokens[from..]`, keeping the cache needed for [`Self::accumulate_grad`].
    pub fn forward(&self, tokens: &[Token], from: usize) -> Result<Forward> {
        if tokens.len() > self.context_length {
            return Err(Error::ContextTooLong {
                len: tokens.len(),
                max: self.context_length,
            });
        }
        if from > tokens.len() {
            return Err(Error::InvalidArgument(format!(
                "score start {from} beyond sequence length {}",
                tokens.len()
            )));
        }
        self.vocab.check(tokens)?;
        let n = tokens.len() - from;
        let mut probs = Vec::with_capacity(n);
        let mut logp = Vec::with_capacity(n);
        let cache = match &self.layout {
            Layout::Tabular(t) => {
                let mut rows = Vec::with_capacity(n);
                for pos in from..tokens.len() {
                    let row = t.row_of(&tokens[..pos])?;
                    let (mut p, mut lp) = t.distribution(&self.params, row);
                    self.restrict(&tokens[..pos], &mut p, &mut lp);
                    logp.push(lp[tokens[pos] as usize]);
                    probs.push(p);
                    rows.push(row);
                }
                Cache::Tabular(rows)
            }
            Layout::Neural(g) => {
                let upto = tokens.len().saturating_sub(1);
                let cache = g.run(&self.params, tokens, upto);
                for pos in from..tokens.len() {
                    let logits = g.logits(&self.params, &cache.states[pos]);
                    let (mut p, mut lp) = softmax_with_log(&logits);
                    self.restrict(&tokens[..pos], &mut p, &mut lp);
                    logp.push(lp[tokens[pos] as usize]);
                    probs.push(p);
                }
                Cache::Neural(cache)
            }
        };
        Ok(Forward {
            tokens: tokens.to_vec(),
            from,
            probs,
            logp,
            cache,
        })
    }

    /// Adds `sum_i dlogp[i] * d logp[i] / d params` into `grad`.
    pub fn accumulate_grad(&self, fwd: &Forward, dlogp: &[f64], grad: &mut [f64]) -> Result<()> {
        if dlogp.len() != fwd.logp.len() {
            return Err(Error::LengthMismatch(dlogp.len(), fwd.logp.len()));
        }
        if grad.len() != self.params.len() {
            return Err(Error::LengthMismatch(grad.len(), self.params.len()));
        }
        match (&self.layout, &fwd.cache) {
            (Layout::Tabular(t), Cache::Tabular(rows)) => {
                for (i, (&row, &g)) in rows.iter().zip(dlogp).enumerate() {
                    if g != 0.0 {
                        let token = fwd.tokens[fwd.from + i];
                        t.accumulate(row, token, &fwd.probs[i], g, grad);
                    }
                }
            }
            (Layout::Neural(gl), Cache::Neural(cache)) => {
                let dlogits: Vec<Vec<f64>> = dlogp
                    .iter()
                    .enumerate()
                    .map(|(i, &g)| {
                        let token = fwd.tokens[fwd.from + i] as usize;
                        fwd.probs[i]
                            .iter()
                            .enumerate()
                            .map(|(k, &p)| g * (if k == token { 1.0 } else { 0.0 } - p))
                            .collect()
                    })
                    .collect();
                gl.backward(&self.params, cache, fwd.from, &dlogits, grad);
            }
            _ => return Err(Error::InvalidArgument("forward pass came from another backend".into())),
        }
        Ok(())
    }

    /// Incremental decoding state starting after `context`.
    pub fn cursor(&self, context: &[Token]) -> Result<Cursor<'_>> {
        if context.len() > self.context_length {
            return Err(Error::ContextTooLong {
                len: context.len(),
                max: self.context_length,
            });
        }
        self.vocab.check(context)?;
        let mut cursor = Cursor {
            model: self,
            tokens: Vec::with_capacity(context.len() + 8),
            state: match &self.layout {
                Layout::Tabular(_) => None,
                Layout::Neural(g) => Some(vec![0.0; g.h]),
            },
        };
        for &t in context {
            cursor.push_unchecked(t);
        }
        Ok(cursor)
    }

    /// Draws a continuation of `context` from temperature/top-p adjusted
    /// distributions, stopping at END, at a stop string, or at the budget.
    pub fn sample_sequence(&self, context: &[Token], params: &SamplingParams, rng: &mut impl Rng) -> Result<SampledSequence> {
        params.validate(self.context_length)?;
        let end = self.vocab.specials().end;
        let mut cursor = self.cursor(context)?;
        let mut tokens = Vec::new();
        let mut logp = Vec::new();
        let mut tail = String::new();
        let budget = params
            .max_new_tokens
            .min(self.context_length.saturating_sub(context.len()));
        while tokens.len() < budget {
            let dist = cursor.dist()?;
            let adjusted = adjust_distribution(&dist, params.temperature, params.top_p);
            let tok = draw(&adjusted, rng);
            logp.push(dist[tok as usize].ln());
            tokens.push(tok);
            if tok == end {
                return Ok(SampledSequence { tokens, logp, truncated: false });
            }
            tail.push_str(self.vocab.symbol(tok).unwrap_or_default());
            if params.stop_strings.iter().any(|s| !s.is_empty() && tail.ends_with(s.as_str())) {
                return Ok(SampledSequence { tokens, logp, truncated: false });
            }
            cursor.push_unchecked(tok);
        }
        Ok(SampledSequence {
            tokens,
            logp,
            truncated: true,
        })
    }
}

/// Incremental decoder over a model.
pub struct Cursor<'m> {
    model: &'m PolicyModel,
    tokens: Vec<Token>,
    state: Option<Vec<f64>>,
}

impl<'m> Cursor<'m> {
    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn dist(&self) -> Result<Vec<f64>> {
        let (mut p, mut lp) = match &self.model.layout {
            Layout::Tabular(t) => {
                let row = t.row_of(&self.tokens)?;
                t.distribution(&self.model.params, row)
            }
            Layout::Neural(g) => {
                let state = self.state.as_ref().expect("neural cursor carries a state");
                softmax_with_log(&g.logits(&self.model.params, state))
            }
        };
        self.model.restrict(&self.tokens, &mut p, &mut lp);
        Ok(p)
    }

    pub fn push(&mut self, token: Token) -> Result<()> {
        if !self.model.vocab.contains(token) {
            return Err(Error::TokenOutOfVocab(token));
        }
        if self.tokens.len() >= self.model.context_length {
            return Err(Error::ContextTooLong {
                len: self.tokens.len() + 1,
                max: self.model.context_length,
            });
        }
        self.push_unchecked(token);
        Ok(())
    }

    fn push_unchecked(&mut self, token: Token) {
        if let (Layout::Neural(g), Some(state)) = (&self.model.layout, &mut self.state) {
            let (next, _) = g.step(&self.model.params, state, token);
            *state = next;
        }
        self.tokens.push(token);
    }
}

pub(crate) fn softmax_with_log(logits: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|l| (l - max).exp()).sum();
    let lse = max + sum.ln();
    let logp: Vec<f64> = logits.iter().map(|l| l - lse).collect();
    (logp.iter().map(|l| l.exp()).collect(), logp)
}

/// Temperature scaling followed by nucleus truncation.
pub fn adjust_distribution(dist: &[f64], temperature: f64, top_p: f64) -> Vec<f64> {
    let mut out: Vec<f64> = if temperature == 1.0 {
        dist.to_vec()
    } else {
        let logs: Vec<f64> = dist
            .iter()
            .map(|&p| if p > 0.0 { p.ln() / temperature } else { f64::NEG_INFINITY })
            .collect();
        softmax_with_log(&logs).0
    };
    if top_p < 1.0 {
        let mut order: Vec<usize> = (0..out.len()).collect();
        order.sort_by(|&a, &b| out[b].total_cmp(&out[a]).then(a.cmp(&b)));
        let mut acc = 0.0;
        let mut keep = vec![false; out.len()];
        for &i in &order {
            keep[i] = true;
            acc += out[i];
            if acc >= top_p {
                break;
            }
        }
        let mut z = 0.0;
        for (p, k) in out.iter_mut().zip(&keep) {
            if !k {
                *p = 0.0;
            }
            z += *p;
        }
        for p in &mut out {
            *p /= z;
        }
    }
    out
}

/// Inverse-CDF draw from a normalized distribution.
pub fn draw(dist: &[f64], rng: &mut impl Rng) -> Token {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in dist.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        acc += p;
        last = i;
        if u < acc {
            return i as Token;
        }
    }
    last as Token
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_tabular(init_scale: f64) -> PolicyModel {
        let vocab = Vocabulary::symbolic(3).unwrap();
        let v = vocab.size() as Token;
        let mut rows = vec![TabularRow::full(vec![])];
        for a in 0..v {
            rows.push(TabularRow::full(vec![a]));
            for b in 0..v {
                rows.push(TabularRow::full(vec![a, b]));
            }
        }
        PolicyModel::init(vocab, 4, ArchConfig::Tabular(TabularConfig { rows, init_scale }), 3).unwrap()
    }

    #[test]
    fn tabular_param_count_is_rows_times_vocab() {
        let vocab = Vocabulary::new(Vec::<String>::new()).unwrap();
        // 5 specials only; build a 3-symbol variant through restricted support.
        let rows = (0..4)
            .map(|i| TabularRow::restricted(vec![i], vec![0, 1, 2]))
            .collect();
        let m = PolicyModel::init(vocab, 4, ArchConfig::Tabular(TabularConfig { rows, init_scale: 0.0 }), 1).unwrap();
        assert_eq!(m.num_params(), 12);
        assert_eq!(m.tabular_rows(), Some(4));
    }

    #[test]
    fn zero_logits_give_uniform() {
        let m = tiny_tabular(0.0);
        let d = m.next_token_dist(&[1]).unwrap();
        for p in d {
            assert!((p - 1.0 / 8.0).abs() < 1e-15);
        }
        let lp = m.score_sequence(&[], &[0, 1, 2]).unwrap();
        for l in lp {
            assert!((l - (1.0f64 / 8.0).ln()).abs() < 1e-12);
        }
        assert!(m.score_sequence(&[0], &[]).unwrap().is_empty());
    }

    #[test]
    fn rejects_overlong_and_foreign_tokens() {
        let m = tiny_tabular(1.0);
        assert!(matches!(m.next_token_dist(&[0, 0, 0, 0]), Err(Error::ContextTooLong { .. })));
        assert!(matches!(m.score_sequence(&[0], &[99]), Err(Error::TokenOutOfVocab(99))));
        assert!(matches!(m.score_sequence(&[0, 1, 2], &[0]), Err(Error::UnknownContext(_))));
        let tab = ArchConfig::Tabular(TabularConfig { rows: vec![], init_scale: 0.0 });
        assert!(PolicyModel::init(Vocabulary::symbolic(2).unwrap(), 65, tab, 0).is_err());
    }

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        let vocab = Vocabulary::symbolic(3).unwrap();
        let arch = ArchConfig::Neural(GruConfig { embed_dim: 4, hidden_dim: 6, readout_dim: 0 });
        let a = PolicyModel::init(vocab.clone(), 16, arch.clone(), 7).unwrap();
        let b = PolicyModel::init(vocab.clone(), 16, arch.clone(), 7).unwrap();
        let c = PolicyModel::init(vocab.clone(), 16, arch.clone(), 2).unwrap();
        let d = PolicyModel::init(vocab, 16, arch, 1).unwrap();
        assert_eq!(
            a.params().iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            b.params().iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
        assert_ne!(c.params(), d.params());
    }

    #[test]
    fn neural_scores_match_incremental_distributions() {
        let vocab = Vocabulary::symbolic(4).unwrap();
        let m = PolicyModel::init(vocab, 16, ArchConfig::Neural(GruConfig { embed_dim: 5, hidden_dim: 7, readout_dim: 0 }), 11).unwrap();
        let seq = [1, 3, 0, 2, 6];
        let lp = m.score_sequence(&seq[..2], &seq[2..]).unwrap();
        for (i, l) in lp.iter().enumerate() {
            let d = m.next_token_dist(&seq[..2 + i]).unwrap();
            assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!((d[seq[2 + i] as usize].ln() - l).abs() < 1e-12);
        }
    }

    #[test]
    fn think_grammar_restricts_open_spans_only() {
        let vocab = Vocabulary::symbolic(3).unwrap();
        let sp = vocab.specials();
        let m = PolicyModel::init(vocab.clone(), 16, ArchConfig::Neural(GruConfig { embed_dim: 4, hidden_dim: 5, readout_dim: 3 }), 3)
            .unwrap()
            .with_think_grammar(true);
        let free = m.clone().with_think_grammar(false);
        let open = [0, sp.think_open, 1];
        let d = m.next_token_dist(&open).unwrap();
        let raw = free.next_token_dist(&open).unwrap();
        let mass: f64 = vocab.content_tokens().iter().map(|&t| raw[t as usize]).sum::<f64>() + raw[sp.think_close as usize];
        for t in vocab.all_tokens() {
            let want = if t == sp.think_close || !vocab.is_special(t) { raw[t as usize] / mass } else { 0.0 };
            assert!((d[t as usize] - want).abs() < 1e-12);
        }
        let closed = [0, sp.think_open, 1, sp.think_close];
        assert_eq!(m.next_token_dist(&closed).unwrap(), free.next_token_dist(&closed).unwrap());

        let seq = [0, sp.think_open, 2, 1, sp.think_close, sp.answer_open, 2];
        let lp = m.score_sequence(&seq[..2], &seq[2..]).unwrap();
        for (i, l) in lp.iter().enumerate() {
            let d = m.next_token_dist(&seq[..2 + i]).unwrap();
            assert!((d[seq[2 + i] as usize].ln() - l).abs() < 1e-12);
        }

        let fwd = m.forward(&seq, 2).unwrap();
        let w: Vec<f64> = (0..fwd.logp.len()).map(|i| 0.3 + 0.2 * i as f64).collect();
        let mut grad = vec![0.0; m.num_params()];
        m.accumulate_grad(&fwd, &w, &mut grad).unwrap();
        let objective = |m: &PolicyModel| -> f64 {
            m.forward(&seq, 2).unwrap().logp.iter().zip(&w).map(|(a, b)| a * b).sum()
        };
        for k in (0..m.num_params()).step_by(7) {
            let h = 1e-6;
            let (mut a, mut b) = (m.clone(), m.clone());
            a.params_mut()[k] += h;
            b.params_mut()[k] -= h;
            let fd = (objective(&a) - objective(&b)) / (2.0 * h);
            assert!((fd - grad[k]).abs() < 1e-6 * (1.0 + fd.abs()), "param {k}: {fd} vs {}", grad[k]);
        }
    }

    #[test]
    fn stop_on_end_and_budget() {
        let vocab = Vocabulary::symbolic(2).unwrap();
        let end = vocab.specials().end;
        let rows = vec![TabularRow::restricted(vec![0], vec![end])];
        let m = PolicyModel::init(vocab, 8, ArchConfig::Tabular(TabularConfig { rows, init_scale: 0.0 }), 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = m.sample_sequence(&[0], &SamplingParams::default().with_budget(4), &mut rng).unwrap();
        assert_eq!(s.tokens, vec![end]);
        assert!(!s.truncated);
        assert_eq!(s.logp, vec![0.0]);

        let m = tiny_tabular(0.0);
        let params = SamplingParams { max_new_tokens: 3, stop_strings: vec!["zzz".into()], ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        // Only contexts up to length 2 exist, so a 2-token budget from [0] is safe.
        let params = SamplingParams { max_new_tokens: 2, ..params };
        let s = m.sample_sequence(&[0], &params, &mut rng).unwrap();
        assert!(s.tokens.len() <= 2);
        assert_eq!(s.truncated, !s.tokens.contains(&m.vocab().specials().end));
    }

    #[test]
    fn stop_strings_match_spelled_delimiters() {
        let vocab = Vocabulary::arithmetic(3, true).unwrap();
        let spelled: Vec<Token> = ["<", "/", "t", ">"].iter().map(|s| vocab.lookup(s).unwrap()).collect();
        let mut rows = Vec::new();
        for i in 0..spelled.len() {
            rows.push(TabularRow::restricted(spelled[..i].to_vec(), vec![spelled[i]]));
        }
        let m = PolicyModel::init(vocab, 8, ArchConfig::Tabular(TabularConfig { rows, init_scale: 0.0 }), 0).unwrap();
        let params = SamplingParams { max_new_tokens: 6, stop_strings: vec!["</t>".into()], ..Default::default() };
        let s = m.sample_sequence(&[], &params, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(s.tokens, spelled);
        assert!(!s.truncated);
    }

    #[test]
    fn unit_temperature_and_full_nucleus_is_identity() {
        let d = vec![0.5, 0.3, 0.2];
        assert_eq!(adjust_distribution(&d, 1.0, 1.0), d);
        let sharp = adjust_distribution(&d, 0.5, 1.0);
        assert!(sharp[0] > 0.5);
        let nucleus = adjust_distribution(&d, 1.0, 0.6);
        assert_eq!(nucleus[2], 0.0);
        assert!((nucleus[0] - 0.625).abs() < 1e-12);
    }

    #[test]
    fn empirical_frequencies_within_binomial_bounds() {
        let d = [0.5, 0.3, 0.2];
        let n = 100_000;
        let mut counts = [0usize; 3];
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..n {
            counts[draw(&d, &mut rng) as usize] += 1;
        }
        for (c, p) in counts.iter().zip(d) {
            let se = (p * (1.0 - p) / n as f64).sqrt();
            let freq = *c as f64 / n as f64;
            assert!((freq - p).abs() <= 3.0 * se, "freq {freq} vs {p}");
        }
    }
}

impl SamplingParams {
    pub fn with_budget(mut self, max_new_tokens: usize) -> Self {
        self.max_new_tokens = max_new_tokens;
        self
    }
}
