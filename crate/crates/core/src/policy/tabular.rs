//! Exactly enumerable backend: one logit row per registered context.
//!
//! A row is keyed by the full token history it conditions on. Rows may
//! restrict their support to a subset of the vocabulary; tokens outside the
//! support have probability zero and carry no parameter.

use serde::{Deserialize, Serialize};
use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::vocab::Token;

/// Longest context the tabular backend accepts.
pub const TABULAR_MAX_CONTEXT: usize = 64;
/// Upper bound on the number of tabular logits.
pub const TABULAR_MAX_PARAMS: usize = 1 << 24;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularRow {
    pub context: Vec<Token>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub support: Option<Vec<Token>>,
}

impl TabularRow {
    pub fn full(context: Vec<Token>) -> Self {
        Self {
            context,
            support: None,
        }
    }

    pub fn restricted(context: Vec<Token>, support: Vec<Token>) -> Self {
        Self {
            context,
            support: Some(support),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularConfig {
    pub rows: Vec<TabularRow>,
    /// Standard deviation of the initial logits; zero gives uniform rows.
    pub init_scale: f64,
}

#[derive(Debug, Clone)]
pub(crate) struct TabularLayout {
    index: HashMap<Vec<Token>, usize>,
    offsets: Vec<usize>,
    supports: Vec<Vec<Token>>,
    vocab_size: usize,
    num_params: usize,
}

impl TabularLayout {
    pub(crate) fn new(cfg: &TabularConfig, vocab_size: usize, context_length: usize) -> Result<Self> {
        if context_length > TABULAR_MAX_CONTEXT {
            return Err(Error::Config(format!(
                "tabular context length {context_length} exceeds the enumerable bound {TABULAR_MAX_CONTEXT}"
            )));
        }
        let mut index = HashMap::with_capacity(cfg.rows.len());
        let mut offsets = Vec::with_capacity(cfg.rows.len());
        let mut supports = Vec::with_capacity(cfg.rows.len());
        let mut next = 0usize;
        for (i, row) in cfg.rows.iter().enumerate() {
            if row.context.len() >= context_length {
                return Err(Error::Config(format!(
                    "tabular row {i} has context length {} but the model context length is {context_length}",
                    row.context.len()
                )));
            }
            if let Some(&t) = row.context.iter().find(|&&t| t as usize >= vocab_size) {
                return Err(Error::TokenOutOfVocab(t));
            }
            let support: Vec<Token> = match &row.support {
                None => (0..vocab_size as Token).collect(),
                Some(s) => {
                    let mut s = s.clone();
                    s.sort_unstable();
                    s.dedup();
                    if s.is_empty() {
                        return Err(Error::Config(format!("tabular row {i} has empty support")));
                    }
                    if let Some(&t) = s.iter().find(|&&t| t as usize >= vocab_size) {
                        return Err(Error::TokenOutOfVocab(t));
                    }
                    s
                }
            };
            if index.insert(row.context.clone(), i).is_some() {
                return Err(Error::Config(format!(
                    "duplicate tabular context {:?}",
                    row.context
                )));
            }
            offsets.push(next);
            next += support.len();
            supports.push(support);
        }
        if next > TABULAR_MAX_PARAMS {
            return Err(Error::Config(format!(
                "tabular table needs {next} logits, above the bound {TABULAR_MAX_PARAMS}"
            )));
        }
        Ok(Self {
            index,
            offsets,
            supports,
            vocab_size,
            num_params: next,
        })
    }

    pub(crate) fn num_params(&self) -> usize {
        self.num_params
    }

    pub(crate) fn num_rows(&self) -> usize {
        self.offsets.len()
    }

    pub(crate) fn row_of(&self, context: &[Token]) -> Result<usize> {
        self.index
            .get(context)
            .copied()
            .ok_or_else(|| Error::UnknownContext(context.to_vec()))
    }

    /// Parameter range and support of a row.
    pub(crate) fn row_slice(&self, row: usize) -> (std::ops::Range<usize>, &[Token]) {
        let start = self.offsets[row];
        let support = &self.supports[row];
        (start..start + support.len(), support)
    }

    /// Full-vocabulary distribution and log-distribution of a row.
    pub(crate) fn distribution(&self, params: &[f64], row: usize) -> (Vec<f64>, Vec<f64>) {
        let (range, support) = self.row_slice(row);
        let logits = &params[range];
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = logits.iter().map(|l| (l - max).exp()).sum();
        let lse = max + sum.ln();
        let mut probs = vec![0.0; self.vocab_size];
        let mut logp = vec![f64::NEG_INFINITY; self.vocab_size];
        for (&t, &l) in support.iter().zip(logits) {
            logp[t as usize] = l - lse;
            probs[t as usize] = (l - lse).exp();
        }
        (probs, logp)
    }

    /// Adds `g * (onehot(token) - probs)` to the row's logits gradient.
    pub(crate) fn accumulate(&self, row: usize, token: Token, probs: &[f64], g: f64, grad: &mut [f64]) {
        let (range, support) = self.row_slice(row);
        for (slot, &t) in grad[range].iter_mut().zip(support) {
            let onehot = if t == token { 1.0 } else { 0.0 };
            *slot += g * (onehot - probs[t as usize]);
        }
    }
}
