//! Scalar reverse-mode differentiation for losses built from model scores.
//!
//! A [`Graph`] records elementary scalar operations eagerly. Its leaves are
//! per-token log-probabilities produced by [`Graph::score`], which keeps the
//! model's forward cache. [`Graph::backward`] sweeps the tape in reverse to
//! get each leaf's adjoint, then hands those to the model backend to
//! accumulate the parameter gradient. Reductions run in recording order, so
//! the result is deterministic.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::policy::{Forward, PolicyModel};
use crate::vocab::Token;

static NEXT_GRAPH: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    graph: u64,
    idx: usize,
}

#[derive(Debug, Clone, Copy)]
enum Node {
    Const,
    Leaf { pass: usize, pos: usize },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    Exp(usize),
    Ln(usize),
    /// Gradient flows to whichever argument was selected.
    Select(usize),
    /// Identity inside the open interval, flat outside.
    Clamp(usize, f64, f64),
    /// Identity below the threshold, `tau * (1 + ln(x / tau))` above.
    SoftClip(usize, f64),
    /// `ln(exp(a)/2 + exp(b)/2)`.
    LogMixHalf(usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientVector(pub Vec<f64>);

impl GradientVector {
    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|g| g.is_finite())
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|g| g * g).sum::<f64>().sqrt()
    }
}

pub struct Graph<'m> {
    id: u64,
    model: &'m PolicyModel,
    nodes: Vec<Node>,
    values: Vec<f64>,
    passes: Vec<Forward>,
}

/// Stable `ln(exp(a)/2 + exp(b)/2)`.
pub fn log_mix_half(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    m + (0.5 * (a - m).exp() + 0.5 * (b - m).exp()).ln()
}

/// Identity up to `threshold`, logarithmic growth above it.
pub fn soft_clip_value(x: f64, threshold: f64) -> f64 {
    if x <= threshold {
        x
    } else {
        threshold * (1.0 + (x / threshold).ln())
    }
}

impl<'m> Graph<'m> {
    pub fn new(model: &'m PolicyModel) -> Self {
        Self {
            id: NEXT_GRAPH.fetch_add(1, Ordering::Relaxed),
            model,
            nodes: Vec::new(),
            values: Vec::new(),
            passes: Vec::new(),
        }
    }

    pub fn model(&self) -> &'m PolicyModel {
        self.model
    }

    fn push(&mut self, node: Node, value: f64) -> Var {
        self.nodes.push(node);
        self.values.push(value);
        Var {
            graph: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    fn v(&self, x: Var) -> f64 {
        self.values[x.idx]
    }

    pub fn value(&self, x: Var) -> f64 {
        self.v(x)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, c: f64) -> Var {
        self.push(Node::Const, c)
    }

    /// Scores `tokens[from..]` and returns one leaf per scored position.
    pub fn score(&mut self, tokens: &[Token], from: usize) -> Result<Vec<Var>> {
        let fwd = self.model.forward(tokens, from)?;
        Ok(self.adopt(fwd))
    }

    /// Registers an existing forward pass of this graph's model.
    pub fn adopt(&mut self, fwd: Forward) -> Vec<Var> {
        let pass = self.passes.len();
        let leaves = fwd
            .logp
            .iter()
            .enumerate()
            .map(|(pos, &lp)| self.push(Node::Leaf { pass, pos }, lp))
            .collect();
        self.passes.push(fwd);
        leaves
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.push(Node::Add(a.idx, b.idx), self.v(a) + self.v(b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.push(Node::Sub(a.idx, b.idx), self.v(a) - self.v(b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.push(Node::Mul(a.idx, b.idx), self.v(a) * self.v(b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.push(Node::Div(a.idx, b.idx), self.v(a) / self.v(b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.push(Node::Scale(a.idx, c), self.v(a) * c)
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let k = self.constant(c);
        self.add(a, k)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.push(Node::Exp(a.idx), self.v(a).exp())
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.push(Node::Ln(a.idx), self.v(a).ln())
    }

    pub fn min(&mut self, a: Var, b: Var) -> Var {
        let pick = if self.v(b) < self.v(a) { b } else { a };
        self.push(Node::Select(pick.idx), self.v(pick))
    }

    pub fn max(&mut self, a: Var, b: Var) -> Var {
        let pick = if self.v(b) > self.v(a) { b } else { a };
        self.push(Node::Select(pick.idx), self.v(pick))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let x = self.v(a).clamp(lo, hi);
        self.push(Node::Clamp(a.idx, lo, hi), x)
    }

    pub fn soft_clip(&mut self, a: Var, threshold: f64) -> Var {
        let x = soft_clip_value(self.v(a), threshold);
        self.push(Node::SoftClip(a.idx, threshold), x)
    }

    pub fn log_mix_half(&mut self, a: Var, b: Var) -> Var {
        let x = log_mix_half(self.v(a), self.v(b));
        self.push(Node::LogMixHalf(a.idx, b.idx), x)
    }

    pub fn sum(&mut self, xs: &[Var]) -> Var {
        match xs.split_first() {
            None => self.constant(0.0),
            Some((&first, rest)) => rest.iter().fold(first, |acc, &x| self.add(acc, x)),
        }
    }

    /// Mean of `xs`; zero for an empty slice.
    pub fn mean(&mut self, xs: &[Var]) -> Var {
        if xs.is_empty() {
            return self.constant(0.0);
        }
        let s = self.sum(xs);
        self.scale(s, 1.0 / xs.len() as f64)
    }

    /// Adjoint of every node with respect to `loss`.
    fn adjoints(&self, loss: Var) -> Result<Vec<f64>> {
        if loss.graph != self.id || loss.idx >= self.nodes.len() {
            return Err(Error::ForeignNode);
        }
        let mut adj = vec![0.0; loss.idx + 1];
        adj[loss.idx] = 1.0;
        for i in (0..=loss.idx).rev() {
            let g = adj[i];
            if g == 0.0 {
                continue;
            }
            match self.nodes[i] {
                Node::Const | Node::Leaf { .. } => {}
                Node::Add(a, b) => {
                    adj[a] += g;
                    adj[b] += g;
                }
                Node::Sub(a, b) => {
                    adj[a] += g;
                    adj[b] -= g;
                }
                Node::Mul(a, b) => {
                    let (va, vb) = (self.values[a], self.values[b]);
                    adj[a] += g * vb;
                    adj[b] += g * va;
                }
                Node::Div(a, b) => {
                    let (va, vb) = (self.values[a], self.values[b]);
                    adj[a] += g / vb;
                    adj[b] -= g * va / (vb * vb);
                }
                Node::Scale(a, c) => adj[a] += g * c,
                Node::Exp(a) => adj[a] += g * self.values[i],
                Node::Ln(a) => adj[a] += g / self.values[a],
                Node::Select(a) => adj[a] += g,
                Node::Clamp(a, lo, hi) => {
                    let x = self.values[a];
                    if x > lo && x < hi {
                        adj[a] += g;
                    }
                }
                Node::SoftClip(a, tau) => {
                    let x = self.values[a];
                    adj[a] += if x <= tau { g } else { g * tau / x };
                }
                Node::LogMixHalf(a, b) => {
                    let out = self.values[i];
                    adj[a] += g * 0.5 * (self.values[a] - out).exp();
                    adj[b] += g * 0.5 * (self.values[b] - out).exp();
                }
            }
        }
        Ok(adj)
    }

    /// Gradient of the scalar `loss` with respect to the model parameters.
    pub fn backward(&self, loss: Var) -> Result<GradientVector> {
        let adj = self.adjoints(loss)?;
        let mut dlogp: Vec<Vec<f64>> = self.passes.iter().map(|p| vec![0.0; p.logp.len()]).collect();
        for (i, node) in self.nodes.iter().enumerate().take(adj.len()) {
            if let Node::Leaf { pass, pos } = *node {
                dlogp[pass][pos] += adj[i];
            }
        }
        let mut grad = vec![0.0; self.model.num_params()];
        for (fwd, d) in self.passes.iter().zip(&dlogp) {
            if d.iter().any(|&g| g != 0.0) {
                self.model.accumulate_grad(fwd, d, &mut grad)?;
            }
        }
        Ok(GradientVector(grad))
    }
}
