//! Compact recurrent backend: token embedding, one GRU layer, and a readout
//! that is linear, or a single tanh layer of width `M` when `readout_dim > 0`.
//!
//! Parameter layout (row-major, in this order):
//!
//! | block   | shape              |
//! |---------|--------------------|
//! | `emb`   | `V x E`            |
//! | `w_ih`  | `3H x E`           |
//! | `w_hh`  | `3H x H`           |
//! | `b_ih`  | `3H`               |
//! | `b_hh`  | `3H`               |
//! | `w_mid` | `M x H` (if M > 0) |
//! | `b_mid` | `M` (if M > 0)     |
//! | `w_out` | `V x R`            |
//! | `b_out` | `V`                |
//!
//! where `R` is `M` when the readout has a hidden layer and `H` otherwise.
//!
//! Gate rows are ordered reset, update, candidate. The state update is
//! `h' = (1 - u) * n + u * h` with `n = tanh(W_n x + b_in + r * (U_n h + b_hn))`.
//! The prediction for position `t` reads the state after consuming tokens
//! `0..t`, starting from the zero state.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::vocab::Token;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GruConfig {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    /// Width of the tanh readout layer; 0 reads logits straight off the state.
    #[serde(default)]
    pub readout_dim: usize,
}

impl Default for GruConfig {
    fn default() -> Self {
        Self {
            embed_dim: 24,
            hidden_dim: 128,
            readout_dim: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct GruLayout {
    pub(crate) v: usize,
    pub(crate) e: usize,
    pub(crate) h: usize,
    m: usize,
    emb: usize,
    w_ih: usize,
    w_hh: usize,
    b_ih: usize,
    b_hh: usize,
    w_mid: usize,
    b_mid: usize,
    w_out: usize,
    b_out: usize,
    total: usize,
}

/// Per-step activations kept for backpropagation.
#[derive(Debug, Clone)]
pub(crate) struct StepCache {
    token: Token,
    h_prev: Vec<f64>,
    r: Vec<f64>,
    u: Vec<f64>,
    n: Vec<f64>,
    /// `U_n h + b_hn`, before the reset gate is applied.
    hn: Vec<f64>,
}

#[derive(Debug, Clone)]
pub(crate) struct GruCache {
    /// `states[t]` is the state before consuming token `t`.
    pub(crate) states: Vec<Vec<f64>>,
    steps: Vec<StepCache>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl GruLayout {
    pub(crate) fn new(cfg: &GruConfig, vocab_size: usize) -> Self {
        let (v, e, h, m) = (vocab_size, cfg.embed_dim, cfg.hidden_dim, cfg.readout_dim);
        let emb = 0;
        let w_ih = emb + v * e;
        let w_hh = w_ih + 3 * h * e;
        let b_ih = w_hh + 3 * h * h;
        let b_hh = b_ih + 3 * h;
        let w_mid = b_hh + 3 * h;
        let b_mid = w_mid + m * h;
        let w_out = b_mid + m;
        let b_out = w_out + v * if m > 0 { m } else { h };
        let total = b_out + v;
        Self {
            v,
            e,
            h,
            m,
            emb,
            w_ih,
            w_hh,
            b_ih,
            b_hh,
            w_mid,
            b_mid,
            w_out,
            b_out,
            total,
        }
    }

    pub(crate) fn num_params(&self) -> usize {
        self.total
    }

    pub(crate) fn init(&self, params: &mut [f64], rng: &mut impl Rng) {
        let k = 1.0 / (self.h as f64).sqrt();
        for p in &mut params[self.emb..self.w_ih] {
            let z: f64 = StandardNormal.sample(rng);
            *p = z;
        }
        for p in &mut params[self.w_ih..self.w_out] {
            *p = rng.gen_range(-k..k);
        }
        let k = 1.0 / (self.readout_width() as f64).sqrt();
        for p in &mut params[self.w_out..self.b_out] {
            *p = rng.gen_range(-k..k);
        }
        for p in &mut params[self.b_out..self.total] {
            *p = 0.0;
        }
    }

    /// One recurrent step; returns the new state and its cache.
    pub(crate) fn step(&self, params: &[f64], h_prev: &[f64], token: Token) -> (Vec<f64>, StepCache) {
        let (e, h) = (self.e, self.h);
        let x = &params[self.emb + token as usize * e..self.emb + (token as usize + 1) * e];
        let w_ih = &params[self.w_ih..self.w_hh];
        let w_hh = &params[self.w_hh..self.b_ih];
        let b_ih = &params[self.b_ih..self.b_hh];
        let b_hh = &params[self.b_hh..self.w_out];

        let mut gi = vec![0.0; 3 * h];
        let mut gh = vec![0.0; 3 * h];
        for j in 0..3 * h {
            let row = &w_ih[j * e..(j + 1) * e];
            gi[j] = b_ih[j] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
            let row = &w_hh[j * h..(j + 1) * h];
            gh[j] = b_hh[j] + row.iter().zip(h_prev).map(|(a, b)| a * b).sum::<f64>();
        }
        let mut r = vec![0.0; h];
        let mut u = vec![0.0; h];
        let mut n = vec![0.0; h];
        let mut out = vec![0.0; h];
        for i in 0..h {
            r[i] = sigmoid(gi[i] + gh[i]);
            u[i] = sigmoid(gi[h + i] + gh[h + i]);
            n[i] = (gi[2 * h + i] + r[i] * gh[2 * h + i]).tanh();
            out[i] = (1.0 - u[i]) * n[i] + u[i] * h_prev[i];
        }
        let cache = StepCache {
            token,
            h_prev: h_prev.to_vec(),
            r,
            u,
            n,
            hn: gh[2 * h..].to_vec(),
        };
        (out, cache)
    }

    fn readout_width(&self) -> usize {
        if self.m > 0 {
            self.m
        } else {
            self.h
        }
    }

    /// Input to the output layer: the state itself, or the tanh layer over it.
    fn features(&self, params: &[f64], state: &[f64]) -> Vec<f64> {
        if self.m == 0 {
            return state.to_vec();
        }
        let h = self.h;
        let w_mid = &params[self.w_mid..self.b_mid];
        let b_mid = &params[self.b_mid..self.w_out];
        (0..self.m)
            .map(|j| (b_mid[j] + w_mid[j * h..(j + 1) * h].iter().zip(state).map(|(a, b)| a * b).sum::<f64>()).tanh())
            .collect()
    }

    pub(crate) fn logits(&self, params: &[f64], state: &[f64]) -> Vec<f64> {
        let r = self.readout_width();
        let feat = self.features(params, state);
        let w_out = &params[self.w_out..self.b_out];
        let b_out = &params[self.b_out..self.total];
        (0..self.v)
            .map(|k| {
                b_out[k]
                    + w_out[k * r..(k + 1) * r]
                        .iter()
                        .zip(&feat)
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
            })
            .collect()
    }

    /// Runs the recurrence over `tokens[..upto]`, keeping every state.
    pub(crate) fn run(&self, params: &[f64], tokens: &[Token], upto: usize) -> GruCache {
        let mut states = Vec::with_capacity(upto + 1);
        let mut steps = Vec::with_capacity(upto);
        let mut state = vec![0.0; self.h];
        states.push(state.clone());
        for &t in &tokens[..upto] {
            let (next, cache) = self.step(params, &state, t);
            steps.push(cache);
            state = next;
            states.push(state.clone());
        }
        GruCache { states, steps }
    }

    /// Backpropagates logit gradients `dlogits[i]` for position `from + i`.
    pub(crate) fn backward(
        &self,
        params: &[f64],
        cache: &GruCache,
        from: usize,
        dlogits: &[Vec<f64>],
        grad: &mut [f64],
    ) {
        let (e, h) = (self.e, self.h);
        let last = from + dlogits.len();
        // Gradient flowing into each state from the readout.
        let mut dstate = vec![vec![0.0; h]; last.max(1)];
        {
            let r = self.readout_width();
            let w_out = &params[self.w_out..self.b_out];
            let w_mid = &params[self.w_mid..self.b_mid];
            for (i, dl) in dlogits.iter().enumerate() {
                let t = from + i;
                let state = &cache.states[t];
                let feat = self.features(params, state);
                let mut dfeat = vec![0.0; r];
                for k in 0..self.v {
                    let g = dl[k];
                    if g == 0.0 {
                        continue;
                    }
                    grad[self.b_out + k] += g;
                    let gw = &mut grad[self.w_out + k * r..self.w_out + (k + 1) * r];
                    for (slot, f) in gw.iter_mut().zip(&feat) {
                        *slot += g * f;
                    }
                    let wrow = &w_out[k * r..(k + 1) * r];
                    for (d, w) in dfeat.iter_mut().zip(wrow) {
                        *d += g * w;
                    }
                }
                if self.m == 0 {
                    for (d, f) in dstate[t].iter_mut().zip(&dfeat) {
                        *d += f;
                    }
                    continue;
                }
                for j in 0..self.m {
                    let dz = dfeat[j] * (1.0 - feat[j] * feat[j]);
                    if dz == 0.0 {
                        continue;
                    }
                    grad[self.b_mid + j] += dz;
                    let gw = &mut grad[self.w_mid + j * h..self.w_mid + (j + 1) * h];
                    for (slot, s) in gw.iter_mut().zip(state) {
                        *slot += dz * s;
                    }
                    let wrow = &w_mid[j * h..(j + 1) * h];
                    for (d, w) in dstate[t].iter_mut().zip(wrow) {
                        *d += dz * w;
                    }
                }
            }
        }

        let w_ih = &params[self.w_ih..self.w_hh];
        let w_hh = &params[self.w_hh..self.b_ih];
        let mut carry = vec![0.0; h];
        let mut da = vec![0.0; 3 * h]; // input-side pre-activation gradients
        let mut dg = vec![0.0; 3 * h]; // hidden-side pre-activation gradients
        for t in (1..last).rev() {
            let step = &cache.steps[t - 1];
            let dh: Vec<f64> = dstate[t].iter().zip(&carry).map(|(a, b)| a + b).collect();
            let mut dprev = vec![0.0; h];
            for i in 0..h {
                let (r, u, n) = (step.r[i], step.u[i], step.n[i]);
                let dn = dh[i] * (1.0 - u);
                let du = dh[i] * (step.h_prev[i] - n);
                dprev[i] += dh[i] * u;
                let dan = dn * (1.0 - n * n);
                let dr = dan * step.hn[i];
                let dar = dr * r * (1.0 - r);
                let dau = du * u * (1.0 - u);
                da[i] = dar;
                da[h + i] = dau;
                da[2 * h + i] = dan;
                dg[i] = dar;
                dg[h + i] = dau;
                dg[2 * h + i] = dan * r;
            }
            let tok = step.token as usize;
            let x_off = self.emb + tok * e;
            for j in 0..3 * h {
                let a = da[j];
                let g = dg[j];
                grad[self.b_ih + j] += a;
                grad[self.b_hh + j] += g;
                if a != 0.0 {
                    let wrow = &w_ih[j * e..(j + 1) * e];
                    for c in 0..e {
                        grad[self.w_ih + j * e + c] += a * params[x_off + c];
                        grad[x_off + c] += a * wrow[c];
                    }
                }
                if g != 0.0 {
                    let wrow = &w_hh[j * h..(j + 1) * h];
                    let gw = &mut grad[self.w_hh + j * h..self.w_hh + (j + 1) * h];
                    for c in 0..h {
                        gw[c] += g * step.h_prev[c];
                        dprev[c] += g * wrow[c];
                    }
                }
            }
            carry = dprev;
        }
    }
}
