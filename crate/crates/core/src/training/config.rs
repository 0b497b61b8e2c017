//! Flat run configuration.

use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::baselines::Method;
use crate::coupled::{tabular_rows_for, HybridConfig};
use crate::error::{Error, Result};
use crate::estimators::{BaselineScope, EstimatorForm, RewardVariant};
use crate::policy::{ArchConfig, BackendKind, GruConfig, PolicyModel, SamplingParams, TabularConfig};
use crate::tasks::{ArithOp, TaskFamily, TaskGenerator, TaskSpec};
use crate::vocab::Vocabulary;

use super::loss::{Aggregation, LossWeights};

/// Every knob of a training run. Only `peak_lr` and `seed` lack defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub seed: Option<u64>,
    pub peak_lr: f64,
    #[serde(default = "d::total_steps")]
    pub total_steps: u64,
    #[serde(default = "d::warmup_steps")]
    pub warmup_steps: u64,
    #[serde(default = "d::alpha")]
    pub alpha: f64,
    #[serde(default = "d::clip_epsilon")]
    pub clip_epsilon: f64,
    #[serde(default = "d::one")]
    pub lambda_kl: f64,
    #[serde(default = "d::one")]
    pub lambda_nll: f64,
    #[serde(default)]
    pub reward_variant: RewardVariant,
    #[serde(default = "d::softclip_threshold")]
    pub softclip_threshold: f64,
    #[serde(default = "d::group_size")]
    pub group_size: usize,
    #[serde(default = "d::instances_per_batch")]
    pub instances_per_batch: usize,
    #[serde(default)]
    pub baseline_scope: BaselineScope,
    #[serde(default)]
    pub surrogate_form: EstimatorForm,
    #[serde(default)]
    pub kl_form: EstimatorForm,
    #[serde(default)]
    pub method: Method,
    #[serde(default)]
    pub latro_beta: f64,

    #[serde(default = "d::task_family")]
    pub task_family: TaskFamily,
    #[serde(default = "d::modulus")]
    pub modulus: u32,
    #[serde(default = "d::k")]
    pub k_min: usize,
    #[serde(default = "d::k")]
    pub k_max: usize,
    #[serde(default = "d::ops")]
    pub ops: Vec<ArithOp>,
    #[serde(default)]
    pub spelling_glyphs: bool,

    #[serde(default = "d::backend")]
    pub backend: BackendKind,
    #[serde(default = "d::embed_dim")]
    pub embed_dim: usize,
    #[serde(default = "d::hidden_dim")]
    pub hidden_dim: usize,
    #[serde(default = "d::readout_dim")]
    pub readout_dim: usize,
    #[serde(default = "d::init_scale")]
    pub init_scale: f64,
    #[serde(default = "d::context_length")]
    pub context_length: usize,
    /// Restrict think spans to content tokens and THINK_CLOSE.
    #[serde(default = "d::yes")]
    pub think_grammar: bool,

    #[serde(default = "d::one")]
    pub temperature: f64,
    #[serde(default = "d::one")]
    pub top_p: f64,
    #[serde(default = "d::max_new_tokens")]
    pub max_new_tokens: usize,

    #[serde(default = "d::eval_instances")]
    pub eval_instances: usize,
    #[serde(default = "d::eval_every")]
    pub eval_every: u64,
    #[serde(default)]
    pub checkpoint_every: u64,
    #[serde(default)]
    pub deterministic: bool,
}

mod d {
    use super::*;

    pub fn total_steps() -> u64 {
        500
    }
    pub fn warmup_steps() -> u64 {
        20
    }
    pub fn alpha() -> f64 {
        0.5
    }
    pub fn clip_epsilon() -> f64 {
        0.3
    }
    pub fn one() -> f64 {
        1.0
    }
    pub fn yes() -> bool {
        true
    }
    pub fn softclip_threshold() -> f64 {
        10.0
    }
    pub fn group_size() -> usize {
        8
    }
    pub fn instances_per_batch() -> usize {
        16
    }
    pub fn task_family() -> TaskFamily {
        TaskFamily::ModChain
    }
    pub fn modulus() -> u32 {
        10
    }
    pub fn k() -> usize {
        1
    }
    pub fn ops() -> Vec<ArithOp> {
        vec![ArithOp::Add, ArithOp::Mul]
    }
    pub fn backend() -> BackendKind {
        BackendKind::Neural
    }
    pub fn embed_dim() -> usize {
        GruConfig::default().embed_dim
    }
    pub fn hidden_dim() -> usize {
        GruConfig::default().hidden_dim
    }
    pub fn readout_dim() -> usize {
        GruConfig::default().readout_dim
    }
    pub fn init_scale() -> f64 {
        0.0
    }
    pub fn context_length() -> usize {
        64
    }
    pub fn max_new_tokens() -> usize {
        32
    }
    pub fn eval_instances() -> usize {
        200
    }
    pub fn eval_every() -> u64 {
        50
    }
}

impl TrainingConfig {
    /// Defaults everywhere except the two required fields.
    pub fn new(seed: u64, peak_lr: f64) -> Self {
        let text = format!("seed = {seed}\npeak_lr = {peak_lr:e}\n");
        toml::from_str(&text).expect("defaults parse")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn seed(&self) -> Result<u64> {
        self.seed
            .ok_or_else(|| Error::Config("missing field `seed` (set it in the config or pass --seed)".into()))
    }

    pub fn validate(&self) -> Result<()> {
        self.seed()?;
        let bad = |m: String| Err(Error::Config(m));
        if !(self.clip_epsilon > 0.0 && self.clip_epsilon < 1.0) {
            return bad(format!("clip_epsilon {} outside (0, 1)", self.clip_epsilon));
        }
        if !(self.lambda_kl >= 0.0 && self.lambda_nll >= 0.0) {
            return bad("lambda_kl and lambda_nll must be non-negative".into());
        }
        if !(self.peak_lr >= 0.0 && self.peak_lr.is_finite()) {
            return bad(format!("peak_lr {} must be finite and non-negative", self.peak_lr));
        }
        if self.softclip_threshold.is_nan() || self.softclip_threshold <= 1.0 {
            return bad(format!("softclip_threshold {} must exceed 1", self.softclip_threshold));
        }
        if self.instances_per_batch == 0 {
            return bad("instances_per_batch must be at least 1".into());
        }
        if self.latro_beta < 0.0 {
            return bad("latro_beta must be non-negative".into());
        }
        if self.eval_every == 0 {
            return bad("eval_every must be at least 1".into());
        }
        self.hybrid().validate()?;
        self.sampling().validate(self.context_length)?;
        self.generator()?;
        Ok(())
    }

    pub fn hybrid(&self) -> HybridConfig {
        HybridConfig {
            alpha: self.alpha,
            group_size: self.group_size,
        }
    }

    pub fn sampling(&self) -> SamplingParams {
        SamplingParams {
            temperature: self.temperature,
            top_p: self.top_p,
            max_new_tokens: self.max_new_tokens,
            stop_strings: Vec::new(),
        }
    }

    pub fn task_spec(&self) -> TaskSpec {
        TaskSpec {
            family: self.task_family,
            modulus: self.modulus,
            k_min: self.k_min,
            k_max: self.k_max,
            ops: self.ops.clone(),
        }
    }

    pub fn vocab(&self) -> Result<Vocabulary> {
        Vocabulary::arithmetic(self.modulus, self.spelling_glyphs)
    }

    pub fn generator(&self) -> Result<TaskGenerator> {
        TaskGenerator::new(self.task_spec(), &self.vocab()?, self.max_new_tokens)
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            clip_epsilon: Some(self.clip_epsilon),
            lambda_nll: self.lambda_nll,
            lambda_kl: self.lambda_kl,
            softclip_threshold: self.softclip_threshold,
            surrogate_form: self.surrogate_form,
            kl_form: self.kl_form,
            aggregation: Aggregation::TokenMean,
        }
    }

    /// Fresh model for this run. The tabular backend enumerates every
    /// question of the task family, so it only suits tiny tasks.
    pub fn init_model(&self) -> Result<PolicyModel> {
        let vocab = self.vocab()?;
        let arch = match self.backend {
            BackendKind::Neural => ArchConfig::Neural(GruConfig {
                embed_dim: self.embed_dim,
                hidden_dim: self.hidden_dim,
                readout_dim: self.readout_dim,
            }),
            BackendKind::Tabular => {
                if self.spelling_glyphs {
                    return Err(Error::Unsupported("tabular training with spelling glyphs".into()));
                }
                let instances = all_instances(&self.generator()?, &self.task_spec())?;
                ArchConfig::Tabular(TabularConfig {
                    rows: tabular_rows_for(&instances, &vocab, self.max_new_tokens),
                    init_scale: self.init_scale,
                })
            }
        };
        Ok(PolicyModel::init(vocab, self.context_length, arch, self.seed()?)?.with_think_grammar(self.think_grammar))
    }
}

/// Every chain the spec can generate; refuses anything past 10⁴ questions.
pub fn all_instances(gen: &TaskGenerator, spec: &TaskSpec) -> Result<Vec<crate::tasks::TaskInstance>> {
    let m = spec.modulus as usize;
    let per_step = spec.ops.len() * m;
    let total: usize = (spec.k_min..=spec.k_max).map(|k| m * per_step.pow(k as u32)).sum();
    if total > 10_000 {
        return Err(Error::Unsupported(format!("{total} questions is too many to enumerate")));
    }
    let mut out = Vec::with_capacity(total);
    for k in spec.k_min..=spec.k_max {
        for start in 0..m {
            for code in 0..per_step.pow(k as u32) {
                let mut c = code;
                let steps: Vec<(ArithOp, u32)> = (0..k)
                    .map(|_| {
                        let s = c % per_step;
                        c /= per_step;
                        (spec.ops[s / m], (s % m) as u32)
                    })
                    .collect();
                out.push(gen.from_chain(start as u32, &steps));
            }
        }
    }
    Ok(out)
}
