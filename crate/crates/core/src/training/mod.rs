//! The rollout-update loop.
//!
//! Each step draws one batch of instances, samples a group of rollouts per
//! instance, builds the loss on a fresh graph, and applies exactly one Adam
//! update. Step randomness comes from a ChaCha stream keyed by `(seed, step)`,
//! so a resumed run needs no saved generator state.

pub mod config;
pub mod eval;
pub mod loss;
mod state;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::autodiff::Graph;
use crate::baselines::{self, Method};
use crate::coupled::{sample_hybrid, write_rollout_dump, ScoredRollout};
use crate::error::{Error, Result};
use crate::estimators::assign_rewards_and_advantages;
use crate::policy::{load_checkpoint, save_checkpoint, PolicyModel};
use crate::tasks::{LayoutMode, TaskInstance};

pub use config::{all_instances, TrainingConfig};
pub use eval::{evaluate, greedy_prior_decode, EvalReport};
pub use state::{load_train_state, save_train_state};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const EVAL_FILE: &str = "eval.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const STATE_FILE: &str = "train_state.bin";
pub const CONFIG_SNAPSHOT: &str = "config.resolved.toml";
pub const FAILURE_DUMP: &str = "failed_rollouts.jsonl";

/// Linear warmup to `peak_lr`, then cosine decay to zero at `total_steps`.
pub fn lr_at(step: u64, cfg: &TrainingConfig) -> f64 {
    if step < cfg.warmup_steps {
        return cfg.peak_lr * step as f64 / cfg.warmup_steps as f64;
    }
    if cfg.total_steps <= cfg.warmup_steps {
        return cfg.peak_lr;
    }
    let span = (cfg.total_steps - cfg.warmup_steps) as f64;
    let progress = ((step - cfg.warmup_steps) as f64 / span).min(1.0);
    cfg.peak_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Adam with decay rates (0.9, 0.999) and epsilon 1e-8.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Adam {
    pub const BETA1: f64 = 0.9;
    pub const BETA2: f64 = 0.999;
    pub const EPS: f64 = 1e-8;

    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    /// Applies update number `t` (one-based).
    pub fn update(&mut self, params: &mut [f64], grad: &[f64], lr: f64, t: u64) {
        let bc1 = 1.0 - Self::BETA1.powi(t as i32);
        let bc2 = 1.0 - Self::BETA2.powi(t as i32);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * g;
            self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] -= lr * mhat / (vhat.sqrt() + Self::EPS);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub wall_time: f64,
    pub mean_reward_prior: f64,
    pub mean_reward_posterior: f64,
    pub mean_trace_length: f64,
    pub nll_loss: f64,
    pub kl_loss: f64,
    pub surrogate_loss: f64,
    pub clip_fraction: f64,
    pub valid_format_fraction: f64,
    pub lr: f64,
    pub n_prior: usize,
    pub n_posterior: usize,
    /// Per-position `KL(p′ ‖ p_φ)` over the full vocabulary, summed along
    /// each sampled trace and averaged over rollouts.
    pub kl_exact: f64,
}

impl StepMetrics {
    pub const SERIES: [&'static str; 12] = [
        "mean_reward_prior",
        "mean_reward_posterior",
        "mean_trace_length",
        "nll_loss",
        "kl_loss",
        "surrogate_loss",
        "clip_fraction",
        "valid_format_fraction",
        "lr",
        "n_prior",
        "n_posterior",
        "kl_exact",
    ];

    pub fn series(&self) -> [(&'static str, f64); 12] {
        [
            ("mean_reward_prior", self.mean_reward_prior),
            ("mean_reward_posterior", self.mean_reward_posterior),
            ("mean_trace_length", self.mean_trace_length),
            ("nll_loss", self.nll_loss),
            ("kl_loss", self.kl_loss),
            ("surrogate_loss", self.surrogate_loss),
            ("clip_fraction", self.clip_fraction),
            ("valid_format_fraction", self.valid_format_fraction),
            ("lr", self.lr),
            ("n_prior", self.n_prior as f64),
            ("n_posterior", self.n_posterior as f64),
            ("kl_exact", self.kl_exact),
        ]
    }

    fn is_finite(&self) -> bool {
        self.series().iter().all(|(_, v)| v.is_finite())
    }
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: PolicyModel,
    pub step: u64,
    pub adam: Adam,
    pub history: Vec<StepMetrics>,
    /// Frozen initial model, kept for methods that regularize toward it.
    pub reference: Option<PolicyModel>,
}

impl TrainState {
    pub fn new(cfg: &TrainingConfig) -> Result<Self> {
        let model = cfg.init_model()?;
        Ok(Self::from_model(model, cfg))
    }

    pub fn from_model(model: PolicyModel, cfg: &TrainingConfig) -> Self {
        let reference = (cfg.method == Method::Latro).then(|| model.clone());
        Self {
            adam: Adam::new(model.num_params()),
            model,
            step: 0,
            history: Vec::new(),
            reference,
        }
    }
}

/// Random stream for `step` of a run seeded with `seed`.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

/// Held-out instances, drawn from a stream no training step uses.
pub fn eval_instances(cfg: &TrainingConfig) -> Result<Vec<TaskInstance>> {
    let gen = cfg.generator()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed()? ^ 0x5eed_e7a1_0000_0001);
    rng.set_stream(u64::MAX);
    Ok((0..cfg.eval_instances).map(|_| gen.generate(&mut rng)).collect())
}

/// Sum over trace positions of the exact token-level `KL(p′ ‖ p_φ)`.
fn exact_token_kl(r: &ScoredRollout) -> f64 {
    let Some(passes) = &r.passes else { return 0.0 };
    (0..r.trace.len())
        .map(|t| {
            let p = &passes.prior.probs[t];
            let q = &passes.posterior.probs[t];
            p.iter()
                .zip(q)
                .filter(|(&pi, &qi)| pi + qi > 0.0)
                .map(|(&pi, &qi)| {
                    let m = 0.5 * pi + 0.5 * qi;
                    if pi > 0.0 {
                        m * (m / pi).ln()
                    } else {
                        f64::INFINITY
                    }
                })
                .sum::<f64>()
        })
        .sum()
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// One rollout-update step. On a non-finite loss or gradient the model is
/// left untouched and the offending rollouts are returned in the error path
/// through `failed`.
pub fn train_step(
    state: &mut TrainState,
    instances: &[TaskInstance],
    cfg: &TrainingConfig,
    rng: &mut ChaCha8Rng,
    failed: &mut Vec<ScoredRollout>,
) -> Result<StepMetrics> {
    let step = state.step;
    let model = &state.model;
    let mut groups: Vec<Vec<ScoredRollout>> = Vec::with_capacity(instances.len());
    for inst in instances {
        groups.push(match cfg.method {
            Method::Covrl => sample_hybrid(model, inst, &cfg.hybrid(), &cfg.sampling(), rng)?,
            m => baselines::sample_group(m, model, inst, cfg.group_size, &cfg.sampling(), rng)?,
        });
    }
    let (loss_value, surrogate, nll, kl, clip_fraction, grad, rollouts) = {
        let mut g = Graph::new(model);
        let (loss, surrogate, nll, kl, clip_fraction, rollouts) = match cfg.method {
            Method::Covrl => {
                assign_rewards_and_advantages(&mut groups, cfg.reward_variant, cfg.baseline_scope)?;
                let rollouts: Vec<ScoredRollout> = groups.into_iter().flatten().collect();
                let bound = loss::bind_all(&mut g, &rollouts, true)?;
                let parts = loss::total_loss(&mut g, &bound, &rollouts, &cfg.loss_weights())?;
                (parts.total, parts.surrogate, parts.nll, parts.kl, parts.clip_fraction, rollouts)
            }
            m => {
                let spec = baselines::BaselineSpec {
                    method: m,
                    beta: cfg.latro_beta,
                    reference: state.reference.as_ref(),
                };
                baselines::assign_rewards(&spec, &mut groups, cfg.baseline_scope, true)?;
                let rollouts: Vec<ScoredRollout> = groups.into_iter().flatten().collect();
                let bound = loss::bind_all(&mut g, &rollouts, true)?;
                let parts = baselines::baseline_loss(
                    &mut g,
                    &spec,
                    &bound,
                    &rollouts,
                    Some(cfg.clip_epsilon),
                    loss::Aggregation::TokenMean,
                )?;
                let zero = g.constant(0.0);
                (parts.total, parts.policy, parts.nll, zero, parts.clip_fraction, rollouts)
            }
        };
        let lv = g.value(loss);
        let grad = if lv.is_finite() { Some(g.backward(loss)?) } else { None };
        (lv, g.value(surrogate), g.value(nll), g.value(kl), clip_fraction, grad, rollouts)
    };
    let grad = match grad {
        Some(gr) if gr.is_finite() => gr,
        _ => {
            *failed = rollouts;
            return Err(Error::NonFinite {
                step,
                detail: format!("loss {loss_value}, surrogate {surrogate}, nll {nll}, kl {kl}"),
            });
        }
    };
    let lr = lr_at(step, cfg);
    state.adam.update(state.model.params_mut(), grad.values(), lr, step + 1);

    let prior = rollouts.iter().filter(|r| r.behavior_mode == LayoutMode::Prior);
    let posterior = rollouts.iter().filter(|r| r.behavior_mode == LayoutMode::Posterior);
    let metrics = StepMetrics {
        step,
        wall_time: 0.0,
        mean_reward_prior: mean(prior.clone().filter_map(|r| r.reward)),
        mean_reward_posterior: mean(posterior.clone().filter_map(|r| r.reward)),
        mean_trace_length: mean(rollouts.iter().map(|r| r.trace.len() as f64)),
        nll_loss: nll,
        kl_loss: kl,
        surrogate_loss: surrogate,
        clip_fraction,
        valid_format_fraction: mean(rollouts.iter().map(|r| r.parsed.valid_format as u8 as f64)),
        lr,
        n_prior: prior.count(),
        n_posterior: posterior.count(),
        kl_exact: mean(rollouts.iter().map(exact_token_kl)),
    };
    state.step += 1;
    Ok(metrics)
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub state: TrainState,
    pub evals: Vec<EvalReport>,
}

impl RunOutcome {
    pub fn final_accuracy(&self) -> f64 {
        self.evals.last().map_or(0.0, |e| e.accuracy)
    }

    pub fn initial_accuracy(&self) -> f64 {
        self.evals.first().map_or(0.0, |e| e.accuracy)
    }
}

struct Sink {
    dir: Option<PathBuf>,
    metrics: Option<BufWriter<File>>,
    evals: Option<BufWriter<File>>,
}

impl Sink {
    fn open(dir: Option<&Path>, append: bool) -> Result<Self> {
        let Some(dir) = dir else {
            return Ok(Self { dir: None, metrics: None, evals: None });
        };
        std::fs::create_dir_all(dir)?;
        let open = |name: &str| -> Result<BufWriter<File>> {
            let f = OpenOptions::new()
                .create(true)
                .write(true)
                .append(append)
                .truncate(!append)
                .open(dir.join(name))?;
            Ok(BufWriter::new(f))
        };
        Ok(Self {
            dir: Some(dir.to_path_buf()),
            metrics: Some(open(METRICS_FILE)?),
            evals: Some(open(EVAL_FILE)?),
        })
    }

    fn metrics(&mut self, m: &StepMetrics) -> Result<()> {
        if let Some(w) = &mut self.metrics {
            serde_json::to_writer(&mut *w, m)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    fn eval(&mut self, e: &EvalReport) -> Result<()> {
        if let Some(w) = &mut self.evals {
            serde_json::to_writer(&mut *w, e)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    fn checkpoint(&mut self, state: &TrainState) -> Result<()> {
        if let Some(dir) = &self.dir {
            for w in [&mut self.metrics, &mut self.evals].into_iter().flatten() {
                w.flush()?;
            }
            save_checkpoint(&state.model, &dir.join(CHECKPOINT_FILE))?;
            save_train_state(state, &dir.join(STATE_FILE))?;
        }
        Ok(())
    }
}

/// Trains from scratch. With `out`, writes the metrics and evaluation logs,
/// periodic and final checkpoints, and the resolved config.
pub fn run_training(cfg: &TrainingConfig, out: Option<&Path>) -> Result<RunOutcome> {
    cfg.validate()?;
    let state = TrainState::new(cfg)?;
    let mut sink = Sink::open(out, false)?;
    if let Some(dir) = out {
        std::fs::write(dir.join(CONFIG_SNAPSHOT), cfg.to_toml())?;
    }
    drive(cfg, state, Vec::new(), &mut sink, cfg.total_steps)
}

/// Like [`run_training`] but stops after `stop_at` steps, leaving a
/// checkpoint that [`resume_training`] continues from.
pub fn run_training_until(cfg: &TrainingConfig, out: &Path, stop_at: u64) -> Result<RunOutcome> {
    cfg.validate()?;
    let state = TrainState::new(cfg)?;
    let mut sink = Sink::open(Some(out), false)?;
    std::fs::write(out.join(CONFIG_SNAPSHOT), cfg.to_toml())?;
    drive(cfg, state, Vec::new(), &mut sink, stop_at.min(cfg.total_steps))
}

/// Continues a run from the latest checkpoint in `dir`.
pub fn resume_training(cfg: &TrainingConfig, dir: &Path) -> Result<RunOutcome> {
    cfg.validate()?;
    let model = load_checkpoint(&dir.join(CHECKPOINT_FILE))?;
    let mut state = TrainState::from_model(model, cfg);
    if cfg.method == Method::Latro {
        state.reference = Some(cfg.init_model()?);
    }
    load_train_state(&mut state, &dir.join(STATE_FILE))?;
    state.history = read_jsonl::<StepMetrics>(&dir.join(METRICS_FILE))?
        .into_iter()
        .filter(|m| m.step < state.step)
        .collect();
    let evals: Vec<EvalReport> = read_jsonl::<EvalReport>(&dir.join(EVAL_FILE))?
        .into_iter()
        .filter(|e| e.step <= state.step)
        .collect();
    rewrite_jsonl(&dir.join(METRICS_FILE), &state.history)?;
    rewrite_jsonl(&dir.join(EVAL_FILE), &evals)?;
    let mut sink = Sink::open(Some(dir), true)?;
    drive(cfg, state, evals, &mut sink, cfg.total_steps)
}

fn drive(
    cfg: &TrainingConfig,
    mut state: TrainState,
    mut evals: Vec<EvalReport>,
    sink: &mut Sink,
    stop_at: u64,
) -> Result<RunOutcome> {
    let seed = cfg.seed()?;
    let gen = cfg.generator()?;
    let held_out = eval_instances(cfg)?;
    let started = Instant::now();
    let run_eval = |state: &TrainState, evals: &mut Vec<EvalReport>, sink: &mut Sink| -> Result<()> {
        if evals.last().is_some_and(|e| e.step == state.step) {
            return Ok(());
        }
        let report = evaluate(&state.model, &held_out, cfg.max_new_tokens, state.step)?;
        sink.eval(&report)?;
        evals.push(report);
        Ok(())
    };
    if evals.is_empty() {
        run_eval(&state, &mut evals, sink)?;
    }
    while state.step < stop_at {
        let mut rng = step_rng(seed, state.step);
        let batch: Vec<TaskInstance> = (0..cfg.instances_per_batch).map(|_| gen.generate(&mut rng)).collect();
        let mut failed = Vec::new();
        let mut metrics = match train_step(&mut state, &batch, cfg, &mut rng, &mut failed) {
            Ok(m) => m,
            Err(e) => {
                if let Some(dir) = &sink.dir {
                    write_rollout_dump(&failed, BufWriter::new(File::create(dir.join(FAILURE_DUMP))?))?;
                }
                return Err(e);
            }
        };
        if !cfg.deterministic {
            metrics.wall_time = started.elapsed().as_secs_f64();
        }
        if !metrics.is_finite() {
            return Err(Error::NonFinite {
                step: metrics.step,
                detail: format!("metrics {metrics:?}"),
            });
        }
        sink.metrics(&metrics)?;
        state.history.push(metrics);
        if state.step % cfg.eval_every == 0 || state.step == cfg.total_steps {
            run_eval(&state, &mut evals, sink)?;
        }
        if cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every == 0 {
            sink.checkpoint(&state)?;
        }
    }
    if state.step == cfg.total_steps {
        run_eval(&state, &mut evals, sink)?;
    }
    sink.checkpoint(&state)?;
    Ok(RunOutcome { state, evals })
}

pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path)?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

fn rewrite_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in rows {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::BackendKind;
    use crate::tasks::ArithOp;

    fn tiny(seed: u64) -> TrainingConfig {
        let mut c = TrainingConfig::new(seed, 0.05);
        c.backend = BackendKind::Tabular;
        c.modulus = 3;
        c.ops = vec![ArithOp::Add];
        c.max_new_tokens = 2;
        c.context_length = 16;
        c.init_scale = 0.5;
        c.total_steps = 12;
        c.warmup_steps = 2;
        c.instances_per_batch = 4;
        c.group_size = 4;
        c.eval_instances = 9;
        c.eval_every = 5;
        c.deterministic = true;
        c
    }

    #[test]
    fn schedule_endpoints() {
        let mut c = TrainingConfig::new(1, 3e-3);
        c.total_steps = 100;
        c.warmup_steps = 10;
        assert_eq!(lr_at(0, &c), 0.0);
        assert_eq!(lr_at(10, &c), 3e-3);
        assert!(lr_at(100, &c).abs() < 1e-12);
        assert!(lr_at(5, &c) > 0.0 && lr_at(5, &c) < 3e-3);
        assert!(lr_at(60, &c) < lr_at(30, &c));
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut a = Adam::new(2);
        let mut p = vec![1.0, -1.0];
        a.update(&mut p, &[0.5, -2.0], 0.1, 1);
        assert!((p[0] - 0.9).abs() < 1e-6 && (p[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn zero_lr_keeps_parameters_bitwise() {
        let mut c = tiny(3);
        c.peak_lr = 0.0;
        let init = c.init_model().unwrap();
        let out = run_training(&c, None).unwrap();
        let bits = |m: &PolicyModel| m.params().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&out.state.model), bits(&init));
        assert_eq!(out.state.history.len(), 12);
    }

    #[test]
    fn zero_steps_return_initial_model() {
        let mut c = tiny(4);
        c.total_steps = 0;
        let out = run_training(&c, None).unwrap();
        assert_eq!(out.state.model.params(), c.init_model().unwrap().params());
        assert!(out.state.history.is_empty());
        assert_eq!(out.evals.len(), 1);
    }

    #[test]
    fn fixed_seed_is_bitwise_reproducible() {
        let c = tiny(5);
        let a = run_training(&c, None).unwrap();
        let b = run_training(&c, None).unwrap();
        assert_eq!(a.state.history, b.state.history);
        assert_eq!(a.state.model.params(), b.state.model.params());
        let other = run_training(&tiny(6), None).unwrap();
        assert_ne!(a.state.history, other.state.history);
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let dir = tempfile::tempdir().unwrap();
        let (full_dir, cut_dir) = (dir.path().join("full"), dir.path().join("cut"));
        let c = tiny(7);
        let full = run_training(&c, Some(&full_dir)).unwrap();
        run_training_until(&c, &cut_dir, 8).unwrap();
        let resumed = resume_training(&c, &cut_dir).unwrap();
        assert_eq!(resumed.state.model.params(), full.state.model.params());
        assert_eq!(resumed.state.history, full.state.history);
        assert_eq!(resumed.evals, full.evals);
        let read = |d: &Path, f: &str| std::fs::read(d.join(f)).unwrap();
        for f in [METRICS_FILE, EVAL_FILE, CHECKPOINT_FILE, STATE_FILE] {
            assert_eq!(read(&cut_dir, f), read(&full_dir, f), "{f}");
        }
    }

    #[test]
    fn outputs_and_snapshot() {
        let dir = tempfile::tempdir().unwrap();
        let c = tiny(8);
        run_training(&c, Some(dir.path())).unwrap();
        let snap = std::fs::read_to_string(dir.path().join(CONFIG_SNAPSHOT)).unwrap();
        assert_eq!(TrainingConfig::from_toml(&snap).unwrap(), c);
        let rows: Vec<StepMetrics> = read_jsonl(&dir.path().join(METRICS_FILE)).unwrap();
        assert_eq!(rows.len(), 12);
        assert!(rows.iter().all(|m| m.wall_time == 0.0));
        let ckpt = load_checkpoint(&dir.path().join(CHECKPOINT_FILE)).unwrap();
        assert_eq!(ckpt.num_params(), c.init_model().unwrap().num_params());
    }
}
