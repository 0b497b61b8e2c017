//! Command-line entry points. Exit status: 0 success, 1 runtime or
//! validation failure, 2 usage or configuration error.

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::baselines::Method;
use crate::error::{Error, Result};
use crate::oracle::{run_validation_suite, Outcome, SuiteEntry, SuiteOptions};
use crate::training::{read_jsonl, resume_training, run_training, EvalReport, StepMetrics, TrainingConfig, CHECKPOINT_FILE, EVAL_FILE, METRICS_FILE};

pub const EXIT_OK: u8 = 0;
pub const EXIT_FAILURE: u8 = 1;
pub const EXIT_USAGE: u8 = 2;

#[derive(Debug, Parser)]
#[command(name = "covrl", version, about = "Coupled variational policy-gradient training with exact oracles")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one run from a config file.
    Train(TrainArgs),
    /// Run the enumeration-oracle validation suite.
    Validate(ValidateArgs),
    /// Train one run per value of a config axis and summarize.
    Sweep(SweepArgs),
    /// Convert metrics logs into tidy per-series tables.
    Export(ExportArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub deterministic: bool,
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Continue from the checkpoint in the output directory.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    /// Defaults to a fresh random seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 20_000)]
    pub samples: usize,
    /// Adds a constant to every KL estimator sample (fault injection).
    #[arg(long, default_value_t = 0.0)]
    pub inject_bias: f64,
    /// Also writes `validation.jsonl` here.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Alpha,
    LambdaKl,
    LambdaNll,
    RewardVariant,
    Method,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long, value_enum)]
    pub axis: SweepAxis,
    #[arg(long, num_args = 1.., value_delimiter = ',')]
    pub values: Vec<String>,
    /// Seeds shared by every value; defaults to the config seed.
    #[arg(long, num_args = 1.., value_delimiter = ',')]
    pub seeds: Vec<u64>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    /// A run directory or a directory of runs.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
}

/// Error classes mapped to exit codes.
#[derive(Debug)]
enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::Usage(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type CmdResult = std::result::Result<u8, Failure>;

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let result = match cli.command {
        Command::Train(a) => cmd_train(&a),
        Command::Validate(a) => cmd_validate(&a),
        Command::Sweep(a) => cmd_sweep(&a),
        Command::Export(a) => cmd_export(&a),
    };
    match result {
        Ok(code) => code,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            EXIT_USAGE
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            EXIT_FAILURE
        }
    }
}

/// Loads and validates the config with command-line overrides applied.
pub fn resolve_config(run: &RunArgs) -> Result<TrainingConfig> {
    let mut cfg = TrainingConfig::load(&run.config)?;
    if let Some(s) = run.seed {
        cfg.seed = Some(s);
    }
    if run.deterministic {
        cfg.deterministic = true;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn prepare_output(dir: &Path) -> std::result::Result<(), Failure> {
    std::fs::create_dir_all(dir).map_err(|e| Failure::Usage(format!("output directory {}: {e}", dir.display())))
}

fn cmd_train(a: &TrainArgs) -> CmdResult {
    let cfg = resolve_config(&a.run)?;
    prepare_output(&a.run.output)?;
    let outcome = if a.resume {
        if !a.run.output.join(CHECKPOINT_FILE).exists() {
            return Err(Failure::Usage(format!("no checkpoint to resume in {}", a.run.output.display())));
        }
        resume_training(&cfg, &a.run.output)?
    } else {
        run_training(&cfg, Some(&a.run.output))?
    };
    for e in &outcome.evals {
        println!("step {:>5}  accuracy {:.4}  trace_len {:.2}", e.step, e.accuracy, e.mean_trace_length);
    }
    println!("wrote {}", a.run.output.display());
    Ok(EXIT_OK)
}

/// Aligned text rendering of suite entries.
pub fn render_suite(entries: &[SuiteEntry]) -> String {
    let width = entries.iter().map(|e| e.name.len()).max().unwrap_or(0);
    let mut s = String::new();
    for e in entries {
        let verdict = if e.outcome.pass() { "pass" } else { "FAIL" };
        let detail = match &e.outcome {
            Outcome::MonteCarlo(r) => format!(
                "exact {:>12.6e}  mc {:>12.6e} ± {:.2e}  z {:>7.3}  n {}",
                r.exact_value, r.mc_mean, r.mc_stderr, r.z_score, r.n_samples
            ),
            Outcome::Exact(c) => format!("value {:>12.6e}  reference {:>12.6e}  tol {:.0e}", c.value, c.reference, c.tolerance),
        };
        s.push_str(&format!("{verdict}  {:<width$}  {detail}\n", e.name));
    }
    s
}

fn cmd_validate(a: &ValidateArgs) -> CmdResult {
    let seed = a.seed.unwrap_or_else(rand::random);
    if a.samples < crate::oracle::MIN_MC_SAMPLES {
        return Err(Failure::Usage(format!("--samples must be at least {}", crate::oracle::MIN_MC_SAMPLES)));
    }
    let opts = SuiteOptions { seed, samples: a.samples, inject_bias: a.inject_bias };
    let entries = run_validation_suite(&opts)?;
    println!("validation suite, seed {seed}, {} samples", a.samples);
    print!("{}", render_suite(&entries));
    if let Some(dir) = &a.output {
        prepare_output(dir)?;
        let mut w = BufWriter::new(File::create(dir.join("validation.jsonl"))?);
        for e in &entries {
            serde_json::to_writer(&mut w, e).map_err(Error::from)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
    }
    let failed = entries.iter().filter(|e| !e.outcome.pass()).count();
    println!("{} of {} checks passed", entries.len() - failed, entries.len());
    Ok(if failed == 0 { EXIT_OK } else { EXIT_FAILURE })
}

/// Applies one sweep value to a config.
pub fn apply_axis(cfg: &mut TrainingConfig, axis: SweepAxis, value: &str) -> Result<()> {
    let num = || {
        value
            .parse::<f64>()
            .map_err(|_| Error::Config(format!("sweep value {value:?} is not a number")))
    };
    match axis {
        SweepAxis::Alpha => cfg.alpha = num()?,
        SweepAxis::LambdaKl => cfg.lambda_kl = num()?,
        SweepAxis::LambdaNll => cfg.lambda_nll = num()?,
        SweepAxis::RewardVariant => cfg.reward_variant = value.parse()?,
        SweepAxis::Method => cfg.method = value.parse::<Method>()?,
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRun {
    pub value: String,
    pub seed: u64,
    pub dir: PathBuf,
    pub final_accuracy: f64,
    pub final_trace_length: f64,
    pub final_kl_exact: f64,
    pub final_reward_prior: f64,
    pub final_reward_posterior: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummaryRow {
    pub value: String,
    pub median_accuracy: f64,
    pub median_trace_length: f64,
    pub median_kl_exact: f64,
    pub runs: Vec<SweepRun>,
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Mean of the last `window` logged values of a series.
pub fn tail_mean(history: &[StepMetrics], window: usize, f: impl Fn(&StepMetrics) -> f64) -> f64 {
    let tail = &history[history.len().saturating_sub(window)..];
    tail.iter().map(f).sum::<f64>() / tail.len().max(1) as f64
}

/// Directory name for one sweep run.
pub fn run_dir(root: &Path, axis: SweepAxis, value: &str, seed: u64) -> PathBuf {
    let axis = serde_json::to_value(axis).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
    root.join(format!("{axis}={value}")).join(format!("seed-{seed}"))
}

/// Runs a sweep and returns its summary rows in value order.
pub fn sweep(base: &TrainingConfig, axis: SweepAxis, values: &[String], seeds: &[u64], out: &Path) -> Result<Vec<SweepSummaryRow>> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    let seeds = if seeds.is_empty() { vec![base.seed()?] } else { seeds.to_vec() };
    let mut configs = Vec::new();
    for v in values {
        let mut cfg = base.clone();
        apply_axis(&mut cfg, axis, v)?;
        cfg.validate()?;
        configs.push(cfg);
    }
    let mut rows = Vec::new();
    for (v, cfg) in values.iter().zip(configs) {
        let mut runs = Vec::new();
        for &seed in &seeds {
            let mut c = cfg.clone();
            c.seed = Some(seed);
            let dir = run_dir(out, axis, v, seed);
            let o = run_training(&c, Some(&dir))?;
            let h = &o.state.history;
            runs.push(SweepRun {
                value: v.clone(),
                seed,
                dir,
                final_accuracy: o.final_accuracy(),
                final_trace_length: tail_mean(h, 10, |m| m.mean_trace_length),
                final_kl_exact: tail_mean(h, 10, |m| m.kl_exact),
                final_reward_prior: tail_mean(h, 10, |m| m.mean_reward_prior),
                final_reward_posterior: tail_mean(h, 10, |m| m.mean_reward_posterior),
            });
        }
        let col = |f: fn(&SweepRun) -> f64| median(&runs.iter().map(f).collect::<Vec<_>>());
        rows.push(SweepSummaryRow {
            value: v.clone(),
            median_accuracy: col(|r| r.final_accuracy),
            median_trace_length: col(|r| r.final_trace_length),
            median_kl_exact: col(|r| r.final_kl_exact),
            runs,
        });
    }
    std::fs::write(out.join("summary.json"), serde_json::to_string_pretty(&rows)?)?;
    Ok(rows)
}

fn cmd_sweep(a: &SweepArgs) -> CmdResult {
    if a.values.is_empty() {
        return Err(Failure::Usage("--values must list at least one value".into()));
    }
    let cfg = resolve_config(&a.run)?;
    prepare_output(&a.run.output)?;
    let rows = sweep(&cfg, a.axis, &a.values, &a.seeds, &a.run.output)?;
    println!("{:<16} {:>10} {:>10} {:>10}", "value", "accuracy", "trace_len", "kl_exact");
    for r in &rows {
        println!("{:<16} {:>10.4} {:>10.3} {:>10.5}", r.value, r.median_accuracy, r.median_trace_length, r.median_kl_exact);
    }
    Ok(EXIT_OK)
}

/// Every directory under `root` (inclusive) holding a metrics log, sorted.
pub fn find_runs(root: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        if dir.join(METRICS_FILE).is_file() {
            out.push(dir.clone());
        }
        for entry in std::fs::read_dir(&dir)? {
            let p = entry?.path();
            if p.is_dir() {
                stack.push(p);
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Writes one `<series>.tsv` per metric with columns `run step value`, plus
/// `accuracy.tsv` from the evaluation logs. Returns the files written.
pub fn export(input: &Path, output: &Path) -> Result<Vec<PathBuf>> {
    let runs = find_runs(input)?;
    if runs.is_empty() {
        return Err(Error::InvalidArgument(format!("no {METRICS_FILE} under {}", input.display())));
    }
    let mut tables: BTreeMap<&str, String> = BTreeMap::new();
    for name in StepMetrics::SERIES.iter().copied().chain(["accuracy"]) {
        tables.insert(name, "run\tstep\tvalue\n".to_string());
    }
    for dir in &runs {
        let label = dir.strip_prefix(input).unwrap_or(dir).to_string_lossy().replace('\\', "/");
        let label = if label.is_empty() { ".".to_string() } else { label };
        for m in read_jsonl::<StepMetrics>(&dir.join(METRICS_FILE))? {
            for (name, v) in m.series() {
                tables.get_mut(name).expect("known series").push_str(&format!("{label}\t{}\t{v}\n", m.step));
            }
        }
        let eval_path = dir.join(EVAL_FILE);
        if eval_path.is_file() {
            for e in read_jsonl::<EvalReport>(&eval_path)? {
                tables.get_mut("accuracy").expect("known series").push_str(&format!("{label}\t{}\t{}\n", e.step, e.accuracy));
            }
        }
    }
    std::fs::create_dir_all(output)?;
    let mut written = Vec::new();
    for (name, body) in tables {
        let p = output.join(format!("{name}.tsv"));
        std::fs::write(&p, body)?;
        written.push(p);
    }
    Ok(written)
}

fn cmd_export(a: &ExportArgs) -> CmdResult {
    if !a.input.is_dir() {
        return Err(Failure::Runtime(format!("{} is not a directory", a.input.display())));
    }
    let files = export(&a.input, &a.output)?;
    println!("wrote {} tables to {}", files.len(), a.output.display());
    Ok(EXIT_OK)
}
