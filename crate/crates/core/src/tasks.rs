//! Synthetic reasoning tasks and the two conditioning layouts.
//!
//! The default family is a modular arithmetic chain: a start residue followed
//! by `k` operations, e.g. `3+4;*2` over `Z_10`. The reference trace lists the
//! running value after each operation (`7;4`) and the answer is the final
//! residue (`4`).
//!
//! Layouts, with `q` the question tokens and `y` the answer tokens:
//!
//! ```text
//! prior      q <t>                        -> model writes  trace </t>, then <a> y </a>
//! posterior  q <a> y </a> <t>             -> model writes  trace </t>
//! ```

use rand::Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};

use crate::error::{Error, Result};
use crate::vocab::{Token, Vocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayoutMode {
    Prior,
    Posterior,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ArithOp {
    #[serde(rename = "+")]
    Add,
    #[serde(rename = "-")]
    Sub,
    #[serde(rename = "*")]
    Mul,
}

impl ArithOp {
    pub fn symbol(self) -> &'static str {
        match self {
            ArithOp::Add => "+",
            ArithOp::Sub => "-",
            ArithOp::Mul => "*",
        }
    }

    pub fn apply(self, a: u32, b: u32, modulus: u32) -> u32 {
        match self {
            ArithOp::Add => (a + b) % modulus,
            ArithOp::Sub => (a + modulus - b % modulus) % modulus,
            ArithOp::Mul => (a * b) % modulus,
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "+" => Some(ArithOp::Add),
            "-" => Some(ArithOp::Sub),
            "*" | "x" | "×" => Some(ArithOp::Mul),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskFamily {
    ModChain,
}

impl std::str::FromStr for TaskFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mod_chain" => Ok(TaskFamily::ModChain),
            other => Err(Error::Config(format!("unknown task family {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub family: TaskFamily,
    pub modulus: u32,
    pub k_min: usize,
    pub k_max: usize,
    pub ops: Vec<ArithOp>,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            family: TaskFamily::ModChain,
            modulus: 10,
            k_min: 1,
            k_max: 1,
            ops: vec![ArithOp::Add, ArithOp::Mul],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub task_id: String,
    pub question_tokens: Vec<Token>,
    pub answer_tokens: Vec<Token>,
    pub difficulty: usize,
    /// Canonical think span (without the closing delimiter), when known.
    #[serde(default)]
    pub reference_trace: Vec<Token>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedResponse {
    pub think_tokens: Vec<Token>,
    pub answer_tokens: Vec<Token>,
    pub valid_format: bool,
}

impl ParsedResponse {
    fn invalid() -> Self {
        Self {
            think_tokens: Vec::new(),
            answer_tokens: Vec::new(),
            valid_format: false,
        }
    }
}

/// Generator for modular arithmetic chains over a fixed vocabulary.
#[derive(Debug, Clone)]
pub struct TaskGenerator {
    spec: TaskSpec,
    digits: Vec<Token>,
    ops: Vec<(ArithOp, Token)>,
    sep: Token,
}

impl TaskGenerator {
    /// Fails when the spec cannot produce instances whose reference trace
    /// (plus its closing delimiter) fits in `max_new_tokens`.
    pub fn new(spec: TaskSpec, vocab: &Vocabulary, max_new_tokens: usize) -> Result<Self> {
        let TaskFamily::ModChain = spec.family;
        if !(2..=10).contains(&spec.modulus) {
            return Err(Error::Config(format!("modulus {} must lie in 2..=10", spec.modulus)));
        }
        if spec.k_min == 0 || spec.k_min > spec.k_max {
            return Err(Error::Config(format!(
                "chain length range {}..={} is empty or starts at zero",
                spec.k_min, spec.k_max
            )));
        }
        if spec.ops.is_empty() {
            return Err(Error::Config("task spec lists no operations".into()));
        }
        if 2 * spec.k_max > max_new_tokens {
            return Err(Error::Config(format!(
                "a {}-step reference trace needs {} tokens but the budget is {max_new_tokens}",
                spec.k_max,
                2 * spec.k_max
            )));
        }
        let digits = (0..spec.modulus)
            .map(|d| {
                vocab
                    .lookup(&d.to_string())
                    .ok_or_else(|| Error::Config(format!("vocabulary lacks digit {d}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let ops = spec
            .ops
            .iter()
            .map(|&op| {
                vocab
                    .lookup(op.symbol())
                    .map(|t| (op, t))
                    .ok_or_else(|| Error::Config(format!("vocabulary lacks operator {}", op.symbol())))
            })
            .collect::<Result<Vec<_>>>()?;
        let sep = vocab
            .lookup(";")
            .ok_or_else(|| Error::Config("vocabulary lacks the ';' separator".into()))?;
        Ok(Self { spec, digits, ops, sep })
    }

    pub fn spec(&self) -> &TaskSpec {
        &self.spec
    }

    pub fn generate(&self, rng: &mut impl Rng) -> TaskInstance {
        let m = self.spec.modulus;
        let k = rng.gen_range(self.spec.k_min..=self.spec.k_max);
        let start = rng.gen_range(0..m);
        let steps: Vec<(ArithOp, u32)> = (0..k)
            .map(|_| {
                let (op, _) = self.ops[rng.gen_range(0..self.ops.len())];
                (op, rng.gen_range(0..m))
            })
            .collect();
        self.from_chain(start, &steps)
    }

    /// Builds the instance for an explicit chain.
    pub fn from_chain(&self, start: u32, steps: &[(ArithOp, u32)]) -> TaskInstance {
        let m = self.spec.modulus;
        let digit = |d: u32| self.digits[(d % m) as usize];
        let op_token = |op: ArithOp| {
            self.ops
                .iter()
                .find(|(o, _)| *o == op)
                .map(|(_, t)| *t)
                .expect("operator registered in the spec")
        };
        let mut question = vec![digit(start)];
        let mut trace = Vec::with_capacity(2 * steps.len());
        let mut id = (start % m).to_string();
        let mut value = start % m;
        for (i, &(op, operand)) in steps.iter().enumerate() {
            if i > 0 {
                question.push(self.sep);
                trace.push(self.sep);
                id.push(';');
            }
            question.push(op_token(op));
            question.push(digit(operand));
            id.push_str(op.symbol());
            id.push_str(&(operand % m).to_string());
            value = op.apply(value, operand % m, m);
            trace.push(digit(value));
        }
        TaskInstance {
            task_id: id,
            question_tokens: question,
            answer_tokens: vec![digit(value)],
            difficulty: steps.len(),
            reference_trace: trace,
        }
    }

    /// Recovers the chain behind a question, if it is well formed.
    pub fn parse_question(&self, question: &[Token]) -> Option<(u32, Vec<(ArithOp, u32)>)> {
        let digit_of = |t: Token| self.digits.iter().position(|&d| d == t).map(|d| d as u32);
        let op_of = |t: Token| self.ops.iter().find(|(_, ot)| *ot == t).map(|(o, _)| *o);
        let (&first, mut rest) = question.split_first()?;
        let start = digit_of(first)?;
        let mut steps = Vec::new();
        while !rest.is_empty() {
            if !steps.is_empty() {
                if rest[0] != self.sep {
                    return None;
                }
                rest = &rest[1..];
            }
            if rest.len() < 2 {
                return None;
            }
            steps.push((op_of(rest[0])?, digit_of(rest[1])?));
            rest = &rest[2..];
        }
        Some((start, steps))
    }
}

/// Context handed to the model for the given layout.
pub fn render_context(instance: &TaskInstance, mode: LayoutMode, vocab: &Vocabulary) -> Vec<Token> {
    let sp = vocab.specials();
    let mut ctx = instance.question_tokens.clone();
    match mode {
        LayoutMode::Prior => ctx.push(sp.think_open),
        LayoutMode::Posterior => {
            ctx.push(sp.answer_open);
            ctx.extend_from_slice(&instance.answer_tokens);
            ctx.push(sp.answer_close);
            ctx.push(sp.think_open);
        }
    }
    ctx
}

/// Parses a complete assistant response (starting at its first delimiter).
///
/// Valid responses follow the layout exactly, optionally followed by END:
/// `<t> think </t> <a> answer </a>` in prior mode and
/// `<a> answer </a> <t> think </t>` in posterior mode, with no delimiter
/// inside either span.
pub fn validate_format(full_sequence: &[Token], mode: LayoutMode, vocab: &Vocabulary) -> ParsedResponse {
    let sp = vocab.specials();
    let body = match full_sequence.split_last() {
        Some((&last, rest)) if last == sp.end => rest,
        _ => full_sequence,
    };
    let positions = |tok: Token| -> Vec<usize> {
        body.iter().enumerate().filter(|(_, &t)| t == tok).map(|(i, _)| i).collect()
    };
    let delims = [sp.think_open, sp.think_close, sp.answer_open, sp.answer_close];
    let mut at = [0usize; 4];
    for (slot, &d) in at.iter_mut().zip(&delims) {
        match positions(d)[..] {
            [p] => *slot = p,
            _ => return ParsedResponse::invalid(),
        }
    }
    if body.contains(&sp.end) {
        return ParsedResponse::invalid();
    }
    let [to, tc, ao, ac] = at;
    let ordered = match mode {
        LayoutMode::Prior => to == 0 && tc > to && ao == tc + 1 && ac > ao && ac == body.len() - 1,
        LayoutMode::Posterior => ao == 0 && ac > ao && to == ac + 1 && tc > to && tc == body.len() - 1,
    };
    if !ordered {
        return ParsedResponse::invalid();
    }
    ParsedResponse {
        think_tokens: body[to + 1..tc].to_vec(),
        answer_tokens: body[ao + 1..ac].to_vec(),
        valid_format: true,
    }
}

/// Replaces every run of content tokens that spells a special string with
/// the atomic special id. Idempotent.
pub fn canonicalize_tokens(raw: &[Token], vocab: &Vocabulary) -> Vec<Token> {
    let specials: Vec<(Token, &str)> = vocab
        .specials()
        .all()
        .iter()
        .map(|&t| (t, vocab.symbol(t).expect("special in vocab")))
        .collect();
    let mut out = Vec::with_capacity(raw.len());
    let mut i = 0;
    'outer: while i < raw.len() {
        for &(special, spelled) in &specials {
            if let Some(len) = spells(raw, i, spelled, vocab) {
                out.push(special);
                i += len;
                continue 'outer;
            }
        }
        out.push(raw[i]);
        i += 1;
    }
    out
}

/// Number of content tokens from `start` whose symbols concatenate to `target`.
fn spells(raw: &[Token], start: usize, target: &str, vocab: &Vocabulary) -> Option<usize> {
    let mut rest = target;
    let mut j = start;
    while !rest.is_empty() {
        let t = *raw.get(j)?;
        if vocab.is_special(t) {
            return None;
        }
        let sym = vocab.symbol(t)?;
        rest = rest.strip_prefix(sym)?;
        j += 1;
    }
    (j > start).then_some(j - start)
}

#[derive(Debug, Serialize, Deserialize)]
struct InstanceRecord {
    task_id: String,
    question: Vec<Token>,
    answer: Vec<Token>,
}

/// Writes one JSON record per line: task id, question tokens, answer tokens.
pub fn export_instances(instances: &[TaskInstance], mut out: impl Write) -> Result<()> {
    for inst in instances {
        let rec = InstanceRecord {
            task_id: inst.task_id.clone(),
            question: inst.question_tokens.clone(),
            answer: inst.answer_tokens.clone(),
        };
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Reads records written by [`export_instances`]; the generator restores
/// difficulty and reference traces.
pub fn import_instances(input: impl BufRead, generator: &TaskGenerator, vocab: &Vocabulary) -> Result<Vec<TaskInstance>> {
    let mut out = Vec::new();
    for (lineno, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: InstanceRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Config(format!("instance record on line {}: {e}", lineno + 1)))?;
        vocab.check(&rec.question)?;
        vocab.check(&rec.answer)?;
        if rec.answer.is_empty() || rec.question.iter().chain(&rec.answer).any(|&t| vocab.is_special(t)) {
            return Err(Error::Config(format!("instance record on line {} is malformed", lineno + 1)));
        }
        let (difficulty, reference_trace) = match generator.parse_question(&rec.question) {
            Some((start, steps)) => {
                let inst = generator.from_chain(start, &steps);
                (inst.difficulty, inst.reference_trace)
            }
            None => (0, Vec::new()),
        };
        out.push(TaskInstance {
            task_id: rec.task_id,
            question_tokens: rec.question,
            answer_tokens: rec.answer,
            difficulty,
            reference_trace,
        });
    }
    Ok(out)
}

/// Assistant response that completes `context` with the reference trace and
/// answer in layout order (the delimiter already in the context included).
pub fn reference_response(instance: &TaskInstance, mode: LayoutMode, vocab: &Vocabulary) -> Vec<Token> {
    let sp = vocab.specials();
    let mut think = vec![sp.think_open];
    think.extend_from_slice(&instance.reference_trace);
    think.push(sp.think_close);
    let mut answer = vec![sp.answer_open];
    answer.extend_from_slice(&instance.answer_tokens);
    answer.push(sp.answer_close);
    match mode {
        LayoutMode::Prior => [think, answer].concat(),
        LayoutMode::Posterior => [answer, think].concat(),
    }
}
