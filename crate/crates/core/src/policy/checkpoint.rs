//! Model checkpoints: a text header followed by raw little-endian `f64`s.
//!
//! ```text
//! format: covrl-checkpoint/1
//! backend: neural
//! vocab_size: 25
//! vocab: ["0","1",...]
//! context_length: 64
//! arch: {"backend":"neural","embed_dim":24,"hidden_dim":64,"readout_dim":0}
//! think_grammar: true
//! param_count: 12345
//! data:
//! <param_count * 8 bytes>
//! ```

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use super::{ArchConfig, PolicyModel};
use crate::error::{Error, Result};
use crate::vocab::Vocabulary;

pub const CHECKPOINT_FORMAT: &str = "covrl-checkpoint/1";

pub fn write_checkpoint(model: &PolicyModel, mut out: impl Write) -> Result<()> {
    let backend = match model.backend() {
        super::BackendKind::Tabular => "tabular",
        super::BackendKind::Neural => "neural",
    };
    writeln!(out, "format: {CHECKPOINT_FORMAT}")?;
    writeln!(out, "backend: {backend}")?;
    writeln!(out, "vocab_size: {}", model.vocab().size())?;
    writeln!(out, "vocab: {}", serde_json::to_string(model.vocab())?)?;
    writeln!(out, "context_length: {}", model.context_length())?;
    writeln!(out, "arch: {}", serde_json::to_string(model.arch())?)?;
    writeln!(out, "think_grammar: {}", model.think_grammar())?;
    writeln!(out, "param_count: {}", model.num_params())?;
    writeln!(out, "data:")?;
    write_f64s(&mut out, model.params())?;
    out.flush()?;
    Ok(())
}

pub(crate) fn write_f64s(out: &mut impl Write, values: &[f64]) -> Result<()> {
    let mut buf = Vec::with_capacity(values.len() * 8);
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&buf)?;
    Ok(())
}

pub(crate) fn read_f64s(input: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    input
        .read_exact(&mut buf)
        .map_err(|e| Error::Checkpoint(format!("truncated parameter block: {e}")))?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

/// Reads `key: value` header lines up to and including `data:`.
pub(crate) fn read_header(input: &mut impl BufRead) -> Result<Vec<(String, String)>> {
    let mut fields = Vec::new();
    loop {
        let mut line = String::new();
        if input.read_line(&mut line)? == 0 {
            return Err(Error::Checkpoint("missing data marker".into()));
        }
        let line = line.trim_end_matches('\n');
        if line == "data:" {
            return Ok(fields);
        }
        let (k, v) = line
            .split_once(": ")
            .ok_or_else(|| Error::Checkpoint(format!("malformed header line {line:?}")))?;
        fields.push((k.to_string(), v.to_string()));
    }
}

pub(crate) fn field<'a>(fields: &'a [(String, String)], key: &str) -> Result<&'a str> {
    fields
        .iter()
        .find(|(k, _)| k == key)
        .map(|(_, v)| v.as_str())
        .ok_or_else(|| Error::Checkpoint(format!("missing header field {key:?}")))
}

pub(crate) fn parse_field<T: std::str::FromStr>(fields: &[(String, String)], key: &str) -> Result<T> {
    field(fields, key)?
        .parse()
        .map_err(|_| Error::Checkpoint(format!("unparsable header field {key:?}")))
}

pub fn read_checkpoint(input: impl Read) -> Result<PolicyModel> {
    let mut input = BufReader::new(input);
    let fields = read_header(&mut input)?;
    let format = field(&fields, "format")?;
    if format != CHECKPOINT_FORMAT {
        return Err(Error::Checkpoint(format!("unsupported format {format:?}")));
    }
    let vocab: Vocabulary = serde_json::from_str(field(&fields, "vocab")?)?;
    let vocab_size: usize = parse_field(&fields, "vocab_size")?;
    if vocab.size() != vocab_size {
        return Err(Error::Checkpoint(format!(
            "vocab_size {vocab_size} disagrees with {} listed symbols",
            vocab.size()
        )));
    }
    let context_length: usize = parse_field(&fields, "context_length")?;
    let arch: ArchConfig = serde_json::from_str(field(&fields, "arch")?)?;
    let backend = field(&fields, "backend")?;
    let expected = match arch.kind() {
        super::BackendKind::Tabular => "tabular",
        super::BackendKind::Neural => "neural",
    };
    if backend != expected {
        return Err(Error::Checkpoint(format!("backend {backend:?} disagrees with arch")));
    }
    let think_grammar: bool = parse_field(&fields, "think_grammar")?;
    let n: usize = parse_field(&fields, "param_count")?;
    let params = read_f64s(&mut input, n)?;
    let mut rest = Vec::new();
    input.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", rest.len())));
    }
    Ok(PolicyModel::from_parts(vocab, context_length, arch, params)?.with_think_grammar(think_grammar))
}

pub fn save_checkpoint(model: &PolicyModel, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_checkpoint(model, std::io::BufWriter::new(file))
}

pub fn load_checkpoint(path: &Path) -> Result<PolicyModel> {
    read_checkpoint(std::fs::File::open(path)?)
}
