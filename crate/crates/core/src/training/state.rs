//! Optimizer state beside a model checkpoint.
//!
//! ```text
//! format: covrl-train-state/1
//! step: 120
//! param_count: 12345
//! data:
//! <first moments><second moments>
//! ```

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::TrainState;
use crate::error::{Error, Result};
use crate::policy::checkpoint_io::{field, parse_field, read_f64s, read_header, write_f64s};

pub const TRAIN_STATE_FORMAT: &str = "covrl-train-state/1";

pub fn save_train_state(state: &TrainState, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "format: {TRAIN_STATE_FORMAT}")?;
    writeln!(out, "step: {}", state.step)?;
    writeln!(out, "param_count: {}", state.adam.m.len())?;
    writeln!(out, "data:")?;
    write_f64s(&mut out, &state.adam.m)?;
    write_f64s(&mut out, &state.adam.v)?;
    out.flush()?;
    Ok(())
}

/// Restores the step counter and moments into `state`, whose model must
/// already hold the matching checkpoint.
pub fn load_train_state(state: &mut TrainState, path: &Path) -> Result<()> {
    let mut input = BufReader::new(std::fs::File::open(path)?);
    let fields = read_header(&mut input)?;
    if field(&fields, "format")? != TRAIN_STATE_FORMAT {
        return Err(Error::Checkpoint("unsupported train-state format".into()));
    }
    let n: usize = parse_field(&fields, "param_count")?;
    if n != state.model.num_params() {
        return Err(Error::Checkpoint(format!(
            "train state holds {n} moments but the model has {} parameters",
            state.model.num_params()
        )));
    }
    state.step = parse_field(&fields, "step")?;
    state.adam.m = read_f64s(&mut input, n)?;
    state.adam.v = read_f64s(&mut input, n)?;
    let mut rest = Vec::new();
    input.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::Checkpoint(format!("{} trailing bytes in train state", rest.len())));
    }
    Ok(())
}
