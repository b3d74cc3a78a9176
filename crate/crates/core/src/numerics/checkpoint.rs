//! Named parameter collections and their JSON checkpoint format.
//!
//! A checkpoint is a single JSON object:
//!
//! ```json
//! {"format_version": 1, "model_kind": "policy",
//!  "params": {"w_out": [[0.1, -0.2], [0.3, 0.4]], "b_out": [0.0, 0.5]}}
//! ```
//!
//! Vectors are stored as flat lists and matrices as lists of rows. Numbers
//! are written with the shortest decimal form that parses back to the same
//! double, so a save/load cycle is value-exact.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::tape::{Gradients, Tape, Var};
use super::tensor::Tensor;
use crate::{Error, Result};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// A model whose trainable state is an ordered list of named tensors.
pub trait Module {
    /// Tag written into checkpoints.
    const KIND: &'static str;

    fn named_tensors(&self) -> Vec<(&'static str, &Tensor)>;

    /// Same order as [`Module::named_tensors`].
    fn tensors_mut(&mut self) -> Vec<&mut Tensor>;

    /// Records every tensor as a leaf, in order.
    fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.named_tensors()
            .into_iter()
            .map(|(_, t)| tape.leaf(t.clone()))
            .collect()
    }

    fn tensors(&self) -> Vec<&Tensor> {
        self.named_tensors().into_iter().map(|(_, t)| t).collect()
    }

    fn num_parameters(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }
}

/// Collects gradients for bound parameters, zero-filling unreachable ones.
pub fn collect_grads(grads: &Gradients, vars: &[Var]) -> Vec<Tensor> {
    vars.iter().map(|v| grads.tensor(*v)).collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointDoc {
    format_version: u32,
    model_kind: String,
    params: BTreeMap<String, Value>,
}

fn to_nested(t: &Tensor) -> Value {
    match t.rank() {
        1 => Value::from(t.data().to_vec()),
        _ => Value::Array((0..t.rows()).map(|i| Value::from(t.row(i).to_vec())).collect()),
    }
}

fn numbers(v: &Value, name: &str) -> Result<Vec<f64>> {
    let arr = v
        .as_array()
        .ok_or_else(|| Error::Checkpoint(format!("{name}: expected a list")))?;
    arr.iter()
        .map(|x| {
            x.as_f64()
                .ok_or_else(|| Error::Checkpoint(format!("{name}: non-numeric entry {x}")))
        })
        .collect()
}

fn from_nested(v: &Value, expected: &[usize], name: &str) -> Result<Tensor> {
    let data = if expected.len() == 1 {
        numbers(v, name)?
    } else {
        let rows = v
            .as_array()
            .ok_or_else(|| Error::Checkpoint(format!("{name}: expected list of rows")))?;
        let mut data = Vec::new();
        for r in rows {
            data.extend(numbers(r, name)?);
        }
        if rows.len() != expected[0] {
            return Err(Error::Checkpoint(format!(
                "{name}: expected {} rows, found {}",
                expected[0],
                rows.len()
            )));
        }
        data
    };
    Tensor::new(expected.to_vec(), data)
        .map_err(|e| Error::Checkpoint(format!("{name}: {e}")))
}

/// Serializes a module to the checkpoint JSON document.
pub fn save_checkpoint<M: Module>(module: &M) -> Result<String> {
    let params = module
        .named_tensors()
        .into_iter()
        .map(|(name, t)| (name.to_string(), to_nested(t)))
        .collect();
    let doc = CheckpointDoc {
        format_version: CHECKPOINT_FORMAT_VERSION,
        model_kind: M::KIND.to_string(),
        params,
    };
    Ok(serde_json::to_string(&doc)?)
}

/// Loads checkpoint values into `module`, whose tensor shapes must match the
/// stored ones exactly.
pub fn load_checkpoint<M: Module>(module: &mut M, json: &str) -> Result<()> {
    let doc: CheckpointDoc = serde_json::from_str(json)?;
    if doc.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format_version {}",
            doc.format_version
        )));
    }
    if doc.model_kind != M::KIND {
        return Err(Error::Checkpoint(format!(
            "expected model_kind {:?}, found {:?}",
            M::KIND,
            doc.model_kind
        )));
    }
    let names: Vec<(&'static str, Vec<usize>)> = module
        .named_tensors()
        .into_iter()
        .map(|(n, t)| (n, t.shape().to_vec()))
        .collect();
    if doc.params.len() != names.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} tensors, found {}",
            names.len(),
            doc.params.len()
        )));
    }
    let mut loaded = Vec::with_capacity(names.len());
    for (name, shape) in &names {
        let value = doc
            .params
            .get(*name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
        loaded.push(from_nested(value, shape, name)?);
    }
    for (slot, t) in module.tensors_mut().into_iter().zip(loaded) {
        *slot = t;
    }
    Ok(())
}
