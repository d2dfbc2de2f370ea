use sha2::{Digest, Sha256};

use crate::error::{Result, TensorError};
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

/// Named, ordered collection of persistent parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    /// Appends a trainable parameter.
    pub fn push(&mut self, name: impl Into<String>, t: Tensor) -> usize {
        self.entries.push((name.into(), t.with_grad()));
        self.entries.len() - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensor(&self, i: usize) -> &Tensor {
        &self.entries[i].1
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.entries[i].1
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Total number of scalar parameters.
    pub fn num_parameters(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Marks every parameter trainable or frozen. Frozen parameters enter
    /// the tape as constants, so no gradient is ever computed for them.
    pub fn set_trainable(&mut self, on: bool) {
        for (_, t) in &mut self.entries {
            t.set_requires_grad(on);
            if !on {
                t.take_grad();
            }
        }
    }

    pub fn is_trainable(&self) -> bool {
        self.entries.iter().any(|(_, t)| t.requires_grad())
    }

    /// Records every parameter on the tape, in order.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.entries.iter().map(|(_, t)| tape.leaf(t)).collect()
    }

    /// Folds the gradients of `vars` (as returned by [`ParamSet::bind`])
    /// into the parameter accumulators.
    pub fn accumulate(&mut self, grads: &Gradients, vars: &[Var]) -> Result<()> {
        if vars.len() != self.entries.len() {
            return Err(TensorError::shape("accumulate", &[self.entries.len()], &[vars.len()]));
        }
        for ((_, t), &v) in self.entries.iter_mut().zip(vars) {
            if t.requires_grad() {
                grads.accumulate_into(v, t)?;
            }
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for (_, t) in &mut self.entries {
            t.zero_grad();
        }
    }

    /// Replaces parameter values by name; shapes must match exactly.
    pub fn load_values(&mut self, values: &[(String, Tensor)]) -> Result<()> {
        if values.len() != self.entries.len() {
            return Err(TensorError::Checkpoint {
                path: String::new(),
                reason: format!("expected {} parameters, found {}", self.entries.len(), values.len()),
            });
        }
        for ((name, t), (vname, v)) in self.entries.iter_mut().zip(values) {
            if name != vname || t.shape() != v.shape() {
                return Err(TensorError::Checkpoint {
                    path: String::new(),
                    reason: format!("parameter {name} {:?} does not match {vname} {:?}", t.shape(), v.shape()),
                });
            }
            t.data_mut().copy_from_slice(v.data());
        }
        Ok(())
    }

    /// SHA-256 over names, shapes and little-endian values.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.entries {
            h.update(name.as_bytes());
            for &s in t.shape() {
                h.update((s as u64).to_le_bytes());
            }
            for &v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}
