//! Named parameter storage, Adam updates, checkpoints, and the
//! finite-difference gradient oracle.

use std::collections::HashMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{GradStore, Tensor};

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

#[derive(Debug)]
struct ParamEntry {
    name: String,
    tensor: Tensor,
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
}

/// Named learnable tensors plus their optimizer state. Iteration order is
/// insertion order, which keeps updates and serialization deterministic.
#[derive(Debug, Default)]
pub struct ParameterSet {
    entries: Vec<ParamEntry>,
    by_name: HashMap<String, usize>,
    step: u64,
}

impl ParameterSet {
    pub fn new() -> Self {
        ParameterSet::default()
    }

    pub fn insert(&mut self, name: &str, rows: usize, cols: usize, data: Vec<f64>) -> Result<()> {
        if self.by_name.contains_key(name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter `{name}`")));
        }
        let tensor = Tensor::leaf(rows, cols, data, true)?;
        let len = tensor.len();
        self.by_name.insert(name.to_string(), self.entries.len());
        self.entries.push(ParamEntry {
            name: name.to_string(),
            tensor,
            first_moment: vec![0.0; len],
            second_moment: vec![0.0; len],
        });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.by_name
            .get(name)
            .map(|&i| &self.entries[i].tensor)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter `{name}`")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value_count(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.len()).sum()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Replace a parameter's values, keeping its shape and optimizer state.
    pub fn set_values(&mut self, name: &str, values: Vec<f64>) -> Result<()> {
        let idx = *self
            .by_name
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter `{name}`")))?;
        let entry = &mut self.entries[idx];
        let [r, c] = entry.tensor.shape();
        entry.tensor = Tensor::leaf(r, c, values, true)?;
        Ok(())
    }

    /// Bias-corrected Adam update. Parameters without a gradient entry are
    /// treated as having zero gradient.
    pub fn adam_step(&mut self, grads: &GradStore, cfg: &AdamConfig) -> Result<()> {
        self.step += 1;
        let t = self.step as f64;
        let bias1 = 1.0 - cfg.beta1.powf(t);
        let bias2 = 1.0 - cfg.beta2.powf(t);
        for entry in &mut self.entries {
            let zeros;
            let g: &[f64] = match grads.get(&entry.tensor) {
                Some(g) => g,
                None => {
                    zeros = vec![0.0; entry.tensor.len()];
                    &zeros
                }
            };
            let [r, c] = entry.tensor.shape();
            let mut values = entry.tensor.data().to_vec();
            for i in 0..values.len() {
                let m = cfg.beta1 * entry.first_moment[i] + (1.0 - cfg.beta1) * g[i];
                let v = cfg.beta2 * entry.second_moment[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                entry.first_moment[i] = m;
                entry.second_moment[i] = v;
                let m_hat = m / bias1;
                let v_hat = v / bias2;
                values[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
            }
            entry.tensor = Tensor::leaf(r, c, values, true)?;
        }
        Ok(())
    }

    /// Checkpoint: a flat JSON list of (name, shape, values).
    pub fn save_checkpoint<W: Write>(&self, writer: W) -> Result<()> {
        let params: Vec<CheckpointParam> = self
            .entries
            .iter()
            .map(|e| CheckpointParam {
                name: e.name.clone(),
                shape: e.tensor.shape().to_vec(),
                values: e.tensor.data().to_vec(),
            })
            .collect();
        let ck = Checkpoint { format: CHECKPOINT_FORMAT.to_string(), step: self.step, params };
        serde_json::to_writer(writer, &ck)?;
        Ok(())
    }

    pub fn load_checkpoint<R: Read>(&mut self, reader: R) -> Result<()> {
        let ck: Checkpoint = serde_json::from_reader(reader)?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::Schema(format!("unknown checkpoint format `{}`", ck.format)));
        }
        for p in ck.params {
            let idx = *self.by_name.get(&p.name).ok_or_else(|| {
                Error::Schema(format!("checkpoint parameter `{}` not in model", p.name))
            })?;
            let entry = &mut self.entries[idx];
            if p.shape != entry.tensor.shape().to_vec() {
                return Err(Error::Shape(format!(
                    "checkpoint `{}`: shape {:?} != model {:?}",
                    p.name,
                    p.shape,
                    entry.tensor.shape()
                )));
            }
            entry.tensor = Tensor::leaf(p.shape[0], p.shape[1], p.values, true)?;
        }
        self.step = ck.step;
        Ok(())
    }

    /// All weight matrices (parameters named `*.w*`), for spectral-norm scans.
    pub fn weight_matrices(&self) -> Vec<(&str, &Tensor)> {
        self.entries
            .iter()
            .filter(|e| {
                e.name
                    .rsplit('.')
                    .next()
                    .is_some_and(|leaf| leaf.starts_with('w'))
            })
            .map(|e| (e.name.as_str(), &e.tensor))
            .collect()
    }
}

pub const CHECKPOINT_FORMAT: &str = "oes-gnn-params-v1";

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    step: u64,
    params: Vec<CheckpointParam>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointParam {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
}

/// Central-difference gradient: (f(x + h e_i) - f(x - h e_i)) / 2h.
pub fn finite_difference<F>(mut f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::InvalidArgument("finite difference step must be > 0".into()));
    }
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let plus = f(&probe)?;
        probe[i] = x[i] - h;
        let minus = f(&probe)?;
        probe[i] = x[i];
        grad[i] = (plus - minus) / (2.0 * h);
    }
    Ok(grad)
}
