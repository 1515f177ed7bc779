//! Trainable parameters, the Adam optimizer, and checkpoint IO.

use std::collections::HashMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tape::{GradStore, NodeId, Tape};
use super::{Tensor, TensorError};

/// One named trainable tensor with its gradient and Adam moments.
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub gradient: Tensor,
    pub adam_m: Tensor,
    pub adam_v: Tensor,
    pub step_count: u64,
}

impl Param {
    fn new(name: String, value: Tensor) -> Self {
        let shape = value.shape().to_vec();
        Self {
            name,
            gradient: Tensor::zeros(&shape),
            adam_m: Tensor::zeros(&shape),
            adam_v: Tensor::zeros(&shape),
            step_count: 0,
            value,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Node ids a parameter set was registered under on one tape, in parameter
/// creation order.
pub struct ParamBinding {
    nodes: Vec<NodeId>,
}

impl ParamBinding {
    pub fn node(&self, param_index: usize) -> NodeId {
        self.nodes[param_index]
    }
}

/// Ordered collection of named parameters.
///
/// Iteration, binding, checkpointing, and gradient reduction all follow
/// creation order, which keeps training deterministic.
#[derive(Default)]
pub struct ParamSet {
    params: Vec<Param>,
    by_name: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter; names must be unique.
    pub fn add(&mut self, name: &str, value: Tensor) -> usize {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter name {name}"
        );
        let index = self.params.len();
        self.by_name.insert(name.to_string(), index);
        self.params.push(Param::new(name.to_string(), value));
        index
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.by_name.get(name).copied()
    }

    pub fn get(&self, index: usize) -> &Param {
        &self.params[index]
    }

    pub fn get_mut(&mut self, index: usize) -> &mut Param {
        &mut self.params[index]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    /// Pushes every parameter value onto `tape` as a leaf, in creation order.
    pub fn bind(&self, tape: &mut Tape) -> ParamBinding {
        let nodes = self
            .params
            .iter()
            .map(|p| tape.leaf(p.value.clone()))
            .collect();
        ParamBinding { nodes }
    }

    /// Adds `scale` times the bound gradients into each parameter's
    /// gradient buffer. Parameters off the loss path contribute nothing.
    pub fn accumulate_gradients(
        &mut self,
        grads: &GradStore,
        binding: &ParamBinding,
        scale: f32,
    ) {
        for (param, &node) in self.params.iter_mut().zip(&binding.nodes) {
            if let Some(g) = grads.get(node) {
                for (acc, &gi) in param.gradient.data_mut().iter_mut().zip(g) {
                    *acc += scale * gi;
                }
            }
        }
    }

    pub fn zero_gradients(&mut self) {
        for param in &mut self.params {
            param.gradient.data_mut().fill(0.0);
        }
    }

    /// Euclidean norm over all gradients, accumulated in f64.
    pub fn gradient_norm(&self) -> f64 {
        let mut sq = 0.0f64;
        for param in &self.params {
            for &g in param.gradient.data() {
                sq += g as f64 * g as f64;
            }
        }
        sq.sqrt()
    }

    /// Scales all gradients so the global norm does not exceed `max_norm`.
    /// Returns the pre-clip norm.
    pub fn clip_gradient_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.gradient_norm();
        if norm > max_norm {
            let factor = (max_norm / norm) as f32;
            for param in &mut self.params {
                for g in param.gradient.data_mut() {
                    *g *= factor;
                }
            }
        }
        norm
    }

    /// One Adam update with bias correction; clears gradients afterward.
    pub fn adam_step(&mut self, lr: f64, config: &AdamConfig) {
        for param in &mut self.params {
            param.step_count += 1;
            let t = param.step_count as i32;
            let bc1 = 1.0 - config.beta1.powi(t);
            let bc2 = 1.0 - config.beta2.powi(t);
            for i in 0..param.value.len() {
                let g = param.gradient.data()[i] as f64;
                let m = config.beta1 * param.adam_m.data()[i] as f64 + (1.0 - config.beta1) * g;
                let v =
                    config.beta2 * param.adam_v.data()[i] as f64 + (1.0 - config.beta2) * g * g;
                param.adam_m.data_mut()[i] = m as f32;
                param.adam_v.data_mut()[i] = v as f32;
                let m_hat = m / bc1;
                let v_hat = v / bc2;
                let delta = lr * m_hat / (v_hat.sqrt() + config.eps);
                param.value.data_mut()[i] = (param.value.data()[i] as f64 - delta) as f32;
            }
            param.gradient.data_mut().fill(0.0);
        }
    }
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
}

fn io_err(context: &str, err: std::io::Error) -> TensorError {
    TensorError::CheckpointIo(format!("{context}: {err}"))
}

/// Writes `manifest.json` and `params.bin` into `dir` (created if absent).
pub fn save_checkpoint(params: &ParamSet, dir: &Path) -> Result<(), TensorError> {
    fs::create_dir_all(dir).map_err(|e| io_err(&format!("create {}", dir.display()), e))?;
    let manifest: Vec<ManifestEntry> = params
        .iter()
        .map(|p| ManifestEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
        })
        .collect();
    let manifest_path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| TensorError::CheckpointFormat(e.to_string()))?;
    fs::write(&manifest_path, json)
        .map_err(|e| io_err(&format!("write {}", manifest_path.display()), e))?;

    let bin_path = dir.join("params.bin");
    let mut file = fs::File::create(&bin_path)
        .map_err(|e| io_err(&format!("create {}", bin_path.display()), e))?;
    let mut bytes = Vec::new();
    for p in params.iter() {
        for &v in p.value.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    file.write_all(&bytes)
        .map_err(|e| io_err(&format!("write {}", bin_path.display()), e))?;
    Ok(())
}

/// Loads checkpointed values into `params`, which must already hold the same
/// parameters in the same order with the same shapes.
pub fn load_checkpoint(params: &mut ParamSet, dir: &Path) -> Result<(), TensorError> {
    let manifest_path = dir.join("manifest.json");
    let manifest_text = fs::read_to_string(&manifest_path)
        .map_err(|e| io_err(&format!("read {}", manifest_path.display()), e))?;
    let manifest: Vec<ManifestEntry> = serde_json::from_str(&manifest_text)
        .map_err(|e| TensorError::CheckpointFormat(format!("manifest.json: {e}")))?;

    if manifest.len() != params.len() {
        return Err(TensorError::CheckpointFormat(format!(
            "manifest has {} params, model has {}",
            manifest.len(),
            params.len()
        )));
    }
    for (entry, param) in manifest.iter().zip(params.iter()) {
        if entry.name != param.name {
            return Err(TensorError::CheckpointFormat(format!(
                "parameter order mismatch: manifest {:?} vs model {:?}",
                entry.name, param.name
            )));
        }
        if entry.shape != param.value.shape() {
            return Err(TensorError::CheckpointFormat(format!(
                "{}: shape {:?} in manifest vs {:?} in model",
                entry.name,
                entry.shape,
                param.value.shape()
            )));
        }
    }

    let bin_path = dir.join("params.bin");
    let mut file = fs::File::open(&bin_path)
        .map_err(|e| io_err(&format!("open {}", bin_path.display()), e))?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)
        .map_err(|e| io_err(&format!("read {}", bin_path.display()), e))?;

    let total: usize = manifest.iter().map(|e| e.shape.iter().product::<usize>()).sum();
    if bytes.len() != total * 4 {
        return Err(TensorError::CheckpointFormat(format!(
            "params.bin holds {} bytes, manifest expects {}",
            bytes.len(),
            total * 4
        )));
    }

    let mut offset = 0;
    for i in 0..params.len() {
        let param = params.get_mut(i);
        for v in param.value.data_mut() {
            *v = f32::from_le_bytes(bytes[offset..offset + 4].try_into().unwrap());
            offset += 4;
        }
    }
    Ok(())
}
