//! Training loop, validation split, and the checkpoint-driven evaluator.
//!
//! Training is deterministic for a fixed seed regardless of worker count:
//! the epoch shuffle is seeded, per-scene gradients are computed on
//! independent tapes, and accumulation always runs in batch order on the
//! coordinating thread. Every epoch writes a checkpoint plus a JSONL log
//! row; the epoch with the best validation avgMinFDE is mirrored to
//! `best/`.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::losses::{scene_loss, LossConfig, LossError, LossMode};
use crate::metrics::{evaluate_method, EvalReport, Method, MetricsConfig, MetricsError};
use crate::model::{
    build_params, model_forward, BoundParams, ModelConfig, ModelError, ScenePrediction,
};
use crate::scene::{read_dataset, Scene, SceneError};
use crate::tensor::{
    load_checkpoint, save_checkpoint, AdamConfig, GradStore, ParamSet, Tape, TensorError,
};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_initial: f64,
    pub lr_final: f64,
    /// Epoch at which the learning rate steps down to `lr_final`.
    pub lr_drop_epoch: usize,
    pub seed: u64,
    pub loss_mode: LossMode,
    pub dataset: PathBuf,
    pub checkpoint_dir: PathBuf,
    /// Global-norm gradient clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub omega: f64,
    pub model: ModelConfig,
    /// Worker threads; 1 = fully serial, 0 = hardware default.
    pub threads: usize,
}

impl TrainConfig {
    /// Desk-scale defaults; dataset and checkpoint paths must be set.
    pub fn desk(dataset: PathBuf, checkpoint_dir: PathBuf) -> Self {
        Self {
            batch_size: 16,
            epochs: 20,
            lr_initial: 1e-3,
            lr_final: 1e-4,
            lr_drop_epoch: 14,
            seed: 0,
            loss_mode: LossMode::SceneWta,
            dataset,
            checkpoint_dir,
            grad_clip: Some(5.0),
            omega: 0.9,
            model: ModelConfig::default(),
            threads: 1,
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.batch_size == 0 {
            return Err(HarnessError::Config("batch_size must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(HarnessError::Config("epochs must be at least 1".into()));
        }
        if self.lr_drop_epoch >= self.epochs {
            return Err(HarnessError::Config(format!(
                "lr_drop_epoch {} must be below epochs {}",
                self.lr_drop_epoch, self.epochs
            )));
        }
        if self.lr_initial <= 0.0 || self.lr_final <= 0.0 {
            return Err(HarnessError::Config("learning rates must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.omega) {
            return Err(HarnessError::Config(format!(
                "omega {} outside [0, 1]",
                self.omega
            )));
        }
        if let Some(clip) = self.grad_clip {
            if clip <= 0.0 {
                return Err(HarnessError::Config("grad_clip must be positive".into()));
            }
        }
        self.model
            .validate()
            .map_err(|e| HarnessError::Config(e.to_string()))
    }
}

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("harness config error: {0}")]
    Config(String),
    #[error("dataset {0} contains no scenes")]
    EmptyDataset(String),
    #[error("checkpoint not found: {0}")]
    MissingCheckpoint(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    Diverged { epoch: usize, batch: usize },
    #[error("io error: {0}")]
    Io(String),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

fn io_err(context: &str, e: std::io::Error) -> HarnessError {
    HarnessError::Io(format!("{context}: {e}"))
}

/// One training-log row, serialized as a JSONL line per epoch.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_total: f64,
    pub mean_reg: f64,
    pub mean_cls: f64,
    pub lr: f64,
    pub val_avg_min_fde: f64,
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    /// Validation avgMinFDE of the untrained (freshly initialized) model.
    pub initial_val_fde: f64,
    pub best_epoch: usize,
    pub best_val_fde: f64,
    pub epochs: Vec<EpochLog>,
}

/// Step schedule: `lr_initial` before the drop epoch, `lr_final` after.
pub fn lr_schedule(epoch: usize, config: &TrainConfig) -> Result<f64, HarnessError> {
    if epoch >= config.epochs {
        return Err(HarnessError::Config(format!(
            "epoch {epoch} outside schedule of {} epochs",
            config.epochs
        )));
    }
    Ok(if epoch < config.lr_drop_epoch {
        config.lr_initial
    } else {
        config.lr_final
    })
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Stable 10% validation split keyed on the scenario id.
pub fn is_validation_scene(scenario_id: &str) -> bool {
    fnv1a64(scenario_id.as_bytes()) % 10 == 0
}

/// Short content hash of a checkpoint's parameter payload.
pub fn checkpoint_id(dir: &Path) -> Result<String, HarnessError> {
    let bin = dir.join("params.bin");
    let bytes = fs::read(&bin).map_err(|e| io_err(&format!("read {}", bin.display()), e))?;
    Ok(format!("{:016x}", fnv1a64(&bytes)))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), HarnessError> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| HarnessError::Io(format!("serialize {}: {e}", path.display())))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| io_err(&format!("write {}", path.display()), e))
}

/// Per-scene forward + loss + backward on a private tape.
fn scene_gradients(
    params: &ParamSet,
    scene: &Scene,
    train: &TrainConfig,
) -> Result<(GradStore, f64, f64, f64), HarnessError> {
    let mut tape = Tape::new();
    let binding = params.bind(&mut tape);
    let bp = BoundParams::new(params, &binding);
    let pass = model_forward(&mut tape, scene, &bp, &train.model)?;
    let mut loss_config = LossConfig::for_scene(scene);
    loss_config.omega = train.omega;
    let breakdown = scene_loss(&mut tape, &pass, scene, &loss_config, train.loss_mode)?;
    let grads = tape.backward(breakdown.total_node)?;
    Ok((grads, breakdown.total, breakdown.reg, breakdown.cls))
}

fn pooled<T: Send, F>(threads: usize, items: &[&Scene], work: F) -> Result<Vec<T>, HarnessError>
where
    F: Fn(&Scene) -> Result<T, HarnessError> + Sync,
{
    if threads == 1 || items.len() <= 1 {
        return items.iter().map(|s| work(s)).collect();
    }
    use rayon::prelude::*;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| HarnessError::Config(format!("thread pool: {e}")))?;
    pool.install(|| items.par_iter().map(|s| work(s)).collect())
}

/// Forward passes over many scenes, in input order.
pub fn forward_scenes(
    params: &ParamSet,
    model: &ModelConfig,
    scenes: &[&Scene],
    threads: usize,
) -> Result<Vec<ScenePrediction>, HarnessError> {
    pooled(threads, scenes, |scene| {
        let mut tape = Tape::new();
        let binding = params.bind(&mut tape);
        let bp = BoundParams::new(params, &binding);
        Ok(model_forward(&mut tape, scene, &bp, model)?.prediction)
    })
}

/// Scene-joint validation avgMinFDE, averaged over the given scenes.
pub fn validation_fde(
    params: &ParamSet,
    model: &ModelConfig,
    scenes: &[&Scene],
    threads: usize,
) -> Result<f64, HarnessError> {
    let predictions = forward_scenes(params, model, scenes, threads)?;
    let pairs: Vec<(&Scene, &ScenePrediction)> = scenes
        .iter()
        .copied()
        .zip(predictions.iter())
        .collect();
    let config = MetricsConfig {
        k: model.k,
        ..Default::default()
    };
    let report = evaluate_method(&pairs, Method::SceneJoint, &config, "in-memory")?;
    Ok(report.mean_avg_min_fde)
}

fn save_epoch_checkpoint(
    params: &ParamSet,
    model: &ModelConfig,
    dir: &Path,
) -> Result<(), HarnessError> {
    save_checkpoint(params, dir)?;
    write_json(&dir.join("config.json"), model)
}

/// Runs the full training loop; returns the per-epoch summary.
pub fn train(config: &TrainConfig) -> Result<TrainSummary, HarnessError> {
    train_with_progress(config, |_| {})
}

/// `train` with a per-epoch callback, invoked after each log row is written.
pub fn train_with_progress(
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainSummary, HarnessError> {
    config.validate()?;
    let (_, scenes) = read_dataset(&config.dataset)?;
    if scenes.is_empty() {
        return Err(HarnessError::EmptyDataset(
            config.dataset.display().to_string(),
        ));
    }
    for scene in &scenes {
        if scene.h != config.model.h || scene.t != config.model.t {
            return Err(HarnessError::Config(format!(
                "scene {} has H={} T={} but the model expects H={} T={}",
                scene.scenario_id, scene.h, scene.t, config.model.h, config.model.t
            )));
        }
    }

    let mut train_scenes: Vec<&Scene> = Vec::new();
    let mut val_scenes: Vec<&Scene> = Vec::new();
    for scene in &scenes {
        if is_validation_scene(&scene.scenario_id) {
            val_scenes.push(scene);
        } else {
            train_scenes.push(scene);
        }
    }
    // Degenerate tiny datasets: validate on whatever exists.
    if val_scenes.is_empty() {
        val_scenes = train_scenes.clone();
    }
    if train_scenes.is_empty() {
        train_scenes = val_scenes.clone();
    }

    fs::create_dir_all(&config.checkpoint_dir)
        .map_err(|e| io_err(&format!("create {}", config.checkpoint_dir.display()), e))?;
    write_json(&config.checkpoint_dir.join("train_config.json"), config)?;

    let mut params = build_params(&config.model, config.seed)?;
    let binding = {
        // Node ids depend only on registration order, so a scratch binding
        // addresses gradients from every worker tape.
        let mut scratch = Tape::new();
        params.bind(&mut scratch)
    };

    let initial_val_fde = validation_fde(&params, &config.model, &val_scenes, config.threads)?;

    let log_path = config.checkpoint_dir.join("train_log.jsonl");
    let mut log = fs::File::create(&log_path)
        .map_err(|e| io_err(&format!("create {}", log_path.display()), e))?;

    let adam = AdamConfig::default();
    let mut epochs = Vec::with_capacity(config.epochs);
    let mut best = (f64::INFINITY, 0usize);
    for epoch in 0..config.epochs {
        let lr = lr_schedule(epoch, config)?;
        let mut order: Vec<usize> = (0..train_scenes.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        order.shuffle(&mut rng);

        let mut total_sum = 0.0;
        let mut reg_sum = 0.0;
        let mut cls_sum = 0.0;
        for (batch_index, batch) in order.chunks(config.batch_size).enumerate() {
            let batch_scenes: Vec<&Scene> = batch.iter().map(|&i| train_scenes[i]).collect();
            let results = pooled(config.threads, &batch_scenes, |scene| {
                scene_gradients(&params, scene, config)
            })?;
            params.zero_gradients();
            let scale = 1.0 / batch.len() as f32;
            for (grads, total, reg, cls) in &results {
                if !total.is_finite() {
                    return Err(HarnessError::Diverged {
                        epoch,
                        batch: batch_index,
                    });
                }
                params.accumulate_gradients(grads, &binding, scale);
                total_sum += total;
                reg_sum += reg;
                cls_sum += cls;
            }
            if let Some(max_norm) = config.grad_clip {
                params.clip_gradient_norm(max_norm);
            }
            if !params.gradient_norm().is_finite() {
                return Err(HarnessError::Diverged {
                    epoch,
                    batch: batch_index,
                });
            }
            params.adam_step(lr, &adam);
        }

        let val_avg_min_fde =
            validation_fde(&params, &config.model, &val_scenes, config.threads)?;
        let n = train_scenes.len() as f64;
        let row = EpochLog {
            epoch,
            mean_total: total_sum / n,
            mean_reg: reg_sum / n,
            mean_cls: cls_sum / n,
            lr,
            val_avg_min_fde,
        };
        let line = serde_json::to_string(&row)
            .map_err(|e| HarnessError::Io(format!("log row: {e}")))?;
        writeln!(log, "{line}").map_err(|e| io_err("write train log", e))?;

        let epoch_dir = config.checkpoint_dir.join(format!("epoch_{epoch:03}"));
        save_epoch_checkpoint(&params, &config.model, &epoch_dir)?;
        if val_avg_min_fde < best.0 {
            best = (val_avg_min_fde, epoch);
            save_epoch_checkpoint(&params, &config.model, &config.checkpoint_dir.join("best"))?;
        }
        on_epoch(&row);
        epochs.push(row);
    }

    Ok(TrainSummary {
        initial_val_fde,
        best_epoch: best.1,
        best_val_fde: best.0,
        epochs,
    })
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub methods: Vec<Method>,
    pub dist_safe: f64,
    pub miss_threshold: f64,
    pub threads: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            methods: vec![
                Method::SceneJoint,
                Method::StraightMarginal,
                Method::CombinedJoint,
            ],
            dist_safe: 2.0,
            miss_threshold: 2.0,
            threads: 1,
        }
    }
}

/// Loads a checkpoint (weights + model config) from `dir`.
pub fn load_model(dir: &Path) -> Result<(ParamSet, ModelConfig), HarnessError> {
    let config_path = dir.join("config.json");
    if !config_path.is_file() {
        return Err(HarnessError::MissingCheckpoint(
            config_path.display().to_string(),
        ));
    }
    if !dir.join("manifest.json").is_file() || !dir.join("params.bin").is_file() {
        return Err(HarnessError::MissingCheckpoint(dir.display().to_string()));
    }
    let text = fs::read_to_string(&config_path)
        .map_err(|e| io_err(&format!("read {}", config_path.display()), e))?;
    let model: ModelConfig = serde_json::from_str(&text)
        .map_err(|e| HarnessError::Config(format!("{}: {e}", config_path.display())))?;
    let mut params = build_params(&model, 0)?;
    load_checkpoint(&mut params, dir)?;
    Ok((params, model))
}

/// Evaluates a checkpoint over a dataset with the requested methods.
pub fn evaluate(
    checkpoint: &Path,
    dataset: &Path,
    options: &EvalOptions,
) -> Result<Vec<EvalReport>, HarnessError> {
    let (params, model) = load_model(checkpoint)?;
    let (_, scenes) = read_dataset(dataset)?;
    if scenes.is_empty() {
        return Err(HarnessError::EmptyDataset(dataset.display().to_string()));
    }
    let refs: Vec<&Scene> = scenes.iter().collect();
    let predictions = forward_scenes(&params, &model, &refs, options.threads)?;
    let pairs: Vec<(&Scene, &ScenePrediction)> =
        refs.iter().copied().zip(predictions.iter()).collect();
    let config = MetricsConfig {
        dist_safe: options.dist_safe,
        miss_threshold: options.miss_threshold,
        k: model.k,
    };
    let id = checkpoint_id(checkpoint)?;
    options
        .methods
        .iter()
        .map(|&method| Ok(evaluate_method(&pairs, method, &config, &id)?))
        .collect()
}
