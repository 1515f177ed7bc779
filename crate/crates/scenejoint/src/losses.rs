//! Winner-takes-all training losses.
//!
//! The scene-consistent loss scores each of the K predicted worlds by the
//! summed endpoint error over scored agents, then regresses every timestep
//! of every scored agent against the single winning world — gradients never
//! touch the losing modes. The marginal variant instead lets each agent pick
//! its own winner, which is the baseline the joint formulation is measured
//! against. A softmax cross-entropy on the scene logits teaches the mode
//! probabilities, and the total blends the two with weight `omega`.

use serde::{Deserialize, Serialize};

use crate::model::ForwardPass;
use crate::scene::Scene;
use crate::tensor::{NodeId, Tape, Tensor, TensorError};

/// Regression/classification blend weight and the per-agent scoring mask.
#[derive(Debug, Clone)]
pub struct LossConfig {
    /// Weight on the regression term; classification gets `1 - omega`.
    pub omega: f64,
    /// One flag per agent; losses cover scored agents only.
    pub scoring_mask: Vec<bool>,
}

impl LossConfig {
    /// Default blend with the scene's own scored flags.
    pub fn for_scene(scene: &Scene) -> Self {
        Self {
            omega: 0.9,
            scoring_mask: scene.agents.iter().map(|a| a.is_scored).collect(),
        }
    }
}

/// Which regression target the trainer optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    SceneWta,
    MarginalWta,
}

impl LossMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            LossMode::SceneWta => "scene_wta",
            LossMode::MarginalWta => "marginal_wta",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "scene" | "scene_wta" => Some(LossMode::SceneWta),
            "marginal" | "marginal_wta" => Some(LossMode::MarginalWta),
            _ => None,
        }
    }
}

/// Scalar views of one scene's loss, plus the node to backpropagate.
#[derive(Debug, Clone, Copy)]
pub struct LossBreakdown {
    pub reg: f64,
    pub cls: f64,
    pub total: f64,
    pub winner_index: usize,
    pub total_node: NodeId,
}

#[derive(Debug, thiserror::Error)]
pub enum LossError {
    #[error("no scored agents in scene {0}")]
    NoScoredAgents(String),
    #[error("agent {0} has no valid future step")]
    AllInvalidFuture(String),
    #[error("scoring mask has {got} entries for {expected} agents")]
    MaskLength { expected: usize, got: usize },
    #[error("omega {0} outside [0, 1]")]
    InvalidOmega(f64),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Ground-truth future positions and validity as `[A·T, 2]` tensors.
pub fn future_targets(scene: &Scene) -> (Tensor, Tensor) {
    let (a, t) = (scene.agents.len(), scene.t);
    let mut target = Vec::with_capacity(a * t * 2);
    let mut valid = Vec::with_capacity(a * t * 2);
    for agent in &scene.agents {
        for step in &agent.future {
            target.push(step.x as f32);
            target.push(step.y as f32);
            let v = if step.valid { 1.0 } else { 0.0 };
            valid.push(v);
            valid.push(v);
        }
    }
    let shape = [a * t, 2];
    (
        Tensor::from_vec(&shape, target).expect("sized target"),
        Tensor::from_vec(&shape, valid).expect("sized mask"),
    )
}

/// Index of each agent's last valid future step.
fn endpoint_steps(scene: &Scene) -> Vec<Option<usize>> {
    scene
        .agents
        .iter()
        .map(|agent| agent.future.iter().rposition(|s| s.valid))
        .collect()
}

fn check_mask(scene: &Scene, config: &LossConfig) -> Result<(), LossError> {
    if config.scoring_mask.len() != scene.agents.len() {
        return Err(LossError::MaskLength {
            expected: scene.agents.len(),
            got: config.scoring_mask.len(),
        });
    }
    if !config.scoring_mask.iter().any(|&s| s) {
        return Err(LossError::NoScoredAgents(scene.scenario_id.clone()));
    }
    Ok(())
}

/// Endpoint displacement per (scored agent, mode), in f64.
///
/// Rows for unscored agents are empty; the endpoint is each agent's last
/// valid future step.
pub fn endpoint_errors(
    pass: &ForwardPass,
    scene: &Scene,
    config: &LossConfig,
) -> Result<Vec<Vec<f64>>, LossError> {
    check_mask(scene, config)?;
    let ends = endpoint_steps(scene);
    let k = pass.prediction.modes();
    let mut errors = vec![Vec::new(); scene.agents.len()];
    for (a, agent) in scene.agents.iter().enumerate() {
        if !config.scoring_mask[a] {
            continue;
        }
        let end = ends[a].ok_or_else(|| LossError::AllInvalidFuture(agent.id.clone()))?;
        let gt = agent.future[end].position();
        errors[a] = (0..k)
            .map(|m| (pass.prediction.position(a, m, end) - gt).norm())
            .collect();
    }
    Ok(errors)
}

/// Argmin with ties broken toward the lowest index.
pub fn scene_winner(scene_errors: &[f64]) -> usize {
    let mut best = 0;
    for (k, &e) in scene_errors.iter().enumerate() {
        if e < scene_errors[best] {
            best = k;
        }
    }
    best
}

/// Summed endpoint error of each world over scored agents.
pub fn scene_errors(endpoint: &[Vec<f64>], k: usize) -> Vec<f64> {
    let mut totals = vec![0.0; k];
    for row in endpoint {
        for (m, &e) in row.iter().enumerate() {
            totals[m] += e;
        }
    }
    totals
}

/// Per-agent winners: each scored agent's argmin mode (ties to lowest k).
pub fn marginal_winners(endpoint: &[Vec<f64>]) -> Vec<Option<usize>> {
    endpoint
        .iter()
        .map(|row| (!row.is_empty()).then(|| scene_winner(row)))
        .collect()
}

/// Smooth-L1 mask covering valid future steps of scored agents only.
fn regression_mask(scene: &Scene, config: &LossConfig, valid: &Tensor) -> Tensor {
    let t = scene.t;
    let mut mask = valid.clone();
    for (a, &scored) in config.scoring_mask.iter().enumerate() {
        if !scored {
            for v in &mut mask.data_mut()[a * t * 2..(a + 1) * t * 2] {
                *v = 0.0;
            }
        }
    }
    mask
}

/// Scene-consistent WTA regression: smooth-L1 against the mode whose summed
/// endpoint error is smallest. Returns the loss node and the winner index.
pub fn scene_wta_loss(
    tape: &mut Tape,
    pass: &ForwardPass,
    scene: &Scene,
    config: &LossConfig,
) -> Result<(NodeId, usize), LossError> {
    let endpoint = endpoint_errors(pass, scene, config)?;
    let winner = scene_winner(&scene_errors(&endpoint, pass.prediction.modes()));
    let (target, valid) = future_targets(scene);
    let mask = regression_mask(scene, config, &valid);
    let reg = tape.smooth_l1(pass.mode_nodes[winner], &target, &mask)?;
    Ok((reg, winner))
}

/// Marginal WTA regression: each scored agent regresses against its own
/// best mode by endpoint error.
pub fn marginal_wta_loss(
    tape: &mut Tape,
    pass: &ForwardPass,
    scene: &Scene,
    config: &LossConfig,
) -> Result<NodeId, LossError> {
    let endpoint = endpoint_errors(pass, scene, config)?;
    let winners = marginal_winners(&endpoint);
    let t = scene.t;
    let a = scene.agents.len();
    let k = pass.prediction.modes();

    // Compose one [A·T, 2] prediction: agent a's rows come from its winner.
    // Stack the K modes along rows, then gather each agent's slice.
    let mut stacked = Vec::with_capacity(k);
    for &node in &pass.mode_nodes {
        stacked.push(tape.transpose(node)?);
    }
    let wide = tape.concat_cols(&stacked)?;
    let all_modes = tape.transpose(wide)?;
    let mut indices = Vec::with_capacity(a * t);
    for (agent, winner) in winners.iter().enumerate() {
        let mode = winner.unwrap_or(0);
        for step in 0..t {
            indices.push(mode * a * t + agent * t + step);
        }
    }
    let composite = tape.gather_rows(all_modes, &indices)?;

    let (target, valid) = future_targets(scene);
    let mask = regression_mask(scene, config, &valid);
    Ok(tape.smooth_l1(composite, &target, &mask)?)
}

/// Softmax cross-entropy between the scene logits and the WTA winner.
pub fn classification_loss(
    tape: &mut Tape,
    logits: NodeId,
    winner_index: usize,
) -> Result<NodeId, LossError> {
    Ok(tape.softmax_cross_entropy(logits, winner_index)?)
}

/// Blends regression and classification per `total = ω·reg + (1−ω)·cls`.
pub fn total_loss(
    tape: &mut Tape,
    reg: NodeId,
    cls: NodeId,
    winner_index: usize,
    config: &LossConfig,
) -> Result<LossBreakdown, LossError> {
    if !(0.0..=1.0).contains(&config.omega) {
        return Err(LossError::InvalidOmega(config.omega));
    }
    let reg_w = tape.scale(reg, config.omega as f32);
    let cls_w = tape.scale(cls, (1.0 - config.omega) as f32);
    let total_node = tape.add(reg_w, cls_w)?;
    Ok(LossBreakdown {
        reg: tape.value(reg).data()[0] as f64,
        cls: tape.value(cls).data()[0] as f64,
        total: tape.value(total_node).data()[0] as f64,
        winner_index,
        total_node,
    })
}

/// Full per-scene loss under the requested mode.
pub fn scene_loss(
    tape: &mut Tape,
    pass: &ForwardPass,
    scene: &Scene,
    config: &LossConfig,
    mode: LossMode,
) -> Result<LossBreakdown, LossError> {
    let endpoint = endpoint_errors(pass, scene, config)?;
    let winner = scene_winner(&scene_errors(&endpoint, pass.prediction.modes()));
    let reg = match mode {
        LossMode::SceneWta => scene_wta_loss(tape, pass, scene, config)?.0,
        LossMode::MarginalWta => marginal_wta_loss(tape, pass, scene, config)?,
    };
    let cls = classification_loss(tape, pass.logits_node, winner)?;
    total_loss(tape, reg, cls, winner, config)
}
