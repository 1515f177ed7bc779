//! The prediction network.
//!
//! Pipeline: per-agent and per-lane instance-frame encoders produce one token
//! each; relative pose embeddings are lifted to token width; a stack of
//! symmetric fusion transformer layers mixes tokens through pairwise fusion
//! features; K decoder heads emit joint futures for every agent plus scene
//! mode logits.
//!
//! All inputs are expressed in instance frames and all cross-instance
//! geometry enters only through the relative pose embeddings, so outputs are
//! equivariant under rigid motions of the scene. Reductions over the token
//! axis use order-invariant summation, so permuting agents permutes outputs
//! exactly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geom::{GeomError, Pose2, RpeMatrix, Vec2};
use crate::scene::{AgentTrack, LanePolyline, Scene};
use crate::tensor::{
    Activation, AttentionProjections, MlpLayer, NodeId, ParamBinding, ParamSet, Tape, Tensor,
    TensorError,
};

/// Agent step features: local x, y, heading x, heading y, validity.
pub const AGENT_STEP_FEATURES: usize = 5;
/// Lane point features: local x, y plus the segment vector to the next point.
pub const LANE_POINT_FEATURES: usize = 4;
const RPE_FEATURES: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Token width D (paper 128; desk default 32).
    pub d: usize,
    /// Fusion layers (paper 4; desk default 2).
    pub sft_layers: usize,
    /// Attention heads (paper 8; desk default 4).
    pub heads: usize,
    /// Futures decoded per scene.
    pub k: usize,
    pub h: usize,
    pub t: usize,
    pub mlp_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 32,
            sft_layers: 2,
            heads: 4,
            k: 6,
            h: 10,
            t: 15,
            mlp_hidden: 32,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return Err(ModelError::Config(format!(
                "token width {} must be divisible by heads {}",
                self.d, self.heads
            )));
        }
        if self.k == 0 {
            return Err(ModelError::Config("K must be at least 1".into()));
        }
        if self.sft_layers == 0 {
            return Err(ModelError::Config("need at least one fusion layer".into()));
        }
        if self.h == 0 || self.t == 0 {
            return Err(ModelError::Config("H and T must be positive".into()));
        }
        if self.mlp_hidden == 0 {
            return Err(ModelError::Config("mlp_hidden must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("model config error: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Geom(#[from] GeomError),
}

/// Joint prediction for one scene.
#[derive(Debug, Clone)]
pub struct ScenePrediction {
    /// `[N_agent, K, T, 2]`, meters, global frame.
    pub trajectories: Tensor,
    /// `[K]` unnormalized mode scores.
    pub scene_logits: Tensor,
    /// `[K]` softmax of the logits.
    pub scene_probs: Tensor,
}

impl ScenePrediction {
    pub fn agent_count(&self) -> usize {
        self.trajectories.shape()[0]
    }

    pub fn modes(&self) -> usize {
        self.trajectories.shape()[1]
    }

    pub fn steps(&self) -> usize {
        self.trajectories.shape()[2]
    }

    /// Predicted position of agent `a` in world `k` at future step `t`.
    pub fn position(&self, a: usize, k: usize, t: usize) -> Vec2 {
        let x = self.trajectories.at(&[a, k, t, 0]) as f64;
        let y = self.trajectories.at(&[a, k, t, 1]) as f64;
        Vec2::new(x, y)
    }
}

/// Forward result plus the tape nodes needed to build losses.
#[derive(Debug)]
pub struct ForwardPass {
    pub prediction: ScenePrediction,
    /// One node per mode, each `[N_agent·T, 2]` in the global frame.
    pub mode_nodes: Vec<NodeId>,
    /// `[K]` logits node.
    pub logits_node: NodeId,
}

/// Name-addressed view of bound parameters on a tape.
pub struct BoundParams<'a> {
    params: &'a ParamSet,
    binding: &'a ParamBinding,
}

impl<'a> BoundParams<'a> {
    pub fn new(params: &'a ParamSet, binding: &'a ParamBinding) -> Self {
        Self { params, binding }
    }

    fn node(&self, name: &str) -> NodeId {
        let index = self
            .params
            .index_of(name)
            .unwrap_or_else(|| panic!("parameter {name} not registered"));
        self.binding.node(index)
    }

    /// Two-layer MLP with ReLU after the hidden layer.
    fn mlp(&self, prefix: &str) -> [MlpLayer; 2] {
        [
            MlpLayer {
                weight: self.node(&format!("{prefix}.w1")),
                bias: self.node(&format!("{prefix}.b1")),
                activation: Activation::Relu,
            },
            MlpLayer {
                weight: self.node(&format!("{prefix}.w2")),
                bias: self.node(&format!("{prefix}.b2")),
                activation: Activation::None,
            },
        ]
    }

    fn attention(&self, prefix: &str) -> AttentionProjections {
        AttentionProjections {
            wq: self.node(&format!("{prefix}.wq")),
            bq: self.node(&format!("{prefix}.bq")),
            wk: self.node(&format!("{prefix}.wk")),
            bk: self.node(&format!("{prefix}.bk")),
            wv: self.node(&format!("{prefix}.wv")),
            bv: self.node(&format!("{prefix}.bv")),
            wo: self.node(&format!("{prefix}.wo")),
            bo: self.node(&format!("{prefix}.bo")),
        }
    }
}

fn glorot(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.gen_range(-limit..limit) as f32)
        .collect();
    Tensor::from_vec(&[rows, cols], data).expect("sized data")
}

fn add_mlp(
    params: &mut ParamSet,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    din: usize,
    hidden: usize,
    dout: usize,
) {
    params.add(&format!("{prefix}.w1"), glorot(rng, din, hidden));
    params.add(&format!("{prefix}.b1"), Tensor::zeros(&[hidden]));
    params.add(&format!("{prefix}.w2"), glorot(rng, hidden, dout));
    params.add(&format!("{prefix}.b2"), Tensor::zeros(&[dout]));
}

fn add_layer_norm(params: &mut ParamSet, prefix: &str, d: usize) {
    params.add(&format!("{prefix}.gain"), Tensor::filled(&[d], 1.0));
    params.add(&format!("{prefix}.shift"), Tensor::zeros(&[d]));
}

/// Builds the full parameter set for `config`, deterministically from `seed`.
pub fn build_params(config: &ModelConfig, seed: u64) -> Result<ParamSet, ModelError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    let d = config.d;
    let hidden = config.mlp_hidden;

    add_mlp(
        &mut params,
        &mut rng,
        "agent_enc.step",
        AGENT_STEP_FEATURES,
        hidden,
        d,
    );
    params.add("agent_enc.conv1.w", glorot(&mut rng, 3 * d, d));
    params.add("agent_enc.conv1.b", Tensor::zeros(&[d]));
    params.add("agent_enc.conv2.w", glorot(&mut rng, 3 * d, d));
    params.add("agent_enc.conv2.b", Tensor::zeros(&[d]));

    add_mlp(
        &mut params,
        &mut rng,
        "lane_enc.point",
        LANE_POINT_FEATURES,
        hidden,
        d,
    );
    add_mlp(&mut params, &mut rng, "rpe.lift", RPE_FEATURES, hidden, d);

    for l in 0..config.sft_layers {
        add_mlp(&mut params, &mut rng, &format!("sft{l}.phi"), 3 * d, hidden, d);
        for proj in ["wq", "wk", "wv", "wo"] {
            params.add(&format!("sft{l}.attn.{proj}"), glorot(&mut rng, d, d));
            params.add(
                &format!("sft{l}.attn.{}", proj.replace('w', "b")),
                Tensor::zeros(&[d]),
            );
        }
        add_layer_norm(&mut params, &format!("sft{l}.ln1"), d);
        add_mlp(&mut params, &mut rng, &format!("sft{l}.ffn"), d, hidden, d);
        add_layer_norm(&mut params, &format!("sft{l}.ln2"), d);
    }

    for k in 0..config.k {
        add_mlp(
            &mut params,
            &mut rng,
            &format!("decoder.head{k}"),
            d,
            hidden,
            2 * config.t,
        );
    }
    add_mlp(&mut params, &mut rng, "decoder.prob", d, hidden, config.k);
    Ok(params)
}

/// Instance frame of an agent: its last valid observed pose.
pub fn agent_frame(agent: &AgentTrack) -> Pose2 {
    agent.anchor_pose().unwrap_or_else(Pose2::identity)
}

fn dedup_points(lane: &LanePolyline) -> Vec<Vec2> {
    let mut pts: Vec<Vec2> = Vec::with_capacity(lane.centerline.len());
    for p in lane.points() {
        if pts.last().map(|&q| (p - q).norm() > 1e-6).unwrap_or(true) {
            pts.push(p);
        }
    }
    pts
}

/// Instance frame of a lane: chord midpoint, heading along the chord.
pub fn lane_frame(lane: &LanePolyline) -> Result<Pose2, ModelError> {
    let pts = dedup_points(lane);
    if pts.len() < 2 {
        return Err(ModelError::Config(format!(
            "lane {} has fewer than 2 distinct points",
            lane.id
        )));
    }
    let first = pts[0];
    let last = *pts.last().unwrap();
    let mid = (first + last) * 0.5;
    let chord = last - first;
    // A closed loop has a zero chord; fall back to the first segment.
    let heading = if chord.norm() > 1e-9 {
        chord
    } else {
        pts[1] - pts[0]
    };
    Ok(Pose2::new(mid, heading)?)
}

/// Anchor poses of every instance: agents first, lanes after.
pub fn instance_frames(scene: &Scene) -> Result<Vec<Pose2>, ModelError> {
    let mut poses = Vec::with_capacity(scene.agents.len() + scene.lanes.len());
    for agent in &scene.agents {
        poses.push(agent_frame(agent));
    }
    for lane in &scene.lanes {
        poses.push(lane_frame(lane)?);
    }
    Ok(poses)
}

/// Concatenates rank-2 nodes along rows (via double transpose).
fn concat_rows(tape: &mut Tape, parts: &[NodeId]) -> Result<NodeId, TensorError> {
    if parts.len() == 1 {
        return Ok(parts[0]);
    }
    let mut transposed = Vec::with_capacity(parts.len());
    for &p in parts {
        transposed.push(tape.transpose(p)?);
    }
    let cat = tape.concat_cols(&transposed)?;
    tape.transpose(cat)
}

/// Encodes every agent's history into one token, `[N_agent, D]`.
///
/// Histories are expressed in each agent's own frame; invalid steps are
/// zero-filled with the validity channel cleared, so the encoding ignores
/// them up to the convolution's local smearing.
pub fn encode_agents(
    tape: &mut Tape,
    scene: &Scene,
    bp: &BoundParams,
    config: &ModelConfig,
) -> Result<NodeId, ModelError> {
    let n = scene.agents.len();
    let h = config.h;
    let mut features = Vec::with_capacity(n * h * AGENT_STEP_FEATURES);
    for agent in &scene.agents {
        let frame = agent_frame(agent);
        for step in &agent.history {
            if step.valid {
                let p = frame.to_local(step.position());
                let hd = frame.vector_to_local(step.heading());
                features.extend_from_slice(&[
                    p.x as f32,
                    p.y as f32,
                    hd.x as f32,
                    hd.y as f32,
                    1.0,
                ]);
            } else {
                features.extend_from_slice(&[0.0; AGENT_STEP_FEATURES]);
            }
        }
    }
    let x = tape.leaf(Tensor::from_vec(&[n * h, AGENT_STEP_FEATURES], features)?);
    let stepped = tape.mlp_forward(x, &bp.mlp("agent_enc.step"))?;
    let c1 = tape.conv1d_same(
        stepped,
        bp.node("agent_enc.conv1.w"),
        bp.node("agent_enc.conv1.b"),
        h,
    )?;
    let c1 = tape.relu(c1);
    let c2 = tape.conv1d_same(
        c1,
        bp.node("agent_enc.conv2.w"),
        bp.node("agent_enc.conv2.b"),
        h,
    )?;
    let c2 = tape.relu(c2);
    let offsets: Vec<usize> = (0..=n).map(|i| i * h).collect();
    Ok(tape.segment_max(c2, &offsets)?)
}

/// Encodes every lane polyline into one token, `[N_lane, D]`; `None` when
/// the scene has no lanes.
pub fn encode_lanes(
    tape: &mut Tape,
    scene: &Scene,
    bp: &BoundParams,
) -> Result<Option<NodeId>, ModelError> {
    if scene.lanes.is_empty() {
        return Ok(None);
    }
    let mut features = Vec::new();
    let mut offsets = vec![0usize];
    for lane in &scene.lanes {
        let pts = dedup_points(lane);
        let frame = lane_frame(lane)?;
        for (i, &p) in pts.iter().enumerate() {
            let local = frame.to_local(p);
            let seg = if i + 1 < pts.len() {
                frame.vector_to_local(pts[i + 1] - p)
            } else {
                Vec2::ZERO
            };
            features.extend_from_slice(&[
                local.x as f32,
                local.y as f32,
                seg.x as f32,
                seg.y as f32,
            ]);
        }
        offsets.push(offsets.last().unwrap() + pts.len());
    }
    let total = *offsets.last().unwrap();
    let x = tape.leaf(Tensor::from_vec(&[total, LANE_POINT_FEATURES], features)?);
    let pointwise = tape.mlp_forward(x, &bp.mlp("lane_enc.point"))?;
    Ok(Some(tape.segment_max(pointwise, &offsets)?))
}

/// Lifts the `[N, N, 5]` relative pose embeddings to `[N·N, D]`.
pub fn lift_rpe(
    tape: &mut Tape,
    rpe: &RpeMatrix,
    bp: &BoundParams,
) -> Result<NodeId, ModelError> {
    let n = rpe.len();
    let x = tape.leaf(Tensor::from_vec(&[n * n, RPE_FEATURES], rpe.feature_rows())?);
    Ok(tape.mlp_forward(x, &bp.mlp("rpe.lift"))?)
}

/// One symmetric fusion transformer layer.
///
/// For each token i the layer builds fusion features
/// e_{i→j} = φ(concat(f_i, f_j, r'_{i→j})) over all j, attends with f_i as
/// the query, and applies the usual residual + norm + feedforward block.
pub fn fuse_sft_layer(
    tape: &mut Tape,
    tokens: NodeId,
    rpe_lift: NodeId,
    layer: usize,
    bp: &BoundParams,
    config: &ModelConfig,
) -> Result<NodeId, ModelError> {
    let n = tape.value(tokens).rows();
    let prefix = format!("sft{layer}");

    let mut idx_i = Vec::with_capacity(n * n);
    let mut idx_j = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            idx_i.push(i);
            idx_j.push(j);
        }
    }
    let f_i = tape.gather_rows(tokens, &idx_i)?;
    let f_j = tape.gather_rows(tokens, &idx_j)?;
    let pairs = tape.concat_cols(&[f_i, f_j, rpe_lift])?;
    let fused = tape.mlp_forward(pairs, &bp.mlp(&format!("{prefix}.phi")))?;

    let proj = bp.attention(&format!("{prefix}.attn"));
    let mut attended = Vec::with_capacity(n);
    for i in 0..n {
        let query = tape.gather_rows(tokens, &[i])?;
        let keys: Vec<usize> = (i * n..(i + 1) * n).collect();
        let e_i = tape.gather_rows(fused, &keys)?;
        attended.push(tape.multihead_attention(query, e_i, e_i, config.heads, &proj)?);
    }
    let mixed = concat_rows(tape, &attended)?;

    let x1 = tape.add(tokens, mixed)?;
    let x1 = tape.layer_norm(
        x1,
        bp.node(&format!("{prefix}.ln1.gain")),
        bp.node(&format!("{prefix}.ln1.shift")),
    )?;
    let ff = tape.mlp_forward(x1, &bp.mlp(&format!("{prefix}.ffn")))?;
    let x2 = tape.add(x1, ff)?;
    Ok(tape.layer_norm(
        x2,
        bp.node(&format!("{prefix}.ln2.gain")),
        bp.node(&format!("{prefix}.ln2.shift")),
    )?)
}

/// Decodes fused agent tokens into K joint futures plus scene logits.
pub fn decode_scenes(
    tape: &mut Tape,
    agent_tokens: NodeId,
    anchors: &[Pose2],
    bp: &BoundParams,
    config: &ModelConfig,
) -> Result<ForwardPass, ModelError> {
    let na = tape.value(agent_tokens).rows();
    assert_eq!(na, anchors.len(), "one anchor pose per agent");
    let t = config.t;

    // Per-(agent, step) rows of the anchor rotation and translation.
    let mut cos_v = Vec::with_capacity(na * t);
    let mut sin_v = Vec::with_capacity(na * t);
    let mut tx_v = Vec::with_capacity(na * t);
    let mut ty_v = Vec::with_capacity(na * t);
    for pose in anchors {
        for _ in 0..t {
            cos_v.push(pose.heading().x as f32);
            sin_v.push(pose.heading().y as f32);
            tx_v.push(pose.position().x as f32);
            ty_v.push(pose.position().y as f32);
        }
    }
    let cos = tape.leaf(Tensor::from_vec(&[na * t, 1], cos_v)?);
    let sin = tape.leaf(Tensor::from_vec(&[na * t, 1], sin_v)?);
    let tx = tape.leaf(Tensor::from_vec(&[na * t, 1], tx_v)?);
    let ty = tape.leaf(Tensor::from_vec(&[na * t, 1], ty_v)?);

    let mut mode_nodes = Vec::with_capacity(config.k);
    for k in 0..config.k {
        let local = tape.mlp_forward(agent_tokens, &bp.mlp(&format!("decoder.head{k}")))?;
        let local = tape.reshape(local, &[na * t, 2])?;
        let lx = tape.slice_cols(local, 0, 1)?;
        let ly = tape.slice_cols(local, 1, 1)?;
        // Global = R(anchor)·local + anchor position.
        let xc = tape.mul(lx, cos)?;
        let ys = tape.mul(ly, sin)?;
        let gx = tape.sub(xc, ys)?;
        let gx = tape.add(gx, tx)?;
        let xs = tape.mul(lx, sin)?;
        let yc = tape.mul(ly, cos)?;
        let gy = tape.add(xs, yc)?;
        let gy = tape.add(gy, ty)?;
        mode_nodes.push(tape.concat_cols(&[gx, gy])?);
    }

    // Scene logits from the mean-pooled agent tokens; the pooling matmul
    // sums in value-sorted order so agent order cannot leak in.
    let ones = tape.leaf(Tensor::filled(&[1, na], 1.0));
    let pooled = tape.matmul_sorted(ones, agent_tokens)?;
    let mean = tape.scale(pooled, 1.0 / na as f32);
    let logits2 = tape.mlp_forward(mean, &bp.mlp("decoder.prob"))?;
    let probs2 = tape.softmax(logits2)?;
    let logits_node = tape.reshape(logits2, &[config.k])?;
    let probs = tape.reshape(probs2, &[config.k])?;

    let mut traj = vec![0.0f32; na * config.k * t * 2];
    for (k, &node) in mode_nodes.iter().enumerate() {
        let data = tape.value(node).data();
        for a in 0..na {
            for step in 0..t {
                for c in 0..2 {
                    traj[((a * config.k + k) * t + step) * 2 + c] =
                        data[(a * t + step) * 2 + c];
                }
            }
        }
    }
    let prediction = ScenePrediction {
        trajectories: Tensor::from_vec(&[na, config.k, t, 2], traj)?,
        scene_logits: tape.value(logits_node).clone(),
        scene_probs: tape.value(probs).clone(),
    };
    Ok(ForwardPass {
        prediction,
        mode_nodes,
        logits_node,
    })
}

/// Full pipeline: encode, fuse, decode.
pub fn model_forward(
    tape: &mut Tape,
    scene: &Scene,
    bp: &BoundParams,
    config: &ModelConfig,
) -> Result<ForwardPass, ModelError> {
    config.validate()?;
    if scene.h != config.h || scene.t != config.t {
        return Err(ModelError::Config(format!(
            "scene {} has H={} T={}, model expects H={} T={}",
            scene.scenario_id, scene.h, scene.t, config.h, config.t
        )));
    }

    let agent_tokens = encode_agents(tape, scene, bp, config)?;
    let tokens = match encode_lanes(tape, scene, bp)? {
        Some(lane_tokens) => concat_rows(tape, &[agent_tokens, lane_tokens])?,
        None => agent_tokens,
    };

    let poses = instance_frames(scene)?;
    let rpe = RpeMatrix::from_poses(&poses);
    let rpe_lift = lift_rpe(tape, &rpe, bp)?;

    let mut fused = tokens;
    for layer in 0..config.sft_layers {
        fused = fuse_sft_layer(tape, fused, rpe_lift, layer, bp, config)?;
    }

    let na = scene.agents.len();
    let agent_indices: Vec<usize> = (0..na).collect();
    let fused_agents = tape.gather_rows(fused, &agent_indices)?;
    let anchors: Vec<Pose2> = scene.agents.iter().map(agent_frame).collect();
    decode_scenes(tape, fused_agents, &anchors, bp, config)
}
