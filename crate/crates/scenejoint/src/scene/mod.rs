//! Scene data model: agent tracks, lane polylines, and validation.
//!
//! A scene holds `H` history steps and `T` future steps per agent, sampled at
//! `hz`. The last history step is the "current" pose that anchors each
//! agent's instance frame.

mod gen;
mod io;

pub use gen::{generate_synthetic_dataset, GenConfig, GenError, ScenarioKind};
pub use io::{
    load_scene, read_dataset, save_scene, write_dataset, DatasetManifest, SceneError,
};

use serde::Deserialize;

use crate::geom::{Pose2, Vec2};

/// Lane spacing below this is treated as a coincident-point violation.
pub const MIN_LANE_SPACING: f64 = 1e-6;
/// Tolerance on unit-heading norms after 6-decimal quantization.
const HEADING_NORM_TOL: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AgentKind {
    Vehicle,
    Pedestrian,
    Cyclist,
    Other,
}

impl AgentKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AgentKind::Vehicle => "vehicle",
            AgentKind::Pedestrian => "pedestrian",
            AgentKind::Cyclist => "cyclist",
            AgentKind::Other => "other",
        }
    }
}

/// One observed history step: position, unit heading, validity.
#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(from = "(f64, f64, f64, f64, bool)")]
pub struct HistoryStep {
    pub x: f64,
    pub y: f64,
    pub hx: f64,
    pub hy: f64,
    pub valid: bool,
}

impl From<(f64, f64, f64, f64, bool)> for HistoryStep {
    fn from(v: (f64, f64, f64, f64, bool)) -> Self {
        Self {
            x: v.0,
            y: v.1,
            hx: v.2,
            hy: v.3,
            valid: v.4,
        }
    }
}

impl HistoryStep {
    pub fn invalid() -> Self {
        Self {
            x: 0.0,
            y: 0.0,
            hx: 0.0,
            hy: 0.0,
            valid: false,
        }
    }

    pub fn position(&self) -> Vec2 {
        Vec2::new(self.x, self.y)
    }

    pub fn heading(&self) -> Vec2 {
        Vec2::new(self.hx, self.hy)
    }
}

/// One ground-truth future step.
#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(from = "(f64, f64, bool)")]
pub struct FutureStep {
    pub x: f64,
    pub y: f64,
    pub valid: bool,
}

impl From<(f64, f64, bool)> for FutureStep {
    fn from(v: (f64, f64, bool)) -> Self {
        Self {
            x: v.0,
            y: v.1,
            valid: v.2,
        }
    }
}

impl FutureStep {
    pub fn position(&self) -> Vec2 {
        Vec2::new(self.x, self.y)
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentTrack {
    pub id: String,
    pub kind: AgentKind,
    pub is_scored: bool,
    pub is_focal: bool,
    pub history: Vec<HistoryStep>,
    pub future: Vec<FutureStep>,
}

impl AgentTrack {
    /// Pose of the last valid history step, if any.
    pub fn anchor_pose(&self) -> Option<Pose2> {
        self.history
            .iter()
            .rev()
            .find(|s| s.valid)
            .and_then(|s| Pose2::new(s.position(), s.heading()).ok())
    }

    pub fn valid_history_steps(&self) -> usize {
        self.history.iter().filter(|s| s.valid).count()
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LanePolyline {
    pub id: String,
    pub centerline: Vec<(f64, f64)>,
}

impl LanePolyline {
    pub fn points(&self) -> impl Iterator<Item = Vec2> + '_ {
        self.centerline.iter().map(|&(x, y)| Vec2::new(x, y))
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scene {
    pub scenario_id: String,
    pub hz: f64,
    #[serde(rename = "H")]
    pub h: usize,
    #[serde(rename = "T")]
    pub t: usize,
    pub focal_agent_id: String,
    pub agents: Vec<AgentTrack>,
    pub lanes: Vec<LanePolyline>,
}

impl Scene {
    pub fn agent_index(&self, id: &str) -> Option<usize> {
        self.agents.iter().position(|a| a.id == id)
    }

    pub fn focal_index(&self) -> Option<usize> {
        self.agents.iter().position(|a| a.is_focal)
    }

    /// Indices of agents that participate in losses and metrics.
    pub fn scored_indices(&self) -> Vec<usize> {
        self.agents
            .iter()
            .enumerate()
            .filter(|(_, a)| a.is_scored)
            .map(|(i, _)| i)
            .collect()
    }
}

/// One broken rule, with the path of the offending field.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub path: String,
    pub rule: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.path, self.rule)
    }
}

fn finite(v: f64) -> bool {
    v.is_finite()
}

/// Checks every scene invariant; an empty result means the scene is valid.
pub fn validate_scene(scene: &Scene) -> Vec<Violation> {
    let mut out = Vec::new();
    let push = |out: &mut Vec<Violation>, path: String, rule: String| {
        out.push(Violation { path, rule });
    };

    if scene.agents.is_empty() {
        push(
            &mut out,
            "agents".into(),
            "scene must contain at least one agent".into(),
        );
    }
    if !(scene.hz.is_finite() && scene.hz > 0.0) {
        push(&mut out, "hz".into(), format!("sample rate {} must be positive", scene.hz));
    }
    if scene.h == 0 {
        push(&mut out, "H".into(), "history length must be positive".into());
    }
    if scene.t == 0 {
        push(&mut out, "T".into(), "future length must be positive".into());
    }

    let mut seen_ids: Vec<&str> = Vec::new();
    let focal_ids: Vec<&str> = scene
        .agents
        .iter()
        .filter(|a| a.is_focal)
        .map(|a| a.id.as_str())
        .collect();
    match focal_ids.len() {
        1 => {}
        0 => push(
            &mut out,
            "agents".into(),
            "no agent has is_focal = true".into(),
        ),
        _ => push(
            &mut out,
            "agents".into(),
            format!("multiple agents marked is_focal: {}", focal_ids.join(", ")),
        ),
    }
    if focal_ids.len() == 1 && focal_ids[0] != scene.focal_agent_id {
        push(
            &mut out,
            "focal_agent_id".into(),
            format!(
                "focal_agent_id {:?} does not match the focal agent {:?}",
                scene.focal_agent_id, focal_ids[0]
            ),
        );
    }
    if !scene.agents.iter().any(|a| a.is_scored) {
        push(
            &mut out,
            "agents".into(),
            "at least one agent must be scored".into(),
        );
    }

    for (i, agent) in scene.agents.iter().enumerate() {
        let base = format!("agents[{i}]");
        if seen_ids.contains(&agent.id.as_str()) {
            push(
                &mut out,
                format!("{base}.id"),
                format!("duplicate agent id {:?}", agent.id),
            );
        }
        seen_ids.push(&agent.id);

        if agent.is_focal && !agent.is_scored {
            push(
                &mut out,
                format!("{base}.is_scored"),
                "focal agent must be scored".into(),
            );
        }
        if agent.history.len() != scene.h {
            push(
                &mut out,
                format!("{base}.history"),
                format!("length {} != H = {}", agent.history.len(), scene.h),
            );
        }
        if agent.future.len() != scene.t {
            push(
                &mut out,
                format!("{base}.future"),
                format!("length {} != T = {}", agent.future.len(), scene.t),
            );
        }
        if agent.is_scored && agent.history.last().map(|s| !s.valid).unwrap_or(true) {
            push(
                &mut out,
                format!("{base}.history"),
                "scored agent's last history step must be valid".into(),
            );
        }
        for (j, step) in agent.history.iter().enumerate() {
            if !(finite(step.x) && finite(step.y) && finite(step.hx) && finite(step.hy)) {
                push(
                    &mut out,
                    format!("{base}.history[{j}]"),
                    "non-finite coordinate".into(),
                );
                continue;
            }
            if step.valid {
                let norm = step.heading().norm();
                if (norm - 1.0).abs() > HEADING_NORM_TOL {
                    push(
                        &mut out,
                        format!("{base}.history[{j}]"),
                        format!("heading norm {norm:.6} is not ~1"),
                    );
                }
            }
        }
        for (j, step) in agent.future.iter().enumerate() {
            if !(finite(step.x) && finite(step.y)) {
                push(
                    &mut out,
                    format!("{base}.future[{j}]"),
                    "non-finite coordinate".into(),
                );
            }
        }
    }

    let mut seen_lanes: Vec<&str> = Vec::new();
    for (i, lane) in scene.lanes.iter().enumerate() {
        let base = format!("lanes[{i}]");
        if seen_lanes.contains(&lane.id.as_str()) {
            push(
                &mut out,
                format!("{base}.id"),
                format!("duplicate lane id {:?}", lane.id),
            );
        }
        seen_lanes.push(&lane.id);

        if lane.centerline.len() < 2 {
            push(
                &mut out,
                format!("{base}.centerline"),
                format!("{} point(s); a polyline needs at least 2", lane.centerline.len()),
            );
        }
        for (j, &(x, y)) in lane.centerline.iter().enumerate() {
            if !(finite(x) && finite(y)) {
                push(
                    &mut out,
                    format!("{base}.centerline[{j}]"),
                    "non-finite coordinate".into(),
                );
            }
        }
        for (j, pair) in lane.centerline.windows(2).enumerate() {
            let d = Vec2::new(pair[1].0 - pair[0].0, pair[1].1 - pair[0].1).norm();
            if d.is_finite() && d <= MIN_LANE_SPACING {
                push(
                    &mut out,
                    format!("{base}.centerline[{}]", j + 1),
                    format!("coincident with previous point (spacing {d:.2e} m)"),
                );
            }
        }
    }
    out
}

/// Small two-vehicle fixture shared by tests across the crate.
#[cfg(test)]
pub(crate) fn toy_scene() -> Scene {
    let agent = |id: &str, focal: bool, x0: f64| AgentTrack {
        id: id.into(),
        kind: AgentKind::Vehicle,
        is_scored: true,
        is_focal: focal,
        history: (0..3)
            .map(|i| HistoryStep {
                x: x0 + i as f64,
                y: 0.0,
                hx: 1.0,
                hy: 0.0,
                valid: true,
            })
            .collect(),
        future: (0..4)
            .map(|i| FutureStep {
                x: x0 + 3.0 + i as f64,
                y: 0.0,
                valid: true,
            })
            .collect(),
    };
    Scene {
        scenario_id: "toy".into(),
        hz: 10.0,
        h: 3,
        t: 4,
        focal_agent_id: "a0".into(),
        agents: vec![agent("a0", true, 0.0), agent("a1", false, 20.0)],
        lanes: vec![LanePolyline {
            id: "l0".into(),
            centerline: vec![(-10.0, 0.0), (0.0, 0.0), (40.0, 0.0)],
        }],
    }
}
