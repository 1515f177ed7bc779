//! Deterministic SVG rendering of scenes and predicted worlds.
//!
//! Layout is meters-to-pixels with a fixed scale and a 10 m margin around
//! everything drawn. Lanes are gray, the focal agent red, other agents
//! gray; the selected predicted world draws one polyline per agent in the
//! world's mode color, and every colliding agent pair gets exactly one
//! circle at its first sub-threshold timestep. Output depends only on the
//! inputs, so renders are byte-stable.

use std::fmt::Write as _;

use crate::geom::Vec2;
use crate::metrics::{avg_min_fde, MetricsConfig, MetricsError};
use crate::model::ScenePrediction;
use crate::scene::Scene;

/// Margin around the drawn content, meters.
const MARGIN_M: f64 = 10.0;

/// Mode palette; indices beyond the end cycle.
const MODE_COLORS: [&str; 6] = [
    "#1a73e8", "#188038", "#f9ab00", "#9334e6", "#e8710a", "#0097a7",
];
const FOCAL_COLOR: &str = "#d93025";
const AGENT_COLOR: &str = "#5f6368";
const LANE_COLOR: &str = "#b0b7bd";
const COLLISION_COLOR: &str = "#d93025";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WorldSelection {
    /// The world with the lowest mean endpoint error over scored agents.
    Best,
    Index(usize),
}

#[derive(Debug, Clone)]
pub struct VizOptions {
    pub world: WorldSelection,
    /// Collision circle threshold, meters.
    pub dist_safe: f64,
    /// Pixels per meter.
    pub scale: f64,
}

impl Default for VizOptions {
    fn default() -> Self {
        Self {
            world: WorldSelection::Best,
            dist_safe: 2.0,
            scale: 8.0,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum VizError {
    #[error("world index {index} out of range for K={k}")]
    WorldIndexOutOfRange { index: usize, k: usize },
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

struct Bounds {
    min: Vec2,
    max: Vec2,
}

impl Bounds {
    fn new() -> Self {
        Self {
            min: Vec2::new(f64::INFINITY, f64::INFINITY),
            max: Vec2::new(f64::NEG_INFINITY, f64::NEG_INFINITY),
        }
    }

    fn include(&mut self, p: Vec2) {
        self.min = Vec2::new(self.min.x.min(p.x), self.min.y.min(p.y));
        self.max = Vec2::new(self.max.x.max(p.x), self.max.y.max(p.y));
    }
}

struct Canvas {
    origin: Vec2,
    max_y: f64,
    scale: f64,
    width: f64,
    height: f64,
}

impl Canvas {
    fn new(bounds: &Bounds, scale: f64) -> Self {
        let min = Vec2::new(bounds.min.x - MARGIN_M, bounds.min.y - MARGIN_M);
        let max = Vec2::new(bounds.max.x + MARGIN_M, bounds.max.y + MARGIN_M);
        Self {
            origin: min,
            max_y: max.y,
            scale,
            width: (max.x - min.x) * scale,
            height: (max.y - min.y) * scale,
        }
    }

    /// World meters to SVG pixels; flips y so north is up.
    fn map(&self, p: Vec2) -> (f64, f64) {
        (
            (p.x - self.origin.x) * self.scale,
            (self.max_y - p.y) * self.scale,
        )
    }

    fn meters(&self, m: f64) -> f64 {
        m * self.scale
    }
}

fn polyline(canvas: &Canvas, points: &[Vec2], style: &str, class: &str) -> String {
    if points.len() < 2 {
        return String::new();
    }
    let coords: Vec<String> = points
        .iter()
        .map(|&p| {
            let (x, y) = canvas.map(p);
            format!("{x:.2},{y:.2}")
        })
        .collect();
    format!(
        "  <polyline class=\"{class}\" points=\"{}\" fill=\"none\" {style}/>\n",
        coords.join(" ")
    )
}

fn circle(canvas: &Canvas, center: Vec2, radius_m: f64, style: &str, class: &str) -> String {
    let (x, y) = canvas.map(center);
    format!(
        "  <circle class=\"{class}\" cx=\"{x:.2}\" cy=\"{y:.2}\" r=\"{:.2}\" {style}/>\n",
        canvas.meters(radius_m)
    )
}

/// First timestep at which each agent pair of the selected world comes
/// within `dist_safe`, as `(i, j, t)` with `i < j`.
pub fn first_collisions(
    pred: &ScenePrediction,
    world: usize,
    dist_safe: f64,
) -> Vec<(usize, usize, usize)> {
    let (agents, steps) = (pred.agent_count(), pred.steps());
    let mut hits = Vec::new();
    for i in 0..agents {
        for j in (i + 1)..agents {
            for t in 0..steps {
                if (pred.position(i, world, t) - pred.position(j, world, t)).norm() < dist_safe {
                    hits.push((i, j, t));
                    break;
                }
            }
        }
    }
    hits
}

/// Renders a scene — and optionally one predicted world — as an SVG string.
pub fn render_svg(
    scene: &Scene,
    prediction: Option<&ScenePrediction>,
    options: &VizOptions,
) -> Result<String, VizError> {
    let selected = match (prediction, options.world) {
        (None, _) => None,
        (Some(pred), WorldSelection::Index(i)) => {
            if i >= pred.modes() {
                return Err(VizError::WorldIndexOutOfRange {
                    index: i,
                    k: pred.modes(),
                });
            }
            Some(i)
        }
        (Some(pred), WorldSelection::Best) => {
            let config = MetricsConfig {
                k: pred.modes(),
                dist_safe: options.dist_safe,
                ..Default::default()
            };
            Some(avg_min_fde(pred, scene, &config)?.1)
        }
    };

    let mut bounds = Bounds::new();
    for lane in &scene.lanes {
        for p in lane.points() {
            bounds.include(p);
        }
    }
    for agent in &scene.agents {
        for step in &agent.history {
            if step.valid {
                bounds.include(step.position());
            }
        }
        for step in &agent.future {
            if step.valid {
                bounds.include(step.position());
            }
        }
    }
    if let (Some(pred), Some(world)) = (prediction, selected) {
        for a in 0..pred.agent_count() {
            for t in 0..pred.steps() {
                bounds.include(pred.position(a, world, t));
            }
        }
    }
    if bounds.min.x > bounds.max.x {
        bounds.include(Vec2::ZERO);
    }

    let canvas = Canvas::new(&bounds, options.scale);
    let mut svg = String::new();
    let _ = write!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {:.2} {:.2}\">\n",
        canvas.width, canvas.height
    );
    let _ = write!(
        svg,
        "  <rect width=\"{:.2}\" height=\"{:.2}\" fill=\"#ffffff\"/>\n",
        canvas.width, canvas.height
    );

    for lane in &scene.lanes {
        let pts: Vec<Vec2> = lane.points().collect();
        svg.push_str(&polyline(
            &canvas,
            &pts,
            &format!("stroke=\"{LANE_COLOR}\" stroke-width=\"2\""),
            "lane",
        ));
    }

    for (index, agent) in scene.agents.iter().enumerate() {
        let color = if agent.is_focal { FOCAL_COLOR } else { AGENT_COLOR };
        let history: Vec<Vec2> = agent
            .history
            .iter()
            .filter(|s| s.valid)
            .map(|s| s.position())
            .collect();
        svg.push_str(&polyline(
            &canvas,
            &history,
            &format!("stroke=\"{color}\" stroke-width=\"2\""),
            "history",
        ));
        let future: Vec<Vec2> = agent
            .future
            .iter()
            .filter(|s| s.valid)
            .map(|s| s.position())
            .collect();
        svg.push_str(&polyline(
            &canvas,
            &future,
            &format!("stroke=\"{color}\" stroke-width=\"1.5\" stroke-dasharray=\"4 3\""),
            "future",
        ));
        if let Some(last) = history.last() {
            svg.push_str(&circle(
                &canvas,
                *last,
                0.8,
                &format!("fill=\"{color}\" data-agent=\"{index}\""),
                "agent",
            ));
        }
    }

    if let (Some(pred), Some(world)) = (prediction, selected) {
        let color = MODE_COLORS[world % MODE_COLORS.len()];
        for a in 0..pred.agent_count() {
            let pts: Vec<Vec2> = (0..pred.steps()).map(|t| pred.position(a, world, t)).collect();
            svg.push_str(&polyline(
                &canvas,
                &pts,
                &format!("stroke=\"{color}\" stroke-width=\"2\" opacity=\"0.9\" data-world=\"{world}\""),
                "prediction",
            ));
        }
        for (i, j, t) in first_collisions(pred, world, options.dist_safe) {
            let mid = (pred.position(i, world, t) + pred.position(j, world, t)) * 0.5;
            svg.push_str(&circle(
                &canvas,
                mid,
                options.dist_safe,
                &format!(
                    "fill=\"none\" stroke=\"{COLLISION_COLOR}\" stroke-width=\"2\" data-pair=\"{i}-{j}\" data-step=\"{t}\""
                ),
                "collision",
            ));
        }
    }

    svg.push_str("</svg>\n");
    Ok(svg)
}
