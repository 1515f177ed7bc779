//! Synthetic scenario generation.
//!
//! Four maneuver families (straight following, crossing intersection, lane
//! change, merge) produce scenes whose ground-truth futures are guaranteed
//! collision-free by construction:
//!
//! * agents sharing a lane share its speed, so longitudinal gaps (≥ 8 m) are
//!   constant;
//! * agents on conflicting lanes pass the conflict point at times spaced by
//!   at least 2 s, which keeps any pair at distance ≥ v_min·Δt/2 ≥ 5 m for
//!   perpendicular lanes and ≥ v·Δt ≥ 10 m for acute merges;
//! * parallel lanes are offset by at least 3.5 m laterally.
//!
//! The passage order at conflict points is shuffled per scene, so datasets
//! contain both "i yields to j" and "j yields to i" outcomes — the
//! multimodality that joint prediction is meant to capture.
//!
//! Every scene gets a random rigid transform (distances are unaffected) and
//! all written coordinates are quantized to 6 decimals so that serialization
//! round-trips exactly.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geom::{Rigid2, Vec2};

use super::{AgentKind, AgentTrack, FutureStep, HistoryStep, LanePolyline, Scene};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    StraightFollow,
    CrossingIntersection,
    LaneChange,
    Merge,
}

impl ScenarioKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ScenarioKind::StraightFollow => "straight_follow",
            ScenarioKind::CrossingIntersection => "crossing",
            ScenarioKind::LaneChange => "lane_change",
            ScenarioKind::Merge => "merge",
        }
    }

    pub fn all() -> Vec<ScenarioKind> {
        vec![
            ScenarioKind::StraightFollow,
            ScenarioKind::CrossingIntersection,
            ScenarioKind::LaneChange,
            ScenarioKind::Merge,
        ]
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenConfig {
    pub scene_count: usize,
    pub agents_min: usize,
    pub agents_max: usize,
    pub mix: Vec<ScenarioKind>,
    pub h: usize,
    pub t: usize,
    pub hz: f64,
    /// Standard deviation (m) of observation noise on history positions.
    pub noise_std: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            scene_count: 100,
            agents_min: 2,
            agents_max: 6,
            mix: ScenarioKind::all(),
            h: 10,
            t: 15,
            hz: 10.0,
            noise_std: 0.05,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum GenError {
    #[error("generator config error: {0}")]
    Config(String),
}

/// Minimum spacing between conflict-point passage times.
const TAU_SPACING_MIN: f64 = 2.0;
const TAU_SPACING_MAX: f64 = 2.8;
/// Minimum longitudinal gap within one lane.
const GAP_MIN: f64 = 8.0;
const GAP_MAX: f64 = 15.0;
const LANE_HALF_EXTENT: f64 = 150.0;
const LANE_SAMPLE_STEP: f64 = 5.0;
const LANE_WIDTH: f64 = 3.5;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn scene_rng(seed: u64, index: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(
        seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
    ))
}

/// Standard normal via Box–Muller.
fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(1e-12..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn q6(v: f64) -> f64 {
    (v * 1e6).round() / 1e6
}

/// Arc-length parameterized polyline with linear extrapolation past the ends.
struct Path2 {
    pts: Vec<Vec2>,
    cum: Vec<f64>,
}

impl Path2 {
    fn new(pts: Vec<Vec2>) -> Self {
        assert!(pts.len() >= 2, "path needs at least 2 points");
        let mut cum = Vec::with_capacity(pts.len());
        let mut total = 0.0;
        cum.push(0.0);
        for pair in pts.windows(2) {
            total += (pair[1] - pair[0]).norm();
            cum.push(total);
        }
        Self { pts, cum }
    }

    fn length(&self) -> f64 {
        *self.cum.last().unwrap()
    }

    fn segment_dir(&self, i: usize) -> Vec2 {
        let d = self.pts[i + 1] - self.pts[i];
        d * (1.0 / d.norm())
    }

    /// Position and unit direction at arc length `s`.
    fn sample(&self, s: f64) -> (Vec2, Vec2) {
        if s <= 0.0 {
            let dir = self.segment_dir(0);
            return (self.pts[0] + dir * s, dir);
        }
        if s >= self.length() {
            let last = self.pts.len() - 2;
            let dir = self.segment_dir(last);
            return (*self.pts.last().unwrap() + dir * (s - self.length()), dir);
        }
        let i = self.cum.partition_point(|&c| c <= s).min(self.cum.len() - 1) - 1;
        let dir = self.segment_dir(i);
        (self.pts[i] + dir * (s - self.cum[i]), dir)
    }

    /// Decimated copy used as a lane centerline.
    fn lane_points(&self) -> Vec<Vec2> {
        let mut out = vec![self.pts[0]];
        let mut next = LANE_SAMPLE_STEP;
        while next < self.length() {
            out.push(self.sample(next).0);
            next += LANE_SAMPLE_STEP;
        }
        out.push(*self.pts.last().unwrap());
        out
    }
}

fn straight_path(origin: Vec2, dir: Vec2) -> Path2 {
    Path2::new(vec![
        origin - dir * LANE_HALF_EXTENT,
        origin + dir * LANE_HALF_EXTENT,
    ])
}

/// One agent to synthesize: a path, the arc position at t = 0, and a speed.
struct AgentSpec {
    path: Path2,
    s0: f64,
    speed: f64,
    kind: AgentKind,
    scored: bool,
}

struct SceneDraft {
    specs: Vec<AgentSpec>,
    lane_paths: Vec<Path2>,
}

/// Passage-time ladder at a shared conflict point: strictly increasing,
/// spaced by at least [`TAU_SPACING_MIN`], handed out in shuffled order.
fn tau_ladder(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let mut taus = Vec::with_capacity(n);
    let mut tau = rng.gen_range(0.3..0.9);
    for _ in 0..n {
        taus.push(tau);
        tau += rng.gen_range(TAU_SPACING_MIN..TAU_SPACING_MAX);
    }
    taus.shuffle(rng);
    taus
}

fn straight_follow(rng: &mut ChaCha8Rng, n: usize) -> SceneDraft {
    let two_lanes = n >= 4 || (n >= 3 && rng.gen_bool(0.5));
    let mut lane_paths = vec![straight_path(Vec2::new(0.0, 0.0), Vec2::new(1.0, 0.0))];
    if two_lanes {
        lane_paths.push(straight_path(Vec2::new(0.0, LANE_WIDTH), Vec2::new(1.0, 0.0)));
    }

    // A pedestrian on the sidewalk (8 m lateral) replaces one vehicle slot.
    let with_ped = n >= 3 && rng.gen_bool(0.25);
    let vehicles = if with_ped { n - 1 } else { n };

    let lane_count = lane_paths.len();
    let speeds: Vec<f64> = (0..lane_count).map(|_| rng.gen_range(5.0..8.0)).collect();
    // Per-lane cursor walks backward from the chain leader, so gaps within a
    // lane are cumulative and never overlap.
    let mut cursor: Vec<f64> = (0..lane_count)
        .map(|_| LANE_HALF_EXTENT + rng.gen_range(0.0..6.0))
        .collect();
    let mut specs = Vec::new();
    for v in 0..vehicles {
        let lane = v % lane_count;
        if v >= lane_count {
            cursor[lane] -= rng.gen_range(GAP_MIN..GAP_MAX);
        }
        specs.push(AgentSpec {
            path: straight_path(
                Vec2::new(0.0, if lane == 0 { 0.0 } else { LANE_WIDTH }),
                Vec2::new(1.0, 0.0),
            ),
            s0: cursor[lane],
            speed: speeds[lane],
            kind: AgentKind::Vehicle,
            scored: true,
        });
    }
    if with_ped {
        specs.push(AgentSpec {
            path: straight_path(Vec2::new(0.0, -8.0), Vec2::new(1.0, 0.0)),
            s0: LANE_HALF_EXTENT + rng.gen_range(-10.0..10.0),
            speed: 1.4,
            kind: AgentKind::Pedestrian,
            scored: false,
        });
    }
    SceneDraft { specs, lane_paths }
}

fn crossing(rng: &mut ChaCha8Rng, n: usize) -> SceneDraft {
    let dir_x = if rng.gen_bool(0.5) {
        Vec2::new(1.0, 0.0)
    } else {
        Vec2::new(-1.0, 0.0)
    };
    let dir_y = if rng.gen_bool(0.5) {
        Vec2::new(0.0, 1.0)
    } else {
        Vec2::new(0.0, -1.0)
    };
    let lane_paths = vec![
        straight_path(Vec2::new(0.0, 0.0), dir_x),
        straight_path(Vec2::new(0.0, 0.0), dir_y),
    ];
    let speeds = [rng.gen_range(5.0..8.0), rng.gen_range(5.0..8.0)];

    let with_ped = n >= 3 && rng.gen_bool(0.2);
    let vehicles = if with_ped { n - 1 } else { n };

    // Lane assignment: at least one vehicle per lane, rest random.
    let mut lanes: Vec<usize> = vec![0, 1];
    while lanes.len() < vehicles {
        lanes.push(rng.gen_range(0..2));
    }
    lanes.shuffle(rng);
    lanes.truncate(vehicles);

    let taus = tau_ladder(rng, vehicles);
    let mut specs = Vec::new();
    for v in 0..vehicles {
        let lane = lanes[v];
        let dir = if lane == 0 { dir_x } else { dir_y };
        // Arc 0 is the lane start; the conflict point (origin) sits at arc
        // LANE_HALF_EXTENT. Passing it at time tau means s0 = center - v·tau.
        specs.push(AgentSpec {
            path: straight_path(Vec2::new(0.0, 0.0), dir),
            s0: LANE_HALF_EXTENT - speeds[lane] * taus[v],
            speed: speeds[lane],
            kind: AgentKind::Vehicle,
            scored: true,
        });
    }
    if with_ped {
        // Sidewalk corridor parallel to the x road, well past the crossing.
        let side = if rng.gen_bool(0.5) { 8.0 } else { -8.0 };
        specs.push(AgentSpec {
            path: straight_path(Vec2::new(0.0, side), Vec2::new(1.0, 0.0)),
            s0: LANE_HALF_EXTENT + 12.0 + rng.gen_range(0.0..6.0),
            speed: 1.4,
            kind: AgentKind::Pedestrian,
            scored: false,
        });
    }
    SceneDraft { specs, lane_paths }
}

/// Smoothstep-blended lane-change path from y = 0 to y = `dy`, with the
/// blend spanning `x0..x0+lx`. Sampled densely enough that arc-length
/// stepping stays smooth.
fn lane_change_path(x0: f64, lx: f64, dy: f64) -> Path2 {
    let mut pts = vec![Vec2::new(-LANE_HALF_EXTENT, 0.0), Vec2::new(x0, 0.0)];
    let steps = 60;
    for i in 1..=steps {
        let u = i as f64 / steps as f64;
        let s = u * u * (3.0 - 2.0 * u);
        pts.push(Vec2::new(x0 + u * lx, dy * s));
    }
    pts.push(Vec2::new(LANE_HALF_EXTENT, dy));
    Path2::new(pts)
}

fn lane_change(rng: &mut ChaCha8Rng, n: usize) -> SceneDraft {
    let dy = if rng.gen_bool(0.5) { LANE_WIDTH } else { -LANE_WIDTH };
    let speed = rng.gen_range(5.5..7.5);
    // The maneuver lasts 2.5 s and is centered near t = 0, so it overlaps
    // both history and future. Lateral acceleration peaks at
    // 6·|dy|/2.5² ≈ 3.4 m/s², inside the 5 m/s² budget.
    let lx = 2.5 * speed;
    let x0 = -lx / 2.0 + rng.gen_range(-1.0..1.0);

    let lane_paths = vec![
        straight_path(Vec2::new(0.0, 0.0), Vec2::new(1.0, 0.0)),
        straight_path(Vec2::new(0.0, dy), Vec2::new(1.0, 0.0)),
    ];

    let changer_path = lane_change_path(x0, lx, dy);
    // Arc position of x = 0 along the changer path: the pre-blend straight
    // covers LANE_HALF_EXTENT + x0 of arc, and the blend adds curve length.
    let mut s_at_zero = LANE_HALF_EXTENT + x0;
    {
        // Walk the blend until x crosses 0.
        let mut s = s_at_zero;
        loop {
            let (p, _) = changer_path.sample(s);
            if p.x >= 0.0 || s >= changer_path.length() {
                s_at_zero = s;
                break;
            }
            s += 0.05;
        }
    }

    let mut specs = vec![AgentSpec {
        path: changer_path,
        s0: s_at_zero,
        speed,
        kind: AgentKind::Vehicle,
        scored: true,
    }];

    // Remaining slots: followers on the source lane, then a leader and a
    // follower on the target lane, then deeper source-lane followers.
    let mut source_back = 0.0;
    let mut target_lead = 20.0 + rng.gen_range(0.0..8.0);
    let mut target_back = -(20.0 + rng.gen_range(0.0..8.0));
    for slot in 1..n {
        match slot {
            2 => {
                specs.push(AgentSpec {
                    path: straight_path(Vec2::new(0.0, dy), Vec2::new(1.0, 0.0)),
                    s0: LANE_HALF_EXTENT + target_lead,
                    speed,
                    kind: AgentKind::Vehicle,
                    scored: true,
                });
                target_lead += rng.gen_range(GAP_MIN..GAP_MAX);
            }
            3 => {
                specs.push(AgentSpec {
                    path: straight_path(Vec2::new(0.0, dy), Vec2::new(1.0, 0.0)),
                    s0: LANE_HALF_EXTENT + target_back,
                    speed,
                    kind: AgentKind::Vehicle,
                    scored: true,
                });
                target_back -= rng.gen_range(GAP_MIN..GAP_MAX);
            }
            _ => {
                source_back -= rng.gen_range(GAP_MIN..GAP_MAX);
                specs.push(AgentSpec {
                    path: straight_path(Vec2::new(0.0, 0.0), Vec2::new(1.0, 0.0)),
                    s0: LANE_HALF_EXTENT + source_back,
                    speed,
                    kind: AgentKind::Vehicle,
                    scored: true,
                });
            }
        }
    }
    SceneDraft { specs, lane_paths }
}

/// Ramp path approaching the mainline at `theta`, blended through the merge
/// point (origin) with a quadratic Bézier, then continuing along +x.
fn merge_ramp_path(theta: f64) -> Path2 {
    let dir = Vec2::new(theta.cos(), theta.sin());
    let blend = 10.0;
    let p0 = Vec2::new(0.0, 0.0) - dir * blend;
    let p1 = Vec2::new(blend, 0.0);
    let mut pts = vec![Vec2::new(0.0, 0.0) - dir * LANE_HALF_EXTENT];
    let steps = 30;
    for i in 0..=steps {
        let u = i as f64 / steps as f64;
        let a = (1.0 - u) * (1.0 - u);
        let c = 2.0 * u * (1.0 - u);
        let b = u * u;
        // Control point is the kink at the origin.
        pts.push(Vec2::new(
            a * p0.x + c * 0.0 + b * p1.x,
            a * p0.y + c * 0.0 + b * p1.y,
        ));
    }
    pts.push(Vec2::new(LANE_HALF_EXTENT, 0.0));
    Path2::new(pts)
}

fn merge(rng: &mut ChaCha8Rng, n: usize) -> SceneDraft {
    let theta = rng.gen_range(0.18..0.24); // 10–14 degrees
    let speed = rng.gen_range(5.5..7.5);
    let ramp = merge_ramp_path(theta);
    let mainline = straight_path(Vec2::new(0.0, 0.0), Vec2::new(1.0, 0.0));

    // Arc length of the merge point along each path.
    let ramp_center = {
        let mut s = LANE_HALF_EXTENT - 12.0;
        loop {
            let (p, _) = ramp.sample(s);
            if p.x >= 0.0 || s >= ramp.length() {
                break s;
            }
            s += 0.05;
        }
    };

    let ramp_count = if n >= 5 { 2 } else { 1 };
    let taus = tau_ladder(rng, n);
    let mut specs = Vec::new();
    for (v, &tau) in taus.iter().enumerate() {
        let on_ramp = v < ramp_count;
        let (path, center) = if on_ramp {
            (merge_ramp_path(theta), ramp_center)
        } else {
            (
                straight_path(Vec2::new(0.0, 0.0), Vec2::new(1.0, 0.0)),
                LANE_HALF_EXTENT,
            )
        };
        specs.push(AgentSpec {
            path,
            s0: center - speed * tau,
            speed,
            kind: AgentKind::Vehicle,
            scored: true,
        });
    }
    SceneDraft {
        specs,
        lane_paths: vec![mainline, ramp],
    }
}

fn build_scene(
    config: &GenConfig,
    kind: ScenarioKind,
    index: usize,
    rng: &mut ChaCha8Rng,
) -> Scene {
    let n = if config.agents_min == config.agents_max {
        config.agents_min
    } else {
        rng.gen_range(config.agents_min..=config.agents_max)
    };
    let draft = match kind {
        ScenarioKind::StraightFollow => straight_follow(rng, n),
        ScenarioKind::CrossingIntersection => crossing(rng, n),
        ScenarioKind::LaneChange => lane_change(rng, n),
        ScenarioKind::Merge => merge(rng, n),
    };

    // Random rigid placement of the whole scene.
    let angle = rng.gen_range(0.0..std::f64::consts::TAU);
    let translation = Vec2::new(rng.gen_range(-40.0..40.0), rng.gen_range(-40.0..40.0));
    let rigid = Rigid2::from_angle(angle, translation);

    let h = config.h;
    let t = config.t;
    let scored_count = draft.specs.iter().filter(|s| s.scored).count();
    let focal_slot = {
        let pick = rng.gen_range(0..scored_count);
        draft
            .specs
            .iter()
            .enumerate()
            .filter(|(_, s)| s.scored)
            .nth(pick)
            .map(|(i, _)| i)
            .unwrap()
    };

    let mut agents = Vec::with_capacity(draft.specs.len());
    for (i, spec) in draft.specs.iter().enumerate() {
        let is_focal = i == focal_slot;
        // Leading-invalid prefix for some non-focal agents, leaving at least
        // two valid steps.
        let invalid_prefix = if !is_focal && h > 3 && rng.gen_bool(0.3) {
            rng.gen_range(1..=(h / 3).max(1)).min(h - 2)
        } else {
            0
        };

        let mut history = Vec::with_capacity(h);
        for k in 0..h {
            if k < invalid_prefix {
                history.push(HistoryStep::invalid());
                continue;
            }
            let time = (k as f64 - (h as f64 - 1.0)) / config.hz;
            let (mut pos, dir) = spec.path.sample(spec.s0 + spec.speed * time);
            if k + 1 < h && config.noise_std > 0.0 {
                pos.x += gauss(rng) * config.noise_std;
                pos.y += gauss(rng) * config.noise_std;
            }
            let pos = rigid.apply_point(pos);
            let dir = rigid.apply_vector(dir);
            history.push(HistoryStep {
                x: q6(pos.x),
                y: q6(pos.y),
                hx: q6(dir.x),
                hy: q6(dir.y),
                valid: true,
            });
        }

        let mut future = Vec::with_capacity(t);
        for j in 0..t {
            let time = (j as f64 + 1.0) / config.hz;
            let (pos, _) = spec.path.sample(spec.s0 + spec.speed * time);
            let pos = rigid.apply_point(pos);
            future.push(FutureStep {
                x: q6(pos.x),
                y: q6(pos.y),
                valid: true,
            });
        }

        agents.push(AgentTrack {
            id: format!("a{i}"),
            kind: spec.kind,
            is_scored: spec.scored,
            is_focal,
            history,
            future,
        });
    }

    let lanes = draft
        .lane_paths
        .iter()
        .enumerate()
        .map(|(i, path)| LanePolyline {
            id: format!("l{i}"),
            centerline: path
                .lane_points()
                .into_iter()
                .map(|p| {
                    let p = rigid.apply_point(p);
                    (q6(p.x), q6(p.y))
                })
                .collect(),
        })
        .collect();

    Scene {
        scenario_id: format!("{}_{index:05}", kind.as_str()),
        hz: config.hz,
        h,
        t,
        focal_agent_id: format!("a{focal_slot}"),
        agents,
        lanes,
    }
}

fn validate_config(config: &GenConfig) -> Result<(), GenError> {
    if config.scene_count == 0 {
        return Err(GenError::Config("scene_count must be positive".into()));
    }
    if config.mix.is_empty() {
        return Err(GenError::Config("scenario mix is empty".into()));
    }
    if config.agents_min < 2 {
        return Err(GenError::Config(format!(
            "agents_min {} must be at least 2",
            config.agents_min
        )));
    }
    if config.agents_max > 8 {
        return Err(GenError::Config(format!(
            "agents_max {} must be at most 8",
            config.agents_max
        )));
    }
    if config.agents_min > config.agents_max {
        return Err(GenError::Config(format!(
            "agents_min {} exceeds agents_max {}",
            config.agents_min, config.agents_max
        )));
    }
    if config.h < 2 {
        return Err(GenError::Config("H must be at least 2".into()));
    }
    if config.t == 0 {
        return Err(GenError::Config("T must be positive".into()));
    }
    if !(config.hz.is_finite() && config.hz > 0.0) {
        return Err(GenError::Config(format!("hz {} must be positive", config.hz)));
    }
    if !(config.noise_std.is_finite() && config.noise_std >= 0.0) {
        return Err(GenError::Config(format!(
            "noise_std {} must be non-negative",
            config.noise_std
        )));
    }
    Ok(())
}

/// Generates `config.scene_count` scenes, deterministic in (config, seed).
/// Each scene draws from its own seed, so any subset can be regenerated
/// independently.
pub fn generate_synthetic_dataset(config: &GenConfig, seed: u64) -> Result<Vec<Scene>, GenError> {
    validate_config(config)?;
    let mut scenes = Vec::with_capacity(config.scene_count);
    for i in 0..config.scene_count {
        let mut rng = scene_rng(seed, i);
        let kind = config.mix[rng.gen_range(0..config.mix.len())];
        scenes.push(build_scene(config, kind, i, &mut rng));
    }
    Ok(scenes)
}
