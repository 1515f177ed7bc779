//! Evaluation metrics and prediction-assembly methods.
//!
//! Three ways to turn K predicted worlds into a judged outcome:
//!
//! * scene joint — keep worlds intact, pick the one with the lowest mean
//!   endpoint error over scored agents (`avg_min_fde`);
//! * straight marginal — pick the world that best fits the focal agent and
//!   keep everyone else's trajectory from that same world;
//! * combined joint — stitch a composite world from each agent's
//!   individually best mode (which may mix modes and collide).
//!
//! Collision detection follows the literal pairwise center-distance sweep;
//! `CR` is the fraction of scenes whose selected world contains any
//! colliding pair. All arithmetic is f64; aggregate sums are computed in
//! value-sorted order so scene file order cannot perturb the report.

use serde::{Deserialize, Serialize};

use crate::geom::Vec2;
use crate::model::ScenePrediction;
use crate::scene::Scene;

/// Enumeration guard: `K^A` explodes quickly.
pub const MAX_ENUMERATION_AGENTS: usize = 6;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsConfig {
    /// Two centers closer than this collide (meters).
    pub dist_safe: f64,
    /// Endpoint errors above this count as misses (meters).
    pub miss_threshold: f64,
    /// Worlds per scene.
    pub k: usize,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            dist_safe: 2.0,
            miss_threshold: 2.0,
            k: 6,
        }
    }
}

impl MetricsConfig {
    pub fn validate(&self) -> Result<(), MetricsError> {
        if self.dist_safe <= 0.0 || self.miss_threshold <= 0.0 {
            return Err(MetricsError::InvalidConfig(
                "thresholds must be positive".into(),
            ));
        }
        if self.k == 0 {
            return Err(MetricsError::InvalidConfig("K must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("metrics config error: {0}")]
    InvalidConfig(String),
    #[error("no scored agents in scene {0}")]
    NoScoredAgents(String),
    #[error("scene {0} has no focal agent")]
    MissingFocal(String),
    #[error("agent {0} has no valid future step")]
    AllInvalidFuture(String),
    #[error("exhaustive enumeration refused for {agents} agents (max {max})")]
    TooManyAgents { agents: usize, max: usize },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("prediction/scene mismatch in {0}: {1}")]
    ShapeMismatch(String, String),
}

/// One selected world: every agent's trajectory over the horizon.
#[derive(Debug, Clone)]
pub struct WorldTraj {
    pub agents: usize,
    pub steps: usize,
    points: Vec<Vec2>,
}

impl WorldTraj {
    pub fn at(&self, a: usize, t: usize) -> Vec2 {
        self.points[a * self.steps + t]
    }
}

/// Ground-truth view the metrics need from a scene.
#[derive(Debug, Clone)]
struct SceneTruth {
    agents: usize,
    steps: usize,
    positions: Vec<Vec2>,
    valid: Vec<bool>,
    scored: Vec<bool>,
    endpoints: Vec<Option<usize>>,
    focal: Option<usize>,
}

impl SceneTruth {
    fn from_scene(scene: &Scene) -> Self {
        let agents = scene.agents.len();
        let steps = scene.t;
        let mut positions = Vec::with_capacity(agents * steps);
        let mut valid = Vec::with_capacity(agents * steps);
        for agent in &scene.agents {
            for step in &agent.future {
                positions.push(step.position());
                valid.push(step.valid);
            }
        }
        Self {
            agents,
            steps,
            positions,
            valid,
            scored: scene.agents.iter().map(|a| a.is_scored).collect(),
            endpoints: scene
                .agents
                .iter()
                .map(|a| a.future.iter().rposition(|s| s.valid))
                .collect(),
            focal: scene.focal_index(),
        }
    }

    fn position(&self, a: usize, t: usize) -> Vec2 {
        self.positions[a * self.steps + t]
    }
}

fn check_shapes(pred: &ScenePrediction, scene: &Scene) -> Result<(), MetricsError> {
    if pred.agent_count() != scene.agents.len() || pred.steps() != scene.t {
        return Err(MetricsError::ShapeMismatch(
            scene.scenario_id.clone(),
            format!(
                "prediction [{}, {}, {}, 2] vs scene A={} T={}",
                pred.agent_count(),
                pred.modes(),
                pred.steps(),
                scene.agents.len(),
                scene.t
            ),
        ));
    }
    Ok(())
}

/// Endpoint displacement of agent `a` in world `k` at its last valid step.
fn endpoint_error(pred: &ScenePrediction, truth: &SceneTruth, a: usize, k: usize) -> f64 {
    let end = truth.endpoints[a].expect("checked scored endpoint");
    (pred.position(a, k, end) - truth.position(a, end)).norm()
}

/// Mean displacement of agent `a` in world `k` over its valid steps.
fn agent_ade(pred: &ScenePrediction, truth: &SceneTruth, a: usize, k: usize) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for t in 0..truth.steps {
        if truth.valid[a * truth.steps + t] {
            total += (pred.position(a, k, t) - truth.position(a, t)).norm();
            count += 1;
        }
    }
    total / count.max(1) as f64
}

fn scored_indices(truth: &SceneTruth, scene_id: &str) -> Result<Vec<usize>, MetricsError> {
    let scored: Vec<usize> = (0..truth.agents).filter(|&a| truth.scored[a]).collect();
    if scored.is_empty() {
        return Err(MetricsError::NoScoredAgents(scene_id.to_string()));
    }
    for &a in &scored {
        if truth.endpoints[a].is_none() {
            return Err(MetricsError::AllInvalidFuture(format!(
                "{scene_id} agent {a}"
            )));
        }
    }
    Ok(scored)
}

/// Per-agent minima over the K worlds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgentMinMetrics {
    pub min_ade: f64,
    pub min_fde: f64,
    pub missed: bool,
}

/// Per scored agent: min-over-k ADE and FDE, and the miss flag.
pub fn per_agent_min_metrics(
    pred: &ScenePrediction,
    scene: &Scene,
    config: &MetricsConfig,
) -> Result<Vec<(usize, AgentMinMetrics)>, MetricsError> {
    config.validate()?;
    check_shapes(pred, scene)?;
    let truth = SceneTruth::from_scene(scene);
    let scored = scored_indices(&truth, &scene.scenario_id)?;
    let k = pred.modes();
    Ok(scored
        .into_iter()
        .map(|a| {
            let min_fde = (0..k)
                .map(|m| endpoint_error(pred, &truth, a, m))
                .fold(f64::INFINITY, f64::min);
            let min_ade = (0..k)
                .map(|m| agent_ade(pred, &truth, a, m))
                .fold(f64::INFINITY, f64::min);
            (
                a,
                AgentMinMetrics {
                    min_ade,
                    min_fde,
                    missed: min_fde > config.miss_threshold,
                },
            )
        })
        .collect())
}

fn mean_endpoint_at(
    pred: &ScenePrediction,
    truth: &SceneTruth,
    scored: &[usize],
    k: usize,
) -> f64 {
    let total: f64 = scored
        .iter()
        .map(|&a| endpoint_error(pred, truth, a, k))
        .sum();
    total / scored.len() as f64
}

/// Lowest mean endpoint error over scored agents, with its world index.
pub fn avg_min_fde(
    pred: &ScenePrediction,
    scene: &Scene,
    config: &MetricsConfig,
) -> Result<(f64, usize), MetricsError> {
    config.validate()?;
    check_shapes(pred, scene)?;
    let truth = SceneTruth::from_scene(scene);
    let scored = scored_indices(&truth, &scene.scenario_id)?;
    let mut best = (f64::INFINITY, 0usize);
    for k in 0..pred.modes() {
        let mean = mean_endpoint_at(pred, &truth, &scored, k);
        if mean < best.0 {
            best = (mean, k);
        }
    }
    Ok(best)
}

/// True iff any agent pair comes within `dist_safe` at any timestep.
pub fn detect_collision(world: &WorldTraj, config: &MetricsConfig) -> bool {
    for t in 0..world.steps {
        for i in 0..world.agents {
            for j in (i + 1)..world.agents {
                if (world.at(i, t) - world.at(j, t)).norm() < config.dist_safe {
                    return true;
                }
            }
        }
    }
    false
}

/// Fraction of worlds that contain a collision.
pub fn collision_rate(worlds: &[WorldTraj], config: &MetricsConfig) -> Result<f64, MetricsError> {
    if worlds.is_empty() {
        return Err(MetricsError::EmptyDataset);
    }
    let hits = worlds.iter().filter(|w| detect_collision(w, config)).count();
    Ok(hits as f64 / worlds.len() as f64)
}

/// Extracts world `k` of a joint prediction.
pub fn extract_world(pred: &ScenePrediction, k: usize) -> WorldTraj {
    let (agents, steps) = (pred.agent_count(), pred.steps());
    let mut points = Vec::with_capacity(agents * steps);
    for a in 0..agents {
        for t in 0..steps {
            points.push(pred.position(a, k, t));
        }
    }
    WorldTraj {
        agents,
        steps,
        points,
    }
}

/// Straight marginal assembly: the world that best fits the focal agent.
pub fn assemble_straight_marginal(
    pred: &ScenePrediction,
    scene: &Scene,
) -> Result<(WorldTraj, usize), MetricsError> {
    check_shapes(pred, scene)?;
    let truth = SceneTruth::from_scene(scene);
    let focal = truth
        .focal
        .ok_or_else(|| MetricsError::MissingFocal(scene.scenario_id.clone()))?;
    if truth.endpoints[focal].is_none() {
        return Err(MetricsError::AllInvalidFuture(format!(
            "{} focal agent",
            scene.scenario_id
        )));
    }
    let mut best = (f64::INFINITY, 0usize);
    for k in 0..pred.modes() {
        let err = endpoint_error(pred, &truth, focal, k);
        if err < best.0 {
            best = (err, k);
        }
    }
    Ok((extract_world(pred, best.1), best.1))
}

/// Combined joint assembly: per-agent independent best mode, stitched into
/// one (possibly inconsistent) composite world. Unscored or endpoint-less
/// agents fall back to mode 0. Also returns each agent's chosen mode.
pub fn assemble_combined_joint(
    pred: &ScenePrediction,
    scene: &Scene,
) -> Result<(WorldTraj, Vec<usize>), MetricsError> {
    check_shapes(pred, scene)?;
    let truth = SceneTruth::from_scene(scene);
    scored_indices(&truth, &scene.scenario_id)?;
    let (agents, steps) = (truth.agents, truth.steps);
    let mut winners = Vec::with_capacity(agents);
    for a in 0..agents {
        if !truth.scored[a] || truth.endpoints[a].is_none() {
            winners.push(0);
            continue;
        }
        let mut best = (f64::INFINITY, 0usize);
        for k in 0..pred.modes() {
            let err = endpoint_error(pred, &truth, a, k);
            if err < best.0 {
                best = (err, k);
            }
        }
        winners.push(best.1);
    }
    let mut points = Vec::with_capacity(agents * steps);
    for (a, &k) in winners.iter().enumerate() {
        for t in 0..steps {
            points.push(pred.position(a, k, t));
        }
    }
    Ok((
        WorldTraj {
            agents,
            steps,
            points,
        },
        winners,
    ))
}

/// Exhaustive mode assignment search minimizing the mean endpoint error over
/// scored agents. Exponential in the agent count — refused above
/// [`MAX_ENUMERATION_AGENTS`]. Returns the assignment and the number of
/// assignments evaluated (exactly `K^A`).
pub fn assemble_combined_exhaustive(
    pred: &ScenePrediction,
    scene: &Scene,
) -> Result<(Vec<usize>, usize), MetricsError> {
    check_shapes(pred, scene)?;
    let agents = scene.agents.len();
    if agents > MAX_ENUMERATION_AGENTS {
        return Err(MetricsError::TooManyAgents {
            agents,
            max: MAX_ENUMERATION_AGENTS,
        });
    }
    let truth = SceneTruth::from_scene(scene);
    scored_indices(&truth, &scene.scenario_id)?;
    let k = pred.modes();
    let mut assignment = vec![0usize; agents];
    let mut best_assignment = assignment.clone();
    let mut best_total = f64::INFINITY;
    let mut evaluated = 0usize;
    loop {
        evaluated += 1;
        let total: f64 = (0..agents)
            .filter(|&a| truth.scored[a] && truth.endpoints[a].is_some())
            .map(|a| endpoint_error(pred, &truth, a, assignment[a]))
            .sum();
        if total < best_total {
            best_total = total;
            best_assignment.copy_from_slice(&assignment);
        }
        // Odometer increment over the K^A assignment space.
        let mut digit = 0;
        loop {
            if digit == agents {
                return Ok((best_assignment, evaluated));
            }
            assignment[digit] += 1;
            if assignment[digit] < k {
                break;
            }
            assignment[digit] = 0;
            digit += 1;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    SceneJoint,
    StraightMarginal,
    CombinedJoint,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::SceneJoint => "scene_joint",
            Method::StraightMarginal => "straight_marginal",
            Method::CombinedJoint => "combined_joint",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "scene" | "scene_joint" => Some(Method::SceneJoint),
            "marginal" | "straight_marginal" => Some(Method::StraightMarginal),
            "combined" | "combined_joint" => Some(Method::CombinedJoint),
            _ => None,
        }
    }
}

/// One scene's outcome under one assembly method.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneEval {
    pub scenario_id: String,
    pub avg_min_ade: f64,
    pub avg_min_fde: f64,
    pub avg_mr: f64,
    pub collided: bool,
    pub best_world_index: usize,
}

/// Dataset-level evaluation of one method.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: Method,
    pub checkpoint: String,
    pub dist_safe: f64,
    pub miss_threshold: f64,
    pub k: usize,
    pub scene_count: usize,
    pub mean_avg_min_ade: f64,
    pub mean_avg_min_fde: f64,
    pub mean_avg_mr: f64,
    pub collision_rate: f64,
    pub rows: Vec<SceneEval>,
}

/// Order-invariant mean: sums in value-sorted order.
fn stable_mean(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.sort_unstable_by(f64::total_cmp);
    values.iter().sum::<f64>() / values.len() as f64
}

fn eval_world(
    pred: &ScenePrediction,
    truth: &SceneTruth,
    scored: &[usize],
    per_agent_k: &dyn Fn(usize) -> usize,
    config: &MetricsConfig,
) -> (f64, f64, f64) {
    let mut fde_sum = 0.0;
    let mut ade_sum = 0.0;
    let mut misses = 0usize;
    for &a in scored {
        let k = per_agent_k(a);
        let fde = endpoint_error(pred, truth, a, k);
        fde_sum += fde;
        ade_sum += agent_ade(pred, truth, a, k);
        if fde > config.miss_threshold {
            misses += 1;
        }
    }
    let n = scored.len() as f64;
    (ade_sum / n, fde_sum / n, misses as f64 / n)
}

/// Evaluates one method over pre-computed predictions.
///
/// `pairs` holds one `(scene, prediction)` per scene, in report order.
pub fn evaluate_method(
    pairs: &[(&Scene, &ScenePrediction)],
    method: Method,
    config: &MetricsConfig,
    checkpoint: &str,
) -> Result<EvalReport, MetricsError> {
    config.validate()?;
    if pairs.is_empty() {
        return Err(MetricsError::EmptyDataset);
    }
    let mut rows = Vec::with_capacity(pairs.len());
    let mut collisions = 0usize;
    for &(scene, pred) in pairs {
        check_shapes(pred, scene)?;
        let truth = SceneTruth::from_scene(scene);
        let scored = scored_indices(&truth, &scene.scenario_id)?;
        let (world, best_index, ade, fde, mr) = match method {
            Method::SceneJoint => {
                let (fde, best) = avg_min_fde(pred, scene, config)?;
                let world = extract_world(pred, best);
                let (ade, fde_check, mr) = eval_world(pred, &truth, &scored, &|_| best, config);
                debug_assert!((fde - fde_check).abs() < 1e-12);
                (world, best, ade, fde, mr)
            }
            Method::StraightMarginal => {
                let (world, best) = assemble_straight_marginal(pred, scene)?;
                let (ade, fde, mr) = eval_world(pred, &truth, &scored, &|_| best, config);
                (world, best, ade, fde, mr)
            }
            Method::CombinedJoint => {
                let (world, winners) = assemble_combined_joint(pred, scene)?;
                let focal_mode = truth.focal.map(|f| winners[f]).unwrap_or(0);
                let per_agent = |a: usize| winners[a];
                let (ade, fde, mr) = eval_world(pred, &truth, &scored, &per_agent, config);
                (world, focal_mode, ade, fde, mr)
            }
        };
        let collided = detect_collision(&world, config);
        collisions += collided as usize;
        rows.push(SceneEval {
            scenario_id: scene.scenario_id.clone(),
            avg_min_ade: ade,
            avg_min_fde: fde,
            avg_mr: mr,
            collided,
            best_world_index: best_index,
        });
    }
    let mut ades: Vec<f64> = rows.iter().map(|r| r.avg_min_ade).collect();
    let mut fdes: Vec<f64> = rows.iter().map(|r| r.avg_min_fde).collect();
    let mut mrs: Vec<f64> = rows.iter().map(|r| r.avg_mr).collect();
    Ok(EvalReport {
        method,
        checkpoint: checkpoint.to_string(),
        dist_safe: config.dist_safe,
        miss_threshold: config.miss_threshold,
        k: config.k,
        scene_count: rows.len(),
        mean_avg_min_ade: stable_mean(&mut ades),
        mean_avg_min_fde: stable_mean(&mut fdes),
        mean_avg_mr: stable_mean(&mut mrs),
        collision_rate: collisions as f64 / rows.len() as f64,
        rows,
    })
}

/// CSV rendering: `# key: value` header lines then one row per scene.
pub fn report_to_csv(reports: &[EvalReport]) -> String {
    let mut out = String::new();
    if let Some(first) = reports.first() {
        out.push_str(&format!("# checkpoint: {}\n", first.checkpoint));
        out.push_str(&format!("# dist_safe: {}\n", first.dist_safe));
        out.push_str(&format!("# miss_threshold: {}\n", first.miss_threshold));
        out.push_str(&format!("# k: {}\n", first.k));
    }
    out.push_str(
        "method,scenario_id,avg_min_ade,avg_min_fde,avg_mr,collided,best_world_index\n",
    );
    for report in reports {
        for row in &report.rows {
            out.push_str(&format!(
                "{},{},{:.6},{:.6},{:.6},{},{}\n",
                report.method.as_str(),
                row.scenario_id,
                row.avg_min_ade,
                row.avg_min_fde,
                row.avg_mr,
                row.collided,
                row.best_world_index
            ));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Rigid2;
    use crate::scene::{AgentKind, AgentTrack, FutureStep, HistoryStep, Scene};
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scene_with(agents: usize, t: usize) -> Scene {
        let agent = |i: usize| AgentTrack {
            id: format!("a{i}"),
            kind: AgentKind::Vehicle,
            is_scored: true,
            is_focal: i == 0,
            history: vec![HistoryStep {
                x: 0.0,
                y: 10.0 * i as f64,
                hx: 1.0,
                hy: 0.0,
                valid: true,
            }],
            future: (0..t)
                .map(|s| FutureStep {
                    x: (s + 1) as f64,
                    y: 10.0 * i as f64,
                    valid: true,
                })
                .collect(),
        };
        Scene {
            scenario_id: "m".into(),
            hz: 10.0,
            h: 1,
            t,
            focal_agent_id: "a0".into(),
            agents: (0..agents).map(agent).collect(),
            lanes: vec![],
        }
    }

    /// Prediction whose endpoint error for (agent, mode) is `offsets[a][k]`,
    /// applied along +y at the final step only.
    fn offset_prediction(scene: &Scene, offsets: &[Vec<f64>]) -> ScenePrediction {
        let a = scene.agents.len();
        let t = scene.t;
        let k = offsets[0].len();
        let mut traj = vec![0.0f32; a * k * t * 2];
        for (ai, agent) in scene.agents.iter().enumerate() {
            for m in 0..k {
                for (ti, step) in agent.future.iter().enumerate() {
                    let extra = if ti == t - 1 { offsets[ai][m] } else { 0.0 };
                    traj[((ai * k + m) * t + ti) * 2] = step.x as f32;
                    traj[((ai * k + m) * t + ti) * 2 + 1] = (step.y + extra) as f32;
                }
            }
        }
        ScenePrediction {
            trajectories: Tensor::from_vec(&[a, k, t, 2], traj).unwrap(),
            scene_logits: Tensor::zeros(&[k]),
            scene_probs: Tensor::filled(&[k], 1.0 / k as f32),
        }
    }

    fn random_prediction(
        rng: &mut ChaCha8Rng,
        scene: &Scene,
        k: usize,
    ) -> ScenePrediction {
        let a = scene.agents.len();
        let t = scene.t;
        let data: Vec<f32> = (0..a * k * t * 2)
            .map(|_| rng.gen_range(-30.0..30.0))
            .collect();
        ScenePrediction {
            trajectories: Tensor::from_vec(&[a, k, t, 2], data).unwrap(),
            scene_logits: Tensor::zeros(&[k]),
            scene_probs: Tensor::filled(&[k], 1.0 / k as f32),
        }
    }

    #[test]
    fn fixture_matches_hand_computed_methods() {
        let scene = scene_with(2, 2);
        let pred = offset_prediction(&scene, &[vec![1.0, 3.0], vec![5.0, 1.0]]);
        let config = MetricsConfig::default();

        let (value, best) = avg_min_fde(&pred, &scene, &config).unwrap();
        assert!((value - 2.0).abs() < 1e-9, "mean endpoint [(1+5)/2, (3+1)/2]");
        assert_eq!(best, 1);

        let (_, marginal_k) = assemble_straight_marginal(&pred, &scene).unwrap();
        assert_eq!(marginal_k, 0, "focal errors [1,3] pick k=0");
        let report =
            evaluate_method(&[(&scene, &pred)], Method::StraightMarginal, &config, "t").unwrap();
        assert!((report.rows[0].avg_min_fde - 3.0).abs() < 1e-9);

        let (_, winners) = assemble_combined_joint(&pred, &scene).unwrap();
        assert_eq!(winners, vec![0, 1]);
        let report =
            evaluate_method(&[(&scene, &pred)], Method::CombinedJoint, &config, "t").unwrap();
        assert!((report.rows[0].avg_min_fde - 1.0).abs() < 1e-9);
    }

    #[test]
    fn perfect_prediction_scores_zero() {
        let scene = scene_with(3, 4);
        let pred = offset_prediction(&scene, &[vec![0.0; 2], vec![0.0; 2], vec![0.0; 2]]);
        let config = MetricsConfig::default();
        let (value, best) = avg_min_fde(&pred, &scene, &config).unwrap();
        assert_eq!((value, best), (0.0, 0));
        for (_, m) in per_agent_min_metrics(&pred, &scene, &config).unwrap() {
            assert_eq!(m, AgentMinMetrics { min_ade: 0.0, min_fde: 0.0, missed: false });
        }
    }

    #[test]
    fn constant_offset_hits_miss_threshold() {
        let scene = scene_with(1, 5);
        let t = scene.t;
        let mut pred = offset_prediction(&scene, &[vec![0.0]]);
        // Shift every step of the single mode by 3 m.
        {
            let data = pred.trajectories.data_mut();
            for ti in 0..t {
                data[ti * 2 + 1] += 3.0;
            }
        }
        let config = MetricsConfig::default();
        let metrics = per_agent_min_metrics(&pred, &scene, &config).unwrap();
        let (_, m) = metrics[0];
        assert!((m.min_ade - 3.0).abs() < 1e-6);
        assert!((m.min_fde - 3.0).abs() < 1e-6);
        assert!(m.missed);
    }

    #[test]
    fn per_agent_min_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        for _ in 0..50 {
            let a = rng.gen_range(1..5);
            let t = rng.gen_range(1..8);
            let k = rng.gen_range(1..5);
            let scene = scene_with(a, t);
            let pred = random_prediction(&mut rng, &scene, k);
            let config = MetricsConfig::default();
            let fast = per_agent_min_metrics(&pred, &scene, &config).unwrap();
            for (agent, m) in fast {
                let gt_end = scene.agents[agent].future[t - 1].position();
                let brute_fde = (0..k)
                    .map(|mode| (pred.position(agent, mode, t - 1) - gt_end).norm())
                    .fold(f64::INFINITY, f64::min);
                let brute_ade = (0..k)
                    .map(|mode| {
                        (0..t)
                            .map(|ti| {
                                (pred.position(agent, mode, ti)
                                    - scene.agents[agent].future[ti].position())
                                .norm()
                            })
                            .sum::<f64>()
                            / t as f64
                    })
                    .fold(f64::INFINITY, f64::min);
                assert!((m.min_fde - brute_fde).abs() < 1e-9);
                assert!((m.min_ade - brute_ade).abs() < 1e-9);
                assert_eq!(m.missed, brute_fde > 2.0);
            }
        }
    }

    fn world_from(points: Vec<Vec2>, agents: usize, steps: usize) -> WorldTraj {
        WorldTraj {
            agents,
            steps,
            points,
        }
    }

    #[test]
    fn collision_basics() {
        let config = MetricsConfig::default();
        let single = world_from(vec![Vec2::ZERO; 5], 1, 5);
        assert!(!detect_collision(&single, &config));

        // Two parallel tracks 10 m apart never collide.
        let mut pts = Vec::new();
        for a in 0..2 {
            for t in 0..5 {
                pts.push(Vec2::new(t as f64, 10.0 * a as f64));
            }
        }
        assert!(!detect_collision(&world_from(pts, 2, 5), &config));

        // Meeting at one shared point at the same timestep collides.
        let mut pts = Vec::new();
        for t in 0..5 {
            pts.push(Vec2::new(t as f64, 0.0));
        }
        for t in 0..5 {
            pts.push(Vec2::new(2.0, (t as f64) - 2.0));
        }
        assert!(detect_collision(&world_from(pts, 2, 5), &config));
    }

    /// Independent oracle with the loop nest reversed and no short-circuit.
    fn collision_oracle(world: &WorldTraj, dist_safe: f64) -> bool {
        let mut hit = false;
        for j in (0..world.agents).rev() {
            for i in (0..j).rev() {
                for t in (0..world.steps).rev() {
                    if (world.at(i, t) - world.at(j, t)).norm() < dist_safe {
                        hit = true;
                    }
                }
            }
        }
        hit
    }

    #[test]
    fn collision_matches_reversed_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let config = MetricsConfig::default();
        let mut both = 0;
        for _ in 0..1000 {
            let agents = rng.gen_range(1..=8);
            let steps = rng.gen_range(1..=60);
            let spread = rng.gen_range(2.0..25.0);
            let points: Vec<Vec2> = (0..agents * steps)
                .map(|_| Vec2::new(rng.gen_range(-spread..spread), rng.gen_range(-spread..spread)))
                .collect();
            let world = world_from(points, agents, steps);
            let got = detect_collision(&world, &config);
            assert_eq!(got, collision_oracle(&world, config.dist_safe));
            both += got as usize;
        }
        assert!(both > 100, "oracle needs both outcomes; got {both} hits");
    }

    #[test]
    fn collision_is_symmetric_and_rigid_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(52);
        let config = MetricsConfig::default();
        for _ in 0..100 {
            let agents = rng.gen_range(2..=5);
            let steps = rng.gen_range(1..=10);
            let points: Vec<Vec2> = (0..agents * steps)
                .map(|_| Vec2::new(rng.gen_range(-8.0..8.0), rng.gen_range(-8.0..8.0)))
                .collect();
            let world = world_from(points.clone(), agents, steps);
            let got = detect_collision(&world, &config);

            // Swap two agents.
            let (i, j) = (0, agents - 1);
            let mut swapped = points.clone();
            for t in 0..steps {
                swapped.swap(i * steps + t, j * steps + t);
            }
            assert_eq!(got, detect_collision(&world_from(swapped, agents, steps), &config));

            let rigid = Rigid2::from_angle(rng.gen_range(0.0..6.28), Vec2::new(100.0, -40.0));
            let moved: Vec<Vec2> = points.iter().map(|&p| rigid.apply_point(p)).collect();
            assert_eq!(got, detect_collision(&world_from(moved, agents, steps), &config));
        }
    }

    #[test]
    fn collision_rate_counts() {
        let config = MetricsConfig::default();
        let safe = world_from(vec![Vec2::ZERO, Vec2::new(50.0, 0.0)], 2, 1);
        let unsafe_world = world_from(vec![Vec2::ZERO, Vec2::new(0.5, 0.0)], 2, 1);
        let worlds = vec![safe.clone(), safe.clone(), safe, unsafe_world];
        assert!((collision_rate(&worlds, &config).unwrap() - 0.25).abs() < 1e-12);
        assert!(matches!(
            collision_rate(&[], &config),
            Err(MetricsError::EmptyDataset)
        ));
    }

    #[test]
    fn exhaustive_enumeration_matches_per_agent_argmin() {
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        for _ in 0..30 {
            let a = rng.gen_range(1..=4);
            let k = rng.gen_range(1..=4);
            let t = rng.gen_range(1..=5);
            let scene = scene_with(a, t);
            let pred = random_prediction(&mut rng, &scene, k);
            let (_, winners_fast) = assemble_combined_joint(&pred, &scene).unwrap();
            let (winners_full, evaluated) =
                assemble_combined_exhaustive(&pred, &scene).unwrap();
            assert_eq!(winners_fast, winners_full, "continuous values: no ties");
            assert_eq!(evaluated, k.pow(a as u32));
        }
    }

    #[test]
    fn exhaustive_enumeration_refuses_large_scenes() {
        let scene = scene_with(7, 2);
        let pred = offset_prediction(&scene, &vec![vec![0.0, 1.0]; 7]);
        assert!(matches!(
            assemble_combined_exhaustive(&pred, &scene),
            Err(MetricsError::TooManyAgents { agents: 7, max: 6 })
        ));
    }

    #[test]
    fn method_fde_ordering_chain_holds() {
        let mut rng = ChaCha8Rng::seed_from_u64(54);
        let config = MetricsConfig::default();
        for _ in 0..1000 {
            let a = rng.gen_range(1..=5);
            let k = rng.gen_range(1..=6);
            let t = rng.gen_range(1..=6);
            let scene = scene_with(a, t);
            let pred = random_prediction(&mut rng, &scene, k);
            let pairs = [(&scene, &pred)];
            let combined =
                evaluate_method(&pairs, Method::CombinedJoint, &config, "t").unwrap();
            let joint = evaluate_method(&pairs, Method::SceneJoint, &config, "t").unwrap();
            let marginal =
                evaluate_method(&pairs, Method::StraightMarginal, &config, "t").unwrap();
            let (c, s, m) = (
                combined.rows[0].avg_min_fde,
                joint.rows[0].avg_min_fde,
                marginal.rows[0].avg_min_fde,
            );
            assert!(c <= s + 1e-9, "combined {c} > scene {s}");
            assert!(s <= m + 1e-9, "scene {s} > marginal {m}");
        }
    }

    #[test]
    fn degenerate_modes_collapse_all_methods() {
        let scene = scene_with(3, 4);
        let base = offset_prediction(&scene, &[vec![1.5], vec![0.5], vec![2.5]]);
        // Replicate the single mode across K=4.
        let (a, t, k) = (3, 4, 4);
        let mut traj = vec![0.0f32; a * k * t * 2];
        for ai in 0..a {
            for m in 0..k {
                for ti in 0..t {
                    for c in 0..2 {
                        traj[((ai * k + m) * t + ti) * 2 + c] =
                            base.trajectories.at(&[ai, 0, ti, c]);
                    }
                }
            }
        }
        let pred = ScenePrediction {
            trajectories: Tensor::from_vec(&[a, k, t, 2], traj).unwrap(),
            scene_logits: Tensor::zeros(&[k]),
            scene_probs: Tensor::filled(&[k], 0.25),
        };
        let config = MetricsConfig::default();
        let pairs = [(&scene, &pred)];
        let reports: Vec<EvalReport> = [
            Method::SceneJoint,
            Method::StraightMarginal,
            Method::CombinedJoint,
        ]
        .iter()
        .map(|&m| evaluate_method(&pairs, m, &config, "t").unwrap())
        .collect();
        for r in &reports[1..] {
            assert!((r.rows[0].avg_min_fde - reports[0].rows[0].avg_min_fde).abs() < 1e-12);
            assert!((r.rows[0].avg_min_ade - reports[0].rows[0].avg_min_ade).abs() < 1e-12);
            assert_eq!(r.rows[0].collided, reports[0].rows[0].collided);
        }
    }

    #[test]
    fn aggregates_are_order_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let scenes: Vec<Scene> = (0..7)
            .map(|i| {
                let mut s = scene_with(3, 4);
                s.scenario_id = format!("s{i}");
                s
            })
            .collect();
        let preds: Vec<ScenePrediction> = scenes
            .iter()
            .map(|s| random_prediction(&mut rng, s, 3))
            .collect();
        let config = MetricsConfig::default();
        let forward: Vec<(&Scene, &ScenePrediction)> =
            scenes.iter().zip(&preds).collect();
        let reversed: Vec<(&Scene, &ScenePrediction)> =
            scenes.iter().zip(&preds).rev().collect();
        let a = evaluate_method(&forward, Method::SceneJoint, &config, "t").unwrap();
        let b = evaluate_method(&reversed, Method::SceneJoint, &config, "t").unwrap();
        assert_eq!(a.mean_avg_min_fde.to_bits(), b.mean_avg_min_fde.to_bits());
        assert_eq!(a.mean_avg_min_ade.to_bits(), b.mean_avg_min_ade.to_bits());
        assert_eq!(a.collision_rate.to_bits(), b.collision_rate.to_bits());
    }

    #[test]
    fn scene_winner_agrees_with_loss_module() {
        use crate::losses::{endpoint_errors, scene_errors, scene_winner, LossConfig};
        use crate::model::ForwardPass;
        use crate::tensor::Tape;
        let mut rng = ChaCha8Rng::seed_from_u64(56);
        for _ in 0..50 {
            let a = rng.gen_range(1..=4);
            let k = rng.gen_range(1..=5);
            let t = rng.gen_range(1..=5);
            let scene = scene_with(a, t);
            let pred = random_prediction(&mut rng, &scene, k);
            let config = MetricsConfig::default();
            let (_, metrics_best) = avg_min_fde(&pred, &scene, &config).unwrap();

            let mut tape = Tape::new();
            let logits_node = tape.leaf(Tensor::zeros(&[k]));
            let mode_nodes = (0..k)
                .map(|_| tape.leaf(Tensor::zeros(&[a * t, 2])))
                .collect();
            let pass = ForwardPass {
                prediction: pred,
                mode_nodes,
                logits_node,
            };
            let lc = LossConfig::for_scene(&scene);
            let endpoint = endpoint_errors(&pass, &scene, &lc).unwrap();
            let loss_winner = scene_winner(&scene_errors(&endpoint, k));
            assert_eq!(metrics_best, loss_winner);
        }
    }

    #[test]
    fn report_serializes_and_csv_has_headers() {
        let scene = scene_with(2, 3);
        let pred = offset_prediction(&scene, &[vec![1.0, 3.0], vec![5.0, 1.0]]);
        let config = MetricsConfig::default();
        let report =
            evaluate_method(&[(&scene, &pred)], Method::SceneJoint, &config, "ck-123").unwrap();
        assert_eq!(report.scene_count, 1);
        assert_eq!(report.rows.len(), 1);
        let json = serde_json::to_string_pretty(&report).unwrap();
        let back: EvalReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back.checkpoint, "ck-123");
        assert_eq!(back.rows.len(), 1);

        let csv = report_to_csv(&[report]);
        assert!(csv.starts_with("# checkpoint: ck-123\n"));
        assert!(csv.contains("# dist_safe: 2\n"));
        assert!(csv.contains("method,scenario_id,"));
        assert!(csv.contains("scene_joint,m,"));
    }

    #[test]
    fn invalid_configs_and_empty_sets_error() {
        let bad = MetricsConfig {
            dist_safe: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = MetricsConfig {
            miss_threshold: -1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let config = MetricsConfig::default();
        assert!(matches!(
            evaluate_method(&[], Method::SceneJoint, &config, "t"),
            Err(MetricsError::EmptyDataset)
        ));
    }
}
