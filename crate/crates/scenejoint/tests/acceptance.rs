//! Acceptance suite: nine pipeline-level criteria, printed one pass/fail
//! line each.
//!
//! Runs without the libtest harness so every line is emitted exactly once
//! whatever the outcome; the process exits nonzero when any criterion
//! fails. Criterion 6 trains six full desk-scale models and dominates the
//! runtime; everything else finishes in seconds.

use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

use scenejoint::geom::{relative_pose_embedding, Pose2, Rigid2, RpeMatrix, Vec2};
use scenejoint::harness::{evaluate, load_model, train, EvalOptions, TrainConfig};
use scenejoint::losses::{scene_loss, LossConfig, LossMode};
use scenejoint::metrics::{
    assemble_combined_exhaustive, assemble_combined_joint, detect_collision, evaluate_method,
    extract_world, Method, MetricsConfig,
};
use scenejoint::model::{
    build_params, model_forward, BoundParams, ModelConfig, ScenePrediction,
};
use scenejoint::scene::{
    generate_synthetic_dataset, write_dataset, AgentKind, AgentTrack, FutureStep, GenConfig,
    HistoryStep, Scene, ScenarioKind,
};
use scenejoint::tensor::gradcheck::{check_leaf_gradient, check_leaf_gradient_at, FD_STEP};
use scenejoint::tensor::{
    Activation, AttentionProjections, MlpLayer, ParamSet, Tape, Tensor,
};
use scenejoint::viz::{render_svg, VizOptions};

macro_rules! ensure {
    ($cond:expr, $($arg:tt)+) => {
        if !$cond {
            return Err(format!($($arg)+));
        }
    };
}

fn main() {
    let criteria: Vec<(&str, fn() -> Result<String, String>)> = vec![
        ("1 autodiff finite differences", criterion_1),
        ("2 WTA gradient sparsity", criterion_2),
        ("3 RPE correctness", criterion_3),
        ("4 metric ordering chain", criterion_4),
        ("5 collision oracle + exhaustive joint", criterion_5),
        ("6 desk-scale training trend", criterion_6),
        ("7 bitwise reproducibility", criterion_7),
        ("8 rigid + permutation equivariance", criterion_8),
        ("9 loss blend identity", criterion_9),
    ];

    // Optional numeric args restrict the run to those criteria.
    let only: Vec<usize> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();

    let mut failures = 0;
    let mut ran = 0;
    for (name, run) in criteria {
        let number: usize = name.split_whitespace().next().unwrap().parse().unwrap();
        if !only.is_empty() && !only.contains(&number) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let outcome =
            catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| Err(panic_text(&p)));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {name}: PASS ({secs:.1}s) — {detail}"),
            Err(detail) => {
                failures += 1;
                println!("criterion {name}: FAIL ({secs:.1}s) — {detail}");
            }
        }
    }
    if failures > 0 {
        println!("acceptance: {failures} of {ran} criteria failed");
        std::process::exit(1);
    }
    println!("acceptance: all {ran} criteria passed");
}

fn panic_text(payload: &(dyn std::any::Any + Send)) -> String {
    if let Some(s) = payload.downcast_ref::<String>() {
        format!("panicked: {s}")
    } else if let Some(s) = payload.downcast_ref::<&str>() {
        format!("panicked: {s}")
    } else {
        "panicked".into()
    }
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let len = shape.iter().product();
    let data = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// Random values nudged away from zero so relu/huber kinks stay clear of
/// the finite-difference window.
fn kink_safe_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let len = shape.iter().product();
    let data = (0..len)
        .map(|_| {
            let v: f32 = rng.gen_range(-1.0..1.0);
            if v.abs() < 0.05 {
                v + 0.1
            } else {
                v
            }
        })
        .collect();
    Tensor::from_vec(shape, data).unwrap()
}

fn gen_scenes(count: usize, agents: (usize, usize), mix: Vec<ScenarioKind>, seed: u64) -> Vec<Scene> {
    let config = GenConfig {
        scene_count: count,
        agents_min: agents.0,
        agents_max: agents.1,
        mix,
        ..Default::default()
    };
    generate_synthetic_dataset(&config, seed).expect("generator config")
}

fn small_model() -> ModelConfig {
    ModelConfig {
        d: 16,
        sft_layers: 1,
        heads: 4,
        k: 3,
        h: 10,
        t: 15,
        mlp_hidden: 16,
    }
}

fn forward_prediction(params: &ParamSet, config: &ModelConfig, scene: &Scene) -> ScenePrediction {
    let mut tape = Tape::new();
    let binding = params.bind(&mut tape);
    let bound = BoundParams::new(params, &binding);
    model_forward(&mut tape, scene, &bound, config)
        .expect("forward")
        .prediction
}

fn random_prediction(rng: &mut ChaCha8Rng, agents: usize, k: usize, t: usize, span: f32) -> ScenePrediction {
    let traj = (0..agents * k * t * 2)
        .map(|_| rng.gen_range(-span..span))
        .collect();
    ScenePrediction {
        trajectories: Tensor::from_vec(&[agents, k, t, 2], traj).unwrap(),
        scene_logits: Tensor::zeros(&[k]),
        scene_probs: Tensor::filled(&[k], 1.0 / k as f32),
    }
}

// --- criterion 1: FD soundness of every op and the full pipeline ---------

const OP_REL_TOL: f64 = 1e-4;
const MODEL_REL_TOL: f64 = 1e-3;

fn criterion_1() -> Result<String, String> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xACCE01);
    let mut worst_op: f64 = 0.0;
    let mut ops = 0usize;

    // Scalarizes `out` through a random weight leaf so symmetric outputs
    // (softmax rows, layer norm) keep nonzero, asymmetric gradients.
    let mut check = |name: &str,
                     tape: &mut Tape,
                     out: scenejoint::tensor::NodeId,
                     leaves: &[scenejoint::tensor::NodeId],
                     rng: &mut ChaCha8Rng|
     -> Result<(), String> {
        let shape = tape.value(out).shape().to_vec();
        let loss = if shape.is_empty() || shape == [1] {
            tape.sum(out)
        } else {
            let w = tape.leaf(random_tensor(rng, &shape));
            let prod = tape.mul(out, w).map_err(|e| format!("{name}: {e}"))?;
            tape.sum(prod)
        };
        for (i, &leaf) in leaves.iter().enumerate() {
            let report = check_leaf_gradient(tape, loss, leaf, FD_STEP)
                .map_err(|e| format!("{name} leaf {i}: {e}"))?;
            ensure!(
                report.passes(OP_REL_TOL),
                "{name} leaf {i}: max_rel {:.3e} max_abs {:.3e} at coordinate {} \
                 (analytic {:.6e}, numeric {:.6e})",
                report.max_rel,
                report.max_abs,
                report.worst_index,
                report.worst_analytic,
                report.worst_numeric
            );
            worst_op = worst_op.max(report.max_rel);
        }
        ops += 1;
        Ok(())
    };

    {
        let mut tape = Tape::new();
        let a = tape.leaf(random_tensor(&mut rng, &[3, 4]));
        let b = tape.leaf(random_tensor(&mut rng, &[3, 4]));
        let y = tape.add(a, b).unwrap();
        check("add", &mut tape, y, &[a, b], &mut rng)?;
    }
    {
        let mut tape = Tape::new();
        let a = tape.leaf(random_tensor(&mut rng, &[3, 4]));
        let b = tape.leaf(random_tensor(&mut rng, &[3, 4]));
        let y = tape.sub(a, b).unwrap();
        check("sub", &mut tape, y, &[a, b], &mut rng)?;
    }
    {
        let mut tape = Tape::new();
        let a = tape.leaf(random_tensor(&mut rng, &[3, 4]));
        let b = tape.leaf(random_tensor(&mut rng, &[3, 4]));
        let y = tape.mul(a, b).unwrap();
        check("mul", &mut tape, y, &[a, b], &mut rng)?;
    }
    {
        let mut tape = Tape::new();
        let a = tape.leaf(random_tensor(&mut rng, &[3, 4]));
        let y = tape.scale(a, 1.7);
        check("scale", &mut tape, y, &[a], &mut rng)?;
    }
    {
        let mut tape = Tape::new();
        let a = tape.leaf(random_tensor(&mut rng, &[3, 4]));
        let b = tape.leaf(random_tensor(&mut rng, &[4]));
        let y = tape.add_bias(a, b).unwrap();
        check("add_bias", &mut tape, y, &[a, b], &mut rng)?;
    }
    {
        let mut tape = Tape::new();
        let a = tape.leaf(kink_safe_tensor(&mut rng, &[3, 4]));
        let y = tape.relu(a);
        check("relu", &mut tape, y, &[a], &mut rng)?;
    }
    {
        let mut tape = Tape::new();
        let a = tape.leaf(random_tensor(&mut rng, &[3, 4]));
        let b = tape.leaf(random_tensor(&mut rng, &[4, 2]));
        let y = tape.matmul(a, b).unwrap();
        check("matmul", &mut tape, y, &[a, b], &mut rng)?;
    }
    {
        let mut tape = Tape::new();
        let a = tape.leaf(random_tensor(&mut rng, &[3, 4]));
        let b = tape.leaf(random_tensor(&mut rng, &[4, 2]));
        let y = tape.matmul_sorted(a, b).unwrap();
        check("matmul_sorted", &mut tape, y, &[a, b], &mut rng)?;
    }
    {
        let mut tape = Tape::new();
        let a = tape.leaf(random_tensor(&mut rng, &[3, 4]));
        let y = tape.transpose(a).unwrap();
        check("transpose", &mut tape, y, &[a], &mut rng)?;
    }
    {
        let mut tape = Tape::new();
        let a = tape.leaf(random_tensor(&mut rng, &[2, 5]));
        let y = tape.softmax(a).unwrap();
        check("softmax", &mut tape, y, &[a], &mut rng)?;
    }
    {
        let mut tape = Tape::new();
        let a = tape.leaf(random_tensor(&mut rng, &[3, 6]));
        let gain = tape.leaf(random_tensor(&mut rng, &[6]));
        let shift = tape.leaf(random_tensor(&mut rng, &[6]));
        let y = tape.layer_norm(a, gain, shift).unwrap();
        check("layer_norm", &mut tape, y, &[a, gain, shift], &mut rng)?;
    }
    {
        let mut tape = Tape::new();
        let a = tape.leaf(random_tensor(&mut rng, &[5, 3]));
        // A repeated row index exercises gradient accumulation.
        let y = tape.gather_rows(a, &[2, 0, 2, 4]).unwrap();
        check("gather_rows", &mut tape, y, &[a], &mut rng)?;
    }
    {
        let mut tape = Tape::new();
        let a = tape.leaf(random_tensor(&mut rng, &[3, 2]));
        let b = tape.leaf(random_tensor(&mut rng, &[3, 4]));
        let y = tape.concat_cols(&[a, b]).unwrap();
        check("concat_cols", &mut tape, y, &[a, b], &mut rng)?;
    }
    {
        let mut tape = Tape::new();
        let a = tape.leaf(random_tensor(&mut rng, &[3, 5]));
        let y = tape.slice_cols(a, 1, 4).unwrap();
        check("slice_cols", &mut tape, y, &[a], &mut rng)?;
    }
    {
        let mut tape = Tape::new();
        let a = tape.leaf(random_tensor(&mut rng, &[2, 6]));
        let y = tape.reshape(a, &[3, 4]).unwrap();
        check("reshape", &mut tape, y, &[a], &mut rng)?;
    }
    {
        let mut tape = Tape::new();
        let a = tape.leaf(random_tensor(&mut rng, &[3, 4]));
        let y = tape.sum(a);
        check("sum", &mut tape, y, &[a], &mut rng)?;
    }
    {
        let mut tape = Tape::new();
        // Hand-spread values keep each segment argmax stable under the
        // 1e-3 probe.
        let a = tape.leaf(
            Tensor::from_vec(
                &[6, 2],
                vec![0.10, 0.90, 0.52, 0.21, 0.83, 0.34, -0.40, 0.66, 0.05, -0.75, 0.47, 0.18],
            )
            .unwrap(),
        );
        let y = tape.segment_max(a, &[0, 2, 6]).unwrap();
        check("segment_max", &mut tape, y, &[a], &mut rng)?;
    }
    {
        let mut tape = Tape::new();
        let x = tape.leaf(random_tensor(&mut rng, &[8, 3]));
        let w = tape.leaf(random_tensor(&mut rng, &[9, 4]));
        let b = tape.leaf(random_tensor(&mut rng, &[4]));
        let y = tape.conv1d_same(x, w, b, 4).unwrap();
        check("conv1d_same", &mut tape, y, &[x, w, b], &mut rng)?;
    }
    {
        let mut tape = Tape::new();
        let pred = tape.leaf(
            Tensor::from_vec(&[2, 3], vec![0.3, -0.6, 1.7, -2.4, 0.45, 3.1]).unwrap(),
        );
        let target = Tensor::zeros(&[2, 3]);
        let mask = Tensor::from_vec(&[2, 3], vec![1.0, 1.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
        let y = tape.smooth_l1(pred, &target, &mask).unwrap();
        check("smooth_l1", &mut tape, y, &[pred], &mut rng)?;
    }
    {
        let mut tape = Tape::new();
        let logits = tape.leaf(random_tensor(&mut rng, &[6]));
        let y = tape.softmax_cross_entropy(logits, 4).unwrap();
        check("softmax_cross_entropy", &mut tape, y, &[logits], &mut rng)?;
    }
    {
        let mut tape = Tape::new();
        let x = tape.leaf(kink_safe_tensor(&mut rng, &[3, 4]));
        let w1 = tape.leaf(random_tensor(&mut rng, &[4, 5]));
        let b1 = tape.leaf(random_tensor(&mut rng, &[5]));
        let w2 = tape.leaf(random_tensor(&mut rng, &[5, 2]));
        let b2 = tape.leaf(random_tensor(&mut rng, &[2]));
        let y = tape
            .mlp_forward(
                x,
                &[
                    MlpLayer { weight: w1, bias: b1, activation: Activation::Relu },
                    MlpLayer { weight: w2, bias: b2, activation: Activation::None },
                ],
            )
            .unwrap();
        check("mlp_forward", &mut tape, y, &[x, w1, b1, w2, b2], &mut rng)?;
    }
    {
        let (nq, nk, d, heads) = (3, 4, 8, 2);
        let mut tape = Tape::new();
        let q = tape.leaf(random_tensor(&mut rng, &[nq, d]));
        let kv = tape.leaf(random_tensor(&mut rng, &[nk, d]));
        let proj = AttentionProjections {
            wq: tape.leaf(random_tensor(&mut rng, &[d, d])),
            bq: tape.leaf(random_tensor(&mut rng, &[d])),
            wk: tape.leaf(random_tensor(&mut rng, &[d, d])),
            bk: tape.leaf(random_tensor(&mut rng, &[d])),
            wv: tape.leaf(random_tensor(&mut rng, &[d, d])),
            bv: tape.leaf(random_tensor(&mut rng, &[d])),
            wo: tape.leaf(random_tensor(&mut rng, &[d, d])),
            bo: tape.leaf(random_tensor(&mut rng, &[d])),
        };
        let y = tape.multihead_attention(q, kv, kv, heads, &proj).unwrap();
        let leaves = [
            q, kv, proj.wq, proj.bq, proj.wk, proj.bk, proj.wv, proj.bv, proj.wo, proj.bo,
        ];
        check("multihead_attention", &mut tape, y, &leaves, &mut rng)?;
    }

    // Full pipeline: model forward + scene-WTA loss on a generated scene,
    // spot-checked at three coordinates of every module family.
    let scene = &gen_scenes(1, (2, 3), ScenarioKind::all(), 5)[0];
    let config = small_model();
    let params = build_params(&config, 3).map_err(|e| e.to_string())?;
    let mut tape = Tape::new();
    let binding = params.bind(&mut tape);
    let bound = BoundParams::new(&params, &binding);
    let pass = model_forward(&mut tape, scene, &bound, &config).map_err(|e| e.to_string())?;
    let loss_config = LossConfig::for_scene(scene);
    let breakdown = scene_loss(&mut tape, &pass, scene, &loss_config, LossMode::SceneWta)
        .map_err(|e| e.to_string())?;

    let winner_head = format!("decoder.head{}.w1", breakdown.winner_index);
    let names = [
        "agent_enc.step.w1",
        "agent_enc.conv1.w",
        "lane_enc.point.w1",
        "rpe.lift.w1",
        "sft0.phi.w1",
        "sft0.attn.wq",
        "sft0.ln1.gain",
        "sft0.ffn.w1",
        winner_head.as_str(),
        "decoder.prob.w1",
    ];
    let mut worst_model: f64 = 0.0;
    for name in names {
        let index = params
            .index_of(name)
            .ok_or_else(|| format!("unknown parameter {name}"))?;
        let len = params.get(index).value.len();
        let coords = [0, len / 2, len - 1];
        let report =
            check_leaf_gradient_at(&tape, breakdown.total_node, binding.node(index), &coords, FD_STEP)
                .map_err(|e| format!("{name}: {e}"))?;
        ensure!(
            report.passes(MODEL_REL_TOL),
            "{name}: max_rel {:.3e} max_abs {:.3e} at coordinate {}",
            report.max_rel,
            report.max_abs,
            report.worst_index
        );
        worst_model = worst_model.max(report.max_rel);
    }

    let secs = start.elapsed().as_secs_f64();
    ensure!(secs < 120.0, "FD suite took {secs:.1}s, budget is 120s");
    Ok(format!(
        "{ops} ops at rel 1e-4 (worst {worst_op:.1e}); full pipeline over {} params at rel 1e-3 \
         (worst {worst_model:.1e}); h=1e-3",
        names.len()
    ))
}

// --- criterion 2: non-winner gradients are exactly zero ------------------

fn criterion_2() -> Result<String, String> {
    let config = ModelConfig {
        k: 4,
        ..small_model()
    };
    let mut checked_modes = 0usize;
    for trial in 0..100u64 {
        let scene = &gen_scenes(1, (2, 4), ScenarioKind::all(), 1000 + trial)[0];
        let params = build_params(&config, trial).map_err(|e| e.to_string())?;
        let mut tape = Tape::new();
        let binding = params.bind(&mut tape);
        let bound = BoundParams::new(&params, &binding);
        let pass = model_forward(&mut tape, scene, &bound, &config).map_err(|e| e.to_string())?;
        let loss_config = LossConfig::for_scene(scene);
        let breakdown = scene_loss(&mut tape, &pass, scene, &loss_config, LossMode::SceneWta)
            .map_err(|e| e.to_string())?;
        let grads = tape.backward(breakdown.total_node).map_err(|e| e.to_string())?;

        let winner = breakdown.winner_index;
        let winner_grad = grads.get(pass.mode_nodes[winner]);
        ensure!(
            winner_grad.is_some_and(|g| g.iter().any(|&v| v != 0.0)),
            "trial {trial}: winner mode {winner} received no gradient"
        );
        for (k, &node) in pass.mode_nodes.iter().enumerate() {
            if k == winner {
                continue;
            }
            if let Some(g) = grads.get(node) {
                ensure!(
                    g.iter().all(|&v| v == 0.0),
                    "trial {trial}: loser mode {k} has nonzero output gradient"
                );
            }
            for suffix in ["w1", "b1", "w2", "b2"] {
                let name = format!("decoder.head{k}.{suffix}");
                let index = params
                    .index_of(&name)
                    .ok_or_else(|| format!("unknown parameter {name}"))?;
                if let Some(g) = grads.get(binding.node(index)) {
                    ensure!(
                        g.iter().all(|&v| v == 0.0),
                        "trial {trial}: loser parameter {name} has nonzero gradient"
                    );
                }
            }
            checked_modes += 1;
        }
    }
    Ok(format!(
        "100 scenes, {checked_modes} losing modes: outputs and head parameters exactly zero"
    ))
}

// --- criterion 3: relative pose embedding identities ----------------------

fn criterion_3() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(0xACCE03);
    let random_pose = |rng: &mut ChaCha8Rng| {
        let angle: f64 = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
        Pose2::new(
            Vec2::new(rng.gen_range(-100.0..100.0), rng.gen_range(-100.0..100.0)),
            Vec2::new(angle.cos(), angle.sin()),
        )
        .unwrap()
    };

    for trial in 0..1000 {
        let (a, b) = (random_pose(&mut rng), random_pose(&mut rng));
        let e_ab = relative_pose_embedding(&a, &b);
        let e_ba = relative_pose_embedding(&b, &a);
        for e in [&e_ab, &e_ba] {
            ensure!(
                (e.sin_alpha.powi(2) + e.cos_alpha.powi(2) - 1.0).abs() <= 1e-9,
                "trial {trial}: alpha off the unit circle"
            );
            ensure!(
                (e.sin_beta.powi(2) + e.cos_beta.powi(2) - 1.0).abs() <= 1e-9,
                "trial {trial}: beta off the unit circle"
            );
        }
        ensure!(
            (e_ab.sin_alpha + e_ba.sin_alpha).abs() <= 1e-9
                && (e_ab.cos_alpha - e_ba.cos_alpha).abs() <= 1e-9,
            "trial {trial}: heading angle not antisymmetric"
        );
        ensure!(
            (e_ab.distance - e_ba.distance).abs() <= 1e-9,
            "trial {trial}: distance not symmetric"
        );
    }

    let mut worst_rigid: f64 = 0.0;
    for trial in 0..20 {
        let poses: Vec<Pose2> = (0..8).map(|_| random_pose(&mut rng)).collect();
        let rigid = Rigid2::from_angle(
            rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI),
            Vec2::new(rng.gen_range(-50.0..50.0), rng.gen_range(-50.0..50.0)),
        );
        let moved: Vec<Pose2> = poses.iter().map(|p| rigid.apply_pose(p)).collect();
        let (m1, m2) = (RpeMatrix::from_poses(&poses), RpeMatrix::from_poses(&moved));
        for i in 0..8 {
            for j in 0..8 {
                let (a, b) = (m1.get(i, j).as_array(), m2.get(i, j).as_array());
                for c in 0..5 {
                    let dev = (a[c] - b[c]).abs();
                    worst_rigid = worst_rigid.max(dev);
                    ensure!(
                        dev <= 1e-6,
                        "trial {trial}: rigid motion changed entry ({i},{j})[{c}] by {dev:.3e}"
                    );
                }
            }
        }
    }

    let i = Pose2::new(Vec2::ZERO, Vec2::new(1.0, 0.0)).unwrap();
    let j = Pose2::new(Vec2::new(3.0, 4.0), Vec2::new(0.0, 1.0)).unwrap();
    let e = relative_pose_embedding(&i, &j);
    let expected = [1.0, 0.0, 0.6, 0.8, 5.0];
    let got = e.as_array();
    for c in 0..5 {
        ensure!(
            (got[c] - expected[c]).abs() <= 1e-12,
            "3-4-5 fixture component {c}: expected {}, got {}",
            expected[c],
            got[c]
        );
    }

    Ok(format!(
        "1000 pose pairs (unit circle 1e-9, antisymmetry); 20 rigid matrices worst dev {worst_rigid:.1e} \
         (tol 1e-6); 3-4-5 fixture exact"
    ))
}

// --- criterion 4: combined <= scene <= marginal on random tensors ---------

fn criterion_4() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(0xACCE04);
    let pool = gen_scenes(200, (2, 4), ScenarioKind::all(), 4242);
    let config = MetricsConfig {
        dist_safe: 2.0,
        miss_threshold: 2.0,
        k: 6,
    };
    let fde_of = |pred: &ScenePrediction, scene: &Scene, method: Method| -> Result<f64, String> {
        let report = evaluate_method(&[(scene, pred)], method, &config, "acceptance")
            .map_err(|e| e.to_string())?;
        Ok(report.rows[0].avg_min_fde)
    };

    let mut strict = 0usize;
    for trial in 0..1000 {
        let scene = &pool[trial % pool.len()];
        let pred = random_prediction(&mut rng, scene.agents.len(), 6, scene.t, 40.0);
        let combined = fde_of(&pred, scene, Method::CombinedJoint)?;
        let scene_fde = fde_of(&pred, scene, Method::SceneJoint)?;
        let marginal = fde_of(&pred, scene, Method::StraightMarginal)?;
        ensure!(
            combined <= scene_fde + 1e-9,
            "trial {trial}: combined {combined:.9} > scene {scene_fde:.9}"
        );
        ensure!(
            scene_fde <= marginal + 1e-9,
            "trial {trial}: scene {scene_fde:.9} > marginal {marginal:.9}"
        );
        if combined + 1e-9 < scene_fde && scene_fde + 1e-9 < marginal {
            strict += 1;
        }
    }
    Ok(format!(
        "1000 random prediction tensors: combined <= scene <= marginal within 1e-9 \
         ({strict} strictly ordered)"
    ))
}

// --- criterion 5: collision oracle + exhaustive enumeration ---------------

fn criterion_5() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(0xACCE05);
    let config = MetricsConfig {
        dist_safe: 2.0,
        miss_threshold: 2.0,
        k: 1,
    };

    let mut hits = 0usize;
    let mut clean = 0usize;
    for trial in 0..1000usize {
        let agents = 2 + trial % 7;
        let steps = 1 + (trial * 7) % 60;
        // Tight boxes collide often, loose ones rarely; both outcomes must
        // be well represented.
        let span = if trial % 2 == 0 { 120.0 } else { 16.0 };
        let traj: Vec<f32> = (0..agents * steps * 2)
            .map(|_| rng.gen_range(0.0..span))
            .collect();
        let pred = ScenePrediction {
            trajectories: Tensor::from_vec(&[agents, 1, steps, 2], traj).unwrap(),
            scene_logits: Tensor::zeros(&[1]),
            scene_probs: Tensor::filled(&[1], 1.0),
        };
        let world = extract_world(&pred, 0);

        // Independent oracle on squared distances.
        let mut expected = false;
        'outer: for t in 0..steps {
            for i in 0..agents {
                for j in (i + 1)..agents {
                    let (p, q) = (world.at(i, t), world.at(j, t));
                    let (dx, dy) = (p.x - q.x, p.y - q.y);
                    if dx * dx + dy * dy < config.dist_safe * config.dist_safe {
                        expected = true;
                        break 'outer;
                    }
                }
            }
        }
        let got = detect_collision(&world, &config);
        ensure!(
            got == expected,
            "trial {trial} (A={agents}, T={steps}): detector {got}, oracle {expected}"
        );
        if expected {
            hits += 1;
        } else {
            clean += 1;
        }
    }
    ensure!(
        hits > 100 && clean > 100,
        "unbalanced oracle sample: {hits} colliding / {clean} clean"
    );

    // Exhaustive K^A enumeration must agree with the per-agent argmin and
    // must evaluate exactly K^A assignments.
    let (k, t) = (4usize, 6usize);
    let mut enumerated = Vec::new();
    for agents in 1..=4usize {
        let mut per_size = 0usize;
        for trial in 0..25 {
            let scene = synthetic_truth_scene(agents, t, &mut rng);
            let pred = random_prediction(&mut rng, agents, k, t, 30.0);
            let (_, fast) =
                assemble_combined_joint(&pred, &scene).map_err(|e| e.to_string())?;
            let (slow, evaluated) =
                assemble_combined_exhaustive(&pred, &scene).map_err(|e| e.to_string())?;
            ensure!(
                fast == slow,
                "A={agents} trial {trial}: argmin {fast:?} != exhaustive {slow:?}"
            );
            ensure!(
                evaluated == k.pow(agents as u32),
                "A={agents}: enumerated {evaluated} assignments, expected {}",
                k.pow(agents as u32)
            );
            per_size = evaluated;
        }
        enumerated.push(format!("{agents}:{per_size}"));
    }

    Ok(format!(
        "1000 worlds agree with the squared-distance oracle ({hits} colliding, {clean} clean); \
         exhaustive matches argmin with K^A calls ({})",
        enumerated.join(" ")
    ))
}

/// Minimal ground-truth-only scene for assembly tests: every agent scored,
/// all futures valid.
fn synthetic_truth_scene(agents: usize, t: usize, rng: &mut ChaCha8Rng) -> Scene {
    let make_agent = |index: usize, rng: &mut ChaCha8Rng| {
        let base = Vec2::new(rng.gen_range(-20.0..20.0), rng.gen_range(-20.0..20.0));
        AgentTrack {
            id: format!("a{index}"),
            kind: AgentKind::Vehicle,
            is_scored: true,
            is_focal: index == 0,
            history: (0..2)
                .map(|s| HistoryStep {
                    x: base.x + s as f64,
                    y: base.y,
                    hx: 1.0,
                    hy: 0.0,
                    valid: true,
                })
                .collect(),
            future: (0..t)
                .map(|s| FutureStep {
                    x: base.x + 2.0 + s as f64 + rng.gen_range(-0.5..0.5),
                    y: base.y + rng.gen_range(-0.5..0.5),
                    valid: true,
                })
                .collect(),
        }
    };
    Scene {
        scenario_id: format!("truth_{agents}"),
        hz: 10.0,
        h: 2,
        t,
        focal_agent_id: "a0".into(),
        agents: (0..agents).map(|i| make_agent(i, rng)).collect(),
        lanes: Vec::new(),
    }
}

// --- criterion 6: desk-scale training trend --------------------------------

fn criterion_6() -> Result<String, String> {
    let start = Instant::now();
    let tmp = TempDir::new().map_err(|e| e.to_string())?;
    let data_dir = tmp.path().join("data");

    // Crossing-heavy dataset at the pinned desk shape.
    let gen = GenConfig {
        scene_count: 2000,
        agents_min: 2,
        agents_max: 3,
        mix: vec![
            ScenarioKind::CrossingIntersection,
            ScenarioKind::CrossingIntersection,
            ScenarioKind::CrossingIntersection,
            ScenarioKind::Merge,
        ],
        h: 10,
        t: 15,
        ..Default::default()
    };
    let scenes = generate_synthetic_dataset(&gen, 606).map_err(|e| e.to_string())?;
    write_dataset(&data_dir, &scenes, &gen, 606).map_err(|e| e.to_string())?;

    let options = EvalOptions::default();
    let mut scene_runs: Vec<(f64, f64)> = Vec::new();
    let mut scene_cr = Vec::new();
    let mut marginal_cr = Vec::new();
    let mut chains = 0usize;
    for mode in [LossMode::SceneWta, LossMode::MarginalWta] {
        for seed in 0..3u64 {
            let ckpt = tmp.path().join(format!("{}_{seed}", mode.as_str()));
            let mut config = TrainConfig::desk(data_dir.clone(), ckpt.clone());
            config.seed = seed;
            config.loss_mode = mode;
            config.threads = 1;
            let run_start = Instant::now();
            let summary = train(&config).map_err(|e| e.to_string())?;
            eprintln!(
                "criterion 6: {} seed {seed}: val avgMinFDE {:.3} -> {:.3} in {:.0}s",
                mode.as_str(),
                summary.initial_val_fde,
                summary.best_val_fde,
                run_start.elapsed().as_secs_f64()
            );

            let reports =
                evaluate(&ckpt.join("best"), &data_dir, &options).map_err(|e| e.to_string())?;
            let fde = |m: Method| -> Result<f64, String> {
                reports
                    .iter()
                    .find(|r| r.method == m)
                    .map(|r| r.mean_avg_min_fde)
                    .ok_or_else(|| format!("missing report for {}", m.as_str()))
            };
            let cr = |m: Method| -> Result<f64, String> {
                reports
                    .iter()
                    .find(|r| r.method == m)
                    .map(|r| r.collision_rate)
                    .ok_or_else(|| format!("missing report for {}", m.as_str()))
            };
            let combined = fde(Method::CombinedJoint)?;
            let scene_fde = fde(Method::SceneJoint)?;
            let marginal = fde(Method::StraightMarginal)?;
            ensure!(
                combined <= scene_fde + 1e-9 && scene_fde <= marginal + 1e-9,
                "{} seed {seed}: ordering chain broken ({combined:.6} / {scene_fde:.6} / {marginal:.6})",
                mode.as_str()
            );
            chains += 1;

            match mode {
                LossMode::SceneWta => {
                    scene_runs.push((summary.initial_val_fde, summary.best_val_fde));
                    scene_cr.push(cr(Method::SceneJoint)?);
                }
                LossMode::MarginalWta => marginal_cr.push(cr(Method::StraightMarginal)?),
            }
        }
    }

    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let initial = mean(&scene_runs.iter().map(|r| r.0).collect::<Vec<_>>());
    let best = mean(&scene_runs.iter().map(|r| r.1).collect::<Vec<_>>());
    let reduction = 1.0 - best / initial;
    ensure!(
        reduction >= 0.5,
        "scene-WTA cut val avgMinFDE by only {:.1}% ({initial:.3} -> {best:.3})",
        reduction * 100.0
    );

    let (s_cr, m_cr) = (mean(&scene_cr), mean(&marginal_cr));
    ensure!(
        s_cr <= m_cr + 1e-12,
        "scene-joint CR {s_cr:.4} exceeds straight-marginal CR {m_cr:.4}"
    );

    let secs = start.elapsed().as_secs_f64();
    ensure!(secs <= 1800.0, "criterion took {secs:.0}s, budget is 1800s");
    Ok(format!(
        "3 seeds x 2 losses on 2000 crossing-heavy scenes: val avgMinFDE {initial:.2} -> {best:.2} \
         ({:.0}% cut, bar 50%); CR scene {s_cr:.4} <= marginal {m_cr:.4}; chain held in {chains}/6 runs",
        reduction * 100.0
    ))
}

// --- criterion 7: bitwise reproducibility ----------------------------------

fn dir_contents(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut map = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(cur) = stack.pop() {
        for entry in fs::read_dir(&cur).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                map.insert(rel, fs::read(&path).unwrap());
            }
        }
    }
    map
}

fn criterion_7() -> Result<String, String> {
    let tmp = TempDir::new().map_err(|e| e.to_string())?;
    let data_dir = tmp.path().join("data");
    let gen = GenConfig {
        scene_count: 20,
        agents_min: 2,
        agents_max: 3,
        ..Default::default()
    };
    let scenes = generate_synthetic_dataset(&gen, 77).map_err(|e| e.to_string())?;
    write_dataset(&data_dir, &scenes, &gen, 77).map_err(|e| e.to_string())?;

    let mut artifacts: Vec<BTreeMap<String, Vec<u8>>> = Vec::new();
    let mut ckpts: Vec<PathBuf> = Vec::new();
    for name in ["run_a", "run_b"] {
        let ckpt = tmp.path().join(name);
        let mut config = TrainConfig::desk(data_dir.clone(), ckpt.clone());
        config.model = small_model();
        config.batch_size = 4;
        config.epochs = 3;
        config.lr_drop_epoch = 2;
        config.seed = 9;
        config.threads = 1;
        train(&config).map_err(|e| e.to_string())?;
        let mut contents = dir_contents(&ckpt);
        // The config echo embeds the run's own directory name.
        contents.remove("train_config.json");
        artifacts.push(contents);
        ckpts.push(ckpt);
    }
    ensure!(
        artifacts[0] == artifacts[1],
        "training logs or checkpoints differ between identical runs"
    );
    let files = artifacts[0].len();

    let options = EvalOptions {
        threads: 1,
        ..Default::default()
    };
    let mut reports = Vec::new();
    for ckpt in &ckpts {
        let r = evaluate(&ckpt.join("best"), &data_dir, &options).map_err(|e| e.to_string())?;
        reports.push(serde_json::to_string_pretty(&r).map_err(|e| e.to_string())?);
    }
    ensure!(reports[0] == reports[1], "eval reports differ between runs");

    let mut svgs = Vec::new();
    for ckpt in &ckpts {
        let (params, model) = load_model(&ckpt.join("best")).map_err(|e| e.to_string())?;
        for _ in 0..2 {
            let pred = forward_prediction(&params, &model, &scenes[0]);
            let svg = render_svg(&scenes[0], Some(&pred), &VizOptions::default())
                .map_err(|e| e.to_string())?;
            svgs.push(svg);
        }
    }
    ensure!(
        svgs.iter().all(|s| s == &svgs[0]),
        "SVG renders differ between runs"
    );

    Ok(format!(
        "two seed-9 single-thread runs: {files} checkpoint/log files, 3 eval reports, and 4 SVG \
         renders all bit-identical"
    ))
}

// --- criterion 8: rigid and permutation equivariance -----------------------

fn apply_rigid(scene: &Scene, rigid: &Rigid2) -> Scene {
    let mut out = scene.clone();
    for agent in &mut out.agents {
        for step in &mut agent.history {
            let p = rigid.apply_point(Vec2::new(step.x, step.y));
            let h = rigid.apply_vector(Vec2::new(step.hx, step.hy));
            (step.x, step.y, step.hx, step.hy) = (p.x, p.y, h.x, h.y);
        }
        for step in &mut agent.future {
            let p = rigid.apply_point(Vec2::new(step.x, step.y));
            (step.x, step.y) = (p.x, p.y);
        }
    }
    for lane in &mut out.lanes {
        for pt in &mut lane.centerline {
            let p = rigid.apply_point(Vec2::new(pt.0, pt.1));
            *pt = (p.x, p.y);
        }
    }
    out
}

fn criterion_8() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(0xACCE08);
    let scenes = gen_scenes(50, (2, 4), ScenarioKind::all(), 88);
    let config = ModelConfig::default();
    let params = build_params(&config, 1).map_err(|e| e.to_string())?;

    let mut worst_rigid: f64 = 0.0;
    for (index, scene) in scenes.iter().enumerate() {
        let base = forward_prediction(&params, &config, scene);

        let rigid = Rigid2::from_angle(
            rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI),
            Vec2::new(rng.gen_range(-80.0..80.0), rng.gen_range(-80.0..80.0)),
        );
        let moved = forward_prediction(&params, &config, &apply_rigid(scene, &rigid));
        for a in 0..scene.agents.len() {
            for k in 0..config.k {
                for t in 0..config.t {
                    let expected = rigid.apply_point(base.position(a, k, t));
                    let got = moved.position(a, k, t);
                    for (e, g) in [(expected.x, got.x), (expected.y, got.y)] {
                        let dev = (e - g).abs();
                        worst_rigid = worst_rigid.max(dev);
                        ensure!(
                            dev <= 1e-4,
                            "scene {index} agent {a} k={k} t={t}: rigid deviation {dev:.3e}"
                        );
                    }
                }
            }
        }

        let mut perm: Vec<usize> = (0..scene.agents.len()).collect();
        perm.shuffle(&mut rng);
        let mut permuted = scene.clone();
        permuted.agents = perm.iter().map(|&i| scene.agents[i].clone()).collect();
        let shuffled = forward_prediction(&params, &config, &permuted);
        for (new_index, &old_index) in perm.iter().enumerate() {
            for k in 0..config.k {
                for t in 0..config.t {
                    let a = base.position(old_index, k, t);
                    let b = shuffled.position(new_index, k, t);
                    ensure!(
                        a.x.to_bits() == b.x.to_bits() && a.y.to_bits() == b.y.to_bits(),
                        "scene {index}: permutation changed agent {old_index} k={k} t={t}"
                    );
                }
            }
        }
        for k in 0..config.k {
            ensure!(
                base.scene_logits.at(&[k]).to_bits() == shuffled.scene_logits.at(&[k]).to_bits(),
                "scene {index}: permutation changed logit {k}"
            );
        }
    }
    Ok(format!(
        "50 scenes: rigid worst deviation {worst_rigid:.1e} (tol 1e-4); permutations bit-exact"
    ))
}

// --- criterion 9: total = omega*reg + (1-omega)*cls ------------------------

fn criterion_9() -> Result<String, String> {
    let config = small_model();
    let mut worst: f64 = 0.0;
    for trial in 0..50u64 {
        let scene = &gen_scenes(1, (2, 4), ScenarioKind::all(), 9000 + trial)[0];
        let params = build_params(&config, trial).map_err(|e| e.to_string())?;
        let mut tape = Tape::new();
        let binding = params.bind(&mut tape);
        let bound = BoundParams::new(&params, &binding);
        let pass = model_forward(&mut tape, scene, &bound, &config).map_err(|e| e.to_string())?;
        let loss_config = LossConfig::for_scene(scene);
        ensure!(
            loss_config.omega == 0.9,
            "default omega is {}, expected 0.9",
            loss_config.omega
        );
        let mode = if trial % 2 == 0 {
            LossMode::SceneWta
        } else {
            LossMode::MarginalWta
        };
        let b = scene_loss(&mut tape, &pass, scene, &loss_config, mode)
            .map_err(|e| e.to_string())?;
        let dev = (b.total - (0.9 * b.reg + 0.1 * b.cls)).abs();
        worst = worst.max(dev);
        ensure!(
            dev <= 1e-6,
            "trial {trial}: |total - blend| = {dev:.3e} (reg {:.6}, cls {:.6}, total {:.6})",
            b.reg,
            b.cls,
            b.total
        );
    }
    Ok(format!(
        "50 scenes, both loss modes: |total - (0.9 reg + 0.1 cls)| <= 1e-6 (worst {worst:.1e})"
    ))
}
