//! `scenejoint` command line: dataset generation, training, evaluation,
//! and SVG visualization.
//!
//! Exit codes: 0 success, 1 usage error, 2 data/validation error. Every
//! subcommand validates its inputs before writing an output file, human
//! progress goes to stderr, and machine-readable results go to files only.

use std::fs;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use scenejoint::harness::{
    evaluate, train_with_progress, EvalOptions, HarnessError, TrainConfig,
};
use scenejoint::losses::LossMode;
use scenejoint::metrics::{report_to_csv, Method};
use scenejoint::model::{model_forward, BoundParams, ModelConfig};
use scenejoint::scene::{
    generate_synthetic_dataset, load_scene, write_dataset, GenConfig, ScenarioKind,
};
use scenejoint::tensor::Tape;
use scenejoint::viz::{render_svg, VizOptions, WorldSelection};

#[derive(Parser)]
#[command(
    name = "scenejoint",
    version,
    about = "Scene-consistent multi-agent trajectory prediction pipeline"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene dataset.
    Gen(GenArgs),
    /// Train a model on a generated dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint with one or more assembly methods.
    Eval(EvalArgs),
    /// Render a scene (and a predicted world) as SVG.
    Viz(VizArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Number of scenes to generate.
    #[arg(long, default_value_t = 100)]
    num: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Agent count range, MIN:MAX.
    #[arg(long, default_value = "2:6")]
    agents: String,
    /// Scenario mix, comma separated: straight,cross,lanechange,merge.
    #[arg(long, value_delimiter = ',', default_value = "straight,cross,lanechange,merge")]
    mix: Vec<String>,
    /// History steps per agent.
    #[arg(long = "H", default_value_t = 10)]
    history: usize,
    /// Future steps per agent.
    #[arg(long = "T", default_value_t = 15)]
    future: usize,
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory (overrides the config file).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Loss mode: scene or marginal (overrides the config file).
    #[arg(long)]
    loss: Option<String>,
    /// JSON training config; missing fields fall back to defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// RNG seed (overrides the config file).
    #[arg(long)]
    seed: Option<u64>,
    /// Checkpoint output directory (overrides the config file).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint directory (config.json + manifest.json + params.bin).
    #[arg(long)]
    ckpt: PathBuf,
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Assembly methods, comma separated: scene,marginal,combined.
    #[arg(long, value_delimiter = ',', default_value = "scene,marginal,combined")]
    methods: Vec<String>,
    /// Collision distance threshold, meters.
    #[arg(long = "dist-safe", default_value_t = 2.0)]
    dist_safe: f64,
    /// JSON report output path.
    #[arg(long)]
    report: PathBuf,
    /// Optional CSV output path.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct VizArgs {
    /// Scene JSON file.
    #[arg(long)]
    scene: PathBuf,
    /// Checkpoint directory.
    #[arg(long)]
    ckpt: PathBuf,
    /// World to draw: "best" or a mode index.
    #[arg(long, default_value = "best")]
    world: String,
    /// SVG output path.
    #[arg(long)]
    out: PathBuf,
}

enum CliError {
    Usage(String),
    Data(String),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) => m,
        }
    }
}

impl From<HarnessError> for CliError {
    fn from(e: HarnessError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<scenejoint::scene::SceneError> for CliError {
    fn from(e: scenejoint::scene::SceneError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<scenejoint::scene::GenError> for CliError {
    fn from(e: scenejoint::scene::GenError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<scenejoint::model::ModelError> for CliError {
    fn from(e: scenejoint::model::ModelError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<scenejoint::viz::VizError> for CliError {
    fn from(e: scenejoint::viz::VizError) -> Self {
        CliError::Data(e.to_string())
    }
}

fn io_data(context: &str, e: std::io::Error) -> CliError {
    CliError::Data(format!("{context}: {e}"))
}

/// `SCENEJOINT_THREADS` caps the worker count; unset or 0 means hardware
/// parallelism.
fn threads_from_env() -> Result<usize, CliError> {
    match std::env::var("SCENEJOINT_THREADS") {
        Ok(v) => v.trim().parse::<usize>().map_err(|_| {
            CliError::Usage(format!("SCENEJOINT_THREADS must be an integer, got {v:?}"))
        }),
        Err(_) => Ok(0),
    }
}

fn parse_agents(spec: &str) -> Result<(usize, usize), CliError> {
    let err = || CliError::Usage(format!("--agents expects MIN:MAX, got {spec:?}"));
    let (lo, hi) = spec.split_once(':').ok_or_else(err)?;
    let min = lo.trim().parse::<usize>().map_err(|_| err())?;
    let max = hi.trim().parse::<usize>().map_err(|_| err())?;
    Ok((min, max))
}

fn parse_mix(tokens: &[String]) -> Result<Vec<ScenarioKind>, CliError> {
    tokens
        .iter()
        .map(|t| match t.trim() {
            "straight" | "straight_follow" => Ok(ScenarioKind::StraightFollow),
            "cross" | "crossing" => Ok(ScenarioKind::CrossingIntersection),
            "lanechange" | "lane_change" => Ok(ScenarioKind::LaneChange),
            "merge" => Ok(ScenarioKind::Merge),
            other => Err(CliError::Usage(format!(
                "unknown --mix token {other:?}; expected straight, cross, lanechange, merge"
            ))),
        })
        .collect()
}

fn parse_methods(tokens: &[String]) -> Result<Vec<Method>, CliError> {
    tokens
        .iter()
        .map(|t| {
            Method::parse(t.trim()).ok_or_else(|| {
                CliError::Usage(format!(
                    "unknown --methods token {t:?}; expected scene, marginal, combined"
                ))
            })
        })
        .collect()
}

fn run_gen(args: &GenArgs) -> Result<(), CliError> {
    let (agents_min, agents_max) = parse_agents(&args.agents)?;
    let config = GenConfig {
        scene_count: args.num,
        agents_min,
        agents_max,
        mix: parse_mix(&args.mix)?,
        h: args.history,
        t: args.future,
        ..Default::default()
    };
    let scenes = generate_synthetic_dataset(&config, args.seed)?;
    write_dataset(&args.out, &scenes, &config, args.seed)?;
    eprintln!(
        "generated {} scenes (H={}, T={}) into {}",
        scenes.len(),
        config.h,
        config.t,
        args.out.display()
    );
    Ok(())
}

/// Config-file shape for `train --config`: every field optional, unknown
/// fields rejected. Flag precedence is command line > file > defaults.
#[derive(serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainFileConfig {
    batch_size: Option<usize>,
    epochs: Option<usize>,
    lr_initial: Option<f64>,
    lr_final: Option<f64>,
    lr_drop_epoch: Option<usize>,
    seed: Option<u64>,
    loss_mode: Option<LossMode>,
    dataset: Option<PathBuf>,
    checkpoint_dir: Option<PathBuf>,
    #[serde(default)]
    grad_clip: Option<Option<f64>>,
    omega: Option<f64>,
    model: Option<ModelConfig>,
    threads: Option<usize>,
}

fn build_train_config(args: &TrainArgs) -> Result<TrainConfig, CliError> {
    let mut config = TrainConfig::desk(PathBuf::new(), PathBuf::new());

    if let Some(path) = &args.config {
        let text = fs::read_to_string(path)
            .map_err(|e| io_data(&format!("read {}", path.display()), e))?;
        let file: TrainFileConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        if let Some(v) = file.batch_size {
            config.batch_size = v;
        }
        if let Some(v) = file.epochs {
            config.epochs = v;
        }
        if let Some(v) = file.lr_initial {
            config.lr_initial = v;
        }
        if let Some(v) = file.lr_final {
            config.lr_final = v;
        }
        if let Some(v) = file.lr_drop_epoch {
            config.lr_drop_epoch = v;
        }
        if let Some(v) = file.seed {
            config.seed = v;
        }
        if let Some(v) = file.loss_mode {
            config.loss_mode = v;
        }
        if let Some(v) = file.dataset {
            config.dataset = v;
        }
        if let Some(v) = file.checkpoint_dir {
            config.checkpoint_dir = v;
        }
        if let Some(v) = file.grad_clip {
            config.grad_clip = v;
        }
        if let Some(v) = file.omega {
            config.omega = v;
        }
        if let Some(v) = file.model {
            config.model = v;
        }
        if let Some(v) = file.threads {
            config.threads = v;
        }
    }

    if let Some(data) = &args.data {
        config.dataset = data.clone();
    }
    if let Some(loss) = &args.loss {
        config.loss_mode = LossMode::parse(loss).ok_or_else(|| {
            CliError::Usage(format!("--loss expects scene or marginal, got {loss:?}"))
        })?;
    }
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(out) = &args.out {
        config.checkpoint_dir = out.clone();
    }
    config.threads = threads_from_env()?;

    if config.dataset.as_os_str().is_empty() {
        return Err(CliError::Usage(
            "no dataset: pass --data or set `dataset` in the config file".into(),
        ));
    }
    if config.checkpoint_dir.as_os_str().is_empty() {
        return Err(CliError::Usage(
            "no output directory: pass --out or set `checkpoint_dir` in the config file".into(),
        ));
    }
    Ok(config)
}

fn run_train(args: &TrainArgs) -> Result<(), CliError> {
    let config = build_train_config(args)?;
    eprintln!(
        "training: loss={} seed={} data={} out={}",
        config.loss_mode.as_str(),
        config.seed,
        config.dataset.display(),
        config.checkpoint_dir.display()
    );
    let summary = train_with_progress(&config, |row| {
        eprintln!(
            "epoch {:3}  loss {:.4}  reg {:.4}  cls {:.4}  lr {:.1e}  val fde {:.4}",
            row.epoch, row.mean_total, row.mean_reg, row.mean_cls, row.lr, row.val_avg_min_fde
        );
    })?;
    eprintln!(
        "done: untrained val fde {:.4}, best epoch {} val fde {:.4}",
        summary.initial_val_fde, summary.best_epoch, summary.best_val_fde
    );
    Ok(())
}

fn run_eval(args: &EvalArgs) -> Result<(), CliError> {
    let options = EvalOptions {
        methods: parse_methods(&args.methods)?,
        dist_safe: args.dist_safe,
        miss_threshold: 2.0,
        threads: threads_from_env()?,
    };
    let reports = evaluate(&args.ckpt, &args.data, &options)?;
    let json = serde_json::to_string_pretty(&reports)
        .map_err(|e| CliError::Data(format!("serialize report: {e}")))?;
    fs::write(&args.report, json + "\n")
        .map_err(|e| io_data(&format!("write {}", args.report.display()), e))?;
    if let Some(csv) = &args.csv {
        fs::write(csv, report_to_csv(&reports))
            .map_err(|e| io_data(&format!("write {}", csv.display()), e))?;
    }
    for report in &reports {
        eprintln!(
            "{}: avgMinFDE {:.4}  avgMinADE {:.4}  MR {:.4}  CR {:.4}  ({} scenes)",
            report.method.as_str(),
            report.mean_avg_min_fde,
            report.mean_avg_min_ade,
            report.mean_avg_mr,
            report.collision_rate,
            report.scene_count
        );
    }
    eprintln!("report written to {}", args.report.display());
    Ok(())
}

fn parse_world(spec: &str) -> Result<WorldSelection, CliError> {
    if spec.eq_ignore_ascii_case("best") {
        return Ok(WorldSelection::Best);
    }
    spec.parse::<usize>().map(WorldSelection::Index).map_err(|_| {
        CliError::Usage(format!("--world expects \"best\" or a mode index, got {spec:?}"))
    })
}

fn run_viz(args: &VizArgs) -> Result<(), CliError> {
    let world = parse_world(&args.world)?;
    let bytes = fs::read(&args.scene)
        .map_err(|e| io_data(&format!("read {}", args.scene.display()), e))?;
    let scene = load_scene(&bytes)
        .map_err(|e| CliError::Data(format!("{}: {e}", args.scene.display())))?;
    let (params, model) = scenejoint::harness::load_model(&args.ckpt)?;

    let mut tape = Tape::new();
    let binding = params.bind(&mut tape);
    let bound = BoundParams::new(&params, &binding);
    let pass = model_forward(&mut tape, &scene, &bound, &model)?;

    let options = VizOptions {
        world,
        ..Default::default()
    };
    let svg = render_svg(&scene, Some(&pass.prediction), &options)?;
    fs::write(&args.out, svg)
        .map_err(|e| io_data(&format!("write {}", args.out.display()), e))?;
    eprintln!("wrote {}", args.out.display());
    Ok(())
}

fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help/version go to stdout with success; bad flags are usage
            // errors.
            let code = i32::from(e.use_stderr());
            let _ = e.print();
            return code;
        }
    };
    let result = match &cli.command {
        Command::Gen(args) => run_gen(args),
        Command::Train(args) => run_train(args),
        Command::Eval(args) => run_eval(args),
        Command::Viz(args) => run_viz(args),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.code()
        }
    }
}

fn main() {
    std::process::exit(run());
}
