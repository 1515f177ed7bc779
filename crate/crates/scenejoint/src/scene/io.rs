//! Scene and dataset serialization.
//!
//! Loading goes through serde with unknown fields rejected. Saving uses a
//! hand-rolled writer so key order and float formatting (6 decimal places)
//! are stable across runs; generated coordinates are quantized to the same 6
//! decimals, which makes save → load an exact inverse.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::gen::GenConfig;
use super::{validate_scene, Scene, Violation};

#[derive(Debug, thiserror::Error)]
pub enum SceneError {
    #[error("json parse error: {0}")]
    Parse(String),
    #[error("scene validation failed: {}", format_violations(.0))]
    Invalid(Vec<Violation>),
    #[error("io error: {0}")]
    Io(String),
    #[error("dataset error: {0}")]
    Dataset(String),
}

fn format_violations(violations: &[Violation]) -> String {
    violations
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}

/// Parses and validates one scene from JSON text.
pub fn load_scene(bytes: &[u8]) -> Result<Scene, SceneError> {
    let text = std::str::from_utf8(bytes).map_err(|e| SceneError::Parse(e.to_string()))?;
    let scene: Scene = serde_json::from_str(text).map_err(|e| SceneError::Parse(e.to_string()))?;
    let violations = validate_scene(&scene);
    if violations.is_empty() {
        Ok(scene)
    } else {
        Err(SceneError::Invalid(violations))
    }
}

fn fmt_f(v: f64) -> String {
    format!("{v:.6}")
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 2);
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            '\t' => out.push_str("\\t"),
            c if (c as u32) < 0x20 => out.push_str(&format!("\\u{:04x}", c as u32)),
            c => out.push(c),
        }
    }
    out
}

/// Serializes a scene with stable key order and 6-decimal floats.
pub fn save_scene(scene: &Scene) -> String {
    let mut s = String::new();
    s.push_str("{\n");
    s.push_str(&format!(
        "  \"scenario_id\": \"{}\",\n",
        escape(&scene.scenario_id)
    ));
    s.push_str(&format!("  \"hz\": {},\n", fmt_f(scene.hz)));
    s.push_str(&format!("  \"H\": {},\n", scene.h));
    s.push_str(&format!("  \"T\": {},\n", scene.t));
    s.push_str(&format!(
        "  \"focal_agent_id\": \"{}\",\n",
        escape(&scene.focal_agent_id)
    ));

    if scene.agents.is_empty() {
        s.push_str("  \"agents\": [],\n");
    } else {
        s.push_str("  \"agents\": [\n");
        for (i, agent) in scene.agents.iter().enumerate() {
            s.push_str("    {\n");
            s.push_str(&format!("      \"id\": \"{}\",\n", escape(&agent.id)));
            s.push_str(&format!("      \"kind\": \"{}\",\n", agent.kind.as_str()));
            s.push_str(&format!("      \"is_scored\": {},\n", agent.is_scored));
            s.push_str(&format!("      \"is_focal\": {},\n", agent.is_focal));
            s.push_str("      \"history\": [\n");
            for (j, step) in agent.history.iter().enumerate() {
                let sep = if j + 1 == agent.history.len() { "" } else { "," };
                s.push_str(&format!(
                    "        [{}, {}, {}, {}, {}]{sep}\n",
                    fmt_f(step.x),
                    fmt_f(step.y),
                    fmt_f(step.hx),
                    fmt_f(step.hy),
                    step.valid
                ));
            }
            s.push_str("      ],\n");
            s.push_str("      \"future\": [\n");
            for (j, step) in agent.future.iter().enumerate() {
                let sep = if j + 1 == agent.future.len() { "" } else { "," };
                s.push_str(&format!(
                    "        [{}, {}, {}]{sep}\n",
                    fmt_f(step.x),
                    fmt_f(step.y),
                    step.valid
                ));
            }
            s.push_str("      ]\n");
            let sep = if i + 1 == scene.agents.len() { "" } else { "," };
            s.push_str(&format!("    }}{sep}\n"));
        }
        s.push_str("  ],\n");
    }

    if scene.lanes.is_empty() {
        s.push_str("  \"lanes\": []\n");
    } else {
        s.push_str("  \"lanes\": [\n");
        for (i, lane) in scene.lanes.iter().enumerate() {
            s.push_str("    {\n");
            s.push_str(&format!("      \"id\": \"{}\",\n", escape(&lane.id)));
            s.push_str("      \"centerline\": [\n");
            for (j, &(x, y)) in lane.centerline.iter().enumerate() {
                let sep = if j + 1 == lane.centerline.len() { "" } else { "," };
                s.push_str(&format!("        [{}, {}]{sep}\n", fmt_f(x), fmt_f(y)));
            }
            s.push_str("      ]\n");
            let sep = if i + 1 == scene.lanes.len() { "" } else { "," };
            s.push_str(&format!("    }}{sep}\n"));
        }
        s.push_str("  ]\n");
    }
    s.push('}');
    s.push('\n');
    s
}

/// `manifest.json` sitting next to the scene files of a dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub seed: u64,
    pub config: GenConfig,
    pub files: Vec<String>,
}

/// Writes one `.scene.json` per scene plus the manifest into `dir`.
pub fn write_dataset(
    dir: &Path,
    scenes: &[Scene],
    config: &GenConfig,
    seed: u64,
) -> Result<DatasetManifest, SceneError> {
    fs::create_dir_all(dir)
        .map_err(|e| SceneError::Io(format!("create {}: {e}", dir.display())))?;
    let mut files = Vec::with_capacity(scenes.len());
    for scene in scenes {
        let name = format!("{}.scene.json", scene.scenario_id);
        let path = dir.join(&name);
        fs::write(&path, save_scene(scene))
            .map_err(|e| SceneError::Io(format!("write {}: {e}", path.display())))?;
        files.push(name);
    }
    let manifest = DatasetManifest {
        seed,
        config: config.clone(),
        files,
    };
    let manifest_path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| SceneError::Io(e.to_string()))?;
    fs::write(&manifest_path, json + "\n")
        .map_err(|e| SceneError::Io(format!("write {}: {e}", manifest_path.display())))?;
    Ok(manifest)
}

/// Loads every scene listed in a dataset's manifest, in manifest order.
pub fn read_dataset(dir: &Path) -> Result<(DatasetManifest, Vec<Scene>), SceneError> {
    let manifest_path = dir.join("manifest.json");
    let text = fs::read_to_string(&manifest_path).map_err(|e| {
        SceneError::Dataset(format!("cannot read {}: {e}", manifest_path.display()))
    })?;
    let manifest: DatasetManifest = serde_json::from_str(&text)
        .map_err(|e| SceneError::Dataset(format!("{}: {e}", manifest_path.display())))?;
    let mut scenes = Vec::with_capacity(manifest.files.len());
    for name in &manifest.files {
        let path = dir.join(name);
        let bytes = fs::read(&path)
            .map_err(|e| SceneError::Dataset(format!("cannot read {}: {e}", path.display())))?;
        let scene = load_scene(&bytes)
            .map_err(|e| SceneError::Dataset(format!("{}: {e}", path.display())))?;
        scenes.push(scene);
    }
    Ok((manifest, scenes))
}
