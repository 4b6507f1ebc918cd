//! Reading populations, stage labels and writing outputs.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use mother_core::simgen::{CONFIG_FILE, MANIFEST_FILE, MODELS_DIR};
use mother_core::{load_manifest, load_model, Error, GraphManifest, ModelWeights, Stage};
use rayon::prelude::*;
use serde::Serialize;

use crate::CliError;

/// Checkpoints of a population directory: `<dir>/models/*.safetensors`, or
/// `<dir>/*.safetensors` when there is no `models` subdirectory, ordered by
/// model id.
pub fn load_models(dir: &Path) -> Result<Vec<ModelWeights>, CliError> {
    let nested = dir.join(MODELS_DIR);
    let root = if nested.is_dir() { nested } else { dir.to_path_buf() };
    let entries = std::fs::read_dir(&root).map_err(|e| Error::io(&root, e))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "safetensors"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::InvalidInput(format!("no .safetensors files in {}", root.display())).into());
    }
    log::info!("loading {} checkpoints from {}", files.len(), root.display());
    let mut models = files
        .par_iter()
        .map(load_model)
        .collect::<mother_core::Result<Vec<_>>>()?;
    models.sort_by(|a, b| a.model_id().cmp(b.model_id()));
    Ok(models)
}

/// The manifest given explicitly, else `<dir>/manifest.json` if present.
pub fn find_manifest(dir: Option<&Path>, explicit: Option<&Path>) -> Result<Option<GraphManifest>, CliError> {
    if let Some(p) = explicit {
        return Ok(Some(load_manifest(p)?));
    }
    match dir.map(|d| d.join(MANIFEST_FILE)) {
        Some(p) if p.is_file() => Ok(Some(load_manifest(p)?)),
        _ => Ok(None),
    }
}

/// Stage of every model: from the stage map when given, else the manifest.
pub fn resolve_stages(
    ids: &[String],
    manifest: Option<&GraphManifest>,
    stage_map: Option<&Path>,
) -> Result<Vec<Stage>, CliError> {
    let lookup: HashMap<String, Stage> = if let Some(path) = stage_map {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::InvalidInput(format!("stage map {}: {e}", path.display())))?
    } else if let Some(m) = manifest {
        m.nodes.iter().map(|n| (n.model_id.clone(), n.stage)).collect()
    } else {
        return Err(CliError::Usage(
            "stages required: pass --stage-map or provide a manifest".into(),
        ));
    };
    ids.iter()
        .map(|id| {
            lookup
                .get(id)
                .copied()
                .ok_or_else(|| Error::InvalidInput(format!("no stage for model `{id}`")).into())
        })
        .collect()
}

/// Layer patterns recorded by `simulate` in the population's config, used
/// when the corresponding flags are absent.
#[derive(Debug, Default)]
pub struct RecordedPatterns {
    pub score: Option<String>,
    pub distance: Option<String>,
}

pub fn recorded_patterns(dir: &Path) -> RecordedPatterns {
    let path = dir.join(CONFIG_FILE);
    let Some(value) = std::fs::read_to_string(&path)
        .ok()
        .and_then(|t| serde_json::from_str::<serde_json::Value>(&t).ok())
    else {
        return RecordedPatterns::default();
    };
    let sim = value.get("simulation").unwrap_or(&value);
    let field = |k: &str| sim.get(k).and_then(|v| v.as_str()).map(str::to_string);
    RecordedPatterns {
        score: field("score_pattern"),
        distance: field("distance_pattern"),
    }
}

/// Writes `text` to `out` (plus a `<out>.config.json` snapshot), or to
/// stdout when no path is given.
pub fn emit<T: Serialize>(out: Option<&Path>, text: &str, snapshot: &T) -> Result<(), CliError> {
    match out {
        None => {
            print!("{text}");
            if !text.ends_with('\n') {
                println!();
            }
            Ok(())
        }
        Some(path) => {
            write_file(path, text)?;
            let mut side = path.as_os_str().to_owned();
            side.push(".config.json");
            let side = PathBuf::from(side);
            write_file(&side, &serde_json::to_string_pretty(snapshot).map_err(Error::from)?)
        }
    }
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut text = text.to_string();
    if !text.ends_with('\n') {
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e).into())
}
