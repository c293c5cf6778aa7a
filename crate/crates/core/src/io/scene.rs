//! `scene.json`: the seed and spec a synthetic scene is regenerated from.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::training::{generate_scene, SceneSpec, SyntheticScene};

pub const SCENE_FILE: &str = "scene.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneFile {
    pub seed: u64,
    pub spec: SceneSpec,
}

impl SceneFile {
    pub fn generate(&self) -> Result<SyntheticScene> {
        generate_scene(self.seed, &self.spec).map_err(|e| Error::Format(format!("scene file: {e}")))
    }
}

pub fn write_scene_file(dir: impl AsRef<Path>, scene: &SyntheticScene) -> Result<()> {
    let file = SceneFile {
        seed: scene.seed,
        spec: scene.spec.clone(),
    };
    let mut text = serde_json::to_string_pretty(&file)?;
    text.push('\n');
    std::fs::write(dir.as_ref().join(SCENE_FILE), text)?;
    Ok(())
}

/// Scenes from `dir/scene.json`, or from `dir/*/scene.json` in name order.
pub fn load_scene_dir(dir: impl AsRef<Path>) -> Result<Vec<SyntheticScene>> {
    let dir = dir.as_ref();
    let read = |p: &Path| -> Result<SyntheticScene> {
        serde_json::from_slice::<SceneFile>(&std::fs::read(p)?)?.generate()
    };
    let direct = dir.join(SCENE_FILE);
    if direct.is_file() {
        return Ok(vec![read(&direct)?]);
    }
    let mut entries: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path().join(SCENE_FILE)))
        .filter(|p| p.is_file())
        .collect();
    entries.sort();
    if entries.is_empty() {
        return Err(Error::Config(format!("no {SCENE_FILE} under {}", dir.display())));
    }
    entries.iter().map(|p| read(p)).collect()
}
