//! Checkpoint directories: one tensor file per parameter plus `manifest.json`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelKind, ParamStore, StbConfig, StbModel};
use crate::tensor::{read_tensor, write_tensor};
use crate::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainingStage {
    Init,
    Pretrain,
    Finetune,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub config: StbConfig,
    pub kind: ModelKind,
    pub stage: TrainingStage,
    /// Parameter name -> tensor file relative to the checkpoint directory.
    pub parameters: BTreeMap<String, String>,
    pub frozen: BTreeMap<String, bool>,
}

pub fn save_checkpoint(model: &StbModel, dir: impl AsRef<Path>, stage: TrainingStage) -> Result<CheckpointManifest> {
    let dir = dir.as_ref();
    let params_dir = dir.join("params");
    fs::create_dir_all(&params_dir).map_err(|e| Error::io(&params_dir, e))?;
    let mut parameters = BTreeMap::new();
    let mut frozen = BTreeMap::new();
    for (name, p) in model.params.iter() {
        let file = format!("params/{name}.stbt");
        write_tensor(dir.join(&file), &p.value)?;
        parameters.insert(name.to_string(), file);
        frozen.insert(name.to_string(), p.frozen);
    }
    let manifest = CheckpointManifest {
        config: model.config.clone(),
        kind: model.kind,
        stage,
        parameters,
        frozen,
    };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&path, e))?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<(StbModel, CheckpointManifest)> {
    let dir = dir.as_ref();
    let path = dir.join(MANIFEST_FILE);
    if !path.exists() {
        return Err(Error::MissingArtifact(path));
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
    manifest.config.validate()?;
    let mut params = ParamStore::new();
    for (name, file) in &manifest.parameters {
        params.insert(name, read_tensor(dir.join(file))?);
    }
    for (name, p) in params.iter_mut() {
        p.frozen = manifest.frozen.get(name).copied().unwrap_or(false);
    }
    let model = StbModel {
        config: manifest.config.clone(),
        kind: manifest.kind,
        params,
    };
    check_shapes(&model)?;
    Ok((model, manifest))
}

/// Every parameter a freshly built model would have must exist with the same shape.
fn check_shapes(model: &StbModel) -> Result<()> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let reference = match model.kind {
        ModelKind::SingleChannel => StbModel::single_channel(model.config.clone(), &mut rng)?,
        ModelKind::MultiChannel => StbModel::new(model.config.clone(), &mut rng)?,
    };
    for (name, p) in reference.params.iter() {
        let got = model.params.value(name)?;
        if got.shape() != p.value.shape() {
            return Err(Error::Checkpoint(format!(
                "{name}: shape {:?}, expected {:?}",
                got.shape(),
                p.value.shape()
            )));
        }
    }
    if model.params.len() != reference.params.len() {
        return Err(Error::Checkpoint(format!(
            "{} parameters, expected {}",
            model.params.len(),
            reference.params.len()
        )));
    }
    Ok(())
}
