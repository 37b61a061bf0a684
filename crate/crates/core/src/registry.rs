//! Model directory: one safetensors file per module plus `manifest.json`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Enabled, Model, ModelConfig, ModuleId};

pub const MANIFEST: &str = "manifest.json";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModuleEntry {
    pub file: String,
    /// Hex sha256 of the module's parameter snapshot.
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub lambda: f64,
    pub config: ModelConfig,
    pub enabled: Enabled,
    pub modules: BTreeMap<String, ModuleEntry>,
    /// `Model::checksum()`, as written into container headers.
    pub model_checksum: String,
    /// Last completed training phase, if any.
    #[serde(default)]
    pub phase: Option<String>,
}

impl Manifest {
    /// The `lambda_id` byte written into container headers.
    pub fn lambda_id(&self) -> u8 {
        lambda_id(self.lambda)
    }
}

/// λ rounded into a header byte, saturating at 255.
pub fn lambda_id(lambda: f64) -> u8 {
    lambda.round().clamp(0.0, 255.0) as u8
}

/// Writes `bytes` next to `path` and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = tmp_path(path);
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn tmp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".tmp");
    path.with_file_name(name)
}

pub fn save_model(model: &Model, dir: &Path, lambda: f64, phase: Option<&str>) -> Result<Manifest> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut modules = BTreeMap::new();
    for id in ModuleId::ALL {
        let file = format!("{}.safetensors", id.name());
        let path = dir.join(&file);
        let tmp = tmp_path(&path);
        let store = model.store(id);
        store.save(&tmp)?;
        std::fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
        modules.insert(
            id.name().to_string(),
            ModuleEntry {
                file,
                sha256: hex::encode(store.checksum()?),
            },
        );
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        lambda,
        config: model.config.clone(),
        enabled: model.enabled,
        modules,
        model_checksum: format!("{:016x}", model.checksum()?),
        phase: phase.map(str::to_string),
    };
    write_atomic(&dir.join(MANIFEST), &serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    if !path.exists() {
        return Err(Error::MissingCheckpoint(path));
    }
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_slice(&bytes)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::ModelMismatch(format!(
            "{}: format version {}",
            path.display(),
            manifest.format_version
        )));
    }
    Ok(manifest)
}

/// Loads a model and checks every module digest against the manifest.
pub fn load_model(dir: &Path) -> Result<(Model, Manifest)> {
    let manifest = read_manifest(dir)?;
    let mut model = Model::new(manifest.config.clone(), 0)?;
    model.enabled = manifest.enabled;
    for id in ModuleId::ALL {
        let entry = manifest
            .modules
            .get(id.name())
            .ok_or_else(|| Error::ModelMismatch(format!("manifest lists no module {id}")))?;
        let store = model.store(id);
        store.load(&dir.join(&entry.file))?;
        let found = hex::encode(store.checksum()?);
        if found != entry.sha256 {
            return Err(Error::ModelMismatch(format!("{id} weights digest {found}, manifest {}", entry.sha256)));
        }
    }
    let checksum = format!("{:016x}", model.checksum()?);
    if checksum != manifest.model_checksum {
        return Err(Error::ModelMismatch(format!(
            "model checksum {checksum}, manifest {}",
            manifest.model_checksum
        )));
    }
    Ok((model, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn save_load_round_trip_and_tamper_detection() {
        let dir = tempfile::tempdir().unwrap();
        let mut model = Model::new(ModelConfig::desk(), 5).unwrap();
        model.enabled.mv_refine = false;
        let m = save_model(&model, dir.path(), 64.0, Some("3")).unwrap();
        assert_eq!(m.lambda_id(), 64);
        let (loaded, manifest) = load_model(dir.path()).unwrap();
        assert_eq!(loaded.checksum().unwrap(), model.checksum().unwrap());
        assert_eq!(loaded.enabled, model.enabled);
        assert_eq!(manifest.phase.as_deref(), Some("3"));
        assert!(!dir.path().join("manifest.json.tmp").exists());

        let other = Model::new(ModelConfig::desk(), 6).unwrap();
        other.store(ModuleId::Mmc).save(&dir.path().join("mmc.safetensors")).unwrap();
        assert!(load_model(dir.path()).err().unwrap().is_model_mismatch());
        assert!(matches!(load_model(&dir.path().join("nope")), Err(Error::MissingCheckpoint(_))));
    }
}
