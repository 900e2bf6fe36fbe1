//! Named-array archives: a directory holding `arrays.safetensors` and a
//! plain-text `manifest.toml` (format version, kind, config echo, free-form
//! metadata and the array name -> shape index).
//!
//! Array naming: `map/fc{i}/…` for the mapping network, `gen/const_input`,
//! `gen/res{N}/conv{0|1}/…`, `gen/to_rgb/…`, `disc/…`, `enc/…` and `opt/…`
//! for optimiser moments.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

pub const FORMAT_NAME: &str = "padlab-archive";
pub const FORMAT_VERSION: u32 = 1;
pub const ARRAYS_FILE: &str = "arrays.safetensors";
pub const MANIFEST_FILE: &str = "manifest.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub format_version: u32,
    pub kind: String,
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
    #[serde(default)]
    pub config: Option<toml::Value>,
    pub arrays: BTreeMap<String, Vec<usize>>,
}

impl Manifest {
    pub fn new(kind: &str) -> Self {
        Self {
            format: FORMAT_NAME.into(),
            format_version: FORMAT_VERSION,
            kind: kind.into(),
            meta: BTreeMap::new(),
            config: None,
            arrays: BTreeMap::new(),
        }
    }

    pub fn meta_value(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| LabError::Checkpoint(format!("manifest has no meta key {key:?}")))
    }

    pub fn config_as<T: serde::de::DeserializeOwned>(&self) -> Result<T> {
        let value = self
            .config
            .clone()
            .ok_or_else(|| LabError::Checkpoint("manifest has no config echo".into()))?;
        value
            .try_into()
            .map_err(|e: toml::de::Error| LabError::Checkpoint(e.to_string()))
    }
}

#[derive(Debug, Clone)]
pub struct Archive {
    pub manifest: Manifest,
    pub arrays: BTreeMap<String, Tensor>,
}

impl Archive {
    pub fn new(kind: &str) -> Self {
        Self {
            manifest: Manifest::new(kind),
            arrays: BTreeMap::new(),
        }
    }

    pub fn with_config<T: Serialize>(mut self, config: &T) -> Result<Self> {
        self.manifest.config = Some(
            toml::Value::try_from(config).map_err(|e| LabError::Checkpoint(e.to_string()))?,
        );
        Ok(self)
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        self.manifest.meta.insert(key.into(), value.to_string());
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.arrays.insert(name.into(), t);
    }

    pub fn extend_prefixed(&mut self, prefix: &str, arrays: BTreeMap<String, Tensor>) {
        for (k, v) in arrays {
            self.arrays.insert(format!("{prefix}{k}"), v);
        }
    }

    /// Arrays under `prefix`, with the prefix stripped.
    pub fn strip_prefix(&self, prefix: &str) -> BTreeMap<String, Tensor> {
        self.arrays
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
            .collect()
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.arrays
            .get(name)
            .ok_or_else(|| LabError::Checkpoint(format!("archive has no array {name}")))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
        let mut manifest = self.manifest.clone();
        manifest.arrays = self
            .arrays
            .iter()
            .map(|(k, v)| (k.clone(), v.dims().to_vec()))
            .collect();
        let contiguous: std::collections::HashMap<String, Tensor> = self
            .arrays
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.contiguous()?)))
            .collect::<Result<_>>()?;
        candle_core::safetensors::save(&contiguous, dir.join(ARRAYS_FILE))?;
        let text =
            toml::to_string(&manifest).map_err(|e| LabError::Checkpoint(e.to_string()))?;
        let path = dir.join(MANIFEST_FILE);
        fs::write(&path, text).map_err(|e| LabError::io(path, e))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| LabError::io(&path, e))?;
        let manifest: Manifest =
            toml::from_str(&text).map_err(|e| LabError::Checkpoint(format!("{}: {e}", path.display())))?;
        if manifest.format != FORMAT_NAME || manifest.format_version != FORMAT_VERSION {
            return Err(LabError::Checkpoint(format!(
                "{} is {} v{}, expected {FORMAT_NAME} v{FORMAT_VERSION}",
                path.display(),
                manifest.format,
                manifest.format_version
            )));
        }
        let loaded = candle_core::safetensors::load(dir.join(ARRAYS_FILE), &Device::Cpu)?;
        let mut arrays = BTreeMap::new();
        for (name, shape) in &manifest.arrays {
            let t = loaded.get(name).ok_or_else(|| {
                LabError::Checkpoint(format!("manifest lists {name} but the archive lacks it"))
            })?;
            if t.dims() != shape.as_slice() {
                return Err(LabError::Checkpoint(format!(
                    "{name}: stored shape {:?} differs from manifest {:?}",
                    t.dims(),
                    shape
                )));
            }
            arrays.insert(name.clone(), t.clone());
        }
        if loaded.len() != arrays.len() {
            return Err(LabError::Checkpoint(
                "archive holds arrays not listed in its manifest".into(),
            ));
        }
        Ok(Self { manifest, arrays })
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.manifest.kind != kind {
            return Err(LabError::Checkpoint(format!(
                "expected a {kind} archive, found {}",
                self.manifest.kind
            )));
        }
        Ok(())
    }
}
