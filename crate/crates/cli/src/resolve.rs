//! Config resolution: base settings, optional file, dotted overrides.

use std::fmt;
use std::path::{Path, PathBuf};

use padlab::config::LabConfig;
use padlab::LabError;

use crate::args::Common;

pub const OUT_ENV: &str = "PADLAB_OUT";
pub const SNAPSHOT_FILE: &str = "config.toml";

#[derive(Debug)]
pub enum Failure {
    /// Bad flags or configuration; exit code 2.
    Usage(String),
    /// Anything that went wrong while running; exit code 1.
    Runtime(String),
}

impl Failure {
    pub fn code(&self) -> i32 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Runtime(_) => 1,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Failure::Usage(_) => "usage",
            Failure::Runtime(_) => "runtime",
        }
    }

    pub fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Runtime(m) => m,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.message())
    }
}

impl From<LabError> for Failure {
    fn from(e: LabError) -> Self {
        match e {
            LabError::Config(_) => Failure::Usage(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

impl From<candle_core::Error> for Failure {
    fn from(e: candle_core::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

pub fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

pub fn runtime(msg: impl Into<String>) -> Failure {
    Failure::Runtime(msg.into())
}

/// Parses the right-hand side of an override as a TOML value, falling back
/// to a bare string (so `key=p0` works without quotes).
fn parse_value(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

/// Sets `path` (dotted) in `root`, creating intermediate tables.
pub fn apply_override(root: &mut toml::Value, spec: &str) -> Result<(), Failure> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| usage(format!("override {spec:?} is not of the form key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(usage(format!("override key {key:?} is malformed")));
    }
    let mut node = root;
    for p in &parts[..parts.len() - 1] {
        let table = node
            .as_table_mut()
            .ok_or_else(|| usage(format!("override key {key:?} descends into a non-table")))?;
        node = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    let table = node
        .as_table_mut()
        .ok_or_else(|| usage(format!("override key {key:?} descends into a non-table")))?;
    table.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

/// Resolved configuration: `--config` file if given, else `base`, else
/// the desk defaults; then overrides and `--seed`. Unknown keys anywhere
/// are a usage error.
pub fn resolve_config(common: &Common, base: Option<&LabConfig>) -> Result<LabConfig, Failure> {
    let mut root = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
            toml::Value::Table(
                text.parse::<toml::Table>()
                    .map_err(|e| usage(format!("config {} is not valid TOML: {e}", path.display())))?,
            )
        }
        None => {
            let base = base.cloned().unwrap_or_else(LabConfig::desk);
            toml::Value::try_from(&base).map_err(|e| runtime(e.to_string()))?
        }
    };
    for spec in &common.overrides {
        apply_override(&mut root, spec)?;
    }
    if let Some(seed) = common.seed {
        apply_override(&mut root, &format!("seed={seed}"))?;
    }
    let cfg: LabConfig = root.try_into().map_err(|e: toml::de::Error| usage(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn output_dir(common: &Common, subcommand: &str) -> PathBuf {
    match &common.out {
        Some(p) => p.clone(),
        None => std::env::var_os(OUT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("runs"))
            .join(subcommand),
    }
}

pub fn write_snapshot(out: &Path, cfg: &LabConfig) -> Result<(), Failure> {
    std::fs::create_dir_all(out).map_err(|e| runtime(format!("cannot create {}: {e}", out.display())))?;
    let path = out.join(SNAPSHOT_FILE);
    std::fs::write(&path, cfg.to_toml_string()?)
        .map_err(|e| runtime(format!("cannot write {}: {e}", path.display())))
}
