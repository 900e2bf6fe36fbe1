//! Run configuration: generator ladder, encoder layout, loss weights, data
//! and optimisation settings.
//!
//! Every section rejects unknown keys. `LabConfig` is what gets echoed into
//! checkpoint manifests and written as the resolved-config snapshot.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{config_bail, LabError, Result};

pub const CONFIG_VERSION: u32 = 1;

/// Which padding entities the encoder predicts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "ScopeRepr", into = "String")]
pub enum PaddingScope {
    /// Plain W+ inversion; generator keeps its constant input and zero padding.
    None,
    /// Only the constant input `p0` is adapted.
    ConstOnly,
    /// `p0` plus the first-conv ring of every resolution up to and including this one.
    UpTo(usize),
}

impl PaddingScope {
    pub fn replaces_const(&self) -> bool {
        !matches!(self, PaddingScope::None)
    }

    pub fn max_ring_resolution(&self) -> Option<usize> {
        match self {
            PaddingScope::UpTo(n) => Some(*n),
            _ => None,
        }
    }
}

impl fmt::Display for PaddingScope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PaddingScope::None => write!(f, "none"),
            PaddingScope::ConstOnly => write!(f, "p0"),
            PaddingScope::UpTo(n) => write!(f, "{n}"),
        }
    }
}

impl FromStr for PaddingScope {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "none" => Ok(PaddingScope::None),
            "p0" => Ok(PaddingScope::ConstOnly),
            other => other
                .parse::<usize>()
                .map(PaddingScope::UpTo)
                .map_err(|_| {
                    LabError::Config(format!(
                        "padding scope must be \"none\", \"p0\" or a resolution, got {other:?}"
                    ))
                }),
        }
    }
}

/// Accepts `16` as well as `"16"`, `"p0"` and `"none"`.
#[derive(Deserialize)]
#[serde(untagged)]
enum ScopeRepr {
    Resolution(usize),
    Name(String),
}

impl TryFrom<ScopeRepr> for PaddingScope {
    type Error = LabError;
    fn try_from(r: ScopeRepr) -> Result<Self> {
        match r {
            ScopeRepr::Resolution(n) => Ok(PaddingScope::UpTo(n)),
            ScopeRepr::Name(s) => s.parse(),
        }
    }
}

impl From<PaddingScope> for String {
    fn from(s: PaddingScope) -> String {
        s.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub base_resolution: usize,
    pub max_resolution: usize,
    pub latent_dim: usize,
    pub mapping_layers: usize,
    /// Channel rule when no explicit schedule is given:
    /// `min(channel_max, channel_base / N, latent_dim)`.
    pub channel_base: usize,
    pub channel_max: usize,
    /// Explicit resolution -> channel count table (keys are resolutions).
    pub channel_schedule: Option<BTreeMap<String, usize>>,
    pub padding_scope: PaddingScope,
    pub rng_seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl GeneratorConfig {
    /// 64x64 desk profile.
    pub fn desk() -> Self {
        Self {
            base_resolution: 4,
            max_resolution: 64,
            latent_dim: 128,
            mapping_layers: 4,
            channel_base: 8192,
            channel_max: 512,
            channel_schedule: None,
            padding_scope: PaddingScope::UpTo(32),
            rng_seed: 0,
        }
    }

    /// Small enough to train on a single CPU core in minutes.
    pub fn tiny() -> Self {
        Self {
            latent_dim: 32,
            channel_max: 32,
            mapping_layers: 3,
            ..Self::desk()
        }
    }

    /// 1024x1024, 18 layers.
    pub fn full() -> Self {
        Self {
            max_resolution: 1024,
            latent_dim: 512,
            mapping_layers: 8,
            channel_base: 8192,
            channel_max: 512,
            ..Self::desk()
        }
    }

    pub fn resolutions(&self) -> Vec<usize> {
        let mut out = Vec::new();
        let mut r = self.base_resolution;
        while r <= self.max_resolution {
            out.push(r);
            r *= 2;
        }
        out
    }

    /// Number of style layers `L` (two convolutions per resolution).
    pub fn num_layers(&self) -> usize {
        2 * self.resolutions().len()
    }

    pub fn channels(&self, resolution: usize) -> usize {
        if let Some(table) = &self.channel_schedule {
            if let Some(c) = table.get(&resolution.to_string()) {
                return *c;
            }
        }
        self.channel_max
            .min(self.channel_base / resolution.max(1))
            .min(self.latent_dim)
            .max(1)
    }

    /// Resolution of the (1-based) style layer.
    pub fn layer_resolution(&self, layer: usize) -> usize {
        self.base_resolution << ((layer - 1) / 2)
    }

    /// Resolutions whose first convolution takes an injected ring.
    pub fn ring_resolutions(&self) -> Vec<usize> {
        match self.padding_scope.max_ring_resolution() {
            Some(pmax) => self
                .resolutions()
                .into_iter()
                .filter(|&r| r <= pmax)
                .collect(),
            None => Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_resolution < 1 {
            config_bail!("base_resolution must be positive");
        }
        if self.max_resolution < self.base_resolution {
            config_bail!(
                "max_resolution {} is below base_resolution {}",
                self.max_resolution,
                self.base_resolution
            );
        }
        let ratio = self.max_resolution / self.base_resolution;
        if self.max_resolution % self.base_resolution != 0 || !ratio.is_power_of_two() {
            config_bail!(
                "max_resolution {} must be base_resolution {} times a power of two",
                self.max_resolution,
                self.base_resolution
            );
        }
        if self.latent_dim == 0 || self.mapping_layers == 0 {
            config_bail!("latent_dim and mapping_layers must be positive");
        }
        if let Some(table) = &self.channel_schedule {
            for key in table.keys() {
                let r: usize = key
                    .parse()
                    .map_err(|_| LabError::Config(format!("bad channel_schedule key {key:?}")))?;
                if !self.resolutions().contains(&r) {
                    config_bail!("channel_schedule key {r} is not on the resolution ladder");
                }
            }
        }
        if let Some(pmax) = self.padding_scope.max_ring_resolution() {
            if !self.resolutions().contains(&pmax) {
                config_bail!(
                    "padding resolution {pmax} is not on the ladder {:?}",
                    self.resolutions()
                );
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub input_resolution: usize,
    pub stem_channels: usize,
    pub stage_channels: Vec<usize>,
    pub stage_depths: Vec<usize>,
    pub pyramid_dim: usize,
    /// Style heads per pyramid level, coarse (deepest) level first. Empty
    /// means the default 3 / 4 / remainder split.
    pub latent_split: Vec<usize>,
    pub padding_blocks: usize,
    pub se_reduction: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl EncoderConfig {
    pub fn desk() -> Self {
        Self {
            input_resolution: 64,
            stem_channels: 32,
            stage_channels: vec![32, 64, 128, 128],
            stage_depths: vec![2, 2, 2, 2],
            pyramid_dim: 128,
            latent_split: Vec::new(),
            padding_blocks: 2,
            se_reduction: 4,
        }
    }

    pub fn tiny() -> Self {
        Self {
            stem_channels: 16,
            stage_channels: vec![16, 32, 32, 32],
            stage_depths: vec![1, 1, 1, 1],
            pyramid_dim: 32,
            ..Self::desk()
        }
    }

    /// ResNet-IR-50 layout at 256x256 input.
    pub fn full() -> Self {
        Self {
            input_resolution: 256,
            stem_channels: 64,
            stage_channels: vec![64, 128, 256, 512],
            stage_depths: vec![3, 4, 14, 3],
            pyramid_dim: 512,
            latent_split: Vec::new(),
            padding_blocks: 2,
            se_reduction: 16,
        }
    }

    /// Number of style heads per level, coarse level first.
    pub fn split_for(&self, num_layers: usize) -> Vec<usize> {
        if !self.latent_split.is_empty() {
            return self.latent_split.clone();
        }
        let coarse = num_layers.min(3);
        let mid = (num_layers - coarse).min(4);
        vec![coarse, mid, num_layers - coarse - mid]
    }

    pub fn validate(&self, num_layers: usize) -> Result<()> {
        if self.stage_channels.len() != 4 || self.stage_depths.len() != 4 {
            config_bail!("encoder needs exactly four backbone stages");
        }
        if self.stage_depths.iter().any(|&d| d == 0) {
            config_bail!("every backbone stage needs at least one block");
        }
        if self.input_resolution % 16 != 0 {
            config_bail!("input_resolution must be divisible by 16");
        }
        let split = self.split_for(num_layers);
        if split.len() != 3 || split.iter().sum::<usize>() != num_layers {
            config_bail!("latent_split {split:?} does not partition {num_layers} layers over three levels");
        }
        if self.se_reduction == 0 || self.pyramid_dim == 0 {
            config_bail!("se_reduction and pyramid_dim must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PenaltyNorm {
    /// `||grad||`, as written in the objective.
    Plain,
    /// `||grad||^2`, the conventional R1 form.
    Squared,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Face,
    Scene,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub pix: f64,
    pub per: f64,
    pub id: f64,
    pub adv: f64,
    pub reg: f64,
    pub gamma: f64,
    pub penalty_norm: PenaltyNorm,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::preset(Preset::Synthetic)
    }
}

impl LossWeights {
    pub fn preset(preset: Preset) -> Self {
        let (id, adv) = match preset {
            Preset::Face => (0.1, 0.0),
            Preset::Scene => (0.0, 0.03),
            Preset::Synthetic => (0.0, 0.0),
        };
        Self {
            pix: 1.0,
            per: 0.8,
            id,
            adv,
            reg: 0.003,
            gamma: 10.0,
            penalty_norm: PenaltyNorm::Plain,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("pix", self.pix),
            ("per", self.per),
            ("id", self.id),
            ("adv", self.adv),
            ("reg", self.reg),
            ("gamma", self.gamma),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                config_bail!("loss weight {name} must be a nonnegative finite number, got {v}");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// `synthetic:<name>` or a directory of images.
    pub source: String,
    /// Image count for synthetic sources.
    pub count: usize,
    /// Train : test ratio, applied as "first part train, rest test".
    pub split: [usize; 2],
    pub resolution: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: "synthetic:shapes-64".into(),
            count: 1400,
            split: [13, 1],
            resolution: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr_generator: f64,
    pub lr_discriminator: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Weight of the squared real-gradient penalty on the discriminator.
    pub r1_gamma: f64,
    pub log_every: usize,
    pub checkpoint_every: usize,
    pub disc_channels: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 8,
            lr_generator: 2e-3,
            lr_discriminator: 2e-3,
            beta1: 0.0,
            beta2: 0.99,
            r1_gamma: 1.0,
            log_every: 50,
            checkpoint_every: 500,
            disc_channels: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr_encoder: f64,
    pub lr_discriminator: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eval_every: usize,
    pub eval_images: usize,
    pub checkpoint_every: usize,
    pub average_latent_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch_size: 8,
            lr_encoder: 1e-4,
            lr_discriminator: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eval_every: 250,
            eval_images: 100,
            checkpoint_every: 1000,
            average_latent_samples: 10_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractorConfig {
    pub perceptual_channels: Vec<usize>,
    pub perceptual_seed: u64,
    pub identity_dim: usize,
    pub identity_seed: u64,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self {
            perceptual_channels: vec![16, 32, 32, 64, 64],
            perceptual_seed: 1234,
            identity_dim: 64,
            identity_seed: 4321,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabConfig {
    pub version: u32,
    pub seed: u64,
    pub preset: Preset,
    pub generator: GeneratorConfig,
    pub encoder: EncoderConfig,
    pub loss: LossWeights,
    pub data: DataConfig,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    pub extractor: ExtractorConfig,
}

impl Default for LabConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl LabConfig {
    pub fn desk() -> Self {
        Self {
            version: CONFIG_VERSION,
            seed: 7,
            preset: Preset::Synthetic,
            generator: GeneratorConfig::desk(),
            encoder: EncoderConfig::desk(),
            loss: LossWeights::preset(Preset::Synthetic),
            data: DataConfig::default(),
            pretrain: PretrainConfig::default(),
            train: TrainConfig::default(),
            extractor: ExtractorConfig::default(),
        }
    }

    pub fn tiny() -> Self {
        Self {
            generator: GeneratorConfig::tiny(),
            encoder: EncoderConfig::tiny(),
            extractor: ExtractorConfig {
                perceptual_channels: vec![8, 16, 16, 32, 32],
                ..ExtractorConfig::default()
            },
            pretrain: PretrainConfig {
                disc_channels: 16,
                ..PretrainConfig::default()
            },
            ..Self::desk()
        }
    }

    /// 32x32 variant of `tiny`, padding up to 16x16. Cheap enough for
    /// multi-seed comparisons on one CPU core.
    pub fn mini() -> Self {
        let mut cfg = Self::tiny();
        cfg.generator.max_resolution = 32;
        cfg.generator.padding_scope = PaddingScope::UpTo(16);
        cfg.encoder.input_resolution = 32;
        cfg.data.resolution = 32;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            config_bail!(
                "config version {} is not supported (expected {CONFIG_VERSION})",
                self.version
            );
        }
        self.generator.validate()?;
        self.encoder.validate(self.generator.num_layers())?;
        self.loss.validate()?;
        if self.data.split[0] == 0 {
            config_bail!("data.split must give the training part a positive share");
        }
        if self.train.batch_size == 0 || self.pretrain.batch_size == 0 {
            config_bail!("batch sizes must be positive");
        }
        if self.extractor.perceptual_channels.is_empty() {
            config_bail!("perceptual extractor needs at least one layer");
        }
        if self.preset == Preset::Face && self.loss.adv > 0.0 && self.loss.id > 0.0
            || self.preset == Preset::Scene && self.loss.id > 0.0 && self.loss.adv > 0.0
        {
            config_bail!("identity and adversarial terms are mutually exclusive presets");
        }
        Ok(())
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| LabError::Config(e.to_string()))
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: LabConfig = toml::from_str(s).map_err(|e| LabError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ladder_and_layer_count() {
        assert_eq!(GeneratorConfig::full().num_layers(), 18);
        assert_eq!(GeneratorConfig::desk().num_layers(), 10);
        let g = GeneratorConfig::desk();
        assert_eq!(g.resolutions(), vec![4, 8, 16, 32, 64]);
        assert_eq!(g.layer_resolution(1), 4);
        assert_eq!(g.layer_resolution(2), 4);
        assert_eq!(g.layer_resolution(7), 32);
        assert_eq!(g.layer_resolution(10), 64);
    }

    #[test]
    fn desk_channel_rule() {
        let g = GeneratorConfig::desk();
        assert_eq!(g.channels(4), 128);
        assert_eq!(g.channels(64), 128);
        let f = GeneratorConfig::full();
        assert_eq!(f.channels(16), 512);
        assert_eq!(f.channels(64), 128);
        assert_eq!(f.channels(1024), 8);
    }

    #[test]
    fn rejects_off_ladder_padding() {
        let g = GeneratorConfig {
            padding_scope: PaddingScope::UpTo(24),
            ..GeneratorConfig::desk()
        };
        assert!(g.validate().is_err());
        let g = GeneratorConfig {
            padding_scope: PaddingScope::UpTo(128),
            ..GeneratorConfig::desk()
        };
        assert!(g.validate().is_err());
        let g = GeneratorConfig {
            max_resolution: 48,
            ..GeneratorConfig::desk()
        };
        assert!(g.validate().is_err());
    }

    #[test]
    fn default_latent_split() {
        assert_eq!(EncoderConfig::full().split_for(18), vec![3, 4, 11]);
        assert_eq!(EncoderConfig::desk().split_for(10), vec![3, 4, 3]);
    }

    #[test]
    fn presets_follow_reported_weights() {
        let face = LossWeights::preset(Preset::Face);
        assert_eq!((face.id, face.adv), (0.1, 0.0));
        let scene = LossWeights::preset(Preset::Scene);
        assert_eq!((scene.id, scene.adv), (0.0, 0.03));
        for w in [face, scene] {
            assert_eq!((w.pix, w.per, w.reg, w.gamma), (1.0, 0.8, 0.003, 10.0));
        }
    }

    #[test]
    fn toml_round_trip_and_unknown_keys() {
        let cfg = LabConfig::tiny();
        let text = cfg.to_toml_string().unwrap();
        assert_eq!(LabConfig::from_toml_str(&text).unwrap(), cfg);
        let bad = format!("{text}\nbogus = 3\n");
        assert!(LabConfig::from_toml_str(&bad).is_err());
        let bad = text.replace("[generator]", "[generator]\nwidth = 3");
        assert!(LabConfig::from_toml_str(&bad).is_err());
    }

    #[test]
    fn scope_parsing() {
        assert_eq!("none".parse::<PaddingScope>().unwrap(), PaddingScope::None);
        assert_eq!("p0".parse::<PaddingScope>().unwrap(), PaddingScope::ConstOnly);
        assert_eq!("32".parse::<PaddingScope>().unwrap(), PaddingScope::UpTo(32));
        assert!("p7".parse::<PaddingScope>().is_err());
    }
}
