//! Loading and saving of GAN, encoder, inversion and direction archives.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Tensor};
use sha2::{Digest, Sha256};

use crate::archive::Archive;
use crate::config::{GeneratorConfig, LabConfig};
use crate::critic::Discriminator;
use crate::editing::{EditDirection, InversionResult};
use crate::encoder::Encoder;
use crate::error::{LabError, Result};
use crate::generator::Generator;
use crate::latent::LatentCodeWPlus;
use crate::optim::Adam;
use crate::padding::PaddingSet;
use crate::params::ParamStore;

pub const KIND_GAN: &str = "gan";
pub const KIND_ENCODER: &str = "encoder";
pub const KIND_INVERSION: &str = "inversion";
pub const KIND_DIRECTION: &str = "direction";

pub const DTYPE: DType = DType::F32;

/// Seed for a named purpose, derived from the run seed.
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    let d = Sha256::new()
        .chain_update(seed.to_le_bytes())
        .chain_update(tag.as_bytes())
        .finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

pub struct GanState<'a> {
    pub config: &'a LabConfig,
    pub generator: &'a Generator,
    pub disc: &'a ParamStore,
    pub opt_g: &'a Adam,
    pub opt_d: &'a Adam,
    pub step: usize,
}

pub fn save_gan(dir: &Path, s: &GanState) -> Result<()> {
    let mut a = Archive::new(KIND_GAN).with_config(s.config)?;
    a.set_meta("step", s.step);
    a.set_meta("generator_checksum", s.generator.store().checksum()?);
    a.extend_prefixed("", s.generator.store().to_arrays());
    a.extend_prefixed("", s.disc.to_arrays());
    a.extend_prefixed("opt_g/", s.opt_g.to_arrays());
    a.extend_prefixed("opt_d/", s.opt_d.to_arrays());
    a.save(dir)
}

pub struct LoadedGan {
    pub config: LabConfig,
    pub archive: Archive,
    pub step: usize,
}

pub fn load_gan(dir: &Path) -> Result<LoadedGan> {
    let archive = Archive::load(dir)?;
    archive.expect_kind(KIND_GAN)?;
    let config: LabConfig = archive.manifest.config_as()?;
    let step = archive
        .manifest
        .meta_value("step")?
        .parse()
        .map_err(|_| LabError::Checkpoint("bad step in manifest".into()))?;
    Ok(LoadedGan {
        config,
        archive,
        step,
    })
}

impl LoadedGan {
    /// Generator weights under `gen_cfg`, which may differ from the stored
    /// configuration only in its padding scope.
    pub fn generator(&self, gen_cfg: Option<&GeneratorConfig>, trainable: bool) -> Result<Generator> {
        let stored = &self.config.generator;
        let cfg = match gen_cfg {
            Some(c) => {
                let mut cmp = c.clone();
                cmp.padding_scope = stored.padding_scope;
                if &cmp != stored {
                    return Err(LabError::Config(
                        "generator settings differ from the GAN checkpoint (only padding_scope may change)"
                            .into(),
                    ));
                }
                c.clone()
            }
            None => stored.clone(),
        };
        Generator::from_arrays(&cfg, &self.archive.arrays, DTYPE, trainable)
    }

    pub fn disc_store(&self) -> Result<ParamStore> {
        let g = &self.config.generator;
        Discriminator::from_arrays(
            &self.archive.arrays,
            g.max_resolution,
            g.base_resolution,
            self.config.pretrain.disc_channels,
            DTYPE,
        )
    }

    pub fn optimiser_arrays(&self, prefix: &str) -> BTreeMap<String, Tensor> {
        self.archive.strip_prefix(prefix)
    }
}

pub fn save_encoder(dir: &Path, config: &LabConfig, enc: &Encoder, meta: &[(&str, String)]) -> Result<()> {
    let mut a = Archive::new(KIND_ENCODER).with_config(config)?;
    for (k, v) in meta {
        a.set_meta(k, v);
    }
    a.extend_prefixed("", enc.store().to_arrays());
    a.insert("w_avg", enc.w_avg().clone());
    a.save(dir)
}

pub struct LoadedEncoder {
    pub config: LabConfig,
    pub encoder: Encoder,
    pub archive_meta: BTreeMap<String, String>,
}

pub fn load_encoder(dir: &Path, trainable: bool) -> Result<LoadedEncoder> {
    let archive = Archive::load(dir)?;
    archive.expect_kind(KIND_ENCODER)?;
    let config: LabConfig = archive.manifest.config_as()?;
    let w_avg = archive.get("w_avg")?.clone();
    let encoder = Encoder::from_arrays(
        &config.encoder,
        &config.generator,
        &archive.arrays,
        w_avg,
        DTYPE,
        trainable,
    )?;
    Ok(LoadedEncoder {
        config,
        encoder,
        archive_meta: archive.manifest.meta.clone(),
    })
}

/// An inversion directory's archive: codes, the reconstruction they
/// produce, and the average latent of the encoder that made them.
pub fn save_inversion(
    dir: &Path,
    config: &LabConfig,
    inv: &InversionResult,
    w_avg: &Tensor,
    meta: &[(&str, String)],
) -> Result<()> {
    let mut a = Archive::new(KIND_INVERSION).with_config(config)?;
    a.set_meta("source", &inv.source);
    for (k, v) in meta {
        a.set_meta(k, v);
    }
    a.insert("w_plus", inv.w_plus.tensor().clone());
    a.insert("reconstruction", inv.reconstruction.clone());
    a.insert("w_avg", w_avg.clone());
    a.extend_prefixed("padding/", inv.padding.to_arrays());
    a.save(dir)
}

pub struct LoadedInversion {
    pub config: LabConfig,
    pub result: InversionResult,
    pub w_avg: Tensor,
    pub meta: BTreeMap<String, String>,
}

pub fn load_inversion(dir: &Path) -> Result<LoadedInversion> {
    let a = Archive::load(dir)?;
    a.expect_kind(KIND_INVERSION)?;
    let config: LabConfig = a.manifest.config_as()?;
    let result = InversionResult {
        w_plus: LatentCodeWPlus::new(a.get("w_plus")?.clone())?,
        padding: PaddingSet::from_arrays(&a.strip_prefix("padding/"))?,
        reconstruction: a.get("reconstruction")?.clone(),
        source: a.manifest.meta_value("source")?.to_string(),
    };
    result.padding.validate(&config.generator)?;
    Ok(LoadedInversion {
        config,
        result,
        w_avg: a.get("w_avg")?.clone(),
        meta: a.manifest.meta,
    })
}

pub fn save_direction(dir: &Path, config: &LabConfig, d: &EditDirection, meta: &[(&str, String)]) -> Result<()> {
    let mut a = Archive::new(KIND_DIRECTION).with_config(config)?;
    a.set_meta("label", &d.label);
    for (k, v) in meta {
        a.set_meta(k, v);
    }
    a.insert("n_s", d.n_s.tensor().clone());
    a.extend_prefixed("n_p/", d.n_p.to_arrays());
    a.save(dir)
}

pub fn load_direction(dir: &Path) -> Result<(LabConfig, EditDirection, BTreeMap<String, String>)> {
    let a = Archive::load(dir)?;
    a.expect_kind(KIND_DIRECTION)?;
    let config: LabConfig = a.manifest.config_as()?;
    let d = EditDirection {
        n_s: LatentCodeWPlus::new(a.get("n_s")?.clone())?,
        n_p: PaddingSet::from_arrays(&a.strip_prefix("n_p/"))?,
        label: a.manifest.meta_value("label")?.to_string(),
    };
    d.n_p.validate(&config.generator)?;
    Ok((config, d, a.manifest.meta))
}
