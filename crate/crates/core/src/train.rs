//! GAN pretraining, average latent, encoder training and evaluation.
//!
//! Every random draw of step `s` comes from a generator seeded by
//! `(run seed, purpose, s)`, so a run resumed from a checkpoint replays the
//! remaining steps exactly. Metrics go to a tab-separated `metrics.tsv`
//! (`step`, `name`, `value`); wall-clock timings are kept out of it.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{DType, Tensor};
use serde::Serialize;

use crate::checkpoint::{self, derive_seed, GanState, DTYPE};
use crate::config::{LabConfig, PaddingScope};
use crate::critic::Discriminator;
use crate::data::{item_rng, BatchSampler, Dataset};
use crate::encoder::Encoder;
use crate::error::{LabError, Result};
use crate::extractors::{FeatureExtractor, RandomConvPyramid, RandomEmbedder};
use crate::generator::Generator;
use crate::losses::{self, LossParts};
use crate::ops;
use crate::optim::{Adam, AdamConfig};

pub const METRICS_FILE: &str = "metrics.tsv";

/// Append-only `step<TAB>name<TAB>value` log.
pub struct MetricsLog {
    out: BufWriter<File>,
    path: PathBuf,
}

impl MetricsLog {
    pub fn create(path: &Path, append: bool) -> Result<Self> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
        }
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(path)
            .map_err(|e| LabError::io(path, e))?;
        Ok(Self {
            out: BufWriter::new(file),
            path: path.to_path_buf(),
        })
    }

    pub fn record(&mut self, step: usize, name: &str, value: f64) -> Result<()> {
        writeln!(self.out, "{step}\t{name}\t{value:e}").map_err(|e| LabError::io(&self.path, e))?;
        self.out.flush().map_err(|e| LabError::io(&self.path, e))
    }
}

fn finite_or_diverged(step: usize, name: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(LabError::Diverged {
            step,
            message: format!("{name} is {v}"),
        })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PretrainSummary {
    pub steps: usize,
    pub first_score_gap: f64,
    pub last_score_gap: f64,
    pub generator_checksum: String,
}

/// Trains generator and discriminator with the non-saturating logistic
/// loss and an R1 penalty; resumes from `out/checkpoint` when `resume`.
pub fn pretrain_generator(cfg: &LabConfig, out: &Path, resume: bool) -> Result<PretrainSummary> {
    cfg.validate()?;
    let pc = &cfg.pretrain;
    let g_cfg = &cfg.generator;
    let data = Dataset::load(&cfg.data, cfg.seed)?;
    if data.resolution != g_cfg.max_resolution {
        return Err(LabError::Config(format!(
            "data.resolution {} must equal generator.max_resolution {}",
            data.resolution, g_cfg.max_resolution
        )));
    }
    let split = data.split(cfg.data.split);
    let sampler = BatchSampler::new(split.train, pc.batch_size, derive_seed(cfg.seed, "pretrain/batches"))?;
    let ckpt_dir = out.join("checkpoint");
    let mut opt_g = Adam::new(AdamConfig::new(pc.lr_generator, pc.beta1, pc.beta2));
    let mut opt_d = Adam::new(AdamConfig::new(pc.lr_discriminator, pc.beta1, pc.beta2));
    let (generator, disc_store, start) = if resume && ckpt_dir.join(crate::archive::MANIFEST_FILE).exists() {
        let loaded = checkpoint::load_gan(&ckpt_dir)?;
        let mut stored = loaded.config.clone();
        stored.pretrain.steps = pc.steps;
        if &stored != cfg {
            return Err(LabError::Config("resume config differs from the checkpoint's".into()));
        }
        opt_g.restore(loaded.step, &loaded.optimiser_arrays("opt_g/"))?;
        opt_d.restore(loaded.step, &loaded.optimiser_arrays("opt_d/"))?;
        (loaded.generator(None, true)?, loaded.disc_store()?, loaded.step)
    } else {
        let generator = Generator::init(g_cfg, derive_seed(g_cfg.rng_seed, "generator"), DTYPE)?;
        let (store, _) = Discriminator::init(
            g_cfg.max_resolution,
            g_cfg.base_resolution,
            pc.disc_channels,
            derive_seed(cfg.seed, "discriminator"),
            DTYPE,
        )?;
        (generator, store, 0)
    };
    let (res, base) = (g_cfg.max_resolution, g_cfg.base_resolution);
    let d_train = Discriminator::from_store(&disc_store, res, base, true)?;
    let d_frozen = Discriminator::from_store(&disc_store, res, base, false)?;
    let mut log = MetricsLog::create(&out.join(METRICS_FILE), start > 0)?;
    let mut first_gap = None;
    let mut last_gap = f64::NAN;
    for step in start..pc.steps {
        let mut rng = item_rng(derive_seed(cfg.seed, "pretrain/noise"), step as u64);
        let real = data.batch(&sampler.indices(step))?;
        let fake = generator.generate(&generator.sample_z(pc.batch_size, &mut rng)?)?.detach();
        let d_loss = losses::logistic_discriminator_loss(&d_train, &real, &fake, pc.r1_gamma)?;
        let d_val = finite_or_diverged(step, "discriminator loss", ops::scalar(&d_loss.total)?)?;
        opt_d.step(&disc_store, &d_loss.total.backward()?)?;

        let fake = generator.generate(&generator.sample_z(pc.batch_size, &mut rng)?)?;
        let g_loss = losses::logistic_generator_loss(&d_frozen, &fake)?;
        let g_val = finite_or_diverged(step, "generator loss", ops::scalar(&g_loss)?)?;
        opt_g.step(generator.store(), &g_loss.backward()?)?;

        let gap = ops::scalar(&d_loss.score_gap)?;
        first_gap.get_or_insert(gap);
        last_gap = gap;
        let done = step + 1;
        if done == 1 || done % pc.log_every.max(1) == 0 {
            log.record(done, "d_loss", d_val)?;
            log.record(done, "g_loss", g_val)?;
            log.record(done, "score_gap", gap)?;
            log.record(done, "r1", ops::scalar(&d_loss.penalty)?)?;
            log::info!("pretrain step {done}: d {d_val:.4} g {g_val:.4} gap {gap:.4}");
        }
        if done % pc.checkpoint_every.max(1) == 0 || done == pc.steps {
            checkpoint::save_gan(
                &ckpt_dir,
                &GanState {
                    config: cfg,
                    generator: &generator,
                    disc: &disc_store,
                    opt_g: &opt_g,
                    opt_d: &opt_d,
                    step: done,
                },
            )?;
        }
    }
    if start >= pc.steps && !ckpt_dir.exists() {
        return Err(LabError::Config("pretrain.steps is zero".into()));
    }
    Ok(PretrainSummary {
        steps: pc.steps,
        first_score_gap: first_gap.unwrap_or(f64::NAN),
        last_score_gap: last_gap,
        generator_checksum: generator.store().checksum()?,
    })
}

/// Mean of `map_latent` over `n` seeded standard-normal samples, `(1, d)`.
pub fn compute_average_latent(generator: &Generator, n: usize, seed: u64) -> Result<Tensor> {
    if n == 0 {
        return Err(LabError::Config("average latent needs at least one sample".into()));
    }
    const CHUNK: usize = 1000;
    let d = generator.config().latent_dim;
    let mut acc = Tensor::zeros((1, d), DType::F64, &candle_core::Device::Cpu)?;
    let mut done = 0;
    let mut chunk_idx = 0u64;
    while done < n {
        let b = CHUNK.min(n - done);
        let mut rng = item_rng(seed, chunk_idx);
        let w = generator.map_latent(&generator.sample_z(b, &mut rng)?)?.detach();
        acc = (acc + w.to_dtype(DType::F64)?.sum_keepdim(0)?)?;
        done += b;
        chunk_idx += 1;
    }
    Ok((acc / n as f64)?.to_dtype(generator.dtype())?)
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub images: usize,
    pub mse: f64,
    pub perceptual: f64,
    pub seconds_per_image: f64,
}

/// Reconstruction metrics of `encoder` through `generator` on `images`.
pub fn evaluate(
    encoder: &Encoder,
    generator: &Generator,
    phi: &dyn FeatureExtractor,
    data: &Dataset,
    indices: &[usize],
    batch: usize,
) -> Result<EvalReport> {
    if indices.is_empty() {
        return Err(LabError::Dataset("evaluation split is empty".into()));
    }
    let start = Instant::now();
    let (mut se, mut per) = (0.0, 0.0);
    for chunk in indices.chunks(batch.max(1)) {
        let x = data.batch(chunk)?;
        let out = encoder.encode(&x)?;
        let pad = encoder.padding_set(&out, generator)?;
        let y = generator.synthesize(&out.w_plus, &pad)?;
        let n = chunk.len() as f64;
        se += ops::scalar(&(&x - &y)?.sqr()?.mean_all()?)? * n;
        per += ops::scalar(&losses::perceptual_loss(&x, &y, phi)?)? * n;
    }
    let count = indices.len();
    Ok(EvalReport {
        images: count,
        mse: se / count as f64,
        perceptual: per / count as f64,
        seconds_per_image: start.elapsed().as_secs_f64() / count as f64,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainSummary {
    pub steps: usize,
    pub initial_mse: f64,
    pub final_mse: f64,
    pub best_mse: f64,
    pub best_step: usize,
    pub generator_checksum: String,
}

/// Trains an encoder against the frozen generator from `gan_dir`. The
/// padding scope is taken from `cfg.generator`; all other generator
/// settings must match the checkpoint. Writes `out/best`, `out/final` and
/// the metrics log.
pub fn train_encoder(cfg: &LabConfig, gan_dir: &Path, out: &Path) -> Result<TrainSummary> {
    cfg.validate()?;
    let tc = &cfg.train;
    let gan = checkpoint::load_gan(gan_dir)?;
    let generator = gan.generator(Some(&cfg.generator), false)?;
    let checksum_before = generator.store().checksum()?;
    let data = Dataset::load(&cfg.data, cfg.seed)?;
    let split = data.split(cfg.data.split);
    let eval_idx: Vec<usize> = split.test.iter().copied().take(tc.eval_images).collect();
    let sampler = BatchSampler::new(split.train, tc.batch_size, derive_seed(cfg.seed, "encoder/batches"))?;

    let w_avg = compute_average_latent(&generator, tc.average_latent_samples, derive_seed(cfg.seed, "w_avg"))?;
    let encoder = Encoder::init(&cfg.encoder, &generator, &w_avg, derive_seed(cfg.seed, "encoder"))?;
    let mut opt = Adam::new(AdamConfig::new(tc.lr_encoder, tc.beta1, tc.beta2));
    let phi = RandomConvPyramid::from_config(&cfg.extractor, DTYPE)?;
    let psi = if cfg.loss.id > 0.0 {
        Some(RandomEmbedder::from_config(&cfg.extractor, DTYPE)?)
    } else {
        None
    };
    let adv = if cfg.loss.adv > 0.0 {
        let store = gan.disc_store()?;
        let g = &cfg.generator;
        let train = Discriminator::from_store(&store, g.max_resolution, g.base_resolution, true)?;
        let frozen = Discriminator::from_store(&store, g.max_resolution, g.base_resolution, false)?;
        let opt_d = Adam::new(AdamConfig::new(tc.lr_discriminator, tc.beta1, tc.beta2));
        Some((store, train, frozen, opt_d))
    } else {
        None
    };
    let mut adv = adv;

    std::fs::create_dir_all(out).map_err(|e| LabError::io(out, e))?;
    let mut log = MetricsLog::create(&out.join(METRICS_FILE), false)?;
    let meta = |step: usize| {
        vec![
            ("step", step.to_string()),
            ("gan_checkpoint", gan_dir.display().to_string()),
            ("generator_checksum", checksum_before.clone()),
        ]
    };
    let eval_now = |enc: &Encoder| -> Result<EvalReport> {
        let frozen = Encoder::from_store(
            &cfg.encoder,
            &cfg.generator,
            enc.store().clone(),
            enc.w_avg().clone(),
            false,
        )?;
        evaluate(&frozen, &generator, &phi, &data, &eval_idx, tc.batch_size)
    };

    let initial = eval_now(&encoder)?;
    log.record(0, "eval_mse", initial.mse)?;
    log.record(0, "eval_perceptual", initial.perceptual)?;
    let (mut best_mse, mut best_step, mut final_mse) = (initial.mse, 0, initial.mse);
    checkpoint::save_encoder(&out.join("best"), cfg, &encoder, &meta(0))?;

    for step in 0..tc.steps {
        let x = data.batch(&sampler.indices(step))?;
        let inv = encoder.encode(&x)?;
        let pad = encoder.padding_set(&inv, &generator)?;
        let y = generator.synthesize(&inv.w_plus, &pad)?;
        let w = &cfg.loss;
        let parts = LossParts {
            pix: (w.pix > 0.0).then(|| losses::pixel_loss(&x, &y)).transpose()?,
            per: (w.per > 0.0).then(|| losses::perceptual_loss(&x, &y, &phi)).transpose()?,
            id: match &psi {
                Some(psi) => Some(losses::identity_loss(&x, &y, psi)?),
                None => None,
            },
            adv: match &adv {
                Some((_, _, frozen, _)) => Some(losses::adversarial_loss_encoder(frozen, &y)?),
                None => None,
            },
            reg: (w.reg > 0.0)
                .then(|| losses::regularization_loss(&inv.w_plus, encoder.w_avg()))
                .transpose()?,
        };
        let total = losses::total_encoder_loss(&parts, w)?;
        let total_val = finite_or_diverged(step, "encoder loss", ops::scalar(&total)?)?;
        opt.step(encoder.store(), &total.backward()?)?;
        let done = step + 1;

        let mut d_val = None;
        if let Some((store, train, _, opt_d)) = adv.as_mut() {
            let d = losses::discriminator_loss(train, &x, &y.detach(), w.gamma, w.penalty_norm)?;
            d_val = Some(finite_or_diverged(step, "discriminator loss", ops::scalar(&d.total)?)?);
            opt_d.step(store, &d.total.backward()?)?;
        }

        let eval_due = done % tc.eval_every.max(1) == 0 || done == tc.steps;
        if eval_due {
            log.record(done, "loss_total", total_val)?;
            for (name, t) in parts.named() {
                log.record(done, &format!("loss_{name}"), ops::scalar(t)?)?;
            }
            if let Some(v) = d_val {
                log.record(done, "loss_disc", v)?;
            }
            let r = eval_now(&encoder)?;
            log.record(done, "eval_mse", r.mse)?;
            log.record(done, "eval_perceptual", r.perceptual)?;
            log::info!("encoder step {done}: loss {total_val:.4} eval mse {:.5}", r.mse);
            final_mse = r.mse;
            if r.mse < best_mse {
                best_mse = r.mse;
                best_step = done;
                checkpoint::save_encoder(&out.join("best"), cfg, &encoder, &meta(done))?;
            }
        }
        if done % tc.checkpoint_every.max(1) == 0 && done != tc.steps {
            checkpoint::save_encoder(&out.join("final"), cfg, &encoder, &meta(done))?;
        }
    }
    checkpoint::save_encoder(&out.join("final"), cfg, &encoder, &meta(tc.steps))?;
    let checksum_after = generator.store().checksum()?;
    if checksum_after != checksum_before {
        return Err(LabError::Numeric("generator weights changed during encoder training".into()));
    }
    Ok(TrainSummary {
        steps: tc.steps,
        initial_mse: initial.mse,
        final_mse,
        best_mse,
        best_step,
        generator_checksum: checksum_after,
    })
}

/// Padding scopes of the ablation ladder: none, constant input only, then
/// each resolution up to the configured maximum.
pub fn ablation_scopes(cfg: &LabConfig) -> Vec<PaddingScope> {
    let mut out = vec![PaddingScope::None, PaddingScope::ConstOnly];
    let pmax = cfg
        .generator
        .padding_scope
        .max_ring_resolution()
        .unwrap_or(cfg.generator.base_resolution);
    out.extend(
        cfg.generator
            .resolutions()
            .into_iter()
            .filter(|&r| r <= pmax)
            .map(PaddingScope::UpTo),
    );
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn average_latent_of_one_sample() {
        let cfg = crate::config::GeneratorConfig {
            latent_dim: 6,
            channel_max: 2,
            max_resolution: 8,
            mapping_layers: 2,
            padding_scope: PaddingScope::None,
            ..crate::config::GeneratorConfig::desk()
        };
        let g = Generator::init(&cfg, 1, DType::F64).unwrap();
        let avg = compute_average_latent(&g, 1, 5).unwrap();
        let mut rng = item_rng(5, 0);
        let w = g.map_latent(&g.sample_z(1, &mut rng).unwrap()).unwrap();
        assert!(ops::max_abs_diff(&avg, &w).unwrap() < 1e-12);
    }

    #[test]
    fn ablation_ladder() {
        let cfg = LabConfig::desk();
        let names: Vec<String> = ablation_scopes(&cfg).iter().map(|s| s.to_string()).collect();
        assert_eq!(names, vec!["none", "p0", "4", "8", "16", "32"]);
    }
}
