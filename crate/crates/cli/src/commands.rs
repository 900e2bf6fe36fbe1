use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use serde_json::{json, Value};

use padlab::archive::MANIFEST_FILE;
use padlab::checkpoint::{self, DTYPE};
use padlab::config::{GeneratorConfig, LabConfig};
use padlab::data::Dataset;
use padlab::editing::{self, EditSpace, Hold, InversionResult, AUTO_MASK_DILATION, AUTO_MASK_THRESHOLD};
use padlab::extractors::RandomConvPyramid;
use padlab::generator::Generator;
use padlab::image_io;
use padlab::train::{self, MetricsLog, METRICS_FILE};

use crate::args::{Command, HoldArg, InterpSpace};
use crate::resolve::{output_dir, resolve_config, runtime, usage, write_snapshot, Failure};

type Res<T> = Result<T, Failure>;

const SUMMARY_FILE: &str = "summary.json";
const MASK_FILE: &str = "mask.png";
const INPUT_FILE: &str = "input.png";
const RECON_FILE: &str = "reconstruction.png";

pub fn dispatch(cmd: Command) -> Res<()> {
    let name = cmd.name();
    let common = cmd.common().clone();
    let out = output_dir(&common, name);
    let summary = match cmd {
        Command::PretrainGan { resume, .. } => {
            let cfg = resolve_config(&common, None)?;
            write_snapshot(&out, &cfg)?;
            let s = train::pretrain_generator(&cfg, &out, resume)?;
            to_json(&s)?
        }
        Command::TrainEncoder { gan, .. } => {
            let gan = gan_dir(&gan);
            let base = checkpoint::load_gan(&gan)?.config;
            let cfg = resolve_config(&common, Some(&base))?;
            write_snapshot(&out, &cfg)?;
            to_json(&train::train_encoder(&cfg, &gan, &out)?)?
        }
        Command::Invert { encoder, image, gan, .. } => invert(&common_cfg(&common, &encoder)?, &out, &encoder, &image, gan)?,
        Command::Blend { a, b, gan, .. } => {
            let (cfg, ia, ib) = pair(&common, &a, &b)?;
            write_snapshot(&out, &cfg)?;
            let g = generator_for(&ia, gan.as_deref())?;
            let img = editing::blend(&ia.result, &ib.result, &g)?;
            let res = InversionResult {
                w_plus: ia.result.w_plus.clone(),
                padding: ib.result.padding.clone(),
                reconstruction: img,
                source: format!("blend({}, {})", ia.result.source, ib.result.source),
            };
            save_inversion_dir(&out, &cfg, &res, &ia, &[])?;
            json!({ "a": a, "b": b })
        }
        Command::Interpolate {
            a, b, space, frames, hold, gan, ..
        } => {
            if frames < 2 {
                return Err(usage("--frames must be at least 2"));
            }
            let (cfg, ia, ib) = pair(&common, &a, &b)?;
            write_snapshot(&out, &cfg)?;
            let g = generator_for(&ia, gan.as_deref())?;
            let hold = match hold {
                HoldArg::First => Hold::First,
                HoldArg::Average => Hold::Average,
            };
            let mut row = Vec::with_capacity(frames);
            for k in 0..frames {
                let alpha = k as f64 / (frames - 1) as f64;
                let f = match space {
                    InterpSpace::Latent => editing::interpolate_latent(&ia.result, &ib.result, alpha, hold, &g, &ia.w_avg)?,
                    InterpSpace::Padding => editing::interpolate_padding(&ia.result, &ib.result, alpha, hold, &g, &ia.w_avg)?,
                };
                image_io::save_png(&f.image, &out.join(format!("frame_{k:02}.png")))?;
                row.push(f.image);
            }
            editing::export_grid(&[row], &out.join("grid.png"))?;
            json!({ "frames": frames })
        }
        Command::MakeDirection { a, a_edit, label, mask, .. } => {
            let (cfg, ia, ib) = pair(&common, &a, &a_edit)?;
            write_snapshot(&out, &cfg)?;
            let d = editing::EditDirection::between(&ia.result, &ib.result, &label)?;
            let mask = match mask {
                Some(p) => load_mask(&p)?,
                None => {
                    let (x, y) = (pair_image(&a, &ia.result)?, pair_image(&a_edit, &ib.result)?);
                    editing::auto_mask(&x, &y, AUTO_MASK_THRESHOLD, AUTO_MASK_DILATION)?
                }
            };
            checkpoint::save_direction(&out, &cfg, &d, &lineage(&ia))?;
            image_io::save_png(&((mask.unsqueeze(0)?.repeat((3, 1, 1))? * 2.0)? - 1.0)?, &out.join(MASK_FILE))?;
            let kept = padlab::ops::scalar(&mask.mean_all()?)?;
            json!({ "label": label, "non_edited_fraction": kept })
        }
        Command::ApplyDirection {
            inv, direction, strength, space, gan, ..
        } => {
            let space: EditSpace = space.parse()?;
            let ia = checkpoint::load_inversion(&inv)?;
            let cfg = resolve_config(&common, Some(&ia.config))?;
            fixed_model(&cfg, &ia.config)?;
            write_snapshot(&out, &cfg)?;
            let (dcfg, d, _) = checkpoint::load_direction(&direction)?;
            if dcfg.generator != ia.config.generator {
                return Err(usage("direction and inversion come from different generator settings"));
            }
            let g = generator_for(&ia, gan.as_deref())?;
            let f = editing::apply_direction(&ia.result, &d, strength, space, &g)?;
            let mut info = json!({ "space": space.to_string(), "strength": strength, "label": d.label });
            let mask_path = direction.join(MASK_FILE);
            if mask_path.exists() {
                let m = load_mask(&mask_path)?;
                info["non_edited_mse"] = json!(editing::non_edited_mse(&ia.result.reconstruction, &f.image, &m)?);
            }
            let res = InversionResult {
                w_plus: f.w_plus,
                padding: f.padding,
                reconstruction: f.image,
                source: format!("{}+{}", ia.result.source, space),
            };
            save_inversion_dir(&out, &cfg, &res, &ia, &[])?;
            info
        }
        Command::Evaluate {
            encoder, gan, direction, samples, ..
        } => evaluate(&common_cfg(&common, &encoder)?, &out, &encoder, gan, direction, samples)?,
        Command::ExportGrid { images, cols, name, .. } => {
            if cols == 0 {
                return Err(usage("--cols must be positive"));
            }
            let cfg = resolve_config(&common, None)?;
            write_snapshot(&out, &cfg)?;
            let tiles = images
                .iter()
                .map(|p| {
                    let file = if p.is_dir() { p.join(RECON_FILE) } else { p.clone() };
                    image_io::load_image(&file, None).map_err(Failure::from)
                })
                .collect::<Res<Vec<_>>>()?;
            let rows: Vec<Vec<Tensor>> = tiles.chunks(cols).map(<[Tensor]>::to_vec).collect();
            editing::export_grid(&rows, &out.join(&name))?;
            json!({ "images": images.len(), "file": name })
        }
    };
    let mut line = json!({ "status": "ok", "command": name, "out": out });
    if let (Value::Object(m), Value::Object(extra)) = (&mut line, summary) {
        m.extend(extra);
    }
    write_file(&out.join(SUMMARY_FILE), &format!("{line:#}\n"))?;
    println!("{line}");
    Ok(())
}

fn to_json<T: serde::Serialize>(v: &T) -> Res<Value> {
    serde_json::to_value(v).map_err(|e| runtime(e.to_string()))
}

fn write_file(path: &Path, text: &str) -> Res<()> {
    std::fs::write(path, text).map_err(|e| runtime(format!("cannot write {}: {e}", path.display())))
}

/// Accepts either a checkpoint directory or the run directory holding it.
fn gan_dir(p: &Path) -> PathBuf {
    let inner = p.join("checkpoint");
    if inner.join(MANIFEST_FILE).exists() {
        inner
    } else {
        p.to_path_buf()
    }
}

fn encoder_dir(p: &Path) -> PathBuf {
    let inner = p.join("best");
    if inner.join(MANIFEST_FILE).exists() {
        inner
    } else {
        p.to_path_buf()
    }
}

fn absolute(p: &Path) -> String {
    std::fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf()).display().to_string()
}

/// Model settings come from checkpoints; overrides may only touch the rest.
fn fixed_model(cfg: &LabConfig, stored: &LabConfig) -> Res<()> {
    if cfg.generator != stored.generator || cfg.encoder != stored.encoder {
        return Err(usage(
            "generator and encoder settings are fixed by the checkpoint and cannot be overridden here",
        ));
    }
    Ok(())
}

fn common_cfg(common: &crate::args::Common, encoder: &Path) -> Res<(LabConfig, checkpoint::LoadedEncoder)> {
    let enc = checkpoint::load_encoder(&encoder_dir(encoder), false)?;
    let cfg = resolve_config(common, Some(&enc.config))?;
    fixed_model(&cfg, &enc.config)?;
    Ok((cfg, enc))
}

fn load_generator(gan: &Path, gen_cfg: &GeneratorConfig, expected_checksum: Option<&str>) -> Res<Generator> {
    let loaded = checkpoint::load_gan(&gan_dir(gan))?;
    let g = loaded.generator(Some(gen_cfg), false)?;
    if let Some(want) = expected_checksum {
        let have = g.store().checksum()?;
        if have != want {
            return Err(runtime(format!(
                "generator at {} does not match the one the codes were made with",
                gan.display()
            )));
        }
    }
    Ok(g)
}

fn generator_for(inv: &checkpoint::LoadedInversion, gan: Option<&Path>) -> Res<Generator> {
    let recorded = inv.meta.get("gan_checkpoint").map(PathBuf::from);
    let path = gan
        .map(Path::to_path_buf)
        .or(recorded)
        .ok_or_else(|| usage("inversion does not record its GAN checkpoint; pass --gan"))?;
    load_generator(&path, &inv.config.generator, inv.meta.get("generator_checksum").map(String::as_str))
}

/// Provenance carried from a consumed inversion into derived outputs.
fn lineage(inv: &checkpoint::LoadedInversion) -> Vec<(&'static str, String)> {
    ["gan_checkpoint", "generator_checksum", "encoder"]
        .into_iter()
        .filter_map(|k| inv.meta.get(k).map(|v| (k, v.clone())))
        .collect()
}

fn save_inversion_dir(
    out: &Path,
    cfg: &LabConfig,
    res: &InversionResult,
    parent: &checkpoint::LoadedInversion,
    extra: &[(&str, String)],
) -> Res<()> {
    let mut meta = lineage(parent);
    meta.extend(extra.iter().map(|(k, v)| (*k, v.clone())));
    checkpoint::save_inversion(out, cfg, res, &parent.w_avg, &meta)?;
    image_io::save_png(&res.reconstruction, &out.join(RECON_FILE))?;
    Ok(())
}

fn pair(
    common: &crate::args::Common,
    a: &Path,
    b: &Path,
) -> Res<(LabConfig, checkpoint::LoadedInversion, checkpoint::LoadedInversion)> {
    let ia = checkpoint::load_inversion(a)?;
    let ib = checkpoint::load_inversion(b)?;
    if ia.config.generator != ib.config.generator || ia.meta.get("generator_checksum") != ib.meta.get("generator_checksum") {
        return Err(usage("the two inversions come from different generators"));
    }
    let cfg = resolve_config(common, Some(&ia.config))?;
    fixed_model(&cfg, &ia.config)?;
    Ok((cfg, ia, ib))
}

/// The input image stored next to an inversion, else its reconstruction.
fn pair_image(dir: &Path, res: &InversionResult) -> Res<Tensor> {
    let p = dir.join(INPUT_FILE);
    if p.exists() {
        let side = res.reconstruction.dims()[2];
        Ok(image_io::load_image(&p, Some(side))?)
    } else {
        Ok(res.reconstruction.squeeze(0)?)
    }
}

/// White (any channel above mid-grey) marks the non-edited region.
fn load_mask(path: &Path) -> Res<Tensor> {
    let img = image_io::load_image(path, None)?;
    Ok(img.max(0)?.gt(0.0)?.to_dtype(DType::F32)?)
}

fn invert(
    setup: &(LabConfig, checkpoint::LoadedEncoder),
    out: &Path,
    encoder: &Path,
    image: &Path,
    gan: Option<PathBuf>,
) -> Res<Value> {
    let (cfg, enc) = setup;
    write_snapshot(out, cfg)?;
    let gan = gan
        .or_else(|| enc.archive_meta.get("gan_checkpoint").map(PathBuf::from))
        .ok_or_else(|| usage("encoder does not record its GAN checkpoint; pass --gan"))?;
    let g = load_generator(
        &gan,
        &enc.config.generator,
        enc.archive_meta.get("generator_checksum").map(String::as_str),
    )?;
    let x = image_io::load_image(image, Some(cfg.generator.max_resolution))?;
    let res = editing::invert(&x, &enc.encoder, &g, &image.display().to_string())?;
    let mse = res.mse(&x)?;
    let meta = [
        ("gan_checkpoint", absolute(&gan_dir(&gan))),
        ("generator_checksum", g.store().checksum()?),
        ("encoder", absolute(&encoder_dir(encoder))),
        ("mse", format!("{mse:e}")),
    ];
    checkpoint::save_inversion(out, cfg, &res, enc.encoder.w_avg(), &meta)?;
    image_io::save_png(&res.reconstruction, &out.join(RECON_FILE))?;
    image_io::save_png(&x, &out.join(INPUT_FILE))?;
    log::info!("inverted {}: mse {mse:.5}", image.display());
    Ok(json!({ "image": image, "mse": mse }))
}

fn evaluate(
    setup: &(LabConfig, checkpoint::LoadedEncoder),
    out: &Path,
    encoder: &Path,
    gan: Option<PathBuf>,
    direction: Option<PathBuf>,
    samples: usize,
) -> Res<Value> {
    let (cfg, enc) = setup;
    write_snapshot(out, cfg)?;
    let gan = gan
        .or_else(|| enc.archive_meta.get("gan_checkpoint").map(PathBuf::from))
        .ok_or_else(|| usage("encoder does not record its GAN checkpoint; pass --gan"))?;
    let g = load_generator(
        &gan,
        &enc.config.generator,
        enc.archive_meta.get("generator_checksum").map(String::as_str),
    )?;
    let data = Dataset::load(&cfg.data, cfg.seed)?;
    let test = data.split(cfg.data.split).test;
    let idx: Vec<usize> = test.iter().copied().take(cfg.train.eval_images).collect();
    let phi = RandomConvPyramid::from_config(&cfg.extractor, DTYPE)?;
    let report = train::evaluate(&enc.encoder, &g, &phi, &data, &idx, cfg.train.batch_size)?;
    let mut log = MetricsLog::create(&out.join(METRICS_FILE), false)?;
    log.record(0, "eval_mse", report.mse)?;
    log.record(0, "eval_perceptual", report.perceptual)?;
    let mut info = json!({ "encoder": absolute(&encoder_dir(encoder)), "report": to_json(&report)? });
    if let Some(dir) = direction {
        let (dcfg, d, _) = checkpoint::load_direction(&dir)?;
        if dcfg.generator != enc.config.generator {
            return Err(usage("direction comes from different generator settings"));
        }
        let mask_path = dir.join(MASK_FILE);
        let side = cfg.generator.max_resolution;
        let mask = if mask_path.exists() {
            load_mask(&mask_path)?
        } else {
            editing::full_mask(side, side)?
        };
        let invs = test
            .iter()
            .take(samples.max(1))
            .map(|&i| editing::invert(&data.images[i], &enc.encoder, &g, &format!("test/{i}")))
            .collect::<padlab::Result<Vec<_>>>()?;
        let f = editing::editing_factor(&invs, &d, &mask, &g)?;
        log.record(0, "edit_mse_padding", f.mse_padding)?;
        log.record(0, "edit_mse_style", f.mse_style)?;
        info["editing_factor"] = to_json(&f)?;
        info["samples"] = json!(invs.len());
    }
    Ok(info)
}
