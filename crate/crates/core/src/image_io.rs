//! Conversion between `[-1, 1]` tensors and 8-bit RGB files.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use image::{imageops::FilterType, RgbImage};

use crate::error::{shape_bail, LabError, Result};
use crate::ops;

/// `(3, h, w)` or `(1, 3, h, w)` in `[-1, 1]` -> RGB image (values clamped).
pub fn tensor_to_rgb(t: &Tensor) -> Result<RgbImage> {
    let t = if t.rank() == 4 { t.squeeze(0)? } else { t.clone() };
    let (c, h, w) = t.dims3()?;
    if c != 3 {
        shape_bail!("expected 3 channels, got {c}");
    }
    let v = ops::to_f64_vec(&t)?;
    let mut img = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px: [u8; 3] = std::array::from_fn(|ch| {
                let f = (v[ch * h * w + y * w + x] + 1.0) * 127.5;
                f.round().clamp(0.0, 255.0) as u8
            });
            img.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    Ok(img)
}

/// RGB image -> `(3, h, w)` f32 tensor in `[-1, 1]`.
pub fn rgb_to_tensor(img: &RgbImage) -> Result<Tensor> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut v = vec![0f32; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        for ch in 0..3 {
            v[ch * h * w + y as usize * w + x as usize] = px.0[ch] as f32 / 127.5 - 1.0;
        }
    }
    Ok(Tensor::from_vec(v, (3, h, w), &Device::Cpu)?)
}

pub fn save_png(t: &Tensor, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
    }
    tensor_to_rgb(t)?.save(path)?;
    Ok(())
}

/// Loads an image file, resized (bilinear) to `side x side` when needed.
pub fn load_image(path: &Path, side: Option<usize>) -> Result<Tensor> {
    let img = image::open(path)?.to_rgb8();
    let img = match side {
        Some(s) if (img.width() as usize, img.height() as usize) != (s, s) => {
            image::imageops::resize(&img, s as u32, s as u32, FilterType::Triangle)
        }
        _ => img,
    };
    rgb_to_tensor(&img)
}

/// Tiles `(3, h, w)` images row by row into one image with a 2-pixel gap.
pub fn tile_grid(rows: &[Vec<Tensor>]) -> Result<Tensor> {
    const GAP: usize = 2;
    let first = rows
        .iter()
        .flatten()
        .next()
        .ok_or_else(|| LabError::Shape("grid has no images".into()))?;
    let first = if first.rank() == 4 { first.squeeze(0)? } else { first.clone() };
    let (_, h, w) = first.dims3()?;
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let (gh, gw) = (rows.len() * (h + GAP) - GAP, cols * (w + GAP) - GAP);
    let mut canvas = vec![1f32; 3 * gh * gw];
    for (r, row) in rows.iter().enumerate() {
        for (c, img) in row.iter().enumerate() {
            let img = if img.rank() == 4 { img.squeeze(0)? } else { img.clone() };
            if img.dims() != [3, h, w] {
                shape_bail!("grid cell has shape {:?}, expected [3, {h}, {w}]", img.dims());
            }
            let v = img.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
            let (oy, ox) = (r * (h + GAP), c * (w + GAP));
            for ch in 0..3 {
                for y in 0..h {
                    let src = &v[ch * h * w + y * w..ch * h * w + (y + 1) * w];
                    let dst = ch * gh * gw + (oy + y) * gw + ox;
                    canvas[dst..dst + w].copy_from_slice(src);
                }
            }
        }
    }
    Ok(Tensor::from_vec(canvas, (3, gh, gw), &Device::Cpu)?)
}
