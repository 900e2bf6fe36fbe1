//! Datasets: procedurally generated shape scenes or a directory of images.

use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::DataConfig;
use crate::error::{LabError, Result};
use crate::image_io;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Disc,
    Square,
    Triangle,
}

/// A filled shape in unit coordinates (origin top-left).
#[derive(Debug, Clone, PartialEq)]
pub struct Shape {
    pub kind: ShapeKind,
    pub cx: f64,
    pub cy: f64,
    /// Half extent.
    pub size: f64,
    /// RGB in `[-1, 1]`.
    pub color: [f64; 3],
}

impl Shape {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        match self.kind {
            ShapeKind::Disc => dx * dx + dy * dy <= self.size * self.size,
            ShapeKind::Square => dx.abs() <= self.size && dy.abs() <= self.size,
            ShapeKind::Triangle => {
                // apex up, base at cy + size
                let t = (dy + self.size) / (2.0 * self.size);
                (0.0..=1.0).contains(&t) && dx.abs() <= t * self.size
            }
        }
    }
}

/// Vertical two-colour gradient background plus shapes drawn in order.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeScene {
    pub top: [f64; 3],
    pub bottom: [f64; 3],
    pub shapes: Vec<Shape>,
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - f * s), v * (1.0 - (1.0 - f) * s));
    let rgb = match i as i64 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    };
    rgb.map(|c| 2.0 * c - 1.0)
}

impl ShapeScene {
    pub fn random(rng: &mut impl Rng) -> Self {
        let bg_hue = rng.gen::<f64>();
        let top = hsv(bg_hue, rng.gen_range(0.1..0.4), rng.gen_range(0.2..0.5));
        let bottom = hsv((bg_hue + 0.1) % 1.0, rng.gen_range(0.1..0.4), rng.gen_range(0.1..0.4));
        let n = rng.gen_range(1..=3);
        let shapes = (0..n)
            .map(|_| Shape {
                kind: [ShapeKind::Disc, ShapeKind::Square, ShapeKind::Triangle][rng.gen_range(0..3)],
                cx: rng.gen_range(0.2..0.8),
                cy: rng.gen_range(0.2..0.8),
                size: rng.gen_range(0.1..0.22),
                color: hsv(rng.gen(), rng.gen_range(0.6..1.0), rng.gen_range(0.7..1.0)),
            })
            .collect();
        Self { top, bottom, shapes }
    }

    /// Renders `(3, side, side)` f32 in `[-1, 1]` with 2x2 supersampling.
    pub fn render(&self, side: usize) -> Result<Tensor> {
        let mut v = vec![0f32; 3 * side * side];
        let sub = [0.25, 0.75];
        for py in 0..side {
            for px in 0..side {
                let mut acc = [0f64; 3];
                for sy in sub {
                    for sx in sub {
                        let (x, y) = ((px as f64 + sx) / side as f64, (py as f64 + sy) / side as f64);
                        let mut c: [f64; 3] = std::array::from_fn(|k| self.top[k] * (1.0 - y) + self.bottom[k] * y);
                        for s in &self.shapes {
                            if s.contains(x, y) {
                                c = s.color;
                            }
                        }
                        for k in 0..3 {
                            acc[k] += c[k] / 4.0;
                        }
                    }
                }
                for k in 0..3 {
                    v[k * side * side + py * side + px] = acc[k] as f32;
                }
            }
        }
        Ok(Tensor::from_vec(v, (3, side, side), &Device::Cpu)?)
    }
}

/// RNG for item `index` of a seeded stream; independent of access order.
pub fn item_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

#[derive(Debug, Clone)]
pub struct Dataset {
    /// `(3, R, R)` images in `[-1, 1]`.
    pub images: Vec<Tensor>,
    /// Files that could not be decoded.
    pub skipped: usize,
    pub resolution: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl Dataset {
    pub fn load(cfg: &DataConfig, seed: u64) -> Result<Self> {
        let ds = match cfg.source.strip_prefix("synthetic:") {
            Some(name) => Self::synthetic(name, cfg.count, cfg.resolution, seed)?,
            None => Self::from_dir(Path::new(&cfg.source), cfg.resolution)?,
        };
        if ds.images.is_empty() {
            return Err(LabError::Dataset(format!("{} yielded no images", cfg.source)));
        }
        Ok(ds)
    }

    pub fn synthetic(name: &str, count: usize, resolution: usize, seed: u64) -> Result<Self> {
        let known = name == "shapes"
            || name
                .strip_prefix("shapes-")
                .is_some_and(|s| !s.is_empty() && s.bytes().all(|b| b.is_ascii_digit()));
        if !known {
            return Err(LabError::Dataset(format!("unknown synthetic dataset {name:?}")));
        }
        let images = (0..count)
            .map(|i| ShapeScene::random(&mut item_rng(seed, i as u64)).render(resolution))
            .collect::<Result<_>>()?;
        Ok(Self {
            images,
            skipped: 0,
            resolution,
        })
    }

    /// Every decodable image file in `dir` (sorted by name, not recursive).
    pub fn from_dir(dir: &Path, resolution: usize) -> Result<Self> {
        let rd = std::fs::read_dir(dir).map_err(|e| LabError::io(dir, e))?;
        let mut paths: Vec<PathBuf> = rd
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        paths.sort();
        let mut images = Vec::new();
        let mut skipped = 0;
        for p in paths {
            match image_io::load_image(&p, Some(resolution)) {
                Ok(t) => images.push(t),
                Err(e) => {
                    log::warn!("skipping {}: {e}", p.display());
                    skipped += 1;
                }
            }
        }
        if skipped > 0 {
            log::warn!("{skipped} unreadable file(s) skipped in {}", dir.display());
        }
        if images.is_empty() {
            return Err(LabError::Dataset(format!("no readable images in {}", dir.display())));
        }
        Ok(Self {
            images,
            skipped,
            resolution,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// First `a / (a + b)` of the items train, the rest test.
    pub fn split(&self, ratio: [usize; 2]) -> Split {
        let n = self.len();
        let total = ratio[0] + ratio[1];
        let n_train = if total == 0 { n } else { n * ratio[0] / total };
        Split {
            train: (0..n_train).collect(),
            test: (n_train..n).collect(),
        }
    }

    /// Stacks the selected images into `(batch, 3, R, R)`.
    pub fn batch(&self, indices: &[usize]) -> Result<Tensor> {
        let items: Vec<&Tensor> = indices
            .iter()
            .map(|&i| {
                self.images
                    .get(i)
                    .ok_or_else(|| LabError::Dataset(format!("index {i} out of range")))
            })
            .collect::<Result<_>>()?;
        Ok(Tensor::stack(&items, 0)?)
    }
}

/// Epoch-wise shuffled batches, a pure function of `(seed, step)`.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    pool: Vec<usize>,
    batch: usize,
    seed: u64,
}

impl BatchSampler {
    pub fn new(pool: Vec<usize>, batch: usize, seed: u64) -> Result<Self> {
        if pool.is_empty() || batch == 0 {
            return Err(LabError::Dataset("cannot sample batches from an empty pool".into()));
        }
        Ok(Self { pool, batch, seed })
    }

    fn epoch_order(&self, epoch: u64) -> Vec<usize> {
        let mut order = self.pool.clone();
        order.shuffle(&mut item_rng(self.seed, epoch));
        order
    }

    pub fn indices(&self, step: usize) -> Vec<usize> {
        let n = self.pool.len();
        (0..self.batch)
            .map(|k| {
                let flat = step * self.batch + k;
                self.epoch_order((flat / n) as u64)[flat % n]
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_mirrors_ratio() {
        let ds = Dataset {
            images: vec![Tensor::zeros(1, candle_core::DType::F32, &Device::Cpu).unwrap(); 1400],
            skipped: 0,
            resolution: 1,
        };
        let s = ds.split([13, 1]);
        assert_eq!((s.train.len(), s.test.len()), (1300, 100));
        assert!(s.train.iter().all(|i| !s.test.contains(i)));
    }

    #[test]
    fn synthetic_is_seeded() {
        let a = Dataset::synthetic("shapes-64", 4, 16, 7).unwrap();
        let b = Dataset::synthetic("shapes-64", 4, 16, 7).unwrap();
        let c = Dataset::synthetic("shapes-64", 4, 16, 8).unwrap();
        for i in 0..4 {
            assert_eq!(crate::ops::max_abs_diff(&a.images[i], &b.images[i]).unwrap(), 0.0);
        }
        assert!(crate::ops::max_abs_diff(&a.images[0], &c.images[0]).unwrap() > 0.0);
        assert!(Dataset::synthetic("noise", 1, 8, 0).is_err());
        let v = crate::ops::to_f64_vec(&a.images[0]).unwrap();
        assert!(v.iter().all(|x| (-1.0..=1.0).contains(x)));
    }

    #[test]
    fn sampler_covers_epoch_without_repeats() {
        let s = BatchSampler::new((10..20).collect(), 5, 3).unwrap();
        let mut seen: Vec<usize> = s.indices(0).into_iter().chain(s.indices(1)).collect();
        seen.sort();
        assert_eq!(seen, (10..20).collect::<Vec<_>>());
        assert_eq!(s.indices(7), s.indices(7));
    }

    #[test]
    fn directory_loader_skips_non_images() {
        let dir = tempfile::tempdir().unwrap();
        let img = ShapeScene::random(&mut item_rng(1, 0)).render(8).unwrap();
        image_io::save_png(&img, &dir.path().join("a.png")).unwrap();
        std::fs::write(dir.path().join("notes.txt"), "hello").unwrap();
        let ds = Dataset::from_dir(dir.path(), 4).unwrap();
        assert_eq!((ds.len(), ds.skipped), (1, 1));
        assert_eq!(ds.images[0].dims(), &[3, 4, 4]);
        let empty = tempfile::tempdir().unwrap();
        assert!(Dataset::from_dir(empty.path(), 4).is_err());
    }
}
