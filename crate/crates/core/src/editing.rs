//! Inversion, latent/padding recombination, interpolation and one-pair edit
//! directions over a frozen encoder and generator.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use candle_core::{DType, Device, Tensor};

use crate::encoder::Encoder;
use crate::error::{shape_bail, LabError, Result};
use crate::generator::Generator;
use crate::image_io;
use crate::latent::LatentCodeWPlus;
use crate::ops;
use crate::padding::PaddingSet;

/// Pixels whose largest channel change exceeds this count as edited.
pub const AUTO_MASK_THRESHOLD: f64 = 0.1;
/// Edited pixels are grown by this many pixels (square neighbourhood).
pub const AUTO_MASK_DILATION: usize = 2;

/// Codes of one inverted image together with its reconstruction, which is
/// always `generator.synthesize(w_plus, padding)`.
#[derive(Debug, Clone)]
pub struct InversionResult {
    pub w_plus: LatentCodeWPlus,
    pub padding: PaddingSet,
    /// `(batch, 3, R, R)`.
    pub reconstruction: Tensor,
    pub source: String,
}

impl InversionResult {
    /// Synthesizes the reconstruction from the given codes.
    pub fn from_codes(
        w_plus: LatentCodeWPlus,
        padding: PaddingSet,
        generator: &Generator,
        source: impl Into<String>,
    ) -> Result<Self> {
        let reconstruction = generator.synthesize(&w_plus, &padding)?;
        Ok(Self {
            w_plus,
            padding,
            reconstruction,
            source: source.into(),
        })
    }

    /// The generator's average image: `w_avg` on every layer with the
    /// native padding.
    pub fn average(generator: &Generator, w_avg: &Tensor) -> Result<Self> {
        let w = generator.broadcast_to_wplus(&w_avg.reshape((1, ()))?)?;
        Self::from_codes(w, generator.default_padding()?, generator, "average")
    }

    /// Mean squared error of the reconstruction against `image`.
    pub fn mse(&self, image: &Tensor) -> Result<f64> {
        let x = batched(image)?;
        let r = self.reconstruction.dims()[2];
        let x = if x.dims()[2..] != [r, r] {
            ops::resize_bilinear(&x, r, r)?
        } else {
            x
        };
        let v = ops::scalar(&(x - &self.reconstruction)?.sqr()?.mean_all()?)?;
        if !v.is_finite() {
            return Err(LabError::Numeric("reconstruction error is not finite".into()));
        }
        Ok(v)
    }

    fn check_compatible(&self, other: &Self) -> Result<()> {
        let (a, b) = (&self.w_plus, &other.w_plus);
        if (a.num_layers(), a.dim()) != (b.num_layers(), b.dim()) {
            return Err(LabError::Config(format!(
                "codes from different generators: {}x{} vs {}x{}",
                a.num_layers(),
                a.dim(),
                b.num_layers(),
                b.dim()
            )));
        }
        let ka: Vec<_> = self.padding.rings.keys().collect();
        let kb: Vec<_> = other.padding.rings.keys().collect();
        if ka != kb || self.padding.p0.dims()[1..] != other.padding.p0.dims()[1..] {
            return Err(LabError::Config(format!(
                "padding sets from different scopes: rings {ka:?} vs {kb:?}"
            )));
        }
        Ok(())
    }
}

fn batched(image: &Tensor) -> Result<Tensor> {
    match image.rank() {
        3 => Ok(image.unsqueeze(0)?),
        4 => Ok(image.clone()),
        r => shape_bail!("expected an image of rank 3 or 4, got rank {r}"),
    }
}

/// Encodes `image` (`(3, H, W)` or batched) and reconstructs it.
pub fn invert(image: &Tensor, encoder: &Encoder, generator: &Generator, source: &str) -> Result<InversionResult> {
    if encoder.generator_config() != generator.config() {
        return Err(LabError::Config("encoder was built for a different generator configuration".into()));
    }
    let out = encoder.encode(&batched(image)?)?;
    let padding = encoder.padding_set(&out, generator)?.detach();
    let w = out.w_plus.detach();
    w.ensure_finite()?;
    InversionResult::from_codes(w, padding, generator, source)
}

/// Latent codes of `a` rendered with the padding of `b`.
pub fn blend(a: &InversionResult, b: &InversionResult, generator: &Generator) -> Result<Tensor> {
    a.check_compatible(b)?;
    generator.synthesize(&a.w_plus, &b.padding)
}

/// What the non-interpolated space is held at.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Hold {
    /// The first endpoint's own codes.
    First,
    /// `w_avg` on every layer, or the native padding.
    Average,
}

/// Codes of an interpolation frame.
#[derive(Debug, Clone)]
pub struct Frame {
    pub w_plus: LatentCodeWPlus,
    pub padding: PaddingSet,
    pub image: Tensor,
}

/// Interpolates W+ codes from `a` to `b`; padding held per `hold`.
pub fn interpolate_latent(
    a: &InversionResult,
    b: &InversionResult,
    alpha: f64,
    hold: Hold,
    generator: &Generator,
    w_avg: &Tensor,
) -> Result<Frame> {
    check_alpha(alpha)?;
    a.check_compatible(b)?;
    let w_plus = a.w_plus.lerp(&b.w_plus, alpha)?;
    let padding = match hold {
        Hold::First => a.padding.clone(),
        Hold::Average => InversionResult::average(generator, w_avg)?.padding,
    };
    let image = generator.synthesize(&w_plus, &padding)?;
    Ok(Frame { w_plus, padding, image })
}

/// Interpolates padding from `a` to `b`; W+ codes held per `hold`.
pub fn interpolate_padding(
    a: &InversionResult,
    b: &InversionResult,
    alpha: f64,
    hold: Hold,
    generator: &Generator,
    w_avg: &Tensor,
) -> Result<Frame> {
    check_alpha(alpha)?;
    a.check_compatible(b)?;
    let padding = a.padding.lerp(&b.padding, alpha)?;
    let w_plus = match hold {
        Hold::First => a.w_plus.clone(),
        Hold::Average => InversionResult::average(generator, w_avg)?.w_plus,
    };
    let image = generator.synthesize(&w_plus, &padding)?;
    Ok(Frame { w_plus, padding, image })
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(LabError::Config(format!("alpha {alpha} is outside [0, 1]")));
    }
    Ok(())
}

/// Which code space an edit direction is applied in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EditSpace {
    Style,
    Padding,
}

impl FromStr for EditSpace {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "style" => Ok(Self::Style),
            "padding" => Ok(Self::Padding),
            other => Err(LabError::Config(format!(
                "unknown edit space {other:?} (expected style or padding)"
            ))),
        }
    }
}

impl fmt::Display for EditSpace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Style => "style",
            Self::Padding => "padding",
        })
    }
}

/// Difference of two inversions in both spaces.
#[derive(Debug, Clone)]
pub struct EditDirection {
    pub n_s: LatentCodeWPlus,
    pub n_p: PaddingSet,
    pub label: String,
}

impl EditDirection {
    /// `target - origin` in W+ and in padding space.
    pub fn between(origin: &InversionResult, target: &InversionResult, label: &str) -> Result<Self> {
        origin.check_compatible(target)?;
        if origin.w_plus.batch() != 1 || target.w_plus.batch() != 1 {
            shape_bail!("a direction is defined by a single pair of images");
        }
        Ok(Self {
            n_s: target.w_plus.sub(&origin.w_plus)?,
            n_p: target.padding.sub(&origin.padding)?,
            label: label.to_string(),
        })
    }

    pub fn negate(&self) -> Result<Self> {
        Ok(Self {
            n_s: self.n_s.scale(-1.0)?,
            n_p: self.n_p.scale(-1.0)?,
            label: self.label.clone(),
        })
    }
}

/// Direction from the inversion of `pair.0` to that of `pair.1`.
pub fn make_direction(
    pair: (&Tensor, &Tensor),
    encoder: &Encoder,
    generator: &Generator,
    label: &str,
) -> Result<EditDirection> {
    let a = invert(pair.0, encoder, generator, "A")?;
    let b = invert(pair.1, encoder, generator, "A'")?;
    EditDirection::between(&a, &b, label)
}

/// Moves one space of `inv` along `dir`; the other space is passed through
/// untouched. Strength zero returns the inversion's own codes.
pub fn apply_direction(
    inv: &InversionResult,
    dir: &EditDirection,
    strength: f64,
    space: EditSpace,
    generator: &Generator,
) -> Result<Frame> {
    if !strength.is_finite() {
        return Err(LabError::Config(format!("strength {strength} is not finite")));
    }
    if (dir.n_s.num_layers(), dir.n_s.dim()) != (inv.w_plus.num_layers(), inv.w_plus.dim()) {
        shape_bail!("direction codes do not match the inversion's layout");
    }
    let (w_plus, padding) = match space {
        _ if strength == 0.0 => (inv.w_plus.clone(), inv.padding.clone()),
        EditSpace::Style => (
            LatentCodeWPlus::new(inv.w_plus.tensor().broadcast_add(&(dir.n_s.tensor() * strength)?)?)?,
            inv.padding.clone(),
        ),
        EditSpace::Padding => (inv.w_plus.clone(), broadcast_add_padding(&inv.padding, &dir.n_p.scale(strength)?)?),
    };
    if strength == 0.0 {
        return Ok(Frame {
            w_plus,
            padding,
            image: inv.reconstruction.clone(),
        });
    }
    let image = generator.synthesize(&w_plus, &padding)?;
    Ok(Frame { w_plus, padding, image })
}

fn broadcast_add_padding(p: &PaddingSet, d: &PaddingSet) -> Result<PaddingSet> {
    let ka: Vec<_> = p.rings.keys().collect();
    let kb: Vec<_> = d.rings.keys().collect();
    if ka != kb {
        return Err(LabError::PaddingMismatch(format!("ring sets differ: {ka:?} vs {kb:?}")));
    }
    Ok(PaddingSet {
        p0: p.p0.broadcast_add(&d.p0)?,
        rings: p
            .rings
            .iter()
            .map(|(n, r)| Ok((*n, r.broadcast_add(&d.rings[n])?)))
            .collect::<Result<_>>()?,
    })
}

/// `(H, W)` f32 mask of 1s, the shape of `image`'s spatial grid.
pub fn full_mask(h: usize, w: usize) -> Result<Tensor> {
    Ok(Tensor::ones((h, w), DType::F32, &Device::Cpu)?)
}

/// Non-edited region of a pair: 1 where no channel moves by more than
/// `threshold`, after growing the edited pixels by `dilation`.
pub fn auto_mask(a: &Tensor, a_edit: &Tensor, threshold: f64, dilation: usize) -> Result<Tensor> {
    let (a, b) = (batched(a)?, batched(a_edit)?);
    if a.dims() != b.dims() || a.dims()[0] != 1 {
        shape_bail!("pair images differ in shape: {:?} vs {:?}", a.dims(), b.dims());
    }
    let (_, _, h, w) = a.dims4()?;
    let diff = (a - b)?.abs()?.max(1)?.squeeze(0)?;
    let d = ops::to_f64_vec(&diff)?;
    let dl = dilation as isize;
    let mut mask = vec![1f32; h * w];
    for y in 0..h {
        for x in 0..w {
            if d[y * w + x] <= threshold {
                continue;
            }
            for dy in -dl..=dl {
                for dx in -dl..=dl {
                    let (yy, xx) = (y as isize + dy, x as isize + dx);
                    if (0..h as isize).contains(&yy) && (0..w as isize).contains(&xx) {
                        mask[yy as usize * w + xx as usize] = 0.0;
                    }
                }
            }
        }
    }
    Ok(Tensor::from_vec(mask, (h, w), &Device::Cpu)?)
}

/// MSE between two images over the pixels where `mask` is nonzero,
/// averaged over channels and batch.
pub fn non_edited_mse(recon: &Tensor, edited: &Tensor, mask: &Tensor) -> Result<f64> {
    let (r, e) = (batched(recon)?, batched(edited)?);
    if r.dims() != e.dims() {
        shape_bail!("images differ in shape: {:?} vs {:?}", r.dims(), e.dims());
    }
    let (b, c, h, w) = r.dims4()?;
    if mask.dims() != [h, w] {
        shape_bail!("mask has shape {:?}, expected [{h}, {w}]", mask.dims());
    }
    let m = mask.to_dtype(DType::F32)?.ne(0f32)?.to_dtype(DType::F32)?;
    let count = ops::scalar(&m.sum_all()?)?;
    if count == 0.0 {
        return Err(LabError::Shape("non-edited mask is empty".into()));
    }
    let se = (r - e)?.sqr()?.broadcast_mul(&m.reshape((1, 1, h, w))?)?.sum_all()?;
    Ok(ops::scalar(&se)? / (count * (b * c) as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct EditingFactor {
    pub mse_padding: f64,
    pub mse_style: f64,
    /// `mse_padding / mse_style`; infinite when the style edit is a no-op.
    pub ratio: f64,
}

/// Mean non-edited-region MSE of each sample's reconstruction against its
/// edit at strength one, in each space.
pub fn editing_factor(
    samples: &[InversionResult],
    dir: &EditDirection,
    mask: &Tensor,
    generator: &Generator,
) -> Result<EditingFactor> {
    if samples.is_empty() {
        return Err(LabError::Shape("editing factor needs at least one sample".into()));
    }
    let (mut mp, mut ms) = (0.0, 0.0);
    for s in samples {
        let p = apply_direction(s, dir, 1.0, EditSpace::Padding, generator)?;
        let st = apply_direction(s, dir, 1.0, EditSpace::Style, generator)?;
        mp += non_edited_mse(&s.reconstruction, &p.image, mask)?;
        ms += non_edited_mse(&s.reconstruction, &st.image, mask)?;
    }
    let n = samples.len() as f64;
    let (mse_padding, mse_style) = (mp / n, ms / n);
    Ok(EditingFactor {
        mse_padding,
        mse_style,
        ratio: mse_padding / mse_style,
    })
}

/// Tiles rows of images (each `(3, h, w)` or batch-one) into one PNG.
pub fn export_grid(rows: &[Vec<Tensor>], path: &Path) -> Result<()> {
    image_io::save_png(&image_io::tile_grid(rows)?, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{EncoderConfig, GeneratorConfig};
    use rand::SeedableRng;

    fn setup() -> (Generator, Encoder, Tensor) {
        let gcfg = GeneratorConfig::tiny();
        let g = Generator::init(&gcfg, 1, DType::F32).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let w_avg = g.map_latent(&g.sample_z(64, &mut rng).unwrap()).unwrap().mean(0).unwrap();
        let mut ecfg = EncoderConfig::tiny();
        ecfg.input_resolution = gcfg.max_resolution;
        let e = Encoder::init(&ecfg, &g, &w_avg, 2).unwrap();
        (g, e, w_avg)
    }

    fn inversions(g: &Generator, e: &Encoder) -> (InversionResult, InversionResult) {
        // perturb the cold-start encoder so inversions differ in both spaces
        let r = g.config().max_resolution;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let img = |rng: &mut rand_chacha::ChaCha8Rng| {
            let v: Vec<f32> = (0..3 * r * r).map(|_| rand::Rng::gen_range(rng, -1.0..1.0)).collect();
            Tensor::from_vec(v, (3, r, r), &Device::Cpu).unwrap()
        };
        let mut a = invert(&img(&mut rng), e, g, "a").unwrap();
        let mut b = invert(&img(&mut rng), e, g, "b").unwrap();
        let bump = |p: &PaddingSet, s: f64| p.map_for_test(|t| (t + s).unwrap());
        a.padding = bump(&a.padding, 0.3);
        b.padding = bump(&b.padding, -0.2);
        a = InversionResult::from_codes(a.w_plus, a.padding, g, "a").unwrap();
        b = InversionResult::from_codes(b.w_plus, b.padding, g, "b").unwrap();
        (a, b)
    }

    impl PaddingSet {
        fn map_for_test(&self, f: impl Fn(&Tensor) -> Tensor) -> PaddingSet {
            PaddingSet {
                p0: f(&self.p0),
                rings: self.rings.iter().map(|(n, r)| (*n, f(r))).collect(),
            }
        }
    }

    fn same(a: &Tensor, b: &Tensor) -> bool {
        a.dims() == b.dims() && ops::to_f64_vec(a).unwrap() == ops::to_f64_vec(b).unwrap()
    }

    fn same_padding(a: &PaddingSet, b: &PaddingSet) -> bool {
        same(&a.p0, &b.p0) && a.rings.keys().eq(b.rings.keys()) && a.rings.iter().all(|(n, r)| same(r, &b.rings[n]))
    }

    #[test]
    fn inversion_is_deterministic_and_consistent() {
        let (g, e, _) = setup();
        let (a, _) = inversions(&g, &e);
        let again = g.synthesize(&a.w_plus, &a.padding).unwrap();
        assert!(same(&again, &a.reconstruction));
        let img = a.reconstruction.squeeze(0).unwrap();
        let x = invert(&img, &e, &g, "x").unwrap();
        let y = invert(&img, &e, &g, "x").unwrap();
        assert!(same(&x.reconstruction, &y.reconstruction));
        assert!(x.mse(&img).unwrap().is_finite());
    }

    #[test]
    fn blend_identities() {
        let (g, e, _) = setup();
        let (a, b) = inversions(&g, &e);
        assert!(same(&blend(&a, &a, &g).unwrap(), &a.reconstruction));
        let ab = blend(&a, &b, &g).unwrap();
        let ba = blend(&b, &a, &g).unwrap();
        assert!(ops::max_abs_diff(&ab, &ba).unwrap() > 0.0);
    }

    #[test]
    fn interpolation_endpoints_and_midpoint() {
        let (g, e, w_avg) = setup();
        let (a, b) = inversions(&g, &e);
        for f in [interpolate_latent, interpolate_padding] {
            let start = f(&a, &b, 0.0, Hold::First, &g, &w_avg).unwrap();
            assert!(same(&start.image, &a.reconstruction));
            assert!(f(&a, &b, 1.5, Hold::First, &g, &w_avg).is_err());
        }
        let end = interpolate_latent(&a, &b, 1.0, Hold::First, &g, &w_avg).unwrap();
        assert!(same(end.w_plus.tensor(), b.w_plus.tensor()));
        assert!(same(&end.image, &blend(&b, &a, &g).unwrap()));
        let end = interpolate_padding(&a, &b, 1.0, Hold::First, &g, &w_avg).unwrap();
        assert!(same(&end.image, &blend(&a, &b, &g).unwrap()));

        let mid = interpolate_latent(&a, &b, 0.5, Hold::First, &g, &w_avg).unwrap();
        let expect = ((a.w_plus.tensor() + b.w_plus.tensor()).unwrap() / 2.0).unwrap();
        assert!(ops::max_abs_diff(mid.w_plus.tensor(), &expect).unwrap() < 1e-6);

        // average-image study: w_avg held, padding from native to b
        let avg = InversionResult::average(&g, &w_avg).unwrap();
        let f0 = interpolate_padding(&avg, &b, 0.0, Hold::Average, &g, &w_avg).unwrap();
        assert!(same(&f0.image, &avg.reconstruction));
        let f1 = interpolate_padding(&avg, &b, 1.0, Hold::Average, &g, &w_avg).unwrap();
        assert!(same_padding(&f1.padding, &b.padding));
        assert!(same(f1.w_plus.tensor(), avg.w_plus.tensor()));
    }

    #[test]
    fn direction_algebra() {
        let (g, e, _) = setup();
        let (a, b) = inversions(&g, &e);
        let zero = EditDirection::between(&a, &a, "none").unwrap();
        assert!(ops::to_f64_vec(zero.n_s.tensor()).unwrap().iter().all(|v| *v == 0.0));
        assert!(ops::to_f64_vec(&zero.n_p.p0).unwrap().iter().all(|v| *v == 0.0));

        let d = EditDirection::between(&a, &b, "ab").unwrap();
        let back = EditDirection::between(&b, &a, "ba").unwrap();
        assert!(same(d.negate().unwrap().n_s.tensor(), back.n_s.tensor()));
        assert!(same_padding(&d.negate().unwrap().n_p, &back.n_p));

        for space in [EditSpace::Style, EditSpace::Padding] {
            let z = apply_direction(&a, &d, 0.0, space, &g).unwrap();
            assert!(same(&z.image, &a.reconstruction));
        }
        let s = apply_direction(&a, &d, 1.0, EditSpace::Style, &g).unwrap();
        assert!(same_padding(&s.padding, &a.padding));
        assert!(ops::max_abs_diff(s.w_plus.tensor(), b.w_plus.tensor()).unwrap() < 1e-5);
        let p = apply_direction(&a, &d, 1.0, EditSpace::Padding, &g).unwrap();
        assert!(same(p.w_plus.tensor(), a.w_plus.tensor()));
        assert!(ops::max_abs_diff(&p.padding.p0, &b.padding.p0).unwrap() < 1e-5);
        assert!("latent".parse::<EditSpace>().is_err());
    }

    #[test]
    fn masked_mse() {
        let a = Tensor::zeros((1, 3, 4, 4), DType::F32, &Device::Cpu).unwrap();
        let mut v = vec![0f32; 48];
        v[0] = 1.0; // channel 0, pixel (0, 0)
        let b = Tensor::from_vec(v, (1, 3, 4, 4), &Device::Cpu).unwrap();
        assert_eq!(non_edited_mse(&a, &a, &full_mask(4, 4).unwrap()).unwrap(), 0.0);
        let plain = ops::scalar(&(&a - &b).unwrap().sqr().unwrap().mean_all().unwrap()).unwrap();
        let got = non_edited_mse(&a, &b, &full_mask(4, 4).unwrap()).unwrap();
        assert!((got - plain).abs() < 1e-7, "{got} vs {plain}");
        let m = auto_mask(&a, &b, AUTO_MASK_THRESHOLD, 1).unwrap();
        let mv = ops::to_f64_vec(&m).unwrap();
        assert_eq!(mv.iter().filter(|x| **x == 0.0).count(), 4);
        assert_eq!(non_edited_mse(&a, &b, &m).unwrap(), 0.0);
        let empty = Tensor::zeros((4, 4), DType::F32, &Device::Cpu).unwrap();
        assert!(non_edited_mse(&a, &b, &empty).is_err());
    }
}
