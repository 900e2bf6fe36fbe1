//! Image -> (W+ codes, coefficient map).
//!
//! Backbone: stem plus four stages of residual blocks with squeeze-excite,
//! each stage opening with a stride-2 block. The last three stages feed a
//! top-down feature pyramid. Every generator layer gets its own Map2Style
//! head (stride-2 convs down to 1x1, then a dense layer) on one pyramid
//! level: deepest level for the coarse layers, middle level next, finest
//! level for the rest. Heads predict offsets from the average code.
//!
//! Padding branch: residual SE blocks on the finest pyramid level not larger
//! than the largest replaced resolution, bilinearly resized to the
//! coefficient-map side. Per-target 1x1 heads then adapt channels; ring heads
//! start at zero and the constant-input head starts as a spatial bias equal
//! to the generator's constant input, so an untrained encoder reproduces the
//! generator's native padding.

use std::collections::BTreeMap;

use candle_core::{DType, Tensor};

use crate::config::{EncoderConfig, GeneratorConfig, PaddingScope};
use crate::error::{shape_bail, LabError, Result};
use crate::generator::Generator;
use crate::latent::LatentCodeWPlus;
use crate::nn::{Conv2d, Linear, SpecList, SqueezeExcite};
use crate::ops;
use crate::padding::{
    self, assemble_padding_set, ChannelProjection, CoefficientMap, PaddingSet, PaddingTarget,
};
use crate::params::{Init, ParamSpec, ParamStore};

const SLOPE: f64 = 0.2;

/// Output of one encoder pass.
#[derive(Debug, Clone)]
pub struct InversionOutput {
    pub w_plus: LatentCodeWPlus,
    /// Absent when the padding scope replaces nothing.
    pub cmap: Option<CoefficientMap>,
}

#[derive(Debug, Clone)]
struct ResBlock {
    conv0: Conv2d,
    conv1: Conv2d,
    se: SqueezeExcite,
    shortcut: Option<Conv2d>,
}

impl ResBlock {
    fn specs(s: &mut SpecList, name: &str, inp: usize, out: usize, stride: usize, se_reduction: usize) {
        s.conv(&format!("{name}/conv0"), inp, out, 3, true);
        s.conv(&format!("{name}/conv1"), out, out, 3, true);
        SqueezeExcite::specs(s, &format!("{name}/se"), out, se_reduction);
        if stride != 1 || inp != out {
            s.conv(&format!("{name}/shortcut"), inp, out, 1, false);
        }
    }

    fn load(store: &ParamStore, name: &str, stride: usize, trainable: bool) -> Result<Self> {
        let sc = format!("{name}/shortcut/weight");
        let shortcut = if store.names().any(|n| *n == sc) {
            Some(Conv2d::load(store, &format!("{name}/shortcut"), trainable, stride, 0)?)
        } else {
            None
        };
        Ok(Self {
            conv0: Conv2d::load(store, &format!("{name}/conv0"), trainable, 1, 1)?,
            conv1: Conv2d::load(store, &format!("{name}/conv1"), trainable, stride, 1)?,
            se: SqueezeExcite::load(store, &format!("{name}/se"), trainable)?,
            shortcut,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = ops::leaky_relu(&self.conv0.forward(x)?, SLOPE)?;
        let h = self.se.forward(&self.conv1.forward(&h)?)?;
        let skip = match &self.shortcut {
            Some(c) => c.forward(x)?,
            None => x.clone(),
        };
        Ok((h + skip)?)
    }
}

/// Bottleneck residual block of the padding branch: 1x1 -> 3x3 -> 3x3 -> SE.
#[derive(Debug, Clone)]
struct PadBlock {
    convs: [Conv2d; 3],
    se: SqueezeExcite,
}

impl PadBlock {
    fn specs(s: &mut SpecList, name: &str, c: usize, se_reduction: usize) {
        s.conv(&format!("{name}/conv0"), c, c, 1, true);
        s.conv(&format!("{name}/conv1"), c, c, 3, true);
        s.conv(&format!("{name}/conv2"), c, c, 3, true);
        SqueezeExcite::specs(s, &format!("{name}/se"), c, se_reduction);
    }

    fn load(store: &ParamStore, name: &str, trainable: bool) -> Result<Self> {
        Ok(Self {
            convs: [
                Conv2d::load(store, &format!("{name}/conv0"), trainable, 1, 0)?,
                Conv2d::load(store, &format!("{name}/conv1"), trainable, 1, 1)?,
                Conv2d::load(store, &format!("{name}/conv2"), trainable, 1, 1)?,
            ],
            se: SqueezeExcite::load(store, &format!("{name}/se"), trainable)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = ops::leaky_relu(&self.convs[0].forward(x)?, SLOPE)?;
        let h = ops::leaky_relu(&self.convs[1].forward(&h)?, SLOPE)?;
        let h = self.se.forward(&self.convs[2].forward(&h)?)?;
        Ok((h + x)?)
    }
}

#[derive(Debug, Clone)]
struct Map2Style {
    convs: Vec<Conv2d>,
    fc: Linear,
}

impl Map2Style {
    fn specs(s: &mut SpecList, name: &str, c: usize, side: usize, latent: usize) {
        for i in 0..side.trailing_zeros() as usize {
            s.conv(&format!("{name}/conv{i}"), c, c, 3, true);
        }
        s.linear(&format!("{name}/fc"), c, latent, 0.0, 1.0);
    }

    fn load(store: &ParamStore, name: &str, side: usize, trainable: bool) -> Result<Self> {
        let convs = (0..side.trailing_zeros() as usize)
            .map(|i| Conv2d::load(store, &format!("{name}/conv{i}"), trainable, 2, 1))
            .collect::<Result<_>>()?;
        Ok(Self {
            convs,
            fc: Linear::load(store, &format!("{name}/fc"), trainable, 1.0)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for c in &self.convs {
            h = ops::leaky_relu(&c.forward(&h)?, SLOPE)?;
        }
        self.fc.forward(&h.flatten_from(1)?)
    }
}

/// Per-target 1x1 channel heads applied to crops of the coefficient map.
#[derive(Debug, Clone)]
pub struct PaddingHeads {
    p0: Conv2d,
    p0_bias: Tensor,
    rings: BTreeMap<usize, Conv2d>,
}

impl ChannelProjection for PaddingHeads {
    fn project(&self, target: PaddingTarget, crop: &Tensor) -> Result<Tensor> {
        match target {
            PaddingTarget::ConstInput => {
                Ok(self.p0.forward(crop)?.broadcast_add(&self.p0_bias)?)
            }
            PaddingTarget::Ring(n) => self
                .rings
                .get(&n)
                .ok_or_else(|| LabError::PaddingMismatch(format!("no head for ring {n}")))?
                .forward(crop),
        }
    }
}

/// Pyramid side lengths for an input resolution: outputs of stages 2..4.
pub fn pyramid_sides(cfg: &EncoderConfig) -> [usize; 3] {
    let r = cfg.input_resolution;
    [r / 4, r / 8, r / 16]
}

/// Index into `pyramid_sides` of the level feeding the padding branch.
fn padding_level(enc: &EncoderConfig, gen: &GeneratorConfig) -> usize {
    let limit = match gen.padding_scope {
        PaddingScope::UpTo(p) => p,
        _ => gen.base_resolution,
    };
    let sides = pyramid_sides(enc);
    (0..3).find(|&i| sides[i] <= limit).unwrap_or(2)
}

#[derive(Debug, Clone)]
pub struct Encoder {
    enc: EncoderConfig,
    gen: GeneratorConfig,
    store: ParamStore,
    w_avg: Tensor,
    stem: Conv2d,
    stages: Vec<Vec<ResBlock>>,
    laterals: Vec<Conv2d>,
    styles: Vec<(usize, Map2Style)>,
    pad_blocks: Vec<PadBlock>,
    heads: Option<PaddingHeads>,
}

impl Encoder {
    /// Parameter declarations; `const_input` seeds the constant-input head.
    pub fn specs(enc: &EncoderConfig, gen: &GeneratorConfig, const_input: &[f64]) -> Result<Vec<ParamSpec>> {
        let mut s = SpecList::new();
        s.conv("enc/stem", 3, enc.stem_channels, 3, true);
        let mut prev = enc.stem_channels;
        for (i, (&c, &depth)) in enc.stage_channels.iter().zip(&enc.stage_depths).enumerate() {
            for j in 0..depth {
                let stride = if j == 0 { 2 } else { 1 };
                ResBlock::specs(&mut s, &format!("enc/stage{i}/block{j}"), prev, c, stride, enc.se_reduction);
                prev = c;
            }
        }
        for k in 0..3 {
            s.conv(&format!("enc/fpn/lateral{k}"), enc.stage_channels[k + 1], enc.pyramid_dim, 1, true);
        }
        let sides = pyramid_sides(enc);
        for (layer, level) in style_levels(enc, gen).into_iter().enumerate() {
            Map2Style::specs(
                &mut s,
                &format!("enc/style{layer}"),
                enc.pyramid_dim,
                sides[level],
                gen.latent_dim,
            );
        }
        if gen.padding_scope != PaddingScope::None {
            for b in 0..enc.padding_blocks {
                PadBlock::specs(&mut s, &format!("enc/pad/block{b}"), enc.pyramid_dim, enc.se_reduction);
            }
            let base = gen.base_resolution;
            let c0 = gen.channels(base);
            if const_input.len() != c0 * base * base {
                shape_bail!("constant input has {} values, expected {}", const_input.len(), c0 * base * base);
            }
            s.push(ParamSpec::new("enc/pad/head_p0/weight", &[c0, enc.pyramid_dim, 1, 1], Init::Zeros));
            s.push(ParamSpec::new(
                "enc/pad/head_p0/spatial_bias",
                &[1, c0, base, base],
                Init::Values(const_input.to_vec()),
            ));
            for n in gen.ring_resolutions() {
                s.zero_conv(&format!("enc/pad/head_ring{n}"), enc.pyramid_dim, gen.channels(n));
            }
        }
        Ok(s.into_vec())
    }

    /// Fresh encoder for `generator`, offsets measured from `w_avg (1, d)`.
    pub fn init(enc: &EncoderConfig, generator: &Generator, w_avg: &Tensor, seed: u64) -> Result<Self> {
        let gen = generator.config();
        enc.validate(gen.num_layers())?;
        let const_input = ops::to_f64_vec(&generator.const_input())?;
        let specs = Self::specs(enc, gen, &const_input)?;
        let store = ParamStore::initialize(&specs, seed, generator.dtype())?;
        Self::from_store(enc, gen, store, w_avg.clone(), true)
    }

    pub fn from_arrays(
        enc: &EncoderConfig,
        gen: &GeneratorConfig,
        arrays: &BTreeMap<String, Tensor>,
        w_avg: Tensor,
        dtype: DType,
        trainable: bool,
    ) -> Result<Self> {
        enc.validate(gen.num_layers())?;
        let base = gen.base_resolution;
        let placeholder = vec![0.0; gen.channels(base) * base * base];
        let specs = Self::specs(enc, gen, &placeholder)?;
        let store = ParamStore::from_arrays(&specs, arrays, dtype)?;
        Self::from_store(enc, gen, store, w_avg.to_dtype(dtype)?, trainable)
    }

    pub fn from_store(
        enc: &EncoderConfig,
        gen: &GeneratorConfig,
        store: ParamStore,
        w_avg: Tensor,
        trainable: bool,
    ) -> Result<Self> {
        let w_avg = w_avg.reshape((1, ()))?;
        if w_avg.dims()[1] != gen.latent_dim {
            shape_bail!("average code has {} entries, latent_dim is {}", w_avg.dims()[1], gen.latent_dim);
        }
        let stem = Conv2d::load(&store, "enc/stem", trainable, 1, 1)?;
        let stages = enc
            .stage_depths
            .iter()
            .enumerate()
            .map(|(i, &depth)| {
                (0..depth)
                    .map(|j| {
                        let stride = if j == 0 { 2 } else { 1 };
                        ResBlock::load(&store, &format!("enc/stage{i}/block{j}"), stride, trainable)
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<_>>()?;
        let laterals = (0..3)
            .map(|k| Conv2d::load(&store, &format!("enc/fpn/lateral{k}"), trainable, 1, 0))
            .collect::<Result<_>>()?;
        let sides = pyramid_sides(enc);
        let styles = style_levels(enc, gen)
            .into_iter()
            .enumerate()
            .map(|(layer, level)| {
                Ok((level, Map2Style::load(&store, &format!("enc/style{layer}"), sides[level], trainable)?))
            })
            .collect::<Result<_>>()?;
        let (pad_blocks, heads) = if gen.padding_scope != PaddingScope::None {
            let blocks = (0..enc.padding_blocks)
                .map(|b| PadBlock::load(&store, &format!("enc/pad/block{b}"), trainable))
                .collect::<Result<_>>()?;
            let p0 = Conv2d::load(&store, "enc/pad/head_p0", trainable, 1, 0)?;
            let p0_bias = store.get("enc/pad/head_p0/spatial_bias", trainable)?;
            let rings = gen
                .ring_resolutions()
                .into_iter()
                .map(|n| Ok((n, Conv2d::load(&store, &format!("enc/pad/head_ring{n}"), trainable, 1, 0)?)))
                .collect::<Result<_>>()?;
            (blocks, Some(PaddingHeads { p0, p0_bias, rings }))
        } else {
            (Vec::new(), None)
        };
        Ok(Self {
            enc: enc.clone(),
            gen: gen.clone(),
            store,
            w_avg,
            stem,
            stages,
            laterals,
            styles,
            pad_blocks,
            heads,
        })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.enc
    }

    pub fn generator_config(&self) -> &GeneratorConfig {
        &self.gen
    }

    pub fn w_avg(&self) -> &Tensor {
        &self.w_avg
    }

    pub fn heads(&self) -> Option<&PaddingHeads> {
        self.heads.as_ref()
    }

    fn prepare(&self, image: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = image.dims4()?;
        if c != 3 {
            shape_bail!("encoder expects RGB images, got {c} channels");
        }
        let r = self.enc.input_resolution;
        if (h, w) != (r, r) {
            ops::resize_bilinear(image, r, r)
        } else {
            Ok(image.clone())
        }
    }

    /// Three pyramid levels, finest first.
    pub fn backbone_features(&self, image: &Tensor) -> Result<[Tensor; 3]> {
        let mut h = ops::leaky_relu(&self.stem.forward(&self.prepare(image)?)?, SLOPE)?;
        let mut outs = Vec::with_capacity(4);
        for stage in &self.stages {
            for block in stage {
                h = block.forward(&h)?;
            }
            outs.push(h.clone());
        }
        let deep = self.laterals[2].forward(&outs[3])?;
        let mid = (self.laterals[1].forward(&outs[2])? + ops::upsample2x(&deep)?)?;
        let fine = (self.laterals[0].forward(&outs[1])? + ops::upsample2x(&mid)?)?;
        Ok([fine, mid, deep])
    }

    /// Coefficient map from the padding branch, or `None` without padding.
    pub fn extract_padding_coefficients(&self, pyramid: &[Tensor; 3]) -> Result<Option<CoefficientMap>> {
        if self.heads.is_none() {
            return Ok(None);
        }
        let mut h = pyramid[padding_level(&self.enc, &self.gen)].clone();
        for b in &self.pad_blocks {
            h = b.forward(&h)?;
        }
        let side = padding::coefficient_map_side(&self.gen);
        let h = ops::resize_bilinear(&h, side, side)?;
        Ok(Some(CoefficientMap::new(h, &self.gen)?))
    }

    pub fn encode(&self, image: &Tensor) -> Result<InversionOutput> {
        let pyramid = self.backbone_features(image)?;
        let batch = pyramid[0].dims()[0];
        let rows = self
            .styles
            .iter()
            .map(|(level, head)| Ok(head.forward(&pyramid[*level])?.broadcast_add(&self.w_avg)?.unsqueeze(1)?))
            .collect::<Result<Vec<_>>>()?;
        let w_plus = LatentCodeWPlus::with_layers(Tensor::cat(&rows, 1)?, self.gen.num_layers(), self.gen.latent_dim)?;
        debug_assert_eq!(w_plus.batch(), batch);
        let cmap = self.extract_padding_coefficients(&pyramid)?;
        Ok(InversionOutput { w_plus, cmap })
    }

    /// Padding set for `out`: assembled from its coefficient map, or the
    /// generator's native padding when the scope replaces nothing.
    pub fn padding_set(&self, out: &InversionOutput, generator: &Generator) -> Result<PaddingSet> {
        match (&out.cmap, &self.heads) {
            (Some(cmap), Some(heads)) => assemble_padding_set(cmap, &self.gen, heads),
            _ => generator.default_padding(),
        }
    }
}

/// Pyramid level index (0 finest) for each generator layer, in layer order.
pub fn style_levels(enc: &EncoderConfig, gen: &GeneratorConfig) -> Vec<usize> {
    let split = enc.split_for(gen.num_layers());
    // split is coarse first; the coarse group reads the deepest level (2)
    split
        .iter()
        .enumerate()
        .flat_map(|(g, &count)| std::iter::repeat(2 - g).take(count))
        .collect()
}
