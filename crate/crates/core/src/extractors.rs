//! Frozen feature extractors used by the reconstruction losses.
//!
//! Defaults are random, seeded convolutional stacks so that no external
//! weights are needed; trained networks can implement the same traits.

use candle_core::{DType, Tensor, D};

use crate::config::ExtractorConfig;
use crate::error::{shape_bail, Result};
use crate::nn::{Conv2d, Linear, SpecList};
use crate::ops;
use crate::params::ParamStore;

const SLOPE: f64 = 0.2;

/// Image -> stack of feature maps.
pub trait FeatureExtractor {
    fn features(&self, x: &Tensor) -> Result<Vec<Tensor>>;
}

/// Image -> embedding vector per sample, `(batch, k)`.
pub trait IdentityEmbedder {
    fn embed(&self, x: &Tensor) -> Result<Tensor>;
}

/// Conv pyramid: 3x3 conv + leaky ReLU per level, halving the resolution
/// before every level but the first.
#[derive(Debug, Clone)]
pub struct RandomConvPyramid {
    store: ParamStore,
    convs: Vec<Conv2d>,
}

impl RandomConvPyramid {
    pub fn new(channels: &[usize], seed: u64, dtype: DType) -> Result<Self> {
        let mut s = SpecList::new();
        let mut prev = 3;
        for (i, &c) in channels.iter().enumerate() {
            s.conv(&format!("phi/conv{i}"), prev, c, 3, true);
            prev = c;
        }
        let store = ParamStore::initialize(s.as_slice(), seed, dtype)?;
        let convs = (0..channels.len())
            .map(|i| Conv2d::load(&store, &format!("phi/conv{i}"), false, 1, 1))
            .collect::<Result<_>>()?;
        Ok(Self { store, convs })
    }

    pub fn from_config(cfg: &ExtractorConfig, dtype: DType) -> Result<Self> {
        Self::new(&cfg.perceptual_channels, cfg.perceptual_seed, dtype)
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }
}

impl FeatureExtractor for RandomConvPyramid {
    fn features(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut out = Vec::with_capacity(self.convs.len());
        let mut h = x.clone();
        for (i, conv) in self.convs.iter().enumerate() {
            if i > 0 {
                let (_, _, s, _) = h.dims4()?;
                if s >= 2 && s % 2 == 0 {
                    h = ops::downsample2x(&h)?;
                }
            }
            h = ops::leaky_relu(&conv.forward(&h)?, SLOPE)?;
            out.push(h.clone());
        }
        Ok(out)
    }
}

/// Strided conv stack, global average pool and a dense projection.
#[derive(Debug, Clone)]
pub struct RandomEmbedder {
    store: ParamStore,
    convs: Vec<Conv2d>,
    proj: Linear,
}

impl RandomEmbedder {
    pub fn new(dim: usize, seed: u64, dtype: DType) -> Result<Self> {
        let widths = [16, 32, 64];
        let mut s = SpecList::new();
        let mut prev = 3;
        for (i, &c) in widths.iter().enumerate() {
            s.conv(&format!("psi/conv{i}"), prev, c, 3, true);
            prev = c;
        }
        s.linear("psi/proj", prev, dim, 0.0, 1.0);
        let store = ParamStore::initialize(s.as_slice(), seed, dtype)?;
        let convs = (0..widths.len())
            .map(|i| Conv2d::load(&store, &format!("psi/conv{i}"), false, 2, 1))
            .collect::<Result<_>>()?;
        let proj = Linear::load(&store, "psi/proj", false, 1.0)?;
        Ok(Self { store, convs, proj })
    }

    pub fn from_config(cfg: &ExtractorConfig, dtype: DType) -> Result<Self> {
        Self::new(cfg.identity_dim, cfg.identity_seed, dtype)
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }
}

impl IdentityEmbedder for RandomEmbedder {
    fn embed(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, _, _) = x.dims4()?;
        if c != 3 {
            shape_bail!("embedder expects RGB input, got {c} channels");
        }
        let mut h = x.clone();
        for conv in &self.convs {
            h = ops::leaky_relu(&conv.forward(&h)?, SLOPE)?;
        }
        let pooled = h.flatten_from(2)?.mean(D::Minus1)?;
        self.proj.forward(&pooled)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn pyramid_levels_and_determinism() {
        let p = RandomConvPyramid::new(&[4, 4, 8, 8, 8], 1, DType::F32).unwrap();
        let x = Tensor::randn(0f32, 1.0, (2, 3, 16, 16), &Device::Cpu).unwrap();
        let a = p.features(&x).unwrap();
        let sides: Vec<usize> = a.iter().map(|f| f.dims()[2]).collect();
        assert_eq!(sides, vec![16, 8, 4, 2, 1]);
        let b = RandomConvPyramid::new(&[4, 4, 8, 8, 8], 1, DType::F32)
            .unwrap()
            .features(&x)
            .unwrap();
        for (u, v) in a.iter().zip(&b) {
            assert_eq!(ops::max_abs_diff(u, v).unwrap(), 0.0);
        }
    }

    #[test]
    fn embedder_shape() {
        let e = RandomEmbedder::new(10, 2, DType::F32).unwrap();
        let x = Tensor::randn(0f32, 1.0, (2, 3, 16, 16), &Device::Cpu).unwrap();
        assert_eq!(e.embed(&x).unwrap().dims(), &[2, 10]);
    }
}
