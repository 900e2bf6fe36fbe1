//! Style-based generator with replaceable constant input and paddings.
//!
//! Layout per resolution `N`: (x2 nearest upsample unless `N` is the base)
//! -> conv0 -> conv1, each conv followed by bias, leaky ReLU and AdaIN with
//! its own style row. Layer `2m-1` is conv0 and layer `2m` is conv1 of the
//! m-th resolution. A single 1x1 toRGB and `tanh` produce the image.
//!
//! When the padding scope covers `N`, conv0 reads its input padded by the
//! ring for `N`; every other conv pads with zeros.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::config::GeneratorConfig;
use crate::error::{shape_bail, LabError, Result};
use crate::latent::LatentCodeWPlus;
use crate::nn::{Conv2d, Linear, SpecList};
use crate::ops;
use crate::padding::{self, PaddingSet, Ring};
use crate::params::{Init, ParamSpec, ParamStore};

const MAPPING_LR_MUL: f64 = 0.01;
const SLOPE: f64 = 0.2;
const NORM_EPS: f64 = 1e-8;

/// One row of the layer table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerInfo {
    /// 1-based style layer index.
    pub index: usize,
    pub resolution: usize,
    /// 0 for the first conv of the resolution, 1 for the second.
    pub conv_position: usize,
    pub padding_replaced: bool,
}

pub fn layer_table(cfg: &GeneratorConfig) -> Vec<LayerInfo> {
    let rings = cfg.ring_resolutions();
    let mut out = Vec::new();
    for (m, &n) in cfg.resolutions().iter().enumerate() {
        for pos in 0..2 {
            out.push(LayerInfo {
                index: 2 * m + pos + 1,
                resolution: n,
                conv_position: pos,
                padding_replaced: pos == 0 && rings.contains(&n),
            });
        }
    }
    out
}

fn layer_name(n: usize, pos: usize) -> String {
    format!("gen/res{n}/conv{pos}")
}

#[derive(Debug, Clone)]
struct StyledConv {
    info: LayerInfo,
    upsample: bool,
    conv: Conv2d,
    style_scale: Linear,
    style_shift: Linear,
}

impl StyledConv {
    fn forward(&self, x: &Tensor, w: &Tensor, ring: Option<Ring>) -> Result<Tensor> {
        let x = if self.upsample {
            ops::upsample2x(x)?
        } else {
            x.clone()
        };
        let y = match ring {
            Some(ring) => self
                .conv
                .forward_with_padding(&padding::apply_ring_padding(&x, &ring)?, 0)?,
            None => self.conv.forward_with_padding(&x, 1)?,
        };
        let y = ops::instance_norm(&ops::leaky_relu(&y, SLOPE)?, NORM_EPS)?;
        let (b, c, _, _) = y.dims4()?;
        let scale = self.style_scale.forward(w)?.reshape((b, c, 1, 1))?;
        let shift = self.style_shift.forward(w)?.reshape((b, c, 1, 1))?;
        Ok(y.broadcast_mul(&scale)?.broadcast_add(&shift)?)
    }
}

#[derive(Debug, Clone)]
pub struct Generator {
    cfg: GeneratorConfig,
    store: ParamStore,
    mapping: Vec<Linear>,
    const_input: Tensor,
    layers: Vec<StyledConv>,
    to_rgb: Conv2d,
}

impl Generator {
    pub fn specs(cfg: &GeneratorConfig) -> Vec<ParamSpec> {
        let d = cfg.latent_dim;
        let mut s = SpecList::new();
        for i in 0..cfg.mapping_layers {
            s.linear(&format!("map/fc{i}"), d, d, 0.0, MAPPING_LR_MUL);
        }
        let base = cfg.base_resolution;
        s.push(ParamSpec::new(
            "gen/const_input",
            &[1, cfg.channels(base), base, base],
            Init::Const(1.0),
        ));
        let mut prev = cfg.channels(base);
        for info in layer_table(cfg) {
            let c = cfg.channels(info.resolution);
            let name = layer_name(info.resolution, info.conv_position);
            s.conv(&name, prev, c, 3, true);
            s.linear(&format!("{name}/style_scale"), d, c, 1.0, 1.0);
            s.linear(&format!("{name}/style_shift"), d, c, 0.0, 1.0);
            prev = c;
        }
        s.conv("gen/to_rgb", prev, 3, 1, true);
        s.into_vec()
    }

    pub fn init(cfg: &GeneratorConfig, seed: u64, dtype: DType) -> Result<Self> {
        cfg.validate()?;
        let store = ParamStore::initialize(&Self::specs(cfg), seed, dtype)?;
        Self::from_store(cfg, store, true)
    }

    pub fn from_arrays(
        cfg: &GeneratorConfig,
        arrays: &BTreeMap<String, Tensor>,
        dtype: DType,
        trainable: bool,
    ) -> Result<Self> {
        cfg.validate()?;
        let store = ParamStore::from_arrays(&Self::specs(cfg), arrays, dtype)?;
        Self::from_store(cfg, store, trainable)
    }

    /// Builds layer views over `store`; with `trainable = false` nothing
    /// produced by this generator requires gradients of its weights.
    pub fn from_store(cfg: &GeneratorConfig, store: ParamStore, trainable: bool) -> Result<Self> {
        let mapping = (0..cfg.mapping_layers)
            .map(|i| Linear::load(&store, &format!("map/fc{i}"), trainable, MAPPING_LR_MUL))
            .collect::<Result<_>>()?;
        let const_input = store.get("gen/const_input", trainable)?;
        let layers = layer_table(cfg)
            .into_iter()
            .map(|info| {
                let name = layer_name(info.resolution, info.conv_position);
                Ok(StyledConv {
                    info,
                    upsample: info.conv_position == 0 && info.resolution != cfg.base_resolution,
                    conv: Conv2d::load(&store, &name, trainable, 1, 1)?,
                    style_scale: Linear::load(&store, &format!("{name}/style_scale"), trainable, 1.0)?,
                    style_shift: Linear::load(&store, &format!("{name}/style_shift"), trainable, 1.0)?,
                })
            })
            .collect::<Result<_>>()?;
        let to_rgb = Conv2d::load(&store, "gen/to_rgb", trainable, 1, 0)?;
        Ok(Self {
            cfg: cfg.clone(),
            store,
            mapping,
            const_input,
            layers,
            to_rgb,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.const_input.dtype()
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Learned constant input `(1, C_base, base, base)`, detached.
    pub fn const_input(&self) -> Tensor {
        self.const_input.detach()
    }

    /// Standard-normal latents `(batch, d)` from `rng`.
    pub fn sample_z(&self, batch: usize, rng: &mut impl Rng) -> Result<Tensor> {
        let d = self.cfg.latent_dim;
        let v: Vec<f64> = (0..batch * d).map(|_| rng.sample(StandardNormal)).collect();
        Ok(Tensor::from_vec(v, (batch, d), &Device::Cpu)?.to_dtype(self.dtype())?)
    }

    /// Mapping network: pixel norm followed by the dense stack.
    pub fn map_latent(&self, z: &Tensor) -> Result<Tensor> {
        let (_, d) = z.dims2()?;
        if d != self.cfg.latent_dim {
            return Err(LabError::Config(format!(
                "latent has dimension {d}, generator expects {}",
                self.cfg.latent_dim
            )));
        }
        let norm = (z.sqr()?.mean_keepdim(1)? + NORM_EPS)?.sqrt()?;
        let mut x = z.broadcast_div(&norm)?;
        for fc in &self.mapping {
            x = ops::leaky_relu(&fc.forward(&x)?, SLOPE)?;
        }
        Ok(x)
    }

    pub fn broadcast_to_wplus(&self, w: &Tensor) -> Result<LatentCodeWPlus> {
        LatentCodeWPlus::broadcast(w, self.num_layers())
    }

    /// The generator's own operating point: trained constant input and zero
    /// rings for every replaced resolution.
    pub fn default_padding(&self) -> Result<PaddingSet> {
        let rings = self
            .cfg
            .ring_resolutions()
            .into_iter()
            .map(|n| {
                let ring = Ring::zeros(1, self.cfg.channels(n), n, self.dtype())?;
                Ok((n, ring.values))
            })
            .collect::<Result<_>>()?;
        Ok(PaddingSet {
            p0: self.const_input(),
            rings,
        })
    }

    fn check_wplus(&self, w_plus: &LatentCodeWPlus) -> Result<()> {
        let (l, d) = (w_plus.num_layers(), w_plus.dim());
        if l != self.num_layers() || d != self.cfg.latent_dim {
            shape_bail!(
                "W+ code is {l}x{d}, generator expects {}x{}",
                self.num_layers(),
                self.cfg.latent_dim
            );
        }
        w_plus.ensure_finite()
    }

    fn padding_batch_ok(&self, padding: &PaddingSet, batch: usize) -> Result<()> {
        let pb = padding.batch();
        if pb != 1 && pb != batch {
            return Err(LabError::PaddingMismatch(format!(
                "padding batch {pb} does not match code batch {batch}"
            )));
        }
        Ok(())
    }

    /// Renders `(batch, 3, R, R)` in `[-1, 1]` from W+ codes and a padding set
    /// that covers exactly the replaced resolutions. A padding batch of one
    /// is shared by every code.
    pub fn synthesize(&self, w_plus: &LatentCodeWPlus, padding: &PaddingSet) -> Result<Tensor> {
        self.check_wplus(w_plus)?;
        padding.validate(&self.cfg)?;
        let batch = w_plus.batch();
        self.padding_batch_ok(padding, batch)?;
        for t in std::iter::once(&padding.p0).chain(padding.rings.values()) {
            if !ops::all_finite(t)? {
                return Err(LabError::Numeric("padding set has non-finite entries".into()));
            }
        }
        let start = if self.cfg.padding_scope.replaces_const() {
            &padding.p0
        } else {
            &self.const_input
        };
        self.run(w_plus, start, |n| padding.ring(n))
    }

    /// The same network with plain zero padding everywhere and the learned
    /// constant input, using the convolution's built-in padding.
    pub fn synthesize_reference(&self, w_plus: &LatentCodeWPlus) -> Result<Tensor> {
        self.check_wplus(w_plus)?;
        self.run(w_plus, &self.const_input, |_| None)
    }

    /// `z -> w -> W+ -> image` at the default padding.
    pub fn generate(&self, z: &Tensor) -> Result<Tensor> {
        let w = self.map_latent(z)?;
        self.synthesize(&self.broadcast_to_wplus(&w)?, &self.default_padding()?)
    }

    fn run(
        &self,
        w_plus: &LatentCodeWPlus,
        start: &Tensor,
        ring_for: impl Fn(usize) -> Option<Ring>,
    ) -> Result<Tensor> {
        let batch = w_plus.batch();
        let (_, c, h, w) = start.dims4()?;
        let mut x = start.broadcast_as((batch, c, h, w))?.contiguous()?;
        for layer in &self.layers {
            let ring = if layer.info.padding_replaced {
                ring_for(layer.info.resolution)
            } else {
                None
            };
            x = layer.forward(&x, &w_plus.layer(layer.info.index - 1)?, ring)?;
        }
        Ok(self.to_rgb.forward(&x)?.tanh()?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::PaddingScope;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(scope: PaddingScope) -> GeneratorConfig {
        GeneratorConfig {
            max_resolution: 16,
            latent_dim: 8,
            channel_max: 4,
            mapping_layers: 2,
            padding_scope: scope,
            ..GeneratorConfig::desk()
        }
    }

    #[test]
    fn table_marks_first_convs() {
        let t = layer_table(&GeneratorConfig::desk());
        assert_eq!(t.len(), 10);
        let replaced: Vec<usize> = t.iter().filter(|l| l.padding_replaced).map(|l| l.index).collect();
        assert_eq!(replaced, vec![1, 3, 5, 7]);
        assert_eq!(t[8].resolution, 64);
        assert_eq!(layer_table(&GeneratorConfig::full()).len(), 18);
    }

    #[test]
    fn neutral_padding_matches_reference() {
        let cfg = tiny(PaddingScope::UpTo(16));
        let g = Generator::init(&cfg, 3, DType::F32).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let z = g.sample_z(4, &mut rng).unwrap();
        let wp = g.broadcast_to_wplus(&g.map_latent(&z).unwrap()).unwrap();
        let a = g.synthesize(&wp, &g.default_padding().unwrap()).unwrap();
        let b = g.synthesize_reference(&wp).unwrap();
        assert_eq!(a.dims(), &[4, 3, 16, 16]);
        assert_eq!(ops::max_abs_diff(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn missing_ring_is_rejected() {
        let cfg = tiny(PaddingScope::UpTo(8));
        let g = Generator::init(&cfg, 3, DType::F32).unwrap();
        let mut p = g.default_padding().unwrap();
        p.rings.remove(&8);
        let wp = g
            .broadcast_to_wplus(&Tensor::zeros((1, 8), DType::F32, &Device::Cpu).unwrap())
            .unwrap();
        assert!(matches!(g.synthesize(&wp, &p), Err(LabError::PaddingMismatch(_))));
        let mut p = g.default_padding().unwrap();
        p.rings
            .insert(16, Tensor::zeros((1, 4, 68), DType::F32, &Device::Cpu).unwrap());
        assert!(matches!(g.synthesize(&wp, &p), Err(LabError::PaddingMismatch(_))));
    }

    #[test]
    fn map_latent_rejects_wrong_dim() {
        let g = Generator::init(&tiny(PaddingScope::None), 3, DType::F32).unwrap();
        let z = Tensor::zeros((2, 7), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(g.map_latent(&z), Err(LabError::Config(_))));
    }
}
