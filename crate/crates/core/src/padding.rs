//! Index arithmetic of the padding space.
//!
//! A *ring* is the one-cell border of an `(N+2) x (N+2)` frame, i.e. the
//! padding a 3x3 convolution sees around an `N x N` feature. Rings are stored
//! as `(batch, channels, 4N+4)` in canonical order: top row left to right,
//! right column top to bottom (bottom-right corner included), bottom row
//! right to left, left column bottom to top.
//!
//! The encoder emits one coefficient map of side `P_max + 2`. Every ring is
//! cut from a centred crop of that same map (side `N + 2` for resolution
//! `N`) and the adapted constant input `p0` is its centred `base x base`
//! crop, giving the crop ladder 34 -> 18 -> 10 -> 6 -> 4 for `P_max = 32`.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor};

use crate::config::{GeneratorConfig, PaddingScope};
use crate::error::{shape_bail, LabError, Result};

/// Number of border cells of an `(N+2) x (N+2)` frame.
pub fn ring_size(n: usize) -> Result<usize> {
    if n == 0 {
        shape_bail!("ring resolution must be positive");
    }
    Ok(4 * n + 4)
}

/// Frame cells `(row, col)` of the ring around an `n x n` feature, in
/// canonical order.
pub fn ring_positions(n: usize) -> Vec<(usize, usize)> {
    let side = n + 2;
    let last = side - 1;
    let mut out = Vec::with_capacity(4 * n + 4);
    // Walk clockwise, turning at each corner.
    let (mut r, mut c) = (0usize, 0usize);
    let steps: [(isize, isize); 4] = [(0, 1), (1, 0), (0, -1), (-1, 0)];
    for (dir, &(dr, dc)) in steps.iter().enumerate() {
        let len = if dir == 3 { last - 1 } else { last };
        for _ in 0..len {
            out.push((r, c));
            r = (r as isize + dr) as usize;
            c = (c as isize + dc) as usize;
        }
    }
    // Close the walk: the top-left corner was visited first, so the last leg
    // stops one short and the final cell is pushed here.
    out.push((r, c));
    out
}

fn frame_gather_index(n: usize) -> Vec<u32> {
    let side = n + 2;
    let ring_len = 4 * n + 4;
    let mut idx = vec![u32::MAX; side * side];
    for (k, (r, c)) in ring_positions(n).into_iter().enumerate() {
        idx[r * side + c] = k as u32;
    }
    for r in 0..n {
        for c in 0..n {
            idx[(r + 1) * side + (c + 1)] = (ring_len + r * n + c) as u32;
        }
    }
    idx
}

fn border_index(n: usize) -> Vec<u32> {
    let side = n + 2;
    ring_positions(n)
        .into_iter()
        .map(|(r, c)| (r * side + c) as u32)
        .collect()
}

/// A ring tensor `(batch, channels, 4N+4)` tagged with its resolution.
#[derive(Debug, Clone)]
pub struct Ring {
    pub values: Tensor,
    pub resolution: usize,
}

impl Ring {
    pub fn new(values: Tensor, resolution: usize) -> Result<Self> {
        let (_, _, len) = values.dims3()?;
        if len != ring_size(resolution)? {
            shape_bail!("ring for N={resolution} needs {} cells, got {len}", 4 * resolution + 4);
        }
        Ok(Self { values, resolution })
    }

    pub fn zeros(batch: usize, channels: usize, resolution: usize, dtype: DType) -> Result<Self> {
        let values = Tensor::zeros(
            (batch, channels, ring_size(resolution)?),
            dtype,
            &Device::Cpu,
        )?;
        Ok(Self { values, resolution })
    }
}

/// Border of a square frame `(batch, channels, S, S)` as a ring of `N = S - 2`.
pub fn extract_ring(frame: &Tensor) -> Result<Ring> {
    let (b, c, h, w) = frame.dims4()?;
    if h != w {
        shape_bail!("frame must be square, got {h}x{w}");
    }
    if h < 3 {
        shape_bail!("frame side must be at least 3, got {h}");
    }
    let n = h - 2;
    let idx = Tensor::from_vec(border_index(n), 4 * n + 4, frame.device())?;
    let values = frame.reshape((b, c, h * w))?.index_select(&idx, 2)?;
    Ring::new(values, n)
}

/// Pads `feature (batch, channels, N, N)` with `ring`, giving `N+2` sides.
pub fn apply_ring_padding(feature: &Tensor, ring: &Ring) -> Result<Tensor> {
    let (b, c, h, w) = feature.dims4()?;
    if h != w {
        shape_bail!("feature must be square, got {h}x{w}");
    }
    if ring.resolution != h {
        shape_bail!("ring is for N={}, feature is {h}x{h}", ring.resolution);
    }
    let (rb, rc, _) = ring.values.dims3()?;
    if rc != c {
        shape_bail!("ring has {rc} channels, feature has {c}");
    }
    let values = match (rb, b) {
        (x, y) if x == y => ring.values.clone(),
        (1, y) => ring.values.broadcast_as((y, c, 4 * h + 4))?.contiguous()?,
        _ => shape_bail!("ring batch {rb} does not match feature batch {b}"),
    };
    let side = h + 2;
    let joined = Tensor::cat(&[&values, &feature.reshape((b, c, h * w))?], 2)?;
    let idx = Tensor::from_vec(frame_gather_index(h), side * side, feature.device())?;
    Ok(joined.index_select(&idx, 2)?.reshape((b, c, side, side))?)
}

/// Centred square crop of side `side` from `(batch, channels, S, S)`.
pub fn center_crop(x: &Tensor, side: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if side > h || side > w {
        shape_bail!("cannot crop {side}x{side} out of {h}x{w}");
    }
    let top = (h - side) / 2;
    let left = (w - side) / 2;
    Ok(x.narrow(2, top, side)?.narrow(3, left, side)?)
}

/// Crop sides used for each ring, `(N, N + 2)`, largest first.
pub fn crop_ladder(cfg: &GeneratorConfig) -> Vec<(usize, usize)> {
    let mut out: Vec<_> = cfg.ring_resolutions().into_iter().map(|n| (n, n + 2)).collect();
    out.reverse();
    out
}

/// Padding indices that are replaced: `0` is the constant input, `2m-1` the
/// first convolution of the m-th resolution.
pub fn replaced_layer_indices(cfg: &GeneratorConfig) -> Vec<usize> {
    let mut out = Vec::new();
    if cfg.padding_scope.replaces_const() {
        out.push(0);
    }
    for r in cfg.ring_resolutions() {
        let m = (r / cfg.base_resolution).trailing_zeros() as usize + 1;
        out.push(2 * m - 1);
    }
    out
}

/// Side of the coefficient map the encoder must emit for this scope.
pub fn coefficient_map_side(cfg: &GeneratorConfig) -> usize {
    match cfg.padding_scope {
        PaddingScope::UpTo(pmax) => pmax + 2,
        PaddingScope::ConstOnly | PaddingScope::None => cfg.base_resolution,
    }
}

/// The encoder's spatial coefficient grid, `(batch, channels, S, S)`.
#[derive(Debug, Clone)]
pub struct CoefficientMap(Tensor);

impl CoefficientMap {
    pub fn new(grid: Tensor, cfg: &GeneratorConfig) -> Result<Self> {
        let (_, _, h, w) = grid.dims4()?;
        let side = coefficient_map_side(cfg);
        if h != side || w != side {
            shape_bail!("coefficient map must be {side}x{side}, got {h}x{w}");
        }
        Ok(Self(grid))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn side(&self) -> usize {
        self.0.dims()[2]
    }
}

/// What a crop of the coefficient map is turned into.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PaddingTarget {
    ConstInput,
    Ring(usize),
}

/// Per-target channel adaptation applied to crops of the coefficient map.
pub trait ChannelProjection {
    fn project(&self, target: PaddingTarget, crop: &Tensor) -> Result<Tensor>;
}

/// Passes crops through unchanged; only valid when channel counts agree.
pub struct IdentityProjection;

impl ChannelProjection for IdentityProjection {
    fn project(&self, _target: PaddingTarget, crop: &Tensor) -> Result<Tensor> {
        Ok(crop.clone())
    }
}

/// Cuts the coefficient map into the constant input and one ring per
/// replaced resolution. The projection is pointwise, so applying it to the
/// crop equals cropping the projected map.
pub fn assemble_padding_set(
    cmap: &CoefficientMap,
    cfg: &GeneratorConfig,
    heads: &dyn ChannelProjection,
) -> Result<PaddingSet> {
    let grid = cmap.tensor();
    let side = coefficient_map_side(cfg);
    if cmap.side() != side {
        shape_bail!("coefficient map side {} but scope needs {side}", cmap.side());
    }
    let p0 = heads.project(
        PaddingTarget::ConstInput,
        &center_crop(grid, cfg.base_resolution)?,
    )?;
    let mut rings = BTreeMap::new();
    for (n, crop_side) in crop_ladder(cfg) {
        let crop = center_crop(grid, crop_side)?;
        let frame = heads.project(PaddingTarget::Ring(n), &crop)?;
        rings.insert(n, extract_ring(&frame)?.values);
    }
    Ok(PaddingSet { p0, rings })
}

/// A point in padding space: the (adapted) constant input `p0` of shape
/// `(batch, C_base, base, base)` and one ring `(batch, C_N, 4N+4)` per
/// replaced resolution.
#[derive(Debug, Clone)]
pub struct PaddingSet {
    pub p0: Tensor,
    pub rings: BTreeMap<usize, Tensor>,
}

impl PaddingSet {
    pub fn batch(&self) -> usize {
        self.p0.dims()[0]
    }

    pub fn ring(&self, n: usize) -> Option<Ring> {
        self.rings.get(&n).map(|v| Ring {
            values: v.clone(),
            resolution: n,
        })
    }

    /// Checks shapes against the generator layout and replaced set.
    pub fn validate(&self, cfg: &GeneratorConfig) -> Result<()> {
        let (b, c, h, w) = self.p0.dims4()?;
        let base = cfg.base_resolution;
        if (c, h, w) != (cfg.channels(base), base, base) {
            return Err(LabError::PaddingMismatch(format!(
                "p0 has shape {:?}, expected [_, {}, {base}, {base}]",
                self.p0.dims(),
                cfg.channels(base)
            )));
        }
        let expected = cfg.ring_resolutions();
        let have: Vec<usize> = self.rings.keys().copied().collect();
        if have != expected {
            return Err(LabError::PaddingMismatch(format!(
                "rings present for {have:?}, replaced resolutions are {expected:?}"
            )));
        }
        for (&n, r) in &self.rings {
            let (rb, rc, len) = r.dims3()?;
            if rb != b || rc != cfg.channels(n) || len != 4 * n + 4 {
                return Err(LabError::PaddingMismatch(format!(
                    "ring {n} has shape {:?}, expected [{b}, {}, {}]",
                    r.dims(),
                    cfg.channels(n),
                    4 * n + 4
                )));
            }
        }
        Ok(())
    }

    fn zip_with(
        &self,
        other: &PaddingSet,
        f: impl Fn(&Tensor, &Tensor) -> candle_core::Result<Tensor>,
    ) -> Result<PaddingSet> {
        let ka: Vec<_> = self.rings.keys().collect();
        let kb: Vec<_> = other.rings.keys().collect();
        if ka != kb {
            return Err(LabError::PaddingMismatch(format!(
                "ring sets differ: {ka:?} vs {kb:?}"
            )));
        }
        let rings = self
            .rings
            .iter()
            .map(|(n, r)| Ok((*n, f(r, &other.rings[n])?)))
            .collect::<Result<_>>()?;
        Ok(PaddingSet {
            p0: f(&self.p0, &other.p0)?,
            rings,
        })
    }

    fn map(&self, f: impl Fn(&Tensor) -> candle_core::Result<Tensor>) -> Result<PaddingSet> {
        let rings = self
            .rings
            .iter()
            .map(|(n, r)| Ok((*n, f(r)?)))
            .collect::<Result<_>>()?;
        Ok(PaddingSet {
            p0: f(&self.p0)?,
            rings,
        })
    }

    pub fn add(&self, other: &PaddingSet) -> Result<PaddingSet> {
        self.zip_with(other, |a, b| a.add(b))
    }

    pub fn sub(&self, other: &PaddingSet) -> Result<PaddingSet> {
        self.zip_with(other, |a, b| a.sub(b))
    }

    pub fn scale(&self, s: f64) -> Result<PaddingSet> {
        self.map(|a| a.affine(s, 0.0))
    }

    /// `(1 - alpha) * self + alpha * other`; exact at both endpoints.
    pub fn lerp(&self, other: &PaddingSet, alpha: f64) -> Result<PaddingSet> {
        if alpha == 0.0 {
            return Ok(self.clone());
        }
        if alpha == 1.0 {
            return Ok(other.clone());
        }
        self.zip_with(other, |a, b| (a * (1.0 - alpha))? + (b * alpha)?)
    }

    pub fn detach(&self) -> PaddingSet {
        PaddingSet {
            p0: self.p0.detach(),
            rings: self.rings.iter().map(|(n, r)| (*n, r.detach())).collect(),
        }
    }

    /// Sample `i` of a batched set, keeping a batch axis of one.
    pub fn select(&self, i: usize) -> Result<PaddingSet> {
        self.map(|a| a.narrow(0, i, 1))
    }

    pub fn to_arrays(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        out.insert("p0".to_string(), self.p0.clone());
        for (n, r) in &self.rings {
            out.insert(format!("ring{n}"), r.clone());
        }
        out
    }

    pub fn from_arrays(arrays: &BTreeMap<String, Tensor>) -> Result<PaddingSet> {
        let p0 = arrays
            .get("p0")
            .cloned()
            .ok_or_else(|| LabError::Checkpoint("padding arrays lack p0".into()))?;
        let mut rings = BTreeMap::new();
        for (k, v) in arrays {
            if let Some(n) = k.strip_prefix("ring") {
                let n: usize = n
                    .parse()
                    .map_err(|_| LabError::Checkpoint(format!("bad ring key {k}")))?;
                rings.insert(n, v.clone());
            }
        }
        Ok(PaddingSet { p0, rings })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::{max_abs_diff, to_f64_vec};
    use proptest::prelude::*;

    /// Independent border enumerator: four explicit loops.
    fn oracle_border(n: usize) -> Vec<(usize, usize)> {
        let s = n + 2;
        let mut v = Vec::new();
        for c in 0..s {
            v.push((0, c));
        }
        for r in 1..s {
            v.push((r, s - 1));
        }
        for c in (0..s - 1).rev() {
            v.push((s - 1, c));
        }
        for r in (1..s - 1).rev() {
            v.push((r, 0));
        }
        v
    }

    fn numbered_frame(channels: usize, side: usize) -> Tensor {
        let n = channels * side * side;
        Tensor::arange(0f32, n as f32, &Device::Cpu)
            .unwrap()
            .reshape((1, channels, side, side))
            .unwrap()
    }

    #[test]
    fn ring_sizes() {
        assert_eq!(ring_size(4).unwrap(), 20);
        assert_eq!(ring_size(32).unwrap(), 132);
        assert_eq!(ring_size(16).unwrap(), 68);
        assert!(ring_size(0).is_err());
    }

    #[test]
    fn six_by_six_frame_border() {
        let ring = extract_ring(&numbered_frame(1, 6)).unwrap();
        let got: Vec<f64> = to_f64_vec(&ring.values).unwrap();
        let expected: Vec<f64> = oracle_border(4)
            .into_iter()
            .map(|(r, c)| (r * 6 + c) as f64)
            .collect();
        assert_eq!(got.len(), 20);
        assert_eq!(got, expected);
        assert_eq!(
            got,
            vec![
                0., 1., 2., 3., 4., 5., 11., 17., 23., 29., 35., 34., 33., 32., 31., 30., 24.,
                18., 12., 6.
            ]
        );
    }

    #[test]
    fn positions_match_oracle_on_ladder() {
        for n in [1, 2, 4, 8, 16, 32, 64] {
            assert_eq!(ring_positions(n), oracle_border(n), "N={n}");
        }
    }

    #[test]
    fn corner_of_averaging_kernel() {
        // constant feature c, constant ring r, 3x3 mean kernel: the corner
        // window covers 4 feature cells and 5 ring cells.
        let (c, r) = (0.9f64, -0.3f64);
        let feat = Tensor::full(c, (1, 1, 4, 4), &Device::Cpu).unwrap();
        let ring = Ring::new(Tensor::full(r, (1, 1, 20), &Device::Cpu).unwrap(), 4).unwrap();
        let framed = apply_ring_padding(&feat, &ring).unwrap();
        let k = Tensor::full(1.0 / 9.0, (1, 1, 3, 3), &Device::Cpu).unwrap();
        let out = crate::ops::conv2d(&framed, &k, None, 1, 0).unwrap();
        assert_eq!(out.dims(), &[1, 1, 4, 4]);
        let corner = to_f64_vec(&out).unwrap()[0];
        assert!((corner - (4.0 * c + 5.0 * r) / 9.0).abs() < 1e-12);
    }

    #[test]
    fn zero_ring_equals_zero_padding() {
        let feat = Tensor::randn(0f32, 1.0, (2, 3, 8, 8), &Device::Cpu).unwrap();
        let ring = Ring::zeros(2, 3, 8, DType::F32).unwrap();
        let a = apply_ring_padding(&feat, &ring).unwrap();
        let b = feat.pad_with_zeros(2, 1, 1).unwrap().pad_with_zeros(3, 1, 1).unwrap();
        assert_eq!(max_abs_diff(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn extract_rejects_non_square() {
        let t = Tensor::zeros((1, 1, 5, 6), DType::F32, &Device::Cpu).unwrap();
        assert!(extract_ring(&t).is_err());
    }

    #[test]
    fn apply_rejects_mismatch() {
        let feat = Tensor::zeros((1, 3, 8, 8), DType::F32, &Device::Cpu).unwrap();
        assert!(apply_ring_padding(&feat, &Ring::zeros(1, 3, 4, DType::F32).unwrap()).is_err());
        assert!(apply_ring_padding(&feat, &Ring::zeros(1, 2, 8, DType::F32).unwrap()).is_err());
    }

    #[test]
    fn replaced_indices_per_scope() {
        let mut g = GeneratorConfig::full();
        g.padding_scope = PaddingScope::UpTo(32);
        assert_eq!(replaced_layer_indices(&g), vec![0, 1, 3, 5, 7]);
        g.padding_scope = PaddingScope::UpTo(64);
        assert_eq!(replaced_layer_indices(&g), vec![0, 1, 3, 5, 7, 9]);
        g.padding_scope = PaddingScope::UpTo(8);
        assert_eq!(replaced_layer_indices(&g), vec![0, 1, 3]);
        g.padding_scope = PaddingScope::UpTo(4);
        assert_eq!(replaced_layer_indices(&g), vec![0, 1]);
        g.padding_scope = PaddingScope::ConstOnly;
        assert_eq!(replaced_layer_indices(&g), vec![0]);
        g.padding_scope = PaddingScope::None;
        assert!(replaced_layer_indices(&g).is_empty());
    }

    #[test]
    fn crop_ladder_sides() {
        let g = GeneratorConfig::desk();
        assert_eq!(crop_ladder(&g), vec![(32, 34), (16, 18), (8, 10), (4, 6)]);
        assert_eq!(coefficient_map_side(&g), 34);
    }

    #[test]
    fn assembly_follows_nested_crops() {
        let g = GeneratorConfig {
            channel_schedule: Some(
                [4, 8, 16, 32, 64]
                    .iter()
                    .map(|r| (r.to_string(), 1))
                    .collect(),
            ),
            ..GeneratorConfig::desk()
        };
        let grid = numbered_frame(1, 34);
        let cmap = CoefficientMap::new(grid.clone(), &g).unwrap();
        let set = assemble_padding_set(&cmap, &g, &IdentityProjection).unwrap();
        set.validate(&g).unwrap();
        let cell = |r: usize, c: usize| (r * 34 + c) as f64;
        // ring 16 is the border of the central 18x18 patch (offset 8).
        let r16 = to_f64_vec(&set.rings[&16]).unwrap();
        let expected: Vec<f64> = oracle_border(16)
            .into_iter()
            .map(|(r, c)| cell(r + 8, c + 8))
            .collect();
        assert_eq!(r16, expected);
        let r32 = to_f64_vec(&set.rings[&32]).unwrap();
        let expected: Vec<f64> = oracle_border(32).into_iter().map(|(r, c)| cell(r, c)).collect();
        assert_eq!(r32, expected);
        let p0 = to_f64_vec(&set.p0).unwrap();
        let expected: Vec<f64> = (15..19)
            .flat_map(|r| (15..19).map(move |c| cell(r, c)))
            .collect();
        assert_eq!(p0, expected);
        // every cell is used at most once across the ladder
        let mut seen = std::collections::HashSet::new();
        for v in set.rings.values().flat_map(|r| to_f64_vec(r).unwrap()).chain(p0) {
            assert!(seen.insert(v as i64), "cell {v} reused");
        }
    }

    #[test]
    fn wrong_cmap_side_is_rejected() {
        let g = GeneratorConfig::desk();
        let t = Tensor::zeros((1, 4, 32, 32), DType::F32, &Device::Cpu).unwrap();
        assert!(CoefficientMap::new(t, &g).is_err());
    }

    #[test]
    fn lerp_endpoints_and_midpoint() {
        let mk = |v: f32| PaddingSet {
            p0: Tensor::full(v, (1, 2, 4, 4), &Device::Cpu).unwrap(),
            rings: [(4usize, Tensor::full(v, (1, 2, 20), &Device::Cpu).unwrap())]
                .into_iter()
                .collect(),
        };
        let (a, b) = (mk(1.0), mk(3.0));
        let mid = a.lerp(&b, 0.5).unwrap();
        assert!(to_f64_vec(&mid.rings[&4]).unwrap().iter().all(|v| *v == 2.0));
        assert_eq!(max_abs_diff(&a.lerp(&b, 0.0).unwrap().p0, &a.p0).unwrap(), 0.0);
        assert_eq!(max_abs_diff(&a.lerp(&b, 1.0).unwrap().p0, &b.p0).unwrap(), 0.0);
        let d = b.sub(&a).unwrap();
        assert_eq!(max_abs_diff(&a.add(&d).unwrap().p0, &b.p0).unwrap(), 0.0);
    }

    proptest! {
        #[test]
        fn ring_round_trips(n in 1usize..12, channels in 1usize..4, seed in 0u64..1000) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let feat: Vec<f32> = (0..channels * n * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let ring: Vec<f32> = (0..channels * (4 * n + 4)).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let feat = Tensor::from_vec(feat, (1, channels, n, n), &Device::Cpu).unwrap();
            let ring = Ring::new(Tensor::from_vec(ring, (1, channels, 4 * n + 4), &Device::Cpu).unwrap(), n).unwrap();
            let framed = apply_ring_padding(&feat, &ring).unwrap();
            prop_assert_eq!(framed.dims(), &[1, channels, n + 2, n + 2]);
            let back = extract_ring(&framed).unwrap();
            prop_assert_eq!(max_abs_diff(&back.values, &ring.values).unwrap(), 0.0);
            let centre = framed.narrow(2, 1, n).unwrap().narrow(3, 1, n).unwrap();
            prop_assert_eq!(max_abs_diff(&centre, &feat).unwrap(), 0.0);
        }
    }
}
