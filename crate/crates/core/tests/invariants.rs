use std::collections::{BTreeMap, HashSet};

use candle_core::{DType, Device, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use padlab::config::{GeneratorConfig, LabConfig, PaddingScope};
use padlab::generator::Generator;
use padlab::latent::LatentCodeWPlus;
use padlab::losses;
use padlab::ops::{max_abs_diff, to_f64_vec};
use padlab::padding::{self, CoefficientMap, IdentityProjection, PaddingSet};

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let v: Vec<f32> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

fn bits(t: &Tensor) -> Vec<u64> {
    to_f64_vec(t).unwrap().iter().map(|v| v.to_bits()).collect()
}

fn rand_padding(seed: u64) -> PaddingSet {
    let mut rings = BTreeMap::new();
    for (i, n) in [4usize, 8].into_iter().enumerate() {
        rings.insert(n, rand_tensor(&[2, 3, 4 * n + 4], seed * 7 + i as u64));
    }
    PaddingSet {
        p0: rand_tensor(&[2, 5, 4, 4], seed * 7 + 5),
        rings,
    }
}

fn padding_bits(p: &PaddingSet) -> Vec<Vec<u64>> {
    std::iter::once(&p.p0).chain(p.rings.values()).map(bits).collect()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 32, ..ProptestConfig::default() })]

    #[test]
    fn ring_walk_is_a_closed_clockwise_border(n in 1usize..40) {
        let cells = padding::ring_positions(n);
        let side = n + 2;
        prop_assert_eq!(cells.len(), 4 * n + 4);
        prop_assert_eq!(cells[0], (0, 0));
        let unique: HashSet<_> = cells.iter().collect();
        prop_assert_eq!(unique.len(), cells.len());
        for (k, &(r, c)) in cells.iter().enumerate() {
            prop_assert!(r == 0 || c == 0 || r == side - 1 || c == side - 1);
            let (nr, nc) = cells[(k + 1) % cells.len()];
            prop_assert_eq!(r.abs_diff(nr) + c.abs_diff(nc), 1);
        }
        // second cell is to the right, so the walk turns clockwise
        prop_assert_eq!(cells[1], (0, 1));
    }

    #[test]
    fn rings_are_borders_of_nested_centred_crops(pmax_log in 2u32..6, channels in 1usize..4, seed in 0u64..500) {
        let mut cfg = GeneratorConfig::tiny();
        cfg.padding_scope = PaddingScope::UpTo(1 << pmax_log);
        let side = padding::coefficient_map_side(&cfg);
        let grid = rand_tensor(&[1, channels, side, side], seed);
        let set = padding::assemble_padding_set(&CoefficientMap::new(grid.clone(), &cfg).unwrap(), &cfg, &IdentityProjection).unwrap();
        let ladder = padding::crop_ladder(&cfg);
        prop_assert_eq!(ladder.len(), set.rings.len());
        prop_assert_eq!(ladder[0].1, side);
        for w in ladder.windows(2) {
            prop_assert_eq!(w[0].0, 2 * w[1].0);
        }
        for (n, crop) in ladder {
            let want = padding::extract_ring(&padding::center_crop(&grid, crop).unwrap()).unwrap();
            prop_assert_eq!(bits(&set.rings[&n]), bits(&want.values));
        }
        prop_assert_eq!(bits(&set.p0), bits(&padding::center_crop(&grid, cfg.base_resolution).unwrap()));
    }

    #[test]
    fn latent_algebra_is_exact(seed in 0u64..1000, alpha in 0.0f64..1.0) {
        let a = LatentCodeWPlus::new(rand_tensor(&[2, 6, 8], seed)).unwrap();
        let b = LatentCodeWPlus::new(rand_tensor(&[2, 6, 8], seed + 1)).unwrap();
        prop_assert_eq!(bits(a.lerp(&b, 0.0).unwrap().tensor()), bits(a.tensor()));
        prop_assert_eq!(bits(a.lerp(&b, 1.0).unwrap().tensor()), bits(b.tensor()));
        let ab = a.sub(&b).unwrap();
        let ba = b.sub(&a).unwrap().scale(-1.0).unwrap();
        prop_assert_eq!(bits(ab.tensor()), bits(ba.tensor()));
        prop_assert_eq!(bits(a.add(&b).unwrap().tensor()), bits(b.add(&a).unwrap().tensor()));
        let mid = a.lerp(&b, alpha).unwrap();
        let lo = a.tensor().minimum(b.tensor()).unwrap();
        let hi = a.tensor().maximum(b.tensor()).unwrap();
        let inside = to_f64_vec(mid.tensor()).unwrap().iter().zip(to_f64_vec(&lo).unwrap()).zip(to_f64_vec(&hi).unwrap())
            .all(|((m, l), h)| *m >= l - 1e-6 && *m <= h + 1e-6);
        prop_assert!(inside);
    }

    #[test]
    fn padding_algebra_is_exact(seed in 0u64..1000) {
        let a = rand_padding(seed);
        let b = rand_padding(seed + 1);
        prop_assert_eq!(padding_bits(&a.lerp(&b, 0.0).unwrap()), padding_bits(&a));
        prop_assert_eq!(padding_bits(&a.lerp(&b, 1.0).unwrap()), padding_bits(&b));
        prop_assert_eq!(padding_bits(&a.sub(&b).unwrap()), padding_bits(&b.sub(&a).unwrap().scale(-1.0).unwrap()));
        let back = PaddingSet::from_arrays(&a.to_arrays()).unwrap();
        prop_assert_eq!(padding_bits(&back), padding_bits(&a));
        prop_assert_eq!(padding_bits(&a.select(1).unwrap()), padding_bits(&PaddingSet {
            p0: a.p0.narrow(0, 1, 1).unwrap(),
            rings: a.rings.iter().map(|(n, r)| (*n, r.narrow(0, 1, 1).unwrap())).collect(),
        }));
    }

    #[test]
    fn pixel_loss_is_a_symmetric_discrepancy(seed in 0u64..1000) {
        let x = rand_tensor(&[2, 3, 6, 6], seed);
        let y = rand_tensor(&[2, 3, 6, 6], seed + 1);
        let s = |t: Tensor| padlab::ops::scalar(&t).unwrap();
        prop_assert_eq!(s(losses::pixel_loss(&x, &x).unwrap()), 0.0);
        prop_assert_eq!(s(losses::pixel_loss(&x, &y).unwrap()), s(losses::pixel_loss(&y, &x).unwrap()));
        prop_assert!(s(losses::pixel_loss(&x, &y).unwrap()) > 0.0);
    }

    #[test]
    fn regularizer_vanishes_at_the_average_code(seed in 0u64..1000) {
        let w_bar = rand_tensor(&[1, 8], seed);
        let at = LatentCodeWPlus::broadcast(&w_bar.broadcast_as((3, 8)).unwrap().contiguous().unwrap(), 5).unwrap();
        let s = |t: Tensor| padlab::ops::scalar(&t).unwrap();
        prop_assert_eq!(s(losses::regularization_loss(&at, &w_bar).unwrap()), 0.0);
        let off = LatentCodeWPlus::new(rand_tensor(&[3, 5, 8], seed + 1)).unwrap();
        prop_assert!(s(losses::regularization_loss(&off, &w_bar).unwrap()) > 0.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 6, ..ProptestConfig::default() })]

    #[test]
    fn native_padding_reproduces_the_reference_generator(seed in 0u64..1_000_000, scale in 0.1f64..3.0) {
        let cfg = LabConfig::mini().generator;
        let g = Generator::init(&cfg, seed, DType::F32).unwrap();
        let w = (rand_tensor(&[2, g.num_layers(), cfg.latent_dim], seed ^ 0xabc) * scale).unwrap();
        let w = LatentCodeWPlus::new(w).unwrap();
        let native = g.default_padding().unwrap();
        let a = g.synthesize(&w, &native).unwrap();
        let b = g.synthesize_reference(&w).unwrap();
        prop_assert_eq!(max_abs_diff(&a, &b).unwrap(), 0.0);
    }
}
