use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use uvtok_core::autodiff::{grad_check, Tape, Var};
use uvtok_core::encoder::LayerRange;
use uvtok_core::mask::{aggregate_uncertainty, binarize_mask, DeviationMaps, UncertaintyMap};
use uvtok_core::tensor::{layer_norm, softmax_rows};
use uvtok_core::{Result, Tensor};

const TOL: f64 = 1e-4;
const H: f64 = 1e-5;
const COORDS: usize = 24;

fn random(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// `Σ w ⊙ y` with a fixed random weight, so every output entry matters.
fn weigh(t: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let w = t.constant(random(t.value(y).shape(), -1.0, 1.0, seed ^ 0x5eed));
    let p = t.mul(y, w)?;
    t.sum(p)
}

fn check(x: &Tensor, seed: u64, f: impl Fn(&mut Tape, Var) -> Result<Var>) -> f64 {
    grad_check(
        |t, v| {
            let y = f(t, v)?;
            weigh(t, y, seed)
        },
        x,
        H,
        COORDS,
        seed,
    )
    .unwrap()
}

macro_rules! grad_ok {
    ($e:expr) => {{
        let err = $e;
        prop_assert!(err < TOL, "relative error {}", err);
    }};
}

fn shape() -> impl Strategy<Value = (usize, usize, u64)> {
    (1usize..=32, 1usize..=32, 0u64..1 << 32)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn grad_elementwise((r, c, seed) in shape()) {
        let x = random(&[r, c], -2.0, 2.0, seed);
        let other = random(&[r, c], -2.0, 2.0, seed + 1);
        grad_ok!(check(&x, seed, |t, v| { let o = t.constant(other.clone()); t.add(v, o) }));
        grad_ok!(check(&x, seed, |t, v| { let o = t.constant(other.clone()); t.sub(o, v) }));
        grad_ok!(check(&x, seed, |t, v| { let o = t.constant(other.clone()); t.mul(v, o) }));
        grad_ok!(check(&x, seed, |t, v| t.mul(v, v)));
        grad_ok!(check(&x, seed, |t, v| t.scale(v, -1.7)));
        grad_ok!(check(&x, seed, |t, v| t.gelu(v)));
    }

    #[test]
    fn grad_matmul_and_transpose((r, c, seed) in shape(), k in 1usize..=32) {
        let x = random(&[r, c], -2.0, 2.0, seed);
        let right = random(&[c, k], -1.0, 1.0, seed + 2);
        let left = random(&[k, r], -1.0, 1.0, seed + 3);
        grad_ok!(check(&x, seed, |t, v| { let w = t.constant(right.clone()); t.matmul(v, w) }));
        grad_ok!(check(&x, seed, |t, v| { let w = t.constant(left.clone()); t.matmul(w, v) }));
        grad_ok!(check(&x, seed, |t, v| t.transpose(v)));
        let row = random(&[c], -1.0, 1.0, seed + 4);
        grad_ok!(check(&row, seed, |t, v| { let base = t.constant(x.clone()); t.add_row(base, v) }));
    }

    #[test]
    fn grad_softmax_and_layer_norm((r, c, seed) in shape()) {
        let x = random(&[r, c], -3.0, 3.0, seed);
        grad_ok!(check(&x, seed, |t, v| t.softmax_rows(v)));
        prop_assume!(c >= 2);
        let gain = random(&[c], 0.5, 1.5, seed + 5);
        let bias = random(&[c], -0.5, 0.5, seed + 6);
        grad_ok!(check(&x, seed, |t, v| {
            let (g, b) = (t.constant(gain.clone()), t.constant(bias.clone()));
            t.layer_norm(v, g, b, 1e-5)
        }));
        grad_ok!(check(&gain, seed, |t, g| {
            let (xv, b) = (t.constant(x.clone()), t.constant(bias.clone()));
            t.layer_norm(xv, g, b, 1e-5)
        }));
    }

    #[test]
    fn grad_structural((r, c, seed) in shape()) {
        let x = random(&[r, c], -2.0, 2.0, seed);
        let target = random(&[r, c], -2.0, 2.0, seed + 7);
        grad_ok!(grad_check(|t, v| { let y = t.constant(target.clone()); t.mse(v, y) }, &x, H, COORDS, seed).unwrap());
        let start = (seed as usize) % c;
        let len = c - start;
        grad_ok!(check(&x, seed, |t, v| t.slice_cols(v, start, len)));
        grad_ok!(check(&x, seed, |t, v| { let o = t.constant(target.clone()); t.concat_cols(&[o, v, v]) }));
        grad_ok!(check(&x, seed, |t, v| { let o = t.constant(target.clone()); t.concat_rows(&[v, o]) }));
        let n = r * c;
        let idx: Vec<usize> = (0..n).map(|i| (i * 7 + seed as usize) % n).collect();
        grad_ok!(check(&x, seed, |t, v| t.gather(v, idx.clone(), vec![n])));
        grad_ok!(grad_check(|t, v| { let sq = t.gelu(v)?; t.sum(sq) }, &x, H, COORDS, seed).unwrap());
    }

    #[test]
    fn softmax_rows_sum_to_one((r, c, seed) in shape(), spread in 0.1f64..50.0) {
        let s = softmax_rows(&random(&[r, c], -spread, spread, seed)).unwrap();
        for row in s.data().chunks(c) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_standardizes((r, c, seed) in shape(), spread in 0.01f64..10.0) {
        prop_assume!(c >= 2);
        let x = random(&[r, c], -spread, spread, seed);
        let (g, b) = (Tensor::ones(&[c]).unwrap(), Tensor::zeros(&[c]).unwrap());
        let y = layer_norm(&x, &g, &b, 1e-5).unwrap();
        for (xr, yr) in x.data().chunks(c).zip(y.data().chunks(c)) {
            let n = c as f64;
            let (mx, my) = (xr.iter().sum::<f64>() / n, yr.iter().sum::<f64>() / n);
            let vx = xr.iter().map(|v| (v - mx).powi(2)).sum::<f64>() / n;
            let vy = yr.iter().map(|v| (v - my).powi(2)).sum::<f64>() / n;
            prop_assume!(vx > 1e-5);
            prop_assert!(my.abs() < 1e-10);
            // eps sits inside the square root, so the exact output variance is vx/(vx+eps)
            prop_assert!((vy - vx / (vx + 1e-5)).abs() < 1e-8);
        }
        // at a spread where eps is negligible the variance is 1 to 1e-8
        let wide = x.map(|v| v * 1e3 / spread).unwrap();
        let y = layer_norm(&wide, &g, &b, 1e-5).unwrap();
        for (xr, yr) in wide.data().chunks(c).zip(y.data().chunks(c)) {
            let n = c as f64;
            let mx = xr.iter().sum::<f64>() / n;
            prop_assume!(xr.iter().map(|v| (v - mx).powi(2)).sum::<f64>() / n > 1e4);
            let my = yr.iter().sum::<f64>() / n;
            let vy = yr.iter().map(|v| (v - my).powi(2)).sum::<f64>() / n;
            prop_assert!((vy - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn replay_is_bitwise_identical((r, c, seed) in shape()) {
        let x = random(&[r, c], -2.0, 2.0, seed);
        let run = || {
            let mut t = Tape::new();
            let v = t.variable(x.clone());
            let s = t.softmax_rows(v).unwrap();
            let g = t.gelu(s).unwrap();
            let out = weigh(&mut t, g, seed).unwrap();
            let value = t.value(out).clone();
            let grad = t.backward_scalar(out).unwrap().get(v).unwrap().clone();
            (value, grad)
        };
        let (a, b) = (run(), run());
        prop_assert!(a.0.bitwise_eq(&b.0) && a.1.bitwise_eq(&b.1));
    }
}

fn patch_map(values: Vec<f64>) -> UncertaintyMap {
    UncertaintyMap { values, source_layers: LayerRange::new(1, 1), has_cls: false }
}

proptest! {
    #[test]
    fn uncertainty_and_mask_ranges(maps in prop::collection::vec(prop::collection::vec(0.0f64..100.0, 16), 1..5)) {
        let layers = LayerRange::new(1, maps.len());
        let u = aggregate_uncertainty(&DeviationMaps::new(maps, layers, false)).unwrap();
        prop_assert!(u.values.iter().all(|v| (0.0..=1.0).contains(v)));
        let m = binarize_mask(&u, 1.1).unwrap();
        prop_assert!(m.values().iter().all(|v| *v <= 1));
    }

    #[test]
    fn mask_monotone_in_threshold(u in prop::collection::vec(0.0f64..1.0, 2..40), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let u = patch_map(u);
        let strict = binarize_mask(&u, hi).unwrap();
        let loose = binarize_mask(&u, lo).unwrap();
        for (s, l) in strict.values().iter().zip(loose.values()) {
            prop_assert!(!(*s == 0 && *l == 1), "raising the threshold made a token uncertain");
        }
    }

    #[test]
    fn layer_affine_invariance(
        maps in prop::collection::vec(prop::collection::vec(0.0f64..10.0, 9), 1..4),
        scale in 0.01f64..100.0, shift in -50.0f64..50.0, which in 0usize..4,
    ) {
        let layers = LayerRange::new(1, maps.len());
        let base = aggregate_uncertainty(&DeviationMaps::new(maps.clone(), layers, true)).unwrap();
        let mut moved = maps;
        let k = which % moved.len();
        for v in &mut moved[k] {
            *v = scale * *v + shift;
        }
        let after = aggregate_uncertainty(&DeviationMaps::new(moved, layers, true)).unwrap();
        for (x, y) in base.values.iter().zip(&after.values) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn mask_standardization_invariance(u in prop::collection::vec(0.0f64..1.0, 2..40), shift in -5.0f64..5.0, scale in 0.1f64..10.0) {
        let base = binarize_mask(&patch_map(u.clone()), 1.1).unwrap();
        let (mean, var) = {
            let n = u.len() as f64;
            let m = u.iter().sum::<f64>() / n;
            (m, u.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n)
        };
        // tokens sitting on the threshold may flip under rounding
        prop_assume!(var > 0.0 && u.iter().all(|v| ((v - mean) / var.sqrt() - 1.1).abs() > 1e-9));
        let shifted = binarize_mask(&patch_map(u.iter().map(|v| v + shift).collect()), 1.1).unwrap();
        let scaled = binarize_mask(&patch_map(u.iter().map(|v| v * scale).collect()), 1.1).unwrap();
        prop_assert_eq!(base.values(), shifted.values());
        prop_assert_eq!(base.values(), scaled.values());
    }
}
