use lpnet::pyramid::{down, laplacian_decompose, laplacian_reconstruct, up, LaplacianLevels};
use lpnet::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rand_map(h: usize, w: usize, seed: u64) -> Tensor {
    Tensor::rand_uniform(&[1, 1, h, w], -5.0, 5.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn down_oracle(x: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; h / 2 * (w / 2)];
    for y in 0..h / 2 {
        for xx in 0..w / 2 {
            out[y * (w / 2) + xx] =
                (x[2 * y * w + 2 * xx] + x[2 * y * w + 2 * xx + 1] + x[(2 * y + 1) * w + 2 * xx] + x[(2 * y + 1) * w + 2 * xx + 1]) / 4.0;
        }
    }
    out
}

/// Half-pixel-centre bilinear ×2, written as fixed 1/4–3/4 taps per axis.
fn up_oracle(x: &[f64], h: usize, w: usize) -> Vec<f64> {
    let taps = |o: usize, n: usize| -> [(usize, f64); 2] {
        let i = o / 2;
        if o.is_multiple_of(2) {
            [(i.saturating_sub(1), 0.25), (i, 0.75)]
        } else {
            [(i, 0.75), ((i + 1).min(n - 1), 0.25)]
        }
    };
    let mut out = vec![0.0; 4 * h * w];
    for oy in 0..2 * h {
        for ox in 0..2 * w {
            let mut acc = 0.0;
            for (iy, wy) in taps(oy, h) {
                for (ix, wx) in taps(ox, w) {
                    acc += wy * wx * x[iy * w + ix];
                }
            }
            out[oy * 2 * w + ox] = acc;
        }
    }
    out
}

#[test]
fn down_and_up_match_loop_oracles() {
    let x = rand_map(8, 12, 1);
    let d = down(&x).unwrap();
    assert_eq!(d.shape(), &[1, 1, 4, 6]);
    for (a, b) in d.data().iter().zip(down_oracle(x.data(), 8, 12)) {
        assert!((a - b).abs() < 1e-12);
    }
    let u = up(&d).unwrap();
    assert_eq!(u.shape(), &[1, 1, 8, 12]);
    for (a, b) in u.data().iter().zip(up_oracle(d.data(), 4, 6)) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn impulse_bandpass_matches_oracle() {
    let mut v = vec![0.0; 64];
    v[3 * 8 + 4] = 1.0;
    let x = Tensor::new(&[1, 1, 8, 8], v.clone()).unwrap();
    let lv = laplacian_decompose(&x, 1).unwrap();
    let coarse = down_oracle(&v, 8, 8);
    assert_eq!(coarse[4 + 2], 0.25);
    let expected: Vec<f64> = v.iter().zip(up_oracle(&coarse, 4, 4)).map(|(a, b)| a - b).collect();
    for (a, b) in lv.bandpass[0].data().iter().zip(&expected) {
        assert!((a - b).abs() < 1e-12);
    }
    assert_eq!(lv.residual.data(), &coarse[..]);
}

#[test]
fn round_trip_levels_one_to_four() {
    for levels in 1..=4 {
        for seed in 0..10 {
            let x = rand_map(64, 64, 100 * levels as u64 + seed);
            let lv = laplacian_decompose(&x, levels).unwrap();
            assert_eq!(lv.level_count(), levels);
            assert_eq!(lv.residual.shape(), &[1, 1, 64 >> levels, 64 >> levels]);
            let back = laplacian_reconstruct(&lv).unwrap();
            assert!(back.max_abs_diff(&x) < 1e-10);
        }
    }
}

#[test]
fn decomposition_is_linear() {
    let (a, b) = (rand_map(16, 16, 7), rand_map(16, 16, 8));
    let sum = a.zip_map(&b, |p, q| 2.0 * p - 3.0 * q).unwrap();
    let (la, lb, ls) = (
        laplacian_decompose(&a, 3).unwrap(),
        laplacian_decompose(&b, 3).unwrap(),
        laplacian_decompose(&sum, 3).unwrap(),
    );
    for i in 0..3 {
        let comb = la.bandpass[i].zip_map(&lb.bandpass[i], |p, q| 2.0 * p - 3.0 * q).unwrap();
        assert!(comb.max_abs_diff(&ls.bandpass[i]) < 1e-12);
    }
}

#[test]
fn constant_map_has_zero_bandpass() {
    let x = Tensor::full(&[1, 1, 32, 32], 4.25);
    let lv = laplacian_decompose(&x, 4).unwrap();
    for b in &lv.bandpass {
        assert!(b.data().iter().all(|&v| v == 0.0));
    }
    assert!(lv.residual.data().iter().all(|&v| v == 4.25));
}

#[test]
fn zero_bandpass_reconstructs_upsampled_residual() {
    let residual = rand_map(4, 4, 9);
    let lv = LaplacianLevels {
        bandpass: vec![Tensor::zeros(&[1, 1, 16, 16]), Tensor::zeros(&[1, 1, 8, 8])],
        residual: residual.clone(),
    };
    let out = laplacian_reconstruct(&lv).unwrap();
    let expected = up(&up(&residual).unwrap()).unwrap();
    assert!(out.max_abs_diff(&expected) < 1e-14);
}

#[test]
fn indivisible_sizes_are_rejected() {
    assert!(laplacian_decompose(&rand_map(24, 24, 1), 4).is_err());
    assert!(laplacian_decompose(&rand_map(24, 24, 1), 3).is_ok());
}

proptest! {
    #[test]
    fn round_trip_holds_for_any_shape(seed in 0u64..10_000, levels in 1usize..4, hb in 1usize..4, wb in 1usize..4, n in 1usize..3, c in 1usize..3) {
        let (h, w) = (hb << levels, wb << levels);
        let x = Tensor::rand_uniform(&[n, c, h, w], -10.0, 10.0, &mut ChaCha8Rng::seed_from_u64(seed));
        let back = laplacian_reconstruct(&laplacian_decompose(&x, levels).unwrap()).unwrap();
        prop_assert!(back.max_abs_diff(&x) < 1e-10);
    }
}
