use loopx::raster::{
    blur, gaussian_pyramid, global_stats, laplacian_pyramid, luminance, reconstruct, upsample,
};
use loopx::{Image, LumaMap};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_luma(seed: u64, w: usize, h: usize) -> LumaMap<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    LumaMap::from_fn(w, h, |_, _| [rng.random_range(0.0..1.0)])
}

fn random_rgb(seed: u64, w: usize, h: usize) -> Image<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Image::from_fn(w, h, |_, _| {
        [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)]
    })
}

const K: [f64; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];

/// Direct 2-D convolution with the 5x5 outer-product kernel, edge clamp.
fn naive_blur(src: &[f64], w: usize, h: usize) -> Vec<f64> {
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (dy, ky) in K.iter().enumerate() {
                for (dx, kx) in K.iter().enumerate() {
                    let sx = (x as isize + dx as isize - 2).clamp(0, w as isize - 1) as usize;
                    let sy = (y as isize + dy as isize - 2).clamp(0, h as isize - 1) as usize;
                    acc += ky * kx * src[sy * w + sx];
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}

fn naive_decimate(src: &[f64], w: usize, h: usize) -> (Vec<f64>, usize, usize) {
    let (nw, nh) = (w.div_ceil(2), h.div_ceil(2));
    let out = (0..nw * nh).map(|i| src[2 * (i / nw) * w + 2 * (i % nw)]).collect();
    (out, nw, nh)
}

/// Zero insertion on the unbounded fine grid, then the kernel scaled by two;
/// an even virtual position 2c reads coarse sample c clamped to the grid.
fn naive_upsample(src: &[f64], cw: usize, ch: usize, w: usize, h: usize) -> Vec<f64> {
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (dy, ky) in K.iter().enumerate() {
                for (dx, kx) in K.iter().enumerate() {
                    let vx = x as isize + dx as isize - 2;
                    let vy = y as isize + dy as isize - 2;
                    if vx.rem_euclid(2) != 0 || vy.rem_euclid(2) != 0 {
                        continue;
                    }
                    let cx = vx.div_euclid(2).clamp(0, cw as isize - 1) as usize;
                    let cy = vy.div_euclid(2).clamp(0, ch as isize - 1) as usize;
                    acc += 4.0 * ky * kx * src[cy * cw + cx];
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}

#[test]
fn stats_match_sort_oracle() {
    let img = random_rgb(3, 8, 8);
    let stats = global_stats(&img);
    let mut lum: Vec<f64> = img
        .pixels()
        .map(|p| 0.2126 * p[0] + 0.7152 * p[1] + 0.0722 * p[2])
        .collect();
    let mean = lum.iter().sum::<f64>() / 64.0;
    let std = (lum.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 64.0).sqrt();
    lum.sort_by(|a, b| a.partial_cmp(b).unwrap());
    // Nearest rank on 64 samples: p5 -> 4th, p25 -> 16th, p50 -> 32nd, p75 -> 48th, p95 -> 61st.
    let expected_pct = [lum[3], lum[15], lum[31], lum[47], lum[60]];
    let s = stats.as_slice();
    assert!((s[0] - mean).abs() < 1e-12);
    assert!((s[1] - std).abs() < 1e-12);
    for (got, want) in s[2..7].iter().zip(expected_pct) {
        assert_eq!(*got, want);
    }
    for c in 0..3 {
        let m = img.pixels().map(|p| p[c]).sum::<f64>() / 64.0;
        assert!((s[7 + c] - m).abs() < 1e-12);
    }
}

#[test]
fn gaussian_levels_match_naive_oracle() {
    let img = random_luma(11, 16, 16);
    let pyr = gaussian_pyramid(&img, 3).unwrap();
    let dims: Vec<_> = pyr.levels.iter().map(|l| l.dims()).collect();
    assert_eq!(dims, [(16, 16), (8, 8), (4, 4)]);
    let (mut cur, mut w, mut h) = (img.data().to_vec(), 16, 16);
    for level in &pyr.levels[1..] {
        let (next, nw, nh) = naive_decimate(&naive_blur(&cur, w, h), w, h);
        for (a, b) in level.data().iter().zip(&next) {
            assert!((a - b).abs() < 1e-12);
        }
        (cur, w, h) = (next, nw, nh);
    }
}

#[test]
fn impulse_two_levels_match_naive_oracle() {
    let img = LumaMap::from_fn(8, 8, |x, y| [if (x, y) == (3, 4) { 1.0 } else { 0.0 }]);
    let lap = laplacian_pyramid(&img, 2).unwrap();
    let (coarse, cw, ch) = naive_decimate(&naive_blur(img.data(), 8, 8), 8, 8);
    let up = naive_upsample(&coarse, cw, ch, 8, 8);
    let band: Vec<f64> = img.data().iter().zip(&up).map(|(a, b)| a - b).collect();
    for (a, b) in lap.levels[0].data().iter().zip(&band) {
        assert!((a - b).abs() < 1e-12);
    }
    for (a, b) in lap.levels[1].data().iter().zip(&coarse) {
        assert!((a - b).abs() < 1e-12);
    }
    let back = reconstruct(&lap).unwrap();
    let recomposed: Vec<f64> = band.iter().zip(&up).map(|(a, b)| a + b).collect();
    for (a, b) in back.data().iter().zip(&recomposed) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn upsample_matches_naive_oracle_on_odd_sizes() {
    let coarse = random_luma(5, 4, 3);
    let up = upsample(&coarse, 7, 5);
    let expected = naive_upsample(coarse.data(), 4, 3, 7, 5);
    for (a, b) in up.data().iter().zip(&expected) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn constant_bands_vanish() {
    let img = LumaMap::<f64>::filled(13, 9, [0.3]);
    let lap = laplacian_pyramid(&img, 3).unwrap();
    for band in &lap.levels[..2] {
        assert!(band.data().iter().all(|v| v.abs() < 1e-12));
    }
    assert!(lap.levels[2].data().iter().all(|v| (v - 0.3).abs() < 1e-12));
}

#[test]
fn blur_preserves_constant_and_interior_mean() {
    let img = LumaMap::<f64>::filled(12, 10, [0.7]);
    assert!(blur(&img).data().iter().all(|v| (v - 0.7).abs() < 1e-12));
    // A linear ramp is reproduced exactly away from the border, so the mean
    // over the interior is preserved.
    let ramp = LumaMap::from_fn(20, 20, |x, y| [0.01 * x as f64 + 0.02 * y as f64]);
    let b = blur(&ramp);
    let (mut m0, mut m1) = (0.0, 0.0);
    for y in 2..18 {
        for x in 2..18 {
            m0 += ramp.pixel(x, y)[0];
            m1 += b.pixel(x, y)[0];
        }
    }
    assert!((m0 - m1).abs() / 256.0 < 1e-5);
}

#[test]
fn operations_are_deterministic() {
    let img = random_luma(9, 17, 11);
    let a = laplacian_pyramid(&img, 4).unwrap();
    let b = laplacian_pyramid(&img, 4).unwrap();
    assert_eq!(a, b);
}

proptest! {
    #[test]
    fn luminance_is_linear(
        seed in 0u64..1000,
        a in -2.0f64..2.0,
        b in -2.0f64..2.0,
        w in 1usize..8,
        h in 1usize..8,
    ) {
        let i1 = random_rgb(seed, w, h);
        let i2 = random_rgb(seed + 1, w, h);
        let combo = i1.lin_comb(a, &i2, b).unwrap();
        let (l1, l2, lc) = (luminance(&i1), luminance(&i2), luminance(&combo));
        for ((x, y), z) in l1.data().iter().zip(l2.data()).zip(lc.data()) {
            prop_assert!((a * x + b * y - z).abs() <= 1e-6);
        }
    }

    #[test]
    fn pyramid_round_trip(seed in 0u64..1000, w in 1usize..40, h in 1usize..40, levels in 1usize..6) {
        let img = random_luma(seed, w, h);
        let max_levels = (w.min(h).ilog2() as usize + 1).min(levels);
        let lap = laplacian_pyramid(&img, max_levels).unwrap();
        let back = reconstruct(&lap).unwrap();
        prop_assert!(back.max_abs_diff(&img).unwrap() <= 1e-5);
    }
}
