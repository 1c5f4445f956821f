//! Brute-force 64-bit bilinear sampling oracle and the analytic warp cases.

use lia_core::graph::{finite_diff_check, Graph};
use lia_core::tensor::Tensor;
use lia_core::warp::{bilinear_warp, masked_warp};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Direct per-pixel bilinear sampling in f64: same convention as the
/// implementation (identity grid + offsets scaled by (extent-1)/2, border
/// clamp), written independently.
fn warp_oracle(feat: &[f32], flow: &[f32], c: usize, h: usize, w: usize) -> Vec<f64> {
    let hw = h * w;
    let sx = (w as f64 - 1.0) / 2.0;
    let sy = (h as f64 - 1.0) / 2.0;
    let mut out = vec![0.0f64; c * hw];
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let px = (x as f64 + flow[p] as f64 * sx).clamp(0.0, w as f64 - 1.0);
            let py = (y as f64 + flow[hw + p] as f64 * sy).clamp(0.0, h as f64 - 1.0);
            let x0 = px.floor() as usize;
            let y0 = py.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let y1 = (y0 + 1).min(h - 1);
            let fx = px - x0 as f64;
            let fy = py - y0 as f64;
            for ch in 0..c {
                let f00 = feat[ch * hw + y0 * w + x0] as f64;
                let f01 = feat[ch * hw + y0 * w + x1] as f64;
                let f10 = feat[ch * hw + y1 * w + x0] as f64;
                let f11 = feat[ch * hw + y1 * w + x1] as f64;
                let top = (1.0 - fx) * f00 + fx * f01;
                let bot = (1.0 - fx) * f10 + fx * f11;
                out[ch * hw + p] = (1.0 - fy) * top + fy * bot;
            }
        }
    }
    out
}

#[test]
fn hundred_random_cases_match_the_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for case in 0..100 {
        let (c, h, w) = (
            rng.random_range(1..4usize),
            rng.random_range(2..12usize),
            rng.random_range(2..12usize),
        );
        let feat = Tensor::randn(&[c, h, w], 1.0, &mut rng);
        let flow = Tensor::rand_uniform(&[2, h, w], -2.0, 2.0, &mut rng);
        let got = bilinear_warp(&feat, &flow).unwrap();
        let oracle = warp_oracle(feat.data(), flow.data(), c, h, w);
        let err = got
            .data()
            .iter()
            .zip(&oracle)
            .map(|(a, b)| (*a as f64 - b).abs())
            .fold(0.0, f64::max);
        assert!(err <= 1e-6, "case {case} ({c}x{h}x{w}): {err}");
    }
}

#[test]
fn zero_flow_is_exact_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let feat = Tensor::randn(&[3, 9, 7], 1.0, &mut rng);
    let flow = Tensor::zeros(&[2, 9, 7]);
    let out = bilinear_warp(&feat, &flow).unwrap();
    assert_eq!(out.data(), feat.data());
}

#[test]
fn one_pixel_shift_with_border_clamp() {
    // one pixel spacing in normalized units is 2/(W-1)
    let (h, w) = (4usize, 6usize);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let feat = Tensor::randn(&[2, h, w], 1.0, &mut rng);
    let mut flow = vec![0.0f32; 2 * h * w];
    for v in flow.iter_mut().take(h * w) {
        *v = 2.0 / (w as f32 - 1.0);
    }
    let flow = Tensor::new(vec![2, h, w], flow).unwrap();
    let out = bilinear_warp(&feat, &flow).unwrap();
    for c in 0..2 {
        for y in 0..h {
            for x in 0..w {
                // sampling position x+1, clamped at the right border
                let src = (x + 1).min(w - 1);
                let expect = feat.data()[(c * h + y) * w + src];
                let got = out.data()[(c * h + y) * w + x];
                assert!((got - expect).abs() <= 1e-6, "c{c} {y},{x}");
            }
        }
    }
}

#[test]
fn half_pixel_flow_averages_neighbors() {
    let (h, w) = (3usize, 8usize);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let feat = Tensor::randn(&[1, h, w], 1.0, &mut rng);
    let mut flow = vec![0.0f32; 2 * h * w];
    for v in flow.iter_mut().take(h * w) {
        *v = 1.0 / (w as f32 - 1.0);
    }
    let flow = Tensor::new(vec![2, h, w], flow).unwrap();
    let out = bilinear_warp(&feat, &flow).unwrap();
    for y in 0..h {
        for x in 0..w - 1 {
            let expect = 0.5 * (feat.data()[y * w + x] + feat.data()[y * w + x + 1]);
            let got = out.data()[y * w + x];
            assert!((got - expect).abs() <= 1e-6, "{y},{x}");
        }
    }
}

#[test]
fn masked_warp_matches_two_stage_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let (c, h, w) = (2usize, 6usize, 5usize);
        let feat = Tensor::randn(&[c, h, w], 1.0, &mut rng);
        let flow = Tensor::rand_uniform(&[2, h, w], -1.0, 1.0, &mut rng);
        let mask = Tensor::rand_uniform(&[1, h, w], 0.0, 1.0, &mut rng);
        let got = masked_warp(&feat, &flow, &mask).unwrap();
        let sampled = warp_oracle(feat.data(), flow.data(), c, h, w);
        for ch in 0..c {
            for p in 0..h * w {
                let expect = sampled[ch * h * w + p] * mask.data()[p] as f64;
                let g = got.data()[ch * h * w + p] as f64;
                assert!((g - expect).abs() <= 1e-6);
            }
        }
    }
}

/// Random flow whose sampling positions stay >= 1e-2 away from integer grid
/// crossings, so central differences remain valid.
fn safe_flow(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let sx = (w as f32 - 1.0) / 2.0;
    let sy = (h as f32 - 1.0) / 2.0;
    let mut data = vec![0.0f32; 2 * h * w];
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            for (chan, (base, scale, extent)) in
                [(x as f32, sx, w), (y as f32, sy, h)].iter().enumerate()
            {
                loop {
                    let off: f32 = rng.random_range(-0.4..0.4);
                    let pos = base + off * scale;
                    let frac = pos - pos.floor();
                    // interior, away from crossings and the border
                    if pos > 0.1
                        && pos < (*extent as f32 - 1.1)
                        && frac > 0.05
                        && frac < 0.95
                    {
                        data[chan * h * w + p] = off;
                        break;
                    }
                }
            }
        }
    }
    Tensor::new(vec![2, h, w], data).unwrap()
}

#[test]
fn warp_gradients_pass_finite_differences() {
    for seed in 0..3u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(77 + seed);
        let (h, w) = (6usize, 7usize);
        let feat = Tensor::randn(&[2, h, w], 1.0, &mut rng);
        let flow = safe_flow(h, w, &mut rng);
        let weights = Tensor::randn(&[2, h, w], 1.0, &mut rng);
        let err = finite_diff_check(
            |g, v| {
                let f4 = g.reshape(v[0], &[1, 2, h, w])?;
                let fl4 = g.reshape(v[1], &[1, 2, h, w])?;
                let y = g.warp(f4, fl4)?;
                let wv = g.constant(weights.reshaped(&[1, 2, h, w]).unwrap());
                let prod = g.mul(y, wv)?;
                g.sum_all(prod)
            },
            &[feat, flow],
            1e-3,
        )
        .unwrap();
        assert!(err <= 1e-3, "seed {seed}: rel err {err}");
    }
}

#[test]
fn warp_is_linear_in_features() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let (c, h, w) = (3usize, 8usize, 8usize);
    let xa = Tensor::randn(&[c, h, w], 1.0, &mut rng);
    let xb = Tensor::randn(&[c, h, w], 1.0, &mut rng);
    let flow = Tensor::rand_uniform(&[2, h, w], -1.5, 1.5, &mut rng);
    let (a, b) = (0.7f32, -1.3f32);
    let combined = Tensor::new(
        vec![c, h, w],
        xa.data().iter().zip(xb.data()).map(|(p, q)| a * p + b * q).collect(),
    )
    .unwrap();
    let w_comb = bilinear_warp(&combined, &flow).unwrap();
    let wa = bilinear_warp(&xa, &flow).unwrap();
    let wb = bilinear_warp(&xb, &flow).unwrap();
    for i in 0..c * h * w {
        let expect = a * wa.data()[i] + b * wb.data()[i];
        assert!((w_comb.data()[i] - expect).abs() <= 1e-5);
    }
}

#[test]
fn warp_and_unwarp_of_smooth_image_round_trips() {
    // a bilinearly generated (piecewise planar) image warped by a smooth flow
    // and back approximately recovers interior pixels
    let (c, h, w) = (1usize, 16usize, 16usize);
    let mut base = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            base[y * w + x] = 0.03 * x as f32 - 0.02 * y as f32 + 0.001 * (x * y) as f32;
        }
    }
    let img = Tensor::new(vec![c, h, w], base).unwrap();
    let mut flow = vec![0.0f32; 2 * h * w];
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            flow[p] = 0.05 * (x as f32 * 0.5).sin();
            flow[h * w + p] = 0.04 * (y as f32 * 0.7).sin();
        }
    }
    let flow_t = Tensor::new(vec![2, h, w], flow.clone()).unwrap();
    let neg = Tensor::new(vec![2, h, w], flow.iter().map(|v| -v).collect()).unwrap();
    let warped = bilinear_warp(&img, &flow_t).unwrap();
    let back = bilinear_warp(&warped, &neg).unwrap();
    let mut sum = 0.0f64;
    let mut count = 0usize;
    for y in 2..h - 2 {
        for x in 2..w - 2 {
            sum += (back.data()[y * w + x] as f64 - img.data()[y * w + x] as f64).abs();
            count += 1;
        }
    }
    let mean = sum / count as f64;
    assert!(mean <= 1e-2, "round-trip mean abs error {mean}");
}
