//! Independent oracles for the compute core: a naive 6-loop convolution in
//! 64-bit, a dot-product dense layer, index-mapped resampling, and central
//! finite differences over every differentiable operation.

use lia_core::graph::{finite_diff_check, Graph};
use lia_core::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Naive 6-loop cross-correlation in f64. Independent of the im2col path.
#[allow(clippy::too_many_arguments)]
fn conv_oracle(
    input: &[f32],
    c_in: usize,
    h: usize,
    w: usize,
    weight: &[f32],
    c_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let h_out = (h + 2 * pad - k) / stride + 1;
    let w_out = (w + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0f64; c_out * h_out * w_out];
    for co in 0..c_out {
        for oy in 0..h_out {
            for ox in 0..w_out {
                let mut acc = 0.0f64;
                for ci in 0..c_in {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            let xv = input[(ci * h + iy as usize) * w + ix as usize] as f64;
                            let wv = weight[((co * c_in + ci) * k + ky) * k + kx] as f64;
                            acc += xv * wv;
                        }
                    }
                }
                out[(co * h_out + oy) * w_out + ox] = acc;
            }
        }
    }
    out
}

fn max_abs_vs_oracle(got: &[f32], oracle: &[f64]) -> f64 {
    got.iter()
        .zip(oracle)
        .map(|(a, b)| (*a as f64 - b).abs())
        .fold(0.0, f64::max)
}

#[test]
fn conv2d_matches_naive_oracle_on_spec_case() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let x = Tensor::randn(&[2, 8, 8], 1.0, &mut rng);
    let w = Tensor::randn(&[4, 2, 3, 3], 0.5, &mut rng);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let wv = g.constant(w.clone());
    let y = g.conv2d(xv, wv, None, 1, 0).unwrap();
    let oracle = conv_oracle(x.data(), 2, 8, 8, w.data(), 4, 3, 1, 0);
    assert!(max_abs_vs_oracle(g.value(y).data(), &oracle) <= 1e-6);
}

#[test]
fn conv2d_matches_naive_oracle_across_shapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    // all extents up to 4 x 4 x 16 x 16, a representative sweep
    for &(c_in, c_out) in &[(1usize, 1usize), (3, 4), (4, 2)] {
        for &(h, w) in &[(5usize, 7usize), (16, 16), (9, 16)] {
            for &k in &[1usize, 3] {
                for &stride in &[1usize, 2] {
                    for &pad in &[0usize, 1, 2] {
                        let span_h = h + 2 * pad;
                        let span_w = w + 2 * pad;
                        if span_h < k || span_w < k {
                            continue;
                        }
                        if (span_h - k) % stride != 0 || (span_w - k) % stride != 0 {
                            continue;
                        }
                        let x = Tensor::randn(&[c_in, h, w], 0.7, &mut rng);
                        let wt = Tensor::randn(&[c_out, c_in, k, k], 0.2, &mut rng);
                        let mut g = Graph::new();
                        let xv = g.constant(x.clone());
                        let wv = g.constant(wt.clone());
                        let y = g.conv2d(xv, wv, None, stride, pad).unwrap();
                        let oracle =
                            conv_oracle(x.data(), c_in, h, w, wt.data(), c_out, k, stride, pad);
                        let err = max_abs_vs_oracle(g.value(y).data(), &oracle);
                        assert!(
                            err <= 1e-6,
                            "c{c_in}->{c_out} {h}x{w} k{k} s{stride} p{pad}: {err}"
                        );
                    }
                }
            }
        }
    }
}

#[test]
fn affine_matches_dot_product_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    let x = Tensor::randn(&[4, 8], 1.0, &mut rng);
    let w = Tensor::randn(&[3, 8], 0.7, &mut rng);
    let b = Tensor::randn(&[3], 0.2, &mut rng);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let wv = g.constant(w.clone());
    let bv = g.constant(b.clone());
    let y = g.affine(xv, wv, bv).unwrap();
    let mut oracle = vec![0.0f64; 4 * 3];
    for r in 0..4 {
        for o in 0..3 {
            let mut acc = b.data()[o] as f64;
            for i in 0..8 {
                acc += x.data()[r * 8 + i] as f64 * w.data()[o * 8 + i] as f64;
            }
            oracle[r * 3 + o] = acc;
        }
    }
    assert!(max_abs_vs_oracle(g.value(y).data(), &oracle) <= 1e-6);
}

#[test]
fn upsample_matches_index_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let x = Tensor::randn(&[3, 16, 16], 1.0, &mut rng);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let y = g.resample2x_up(xv).unwrap();
    let out = g.value(y);
    assert_eq!(out.shape(), &[3, 32, 32]);
    for c in 0..3 {
        for oy in 0..32 {
            for ox in 0..32 {
                let expect = x.data()[(c * 16 + oy / 2) * 16 + ox / 2];
                let got = out.data()[(c * 32 + oy) * 32 + ox];
                assert_eq!(got, expect, "c{c} {oy},{ox}");
            }
        }
    }
}

#[test]
fn backprop_composite_passes_finite_differences() {
    for seed in 0..3u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let x = Tensor::randn(&[2, 3, 6, 6], 0.7, &mut rng);
        let w = Tensor::randn(&[4, 3, 3, 3], 0.3, &mut rng);
        let b = Tensor::randn(&[4], 0.1, &mut rng);
        let err = finite_diff_check(
            |g, v| {
                let y = g.conv2d(v[0], v[1], Some(v[2]), 1, 1)?;
                let a = g.leaky_relu(y, 0.2)?;
                let d = g.resample2x_down(a)?;
                let sq = g.mul(d, d)?;
                g.mean_all(sq)
            },
            &[x, w, b],
            1e-3,
        )
        .unwrap();
        assert!(err <= 1e-3, "seed {seed}: rel err {err}");
    }
}

#[test]
fn fused_conv_activation_gradients_match_unfused() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let x = Tensor::randn(&[1, 2, 5, 5], 1.0, &mut rng).with_grad(true);
    let w = Tensor::randn(&[3, 2, 3, 3], 0.4, &mut rng).with_grad(true);
    let b = Tensor::randn(&[3], 0.2, &mut rng).with_grad(true);

    let mut g1 = Graph::new();
    let (x1, w1, b1) = (g1.leaf(&x), g1.leaf(&w), g1.leaf(&b));
    let y1 = g1.conv2d_act(x1, w1, Some(b1), 1, 1, 0.2).unwrap();
    let l1 = g1.mean_all(y1).unwrap();
    let gr1 = g1.backward(l1).unwrap();

    let mut g2 = Graph::new();
    let (x2, w2, b2) = (g2.leaf(&x), g2.leaf(&w), g2.leaf(&b));
    let c = g2.conv2d(x2, w2, Some(b2), 1, 1).unwrap();
    let y2 = g2.leaky_relu(c, 0.2).unwrap();
    let l2 = g2.mean_all(y2).unwrap();
    let gr2 = g2.backward(l2).unwrap();

    assert_eq!(g1.value(y1).data(), g2.value(y2).data());
    for (a, b) in [
        (gr1.get(&g1, x1), gr2.get(&g2, x2)),
        (gr1.get(&g1, w1), gr2.get(&g2, w2)),
        (gr1.get(&g1, b1), gr2.get(&g2, b2)),
    ] {
        assert!(a.max_abs_diff(&b).unwrap() <= 1e-7);
    }
}

#[test]
fn elementwise_op_gradient_suite() {
    let checks: Vec<(&str, Box<dyn Fn(&mut Graph, lia_core::Var) -> lia_core::Result<lia_core::Var>>)> = vec![
        ("sigmoid", Box::new(|g, v| g.sigmoid(v))),
        ("tanh", Box::new(|g, v| g.tanh(v))),
        ("softplus", Box::new(|g, v| g.softplus(v))),
        ("abs", Box::new(|g, v| g.abs(v))),
        ("leaky", Box::new(|g, v| g.leaky_relu(v, 0.2))),
        ("scale", Box::new(|g, v| g.scale(v, -1.7))),
    ];
    for (name, op) in &checks {
        for seed in 0..3u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(7 * seed + 1);
            let x = Tensor::randn(&[17], 0.8, &mut rng);
            let err = finite_diff_check(
                |g, v| {
                    let y = op(g, v[0])?;
                    let sq = g.mul(y, y)?;
                    g.mean_all(sq)
                },
                &[x],
                1e-3,
            )
            .unwrap();
            assert!(err <= 1e-3, "{name} seed {seed}: rel err {err}");
        }
    }
}

#[test]
fn rsqrt_and_scalar_ops_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(53);
    // keep inputs away from the pole
    let x = Tensor::rand_uniform(&[9], 0.5, 2.0, &mut rng);
    let s = Tensor::rand_uniform(&[1], 0.5, 1.5, &mut rng);
    let err = finite_diff_check(
        |g, v| {
            let r = g.rsqrt_eps(v[0], 1e-8)?;
            let scaled = g.mul_scalar(r, v[1])?;
            g.mean_all(scaled)
        },
        &[x, s],
        1e-3,
    )
    .unwrap();
    assert!(err <= 1e-3, "rel err {err}");
}

#[test]
fn matmul_and_reduction_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(59);
    let a = Tensor::randn(&[3, 4], 0.8, &mut rng);
    let b = Tensor::randn(&[4, 5], 0.8, &mut rng);
    let err = finite_diff_check(
        |g, v| {
            let y = g.matmul(v[0], v[1])?;
            let r = g.row_sums(y)?;
            let sq = g.mul(r, r)?;
            g.mean_all(sq)
        },
        &[a, b],
        1e-3,
    )
    .unwrap();
    assert!(err <= 1e-3, "rel err {err}");

    let c = Tensor::randn(&[4, 6], 0.8, &mut rng);
    let d = Tensor::randn(&[3, 6], 0.8, &mut rng);
    let err = finite_diff_check(
        |g, v| {
            let y = g.matmul_nt(v[0], v[1])?;
            let sq = g.mul(y, y)?;
            g.mean_all(sq)
        },
        &[c, d],
        1e-3,
    )
    .unwrap();
    assert!(err <= 1e-3, "rel err {err}");
}

#[test]
fn structural_op_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    let x = Tensor::randn(&[2, 3, 4, 4], 0.8, &mut rng);
    let m = Tensor::rand_uniform(&[2, 1, 4, 4], 0.1, 0.9, &mut rng);
    let s = Tensor::rand_uniform(&[2, 3], 0.5, 1.5, &mut rng);
    let err = finite_diff_check(
        |g, v| {
            let masked = g.mul_mask(v[0], v[1])?;
            let scaled = g.scale_channels(masked, v[2])?;
            let sliced = g.slice_channels(scaled, 1, 3)?;
            let up = g.resample2x_up(sliced)?;
            let sq = g.mul(up, up)?;
            g.mean_all(sq)
        },
        &[x, m, s],
        1e-3,
    )
    .unwrap();
    assert!(err <= 1e-3, "rel err {err}");

    let c = Tensor::randn(&[3, 5, 5], 0.8, &mut rng);
    let err = finite_diff_check(
        |g, v| {
            let rep = g.repeat_batch(v[0], 4)?;
            let sq = g.mul(rep, rep)?;
            g.mean_all(sq)
        },
        &[c],
        1e-3,
    )
    .unwrap();
    assert!(err <= 1e-3, "rel err {err}");
}
