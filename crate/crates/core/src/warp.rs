//! Differentiable dense-flow warping.
//!
//! A flow field holds two channels of normalized coordinate offsets: the
//! x-offset is scaled by (W-1)/2 and the y-offset by (H-1)/2, so an offset of
//! 2 traverses the full image span. Sampling positions are the identity pixel
//! grid plus the scaled offset; out-of-range positions clamp to the border,
//! which also zeroes their flow gradient.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Bilinear sample of `features` along `flow`.
///
/// `features` is C x H x W (or batched B x C x H x W), `flow` is 2 x H x W
/// (or B x 2 x H x W) with channel 0 the x-offset and channel 1 the y-offset.
pub fn bilinear_warp(features: &Tensor, flow: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = check_pair(features, flow)?;
    let mut out = vec![0.0f32; features.len()];
    let feat_item = c * h * w;
    let flow_item = 2 * h * w;
    out.chunks_mut(feat_item)
        .zip(features.data().chunks(feat_item))
        .zip(flow.data().chunks(flow_item))
        .for_each(|((o, f), fl)| warp_item_forward(f, fl, c, h, w, o));
    let _ = b;
    Tensor::new(features.shape().to_vec(), out)
}

/// Warp then multiply by a per-pixel mask broadcast over channels.
/// Mask values must lie in [0, 1].
pub fn masked_warp(features: &Tensor, flow: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = check_pair(features, flow)?;
    check_mask_shape(mask, b, h, w, features.rank())?;
    if let Some(bad) = mask.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Invalid(format!(
            "masked_warp: mask value {bad} outside [0, 1]"
        )));
    }
    let warped = bilinear_warp(features, flow)?;
    let mut out = warped.into_data();
    let feat_item = c * h * w;
    let mask_item = h * w;
    for bi in 0..b {
        let m = &mask.data()[bi * mask_item..(bi + 1) * mask_item];
        let o = &mut out[bi * feat_item..(bi + 1) * feat_item];
        for ch in 0..c {
            let plane = &mut o[ch * mask_item..(ch + 1) * mask_item];
            for (v, mv) in plane.iter_mut().zip(m) {
                *v *= *mv;
            }
        }
    }
    Tensor::new(features.shape().to_vec(), out)
}

fn check_pair(features: &Tensor, flow: &Tensor) -> Result<(usize, usize, usize, usize)> {
    let (b, c, h, w) = match features.shape() {
        [c, h, w] => (1, *c, *h, *w),
        [b, c, h, w] => (*b, *c, *h, *w),
        s => {
            return Err(Error::shape(
                "bilinear_warp",
                format!("features must be rank 3 or 4, got {s:?}"),
            ))
        }
    };
    let (fb, fc, fh, fw) = match flow.shape() {
        [c, h, w] => (1, *c, *h, *w),
        [b, c, h, w] => (*b, *c, *h, *w),
        s => {
            return Err(Error::shape(
                "bilinear_warp",
                format!("flow must be rank 3 or 4, got {s:?}"),
            ))
        }
    };
    if fc != 2 {
        return Err(Error::shape("bilinear_warp", format!("flow needs 2 channels, got {fc}")));
    }
    if fb != b || fh != h || fw != w {
        return Err(Error::shape(
            "bilinear_warp",
            format!("flow extents {fb}x{fh}x{fw} do not match features {b}x{h}x{w}"),
        ));
    }
    Ok((b, c, h, w))
}

fn check_mask_shape(mask: &Tensor, b: usize, h: usize, w: usize, feat_rank: usize) -> Result<()> {
    let ok = match mask.shape() {
        [1, mh, mw] => feat_rank == 3 && *mh == h && *mw == w && b == 1,
        [mb, 1, mh, mw] => *mb == b && *mh == h && *mw == w,
        _ => false,
    };
    if ok {
        Ok(())
    } else {
        Err(Error::shape(
            "masked_warp",
            format!("mask shape {:?} does not match 1-channel {b}x{h}x{w}", mask.shape()),
        ))
    }
}

#[derive(Clone, Copy)]
struct Sample {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    fx: f64,
    fy: f64,
    // 1.0 where the position was inside the image, 0.0 where clamped
    gate_x: f64,
    gate_y: f64,
}

// Positions and interpolation weights are carried in f64: the cost is
// negligible next to the convolutions and it keeps the forward pass within
// one rounding of a 64-bit reference.
#[inline]
fn resolve(px: f64, py: f64, h: usize, w: usize) -> Sample {
    let max_x = (w - 1) as f64;
    let max_y = (h - 1) as f64;
    let gate_x = if (0.0..=max_x).contains(&px) { 1.0 } else { 0.0 };
    let gate_y = if (0.0..=max_y).contains(&py) { 1.0 } else { 0.0 };
    let cx = px.clamp(0.0, max_x);
    let cy = py.clamp(0.0, max_y);
    let x0 = cx.floor() as usize;
    let y0 = cy.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    Sample { x0, x1, y0, y1, fx: cx - x0 as f64, fy: cy - y0 as f64, gate_x, gate_y }
}

pub(crate) fn warp_item_forward(feat: &[f32], flow: &[f32], c: usize, h: usize, w: usize, out: &mut [f32]) {
    let hw = h * w;
    let sx = (w - 1) as f64 / 2.0;
    let sy = (h - 1) as f64 / 2.0;
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let s = resolve(
                x as f64 + flow[p] as f64 * sx,
                y as f64 + flow[hw + p] as f64 * sy,
                h,
                w,
            );
            for ch in 0..c {
                let plane = &feat[ch * hw..(ch + 1) * hw];
                let v00 = plane[s.y0 * w + s.x0] as f64;
                let v01 = plane[s.y0 * w + s.x1] as f64;
                let v10 = plane[s.y1 * w + s.x0] as f64;
                let v11 = plane[s.y1 * w + s.x1] as f64;
                let top = (1.0 - s.fx) * v00 + s.fx * v01;
                let bot = (1.0 - s.fx) * v10 + s.fx * v11;
                out[ch * hw + p] = ((1.0 - s.fy) * top + s.fy * bot) as f32;
            }
        }
    }
}

pub(crate) fn warp_item_backward(
    feat: &[f32],
    flow: &[f32],
    grad_out: &[f32],
    c: usize,
    h: usize,
    w: usize,
    grad_feat: Option<&mut [f32]>,
    grad_flow: Option<&mut [f32]>,
) {
    let hw = h * w;
    let sx = (w - 1) as f64 / 2.0;
    let sy = (h - 1) as f64 / 2.0;
    let mut gfeat = grad_feat;
    let mut gflow = grad_flow;
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let s = resolve(
                x as f64 + flow[p] as f64 * sx,
                y as f64 + flow[hw + p] as f64 * sy,
                h,
                w,
            );
            let (mut dpx, mut dpy) = (0.0f64, 0.0f64);
            for ch in 0..c {
                let g = grad_out[ch * hw + p] as f64;
                if g == 0.0 {
                    continue;
                }
                if let Some(gf) = gfeat.as_deref_mut() {
                    let plane = &mut gf[ch * hw..(ch + 1) * hw];
                    plane[s.y0 * w + s.x0] += (g * (1.0 - s.fx) * (1.0 - s.fy)) as f32;
                    plane[s.y0 * w + s.x1] += (g * s.fx * (1.0 - s.fy)) as f32;
                    plane[s.y1 * w + s.x0] += (g * (1.0 - s.fx) * s.fy) as f32;
                    plane[s.y1 * w + s.x1] += (g * s.fx * s.fy) as f32;
                }
                if gflow.is_some() {
                    let plane = &feat[ch * hw..(ch + 1) * hw];
                    let v00 = plane[s.y0 * w + s.x0] as f64;
                    let v01 = plane[s.y0 * w + s.x1] as f64;
                    let v10 = plane[s.y1 * w + s.x0] as f64;
                    let v11 = plane[s.y1 * w + s.x1] as f64;
                    dpx += g * ((1.0 - s.fy) * (v01 - v00) + s.fy * (v11 - v10));
                    dpy += g * ((1.0 - s.fx) * (v10 - v00) + s.fx * (v11 - v01));
                }
            }
            if let Some(gl) = gflow.as_deref_mut() {
                gl[p] += (dpx * s.gate_x * sx) as f32;
                gl[hw + p] += (dpy * s.gate_y * sy) as f32;
            }
        }
    }
}

/// Batched forward used by the graph op.
pub(crate) fn warp_forward_batched(
    feat: &[f32],
    flow: &[f32],
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    out: &mut [f32],
) {
    let _ = b;
    let feat_item = c * h * w;
    let flow_item = 2 * h * w;
    out.par_chunks_mut(feat_item)
        .zip(feat.par_chunks(feat_item))
        .zip(flow.par_chunks(flow_item))
        .for_each(|((o, f), fl)| warp_item_forward(f, fl, c, h, w, o));
}

pub(crate) fn warp_backward_batched(
    feat: &[f32],
    flow: &[f32],
    grad_out: &[f32],
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    want_feat: bool,
    want_flow: bool,
) -> (Option<Vec<f32>>, Option<Vec<f32>>) {
    let feat_item = c * h * w;
    let flow_item = 2 * h * w;
    let mut gfeat = want_feat.then(|| vec![0.0f32; b * feat_item]);
    let mut gflow = want_flow.then(|| vec![0.0f32; b * flow_item]);
    // chunk both gradient buffers per item so the scatter stays within an item
    let mut gfeat_chunks: Vec<Option<&mut [f32]>> = match gfeat.as_deref_mut() {
        Some(buf) => buf.chunks_mut(feat_item).map(Some).collect(),
        None => (0..b).map(|_| None).collect(),
    };
    let mut gflow_chunks: Vec<Option<&mut [f32]>> = match gflow.as_deref_mut() {
        Some(buf) => buf.chunks_mut(flow_item).map(Some).collect(),
        None => (0..b).map(|_| None).collect(),
    };
    gfeat_chunks
        .par_iter_mut()
        .zip(gflow_chunks.par_iter_mut())
        .enumerate()
        .for_each(|(bi, (gf, gl))| {
            warp_item_backward(
                &feat[bi * feat_item..(bi + 1) * feat_item],
                &flow[bi * flow_item..(bi + 1) * flow_item],
                &grad_out[bi * feat_item..(bi + 1) * feat_item],
                c,
                h,
                w,
                gf.as_deref_mut(),
                gl.as_deref_mut(),
            )
        });
    drop(gfeat_chunks);
    drop(gflow_chunks);
    (gfeat, gflow)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_flow_is_identity_exactly() {
        let feat = Tensor::new(vec![2, 3, 4], (0..24).map(|i| i as f32 * 0.37 - 3.0).collect()).unwrap();
        let flow = Tensor::zeros(&[2, 3, 4]);
        let out = bilinear_warp(&feat, &flow).unwrap();
        assert_eq!(out.data(), feat.data());
    }

    #[test]
    fn half_pixel_flow_means_neighbors() {
        // one-pixel spacing in normalized units is 2/(W-1); half a pixel is 1/(W-1)
        let w = 5usize;
        let feat = Tensor::new(vec![1, 1, w], vec![1.0, 3.0, -2.0, 7.0, 4.0]).unwrap();
        let mut flow = vec![0.0f32; 2 * w];
        for v in flow.iter_mut().take(w) {
            *v = 1.0 / (w - 1) as f32;
        }
        let flow = Tensor::new(vec![2, 1, w], flow).unwrap();
        let out = bilinear_warp(&feat, &flow).unwrap();
        for x in 0..w - 1 {
            let expect = 0.5 * (feat.data()[x] + feat.data()[x + 1]);
            assert!((out.data()[x] - expect).abs() < 1e-6, "x={x}");
        }
    }

    #[test]
    fn mask_range_is_enforced() {
        let feat = Tensor::zeros(&[1, 2, 2]);
        let flow = Tensor::zeros(&[2, 2, 2]);
        let bad = Tensor::filled(&[1, 2, 2], 1.5);
        assert!(masked_warp(&feat, &flow, &bad).is_err());
        let good = Tensor::filled(&[1, 2, 2], 0.5);
        assert!(masked_warp(&feat, &flow, &good).is_ok());
    }

    #[test]
    fn mask_extremes() {
        let feat = Tensor::new(vec![2, 2, 2], (0..8).map(|i| i as f32).collect()).unwrap();
        let flow = Tensor::zeros(&[2, 2, 2]);
        let ones = Tensor::filled(&[1, 2, 2], 1.0);
        let zeros = Tensor::zeros(&[1, 2, 2]);
        assert_eq!(masked_warp(&feat, &flow, &ones).unwrap().data(), feat.data());
        assert!(masked_warp(&feat, &flow, &zeros).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shape_mismatch_rejected() {
        let feat = Tensor::zeros(&[1, 4, 4]);
        let flow = Tensor::zeros(&[2, 3, 4]);
        assert!(bilinear_warp(&feat, &flow).is_err());
        let flow3 = Tensor::zeros(&[3, 4, 4]);
        assert!(bilinear_warp(&feat, &flow3).is_err());
    }
}
