//! Dense compute kernels behind the graph ops: GEMM, im2col convolution,
//! and 2x resampling. All batch loops run under rayon with per-item output
//! chunks and order-fixed reductions, so results do not depend on the
//! worker count.

use rayon::prelude::*;

/// Output extent of a strided convolution, or None when it is not integral.
pub(crate) fn conv_out_extent(extent: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let span = extent + 2 * pad;
    if span < k {
        return None;
    }
    let num = span - k;
    if num % stride != 0 {
        return None;
    }
    Some(num / stride + 1)
}

/// C (m x n) = A (m x k) . B (k x n) + beta * C, all row-major.
pub(crate) fn sgemm_nn(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], beta: f32, c: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    unsafe {
        matrixmultiply::sgemm(
            m, k, n, 1.0, a.as_ptr(), k as isize, 1, b.as_ptr(), n as isize, 1, beta,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// C (m x n) = A (m x k) . B^T where B is stored (n x k) row-major.
pub(crate) fn sgemm_nt(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], beta: f32, c: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    unsafe {
        matrixmultiply::sgemm(
            m, k, n, 1.0, a.as_ptr(), k as isize, 1, b.as_ptr(), 1, k as isize, beta,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// C (m x n) = A^T . B where A is stored (k x m) row-major.
pub(crate) fn sgemm_tn(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], beta: f32, c: &mut [f32]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    unsafe {
        matrixmultiply::sgemm(
            m, k, n, 1.0, a.as_ptr(), 1, m as isize, b.as_ptr(), n as isize, 1, beta,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// Static dims of one conv2d application.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvDims {
    pub fn in_item(&self) -> usize {
        self.c_in * self.h * self.w
    }
    pub fn out_item(&self) -> usize {
        self.c_out * self.h_out * self.w_out
    }
    pub fn patch(&self) -> usize {
        self.c_in * self.k * self.k
    }
    pub fn cols(&self) -> usize {
        self.h_out * self.w_out
    }
    fn is_identity_layout(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfold one image (c_in x h x w) into (c_in*k*k) x (h_out*w_out) patches.
fn im2col(input: &[f32], d: &ConvDims, cols: &mut [f32]) {
    let (h, w, k, s, pad) = (d.h as isize, d.w as isize, d.k, d.stride as isize, d.pad as isize);
    cols.fill(0.0);
    for c in 0..d.c_in {
        let plane = &input[c * d.h * d.w..(c + 1) * d.h * d.w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * d.cols()..(row + 1) * d.cols()];
                for oy in 0..d.h_out {
                    let iy = oy as isize * s - pad + ki as isize;
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    let src_row = &plane[(iy as usize) * d.w..(iy as usize + 1) * d.w];
                    let dst_row = &mut dst[oy * d.w_out..(oy + 1) * d.w_out];
                    if s == 1 {
                        // contiguous run of valid ix = ox - pad + kj
                        let off = kj as isize - pad;
                        let ox_lo = (-off).max(0) as usize;
                        let ox_hi = ((w - off).min(d.w_out as isize)).max(0) as usize;
                        if ox_lo < ox_hi {
                            let ix_lo = (ox_lo as isize + off) as usize;
                            dst_row[ox_lo..ox_hi]
                                .copy_from_slice(&src_row[ix_lo..ix_lo + (ox_hi - ox_lo)]);
                        }
                    } else {
                        for ox in 0..d.w_out {
                            let ix = ox as isize * s - pad + kj as isize;
                            if ix >= 0 && ix < w {
                                dst_row[ox] = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Fold patch gradients back onto the input image (scatter-add inverse of im2col).
fn col2im(cols: &[f32], d: &ConvDims, grad_input: &mut [f32]) {
    let (h, w, k, s, pad) = (d.h as isize, d.w as isize, d.k, d.stride as isize, d.pad as isize);
    for c in 0..d.c_in {
        let plane = &mut grad_input[c * d.h * d.w..(c + 1) * d.h * d.w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * d.cols()..(row + 1) * d.cols()];
                for oy in 0..d.h_out {
                    let iy = oy as isize * s - pad + ki as isize;
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    let dst_row = &mut plane[(iy as usize) * d.w..(iy as usize + 1) * d.w];
                    let src_row = &src[oy * d.w_out..(oy + 1) * d.w_out];
                    for ox in 0..d.w_out {
                        let ix = ox as isize * s - pad + kj as isize;
                        if ix >= 0 && ix < w {
                            dst_row[ix as usize] += src_row[ox];
                        }
                    }
                }
            }
        }
    }
}

/// Batched cross-correlation: out[b] = weight (c_out x patch) . im2col(input[b]).
pub(crate) fn conv2d_forward(input: &[f32], weight: &[f32], d: &ConvDims, out: &mut [f32]) {
    let in_item = d.in_item();
    let out_item = d.out_item();
    out.par_chunks_mut(out_item)
        .zip(input.par_chunks(in_item))
        .for_each(|(out_b, in_b)| {
            if d.is_identity_layout() {
                sgemm_nn(d.c_out, d.patch(), d.cols(), weight, in_b, 0.0, out_b);
            } else {
                let mut cols = vec![0.0f32; d.patch() * d.cols()];
                im2col(in_b, d, &mut cols);
                sgemm_nn(d.c_out, d.patch(), d.cols(), weight, &cols, 0.0, out_b);
            }
        });
}

/// Gradients of conv2d w.r.t. input and weight. `grad_output` is
/// batch x c_out x h_out x w_out. im2col patches are recomputed rather than
/// cached from the forward pass; the weight gradient is reduced over the
/// batch in index order.
pub(crate) fn conv2d_backward(
    input: &[f32],
    weight: &[f32],
    grad_output: &[f32],
    d: &ConvDims,
    want_input: bool,
    want_weight: bool,
) -> (Option<Vec<f32>>, Option<Vec<f32>>) {
    let in_item = d.in_item();
    let out_item = d.out_item();

    let grad_input = want_input.then(|| {
        let mut gi = vec![0.0f32; d.batch * in_item];
        gi.par_chunks_mut(in_item)
            .zip(grad_output.par_chunks(out_item))
            .for_each(|(gi_b, go_b)| {
                if d.is_identity_layout() {
                    sgemm_tn(d.patch(), d.c_out, d.cols(), weight, go_b, 0.0, gi_b);
                } else {
                    let mut cols_g = vec![0.0f32; d.patch() * d.cols()];
                    sgemm_tn(d.patch(), d.c_out, d.cols(), weight, go_b, 0.0, &mut cols_g);
                    col2im(&cols_g, d, gi_b);
                }
            });
        gi
    });

    let grad_weight = want_weight.then(|| {
        let partials: Vec<Vec<f32>> = (0..d.batch)
            .into_par_iter()
            .map(|b| {
                let in_b = &input[b * in_item..(b + 1) * in_item];
                let go_b = &grad_output[b * out_item..(b + 1) * out_item];
                let mut gw = vec![0.0f32; d.c_out * d.patch()];
                if d.is_identity_layout() {
                    sgemm_nt(d.c_out, d.cols(), d.patch(), go_b, in_b, 0.0, &mut gw);
                } else {
                    let mut cols = vec![0.0f32; d.patch() * d.cols()];
                    im2col(in_b, d, &mut cols);
                    sgemm_nt(d.c_out, d.cols(), d.patch(), go_b, &cols, 0.0, &mut gw);
                }
                gw
            })
            .collect();
        let mut gw = vec![0.0f32; d.c_out * d.patch()];
        for part in &partials {
            for (acc, p) in gw.iter_mut().zip(part) {
                *acc += *p;
            }
        }
        gw
    });

    (grad_input, grad_weight)
}

/// Nearest-neighbor x2 upsampling over planes (n_planes = batch * channels).
pub(crate) fn up2x_forward(input: &[f32], n_planes: usize, h: usize, w: usize, out: &mut [f32]) {
    for p in 0..n_planes {
        let src = &input[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * 4 * h * w..(p + 1) * 4 * h * w];
        for y in 0..h {
            let row = &src[y * w..(y + 1) * w];
            for (x, &v) in row.iter().enumerate() {
                let base = (2 * y) * (2 * w) + 2 * x;
                dst[base] = v;
                dst[base + 1] = v;
                dst[base + 2 * w] = v;
                dst[base + 2 * w + 1] = v;
            }
        }
    }
}

pub(crate) fn up2x_backward(grad_out: &[f32], n_planes: usize, h: usize, w: usize, grad_in: &mut [f32]) {
    for p in 0..n_planes {
        let g = &grad_out[p * 4 * h * w..(p + 1) * 4 * h * w];
        let dst = &mut grad_in[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let base = (2 * y) * (2 * w) + 2 * x;
                dst[y * w + x] += g[base] + g[base + 1] + g[base + 2 * w] + g[base + 2 * w + 1];
            }
        }
    }
}

/// 2x2 mean pooling over planes. h and w are the input extents (even).
pub(crate) fn down2x_forward(input: &[f32], n_planes: usize, h: usize, w: usize, out: &mut [f32]) {
    let (ho, wo) = (h / 2, w / 2);
    for p in 0..n_planes {
        let src = &input[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
        for y in 0..ho {
            for x in 0..wo {
                let base = (2 * y) * w + 2 * x;
                dst[y * wo + x] =
                    0.25 * (src[base] + src[base + 1] + src[base + w] + src[base + w + 1]);
            }
        }
    }
}

pub(crate) fn down2x_backward(grad_out: &[f32], n_planes: usize, h: usize, w: usize, grad_in: &mut [f32]) {
    let (ho, wo) = (h / 2, w / 2);
    for p in 0..n_planes {
        let g = &grad_out[p * ho * wo..(p + 1) * ho * wo];
        let dst = &mut grad_in[p * h * w..(p + 1) * h * w];
        for y in 0..ho {
            for x in 0..wo {
                let q = 0.25 * g[y * wo + x];
                let base = (2 * y) * w + 2 * x;
                dst[base] += q;
                dst[base + 1] += q;
                dst[base + w] += q;
                dst[base + w + 1] += q;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn out_extent_integral_only() {
        assert_eq!(conv_out_extent(8, 3, 1, 1), Some(8));
        assert_eq!(conv_out_extent(8, 3, 2, 1), None); // (8+2-3)=7 not divisible by 2
        assert_eq!(conv_out_extent(8, 3, 2, 0), None);
        assert_eq!(conv_out_extent(9, 3, 2, 0), Some(4));
        assert_eq!(conv_out_extent(2, 5, 1, 0), None);
    }

    #[test]
    fn gemm_variants_agree() {
        let a: Vec<f32> = (0..6).map(|i| i as f32).collect(); // 2x3
        let b: Vec<f32> = (0..12).map(|i| (i as f32) * 0.5).collect(); // 3x4
        let mut c_nn = vec![0.0; 8];
        sgemm_nn(2, 3, 4, &a, &b, 0.0, &mut c_nn);

        // B^T stored 4x3
        let mut bt = vec![0.0; 12];
        for i in 0..3 {
            for j in 0..4 {
                bt[j * 3 + i] = b[i * 4 + j];
            }
        }
        let mut c_nt = vec![0.0; 8];
        sgemm_nt(2, 3, 4, &a, &bt, 0.0, &mut c_nt);
        assert_eq!(c_nn, c_nt);

        // A^T stored 3x2
        let mut at = vec![0.0; 6];
        for i in 0..2 {
            for j in 0..3 {
                at[j * 2 + i] = a[i * 3 + j];
            }
        }
        let mut c_tn = vec![0.0; 8];
        sgemm_tn(2, 3, 4, &at, &b, 0.0, &mut c_tn);
        assert_eq!(c_nn, c_tn);
    }

    #[test]
    fn up_then_down_is_identity() {
        let src: Vec<f32> = (0..2 * 3 * 4).map(|i| i as f32 * 0.3 - 2.0).collect();
        let mut up = vec![0.0; 2 * 6 * 8];
        up2x_forward(&src, 2, 3, 4, &mut up);
        let mut back = vec![0.0; src.len()];
        down2x_forward(&up, 2, 6, 8, &mut back);
        assert_eq!(src, back);
    }
}
