//! The four networks: encoder, flow-field generator, refinement network and
//! discriminator, parameterized by resolution and a channel plan.
//!
//! The encoder emits a latent code plus an appearance feature pyramid from
//! 4x4 up to full resolution. The generator mirrors it in reverse: a learned
//! 4x4 constant is pushed through style-modulated 3x3 convolutions (weight
//! demodulation, nearest upsampling between blocks), each block emitting a
//! 3-channel map split into a 2-channel flow field and a 1-channel mask. The
//! refinement network turns masked-warped features into an RGB ladder
//! o_i = f(x'_i) + g(o_{i-1}) with o_0 = 0.

use rand::RngCore;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{BoundParams, ParamStore};
use crate::tensor::Tensor;

/// Negative slope used by every hidden activation.
pub const LEAKY_SLOPE: f32 = 0.2;
/// Flow offsets are squashed into [-FLOW_RANGE, FLOW_RANGE] normalized units.
pub const FLOW_RANGE: f32 = 2.0;
/// Demodulation epsilon.
pub const DEMOD_EPS: f32 = 1e-8;

/// How the driving latent turns into a latent displacement.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PathMode {
    /// Magnitudes from the head combine an orthonormalized direction matrix.
    Dictionary,
    /// The head emits the displacement directly (ablation).
    Direct,
}

/// Static architecture description.
#[derive(Clone, Debug)]
pub struct NetConfig {
    pub resolution: usize,
    pub latent_dim: usize,
    pub dict_size: usize,
    pub base_channels: usize,
    pub max_channels: usize,
    pub mlp_hidden: usize,
    pub path: PathMode,
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.resolution.is_power_of_two() || self.resolution < 8 {
            return Err(Error::Invalid(format!(
                "resolution {} must be a power of two >= 8",
                self.resolution
            )));
        }
        for (name, v) in [
            ("latent_dim", self.latent_dim),
            ("dict_size", self.dict_size),
            ("base_channels", self.base_channels),
            ("max_channels", self.max_channels),
            ("mlp_hidden", self.mlp_hidden),
        ] {
            if v == 0 {
                return Err(Error::Invalid(format!("{name} must be positive")));
            }
        }
        if self.dict_size > self.latent_dim {
            return Err(Error::Invalid(format!(
                "dict_size {} exceeds latent_dim {}",
                self.dict_size, self.latent_dim
            )));
        }
        Ok(())
    }

    /// Pyramid scales, coarse to fine: 4, 8, ..., resolution.
    pub fn scales(&self) -> Vec<usize> {
        let mut s = 4;
        let mut out = Vec::new();
        while s <= self.resolution {
            out.push(s);
            s *= 2;
        }
        out
    }

    /// Channel count at a pyramid scale.
    pub fn channels(&self, scale: usize) -> usize {
        (self.base_channels * self.resolution / scale).min(self.max_channels)
    }

    /// Width of the inpainting bottleneck at a scale.
    fn refine_mid(&self, scale: usize) -> usize {
        (self.channels(scale) / 4).max(8)
    }

    /// Discriminator channel count at a scale: half the encoder plan. A full
    /// width discriminator saturates against the generator at this scale and
    /// the adversarial term then dominates training.
    pub fn disc_channels(&self, scale: usize) -> usize {
        (self.channels(scale) / 2).max(8)
    }

    /// Output width of the path head: magnitudes or a direct displacement.
    pub fn head_out(&self) -> usize {
        match self.path {
            PathMode::Dictionary => self.dict_size,
            PathMode::Direct => self.latent_dim,
        }
    }
}

fn conv_init(
    store: &mut ParamStore,
    name: &str,
    c_out: usize,
    c_in: usize,
    k: usize,
    gain: f32,
    bias: bool,
    rng: &mut impl RngCore,
) -> Result<()> {
    let fan_in = (c_in * k * k) as f32;
    let w = Tensor::randn(&[c_out, c_in, k, k], gain / fan_in.sqrt(), rng);
    store.add(format!("{name}.w"), w, true)?;
    if bias {
        store.add(format!("{name}.b"), Tensor::zeros(&[c_out]), true)?;
    }
    Ok(())
}

fn dense_init(
    store: &mut ParamStore,
    name: &str,
    f_out: usize,
    f_in: usize,
    gain: f32,
    rng: &mut impl RngCore,
) -> Result<()> {
    let w = Tensor::randn(&[f_out, f_in], gain / (f_in as f32).sqrt(), rng);
    store.add(format!("{name}.w"), w, true)?;
    store.add(format!("{name}.b"), Tensor::zeros(&[f_out]), true)?;
    Ok(())
}

const GAIN_LEAKY: f32 = std::f32::consts::SQRT_2;
const GAIN_LINEAR: f32 = 1.0;

/// Create every network parameter in a fixed order. `rng` drives the draws.
pub fn init_params(cfg: &NetConfig, store: &mut ParamStore, rng: &mut impl RngCore) -> Result<()> {
    cfg.validate()?;
    let scales = cfg.scales();
    let n_scales = scales.len();

    // encoder: stem at full resolution, then pool-first residual blocks down to 4x4
    conv_init(store, "enc.stem", cfg.channels(cfg.resolution), 3, 3, GAIN_LEAKY, true, rng)?;
    for i in 0..n_scales - 1 {
        let s_in = scales[n_scales - 1 - i];
        let s_out = s_in / 2;
        let (ci, co) = (cfg.channels(s_in), cfg.channels(s_out));
        conv_init(store, &format!("enc.down{i}.c1"), co, ci, 3, GAIN_LEAKY, true, rng)?;
        conv_init(store, &format!("enc.down{i}.c2"), co, co, 3, GAIN_LEAKY, true, rng)?;
        conv_init(store, &format!("enc.down{i}.skip"), co, ci, 1, GAIN_LINEAR, false, rng)?;
    }
    dense_init(store, "enc.latent", cfg.latent_dim, cfg.channels(4) * 16, GAIN_LINEAR, rng)?;

    // path head: 5 dense layers, hidden activations between 1-4, linear output
    let dims = [
        (cfg.mlp_hidden, cfg.latent_dim),
        (cfg.mlp_hidden, cfg.mlp_hidden),
        (cfg.mlp_hidden, cfg.mlp_hidden),
        (cfg.mlp_hidden, cfg.mlp_hidden),
        (cfg.head_out(), cfg.mlp_hidden),
    ];
    for (i, (fo, fi)) in dims.iter().enumerate() {
        let gain = if i == dims.len() - 1 { GAIN_LINEAR } else { GAIN_LEAKY };
        dense_init(store, &format!("mot.mlp.l{i}"), *fo, *fi, gain, rng)?;
    }
    if cfg.path == PathMode::Dictionary {
        let std = 1.0 / (cfg.latent_dim as f32).sqrt();
        store.add("mot.dict.raw", Tensor::randn(&[cfg.dict_size, cfg.latent_dim], std, rng), true)?;
    }

    // flow generator: learned 4x4 constant, one styled block per scale
    store.add("gen.const", Tensor::randn(&[cfg.channels(4), 4, 4], 1.0, rng), true)?;
    let mut c_prev = cfg.channels(4);
    for (i, &s) in scales.iter().enumerate() {
        let co = cfg.channels(s);
        dense_init(store, &format!("gen.b{i}.style"), c_prev, cfg.latent_dim, GAIN_LINEAR, rng)?;
        store.set_value(&format!("gen.b{i}.style.b"), Tensor::filled(&[c_prev], 1.0))?;
        conv_init(store, &format!("gen.b{i}.conv"), co, c_prev, 3, GAIN_LEAKY, true, rng)?;
        conv_init(store, &format!("gen.b{i}.head"), 3, co, 3, GAIN_LINEAR, true, rng)?;
        c_prev = co;
    }

    // refinement ladder
    for (i, &s) in scales.iter().enumerate() {
        let c = cfg.channels(s);
        let mid = cfg.refine_mid(s);
        conv_init(store, &format!("ref.b{i}.f1"), mid, c, 3, GAIN_LEAKY, true, rng)?;
        conv_init(store, &format!("ref.b{i}.f2"), 3, mid, 3, GAIN_LINEAR, true, rng)?;
        if i > 0 {
            conv_init(store, &format!("ref.b{i}.g"), 3, 3, 1, GAIN_LINEAR, false, rng)?;
        }
    }

    // discriminator: 4x4 stride-2 blocks down to 4x4, then a dense logit
    let mut c_in = 3;
    let mut s = cfg.resolution;
    let mut i = 0;
    while s > 4 {
        let co = cfg.disc_channels(s / 2);
        conv_init(store, &format!("disc.b{i}"), co, c_in, 4, GAIN_LEAKY, true, rng)?;
        c_in = co;
        s /= 2;
        i += 1;
    }
    dense_init(store, "disc.out", 1, c_in * 16, GAIN_LINEAR, rng)?;
    Ok(())
}

/// Encoder output: latent code (B x N) and the appearance feature pyramid,
/// ordered coarse to fine (4x4 first).
pub struct EncoderOut {
    pub latent: Var,
    pub features: Vec<Var>,
}

fn expect_image(g: &Graph, op: &'static str, x: Var, res: usize) -> Result<Var> {
    match g.value(x).shape() {
        [_, 3, h, w] if *h == res && *w == res => Ok(x),
        [3, h, w] if *h == res && *w == res => Ok(x),
        s => Err(Error::shape(op, format!("expected (B x) 3 x {res} x {res}, got {s:?}"))),
    }
}

fn as_batched(g: &mut Graph, x: Var) -> Result<Var> {
    let s = g.value(x).shape().to_vec();
    if s.len() == 3 {
        g.reshape(x, &[1, s[0], s[1], s[2]])
    } else {
        Ok(x)
    }
}

/// Encode an image into its latent code and feature pyramid. The same network
/// serves source and driving images.
pub fn encode(g: &mut Graph, p: &BoundParams, cfg: &NetConfig, x: Var) -> Result<EncoderOut> {
    expect_image(g, "encode", x, cfg.resolution)?;
    let x = as_batched(g, x)?;
    let batch = g.value(x).shape()[0];
    let scales = cfg.scales();
    let n_scales = scales.len();

    let mut h =
        g.conv2d_act(x, p.var("enc.stem.w")?, Some(p.var("enc.stem.b")?), 1, 1, LEAKY_SLOPE)?;
    let mut fine_to_coarse = vec![h];
    for i in 0..n_scales - 1 {
        let pooled = g.resample2x_down(h)?;
        let a1 = g.conv2d_act(
            pooled,
            p.var(&format!("enc.down{i}.c1.w"))?,
            Some(p.var(&format!("enc.down{i}.c1.b"))?),
            1,
            1,
            LEAKY_SLOPE,
        )?;
        let a2 = g.conv2d_act(
            a1,
            p.var(&format!("enc.down{i}.c2.w"))?,
            Some(p.var(&format!("enc.down{i}.c2.b"))?),
            1,
            1,
            LEAKY_SLOPE,
        )?;
        let skip = g.conv2d(pooled, p.var(&format!("enc.down{i}.skip.w"))?, None, 1, 0)?;
        h = g.add(a2, skip)?;
        fine_to_coarse.push(h);
    }
    let flat = g.reshape(h, &[batch, cfg.channels(4) * 16])?;
    let latent = g.affine(flat, p.var("enc.latent.w")?, p.var("enc.latent.b")?)?;
    fine_to_coarse.reverse();
    Ok(EncoderOut { latent, features: fine_to_coarse })
}

/// Style-modulated 3x3 convolution with weight demodulation, computed as
/// input scaling -> shared conv -> per-channel demodulation.
pub fn modulated_conv(g: &mut Graph, p: &BoundParams, prefix: &str, x: Var, z: Var) -> Result<Var> {
    let style =
        g.affine(z, p.var(&format!("{prefix}.style.w"))?, p.var(&format!("{prefix}.style.b"))?)?;
    let w = p.var(&format!("{prefix}.conv.w"))?;
    let [c_out, c_in, k, _] = g.value(w).shape().to_vec()[..] else {
        return Err(Error::shape("modulated_conv", "weight must be rank 4".to_string()));
    };
    let xm = g.scale_channels(x, style)?;
    let y = g.conv2d(xm, w, None, 1, 1)?;
    // demodulation: 1 / sqrt(sum_[in,k,k] (w * s)^2 + eps), per output channel
    let wsq = g.mul(w, w)?;
    let wsq2 = g.reshape(wsq, &[c_out * c_in, k * k])?;
    let wsum = g.row_sums(wsq2)?;
    let wsum = g.reshape(wsum, &[c_out, c_in])?;
    let ssq = g.mul(style, style)?;
    let dsq = g.matmul_nt(ssq, wsum)?;
    let dcoef = g.rsqrt_eps(dsq, DEMOD_EPS)?;
    let y = g.scale_channels(y, dcoef)?;
    g.add_bias_channel_act(y, p.var(&format!("{prefix}.conv.b"))?, LEAKY_SLOPE)
}

/// Per-scale dense flow and mask pair, coarse to fine.
pub struct FlowPyramid {
    pub scales: Vec<usize>,
    /// (flow B x 2 x s x s in [-FLOW_RANGE, FLOW_RANGE], mask B x 1 x s x s in [0, 1])
    pub levels: Vec<(Var, Var)>,
}

/// Decode a target latent into the flow pyramid.
pub fn generate_flow(g: &mut Graph, p: &BoundParams, cfg: &NetConfig, z: Var) -> Result<FlowPyramid> {
    let zs = g.value(z).shape().to_vec();
    if zs.len() != 2 || zs[1] != cfg.latent_dim {
        return Err(Error::shape(
            "generate_flow",
            format!("latent {zs:?}, expected [batch, {}]", cfg.latent_dim),
        ));
    }
    let batch = zs[0];
    let scales = cfg.scales();
    let mut x = g.repeat_batch(p.var("gen.const")?, batch)?;
    let mut levels = Vec::with_capacity(scales.len());
    for (i, _s) in scales.iter().enumerate() {
        if i > 0 {
            x = g.resample2x_up(x)?;
        }
        x = modulated_conv(g, p, &format!("gen.b{i}"), x, z)?;
        let head = g.conv2d(
            x,
            p.var(&format!("gen.b{i}.head.w"))?,
            Some(p.var(&format!("gen.b{i}.head.b"))?),
            1,
            1,
        )?;
        let flow_raw = g.slice_channels(head, 0, 2)?;
        let flow_t = g.tanh(flow_raw)?;
        let flow = g.scale(flow_t, FLOW_RANGE)?;
        let mask_raw = g.slice_channels(head, 2, 3)?;
        let mask = g.sigmoid(mask_raw)?;
        levels.push((flow, mask));
    }
    Ok(FlowPyramid { scales, levels })
}

/// One refinement stage: the inpainted contribution, the upsampled carry from
/// the previous stage (None at the base), and their sum.
pub struct RefineStage {
    pub rgb: Var,
    pub inpaint: Var,
    pub carry: Option<Var>,
}

/// The RGB ladder: per-stage outputs plus the squashed final image.
pub struct RgbLadder {
    pub stages: Vec<RefineStage>,
    pub image: Var,
}

/// Accumulate masked-warped features into the output image:
/// o_i = f(x'_i) + g(o_{i-1}), o_0 = 0, image = tanh(o_last).
pub fn refine(g: &mut Graph, p: &BoundParams, cfg: &NetConfig, warped: &[Var]) -> Result<RgbLadder> {
    let scales = cfg.scales();
    if warped.len() != scales.len() {
        return Err(Error::shape(
            "refine",
            format!("{} warped maps for {} scales", warped.len(), scales.len()),
        ));
    }
    for (x, &s) in warped.iter().zip(&scales) {
        let shape = g.value(*x).shape();
        if shape.len() != 4 || shape[1] != cfg.channels(s) || shape[2] != s || shape[3] != s {
            return Err(Error::shape(
                "refine",
                format!("warped map {shape:?}, expected [b, {}, {s}, {s}]", cfg.channels(s)),
            ));
        }
    }
    let mut stages: Vec<RefineStage> = Vec::with_capacity(scales.len());
    for (i, x) in warped.iter().enumerate() {
        let a = g.conv2d_act(
            *x,
            p.var(&format!("ref.b{i}.f1.w"))?,
            Some(p.var(&format!("ref.b{i}.f1.b"))?),
            1,
            1,
            LEAKY_SLOPE,
        )?;
        let inpaint = g.conv2d(
            a,
            p.var(&format!("ref.b{i}.f2.w"))?,
            Some(p.var(&format!("ref.b{i}.f2.b"))?),
            1,
            1,
        )?;
        let (rgb, carry) = if i == 0 {
            (inpaint, None)
        } else {
            let prev = stages[i - 1].rgb;
            let up = g.conv2d(prev, p.var(&format!("ref.b{i}.g.w"))?, None, 1, 0)?;
            let carry = g.resample2x_up(up)?;
            (g.add(inpaint, carry)?, Some(carry))
        };
        stages.push(RefineStage { rgb, inpaint, carry });
    }
    let image = g.tanh(stages.last().expect("at least one scale").rgb)?;
    Ok(RgbLadder { stages, image })
}

/// Strided convolution stack to one logit per batch item (B x 1).
pub fn discriminate(g: &mut Graph, p: &BoundParams, cfg: &NetConfig, x: Var) -> Result<Var> {
    expect_image(g, "discriminate", x, cfg.resolution)?;
    let mut h = as_batched(g, x)?;
    let batch = g.value(h).shape()[0];
    let mut s = cfg.resolution;
    let mut i = 0;
    while s > 4 {
        h = g.conv2d_act(
            h,
            p.var(&format!("disc.b{i}.w"))?,
            Some(p.var(&format!("disc.b{i}.b"))?),
            2,
            1,
            LEAKY_SLOPE,
        )?;
        s /= 2;
        i += 1;
    }
    let c_final = g.value(h).shape()[1];
    let flat = g.reshape(h, &[batch, c_final * 16])?;
    g.affine(flat, p.var("disc.out.w")?, p.var("disc.out.b")?)
}
