//! Training losses: pixel reconstruction, multi-scale perceptual distance
//! through a frozen feature extractor, and the non-saturating adversarial
//! pair.
//!
//! The perceptual extractor is a fixed randomly-initialized 4-stage
//! convolutional net (no external pretrained weights); its parameters are
//! drawn once from a seed recorded in the checkpoint and never updated, so
//! the loss is reproducible.

use rand::RngCore;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nets::LEAKY_SLOPE;
use crate::params::{BoundParams, ParamStore};
use crate::tensor::Tensor;

/// Stage widths of the frozen extractor.
const EXTRACTOR_CHANNELS: [usize; 4] = [16, 32, 64, 128];
/// Resolutions in the image pyramid: full, /2, /4, /8.
pub const PYRAMID_LEVELS: usize = 4;

/// Scalar components of one generator-side loss evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub recon: f32,
    pub perceptual: f32,
    pub adversarial: f32,
    pub total: f32,
    pub lambda: f32,
}

/// Create the frozen extractor parameters (prefix `percep.`, trainable=false).
pub fn init_extractor(store: &mut ParamStore, rng: &mut impl RngCore) -> Result<()> {
    let mut c_in = 3;
    for (i, &c_out) in EXTRACTOR_CHANNELS.iter().enumerate() {
        let fan_in = (c_in * 9) as f32;
        let w = Tensor::randn(&[c_out, c_in, 3, 3], (2.0f32).sqrt() / fan_in.sqrt(), rng);
        store.add(format!("percep.s{i}.w"), w, false)?;
        store.add(format!("percep.s{i}.b"), Tensor::zeros(&[c_out]), false)?;
        c_in = c_out;
    }
    Ok(())
}

/// Stage outputs of the frozen extractor for one image batch.
fn extractor_stages(g: &mut Graph, p: &BoundParams, x: Var) -> Result<Vec<Var>> {
    let mut h = x;
    let mut out = Vec::with_capacity(EXTRACTOR_CHANNELS.len());
    for i in 0..EXTRACTOR_CHANNELS.len() {
        h = g.conv2d_act(
            h,
            p.var(&format!("percep.s{i}.w"))?,
            Some(p.var(&format!("percep.s{i}.b"))?),
            1,
            1,
            LEAKY_SLOPE,
        )?;
        out.push(h);
        let spatial = g.value(h).shape()[2];
        if i + 1 < EXTRACTOR_CHANNELS.len() && spatial > 1 {
            h = g.resample2x_down(h)?;
        }
    }
    Ok(out)
}

/// Mean absolute pixel difference.
pub fn recon_loss(g: &mut Graph, generated: Var, target: Var) -> Result<Var> {
    if g.value(generated).shape() != g.value(target).shape() {
        return Err(Error::shape(
            "recon_loss",
            format!("{:?} vs {:?}", g.value(generated).shape(), g.value(target).shape()),
        ));
    }
    let d = g.sub(generated, target)?;
    let a = g.abs(d)?;
    g.mean_all(a)
}

/// Sum of mean-abs feature differences over a 4-resolution image pyramid and
/// the extractor's 4 stages.
pub fn perceptual_loss(g: &mut Graph, p: &BoundParams, generated: Var, target: Var) -> Result<Var> {
    if g.value(generated).shape() != g.value(target).shape() {
        return Err(Error::shape(
            "perceptual_loss",
            format!("{:?} vs {:?}", g.value(generated).shape(), g.value(target).shape()),
        ));
    }
    let mut gi = generated;
    let mut ti = target;
    let mut total: Option<Var> = None;
    for level in 0..PYRAMID_LEVELS {
        let fg = extractor_stages(g, p, gi)?;
        let ft = extractor_stages(g, p, ti)?;
        for (a, b) in fg.iter().zip(&ft) {
            let d = g.sub(*a, *b)?;
            let m = g.abs(d)?;
            let term = g.mean_all(m)?;
            total = Some(match total {
                Some(t) => g.add(t, term)?,
                None => term,
            });
        }
        if level + 1 < PYRAMID_LEVELS {
            gi = g.resample2x_down(gi)?;
            ti = g.resample2x_down(ti)?;
        }
    }
    Ok(total.expect("at least one pyramid level"))
}

/// Generator-side non-saturating loss: mean softplus(-logit).
pub fn adversarial_g_loss(g: &mut Graph, fake_logit: Var) -> Result<Var> {
    let n = g.neg(fake_logit)?;
    let s = g.softplus(n)?;
    g.mean_all(s)
}

/// Discriminator loss: mean softplus(-real) + mean softplus(fake).
pub fn discriminator_loss(g: &mut Graph, real_logit: Var, fake_logit: Var) -> Result<Var> {
    let nr = g.neg(real_logit)?;
    let sr = g.softplus(nr)?;
    let real_term = g.mean_all(sr)?;
    let sf = g.softplus(fake_logit)?;
    let fake_term = g.mean_all(sf)?;
    g.add(real_term, fake_term)
}

/// total = recon + lambda * perceptual + adversarial.
pub fn total_loss(g: &mut Graph, recon: Var, perceptual: Var, adversarial: Var, lambda: f32) -> Result<Var> {
    if !(lambda > 0.0) {
        return Err(Error::Invalid(format!("lambda must be positive, got {lambda}")));
    }
    let weighted = g.scale(perceptual, lambda)?;
    let partial = g.add(recon, weighted)?;
    g.add(partial, adversarial)
}

/// Collect the scalar values of one loss evaluation.
pub fn breakdown(
    g: &Graph,
    recon: Var,
    perceptual: Var,
    adversarial: Var,
    total: Var,
    lambda: f32,
) -> Result<LossBreakdown> {
    Ok(LossBreakdown {
        recon: g.value(recon).item()?,
        perceptual: g.value(perceptual).item()?,
        adversarial: g.value(adversarial).item()?,
        total: g.value(total).item()?,
        lambda,
    })
}

/// Plain (graph-free) mean absolute difference, for evaluation reports.
pub fn l1_distance(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.mean_abs_diff(b)
}

/// PSNR in dB over the [-1, 1] pixel range (peak-to-peak 2), capped at 99.
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape("psnr", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let mse: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| {
            let d = *x as f64 - *y as f64;
            d * d
        })
        .sum::<f64>()
        / a.len() as f64;
    if mse == 0.0 {
        return Ok(99.0);
    }
    Ok((10.0 * (4.0 / mse).log10()).min(99.0))
}
