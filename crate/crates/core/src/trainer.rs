//! Self-supervised training loop: alternating discriminator/generator Adam
//! updates over same-sequence frame pairs, with the dictionary
//! re-orthonormalized in every forward pass.

use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{self, Dataset};
use crate::error::{Error, Result};
use crate::graph::{Gradients, Graph};
use crate::losses::{self, LossBreakdown};
use crate::model::{self, Model};
use crate::nets::{self, NetConfig, PathMode};
use crate::params::{BoundParams, ParamStore};
use crate::tensor::Tensor;

/// Adam hyperparameters (bias-corrected form).
#[derive(Clone, Copy, Debug)]
pub struct AdamHyper {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl AdamHyper {
    pub fn with_lr(lr: f32) -> Self {
        AdamHyper { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// One bias-corrected Adam update on a flat parameter. `t` is the 1-based
/// step count. Rejects non-finite gradients without touching the parameter.
pub fn adam_step(
    value: &mut [f32],
    grad: &[f32],
    m: &mut [f32],
    v: &mut [f32],
    t: u64,
    h: &AdamHyper,
) -> Result<()> {
    if grad.len() != value.len() || m.len() != value.len() || v.len() != value.len() {
        return Err(Error::shape(
            "adam_step",
            format!("param {} vs grad {} / m {} / v {}", value.len(), grad.len(), m.len(), v.len()),
        ));
    }
    if t == 0 {
        return Err(Error::Invalid("adam_step: t must be >= 1".into()));
    }
    if !grad.iter().all(|g| g.is_finite()) {
        return Err(Error::NonFinite("gradient".into()));
    }
    let bc1 = 1.0 - (h.beta1 as f64).powi(t as i32);
    let bc2 = 1.0 - (h.beta2 as f64).powi(t as i32);
    for i in 0..value.len() {
        m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * grad[i];
        v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * grad[i] * grad[i];
        let mhat = m[i] as f64 / bc1;
        let vhat = v[i] as f64 / bc2;
        value[i] -= (h.lr as f64 * mhat / (vhat.sqrt() + h.eps as f64)) as f32;
    }
    Ok(())
}

/// Adam over a fixed, ordered set of named parameters.
#[derive(Clone, Debug)]
pub struct Optimizer {
    names: Vec<String>,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    pub t: u64,
    pub hyper: AdamHyper,
}

impl Optimizer {
    pub fn new(store: &ParamStore, pred: impl Fn(&str) -> bool, hyper: AdamHyper) -> Self {
        let names = store.trainable_names(pred);
        let (m, v) = names
            .iter()
            .map(|n| {
                let len = store.get(n).expect("trainable name exists").len();
                (vec![0.0f32; len], vec![0.0f32; len])
            })
            .unzip();
        Optimizer { names, m, v, t: 0, hyper }
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn moments(&self, i: usize) -> (&[f32], &[f32]) {
        (&self.m[i], &self.v[i])
    }

    pub fn set_moments(&mut self, i: usize, m: Vec<f32>, v: Vec<f32>) -> Result<()> {
        if m.len() != self.m[i].len() || v.len() != self.v[i].len() {
            return Err(Error::Checkpoint(format!("moment size mismatch for {}", self.names[i])));
        }
        self.m[i] = m;
        self.v[i] = v;
        Ok(())
    }

    /// Fetch gradients, validate finiteness, optionally clip by global norm,
    /// then update every parameter. Nothing is modified when any gradient is
    /// non-finite.
    pub fn apply(
        &mut self,
        store: &mut ParamStore,
        fetch: impl Fn(&str) -> Result<Tensor>,
        clip_norm: Option<f32>,
    ) -> Result<()> {
        let mut grads = Vec::with_capacity(self.names.len());
        for name in &self.names {
            let g = fetch(name)?;
            if !g.all_finite() {
                return Err(Error::NonFinite(format!("gradient of {name}")));
            }
            grads.push(g);
        }
        let scale = match clip_norm {
            Some(max) => {
                let sq: f64 = grads
                    .iter()
                    .flat_map(|g| g.data().iter())
                    .map(|v| (*v as f64) * (*v as f64))
                    .sum();
                let norm = sq.sqrt();
                if norm > max as f64 {
                    (max as f64 / norm) as f32
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        self.t += 1;
        for (i, name) in self.names.iter().enumerate() {
            let mut grad = grads[i].clone().into_data();
            if scale != 1.0 {
                for g in grad.iter_mut() {
                    *g *= scale;
                }
            }
            let mut value = store.get(name)?.clone();
            adam_step(value.data_mut(), &grad, &mut self.m[i], &mut self.v[i], self.t, &self.hyper)
                .map_err(|e| match e {
                    Error::NonFinite(_) => Error::NonFinite(format!("gradient of {name}")),
                    other => other,
                })?;
            store.set_value(name, value)?;
        }
        Ok(())
    }
}

/// Where training frames come from.
#[derive(Clone, Debug, PartialEq)]
pub enum DataSpec {
    Synthetic { sequences: usize, length: usize },
    Folder(PathBuf),
}

/// Everything that defines a run.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub latent_dim: usize,
    pub dict_size: usize,
    pub lambda: f32,
    pub lr: f32,
    pub batch: usize,
    pub steps: u64,
    pub seed: u64,
    pub resolution: usize,
    pub base_channels: usize,
    pub max_channels: usize,
    pub mlp_hidden: usize,
    pub clip_grads: bool,
    pub use_dictionary: bool,
    /// Discriminator learning-rate multiplier. At desk scale an equal-rate
    /// discriminator saturates and the adversarial term then dominates the
    /// generator update.
    pub d_lr_mult: f32,
    pub data: DataSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            latent_dim: 128,
            dict_size: 20,
            lambda: 10.0,
            lr: 0.002,
            batch: 8,
            steps: 2000,
            seed: 7,
            resolution: 64,
            base_channels: 16,
            max_channels: 128,
            mlp_hidden: 128,
            clip_grads: true,
            use_dictionary: true,
            d_lr_mult: 0.25,
            data: DataSpec::Synthetic { sequences: 16, length: 24 },
        }
    }
}

impl TrainConfig {
    pub fn net_config(&self) -> NetConfig {
        NetConfig {
            resolution: self.resolution,
            latent_dim: self.latent_dim,
            dict_size: self.dict_size,
            base_channels: self.base_channels,
            max_channels: self.max_channels,
            mlp_hidden: self.mlp_hidden,
            path: if self.use_dictionary { PathMode::Dictionary } else { PathMode::Direct },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.net_config().validate()?;
        if self.batch == 0 {
            return Err(Error::Invalid("batch must be positive".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Invalid(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(self.lambda > 0.0) {
            return Err(Error::Invalid(format!("lambda must be positive, got {}", self.lambda)));
        }
        if !(self.d_lr_mult > 0.0) {
            return Err(Error::Invalid(format!(
                "d_lr_mult must be positive, got {}",
                self.d_lr_mult
            )));
        }
        if let DataSpec::Synthetic { sequences, length } = &self.data {
            if *sequences == 0 || *length < 2 {
                return Err(Error::Invalid("synthetic dataset needs >= 1 sequence of >= 2 frames".into()));
            }
        }
        Ok(())
    }
}

/// Per-step scalar metrics.
#[derive(Clone, Copy, Debug)]
pub struct StepMetrics {
    pub step: u64,
    pub losses: LossBreakdown,
    pub d_loss: f32,
}

impl StepMetrics {
    /// Append-only metrics log format.
    pub fn log_line(&self) -> String {
        format!(
            "step={} recon={:.6} vgg={:.6} adv={:.6} d={:.6}",
            self.step, self.losses.recon, self.losses.perceptual, self.losses.adversarial, self.d_loss
        )
    }
}

/// Gradient clip threshold (global norm) when enabled.
pub const CLIP_NORM: f32 = 10.0;

const DATA_SEED_SALT: u64 = 0x6461_7461_5f73_6571;
const TRAIN_SEED_SALT: u64 = 0x7472_6169_6e5f_7367;

/// Mutable training state: parameters, two optimizers, RNG stream, dataset.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub net: NetConfig,
    pub store: ParamStore,
    pub opt_g: Optimizer,
    pub opt_d: Optimizer,
    pub step: u64,
    pub rng: ChaCha8Rng,
    pub dataset: Dataset,
}

fn is_disc(name: &str) -> bool {
    name.starts_with("disc.")
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let net = cfg.net_config();
        let mut store = ParamStore::new();
        let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        nets::init_params(&net, &mut store, &mut init_rng)?;
        losses::init_extractor(&mut store, &mut init_rng)?;
        let dataset = Self::build_dataset(&cfg)?;
        let opt_g = Optimizer::new(&store, |n| !is_disc(n), AdamHyper::with_lr(cfg.lr));
        let opt_d = Optimizer::new(&store, is_disc, AdamHyper::with_lr(cfg.lr * cfg.d_lr_mult));
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ TRAIN_SEED_SALT);
        Ok(Trainer { cfg, net, store, opt_g, opt_d, step: 0, rng, dataset })
    }

    pub fn build_dataset(cfg: &TrainConfig) -> Result<Dataset> {
        match &cfg.data {
            DataSpec::Synthetic { sequences, length } => data::synth_dataset(
                cfg.seed ^ DATA_SEED_SALT,
                *sequences,
                *length,
                &data::SynthParams { resolution: cfg.resolution },
            ),
            DataSpec::Folder(path) => data::load_frame_folder(path, cfg.resolution),
        }
    }

    /// Inference view of the current parameters.
    pub fn model(&self) -> Model {
        Model::new(self.net.clone(), self.store.clone())
    }

    fn clip(&self) -> Option<f32> {
        self.cfg.clip_grads.then_some(CLIP_NORM)
    }

    /// One alternating update: discriminator on real vs detached fakes, then
    /// the generator side through the full weighted loss. The fake batch is
    /// produced by a single shared forward pass whose graph the generator
    /// update extends after the discriminator step.
    pub fn train_step(&mut self) -> Result<StepMetrics> {
        let batch = self.cfg.batch;
        let mut sources = Vec::with_capacity(batch);
        let mut drivings = Vec::with_capacity(batch);
        for _ in 0..batch {
            let pair = data::sample_pair(&self.dataset, &mut self.rng)?;
            sources.push(pair.source);
            drivings.push(pair.driving);
        }
        let xs = data::stack_frames(&sources)?;
        let xd = data::stack_frames(&drivings)?;

        // generator-side forward (records the graph the G update will extend)
        let mut g = Graph::new();
        let pg = self
            .store
            .bind_where(&mut g, |e| if is_disc(&e.name) { None } else { Some(e.trainable) });
        let xs_v = g.constant(xs);
        let xd_v = g.constant(xd.clone());
        let fwd = model::reconstruct_pair(&mut g, &pg, &self.net, xs_v, xd_v)?;
        let fake = g.value(fwd.decode.image).clone();

        // discriminator update on real driving frames vs detached fakes
        let mut gd = Graph::new();
        let pd = self
            .store
            .bind_where(&mut gd, |e| if is_disc(&e.name) { Some(true) } else { None });
        let real_v = gd.constant(xd);
        let fake_v = gd.constant(fake);
        let real_logit = nets::discriminate(&mut gd, &pd, &self.net, real_v)?;
        let fake_logit = nets::discriminate(&mut gd, &pd, &self.net, fake_v)?;
        let d_loss_v = losses::discriminator_loss(&mut gd, real_logit, fake_logit)?;
        let d_loss = gd.value(d_loss_v).item()?;
        if !d_loss.is_finite() {
            return Err(Error::NonFinite("discriminator loss".into()));
        }
        let d_grads = gd.backward(d_loss_v)?;
        let clip = self.clip();
        let fetch_d = fetcher(&gd, &d_grads, &pd);
        self.opt_d.apply(&mut self.store, fetch_d, clip)?;

        // generator update through the updated discriminator
        let pd_frozen = self
            .store
            .bind_where(&mut g, |e| if is_disc(&e.name) { Some(false) } else { None });
        let g_fake_logit = nets::discriminate(&mut g, &pd_frozen, &self.net, fwd.decode.image)?;
        let adv = losses::adversarial_g_loss(&mut g, g_fake_logit)?;
        let rec = losses::recon_loss(&mut g, fwd.decode.image, xd_v)?;
        let per = losses::perceptual_loss(&mut g, &pg, fwd.decode.image, xd_v)?;
        let tot = losses::total_loss(&mut g, rec, per, adv, self.cfg.lambda)?;
        let breakdown = losses::breakdown(&g, rec, per, adv, tot, self.cfg.lambda)?;
        if !breakdown.total.is_finite() {
            return Err(Error::NonFinite("total loss".into()));
        }
        let g_grads = g.backward(tot)?;
        let fetch_g = fetcher(&g, &g_grads, &pg);
        self.opt_g.apply(&mut self.store, fetch_g, clip)?;

        self.step += 1;
        Ok(StepMetrics { step: self.step, losses: breakdown, d_loss })
    }

    /// Drive training to `cfg.steps`, invoking `on_step` after each update.
    pub fn run(&mut self, mut on_step: impl FnMut(&StepMetrics) -> Result<()>) -> Result<()> {
        while self.step < self.cfg.steps {
            let metrics = self.train_step()?;
            on_step(&metrics)?;
        }
        Ok(())
    }
}

fn fetcher<'a>(
    g: &'a Graph,
    grads: &'a Gradients,
    bound: &'a BoundParams,
) -> impl Fn(&str) -> Result<Tensor> + 'a {
    move |name| Ok(grads.get(g, bound.var(name)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::motion;

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            latent_dim: 12,
            dict_size: 4,
            lambda: 10.0,
            lr: 0.002,
            batch: 2,
            steps: 3,
            seed: 11,
            resolution: 16,
            base_channels: 4,
            max_channels: 8,
            mlp_hidden: 12,
            clip_grads: true,
            use_dictionary: true,
            d_lr_mult: 0.25,
            data: DataSpec::Synthetic { sequences: 2, length: 4 },
        }
    }

    #[test]
    fn adam_zero_grad_and_zero_lr_are_fixed_points() {
        let h = AdamHyper::with_lr(0.002);
        let mut p = vec![1.0f32, -2.0];
        let mut m = vec![0.0; 2];
        let mut v = vec![0.0; 2];
        adam_step(&mut p, &[0.0, 0.0], &mut m, &mut v, 1, &h).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);

        let h0 = AdamHyper::with_lr(0.0);
        adam_step(&mut p, &[0.5, -0.1], &mut m, &mut v, 2, &h0).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
    }

    #[test]
    fn adam_matches_hand_computed_update() {
        // param 1.0, grad 0.5, lr 0.002, fresh moments, t = 1, in f64
        let h = AdamHyper::with_lr(0.002);
        let mut p = vec![1.0f32];
        let mut m = vec![0.0];
        let mut v = vec![0.0];
        adam_step(&mut p, &[0.5], &mut m, &mut v, 1, &h).unwrap();
        let m64 = 0.1f64 * 0.5;
        let v64 = 0.001f64 * 0.25;
        let mhat = m64 / (1.0 - 0.9f64);
        let vhat = v64 / (1.0 - 0.999f64);
        let expect = 1.0 - 0.002 * mhat / (vhat.sqrt() + 1e-8);
        // parameters are stored in 32 bits, so the 64-bit oracle is compared
        // at parameter precision
        let expect32 = expect as f32;
        assert!(
            (p[0] as f64 - expect32 as f64).abs() <= 1e-9,
            "{} vs {expect} (f32 {expect32})",
            p[0]
        );
    }

    #[test]
    fn adam_rejects_non_finite_gradients() {
        let h = AdamHyper::with_lr(0.002);
        let mut p = vec![1.0f32];
        let mut m = vec![0.0];
        let mut v = vec![0.0];
        let err = adam_step(&mut p, &[f32::NAN], &mut m, &mut v, 1, &h).unwrap_err();
        assert!(err.to_string().contains("non-finite"));
        assert_eq!(p[0], 1.0);
    }

    #[test]
    fn first_steps_are_finite_and_move_parameters() {
        let mut tr = Trainer::new(tiny_cfg()).unwrap();
        let before: Vec<(String, Tensor)> = tr
            .store
            .entries()
            .iter()
            .map(|e| (e.name.clone(), e.value.clone()))
            .collect();
        let m = tr.train_step().unwrap();
        assert!(m.losses.total.is_finite());
        assert!(m.losses.recon >= 0.0 && m.losses.perceptual >= 0.0);
        assert!(m.d_loss.is_finite());
        let mut moved = 0.0f64;
        for (name, old) in &before {
            let new = tr.store.get(name).unwrap();
            moved += old.max_abs_diff(new).unwrap();
            if name.starts_with("percep.") {
                assert_eq!(old.data(), new.data(), "frozen extractor weight {name} changed");
            }
        }
        assert!(moved > 0.0, "no parameter changed");
        // dictionary stays orthonormalizable and orthonormal after the step
        let d = motion::orthonormalize(tr.store.get("mot.dict.raw").unwrap()).unwrap();
        let m_rows = d.shape()[0];
        let n = d.shape()[1];
        for i in 0..m_rows {
            for j in 0..m_rows {
                let dot: f64 = (0..n)
                    .map(|k| d.data()[i * n + k] as f64 * d.data()[j * n + k] as f64)
                    .sum();
                let target = if i == j { 1.0 } else { 0.0 };
                assert!((dot - target).abs() <= 1e-5);
            }
        }
    }

    #[test]
    fn fixed_seed_reproduces_loss_trajectory() {
        let run = || -> Vec<String> {
            let mut tr = Trainer::new(tiny_cfg()).unwrap();
            let mut lines = Vec::new();
            tr.run(|m| {
                lines.push(m.log_line());
                Ok(())
            })
            .unwrap();
            lines
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn metrics_log_format() {
        let m = StepMetrics {
            step: 12,
            losses: LossBreakdown {
                recon: 0.5,
                perceptual: 1.25,
                adversarial: 0.75,
                total: 13.75,
                lambda: 10.0,
            },
            d_loss: 1.5,
        };
        assert_eq!(
            m.log_line(),
            "step=12 recon=0.500000 vgg=1.250000 adv=0.750000 d=1.500000"
        );
    }
}

#[cfg(test)]
mod timing_probe {
    use super::*;

    #[test]
    #[ignore]
    fn probe_default_step_time() {
        let mut cfg = TrainConfig::default();
        if let Ok(v) = std::env::var("PROBE_BASE") {
            cfg.base_channels = v.parse().unwrap();
        }
        if let Ok(v) = std::env::var("PROBE_MAX") {
            cfg.max_channels = v.parse().unwrap();
        }
        cfg.steps = 4;
        let t0 = std::time::Instant::now();
        let mut tr = Trainer::new(cfg).unwrap();
        println!("init: {:.2?}", t0.elapsed());
        let t1 = std::time::Instant::now();
        let m = tr.train_step().unwrap();
        println!("step 1: {:.2?} {}", t1.elapsed(), m.log_line());
        let t2 = std::time::Instant::now();
        for _ in 0..3 {
            tr.train_step().unwrap();
        }
        println!("steps 2-4: {:.2?} per step", t2.elapsed() / 3);
    }
}
