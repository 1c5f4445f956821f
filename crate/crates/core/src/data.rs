//! Training data: a procedural moving-shapes video generator and a PNG
//! frame-folder loader. Both emit 3 x R x R frames in [-1, 1].
//!
//! Synthetic sequences render an anti-aliased two-part shape (a body with one
//! rotating limb) moving along a smooth random trajectory whose per-frame
//! displacement stays under 4 pixels. Rendering uses signed distance fields
//! and a local polynomial sine, so output depends only on the seed, not on
//! the platform's libm.

use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Background color, in [-1, 1] units.
const BG: [f32; 3] = [0.55, 0.55, 0.62];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Disc,
    Square,
    Triangle,
}

/// What stays constant within a sequence.
#[derive(Clone, Debug)]
pub struct IdentityDescriptor {
    pub kind: ShapeKind,
    pub color: [f32; 3],
    /// Body radius in pixels.
    pub scale: f32,
}

/// Per-frame pose parameters.
#[derive(Clone, Copy, Debug)]
pub struct MotionSample {
    pub cx: f32,
    pub cy: f32,
    pub rotation: f32,
    pub limb_angle: f32,
}

#[derive(Clone, Debug)]
pub struct VideoSequence {
    pub frames: Vec<Tensor>,
    pub identity: IdentityDescriptor,
    pub motion: Vec<MotionSample>,
}

#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub sequences: Vec<VideoSequence>,
}

impl Dataset {
    pub fn num_frames(&self) -> usize {
        self.sequences.iter().map(|s| s.frames.len()).sum()
    }
}

/// A self-supervision pair: two distinct frames of one sequence.
#[derive(Clone, Debug)]
pub struct FramePair {
    pub source: Tensor,
    pub driving: Tensor,
    pub sequence: usize,
    pub indices: (usize, usize),
}

#[derive(Clone, Copy, Debug)]
pub struct SynthParams {
    pub resolution: usize,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams { resolution: 64 }
    }
}

// ---- deterministic trigonometry -------------------------------------------

/// sin via quadrant folding and a fixed Taylor polynomial; bit-stable across
/// platforms because it uses only IEEE add/mul/divide.
pub(crate) fn dsin(x: f64) -> f64 {
    let two_pi = std::f64::consts::TAU;
    let mut r = x % two_pi;
    if r > std::f64::consts::PI {
        r -= two_pi;
    } else if r < -std::f64::consts::PI {
        r += two_pi;
    }
    // fold into [-pi/4, pi/4] with quadrant index
    let half_pi = std::f64::consts::FRAC_PI_2;
    let k = (r / half_pi).round();
    let y = r - k * half_pi;
    match (k as i64).rem_euclid(4) {
        0 => sin_poly(y),
        1 => cos_poly(y),
        2 => -sin_poly(y),
        _ => -cos_poly(y),
    }
}

pub(crate) fn dcos(x: f64) -> f64 {
    dsin(x + std::f64::consts::FRAC_PI_2)
}

fn sin_poly(y: f64) -> f64 {
    let y2 = y * y;
    y * (1.0
        + y2 * (-1.0 / 6.0
            + y2 * (1.0 / 120.0
                + y2 * (-1.0 / 5040.0 + y2 * (1.0 / 362880.0 - y2 / 39916800.0)))))
}

fn cos_poly(y: f64) -> f64 {
    let y2 = y * y;
    1.0 + y2
        * (-0.5
            + y2 * (1.0 / 24.0
                + y2 * (-1.0 / 720.0 + y2 * (1.0 / 40320.0 - y2 / 3628800.0))))
}

// ---- synthetic sequences ----------------------------------------------------

struct Oscillator {
    amp: f64,
    omega: f64,
    phase: f64,
}

impl Oscillator {
    fn draw(rng: &mut ChaCha8Rng, max_amp: f64, omega_lo: f64, omega_hi: f64) -> Self {
        Oscillator {
            amp: rng.random_range(0.3..1.0) * max_amp,
            omega: rng.random_range(omega_lo..omega_hi),
            phase: rng.random_range(0.0..std::f64::consts::TAU),
        }
    }

    fn at(&self, t: f64) -> f64 {
        self.amp * dsin(self.omega * t + self.phase)
    }

    /// Upper bound on |value(t+1) - value(t)|.
    fn step_bound(&self) -> f64 {
        self.amp * self.omega
    }
}

/// Two-oscillator smooth coordinate with a hard per-frame velocity cap.
struct Wander {
    parts: [Oscillator; 2],
}

impl Wander {
    fn draw(rng: &mut ChaCha8Rng, max_amp: f64, max_step: f64) -> Self {
        let mut parts = [
            Oscillator::draw(rng, max_amp * 0.7, 0.05, 0.15),
            Oscillator::draw(rng, max_amp * 0.3, 0.15, 0.35),
        ];
        let step: f64 = parts.iter().map(|p| p.step_bound()).sum();
        if step > max_step {
            let k = max_step / step;
            for p in parts.iter_mut() {
                p.amp *= k;
            }
        }
        Wander { parts }
    }

    fn at(&self, t: f64) -> f64 {
        self.parts.iter().map(|p| p.at(t)).sum()
    }
}

/// Deterministic articulated-shape video. Same seed, same bytes.
pub fn synth_sequence(seed: u64, length: usize, params: &SynthParams) -> Result<VideoSequence> {
    if length < 2 {
        return Err(Error::Dataset(format!("sequence length {length} < 2")));
    }
    let res = params.resolution;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let kind = match rng.random_range(0..3u32) {
        0 => ShapeKind::Disc,
        1 => ShapeKind::Square,
        _ => ShapeKind::Triangle,
    };
    let color = [
        rng.random_range(-0.85..-0.1f32),
        rng.random_range(-0.85..-0.1f32),
        rng.random_range(-0.85..-0.1f32),
    ];
    let radius = rng.random_range(0.13..0.19) * res as f32;

    // roaming bounds keep body + limb inside the frame
    let limb_len = 1.7 * radius;
    let margin = radius + limb_len + 2.0;
    let max_amp = ((res as f64 / 2.0) - margin as f64).max(2.0);
    // per-axis translation speed cap 2.0 px/frame keeps the rendered centroid
    // displacement under 4 px even with the limb swinging
    let wx = Wander::draw(&mut rng, max_amp, 2.0);
    let wy = Wander::draw(&mut rng, max_amp, 2.0);
    let rot = Oscillator::draw(&mut rng, 0.6, 0.05, 0.13); // step <= 0.078 rad
    let limb_base = rng.random_range(0.0..std::f64::consts::TAU);
    let limb = Oscillator::draw(&mut rng, 1.1, 0.08, 0.25); // step <= 0.275 rad

    let identity = IdentityDescriptor { kind, color, scale: radius };
    let mut frames = Vec::with_capacity(length);
    let mut motion = Vec::with_capacity(length);
    let center = res as f64 / 2.0;
    for t in 0..length {
        let tf = t as f64;
        let m = MotionSample {
            cx: (center + wx.at(tf)) as f32,
            cy: (center + wy.at(tf)) as f32,
            rotation: rot.at(tf) as f32,
            limb_angle: (limb_base + limb.at(tf)) as f32,
        };
        frames.push(render_frame(res, &identity, &m));
        motion.push(m);
    }
    Ok(VideoSequence { frames, identity, motion })
}

/// A dataset of independently seeded sequences.
pub fn synth_dataset(seed: u64, sequences: usize, length: usize, params: &SynthParams) -> Result<Dataset> {
    let mut out = Vec::with_capacity(sequences);
    for i in 0..sequences {
        let seq_seed = seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x243F_6A88_85A3_08D3);
        out.push(synth_sequence(seq_seed, length, params)?);
    }
    Ok(Dataset { sequences: out })
}

fn render_frame(res: usize, id: &IdentityDescriptor, m: &MotionSample) -> Tensor {
    let r = id.scale;
    let limb_len = 1.7 * r;
    let limb_half_width = 0.30 * r;
    let limb_dir = (m.rotation + m.limb_angle) as f64;
    let (ldx, ldy) = (dcos(limb_dir) as f32, dsin(limb_dir) as f32);
    let (lx, ly) = (m.cx + ldx * limb_len, m.cy + ldy * limb_len);
    let limb_color = [
        (id.color[0] * 0.5 + 0.45).clamp(-1.0, 1.0),
        (id.color[1] * 0.5 - 0.25).clamp(-1.0, 1.0),
        (id.color[2] * 0.5 + 0.1).clamp(-1.0, 1.0),
    ];
    let (sin_r, cos_r) = (dsin(m.rotation as f64) as f32, dcos(m.rotation as f64) as f32);

    let mut data = vec![0.0f32; 3 * res * res];
    let plane = res * res;
    for y in 0..res {
        for x in 0..res {
            let px = x as f32 + 0.5;
            let py = y as f32 + 0.5;
            // body SDF in the shape's rotated frame
            let dx = px - m.cx;
            let dy = py - m.cy;
            let bx = cos_r * dx + sin_r * dy;
            let by = -sin_r * dx + cos_r * dy;
            let body_sdf = match id.kind {
                ShapeKind::Disc => (bx * bx + by * by).sqrt() - r,
                ShapeKind::Square => {
                    let qx = bx.abs() - r * 0.82;
                    let qy = by.abs() - r * 0.82;
                    let ox = qx.max(0.0);
                    let oy = qy.max(0.0);
                    (ox * ox + oy * oy).sqrt() + qx.max(qy).min(0.0)
                }
                ShapeKind::Triangle => {
                    // exact equilateral-triangle distance, half-side 0.95 r
                    let k = 3.0f32.sqrt();
                    let rr = 0.95 * r;
                    let mut tx = bx.abs() - rr;
                    let mut ty = by + rr / k;
                    if tx + k * ty > 0.0 {
                        let (nx, ny) = ((tx - k * ty) / 2.0, (-k * tx - ty) / 2.0);
                        tx = nx;
                        ty = ny;
                    }
                    tx -= tx.clamp(-2.0 * rr, 0.0);
                    -(tx * tx + ty * ty).sqrt() * ty.signum()
                }
            };
            // limb: capsule from body center to the limb tip
            let ax = px - m.cx;
            let ay = py - m.cy;
            let ex = lx - m.cx;
            let ey = ly - m.cy;
            let t = ((ax * ex + ay * ey) / (ex * ex + ey * ey)).clamp(0.0, 1.0);
            let (cx2, cy2) = (ax - t * ex, ay - t * ey);
            let limb_sdf = (cx2 * cx2 + cy2 * cy2).sqrt() - limb_half_width;

            let body_cov = (0.5 - body_sdf).clamp(0.0, 1.0);
            let limb_cov = (0.5 - limb_sdf).clamp(0.0, 1.0);
            let idx = y * res + x;
            for c in 0..3 {
                let mut v = BG[c];
                v = v + (id.color[c] - v) * body_cov;
                v = v + (limb_color[c] - v) * limb_cov;
                data[c * plane + idx] = v;
            }
        }
    }
    Tensor::new(vec![3, res, res], data).expect("render shape")
}

/// Uniformly sample a sequence and two distinct frame indices. Sequences
/// shorter than 2 frames are skipped with a diagnostic.
pub fn sample_pair(ds: &Dataset, rng: &mut impl RngCore) -> Result<FramePair> {
    if ds.sequences.is_empty() {
        return Err(Error::Dataset("empty dataset".into()));
    }
    if !ds.sequences.iter().any(|s| s.frames.len() >= 2) {
        return Err(Error::Dataset("no sequence has at least 2 frames".into()));
    }
    loop {
        let si = rng.random_range(0..ds.sequences.len());
        let seq = &ds.sequences[si];
        if seq.frames.len() < 2 {
            eprintln!("warning: sequence {si} has {} frame(s), skipping", seq.frames.len());
            continue;
        }
        let n = seq.frames.len();
        let i = rng.random_range(0..n);
        let mut j = rng.random_range(0..n - 1);
        if j >= i {
            j += 1;
        }
        return Ok(FramePair {
            source: seq.frames[i].clone(),
            driving: seq.frames[j].clone(),
            sequence: si,
            indices: (i, j),
        });
    }
}

/// Stack equally-shaped C x H x W frames into a B x C x H x W batch.
pub fn stack_frames(frames: &[Tensor]) -> Result<Tensor> {
    let first = frames
        .first()
        .ok_or_else(|| Error::Dataset("cannot stack an empty batch".into()))?;
    let shape = first.shape().to_vec();
    if shape.len() != 3 {
        return Err(Error::shape("stack_frames", format!("expected rank 3 frames, got {shape:?}")));
    }
    let mut data = Vec::with_capacity(frames.len() * first.len());
    for f in frames {
        if f.shape() != shape {
            return Err(Error::shape(
                "stack_frames",
                format!("frame {:?} vs {:?}", f.shape(), shape),
            ));
        }
        data.extend_from_slice(f.data());
    }
    Tensor::new(vec![frames.len(), shape[0], shape[1], shape[2]], data)
}

// ---- image and folder I/O ---------------------------------------------------

/// Map a 3 x H x W tensor in [-1, 1] to interleaved RGB8, rounding half-up.
pub fn tensor_to_rgb8(t: &Tensor) -> Result<(u32, u32, Vec<u8>)> {
    let [c, h, w] = t.shape() else {
        return Err(Error::shape("tensor_to_rgb8", format!("expected 3 x H x W, got {:?}", t.shape())));
    };
    if *c != 3 {
        return Err(Error::shape("tensor_to_rgb8", format!("{c} channels, expected 3")));
    }
    let (h, w) = (*h, *w);
    let plane = h * w;
    let mut bytes = vec![0u8; 3 * plane];
    for p in 0..plane {
        for c in 0..3 {
            let v = t.data()[c * plane + p].clamp(-1.0, 1.0);
            let scaled = (v + 1.0) / 2.0 * 255.0;
            bytes[p * 3 + c] = (scaled + 0.5).floor().clamp(0.0, 255.0) as u8;
        }
    }
    Ok((w as u32, h as u32, bytes))
}

/// Inverse of [`tensor_to_rgb8`] up to quantization.
pub fn rgb8_to_tensor(w: u32, h: u32, bytes: &[u8]) -> Result<Tensor> {
    let (w, h) = (w as usize, h as usize);
    if bytes.len() != 3 * w * h {
        return Err(Error::shape(
            "rgb8_to_tensor",
            format!("{} bytes for {w}x{h} RGB", bytes.len()),
        ));
    }
    let plane = w * h;
    let mut data = vec![0.0f32; 3 * plane];
    for p in 0..plane {
        for c in 0..3 {
            data[c * plane + p] = bytes[p * 3 + c] as f32 / 255.0 * 2.0 - 1.0;
        }
    }
    Tensor::new(vec![3, h, w], data)
}

/// Write a 3 x H x W tensor as a PNG.
pub fn save_png(t: &Tensor, path: &Path) -> Result<()> {
    let (w, h, bytes) = tensor_to_rgb8(t)?;
    let img: image::RgbImage = image::ImageBuffer::from_raw(w, h, bytes)
        .ok_or_else(|| Error::Invalid("image buffer size mismatch".into()))?;
    img.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

/// Load any readable image, center-crop square, resize to `resolution`, map
/// to [-1, 1].
pub fn load_image(path: &Path, resolution: usize) -> Result<Tensor> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    let side = w.min(h);
    let x0 = (w - side) / 2;
    let y0 = (h - side) / 2;
    let cropped = image::imageops::crop_imm(&img, x0, y0, side, side).to_image();
    let resized = if side == resolution as u32 {
        cropped
    } else {
        image::imageops::resize(
            &cropped,
            resolution as u32,
            resolution as u32,
            image::imageops::FilterType::Triangle,
        )
    };
    rgb8_to_tensor(resolution as u32, resolution as u32, resized.as_raw())
}

/// Load a directory of sequence subdirectories, each holding PNG frames in
/// lexicographic filename order. Unreadable frames skip their sequence with a
/// warning; an empty result is fatal.
pub fn load_frame_folder(path: &Path, resolution: usize) -> Result<Dataset> {
    let mut dirs: Vec<_> = std::fs::read_dir(path)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.path())
        .collect();
    dirs.sort();
    let mut sequences = Vec::new();
    for dir in dirs {
        let mut files: Vec<_> = std::fs::read_dir(&dir)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| {
                p.extension()
                    .map(|e| e.to_ascii_lowercase() == "png")
                    .unwrap_or(false)
            })
            .collect();
        files.sort();
        if files.is_empty() {
            continue;
        }
        let mut frames = Vec::with_capacity(files.len());
        let mut ok = true;
        for f in &files {
            match load_image(f, resolution) {
                Ok(t) => frames.push(t),
                Err(e) => {
                    eprintln!("warning: skipping sequence {}: unreadable frame {}: {e}", dir.display(), f.display());
                    ok = false;
                    break;
                }
            }
        }
        if ok {
            sequences.push(VideoSequence {
                frames,
                identity: IdentityDescriptor { kind: ShapeKind::Disc, color: [0.0; 3], scale: 0.0 },
                motion: Vec::new(),
            });
        }
    }
    if sequences.is_empty() {
        return Err(Error::Dataset(format!("no usable sequences under {}", path.display())));
    }
    Ok(Dataset { sequences })
}
