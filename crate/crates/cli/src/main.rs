//! `lia` — train an image-animation model on shape videos or frame folders,
//! then animate, probe and evaluate it. All outputs are files.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use lia_core::checkpoint::{load_checkpoint, load_model, save_checkpoint};
use lia_core::data;
use lia_core::model::{evaluate_reconstruction, model_reconstructor, EncodedImage, Model};
use lia_core::motion::{self, LatentCode};
use lia_core::tensor::Tensor;
use lia_core::trainer::{DataSpec, TrainConfig, Trainer};
use lia_core::warp;

#[derive(Parser)]
#[command(name = "lia", version, about = "Image animation via latent-space navigation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum TransferMode {
    Absolute,
    Relative,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write a checkpoint plus a metrics log.
    Train(TrainArgs),
    /// Animate a source image along a driving frame folder.
    Animate(AnimateArgs),
    /// Render a linear sweep along one motion direction into a grid image.
    Sweep(SweepArgs),
    /// Visualize the implicit canonical frame of a source image.
    Reference(ReferenceArgs),
    /// Same-identity reconstruction metrics over held-out sequences.
    Eval(EvalArgs),
}

#[derive(clap::Args)]
struct TrainArgs {
    /// `synthetic` or a directory of sequence subfolders with PNG frames
    #[arg(long, default_value = "synthetic")]
    data: String,
    /// Checkpoint output path
    #[arg(long)]
    out: PathBuf,
    /// Metrics log path (default: checkpoint path with .log extension)
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long, default_value_t = 2000)]
    steps: u64,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long = "dict-size", default_value_t = 20)]
    dict_size: usize,
    #[arg(long = "latent-dim", default_value_t = 128)]
    latent_dim: usize,
    #[arg(long, default_value_t = 10.0)]
    lambda: f32,
    #[arg(long, default_value_t = 0.002)]
    lr: f32,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, default_value_t = 64)]
    res: usize,
    /// Synthetic dataset: number of sequences
    #[arg(long, default_value_t = 16)]
    sequences: usize,
    /// Synthetic dataset: frames per sequence
    #[arg(long = "seq-len", default_value_t = 24)]
    seq_len: usize,
    #[arg(long = "base-channels", default_value_t = 16)]
    base_channels: usize,
    #[arg(long = "max-channels", default_value_t = 128)]
    max_channels: usize,
    /// Magnitude head width (default: latent dim)
    #[arg(long = "mlp-hidden")]
    mlp_hidden: Option<usize>,
    /// Disable gradient clipping (global norm 10)
    #[arg(long = "no-clip")]
    no_clip: bool,
    /// Discriminator learning-rate multiplier
    #[arg(long = "d-lr-mult", default_value_t = 0.25)]
    d_lr_mult: f32,
    /// Ablation: predict the latent path directly, without the dictionary
    #[arg(long = "no-dictionary")]
    no_dictionary: bool,
    /// Persist the checkpoint every N steps (0 = only at the end)
    #[arg(long = "save-every", default_value_t = 500)]
    save_every: u64,
    /// Resume from an existing checkpoint (other flags are ignored)
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(clap::Args)]
struct AnimateArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Source image (any readable image; center-cropped and resized)
    #[arg(long)]
    source: PathBuf,
    /// Folder of driving PNG frames, consumed in filename order
    #[arg(long)]
    driving: PathBuf,
    #[arg(long, value_enum, default_value_t = TransferMode::Absolute)]
    mode: TransferMode,
    /// Output folder, one PNG per driving frame
    #[arg(long)]
    out: PathBuf,
    /// Relative mode: warn when the first driving frame's latent path is
    /// further than this from the source's (pose mismatch heuristic)
    #[arg(long = "pose-warn-threshold", default_value_t = 3.0)]
    pose_warn_threshold: f32,
}

#[derive(clap::Args)]
struct SweepArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    source: PathBuf,
    /// Direction index, 1-based
    #[arg(long)]
    direction: usize,
    /// lo:hi:count magnitudes, ascending left to right in the grid
    #[arg(long, default_value = "-3:3:7", allow_hyphen_values = true)]
    range: String,
    /// Output grid PNG
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args)]
struct ReferenceArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// `synthetic` or a directory of sequence subfolders
    #[arg(long, default_value = "synthetic")]
    data: String,
    /// Synthetic held-out data: seed
    #[arg(long, default_value_t = 1234)]
    seed: u64,
    #[arg(long, default_value_t = 8)]
    sequences: usize,
    #[arg(long = "seq-len", default_value_t = 12)]
    seq_len: usize,
    /// Also write the report to a file
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() {
    lia_core::configure_threads_from_env();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Animate(a) => cmd_animate(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Reference(a) => cmd_reference(a),
        Command::Eval(a) => cmd_eval(a),
    };
    if let Err(e) = result {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let data = if a.data == "synthetic" {
        DataSpec::Synthetic { sequences: a.sequences, length: a.seq_len }
    } else {
        DataSpec::Folder(PathBuf::from(&a.data))
    };
    let cfg = TrainConfig {
        latent_dim: a.latent_dim,
        dict_size: a.dict_size,
        lambda: a.lambda,
        lr: a.lr,
        batch: a.batch,
        steps: a.steps,
        seed: a.seed,
        resolution: a.res,
        base_channels: a.base_channels,
        max_channels: a.max_channels,
        mlp_hidden: a.mlp_hidden.unwrap_or(a.latent_dim),
        clip_grads: !a.no_clip,
        use_dictionary: !a.no_dictionary,
        d_lr_mult: a.d_lr_mult,
        data,
    };
    let mut trainer = match &a.resume {
        Some(path) => {
            let tr = load_checkpoint(path).with_context(|| format!("resuming {}", path.display()))?;
            eprintln!("resumed {} at step {}", path.display(), tr.step);
            tr
        }
        None => Trainer::new(cfg)?,
    };

    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let log_path = a.log.clone().unwrap_or_else(|| a.out.with_extension("log"));
    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .with_context(|| format!("opening metrics log {}", log_path.display()))?;

    let total = trainer.cfg.steps;
    let started = std::time::Instant::now();
    loop {
        if trainer.step >= total {
            break;
        }
        let m = trainer.train_step().map_err(|e| {
            anyhow!("training aborted at step {}: {e} (last saved checkpoint retained)", trainer.step + 1)
        })?;
        writeln!(log, "{}", m.log_line())?;
        if m.step % 100 == 0 || m.step == total {
            eprintln!("[{:>7.0?}] {}", started.elapsed(), m.log_line());
        }
        if a.save_every > 0 && m.step % a.save_every == 0 && m.step < total {
            save_checkpoint(&trainer, &a.out)
                .with_context(|| format!("writing checkpoint {}", a.out.display()))?;
        }
    }
    save_checkpoint(&trainer, &a.out)
        .with_context(|| format!("writing checkpoint {}", a.out.display()))?;
    eprintln!("wrote {} and {}", a.out.display(), log_path.display());
    Ok(())
}

fn list_driving_frames(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut frames: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading driving folder {}", dir.display()))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            p.extension()
                .map(|e| e.to_ascii_lowercase() == "png")
                .unwrap_or(false)
        })
        .collect();
    frames.sort();
    if frames.is_empty() {
        bail!("driving folder {} holds no PNG frames", dir.display());
    }
    Ok(frames)
}

fn cmd_animate(a: AnimateArgs) -> Result<()> {
    let (model, cfg) = load_model(&a.ckpt)?;
    let res = cfg.resolution;
    let source = data::load_image(&a.source, res)?;
    let enc = model.encode_image(&source)?;
    let (_, w_source) = model.path_for(&enc.latent)?;

    let frames = list_driving_frames(&a.driving)?;
    fs::create_dir_all(&a.out)?;

    // encode driving frames, skipping unreadable ones with a warning
    let mut encoded: Vec<(&PathBuf, LatentCode)> = Vec::new();
    for path in &frames {
        match data::load_image(path, res) {
            Ok(t) => encoded.push((path, model.encode_image(&t)?.latent)),
            Err(e) => eprintln!("warning: skipping unreadable frame {}: {e}", path.display()),
        }
    }
    if encoded.is_empty() {
        bail!("no driving frame could be read from {}", a.driving.display());
    }

    let (_, w_first) = model.path_for(&encoded[0].1)?;
    if a.mode == TransferMode::Relative {
        let gap = w_first.minus(&w_source).map(|d| d.norm()).unwrap_or(f32::INFINITY);
        if gap > a.pose_warn_threshold {
            eprintln!(
                "warning: first driving frame pose differs from the source \
                 (path distance {gap:.2} > {:.2}); relative transfer assumes similar poses",
                a.pose_warn_threshold
            );
        }
    }

    let mut written = 0usize;
    for (path, latent) in &encoded {
        let (_, w_frame) = model.path_for(latent)?;
        let z_target = match a.mode {
            TransferMode::Absolute => motion::absolute_transfer(&enc.latent, &w_frame)?,
            TransferMode::Relative => {
                motion::relative_transfer(&enc.latent, &w_source, &w_frame, &w_first)?
            }
        };
        let img = model.decode_image(&enc, &z_target)?;
        let stem = path
            .file_stem()
            .ok_or_else(|| anyhow!("driving frame {} has no file stem", path.display()))?;
        let out = a.out.join(format!("{}.png", stem.to_string_lossy()));
        data::save_png(&img, &out)?;
        written += 1;
    }
    eprintln!("wrote {written} frame(s) to {}", a.out.display());
    Ok(())
}

fn parse_range(s: &str) -> Result<Vec<f32>> {
    let parts: Vec<&str> = s.split(':').collect();
    let [lo, hi, count] = parts[..] else {
        bail!("range must be lo:hi:count, got {s}");
    };
    let lo: f32 = lo.parse().context("range lo")?;
    let hi: f32 = hi.parse().context("range hi")?;
    let count: usize = count.parse().context("range count")?;
    if count == 0 {
        bail!("range count must be >= 1");
    }
    if count == 1 {
        return Ok(vec![lo]);
    }
    let step = (hi - lo) / (count - 1) as f32;
    Ok((0..count).map(|i| lo + step * i as f32).collect())
}

fn tile_row(tiles: &[Tensor]) -> Result<Tensor> {
    let [c, h, w] = tiles[0].shape() else {
        bail!("tiles must be rank 3");
    };
    let (c, h, w) = (*c, *h, *w);
    let cols = tiles.len();
    let mut out = vec![0.0f32; c * h * w * cols];
    let row_w = w * cols;
    for (ti, t) in tiles.iter().enumerate() {
        for ch in 0..c {
            for y in 0..h {
                let src = &t.data()[(ch * h + y) * w..(ch * h + y) * w + w];
                let dst_off = (ch * h + y) * row_w + ti * w;
                out[dst_off..dst_off + w].copy_from_slice(src);
            }
        }
    }
    Tensor::new(vec![c, h, row_w], out).map_err(|e| anyhow!("{e}"))
}

fn self_reconstruction(model: &Model, enc: &EncodedImage) -> Result<(LatentCode, Tensor)> {
    let z_self = model.self_code(&enc.latent)?;
    let img = model.decode_image(enc, &z_self)?;
    Ok((z_self, img))
}

fn cmd_sweep(a: SweepArgs) -> Result<()> {
    let (model, cfg) = load_model(&a.ckpt)?;
    let directions = model
        .directions()?
        .ok_or_else(|| anyhow!("this checkpoint was trained without a motion dictionary"))?;
    let m = directions.shape()[0];
    if a.direction < 1 || a.direction > m {
        bail!("direction index {} out of range 1..={m}", a.direction);
    }
    let alphas = parse_range(&a.range)?;
    let source = data::load_image(&a.source, cfg.resolution)?;
    let enc = model.encode_image(&source)?;
    let (z_self, _) = self_reconstruction(&model, &enc)?;

    let n = directions.shape()[1];
    let row = &directions.data()[(a.direction - 1) * n..a.direction * n];
    let mut tiles = Vec::with_capacity(alphas.len());
    for alpha in &alphas {
        let z = LatentCode(
            z_self
                .0
                .iter()
                .zip(row)
                .map(|(zv, dv)| zv + alpha * dv)
                .collect(),
        );
        tiles.push(model.decode_image(&enc, &z)?);
    }
    let grid = tile_row(&tiles)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    data::save_png(&grid, &a.out)?;
    eprintln!("wrote {} ({} tiles)", a.out.display(), alphas.len());
    Ok(())
}

fn cmd_reference(a: ReferenceArgs) -> Result<()> {
    let (model, cfg) = load_model(&a.ckpt)?;
    let source = data::load_image(&a.source, cfg.resolution)?;
    let enc = model.encode_image(&source)?;
    let flow = model.finest_flow(&enc.latent)?;
    let reference = warp::bilinear_warp(&source, &flow)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    data::save_png(&reference, &a.out)?;
    eprintln!("wrote {}", a.out.display());
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let (model, cfg) = load_model(&a.ckpt)?;
    let ds = if a.data == "synthetic" {
        data::synth_dataset(
            a.seed,
            a.sequences,
            a.seq_len,
            &data::SynthParams { resolution: cfg.resolution },
        )?
    } else {
        data::load_frame_folder(Path::new(&a.data), cfg.resolution)?
    };
    let report = evaluate_reconstruction(&ds, model_reconstructor(&model))?;
    let text = report.render();
    print!("{text}");
    if let Some(out) = &a.out {
        fs::write(out, &text)?;
    }
    Ok(())
}
