//! Checkpoint persistence.
//!
//! Layout (all integers little-endian):
//!   magic `LIA\x01`, version u32,
//!   config block (fixed field order, see below),
//!   state block (step u64, RNG seed 32 bytes + word position u128,
//!   optimizer step counts),
//!   then a count-prefixed table of named tensors:
//!   (name-length u32, name UTF-8, dtype u8 = 0 for f32, rank u32,
//!   dims u32..., data f32 LE).
//!
//! The table holds every network parameter, the dictionary raw matrix, the
//! frozen extractor weights and both optimizers' moments. Writes go through a
//! temp file and rename, so a crash never clobbers the last good checkpoint.
//! Save -> load -> save is byte-identical.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::{numel, Tensor};
use crate::trainer::{DataSpec, Optimizer, TrainConfig, Trainer};

const MAGIC: [u8; 4] = *b"LIA\x01";
const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

fn w_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}
fn w_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}
fn w_u128(w: &mut impl Write, v: u128) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}
fn w_f32(w: &mut impl Write, v: f32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}
fn w_u8(w: &mut impl Write, v: u8) -> Result<()> {
    w.write_all(&[v])?;
    Ok(())
}
fn w_str(w: &mut impl Write, s: &str) -> Result<()> {
    w_u32(w, s.len() as u32)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn trunc(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Checkpoint("file truncated".into())
    } else {
        Error::Io(e)
    }
}

fn r_exact<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(trunc)?;
    Ok(buf)
}
fn r_u32(r: &mut impl Read) -> Result<u32> {
    Ok(u32::from_le_bytes(r_exact::<4>(r)?))
}
fn r_u64(r: &mut impl Read) -> Result<u64> {
    Ok(u64::from_le_bytes(r_exact::<8>(r)?))
}
fn r_u128(r: &mut impl Read) -> Result<u128> {
    Ok(u128::from_le_bytes(r_exact::<16>(r)?))
}
fn r_f32(r: &mut impl Read) -> Result<f32> {
    Ok(f32::from_le_bytes(r_exact::<4>(r)?))
}
fn r_u8(r: &mut impl Read) -> Result<u8> {
    Ok(r_exact::<1>(r)?[0])
}
fn r_str(r: &mut impl Read) -> Result<String> {
    let len = r_u32(r)? as usize;
    if len > 1 << 20 {
        return Err(Error::Checkpoint(format!("implausible string length {len}")));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf).map_err(trunc)?;
    String::from_utf8(buf).map_err(|_| Error::Checkpoint("non-UTF-8 string".into()))
}

fn write_config(w: &mut impl Write, c: &TrainConfig) -> Result<()> {
    w_u32(w, c.latent_dim as u32)?;
    w_u32(w, c.dict_size as u32)?;
    w_f32(w, c.lambda)?;
    w_f32(w, c.lr)?;
    w_u32(w, c.batch as u32)?;
    w_u64(w, c.steps)?;
    w_u64(w, c.seed)?;
    w_u32(w, c.resolution as u32)?;
    w_u32(w, c.base_channels as u32)?;
    w_u32(w, c.max_channels as u32)?;
    w_u32(w, c.mlp_hidden as u32)?;
    let flags = (c.clip_grads as u8) | ((c.use_dictionary as u8) << 1);
    w_u8(w, flags)?;
    w_f32(w, c.d_lr_mult)?;
    match &c.data {
        DataSpec::Synthetic { sequences, length } => {
            w_u8(w, 0)?;
            w_u32(w, *sequences as u32)?;
            w_u32(w, *length as u32)?;
        }
        DataSpec::Folder(path) => {
            w_u8(w, 1)?;
            let s = path
                .to_str()
                .ok_or_else(|| Error::Checkpoint("dataset path is not UTF-8".into()))?;
            w_str(w, s)?;
        }
    }
    Ok(())
}

fn read_config(r: &mut impl Read) -> Result<TrainConfig> {
    let latent_dim = r_u32(r)? as usize;
    let dict_size = r_u32(r)? as usize;
    let lambda = r_f32(r)?;
    let lr = r_f32(r)?;
    let batch = r_u32(r)? as usize;
    let steps = r_u64(r)?;
    let seed = r_u64(r)?;
    let resolution = r_u32(r)? as usize;
    let base_channels = r_u32(r)? as usize;
    let max_channels = r_u32(r)? as usize;
    let mlp_hidden = r_u32(r)? as usize;
    let flags = r_u8(r)?;
    let d_lr_mult = r_f32(r)?;
    let data = match r_u8(r)? {
        0 => DataSpec::Synthetic { sequences: r_u32(r)? as usize, length: r_u32(r)? as usize },
        1 => DataSpec::Folder(PathBuf::from(r_str(r)?)),
        tag => return Err(Error::Checkpoint(format!("unknown dataset tag {tag}"))),
    };
    Ok(TrainConfig {
        latent_dim,
        dict_size,
        lambda,
        lr,
        batch,
        steps,
        seed,
        resolution,
        base_channels,
        max_channels,
        mlp_hidden,
        clip_grads: flags & 1 != 0,
        use_dictionary: flags & 2 != 0,
        d_lr_mult,
        data,
    })
}

fn write_tensor_entry(w: &mut impl Write, name: &str, t: &Tensor) -> Result<()> {
    w_str(w, name)?;
    w_u8(w, DTYPE_F32)?;
    w_u32(w, t.rank() as u32)?;
    for d in t.shape() {
        w_u32(w, *d as u32)?;
    }
    for v in t.data() {
        w_f32(w, *v)?;
    }
    Ok(())
}

fn read_tensor_entry(r: &mut impl Read) -> Result<(String, Tensor)> {
    let name = r_str(r)?;
    let dtype = r_u8(r)?;
    if dtype != DTYPE_F32 {
        return Err(Error::Checkpoint(format!("unknown dtype code {dtype} for {name}")));
    }
    let rank = r_u32(r)? as usize;
    if rank > 8 {
        return Err(Error::Checkpoint(format!("implausible rank {rank} for {name}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(r_u32(r)? as usize);
    }
    let n = numel(&shape);
    if n > (1 << 28) {
        return Err(Error::Checkpoint(format!("implausible tensor size {n} for {name}")));
    }
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        data.push(r_f32(r)?);
    }
    Ok((name, Tensor::new(shape, data)?))
}

fn moment_entries(prefix: &str, opt: &Optimizer) -> Vec<(String, Tensor)> {
    let mut out = Vec::new();
    for (i, name) in opt.names().iter().enumerate() {
        let (m, v) = opt.moments(i);
        out.push((
            format!("{prefix}.m.{name}"),
            Tensor::new(vec![m.len()], m.to_vec()).expect("moment shape"),
        ));
        out.push((
            format!("{prefix}.v.{name}"),
            Tensor::new(vec![v.len()], v.to_vec()).expect("moment shape"),
        ));
    }
    out
}

/// Serialize the full training state. Atomic: temp file + rename.
pub fn save_checkpoint(tr: &Trainer, path: &Path) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    let w = &mut buf;
    w.write_all(&MAGIC)?;
    w_u32(w, VERSION)?;
    write_config(w, &tr.cfg)?;
    w_u64(w, tr.step)?;
    w.write_all(&tr.rng.get_seed())?;
    w_u128(w, tr.rng.get_word_pos())?;
    w_u64(w, tr.opt_g.t)?;
    w_u64(w, tr.opt_d.t)?;

    let mut table: Vec<(String, Tensor)> = tr
        .store
        .entries()
        .iter()
        .map(|e| (e.name.clone(), e.value.clone()))
        .collect();
    table.extend(moment_entries("opt_g", &tr.opt_g));
    table.extend(moment_entries("opt_d", &tr.opt_d));
    w_u32(w, table.len() as u32)?;
    for (name, t) in &table {
        write_tensor_entry(w, name, t)?;
    }

    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, &buf)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

struct Loaded {
    cfg: TrainConfig,
    step: u64,
    rng_seed: [u8; 32],
    rng_pos: u128,
    opt_g_t: u64,
    opt_d_t: u64,
    table: Vec<(String, Tensor)>,
}

fn load_parts(path: &Path) -> Result<Loaded> {
    let bytes = std::fs::read(path)?;
    let mut r = bytes.as_slice();
    let magic = r_exact::<4>(&mut r)?;
    if magic != MAGIC {
        return Err(Error::Checkpoint(format!("bad magic {magic:02x?}")));
    }
    let version = r_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}, expected {VERSION}")));
    }
    let cfg = read_config(&mut r)?;
    let step = r_u64(&mut r)?;
    let rng_seed: [u8; 32] = r_exact::<32>(&mut r)?;
    let rng_pos = r_u128(&mut r)?;
    let opt_g_t = r_u64(&mut r)?;
    let opt_d_t = r_u64(&mut r)?;
    let count = r_u32(&mut r)? as usize;
    let mut table = Vec::with_capacity(count);
    for _ in 0..count {
        table.push(read_tensor_entry(&mut r)?);
    }
    if !r.is_empty() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", r.len())));
    }
    Ok(Loaded { cfg, step, rng_seed, rng_pos, opt_g_t, opt_d_t, table })
}

fn apply_table(tr: &mut Trainer, table: &[(String, Tensor)]) -> Result<()> {
    let mut seen_params = 0usize;
    for (name, t) in table {
        if let Some(rest) = name.strip_prefix("opt_g.") {
            set_moment(&mut tr.opt_g, rest, t)?;
        } else if let Some(rest) = name.strip_prefix("opt_d.") {
            set_moment(&mut tr.opt_d, rest, t)?;
        } else {
            tr.store
                .set_value(name, t.clone())
                .map_err(|e| Error::Checkpoint(format!("parameter {name}: {e}")))?;
            seen_params += 1;
        }
    }
    if seen_params != tr.store.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {seen_params} parameters, model has {}",
            tr.store.len()
        )));
    }
    Ok(())
}

fn set_moment(opt: &mut Optimizer, rest: &str, t: &Tensor) -> Result<()> {
    let (kind, pname) = rest
        .split_once('.')
        .ok_or_else(|| Error::Checkpoint(format!("malformed moment name {rest}")))?;
    let idx = opt
        .names()
        .iter()
        .position(|n| n == pname)
        .ok_or_else(|| Error::Checkpoint(format!("moment for unknown parameter {pname}")))?;
    let (m_old, v_old) = opt.moments(idx);
    let (m, v) = match kind {
        "m" => (t.data().to_vec(), v_old.to_vec()),
        "v" => (m_old.to_vec(), t.data().to_vec()),
        other => return Err(Error::Checkpoint(format!("unknown moment kind {other}"))),
    };
    opt.set_moments(idx, m, v)
}

/// Restore a full training state (rebuilds the dataset from the config).
pub fn load_checkpoint(path: &Path) -> Result<Trainer> {
    let parts = load_parts(path)?;
    let mut tr = Trainer::new(parts.cfg)?;
    apply_table(&mut tr, &parts.table)?;
    tr.step = parts.step;
    tr.opt_g.t = parts.opt_g_t;
    tr.opt_d.t = parts.opt_d_t;
    tr.rng = ChaCha8Rng::from_seed(parts.rng_seed);
    tr.rng.set_word_pos(parts.rng_pos);
    Ok(tr)
}

/// Restore only what inference needs (no dataset access).
pub fn load_model(path: &Path) -> Result<(Model, TrainConfig)> {
    let parts = load_parts(path)?;
    let cfg = parts.cfg.clone();
    let net = cfg.net_config();
    let mut store = crate::params::ParamStore::new();
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    crate::nets::init_params(&net, &mut store, &mut init_rng)?;
    crate::losses::init_extractor(&mut store, &mut init_rng)?;
    let mut seen = 0usize;
    for (name, t) in &parts.table {
        if name.starts_with("opt_g.") || name.starts_with("opt_d.") {
            continue;
        }
        store
            .set_value(name, t.clone())
            .map_err(|e| Error::Checkpoint(format!("parameter {name}: {e}")))?;
        seen += 1;
    }
    if seen != store.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {seen} parameters, model has {}",
            store.len()
        )));
    }
    Ok((Model::new(net, store), cfg))
}
