//! End-to-end pipeline assembly: encode, navigate, decode-to-flow, warp,
//! refine — plus a graph-free inference wrapper used by the CLI and the
//! evaluation protocol.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::losses;
use crate::motion::{self, LatentCode, LatentPath, MagnitudeVector};
use crate::nets::{self, FlowPyramid, NetConfig, PathMode, RgbLadder};
use crate::params::{BoundParams, ParamStore};
use crate::tensor::Tensor;

/// Latent displacement (B x N) for a batch of driving latents: magnitudes
/// through the head, combined with the orthonormalized dictionary (or the
/// head's direct output in the ablated mode).
pub fn latent_path_var(g: &mut Graph, p: &BoundParams, cfg: &NetConfig, z_driving: Var) -> Result<Var> {
    let head = motion::magnitude_head(g, p, z_driving)?;
    match cfg.path {
        PathMode::Dictionary => {
            let raw = p.var("mot.dict.raw")?;
            let directions = motion::orthonormalize_var(g, raw)?;
            g.matmul(head, directions)
        }
        PathMode::Direct => Ok(head),
    }
}

/// Everything the decoder half produces for one target latent.
pub struct DecodeOut {
    pub pyramid: FlowPyramid,
    pub warped: Vec<Var>,
    pub ladder: RgbLadder,
    pub image: Var,
}

/// Decode a target latent against a source feature pyramid.
pub fn decode_target(
    g: &mut Graph,
    p: &BoundParams,
    cfg: &NetConfig,
    features: &[Var],
    z_target: Var,
) -> Result<DecodeOut> {
    let pyramid = nets::generate_flow(g, p, cfg, z_target)?;
    if features.len() != pyramid.levels.len() {
        return Err(Error::shape(
            "decode_target",
            format!("{} feature scales vs {} flow scales", features.len(), pyramid.levels.len()),
        ));
    }
    let mut warped = Vec::with_capacity(features.len());
    for (feat, (flow, mask)) in features.iter().zip(&pyramid.levels) {
        let w = g.warp(*feat, *flow)?;
        warped.push(g.mul_mask(w, *mask)?);
    }
    let ladder = nets::refine(g, p, cfg, &warped)?;
    let image = ladder.image;
    Ok(DecodeOut { pyramid, warped, ladder, image })
}

/// Training-time forward pass over a (source, driving) batch.
pub struct ReconstructOut {
    pub z_source: Var,
    pub z_driving: Var,
    pub path: Var,
    pub z_target: Var,
    pub decode: DecodeOut,
}

pub fn reconstruct_pair(
    g: &mut Graph,
    p: &BoundParams,
    cfg: &NetConfig,
    x_source: Var,
    x_driving: Var,
) -> Result<ReconstructOut> {
    let enc_s = nets::encode(g, p, cfg, x_source)?;
    let enc_d = nets::encode(g, p, cfg, x_driving)?;
    let path = latent_path_var(g, p, cfg, enc_d.latent)?;
    let z_target = g.add(enc_s.latent, path)?;
    let decode = decode_target(g, p, cfg, &enc_s.features, z_target)?;
    Ok(ReconstructOut { z_source: enc_s.latent, z_driving: enc_d.latent, path, z_target, decode })
}

/// Source-image state cached for repeated decoding.
pub struct EncodedImage {
    pub latent: LatentCode,
    /// Feature pyramid, coarse to fine, each 1 x C x s x s.
    pub features: Vec<Tensor>,
}

/// Inference-time model: network config plus parameter snapshot.
pub struct Model {
    pub cfg: NetConfig,
    pub store: ParamStore,
}

impl Model {
    pub fn new(cfg: NetConfig, store: ParamStore) -> Self {
        Model { cfg, store }
    }

    fn image_leaf(&self, g: &mut Graph, img: &Tensor) -> Result<Var> {
        let shape = img.shape();
        let r = self.cfg.resolution;
        if shape != [3, r, r] {
            return Err(Error::shape(
                "model",
                format!("image {shape:?}, expected [3, {r}, {r}]"),
            ));
        }
        let v = g.constant(img.clone());
        g.reshape(v, &[1, 3, r, r])
    }

    /// Encode one image into its latent code and feature pyramid.
    pub fn encode_image(&self, img: &Tensor) -> Result<EncodedImage> {
        let mut g = Graph::new();
        let p = self.store.bind_all(&mut g, false);
        let x = self.image_leaf(&mut g, img)?;
        let out = nets::encode(&mut g, &p, &self.cfg, x)?;
        let latent = LatentCode(g.value(out.latent).data().to_vec());
        let features = out.features.iter().map(|f| g.value(*f).clone()).collect();
        Ok(EncodedImage { latent, features })
    }

    /// Magnitudes and latent path for one frame latent.
    pub fn path_for(&self, z: &LatentCode) -> Result<(Option<MagnitudeVector>, LatentPath)> {
        let mut g = Graph::new();
        let p = self.store.bind_all(&mut g, false);
        let zv = g.constant(Tensor::new(vec![1, z.dim()], z.0.clone())?);
        let head = motion::magnitude_head(&mut g, &p, zv)?;
        match self.cfg.path {
            PathMode::Dictionary => {
                let mags = MagnitudeVector(g.value(head).data().to_vec());
                let directions = self.directions()?.expect("dictionary mode");
                let path = motion::compose_path(&mags, &directions)?;
                Ok((Some(mags), path))
            }
            PathMode::Direct => Ok((None, LatentPath(g.value(head).data().to_vec()))),
        }
    }

    /// Orthonormalized direction matrix, when the model carries one.
    pub fn directions(&self) -> Result<Option<Tensor>> {
        match self.cfg.path {
            PathMode::Dictionary => {
                let raw = self.store.get("mot.dict.raw")?;
                Ok(Some(motion::orthonormalize(raw)?))
            }
            PathMode::Direct => Ok(None),
        }
    }

    /// Decode a target latent against cached source features into an image.
    pub fn decode_image(&self, source: &EncodedImage, z_target: &LatentCode) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.store.bind_all(&mut g, false);
        let feats: Vec<Var> = source.features.iter().map(|f| g.constant(f.clone())).collect();
        let zv = g.constant(Tensor::new(vec![1, z_target.dim()], z_target.0.clone())?);
        let out = decode_target(&mut g, &p, &self.cfg, &feats, zv)?;
        let img = g.value(out.image);
        let r = self.cfg.resolution;
        img.reshaped(&[3, r, r])
    }

    /// Finest-scale flow field decoded from a latent alone (1 x 2 x R x R ->
    /// 2 x R x R), used to visualize the implicit canonical frame.
    pub fn finest_flow(&self, z: &LatentCode) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.store.bind_all(&mut g, false);
        let zv = g.constant(Tensor::new(vec![1, z.dim()], z.0.clone())?);
        let pyr = nets::generate_flow(&mut g, &p, &self.cfg, zv)?;
        let (flow, _mask) = pyr.levels.last().expect("at least one level");
        let r = self.cfg.resolution;
        g.value(*flow).reshaped(&[2, r, r])
    }

    /// The code that reconstructs the source itself: z + path(z).
    pub fn self_code(&self, source_latent: &LatentCode) -> Result<LatentCode> {
        let (_, w) = self.path_for(source_latent)?;
        motion::navigate(source_latent, &w)
    }
}

/// Per-sequence score of the same-identity reconstruction protocol.
#[derive(Clone, Debug)]
pub struct SequenceScore {
    pub id: String,
    pub l1: f64,
    pub psnr: f64,
}

/// Full evaluation report.
#[derive(Clone, Debug)]
pub struct EvalReport {
    pub sequences: Vec<SequenceScore>,
    pub mean_l1: f64,
    pub mean_psnr: f64,
}

impl EvalReport {
    /// One `seq=<id> l1=<f> psnr=<f>` line per sequence plus an overall line.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for s in &self.sequences {
            out.push_str(&format!("seq={} l1={:.6} psnr={:.3}\n", s.id, s.l1, s.psnr));
        }
        out.push_str(&format!(
            "overall l1={:.6} psnr={:.3} sequences={}\n",
            self.mean_l1,
            self.mean_psnr,
            self.sequences.len()
        ));
        out
    }
}

/// Same-identity reconstruction protocol: the first frame of each sequence is
/// the source, every remaining frame is reconstructed from it. `reconstruct`
/// maps (source, driving frames) to reconstructed frames.
pub fn evaluate_reconstruction<F>(ds: &Dataset, mut reconstruct: F) -> Result<EvalReport>
where
    F: FnMut(&Tensor, &[Tensor]) -> Result<Vec<Tensor>>,
{
    if ds.sequences.is_empty() {
        return Err(Error::Dataset("evaluation dataset is empty".into()));
    }
    let mut scores = Vec::new();
    for (i, seq) in ds.sequences.iter().enumerate() {
        if seq.frames.len() < 2 {
            eprintln!("warning: sequence {i} has fewer than 2 frames, skipping");
            continue;
        }
        let source = &seq.frames[0];
        let driving = &seq.frames[1..];
        let recon = reconstruct(source, driving)?;
        if recon.len() != driving.len() {
            return Err(Error::Invalid(format!(
                "reconstructor returned {} frames for {} driving frames",
                recon.len(),
                driving.len()
            )));
        }
        let mut l1 = 0.0;
        let mut ps = 0.0;
        for (r, d) in recon.iter().zip(driving) {
            l1 += losses::l1_distance(r, d)?;
            ps += losses::psnr(r, d)?;
        }
        let n = driving.len() as f64;
        scores.push(SequenceScore { id: i.to_string(), l1: l1 / n, psnr: ps / n });
    }
    if scores.is_empty() {
        return Err(Error::Dataset("no sequence was long enough to evaluate".into()));
    }
    let n = scores.len() as f64;
    Ok(EvalReport {
        mean_l1: scores.iter().map(|s| s.l1).sum::<f64>() / n,
        mean_psnr: scores.iter().map(|s| s.psnr).sum::<f64>() / n,
        sequences: scores,
    })
}

/// Reconstruct every driving frame with the model under absolute transfer,
/// encoding the source once.
pub fn model_reconstructor(model: &Model) -> impl FnMut(&Tensor, &[Tensor]) -> Result<Vec<Tensor>> + '_ {
    move |source, driving| {
        let enc = model.encode_image(source)?;
        let mut out = Vec::with_capacity(driving.len());
        for frame in driving {
            let z_frame = model.encode_image(frame)?.latent;
            let (_, w) = model.path_for(&z_frame)?;
            let z_target = motion::absolute_transfer(&enc.latent, &w)?;
            out.push(model.decode_image(&enc, &z_target)?);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_dataset, SynthParams};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_model(seed: u64, path: PathMode) -> Model {
        let cfg = NetConfig {
            resolution: 16,
            latent_dim: 12,
            dict_size: 4,
            base_channels: 4,
            max_channels: 8,
            mlp_hidden: 12,
            path,
        };
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        nets::init_params(&cfg, &mut store, &mut rng).unwrap();
        losses::init_extractor(&mut store, &mut rng).unwrap();
        Model::new(cfg, store)
    }

    #[test]
    fn end_to_end_forward_is_finite_and_sized() {
        for path in [PathMode::Dictionary, PathMode::Direct] {
            let model = tiny_model(1, path);
            let ds = synth_dataset(2, 1, 3, &SynthParams { resolution: 16 }).unwrap();
            let enc = model.encode_image(&ds.sequences[0].frames[0]).unwrap();
            assert_eq!(enc.latent.dim(), 12);
            assert_eq!(enc.features.len(), 3);
            let z_d = model.encode_image(&ds.sequences[0].frames[1]).unwrap().latent;
            let (mags, w) = model.path_for(&z_d).unwrap();
            match path {
                PathMode::Dictionary => assert_eq!(mags.unwrap().0.len(), 4),
                PathMode::Direct => assert!(mags.is_none()),
            }
            let z_t = motion::absolute_transfer(&enc.latent, &w).unwrap();
            let img = model.decode_image(&enc, &z_t).unwrap();
            assert_eq!(img.shape(), &[3, 16, 16]);
            assert!(img.all_finite());
        }
    }

    #[test]
    fn gradient_reaches_every_trainable_parameter() {
        let model = tiny_model(3, PathMode::Dictionary);
        let ds = synth_dataset(4, 1, 3, &SynthParams { resolution: 16 }).unwrap();
        let mut g = Graph::new();
        let p = model.store.bind_where(&mut g, |e| {
            if e.name.starts_with("disc.") {
                None
            } else {
                Some(e.trainable)
            }
        });
        let xs = g.constant(ds.sequences[0].frames[0].reshaped(&[1, 3, 16, 16]).unwrap());
        let xd = g.constant(ds.sequences[0].frames[1].reshaped(&[1, 3, 16, 16]).unwrap());
        let out = reconstruct_pair(&mut g, &p, &model.cfg, xs, xd).unwrap();
        let rec = losses::recon_loss(&mut g, out.decode.image, xd).unwrap();
        let per = losses::perceptual_loss(&mut g, &p, out.decode.image, xd).unwrap();
        let tot = losses::total_loss(&mut g, rec, per, rec, 10.0).unwrap();
        let grads = g.backward(tot).unwrap();
        for (name, var) in p.iter() {
            if name.starts_with("percep.") {
                continue;
            }
            let gr = grads.get(&g, *var);
            let norm: f64 = gr.data().iter().map(|v| (*v as f64).powi(2)).sum();
            assert!(norm > 0.0, "parameter {name} received a zero gradient");
        }
    }

    #[test]
    fn evaluate_with_copy_oracle_is_perfect() {
        let ds = synth_dataset(5, 2, 4, &SynthParams { resolution: 16 }).unwrap();
        let report = evaluate_reconstruction(&ds, |_, driving| Ok(driving.to_vec())).unwrap();
        assert_eq!(report.sequences.len(), 2);
        assert_eq!(report.mean_l1, 0.0);
        assert_eq!(report.mean_psnr, 99.0);
        let text = report.render();
        for line in text.lines().take(2) {
            assert!(line.starts_with("seq="), "{line}");
            assert!(line.contains(" l1=") && line.contains(" psnr="), "{line}");
        }
    }
}
