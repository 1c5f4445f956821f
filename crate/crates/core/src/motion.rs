//! Motion dictionary and latent navigation.
//!
//! A displacement in latent space is written as a magnitude-weighted sum over
//! an orthonormal set of learned direction vectors. The dictionary is stored
//! as a raw learnable matrix and re-orthonormalized (modified Gram-Schmidt)
//! on every forward pass, differentiably. Transfer algebra on top of that is
//! plain vector addition and runs outside the graph.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nets::LEAKY_SLOPE;
use crate::params::BoundParams;
use crate::tensor::Tensor;

/// Threshold under which a pivot row counts as linearly dependent.
pub const PIVOT_EPS: f64 = 1e-8;

/// Point in latent space (length N).
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode(pub Vec<f32>);

/// Per-direction step sizes (length M).
#[derive(Clone, Debug, PartialEq)]
pub struct MagnitudeVector(pub Vec<f32>);

/// Displacement in latent space (length N).
#[derive(Clone, Debug, PartialEq)]
pub struct LatentPath(pub Vec<f32>);

impl LatentCode {
    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

impl LatentPath {
    pub fn zero(n: usize) -> Self {
        LatentPath(vec![0.0; n])
    }

    pub fn norm(&self) -> f32 {
        self.0.iter().map(|v| v * v).sum::<f32>().sqrt()
    }

    /// self - other.
    pub fn minus(&self, other: &LatentPath) -> Result<LatentPath> {
        check_dim("LatentPath::minus", self.0.len(), other.0.len())?;
        Ok(LatentPath(self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect()))
    }
}

fn check_dim(op: &'static str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::shape(op, format!("dimension {a} vs {b}")));
    }
    Ok(())
}

/// The learnable M x N direction matrix. Rows only form an orthonormal basis
/// after [`MotionDictionary::orthonormalized`] (or the in-graph variant).
#[derive(Clone, Debug)]
pub struct MotionDictionary {
    raw: Tensor,
}

impl MotionDictionary {
    /// Wrap an existing M x N matrix with M <= N.
    pub fn from_raw(raw: Tensor) -> Result<Self> {
        let [m, n] = raw.shape() else {
            return Err(Error::shape("motion_dictionary", format!("expected rank 2, got {:?}", raw.shape())));
        };
        if m > n {
            return Err(Error::shape(
                "motion_dictionary",
                format!("{m} directions cannot be orthonormal in dimension {n}"),
            ));
        }
        Ok(MotionDictionary { raw })
    }

    /// Fresh dictionary with Gaussian rows of scale 1/sqrt(N).
    pub fn init(m: usize, n: usize, rng: &mut impl rand::RngCore) -> Result<Self> {
        let std = 1.0 / (n as f32).sqrt();
        Self::from_raw(Tensor::randn(&[m, n], std, rng))
    }

    pub fn raw(&self) -> &Tensor {
        &self.raw
    }

    pub fn num_directions(&self) -> usize {
        self.raw.shape()[0]
    }

    pub fn latent_dim(&self) -> usize {
        self.raw.shape()[1]
    }

    /// Orthonormal view of the raw matrix.
    pub fn orthonormalized(&self) -> Result<Tensor> {
        orthonormalize(&self.raw)
    }
}

/// Modified Gram-Schmidt over the rows of an M x N matrix. Rejects
/// (near-)dependent rows, naming the failing row.
pub fn orthonormalize(raw: &Tensor) -> Result<Tensor> {
    let [m, n] = raw.shape() else {
        return Err(Error::shape("orthonormalize", format!("expected rank 2, got {:?}", raw.shape())));
    };
    let (m, n) = (*m, *n);
    if m > n {
        return Err(Error::shape("orthonormalize", format!("{m} rows in dimension {n}")));
    }
    let mut rows: Vec<Vec<f64>> = raw
        .data()
        .chunks(n)
        .map(|r| r.iter().map(|v| *v as f64).collect())
        .collect();
    for i in 0..m {
        for j in 0..i {
            let (head, tail) = rows.split_at_mut(i);
            let u = &head[j];
            let v = &mut tail[0];
            let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            for (vk, uk) in v.iter_mut().zip(u) {
                *vk -= d * uk;
            }
        }
        let norm: f64 = rows[i].iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < PIVOT_EPS {
            return Err(Error::DependentRow { row: i, norm });
        }
        for v in rows[i].iter_mut() {
            *v /= norm;
        }
    }
    let data: Vec<f32> = rows.into_iter().flatten().map(|v| v as f32).collect();
    Tensor::new(vec![m, n], data)
}

/// In-graph modified Gram-Schmidt: same projection formula built from
/// differentiable ops, so gradients reach the raw matrix. Degenerate rows are
/// rejected at record time (values are known eagerly).
pub fn orthonormalize_var(g: &mut Graph, raw: Var) -> Result<Var> {
    let shape = g.value(raw).shape().to_vec();
    let [m, n] = shape[..] else {
        return Err(Error::shape("orthonormalize", format!("expected rank 2, got {shape:?}")));
    };
    if m > n {
        return Err(Error::shape("orthonormalize", format!("{m} rows in dimension {n}")));
    }
    let mut basis: Vec<Var> = Vec::with_capacity(m);
    for i in 0..m {
        let row = g.slice_rows(raw, i, i + 1)?;
        let mut v = g.reshape(row, &[n])?;
        for u in &basis {
            let d = g.dot(v, *u)?;
            let proj = g.mul_scalar(*u, d)?;
            v = g.sub(v, proj)?;
        }
        let nsq = g.dot(v, v)?;
        let norm = (g.value(nsq).data()[0] as f64).sqrt();
        if norm < PIVOT_EPS {
            return Err(Error::DependentRow { row: i, norm });
        }
        let inv = g.rsqrt_eps(nsq, 0.0)?;
        basis.push(g.mul_scalar(v, inv)?);
    }
    g.stack_rows(&basis)
}

/// The magnitude head: five dense layers over the driving latent, activations
/// between layers 1-4 and a linear final layer. Output width is the
/// dictionary size (or the latent dimension for the direct-path ablation).
pub fn magnitude_head(g: &mut Graph, p: &BoundParams, z_driving: Var) -> Result<Var> {
    let mut h = z_driving;
    for i in 0..5 {
        h = g.affine(
            h,
            p.var(&format!("mot.mlp.l{i}.w"))?,
            p.var(&format!("mot.mlp.l{i}.b"))?,
        )?;
        if i < 4 {
            h = g.leaky_relu(h, LEAKY_SLOPE)?;
        }
    }
    Ok(h)
}

/// w = sum_i a_i d_i over the orthonormalized directions.
pub fn compose_path(magnitudes: &MagnitudeVector, directions: &Tensor) -> Result<LatentPath> {
    let [m, n] = directions.shape() else {
        return Err(Error::shape("compose_path", format!("directions rank {:?}", directions.shape())));
    };
    let (m, n) = (*m, *n);
    check_dim("compose_path", magnitudes.0.len(), m)?;
    let mut w = vec![0.0f32; n];
    for (a, row) in magnitudes.0.iter().zip(directions.data().chunks(n)) {
        for (wk, dk) in w.iter_mut().zip(row) {
            *wk += a * dk;
        }
    }
    Ok(LatentPath(w))
}

/// z_target = z_start + w.
pub fn navigate(start: &LatentCode, path: &LatentPath) -> Result<LatentCode> {
    check_dim("navigate", start.0.len(), path.0.len())?;
    Ok(LatentCode(start.0.iter().zip(&path.0).map(|(z, w)| z + w).collect()))
}

/// Per-frame target code when the source is driven by its own video:
/// z = z_source + w_frame.
pub fn absolute_transfer(z_source: &LatentCode, w_frame: &LatentPath) -> Result<LatentCode> {
    navigate(z_source, w_frame)
}

/// Cross-identity transfer preserving the source pose:
/// z = (z_source + w_source) + (w_frame - w_first).
///
/// When the first driving frame's path equals the source path the formula
/// collapses to the absolute transfer; that reduction is performed literally
/// so the identity holds exactly in floating point.
pub fn relative_transfer(
    z_source: &LatentCode,
    w_source: &LatentPath,
    w_frame: &LatentPath,
    w_first: &LatentPath,
) -> Result<LatentCode> {
    check_dim("relative_transfer", w_source.0.len(), w_first.0.len())?;
    if w_source.0 == w_first.0 {
        return absolute_transfer(z_source, w_frame);
    }
    let z_self = navigate(z_source, w_source)?;
    let delta = w_frame.minus(w_first)?;
    navigate(&z_self, &delta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::finite_diff_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gram(d: &Tensor) -> Vec<f64> {
        let [m, n] = d.shape() else { panic!() };
        let (m, n) = (*m, *n);
        let mut out = vec![0.0f64; m * m];
        for i in 0..m {
            for j in 0..m {
                out[i * m + j] = (0..n)
                    .map(|k| d.data()[i * n + k] as f64 * d.data()[j * n + k] as f64)
                    .sum();
            }
        }
        out
    }

    fn max_gram_dev(d: &Tensor) -> f64 {
        let m = d.shape()[0];
        gram(d)
            .iter()
            .enumerate()
            .map(|(idx, v)| {
                let target = if idx / m == idx % m { 1.0 } else { 0.0 };
                (v - target).abs()
            })
            .fold(0.0, f64::max)
    }

    #[test]
    fn orthonormal_input_is_fixed_point() {
        // identity-prefixed rows are already orthonormal
        let mut data = vec![0.0f32; 3 * 5];
        for i in 0..3 {
            data[i * 5 + i] = 1.0;
        }
        let raw = Tensor::new(vec![3, 5], data.clone()).unwrap();
        let d = orthonormalize(&raw).unwrap();
        assert_eq!(d.data(), &data[..]);
    }

    #[test]
    fn forced_projection_example() {
        let raw = Tensor::new(vec![2, 2], vec![1.0, 0.0, 1.0, 1.0]).unwrap();
        let d = orthonormalize(&raw).unwrap();
        assert_eq!(d.data(), &[1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn random_dictionary_is_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let dict = MotionDictionary::init(20, 128, &mut rng).unwrap();
        let d = dict.orthonormalized().unwrap();
        assert!(max_gram_dev(&d) <= 1e-5, "gram deviation {}", max_gram_dev(&d));
    }

    #[test]
    fn dependent_rows_rejected_with_index() {
        let raw = Tensor::new(vec![3, 4], vec![
            1.0, 0.0, 0.0, 0.0,
            0.0, 1.0, 0.0, 0.0,
            1.0, 1.0, 0.0, 0.0,
        ])
        .unwrap();
        let err = orthonormalize(&raw).unwrap_err();
        assert!(err.to_string().contains("row 2"), "{err}");
        let mut g = Graph::new();
        let v = g.leaf(&raw);
        assert!(orthonormalize_var(&mut g, v).is_err());
    }

    #[test]
    fn graph_and_pure_orthonormalize_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let raw = Tensor::randn(&[6, 16], 0.3, &mut rng);
        let pure = orthonormalize(&raw).unwrap();
        let mut g = Graph::new();
        let v = g.leaf(&raw);
        let on = orthonormalize_var(&mut g, v).unwrap();
        assert!(pure.max_abs_diff(g.value(on)).unwrap() < 1e-5);
    }

    #[test]
    fn orthonormalize_gradient_reaches_raw() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let raw = Tensor::randn(&[3, 6], 0.5, &mut rng);
        let err = finite_diff_check(
            |g, vars| {
                let d = orthonormalize_var(g, vars[0])?;
                let sq = g.mul(d, d)?;
                let weights = g.leaf(&Tensor::randn(&[3, 6], 1.0, &mut ChaCha8Rng::seed_from_u64(77)));
                let prod = g.mul(sq, weights)?;
                g.sum_all(prod)
            },
            &[raw],
            1e-3,
        )
        .unwrap();
        assert!(err <= 1e-3, "rel err {err}");
    }

    #[test]
    fn compose_basis_selection_and_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let dict = MotionDictionary::init(4, 8, &mut rng).unwrap();
        let d = dict.orthonormalized().unwrap();
        let mut one_hot = vec![0.0f32; 4];
        one_hot[2] = 1.0;
        let w = compose_path(&MagnitudeVector(one_hot), &d).unwrap();
        assert_eq!(&w.0[..], &d.data()[2 * 8..3 * 8]);
        let z = compose_path(&MagnitudeVector(vec![0.0; 4]), &d).unwrap();
        assert!(z.0.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn navigate_inverse_and_transfer_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z = LatentCode(Tensor::randn(&[8], 1.0, &mut rng).into_data());
        let w = LatentPath(Tensor::randn(&[8], 1.0, &mut rng).into_data());
        let neg = LatentPath(w.0.iter().map(|v| -v).collect());
        let there = navigate(&z, &w).unwrap();
        let back = navigate(&there, &neg).unwrap();
        // additive inverse in f32: x + w - w == x requires exactness; holds because
        // operations are performed elementwise in matching order
        for (a, b) in back.0.iter().zip(&z.0) {
            assert!((a - b).abs() <= f32::EPSILON * 8.0 * b.abs().max(1.0));
        }

        // w_first == w_source collapses to the absolute transfer, exactly
        let w_t = LatentPath(Tensor::randn(&[8], 0.7, &mut rng).into_data());
        let rel = relative_transfer(&z, &w, &w_t, &w).unwrap();
        let abs = absolute_transfer(&z, &w_t).unwrap();
        assert_eq!(rel, abs);

        // first frame reproduces the source reconstruction code, exactly
        let w1 = LatentPath(Tensor::randn(&[8], 0.4, &mut rng).into_data());
        let first = relative_transfer(&z, &w, &w1, &w1).unwrap();
        let z_self = navigate(&z, &w).unwrap();
        assert_eq!(first, z_self);
    }

    #[test]
    fn dimension_mismatch_diagnostics() {
        let z = LatentCode(vec![0.0; 4]);
        let w = LatentPath(vec![0.0; 5]);
        assert!(navigate(&z, &w).is_err());
        let d = Tensor::zeros(&[2, 4]);
        assert!(compose_path(&MagnitudeVector(vec![1.0; 3]), &d).is_err());
    }
}
