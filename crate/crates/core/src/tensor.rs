//! Dense row-major f32 tensors.
//!
//! Tensors are immutable values: every op produces a new one. The gradient
//! machinery in [`crate::graph`] builds on this.

use rand::RngCore;

use crate::error::{Error, Result};

/// Product of extents.
pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// A dense tensor: shape, row-major 32-bit data, and a gradient flag.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    requires_grad: bool,
}

impl Tensor {
    /// Build from shape and data. Fails when the data length does not match
    /// the product of extents or any extent is zero.
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::shape("tensor", format!("zero extent in {shape:?}")));
        }
        let n = numel(&shape);
        if n != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} implies {n} elements, data has {}", data.len()),
            ));
        }
        Ok(Tensor { shape, data, requires_grad: false })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![0.0; numel(shape)], requires_grad: false }
    }

    pub fn filled(shape: &[usize], value: f32) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![value; numel(shape)], requires_grad: false }
    }

    pub fn scalar(value: f32) -> Self {
        Tensor { shape: vec![1], data: vec![value], requires_grad: false }
    }

    /// Zero-mean Gaussian samples with the given standard deviation
    /// (Box-Muller over the supplied RNG stream).
    pub fn randn(shape: &[usize], std: f32, rng: &mut impl RngCore) -> Self {
        let n = numel(shape);
        let mut data = Vec::with_capacity(n);
        while data.len() < n {
            let (a, b) = gauss_pair(rng);
            data.push(a * std);
            if data.len() < n {
                data.push(b * std);
            }
        }
        Tensor { shape: shape.to_vec(), data, requires_grad: false }
    }

    /// Uniform samples in [lo, hi).
    pub fn rand_uniform(shape: &[usize], lo: f32, hi: f32, rng: &mut impl RngCore) -> Self {
        let n = numel(shape);
        let data = (0..n).map(|_| lo + (hi - lo) * unit_f32(rng)).collect();
        Tensor { shape: shape.to_vec(), data, requires_grad: false }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// Builder-style gradient flag.
    pub fn with_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    /// The single element of a scalar tensor.
    pub fn item(&self) -> Result<f32> {
        if self.data.len() != 1 {
            return Err(Error::shape("item", format!("expected scalar, got shape {:?}", self.shape)));
        }
        Ok(self.data[0])
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Same data viewed under a new shape with equal element count.
    pub fn reshaped(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("cannot view {:?} ({} elems) as {shape:?}", self.shape, self.data.len()),
            ));
        }
        Ok(Tensor { shape: shape.to_vec(), data: self.data.clone(), requires_grad: self.requires_grad })
    }

    /// Mean absolute difference against another tensor of the same shape.
    pub fn mean_abs_diff(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::shape(
                "mean_abs_diff",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        let sum: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (*a as f64 - *b as f64).abs())
            .sum();
        Ok(sum / self.data.len() as f64)
    }

    /// Largest absolute element difference against another tensor.
    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::shape("max_abs_diff", format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (*a as f64 - *b as f64).abs())
            .fold(0.0, f64::max))
    }
}

fn unit_f32(rng: &mut impl RngCore) -> f32 {
    // 24 high bits -> uniform in [0, 1)
    (rng.next_u32() >> 8) as f32 * (1.0 / (1u32 << 24) as f32)
}

fn gauss_pair(rng: &mut impl RngCore) -> (f32, f32) {
    // Box-Muller in f64; u1 nudged away from zero.
    let u1 = ((rng.next_u32() >> 8) as f64 + 0.5) * (1.0 / (1u32 << 24) as f64);
    let u2 = (rng.next_u32() >> 8) as f64 * (1.0 / (1u32 << 24) as f64);
    let r = (-2.0 * u1.ln()).sqrt();
    let theta = 2.0 * std::f64::consts::PI * u2;
    ((r * theta.cos()) as f32, (r * theta.sin()) as f32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn new_rejects_bad_length() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn randn_is_deterministic_per_seed() {
        let mut r1 = ChaCha8Rng::seed_from_u64(7);
        let mut r2 = ChaCha8Rng::seed_from_u64(7);
        let a = Tensor::randn(&[32], 1.0, &mut r1);
        let b = Tensor::randn(&[32], 1.0, &mut r2);
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn randn_moments_are_plausible() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = Tensor::randn(&[20000], 2.0, &mut rng);
        let mean: f64 = t.data().iter().map(|v| *v as f64).sum::<f64>() / t.len() as f64;
        let var: f64 =
            t.data().iter().map(|v| (*v as f64 - mean).powi(2)).sum::<f64>() / t.len() as f64;
        assert!(mean.abs() < 0.05, "mean {mean}");
        assert!((var.sqrt() - 2.0).abs() < 0.05, "std {}", var.sqrt());
    }

    #[test]
    fn reshape_preserves_data() {
        let t = Tensor::new(vec![2, 3], (0..6).map(|i| i as f32).collect()).unwrap();
        let r = t.reshaped(&[3, 2]).unwrap();
        assert_eq!(r.shape(), &[3, 2]);
        assert_eq!(r.data(), t.data());
        assert!(t.reshaped(&[4, 2]).is_err());
    }
}
