//! Dense tensors and reverse-mode automatic differentiation.
//!
//! [`Tensor`] is a plain value: a shape plus row-major scalars plus an
//! optional gradient buffer. Differentiable computation happens on a
//! [`Tape`], which records every operation and replays them in reverse to
//! accumulate gradients. Tensors are `Send + Sync`, so read-only parameter
//! sets can be shared across threads while each thread builds its own tape.

mod adam;
mod gradcheck;
mod kernels;
mod tape;

pub use adam::AdamState;
pub use gradcheck::finite_diff_grad_check;
pub(crate) use kernels::conv2d_output_dims;
pub use tape::{BandVars, Tape, Var};

use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::Scalar;

/// Dense n-dimensional array of scalars with an optional gradient slot.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<Scalar>,
    grad: Option<Vec<Scalar>>,
    requires_grad: bool,
}

impl Tensor {
    /// Build a tensor from row-major data. Fails unless
    /// `product(shape) == data.len()` and every dimension is positive.
    pub fn new(shape: Vec<usize>, data: Vec<Scalar>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::invalid("Tensor::new", "zero-size dimension"));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "Tensor::new",
                format!("shape {:?} implies {} elements, got {}", shape, numel, data.len()),
            ));
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn full(shape: Vec<usize>, value: Scalar) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; numel],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn scalar(value: Scalar) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
            grad: None,
            requires_grad: false,
        }
    }

    /// Seeded i.i.d. U(lo, hi) tensor.
    pub fn rand_uniform(shape: Vec<usize>, lo: Scalar, hi: Scalar, seed: u64) -> Self {
        let mut t = Tensor::zeros(shape);
        rng::fill_uniform(seed, lo, hi, &mut t.data);
        t
    }

    /// Seeded i.i.d. N(0, sigma^2) tensor.
    pub fn rand_gaussian(shape: Vec<usize>, sigma: Scalar, seed: u64) -> Self {
        let mut t = Tensor::zeros(shape);
        rng::fill_gaussian(seed, sigma, &mut t.data);
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[Scalar] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Scalar] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<Scalar> {
        self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// Mark this tensor as a differentiation target (builder style).
    pub fn with_requires_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
        if !flag {
            self.grad = None;
        }
    }

    pub fn grad(&self) -> Option<&[Scalar]> {
        self.grad.as_deref()
    }

    /// Add `delta` into the gradient slot, allocating it on first use.
    pub fn accumulate_grad(&mut self, delta: &[Scalar]) -> Result<()> {
        if delta.len() != self.data.len() {
            return Err(Error::shape(
                "accumulate_grad",
                format!("gradient length {} vs data length {}", delta.len(), self.data.len()),
            ));
        }
        let grad = self.grad.get_or_insert_with(|| vec![0.0; self.data.len()]);
        for (g, d) in grad.iter_mut().zip(delta) {
            *g += d;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.fill(0.0);
        }
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Error if any scalar is NaN or infinite.
    pub fn check_finite(&self, op: &'static str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::invalid(op, "non-finite scalar in tensor"))
        }
    }

    /// Elementwise difference `self - other`.
    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape(
                "Tensor::sub",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Tensor::new(self.shape.clone(), data)
    }

    /// Elementwise sum `self + other`.
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape(
                "Tensor::add",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Tensor::new(self.shape.clone(), data)
    }

    /// Clamp every element into `[0, 1]`.
    pub fn clamp01(&self) -> Tensor {
        let mut out = self.clone();
        for v in out.data.iter_mut() {
            *v = v.clamp(0.0, 1.0);
        }
        out.grad = None;
        out
    }

    pub fn linf_norm(&self) -> Scalar {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn l1_norm(&self) -> Scalar {
        self.data.iter().map(|v| v.abs()).sum()
    }

    pub fn l2_norm(&self) -> Scalar {
        self.data.iter().map(|v| v * v).sum::<Scalar>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Scalar {
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    /// Reinterpret a `[C, H, W]` image as a singleton batch `[1, C, H, W]`.
    pub fn unsqueeze_batch(&self) -> Tensor {
        let mut shape = Vec::with_capacity(self.shape.len() + 1);
        shape.push(1);
        shape.extend_from_slice(&self.shape);
        Tensor {
            shape,
            data: self.data.clone(),
            grad: None,
            requires_grad: false,
        }
    }

    /// Drop a leading batch dimension of size 1.
    pub fn squeeze_batch(&self) -> Result<Tensor> {
        if self.shape.first() != Some(&1) {
            return Err(Error::shape(
                "squeeze_batch",
                format!("leading dimension of {:?} is not 1", self.shape),
            ));
        }
        Ok(Tensor {
            shape: self.shape[1..].to_vec(),
            data: self.data.clone(),
            grad: None,
            requires_grad: false,
        })
    }
}

/// Stack same-shaped `[C, H, W]` images into one `[N, C, H, W]` batch.
pub fn stack_images(images: &[&Tensor]) -> Result<Tensor> {
    let first = images.first().ok_or(Error::EmptySet("stack_images"))?;
    let mut data = Vec::with_capacity(first.len() * images.len());
    for img in images {
        if img.shape() != first.shape() {
            return Err(Error::shape(
                "stack_images",
                format!("{:?} vs {:?}", img.shape(), first.shape()),
            ));
        }
        data.extend_from_slice(img.data());
    }
    let mut shape = Vec::with_capacity(first.shape.len() + 1);
    shape.push(images.len());
    shape.extend_from_slice(first.shape());
    Tensor::new(shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_mismatched_length() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
    }

    #[test]
    fn grad_accumulates_additively() {
        let mut t = Tensor::zeros(vec![3]).with_requires_grad();
        t.accumulate_grad(&[1.0, 2.0, 3.0]).unwrap();
        t.accumulate_grad(&[1.0, 1.0, 1.0]).unwrap();
        assert_eq!(t.grad().unwrap(), &[2.0, 3.0, 4.0]);
    }

    #[test]
    fn rand_uniform_is_seed_deterministic() {
        let a = Tensor::rand_uniform(vec![16], -1.0, 1.0, 42);
        let b = Tensor::rand_uniform(vec![16], -1.0, 1.0, 42);
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn stack_and_squeeze_roundtrip() {
        let a = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::new(vec![1, 2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let batch = stack_images(&[&a, &b]).unwrap();
        assert_eq!(batch.shape(), &[2, 1, 2, 2]);
        let one = a.unsqueeze_batch();
        assert_eq!(one.squeeze_batch().unwrap(), a);
    }
}
