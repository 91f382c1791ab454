//! Dense row-major tensor value type.
//!
//! Rank is at most 4 with NCHW interpretation for rank-4 data. All training
//! arithmetic is 64-bit; checkpoints export 32-bit. `Tensor` is a plain
//! value — gradient tracking lives in [`crate::autodiff::Graph`].

use rand::Rng;

use crate::error::{Result, SapmError};

/// Dense N-dimensional array (rank ≤ 4), contiguous row-major storage.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Tensor {
        let shape = shape.into();
        assert!(shape.len() <= 4, "rank > 4 unsupported");
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::new(shape, vec![0.0; shape.iter().product()])
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        Tensor::new(shape, vec![value; shape.iter().product()])
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::new(&[1], vec![value])
    }

    /// Uniform values in `(-bound, bound)` drawn from `rng` in index order.
    pub fn uniform<R: Rng>(shape: &[usize], bound: f64, rng: &mut R) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| (rng.gen::<f64>() * 2.0 - 1.0) * bound)
            .collect();
        Tensor::new(shape, data)
    }

    /// C x C identity stored as rank-2.
    pub fn eye(c: usize) -> Tensor {
        let mut t = Tensor::zeros(&[c, c]);
        for i in 0..c {
            t.data[i * c + i] = 1.0;
        }
        t
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Scalar value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    /// Same data reinterpreted under a new shape of equal element count.
    pub fn reshaped(&self, shape: &[usize]) -> Tensor {
        Tensor::new(shape, self.data.clone())
    }

    /// Extent of dimension `d`.
    pub fn dim(&self, d: usize) -> usize {
        self.shape[d]
    }

    /// NCHW extents of a rank-4 tensor.
    pub fn dims4(&self) -> (usize, usize, usize, usize) {
        assert_eq!(self.rank(), 4, "dims4() on rank-{} tensor", self.rank());
        (self.shape[0], self.shape[1], self.shape[2], self.shape[3])
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn check_finite(&self, context: &str) -> Result<()> {
        if self.all_finite() {
            Ok(())
        } else {
            Err(SapmError::Numeric(format!(
                "non-finite values in {context}"
            )))
        }
    }

    /// Euclidean norm over all elements, fixed left-to-right summation.
    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn shape_product_matches_len() {
        let t = Tensor::zeros(&[2, 3, 4, 5]);
        assert_eq!(t.len(), 120);
        assert_eq!(t.dims4(), (2, 3, 4, 5));
    }

    #[test]
    #[should_panic]
    fn mismatched_shape_panics() {
        Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn uniform_is_seed_deterministic() {
        let a = Tensor::uniform(&[3, 3], 0.5, &mut ChaCha8Rng::seed_from_u64(7));
        let b = Tensor::uniform(&[3, 3], 0.5, &mut ChaCha8Rng::seed_from_u64(7));
        assert_eq!(a, b);
        assert!(a.data().iter().all(|v| v.abs() < 0.5));
    }

    #[test]
    fn finiteness_check() {
        let mut t = Tensor::zeros(&[2]);
        assert!(t.check_finite("t").is_ok());
        t.data_mut()[1] = f64::NAN;
        assert!(t.check_finite("t").is_err());
    }
}
