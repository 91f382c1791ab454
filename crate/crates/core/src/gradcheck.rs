//! Finite-difference gradient verification.
//!
//! Central differences with a caller-supplied step; errors are reported as
//! `|analytic - numeric| / max(|analytic|, |numeric|, 1)` so tiny gradients
//! are compared absolutely and large ones relatively.

use crate::tensor::Tensor;

/// Central finite-difference gradients of a scalar function of several
/// tensors, one output tensor per input.
pub fn finite_diff(f: &mut dyn FnMut(&[Tensor]) -> f64, inputs: &[Tensor], h: f64) -> Vec<Tensor> {
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut grads = Vec::with_capacity(inputs.len());
    for ti in 0..inputs.len() {
        let mut g = vec![0.0; inputs[ti].len()];
        for ei in 0..inputs[ti].len() {
            let orig = work[ti].data()[ei];
            work[ti].data_mut()[ei] = orig + h;
            let fp = f(&work);
            work[ti].data_mut()[ei] = orig - h;
            let fm = f(&work);
            work[ti].data_mut()[ei] = orig;
            g[ei] = (fp - fm) / (2.0 * h);
        }
        grads.push(Tensor::new(inputs[ti].shape().to_vec(), g));
    }
    grads
}

/// `|a - b| / max(|a|, |b|, 1)`.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Worst-case [`rel_err`] over two equally shaped tensors.
pub fn max_rel_err(analytic: &Tensor, numeric: &Tensor) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape(), "gradient shape mismatch");
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| rel_err(a, n))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        // f(x) = sum(x^2), df/dx = 2x.
        let x = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]);
        let mut f = |ts: &[Tensor]| ts[0].data().iter().map(|v| v * v).sum::<f64>();
        let g = finite_diff(&mut f, &[x.clone()], 1e-4);
        let want = Tensor::new(vec![3], vec![2.0, -4.0, 1.0]);
        assert!(max_rel_err(&want, &g[0]) < 1e-7);
    }

    #[test]
    fn rel_err_uses_absolute_floor() {
        assert_eq!(rel_err(0.0, 0.0), 0.0);
        assert!((rel_err(1e-9, 2e-9) - 1e-9).abs() < 1e-20);
        assert!((rel_err(200.0, 100.0) - 0.5).abs() < 1e-15);
    }
}
