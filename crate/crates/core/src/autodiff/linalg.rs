//! Dense matrix kernels and the symmetric inverse square root.
//!
//! All kernels are single-threaded with a fixed accumulation order, so
//! results are bit-identical across runs on the same target.

use nalgebra::DMatrix;

use crate::error::{Result, SapmError};

/// `C += A * B` with `A: m x k`, `B: k x n`, row-major. `out` must be zeroed
/// by the caller if a plain product is wanted.
pub fn mm_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..i * k + k];
        let crow = &mut out[i * n..i * n + n];
        for (l, &alv) in arow.iter().enumerate() {
            if alv == 0.0 {
                continue;
            }
            let brow = &b[l * n..l * n + n];
            for (c, &bv) in crow.iter_mut().zip(brow) {
                *c += alv * bv;
            }
        }
    }
}

/// `C += A * B^T` with `A: m x k`, `B: n x k`, row-major.
pub fn mm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..i * k + k];
        for j in 0..n {
            let brow = &b[j * k..j * k + k];
            out[i * n + j] += dot(arow, brow);
        }
    }
}

/// `C += A^T * B` with `A: m x k`, `B: m x n`, row-major, result `k x n`.
pub fn mm_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for l in 0..m {
        let arow = &a[l * k..l * k + k];
        let brow = &b[l * n..l * n + n];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let crow = &mut out[i * n..i * n + n];
            for (c, &bv) in crow.iter_mut().zip(brow) {
                *c += av * bv;
            }
        }
    }
}

/// Serial dot product with four independent accumulators. The split is a
/// fixed function of length, so the order never varies between calls.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len();
    let chunks = n / 4;
    let (mut s0, mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..chunks {
        let j = i * 4;
        s0 += a[j] * b[j];
        s1 += a[j + 1] * b[j + 1];
        s2 += a[j + 2] * b[j + 2];
        s3 += a[j + 3] * b[j + 3];
    }
    let mut tail = 0.0;
    for j in chunks * 4..n {
        tail += a[j] * b[j];
    }
    (s0 + s1) + (s2 + s3) + tail
}

/// Row-major transpose of an `m x n` matrix.
pub fn transpose(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * n);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

/// Saved context for the backward pass of [`sym_inv_sqrt_forward`]:
/// eigenvectors (columns), raw eigenvalues, and the floor used.
#[derive(Debug, Clone)]
pub struct SymEig {
    pub(crate) u: Vec<f64>,
    pub(crate) lam: Vec<f64>,
    pub(crate) dim: usize,
    pub(crate) eps: f64,
}

/// `f(sym(A))` with `f(lambda) = max(lambda, eps)^(-1/2)` applied on the
/// eigenvalues. Returns the (symmetric) result and the eigendecomposition
/// needed for the backward pass.
pub fn sym_inv_sqrt_forward(a: &[f64], dim: usize, eps: f64) -> Result<(Vec<f64>, SymEig)> {
    debug_assert_eq!(a.len(), dim * dim);
    if a.iter().any(|x| !x.is_finite()) {
        return Err(SapmError::numeric("non-finite matrix in sym_inv_sqrt"));
    }
    if eps < 0.0 {
        return Err(SapmError::numeric(
            "sym_inv_sqrt eigenvalue floor must be non-negative",
        ));
    }
    // Symmetrize defensively; covariance inputs are symmetric up to
    // rounding, and the eigensolver assumes exact symmetry.
    let mut sym = vec![0.0; dim * dim];
    for i in 0..dim {
        for j in 0..dim {
            sym[i * dim + j] = 0.5 * (a[i * dim + j] + a[j * dim + i]);
        }
    }
    let mat = DMatrix::from_row_slice(dim, dim, &sym);
    let eig = mat.symmetric_eigen();
    let lam: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    // Column-major storage; u[i + j*dim] is component i of eigenvector j.
    let u: Vec<f64> = eig.eigenvectors.as_slice().to_vec();
    if lam.iter().any(|x| !x.is_finite()) {
        return Err(SapmError::numeric(
            "eigendecomposition failed in sym_inv_sqrt",
        ));
    }

    let fl: Vec<f64> = lam.iter().map(|&l| inv_sqrt_floor(l, eps)).collect();
    // D = U * diag(f(lambda)) * U^T. Only the upper triangle is computed
    // and then mirrored, so the result is exactly symmetric.
    let mut out = vec![0.0; dim * dim];
    for j in 0..dim {
        let col = &u[j * dim..j * dim + dim];
        let f = fl[j];
        for i in 0..dim {
            let ui = col[i] * f;
            let row = &mut out[i * dim + i..i * dim + dim];
            for (o, &uj) in row.iter_mut().zip(&col[i..]) {
                *o += ui * uj;
            }
        }
    }
    for i in 0..dim {
        for j in 0..i {
            out[i * dim + j] = out[j * dim + i];
        }
    }
    Ok((out, SymEig { u, lam, dim, eps }))
}

fn inv_sqrt_floor(lam: f64, eps: f64) -> f64 {
    lam.max(eps).powf(-0.5)
}

/// Derivative of `max(lambda, eps)^(-1/2)`; zero on the floored branch.
fn inv_sqrt_floor_deriv(lam: f64, eps: f64) -> f64 {
    if lam > eps {
        -0.5 * lam.powf(-1.5)
    } else {
        0.0
    }
}

/// Adjoint of [`sym_inv_sqrt_forward`] via the Daleckii-Krein formula:
/// `dA = U (P o (U^T sym(G) U)) U^T` where
/// `P_ij = (f(l_i) - f(l_j)) / (l_i - l_j)` and `P_ii = f'(l_i)`.
pub fn sym_inv_sqrt_backward(eig: &SymEig, g: &[f64]) -> Vec<f64> {
    let dim = eig.dim;
    debug_assert_eq!(g.len(), dim * dim);
    let mut gs = vec![0.0; dim * dim];
    for i in 0..dim {
        for j in 0..dim {
            gs[i * dim + j] = 0.5 * (g[i * dim + j] + g[j * dim + i]);
        }
    }
    // eig.u is column-major, so reinterpreting it row-major gives U^T;
    // transposing once yields a row-major U for the kernels below.
    let u_rm = transpose(&eig.u, dim, dim);
    let mut tmp = vec![0.0; dim * dim];
    mm_nn(&gs, &u_rm, dim, dim, dim, &mut tmp); // Gs * U
    let mut inner = vec![0.0; dim * dim];
    mm_tn(&u_rm, &tmp, dim, dim, dim, &mut inner); // U^T * Gs * U

    let fl: Vec<f64> = eig
        .lam
        .iter()
        .map(|&l| inv_sqrt_floor(l, eig.eps))
        .collect();
    for i in 0..dim {
        for j in 0..dim {
            let (li, lj) = (eig.lam[i], eig.lam[j]);
            let p = if (li - lj).abs() < 1e-12 {
                inv_sqrt_floor_deriv(0.5 * (li + lj), eig.eps)
            } else {
                (fl[i] - fl[j]) / (li - lj)
            };
            inner[i * dim + j] *= p;
        }
    }

    // dA = U * inner * U^T.
    let mut tmp2 = vec![0.0; dim * dim];
    mm_nn(&u_rm, &inner, dim, dim, dim, &mut tmp2);
    let mut da = vec![0.0; dim * dim];
    mm_nt(&tmp2, &u_rm, dim, dim, dim, &mut da);
    da
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_kernels_agree() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0]; // 3x2
        let mut nn = vec![0.0; 4];
        mm_nn(&a, &b, 2, 3, 2, &mut nn);
        assert_eq!(nn, vec![58.0, 64.0, 139.0, 154.0]);

        // A * B == A * (B^T)^T via mm_nt.
        let bt = transpose(&b, 3, 2);
        let mut nt = vec![0.0; 4];
        mm_nt(&a, &bt, 2, 3, 2, &mut nt);
        assert_eq!(nt, nn);

        // A * B == (A^T)^T * B via mm_tn.
        let at = transpose(&a, 2, 3);
        let mut tn = vec![0.0; 4];
        mm_tn(&at, &b, 3, 2, 2, &mut tn);
        assert_eq!(tn, nn);
    }

    #[test]
    fn dot_tail_handling() {
        let a: Vec<f64> = (1..=7).map(|x| x as f64).collect();
        let b = vec![1.0; 7];
        assert_eq!(dot(&a, &b), 28.0);
        assert_eq!(dot(&[], &[]), 0.0);
    }

    #[test]
    fn inv_sqrt_of_diagonal() {
        let a = [4.0, 0.0, 0.0, 9.0];
        let (d, _) = sym_inv_sqrt_forward(&a, 2, 1e-12).unwrap();
        assert!((d[0] - 0.5).abs() < 1e-12);
        assert!((d[3] - 1.0 / 3.0).abs() < 1e-12);
        assert!(d[1].abs() < 1e-12 && d[2].abs() < 1e-12);
    }

    #[test]
    fn inv_sqrt_whitens() {
        // D * A * D should be the identity for well-conditioned A.
        let a = [2.0, 0.5, 0.5, 1.0];
        let (d, _) = sym_inv_sqrt_forward(&a, 2, 1e-12).unwrap();
        let mut ad = vec![0.0; 4];
        mm_nn(&a, &d, 2, 2, 2, &mut ad);
        let mut dad = vec![0.0; 4];
        mm_nn(&d, &ad, 2, 2, 2, &mut dad);
        for i in 0..2 {
            for j in 0..2 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((dad[i * 2 + j] - want).abs() < 1e-10, "dad = {dad:?}");
            }
        }
    }

    #[test]
    fn eigenvalue_floor_applies() {
        // Rank-deficient matrix: floor keeps the output finite.
        let a = [1.0, 1.0, 1.0, 1.0];
        let (d, eig) = sym_inv_sqrt_forward(&a, 2, 0.25).unwrap();
        assert!(d.iter().all(|x| x.is_finite()));
        // One eigenvalue is ~0 and must be floored to 0.25 -> f = 2.
        let mut fs: Vec<f64> = eig.lam.iter().map(|&l| l.max(0.25).powf(-0.5)).collect();
        fs.sort_by(|x, y| x.partial_cmp(y).unwrap());
        assert!((fs[1] - 2.0).abs() < 1e-9);
    }

    #[test]
    fn result_is_symmetric() {
        let a = [3.0, 0.7, 0.3, 0.7, 2.0, 0.1, 0.3, 0.1, 1.5];
        let (d, _) = sym_inv_sqrt_forward(&a, 3, 1e-12).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(d[i * 3 + j], d[j * 3 + i]);
            }
        }
    }

    #[test]
    fn rejects_bad_input() {
        assert!(sym_inv_sqrt_forward(&[f64::NAN, 0.0, 0.0, 1.0], 2, 1e-9).is_err());
        assert!(sym_inv_sqrt_forward(&[1.0], 1, -1e-9).is_err());
        // eps = 0 is legal on nonsingular input.
        let (d, _) = sym_inv_sqrt_forward(&[1.0], 1, 0.0).unwrap();
        assert_eq!(d, vec![1.0]);
    }
}
