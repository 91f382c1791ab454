//! Convolution-family kernels: dense, transposed, adder and shift variants,
//! pooling and pixel shuffles.
//!
//! Dense paths go through im2col plus the fixed-order matmul kernels in
//! [`super::linalg`]; the adder paths are direct loops with a contiguous
//! stride-1 fast path. Everything is single-threaded and deterministic.
//!
//! Zero padding is literal: for the adder op a padded tap contributes
//! `|0 - f|`, not zero, matching the L1 aggregation it implements.

use super::linalg::{mm_nn, mm_nt, mm_tn};
use crate::tensor::Tensor;

fn conv_out_dim(h: usize, k: usize, s: usize, p: usize) -> usize {
    assert!(h + 2 * p >= k, "kernel larger than padded input");
    (h + 2 * p - k) / s + 1
}

/// Gather `(C, H, W)` into columns `(C*k*k, hout*wout)` with zero padding.
fn im2col(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    s: usize,
    p: usize,
    hout: usize,
    wout: usize,
    cols: &mut [f64],
) {
    debug_assert_eq!(cols.len(), c * k * k * hout * wout);
    let ohw = hout * wout;
    for ci in 0..c {
        let xc = &x[ci * h * w..ci * h * w + h * w];
        for kh in 0..k {
            for kw in 0..k {
                let crow = &mut cols[((ci * k + kh) * k + kw) * ohw..][..ohw];
                for oh in 0..hout {
                    let ih = (oh * s + kh) as isize - p as isize;
                    let dst = &mut crow[oh * wout..oh * wout + wout];
                    if ih < 0 || ih >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let xrow = &xc[ih as usize * w..ih as usize * w + w];
                    if s == 1 {
                        // iw = ow + kw - p; copy the in-range span, zero the rest.
                        let shift = kw as isize - p as isize;
                        let lo = ((-shift).max(0) as usize).min(wout);
                        let hi = (((w as isize - shift).max(0)) as usize).min(wout).max(lo);
                        dst[..lo].fill(0.0);
                        if lo < hi {
                            dst[lo..hi].copy_from_slice(
                                &xrow[(lo as isize + shift) as usize
                                    ..(hi as isize + shift) as usize],
                            );
                        }
                        dst[hi..].fill(0.0);
                    } else {
                        for (ow, d) in dst.iter_mut().enumerate() {
                            let iw = (ow * s + kw) as isize - p as isize;
                            *d = if iw >= 0 && iw < w as isize {
                                xrow[iw as usize]
                            } else {
                                0.0
                            };
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add columns `(C*k*k, gh*gw)` back into `(C, H, W)`; the exact
/// adjoint of [`im2col`] with the same geometry.
fn col2im(
    cols: &[f64],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    s: usize,
    p: usize,
    gh: usize,
    gw: usize,
    x: &mut [f64],
) {
    debug_assert_eq!(cols.len(), c * k * k * gh * gw);
    debug_assert_eq!(x.len(), c * h * w);
    let ghw = gh * gw;
    for ci in 0..c {
        let xc = &mut x[ci * h * w..ci * h * w + h * w];
        for kh in 0..k {
            for kw in 0..k {
                let crow = &cols[((ci * k + kh) * k + kw) * ghw..][..ghw];
                for oh in 0..gh {
                    let ih = (oh * s + kh) as isize - p as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    let xrow = &mut xc[ih as usize * w..ih as usize * w + w];
                    let src = &crow[oh * gw..oh * gw + gw];
                    if s == 1 {
                        let shift = kw as isize - p as isize;
                        let lo = ((-shift).max(0) as usize).min(gw);
                        let hi = (((w as isize - shift).max(0)) as usize).min(gw).max(lo);
                        if lo < hi {
                            let xslice = &mut xrow
                                [(lo as isize + shift) as usize..(hi as isize + shift) as usize];
                            for (xv, &sv) in xslice.iter_mut().zip(&src[lo..hi]) {
                                *xv += sv;
                            }
                        }
                    } else {
                        for (ow, &sv) in src.iter().enumerate() {
                            let iw = (ow * s + kw) as isize - p as isize;
                            if iw >= 0 && iw < w as isize {
                                xrow[iw as usize] += sv;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Dense 2-D convolution. `x: (N, Cin, H, W)`, `w: (Cout, Cin, k, k)`,
/// optional bias `(Cout)`.
pub fn conv2d_forward(x: &Tensor, w: &Tensor, b: Option<&Tensor>, s: usize, p: usize) -> Tensor {
    let (n, cin, h, wd) = x.dims4();
    let (cout, cin_w, k, k2) = w.dims4();
    assert_eq!(cin, cin_w, "conv2d channel mismatch");
    assert_eq!(k, k2, "conv2d kernel must be square");
    let hout = conv_out_dim(h, k, s, p);
    let wout = conv_out_dim(wd, k, s, p);
    let (ck, ohw) = (cin * k * k, hout * wout);
    let mut cols = vec![0.0; ck * ohw];
    let mut out = vec![0.0; n * cout * ohw];
    for ni in 0..n {
        im2col(
            &x.data()[ni * cin * h * wd..],
            cin,
            h,
            wd,
            k,
            s,
            p,
            hout,
            wout,
            &mut cols,
        );
        mm_nn(
            w.data(),
            &cols,
            cout,
            ck,
            ohw,
            &mut out[ni * cout * ohw..(ni + 1) * cout * ohw],
        );
    }
    if let Some(b) = b {
        assert_eq!(b.shape(), &[cout], "conv2d bias shape mismatch");
        for ni in 0..n {
            for co in 0..cout {
                let bv = b.data()[co];
                for o in &mut out[(ni * cout + co) * ohw..(ni * cout + co) * ohw + ohw] {
                    *o += bv;
                }
            }
        }
    }
    Tensor::new(vec![n, cout, hout, wout], out)
}

/// Input gradient of [`conv2d_forward`].
pub fn conv2d_dx(x: &Tensor, w: &Tensor, g: &[f64], s: usize, p: usize) -> Vec<f64> {
    let (n, cin, h, wd) = x.dims4();
    let (cout, _, k, _) = w.dims4();
    let hout = conv_out_dim(h, k, s, p);
    let wout = conv_out_dim(wd, k, s, p);
    let (ck, ohw) = (cin * k * k, hout * wout);
    let mut dcols = vec![0.0; ck * ohw];
    let mut dx = vec![0.0; x.len()];
    for ni in 0..n {
        dcols.fill(0.0);
        mm_tn(
            w.data(),
            &g[ni * cout * ohw..(ni + 1) * cout * ohw],
            cout,
            ck,
            ohw,
            &mut dcols,
        );
        col2im(
            &dcols,
            cin,
            h,
            wd,
            k,
            s,
            p,
            hout,
            wout,
            &mut dx[ni * cin * h * wd..(ni + 1) * cin * h * wd],
        );
    }
    dx
}

/// Weight gradient of [`conv2d_forward`].
pub fn conv2d_dw(x: &Tensor, w_shape: &[usize], g: &[f64], s: usize, p: usize) -> Vec<f64> {
    let (n, cin, h, wd) = x.dims4();
    let (cout, k) = (w_shape[0], w_shape[2]);
    let hout = conv_out_dim(h, k, s, p);
    let wout = conv_out_dim(wd, k, s, p);
    let (ck, ohw) = (cin * k * k, hout * wout);
    let mut cols = vec![0.0; ck * ohw];
    let mut dw = vec![0.0; cout * ck];
    for ni in 0..n {
        im2col(
            &x.data()[ni * cin * h * wd..],
            cin,
            h,
            wd,
            k,
            s,
            p,
            hout,
            wout,
            &mut cols,
        );
        mm_nt(
            &g[ni * cout * ohw..(ni + 1) * cout * ohw],
            &cols,
            cout,
            ohw,
            ck,
            &mut dw,
        );
    }
    dw
}

/// Weight gradient computed with plain nested loops in documented order:
/// for each filter tap, contributions accumulate serially over
/// `(n, oh, ow)` ascending. Slower than [`conv2d_dw`] but bit-reproducible
/// by any direct reimplementation of the formula; used for the
/// straight-through shift-layer gradient so oracle checks can demand
/// exact equality.
pub fn conv2d_dw_direct(x: &Tensor, w_shape: &[usize], g: &[f64], s: usize, p: usize) -> Vec<f64> {
    let (n, cin, h, wd) = x.dims4();
    let (cout, k) = (w_shape[0], w_shape[2]);
    let hout = conv_out_dim(h, k, s, p);
    let wout = conv_out_dim(wd, k, s, p);
    let ohw = hout * wout;
    let mut dw = vec![0.0; cout * cin * k * k];
    // One accumulator per kw tap of a (co, ci, kh) row; the k chains are
    // independent, so interleaving them preserves each tap's serial
    // (n, oh, ow) order bit-for-bit while hiding add latency.
    let mut acc = vec![0.0; k];
    for co in 0..cout {
        for ci in 0..cin {
            for kh in 0..k {
                acc.iter_mut().for_each(|a| *a = 0.0);
                for ni in 0..n {
                    let xc = &x.data()[(ni * cin + ci) * h * wd..(ni * cin + ci + 1) * h * wd];
                    let gp = &g[(ni * cout + co) * ohw..(ni * cout + co) * ohw + ohw];
                    for oh in 0..hout {
                        let ih = (oh * s + kh) as isize - p as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        let xrow = &xc[ih as usize * wd..ih as usize * wd + wd];
                        let grow = &gp[oh * wout..oh * wout + wout];
                        for (ow, &gv) in grow.iter().enumerate() {
                            let base = (ow * s) as isize - p as isize;
                            let kw_lo = (-base).max(0) as usize;
                            let kw_hi = (wd as isize - base).clamp(0, k as isize) as usize;
                            for kw in kw_lo..kw_hi {
                                acc[kw] += gv * xrow[(base + kw as isize) as usize];
                            }
                        }
                    }
                }
                let row = ((co * cin + ci) * k + kh) * k;
                dw[row..row + k].copy_from_slice(&acc);
            }
        }
    }
    dw
}

/// Per-channel sum of an output gradient; the bias adjoint shared by all
/// convolution variants.
pub fn bias_grad(g: &[f64], out: &Tensor) -> Vec<f64> {
    let (n, c, h, w) = out.dims4();
    let hw = h * w;
    let mut db = vec![0.0; c];
    for ni in 0..n {
        for ci in 0..c {
            let mut acc = 0.0;
            for &gv in &g[(ni * c + ci) * hw..(ni * c + ci) * hw + hw] {
                acc += gv;
            }
            db[ci] += acc;
        }
    }
    db
}

/// Transposed 2-D convolution. `x: (N, Cin, H, W)`, `w: (Cin, Cout, k, k)`.
/// `Hout = (H - 1) * s - 2p + k + out_pad`, `out_pad < s`.
pub fn conv_transpose2d_forward(
    x: &Tensor,
    w: &Tensor,
    b: Option<&Tensor>,
    s: usize,
    p: usize,
    out_pad: usize,
) -> Tensor {
    let (n, cin, h, wd) = x.dims4();
    let (cin_w, cout, k, k2) = w.dims4();
    assert_eq!(cin, cin_w, "conv_transpose2d channel mismatch");
    assert_eq!(k, k2, "conv_transpose2d kernel must be square");
    assert!(out_pad < s, "output padding must be smaller than stride");
    let hout = (h - 1) * s + k + out_pad;
    let wout = (wd - 1) * s + k + out_pad;
    assert!(
        hout > 2 * p && wout > 2 * p,
        "padding exceeds transposed output"
    );
    let (hout, wout) = (hout - 2 * p, wout - 2 * p);
    let ckk = cout * k * k;
    let hw = h * wd;
    let mut cols = vec![0.0; ckk * hw];
    let mut out = vec![0.0; n * cout * hout * wout];
    for ni in 0..n {
        cols.fill(0.0);
        mm_tn(
            w.data(),
            &x.data()[ni * cin * hw..(ni + 1) * cin * hw],
            cin,
            ckk,
            hw,
            &mut cols,
        );
        col2im(
            &cols,
            cout,
            hout,
            wout,
            k,
            s,
            p,
            h,
            wd,
            &mut out[ni * cout * hout * wout..(ni + 1) * cout * hout * wout],
        );
    }
    if let Some(b) = b {
        assert_eq!(b.shape(), &[cout], "conv_transpose2d bias shape mismatch");
        let ohw = hout * wout;
        for ni in 0..n {
            for co in 0..cout {
                let bv = b.data()[co];
                for o in &mut out[(ni * cout + co) * ohw..(ni * cout + co) * ohw + ohw] {
                    *o += bv;
                }
            }
        }
    }
    Tensor::new(vec![n, cout, hout, wout], out)
}

/// Input gradient of [`conv_transpose2d_forward`]: a dense convolution of
/// the output gradient with the same (unflipped) weights.
pub fn conv_transpose2d_dx(
    x: &Tensor,
    w: &Tensor,
    g: &[f64],
    out_shape: &[usize],
    s: usize,
    p: usize,
) -> Vec<f64> {
    let (n, cin, h, wd) = x.dims4();
    let (_, cout, k, _) = w.dims4();
    let (gh, gw) = (out_shape[2], out_shape[3]);
    let ckk = cout * k * k;
    let hw = h * wd;
    let mut cols = vec![0.0; ckk * hw];
    let mut dx = vec![0.0; x.len()];
    for ni in 0..n {
        im2col(
            &g[ni * cout * gh * gw..],
            cout,
            gh,
            gw,
            k,
            s,
            p,
            h,
            wd,
            &mut cols,
        );
        mm_nn(
            w.data(),
            &cols,
            cin,
            ckk,
            hw,
            &mut dx[ni * cin * hw..(ni + 1) * cin * hw],
        );
    }
    dx
}

/// Weight gradient of [`conv_transpose2d_forward`].
pub fn conv_transpose2d_dw(
    x: &Tensor,
    w_shape: &[usize],
    g: &[f64],
    out_shape: &[usize],
    s: usize,
    p: usize,
) -> Vec<f64> {
    let (n, cin, h, wd) = x.dims4();
    let (cout, k) = (w_shape[1], w_shape[2]);
    let (gh, gw) = (out_shape[2], out_shape[3]);
    let ckk = cout * k * k;
    let hw = h * wd;
    let mut cols = vec![0.0; ckk * hw];
    let mut dw = vec![0.0; cin * ckk];
    for ni in 0..n {
        im2col(
            &g[ni * cout * gh * gw..],
            cout,
            gh,
            gw,
            k,
            s,
            p,
            h,
            wd,
            &mut cols,
        );
        mm_nt(
            &x.data()[ni * cin * hw..(ni + 1) * cin * hw],
            &cols,
            cin,
            hw,
            ckk,
            &mut dw,
        );
    }
    dw
}

/// Adder convolution: `out[n,co,oh,ow] = -sum_{ci,kh,kw} |x - f|` over the
/// receptive field, plus optional bias. `f: (Cout, Cin, k, k)`.
pub fn adder_conv2d_forward(
    x: &Tensor,
    f: &Tensor,
    b: Option<&Tensor>,
    s: usize,
    p: usize,
) -> Tensor {
    let (n, cin, h, wd) = x.dims4();
    let (cout, cin_f, k, k2) = f.dims4();
    assert_eq!(cin, cin_f, "adder_conv2d channel mismatch");
    assert_eq!(k, k2, "adder_conv2d kernel must be square");
    let hout = conv_out_dim(h, k, s, p);
    let wout = conv_out_dim(wd, k, s, p);
    let ohw = hout * wout;
    let mut out = vec![0.0; n * cout * ohw];
    for ni in 0..n {
        let xn = &x.data()[ni * cin * h * wd..(ni + 1) * cin * h * wd];
        for co in 0..cout {
            let acc = &mut out[(ni * cout + co) * ohw..(ni * cout + co) * ohw + ohw];
            for ci in 0..cin {
                let xc = &xn[ci * h * wd..ci * h * wd + h * wd];
                for kh in 0..k {
                    for kw in 0..k {
                        let fv = f.data()[((co * cin + ci) * k + kh) * k + kw];
                        let afv = fv.abs();
                        for oh in 0..hout {
                            let ih = (oh * s + kh) as isize - p as isize;
                            let dst = &mut acc[oh * wout..oh * wout + wout];
                            if ih < 0 || ih >= h as isize {
                                for d in dst.iter_mut() {
                                    *d += afv;
                                }
                                continue;
                            }
                            let xrow = &xc[ih as usize * wd..ih as usize * wd + wd];
                            if s == 1 {
                                let shift = kw as isize - p as isize;
                                let lo = ((-shift).max(0) as usize).min(wout);
                                let hi = ((wd as isize - shift).max(0) as usize).min(wout);
                                for d in &mut dst[..lo] {
                                    *d += afv;
                                }
                                if lo < hi {
                                    let xs = &xrow[(lo as isize + shift) as usize
                                        ..(hi as isize + shift) as usize];
                                    for (d, &xv) in dst[lo..hi].iter_mut().zip(xs) {
                                        *d += (xv - fv).abs();
                                    }
                                }
                                for d in &mut dst[hi.max(lo)..] {
                                    *d += afv;
                                }
                            } else {
                                for (ow, d) in dst.iter_mut().enumerate() {
                                    let iw = (ow * s + kw) as isize - p as isize;
                                    *d += if iw >= 0 && iw < wd as isize {
                                        (xrow[iw as usize] - fv).abs()
                                    } else {
                                        afv
                                    };
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    for o in out.iter_mut() {
        *o = -*o;
    }
    if let Some(b) = b {
        assert_eq!(b.shape(), &[cout], "adder_conv2d bias shape mismatch");
        for ni in 0..n {
            for co in 0..cout {
                let bv = b.data()[co];
                for o in &mut out[(ni * cout + co) * ohw..(ni * cout + co) * ohw + ohw] {
                    *o += bv;
                }
            }
        }
    }
    Tensor::new(vec![n, cout, hout, wout], out)
}

/// Input surrogate gradient of [`adder_conv2d_forward`]:
/// `dx += g * clip(f - x, -1, 1)` over every (tap, output) pair.
///
/// Accumulation order is part of the contract: contributions to each input
/// cell arrive in ascending `(n, co, ci, kh, kw, oh, ow)` loop order, so a
/// direct reimplementation with the same nest reproduces results exactly.
pub fn adder_conv2d_dx(x: &Tensor, f: &Tensor, g: &[f64], s: usize, p: usize) -> Vec<f64> {
    let (n, cin, h, wd) = x.dims4();
    let (cout, _, k, _) = f.dims4();
    let hout = conv_out_dim(h, k, s, p);
    let wout = conv_out_dim(wd, k, s, p);
    let ohw = hout * wout;
    let mut dx = vec![0.0; x.len()];
    for ni in 0..n {
        let xn = &x.data()[ni * cin * h * wd..(ni + 1) * cin * h * wd];
        let dxn = &mut dx[ni * cin * h * wd..(ni + 1) * cin * h * wd];
        for co in 0..cout {
            let gp = &g[(ni * cout + co) * ohw..(ni * cout + co) * ohw + ohw];
            for ci in 0..cin {
                let xc = &xn[ci * h * wd..ci * h * wd + h * wd];
                let dxc = &mut dxn[ci * h * wd..ci * h * wd + h * wd];
                for kh in 0..k {
                    for kw in 0..k {
                        let fv = f.data()[((co * cin + ci) * k + kh) * k + kw];
                        for oh in 0..hout {
                            let ih = (oh * s + kh) as isize - p as isize;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            let xrow = &xc[ih as usize * wd..ih as usize * wd + wd];
                            let dxrow = &mut dxc[ih as usize * wd..ih as usize * wd + wd];
                            let grow = &gp[oh * wout..oh * wout + wout];
                            for (ow, &gv) in grow.iter().enumerate() {
                                let iw = (ow * s + kw) as isize - p as isize;
                                if iw >= 0 && iw < wd as isize {
                                    let iw = iw as usize;
                                    dxrow[iw] += gv * (fv - xrow[iw]).clamp(-1.0, 1.0);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Filter surrogate gradient of [`adder_conv2d_forward`]:
/// `df += g * (x - f)`, where padded taps use `x = 0`.
///
/// Accumulation order is part of the contract: per-image partial sums run
/// over ascending `(oh, ow)` and are added across images in batch order.
pub fn adder_conv2d_df(x: &Tensor, f: &Tensor, g: &[f64], s: usize, p: usize) -> Vec<f64> {
    let (n, cin, h, wd) = x.dims4();
    let (cout, _, k, _) = f.dims4();
    let hout = conv_out_dim(h, k, s, p);
    let wout = conv_out_dim(wd, k, s, p);
    let ohw = hout * wout;
    let mut df = vec![0.0; f.len()];
    // One accumulator per kw tap of a (co, ci, kh) row, as in
    // conv2d_dw_direct: the per-tap (oh, ow) order is unchanged, the
    // independent chains just interleave.
    let mut acc = vec![0.0; k];
    for ni in 0..n {
        let xn = &x.data()[ni * cin * h * wd..(ni + 1) * cin * h * wd];
        for co in 0..cout {
            let gp = &g[(ni * cout + co) * ohw..(ni * cout + co) * ohw + ohw];
            for ci in 0..cin {
                let xc = &xn[ci * h * wd..ci * h * wd + h * wd];
                for kh in 0..k {
                    let frow = ((co * cin + ci) * k + kh) * k;
                    let fs = &f.data()[frow..frow + k];
                    acc.iter_mut().for_each(|a| *a = 0.0);
                    for oh in 0..hout {
                        let ih = (oh * s + kh) as isize - p as isize;
                        let grow = &gp[oh * wout..oh * wout + wout];
                        if ih < 0 || ih >= h as isize {
                            // Entire row padded: x = 0 at every tap.
                            for &gv in grow {
                                for kw in 0..k {
                                    acc[kw] += gv * (0.0 - fs[kw]);
                                }
                            }
                            continue;
                        }
                        let xrow = &xc[ih as usize * wd..ih as usize * wd + wd];
                        for (ow, &gv) in grow.iter().enumerate() {
                            let base = (ow * s) as isize - p as isize;
                            for kw in 0..k {
                                let iw = base + kw as isize;
                                let xv = if iw >= 0 && iw < wd as isize {
                                    xrow[iw as usize]
                                } else {
                                    0.0
                                };
                                acc[kw] += gv * (xv - fs[kw]);
                            }
                        }
                    }
                    for (kw, &a) in acc.iter().enumerate() {
                        df[frow + kw] += a;
                    }
                }
            }
        }
    }
    df
}

/// Power-of-two weight quantizer. Returns `(sign, exponent, quantized)`
/// with `quantized = sign * 2^exponent`, exponents clamped to
/// `[p_min, p_max]` and `|w| = 0` mapping to `+2^p_min`.
pub fn shift_quantize(w: &Tensor, p_min: i32, p_max: i32) -> (Tensor, Tensor, Tensor) {
    assert!(p_min <= p_max, "empty exponent range");
    let mut sign = Vec::with_capacity(w.len());
    let mut pexp = Vec::with_capacity(w.len());
    let mut wq = Vec::with_capacity(w.len());
    for &v in w.data() {
        debug_assert!(v.is_finite(), "non-finite weight in shift_quantize");
        let s = if v < 0.0 { -1.0 } else { 1.0 };
        // round() ties away from zero; log2(0) = -inf clamps to p_min.
        let p = v.abs().log2().round().clamp(p_min as f64, p_max as f64) as i32;
        sign.push(s);
        pexp.push(p as f64);
        wq.push(s * 2f64.powi(p));
    }
    (
        Tensor::new(w.shape().to_vec(), sign),
        Tensor::new(w.shape().to_vec(), pexp),
        Tensor::new(w.shape().to_vec(), wq),
    )
}

/// Average pooling without padding: `Hout = (H - k) / s + 1`.
pub fn avg_pool2d_forward(x: &Tensor, k: usize, s: usize) -> Tensor {
    let (n, c, h, w) = x.dims4();
    assert!(h >= k && w >= k, "pool window larger than input");
    let hout = (h - k) / s + 1;
    let wout = (w - k) / s + 1;
    let inv = 1.0 / (k * k) as f64;
    let mut out = vec![0.0; n * c * hout * wout];
    for nc in 0..n * c {
        let xp = &x.data()[nc * h * w..nc * h * w + h * w];
        let op = &mut out[nc * hout * wout..nc * hout * wout + hout * wout];
        for oh in 0..hout {
            for ow in 0..wout {
                let mut acc = 0.0;
                for kh in 0..k {
                    let row = &xp[(oh * s + kh) * w + ow * s..(oh * s + kh) * w + ow * s + k];
                    for &xv in row {
                        acc += xv;
                    }
                }
                op[oh * wout + ow] = acc * inv;
            }
        }
    }
    Tensor::new(vec![n, c, hout, wout], out)
}

/// Gradient of [`avg_pool2d_forward`].
pub fn avg_pool2d_dx(
    x_shape: &[usize],
    out_shape: &[usize],
    g: &[f64],
    k: usize,
    s: usize,
) -> Vec<f64> {
    let (n, c, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let (hout, wout) = (out_shape[2], out_shape[3]);
    let inv = 1.0 / (k * k) as f64;
    let mut dx = vec![0.0; n * c * h * w];
    for nc in 0..n * c {
        let gp = &g[nc * hout * wout..nc * hout * wout + hout * wout];
        let dxp = &mut dx[nc * h * w..nc * h * w + h * w];
        for oh in 0..hout {
            for ow in 0..wout {
                let gv = gp[oh * wout + ow] * inv;
                for kh in 0..k {
                    let row = &mut dxp[(oh * s + kh) * w + ow * s..(oh * s + kh) * w + ow * s + k];
                    for d in row {
                        *d += gv;
                    }
                }
            }
        }
    }
    dx
}

/// `(N, C*r^2, H, W) -> (N, C, r*H, r*W)`:
/// `out[n, c, r*h + a, r*w + b] = in[n, c*r^2 + a*r + b, h, w]`.
pub fn pixel_shuffle_forward(x: &Tensor, r: usize) -> Tensor {
    let (n, c_in, h, w) = x.dims4();
    assert!(
        r > 0 && c_in % (r * r) == 0,
        "channels not divisible by r^2"
    );
    let c = c_in / (r * r);
    let (ho, wo) = (h * r, w * r);
    let mut out = vec![0.0; n * c * ho * wo];
    for ni in 0..n {
        for ci in 0..c {
            for a in 0..r {
                for bb in 0..r {
                    let src_c = ci * r * r + a * r + bb;
                    let src =
                        &x.data()[(ni * c_in + src_c) * h * w..(ni * c_in + src_c + 1) * h * w];
                    for hh in 0..h {
                        let srow = &src[hh * w..hh * w + w];
                        let obase = ((ni * c + ci) * ho + (r * hh + a)) * wo + bb;
                        for (ww, &v) in srow.iter().enumerate() {
                            out[obase + ww * r] = v;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![n, c, ho, wo], out)
}

/// Inverse of [`pixel_shuffle_forward`].
pub fn pixel_unshuffle_forward(x: &Tensor, r: usize) -> Tensor {
    let (n, c, h, w) = x.dims4();
    assert!(
        r > 0 && h % r == 0 && w % r == 0,
        "spatial dims not divisible by r"
    );
    let (ho, wo) = (h / r, w / r);
    let c_out = c * r * r;
    let mut out = vec![0.0; n * c_out * ho * wo];
    for ni in 0..n {
        for ci in 0..c {
            let src = &x.data()[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w];
            for a in 0..r {
                for bb in 0..r {
                    let dst_c = ci * r * r + a * r + bb;
                    let dst = &mut out
                        [(ni * c_out + dst_c) * ho * wo..(ni * c_out + dst_c + 1) * ho * wo];
                    for hh in 0..ho {
                        let srow = &src[(r * hh + a) * w + bb..];
                        let drow = &mut dst[hh * wo..hh * wo + wo];
                        for (ww, d) in drow.iter_mut().enumerate() {
                            *d = srow[ww * r];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![n, c_out, ho, wo], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec())
    }

    #[test]
    fn conv_identity_kernel() {
        // 1x1 kernel with weight 1 reproduces the input.
        let x = t(&[1, 1, 2, 3], &[1., 2., 3., 4., 5., 6.]);
        let w = t(&[1, 1, 1, 1], &[1.0]);
        let y = conv2d_forward(&x, &w, None, 1, 0);
        assert_eq!(y.shape(), &[1, 1, 2, 3]);
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn conv_matches_naive_loops() {
        // Random-ish fixed values; compare against a direct 6-level loop.
        let x = t(
            &[1, 2, 4, 4],
            &(0..32)
                .map(|i| ((i * 7 + 3) % 11) as f64 - 5.0)
                .collect::<Vec<_>>(),
        );
        let w = t(
            &[3, 2, 3, 3],
            &(0..54)
                .map(|i| ((i * 5 + 1) % 9) as f64 / 4.0 - 1.0)
                .collect::<Vec<_>>(),
        );
        let b = t(&[3], &[0.5, -0.25, 1.0]);
        for &(s, p) in &[(1usize, 0usize), (1, 1), (2, 1), (2, 2)] {
            let y = conv2d_forward(&x, &w, Some(&b), s, p);
            let (hout, wout) = (y.dim(2), y.dim(3));
            for co in 0..3 {
                for oh in 0..hout {
                    for ow in 0..wout {
                        let mut acc = b.data()[co];
                        for ci in 0..2 {
                            for kh in 0..3 {
                                for kw in 0..3 {
                                    let ih = (oh * s + kh) as isize - p as isize;
                                    let iw = (ow * s + kw) as isize - p as isize;
                                    if ih >= 0 && ih < 4 && iw >= 0 && iw < 4 {
                                        acc += x.data()[(ci * 4 + ih as usize) * 4 + iw as usize]
                                            * w.data()[((co * 2 + ci) * 3 + kh) * 3 + kw];
                                    }
                                }
                            }
                        }
                        let got = y.data()[(co * hout + oh) * wout + ow];
                        assert!((got - acc).abs() < 1e-12, "s={s} p={p}");
                    }
                }
            }
        }
    }

    #[test]
    fn adder_spec_example() {
        // 2x2 input, all-ones filter: Y = -(|1-1| + |2-1| + |3-1| + |4-1|) = -6.
        let x = t(&[1, 1, 2, 2], &[1., 2., 3., 4.]);
        let f = t(&[1, 1, 2, 2], &[1., 1., 1., 1.]);
        let y = adder_conv2d_forward(&x, &f, None, 1, 0);
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[-6.0]);
    }

    #[test]
    fn adder_padding_contributes_filter_magnitude() {
        // Single pixel, 3x3 filter, pad 1: 8 padded taps contribute |f| each.
        let x = t(&[1, 1, 1, 1], &[5.0]);
        let f = t(&[1, 1, 3, 3], &[2.0; 9]);
        let y = adder_conv2d_forward(&x, &f, None, 1, 1);
        // Center tap |5-2| = 3 plus 8 * |0-2| = 16.
        assert_eq!(y.data(), &[-19.0]);
    }

    #[test]
    fn adder_fast_path_matches_naive() {
        let x = t(
            &[2, 2, 5, 5],
            &(0..100)
                .map(|i| ((i * 13 + 7) % 17) as f64 / 3.0 - 2.0)
                .collect::<Vec<_>>(),
        );
        let f = t(
            &[3, 2, 3, 3],
            &(0..54)
                .map(|i| ((i * 11 + 5) % 13) as f64 / 5.0 - 1.0)
                .collect::<Vec<_>>(),
        );
        for &(s, p) in &[(1usize, 0usize), (1, 1), (1, 2), (2, 1)] {
            let y = adder_conv2d_forward(&x, &f, None, s, p);
            let (hout, wout) = (y.dim(2), y.dim(3));
            for n in 0..2 {
                for co in 0..3 {
                    for oh in 0..hout {
                        for ow in 0..wout {
                            let mut acc = 0.0;
                            for ci in 0..2 {
                                for kh in 0..3 {
                                    for kw in 0..3 {
                                        let ih = (oh * s + kh) as isize - p as isize;
                                        let iw = (ow * s + kw) as isize - p as isize;
                                        let xv = if ih >= 0 && ih < 5 && iw >= 0 && iw < 5 {
                                            x.data()
                                                [((n * 2 + ci) * 5 + ih as usize) * 5 + iw as usize]
                                        } else {
                                            0.0
                                        };
                                        let fv = f.data()[((co * 2 + ci) * 3 + kh) * 3 + kw];
                                        acc -= (xv - fv).abs();
                                    }
                                }
                            }
                            let got = y.data()[((n * 3 + co) * hout + oh) * wout + ow];
                            assert!((got - acc).abs() < 1e-12, "s={s} p={p}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn shift_quantize_examples() {
        let w = t(&[3], &[-6.0, 0.0, 0.3]);
        let (s, p, wq) = shift_quantize(&w, -8, 4);
        assert_eq!(s.data(), &[-1.0, 1.0, 1.0]);
        // -6 -> round(log2 6) = 3; 0 -> p_min; 0.3 -> round(-1.737) = -2.
        assert_eq!(p.data(), &[3.0, -8.0, -2.0]);
        assert_eq!(wq.data(), &[-8.0, 2f64.powi(-8), 0.25]);
    }

    #[test]
    fn shift_quantize_clamps_range() {
        let w = t(&[2], &[1000.0, 1e-9]);
        let (_, p, wq) = shift_quantize(&w, -8, 4);
        assert_eq!(p.data(), &[4.0, -8.0]);
        assert_eq!(wq.data(), &[16.0, 2f64.powi(-8)]);
    }

    #[test]
    fn transposed_conv_shape_and_values() {
        // 1 input pixel spreads the kernel onto the output.
        let x = t(&[1, 1, 1, 1], &[2.0]);
        let w = t(&[1, 1, 3, 3], &(1..=9).map(f64::from).collect::<Vec<_>>());
        let y = conv_transpose2d_forward(&x, &w, None, 1, 0, 0);
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        let want: Vec<f64> = (1..=9).map(|v| 2.0 * v as f64).collect();
        assert_eq!(y.data(), &want[..]);

        // Stride-2 upsampling doubles spatial dims with k=2.
        let x = t(&[1, 1, 2, 2], &[1., 2., 3., 4.]);
        let w = t(&[1, 1, 2, 2], &[1., 1., 1., 1.]);
        let y = conv_transpose2d_forward(&x, &w, None, 2, 0, 0);
        assert_eq!(y.shape(), &[1, 1, 4, 4]);
        assert_eq!(
            y.data(),
            &[1., 1., 2., 2., 1., 1., 2., 2., 3., 3., 4., 4., 3., 3., 4., 4.]
        );
    }

    #[test]
    fn transposed_conv_output_padding() {
        let x = t(&[1, 1, 3, 3], &[0.0; 9]);
        let w = t(&[1, 1, 5, 5], &[0.0; 25]);
        let y = conv_transpose2d_forward(&x, &w, None, 2, 2, 1);
        // (3 - 1) * 2 - 4 + 5 + 1 = 6: exact doubling.
        assert_eq!(y.shape(), &[1, 1, 6, 6]);
    }

    #[test]
    fn avg_pool_example() {
        let x = t(&[1, 1, 2, 2], &[1., 2., 3., 4.]);
        let y = avg_pool2d_forward(&x, 2, 2);
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[2.5]);
    }

    #[test]
    fn pixel_shuffle_layout() {
        // Spec layout: out(n, c, r*h + a, r*w + b) = in(n, c*r^2 + a*r + b, h, w).
        let x = t(&[1, 4, 1, 1], &[1., 2., 3., 4.]);
        let y = pixel_shuffle_forward(&x, 2);
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.data(), &[1., 2., 3., 4.]);

        let x = t(&[1, 4, 2, 1], &[1., 2., 3., 4., 5., 6., 7., 8.]);
        let y = pixel_shuffle_forward(&x, 2);
        assert_eq!(y.shape(), &[1, 1, 4, 2]);
        assert_eq!(y.data(), &[1., 3., 5., 7., 2., 4., 6., 8.]);
    }

    #[test]
    fn pixel_shuffle_roundtrip() {
        let x = t(&[2, 8, 3, 2], &(0..96).map(f64::from).collect::<Vec<_>>());
        let y = pixel_shuffle_forward(&x, 2);
        assert_eq!(y.shape(), &[2, 2, 6, 4]);
        let back = pixel_unshuffle_forward(&y, 2);
        assert_eq!(back.shape(), x.shape());
        assert_eq!(back.data(), x.data());
    }
}
