//! Discretized likelihood models and integer CDF tables.
//!
//! The main latent uses a Laplace mixture whose parameters come from the
//! hyper decoder output `h`: for latent channel `c` and mixture index
//! `k < K`, channel `c*3K + k` of `h` holds the weight logit, `c*3K + K + k`
//! the mean, and `c*3K + 2K + k` the scale pre-activation. Scales pass
//! through `sigma_min + softplus(pre)`. The hyper latent uses a factorized
//! per-channel Laplace with learned mean and scale.
//!
//! Graph variants feed the training loss; plain-`f64` variants feed the
//! coder's CDF tables. Both encoder and decoder build tables from the same
//! decoded hyper latent, so table equality is byte-exactness by construction.

use crate::autodiff::{softplus, Graph, Var};
use crate::error::{Result, SapmError};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Laplace scale floor.
pub const SIGMA_MIN: f64 = 0.01;
/// Per-element probability floor applied before the log.
pub const P_FLOOR: f64 = 1e-9;
/// Total integer mass of a CDF table.
pub const CDF_TOTAL: u32 = 1 << 16;
/// Scale pre-activation solving `sigma_min + softplus(pre) = 1`.
pub const SCALE_PRE_INIT: f64 = 0.525_458_719_292_502_1;

/// Laplace CDF `F(x) = 0.5 + 0.5 sign(x-mu) (1 - exp(-|x-mu|/b))`.
pub fn laplace_cdf(x: f64, mu: f64, b: f64) -> Result<f64> {
    if !(b > 0.0) {
        return Err(SapmError::numeric(format!(
            "laplace scale must be positive, got {b}"
        )));
    }
    let t = x - mu;
    let s = if t < 0.0 { -1.0 } else { 1.0 };
    // 1 - exp(-|t|/b) via exp_m1 for small-|t| accuracy.
    Ok(0.5 + 0.5 * s * -(-t.abs() / b).exp_m1())
}

/// Mass of the unit bin centered on `y` under one Laplace component.
pub fn laplace_bin_mass(y: f64, mu: f64, b: f64) -> Result<f64> {
    Ok(laplace_cdf(y + 0.5, mu, b)? - laplace_cdf(y - 0.5, mu, b)?)
}

/// Mixture parameters for a single latent element.
#[derive(Debug, Clone, PartialEq)]
pub struct LmmElem {
    pub w: Vec<f64>,
    pub mu: Vec<f64>,
    pub b: Vec<f64>,
}

impl LmmElem {
    /// Floored bin mass at integer level `y`.
    pub fn bin_mass(&self, y: f64) -> Result<f64> {
        let mut p = 0.0;
        for k in 0..self.w.len() {
            p += self.w[k] * laplace_bin_mass(y, self.mu[k], self.b[k])?;
        }
        Ok(p.max(P_FLOOR))
    }

    /// Bin masses over an inclusive integer support, with the open tails
    /// folded into the first and last bin so the masses sum to one.
    pub fn support_masses(&self, y_min: i32, y_max: i32) -> Result<Vec<f64>> {
        if y_min > y_max {
            return Err(SapmError::numeric("empty latent support"));
        }
        let n = (y_max - y_min + 1) as usize;
        let mut out = vec![0.0; n];
        for k in 0..self.w.len() {
            fold_laplace_masses(&mut out, self.w[k], self.mu[k], self.b[k], y_min, y_max)?;
        }
        Ok(out)
    }
}

/// Accumulate `w`-weighted Laplace bin masses over `[y_min, y_max]` into
/// `out`, folding the tails beyond the support into the end bins.
fn fold_laplace_masses(
    out: &mut [f64],
    w: f64,
    mu: f64,
    b: f64,
    y_min: i32,
    y_max: i32,
) -> Result<()> {
    let mut lower = 0.0; // F(y_min - 0.5) folded away: tail starts at 0
    for (i, y) in (y_min..=y_max).enumerate() {
        let upper = if y == y_max {
            1.0
        } else {
            laplace_cdf(y as f64 + 0.5, mu, b)?
        };
        out[i] += w * (upper - lower);
        lower = upper;
    }
    Ok(())
}

fn softmax_inplace(v: &mut [f64]) {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for x in v.iter_mut() {
        *x = (*x - m).exp();
        z += *x;
    }
    for x in v.iter_mut() {
        *x /= z;
    }
}

/// Extract the mixture parameters for element `(n, c, iy, ix)` of the
/// latent from the raw hyper decoder output.
pub fn lmm_elem_params(
    h: &Tensor,
    n: usize,
    c: usize,
    iy: usize,
    ix: usize,
    kmix: usize,
) -> LmmElem {
    let (_, hc, hh, hw) = h.dims4();
    assert!(
        hc % (3 * kmix) == 0,
        "hyper output channels must be 3K per latent channel"
    );
    let at = |ch: usize| h.data()[((n * hc + ch) * hh + iy) * hw + ix];
    let base = c * 3 * kmix;
    let mut w: Vec<f64> = (0..kmix).map(|k| at(base + k)).collect();
    softmax_inplace(&mut w);
    let mu: Vec<f64> = (0..kmix).map(|k| at(base + kmix + k)).collect();
    let b: Vec<f64> = (0..kmix)
        .map(|k| SIGMA_MIN + softplus(at(base + 2 * kmix + k)))
        .collect();
    LmmElem { w, mu, b }
}

/// Graph-side Laplace CDF; `x`, `mu`, `b` share a shape.
fn laplace_cdf_graph(g: &mut Graph, x: Var, mu: Var, b: Var) -> Var {
    let t = g.sub(x, mu);
    let s = g.sign_detached(t);
    let a = g.abs(t);
    let r = g.div(a, b);
    let nr = g.neg(r);
    let e = g.exp(nr);
    let ne = g.neg(e);
    let one_minus = g.add_scalar(ne, 1.0);
    let half = g.scale(one_minus, 0.5);
    let signed = g.mul(s, half);
    g.add_scalar(signed, 0.5)
}

fn laplace_bin_graph(g: &mut Graph, y: Var, mu: Var, b: Var) -> Var {
    let up = g.add_scalar(y, 0.5);
    let lo = g.add_scalar(y, -0.5);
    let fu = laplace_cdf_graph(g, up, mu, b);
    let fl = laplace_cdf_graph(g, lo, mu, b);
    g.sub(fu, fl)
}

/// Per-element mixture likelihood of `y_hat` given hyper decoder output
/// `h`, floored at [`P_FLOOR`]. Shapes: `y_hat (N, C, H, W)`,
/// `h (N, 3K*C, H, W)`.
pub fn lmm_likelihood(g: &mut Graph, y_hat: Var, h: Var, kmix: usize) -> Result<Var> {
    let (_, c, hy, wy) = g.value(y_hat).dims4();
    let (_, hc, hh, hw) = g.value(h).dims4();
    if hc != 3 * kmix * c || hh != hy || hw != wy {
        return Err(SapmError::numeric(format!(
            "hyper output shape ({hc}, {hh}, {hw}) does not parameterize a {kmix}-mixture over ({c}, {hy}, {wy})"
        )));
    }
    let pick = |g: &mut Graph, group: usize, k: usize| {
        let idx: Vec<usize> = (0..c).map(|ch| ch * 3 * kmix + group * kmix + k).collect();
        g.channel_select(h, &idx)
    };
    // Stable softmax over the K weight logits.
    let logits: Vec<Var> = (0..kmix).map(|k| pick(g, 0, k)).collect();
    let mut m = logits[0];
    for &l in &logits[1..] {
        m = g.max_elem(m, l);
    }
    let exps: Vec<Var> = logits
        .iter()
        .map(|&l| {
            let d = g.sub(l, m);
            g.exp(d)
        })
        .collect();
    let mut z = exps[0];
    for &e in &exps[1..] {
        z = g.add(z, e);
    }
    let mut p: Option<Var> = None;
    for k in 0..kmix {
        let w = g.div(exps[k], z);
        let mu = pick(g, 1, k);
        let pre = pick(g, 2, k);
        let sp = g.softplus(pre);
        let b = g.add_scalar(sp, SIGMA_MIN);
        let mass = laplace_bin_graph(g, y_hat, mu, b);
        let wm = g.mul(w, mass);
        p = Some(match p {
            Some(acc) => g.add(acc, wm),
            None => wm,
        });
    }
    Ok(g.clamp_min(p.unwrap(), P_FLOOR))
}

/// Factorized per-channel Laplace prior for the hyper latent.
#[derive(Debug, Clone)]
pub struct FactorizedModel {
    pub mu: ParamId,
    pub b_pre: ParamId,
    pub c: usize,
}

impl FactorizedModel {
    pub fn new(ps: &mut ParamStore, name: &str, c: usize) -> FactorizedModel {
        let mu = ps.add(format!("{name}.mu"), Tensor::zeros(&[c]));
        let b_pre = ps.add(format!("{name}.b_pre"), Tensor::full(&[c], SCALE_PRE_INIT));
        FactorizedModel { mu, b_pre, c }
    }

    /// Per-element floored bin mass of `z_hat (N, C, H, W)`.
    pub fn likelihood(&self, g: &mut Graph, ps: &ParamStore, z_hat: Var) -> Result<Var> {
        let (_, c, _, _) = g.value(z_hat).dims4();
        if c != self.c {
            return Err(SapmError::numeric("hyper latent channel count mismatch"));
        }
        let mu = g.param(ps, self.mu);
        let b_pre = g.param(ps, self.b_pre);
        let sp = g.softplus(b_pre);
        let b = g.add_scalar(sp, SIGMA_MIN);
        // Broadcast the per-channel scale to the full tensor through a ones
        // carrier so the gradient still reaches b.
        let ones = g.input(Tensor::full(g.value(z_hat).shape(), 1.0));
        let b_full = g.mul_chan(ones, b);
        let neg_mu = g.neg(mu);
        let centered = g.add_chan(z_hat, neg_mu);
        let zero = g.input(Tensor::zeros(g.value(z_hat).shape()));
        let mass = laplace_bin_graph(g, centered, zero, b_full);
        Ok(g.clamp_min(mass, P_FLOOR))
    }

    /// Plain `(mu, b)` for one channel, for table building.
    pub fn elem_params(&self, ps: &ParamStore, channel: usize) -> (f64, f64) {
        let mu = ps.value(self.mu).data()[channel];
        let b = SIGMA_MIN + softplus(ps.value(self.b_pre).data()[channel]);
        (mu, b)
    }

    /// Tail-folded bin masses for one channel over an inclusive support.
    pub fn support_masses(
        &self,
        ps: &ParamStore,
        channel: usize,
        z_min: i32,
        z_max: i32,
    ) -> Result<Vec<f64>> {
        if z_min > z_max {
            return Err(SapmError::numeric("empty hyper latent support"));
        }
        let (mu, b) = self.elem_params(ps, channel);
        let mut out = vec![0.0; (z_max - z_min + 1) as usize];
        fold_laplace_masses(&mut out, 1.0, mu, b, z_min, z_max)?;
        Ok(out)
    }
}

/// Total code length in bits: sum of `-log2 p`, fixed left-to-right order.
pub fn rate_bits(probs: &[f64]) -> f64 {
    let mut acc = 0.0;
    for &p in probs {
        acc -= p.log2();
    }
    acc
}

/// Graph-side total rate in bits over all elements of `p`.
pub fn rate_bits_graph(g: &mut Graph, p: Var) -> Result<Var> {
    let lp = g.log(p)?;
    let s = g.sum(lp);
    Ok(g.scale(s, -1.0 / std::f64::consts::LN_2))
}

/// Integer CDF over a contiguous symbol alphabet. `offset` is the value of
/// symbol index 0; `cdf` has one more entry than there are symbols, starts
/// at 0, ends at [`CDF_TOTAL`], and is strictly increasing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CdfTable {
    pub offset: i32,
    pub cdf: Vec<u32>,
}

impl CdfTable {
    pub fn n_symbols(&self) -> usize {
        self.cdf.len() - 1
    }

    /// Cumulative bounds of one symbol index.
    pub fn bounds(&self, sym: usize) -> (u32, u32) {
        (self.cdf[sym], self.cdf[sym + 1])
    }

    /// Symbol index whose interval contains cumulative value `cum`.
    pub fn locate(&self, cum: u32) -> usize {
        debug_assert!(cum < CDF_TOTAL);
        // partition_point returns the first index with cdf > cum; the
        // owning symbol is one before it.
        self.cdf.partition_point(|&c| c <= cum) - 1
    }

    /// Uniform byte table (256 symbols of equal mass) for escape payloads.
    pub fn uniform_bytes() -> CdfTable {
        build_cdf_table(0, &[1.0; 256]).expect("uniform table is always valid")
    }
}

/// Quantize nonnegative masses into an integer CDF totalling exactly
/// [`CDF_TOTAL`] with every symbol's mass at least 1: each symbol gets
/// `1 + floor(p * (total - n))`, then the residual goes to the largest
/// remainders (ties broken toward lower index).
pub fn build_cdf_table(offset: i32, masses: &[f64]) -> Result<CdfTable> {
    let n = masses.len();
    if n == 0 {
        return Err(SapmError::numeric("cdf table needs at least one symbol"));
    }
    if n as u32 > CDF_TOTAL {
        return Err(SapmError::numeric("cdf table alphabet exceeds total mass"));
    }
    let mut sum = 0.0;
    for &m in masses {
        if !m.is_finite() || m < 0.0 {
            return Err(SapmError::numeric(format!("invalid symbol mass {m}")));
        }
        sum += m;
    }
    if !(sum > 0.0) {
        return Err(SapmError::numeric("cdf table masses are all zero"));
    }
    let spare = (CDF_TOTAL as usize - n) as f64;
    let mut q = vec![0u32; n];
    let mut rema: Vec<(f64, usize)> = Vec::with_capacity(n);
    let mut assigned: u64 = 0;
    for i in 0..n {
        let target = masses[i] / sum * spare;
        let fl = target.floor();
        q[i] = 1 + fl as u32;
        assigned += q[i] as u64;
        rema.push((target - fl, i));
    }
    let mut residual = CDF_TOTAL as i64 - assigned as i64;
    debug_assert!(
        (0..=n as i64).contains(&residual),
        "residual {residual} out of range"
    );
    // Largest remainder first; stable index order on ties.
    rema.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    for &(_, i) in &rema {
        if residual == 0 {
            break;
        }
        q[i] += 1;
        residual -= 1;
    }
    let mut cdf = Vec::with_capacity(n + 1);
    cdf.push(0u32);
    let mut acc = 0u32;
    for &qi in &q {
        acc += qi;
        cdf.push(acc);
    }
    debug_assert_eq!(acc, CDF_TOTAL);
    Ok(CdfTable { offset, cdf })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn cdf_closed_forms() {
        assert_eq!(laplace_cdf(3.0, 3.0, 2.0).unwrap(), 0.5);
        assert!((laplace_cdf(1e6, 0.0, 1.0).unwrap() - 1.0).abs() < 1e-15);
        let f = laplace_cdf(1.5, 0.5, 1.0).unwrap();
        assert!((f - (1.0 - 0.5 * (-1.0f64).exp())).abs() < 1e-12);
        assert!((f - 0.816060).abs() < 1e-6);
        assert!(laplace_cdf(0.0, 0.0, 0.0).is_err());
        assert!(laplace_cdf(0.0, 0.0, -1.0).is_err());
    }

    #[test]
    fn lmm_bin_examples() {
        let one = LmmElem {
            w: vec![1.0],
            mu: vec![0.0],
            b: vec![1.0],
        };
        let p = one.bin_mass(0.0).unwrap();
        assert!((p - (1.0 - (-0.5f64).exp())).abs() < 1e-12);
        assert!((p - 0.393469).abs() < 1e-6);

        let two = LmmElem {
            w: vec![0.5, 0.5],
            mu: vec![0.0, 0.0],
            b: vec![1.0, 1.0],
        };
        assert!((two.bin_mass(0.0).unwrap() - p).abs() < 1e-15);

        let wide = LmmElem {
            w: vec![1.0],
            mu: vec![0.0],
            b: vec![100.0],
        };
        assert!((wide.bin_mass(0.0).unwrap() - (1.0 - (-0.005f64).exp())).abs() < 1e-9);

        let far = LmmElem {
            w: vec![1.0],
            mu: vec![0.0],
            b: vec![0.05],
        };
        assert_eq!(far.bin_mass(200.0).unwrap(), P_FLOOR);
    }

    #[test]
    fn rate_bits_examples() {
        assert!((rate_bits(&[0.5; 7]) - 7.0).abs() < 1e-12);
        assert_eq!(rate_bits(&[1.0]), 0.0);
        assert!((rate_bits(&[0.25, 0.5]) - 3.0).abs() < 1e-12);
    }

    #[test]
    fn table_halves() {
        let t = build_cdf_table(-1, &[0.5, 0.5]).unwrap();
        assert_eq!(t.cdf, vec![0, 32768, 65536]);
        assert_eq!(t.offset, -1);
        assert_eq!(t.locate(0), 0);
        assert_eq!(t.locate(32767), 0);
        assert_eq!(t.locate(32768), 1);
        assert_eq!(t.locate(65535), 1);
    }

    #[test]
    fn table_mode_bin_and_floor() {
        let elem = LmmElem {
            w: vec![1.0],
            mu: vec![0.0],
            b: vec![1.0],
        };
        let masses = elem.support_masses(-16, 16).unwrap();
        let t = build_cdf_table(-16, &masses).unwrap();
        assert_eq!(*t.cdf.last().unwrap(), CDF_TOTAL);
        let widths: Vec<u32> = (0..t.n_symbols())
            .map(|i| t.cdf[i + 1] - t.cdf[i])
            .collect();
        let argmax = widths.iter().enumerate().max_by_key(|(_, &w)| w).unwrap().0;
        assert_eq!(argmax as i32 + t.offset, 0);
        assert!(widths.iter().all(|&w| w >= 1));
    }

    #[test]
    fn table_random_masses_stay_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..200 {
            let n = rng.gen_range(1..400);
            let masses: Vec<f64> = (0..n)
                .map(|_| {
                    if rng.gen_bool(0.3) {
                        0.0
                    } else {
                        rng.gen::<f64>()
                    }
                })
                .collect();
            let masses = if masses.iter().all(|&m| m == 0.0) {
                vec![1.0; n]
            } else {
                masses
            };
            let t = build_cdf_table(0, &masses).unwrap();
            assert_eq!(t.cdf[0], 0);
            assert_eq!(*t.cdf.last().unwrap(), CDF_TOTAL);
            for i in 0..t.n_symbols() {
                assert!(t.cdf[i + 1] > t.cdf[i]);
            }
        }
    }

    #[test]
    fn table_rejects_bad_masses() {
        assert!(build_cdf_table(0, &[]).is_err());
        assert!(build_cdf_table(0, &[0.0, 0.0]).is_err());
        assert!(build_cdf_table(0, &[1.0, -0.5]).is_err());
        assert!(build_cdf_table(0, &[f64::NAN]).is_err());
    }

    #[test]
    fn uniform_byte_table_is_exact() {
        let t = CdfTable::uniform_bytes();
        assert_eq!(t.n_symbols(), 256);
        for i in 0..256 {
            assert_eq!(t.bounds(i), (256 * i as u32, 256 * (i + 1) as u32));
        }
    }

    #[test]
    fn normalization_over_grid() {
        // Support masses fold the open tails into the end bins, so they
        // must sum to one for every mean/scale combination.
        for mu in -5..=5 {
            let mu = mu as f64;
            for &b in &[0.1, 1.0, 10.0] {
                for elem in [
                    LmmElem {
                        w: vec![1.0],
                        mu: vec![mu],
                        b: vec![b],
                    },
                    LmmElem {
                        w: vec![0.2, 0.5, 0.3],
                        mu: vec![mu, mu * 0.5, -mu],
                        b: vec![b, b, 2.0 * b],
                    },
                ] {
                    let masses = elem.support_masses(-30, 30).unwrap();
                    let total: f64 = masses.iter().sum();
                    assert!(total >= 1.0 - 1e-4, "mu {mu} b {b}: {total}");
                    assert!(total <= 1.0 + 1e-12);
                    let t = build_cdf_table(-30, &masses).unwrap();
                    for i in 0..t.n_symbols() {
                        assert!(t.cdf[i + 1] > t.cdf[i]);
                    }
                }
            }
        }
    }

    #[test]
    fn interior_support_masses_match_plain_bins() {
        let elem = LmmElem {
            w: vec![0.6, 0.4],
            mu: vec![0.3, -1.2],
            b: vec![0.7, 2.0],
        };
        let masses = elem.support_masses(-30, 30).unwrap();
        for (i, y) in (-30..=30).enumerate() {
            if y == -30 || y == 30 {
                continue;
            }
            let mut plain = 0.0;
            for k in 0..2 {
                plain += elem.w[k] * laplace_bin_mass(y as f64, elem.mu[k], elem.b[k]).unwrap();
            }
            assert!((masses[i] - plain).abs() < 1e-14);
        }
    }

    #[test]
    fn graph_lmm_matches_plain() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (c, h, w, kmix) = (2usize, 3usize, 3usize, 3usize);
        let y = Tensor::uniform(&[1, c, h, w], 4.0, &mut rng);
        let hyper = Tensor::uniform(&[1, 3 * kmix * c, h, w], 2.0, &mut rng);
        let mut g = Graph::new(false);
        let yv = g.input(y.clone());
        let hv = g.input(hyper.clone());
        let p = lmm_likelihood(&mut g, yv, hv, kmix).unwrap();
        for ch in 0..c {
            for iy in 0..h {
                for ix in 0..w {
                    let elem = lmm_elem_params(&hyper, 0, ch, iy, ix, kmix);
                    assert!((elem.w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                    let yval = y.data()[(ch * h + iy) * w + ix];
                    let want = {
                        let mut acc = 0.0;
                        for k in 0..kmix {
                            acc +=
                                elem.w[k] * laplace_bin_mass(yval, elem.mu[k], elem.b[k]).unwrap();
                        }
                        acc.max(P_FLOOR)
                    };
                    let got = g.value(p).data()[(ch * h + iy) * w + ix];
                    assert!(
                        (got - want).abs() < 1e-12,
                        "({ch},{iy},{ix}): {got} vs {want}"
                    );
                }
            }
        }
    }

    #[test]
    fn graph_lmm_shape_mismatch_errors() {
        let mut g = Graph::new(false);
        let y = g.input(Tensor::zeros(&[1, 2, 3, 3]));
        let h = g.input(Tensor::zeros(&[1, 17, 3, 3]));
        assert!(lmm_likelihood(&mut g, y, h, 3).is_err());
    }

    #[test]
    fn factorized_matches_plain_and_is_symmetric() {
        let mut ps = ParamStore::new();
        let fm = FactorizedModel::new(&mut ps, "fz", 2);
        ps.value_mut(fm.mu).data_mut()[1] = 0.75;
        let mut g = Graph::new(false);
        let z = g.input(Tensor::new(
            vec![1, 2, 1, 3],
            vec![0.0, 1.0, -1.0, 0.0, 2.0, -2.0],
        ));
        let p = fm.likelihood(&mut g, &ps, z).unwrap();
        let pd = g.value(p).data();
        // Channel 0: mu = 0, b = 1 at init.
        let (mu0, b0) = fm.elem_params(&ps, 0);
        assert_eq!((mu0, b0), (0.0, SIGMA_MIN + softplus(SCALE_PRE_INIT)));
        assert!((b0 - 1.0).abs() < 1e-12);
        assert!((pd[0] - laplace_bin_mass(0.0, 0.0, b0).unwrap()).abs() < 1e-15);
        assert!((pd[1] - pd[2]).abs() < 1e-15, "symmetric masses around mu");
        // Channel 1 is centered at 0.75.
        assert!((pd[3] - laplace_bin_mass(0.0, 0.75, b0).unwrap()).abs() < 1e-15);
        // Far outside: floor engages.
        let mut g2 = Graph::new(false);
        let z2 = g2.input(Tensor::full(&[1, 2, 1, 1], 200.0));
        let p2 = fm.likelihood(&mut g2, &ps, z2).unwrap();
        assert_eq!(g2.value(p2).data()[0], P_FLOOR);
    }

    #[test]
    fn rate_graph_matches_plain() {
        let probs = vec![0.25, 0.5, 0.125, 0.9];
        let mut g = Graph::new(false);
        let p = g.input(Tensor::new(vec![4], probs.clone()));
        let r = rate_bits_graph(&mut g, p).unwrap();
        assert!((g.value(r).item() - rate_bits(&probs)).abs() < 1e-12);
    }
}
