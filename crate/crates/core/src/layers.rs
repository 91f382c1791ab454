//! Layer-level operators: dense and transposed convolutions, the shift and
//! adder layers, 1x1 implicit deconvolution, GDN, and the latent quantizer.
//!
//! A layer owns [`ParamId`]s plus hyperparameters; tensors live in the
//! [`ParamStore`]. Forward methods append to a caller-owned [`Graph`].
//! Layers with running statistics report pending buffer updates through
//! [`ForwardAux`] so the forward pass never mutates the store.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Result, SapmError};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Forward-pass mode: training statistics vs frozen running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Deferred buffer updates (running statistics) produced during a forward
/// pass; applied to the store after the optimizer step.
#[derive(Debug, Default)]
pub struct ForwardAux {
    pending: Vec<(ParamId, Tensor)>,
}

impl ForwardAux {
    pub fn new() -> ForwardAux {
        ForwardAux::default()
    }

    pub fn push(&mut self, id: ParamId, value: Tensor) {
        self.pending.push((id, value));
    }

    pub fn is_empty(&self) -> bool {
        self.pending.is_empty()
    }

    /// Write all pending buffer values into the store.
    pub fn apply(self, store: &mut ParamStore) {
        for (id, value) in self.pending {
            store.set_value(id, value);
        }
    }
}

fn fan_in_bound(fan_in: usize) -> f64 {
    (1.0 / fan_in as f64).sqrt()
}

/// Plain dense convolution layer.
#[derive(Debug, Clone)]
pub struct Conv2dLayer {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2dLayer {
    pub fn new<R: Rng>(
        ps: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        rng: &mut R,
    ) -> Conv2dLayer {
        let w = ps.add(
            format!("{name}.w"),
            Tensor::uniform(&[cout, cin, k, k], fan_in_bound(cin * k * k), rng),
        );
        let b = bias.then(|| ps.add(format!("{name}.b"), Tensor::zeros(&[cout])));
        Conv2dLayer { w, b, stride, pad }
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Var {
        let w = g.param(ps, self.w);
        let b = self.b.map(|b| g.param(ps, b));
        g.conv2d(x, w, b, self.stride, self.pad)
    }
}

/// Transposed convolution layer, weight layout `(Cin, Cout, k, k)`.
#[derive(Debug, Clone)]
pub struct ConvTranspose2dLayer {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
    pub out_pad: usize,
}

impl ConvTranspose2dLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        ps: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        out_pad: usize,
        bias: bool,
        rng: &mut R,
    ) -> ConvTranspose2dLayer {
        let w = ps.add(
            format!("{name}.w"),
            Tensor::uniform(&[cin, cout, k, k], fan_in_bound(cin * k * k), rng),
        );
        let b = bias.then(|| ps.add(format!("{name}.b"), Tensor::zeros(&[cout])));
        ConvTranspose2dLayer {
            w,
            b,
            stride,
            pad,
            out_pad,
        }
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Var {
        let w = g.param(ps, self.w);
        let b = self.b.map(|b| g.param(ps, b));
        g.conv_transpose2d(x, w, b, self.stride, self.pad, self.out_pad)
    }
}

/// Shift layer: convolution whose effective weights are the power-of-two
/// quantization of a full-precision master copy. The master weights are
/// what the optimizer updates (straight-through).
#[derive(Debug, Clone)]
pub struct ShiftWeights {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
    pub p_min: i32,
    pub p_max: i32,
}

pub const SHIFT_P_MIN: i32 = -8;
pub const SHIFT_P_MAX: i32 = 4;

impl ShiftWeights {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        ps: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> ShiftWeights {
        let w = ps.add(
            format!("{name}.w"),
            Tensor::uniform(&[cout, cin, k, k], fan_in_bound(cin * k * k), rng),
        );
        ShiftWeights {
            w,
            b: None,
            stride,
            pad,
            p_min: SHIFT_P_MIN,
            p_max: SHIFT_P_MAX,
        }
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Var {
        let w = g.param(ps, self.w);
        let b = self.b.map(|b| g.param(ps, b));
        g.shift_conv2d(x, w, b, self.stride, self.pad, self.p_min, self.p_max)
    }

    /// Current `(S, P, W_q)` decomposition of the master weights.
    pub fn quantized(&self, ps: &ParamStore) -> (Tensor, Tensor, Tensor) {
        crate::autodiff::conv::shift_quantize(ps.value(self.w), self.p_min, self.p_max)
    }
}

/// Adder layer: negative-L1 aggregation filters plus optional bias.
#[derive(Debug, Clone)]
pub struct AdderFilters {
    pub f: ParamId,
    pub b: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl AdderFilters {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        ps: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        rng: &mut R,
    ) -> AdderFilters {
        let f = ps.add(
            format!("{name}.f"),
            Tensor::uniform(&[cout, cin, k, k], fan_in_bound(cin * k * k), rng),
        );
        let b = bias.then(|| ps.add(format!("{name}.b"), Tensor::zeros(&[cout])));
        AdderFilters { f, b, stride, pad }
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Var {
        let f = g.param(ps, self.f);
        let b = self.b.map(|b| g.param(ps, b));
        g.adder_conv2d(x, f, b, self.stride, self.pad)
    }
}

/// 1x1 implicit deconvolution: per-batch feature whitening by the inverse
/// square root of the covariance, followed by a learned 1x1 mixing.
///
/// `w` is stored `(Cin, Cout)` so whitened sample rows multiply it
/// directly. Running `mu`/`D` buffers serve inference mode and are updated
/// by exponential moving average through [`ForwardAux`].
#[derive(Debug, Clone)]
pub struct IdParams {
    pub w: ParamId,
    pub run_mu: ParamId,
    pub run_d: ParamId,
    pub eps: f64,
    pub momentum: f64,
    pub cin: usize,
    pub cout: usize,
}

pub const ID_EPS: f64 = 1e-5;
pub const ID_MOMENTUM: f64 = 0.9;

impl IdParams {
    pub fn new<R: Rng>(
        ps: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        rng: &mut R,
    ) -> IdParams {
        let w = ps.add(
            format!("{name}.w"),
            Tensor::uniform(&[cin, cout], fan_in_bound(cin), rng),
        );
        let run_mu = ps.add_buffer(format!("{name}.run_mu"), Tensor::zeros(&[cin]));
        let run_d = ps.add_buffer(format!("{name}.run_d"), Tensor::eye(cin));
        IdParams {
            w,
            run_mu,
            run_d,
            eps: ID_EPS,
            momentum: ID_MOMENTUM,
            cin,
            cout,
        }
    }

    /// Whiten (train: batch statistics, infer: running statistics) and mix.
    pub fn forward(
        &self,
        g: &mut Graph,
        ps: &ParamStore,
        x: Var,
        mode: Mode,
        aux: &mut ForwardAux,
    ) -> Result<Var> {
        let (n, c, h, wd) = g.value(x).dims4();
        assert_eq!(c, self.cin, "implicit_deconv channel mismatch");
        let rows = g.nchw_to_rows(x);
        let w = g.param(ps, self.w);
        let (centered, d) = match mode {
            Mode::Train => {
                let samples = n * h * wd;
                if samples < 2 {
                    return Err(SapmError::numeric(
                        "implicit_deconv needs at least 2 samples in train mode",
                    ));
                }
                let mu = g.col_mean(rows);
                let centered = g.sub_row_vec(rows, mu);
                let ct = g.transpose2(centered);
                let gram = g.matmul(ct, centered);
                let cov = g.scale(gram, 1.0 / samples as f64);
                let cov_r = g.add_diag(cov, self.eps);
                let d = g.sym_inv_sqrt(cov_r, self.eps)?;
                let mom = self.momentum;
                let ema = |old: &Tensor, new: &Tensor| {
                    Tensor::new(
                        old.shape().to_vec(),
                        old.data()
                            .iter()
                            .zip(new.data())
                            .map(|(&o, &v)| mom * o + (1.0 - mom) * v)
                            .collect(),
                    )
                };
                aux.push(self.run_mu, ema(ps.value(self.run_mu), g.value(mu)));
                aux.push(self.run_d, ema(ps.value(self.run_d), g.value(d)));
                (centered, d)
            }
            Mode::Infer => {
                let mu = g.input(ps.value(self.run_mu).clone());
                let d = g.input(ps.value(self.run_d).clone());
                (g.sub_row_vec(rows, mu), d)
            }
        };
        let white = g.matmul(centered, d);
        let mixed = g.matmul(white, w);
        Ok(g.rows_to_nchw(mixed, n, self.cout, h, wd))
    }
}

/// Generalized divisive normalization with square-reparameterized
/// constraints: `beta = beta_r^2 - pedestal >= beta_min`,
/// `gamma = gamma_r^2 - pedestal >= 0`, maintained by [`GdnParams::project`]
/// after every optimizer step.
#[derive(Debug, Clone)]
pub struct GdnParams {
    pub beta_r: ParamId,
    pub gamma_r: ParamId,
    pub inverse: bool,
    pub c: usize,
}

pub const GDN_BETA_MIN: f64 = 1e-6;
pub const GDN_PEDESTAL: f64 = 1.0 / ((1 << 18) as f64);
const GDN_GAMMA_INIT: f64 = 0.001;

impl GdnParams {
    pub fn new(ps: &mut ParamStore, name: &str, c: usize, inverse: bool) -> GdnParams {
        let beta_r = ps.add(
            format!("{name}.beta_r"),
            Tensor::full(&[c], (1.0 + GDN_PEDESTAL).sqrt()),
        );
        let mut gamma = Tensor::full(&[c, c], GDN_PEDESTAL.sqrt());
        for i in 0..c {
            gamma.data_mut()[i * c + i] = (GDN_GAMMA_INIT + GDN_PEDESTAL).sqrt();
        }
        let gamma_r = ps.add(format!("{name}.gamma_r"), gamma);
        GdnParams {
            beta_r,
            gamma_r,
            inverse,
            c,
        }
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Result<Var> {
        let beta_r = g.param(ps, self.beta_r);
        let gamma_r = g.param(ps, self.gamma_r);
        let beta2 = g.square(beta_r);
        let beta = g.add_scalar(beta2, -GDN_PEDESTAL);
        let gamma2 = g.square(gamma_r);
        let gamma = g.add_scalar(gamma2, -GDN_PEDESTAL);
        let gamma4 = g.reshape(gamma, &[self.c, self.c, 1, 1]);
        let x2 = g.square(x);
        let pooled = g.conv2d(x2, gamma4, None, 1, 0);
        let denom2 = g.add_chan(pooled, beta);
        let denom = g.sqrt(denom2)?;
        Ok(if self.inverse {
            g.mul(x, denom)
        } else {
            g.div(x, denom)
        })
    }

    /// Clamp the reparameterized values so `beta >= beta_min`, `gamma >= 0`.
    pub fn project(&self, ps: &mut ParamStore) {
        let bmin = (GDN_BETA_MIN + GDN_PEDESTAL).sqrt();
        for v in ps.value_mut(self.beta_r).data_mut() {
            if v.abs() < bmin {
                *v = bmin;
            }
        }
        let gmin = GDN_PEDESTAL.sqrt();
        for v in ps.value_mut(self.gamma_r).data_mut() {
            if v.abs() < gmin {
                *v = gmin;
            }
        }
    }
}

/// Quantization proxy: additive uniform noise in `[-0.5, 0.5)` during
/// training, round-half-away at test time. Both are straight-through for
/// the backward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuantMode {
    Noise,
    Round,
}

pub fn quantize_latent<R: Rng>(g: &mut Graph, y: Var, mode: QuantMode, rng: &mut R) -> Var {
    match mode {
        QuantMode::Noise => {
            let shape = g.value(y).shape().to_vec();
            let n = g.value(y).len();
            let noise: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() - 0.5).collect();
            let nv = g.input(Tensor::new(shape, noise));
            g.add(y, nv)
        }
        QuantMode::Round => g.round(y),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec())
    }

    #[test]
    fn id_two_sample_example() {
        // 1 channel, samples {0, 2}, W = 1, eps = 0: mu = 1, Cov = 1, D = 1,
        // Y = {-1, +1}.
        let mut ps = ParamStore::new();
        let id = IdParams::new(&mut ps, "id", 1, 1, &mut rng(0));
        ps.set_value(id.w, t(&[1, 1], &[1.0]));
        let id = IdParams { eps: 0.0, ..id };
        let mut g = Graph::new(false);
        let x = g.input(t(&[1, 1, 1, 2], &[0.0, 2.0]));
        let mut aux = ForwardAux::new();
        let y = id.forward(&mut g, &ps, x, Mode::Train, &mut aux).unwrap();
        let got = g.value(y).data();
        assert!(
            (got[0] + 1.0).abs() < 1e-12 && (got[1] - 1.0).abs() < 1e-12,
            "{got:?}"
        );
    }

    #[test]
    fn id_constant_input_maps_to_zero() {
        let mut ps = ParamStore::new();
        let id = IdParams::new(&mut ps, "id", 2, 2, &mut rng(1));
        let mut g = Graph::new(false);
        let x = g.input(Tensor::full(&[1, 2, 2, 2], 3.7));
        let mut aux = ForwardAux::new();
        let y = id.forward(&mut g, &ps, x, Mode::Train, &mut aux).unwrap();
        assert!(g.value(y).data().iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn id_whitens_seeded_batch() {
        // W = I, random correlated input with >= 1024 samples: output
        // covariance within +-0.05 of the identity.
        let c = 4;
        let mut ps = ParamStore::new();
        let id = IdParams::new(&mut ps, "id", c, c, &mut rng(2));
        ps.set_value(id.w, Tensor::eye(c));
        let mut r = rng(3);
        let n = 1;
        let (h, w) = (40, 40);
        let mut x = Tensor::uniform(&[n, c, h, w], 1.0, &mut r);
        {
            // Correlate channels: x[1] += 0.8 x[0], x[3] += 0.5 x[2], and
            // shift means so centering matters.
            let hw = h * w;
            let data = x.data_mut();
            for s in 0..hw {
                data[hw + s] += 0.8 * data[s] + 0.3;
                data[3 * hw + s] += 0.5 * data[2 * hw + s] - 0.2;
            }
        }
        let mut g = Graph::new(false);
        let xv = g.input(x);
        let mut aux = ForwardAux::new();
        let y = id.forward(&mut g, &ps, xv, Mode::Train, &mut aux).unwrap();
        let yt = g.value(y);
        let hw = h * w;
        let mut mean = vec![0.0; c];
        for ci in 0..c {
            mean[ci] = yt.data()[ci * hw..(ci + 1) * hw].iter().sum::<f64>() / hw as f64;
        }
        for ci in 0..c {
            for cj in 0..c {
                let mut cov = 0.0;
                for s in 0..hw {
                    cov +=
                        (yt.data()[ci * hw + s] - mean[ci]) * (yt.data()[cj * hw + s] - mean[cj]);
                }
                cov /= hw as f64;
                let want = if ci == cj { 1.0 } else { 0.0 };
                assert!((cov - want).abs() <= 0.05, "cov[{ci}][{cj}] = {cov}");
            }
        }
    }

    #[test]
    fn id_folding_equivalence() {
        // Y via X(DW) - mu(DW) equals the explicit (X - mu) D W form.
        let c = 3;
        let mut ps = ParamStore::new();
        let id = IdParams::new(&mut ps, "id", c, 2, &mut rng(4));
        let x = Tensor::uniform(&[1, c, 4, 4], 1.0, &mut rng(5));
        let mut g = Graph::new(false);
        let xv = g.input(x.clone());
        let mut aux = ForwardAux::new();
        let y = id.forward(&mut g, &ps, xv, Mode::Train, &mut aux).unwrap();

        // Recompute folded in plain arithmetic.
        let hw = 16;
        let mut mu = vec![0.0; c];
        for ci in 0..c {
            mu[ci] = x.data()[ci * hw..(ci + 1) * hw].iter().sum::<f64>() / hw as f64;
        }
        let mut cov = vec![0.0; c * c];
        for i in 0..c {
            for j in 0..c {
                let mut acc = 0.0;
                for s in 0..hw {
                    acc += (x.data()[i * hw + s] - mu[i]) * (x.data()[j * hw + s] - mu[j]);
                }
                cov[i * c + j] = acc / hw as f64;
                if i == j {
                    cov[i * c + j] += id.eps;
                }
            }
        }
        let (d, _) = crate::autodiff::linalg::sym_inv_sqrt_forward(&cov, c, id.eps).unwrap();
        // dw = D * W; fold the mean through it.
        let wt = ps.value(id.w);
        let mut dw = vec![0.0; c * 2];
        crate::autodiff::linalg::mm_nn(&d, wt.data(), c, c, 2, &mut dw);
        let mut mu_dw = vec![0.0; 2];
        for j in 0..2 {
            for i in 0..c {
                mu_dw[j] += mu[i] * dw[i * 2 + j];
            }
        }
        for s in 0..hw {
            for j in 0..2 {
                let mut acc = 0.0;
                for i in 0..c {
                    acc += x.data()[i * hw + s] * dw[i * 2 + j];
                }
                let folded = acc - mu_dw[j];
                let got = g.value(y).data()[j * hw + s];
                assert!((folded - got).abs() < 1e-10, "sample {s} ch {j}");
            }
        }
    }

    #[test]
    fn id_running_stats_update_and_infer() {
        let mut ps = ParamStore::new();
        let id = IdParams::new(&mut ps, "id", 1, 1, &mut rng(6));
        ps.set_value(id.w, t(&[1, 1], &[1.0]));
        let mut g = Graph::new(false);
        let x = g.input(t(&[1, 1, 1, 2], &[0.0, 2.0]));
        let mut aux = ForwardAux::new();
        id.forward(&mut g, &ps, x, Mode::Train, &mut aux).unwrap();
        aux.apply(&mut ps);
        // mu EMA: 0.9 * 0 + 0.1 * 1 = 0.1; D EMA: 0.9 * 1 + 0.1 * D_batch.
        assert!((ps.value(id.run_mu).data()[0] - 0.1).abs() < 1e-12);
        let d_batch = 1.0 / (1.0 + ID_EPS).sqrt();
        assert!((ps.value(id.run_d).data()[0] - (0.9 + 0.1 * d_batch)).abs() < 1e-12);

        // Infer mode uses the running stats, not batch stats.
        let mut g2 = Graph::new(false);
        let x2 = g2.input(t(&[1, 1, 1, 2], &[10.0, 10.0]));
        let mut aux2 = ForwardAux::new();
        let y2 = id
            .forward(&mut g2, &ps, x2, Mode::Infer, &mut aux2)
            .unwrap();
        assert!(aux2.is_empty());
        let run_d = ps.value(id.run_d).data()[0];
        let want = (10.0 - 0.1) * run_d;
        assert!((g2.value(y2).data()[0] - want).abs() < 1e-12);
    }

    #[test]
    fn id_train_mode_needs_two_samples() {
        let mut ps = ParamStore::new();
        let id = IdParams::new(&mut ps, "id", 1, 1, &mut rng(7));
        let mut g = Graph::new(false);
        let x = g.input(t(&[1, 1, 1, 1], &[1.0]));
        let mut aux = ForwardAux::new();
        assert!(id.forward(&mut g, &ps, x, Mode::Train, &mut aux).is_err());
    }

    #[test]
    fn gdn_identity_when_beta_one_gamma_zero() {
        let mut ps = ParamStore::new();
        let gdn = GdnParams::new(&mut ps, "gdn", 2, false);
        // Zero out gamma (gamma_r = sqrt(pedestal) makes gamma exactly 0).
        ps.set_value(gdn.gamma_r, Tensor::full(&[2, 2], GDN_PEDESTAL.sqrt()));
        let mut g = Graph::new(false);
        let x = g.input(t(&[1, 2, 1, 2], &[0.5, -1.0, 2.0, 0.0]));
        let y = gdn.forward(&mut g, &ps, x).unwrap();
        for (a, b) in g.value(y).data().iter().zip(g.value(x).data()) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn gdn_scalar_example() {
        // 1 channel, x = 2, beta at the floor, gamma = 1:
        // y = 2 / sqrt(beta_min + 4) ~ 1.0 within 1e-6.
        let mut ps = ParamStore::new();
        let gdn = GdnParams::new(&mut ps, "gdn", 1, false);
        ps.set_value(gdn.beta_r, t(&[1], &[0.0]));
        gdn.project(&mut ps); // clamps beta to beta_min
        ps.set_value(gdn.gamma_r, t(&[1, 1], &[(1.0 + GDN_PEDESTAL).sqrt()]));
        let mut g = Graph::new(false);
        let x = g.input(t(&[1, 1, 1, 1], &[2.0]));
        let y = gdn.forward(&mut g, &ps, x).unwrap();
        let want = 2.0 / (GDN_BETA_MIN + 4.0).sqrt();
        assert!((g.value(y).item() - want).abs() < 1e-12);
        assert!((g.value(y).item() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn gdn_igdn_reciprocal_pair() {
        // gamma = 0, 1 channel: igdn(gdn(x)) = x exactly (same denominator).
        let mut ps = ParamStore::new();
        let gdn = GdnParams::new(&mut ps, "g", 1, false);
        let igdn = GdnParams {
            inverse: true,
            ..gdn.clone()
        };
        ps.set_value(gdn.gamma_r, t(&[1, 1], &[GDN_PEDESTAL.sqrt()]));
        ps.set_value(gdn.beta_r, t(&[1], &[(2.0 + GDN_PEDESTAL).sqrt()]));
        let mut g = Graph::new(false);
        let x = g.input(t(&[1, 1, 1, 3], &[1.0, -2.0, 0.25]));
        let mid = gdn.forward(&mut g, &ps, x).unwrap();
        let back = igdn.forward(&mut g, &ps, mid).unwrap();
        for (a, b) in g.value(back).data().iter().zip(g.value(x).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gdn_projection_restores_bounds() {
        let mut ps = ParamStore::new();
        let gdn = GdnParams::new(&mut ps, "gdn", 2, false);
        ps.set_value(gdn.beta_r, t(&[2], &[0.0, -5.0]));
        ps.set_value(gdn.gamma_r, t(&[2, 2], &[0.0, -0.1, 1.0, 0.0001]));
        gdn.project(&mut ps);
        for &b in ps.value(gdn.beta_r).data() {
            assert!(b * b - GDN_PEDESTAL >= GDN_BETA_MIN - 1e-18);
        }
        for &v in ps.value(gdn.gamma_r).data() {
            assert!(v * v - GDN_PEDESTAL >= -1e-18);
        }
        // Large values pass through untouched.
        assert_eq!(ps.value(gdn.beta_r).data()[1], -5.0);
        assert_eq!(ps.value(gdn.gamma_r).data()[2], 1.0);
    }

    #[test]
    fn quantize_latent_modes() {
        let mut g = Graph::new(true);
        let y = g.input_grad(t(&[4], &[0.4, -1.6, 2.5, 0.0]));
        let r = quantize_latent(&mut g, y, QuantMode::Round, &mut rng(8));
        assert_eq!(g.value(r).data(), &[0.0, -2.0, 3.0, 0.0]);
        let s = g.sum(r);
        g.backward(s).unwrap();
        assert_eq!(g.grad(y).unwrap().data(), &[1.0; 4]);

        let mut g = Graph::new(false);
        let y = g.input(Tensor::uniform(&[100], 3.0, &mut rng(9)));
        let n = quantize_latent(&mut g, y, QuantMode::Noise, &mut rng(10));
        for (a, b) in g.value(n).data().iter().zip(g.value(y).data()) {
            assert!((a - b).abs() <= 0.5);
        }
        // Seeded noise is reproducible.
        let mut g2 = Graph::new(false);
        let y2 = g2.input(g.value(y).clone());
        let n2 = quantize_latent(&mut g2, y2, QuantMode::Noise, &mut rng(10));
        assert_eq!(g.value(n).data(), g2.value(n2).data());
    }

    #[test]
    fn shift_layer_fixed_point_equals_conv() {
        // Exact power-of-two weights: shift conv equals dense conv.
        let mut ps = ParamStore::new();
        let mut r = rng(11);
        let layer = ShiftWeights::new(&mut ps, "s", 2, 2, 3, 1, 1, &mut r);
        let pow2 = Tensor::new(
            vec![2, 2, 3, 3],
            (0..36)
                .map(|i| [0.25, -0.5, 1.0, -2.0][i % 4])
                .collect::<Vec<f64>>(),
        );
        ps.set_value(layer.w, pow2.clone());
        let x = Tensor::uniform(&[1, 2, 4, 4], 1.0, &mut r);
        let mut g = Graph::new(false);
        let xv = g.input(x.clone());
        let y = layer.forward(&mut g, &ps, xv);
        let wv = g.input(pow2);
        let yref = g.conv2d(xv, wv, None, 1, 1);
        assert_eq!(g.value(y).data(), g.value(yref).data());
        let (_, _, wq) = layer.quantized(&ps);
        assert_eq!(&wq, ps.value(layer.w));
    }
}
