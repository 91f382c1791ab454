//! Full codec model: analysis/synthesis transforms built from one plain
//! (transposed) convolution plus SAPM blocks with (I)GDN between levels,
//! a convolutional hyper encoder/decoder pair, a Laplace-mixture head for
//! the main latent, and a factorized prior for the hyper latent.
//!
//! Dataflow: `x -> encoder -> y -> hyper_enc -> z`; the quantized `z_hat`
//! regenerates mixture parameters through the hyper decoder, and the
//! quantized `y_hat` drives the synthesis transform back to the image.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::blocks::{SapmDBlock, SapmEBlock};
use crate::config::ModelConfig;
use crate::entropy::{lmm_likelihood, FactorizedModel, SCALE_PRE_INIT};
use crate::error::Result;
use crate::layers::{
    quantize_latent, Conv2dLayer, ConvTranspose2dLayer, ForwardAux, GdnParams, Mode, QuantMode,
};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Layer taxonomy for the static energy analyzer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv,
    Deconv,
    SapmE,
    SapmD,
    Gdn,
}

/// Static shape facts about one layer, enough to count operation slots.
#[derive(Debug, Clone)]
pub struct LayerDesc {
    pub name: String,
    pub kind: LayerKind,
    pub k: usize,
    pub cin: usize,
    pub cout: usize,
    /// Downsampling stride (conv, SAPM-E) or 1.
    pub stride: usize,
    /// Upsampling factor (deconv, SAPM-D) or 1.
    pub up: usize,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub ps: ParamStore,
    pub enc_conv: Conv2dLayer,
    pub enc_gdn: Vec<GdnParams>,
    pub enc_blocks: Vec<SapmEBlock>,
    pub dec_blocks: Vec<SapmDBlock>,
    pub dec_igdn: Vec<GdnParams>,
    pub dec_conv: ConvTranspose2dLayer,
    pub hyp_enc: Vec<Conv2dLayer>,
    pub hyp_dec_up: Vec<ConvTranspose2dLayer>,
    pub hyp_dec_head: Conv2dLayer,
    pub z_prior: FactorizedModel,
}

impl Model {
    /// Seeded deterministic initialization from the config.
    pub fn new(cfg: ModelConfig) -> Result<Model> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut ps = ParamStore::new();
        let (n, m, k) = (cfg.n, cfg.m, cfg.kernel);
        let pad = (k - 1) / 2;

        let enc_conv = Conv2dLayer::new(&mut ps, "enc.conv", 3, n, k, 2, pad, true, &mut rng);
        let mut enc_gdn = vec![GdnParams::new(&mut ps, "enc.gdn0", n, false)];
        let mut enc_blocks = Vec::new();
        for i in 0..cfg.levels - 1 {
            let cout = if i + 1 == cfg.levels - 1 { m } else { n };
            enc_blocks.push(SapmEBlock::new(
                &mut ps,
                &format!("enc.sapm{i}"),
                n,
                cout,
                k,
                2,
                &mut rng,
            ));
            if i + 1 < cfg.levels - 1 {
                enc_gdn.push(GdnParams::new(
                    &mut ps,
                    &format!("enc.gdn{}", i + 1),
                    cout,
                    false,
                ));
            }
        }

        let mut dec_blocks = Vec::new();
        let mut dec_igdn = Vec::new();
        for i in 0..cfg.levels - 1 {
            let cin = if i == 0 { m } else { n };
            dec_blocks.push(SapmDBlock::new(
                &mut ps,
                &format!("dec.sapm{i}"),
                cin,
                n,
                k,
                2,
                &mut rng,
            ));
            dec_igdn.push(GdnParams::new(&mut ps, &format!("dec.igdn{i}"), n, true));
        }
        let dec_conv =
            ConvTranspose2dLayer::new(&mut ps, "dec.conv", n, 3, k, 2, pad, 1, true, &mut rng);

        let hyp_enc = vec![
            Conv2dLayer::new(&mut ps, "hyp.enc0", m, n, 3, 1, 1, true, &mut rng),
            Conv2dLayer::new(&mut ps, "hyp.enc1", n, n, 5, 2, 2, true, &mut rng),
            Conv2dLayer::new(&mut ps, "hyp.enc2", n, cfg.hyper, 5, 2, 2, true, &mut rng),
        ];
        let hyp_dec_up = vec![
            ConvTranspose2dLayer::new(
                &mut ps, "hyp.dec0", cfg.hyper, n, 5, 2, 2, 1, true, &mut rng,
            ),
            ConvTranspose2dLayer::new(&mut ps, "hyp.dec1", n, n, 5, 2, 2, 1, true, &mut rng),
        ];
        let head_out = 3 * cfg.kmix * m;
        let hyp_dec_head =
            Conv2dLayer::new(&mut ps, "hyp.head", n, head_out, 3, 1, 1, true, &mut rng);
        // Bias the head toward uniform weights, zero means, unit scales.
        {
            let bias = ps.value_mut(hyp_dec_head.b.unwrap());
            for c in 0..m {
                for kk in 0..cfg.kmix {
                    bias.data_mut()[c * 3 * cfg.kmix + 2 * cfg.kmix + kk] = SCALE_PRE_INIT;
                }
            }
        }
        let z_prior = FactorizedModel::new(&mut ps, "zprior", cfg.hyper);

        // Shift layers carry the configured exponent clamps.
        let mut model = Model {
            cfg,
            ps,
            enc_conv,
            enc_gdn,
            enc_blocks,
            dec_blocks,
            dec_igdn,
            dec_conv,
            hyp_enc,
            hyp_dec_up,
            hyp_dec_head,
            z_prior,
        };
        for b in &mut model.enc_blocks {
            b.shift.p_min = model.cfg.p_min;
            b.shift.p_max = model.cfg.p_max;
        }
        for b in &mut model.dec_blocks {
            b.shift.p_min = model.cfg.p_min;
            b.shift.p_max = model.cfg.p_max;
        }
        Ok(model)
    }

    /// Analysis transform: image tensor in `[0, 1]` to latent `y`.
    pub fn encode(&self, g: &mut Graph, x: Var, mode: Mode, aux: &mut ForwardAux) -> Result<Var> {
        let mut t = self.enc_conv.forward(g, &self.ps, x);
        t = self.enc_gdn[0].forward(g, &self.ps, t)?;
        for (i, blk) in self.enc_blocks.iter().enumerate() {
            t = blk.forward(g, &self.ps, t, mode, aux)?;
            if let Some(gdn) = self.enc_gdn.get(i + 1) {
                t = gdn.forward(g, &self.ps, t)?;
            }
        }
        Ok(t)
    }

    /// Synthesis transform: quantized latent to reconstruction (unclipped).
    pub fn decode(
        &self,
        g: &mut Graph,
        y_hat: Var,
        mode: Mode,
        aux: &mut ForwardAux,
    ) -> Result<Var> {
        let mut t = y_hat;
        for (blk, igdn) in self.dec_blocks.iter().zip(&self.dec_igdn) {
            t = blk.forward(g, &self.ps, t, mode, aux)?;
            t = igdn.forward(g, &self.ps, t)?;
        }
        Ok(self.dec_conv.forward(g, &self.ps, t))
    }

    pub fn hyper_encode(&self, g: &mut Graph, y: Var) -> Var {
        let mut t = self.hyp_enc[0].forward(g, &self.ps, y);
        t = g.clamp_min(t, 0.0);
        t = self.hyp_enc[1].forward(g, &self.ps, t);
        t = g.clamp_min(t, 0.0);
        self.hyp_enc[2].forward(g, &self.ps, t)
    }

    /// Hyper synthesis: quantized `z_hat` to raw mixture parameter maps.
    pub fn hyper_decode(&self, g: &mut Graph, z_hat: Var) -> Var {
        let mut t = self.hyp_dec_up[0].forward(g, &self.ps, z_hat);
        t = g.clamp_min(t, 0.0);
        t = self.hyp_dec_up[1].forward(g, &self.ps, t);
        t = g.clamp_min(t, 0.0);
        self.hyp_dec_head.forward(g, &self.ps, t)
    }

    /// Full rate-distortion pass.
    pub fn forward(
        &self,
        g: &mut Graph,
        x: Var,
        mode: Mode,
        quant: QuantMode,
        rng: &mut ChaCha8Rng,
        aux: &mut ForwardAux,
    ) -> Result<ForwardOut> {
        let y = self.encode(g, x, mode, aux)?;
        let z = self.hyper_encode(g, y);
        let z_hat = quantize_latent(g, z, quant, rng);
        let h = self.hyper_decode(g, z_hat);
        let p_z = self.z_prior.likelihood(g, &self.ps, z_hat)?;
        let y_hat = quantize_latent(g, y, quant, rng);
        let p_y = lmm_likelihood(g, y_hat, h, self.cfg.kmix)?;
        let x_hat = self.decode(g, y_hat, mode, aux)?;
        Ok(ForwardOut {
            y,
            z,
            y_hat,
            z_hat,
            p_y,
            p_z,
            x_hat,
        })
    }

    /// GDN constraint projection after an optimizer step.
    pub fn project(&mut self) {
        let gdns: Vec<GdnParams> = self.enc_gdn.iter().chain(&self.dec_igdn).cloned().collect();
        for gdn in gdns {
            gdn.project(&mut self.ps);
        }
    }

    /// Parameter ids of every adder filter tensor, for the adaptive
    /// gradient scaling in the trainer.
    pub fn adder_filter_ids(&self) -> Vec<ParamId> {
        self.enc_blocks
            .iter()
            .map(|b| b.adder.f)
            .chain(self.dec_blocks.iter().map(|b| b.adder.f))
            .collect()
    }

    /// Static layer list for the energy analyzer, in dataflow order.
    pub fn layer_descs(&self) -> Vec<LayerDesc> {
        let c = &self.cfg;
        let mut out = Vec::new();
        let desc = |name: &str, kind, k, cin, cout, stride, up| LayerDesc {
            name: name.to_string(),
            kind,
            k,
            cin,
            cout,
            stride,
            up,
        };
        out.push(desc("enc.conv", LayerKind::Conv, c.kernel, 3, c.n, 2, 1));
        out.push(desc("enc.gdn0", LayerKind::Gdn, 1, c.n, c.n, 1, 1));
        for (i, b) in self.enc_blocks.iter().enumerate() {
            out.push(desc(
                &format!("enc.sapm{i}"),
                LayerKind::SapmE,
                c.kernel,
                b.cin,
                b.cout,
                2,
                1,
            ));
            if i + 1 < self.enc_blocks.len() {
                out.push(desc(
                    &format!("enc.gdn{}", i + 1),
                    LayerKind::Gdn,
                    1,
                    b.cout,
                    b.cout,
                    1,
                    1,
                ));
            }
        }
        for (i, b) in self.dec_blocks.iter().enumerate() {
            out.push(desc(
                &format!("dec.sapm{i}"),
                LayerKind::SapmD,
                c.kernel,
                b.cin,
                b.cout,
                1,
                2,
            ));
            out.push(desc(
                &format!("dec.igdn{i}"),
                LayerKind::Gdn,
                1,
                b.cout,
                b.cout,
                1,
                1,
            ));
        }
        out.push(desc("dec.conv", LayerKind::Deconv, c.kernel, c.n, 3, 1, 2));
        out
    }
}

/// Variables produced by one full forward pass.
pub struct ForwardOut {
    pub y: Var,
    pub z: Var,
    pub y_hat: Var,
    pub z_hat: Var,
    pub p_y: Var,
    pub p_z: Var,
    pub x_hat: Var,
}

/// Convenience: zero-filled image tensor of the given spatial size.
pub fn zero_image(h: usize, w: usize) -> Tensor {
    Tensor::zeros(&[1, 3, h, w])
}
