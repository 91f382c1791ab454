//! SAPM blocks: three-branch residual units built from shift and adder
//! layers. The encoder block (SAPM-E) downsamples by its stride; the
//! decoder block (SAPM-D) upsamples by pixel shuffle. Branch outputs are
//! summed elementwise.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::layers::{AdderFilters, Conv2dLayer, ForwardAux, IdParams, Mode, ShiftWeights};
use crate::params::ParamStore;

/// Repeat-input channel mapping for the encoder shortcut: output channel
/// `j` copies input channel `j % cin`.
pub fn channel_adapt(g: &mut Graph, x: Var, cout: usize) -> Var {
    let cin = g.value(x).dims4().1;
    if cin == cout {
        return x;
    }
    let idx: Vec<usize> = (0..cout).map(|j| j % cin).collect();
    g.channel_select(x, &idx)
}

/// Encoder block: shift conv + (adder conv -> implicit deconv) +
/// (avg pool -> channel adapt), all at stride `s`.
#[derive(Debug, Clone)]
pub struct SapmEBlock {
    pub shift: ShiftWeights,
    pub adder: AdderFilters,
    pub id: IdParams,
    pub stride: usize,
    pub cin: usize,
    pub cout: usize,
}

impl SapmEBlock {
    pub fn new<R: Rng>(
        ps: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        rng: &mut R,
    ) -> SapmEBlock {
        assert!(k % 2 == 1, "sapm-e kernel must be odd");
        let pad = (k - 1) / 2;
        let shift = ShiftWeights::new(ps, &format!("{name}.shift"), cin, cout, k, stride, pad, rng);
        let adder = AdderFilters::new(
            ps,
            &format!("{name}.adder"),
            cin,
            cout,
            k,
            stride,
            pad,
            true,
            rng,
        );
        let id = IdParams::new(ps, &format!("{name}.id"), cout, cout, rng);
        SapmEBlock {
            shift,
            adder,
            id,
            stride,
            cin,
            cout,
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        ps: &ParamStore,
        x: Var,
        mode: Mode,
        aux: &mut ForwardAux,
    ) -> Result<Var> {
        let s = self.shift.forward(g, ps, x);
        let a = self.adder.forward(g, ps, x);
        let a = self.id.forward(g, ps, a, mode, aux)?;
        let pooled = if self.stride == 1 {
            x
        } else {
            g.avg_pool2d(x, self.stride, self.stride)
        };
        let short = channel_adapt(g, pooled, self.cout);
        let sa = g.add(s, a);
        Ok(g.add(sa, short))
    }
}

/// Decoder block: the shift branch expands to `cout * r^2` channels before
/// pixel shuffle; the adder branch stays at `cin` channels and lets the
/// implicit deconvolution's 1x1 mixing do the expansion; the shortcut is a
/// dense 1x1 conv. All three shuffle up by `r`.
#[derive(Debug, Clone)]
pub struct SapmDBlock {
    pub shift: ShiftWeights,
    pub adder: AdderFilters,
    pub id: IdParams,
    pub shortcut: Conv2dLayer,
    pub r: usize,
    pub cin: usize,
    pub cout: usize,
}

impl SapmDBlock {
    pub fn new<R: Rng>(
        ps: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        r: usize,
        rng: &mut R,
    ) -> SapmDBlock {
        assert!(k % 2 == 1, "sapm-d kernel must be odd");
        let pad = (k - 1) / 2;
        let wide = cout * r * r;
        let shift = ShiftWeights::new(ps, &format!("{name}.shift"), cin, wide, k, 1, pad, rng);
        let adder = AdderFilters::new(ps, &format!("{name}.adder"), cin, cin, k, 1, pad, true, rng);
        let id = IdParams::new(ps, &format!("{name}.id"), cin, wide, rng);
        let shortcut =
            Conv2dLayer::new(ps, &format!("{name}.short"), cin, wide, 1, 1, 0, true, rng);
        SapmDBlock {
            shift,
            adder,
            id,
            shortcut,
            r,
            cin,
            cout,
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        ps: &ParamStore,
        x: Var,
        mode: Mode,
        aux: &mut ForwardAux,
    ) -> Result<Var> {
        let s = self.shift.forward(g, ps, x);
        let s = g.pixel_shuffle(s, self.r);
        let a = self.adder.forward(g, ps, x);
        let a = self.id.forward(g, ps, a, mode, aux)?;
        let a = g.pixel_shuffle(a, self.r);
        let c = self.shortcut.forward(g, ps, x);
        let c = g.pixel_shuffle(c, self.r);
        let sa = g.add(s, a);
        Ok(g.add(sa, c))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn channel_adapt_cycles() {
        let mut g = Graph::new(false);
        let x = g.input(Tensor::new(vec![1, 2, 1, 1], vec![10.0, 20.0]));
        let y = channel_adapt(&mut g, x, 5);
        assert_eq!(g.value(y).data(), &[10.0, 20.0, 10.0, 20.0, 10.0]);
    }

    #[test]
    fn encoder_block_shapes() {
        let mut r = rng(0);
        for &hw in &[16usize, 32] {
            for &s in &[1usize, 2] {
                let mut ps = ParamStore::new();
                let blk = SapmEBlock::new(&mut ps, "e", 3, 8, 5, s, &mut r);
                let mut g = Graph::new(false);
                let x = g.input(Tensor::uniform(&[2, 3, hw, hw], 1.0, &mut r));
                let mut aux = ForwardAux::new();
                let y = blk.forward(&mut g, &ps, x, Mode::Train, &mut aux).unwrap();
                assert_eq!(g.value(y).shape(), &[2, 8, hw / s, hw / s]);
            }
        }
    }

    #[test]
    fn decoder_block_shapes() {
        let mut r = rng(1);
        for &hw in &[8usize, 16] {
            for &up in &[1usize, 2] {
                let mut ps = ParamStore::new();
                let blk = SapmDBlock::new(&mut ps, "d", 8, 3, 5, up, &mut r);
                let mut g = Graph::new(false);
                let x = g.input(Tensor::uniform(&[1, 8, hw, hw], 1.0, &mut r));
                let mut aux = ForwardAux::new();
                let y = blk.forward(&mut g, &ps, x, Mode::Train, &mut aux).unwrap();
                assert_eq!(g.value(y).shape(), &[1, 3, hw * up, hw * up]);
            }
        }
    }

    #[test]
    fn encoder_output_is_branch_sum() {
        let mut r = rng(2);
        let mut ps = ParamStore::new();
        let blk = SapmEBlock::new(&mut ps, "e", 2, 4, 3, 2, &mut r);
        let x = Tensor::uniform(&[1, 2, 8, 8], 1.0, &mut r);

        let mut g = Graph::new(false);
        let xv = g.input(x.clone());
        let mut aux = ForwardAux::new();
        let y = blk.forward(&mut g, &ps, xv, Mode::Train, &mut aux).unwrap();

        let mut g2 = Graph::new(false);
        let xv2 = g2.input(x);
        let s = blk.shift.forward(&mut g2, &ps, xv2);
        let a = blk.adder.forward(&mut g2, &ps, xv2);
        let mut aux2 = ForwardAux::new();
        let a = blk
            .id
            .forward(&mut g2, &ps, a, Mode::Train, &mut aux2)
            .unwrap();
        let p = g2.avg_pool2d(xv2, 2, 2);
        let c = channel_adapt(&mut g2, p, 4);
        for i in 0..g.value(y).len() {
            let want = g2.value(s).data()[i] + g2.value(a).data()[i] + g2.value(c).data()[i];
            assert_eq!(g.value(y).data()[i], want);
        }
    }

    #[test]
    fn gradients_reach_every_branch() {
        let mut r = rng(3);
        let mut ps = ParamStore::new();
        let eb = SapmEBlock::new(&mut ps, "e", 2, 4, 3, 2, &mut r);
        let db = SapmDBlock::new(&mut ps, "d", 4, 2, 3, 2, &mut r);
        let mut g = Graph::new(true);
        let x = g.input(Tensor::uniform(&[1, 2, 8, 8], 1.0, &mut r));
        let mut aux = ForwardAux::new();
        let h = eb.forward(&mut g, &ps, x, Mode::Train, &mut aux).unwrap();
        let y = db.forward(&mut g, &ps, h, Mode::Train, &mut aux).unwrap();
        let sq = g.square(y);
        let loss = g.sum(sq);
        g.backward(loss).unwrap();
        let grads = g.param_grads(&ps);
        for id in [
            eb.shift.w,
            eb.adder.f,
            eb.adder.b.unwrap(),
            eb.id.w,
            db.shift.w,
            db.adder.f,
            db.id.w,
            db.shortcut.w,
            db.shortcut.b.unwrap(),
        ] {
            let gr = grads[id.index()]
                .as_ref()
                .unwrap_or_else(|| panic!("missing grad for {}", ps.get(id).name));
            let norm: f64 = gr.data().iter().map(|v| v * v).sum();
            assert!(norm > 0.0, "zero grad for {}", ps.get(id).name);
        }
        // Buffers never receive gradients.
        assert!(grads[eb.id.run_mu.index()].is_none());
        assert!(grads[db.id.run_d.index()].is_none());
    }

    #[test]
    fn decoder_adder_branch_channel_flow() {
        // The decoder adder stays at cin channels; only the 1x1 mixing
        // expands to cout * r^2 before the shuffle.
        let mut r = rng(4);
        let mut ps = ParamStore::new();
        let blk = SapmDBlock::new(&mut ps, "d", 4, 2, 5, 2, &mut r);
        assert_eq!(ps.value(blk.adder.f).shape(), &[4, 4, 5, 5]);
        assert_eq!(ps.value(blk.id.w).shape(), &[4, 8]);
        assert_eq!(ps.value(blk.shift.w).shape(), &[8, 4, 5, 5]);
        assert_eq!(ps.value(blk.shortcut.w).shape(), &[8, 4, 1, 1]);
    }
}
