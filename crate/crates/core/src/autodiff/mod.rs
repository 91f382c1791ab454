//! Define-by-run reverse-mode automatic differentiation on f64 tensors.
//!
//! A [`Graph`] is a tape of [`Node`]s; every operator records enough to
//! replay its adjoint. Calling an op method appends a node and returns a
//! [`Var`] handle. [`Graph::backward`] walks the tape once in reverse and
//! accumulates gradients into per-node buffers, which are then read back
//! through [`Graph::grad`] or [`Graph::param_grads`].
//!
//! Gradient conventions that differ from the plain chain rule:
//! * `round` is a straight-through estimator (gradient 1).
//! * `sign_detached` is treated as a constant (gradient 0), so composite
//!   expressions like `sign(x) * (1 - exp(-|x|))` differentiate only
//!   through the smooth factors.
//! * `adder_conv2d` uses the surrogate rules described in
//!   [`conv::adder_conv2d_dx`] and [`conv::adder_conv2d_df`].
//! * `shift_conv2d` quantizes weights in the forward pass and passes
//!   gradients straight through to the full-precision weights.

pub mod conv;
pub mod linalg;

use std::collections::HashMap;

use crate::error::{Result, SapmError};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    MaxElem(Var, Var),
    Neg(Var),
    Abs(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Square(Var),
    Softplus(Var),
    Scale(Var, f64),
    AddScalar(Var),
    ClampMin(Var, f64),
    Round(Var),
    SignDetached,
    Sum(Var),
    AddChan {
        x: Var,
        v: Var,
    },
    MulChan {
        x: Var,
        v: Var,
    },
    ChannelSelect {
        x: Var,
        idx: Vec<usize>,
    },
    Reshape(Var),
    MatMul {
        a: Var,
        b: Var,
    },
    Transpose2(Var),
    NchwToRows(Var),
    RowsToNchw(Var),
    ColMean(Var),
    SubRowVec {
        a: Var,
        v: Var,
    },
    AddDiag(Var),
    SymInvSqrt {
        a: Var,
        eig: linalg::SymEig,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    AdderConv2d {
        x: Var,
        f: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    ShiftConv2d {
        x: Var,
        w: Var,
        stride: usize,
        pad: usize,
        wq: Tensor,
    },
    AvgPool2d {
        x: Var,
        k: usize,
        stride: usize,
    },
    PixelShuffle {
        x: Var,
        r: usize,
    },
    PixelUnshuffle {
        x: Var,
        r: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    needs_grad: bool,
    op: Op,
}

/// Reverse-mode tape.
pub struct Graph {
    nodes: Vec<Node>,
    grad_enabled: bool,
    param_vars: HashMap<usize, Var>,
}

impl Graph {
    pub fn new(grad_enabled: bool) -> Graph {
        Graph {
            nodes: Vec::new(),
            grad_enabled,
            param_vars: HashMap::new(),
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` call with respect to `v`, if one was
    /// accumulated.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()))
    }

    /// Constant input; never receives a gradient.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, false, Op::Leaf)
    }

    /// Differentiable leaf that is not a registered parameter.
    pub fn input_grad(&mut self, value: Tensor) -> Var {
        let ng = self.grad_enabled;
        self.push(value, ng, Op::Leaf)
    }

    /// Leaf bound to a parameter. Repeated calls with the same id return the
    /// same `Var`, so gradients from all uses accumulate in one buffer.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id.index()) {
            return v;
        }
        let entry = store.get(id);
        let ng = self.grad_enabled && entry.trainable;
        let v = self.push(entry.value.clone(), ng, Op::Leaf);
        self.param_vars.insert(id.index(), v);
        v
    }

    /// Gradients aligned with the store layout; `None` for parameters that
    /// were unused or not differentiable in this graph.
    pub fn param_grads(&self, store: &ParamStore) -> Vec<Option<Tensor>> {
        let mut out = vec![None; store.len()];
        for (&idx, &v) in &self.param_vars {
            out[idx] = self.grad(v);
        }
        out
    }

    fn push(&mut self, value: Tensor, needs_grad: bool, op: Op) -> Var {
        debug_assert!(
            value.all_finite(),
            "non-finite forward value from {:?}",
            op_name(&op)
        );
        self.nodes.push(Node {
            value,
            grad: None,
            needs_grad: needs_grad && self.grad_enabled,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_from(&mut self, value: Tensor, inputs: &[Var], op: Op) -> Var {
        let ng = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.push(value, ng, op)
    }

    // ---- elementwise ----

    fn binary_map(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(ta.shape(), tb.shape(), "elementwise shape mismatch");
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data);
        self.push_from(value, &[a, b], op)
    }

    fn unary_map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let ta = &self.nodes[a.0].value;
        let data = ta.data().iter().map(|&x| f(x)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data);
        self.push_from(value, &[a], op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary_map(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary_map(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary_map(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary_map(a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn max_elem(&mut self, a: Var, b: Var) -> Var {
        self.binary_map(a, b, f64::max, Op::MaxElem(a, b))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary_map(a, |x| -x, Op::Neg(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary_map(a, f64::abs, Op::Abs(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary_map(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if self.nodes[a.0].value.data().iter().any(|&x| x <= 0.0) {
            return Err(SapmError::numeric("log of non-positive value"));
        }
        Ok(self.unary_map(a, f64::ln, Op::Log(a)))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if self.nodes[a.0].value.data().iter().any(|&x| x < 0.0) {
            return Err(SapmError::numeric("sqrt of negative value"));
        }
        Ok(self.unary_map(a, f64::sqrt, Op::Sqrt(a)))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary_map(a, |x| x * x, Op::Square(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary_map(a, softplus, Op::Softplus(a))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary_map(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.unary_map(a, |x| x + s, Op::AddScalar(a))
    }

    pub fn clamp_min(&mut self, a: Var, lo: f64) -> Var {
        self.unary_map(a, |x| x.max(lo), Op::ClampMin(a, lo))
    }

    /// Round half away from zero, straight-through gradient.
    pub fn round(&mut self, a: Var) -> Var {
        self.unary_map(a, f64::round, Op::Round(a))
    }

    /// Elementwise sign with `sign(0) = 1`; constant for the backward pass.
    pub fn sign_detached(&mut self, a: Var) -> Var {
        let data = self.nodes[a.0]
            .value
            .data()
            .iter()
            .map(|&x| if x < 0.0 { -1.0 } else { 1.0 })
            .collect();
        let value = Tensor::new(self.nodes[a.0].value.shape().to_vec(), data);
        self.push(value, false, Op::SignDetached)
    }

    // ---- reductions and broadcasts ----

    /// Sum of all elements, as a rank-1 singleton.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = sum_slice(self.nodes[a.0].value.data());
        let value = Tensor::new(vec![1], vec![s]);
        self.push_from(value, &[a], Op::Sum(a))
    }

    /// NCHW plus a rank-1 `[C]` vector broadcast over N, H, W.
    pub fn add_chan(&mut self, x: Var, v: Var) -> Var {
        let value = chan_broadcast(&self.nodes[x.0].value, &self.nodes[v.0].value, |a, b| a + b);
        self.push_from(value, &[x, v], Op::AddChan { x, v })
    }

    /// NCHW times a rank-1 `[C]` vector broadcast over N, H, W.
    pub fn mul_chan(&mut self, x: Var, v: Var) -> Var {
        let value = chan_broadcast(&self.nodes[x.0].value, &self.nodes[v.0].value, |a, b| a * b);
        self.push_from(value, &[x, v], Op::MulChan { x, v })
    }

    /// Gather channels of an NCHW tensor: `out[:, j] = x[:, idx[j]]`.
    pub fn channel_select(&mut self, x: Var, idx: &[usize]) -> Var {
        let t = &self.nodes[x.0].value;
        let (n, c, h, w) = t.dims4();
        assert!(idx.iter().all(|&i| i < c), "channel index out of range");
        let hw = h * w;
        let mut data = vec![0.0; n * idx.len() * hw];
        for ni in 0..n {
            for (j, &ci) in idx.iter().enumerate() {
                let src = &t.data()[(ni * c + ci) * hw..(ni * c + ci) * hw + hw];
                let dst = &mut data[(ni * idx.len() + j) * hw..(ni * idx.len() + j) * hw + hw];
                dst.copy_from_slice(src);
            }
        }
        let value = Tensor::new(vec![n, idx.len(), h, w], data);
        self.push_from(
            value,
            &[x],
            Op::ChannelSelect {
                x,
                idx: idx.to_vec(),
            },
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let value = self.nodes[a.0].value.reshaped(shape);
        self.push_from(value, &[a], Op::Reshape(a))
    }

    // ---- linear algebra ----

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (m, k) = (ta.dim(0), ta.dim(1));
        let (k2, n) = (tb.dim(0), tb.dim(1));
        assert_eq!(k, k2, "matmul inner dimension mismatch");
        let mut out = vec![0.0; m * n];
        linalg::mm_nn(ta.data(), tb.data(), m, k, n, &mut out);
        let value = Tensor::new(vec![m, n], out);
        self.push_from(value, &[a, b], Op::MatMul { a, b })
    }

    pub fn transpose2(&mut self, a: Var) -> Var {
        let ta = &self.nodes[a.0].value;
        let (m, n) = (ta.dim(0), ta.dim(1));
        let value = Tensor::new(vec![n, m], linalg::transpose(ta.data(), m, n));
        self.push_from(value, &[a], Op::Transpose2(a))
    }

    /// NCHW -> `[N*H*W, C]` sample matrix (one row per spatial location).
    pub fn nchw_to_rows(&mut self, x: Var) -> Var {
        let t = &self.nodes[x.0].value;
        let (n, c, h, w) = t.dims4();
        let value = Tensor::new(vec![n * h * w, c], nchw_to_rows_data(t.data(), n, c, h, w));
        self.push_from(value, &[x], Op::NchwToRows(x))
    }

    /// `[N*H*W, C]` sample matrix back to NCHW.
    pub fn rows_to_nchw(&mut self, a: Var, n: usize, c: usize, h: usize, w: usize) -> Var {
        let t = &self.nodes[a.0].value;
        assert_eq!(t.dim(0), n * h * w, "row count mismatch");
        assert_eq!(t.dim(1), c, "column count mismatch");
        let value = Tensor::new(vec![n, c, h, w], rows_to_nchw_data(t.data(), n, c, h, w));
        self.push_from(value, &[a], Op::RowsToNchw(a))
    }

    /// Column means of an `[r, c]` matrix, as rank-1 `[c]`.
    pub fn col_mean(&mut self, a: Var) -> Var {
        let t = &self.nodes[a.0].value;
        let (r, c) = (t.dim(0), t.dim(1));
        assert!(r > 0, "col_mean of empty matrix");
        let mut out = vec![0.0; c];
        for i in 0..r {
            let row = &t.data()[i * c..i * c + c];
            for (o, &x) in out.iter_mut().zip(row) {
                *o += x;
            }
        }
        for o in out.iter_mut() {
            *o /= r as f64;
        }
        let value = Tensor::new(vec![c], out);
        self.push_from(value, &[a], Op::ColMean(a))
    }

    /// Subtract a rank-1 `[c]` vector from every row of an `[r, c]` matrix.
    pub fn sub_row_vec(&mut self, a: Var, v: Var) -> Var {
        let (ta, tv) = (&self.nodes[a.0].value, &self.nodes[v.0].value);
        let (r, c) = (ta.dim(0), ta.dim(1));
        assert_eq!(tv.shape(), &[c], "row vector shape mismatch");
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = &ta.data()[i * c..i * c + c];
            data.extend(row.iter().zip(tv.data()).map(|(&x, &m)| x - m));
        }
        let value = Tensor::new(vec![r, c], data);
        self.push_from(value, &[a, v], Op::SubRowVec { a, v })
    }

    /// Add `s` to the diagonal of a square matrix.
    pub fn add_diag(&mut self, a: Var, s: f64) -> Var {
        let t = &self.nodes[a.0].value;
        let c = t.dim(0);
        assert_eq!(t.dim(1), c, "add_diag needs a square matrix");
        let mut data = t.data().to_vec();
        for i in 0..c {
            data[i * c + i] += s;
        }
        let value = Tensor::new(vec![c, c], data);
        self.push_from(value, &[a], Op::AddDiag(a))
    }

    /// Inverse square root of a symmetric PSD matrix, with eigenvalues
    /// floored at `eps` before the power. Differentiable through the
    /// eigendecomposition.
    pub fn sym_inv_sqrt(&mut self, a: Var, eps: f64) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        let c = t.dim(0);
        assert_eq!(t.dim(1), c, "sym_inv_sqrt needs a square matrix");
        let (value, eig) = linalg::sym_inv_sqrt_forward(t.data(), c, eps)?;
        let value = Tensor::new(vec![c, c], value);
        Ok(self.push_from(value, &[a], Op::SymInvSqrt { a, eig }))
    }

    // ---- convolution family ----

    /// 2-D convolution, NCHW, weight `[Cout, Cin, k, k]`, zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let (tx, tw) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
        let tb = b.map(|b| &self.nodes[b.0].value);
        let value = conv::conv2d_forward(tx, tw, tb, stride, pad);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push_from(
            value,
            &inputs,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
        )
    }

    /// Transposed 2-D convolution, weight `[Cin, Cout, k, k]`.
    /// `Hout = (H - 1) * stride - 2 * pad + k + out_pad`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        out_pad: usize,
    ) -> Var {
        let (tx, tw) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
        let tb = b.map(|b| &self.nodes[b.0].value);
        let value = conv::conv_transpose2d_forward(tx, tw, tb, stride, pad, out_pad);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        // out_pad only affects the forward shape; backward recovers it from
        // the saved output gradient, so it is not recorded.
        self.push_from(
            value,
            &inputs,
            Op::ConvTranspose2d {
                x,
                w,
                b,
                stride,
                pad,
            },
        )
    }

    /// Adder convolution: `out = -sum |x - f|` over each receptive field,
    /// filters `[Cout, Cin, k, k]`, zero padding (padded taps contribute
    /// `|f|`). Backward uses the adder surrogate gradients.
    pub fn adder_conv2d(
        &mut self,
        x: Var,
        f: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Var {
        let (tx, tf) = (&self.nodes[x.0].value, &self.nodes[f.0].value);
        let tb = b.map(|b| &self.nodes[b.0].value);
        let value = conv::adder_conv2d_forward(tx, tf, tb, stride, pad);
        let mut inputs = vec![x, f];
        inputs.extend(b);
        self.push_from(
            value,
            &inputs,
            Op::AdderConv2d {
                x,
                f,
                b,
                stride,
                pad,
            },
        )
    }

    /// Convolution with power-of-two quantized weights. The quantized
    /// weights are used in the forward pass and for the input gradient;
    /// the weight gradient flows straight through to `w`.
    pub fn shift_conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        p_min: i32,
        p_max: i32,
    ) -> Var {
        let tw = &self.nodes[w.0].value;
        let wq = conv::shift_quantize(tw, p_min, p_max).2;
        let tx = &self.nodes[x.0].value;
        let tb = b.map(|b| &self.nodes[b.0].value);
        let value = conv::conv2d_forward(tx, &wq, tb, stride, pad);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push_from(
            value,
            &inputs,
            Op::ShiftConv2d {
                x,
                w,
                stride,
                pad,
                wq,
            },
        )
    }

    /// Average pooling, no padding. `Hout = (H - k) / stride + 1`.
    pub fn avg_pool2d(&mut self, x: Var, k: usize, stride: usize) -> Var {
        let value = conv::avg_pool2d_forward(&self.nodes[x.0].value, k, stride);
        self.push_from(value, &[x], Op::AvgPool2d { x, k, stride })
    }

    /// `(N, C*r^2, H, W) -> (N, C, r*H, r*W)` with
    /// `out[n, c, r*h + a, r*w + b] = in[n, c*r^2 + a*r + b, h, w]`.
    pub fn pixel_shuffle(&mut self, x: Var, r: usize) -> Var {
        let value = conv::pixel_shuffle_forward(&self.nodes[x.0].value, r);
        self.push_from(value, &[x], Op::PixelShuffle { x, r })
    }

    /// Inverse of [`Graph::pixel_shuffle`].
    pub fn pixel_unshuffle(&mut self, x: Var, r: usize) -> Var {
        let value = conv::pixel_unshuffle_forward(&self.nodes[x.0].value, r);
        self.push_from(value, &[x], Op::PixelUnshuffle { x, r })
    }

    // ---- backward ----

    /// Backpropagate from a scalar output with seed 1.
    pub fn backward(&mut self, out: Var) -> Result<()> {
        if self.nodes[out.0].value.len() != 1 {
            return Err(SapmError::numeric("backward from a non-scalar output"));
        }
        let seed = Tensor::new(self.nodes[out.0].value.shape().to_vec(), vec![1.0]);
        self.backward_seeded(out, &seed)
    }

    /// Backpropagate an arbitrary output gradient.
    pub fn backward_seeded(&mut self, out: Var, seed: &Tensor) -> Result<()> {
        if !self.grad_enabled {
            return Err(SapmError::numeric(
                "backward on a graph built without gradients",
            ));
        }
        if seed.shape() != self.nodes[out.0].value.shape() {
            return Err(SapmError::numeric("backward seed shape mismatch"));
        }
        for n in self.nodes.iter_mut() {
            n.grad = None;
        }
        if !self.nodes[out.0].needs_grad {
            return Ok(());
        }
        self.accumulate(out, seed.data());
        for i in (0..self.nodes.len()).rev() {
            if self.nodes[i].grad.is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            let g = self.nodes[i].grad.take().expect("grad present");
            let op = self.nodes[i].op.clone();
            self.dispatch_backward(i, &op, &g);
            self.nodes[i].grad = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, contrib: &[f64]) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let node = &mut self.nodes[v.0];
        debug_assert_eq!(node.value.len(), contrib.len());
        match node.grad.as_mut() {
            Some(g) => {
                for (gi, &ci) in g.iter_mut().zip(contrib) {
                    *gi += ci;
                }
            }
            None => node.grad = Some(contrib.to_vec()),
        }
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn dispatch_backward(&mut self, node_idx: usize, op: &Op, g: &[f64]) {
        match *op {
            Op::Leaf | Op::SignDetached => {}
            Op::Add(a, b) => {
                self.accumulate(a, g);
                self.accumulate(b, g);
            }
            Op::Sub(a, b) => {
                self.accumulate(a, g);
                if self.needs(b) {
                    let neg: Vec<f64> = g.iter().map(|&x| -x).collect();
                    self.accumulate(b, &neg);
                }
            }
            Op::Mul(a, b) => {
                if self.needs(a) {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(self.val(b).data())
                        .map(|(&gi, &bi)| gi * bi)
                        .collect();
                    self.accumulate(a, &da);
                }
                if self.needs(b) {
                    let db: Vec<f64> = g
                        .iter()
                        .zip(self.val(a).data())
                        .map(|(&gi, &ai)| gi * ai)
                        .collect();
                    self.accumulate(b, &db);
                }
            }
            Op::Div(a, b) => {
                if self.needs(a) {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(self.val(b).data())
                        .map(|(&gi, &bi)| gi / bi)
                        .collect();
                    self.accumulate(a, &da);
                }
                if self.needs(b) {
                    let db: Vec<f64> = g
                        .iter()
                        .zip(self.val(a).data().iter().zip(self.val(b).data()))
                        .map(|(&gi, (&ai, &bi))| -gi * ai / (bi * bi))
                        .collect();
                    self.accumulate(b, &db);
                }
            }
            Op::MaxElem(a, b) => {
                // Ties route to the first argument.
                if self.needs(a) {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(self.val(a).data().iter().zip(self.val(b).data()))
                        .map(|(&gi, (&ai, &bi))| if ai >= bi { gi } else { 0.0 })
                        .collect();
                    self.accumulate(a, &da);
                }
                if self.needs(b) {
                    let db: Vec<f64> = g
                        .iter()
                        .zip(self.val(a).data().iter().zip(self.val(b).data()))
                        .map(|(&gi, (&ai, &bi))| if ai >= bi { 0.0 } else { gi })
                        .collect();
                    self.accumulate(b, &db);
                }
            }
            Op::Neg(a) => {
                if self.needs(a) {
                    let da: Vec<f64> = g.iter().map(|&x| -x).collect();
                    self.accumulate(a, &da);
                }
            }
            Op::Abs(a) => {
                // d|x|/dx at 0 is taken as 0.
                if self.needs(a) {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(self.val(a).data())
                        .map(|(&gi, &ai)| {
                            if ai > 0.0 {
                                gi
                            } else if ai < 0.0 {
                                -gi
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    self.accumulate(a, &da);
                }
            }
            Op::Exp(a) => {
                if self.needs(a) {
                    let out = self.nodes[node_idx].value.data();
                    let da: Vec<f64> = g.iter().zip(out).map(|(&gi, &yi)| gi * yi).collect();
                    self.accumulate(a, &da);
                }
            }
            Op::Log(a) => {
                if self.needs(a) {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(self.val(a).data())
                        .map(|(&gi, &ai)| gi / ai)
                        .collect();
                    self.accumulate(a, &da);
                }
            }
            Op::Sqrt(a) => {
                if self.needs(a) {
                    let out = self.nodes[node_idx].value.data();
                    let da: Vec<f64> = g
                        .iter()
                        .zip(out)
                        .map(|(&gi, &yi)| gi / (2.0 * yi))
                        .collect();
                    self.accumulate(a, &da);
                }
            }
            Op::Square(a) => {
                if self.needs(a) {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(self.val(a).data())
                        .map(|(&gi, &ai)| gi * 2.0 * ai)
                        .collect();
                    self.accumulate(a, &da);
                }
            }
            Op::Softplus(a) => {
                if self.needs(a) {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(self.val(a).data())
                        .map(|(&gi, &ai)| gi * sigmoid(ai))
                        .collect();
                    self.accumulate(a, &da);
                }
            }
            Op::Scale(a, s) => {
                if self.needs(a) {
                    let da: Vec<f64> = g.iter().map(|&x| x * s).collect();
                    self.accumulate(a, &da);
                }
            }
            Op::AddScalar(a) => {
                self.accumulate(a, g);
            }
            Op::ClampMin(a, lo) => {
                if self.needs(a) {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(self.val(a).data())
                        .map(|(&gi, &ai)| if ai > lo { gi } else { 0.0 })
                        .collect();
                    self.accumulate(a, &da);
                }
            }
            Op::Round(a) => {
                // Straight-through estimator.
                self.accumulate(a, g);
            }
            Op::Sum(a) => {
                if self.needs(a) {
                    let da = vec![g[0]; self.val(a).len()];
                    self.accumulate(a, &da);
                }
            }
            Op::AddChan { x, v } => {
                self.accumulate(x, g);
                if self.needs(v) {
                    let dv = chan_reduce(g, self.val(x));
                    self.accumulate(v, &dv);
                }
            }
            Op::MulChan { x, v } => {
                let (n, c, h, w) = self.val(x).dims4();
                let hw = h * w;
                if self.needs(x) {
                    let vv = self.val(v).data().to_vec();
                    let mut dx = vec![0.0; g.len()];
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * hw;
                            let s = vv[ci];
                            for (d, &gi) in dx[base..base + hw].iter_mut().zip(&g[base..base + hw])
                            {
                                *d = gi * s;
                            }
                        }
                    }
                    self.accumulate(x, &dx);
                }
                if self.needs(v) {
                    let xd = self.val(x).data();
                    let mut dv = vec![0.0; c];
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * hw;
                            let mut acc = 0.0;
                            for (&gi, &xi) in g[base..base + hw].iter().zip(&xd[base..base + hw]) {
                                acc += gi * xi;
                            }
                            dv[ci] += acc;
                        }
                    }
                    self.accumulate(v, &dv);
                }
            }
            Op::ChannelSelect { x, ref idx } => {
                if self.needs(x) {
                    let (n, c, h, w) = self.val(x).dims4();
                    let hw = h * w;
                    let mut dx = vec![0.0; n * c * hw];
                    for ni in 0..n {
                        for (j, &ci) in idx.iter().enumerate() {
                            let src = &g[(ni * idx.len() + j) * hw..(ni * idx.len() + j) * hw + hw];
                            let dst = &mut dx[(ni * c + ci) * hw..(ni * c + ci) * hw + hw];
                            for (d, &s) in dst.iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                    self.accumulate(x, &dx);
                }
            }
            Op::Reshape(a) => {
                self.accumulate(a, g);
            }
            Op::MatMul { a, b } => {
                let (m, k) = (self.val(a).dim(0), self.val(a).dim(1));
                let n = self.val(b).dim(1);
                if self.needs(a) {
                    let mut da = vec![0.0; m * k];
                    linalg::mm_nt(g, self.val(b).data(), m, n, k, &mut da);
                    self.accumulate(a, &da);
                }
                if self.needs(b) {
                    let mut db = vec![0.0; k * n];
                    linalg::mm_tn(self.val(a).data(), g, m, k, n, &mut db);
                    self.accumulate(b, &db);
                }
            }
            Op::Transpose2(a) => {
                if self.needs(a) {
                    let (m, n) = (self.val(a).dim(0), self.val(a).dim(1));
                    let da = linalg::transpose(g, n, m);
                    self.accumulate(a, &da);
                }
            }
            Op::NchwToRows(x) => {
                if self.needs(x) {
                    let (n, c, h, w) = self.val(x).dims4();
                    let dx = rows_to_nchw_data(g, n, c, h, w);
                    self.accumulate(x, &dx);
                }
            }
            Op::RowsToNchw(a) => {
                if self.needs(a) {
                    let out = &self.nodes[node_idx].value;
                    let (n, c, h, w) = out.dims4();
                    let da = nchw_to_rows_data(g, n, c, h, w);
                    self.accumulate(a, &da);
                }
            }
            Op::ColMean(a) => {
                if self.needs(a) {
                    let (r, c) = (self.val(a).dim(0), self.val(a).dim(1));
                    let inv = 1.0 / r as f64;
                    let mut da = vec![0.0; r * c];
                    for i in 0..r {
                        for (d, &gj) in da[i * c..i * c + c].iter_mut().zip(g) {
                            *d = gj * inv;
                        }
                    }
                    self.accumulate(a, &da);
                }
            }
            Op::SubRowVec { a, v } => {
                self.accumulate(a, g);
                if self.needs(v) {
                    let c = self.val(v).len();
                    let r = self.val(a).dim(0);
                    let mut dv = vec![0.0; c];
                    for i in 0..r {
                        for (d, &gj) in dv.iter_mut().zip(&g[i * c..i * c + c]) {
                            *d -= gj;
                        }
                    }
                    self.accumulate(v, &dv);
                }
            }
            Op::AddDiag(a) => {
                self.accumulate(a, g);
            }
            Op::SymInvSqrt { a, ref eig } => {
                if self.needs(a) {
                    let da = linalg::sym_inv_sqrt_backward(eig, g);
                    self.accumulate(a, &da);
                }
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let tx = self.val(x).clone();
                let tw_shape = self.val(w).shape().to_vec();
                if self.needs(x) {
                    let dx = conv::conv2d_dx(&tx, self.val(w), g, stride, pad);
                    self.accumulate(x, &dx);
                }
                if self.needs(w) {
                    let dw = conv::conv2d_dw(&tx, &tw_shape, g, stride, pad);
                    self.accumulate(w, &dw);
                }
                if let Some(b) = b {
                    if self.needs(b) {
                        let out = &self.nodes[node_idx].value;
                        let db = conv::bias_grad(g, out);
                        self.accumulate(b, &db);
                    }
                }
            }
            Op::ConvTranspose2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let out_shape = self.nodes[node_idx].value.shape().to_vec();
                if self.needs(x) {
                    let dx = conv::conv_transpose2d_dx(
                        self.val(x),
                        self.val(w),
                        g,
                        &out_shape,
                        stride,
                        pad,
                    );
                    self.accumulate(x, &dx);
                }
                if self.needs(w) {
                    let dw = conv::conv_transpose2d_dw(
                        self.val(x),
                        self.val(w).shape(),
                        g,
                        &out_shape,
                        stride,
                        pad,
                    );
                    self.accumulate(w, &dw);
                }
                if let Some(b) = b {
                    if self.needs(b) {
                        let out = &self.nodes[node_idx].value;
                        let db = conv::bias_grad(g, out);
                        self.accumulate(b, &db);
                    }
                }
            }
            Op::AdderConv2d {
                x,
                f,
                b,
                stride,
                pad,
            } => {
                if self.needs(x) {
                    let dx = conv::adder_conv2d_dx(self.val(x), self.val(f), g, stride, pad);
                    self.accumulate(x, &dx);
                }
                if self.needs(f) {
                    let df = conv::adder_conv2d_df(self.val(x), self.val(f), g, stride, pad);
                    self.accumulate(f, &df);
                }
                if let Some(b) = b {
                    if self.needs(b) {
                        let out = &self.nodes[node_idx].value;
                        let db = conv::bias_grad(g, out);
                        self.accumulate(b, &db);
                    }
                }
            }
            Op::ShiftConv2d {
                x,
                w,
                stride,
                pad,
                ref wq,
            } => {
                if self.needs(x) {
                    let dx = conv::conv2d_dx(self.val(x), wq, g, stride, pad);
                    self.accumulate(x, &dx);
                }
                if self.needs(w) {
                    // Straight-through: gradient of the dense convolution
                    // with respect to its (quantized) weights, in the
                    // oracle-reproducible serial order.
                    let dw = conv::conv2d_dw_direct(self.val(x), wq.shape(), g, stride, pad);
                    self.accumulate(w, &dw);
                }
            }
            Op::AvgPool2d { x, k, stride } => {
                if self.needs(x) {
                    let out_shape = self.nodes[node_idx].value.shape().to_vec();
                    let dx = conv::avg_pool2d_dx(self.val(x).shape(), &out_shape, g, k, stride);
                    self.accumulate(x, &dx);
                }
            }
            Op::PixelShuffle { x, r } => {
                if self.needs(x) {
                    let out = &self.nodes[node_idx].value;
                    let gt = Tensor::new(out.shape().to_vec(), g.to_vec());
                    let dx = conv::pixel_unshuffle_forward(&gt, r);
                    self.accumulate(x, dx.data());
                }
            }
            Op::PixelUnshuffle { x, r } => {
                if self.needs(x) {
                    let out = &self.nodes[node_idx].value;
                    let gt = Tensor::new(out.shape().to_vec(), g.to_vec());
                    let dx = conv::pixel_shuffle_forward(&gt, r);
                    self.accumulate(x, dx.data());
                }
            }
        }
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Div(..) => "div",
        Op::MaxElem(..) => "max_elem",
        Op::Neg(..) => "neg",
        Op::Abs(..) => "abs",
        Op::Exp(..) => "exp",
        Op::Log(..) => "log",
        Op::Sqrt(..) => "sqrt",
        Op::Square(..) => "square",
        Op::Softplus(..) => "softplus",
        Op::Scale(..) => "scale",
        Op::AddScalar(..) => "add_scalar",
        Op::ClampMin(..) => "clamp_min",
        Op::Round(..) => "round",
        Op::SignDetached => "sign_detached",
        Op::Sum(..) => "sum",
        Op::AddChan { .. } => "add_chan",
        Op::MulChan { .. } => "mul_chan",
        Op::ChannelSelect { .. } => "channel_select",
        Op::Reshape(..) => "reshape",
        Op::MatMul { .. } => "matmul",
        Op::Transpose2(..) => "transpose2",
        Op::NchwToRows(..) => "nchw_to_rows",
        Op::RowsToNchw(..) => "rows_to_nchw",
        Op::ColMean(..) => "col_mean",
        Op::SubRowVec { .. } => "sub_row_vec",
        Op::AddDiag(..) => "add_diag",
        Op::SymInvSqrt { .. } => "sym_inv_sqrt",
        Op::Conv2d { .. } => "conv2d",
        Op::ConvTranspose2d { .. } => "conv_transpose2d",
        Op::AdderConv2d { .. } => "adder_conv2d",
        Op::ShiftConv2d { .. } => "shift_conv2d",
        Op::AvgPool2d { .. } => "avg_pool2d",
        Op::PixelShuffle { .. } => "pixel_shuffle",
        Op::PixelUnshuffle { .. } => "pixel_unshuffle",
    }
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn sum_slice(xs: &[f64]) -> f64 {
    // Fixed-order serial sum; determinism matters more than speed here.
    let mut acc = 0.0;
    for &x in xs {
        acc += x;
    }
    acc
}

fn chan_broadcast(x: &Tensor, v: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let (n, c, h, w) = x.dims4();
    assert_eq!(v.shape(), &[c], "channel vector shape mismatch");
    let hw = h * w;
    let mut data = Vec::with_capacity(x.len());
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * hw;
            let s = v.data()[ci];
            data.extend(x.data()[base..base + hw].iter().map(|&xi| f(xi, s)));
        }
    }
    Tensor::new(x.shape().to_vec(), data)
}

fn chan_reduce(g: &[f64], x: &Tensor) -> Vec<f64> {
    let (n, c, h, w) = x.dims4();
    let hw = h * w;
    let mut out = vec![0.0; c];
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * hw;
            let mut acc = 0.0;
            for &gi in &g[base..base + hw] {
                acc += gi;
            }
            out[ci] += acc;
        }
    }
    out
}

fn nchw_to_rows_data(x: &[f64], n: usize, c: usize, h: usize, w: usize) -> Vec<f64> {
    let hw = h * w;
    let mut out = vec![0.0; n * hw * c];
    for ni in 0..n {
        for ci in 0..c {
            let src = &x[(ni * c + ci) * hw..(ni * c + ci) * hw + hw];
            for (s, &v) in src.iter().enumerate() {
                out[(ni * hw + s) * c + ci] = v;
            }
        }
    }
    out
}

fn rows_to_nchw_data(rows: &[f64], n: usize, c: usize, h: usize, w: usize) -> Vec<f64> {
    let hw = h * w;
    let mut out = vec![0.0; n * c * hw];
    for ni in 0..n {
        for ci in 0..c {
            let dst = &mut out[(ni * c + ci) * hw..(ni * c + ci) * hw + hw];
            for (s, d) in dst.iter_mut().enumerate() {
                *d = rows[(ni * hw + s) * c + ci];
            }
        }
    }
    out
}
