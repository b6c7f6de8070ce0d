//! Reverse-mode autodiff over a flat expression arena.
//!
//! A [`Graph`] records every operation as a node holding its forward value;
//! [`Graph::backward`] walks the arena in reverse, accumulating gradients.
//! Nodes only ever reference earlier nodes, so reverse index order is a
//! topological order.
//!
//! Shape mismatches are programmer errors and panic; the runtime failures the
//! caller can hit (non-scalar loss, NaN during propagation) surface as
//! [`DiffError`].

use std::collections::HashMap;

use super::kernels;
use super::params::{ParamKey, ParamStore};
use super::tensor::Tensor;
use super::DiffError;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    AddRows(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddConst(Var),
    MatMul(Var, Var),
    Silu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softplus(Var),
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    Square(Var),
    Symexp(Var),
    MaxConst(Var, f64),
    LogSoftmaxRows(Var),
    SumAll(Var),
    MeanAll(Var),
    SumCols(Var),
    SumRowsSeg(Var, usize),
    MeanRowsSeg(Var, usize),
    MaxRowsSeg(Var, Vec<u32>),
    ConcatCols(Var, Var),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize, usize),
    GatherRows(Var, Vec<u32>),
    Conv2d {
        x: Var,
        w: Var,
        stride: usize,
        pad: usize,
    },
    ConvT2d {
        x: Var,
        w: Var,
        stride: usize,
        pad: usize,
        out_hw: (usize, usize),
    },
    AddChanBias(Var, Var),
    Reshape(Var),
    StopGrad,
    LayerNormRows {
        x: Var,
        scale: Var,
        shift: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::AddRows(..) => "add_rows",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Neg(..) => "neg",
            Op::Scale(..) => "scale",
            Op::AddConst(..) => "add_const",
            Op::MatMul(..) => "matmul",
            Op::Silu(..) => "silu",
            Op::Tanh(..) => "tanh",
            Op::Sigmoid(..) => "sigmoid",
            Op::Softplus(..) => "softplus",
            Op::Exp(..) => "exp",
            Op::Ln(..) => "ln",
            Op::Sqrt(..) => "sqrt",
            Op::Square(..) => "square",
            Op::Symexp(..) => "symexp",
            Op::MaxConst(..) => "max_const",
            Op::LogSoftmaxRows(..) => "log_softmax_rows",
            Op::SumAll(..) => "sum_all",
            Op::MeanAll(..) => "mean_all",
            Op::SumCols(..) => "sum_cols",
            Op::SumRowsSeg(..) => "sum_rows_seg",
            Op::MeanRowsSeg(..) => "mean_rows_seg",
            Op::MaxRowsSeg(..) => "max_rows_seg",
            Op::ConcatCols(..) => "concat_cols",
            Op::ConcatRows(..) => "concat_rows",
            Op::SliceCols(..) => "slice_cols",
            Op::GatherRows(..) => "gather_rows",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvT2d { .. } => "conv_t2d",
            Op::AddChanBias(..) => "add_chan_bias",
            Op::Reshape(..) => "reshape",
            Op::StopGrad => "stop_grad",
            Op::LayerNormRows { .. } => "layer_norm_rows",
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Expression arena for one forward/backward pass.
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    param_memo: HashMap<(u64, usize), Var>,
    bound: Vec<(u64, ParamKey, Var)>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            param_memo: HashMap::new(),
            bound: Vec::new(),
        }
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

    /// Gradient of the last `backward` target w.r.t. `v`, if any reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Constant input; no gradient flows into it.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t, false)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    /// Trainable leaf bound to a parameter store entry. Binding the same
    /// entry twice returns the same node so gradients accumulate in one
    /// place.
    pub fn param(&mut self, store: &ParamStore, key: ParamKey) -> Var {
        let id = (store.id(), key.0);
        if let Some(&v) = self.param_memo.get(&id) {
            return v;
        }
        let v = self.push(Op::Leaf, store.tensor(key).clone(), true);
        self.param_memo.insert(id, v);
        self.bound.push((store.id(), key, v));
        v
    }

    /// Leaf bound to a store entry with gradients disabled (frozen weights).
    pub fn frozen_param(&mut self, store: &ParamStore, key: ParamKey) -> Var {
        let id = (store.id(), key.0);
        if let Some(&v) = self.param_memo.get(&id) {
            return v;
        }
        let v = self.push(Op::Leaf, store.tensor(key).clone(), false);
        self.param_memo.insert(id, v);
        v
    }

    // ---- elementwise ----

    fn same_shape(&self, a: Var, b: Var, what: &str) {
        assert_eq!(
            self.value(a).shape(),
            self.value(b).shape(),
            "{what}: shape mismatch"
        );
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "add");
        let v = zip_map(self.value(a), self.value(b), |x, y| x + y);
        let g = self.ng(a) || self.ng(b);
        self.push(Op::Add(a, b), v, g)
    }

    /// Matrix plus per-column bias vector, broadcast over rows.
    pub fn add_rows(&mut self, m: Var, bias: Var) -> Var {
        let (r, c) = self.value(m).dims2();
        assert_eq!(self.value(bias).shape(), &[c], "add_rows: bias shape");
        let mut out = self.value(m).clone();
        let bv = self.value(bias).data();
        for row in out.data_mut().chunks_mut(c) {
            for (o, &b) in row.iter_mut().zip(bv) {
                *o += b;
            }
        }
        debug_assert_eq!(out.shape(), &[r, c]);
        let g = self.ng(m) || self.ng(bias);
        self.push(Op::AddRows(m, bias), out, g)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "sub");
        let v = zip_map(self.value(a), self.value(b), |x, y| x - y);
        let g = self.ng(a) || self.ng(b);
        self.push(Op::Sub(a, b), v, g)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "mul");
        let v = zip_map(self.value(a), self.value(b), |x, y| x * y);
        let g = self.ng(a) || self.ng(b);
        self.push(Op::Mul(a, b), v, g)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "div");
        let v = zip_map(self.value(a), self.value(b), |x, y| x / y);
        let g = self.ng(a) || self.ng(b);
        self.push(Op::Div(a, b), v, g)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| -x);
        let g = self.ng(a);
        self.push(Op::Neg(a), v, g)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x * c);
        let g = self.ng(a);
        self.push(Op::Scale(a, c), v, g)
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x + c);
        let g = self.ng(a);
        self.push(Op::AddConst(a), v, g)
    }

    // ---- activations and scalar transforms ----

    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * sigmoid(x));
        let g = self.ng(a);
        self.push(Op::Silu(a), v, g)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        let g = self.ng(a);
        self.push(Op::Tanh(a), v, g)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        let g = self.ng(a);
        self.push(Op::Sigmoid(a), v, g)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.value(a).map(softplus);
        let g = self.ng(a);
        self.push(Op::Softplus(a), v, g)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        let g = self.ng(a);
        self.push(Op::Exp(a), v, g)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::ln);
        let g = self.ng(a);
        self.push(Op::Ln(a), v, g)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::sqrt);
        let g = self.ng(a);
        self.push(Op::Sqrt(a), v, g)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        let g = self.ng(a);
        self.push(Op::Square(a), v, g)
    }

    /// Inverse of symlog: sign(y)·(e^|y| − 1).
    pub fn symexp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(crate::diffmath::symexp);
        let g = self.ng(a);
        self.push(Op::Symexp(a), v, g)
    }

    /// Elementwise max(x, c); the free-bits clip.
    pub fn max_const(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x.max(c));
        let g = self.ng(a);
        self.push(Op::MaxConst(a, c), v, g)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.value(a).dims2();
        let mut out = self.value(a).clone();
        for row in out.data_mut().chunks_mut(c) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln() + m;
            for x in row.iter_mut() {
                *x -= lse;
            }
        }
        debug_assert_eq!(out.shape(), &[r, c]);
        let g = self.ng(a);
        self.push(Op::LogSoftmaxRows(a), out, g)
    }

    // ---- reductions ----

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let g = self.ng(a);
        self.push(Op::SumAll(a), Tensor::scalar(s), g)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).numel() as f64;
        let s = self.value(a).data().iter().sum::<f64>() / n;
        let g = self.ng(a);
        self.push(Op::MeanAll(a), Tensor::scalar(s), g)
    }

    /// Row sums of a rank-2 tensor: [r, c] -> [r].
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let (r, c) = self.value(a).dims2();
        let mut out = vec![0.0; r];
        for (i, row) in self.value(a).data().chunks(c).enumerate() {
            out[i] = row.iter().sum();
        }
        let g = self.ng(a);
        self.push(Op::SumCols(a), Tensor::from_vec(out), g)
    }

    fn seg_check(&self, a: Var, seg: usize) -> (usize, usize) {
        let (r, c) = self.value(a).dims2();
        assert!(seg > 0 && r % seg == 0, "segment size {seg} must divide rows {r}");
        (r / seg, c)
    }

    /// Sum over consecutive row blocks of size `seg`: [g·seg, c] -> [g, c].
    pub fn sum_rows_seg(&mut self, a: Var, seg: usize) -> Var {
        let (groups, c) = self.seg_check(a, seg);
        let mut out = vec![0.0; groups * c];
        for (i, row) in self.value(a).data().chunks(c).enumerate() {
            let base = (i / seg) * c;
            for (j, &x) in row.iter().enumerate() {
                out[base + j] += x;
            }
        }
        let g = self.ng(a);
        self.push(Op::SumRowsSeg(a, seg), Tensor::from_rows(groups, c, out), g)
    }

    /// Mean over consecutive row blocks of size `seg`.
    pub fn mean_rows_seg(&mut self, a: Var, seg: usize) -> Var {
        let (groups, c) = self.seg_check(a, seg);
        let mut out = vec![0.0; groups * c];
        for (i, row) in self.value(a).data().chunks(c).enumerate() {
            let base = (i / seg) * c;
            for (j, &x) in row.iter().enumerate() {
                out[base + j] += x / seg as f64;
            }
        }
        let g = self.ng(a);
        self.push(Op::MeanRowsSeg(a, seg), Tensor::from_rows(groups, c, out), g)
    }

    /// Columnwise max over consecutive row blocks of size `seg`; ties go to
    /// the earliest row.
    pub fn max_rows_seg(&mut self, a: Var, seg: usize) -> Var {
        let (groups, c) = self.seg_check(a, seg);
        let mut out = vec![f64::NEG_INFINITY; groups * c];
        let mut arg = vec![0u32; groups * c];
        for (i, row) in self.value(a).data().chunks(c).enumerate() {
            let base = (i / seg) * c;
            for (j, &x) in row.iter().enumerate() {
                if x > out[base + j] {
                    out[base + j] = x;
                    arg[base + j] = i as u32;
                }
            }
        }
        let g = self.ng(a);
        self.push(
            Op::MaxRowsSeg(a, arg),
            Tensor::from_rows(groups, c, out),
            g,
        )
    }

    // ---- structure ----

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (ra, ca) = self.value(a).dims2();
        let (rb, cb) = self.value(b).dims2();
        assert_eq!(ra, rb, "concat_cols: row mismatch");
        let mut out = vec![0.0; ra * (ca + cb)];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for i in 0..ra {
            out[i * (ca + cb)..i * (ca + cb) + ca].copy_from_slice(&da[i * ca..(i + 1) * ca]);
            out[i * (ca + cb) + ca..(i + 1) * (ca + cb)].copy_from_slice(&db[i * cb..(i + 1) * cb]);
        }
        let g = self.ng(a) || self.ng(b);
        self.push(Op::ConcatCols(a, b), Tensor::from_rows(ra, ca + cb, out), g)
    }

    /// Stack rank-2 tensors with equal column counts along the row axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows needs at least one input");
        let c = self.value(parts[0]).dims2().1;
        let total: usize = parts.iter().map(|&v| self.value(v).dims2().0).sum();
        let mut out = Vec::with_capacity(total * c);
        let mut needs = false;
        for &v in parts {
            assert_eq!(self.value(v).dims2().1, c, "concat_rows: column mismatch");
            out.extend_from_slice(self.value(v).data());
            needs |= self.ng(v);
        }
        self.push(
            Op::ConcatRows(parts.to_vec()),
            Tensor::from_rows(total, c, out),
            needs,
        )
    }

    pub fn slice_cols(&mut self, a: Var, from: usize, to: usize) -> Var {
        let (r, c) = self.value(a).dims2();
        assert!(from < to && to <= c, "slice_cols: bad range {from}..{to} of {c}");
        let w = to - from;
        let mut out = vec![0.0; r * w];
        for i in 0..r {
            out[i * w..(i + 1) * w]
                .copy_from_slice(&self.value(a).data()[i * c + from..i * c + to]);
        }
        let g = self.ng(a);
        self.push(Op::SliceCols(a, from, to), Tensor::from_rows(r, w, out), g)
    }

    /// out[i, :] = a[idx[i], :]; duplicate indices allowed.
    pub fn gather_rows(&mut self, a: Var, idx: Vec<u32>) -> Var {
        let (r, c) = self.value(a).dims2();
        let mut out = vec![0.0; idx.len() * c];
        let data = self.value(a).data();
        for (i, &ix) in idx.iter().enumerate() {
            let ix = ix as usize;
            assert!(ix < r, "gather_rows: index {ix} out of {r}");
            out[i * c..(i + 1) * c].copy_from_slice(&data[ix * c..(ix + 1) * c]);
        }
        let g = self.ng(a);
        let n = idx.len();
        self.push(Op::GatherRows(a, idx), Tensor::from_rows(n, c, out), g)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, ka) = self.value(a).dims2();
        let (kb, n) = self.value(b).dims2();
        assert_eq!(ka, kb, "matmul: inner dim mismatch {ka} vs {kb}");
        let mut out = vec![0.0; m * n];
        kernels::matmul(self.value(a).data(), self.value(b).data(), m, ka, n, &mut out);
        let g = self.ng(a) || self.ng(b);
        self.push(Op::MatMul(a, b), Tensor::from_rows(m, n, out), g)
    }

    /// x [ci,h,w] convolved with w [co,ci,kh,kw].
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Var {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        assert_eq!(xs.len(), 3, "conv2d: image must be rank 3");
        assert_eq!(ws.len(), 4, "conv2d: kernel must be rank 4");
        assert_eq!(xs[0], ws[1], "conv2d: channel mismatch");
        let ho = kernels::conv_out_size(xs[1], ws[2], stride, pad);
        let wo = kernels::conv_out_size(xs[2], ws[3], stride, pad);
        let mut out = vec![0.0; ws[0] * ho * wo];
        kernels::conv2d_fwd(
            self.value(x).data(),
            self.value(w).data(),
            xs[0],
            xs[1],
            xs[2],
            ws[0],
            ws[2],
            ws[3],
            stride,
            pad,
            ho,
            wo,
            &mut out,
        );
        let g = self.ng(x) || self.ng(w);
        self.push(
            Op::Conv2d { x, w, stride, pad },
            Tensor::new(vec![ws[0], ho, wo], out),
            g,
        )
    }

    /// Transposed convolution: x [ci,hi,wi] with kernel w [ci,co,kh,kw]
    /// producing [co, out_hw.0, out_hw.1].
    pub fn conv_t2d(&mut self, x: Var, w: Var, stride: usize, pad: usize, out_hw: (usize, usize)) -> Var {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        assert_eq!(xs.len(), 3, "conv_t2d: image must be rank 3");
        assert_eq!(ws.len(), 4, "conv_t2d: kernel must be rank 4");
        assert_eq!(xs[0], ws[0], "conv_t2d: channel mismatch");
        // Consistency: the matching forward conv must map out_hw back to x's size.
        assert_eq!(kernels::conv_out_size(out_hw.0, ws[2], stride, pad), xs[1]);
        assert_eq!(kernels::conv_out_size(out_hw.1, ws[3], stride, pad), xs[2]);
        let co = ws[1];
        let mut out = vec![0.0; co * out_hw.0 * out_hw.1];
        kernels::conv2d_grad_x(
            self.value(x).data(),
            self.value(w).data(),
            co,
            out_hw.0,
            out_hw.1,
            ws[0],
            ws[2],
            ws[3],
            stride,
            pad,
            xs[1],
            xs[2],
            &mut out,
        );
        let g = self.ng(x) || self.ng(w);
        self.push(
            Op::ConvT2d {
                x,
                w,
                stride,
                pad,
                out_hw,
            },
            Tensor::new(vec![co, out_hw.0, out_hw.1], out),
            g,
        )
    }

    /// Image plus per-channel bias.
    pub fn add_chan_bias(&mut self, x: Var, b: Var) -> Var {
        let xs = self.value(x).shape().to_vec();
        assert_eq!(xs.len(), 3);
        assert_eq!(self.value(b).shape(), &[xs[0]], "add_chan_bias: bias shape");
        let hw = xs[1] * xs[2];
        let mut out = self.value(x).clone();
        let bv = self.value(b).data().to_vec();
        for (c, chunk) in out.data_mut().chunks_mut(hw).enumerate() {
            for o in chunk.iter_mut() {
                *o += bv[c];
            }
        }
        let g = self.ng(x) || self.ng(b);
        self.push(Op::AddChanBias(x, b), out, g)
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Var {
        assert_eq!(
            shape.iter().product::<usize>(),
            self.value(a).numel(),
            "reshape: element count mismatch"
        );
        let out = Tensor::new(shape, self.value(a).data().to_vec());
        let g = self.ng(a);
        self.push(Op::Reshape(a), out, g)
    }

    /// Identity in the forward pass; blocks gradient flow in the backward.
    pub fn stop_grad(&mut self, a: Var) -> Var {
        let v = self.value(a).clone();
        let _ = a;
        self.push(Op::StopGrad, v, false)
    }

    /// Row-wise layer normalization with learned scale and shift.
    pub fn layer_norm_rows(&mut self, x: Var, scale: Var, shift: Var) -> Var {
        const EPS: f64 = 1e-5;
        let (r, c) = self.value(x).dims2();
        assert_eq!(self.value(scale).shape(), &[c]);
        assert_eq!(self.value(shift).shape(), &[c]);
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        let (sc, sh) = (
            self.value(scale).data().to_vec(),
            self.value(shift).data().to_vec(),
        );
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &self.value(x).data()[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + EPS).sqrt();
            inv_std[i] = is;
            for j in 0..c {
                let xh = (row[j] - mean) * is;
                xhat[i * c + j] = xh;
                out[i * c + j] = xh * sc[j] + sh[j];
            }
        }
        let g = self.ng(x) || self.ng(scale) || self.ng(shift);
        self.push(
            Op::LayerNormRows {
                x,
                scale,
                shift,
                xhat: Tensor::from_rows(r, c, xhat),
                inv_std,
            },
            Tensor::from_rows(r, c, out),
            g,
        )
    }

    // ---- composites ----

    /// x @ w + bias (broadcast over rows).
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul(x, w);
        self.add_rows(y, b)
    }

    // ---- backward ----

    /// Reverse-mode sweep from a scalar loss. Populates gradients readable
    /// via [`Graph::grad`] / [`Graph::store_grads`].
    pub fn backward(&mut self, loss: Var) -> Result<(), DiffError> {
        if self.value(loss).numel() != 1 {
            return Err(DiffError::NonScalarLoss {
                shape: self.value(loss).shape().to_vec(),
            });
        }
        if !self.value(loss).is_finite() {
            return Err(DiffError::NaN {
                op: self.nodes[loss.0].op.name(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for id in (0..=loss.0).rev() {
            if grads[id].is_none() || !self.nodes[id].needs_grad {
                continue;
            }
            let (before, rest) = grads.split_at_mut(id);
            let g = rest[0].as_ref().unwrap();
            if !g.is_finite() {
                return Err(DiffError::NaN {
                    op: self.nodes[id].op.name(),
                });
            }
            self.propagate(id, g, before);
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[id];
        let acc = |grads: &mut [Option<Tensor>], v: Var, f: &mut dyn FnMut(&mut Tensor)| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let slot = grads[v.0]
                .get_or_insert_with(|| Tensor::zeros(self.nodes[v.0].value.shape()));
            f(slot);
        };
        let gd = g.data();
        match &node.op {
            Op::Leaf | Op::StopGrad => {}
            Op::Add(a, b) => {
                acc(grads, *a, &mut |t| add_into(t, gd, 1.0));
                acc(grads, *b, &mut |t| add_into(t, gd, 1.0));
            }
            Op::AddRows(m, bias) => {
                acc(grads, *m, &mut |t| add_into(t, gd, 1.0));
                let c = self.value(*bias).numel();
                acc(grads, *bias, &mut |t| {
                    for row in gd.chunks(c) {
                        for (o, &x) in t.data_mut().iter_mut().zip(row) {
                            *o += x;
                        }
                    }
                });
            }
            Op::Sub(a, b) => {
                acc(grads, *a, &mut |t| add_into(t, gd, 1.0));
                acc(grads, *b, &mut |t| add_into(t, gd, -1.0));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                acc(grads, *a, &mut |t| {
                    for ((o, &gg), &y) in t.data_mut().iter_mut().zip(gd).zip(bv) {
                        *o += gg * y;
                    }
                });
                acc(grads, *b, &mut |t| {
                    for ((o, &gg), &x) in t.data_mut().iter_mut().zip(gd).zip(av) {
                        *o += gg * x;
                    }
                });
            }
            Op::Div(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                acc(grads, *a, &mut |t| {
                    for ((o, &gg), &y) in t.data_mut().iter_mut().zip(gd).zip(bv) {
                        *o += gg / y;
                    }
                });
                acc(grads, *b, &mut |t| {
                    for (i, o) in t.data_mut().iter_mut().enumerate() {
                        *o -= gd[i] * av[i] / (bv[i] * bv[i]);
                    }
                });
            }
            Op::Neg(a) => acc(grads, *a, &mut |t| add_into(t, gd, -1.0)),
            Op::Scale(a, c) => {
                let c = *c;
                acc(grads, *a, &mut |t| add_into(t, gd, c));
            }
            Op::AddConst(a) => acc(grads, *a, &mut |t| add_into(t, gd, 1.0)),
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2();
                let n = self.value(*b).dims2().1;
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                acc(grads, *a, &mut |t| {
                    kernels::matmul_a_bt_acc(gd, bv, m, n, k, t.data_mut());
                });
                acc(grads, *b, &mut |t| {
                    kernels::matmul_at_b_acc(av, gd, m, k, n, t.data_mut());
                });
            }
            Op::Silu(a) => {
                let xv = self.value(*a).data();
                acc(grads, *a, &mut |t| {
                    for (i, o) in t.data_mut().iter_mut().enumerate() {
                        let s = sigmoid(xv[i]);
                        *o += gd[i] * s * (1.0 + xv[i] * (1.0 - s));
                    }
                });
            }
            Op::Tanh(a) => {
                let yv = node.value.data();
                acc(grads, *a, &mut |t| {
                    for (i, o) in t.data_mut().iter_mut().enumerate() {
                        *o += gd[i] * (1.0 - yv[i] * yv[i]);
                    }
                });
            }
            Op::Sigmoid(a) => {
                let yv = node.value.data();
                acc(grads, *a, &mut |t| {
                    for (i, o) in t.data_mut().iter_mut().enumerate() {
                        *o += gd[i] * yv[i] * (1.0 - yv[i]);
                    }
                });
            }
            Op::Softplus(a) => {
                let xv = self.value(*a).data();
                acc(grads, *a, &mut |t| {
                    for (i, o) in t.data_mut().iter_mut().enumerate() {
                        *o += gd[i] * sigmoid(xv[i]);
                    }
                });
            }
            Op::Exp(a) => {
                let yv = node.value.data();
                acc(grads, *a, &mut |t| {
                    for (i, o) in t.data_mut().iter_mut().enumerate() {
                        *o += gd[i] * yv[i];
                    }
                });
            }
            Op::Ln(a) => {
                let xv = self.value(*a).data();
                acc(grads, *a, &mut |t| {
                    for (i, o) in t.data_mut().iter_mut().enumerate() {
                        *o += gd[i] / xv[i];
                    }
                });
            }
            Op::Sqrt(a) => {
                let yv = node.value.data();
                acc(grads, *a, &mut |t| {
                    for (i, o) in t.data_mut().iter_mut().enumerate() {
                        *o += gd[i] * 0.5 / yv[i];
                    }
                });
            }
            Op::Square(a) => {
                let xv = self.value(*a).data();
                acc(grads, *a, &mut |t| {
                    for (i, o) in t.data_mut().iter_mut().enumerate() {
                        *o += gd[i] * 2.0 * xv[i];
                    }
                });
            }
            Op::Symexp(a) => {
                let xv = self.value(*a).data();
                acc(grads, *a, &mut |t| {
                    for (i, o) in t.data_mut().iter_mut().enumerate() {
                        *o += gd[i] * xv[i].abs().exp();
                    }
                });
            }
            Op::MaxConst(a, c) => {
                let xv = self.value(*a).data();
                let c = *c;
                acc(grads, *a, &mut |t| {
                    for (i, o) in t.data_mut().iter_mut().enumerate() {
                        if xv[i] > c {
                            *o += gd[i];
                        }
                    }
                });
            }
            Op::LogSoftmaxRows(a) => {
                let yv = node.value.data();
                let c = node.value.dims2().1;
                acc(grads, *a, &mut |t| {
                    for (i, row) in t.data_mut().chunks_mut(c).enumerate() {
                        let grow = &gd[i * c..(i + 1) * c];
                        let gsum: f64 = grow.iter().sum();
                        let yrow = &yv[i * c..(i + 1) * c];
                        for (j, o) in row.iter_mut().enumerate() {
                            *o += grow[j] - yrow[j].exp() * gsum;
                        }
                    }
                });
            }
            Op::SumAll(a) => {
                let gs = g.item();
                acc(grads, *a, &mut |t| {
                    for o in t.data_mut() {
                        *o += gs;
                    }
                });
            }
            Op::MeanAll(a) => {
                let n = self.value(*a).numel() as f64;
                let gs = g.item() / n;
                acc(grads, *a, &mut |t| {
                    for o in t.data_mut() {
                        *o += gs;
                    }
                });
            }
            Op::SumCols(a) => {
                let c = self.value(*a).dims2().1;
                acc(grads, *a, &mut |t| {
                    for (i, row) in t.data_mut().chunks_mut(c).enumerate() {
                        for o in row {
                            *o += gd[i];
                        }
                    }
                });
            }
            Op::SumRowsSeg(a, seg) => {
                let c = node.value.dims2().1;
                let seg = *seg;
                acc(grads, *a, &mut |t| {
                    for (i, row) in t.data_mut().chunks_mut(c).enumerate() {
                        let base = (i / seg) * c;
                        for (j, o) in row.iter_mut().enumerate() {
                            *o += gd[base + j];
                        }
                    }
                });
            }
            Op::MeanRowsSeg(a, seg) => {
                let c = node.value.dims2().1;
                let seg = *seg;
                let inv = 1.0 / seg as f64;
                acc(grads, *a, &mut |t| {
                    for (i, row) in t.data_mut().chunks_mut(c).enumerate() {
                        let base = (i / seg) * c;
                        for (j, o) in row.iter_mut().enumerate() {
                            *o += gd[base + j] * inv;
                        }
                    }
                });
            }
            Op::MaxRowsSeg(a, arg) => {
                let c = node.value.dims2().1;
                acc(grads, *a, &mut |t| {
                    let td = t.data_mut();
                    for (k, &src_row) in arg.iter().enumerate() {
                        let j = k % c;
                        td[src_row as usize * c + j] += gd[k];
                    }
                });
            }
            Op::ConcatCols(a, b) => {
                let ca = self.value(*a).dims2().1;
                let cb = self.value(*b).dims2().1;
                let ct = ca + cb;
                acc(grads, *a, &mut |t| {
                    for (i, row) in t.data_mut().chunks_mut(ca).enumerate() {
                        for (j, o) in row.iter_mut().enumerate() {
                            *o += gd[i * ct + j];
                        }
                    }
                });
                acc(grads, *b, &mut |t| {
                    for (i, row) in t.data_mut().chunks_mut(cb).enumerate() {
                        for (j, o) in row.iter_mut().enumerate() {
                            *o += gd[i * ct + ca + j];
                        }
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut at = 0usize;
                for &p in parts {
                    let (r, c) = self.value(p).dims2();
                    let chunk = &gd[at..at + r * c];
                    acc(grads, p, &mut |t| add_into(t, chunk, 1.0));
                    at += r * c;
                }
            }
            Op::SliceCols(a, from, to) => {
                let c = self.value(*a).dims2().1;
                let w = to - from;
                let from = *from;
                acc(grads, *a, &mut |t| {
                    for (i, row) in t.data_mut().chunks_mut(c).enumerate() {
                        for j in 0..w {
                            row[from + j] += gd[i * w + j];
                        }
                    }
                });
            }
            Op::GatherRows(a, idx) => {
                let c = self.value(*a).dims2().1;
                acc(grads, *a, &mut |t| {
                    let td = t.data_mut();
                    for (i, &src) in idx.iter().enumerate() {
                        let base = src as usize * c;
                        for j in 0..c {
                            td[base + j] += gd[i * c + j];
                        }
                    }
                });
            }
            Op::Conv2d { x, w, stride, pad } => {
                let xs = self.value(*x).shape().to_vec();
                let ws = self.value(*w).shape().to_vec();
                let ho = node.value.shape()[1];
                let wo = node.value.shape()[2];
                let (xv, wv) = (self.value(*x).data(), self.value(*w).data());
                acc(grads, *x, &mut |t| {
                    kernels::conv2d_grad_x(
                        gd, wv, xs[0], xs[1], xs[2], ws[0], ws[2], ws[3], *stride, *pad, ho, wo,
                        t.data_mut(),
                    );
                });
                acc(grads, *w, &mut |t| {
                    kernels::conv2d_grad_w(
                        xv, gd, xs[0], xs[1], xs[2], ws[0], ws[2], ws[3], *stride, *pad, ho, wo,
                        t.data_mut(),
                    );
                });
            }
            Op::ConvT2d {
                x,
                w,
                stride,
                pad,
                out_hw,
            } => {
                let xs = self.value(*x).shape().to_vec();
                let ws = self.value(*w).shape().to_vec();
                let co = ws[1];
                let (xv, wv) = (self.value(*x).data(), self.value(*w).data());
                acc(grads, *x, &mut |t| {
                    kernels::conv2d_fwd(
                        gd, wv, co, out_hw.0, out_hw.1, ws[0], ws[2], ws[3], *stride, *pad, xs[1],
                        xs[2], t.data_mut(),
                    );
                });
                acc(grads, *w, &mut |t| {
                    kernels::conv2d_grad_w(
                        gd, xv, co, out_hw.0, out_hw.1, ws[0], ws[2], ws[3], *stride, *pad, xs[1],
                        xs[2], t.data_mut(),
                    );
                });
            }
            Op::AddChanBias(x, b) => {
                let xs = self.value(*x).shape().to_vec();
                let hw = xs[1] * xs[2];
                acc(grads, *x, &mut |t| add_into(t, gd, 1.0));
                acc(grads, *b, &mut |t| {
                    for (c, chunk) in gd.chunks(hw).enumerate() {
                        t.data_mut()[c] += chunk.iter().sum::<f64>();
                    }
                });
            }
            Op::Reshape(a) => acc(grads, *a, &mut |t| add_into(t, gd, 1.0)),
            Op::LayerNormRows {
                x,
                scale,
                shift,
                xhat,
                inv_std,
            } => {
                let (r, c) = xhat.dims2();
                let scv = self.value(*scale).data();
                let xh = xhat.data();
                acc(grads, *x, &mut |t| {
                    let td = t.data_mut();
                    for i in 0..r {
                        let grow = &gd[i * c..(i + 1) * c];
                        let xrow = &xh[i * c..(i + 1) * c];
                        let mut gh_mean = 0.0;
                        let mut ghx_mean = 0.0;
                        for j in 0..c {
                            let gh = grow[j] * scv[j];
                            gh_mean += gh;
                            ghx_mean += gh * xrow[j];
                        }
                        gh_mean /= c as f64;
                        ghx_mean /= c as f64;
                        for j in 0..c {
                            let gh = grow[j] * scv[j];
                            td[i * c + j] += (gh - gh_mean - xrow[j] * ghx_mean) * inv_std[i];
                        }
                    }
                });
                acc(grads, *scale, &mut |t| {
                    let td = t.data_mut();
                    for i in 0..r {
                        for j in 0..c {
                            td[j] += gd[i * c + j] * xh[i * c + j];
                        }
                    }
                });
                acc(grads, *shift, &mut |t| {
                    let td = t.data_mut();
                    for i in 0..r {
                        for j in 0..c {
                            td[j] += gd[i * c + j];
                        }
                    }
                });
            }
        }
    }

    /// Gradients for every entry of `store` in key order. Entries the loss
    /// never reached (or never bound) get zero gradients.
    pub fn store_grads(&self, store: &ParamStore) -> Vec<(ParamKey, Tensor)> {
        store
            .keys()
            .map(|key| {
                let g = self
                    .param_memo
                    .get(&(store.id(), key.0))
                    .and_then(|var| self.grad(*var))
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(store.tensor(key).shape()));
                (key, g)
            })
            .collect()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    // ln(1 + e^x), stable for large |x|
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::new(a.shape().to_vec(), data)
}

fn add_into(t: &mut Tensor, g: &[f64], scale: f64) {
    for (o, &x) in t.data_mut().iter_mut().zip(g) {
        *o += x * scale;
    }
}
