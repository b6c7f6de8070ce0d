//! Reusable network building blocks on top of the graph.

use rand::Rng;

use super::graph::{Graph, Var};
use super::params::{xavier_uniform, ParamKey, ParamStore};
use super::tensor::Tensor;

/// Affine layer: x @ w + b.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamKey,
    pub b: ParamKey,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let w = store.add(&format!("{name}.w"), xavier_uniform(rng, fan_in, fan_out));
        let b = store.add(&format!("{name}.b"), Tensor::zeros(&[fan_out]));
        Linear { w, b }
    }

    /// Zero-initialized variant; used for output heads so predictions start
    /// uniform.
    pub fn zeros(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let w = store.add(&format!("{name}.w"), Tensor::zeros(&[fan_in, fan_out]));
        let b = store.add(&format!("{name}.b"), Tensor::zeros(&[fan_out]));
        Linear { w, b }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        g.linear(x, w, b)
    }

    pub fn forward_frozen(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.frozen_param(store, self.w);
        let b = g.frozen_param(store, self.b);
        g.linear(x, w, b)
    }
}

/// Learned per-feature scale and shift for row-wise layer normalization.
#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub scale: ParamKey,
    pub shift: ParamKey,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let scale = store.add(&format!("{name}.scale"), Tensor::full(&[dim], 1.0));
        let shift = store.add(&format!("{name}.shift"), Tensor::zeros(&[dim]));
        LayerNorm { scale, shift }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let s = g.param(store, self.scale);
        let b = g.param(store, self.shift);
        g.layer_norm_rows(x, s, b)
    }

    pub fn forward_frozen(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let s = g.frozen_param(store, self.scale);
        let b = g.frozen_param(store, self.shift);
        g.layer_norm_rows(x, s, b)
    }
}

/// MLP with SiLU + layer normalization on each hidden layer and a plain
/// affine output. `hidden_layers = 1` gives the two-layer heads used
/// throughout the model.
pub struct Mlp {
    hidden: Vec<(Linear, LayerNorm)>,
    out: Linear,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        hidden_dim: usize,
        fan_out: usize,
        hidden_layers: usize,
        zero_out: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let mut hidden = Vec::new();
        let mut dim = fan_in;
        for i in 0..hidden_layers {
            let lin = Linear::new(store, &format!("{name}.h{i}"), dim, hidden_dim, rng);
            let ln = LayerNorm::new(store, &format!("{name}.h{i}.ln"), hidden_dim);
            hidden.push((lin, ln));
            dim = hidden_dim;
        }
        let out = if zero_out {
            Linear::zeros(store, &format!("{name}.out"), dim, fan_out)
        } else {
            Linear::new(store, &format!("{name}.out"), dim, fan_out, rng)
        };
        Mlp { hidden, out }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        self.forward_inner(g, store, x, false)
    }

    pub fn forward_frozen(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        self.forward_inner(g, store, x, true)
    }

    fn forward_inner(&self, g: &mut Graph, store: &ParamStore, x: Var, frozen: bool) -> Var {
        let mut h = x;
        for (lin, ln) in &self.hidden {
            h = if frozen {
                lin.forward_frozen(g, store, h)
            } else {
                lin.forward(g, store, h)
            };
            h = if frozen {
                ln.forward_frozen(g, store, h)
            } else {
                ln.forward(g, store, h)
            };
            h = g.silu(h);
        }
        if frozen {
            self.out.forward_frozen(g, store, h)
        } else {
            self.out.forward(g, store, h)
        }
    }
}

/// GRU cell with fused gate matrices.
///
/// Gate order is [r | z | n]:
///   r  = sigmoid(x@Wx_r + bx_r + h@Wh_r + bh_r)
///   z  = sigmoid(x@Wx_z + bx_z + h@Wh_z + bh_z)
///   n  = tanh(x@Wx_n + bx_n + r * (h@Wh_n + bh_n))
///   h' = (1 - z) * n + z * h
pub struct GruCell {
    pub wx: ParamKey,
    pub wh: ParamKey,
    pub bx: ParamKey,
    pub bh: ParamKey,
    pub hidden_dim: usize,
}

impl GruCell {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input_dim: usize,
        hidden_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        GruCell {
            wx: store.add(
                &format!("{name}.wx"),
                xavier_uniform(rng, input_dim, 3 * hidden_dim),
            ),
            wh: store.add(
                &format!("{name}.wh"),
                xavier_uniform(rng, hidden_dim, 3 * hidden_dim),
            ),
            bx: store.add(&format!("{name}.bx"), Tensor::zeros(&[3 * hidden_dim])),
            bh: store.add(&format!("{name}.bh"), Tensor::zeros(&[3 * hidden_dim])),
            hidden_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, h: Var) -> Var {
        self.forward_inner(g, store, x, h, false)
    }

    pub fn forward_frozen(&self, g: &mut Graph, store: &ParamStore, x: Var, h: Var) -> Var {
        self.forward_inner(g, store, x, h, true)
    }

    fn forward_inner(&self, g: &mut Graph, store: &ParamStore, x: Var, h: Var, frozen: bool) -> Var {
        let bind = |g: &mut Graph, key| {
            if frozen {
                g.frozen_param(store, key)
            } else {
                g.param(store, key)
            }
        };
        let wx = bind(g, self.wx);
        let wh = bind(g, self.wh);
        let bx = bind(g, self.bx);
        let bh = bind(g, self.bh);
        let d = self.hidden_dim;

        let xg = g.matmul(x, wx);
        let xg = g.add_rows(xg, bx);
        let hg = g.matmul(h, wh);
        let hg = g.add_rows(hg, bh);

        let xr = g.slice_cols(xg, 0, d);
        let xz = g.slice_cols(xg, d, 2 * d);
        let xn = g.slice_cols(xg, 2 * d, 3 * d);
        let hr = g.slice_cols(hg, 0, d);
        let hz = g.slice_cols(hg, d, 2 * d);
        let hn = g.slice_cols(hg, 2 * d, 3 * d);

        let r = g.add(xr, hr);
        let r = g.sigmoid(r);
        let z = g.add(xz, hz);
        let z = g.sigmoid(z);
        let rn = g.mul(r, hn);
        let n = g.add(xn, rn);
        let n = g.tanh(n);

        // h' = (1 - z) * n + z * h
        let zn = g.mul(z, n);
        let n_minus_zn = g.sub(n, zn);
        let zh = g.mul(z, h);
        g.add(n_minus_zn, zh)
    }
}

/// Plain-slice GRU cell evaluation with explicit weights, mirroring
/// [`GruCell::forward`]. Used by tests as an independent route and handy for
/// inference on raw vectors.
pub fn gru_cell(
    input: &[f64],
    hidden: &[f64],
    wx: &Tensor,
    wh: &Tensor,
    bx: &[f64],
    bh: &[f64],
) -> Result<Vec<f64>, super::DiffError> {
    let d = hidden.len();
    let (xi, xo) = wx.dims2();
    let (hi, ho) = wh.dims2();
    if xi != input.len() || xo != 3 * d || hi != d || ho != 3 * d || bx.len() != 3 * d || bh.len() != 3 * d
    {
        return Err(super::DiffError::DimMismatch {
            what: "gru_cell weights do not match input/hidden dims",
        });
    }
    let mut xg = vec![0.0; 3 * d];
    let mut hg = vec![0.0; 3 * d];
    for j in 0..3 * d {
        let mut a = bx[j];
        for (i, &x) in input.iter().enumerate() {
            a += x * wx.data()[i * 3 * d + j];
        }
        xg[j] = a;
        let mut b = bh[j];
        for (i, &h) in hidden.iter().enumerate() {
            b += h * wh.data()[i * 3 * d + j];
        }
        hg[j] = b;
    }
    let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
    let mut out = vec![0.0; d];
    for j in 0..d {
        let r = sig(xg[j] + hg[j]);
        let z = sig(xg[d + j] + hg[d + j]);
        let n = (xg[2 * d + j] + r * hg[2 * d + j]).tanh();
        out[j] = (1.0 - z) * n + z * hidden[j];
    }
    Ok(out)
}
