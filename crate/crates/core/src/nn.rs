//! Layers built on the tape: linear maps, layer norm, multi-head attention
//! and pre-norm transformer encoder/decoder layers.
//!
//! All layers use the pre-norm residual form `x + f(norm(x))` with no final
//! normalization, so zeroing a layer's output projections turns it into the
//! identity.

use rand::Rng;

use crate::autograd::{ParamId, ParamStore, Tape, Var};
use crate::tensor::Mat;

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let bound = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let weight = store.register(format!("{name}.weight"), Mat::uniform(in_dim, out_dim, bound, rng));
        let bias = bias.then(|| store.register(format!("{name}.bias"), Mat::zeros(1, out_dim)));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, t: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let w = t.param(store, self.weight);
        let y = t.matmul(x, w);
        match self.bias {
            Some(b) => {
                let b = t.param(store, b);
                t.add_row(y, b)
            }
            None => y,
        }
    }

    /// Sets weight and bias to zero.
    pub fn zero(&self, store: &mut ParamStore) {
        store.get_mut(self.weight).scale_assign(0.0);
        if let Some(b) = self.bias {
            store.get_mut(b).scale_assign(0.0);
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.register(format!("{name}.gamma"), Mat::filled(1, dim, 1.0)),
            beta: store.register(format!("{name}.beta"), Mat::zeros(1, dim)),
        }
    }

    pub fn forward(&self, t: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let g = t.param(store, self.gamma);
        let b = t.param(store, self.beta);
        t.layer_norm(x, g, b, LN_EPS)
    }
}

/// Two-layer perceptron with ReLU (or GELU) between the layers.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub gelu: bool,
}

impl Mlp {
    /// `dims` lists every width including input and output.
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dims: &[usize], rng: &mut R) -> Self {
        assert!(dims.len() >= 2);
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], true, rng))
            .collect();
        Self { layers, gelu: false }
    }

    pub fn forward(&self, t: &mut Tape, store: &ParamStore, mut x: Var) -> Var {
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(t, store, x);
            if i < last {
                x = if self.gelu { t.gelu(x) } else { t.relu(x) };
            }
        }
        x
    }
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut R) -> Self {
        assert!(dim % heads == 0, "width {dim} not divisible by {heads} heads");
        Self {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, true, rng),
            k: Linear::new(store, &format!("{name}.k"), dim, dim, true, rng),
            v: Linear::new(store, &format!("{name}.v"), dim, dim, true, rng),
            out: Linear::new(store, &format!("{name}.out"), dim, dim, true, rng),
            heads,
            dim,
        }
    }

    /// Scaled dot-product attention of `queries` over `context`. `mask` is an
    /// additive `Lq×Lk` constant (large negative entries block attention).
    pub fn forward(
        &self,
        t: &mut Tape,
        store: &ParamStore,
        queries: Var,
        context: Var,
        mask: Option<Var>,
    ) -> Var {
        let q = self.q.forward(t, store, queries);
        let k = self.k.forward(t, store, context);
        let v = self.v.forward(t, store, context);
        let dh = self.dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = t.slice_cols(q, h * dh, dh);
            let kh = t.slice_cols(k, h * dh, dh);
            let vh = t.slice_cols(v, h * dh, dh);
            let s = t.matmul_t(qh, kh);
            let mut s = t.scale(s, scale);
            if let Some(m) = mask {
                s = t.add(s, m);
            }
            let p = t.softmax_rows(s);
            outs.push(t.matmul(p, vh));
        }
        let cat = if outs.len() == 1 {
            outs[0]
        } else {
            t.concat_cols(&outs)
        };
        self.out.forward(t, store, cat)
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            up: Linear::new(store, &format!("{name}.up"), dim, hidden, true, rng),
            down: Linear::new(store, &format!("{name}.down"), hidden, dim, true, rng),
        }
    }

    pub fn forward(&self, t: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let h = self.up.forward(t, store, x);
        let h = t.gelu(h);
        self.down.forward(t, store, h)
    }
}

/// Pre-norm self-attention + feed-forward block.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub norm1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub ffn: FeedForward,
}

impl EncoderLayer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        ffn_dim: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, heads, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), dim, ffn_dim, rng),
        }
    }

    pub fn forward(&self, t: &mut Tape, store: &ParamStore, x: Var, mask: Option<Var>) -> Var {
        let n = self.norm1.forward(t, store, x);
        let a = self.attn.forward(t, store, n, n, mask);
        let x = t.add(x, a);
        let n = self.norm2.forward(t, store, x);
        let f = self.ffn.forward(t, store, n);
        t.add(x, f)
    }

    /// Zeroes both residual branches (attention output and FFN down-projection).
    pub fn zero_residual_branches(&self, store: &mut ParamStore) {
        self.attn.out.zero(store);
        self.ffn.down.zero(store);
    }
}

/// Pre-norm decoder block: self-attention over the queries, cross-attention
/// into a memory sequence, then feed-forward.
#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub norm_self: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub norm_cross: LayerNorm,
    pub norm_memory: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub norm_ffn: LayerNorm,
    pub ffn: FeedForward,
}

impl DecoderLayer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        ffn_dim: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            norm_self: LayerNorm::new(store, &format!("{name}.norm_self"), dim),
            self_attn: MultiHeadAttention::new(store, &format!("{name}.self_attn"), dim, heads, rng),
            norm_cross: LayerNorm::new(store, &format!("{name}.norm_cross"), dim),
            norm_memory: LayerNorm::new(store, &format!("{name}.norm_memory"), dim),
            cross_attn: MultiHeadAttention::new(store, &format!("{name}.cross_attn"), dim, heads, rng),
            norm_ffn: LayerNorm::new(store, &format!("{name}.norm_ffn"), dim),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), dim, ffn_dim, rng),
        }
    }

    pub fn forward(&self, t: &mut Tape, store: &ParamStore, x: Var, memory: Var) -> Var {
        let n = self.norm_self.forward(t, store, x);
        let a = self.self_attn.forward(t, store, n, n, None);
        let x = t.add(x, a);
        let n = self.norm_cross.forward(t, store, x);
        let m = self.norm_memory.forward(t, store, memory);
        let c = self.cross_attn.forward(t, store, n, m, None);
        let x = t.add(x, c);
        let n = self.norm_ffn.forward(t, store, x);
        let f = self.ffn.forward(t, store, n);
        t.add(x, f)
    }

    pub fn zero_residual_branches(&self, store: &mut ParamStore) {
        self.self_attn.out.zero(store);
        self.cross_attn.out.zero(store);
        self.ffn.down.zero(store);
    }
}

/// Fixed sinusoidal position table, `len × dim`.
pub fn sinusoidal_positions(len: usize, dim: usize) -> Mat {
    let mut m = Mat::zeros(len, dim);
    for pos in 0..len {
        for i in 0..dim / 2 {
            let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / dim as f64);
            m[(pos, 2 * i)] = (pos as f64 * freq).sin();
            m[(pos, 2 * i + 1)] = (pos as f64 * freq).cos();
        }
    }
    m
}

/// Additive causal mask: position `i` may attend to `j <= i`.
pub fn causal_mask(len: usize) -> Mat {
    let mut m = Mat::zeros(len, len);
    for i in 0..len {
        for j in i + 1..len {
            m[(i, j)] = -1e9;
        }
    }
    m
}
