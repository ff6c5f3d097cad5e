//! Transformer building blocks on top of [`crate::autodiff`].
//!
//! Layers use pre-normalisation residual blocks. The feed-forward hidden
//! width is `FF_MULT * d` with a GELU non-linearity.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::autodiff::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::Result;

pub const FF_MULT: usize = 2;

#[derive(Debug, Clone)]
pub struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    pub fn new<R: Rng>(ps: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let std = 1.0 / libm::sqrt(fan_in as f64);
        Self {
            w: ps.add_normal(format!("{name}.weight"), fan_in, fan_out, std, rng),
            b: ps.add_const(format!("{name}.bias"), 1, fan_out, 0.0),
        }
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Var {
        let w = g.param(ps, self.w);
        let b = g.param(ps, self.b);
        g.affine(x, w, b)
    }

    pub fn weight(&self) -> ParamId {
        self.w
    }

    pub fn bias(&self) -> ParamId {
        self.b
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    gamma: ParamId,
    beta: ParamId,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: ps.add_const(format!("{name}.gamma"), 1, dim, 1.0),
            beta: ps.add_const(format!("{name}.beta"), 1, dim, 0.0),
        }
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Var {
        let gamma = g.param(ps, self.gamma);
        let beta = g.param(ps, self.beta);
        g.layer_norm(x, gamma, beta)
    }
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng>(ps: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut R) -> Self {
        Self {
            q: Linear::new(ps, &format!("{name}.q"), dim, dim, rng),
            k: Linear::new(ps, &format!("{name}.k"), dim, dim, rng),
            v: Linear::new(ps, &format!("{name}.v"), dim, dim, rng),
            out: Linear::new(ps, &format!("{name}.out"), dim, dim, rng),
            heads,
        }
    }

    /// Queries from `x` (`seqs * tq` rows) attend to `ctx` (`seqs * tk` rows).
    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var, ctx: Var, seqs: usize) -> Result<Var> {
        let q = self.q.forward(g, ps, x);
        let k = self.k.forward(g, ps, ctx);
        let v = self.v.forward(g, ps, ctx);
        let a = g.attention(q, k, v, seqs, self.heads)?;
        Ok(self.out.forward(g, ps, a))
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    up: Linear,
    down: Linear,
}

impl FeedForward {
    pub fn new<R: Rng>(ps: &mut ParamStore, name: &str, dim: usize, rng: &mut R) -> Self {
        Self {
            up: Linear::new(ps, &format!("{name}.up"), dim, FF_MULT * dim, rng),
            down: Linear::new(ps, &format!("{name}.down"), FF_MULT * dim, dim, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Var {
        let h = self.up.forward(g, ps, x);
        let h = g.gelu(h);
        self.down.forward(g, ps, h)
    }
}

#[derive(Debug, Clone)]
pub struct EncoderLayer {
    norm_attn: LayerNorm,
    attn: MultiHeadAttention,
    norm_ff: LayerNorm,
    ff: FeedForward,
}

impl EncoderLayer {
    pub fn new<R: Rng>(ps: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut R) -> Self {
        Self {
            norm_attn: LayerNorm::new(ps, &format!("{name}.norm_attn"), dim),
            attn: MultiHeadAttention::new(ps, &format!("{name}.attn"), dim, heads, rng),
            norm_ff: LayerNorm::new(ps, &format!("{name}.norm_ff"), dim),
            ff: FeedForward::new(ps, &format!("{name}.ff"), dim, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var, seqs: usize) -> Result<Var> {
        let h = self.norm_attn.forward(g, ps, x);
        let a = self.attn.forward(g, ps, h, h, seqs)?;
        let x = g.add(x, a);
        let h = self.norm_ff.forward(g, ps, x);
        let f = self.ff.forward(g, ps, h);
        Ok(g.add(x, f))
    }
}

/// Stack of encoder layers with a final normalisation.
#[derive(Debug, Clone)]
pub struct TransformerEncoder {
    layers: Vec<EncoderLayer>,
    norm: LayerNorm,
}

impl TransformerEncoder {
    pub fn new<R: Rng>(
        ps: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        layers: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            layers: (0..layers)
                .map(|i| EncoderLayer::new(ps, &format!("{name}.layers.{i}"), dim, heads, rng))
                .collect(),
            norm: LayerNorm::new(ps, &format!("{name}.norm"), dim),
        }
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, mut x: Var, seqs: usize) -> Result<Var> {
        for layer in &self.layers {
            x = layer.forward(g, ps, x, seqs)?;
        }
        Ok(self.norm.forward(g, ps, x))
    }
}

#[derive(Debug, Clone)]
pub struct DecoderLayer {
    norm_self: LayerNorm,
    self_attn: MultiHeadAttention,
    norm_cross: LayerNorm,
    cross_attn: MultiHeadAttention,
    norm_ff: LayerNorm,
    ff: FeedForward,
}

impl DecoderLayer {
    pub fn new<R: Rng>(ps: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut R) -> Self {
        Self {
            norm_self: LayerNorm::new(ps, &format!("{name}.norm_self"), dim),
            self_attn: MultiHeadAttention::new(ps, &format!("{name}.self_attn"), dim, heads, rng),
            norm_cross: LayerNorm::new(ps, &format!("{name}.norm_cross"), dim),
            cross_attn: MultiHeadAttention::new(ps, &format!("{name}.cross_attn"), dim, heads, rng),
            norm_ff: LayerNorm::new(ps, &format!("{name}.norm_ff"), dim),
            ff: FeedForward::new(ps, &format!("{name}.ff"), dim, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var, memory: Var, seqs: usize) -> Result<Var> {
        let h = self.norm_self.forward(g, ps, x);
        let a = self.self_attn.forward(g, ps, h, h, seqs)?;
        let x = g.add(x, a);
        let h = self.norm_cross.forward(g, ps, x);
        let c = self.cross_attn.forward(g, ps, h, memory, seqs)?;
        let x = g.add(x, c);
        let h = self.norm_ff.forward(g, ps, x);
        let f = self.ff.forward(g, ps, h);
        Ok(g.add(x, f))
    }
}

#[derive(Debug, Clone)]
pub struct TransformerDecoder {
    layers: Vec<DecoderLayer>,
    norm: LayerNorm,
}

impl TransformerDecoder {
    pub fn new<R: Rng>(
        ps: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        layers: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            layers: (0..layers)
                .map(|i| DecoderLayer::new(ps, &format!("{name}.layers.{i}"), dim, heads, rng))
                .collect(),
            norm: LayerNorm::new(ps, &format!("{name}.norm"), dim),
        }
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, mut x: Var, memory: Var, seqs: usize) -> Result<Var> {
        for layer in &self.layers {
            x = layer.forward(g, ps, x, memory, seqs)?;
        }
        Ok(self.norm.forward(g, ps, x))
    }
}

/// Sinusoidal position codes for positions `offset..offset + len`.
pub fn positional_encoding(len: usize, dim: usize, offset: usize) -> Tensor {
    let mut data = Vec::with_capacity(len * dim);
    for t in offset..offset + len {
        for i in 0..dim {
            let rate = libm::pow(10_000.0, (2 * (i / 2)) as f64 / dim as f64);
            let a = t as f64 / rate;
            data.push(if i % 2 == 0 { libm::sin(a) } else { libm::cos(a) });
        }
    }
    Tensor::new(len, dim, data)
}

/// Tiles `pe` (`[len, d]`) `times` times along rows.
pub fn tile_rows(pe: &Tensor, times: usize) -> Tensor {
    let mut data = Vec::with_capacity(pe.len() * times);
    for _ in 0..times {
        data.extend_from_slice(&pe.data);
    }
    Tensor::new(pe.rows * times, pe.cols, data)
}
