//! Parameter initialization and the transformer sub-blocks shared by both model families.

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::numcore::rng::Rng;
use crate::numcore::{Graph, ParamStore, Scalar, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub w: usize,
    pub b: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Norm {
    pub gain: usize,
    pub bias: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

/// Registers freshly initialized parameters into a store.
pub struct Init<'a, T: Scalar> {
    pub store: &'a mut ParamStore<T>,
    pub rng: Rng,
}

impl<T: Scalar> Init<'_, T> {
    fn uniform(&mut self, shape: &[usize], bound: f64) -> Tensor<T> {
        let rng = &mut self.rng;
        Tensor::from_fn(shape, |_| T::lit(rng.random_range(-bound..bound)))
    }

    /// Xavier-uniform weight `[d_in, d_out]` and zero bias.
    pub fn linear(&mut self, name: &str, d_in: usize, d_out: usize) -> Linear {
        let bound = (6.0 / (d_in + d_out) as f64).sqrt();
        let w = self.uniform(&[d_in, d_out], bound);
        Linear {
            w: self.store.add(format!("{name}.weight"), w),
            b: self.store.add(format!("{name}.bias"), Tensor::zeros(&[d_out])),
        }
    }

    pub fn norm(&mut self, name: &str, d: usize) -> Norm {
        Norm {
            gain: self.store.add(format!("{name}.gain"), Tensor::full(&[d], T::one())),
            bias: self.store.add(format!("{name}.bias"), Tensor::zeros(&[d])),
        }
    }

    /// Embedding table with entries of standard deviation `d^-0.5`.
    pub fn embedding(&mut self, name: &str, rows: usize, d: usize) -> usize {
        let bound = 3f64.sqrt() / (d as f64).sqrt();
        let t = self.uniform(&[rows, d], bound);
        self.store.add(name, t)
    }

    pub fn attention(&mut self, name: &str, d: usize) -> Attention {
        Attention {
            q: self.linear(&format!("{name}.q"), d, d),
            k: self.linear(&format!("{name}.k"), d, d),
            v: self.linear(&format!("{name}.v"), d, d),
            out: self.linear(&format!("{name}.out"), d, d),
        }
    }

    pub fn feed_forward(&mut self, name: &str, d: usize, d_ff: usize) -> FeedForward {
        FeedForward {
            up: self.linear(&format!("{name}.up"), d, d_ff),
            down: self.linear(&format!("{name}.down"), d_ff, d),
        }
    }
}

pub fn linear<T: Scalar>(g: &mut Graph<T>, pv: &[Var], p: Linear, x: Var) -> Result<Var> {
    let y = g.matmul(x, pv[p.w], false)?;
    g.add(y, pv[p.b])
}

pub fn norm<T: Scalar>(g: &mut Graph<T>, pv: &[Var], p: Norm, x: Var) -> Result<Var> {
    g.layer_norm(x, pv[p.gain], pv[p.bias])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Gelu,
}

pub fn feed_forward<T: Scalar>(
    g: &mut Graph<T>,
    pv: &[Var],
    p: FeedForward,
    x: Var,
    act: Activation,
    dropout: f64,
) -> Result<Var> {
    let h = linear(g, pv, p.up, x)?;
    let h = match act {
        Activation::Relu => g.relu(h),
        Activation::Gelu => g.gelu(h),
    };
    let h = g.dropout(h, dropout)?;
    linear(g, pv, p.down, h)
}

/// Splits `[B, L, d]` into heads `[B, H, L, d/H]`.
fn split_heads<T: Scalar>(g: &mut Graph<T>, x: Var, heads: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (b, l, d) = (s[0], s[1], s[2]);
    let r = g.reshape(x, &[b, l, heads, d / heads])?;
    g.permute(r, &[0, 2, 1, 3])
}

/// Scaled dot-product attention over `heads` heads.
///
/// `query` is `[B, Lq, d]`, `key` and `value` are `[B, Lk, d]`. `mask` is an additive mask
/// (0 or -inf) broadcastable to `[B, H, Lq, Lk]`.
#[allow(clippy::too_many_arguments)]
pub fn multi_head_attention<T: Scalar>(
    g: &mut Graph<T>,
    pv: &[Var],
    p: Attention,
    query: Var,
    key: Var,
    value: Var,
    mask: Option<&Tensor<T>>,
    heads: usize,
    dropout: f64,
) -> Result<Var> {
    let qs = g.shape(query).to_vec();
    let ks = g.shape(key).to_vec();
    if qs.len() != 3 || ks.len() != 3 || qs[0] != ks[0] || qs[2] != ks[2] || g.shape(value) != ks.as_slice() {
        return Err(Error::shape(
            "multi_head_attention",
            format!("q {qs:?}, k {ks:?}, v {:?}", g.shape(value)),
        ));
    }
    let d = qs[2];
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(Error::shape("multi_head_attention", format!("d_model {d} not divisible by {heads} heads")));
    }
    let (b, lq) = (qs[0], qs[1]);
    let q = linear(g, pv, p.q, query)?;
    let k = linear(g, pv, p.k, key)?;
    let v = linear(g, pv, p.v, value)?;
    let q = split_heads(g, q, heads)?;
    let k = split_heads(g, k, heads)?;
    let v = split_heads(g, v, heads)?;
    let scores = g.batch_matmul(q, k, true)?;
    let scores = g.scale(scores, T::lit(1.0 / ((d / heads) as f64).sqrt()));
    let scores = match mask {
        Some(m) => g.add_const(scores, m)?,
        None => scores,
    };
    let weights = g.softmax(scores)?;
    let weights = g.dropout(weights, dropout)?;
    let ctx = g.batch_matmul(weights, v, false)?;
    let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = g.reshape(ctx, &[b, lq, d])?;
    linear(g, pv, p.out, ctx)
}

/// Additive `[B, 1, 1, L]` mask hiding keys at or beyond each row's length.
pub fn key_padding_mask<T: Scalar>(lengths: &[usize], l: usize) -> Tensor<T> {
    let b = lengths.len();
    Tensor::from_fn(&[b, 1, 1, l], |i| {
        if i % l < lengths[i / l] {
            T::zero()
        } else {
            T::neg_infinity()
        }
    })
}

/// Additive `[B, 1, 1, L]` mask from an explicit visibility matrix.
pub fn key_visibility_mask<T: Scalar>(visible: &[bool], b: usize, l: usize) -> Tensor<T> {
    Tensor::from_fn(&[b, 1, 1, l], |i| if visible[i] { T::zero() } else { T::neg_infinity() })
}

/// Additive `[B, 1, L, L]` mask: causal and hiding padded keys.
pub fn causal_mask<T: Scalar>(lengths: &[usize], l: usize) -> Tensor<T> {
    let b = lengths.len();
    Tensor::from_fn(&[b, 1, l, l], |i| {
        let row = i / l % l;
        let col = i % l;
        let len = lengths[i / (l * l)];
        if col <= row && col < len.max(1) {
            T::zero()
        } else {
            T::neg_infinity()
        }
    })
}

/// Sinusoidal position table `[max_len, d]`.
pub fn sinusoidal_positions<T: Scalar>(max_len: usize, d: usize) -> Tensor<T> {
    Tensor::from_fn(&[max_len, d], |i| {
        let (pos, j) = ((i / d) as f64, i % d);
        let freq = 1.0 / 10000f64.powf((2 * (j / 2)) as f64 / d as f64);
        T::lit(if j % 2 == 0 { (pos * freq).sin() } else { (pos * freq).cos() })
    })
}

/// Pre-norm self-attention block: `x + attn(norm(x))`, then `x + ffn(norm(x))`.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderBlock {
    pub norm1: Norm,
    pub attn: Attention,
    pub norm2: Norm,
    pub ffn: FeedForward,
}

impl EncoderBlock {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, name: &str, d: usize, d_ff: usize) -> Self {
        EncoderBlock {
            norm1: init.norm(&format!("{name}.norm1"), d),
            attn: init.attention(&format!("{name}.attn"), d),
            norm2: init.norm(&format!("{name}.norm2"), d),
            ffn: init.feed_forward(&format!("{name}.ffn"), d, d_ff),
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        pv: &[Var],
        x: Var,
        mask: &Tensor<T>,
        heads: usize,
        dropout: f64,
        act: Activation,
    ) -> Result<Var> {
        let h = norm(g, pv, self.norm1, x)?;
        let h = multi_head_attention(g, pv, self.attn, h, h, h, Some(mask), heads, dropout)?;
        let h = g.dropout(h, dropout)?;
        let x = g.add(x, h)?;
        let h = norm(g, pv, self.norm2, x)?;
        let h = feed_forward(g, pv, self.ffn, h, act, dropout)?;
        let h = g.dropout(h, dropout)?;
        g.add(x, h)
    }
}
