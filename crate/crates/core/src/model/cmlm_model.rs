use crate::error::{Error, Result};
use crate::model::layers::{key_visibility_mask, linear, norm, Activation, EncoderBlock, Init, Linear, Norm};
use crate::model::TransformerConfig;
use crate::numcore::{rng, Graph, ParamStore, Scalar, Var};

/// Fully bidirectional encoder with token, segment and learned position embeddings and a
/// tied LM head over the joint vocabulary.
#[derive(Clone, Debug)]
pub struct CmlmModel<T: Scalar> {
    pub config: TransformerConfig,
    pub vocab_size: usize,
    pub params: ParamStore<T>,
    tokens: usize,
    segments: usize,
    positions: usize,
    embed_norm: Norm,
    layers: Vec<EncoderBlock>,
    final_norm: Norm,
    head_dense: Linear,
    head_norm: Norm,
    head_bias: usize,
}

/// Number of segment types: 0 for the source half, 1 for the target half.
pub const NUM_SEGMENTS: usize = 2;

impl<T: Scalar> CmlmModel<T> {
    pub fn new(config: TransformerConfig, vocab_size: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let mut params = ParamStore::new();
        let mut init = Init {
            store: &mut params,
            rng: rng::rng(seed),
        };
        let tokens = init.embedding("tokens", vocab_size, d);
        let segments = init.embedding("segments", NUM_SEGMENTS, d);
        let positions = init.embedding("positions", config.max_len, d);
        let embed_norm = init.norm("embed_norm", d);
        let layers = (0..config.layers)
            .map(|i| EncoderBlock::new(&mut init, &format!("layer.{i}"), d, config.d_ff))
            .collect();
        let final_norm = init.norm("final_norm", d);
        let head_dense = init.linear("head.dense", d, d);
        let head_norm = init.norm("head.norm", d);
        let head_bias = params.add("head.bias", crate::numcore::Tensor::zeros(&[vocab_size]));
        Ok(CmlmModel {
            config,
            vocab_size,
            params,
            tokens,
            segments,
            positions,
            embed_norm,
            layers,
            final_norm,
            head_dense,
            head_norm,
            head_bias,
        })
    }

    pub fn expected_param_count(c: &TransformerConfig, vocab_size: usize) -> usize {
        let d = c.d_model;
        let block = 2 * c.norm_params() + c.attention_params() + c.ffn_params();
        vocab_size * d
            + NUM_SEGMENTS * d
            + c.max_len * d
            + c.norm_params()
            + c.layers * block
            + c.norm_params()
            + (d * d + d)
            + c.norm_params()
            + vocab_size
    }

    /// Contextual states `[B, L, d]`. `visible` marks the non-padding positions (row-major B x L).
    pub fn hidden(
        &self,
        g: &mut Graph<T>,
        pv: &[Var],
        ids: &[usize],
        segments: &[usize],
        visible: &[bool],
        b: usize,
        l: usize,
    ) -> Result<Var> {
        if l > self.config.max_len {
            return Err(Error::shape("cmlm_forward", format!("length {l} exceeds max_len {}", self.config.max_len)));
        }
        if ids.len() != b * l || segments.len() != b * l || visible.len() != b * l {
            return Err(Error::shape("cmlm_forward", format!("inputs do not match [{b}, {l}]")));
        }
        if segments.iter().any(|&s| s >= NUM_SEGMENTS) {
            return Err(Error::InvalidArgument("segment ids must be 0 or 1".into()));
        }
        let p = self.config.dropout;
        let tok = g.gather(pv[self.tokens], ids, &[b, l])?;
        let seg = g.gather(pv[self.segments], segments, &[b, l])?;
        let pos_ids: Vec<usize> = (0..l).collect();
        let pos = g.gather(pv[self.positions], &pos_ids, &[l])?;
        let x = g.add(tok, seg)?;
        let x = g.add(x, pos)?;
        let x = norm(g, pv, self.embed_norm, x)?;
        let mut x = g.dropout(x, p)?;
        let mask = key_visibility_mask::<T>(visible, b, l);
        for layer in &self.layers {
            x = layer.forward(g, pv, x, &mask, self.config.heads, p, Activation::Gelu)?;
        }
        norm(g, pv, self.final_norm, x)
    }

    /// Vocabulary logits for hidden states `[..., d]`.
    pub fn lm_head(&self, g: &mut Graph<T>, pv: &[Var], hidden: Var) -> Result<Var> {
        let h = linear(g, pv, self.head_dense, hidden)?;
        let h = g.gelu(h);
        let h = norm(g, pv, self.head_norm, h)?;
        let logits = g.matmul(h, pv[self.tokens], true)?;
        g.add(logits, pv[self.head_bias])
    }

    /// Logits `[B, L, V]` at every position.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        pv: &[Var],
        ids: &[usize],
        segments: &[usize],
        visible: &[bool],
        b: usize,
        l: usize,
    ) -> Result<Var> {
        let h = self.hidden(g, pv, ids, segments, visible, b, l)?;
        self.lm_head(g, pv, h)
    }

    /// Logits `[n, V]` only at the flat positions `rows` (indices into B x L).
    #[allow(clippy::too_many_arguments)]
    pub fn forward_at(
        &self,
        g: &mut Graph<T>,
        pv: &[Var],
        ids: &[usize],
        segments: &[usize],
        visible: &[bool],
        b: usize,
        l: usize,
        rows: &[usize],
    ) -> Result<Var> {
        let h = self.hidden(g, pv, ids, segments, visible, b, l)?;
        let flat = g.reshape(h, &[b * l, self.config.d_model])?;
        let picked = g.gather(flat, rows, &[rows.len()])?;
        self.lm_head(g, pv, picked)
    }
}
