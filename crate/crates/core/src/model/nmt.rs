use crate::corpus::{PaddedBatch, TokenizedPair, BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::model::layers::{
    causal_mask, feed_forward, key_padding_mask, multi_head_attention, norm, sinusoidal_positions, Activation,
    Attention, EncoderBlock, FeedForward, Init, Norm,
};
use crate::model::TransformerConfig;
use crate::numcore::{rng, Graph, ParamStore, Scalar, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
struct DecoderLayer {
    norm1: Norm,
    self_attn: Attention,
    norm2: Norm,
    cross_attn: Attention,
    norm3: Norm,
    ffn: FeedForward,
}

/// Teacher-forcing view of a batch: `x EOS` on the source side, `BOS y` as decoder input and
/// `y EOS` as labels, all PAD-padded and row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NmtInputs {
    pub batch: usize,
    pub src_width: usize,
    pub tgt_width: usize,
    pub src_ids: Vec<usize>,
    pub src_len: Vec<usize>,
    pub tgt_in: Vec<usize>,
    pub tgt_out: Vec<usize>,
    pub tgt_len: Vec<usize>,
}

impl NmtInputs {
    pub fn from_rows<'a>(rows: impl IntoIterator<Item = (&'a [usize], &'a [usize])>) -> Self {
        let rows: Vec<_> = rows.into_iter().collect();
        let batch = rows.len();
        let src_width = rows.iter().map(|(x, _)| x.len() + 1).max().unwrap_or(1);
        let tgt_width = rows.iter().map(|(_, y)| y.len() + 1).max().unwrap_or(1);
        let mut src_ids = vec![PAD; batch * src_width];
        let mut tgt_in = vec![PAD; batch * tgt_width];
        let mut tgt_out = vec![PAD; batch * tgt_width];
        for (r, (x, y)) in rows.iter().enumerate() {
            let s = &mut src_ids[r * src_width..];
            s[..x.len()].copy_from_slice(x);
            s[x.len()] = EOS;
            let ti = &mut tgt_in[r * tgt_width..];
            ti[0] = BOS;
            ti[1..=y.len()].copy_from_slice(y);
            let to = &mut tgt_out[r * tgt_width..];
            to[..y.len()].copy_from_slice(y);
            to[y.len()] = EOS;
        }
        NmtInputs {
            batch,
            src_width,
            tgt_width,
            src_ids,
            src_len: rows.iter().map(|(x, _)| x.len() + 1).collect(),
            tgt_in,
            tgt_out,
            tgt_len: rows.iter().map(|(_, y)| y.len() + 1).collect(),
        }
    }

    pub fn from_batch(b: &PaddedBatch) -> Self {
        Self::from_rows((0..b.size()).map(|r| (b.x_row(r), b.y_row(r))))
    }

    pub fn from_pairs(pairs: &[TokenizedPair]) -> Self {
        Self::from_rows(pairs.iter().map(|p| (p.x.as_slice(), p.y.as_slice())))
    }
}

pub struct NmtOutput {
    pub loss: Var,
    pub logits: Var,
}

/// Encoder-decoder transformer with one embedding matrix shared by source, target and the
/// output projection.
#[derive(Clone, Debug)]
pub struct NmtModel<T: Scalar> {
    pub config: TransformerConfig,
    pub vocab_size: usize,
    pub params: ParamStore<T>,
    embed: usize,
    encoder: Vec<EncoderBlock>,
    enc_norm: Norm,
    decoder: Vec<DecoderLayer>,
    dec_norm: Norm,
    positions: Tensor<T>,
}

impl<T: Scalar> NmtModel<T> {
    pub fn new(config: TransformerConfig, vocab_size: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let mut params = ParamStore::new();
        let mut init = Init {
            store: &mut params,
            rng: rng::rng(seed),
        };
        let embed = init.embedding("embed", vocab_size, d);
        let encoder = (0..config.layers)
            .map(|i| EncoderBlock::new(&mut init, &format!("enc.{i}"), d, config.d_ff))
            .collect();
        let enc_norm = init.norm("enc.norm", d);
        let decoder = (0..config.layers)
            .map(|i| DecoderLayer {
                norm1: init.norm(&format!("dec.{i}.norm1"), d),
                self_attn: init.attention(&format!("dec.{i}.self_attn"), d),
                norm2: init.norm(&format!("dec.{i}.norm2"), d),
                cross_attn: init.attention(&format!("dec.{i}.cross_attn"), d),
                norm3: init.norm(&format!("dec.{i}.norm3"), d),
                ffn: init.feed_forward(&format!("dec.{i}.ffn"), d, config.d_ff),
            })
            .collect();
        let dec_norm = init.norm("dec.norm", d);
        Ok(NmtModel {
            positions: sinusoidal_positions(config.max_len, d),
            config,
            vocab_size,
            params,
            embed,
            encoder,
            enc_norm,
            decoder,
            dec_norm,
        })
    }

    /// Closed-form parameter count for a configuration.
    pub fn expected_param_count(c: &TransformerConfig, vocab_size: usize) -> usize {
        let enc = 2 * c.norm_params() + c.attention_params() + c.ffn_params();
        let dec = 3 * c.norm_params() + 2 * c.attention_params() + c.ffn_params();
        vocab_size * c.d_model + c.layers * (enc + dec) + 2 * c.norm_params()
    }

    /// Slot of the shared embedding matrix in `params`.
    pub fn embedding_slot(&self) -> usize {
        self.embed
    }

    pub fn embedding(&self) -> &Tensor<T> {
        self.params.tensor(self.embed)
    }

    /// Raw embedding rows `[b, l, d]` for row-major `ids`.
    pub fn embed_tokens(&self, g: &mut Graph<T>, pv: &[Var], ids: &[usize], b: usize, l: usize) -> Result<Var> {
        g.gather(pv[self.embed], ids, &[b, l])
    }

    /// Scales raw embeddings, adds positions, applies dropout.
    fn prepare(&self, g: &mut Graph<T>, emb: Var) -> Result<Var> {
        let s = g.shape(emb).to_vec();
        let l = s[1];
        if l > self.config.max_len {
            return Err(Error::shape("nmt", format!("length {l} exceeds max_len {}", self.config.max_len)));
        }
        let d = self.config.d_model;
        let scaled = g.scale(emb, T::lit((d as f64).sqrt()));
        let pos = Tensor::new(&[l, d], self.positions.data()[..l * d].to_vec())?;
        let x = g.add_const(scaled, &pos)?;
        g.dropout(x, self.config.dropout)
    }

    /// Encoder memory `[B, Ls, d]` from raw source embeddings.
    pub fn encode(&self, g: &mut Graph<T>, pv: &[Var], src_emb: Var, src_len: &[usize]) -> Result<Var> {
        let p = self.config.dropout;
        let ls = g.shape(src_emb)[1];
        let mask = key_padding_mask::<T>(src_len, ls);
        let mut x = self.prepare(g, src_emb)?;
        for layer in &self.encoder {
            x = layer.forward(g, pv, x, &mask, self.config.heads, p, Activation::Relu)?;
        }
        norm(g, pv, self.enc_norm, x)
    }

    /// Output logits `[B, Lt, V]` from raw decoder-input embeddings and encoder memory.
    pub fn decode(
        &self,
        g: &mut Graph<T>,
        pv: &[Var],
        tgt_emb: Var,
        tgt_len: &[usize],
        memory: Var,
        src_len: &[usize],
    ) -> Result<Var> {
        let p = self.config.dropout;
        let lt = g.shape(tgt_emb)[1];
        let ls = g.shape(memory)[1];
        let self_mask = causal_mask::<T>(tgt_len, lt);
        let cross_mask = key_padding_mask::<T>(src_len, ls);
        let heads = self.config.heads;
        let mut x = self.prepare(g, tgt_emb)?;
        for layer in &self.decoder {
            let h = norm(g, pv, layer.norm1, x)?;
            let h = multi_head_attention(g, pv, layer.self_attn, h, h, h, Some(&self_mask), heads, p)?;
            let h = g.dropout(h, p)?;
            x = g.add(x, h)?;
            let h = norm(g, pv, layer.norm2, x)?;
            let h = multi_head_attention(g, pv, layer.cross_attn, h, memory, memory, Some(&cross_mask), heads, p)?;
            let h = g.dropout(h, p)?;
            x = g.add(x, h)?;
            let h = norm(g, pv, layer.norm3, x)?;
            let h = feed_forward(g, pv, layer.ffn, h, Activation::Relu, p)?;
            let h = g.dropout(h, p)?;
            x = g.add(x, h)?;
        }
        let x = norm(g, pv, self.dec_norm, x)?;
        g.matmul(x, pv[self.embed], true)
    }

    /// Teacher-forced loss and logits. Overrides replace the raw embedding tensors of the
    /// source (`[B, Ls, d]`) or decoder input (`[B, Lt, d]`); labels are never affected.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        pv: &[Var],
        inputs: &NmtInputs,
        src_override: Option<Var>,
        tgt_override: Option<Var>,
        label_smoothing: f64,
    ) -> Result<NmtOutput> {
        let (b, ls, lt, d) = (inputs.batch, inputs.src_width, inputs.tgt_width, self.config.d_model);
        let src_emb = match src_override {
            Some(v) => {
                if g.shape(v) != [b, ls, d] {
                    return Err(Error::shape("nmt_forward", format!("source override {:?} vs [{b}, {ls}, {d}]", g.shape(v))));
                }
                v
            }
            None => self.embed_tokens(g, pv, &inputs.src_ids, b, ls)?,
        };
        let tgt_emb = match tgt_override {
            Some(v) => {
                if g.shape(v) != [b, lt, d] {
                    return Err(Error::shape("nmt_forward", format!("target override {:?} vs [{b}, {lt}, {d}]", g.shape(v))));
                }
                v
            }
            None => self.embed_tokens(g, pv, &inputs.tgt_in, b, lt)?,
        };
        let memory = self.encode(g, pv, src_emb, &inputs.src_len)?;
        let logits = self.decode(g, pv, tgt_emb, &inputs.tgt_len, memory, &inputs.src_len)?;
        let loss = g.cross_entropy(logits, &inputs.tgt_out, label_smoothing, PAD)?;
        Ok(NmtOutput { loss, logits })
    }
}
