//! Token embedding and the transformer encoder stack.
//!
//! Post-norm residual ordering throughout (attention sublayer, then FFN
//! sublayer, each followed by add + layer norm), GELU activations, learned
//! position embeddings, additive key masking inside every attention softmax.

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::params::{EmbeddingParams, LayerParams};
use crate::rng::RngStream;
use crate::tensor::{concat_cols, embed_lookup, Value, MASK_NEG};

pub const LN_EPS: f64 = 1e-5;

/// Dropout handle for training-mode forwards. Inference passes `None`.
pub struct Dropout<'a> {
    pub rate: f64,
    pub rng: &'a mut RngStream,
}

impl Dropout<'_> {
    /// Inverted dropout: kept units are scaled by 1/(1-rate).
    fn apply(&mut self, v: &Value) -> Value {
        if self.rate <= 0.0 {
            return v.clone();
        }
        let keep = 1.0 - self.rate;
        let mask: Vec<f64> = (0..v.numel())
            .map(|_| {
                if self.rng.uniform() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        let mask = Value::constant(mask, v.shape());
        v.mul(&mask).expect("dropout mask shape matches by construction")
    }
}

fn maybe_drop(v: Value, drop: &mut Option<&mut Dropout<'_>>) -> Value {
    match drop {
        Some(d) => d.apply(&v),
        None => v,
    }
}

/// Padding mask over the fixed sequence length: 1.0 for real tokens, 0.0 for
/// padded positions.
#[derive(Debug, Clone, PartialEq)]
pub struct PadMask(pub Vec<f64>);

impl PadMask {
    pub fn seq_len(&self) -> usize {
        self.0.len()
    }

    pub fn real_indices(&self) -> Vec<usize> {
        self.0
            .iter()
            .enumerate()
            .filter(|(_, &m)| m != 0.0)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn num_real(&self) -> usize {
        self.0.iter().filter(|&&m| m != 0.0).count()
    }

    /// Additive attention bias `[N,N]`: column j is 0 for real tokens and a
    /// large negative number for padding, so softmax assigns padded keys
    /// exactly zero weight.
    pub fn attention_bias(&self) -> Value {
        let n = self.0.len();
        let mut data = vec![0.0; n * n];
        for (j, &m) in self.0.iter().enumerate() {
            if m == 0.0 {
                for i in 0..n {
                    data[i * n + j] = MASK_NEG;
                }
            }
        }
        Value::constant(data, vec![n, n])
    }
}

/// Token + position embedding, layer norm, optional dropout. The input is
/// the unpadded token sequence; it is padded with the reserved pad id to the
/// configured length and the returned mask marks real tokens.
pub fn embed(
    cfg: &ModelConfig,
    emb: &EmbeddingParams,
    token_ids: &[usize],
    mut drop: Option<&mut Dropout<'_>>,
) -> Result<(Value, PadMask)> {
    let n = cfg.max_seq_len;
    if token_ids.is_empty() {
        return Err(Error::AllPadding);
    }
    if token_ids.len() > n {
        return Err(Error::InvalidArgument {
            op: "embed",
            msg: format!("sequence of {} exceeds max_seq_len {n}", token_ids.len()),
        });
    }
    for &id in token_ids {
        if id >= cfg.vocab_size {
            return Err(Error::InvalidArgument {
                op: "embed",
                msg: format!("token id {id} out of range for vocab {}", cfg.vocab_size),
            });
        }
    }
    let mut padded = vec![crate::data::PAD_ID; n];
    padded[..token_ids.len()].copy_from_slice(token_ids);
    let mut mask = vec![0.0; n];
    for m in mask.iter_mut().take(token_ids.len()) {
        *m = 1.0;
    }
    let tok = embed_lookup(&emb.token_table, &padded)?;
    let pos = emb.pos_table.slice_rows(0, n)?;
    let x = tok
        .add(&pos)?
        .layer_norm(&emb.ln_gamma, &emb.ln_beta, LN_EPS)?;
    Ok((maybe_drop(x, &mut drop), PadMask(mask)))
}

/// Multi-head self-attention with additive key masking.
fn attention(
    cfg: &ModelConfig,
    layer: &LayerParams,
    x: &Value,
    mask_bias: &Value,
) -> Result<Value> {
    let hd = cfg.head_dim();
    let q = x.matmul(&layer.wq)?.add_bias(&layer.bq)?;
    let k = x.matmul(&layer.wk)?.add_bias(&layer.bk)?;
    let v = x.matmul(&layer.wv)?.add_bias(&layer.bv)?;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.num_heads);
    for h in 0..cfg.num_heads {
        let qh = q.slice_cols(h * hd, hd)?;
        let kh = k.slice_cols(h * hd, hd)?;
        let vh = v.slice_cols(h * hd, hd)?;
        let scores = qh
            .matmul(&kh.transpose()?)?
            .scale(scale)
            .add(mask_bias)?
            .softmax(1)?;
        heads.push(scores.matmul(&vh)?);
    }
    concat_cols(&heads)?
        .matmul(&layer.wo)?
        .add_bias(&layer.bo)
}

/// One post-norm encoder layer: `LN(x + Attn(x))`, then `LN(h + FFN(h))`.
pub fn encoder_layer_forward(
    cfg: &ModelConfig,
    layer: &LayerParams,
    x: &Value,
    mask: &PadMask,
    mut drop: Option<&mut Dropout<'_>>,
) -> Result<Value> {
    let expected = vec![cfg.max_seq_len, cfg.hidden_dim];
    if x.shape() != expected {
        return Err(Error::ShapeMismatch {
            op: "encoder_layer_forward",
            left: x.shape(),
            right: expected,
        });
    }
    let mask_bias = mask.attention_bias();
    encoder_layer_forward_with_bias(cfg, layer, x, &mask_bias, &mut drop)
}

pub(crate) fn encoder_layer_forward_with_bias(
    cfg: &ModelConfig,
    layer: &LayerParams,
    x: &Value,
    mask_bias: &Value,
    drop: &mut Option<&mut Dropout<'_>>,
) -> Result<Value> {
    let attn_out = maybe_drop(attention(cfg, layer, x, mask_bias)?, drop);
    let h = x
        .add(&attn_out)?
        .layer_norm(&layer.ln1_gamma, &layer.ln1_beta, LN_EPS)?;
    let ffn = h
        .matmul(&layer.w_ffn1)?
        .add_bias(&layer.b_ffn1)?
        .gelu()
        .matmul(&layer.w_ffn2)?
        .add_bias(&layer.b_ffn2)?;
    let ffn = maybe_drop(ffn, drop);
    h.add(&ffn)?
        .layer_norm(&layer.ln2_gamma, &layer.ln2_beta, LN_EPS)
}
