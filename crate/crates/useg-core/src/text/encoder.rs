//! Contextual caption encoder: token plus learned positional embeddings,
//! a stack of pre-norm single-head attention blocks, and a masked mean
//! pool over the real tokens.
//!
//! Padded positions are inert end to end: the attention bias drives their
//! key weights to exact zero (the biased scores underflow `exp`), and the
//! pooling weights are zero on padded rows, so output and gradients are
//! bitwise invariant to the amount of trailing padding.

use rand::Rng;

use crate::tensor::{init, Elem, ParameterStore, Tape, Tensor, Var};

use super::{Result, TextError, TokenSequence};

/// Epsilon shared by every layer norm in the tower.
const LN_EPS: f64 = 1e-5;
/// Additive score bias that removes padded keys from attention.
const MASK_BIAS: f64 = -1e4;
/// Feed-forward hidden width as a multiple of the embedding width.
const FFN_MULT: usize = 2;
/// Std of the Gaussian init for embeddings and projection weights.
const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct TextConfig {
    pub vocab_size: usize,
    /// Fixed token count per caption, padding included.
    pub seq_len: usize,
    /// Embedding width, equal to the pooled output width.
    pub dim: usize,
    /// Number of attention blocks.
    pub blocks: usize,
}

impl TextConfig {
    /// Desk-scale defaults: 32-token captions, 64-wide embeddings, two
    /// blocks.
    pub fn desk(vocab_size: usize) -> Self {
        TextConfig {
            vocab_size,
            seq_len: 32,
            dim: 64,
            blocks: 2,
        }
    }
}

fn block_param(block: usize, rest: &str) -> String {
    format!("text.block{block}.{rest}")
}

/// Registers every text-tower parameter. Draw order is fixed (embeddings
/// first, then blocks in index order), so one seed reproduces the layout.
pub fn init_text_params<T: Elem, R: Rng>(
    cfg: &TextConfig,
    store: &mut ParameterStore<T>,
    rng: &mut R,
) {
    assert!(cfg.vocab_size >= 2, "vocabulary must include PAD and UNK");
    assert!(cfg.seq_len > 0 && cfg.dim > 0, "degenerate text config");
    let d = cfg.dim;
    let hidden = FFN_MULT * d;
    store.insert(
        "text.embed.token",
        init::normal(rng, &[cfg.vocab_size, d], 0.0, INIT_STD),
    );
    store.insert(
        "text.embed.pos",
        init::normal(rng, &[cfg.seq_len, d], 0.0, INIT_STD),
    );
    for b in 0..cfg.blocks {
        let p = |rest: &str| block_param(b, rest);
        store.insert(&p("ln1.gamma"), Tensor::full(&[d], T::one()));
        store.insert(&p("ln1.beta"), Tensor::zeros(&[d]));
        for w in ["attn.wq", "attn.wk", "attn.wv", "attn.wo"] {
            store.insert(&p(w), init::normal(rng, &[d, d], 0.0, INIT_STD));
        }
        for bias in ["attn.bq", "attn.bk", "attn.bv", "attn.bo"] {
            store.insert(&p(bias), Tensor::zeros(&[d]));
        }
        store.insert(&p("ln2.gamma"), Tensor::full(&[d], T::one()));
        store.insert(&p("ln2.beta"), Tensor::zeros(&[d]));
        store.insert(&p("ffn.w1"), init::normal(rng, &[d, hidden], 0.0, INIT_STD));
        store.insert(&p("ffn.b1"), Tensor::zeros(&[hidden]));
        store.insert(&p("ffn.w2"), init::normal(rng, &[hidden, d], 0.0, INIT_STD));
        store.insert(&p("ffn.b2"), Tensor::zeros(&[d]));
    }
}

fn validate_batch(batch: &[TokenSequence], cfg: &TextConfig) -> Result<()> {
    if batch.is_empty() {
        return Err(TextError::EmptyBatch);
    }
    for seq in batch {
        if seq.seq_len() != cfg.seq_len {
            return Err(TextError::SequenceLength {
                expected: cfg.seq_len,
                got: seq.seq_len(),
            });
        }
        // Unreachable through the TokenSequence constructor; asserted
        // anyway so a hand-built sequence cannot silently pool nothing.
        if seq.real_len() == 0 {
            return Err(TextError::AllPadded);
        }
        if let Some(&id) = seq.ids().iter().find(|&&id| id >= cfg.vocab_size) {
            return Err(TextError::TokenOutOfRange {
                id,
                vocab_size: cfg.vocab_size,
            });
        }
    }
    Ok(())
}

/// Attention bias, shape [B, 1, L]: 0 on real keys, MASK_BIAS on padded
/// keys, broadcast over the query axis.
fn attention_bias<T: Elem>(batch: &[TokenSequence], l: usize) -> Tensor<T> {
    let data: Vec<T> = batch
        .iter()
        .flat_map(|seq| seq.mask().iter().map(|&m| (1.0 - f64::from(m)) * MASK_BIAS))
        .map(T::from_f64_lossy)
        .collect();
    Tensor::from_vec(vec![batch.len(), 1, l], data).expect("bias shape matches batch")
}

/// Pooling weights, shape [B, 1, L]: 1/real_len on real rows, 0 on padded
/// rows, so a batched matmul against [B, L, D] yields the masked mean.
fn pool_weights<T: Elem>(batch: &[TokenSequence], l: usize) -> Tensor<T> {
    let data: Vec<T> = batch
        .iter()
        .flat_map(|seq| {
            let inv = 1.0 / seq.real_len() as f64;
            seq.mask().iter().map(move |&m| f64::from(m) * inv)
        })
        .map(T::from_f64_lossy)
        .collect();
    Tensor::from_vec(vec![batch.len(), 1, l], data).expect("weight shape matches batch")
}

fn linear<T: Elem>(
    tape: &mut Tape<T>,
    store: &ParameterStore<T>,
    x: Var,
    weight: &str,
    bias: &str,
) -> crate::tensor::Result<Var> {
    let w = tape.param(weight, store)?;
    let b = tape.param(bias, store)?;
    let xw = tape.matmul(x, w)?;
    tape.add(xw, b)
}

fn encoder_block<T: Elem>(
    tape: &mut Tape<T>,
    store: &ParameterStore<T>,
    x: Var,
    bias: Var,
    block: usize,
    cfg: &TextConfig,
) -> crate::tensor::Result<Var> {
    let p = |rest: &str| block_param(block, rest);

    let g1 = tape.param(&p("ln1.gamma"), store)?;
    let b1 = tape.param(&p("ln1.beta"), store)?;
    let h = tape.layer_norm(x, g1, b1, LN_EPS)?;
    let q = linear(tape, store, h, &p("attn.wq"), &p("attn.bq"))?;
    let k = linear(tape, store, h, &p("attn.wk"), &p("attn.bk"))?;
    let v = linear(tape, store, h, &p("attn.wv"), &p("attn.bv"))?;
    let kt = tape.permute(k, &[0, 2, 1])?;
    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, 1.0 / (cfg.dim as f64).sqrt())?;
    let scores = tape.add(scores, bias)?;
    let weights = tape.softmax(scores, 2)?;
    let mixed = tape.matmul(weights, v)?;
    let mixed = linear(tape, store, mixed, &p("attn.wo"), &p("attn.bo"))?;
    let x = tape.add(x, mixed)?;

    let g2 = tape.param(&p("ln2.gamma"), store)?;
    let b2 = tape.param(&p("ln2.beta"), store)?;
    let h2 = tape.layer_norm(x, g2, b2, LN_EPS)?;
    let a = linear(tape, store, h2, &p("ffn.w1"), &p("ffn.b1"))?;
    let a = tape.silu(a)?;
    let a = linear(tape, store, a, &p("ffn.w2"), &p("ffn.b2"))?;
    tape.add(x, a)
}

/// Per-token contextual embeddings, shape [B, L, D]. There is no norm
/// after the last block; the residual stream is pooled as-is.
pub fn contextual_embeddings<T: Elem>(
    tape: &mut Tape<T>,
    store: &ParameterStore<T>,
    batch: &[TokenSequence],
    cfg: &TextConfig,
) -> Result<Var> {
    validate_batch(batch, cfg)?;
    let bsz = batch.len();
    let l = cfg.seq_len;

    let mut flat_ids = Vec::with_capacity(bsz * l);
    for seq in batch {
        flat_ids.extend_from_slice(seq.ids());
    }

    let table = tape.param("text.embed.token", store)?;
    let pos = tape.param("text.embed.pos", store)?;
    let gathered = tape.gather_rows(table, &flat_ids)?;
    let tok = tape.reshape(gathered, &[bsz, l, cfg.dim])?;
    let mut x = tape.add(tok, pos)?;

    let bias = tape.constant(attention_bias(batch, l));
    for b in 0..cfg.blocks {
        x = encoder_block(tape, store, x, bias, b, cfg)?;
    }
    Ok(x)
}

/// Pooled caption embeddings, shape [B, D]: the mean of each sequence's
/// contextual embeddings taken strictly over mask==1 positions.
pub fn encode_text<T: Elem>(
    tape: &mut Tape<T>,
    store: &ParameterStore<T>,
    batch: &[TokenSequence],
    cfg: &TextConfig,
) -> Result<Var> {
    let x = contextual_embeddings(tape, store, batch, cfg)?;
    let weights = tape.constant(pool_weights(batch, cfg.seq_len));
    let pooled = tape.matmul(weights, x)?;
    Ok(tape.reshape(pooled, &[batch.len(), cfg.dim])?)
}
