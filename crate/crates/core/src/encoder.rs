//! Document encoder: word-character embeddings, the context bi-LSTM and the
//! fixed-size mention representation.
//!
//! For token `k` the word-character embedding is `v_k = [word vector; char
//! forward last; char backward first]` and the context-aware embedding is
//! `x_k = [forward hidden; backward hidden]` of the context bi-LSTM. A span
//! `[q, r]` is represented by `g = [x_q; x_r; head]` projected by a single
//! affine map to the entity space, where `head` is an attention-weighted
//! sum over the span with logits `<w_alpha, x_k>`.

use std::collections::HashMap;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{lstm_sequence, Graph, LstmNodes, NodeId, ParamId, ParamStore};
use crate::embeddings::{CharVocab, WordVectors};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Which per-token vectors the soft head sums over.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SoftHeadSpace {
    /// Word-character embeddings `v_k`, as the attention formula is written.
    #[default]
    V,
    /// Context-aware embeddings `x_k`.
    X,
}

#[derive(Clone, Copy, Debug)]
pub struct LstmIds {
    pub w: ParamId,
    pub b: ParamId,
    pub hidden: usize,
}

impl LstmIds {
    pub fn nodes<F: Scalar>(&self, g: &mut Graph<F>, store: &ParamStore<F>) -> LstmNodes {
        LstmNodes {
            w: g.param(store, self.w),
            b: g.param(store, self.b),
            hidden: self.hidden,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct EncoderParams {
    pub char_table: ParamId,
    pub char_fwd: LstmIds,
    pub char_bwd: LstmIds,
    pub ctx_fwd: LstmIds,
    pub ctx_bwd: LstmIds,
    pub w_alpha: ParamId,
    pub ffnn1_w: ParamId,
    pub ffnn1_b: ParamId,
    pub soft_head: SoftHeadSpace,
    pub keep_prob: f64,
}

/// Per-token graph nodes for one document.
#[derive(Clone, Debug)]
pub struct EncodedDocument {
    /// Word-character embeddings (after dropout in training mode).
    pub v: Vec<NodeId>,
    /// Context-aware embeddings (after dropout in training mode).
    pub x: Vec<NodeId>,
}

impl EncodedDocument {
    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }
}

/// `[h_fwd(last char); h_bwd(first char)]` for one word.
pub fn char_embed<F: Scalar>(
    g: &mut Graph<F>,
    word: &str,
    vocab: &CharVocab,
    store: &ParamStore<F>,
    p: &EncoderParams,
) -> Result<NodeId> {
    if word.is_empty() {
        return Err(Error::InvalidArgument("char_embed: empty word".into()));
    }
    let table = g.param(store, p.char_table);
    let chars: Vec<NodeId> = word
        .chars()
        .map(|c| g.row(table, vocab.row(c)))
        .collect::<Result<_>>()?;
    let fwd = p.char_fwd.nodes(g, store);
    let bwd = p.char_bwd.nodes(g, store);
    let hf = lstm_sequence(g, fwd, &chars, false)?;
    let hb = lstm_sequence(g, bwd, &chars, true)?;
    g.concat(&[hf[hf.len() - 1], hb[0]])
}

pub fn word_constant<F: Scalar>(g: &mut Graph<F>, words: &WordVectors, token: &str) -> Result<NodeId> {
    let row = words.lookup(token);
    g.constant(Tensor::vector(row.iter().map(|&x| F::of(x as f64)).collect()))
}

#[allow(clippy::too_many_arguments)]
pub fn encode_document<F: Scalar>(
    g: &mut Graph<F>,
    tokens: &[String],
    words: &WordVectors,
    vocab: &CharVocab,
    store: &ParamStore<F>,
    p: &EncoderParams,
    mode: Mode,
    rng: &mut ChaCha8Rng,
) -> Result<EncodedDocument> {
    if tokens.is_empty() {
        return Err(Error::InvalidArgument("cannot encode an empty document".into()));
    }
    let training = mode == Mode::Train;
    let mut cache: HashMap<&str, NodeId> = HashMap::new();
    let mut v = Vec::with_capacity(tokens.len());
    for tok in tokens {
        let base = match cache.get(tok.as_str()) {
            Some(&n) => n,
            None => {
                let w = word_constant(g, words, tok)?;
                let c = char_embed(g, tok, vocab, store, p)?;
                let n = g.concat(&[w, c])?;
                cache.insert(tok, n);
                n
            }
        };
        v.push(g.dropout(base, p.keep_prob, training, rng)?);
    }
    let fwd = p.ctx_fwd.nodes(g, store);
    let bwd = p.ctx_bwd.nodes(g, store);
    let hf = lstm_sequence(g, fwd, &v, false)?;
    let hb = lstm_sequence(g, bwd, &v, true)?;
    let mut x = Vec::with_capacity(tokens.len());
    for (f, b) in hf.into_iter().zip(hb) {
        let cat = g.concat(&[f, b])?;
        x.push(g.dropout(cat, p.keep_prob, training, rng)?);
    }
    Ok(EncodedDocument { v, x })
}

fn check_span(enc: &EncodedDocument, start: usize, end: usize) -> Result<()> {
    if start > end || end >= enc.len() {
        return Err(Error::InvalidArgument(format!(
            "span [{start}, {end}] outside document of {} tokens",
            enc.len()
        )));
    }
    Ok(())
}

/// Attention-weighted head vector of the span `[start, end]`.
pub fn soft_head<F: Scalar>(
    g: &mut Graph<F>,
    start: usize,
    end: usize,
    enc: &EncodedDocument,
    store: &ParamStore<F>,
    p: &EncoderParams,
) -> Result<NodeId> {
    check_span(enc, start, end)?;
    let w_alpha = g.param(store, p.w_alpha);
    let logits: Vec<NodeId> = (start..=end)
        .map(|k| g.dot(w_alpha, enc.x[k]))
        .collect::<Result<_>>()?;
    let logits = g.concat(&logits)?;
    let weights = g.softmax(logits)?;
    let values = match p.soft_head {
        SoftHeadSpace::V => &enc.v[start..=end],
        SoftHeadSpace::X => &enc.x[start..=end],
    };
    g.weighted_sum(weights, values)
}

/// Projected mention representation in the entity-embedding space.
pub fn mention_repr<F: Scalar>(
    g: &mut Graph<F>,
    start: usize,
    end: usize,
    enc: &EncodedDocument,
    store: &ParamStore<F>,
    p: &EncoderParams,
) -> Result<NodeId> {
    let head = soft_head(g, start, end, enc, store, p)?;
    let gm = g.concat(&[enc.x[start], enc.x[end], head])?;
    let w = g.param(store, p.ffnn1_w);
    let b = g.param(store, p.ffnn1_b);
    g.affine(w, gm, b)
}
