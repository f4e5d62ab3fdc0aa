//! The linking model: parameters, resources and the per-document forward
//! pass producing local (and optionally global) scores for every
//! (span, candidate) pair.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, ParamId, ParamStore};
use crate::candidates::{apply_coreference_heuristic, AliasIndex, MentionSpan};
use crate::corpus::Document;
use crate::embeddings::{CharVocab, EntityVectors, WordVectors};
use crate::encoder::{encode_document, mention_repr, word_constant, EncoderParams, LstmIds, Mode, SoftHeadSpace};
use crate::error::{Error, Result};
use crate::rng::{stream, Stream};
use crate::scoring::{
    combine_global, context_window, filter_voters, local_score, long_range_features, voter_sets, ScoredPair,
};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub char_dim: usize,
    pub char_hidden: usize,
    pub context_hidden: usize,
    pub keep_prob: f64,
    pub soft_head_space: SoftHeadSpace,
    pub use_attention: bool,
    pub use_global: bool,
    /// Long-range attention window (tokens, both sides together).
    pub window: usize,
    /// Context words kept after hard attention.
    pub top_words: usize,
    pub gamma_prime: f64,
    pub voter_dedup: bool,
    pub finetune_entities: bool,
    pub coreference: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            char_dim: 50,
            char_hidden: 50,
            context_hidden: 150,
            keep_prob: 0.5,
            soft_head_space: SoftHeadSpace::V,
            use_attention: false,
            use_global: false,
            window: 200,
            top_words: 10,
            gamma_prime: 0.0,
            voter_dedup: false,
            finetune_entities: false,
            coreference: true,
        }
    }
}

/// Read-only inputs shared by training and inference.
#[derive(Clone, Debug)]
pub struct Resources {
    pub words: WordVectors,
    pub entities: EntityVectors,
    pub index: AliasIndex,
}

/// Which spans a document contributes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpanSet {
    /// Every span with at least one candidate (entity linking).
    AllSpans,
    /// Only the gold mention spans (disambiguation only).
    GoldSpans,
}

impl Resources {
    /// Spans of `doc` for the given regime, with the coreference heuristic
    /// applied when enabled. Gold spans may have empty candidate lists.
    pub fn spans(&self, doc: &Document, set: SpanSet, coreference: bool) -> Vec<MentionSpan> {
        let spans = match set {
            SpanSet::AllSpans => self.index.enumerate_spans(doc),
            SpanSet::GoldSpans => {
                let mut iv: Vec<(usize, usize)> = doc.gold().iter().map(|m| (m.start, m.end)).collect();
                iv.sort_unstable();
                iv.dedup();
                iv.into_iter().map(|(s, e)| self.index.span_for(doc, s, e)).collect()
            }
        };
        if coreference {
            apply_coreference_heuristic(&spans, doc)
        } else {
            spans
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct ScorerIds {
    ffnn2_w: ParamId,
    ffnn2_b: ParamId,
    attention: Option<(ParamId, ParamId)>,
    ffnn3: Option<(ParamId, ParamId)>,
    entity_table: Option<ParamId>,
}

pub struct Model<F: Scalar> {
    pub config: ModelConfig,
    pub params: ParamStore<F>,
    pub chars: CharVocab,
    enc: EncoderParams,
    scorer: ScorerIds,
    word_dim: usize,
    entity_dim: usize,
}

impl<F: Scalar> Clone for Model<F> {
    fn clone(&self) -> Self {
        Model {
            config: self.config.clone(),
            params: self.params.clone(),
            chars: self.chars.clone(),
            enc: self.enc,
            scorer: self.scorer,
            word_dim: self.word_dim,
            entity_dim: self.entity_dim,
        }
    }
}

/// Graph nodes of one (span, candidate) pair.
#[derive(Clone, Debug)]
pub struct PairNodes {
    pub span: usize,
    pub start: usize,
    pub end: usize,
    pub entity: String,
    pub prior: f64,
    pub psi: NodeId,
    pub global: Option<NodeId>,
    pub phi: Option<NodeId>,
}

#[derive(Clone, Debug, Default)]
pub struct DocForward {
    pub pairs: Vec<PairNodes>,
}

impl DocForward {
    pub fn scored<F: Scalar>(&self, g: &Graph<F>) -> Vec<ScoredPair> {
        self.pairs
            .iter()
            .map(|p| ScoredPair {
                start: p.start,
                end: p.end,
                entity: p.entity.clone(),
                prior: p.prior,
                psi: g.scalar_value(p.psi).as_f64(),
                g: p.global.map(|n| g.scalar_value(n).as_f64()),
                phi: p.phi.map(|n| g.scalar_value(n).as_f64()),
            })
            .collect()
    }
}

struct Shapes {
    word_dim: usize,
    entity_dim: usize,
    char_rows: usize,
}

/// Parameter names and shapes for a configuration.
fn layout(cfg: &ModelConfig, s: &Shapes, n_entities: usize) -> Vec<(String, Vec<usize>)> {
    let ch = cfg.char_hidden;
    let h = cfg.context_hidden;
    let v_dim = s.word_dim + 2 * ch;
    let head_dim = match cfg.soft_head_space {
        SoftHeadSpace::V => v_dim,
        SoftHeadSpace::X => 2 * h,
    };
    let mut out = vec![
        ("char.table".to_string(), vec![s.char_rows, cfg.char_dim]),
        ("char.fwd.w".into(), vec![4 * ch, cfg.char_dim + ch]),
        ("char.fwd.b".into(), vec![4 * ch]),
        ("char.bwd.w".into(), vec![4 * ch, cfg.char_dim + ch]),
        ("char.bwd.b".into(), vec![4 * ch]),
        ("ctx.fwd.w".into(), vec![4 * h, v_dim + h]),
        ("ctx.fwd.b".into(), vec![4 * h]),
        ("ctx.bwd.w".into(), vec![4 * h, v_dim + h]),
        ("ctx.bwd.b".into(), vec![4 * h]),
        ("head.w_alpha".into(), vec![2 * h]),
        ("ffnn1.w".into(), vec![s.entity_dim, 4 * h + head_dim]),
        ("ffnn1.b".into(), vec![s.entity_dim]),
        ("ffnn2.w".into(), vec![1, if cfg.use_attention { 3 } else { 2 }]),
        ("ffnn2.b".into(), vec![1]),
    ];
    if cfg.use_attention {
        out.push(("attention.a".into(), vec![s.entity_dim]));
        out.push(("attention.b".into(), vec![s.entity_dim]));
    }
    if cfg.use_global {
        out.push(("ffnn3.w".into(), vec![1, 2]));
        out.push(("ffnn3.b".into(), vec![1]));
    }
    if cfg.finetune_entities {
        out.push(("entity.table".into(), vec![n_entities.max(1), s.entity_dim]));
    }
    out
}

fn init_tensor<F: Scalar>(name: &str, dims: &[usize], res: &Resources, rng: &mut ChaCha8Rng) -> Tensor<F> {
    let n: usize = dims.iter().product();
    let uniform = |bound: f64, rng: &mut ChaCha8Rng| -> Tensor<F> {
        Tensor::new(dims.to_vec(), (0..n).map(|_| F::of(rng.gen_range(-bound..bound))).collect())
            .expect("layout dims")
    };
    match name {
        "attention.a" | "attention.b" => Tensor::new(dims.to_vec(), vec![F::one(); n]).expect("layout dims"),
        "entity.table" => {
            let mut t = Tensor::zeros(dims);
            let table = res.entities.table();
            for i in 0..table.len() {
                for (o, &x) in t.row_mut(i).iter_mut().zip(table.row(i)) {
                    *o = F::of(x as f64);
                }
            }
            t
        }
        "ffnn2.w" => {
            // start from "prior plus similarity"
            let mut v = vec![F::one(); n];
            if n == 3 {
                v[2] = F::of(0.1);
            }
            Tensor::new(dims.to_vec(), v).expect("layout dims")
        }
        "ffnn3.w" => Tensor::from_f64(dims, &[1.0, 0.5]).expect("layout dims"),
        _ if name.ends_with(".b") => Tensor::zeros(dims),
        "char.table" => uniform(0.5, rng),
        _ if dims.len() == 2 => {
            let fan = (dims[0] + dims[1]) as f64;
            uniform((6.0 / fan).sqrt(), rng)
        }
        _ => uniform((3.0 / dims[0] as f64).sqrt(), rng),
    }
}

impl<F: Scalar> Model<F> {
    /// Fresh randomly initialised model.
    pub fn new(config: ModelConfig, chars: CharVocab, res: &Resources, seed: u64) -> Result<Self> {
        let mut rng = stream(seed, Stream::Init);
        let shapes = Model::<F>::shapes(&config, &chars, res)?;
        let mut params = ParamStore::new();
        for (name, dims) in layout(&config, &shapes, res.entities.table().len()) {
            let t = init_tensor(&name, &dims, res, &mut rng);
            params.add(&name, t)?;
        }
        Model::assemble(config, params, chars, &shapes)
    }

    /// Model from named tensors (a checkpoint), validated against the layout
    /// the configuration implies.
    pub fn from_named(
        config: ModelConfig,
        chars: CharVocab,
        res: &Resources,
        tensors: Vec<(String, Tensor<F>)>,
    ) -> Result<Self> {
        let shapes = Model::<F>::shapes(&config, &chars, res)?;
        let mut by_name: HashMap<String, Tensor<F>> = tensors.into_iter().collect();
        let mut params = ParamStore::new();
        for (name, dims) in layout(&config, &shapes, res.entities.table().len()) {
            let t = by_name
                .remove(&name)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks parameter {name:?}")))?;
            if t.dims() != dims.as_slice() {
                return Err(Error::Format(format!(
                    "parameter {name:?} has dims {:?}, configuration needs {dims:?}",
                    t.dims()
                )));
            }
            params.add(&name, t)?;
        }
        if !by_name.is_empty() {
            let mut extra: Vec<_> = by_name.into_keys().collect();
            extra.sort();
            return Err(Error::Format(format!(
                "checkpoint has parameters the configuration does not use: {extra:?}"
            )));
        }
        Model::assemble(config, params, chars, &shapes)
    }

    fn shapes(config: &ModelConfig, chars: &CharVocab, res: &Resources) -> Result<Shapes> {
        let s = Shapes {
            word_dim: res.words.dim(),
            entity_dim: res.entities.dim(),
            char_rows: chars.rows(),
        };
        if config.use_attention && s.word_dim != s.entity_dim {
            return Err(Error::Config(format!(
                "long-range attention needs word dim ({}) equal to entity dim ({})",
                s.word_dim, s.entity_dim
            )));
        }
        if [config.char_dim, config.char_hidden, config.context_hidden].contains(&0) {
            return Err(Error::Config("encoder dimensions must be positive".into()));
        }
        if !(config.keep_prob > 0.0 && config.keep_prob <= 1.0) {
            return Err(Error::Config(format!("keep_prob {} outside (0, 1]", config.keep_prob)));
        }
        if config.use_attention && config.top_words == 0 {
            return Err(Error::Config("top_words must be at least 1".into()));
        }
        Ok(s)
    }

    fn assemble(config: ModelConfig, params: ParamStore<F>, chars: CharVocab, s: &Shapes) -> Result<Self> {
        let id = |n: &str| params.id(n).ok_or_else(|| Error::Format(format!("missing parameter {n:?}")));
        let lstm = |p: &str, hidden| -> Result<LstmIds> {
            Ok(LstmIds {
                w: id(&format!("{p}.w"))?,
                b: id(&format!("{p}.b"))?,
                hidden,
            })
        };
        let enc = EncoderParams {
            char_table: id("char.table")?,
            char_fwd: lstm("char.fwd", config.char_hidden)?,
            char_bwd: lstm("char.bwd", config.char_hidden)?,
            ctx_fwd: lstm("ctx.fwd", config.context_hidden)?,
            ctx_bwd: lstm("ctx.bwd", config.context_hidden)?,
            w_alpha: id("head.w_alpha")?,
            ffnn1_w: id("ffnn1.w")?,
            ffnn1_b: id("ffnn1.b")?,
            soft_head: config.soft_head_space,
            keep_prob: config.keep_prob,
        };
        let scorer = ScorerIds {
            ffnn2_w: id("ffnn2.w")?,
            ffnn2_b: id("ffnn2.b")?,
            attention: if config.use_attention {
                Some((id("attention.a")?, id("attention.b")?))
            } else {
                None
            },
            ffnn3: if config.use_global {
                Some((id("ffnn3.w")?, id("ffnn3.b")?))
            } else {
                None
            },
            entity_table: if config.finetune_entities {
                Some(id("entity.table")?)
            } else {
                None
            },
        };
        Ok(Model {
            config,
            params,
            chars,
            enc,
            scorer,
            word_dim: s.word_dim,
            entity_dim: s.entity_dim,
        })
    }

    pub fn cast<G: Scalar>(&self) -> Model<G> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            chars: self.chars.clone(),
            enc: self.enc,
            scorer: self.scorer,
            word_dim: self.word_dim,
            entity_dim: self.entity_dim,
        }
    }

    pub fn encoder_params(&self) -> &EncoderParams {
        &self.enc
    }

    pub fn entity_dim(&self) -> usize {
        self.entity_dim
    }

    pub fn word_dim(&self) -> usize {
        self.word_dim
    }

    fn entity_node(
        &self,
        g: &mut Graph<F>,
        res: &Resources,
        cache: &mut HashMap<String, NodeId>,
        entity: &str,
    ) -> Result<NodeId> {
        if let Some(&n) = cache.get(entity) {
            return Ok(n);
        }
        let node = match (self.scorer.entity_table, res.entities.row_of(entity)) {
            (Some(table), Some(row)) => {
                let t = g.param(&self.params, table);
                g.row(t, row)?
            }
            _ => {
                let v = res.entities.lookup(entity);
                g.constant(Tensor::vector(v.iter().map(|&x| F::of(x as f64)).collect()))?
            }
        };
        cache.insert(entity.to_string(), node);
        Ok(node)
    }

    /// Builds the scoring graph for `spans` of `doc`. Spans without
    /// candidates contribute no pairs.
    pub fn forward(
        &self,
        g: &mut Graph<F>,
        doc: &Document,
        spans: &[MentionSpan],
        res: &Resources,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<DocForward> {
        let mut out = DocForward::default();
        if spans.iter().all(|s| s.candidates.is_empty()) {
            return Ok(out);
        }
        let enc = encode_document(g, &doc.tokens, &res.words, &self.chars, &self.params, &self.enc, mode, rng)?;
        let w2 = g.param(&self.params, self.scorer.ffnn2_w);
        let b2 = g.param(&self.params, self.scorer.ffnn2_b);
        let attention = self
            .scorer
            .attention
            .map(|(a, b)| (g.param(&self.params, a), g.param(&self.params, b)));
        let mut entity_cache = HashMap::new();
        let mut word_cache: HashMap<usize, NodeId> = HashMap::new();

        for (si, span) in spans.iter().enumerate() {
            if span.candidates.is_empty() {
                continue;
            }
            let x_m = mention_repr(g, span.start, span.end, &enc, &self.params, &self.enc)?;
            let ys: Vec<NodeId> = span
                .candidates
                .iter()
                .map(|c| self.entity_node(g, res, &mut entity_cache, &c.entity))
                .collect::<Result<_>>()?;
            let ctx = match attention {
                Some((a, b)) => {
                    let positions = context_window(doc.len(), span.start, span.end, self.config.window);
                    let mut words = Vec::with_capacity(positions.len());
                    for p in positions {
                        let n = match word_cache.get(&p) {
                            Some(&n) => n,
                            None => {
                                let n = word_constant(g, &res.words, &doc.tokens[p])?;
                                word_cache.insert(p, n);
                                n
                            }
                        };
                        words.push(n);
                    }
                    Some(long_range_features(g, &words, &ys, self.config.top_words, a, b)?)
                }
                None => None,
            };
            for (ci, cand) in span.candidates.iter().enumerate() {
                let feat = ctx.as_ref().map(|c| c[ci]);
                let psi = local_score(g, x_m, cand.prior, ys[ci], feat, w2, b2)?;
                out.pairs.push(PairNodes {
                    span: si,
                    start: span.start,
                    end: span.end,
                    entity: cand.entity.clone(),
                    prior: cand.prior,
                    psi,
                    global: None,
                    phi: None,
                });
            }
        }

        if let Some((w3, b3)) = self.scorer.ffnn3 {
            let w3 = g.param(&self.params, w3);
            let b3 = g.param(&self.params, b3);
            let values = out.scored(g);
            let voters = filter_voters(&values, self.config.gamma_prime);
            let sets = voter_sets(&values, &voters, self.config.voter_dedup);
            let mut sums: HashMap<(usize, usize), Option<NodeId>> = HashMap::new();
            for (key, set) in &sets {
                let node = if set.is_empty() {
                    None
                } else {
                    let mut parts = Vec::new();
                    for (e, &n) in set {
                        let y = self.entity_node(g, res, &mut entity_cache, e)?;
                        parts.extend(std::iter::repeat_n(y, n));
                    }
                    Some(g.sum(&parts)?)
                };
                sums.insert(*key, node);
            }
            let zero = g.scalar(F::zero())?;
            for p in out.pairs.iter_mut() {
                let gnode = match sums[&(p.start, p.end)] {
                    Some(y_g) => {
                        let y = self.entity_node(g, res, &mut entity_cache, &p.entity)?;
                        g.cosine(y, y_g)?
                    }
                    None => zero,
                };
                p.global = Some(gnode);
                p.phi = Some(combine_global(g, p.psi, gnode, w3, b3)?);
            }
        }
        Ok(out)
    }

    /// Evaluation-mode scores for the given spans.
    pub fn score_spans(&self, doc: &Document, spans: &[MentionSpan], res: &Resources) -> Result<Vec<ScoredPair>> {
        let mut g = Graph::new();
        // evaluation mode never draws from the stream
        let mut rng = stream(0, Stream::Dropout);
        let fwd = self.forward(&mut g, doc, spans, res, Mode::Eval, &mut rng)?;
        Ok(fwd.scored(&g))
    }

    /// Evaluation-mode scores for every linkable span of `doc`.
    pub fn score_document(&self, doc: &Document, res: &Resources) -> Result<Vec<ScoredPair>> {
        let spans = res.spans(doc, SpanSet::AllSpans, self.config.coreference);
        self.score_spans(doc, &spans, res)
    }
}
