//! Max-margin training and the checkpoint format.

use std::collections::HashSet;
use std::io::{Read, Write};

use log::{info, warn};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamConfig, AdamState, Graph, NodeId};
use crate::candidates::MentionSpan;
use crate::corpus::{gold_set, Document};
use crate::embeddings::{read_u16, read_u32, CharVocab};
use crate::encoder::Mode;
use crate::error::{Error, Result};
use crate::eval::{evaluate, MatchMode, Task};
use crate::exec::Parallelism;
use crate::inference::{decode_ed, greedy_decode, score_corpus, select_threshold, sort_annotations, Annotation};
use crate::model::{Model, ModelConfig, Resources, SpanSet};
use crate::rng::{substream, Stream};
use crate::tensor::{Scalar, Tensor};

/// Hinge penalty of one pair: `max(0, gamma - s)` for gold pairs,
/// `max(0, s)` otherwise.
pub fn violation(score: f64, is_gold: bool, gamma: f64) -> f64 {
    if is_gold {
        (gamma - score).max(0.0)
    } else {
        score.max(0.0)
    }
}

pub fn violation_node<F: Scalar>(g: &mut Graph<F>, score: NodeId, is_gold: bool, gamma: f64) -> Result<NodeId> {
    if is_gold {
        let neg = g.scale(score, -F::one())?;
        let shifted = g.offset(neg, F::of(gamma))?;
        g.relu(shifted)
    } else {
        g.relu(score)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct LossStats {
    pub pairs: usize,
    pub gold_mentions: usize,
    /// Gold mentions whose span was scored and whose entity was a candidate.
    pub gold_in_candidates: usize,
}

/// Summed violations over every scored (span, candidate) pair, plus the
/// global-score violations when the global layer is on. `None` when the
/// document has nothing to score.
#[allow(clippy::too_many_arguments)]
pub fn document_loss<F: Scalar>(
    g: &mut Graph<F>,
    model: &Model<F>,
    doc: &Document,
    spans: &[MentionSpan],
    res: &Resources,
    gamma: f64,
    mode: Mode,
    rng: &mut ChaCha8Rng,
) -> Result<(Option<NodeId>, LossStats)> {
    let fwd = model.forward(g, doc, spans, res, mode, rng)?;
    let gold: HashSet<(usize, usize, &str)> = doc.gold().iter().map(|m| (m.start, m.end, m.entity.as_str())).collect();
    let mut stats = LossStats {
        pairs: fwd.pairs.len(),
        gold_mentions: gold.len(),
        gold_in_candidates: 0,
    };
    let mut scores = Vec::with_capacity(fwd.pairs.len() * 2);
    for p in &fwd.pairs {
        let is_gold = gold.contains(&(p.start, p.end, p.entity.as_str()));
        stats.gold_in_candidates += is_gold as usize;
        scores.push((p.psi, is_gold));
        if let Some(phi) = p.phi {
            scores.push((phi, is_gold));
        }
    }
    Ok((violation_sum(g, &scores, gamma)?, stats))
}

/// Sum of [`violation_node`] over labelled score nodes; `None` when empty.
pub fn violation_sum<F: Scalar>(g: &mut Graph<F>, scores: &[(NodeId, bool)], gamma: f64) -> Result<Option<NodeId>> {
    if scores.is_empty() {
        return Ok(None);
    }
    let terms = scores
        .iter()
        .map(|&(s, gold)| violation_node(g, s, gold, gamma))
        .collect::<Result<Vec<_>>>()?;
    Ok(Some(g.sum(&terms)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub gamma: f64,
    pub learning_rate: f64,
    pub regime: SpanSet,
    pub eval_every: usize,
    pub patience: usize,
    /// Minimum dev macro F1 gain that counts as improvement.
    pub min_improvement: f64,
    pub max_epochs: usize,
    /// Hard cap on optimizer steps; 0 means no cap.
    pub max_steps: usize,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            gamma: 0.2,
            learning_rate: 1e-3,
            regime: SpanSet::AllSpans,
            eval_every: 500,
            patience: 6,
            min_improvement: 1e-4,
            max_epochs: 100,
            max_steps: 0,
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.gamma.is_nan() || self.gamma <= 0.0 {
            return Err(Error::Config(format!("gamma must be positive, got {}", self.gamma)));
        }
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dev_macro_f1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
}

pub struct TrainOutcome {
    pub model: Model<f32>,
    pub threshold: f64,
    pub steps: usize,
    pub best_dev_macro_f1: Option<f64>,
}

/// One optimizer step on one document; returns the loss value (0 when the
/// document has nothing to score).
pub fn train_step(
    model: &mut Model<f32>,
    adam: &mut AdamState<f32>,
    doc: &Document,
    res: &Resources,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let spans = res.spans(doc, cfg.regime, model.config.coreference);
    let mut g = Graph::new();
    let tag = |e: Error| match e {
        Error::NonFinite(m) => Error::NonFinite(format!("document {:?}: {m}", doc.doc_id)),
        other => other,
    };
    let (loss, _) = document_loss(&mut g, model, doc, &spans, res, cfg.gamma, Mode::Train, rng).map_err(tag)?;
    let Some(loss) = loss else {
        warn!("document {:?} has no scorable spans", doc.doc_id);
        return Ok(0.0);
    };
    let value = g.scalar_value(loss).as_f64();
    let grads = g.backward(loss).map_err(tag)?;
    adam.step(&mut model.params, &grads).map_err(tag)?;
    Ok(value)
}

/// Dev macro F1 (strong matching) and the threshold tuned on the same set.
pub fn dev_score(model: &Model<f32>, dev: &[Document], res: &Resources, regime: SpanSet, par: Parallelism) -> Result<(f64, f64)> {
    let gold = gold_set(dev);
    match regime {
        SpanSet::AllSpans => {
            let scored = score_corpus(model, dev, res, par)?;
            let t = select_threshold(&scored, &gold, par)?;
            let mut ann: Vec<Annotation> = scored
                .iter()
                .flat_map(|d| greedy_decode(&d.doc_id, &d.pairs, t.delta))
                .collect();
            sort_annotations(&mut ann);
            Ok((evaluate(&ann, &gold, MatchMode::Strong, Task::El)?.macro_avg.f1, t.delta))
        }
        SpanSet::GoldSpans => {
            let per_doc = par.try_map(dev, |d| {
                let spans = res.spans(d, SpanSet::GoldSpans, model.config.coreference);
                let pairs = model.score_spans(d, &spans, res)?;
                Ok::<_, Error>(decode_ed(&d.doc_id, &spans, &pairs).annotations)
            })?;
            let ann: Vec<Annotation> = per_doc.into_iter().flatten().collect();
            Ok((evaluate(&ann, &gold, MatchMode::Strong, Task::Ed)?.macro_avg.f1, f64::NEG_INFINITY))
        }
    }
}

/// Trains `model` on `train_docs`, one Adam step per document in a seeded
/// per-epoch order. With a dev set, every `eval_every` steps the dev macro
/// F1 is measured (threshold re-tuned) and the best snapshot kept; training
/// stops after `patience` evaluations without improvement. Without a dev
/// set the threshold is tuned on the training documents at the end.
pub fn train(
    mut model: Model<f32>,
    train_docs: &[Document],
    dev_docs: &[Document],
    res: &Resources,
    cfg: &TrainConfig,
    par: Parallelism,
    mut on_record: impl FnMut(&LogRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_docs.is_empty() {
        return Err(Error::InvalidArgument("empty training corpus".into()));
    }
    let adam_cfg = AdamConfig {
        learning_rate: cfg.learning_rate,
        ..AdamConfig::default()
    };
    let mut adam = AdamState::new(adam_cfg, &model.params);
    let mut best: Option<(f64, f64, crate::autodiff::ParamStore<f32>)> = None;
    let mut stale = 0usize;
    let mut step = 0usize;
    let mut window_loss = 0.0;
    let mut window_n = 0usize;
    let mut order: Vec<usize> = (0..train_docs.len()).collect();

    'epochs: for epoch in 0..cfg.max_epochs {
        order.sort_unstable();
        order.shuffle(&mut substream(cfg.seed, Stream::Shuffle, epoch as u64));
        for &i in &order {
            if cfg.max_steps > 0 && step >= cfg.max_steps {
                break 'epochs;
            }
            let mut rng = substream(cfg.seed, Stream::Dropout, step as u64);
            let loss = train_step(&mut model, &mut adam, &train_docs[i], res, cfg, &mut rng)?;
            step += 1;
            window_loss += loss;
            window_n += 1;
            let mut rec = LogRecord {
                step,
                loss,
                dev_macro_f1: None,
                delta: None,
            };
            if !dev_docs.is_empty() && step.is_multiple_of(cfg.eval_every) {
                let (f1, delta) = dev_score(&model, dev_docs, res, cfg.regime, par)?;
                info!(
                    "step {step}: mean loss {:.4}, dev macro F1 {f1:.4}, delta {delta:.4}",
                    window_loss / window_n as f64
                );
                window_loss = 0.0;
                window_n = 0;
                rec.dev_macro_f1 = Some(f1);
                rec.delta = Some(delta);
                let improved = best.as_ref().is_none_or(|b| f1 > b.0 + cfg.min_improvement);
                if improved {
                    best = Some((f1, delta, model.params.clone()));
                    stale = 0;
                } else {
                    stale += 1;
                }
                on_record(&rec);
                if stale >= cfg.patience {
                    info!("early stop at step {step}");
                    break 'epochs;
                }
            } else {
                on_record(&rec);
            }
        }
    }

    match best {
        Some((f1, delta, params)) => {
            model.params = params;
            Ok(TrainOutcome {
                model,
                threshold: delta,
                steps: step,
                best_dev_macro_f1: Some(f1),
            })
        }
        None => {
            let threshold = if !dev_docs.is_empty() {
                dev_score(&model, dev_docs, res, cfg.regime, par)?.1
            } else if cfg.regime == SpanSet::AllSpans {
                let scored = score_corpus(&model, train_docs, res, par)?;
                select_threshold(&scored, &gold_set(train_docs), par)?.delta
            } else {
                f64::NEG_INFINITY
            };
            Ok(TrainOutcome {
                model,
                threshold,
                steps: step,
                best_dev_macro_f1: None,
            })
        }
    }
}

// ---- checkpoint ----------------------------------------------------------

const CHECKPOINT_MAGIC: &[u8; 4] = b"E2EL";
const META_CHARS: &str = "meta.char_codepoints";
const META_THRESHOLD: &str = "meta.threshold";

/// Writes named tensors: magic, u32 entry count, then per entry u16 name
/// length, name, u8 rank, u32 dims, f32 values; a trailing CRC32 covers
/// everything after the magic. Little-endian throughout.
pub fn write_tensors<W: Write>(entries: &[(String, Tensor<f32>)], mut w: W) -> Result<()> {
    let mut body = Vec::new();
    body.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        let len = u16::try_from(name.len()).map_err(|_| Error::Format(format!("tensor name too long: {name}")))?;
        body.extend_from_slice(&len.to_le_bytes());
        body.extend_from_slice(name.as_bytes());
        body.push(t.rank() as u8);
        for &d in t.dims() {
            body.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &x in t.data() {
            body.extend_from_slice(&x.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&body);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&body)?;
    w.write_all(&crc.to_le_bytes())?;
    Ok(())
}

pub fn read_tensors<R: Read>(mut r: R) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut all = Vec::new();
    r.read_to_end(&mut all)?;
    if all.len() < 12 || &all[..4] != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let body = &all[4..all.len() - 4];
    let stored = u32::from_le_bytes(all[all.len() - 4..].try_into().expect("4 bytes"));
    if crc32fast::hash(body) != stored {
        return Err(Error::Format("checkpoint checksum mismatch".into()));
    }
    let mut cur = body;
    let n = read_u32(&mut cur)? as usize;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let len = read_u16(&mut cur)? as usize;
        let mut name = vec![0u8; len];
        cur.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let mut rank = [0u8; 1];
        cur.read_exact(&mut rank)?;
        let dims = (0..rank[0]).map(|_| read_u32(&mut cur).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let count: usize = dims.iter().product();
        let mut data = Vec::with_capacity(count);
        let mut buf = [0u8; 4];
        for _ in 0..count {
            cur.read_exact(&mut buf)?;
            data.push(f32::from_le_bytes(buf));
        }
        let t = Tensor::new(dims, data).map_err(|e| Error::Format(format!("tensor {name:?}: {e}")))?;
        out.push((name, t));
    }
    if !cur.is_empty() {
        return Err(Error::Format(format!("{} trailing bytes in checkpoint", cur.len())));
    }
    Ok(out)
}

/// Model parameters plus the character vocabulary and threshold.
pub fn save_checkpoint<W: Write>(model: &Model<f32>, threshold: f64, w: W) -> Result<()> {
    let mut entries: Vec<(String, Tensor<f32>)> =
        model.params.iter().map(|(_, n, t)| (n.to_string(), t.clone())).collect();
    let chars = model.chars.chars();
    let mut cp = vec![chars.len() as f32];
    cp.extend(chars.iter().map(|&c| c as u32 as f32));
    entries.push((META_CHARS.into(), Tensor::vector(cp)));
    entries.push((META_THRESHOLD.into(), Tensor::vector(vec![threshold as f32])));
    write_tensors(&entries, w)
}

/// Restores a model written by [`save_checkpoint`]; returns it with the
/// stored threshold.
pub fn load_checkpoint<R: Read>(config: ModelConfig, res: &Resources, r: R) -> Result<(Model<f32>, f64)> {
    let mut tensors = read_tensors(r)?;
    let mut take = |name: &str| -> Result<Tensor<f32>> {
        let i = tensors
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks {name:?}")))?;
        Ok(tensors.remove(i).1)
    };
    let cp = take(META_CHARS)?;
    let threshold = take(META_THRESHOLD)?.data()[0] as f64;
    let n = cp.data()[0] as usize;
    if cp.len() != n + 1 {
        return Err(Error::Format("malformed character table".into()));
    }
    let chars = cp.data()[1..]
        .iter()
        .map(|&x| char::from_u32(x as u32).ok_or_else(|| Error::Format(format!("bad code point {x}"))))
        .collect::<Result<Vec<char>>>()?;
    let vocab = CharVocab::new(chars);
    let model = Model::from_named(config, vocab, res, tensors)?;
    Ok((model, threshold))
}
