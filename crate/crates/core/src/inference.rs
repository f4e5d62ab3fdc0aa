//! Threshold selection and decoding.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::candidates::MentionSpan;
use crate::corpus::{Document, GoldSet};
use crate::error::{Error, Result};
use crate::eval::{count_matches, f1_score, MatchMode};
use crate::exec::Parallelism;
use crate::model::{Model, Resources, SpanSet};
use crate::scoring::ScoredPair;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub doc_id: String,
    pub start: usize,
    pub end: usize,
    pub entity: String,
    pub score: f64,
}

/// Scores of every (span, candidate) pair of one document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredDocument {
    pub doc_id: String,
    pub pairs: Vec<ScoredPair>,
}

/// Numeric order; `0.0` and `-0.0` tie.
fn cmp_num(a: f64, b: f64) -> Ordering {
    a.partial_cmp(&b).unwrap_or_else(|| a.total_cmp(&b))
}

/// `a` ranks before `b` as a span's best candidate.
fn better_candidate(a: &ScoredPair, b: &ScoredPair) -> bool {
    match cmp_num(a.score(), b.score()) {
        Ordering::Greater => true,
        Ordering::Less => false,
        Ordering::Equal => match cmp_num(a.prior, b.prior) {
            Ordering::Greater => true,
            Ordering::Less => false,
            Ordering::Equal => a.entity < b.entity,
        },
    }
}

/// Highest-scoring candidate per span (ties: higher prior, then smaller
/// entity id), ordered by span.
pub fn best_per_span(pairs: &[ScoredPair]) -> Vec<&ScoredPair> {
    let mut best: BTreeMap<(usize, usize), &ScoredPair> = BTreeMap::new();
    for p in pairs {
        best.entry(p.span())
            .and_modify(|cur| {
                if better_candidate(p, cur) {
                    *cur = p;
                }
            })
            .or_insert(p);
    }
    best.into_values().collect()
}

fn decode_order(a: &ScoredPair, b: &ScoredPair) -> Ordering {
    cmp_num(b.score(), a.score())
        .then(a.start.cmp(&b.start))
        .then((a.end - a.start).cmp(&(b.end - b.start)))
        .then(a.entity.cmp(&b.entity))
}

/// Greedy non-overlapping selection of best candidates scoring above `delta`.
pub fn greedy_decode(doc_id: &str, pairs: &[ScoredPair], delta: f64) -> Vec<Annotation> {
    let mut kept: Vec<&ScoredPair> = best_per_span(pairs).into_iter().filter(|p| p.score() > delta).collect();
    kept.sort_by(|a, b| decode_order(a, b));
    let mut taken: Vec<(usize, usize)> = Vec::new();
    let mut out = Vec::new();
    for p in kept {
        if taken.iter().any(|&(s, e)| p.start <= e && s <= p.end) {
            continue;
        }
        taken.push(p.span());
        out.push(Annotation {
            doc_id: doc_id.to_string(),
            start: p.start,
            end: p.end,
            entity: p.entity.clone(),
            score: p.score(),
        });
    }
    out
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EdDecode {
    pub annotations: Vec<Annotation>,
    /// Input spans that had no candidate to choose.
    pub unlinked: Vec<(usize, usize)>,
}

/// Argmax candidate for every input span, regardless of threshold.
pub fn decode_ed(doc_id: &str, spans: &[MentionSpan], pairs: &[ScoredPair]) -> EdDecode {
    let best: HashMap<(usize, usize), &ScoredPair> = best_per_span(pairs).into_iter().map(|p| (p.span(), p)).collect();
    let mut out = EdDecode::default();
    for s in spans {
        match best.get(&(s.start, s.end)) {
            Some(p) => out.annotations.push(Annotation {
                doc_id: doc_id.to_string(),
                start: s.start,
                end: s.end,
                entity: p.entity.clone(),
                score: p.score(),
            }),
            None => out.unlinked.push((s.start, s.end)),
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdChoice {
    pub delta: f64,
    pub micro_f1: f64,
}

/// Micro F1 (strong matching) of greedy decoding at every candidate
/// threshold of one document, ascending: `(delta, tp, predicted)`.
fn doc_curve(doc: &ScoredDocument, gold: &[crate::corpus::GoldMention]) -> Vec<(f64, usize, usize)> {
    let mut cands: Vec<f64> = best_per_span(&doc.pairs).iter().map(|p| p.score()).collect();
    cands.push(f64::NEG_INFINITY);
    cands.sort_by(f64::total_cmp);
    cands.dedup();
    cands
        .into_iter()
        .map(|d| {
            let ann = greedy_decode(&doc.doc_id, &doc.pairs, d);
            let refs: Vec<&Annotation> = ann.iter().collect();
            (d, count_matches(&refs, gold, MatchMode::Strong), ann.len())
        })
        .collect()
}

/// Threshold maximising strong-matching micro F1 over the candidate set
/// `{-inf} ∪ {best score of each span}`; ties go to the larger threshold.
pub fn select_threshold(dev: &[ScoredDocument], gold: &GoldSet, par: Parallelism) -> Result<ThresholdChoice> {
    if dev.is_empty() {
        return Err(Error::InvalidArgument("threshold selection needs a non-empty dev set".into()));
    }
    let empty = Vec::new();
    let curves = par.map(dev, |d| doc_curve(d, gold.get(&d.doc_id).unwrap_or(&empty)));
    let n_gold: usize = gold.values().map(Vec::len).sum();

    // A document's decode changes only at its own candidates, so totals are
    // the sum of the -inf entries plus every later step at or below delta.
    let (mut tp, mut np) = (0i64, 0i64);
    let mut events: Vec<(f64, i64, i64)> = Vec::new();
    for c in &curves {
        tp += c[0].1 as i64;
        np += c[0].2 as i64;
        for w in c.windows(2) {
            events.push((w[1].0, w[1].1 as i64 - w[0].1 as i64, w[1].2 as i64 - w[0].2 as i64));
        }
    }
    events.sort_by(|a, b| a.0.total_cmp(&b.0));

    let mut best = ThresholdChoice {
        delta: f64::NEG_INFINITY,
        micro_f1: f1_score(tp as usize, np as usize, n_gold),
    };
    let mut i = 0;
    while i < events.len() {
        let d = events[i].0;
        while i < events.len() && events[i].0 == d {
            tp += events[i].1;
            np += events[i].2;
            i += 1;
        }
        let f1 = f1_score(tp as usize, np as usize, n_gold);
        if f1 >= best.micro_f1 {
            best = ThresholdChoice { delta: d, micro_f1: f1 };
        }
    }
    Ok(best)
}

pub fn score_corpus(model: &Model<f32>, docs: &[Document], res: &Resources, par: Parallelism) -> Result<Vec<ScoredDocument>> {
    par.try_map(docs, |d| {
        Ok(ScoredDocument {
            doc_id: d.doc_id.clone(),
            pairs: model.score_document(d, res)?,
        })
    })
}

/// End-to-end linking of a corpus, sorted by (doc_id, start).
pub fn annotate_corpus(
    model: &Model<f32>,
    docs: &[Document],
    res: &Resources,
    delta: f64,
    par: Parallelism,
) -> Result<Vec<Annotation>> {
    let per_doc = par.try_map(docs, |d| Ok::<_, Error>(greedy_decode(&d.doc_id, &model.score_document(d, res)?, delta)))?;
    let mut out: Vec<Annotation> = per_doc.into_iter().flatten().collect();
    sort_annotations(&mut out);
    Ok(out)
}

/// Disambiguation of the gold spans of a corpus; returns the annotations
/// and the number of spans left unlinked.
pub fn disambiguate_corpus(
    model: &Model<f32>,
    docs: &[Document],
    res: &Resources,
    par: Parallelism,
) -> Result<(Vec<Annotation>, usize)> {
    let per_doc = par.try_map(docs, |d| {
        let spans = res.spans(d, SpanSet::GoldSpans, model.config.coreference);
        let pairs = model.score_spans(d, &spans, res)?;
        Ok::<_, Error>(decode_ed(&d.doc_id, &spans, &pairs))
    })?;
    let unlinked = per_doc.iter().map(|d| d.unlinked.len()).sum();
    let mut out: Vec<Annotation> = per_doc.into_iter().flat_map(|d| d.annotations).collect();
    sort_annotations(&mut out);
    Ok((out, unlinked))
}

pub fn sort_annotations(a: &mut [Annotation]) {
    a.sort_by(|x, y| {
        (&x.doc_id, x.start, x.end, &x.entity).cmp(&(&y.doc_id, y.start, y.end, &y.entity))
    });
}

pub fn write_annotations<W: Write>(anns: &[Annotation], mut w: W) -> Result<()> {
    for a in anns {
        serde_json::to_writer(&mut w, a)?;
        writeln!(w)?;
    }
    Ok(())
}

pub fn read_annotations<R: BufRead>(r: R, source: &str) -> Result<Vec<Annotation>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let a: Annotation = serde_json::from_str(&line).map_err(|e| Error::parse(source, i + 1, e.to_string()))?;
        if a.start > a.end {
            return Err(Error::parse(source, i + 1, "start > end"));
        }
        out.push(a);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::GoldMention;

    fn sp(s: usize, e: usize, ent: &str, score: f64) -> ScoredPair {
        ScoredPair::new(s, e, ent, 0.5, score)
    }

    fn spans(a: &[Annotation]) -> Vec<(usize, usize)> {
        a.iter().map(|a| (a.start, a.end)).collect()
    }

    #[test]
    fn greedy_skips_overlaps() {
        let pairs = [sp(0, 1, "a", 0.9), sp(1, 2, "b", 0.8), sp(3, 3, "c", 0.5)];
        assert_eq!(spans(&greedy_decode("d", &pairs, 0.0)), vec![(0, 1), (3, 3)]);
        assert!(greedy_decode("d", &pairs, 0.9).is_empty());
    }

    #[test]
    fn best_candidate_ties() {
        let mut a = sp(0, 0, "b", 0.3);
        a.prior = 0.9;
        let b = sp(0, 0, "a", 0.3);
        let pairs = [b.clone(), a.clone()];
        assert_eq!(best_per_span(&pairs)[0].entity, "b");
        a.prior = 0.5;
        assert_eq!(best_per_span(&[a, b])[0].entity, "a");
    }

    #[test]
    fn decode_ties_prefer_earlier_then_shorter() {
        let pairs = [sp(2, 3, "x", 0.5), sp(1, 2, "y", 0.5), sp(1, 1, "z", 0.5)];
        let out = greedy_decode("d", &pairs, 0.0);
        assert_eq!(spans(&out), vec![(1, 1), (2, 3)]);
    }

    #[test]
    fn ed_argmax_and_unlinked() {
        let mk = |s, e| MentionSpan {
            doc_id: "d".into(),
            start: s,
            end: e,
            surface: String::new(),
            candidates: vec![],
        };
        let pairs = [sp(0, 0, "a", 0.2), sp(0, 0, "b", 0.7), sp(2, 2, "c", -5.0)];
        let out = decode_ed("d", &[mk(0, 0), mk(2, 2), mk(4, 4)], &pairs);
        assert_eq!(out.annotations.len(), 2);
        assert_eq!(out.annotations[0].entity, "b");
        assert_eq!(out.annotations[1].entity, "c");
        assert_eq!(out.unlinked, vec![(4, 4)]);
    }

    fn gold_of(doc: &str, g: &[(usize, usize, &str)]) -> GoldSet {
        [(doc.to_string(), g.iter().map(|&(s, e, x)| GoldMention::new(s, e, x)).collect())].into()
    }

    #[test]
    fn threshold_separable() {
        let doc = ScoredDocument {
            doc_id: "d".into(),
            pairs: vec![sp(0, 0, "g1", 0.8), sp(2, 2, "g2", 0.6), sp(4, 4, "n", 0.1), sp(6, 6, "n", -0.2)],
        };
        let gold = gold_of("d", &[(0, 0, "g1"), (2, 2, "g2")]);
        let t = select_threshold(&[doc], &gold, Parallelism::Sequential).unwrap();
        assert_eq!(t.micro_f1, 1.0);
        assert_eq!(t.delta, 0.1);
    }

    #[test]
    fn threshold_single_gold() {
        let doc = ScoredDocument {
            doc_id: "d".into(),
            pairs: vec![sp(0, 0, "g", 0.4)],
        };
        let t = select_threshold(&[doc], &gold_of("d", &[(0, 0, "g")]), Parallelism::Sequential).unwrap();
        assert!(t.delta < 0.4);
        assert_eq!(t.micro_f1, 1.0);
    }

    #[test]
    fn threshold_rejects_empty_dev() {
        assert!(select_threshold(&[], &GoldSet::new(), Parallelism::Sequential).is_err());
    }

    #[test]
    fn annotations_round_trip() {
        let a = vec![Annotation {
            doc_id: "d".into(),
            start: 0,
            end: 1,
            entity: "E".into(),
            score: 0.25,
        }];
        let mut buf = Vec::new();
        write_annotations(&a, &mut buf).unwrap();
        assert_eq!(read_annotations(&buf[..], "t").unwrap(), a);
    }
}
