//! Seeded toy worlds: embeddings, an alias index and annotated documents.

use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::candidates::AliasIndex;
use crate::corpus::{Document, GoldMention};
use crate::embeddings::{CharVocab, Cooccurrence, EntityVectors, VectorTable, WordVectors};
use crate::error::Result;
use crate::model::Resources;
use crate::rng::{stream, Stream};

/// Everything needed to train and evaluate on a generated corpus.
#[derive(Clone, Debug)]
pub struct World {
    pub resources: Resources,
    pub train: Vec<Document>,
    pub dev: Vec<Document>,
    pub test: Vec<Document>,
    /// `(surface, entity, count)` rows the index was built from.
    pub counts: Vec<(String, String, u64)>,
}

impl World {
    pub fn char_vocab(&self) -> CharVocab {
        let docs = self.train.iter().chain(&self.dev).chain(&self.test);
        CharVocab::from_tokens(docs.flat_map(|d| d.tokens.iter().map(String::as_str)))
    }
}

fn unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f32> {
    let v: Vec<f32> = (0..dim).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
    normalize(v)
}

fn normalize(v: Vec<f32>) -> Vec<f32> {
    let n = v.iter().map(|x| x * x).sum::<f32>().sqrt().max(1e-12);
    v.into_iter().map(|x| x / n).collect()
}

/// `normalize(center + noise * u)` for a random unit `u`.
fn near(rng: &mut ChaCha8Rng, center: &[f32], noise: f32) -> Vec<f32> {
    let u = unit(rng, center.len());
    normalize(center.iter().zip(u).map(|(c, x)| c + noise * x).collect())
}

struct Names {
    used: HashSet<String>,
}

impl Names {
    fn new() -> Self {
        Names { used: HashSet::new() }
    }

    fn fresh(&mut self, rng: &mut ChaCha8Rng, prefix: &str) -> String {
        loop {
            let len = rng.gen_range(4..8);
            let s: String = (0..len).map(|_| rng.gen_range(b'a'..=b'z') as char).collect();
            let s = format!("{prefix}{s}");
            if self.used.insert(s.clone()) {
                return s;
            }
        }
    }
}

fn index_from(counts: &[(String, String, u64)]) -> Result<AliasIndex> {
    AliasIndex::from_counts(counts.iter().map(|(s, e, c)| (s.as_str(), e.as_str(), *c)), 30, 6)
}

#[derive(Clone, Debug)]
pub struct OverfitSpec {
    pub documents: usize,
    pub surfaces: usize,
    pub dim: usize,
    pub mentions_per_doc: usize,
    pub seed: u64,
}

impl Default for OverfitSpec {
    fn default() -> Self {
        OverfitSpec {
            documents: 24,
            surfaces: 12,
            dim: 16,
            mentions_per_doc: 3,
            seed: 7,
        }
    }
}

/// Ambiguous surfaces with 2 to 4 candidates each (some of them two
/// tokens long). Each entity owns a few context words whose vectors lie
/// near its embedding; a mention is flanked by words of its gold entity.
/// Priors are random, so the gold entity is often not the most frequent.
pub fn overfit_corpus(spec: &OverfitSpec) -> Result<World> {
    let mut rng = stream(spec.seed, Stream::Synthetic);
    let mut names = Names::new();
    let d = spec.dim;
    let mut words = VectorTable::new(d);
    let mut entities = VectorTable::new(d);
    let mut counts = Vec::new();
    // (surface tokens, entities)
    let mut surfaces: Vec<(Vec<String>, Vec<String>)> = Vec::new();
    let mut context: BTreeMap<String, Vec<String>> = BTreeMap::new();

    for s in 0..spec.surfaces {
        let n_tok = if s % 4 == 3 { 2 } else { 1 };
        let toks: Vec<String> = (0..n_tok).map(|_| names.fresh(&mut rng, "")).collect();
        for t in &toks {
            let v = unit(&mut rng, d);
            words.push(t.clone(), &v)?;
        }
        let k = 2 + s % 3;
        let mut ents = Vec::new();
        for _ in 0..k {
            let e = format!("E_{}", names.fresh(&mut rng, ""));
            let y = unit(&mut rng, d);
            entities.push(e.clone(), &y)?;
            let mut ctx = Vec::new();
            for _ in 0..3 {
                let w = names.fresh(&mut rng, "");
                words.push(w.clone(), &near(&mut rng, &y, 0.3))?;
                ctx.push(w);
            }
            context.insert(e.clone(), ctx);
            counts.push((toks.join(" "), e.clone(), rng.gen_range(1..10)));
            ents.push(e);
        }
        surfaces.push((toks, ents));
    }
    let filler: Vec<String> = (0..20).map(|_| names.fresh(&mut rng, "")).collect();
    for f in &filler {
        words.push(f.clone(), &unit(&mut rng, d))?;
    }

    // every (surface, entity) pair appears at least once
    let mut pool: Vec<(usize, usize)> = surfaces
        .iter()
        .enumerate()
        .flat_map(|(i, (_, es))| (0..es.len()).map(move |j| (i, j)))
        .collect();
    pool.shuffle(&mut rng);
    let mut docs = Vec::new();
    for di in 0..spec.documents {
        let mut tokens: Vec<String> = Vec::new();
        let mut gold = Vec::new();
        let mut used_surfaces = HashSet::new();
        for mi in 0..spec.mentions_per_doc {
            let slot = di * spec.mentions_per_doc + mi;
            let (si, ei) = if slot < pool.len() && !used_surfaces.contains(&pool[slot].0) {
                pool[slot]
            } else {
                loop {
                    let si = rng.gen_range(0..surfaces.len());
                    if !used_surfaces.contains(&si) {
                        break (si, rng.gen_range(0..surfaces[si].1.len()));
                    }
                }
            };
            used_surfaces.insert(si);
            let (toks, ents) = &surfaces[si];
            let e = &ents[ei];
            let ctx = &context[e];
            tokens.push(filler.choose(&mut rng).expect("filler").clone());
            tokens.push(ctx[rng.gen_range(0..ctx.len())].clone());
            let start = tokens.len();
            tokens.extend(toks.iter().cloned());
            gold.push(GoldMention::new(start, tokens.len() - 1, e.clone()));
            tokens.push(ctx[rng.gen_range(0..ctx.len())].clone());
        }
        tokens.push(filler.choose(&mut rng).expect("filler").clone());
        docs.push(Document::new(format!("toy{di:03}"), tokens, Some(gold))?);
    }

    Ok(World {
        resources: Resources {
            words: WordVectors::new(words),
            entities: EntityVectors::new(entities),
            index: index_from(&counts)?,
        },
        train: docs,
        dev: Vec::new(),
        test: Vec::new(),
        counts,
    })
}

#[derive(Clone, Debug)]
pub struct GlobalSpec {
    pub topics: usize,
    pub dim: usize,
    pub unambiguous_per_topic: usize,
    pub ambiguous_surfaces: usize,
    pub train_docs: usize,
    pub dev_docs: usize,
    pub test_docs: usize,
    pub seed: u64,
}

impl Default for GlobalSpec {
    fn default() -> Self {
        GlobalSpec {
            topics: 4,
            dim: 16,
            unambiguous_per_topic: 6,
            ambiguous_surfaces: 8,
            train_docs: 200,
            dev_docs: 30,
            test_docs: 60,
            seed: 11,
        }
    }
}

/// Topic-clustered entities. Every ambiguous surface has one candidate in
/// each topic with equal priors and no word vector, and surfaces are picked
/// independently of the topic, so nothing local tells the candidates apart.
/// Each document has one topic, two unambiguous mentions of that topic and
/// three ambiguous ones resolved to it. Dev and test documents use fresh
/// out-of-vocabulary surfaces for the unambiguous entities.
pub fn global_corpus(spec: &GlobalSpec) -> Result<World> {
    let mut rng = stream(spec.seed, Stream::Synthetic);
    let mut names = Names::new();
    let d = spec.dim;
    let centers: Vec<Vec<f32>> = (0..spec.topics).map(|_| unit(&mut rng, d)).collect();
    let mut entities = VectorTable::new(d);
    let mut counts = Vec::new();

    // per topic: (train surface, held-out surface, entity)
    let mut unamb: Vec<Vec<(String, String, String)>> = vec![Vec::new(); spec.topics];
    for (t, c) in centers.iter().enumerate() {
        for _ in 0..spec.unambiguous_per_topic {
            let e = format!("U_{}", names.fresh(&mut rng, ""));
            entities.push(e.clone(), &near(&mut rng, c, 0.5))?;
            let train_s = names.fresh(&mut rng, "");
            let held_s = names.fresh(&mut rng, "");
            counts.push((train_s.clone(), e.clone(), 5));
            counts.push((held_s.clone(), e.clone(), 5));
            unamb[t].push((train_s, held_s, e));
        }
    }
    // surface, candidate per topic
    let mut amb: Vec<(String, Vec<String>)> = Vec::new();
    for _ in 0..spec.ambiguous_surfaces {
        let s = names.fresh(&mut rng, "");
        let mut per_topic = Vec::new();
        for c in &centers {
            let e = format!("A_{}", names.fresh(&mut rng, ""));
            entities.push(e.clone(), &near(&mut rng, c, 0.5))?;
            counts.push((s.clone(), e.clone(), 5));
            per_topic.push(e);
        }
        amb.push((s, per_topic));
    }
    let mut words = VectorTable::new(d);
    let filler: Vec<String> = (0..30).map(|_| names.fresh(&mut rng, "")).collect();
    for f in &filler {
        words.push(f.clone(), &unit(&mut rng, d))?;
    }

    let make = |prefix: &str, n: usize, held_out: bool, rng: &mut ChaCha8Rng| -> Result<Vec<Document>> {
        let mut docs = Vec::with_capacity(n);
        for di in 0..n {
            let t = rng.gen_range(0..spec.topics);
            let mut mentions: Vec<(String, String)> = unamb[t]
                .choose_multiple(rng, 2)
                .map(|(tr, ho, e)| (if held_out { ho.clone() } else { tr.clone() }, e.clone()))
                .collect();
            for (s, per_topic) in amb.choose_multiple(rng, 3) {
                mentions.push((s.clone(), per_topic[t].clone()));
            }
            mentions.shuffle(rng);
            let mut tokens = Vec::new();
            let mut gold = Vec::new();
            for (s, e) in mentions {
                for _ in 0..rng.gen_range(1..=3) {
                    tokens.push(filler.choose(rng).expect("filler").clone());
                }
                gold.push(GoldMention::new(tokens.len(), tokens.len(), e));
                tokens.push(s);
            }
            tokens.push(filler.choose(rng).expect("filler").clone());
            docs.push(Document::new(format!("{prefix}{di:03}"), tokens, Some(gold))?);
        }
        Ok(docs)
    };
    let train = make("train", spec.train_docs, false, &mut rng)?;
    let dev = make("dev", spec.dev_docs, true, &mut rng)?;
    let test = make("test", spec.test_docs, true, &mut rng)?;

    Ok(World {
        resources: Resources {
            words: WordVectors::new(words),
            entities: EntityVectors::new(entities),
            index: index_from(&counts)?,
        },
        train,
        dev,
        test,
        counts,
    })
}

/// Five entities over a twenty-word vocabulary. Entity `i` co-occurs
/// mostly with word `4 i`, a little with three other words, and never with
/// the rest. Returns the counts, the word vectors and each entity's
/// dominant word.
pub fn cooccurrence_corpus(dim: usize, seed: u64) -> Result<(Cooccurrence, WordVectors, BTreeMap<String, String>)> {
    let mut rng = stream(seed, Stream::Synthetic);
    let vocab: Vec<String> = (0..20).map(|i| format!("w{i:02}")).collect();
    let mut table = VectorTable::new(dim);
    for w in &vocab {
        table.push(w.clone(), &unit(&mut rng, dim))?;
    }
    let mut co = Cooccurrence::new();
    let mut dominant = BTreeMap::new();
    for e in 0..5 {
        let name = format!("ent{e}");
        let main = 4 * e;
        let mut rows = vec![(vocab[main].clone(), 40.0)];
        for k in 1..4 {
            rows.push((vocab[(main + k) % 20].clone(), rng.gen_range(1..5) as f64));
        }
        dominant.insert(name.clone(), vocab[main].clone());
        co.insert(name, rows);
    }
    Ok((co, WordVectors::new(table), dominant))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overfit_world_shape() {
        let w = overfit_corpus(&OverfitSpec::default()).unwrap();
        assert!(w.train.len() >= 20);
        assert!(w.resources.entities.table().len() >= 30);
        for d in &w.train {
            for g in d.gold() {
                let c = w.resources.index.lookup(&d.surface(g.start, g.end));
                assert!((2..=4).contains(&c.len()));
                assert!(c.iter().any(|x| x.entity == g.entity));
            }
        }
    }

    #[test]
    fn global_world_shape() {
        let spec = GlobalSpec::default();
        let w = global_corpus(&spec).unwrap();
        let train_tokens: HashSet<&str> = w.train.iter().flat_map(|d| d.tokens.iter().map(String::as_str)).collect();
        for d in &w.test {
            let mut amb = 0;
            for g in d.gold() {
                let s = &d.tokens[g.start];
                let c = w.resources.index.lookup(s);
                assert!(c.iter().any(|x| x.entity == g.entity));
                if c.len() == 1 {
                    assert!(!train_tokens.contains(s.as_str()));
                    assert!(!w.resources.words.contains(s));
                } else {
                    assert_eq!(c.len(), spec.topics);
                    amb += 1;
                }
            }
            assert_eq!(amb, 3);
        }
    }

    #[test]
    fn generators_are_seeded() {
        let a = global_corpus(&GlobalSpec::default()).unwrap();
        let b = global_corpus(&GlobalSpec::default()).unwrap();
        assert_eq!(a.test, b.test);
        assert_eq!(a.counts, b.counts);
    }
}
