mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{random_table, small_config, toy_chars, toy_world};
use e2el_core::autodiff::{grad_check_all, AdamConfig, AdamState, Graph, ParamStore};
use e2el_core::candidates::AliasIndex;
use e2el_core::corpus::{Document, GoldMention};
use e2el_core::embeddings::{
    train_entity_embeddings, CharVocab, Cooccurrence, EntityTrainerConfig, EntityVectors, WordVectors,
};
use e2el_core::encoder::Mode;
use e2el_core::exec::Parallelism;
use e2el_core::model::{Model, ModelConfig, Resources, SpanSet};
use e2el_core::rng::{stream, substream, Stream};
use e2el_core::trainer::{document_loss, train, train_step, violation_sum, TrainConfig};

/// Twenty documents, each mentioning one or two of ten single-candidate
/// surfaces among filler words that are not in the index.
fn unambiguous_world() -> (Resources, Vec<Document>, CharVocab) {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let names: Vec<String> = (0..10).map(|i| format!("name{i}")).collect();
    let fillers = ["the", "visited", "said", "and", "then", "with"];
    let mut keys: Vec<&str> = names.iter().map(String::as_str).collect();
    keys.extend(fillers);
    let words = random_table(&keys, 8, &mut rng);
    let ents: Vec<String> = (0..10).map(|i| format!("E{i}")).collect();
    let entities = random_table(&ents.iter().map(String::as_str).collect::<Vec<_>>(), 8, &mut rng);
    let index = AliasIndex::from_priors(names.iter().zip(&ents).map(|(n, e)| (n.as_str(), e.as_str(), 1.0)), 30, 6)
        .unwrap();
    let mut docs = Vec::new();
    for d in 0..20 {
        let mut tokens = Vec::new();
        let mut gold = Vec::new();
        for _ in 0..rng.gen_range(1..3) {
            tokens.push(fillers[rng.gen_range(0..fillers.len())].to_string());
            let k = rng.gen_range(0..10);
            gold.push(GoldMention::new(tokens.len(), tokens.len(), ents[k].clone()));
            tokens.push(names[k].clone());
        }
        tokens.push(fillers[rng.gen_range(0..fillers.len())].to_string());
        docs.push(Document::new(format!("u{d}"), tokens, Some(gold)).unwrap());
    }
    let chars = CharVocab::from_tokens(keys.iter().copied());
    let res = Resources { words: WordVectors::new(words), entities: EntityVectors::new(entities), index };
    (res, docs, chars)
}

fn corpus_loss(m: &Model<f32>, docs: &[Document], res: &Resources, gamma: f64) -> f64 {
    docs.iter()
        .map(|d| {
            let spans = res.spans(d, SpanSet::AllSpans, true);
            let mut g = Graph::new();
            let mut rng = stream(0, Stream::Dropout);
            let (loss, _) = document_loss(&mut g, m, d, &spans, res, gamma, Mode::Eval, &mut rng).unwrap();
            loss.map_or(0.0, |l| g.scalar_value(l) as f64)
        })
        .sum()
}

fn param_bits(p: &ParamStore<f32>) -> Vec<u32> {
    p.iter().flat_map(|(_, _, t)| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>()).collect()
}

#[test]
fn loss_drops_on_unambiguous_corpus() {
    let (res, docs, chars) = unambiguous_world();
    let m: Model<f32> = Model::new(small_config(), chars, &res, 2).unwrap();
    let cfg = TrainConfig { learning_rate: 1e-2, max_steps: 200, seed: 4, ..TrainConfig::default() };
    let before = corpus_loss(&m, &docs, &res, cfg.gamma);
    assert!(before > 0.0);
    let out = train(m, &docs, &[], &res, &cfg, Parallelism::Sequential, |_| {}).unwrap();
    assert_eq!(out.steps, 200);
    let after = corpus_loss(&out.model, &docs, &res, cfg.gamma);
    assert!(after < 0.1 * before, "loss {before} -> {after}");
}

#[test]
fn patience_one_stops_at_first_stale_evaluation() {
    let (res, docs, chars) = unambiguous_world();
    let m: Model<f32> = Model::new(small_config(), chars, &res, 2).unwrap();
    // an effectively frozen model never improves after its first evaluation
    let cfg = TrainConfig { learning_rate: 1e-12, eval_every: 3, patience: 1, seed: 1, ..TrainConfig::default() };
    let mut evals = Vec::new();
    let out = train(m, &docs[..14], &docs[14..], &res, &cfg, Parallelism::Sequential, |r| {
        if r.dev_macro_f1.is_some() {
            evals.push(r.step);
        }
    })
    .unwrap();
    assert_eq!(evals, vec![3, 6]);
    assert_eq!(out.steps, 6);
    assert!(out.best_dev_macro_f1.is_some());
}

#[test]
fn parameter_trajectories_are_bit_identical() {
    let (res, docs, chars) = unambiguous_world();
    let cfg = TrainConfig { learning_rate: 5e-3, seed: 9, ..TrainConfig::default() };
    let run = || {
        let mut m: Model<f32> = Model::new(small_config(), chars.clone(), &res, 3).unwrap();
        let mut adam = AdamState::new(AdamConfig { learning_rate: cfg.learning_rate, ..AdamConfig::default() }, &m.params);
        let mut trace = Vec::new();
        for step in 0..100 {
            let mut rng = substream(cfg.seed, Stream::Dropout, step);
            train_step(&mut m, &mut adam, &docs[step as usize % docs.len()], &res, &cfg, &mut rng).unwrap();
            trace.push(param_bits(&m.params));
        }
        trace
    };
    assert!(run() == run());

    let full = |par| {
        let m: Model<f32> = Model::new(small_config(), chars.clone(), &res, 3).unwrap();
        let c = TrainConfig { max_steps: 100, eval_every: 25, ..cfg.clone() };
        let out = train(m, &docs[..15], &docs[15..], &res, &c, par, |_| {}).unwrap();
        (param_bits(&out.model.params), out.threshold.to_bits())
    };
    assert_eq!(full(Parallelism::Sequential), full(Parallelism::Parallel));
}

#[test]
fn zero_loss_means_every_constraint_holds() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let gamma = 0.2;
    for _ in 0..500 {
        let n = rng.gen_range(1..6);
        let labelled: Vec<(f64, bool)> = (0..n)
            .map(|_| {
                let gold = rng.gen_bool(0.4);
                let s = if rng.gen_bool(0.5) { [0.0, gamma, -0.1, 0.3][rng.gen_range(0..4)] } else { rng.gen_range(-1.0..1.0) };
                (s, gold)
            })
            .collect();
        let mut g = Graph::<f64>::new();
        let nodes: Vec<_> = labelled.iter().map(|&(s, gold)| (g.scalar(s).unwrap(), gold)).collect();
        let total = violation_sum(&mut g, &nodes, gamma).unwrap().unwrap();
        let loss = g.scalar_value(total);
        let ok = labelled.iter().all(|&(s, gold)| if gold { s >= gamma } else { s <= 0.0 });
        assert_eq!(loss == 0.0, ok, "{labelled:?}");
    }
}

#[test]
fn frozen_entity_vectors_get_no_gradient() {
    let (res, doc) = toy_world(8, 1);
    let before = res.entities.table().clone();
    let mut m: Model<f32> = Model::new(small_config(), toy_chars(&doc), &res, 1).unwrap();
    assert!(m.params.id("entity.table").is_none());
    let cfg = TrainConfig::default();
    let mut adam = AdamState::new(AdamConfig::default(), &m.params);
    for step in 0..10 {
        train_step(&mut m, &mut adam, &doc, &res, &cfg, &mut substream(0, Stream::Dropout, step)).unwrap();
    }
    assert_eq!(res.entities.table(), &before);

    // fine-tuning puts the table in the store and moves only candidate rows
    let cfg_ft = ModelConfig { finetune_entities: true, ..small_config() };
    let m: Model<f32> = Model::new(cfg_ft, toy_chars(&doc), &res, 1).unwrap();
    let table = m.params.id("entity.table").unwrap();
    let spans = res.spans(&doc, SpanSet::AllSpans, true);
    let mut g = Graph::new();
    let mut rng = stream(0, Stream::Dropout);
    let (loss, _) = document_loss(&mut g, &m, &doc, &spans, &res, 0.2, Mode::Eval, &mut rng).unwrap();
    let grads = g.backward(loss.unwrap()).unwrap();
    let gt = grads.param(table).unwrap();
    for (i, key) in res.entities.table().keys().iter().enumerate() {
        let moved = gt.row(i).iter().any(|&x| x != 0.0);
        let candidate = spans.iter().any(|s| s.candidates.iter().any(|c| &c.entity == key));
        assert!(!moved || candidate, "{key}");
    }
}

#[test]
fn gold_span_regime_scores_exactly_the_gold_mentions() {
    let (res, doc) = toy_world(8, 1);
    let spans = res.spans(&doc, SpanSet::GoldSpans, true);
    let got: Vec<(usize, usize)> = spans.iter().map(|s| (s.start, s.end)).collect();
    let want: Vec<(usize, usize)> = doc.gold().iter().map(|m| (m.start, m.end)).collect();
    assert_eq!(got, want);

    let m: Model<f32> = Model::new(small_config(), toy_chars(&doc), &res, 1).unwrap();
    let scored = m.score_spans(&doc, &spans, &res).unwrap();
    assert!(scored.iter().all(|p| want.contains(&p.span())));
    let all = res.spans(&doc, SpanSet::AllSpans, true);
    assert!(all.len() > spans.len());
}

#[test]
fn document_loss_gradients() {
    let (res, doc) = toy_world(6, 3);
    let cfg = ModelConfig {
        char_dim: 3,
        char_hidden: 3,
        context_hidden: 4,
        finetune_entities: true,
        ..ModelConfig::default()
    };
    let m: Model<f64> = Model::new(cfg, toy_chars(&doc), &res, 8).unwrap();
    let spans: Vec<_> = res.spans(&doc, SpanSet::AllSpans, true).into_iter().take(3).collect();
    assert_eq!(spans.len(), 3);
    // push every hinge into its linear region so the check is smooth
    let build = |g: &mut Graph<f64>, store: &ParamStore<f64>| {
        let mut local = m.clone();
        local.params = store.clone();
        let mut rng = stream(0, Stream::Dropout);
        let (loss, _) = document_loss(g, &local, &doc, &spans, &res, 50.0, Mode::Eval, &mut rng)?;
        Ok(loss.expect("scorable spans"))
    };
    let (err, name) = grad_check_all(&m.params, 1e-5, build).unwrap();
    assert!(err < 1e-4, "{name:?}: {err}");
}

#[test]
fn entity_vectors_are_unit_and_reproducible() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let keys: Vec<String> = (0..30).map(|i| format!("w{i}")).collect();
    let words = WordVectors::new(random_table(&keys.iter().map(String::as_str).collect::<Vec<_>>(), 8, &mut rng));
    let profile: Vec<(String, f64)> = vec![("w1".into(), 3.0), ("w4".into(), 1.0), ("w9".into(), 2.0)];
    let mut corpus = Cooccurrence::new();
    corpus.insert("A".into(), profile.clone());
    corpus.insert("B".into(), vec![("w2".into(), 1.0), ("w3".into(), 5.0)]);
    let cfg = EntityTrainerConfig { dim: 8, steps: 300, seed: 12, ..EntityTrainerConfig::default() };
    let a = train_entity_embeddings(&corpus, &words, &cfg, Parallelism::Parallel).unwrap();
    let b = train_entity_embeddings(&corpus, &words, &cfg, Parallelism::Sequential).unwrap();
    for e in ["A", "B"] {
        let v = a.get(e).unwrap();
        let norm = v.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-5);
        assert_eq!(v, b.get(e).unwrap());
    }

    // the same profile with the same seed, alone, gives the same vector
    let mut only_a = Cooccurrence::new();
    only_a.insert("A".into(), profile);
    let c = train_entity_embeddings(&only_a, &words, &cfg, Parallelism::Sequential).unwrap();
    assert_eq!(a.get("A"), c.get("A"));
}
