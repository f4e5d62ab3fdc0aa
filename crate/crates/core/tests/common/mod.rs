#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use e2el_core::candidates::AliasIndex;
use e2el_core::corpus::{Document, GoldMention};
use e2el_core::embeddings::{CharVocab, EntityVectors, VectorTable, WordVectors};
use e2el_core::model::{ModelConfig, Resources};

pub fn toks(s: &str) -> Vec<String> {
    s.split_whitespace().map(String::from).collect()
}

pub fn random_table(keys: &[&str], dim: usize, rng: &mut ChaCha8Rng) -> VectorTable {
    let mut t = VectorTable::new(dim);
    for k in keys {
        let v: Vec<f32> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        t.push(k.to_string(), &v).unwrap();
    }
    t
}

/// A seven-token document with nested and repeated ambiguous surfaces.
pub fn toy_world(dim: usize, seed: u64) -> (Resources, Document) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let doc = Document::new(
        "toy",
        toks("barack obama met paris hilton in paris"),
        Some(vec![
            GoldMention::new(0, 1, "Barack_Obama"),
            GoldMention::new(3, 4, "Paris_Hilton"),
            GoldMention::new(6, 6, "Paris"),
        ]),
    )
    .unwrap();
    let words = random_table(&["barack", "obama", "met", "paris", "hilton", "in"], dim, &mut rng);
    let entities = random_table(
        &["Barack_Obama", "Obama_Inc", "Obama_Family", "Paris", "Paris_Hilton", "Paris_Texas"],
        dim,
        &mut rng,
    );
    let index = AliasIndex::from_priors(
        [
            ("barack obama", "Barack_Obama", 0.9),
            ("barack obama", "Obama_Inc", 0.1),
            ("obama", "Barack_Obama", 0.7),
            ("obama", "Obama_Family", 0.3),
            ("paris", "Paris", 0.6),
            ("paris", "Paris_Hilton", 0.3),
            ("paris", "Paris_Texas", 0.1),
            ("paris hilton", "Paris_Hilton", 1.0),
        ],
        30,
        6,
    )
    .unwrap();
    let res = Resources {
        words: WordVectors::new(words),
        entities: EntityVectors::new(entities),
        index,
    };
    (res, doc)
}

pub fn toy_chars(doc: &Document) -> CharVocab {
    CharVocab::from_tokens(doc.tokens.iter().map(String::as_str))
}

/// Desk-scale encoder sizes.
pub fn small_config() -> ModelConfig {
    ModelConfig {
        char_dim: 8,
        char_hidden: 8,
        context_hidden: 16,
        ..ModelConfig::default()
    }
}
