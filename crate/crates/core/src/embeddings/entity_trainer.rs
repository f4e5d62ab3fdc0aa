//! Desk-scale entity embedding trainer.
//!
//! Each entity vector is fitted in isolation so that words co-occurring with
//! the entity (sampled in proportion to their counts) score higher under the
//! dot product than uniformly drawn vocabulary words, by a margin.

use std::collections::BTreeMap;
use std::io::BufRead;

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{EntityVectors, VectorTable, WordVectors};
use crate::error::{Error, Result};
use crate::exec::Parallelism;
use crate::rng::{key_hash, substream, Stream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EntityTrainerConfig {
    pub dim: usize,
    pub margin: f64,
    pub negatives: usize,
    pub steps: usize,
    pub learning_rate: f64,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for EntityTrainerConfig {
    fn default() -> Self {
        EntityTrainerConfig {
            dim: 300,
            margin: 0.1,
            negatives: 5,
            steps: 2000,
            learning_rate: 0.05,
            seed: 17,
        }
    }
}

/// Entity to (word, count) co-occurrence lists.
pub type Cooccurrence = BTreeMap<String, Vec<(String, f64)>>;

/// Reads `entity<TAB>word<TAB>count` lines.
pub fn read_cooccurrence<R: BufRead>(reader: R, source: &str) -> Result<Cooccurrence> {
    let mut out = Cooccurrence::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 3 {
            return Err(Error::parse(source, i + 1, "expected entity<TAB>word<TAB>count"));
        }
        let c: f64 = f[2]
            .trim()
            .parse()
            .map_err(|_| Error::parse(source, i + 1, format!("bad count {:?}", f[2])))?;
        if !(c > 0.0 && c.is_finite()) {
            return Err(Error::parse(source, i + 1, "count must be positive"));
        }
        out.entry(f[0].to_string()).or_default().push((f[1].to_string(), c));
    }
    Ok(out)
}

fn unit_random(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 0.0 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Trains one entity vector from `(word row, count)` pairs. The vector is
/// initialised to a random unit vector from `rng` and renormalised after
/// every step.
pub fn train_entity_vector(
    counts: &[(usize, f64)],
    words: &WordVectors,
    cfg: &EntityTrainerConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f32>> {
    if counts.is_empty() {
        return Err(Error::InvalidArgument("empty co-occurrence list".into()));
    }
    if words.dim() != cfg.dim {
        return Err(Error::shape(
            "train_entity_vector",
            format!("word dim {} vs entity dim {}", words.dim(), cfg.dim),
        ));
    }
    let table = words.table();
    let vocab = table.len();
    let mut y = unit_random(cfg.dim, rng);
    let positives = WeightedIndex::new(counts.iter().map(|c| c.1))
        .map_err(|e| Error::InvalidArgument(format!("co-occurrence weights: {e}")))?;
    let mut grad = vec![0.0f64; cfg.dim];
    for _ in 0..cfg.steps {
        let pos = table.row(counts[positives.sample(rng)].0);
        let pos_score: f64 = pos.iter().zip(&y).map(|(&a, b)| a as f64 * b).sum();
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut active = false;
        for _ in 0..cfg.negatives {
            let neg = table.row(rng.gen_range(0..vocab));
            let neg_score: f64 = neg.iter().zip(&y).map(|(&a, b)| a as f64 * b).sum();
            if cfg.margin - pos_score + neg_score > 0.0 {
                active = true;
                for ((g, &p), &n) in grad.iter_mut().zip(pos).zip(neg) {
                    *g += n as f64 - p as f64;
                }
            }
        }
        if !active {
            continue;
        }
        for (yi, gi) in y.iter_mut().zip(&grad) {
            *yi -= cfg.learning_rate * gi;
        }
        let n = y.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 0.0 {
            y.iter_mut().for_each(|x| *x /= n);
        }
    }
    Ok(y.into_iter().map(|x| x as f32).collect())
}

/// Trains every entity in `corpus`. Entity `e` draws from its own random
/// stream keyed by its id, so results do not depend on the execution mode.
pub fn train_entity_embeddings(
    corpus: &Cooccurrence,
    words: &WordVectors,
    cfg: &EntityTrainerConfig,
    par: Parallelism,
) -> Result<EntityVectors> {
    let entries: Vec<(&String, &Vec<(String, f64)>)> = corpus.iter().collect();
    let rows = par.try_map(&entries, |(entity, list)| {
        let mut counts = Vec::with_capacity(list.len());
        for (w, c) in list.iter() {
            let row = words
                .table()
                .row_of(w)
                .ok_or_else(|| Error::InvalidArgument(format!("word {w:?} (entity {entity:?}) has no vector")))?;
            counts.push((row, *c));
        }
        if counts.is_empty() {
            return Err(Error::InvalidArgument(format!("entity {entity:?} has no co-occurring words")));
        }
        let mut rng = substream(cfg.seed, Stream::EntityTraining, key_hash(entity));
        train_entity_vector(&counts, words, cfg, &mut rng).map(|v| ((*entity).clone(), v))
    })?;
    Ok(EntityVectors::new(VectorTable::from_rows(cfg.dim, rows)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn words() -> WordVectors {
        let t = VectorTable::from_rows(
            2,
            vec![("a", vec![1.0, 0.0]), ("b", vec![0.0, 1.0]), ("c", vec![-1.0, 0.0])],
        )
        .unwrap();
        WordVectors::new(t)
    }

    #[test]
    fn zero_steps_returns_initialisation() {
        let cfg = EntityTrainerConfig {
            dim: 2,
            steps: 0,
            ..Default::default()
        };
        let mut r1 = ChaCha8Rng::seed_from_u64(4);
        let v = train_entity_vector(&[(0, 1.0)], &words(), &cfg, &mut r1).unwrap();
        let mut r2 = ChaCha8Rng::seed_from_u64(4);
        let init = unit_random(2, &mut r2);
        assert_eq!(v, init.iter().map(|&x| x as f32).collect::<Vec<_>>());
    }

    #[test]
    fn empty_list_is_an_error() {
        let cfg = EntityTrainerConfig {
            dim: 2,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(train_entity_vector(&[], &words(), &cfg, &mut rng).is_err());
    }

    #[test]
    fn parses_cooccurrence() {
        let c = read_cooccurrence("E1\ta\t3\nE1\tb\t1\nE2\tc\t2\n".as_bytes(), "t").unwrap();
        assert_eq!(c["E1"].len(), 2);
        assert!(read_cooccurrence("E1\ta\t0\n".as_bytes(), "t").is_err());
        assert!(read_cooccurrence("E1\ta\n".as_bytes(), "t").is_err());
    }
}
