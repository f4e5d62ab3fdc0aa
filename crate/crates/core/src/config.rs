//! Run configuration: one JSON object with flat dotted keys
//! (`"model.use_global": true`) plus `key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::candidates::{DEFAULT_MAX_CANDIDATES, DEFAULT_MAX_SPAN_LEN};
use crate::embeddings::EntityTrainerConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub word_vectors: Option<PathBuf>,
    pub entity_vectors: Option<PathBuf>,
    /// Tab-separated `surface, entity, count` files.
    pub candidate_counts: Vec<PathBuf>,
    /// Prebuilt binary index; takes precedence over `candidate_counts`.
    pub candidate_index: Option<PathBuf>,
    pub train: Option<PathBuf>,
    pub dev: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub train_log: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IndexConfig {
    pub max_candidates: usize,
    pub max_span_len: usize,
}

impl Default for IndexConfig {
    fn default() -> Self {
        IndexConfig {
            max_candidates: DEFAULT_MAX_CANDIDATES,
            max_span_len: DEFAULT_MAX_SPAN_LEN,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Worker threads for per-document work; 0 uses every core.
    pub workers: usize,
    pub paths: Paths,
    pub index: IndexConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub entities: EntityTrainerConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 1,
            workers: 0,
            paths: Paths::default(),
            index: IndexConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            entities: EntityTrainerConfig::default(),
        }
    }
}

fn flatten(prefix: &str, v: &Value, out: &mut Map<String, Value>) {
    match v {
        Value::Object(m) if !m.is_empty() => {
            for (k, x) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, x, out);
            }
        }
        _ => {
            out.insert(prefix.to_string(), v.clone());
        }
    }
}

fn insert_dotted(root: &mut Map<String, Value>, key: &str, value: Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("malformed key {key:?}")));
    }
    let last = parts.pop().expect("split yields one part");
    let mut cur = root;
    for p in parts {
        let slot = cur.entry(p.to_string()).or_insert_with(|| Value::Object(Map::new()));
        cur = slot
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("key {key:?} conflicts with a value at {p:?}")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

impl RunConfig {
    /// Parses the flat dotted-key form. Nested objects are accepted too.
    pub fn from_json(text: &str) -> Result<Self> {
        let v: Value = serde_json::from_str(text).map_err(|e| Error::Config(format!("config JSON: {e}")))?;
        let obj = v.as_object().ok_or_else(|| Error::Config("config must be a JSON object".into()))?;
        let mut flat = Map::new();
        flatten("", &Value::Object(obj.clone()), &mut flat);
        Self::from_flat(flat)
    }

    fn from_flat(flat: Map<String, Value>) -> Result<Self> {
        let mut nested = Map::new();
        for (k, v) in flat {
            insert_dotted(&mut nested, &k, v)?;
        }
        let mut cfg: RunConfig =
            serde_json::from_value(Value::Object(nested)).map_err(|e| Error::Config(e.to_string()))?;
        cfg.train.seed = cfg.seed;
        cfg.entities.seed = cfg.seed;
        Ok(cfg)
    }

    /// Flat dotted-key JSON, keys sorted.
    pub fn to_json(&self) -> Result<String> {
        let v = serde_json::to_value(self)?;
        let mut flat = Map::new();
        flatten("", &v, &mut flat);
        let sorted: std::collections::BTreeMap<_, _> = flat.into_iter().collect();
        Ok(serde_json::to_string_pretty(&sorted)?)
    }

    /// Applies `key=value`; the value is read as JSON when it parses,
    /// otherwise as a string.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let mut flat = Map::new();
        flatten("", &serde_json::to_value(&*self)?, &mut flat);
        let key = key.trim();
        if !flat.contains_key(key) && !flat.keys().any(|k| k.starts_with(&format!("{key}."))) {
            return Err(Error::Config(format!("unknown configuration key {key:?}")));
        }
        flat.retain(|k, _| !k.starts_with(&format!("{key}.")));
        flat.insert(key.to_string(), value);
        *self = Self::from_flat(flat)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text)?;
        if let Some(dir) = path.parent() {
            cfg.resolve_paths(dir);
        }
        Ok(cfg)
    }

    /// Makes relative paths relative to `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        let p = &mut self.paths;
        for slot in [
            &mut p.word_vectors,
            &mut p.entity_vectors,
            &mut p.candidate_index,
            &mut p.train,
            &mut p.dev,
            &mut p.checkpoint,
            &mut p.train_log,
        ] {
            if let Some(x) = slot.as_mut() {
                fix(x);
            }
        }
        p.candidate_counts.iter_mut().for_each(fix);
    }

    /// Required input path, checked to exist.
    pub fn input(&self, which: &str) -> Result<&Path> {
        let p = match which {
            "word_vectors" => &self.paths.word_vectors,
            "entity_vectors" => &self.paths.entity_vectors,
            "candidate_index" => &self.paths.candidate_index,
            "train" => &self.paths.train,
            "dev" => &self.paths.dev,
            "checkpoint" => &self.paths.checkpoint,
            _ => return Err(Error::Config(format!("unknown path key {which:?}"))),
        };
        let p = p
            .as_deref()
            .ok_or_else(|| Error::Config(format!("paths.{which} is not set")))?;
        if !p.exists() {
            return Err(Error::Config(format!("paths.{which}: {} does not exist", p.display())));
        }
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.index.max_candidates == 0 || self.index.max_span_len == 0 {
            return Err(Error::Config("index limits must be positive".into()));
        }
        if [self.model.char_dim, self.model.char_hidden, self.model.context_hidden].contains(&0) {
            return Err(Error::Config("encoder dimensions must be positive".into()));
        }
        Ok(())
    }
}
