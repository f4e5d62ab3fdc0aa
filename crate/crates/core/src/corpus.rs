//! Documents and the two corpus readers (JSON-lines, CoNLL/AIDA).

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Gold annotation: inclusive token interval and entity id.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GoldMention {
    pub start: usize,
    pub end: usize,
    pub entity: String,
}

impl GoldMention {
    pub fn new(start: usize, end: usize, entity: impl Into<String>) -> Self {
        GoldMention {
            start,
            end,
            entity: entity.into(),
        }
    }
}

impl Serialize for Document {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let raw = RawDocument {
            doc_id: self.doc_id.clone(),
            tokens: self.tokens.clone(),
            gold: self
                .gold
                .as_ref()
                .map(|g| g.iter().map(|m| (m.start, m.end, m.entity.clone())).collect()),
        };
        raw.serialize(s)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDocument {
    doc_id: String,
    tokens: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gold: Option<Vec<(usize, usize, String)>>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Document {
    pub doc_id: String,
    pub tokens: Vec<String>,
    pub gold: Option<Vec<GoldMention>>,
}

impl Document {
    pub fn new(doc_id: impl Into<String>, tokens: Vec<String>, gold: Option<Vec<GoldMention>>) -> Result<Self> {
        let d = Document {
            doc_id: doc_id.into(),
            tokens,
            gold,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        if self.tokens.is_empty() {
            return Err(Error::InvalidArgument(format!("document {:?} has no tokens", self.doc_id)));
        }
        if let Some(g) = &self.gold {
            let mut seen = HashSet::new();
            for m in g {
                if m.start > m.end || m.end >= self.tokens.len() {
                    return Err(Error::InvalidArgument(format!(
                        "document {:?}: gold span [{}, {}] outside {} tokens",
                        self.doc_id,
                        m.start,
                        m.end,
                        self.tokens.len()
                    )));
                }
                if !seen.insert(m) {
                    return Err(Error::InvalidArgument(format!(
                        "document {:?}: duplicate gold span [{}, {}, {}]",
                        self.doc_id, m.start, m.end, m.entity
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn gold(&self) -> &[GoldMention] {
        self.gold.as_deref().unwrap_or(&[])
    }

    /// Tokens `start..=end` joined by single spaces.
    pub fn surface(&self, start: usize, end: usize) -> String {
        self.tokens[start..=end].join(" ")
    }
}

/// Per-document gold annotations keyed by document id.
pub type GoldSet = BTreeMap<String, Vec<GoldMention>>;

pub fn gold_set(docs: &[Document]) -> GoldSet {
    docs.iter().map(|d| (d.doc_id.clone(), d.gold().to_vec())).collect()
}

pub fn read_jsonl<R: BufRead>(reader: R, source: &str) -> Result<Vec<Document>> {
    let mut docs = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawDocument =
            serde_json::from_str(&line).map_err(|e| Error::parse(source, i + 1, format!("schema: {e}")))?;
        let gold = raw
            .gold
            .map(|g| g.into_iter().map(|(s, e, ent)| GoldMention::new(s, e, ent)).collect());
        let doc = Document {
            doc_id: raw.doc_id,
            tokens: raw.tokens,
            gold,
        };
        doc.validate().map_err(|e| Error::parse(source, i + 1, e.to_string()))?;
        docs.push(doc);
    }
    Ok(docs)
}

pub fn parse_corpus_jsonl(path: &Path) -> Result<Vec<Document>> {
    read_jsonl(BufReader::new(File::open(path)?), &path.display().to_string())
}

pub fn write_jsonl<W: Write>(docs: &[Document], mut w: W) -> Result<()> {
    for d in docs {
        serde_json::to_writer(&mut w, d)?;
        writeln!(w)?;
    }
    Ok(())
}

const NIL_MARKERS: [&str; 2] = ["--NME--", "NIL"];

/// Reads token-per-line CoNLL/AIDA data.
///
/// A line is `token` alone, or `token<TAB>B|I<TAB>...` with the entity in the
/// fourth column (AIDA layout) or, for three-column files, the third.
/// `-DOCSTART-` lines open a new document (the parenthesised suffix, if any,
/// becomes its id); blank lines are sentence breaks and are ignored. Mentions
/// whose entity is a NIL marker are dropped.
pub fn read_conll<R: BufRead>(reader: R, source: &str) -> Result<Vec<Document>> {
    struct Open {
        start: usize,
        entity: String,
    }
    struct Building {
        id: String,
        tokens: Vec<String>,
        gold: Vec<GoldMention>,
        open: Option<Open>,
    }
    fn close(b: &mut Building) {
        if let Some(o) = b.open.take() {
            if !NIL_MARKERS.contains(&o.entity.as_str()) {
                b.gold.push(GoldMention::new(o.start, b.tokens.len() - 1, o.entity));
            }
        }
    }
    fn finish(b: Option<Building>, out: &mut Vec<Document>) {
        if let Some(mut b) = b {
            close(&mut b);
            if !b.tokens.is_empty() {
                out.push(Document {
                    doc_id: b.id,
                    tokens: b.tokens,
                    gold: Some(b.gold),
                });
            }
        }
    }

    let mut docs = Vec::new();
    let mut cur: Option<Building> = None;
    let mut count = 0usize;
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line?;
        let line = line.trim_end_matches('\r');
        if line.starts_with("-DOCSTART-") {
            finish(cur.take(), &mut docs);
            count += 1;
            let id = match (line.find('('), line.rfind(')')) {
                (Some(a), Some(b)) if b > a + 1 => line[a + 1..b].to_string(),
                _ => format!("doc{count}"),
            };
            cur = Some(Building {
                id,
                tokens: Vec::new(),
                gold: Vec::new(),
                open: None,
            });
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let b = cur.get_or_insert_with(|| {
            count += 1;
            Building {
                id: format!("doc{count}"),
                tokens: Vec::new(),
                gold: Vec::new(),
                open: None,
            }
        });
        let f: Vec<&str> = line.split('\t').collect();
        let token = f[0].to_string();
        match f.get(1).map(|t| t.trim()) {
            None | Some("") | Some("O") => {
                close(b);
                b.tokens.push(token);
            }
            Some(tag @ ("B" | "I")) => {
                let entity = match f.len() {
                    0..=2 => None,
                    3 => Some(f[2]),
                    _ => Some(f[3]),
                }
                .map(str::trim)
                .filter(|e| !e.is_empty())
                .ok_or_else(|| Error::parse(source, lineno, "linked token without entity"))?;
                if tag == "B" {
                    close(b);
                    b.open = Some(Open {
                        start: b.tokens.len(),
                        entity: entity.to_string(),
                    });
                } else {
                    match &b.open {
                        Some(o) if o.entity == entity => {}
                        Some(_) => return Err(Error::parse(source, lineno, "I tag changes entity inside a mention")),
                        None => return Err(Error::parse(source, lineno, "I tag without preceding B tag")),
                    }
                }
                b.tokens.push(token);
            }
            Some(other) => {
                return Err(Error::parse(source, lineno, format!("unknown tag {other:?}")));
            }
        }
    }
    finish(cur, &mut docs);
    Ok(docs)
}

pub fn parse_conll_aida(path: &Path) -> Result<Vec<Document>> {
    read_conll(BufReader::new(File::open(path)?), &path.display().to_string())
}
