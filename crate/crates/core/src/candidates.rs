//! The empirical mention-entity map `p(e|m)`: building it from alias count
//! files, candidate lookup, span enumeration and the coreference heuristic.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::Serialize;

use crate::corpus::Document;
use crate::embeddings::{read_u16, read_u32};
use crate::error::{Error, Result};

const INDEX_MAGIC: &[u8; 4] = b"E2EA";

pub const DEFAULT_MAX_CANDIDATES: usize = 30;
pub const DEFAULT_MAX_SPAN_LEN: usize = 6;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CandidateEntry {
    pub entity: String,
    pub prior: f64,
}

impl CandidateEntry {
    pub fn new(entity: impl Into<String>, prior: f64) -> Self {
        CandidateEntry {
            entity: entity.into(),
            prior,
        }
    }
}

/// Trim and collapse internal whitespace runs; case is preserved.
pub fn normalize_surface(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn sort_entries(list: &mut [CandidateEntry]) {
    list.sort_by(|a, b| b.prior.total_cmp(&a.prior).then_with(|| a.entity.cmp(&b.entity)));
}

#[derive(Clone, Debug, PartialEq)]
pub struct AliasIndex {
    map: HashMap<String, Vec<CandidateEntry>>,
    max_candidates: usize,
    max_span_len: usize,
}

impl AliasIndex {
    pub fn empty(max_candidates: usize, max_span_len: usize) -> Self {
        AliasIndex {
            map: HashMap::new(),
            max_candidates,
            max_span_len,
        }
    }

    /// Builds from `(surface, entity, count)` triples. Counts for the same
    /// pair are summed; priors are count over surface total, computed before
    /// truncation to `max_candidates` and not renormalised afterwards.
    pub fn from_counts<I, S, E>(triples: I, max_candidates: usize, max_span_len: usize) -> Result<Self>
    where
        I: IntoIterator<Item = (S, E, u64)>,
        S: AsRef<str>,
        E: Into<String>,
    {
        if max_candidates == 0 || max_span_len == 0 {
            return Err(Error::InvalidArgument("max candidates and max span length must be positive".into()));
        }
        let mut counts: HashMap<String, BTreeMap<String, u64>> = HashMap::new();
        for (s, e, c) in triples {
            if c == 0 {
                return Err(Error::InvalidArgument("zero count".into()));
            }
            let surface = normalize_surface(s.as_ref());
            if surface.is_empty() {
                continue;
            }
            *counts.entry(surface).or_default().entry(e.into()).or_default() += c;
        }
        let map = counts
            .into_iter()
            .map(|(surface, ents)| {
                let total: u64 = ents.values().sum();
                let mut list: Vec<CandidateEntry> = ents
                    .into_iter()
                    .map(|(e, c)| CandidateEntry::new(e, c as f64 / total as f64))
                    .collect();
                sort_entries(&mut list);
                list.truncate(max_candidates);
                (surface, list)
            })
            .collect();
        Ok(AliasIndex {
            map,
            max_candidates,
            max_span_len,
        })
    }

    /// Builds from already-normalised `(surface, entity, prior)` triples.
    pub fn from_priors<I, S, E>(triples: I, max_candidates: usize, max_span_len: usize) -> Result<Self>
    where
        I: IntoIterator<Item = (S, E, f64)>,
        S: AsRef<str>,
        E: Into<String>,
    {
        let mut map: HashMap<String, Vec<CandidateEntry>> = HashMap::new();
        for (s, e, p) in triples {
            if !(p > 0.0 && p <= 1.0) {
                return Err(Error::InvalidArgument(format!("prior {p} outside (0, 1]")));
            }
            let surface = normalize_surface(s.as_ref());
            let list = map.entry(surface).or_default();
            let entity = e.into();
            if list.iter().any(|c| c.entity == entity) {
                return Err(Error::InvalidArgument(format!("duplicate entry for entity {entity:?}")));
            }
            list.push(CandidateEntry::new(entity, p));
        }
        for list in map.values_mut() {
            sort_entries(list);
            list.truncate(max_candidates);
        }
        Ok(AliasIndex {
            map,
            max_candidates,
            max_span_len,
        })
    }

    /// Reads and merges `surface<TAB>entity<TAB>count` files.
    pub fn build_index(paths: &[&Path], max_candidates: usize, max_span_len: usize) -> Result<Self> {
        let mut triples = Vec::new();
        for p in paths {
            let name = p.display().to_string();
            read_tsv(BufReader::new(File::open(p)?), &name, |lineno, s, e, v| {
                let c: u64 = v
                    .parse()
                    .ok()
                    .filter(|&c| c > 0)
                    .ok_or_else(|| Error::parse(&name, lineno, format!("count must be a positive integer, got {v:?}")))?;
                triples.push((s.to_string(), e.to_string(), c));
                Ok(())
            })?;
        }
        AliasIndex::from_counts(triples, max_candidates, max_span_len)
    }

    /// Reads `surface<TAB>entity<TAB>prior` files.
    pub fn load_prebuilt(paths: &[&Path], max_candidates: usize, max_span_len: usize) -> Result<Self> {
        let mut triples = Vec::new();
        for p in paths {
            let name = p.display().to_string();
            read_tsv(BufReader::new(File::open(p)?), &name, |lineno, s, e, v| {
                let prior: f64 = v
                    .parse()
                    .ok()
                    .filter(|&x: &f64| x > 0.0 && x <= 1.0)
                    .ok_or_else(|| Error::parse(&name, lineno, format!("prior must be in (0, 1], got {v:?}")))?;
                triples.push((s.to_string(), e.to_string(), prior));
                Ok(())
            })?;
        }
        AliasIndex::from_priors(triples, max_candidates, max_span_len)
    }

    pub fn max_candidates(&self) -> usize {
        self.max_candidates
    }

    pub fn max_span_len(&self) -> usize {
        self.max_span_len
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Candidates for a surface (after normalisation); empty when unknown.
    pub fn lookup(&self, surface: &str) -> &[CandidateEntry] {
        if let Some(l) = self.map.get(surface) {
            return l;
        }
        self.map
            .get(&normalize_surface(surface))
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    pub fn surfaces(&self) -> impl Iterator<Item = (&str, &[CandidateEntry])> {
        self.map.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    /// Every entity id referenced by some candidate list.
    pub fn entities(&self) -> impl Iterator<Item = &str> {
        self.map.values().flatten().map(|c| c.entity.as_str())
    }

    /// All token intervals of length at most `max_span_len` with a
    /// non-empty candidate list, sorted by `(start, end)`.
    pub fn enumerate_spans(&self, doc: &Document) -> Vec<MentionSpan> {
        let n = doc.tokens.len();
        let mut out = Vec::new();
        for q in 0..n {
            let mut surface = String::new();
            for r in q..n.min(q + self.max_span_len) {
                if r > q {
                    surface.push(' ');
                }
                surface.push_str(&doc.tokens[r]);
                let cands = self.lookup(&surface);
                if !cands.is_empty() {
                    out.push(MentionSpan {
                        doc_id: doc.doc_id.clone(),
                        start: q,
                        end: r,
                        surface: normalize_surface(&surface),
                        candidates: cands.to_vec(),
                    });
                }
            }
        }
        out
    }

    /// Span for a given interval (used for gold spans); the candidate list
    /// may be empty.
    pub fn span_for(&self, doc: &Document, start: usize, end: usize) -> MentionSpan {
        let surface = doc.surface(start, end);
        MentionSpan {
            doc_id: doc.doc_id.clone(),
            start,
            end,
            candidates: self.lookup(&surface).to_vec(),
            surface: normalize_surface(&surface),
        }
    }

    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(INDEX_MAGIC)?;
        w.write_all(&(self.max_candidates as u32).to_le_bytes())?;
        w.write_all(&(self.max_span_len as u32).to_le_bytes())?;
        let mut keys: Vec<&String> = self.map.keys().collect();
        keys.sort();
        w.write_all(&(keys.len() as u32).to_le_bytes())?;
        for k in keys {
            write_str16(&mut w, k)?;
            let list = &self.map[k];
            w.write_all(&(list.len() as u32).to_le_bytes())?;
            for c in list {
                write_str16(&mut w, &c.entity)?;
                w.write_all(&c.prior.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != INDEX_MAGIC {
            return Err(Error::Format("missing E2EA magic".into()));
        }
        let max_candidates = read_u32(&mut r)? as usize;
        let max_span_len = read_u32(&mut r)? as usize;
        let n = read_u32(&mut r)? as usize;
        let mut map = HashMap::with_capacity(n);
        for _ in 0..n {
            let surface = read_str16(&mut r)?;
            let m = read_u32(&mut r)? as usize;
            if m == 0 {
                return Err(Error::Format(format!("surface {surface:?} has no candidates")));
            }
            let mut list = Vec::with_capacity(m);
            for _ in 0..m {
                let entity = read_str16(&mut r)?;
                let mut b = [0u8; 8];
                r.read_exact(&mut b)?;
                list.push(CandidateEntry::new(entity, f64::from_le_bytes(b)));
            }
            map.insert(surface, list);
        }
        Ok(AliasIndex {
            map,
            max_candidates,
            max_span_len,
        })
    }

    pub fn load_binary(path: &Path) -> Result<Self> {
        AliasIndex::read_binary(BufReader::new(File::open(path)?))
    }
}

fn write_str16<W: Write>(w: &mut W, s: &str) -> Result<()> {
    let len = u16::try_from(s.len()).map_err(|_| Error::InvalidArgument(format!("string too long: {s:?}")))?;
    w.write_all(&len.to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_str16<R: Read>(r: &mut R) -> Result<String> {
    let len = read_u16(r)? as usize;
    let mut b = vec![0u8; len];
    r.read_exact(&mut b)?;
    String::from_utf8(b).map_err(|_| Error::Format("string is not UTF-8".into()))
}

fn read_tsv<R: BufRead>(
    reader: R,
    source: &str,
    mut f: impl FnMut(usize, &str, &str, &str) -> Result<()>,
) -> Result<()> {
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split('\t').collect();
        if parts.len() != 3 || parts[0].trim().is_empty() || parts[1].is_empty() {
            return Err(Error::parse(source, i + 1, "expected surface<TAB>entity<TAB>value"));
        }
        f(i + 1, parts[0], parts[1], parts[2].trim())?;
    }
    Ok(())
}

/// A candidate token interval `[start, end]` (inclusive) of a document.
#[derive(Clone, Debug, PartialEq)]
pub struct MentionSpan {
    pub doc_id: String,
    pub start: usize,
    pub end: usize,
    pub surface: String,
    pub candidates: Vec<CandidateEntry>,
}

impl MentionSpan {
    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn overlaps(&self, start: usize, end: usize) -> bool {
        self.start <= end && start <= self.end
    }
}

fn contains_run(long: &[String], short: &[String]) -> bool {
    short.len() < long.len() && long.windows(short.len()).any(|w| w == short)
}

/// A span whose tokens occur contiguously inside a longer (at least two
/// token) span of the same document takes over that span's candidates.
/// The donor is the containing span with the smallest `(start, end)`;
/// donors are resolved longest first, which makes the rewrite idempotent.
pub fn apply_coreference_heuristic(spans: &[MentionSpan], doc: &Document) -> Vec<MentionSpan> {
    let tokens = |s: &MentionSpan| &doc.tokens[s.start..=s.end];
    let mut order: Vec<usize> = (0..spans.len()).collect();
    order.sort_by_key(|&i| std::cmp::Reverse(spans[i].len()));

    let mut out: Vec<MentionSpan> = spans.to_vec();
    for &i in &order {
        let short = tokens(&spans[i]);
        let donor = spans
            .iter()
            .enumerate()
            .filter(|(_, l)| l.len() >= 2 && contains_run(tokens(l), short))
            .min_by_key(|(_, l)| (l.start, l.end))
            .map(|(j, _)| j);
        if let Some(j) = donor {
            out[i].candidates = out[j].candidates.clone();
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RecallReport {
    pub top_k: usize,
    pub gold_mentions: usize,
    pub found: usize,
    pub recall: f64,
}

/// Fraction of gold mentions whose entity is among the first `top_k`
/// candidates returned for the mention's surface.
pub fn candidate_recall(docs: &[Document], index: &AliasIndex, top_k: usize) -> RecallReport {
    let mut total = 0;
    let mut found = 0;
    for d in docs {
        for g in d.gold() {
            total += 1;
            let cands = index.lookup(&d.surface(g.start, g.end));
            if cands.iter().take(top_k).any(|c| c.entity == g.entity) {
                found += 1;
            }
        }
    }
    RecallReport {
        top_k,
        gold_mentions: total,
        found,
        recall: if total == 0 { 0.0 } else { found as f64 / total as f64 },
    }
}
