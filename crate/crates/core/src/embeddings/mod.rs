//! Word, character and entity embedding stores.
//!
//! Word and entity vectors share one on-disk representation ([`VectorTable`]):
//! a whitespace text format with a `"<count> <dim>"` header, or the `E2EV`
//! binary cache.

mod entity_trainer;

use std::collections::{BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub use entity_trainer::{
    read_cooccurrence, train_entity_embeddings, train_entity_vector, Cooccurrence, EntityTrainerConfig,
};

const VECTOR_MAGIC: &[u8; 4] = b"E2EV";

/// Keyed dense rows of equal dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct VectorTable {
    keys: Vec<String>,
    index: HashMap<String, usize>,
    dim: usize,
    data: Vec<f32>,
}

impl VectorTable {
    pub fn new(dim: usize) -> Self {
        VectorTable {
            keys: Vec::new(),
            index: HashMap::new(),
            dim,
            data: Vec::new(),
        }
    }

    pub fn from_rows<I, S>(dim: usize, rows: I) -> Result<Self>
    where
        I: IntoIterator<Item = (S, Vec<f32>)>,
        S: Into<String>,
    {
        let mut t = VectorTable::new(dim);
        for (k, v) in rows {
            t.push(k.into(), &v)?;
        }
        Ok(t)
    }

    pub fn push(&mut self, key: String, values: &[f32]) -> Result<usize> {
        if values.len() != self.dim {
            return Err(Error::shape(
                "vector_table",
                format!("row {key:?} has {} values, expected {}", values.len(), self.dim),
            ));
        }
        if self.index.contains_key(&key) {
            return Err(Error::InvalidArgument(format!("duplicate key {key:?}")));
        }
        let row = self.keys.len();
        self.index.insert(key.clone(), row);
        self.keys.push(key);
        self.data.extend_from_slice(values);
        Ok(row)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn keys(&self) -> &[String] {
        &self.keys
    }

    pub fn row_of(&self, key: &str) -> Option<usize> {
        self.index.get(key).copied()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn get(&self, key: &str) -> Option<&[f32]> {
        self.row_of(key).map(|i| self.row(i))
    }

    /// Parses the text format, reporting the 1-based line of the first problem.
    pub fn read_text<R: BufRead>(reader: R, source: &str) -> Result<Self> {
        let mut lines = reader.lines();
        let header = match lines.next() {
            Some(l) => l?,
            None => return Err(Error::parse(source, 1, "missing \"<count> <dim>\" header")),
        };
        let mut it = header.split_whitespace();
        let (count, dim) = match (it.next(), it.next(), it.next()) {
            (Some(c), Some(d), None) => match (c.parse::<usize>(), d.parse::<usize>()) {
                (Ok(c), Ok(d)) if d > 0 => (c, d),
                _ => return Err(Error::parse(source, 1, format!("bad header {header:?}"))),
            },
            _ => return Err(Error::parse(source, 1, format!("bad header {header:?}"))),
        };
        let mut table = VectorTable::new(dim);
        let mut values = Vec::with_capacity(dim);
        for (i, line) in lines.enumerate() {
            let lineno = i + 2;
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split(' ').filter(|s| !s.is_empty());
            let key = parts.next().unwrap_or_default().to_string();
            values.clear();
            for p in parts {
                let v: f32 = p
                    .parse()
                    .map_err(|_| Error::parse(source, lineno, format!("bad number {p:?}")))?;
                if !v.is_finite() {
                    return Err(Error::parse(source, lineno, "non-finite value"));
                }
                values.push(v);
            }
            if values.len() != dim {
                return Err(Error::parse(
                    source,
                    lineno,
                    format!("dimension {} differs from header dimension {dim}", values.len()),
                ));
            }
            if table.index.contains_key(&key) {
                return Err(Error::parse(source, lineno, format!("duplicate key {key:?}")));
            }
            table.push(key, &values)?;
        }
        if table.len() != count {
            return Err(Error::parse(
                source,
                table.len() + 1,
                format!("header announces {count} rows, found {}", table.len()),
            ));
        }
        Ok(table)
    }

    pub fn write_text<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{} {}", self.len(), self.dim)?;
        for (i, k) in self.keys.iter().enumerate() {
            write!(w, "{k}")?;
            for v in self.row(i) {
                write!(w, " {v}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != VECTOR_MAGIC {
            return Err(Error::Format("missing E2EV magic".into()));
        }
        let count = read_u32(&mut r)? as usize;
        let dim = read_u32(&mut r)? as usize;
        if dim == 0 {
            return Err(Error::Format("zero dimension".into()));
        }
        let mut table = VectorTable::new(dim);
        let mut buf = vec![0u8; dim * 4];
        let mut values = vec![0f32; dim];
        for row in 0..count {
            let klen = read_u16(&mut r)? as usize;
            let mut kb = vec![0u8; klen];
            r.read_exact(&mut kb)?;
            let key = String::from_utf8(kb).map_err(|_| Error::Format(format!("row {row}: key is not UTF-8")))?;
            r.read_exact(&mut buf)?;
            for (v, c) in values.iter_mut().zip(buf.chunks_exact(4)) {
                *v = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
            }
            table
                .push(key, &values)
                .map_err(|e| Error::Format(format!("row {row}: {e}")))?;
        }
        Ok(table)
    }

    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(VECTOR_MAGIC)?;
        w.write_all(&(self.len() as u32).to_le_bytes())?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        for (i, k) in self.keys.iter().enumerate() {
            let kb = k.as_bytes();
            let len = u16::try_from(kb.len()).map_err(|_| Error::InvalidArgument(format!("key too long: {k:?}")))?;
            w.write_all(&len.to_le_bytes())?;
            w.write_all(kb)?;
            for v in self.row(i) {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Loads either format, detected from the leading magic bytes.
    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let head = r.fill_buf()?;
        if head.starts_with(VECTOR_MAGIC) {
            VectorTable::read_binary(r)
        } else {
            VectorTable::read_text(r, &path.display().to_string())
        }
    }
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_u16<R: Read>(r: &mut R) -> Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

/// Keys tried, in order, for a designated unknown-word row in a loaded file.
const UNKNOWN_KEYS: [&str; 3] = ["<unk>", "<UNK>", "UNK"];

/// Pre-trained word vectors with a designated unknown-word row.
#[derive(Clone, Debug)]
pub struct WordVectors {
    table: VectorTable,
    unknown: usize,
}

impl WordVectors {
    /// Uses an `<unk>` row from the table when present, otherwise appends a
    /// zero row.
    pub fn new(mut table: VectorTable) -> Self {
        let unknown = match UNKNOWN_KEYS.iter().find_map(|k| table.row_of(k)) {
            Some(i) => i,
            None => {
                let zeros = vec![0.0; table.dim()];
                table.push("<unk>".into(), &zeros).expect("fresh key")
            }
        };
        WordVectors { table, unknown }
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(WordVectors::new(VectorTable::load(path)?))
    }

    pub fn dim(&self) -> usize {
        self.table.dim()
    }

    pub fn table(&self) -> &VectorTable {
        &self.table
    }

    pub fn unknown_row(&self) -> usize {
        self.unknown
    }

    /// Exact match, then lowercase match, then the unknown row.
    pub fn row_index(&self, token: &str) -> usize {
        if let Some(i) = self.table.row_of(token) {
            return i;
        }
        let lower = token.to_lowercase();
        if lower != token {
            if let Some(i) = self.table.row_of(&lower) {
                return i;
            }
        }
        self.unknown
    }

    pub fn lookup(&self, token: &str) -> &[f32] {
        self.table.row(self.row_index(token))
    }

    pub fn contains(&self, token: &str) -> bool {
        self.table.row_of(token).is_some()
    }
}

/// Fixed entity vectors. Missing ids resolve to a zero vector.
#[derive(Clone, Debug)]
pub struct EntityVectors {
    table: VectorTable,
    zero: Vec<f32>,
    pub frozen: bool,
}

impl EntityVectors {
    pub fn new(table: VectorTable) -> Self {
        let zero = vec![0.0; table.dim()];
        EntityVectors {
            table,
            zero,
            frozen: true,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(EntityVectors::new(VectorTable::load(path)?))
    }

    pub fn dim(&self) -> usize {
        self.table.dim()
    }

    pub fn table(&self) -> &VectorTable {
        &self.table
    }

    pub fn row_of(&self, entity: &str) -> Option<usize> {
        self.table.row_of(entity)
    }

    pub fn get(&self, entity: &str) -> Option<&[f32]> {
        self.table.get(entity)
    }

    /// The entity's vector, or zeros for an id without a row.
    pub fn lookup(&self, entity: &str) -> &[f32] {
        self.table.get(entity).unwrap_or(&self.zero)
    }

    /// Logs one warning per entity id that has no vector.
    pub fn warn_missing<'a>(&self, ids: impl IntoIterator<Item = &'a str>) -> usize {
        let missing: BTreeSet<&str> = ids.into_iter().filter(|id| self.get(id).is_none()).collect();
        for id in &missing {
            log::warn!("no vector for entity {id:?}; using a zero vector");
        }
        missing.len()
    }
}

/// Character inventory for the trainable character table. Row 0 is the
/// unknown character.
#[derive(Clone, Debug, PartialEq)]
pub struct CharVocab {
    chars: Vec<char>,
    index: HashMap<char, usize>,
}

impl CharVocab {
    pub fn new(chars: impl IntoIterator<Item = char>) -> Self {
        let set: BTreeSet<char> = chars.into_iter().collect();
        let chars: Vec<char> = set.into_iter().collect();
        let index = chars.iter().enumerate().map(|(i, &c)| (c, i + 1)).collect();
        CharVocab { chars, index }
    }

    pub fn from_tokens<'a>(tokens: impl IntoIterator<Item = &'a str>) -> Self {
        CharVocab::new(tokens.into_iter().flat_map(|t| t.chars()))
    }

    /// Number of table rows including the unknown row.
    pub fn rows(&self) -> usize {
        self.chars.len() + 1
    }

    pub fn row(&self, c: char) -> usize {
        self.index.get(&c).copied().unwrap_or(0)
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }
}
