//! Token-level multi-vector embeddings and tokenized text.
//!
//! Binary store layout (little-endian):
//!
//! ```text
//! "MVST" | version u32 = 1 | dim u32 | vocab_size u32 | record_count u64
//! per record:
//!   item_id_len u16 | item_id utf-8 | token_count u32
//!   token_ids u32[token_count] | vectors f32[token_count * dim] (row-major)
//! ```
//!
//! The tokenized-text sidecar is one line per item:
//! `item_id<TAB>space-separated token ids`.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::Path;

use thiserror::Error;

use crate::io::atomic_write;

pub const MAGIC: &[u8; 4] = b"MVST";
pub const FORMAT_VERSION: u32 = 1;
/// Allowed deviation of a stored row's L2 norm from 1.
pub const NORM_TOLERANCE: f64 = 1e-3;

const HEADER_LEN: usize = 24;

/// Index into the token vocabulary `[0, T)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TokenId(pub u32);

impl TokenId {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for TokenId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

impl From<u32> for TokenId {
    fn from(id: u32) -> Self {
        TokenId(id)
    }
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("bad magic header {found:?}, expected \"MVST\"")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported store format version {0}")]
    UnsupportedVersion(u32),
    #[error("store dimension must be at least 1")]
    ZeroDimension,
    #[error("truncated store at byte {offset} while reading {what}")]
    Truncated { offset: usize, what: &'static str },
    #[error("{extra} trailing bytes after last record at byte {offset}")]
    TrailingBytes { offset: usize, extra: usize },
    #[error("item id at byte {offset} is not valid UTF-8")]
    InvalidItemId { offset: usize },
    #[error("item id `{item_id}` is longer than 65535 bytes")]
    ItemIdTooLong { item_id: String },
    #[error("duplicate item id `{item_id}` at byte {offset}")]
    DuplicateItem { item_id: String, offset: usize },
    #[error("item `{item_id}` at byte {offset} has no tokens")]
    EmptyRecord { item_id: String, offset: usize },
    #[error("item `{item_id}`: token {token} at byte {offset} is outside vocabulary of size {vocab_size}")]
    TokenOutOfRange {
        item_id: String,
        offset: usize,
        token: u32,
        vocab_size: usize,
    },
    #[error("item `{item_id}`: non-finite value in row {row} at byte {offset}")]
    NonFinite {
        item_id: String,
        offset: usize,
        row: usize,
    },
    #[error("item `{item_id}`: norm out of tolerance in row {row} at byte {offset} (norm {norm})")]
    NormOutOfTolerance {
        item_id: String,
        offset: usize,
        row: usize,
        norm: f64,
    },
    #[error("item `{item_id}`: {tokens} token ids but {values} vector values for dim {dim}")]
    ShapeMismatch {
        item_id: String,
        tokens: usize,
        values: usize,
        dim: usize,
    },
    #[error("item `{item_id}` has dimension {found}, store has {expected}")]
    DimensionMismatch {
        item_id: String,
        expected: usize,
        found: usize,
    },
    #[error("special token {token} is outside vocabulary of size {vocab_size}")]
    SpecialOutOfRange { token: u32, vocab_size: usize },
    #[error("corpus line {line}: {message}")]
    CorpusParse { line: usize, message: String },
}

/// Vocabulary size plus the ids of special (marker/padding) tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    size: usize,
    special_ids: BTreeSet<TokenId>,
}

impl Vocab {
    pub fn new(size: usize) -> Self {
        Vocab {
            size,
            special_ids: BTreeSet::new(),
        }
    }

    pub fn with_special_ids<I>(size: usize, ids: I) -> Result<Self, StoreError>
    where
        I: IntoIterator<Item = TokenId>,
    {
        let mut vocab = Vocab::new(size);
        vocab.set_special_ids(ids)?;
        Ok(vocab)
    }

    pub fn set_special_ids<I>(&mut self, ids: I) -> Result<(), StoreError>
    where
        I: IntoIterator<Item = TokenId>,
    {
        let mut set = BTreeSet::new();
        for id in ids {
            if id.index() >= self.size {
                return Err(StoreError::SpecialOutOfRange {
                    token: id.0,
                    vocab_size: self.size,
                });
            }
            set.insert(id);
        }
        self.special_ids = set;
        Ok(())
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn special_ids(&self) -> &BTreeSet<TokenId> {
        &self.special_ids
    }

    pub fn is_special(&self, id: TokenId) -> bool {
        self.special_ids.contains(&id)
    }

    pub fn contains(&self, id: TokenId) -> bool {
        id.index() < self.size
    }
}

/// One query or document: its token ids and one embedding row per token.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiVecRecord {
    pub item_id: String,
    pub token_ids: Vec<TokenId>,
    /// Row-major `token_ids.len() x dim`.
    pub vectors: Vec<f32>,
    pub dim: usize,
}

impl MultiVecRecord {
    /// Builds a record, checking only its shape. Norms are checked by
    /// [`validate_store`] and [`load_store`].
    pub fn new(
        item_id: impl Into<String>,
        token_ids: Vec<TokenId>,
        vectors: Vec<f32>,
        dim: usize,
    ) -> Result<Self, StoreError> {
        let item_id = item_id.into();
        if token_ids.is_empty() {
            return Err(StoreError::EmptyRecord { item_id, offset: 0 });
        }
        if dim == 0 {
            return Err(StoreError::ZeroDimension);
        }
        if vectors.len() != token_ids.len() * dim {
            return Err(StoreError::ShapeMismatch {
                item_id,
                tokens: token_ids.len(),
                values: vectors.len(),
                dim,
            });
        }
        Ok(MultiVecRecord {
            item_id,
            token_ids,
            vectors,
            dim,
        })
    }

    /// Number of tokens (rows).
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f32> {
        self.vectors.chunks_exact(self.dim.max(1))
    }
}

/// Immutable-after-load collection of records sharing one dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    dim: usize,
    vocab: Vocab,
    records: Vec<MultiVecRecord>,
    index: HashMap<String, usize>,
}

impl EmbeddingStore {
    pub fn new(dim: usize, vocab: Vocab) -> Self {
        EmbeddingStore {
            dim,
            vocab,
            records: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Appends a record. Only id uniqueness is enforced here; everything else
    /// is reported by [`validate_store`].
    pub fn push(&mut self, record: MultiVecRecord) -> Result<(), StoreError> {
        if self.index.contains_key(&record.item_id) {
            return Err(StoreError::DuplicateItem {
                item_id: record.item_id,
                offset: 0,
            });
        }
        self.index.insert(record.item_id.clone(), self.records.len());
        self.records.push(record);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn vocab_mut(&mut self) -> &mut Vocab {
        &mut self.vocab
    }

    pub fn get(&self, item_id: &str) -> Option<&MultiVecRecord> {
        self.index.get(item_id).map(|&i| &self.records[i])
    }

    /// Records in insertion (file) order.
    pub fn records(&self) -> &[MultiVecRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ViolationKind {
    ZeroDimension,
    EmptyRecord,
    /// `token_ids.len()` disagrees with the number of vector rows.
    ShapeMismatch { tokens: usize, values: usize },
    DimensionMismatch { expected: usize, found: usize },
    TokenOutOfRange { position: usize, token: u32 },
    NonFinite { row: usize },
    NormOutOfTolerance { row: usize, norm: f64 },
    DuplicateItem,
    SpecialOutOfRange { token: u32 },
}

impl fmt::Display for ViolationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ViolationKind::ZeroDimension => write!(f, "zero dimension"),
            ViolationKind::EmptyRecord => write!(f, "empty record"),
            ViolationKind::ShapeMismatch { tokens, values } => {
                write!(f, "{tokens} tokens but {values} vector values")
            }
            ViolationKind::DimensionMismatch { expected, found } => {
                write!(f, "dimension {found}, expected {expected}")
            }
            ViolationKind::TokenOutOfRange { position, token } => {
                write!(f, "token {token} at position {position} out of range")
            }
            ViolationKind::NonFinite { row } => write!(f, "non-finite value in row {row}"),
            ViolationKind::NormOutOfTolerance { row, norm } => {
                write!(f, "norm out of tolerance in row {row} ({norm})")
            }
            ViolationKind::DuplicateItem => write!(f, "duplicate item id"),
            ViolationKind::SpecialOutOfRange { token } => {
                write!(f, "special token {token} out of range")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    /// Position of the record in the store, `None` for store-level problems.
    pub record: Option<usize>,
    pub item_id: String,
    pub kind: ViolationKind,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

/// `Some(kind)` if the row is non-finite or not unit-norm within tolerance.
fn row_violation(row: &[f32], index: usize) -> Option<ViolationKind> {
    if row.iter().any(|x| !x.is_finite()) {
        return Some(ViolationKind::NonFinite { row: index });
    }
    let norm = row
        .iter()
        .map(|&x| f64::from(x) * f64::from(x))
        .sum::<f64>()
        .sqrt();
    if (norm - 1.0).abs() > NORM_TOLERANCE {
        return Some(ViolationKind::NormOutOfTolerance { row: index, norm });
    }
    None
}

/// Lists every violated invariant. Empty iff the store is valid.
pub fn validate_store(store: &EmbeddingStore) -> ValidationReport {
    let mut violations = Vec::new();
    if store.dim == 0 {
        violations.push(Violation {
            record: None,
            item_id: String::new(),
            kind: ViolationKind::ZeroDimension,
        });
    }
    for &special in store.vocab.special_ids() {
        if !store.vocab.contains(special) {
            violations.push(Violation {
                record: None,
                item_id: String::new(),
                kind: ViolationKind::SpecialOutOfRange { token: special.0 },
            });
        }
    }

    let mut seen = HashMap::new();
    for (ri, rec) in store.records.iter().enumerate() {
        let mut push = |kind| {
            violations.push(Violation {
                record: Some(ri),
                item_id: rec.item_id.clone(),
                kind,
            })
        };
        if seen.insert(rec.item_id.as_str(), ri).is_some() {
            push(ViolationKind::DuplicateItem);
        }
        if rec.token_ids.is_empty() {
            push(ViolationKind::EmptyRecord);
        }
        if rec.dim != store.dim {
            push(ViolationKind::DimensionMismatch {
                expected: store.dim,
                found: rec.dim,
            });
        }
        if rec.dim == 0 || rec.vectors.len() != rec.token_ids.len() * rec.dim {
            push(ViolationKind::ShapeMismatch {
                tokens: rec.token_ids.len(),
                values: rec.vectors.len(),
            });
        }
        for (position, &token) in rec.token_ids.iter().enumerate() {
            if !store.vocab.contains(token) {
                push(ViolationKind::TokenOutOfRange {
                    position,
                    token: token.0,
                });
            }
        }
        if rec.dim > 0 {
            for (row_index, row) in rec.vectors.chunks(rec.dim).enumerate() {
                if row.len() == rec.dim {
                    if let Some(kind) = row_violation(row, row_index) {
                        push(kind);
                    }
                }
            }
        }
    }
    ValidationReport { violations }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], StoreError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&end| end <= self.bytes.len())
            .ok_or(StoreError::Truncated {
                offset: self.pos,
                what,
            })?;
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn u16(&mut self, what: &'static str) -> Result<u16, StoreError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, StoreError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64, StoreError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

/// Parses and fully validates an in-memory store image.
pub fn decode_store(bytes: &[u8]) -> Result<EmbeddingStore, StoreError> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(StoreError::BadMagic {
            found: magic.try_into().unwrap(),
        });
    }
    let version = r.u32("format version")?;
    if version != FORMAT_VERSION {
        return Err(StoreError::UnsupportedVersion(version));
    }
    let dim = r.u32("dim")? as usize;
    if dim == 0 {
        return Err(StoreError::ZeroDimension);
    }
    let vocab_size = r.u32("vocab size")? as usize;
    let count = r.u64("record count")?;

    let mut store = EmbeddingStore::new(dim, Vocab::new(vocab_size));
    // A record needs at least 2 + 4 + 4 + 4*dim bytes.
    let min_record = 10 + 4 * dim;
    let capacity = (bytes.len().saturating_sub(HEADER_LEN) / min_record).min(count as usize);
    store.records.reserve(capacity);

    for _ in 0..count {
        let record_offset = r.pos;
        let id_len = r.u16("item id length")? as usize;
        let id_offset = r.pos;
        let item_id = std::str::from_utf8(r.take(id_len, "item id")?)
            .map_err(|_| StoreError::InvalidItemId { offset: id_offset })?
            .to_owned();
        if store.index.contains_key(&item_id) {
            return Err(StoreError::DuplicateItem {
                item_id,
                offset: record_offset,
            });
        }
        let token_count = r.u32("token count")? as usize;
        if token_count == 0 {
            return Err(StoreError::EmptyRecord {
                item_id,
                offset: record_offset,
            });
        }

        let tokens_offset = r.pos;
        let raw_tokens = r.take(
            token_count.checked_mul(4).ok_or(StoreError::Truncated {
                offset: tokens_offset,
                what: "token ids",
            })?,
            "token ids",
        )?;
        let mut token_ids = Vec::with_capacity(token_count);
        for (i, chunk) in raw_tokens.chunks_exact(4).enumerate() {
            let token = u32::from_le_bytes(chunk.try_into().unwrap());
            if token as usize >= vocab_size {
                return Err(StoreError::TokenOutOfRange {
                    item_id,
                    offset: tokens_offset + 4 * i,
                    token,
                    vocab_size,
                });
            }
            token_ids.push(TokenId(token));
        }

        let vectors_offset = r.pos;
        let value_count = token_count.checked_mul(dim).ok_or(StoreError::Truncated {
            offset: vectors_offset,
            what: "vectors",
        })?;
        let raw_vectors = r.take(
            value_count.checked_mul(4).ok_or(StoreError::Truncated {
                offset: vectors_offset,
                what: "vectors",
            })?,
            "vectors",
        )?;
        let vectors: Vec<f32> = raw_vectors
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        for (row_index, row) in vectors.chunks_exact(dim).enumerate() {
            let offset = vectors_offset + row_index * dim * 4;
            match row_violation(row, row_index) {
                Some(ViolationKind::NonFinite { row }) => {
                    return Err(StoreError::NonFinite {
                        item_id,
                        offset,
                        row,
                    })
                }
                Some(ViolationKind::NormOutOfTolerance { row, norm }) => {
                    return Err(StoreError::NormOutOfTolerance {
                        item_id,
                        offset,
                        row,
                        norm,
                    })
                }
                _ => {}
            }
        }

        store.index.insert(item_id.clone(), store.records.len());
        store.records.push(MultiVecRecord {
            item_id,
            token_ids,
            vectors,
            dim,
        });
    }
    if r.pos != bytes.len() {
        return Err(StoreError::TrailingBytes {
            offset: r.pos,
            extra: bytes.len() - r.pos,
        });
    }
    Ok(store)
}

/// Serializes a store to its binary image, preserving record order.
pub fn encode_store(store: &EmbeddingStore) -> Result<Vec<u8>, StoreError> {
    let payload: usize = store
        .records
        .iter()
        .map(|r| 6 + r.item_id.len() + 4 * r.token_ids.len() + 4 * r.vectors.len())
        .sum();
    let mut out = Vec::with_capacity(HEADER_LEN + payload);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(store.dim as u32).to_le_bytes());
    out.extend_from_slice(&(store.vocab.size() as u32).to_le_bytes());
    out.extend_from_slice(&(store.records.len() as u64).to_le_bytes());
    for rec in &store.records {
        let id_len = u16::try_from(rec.item_id.len()).map_err(|_| StoreError::ItemIdTooLong {
            item_id: rec.item_id.clone(),
        })?;
        if rec.dim != store.dim {
            return Err(StoreError::DimensionMismatch {
                item_id: rec.item_id.clone(),
                expected: store.dim,
                found: rec.dim,
            });
        }
        if rec.vectors.len() != rec.token_ids.len() * rec.dim {
            return Err(StoreError::ShapeMismatch {
                item_id: rec.item_id.clone(),
                tokens: rec.token_ids.len(),
                values: rec.vectors.len(),
                dim: rec.dim,
            });
        }
        out.extend_from_slice(&id_len.to_le_bytes());
        out.extend_from_slice(rec.item_id.as_bytes());
        out.extend_from_slice(&(rec.token_ids.len() as u32).to_le_bytes());
        for t in &rec.token_ids {
            out.extend_from_slice(&t.0.to_le_bytes());
        }
        for v in &rec.vectors {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn load_store(path: impl AsRef<Path>) -> Result<EmbeddingStore, StoreError> {
    decode_store(&fs::read(path)?)
}

pub fn save_store(store: &EmbeddingStore, path: impl AsRef<Path>) -> Result<(), StoreError> {
    let bytes = encode_store(store)?;
    atomic_write(path.as_ref(), |w| w.write_all(&bytes))?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedDoc {
    pub item_id: String,
    pub tokens: Vec<TokenId>,
}

/// Token-id text of a collection, one entry per item in file order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TokenizedCorpus {
    pub docs: Vec<TokenizedDoc>,
}

impl TokenizedCorpus {
    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    /// Largest token id plus one, or 0 for an empty corpus.
    pub fn implied_vocab_size(&self) -> usize {
        self.docs
            .iter()
            .flat_map(|d| d.tokens.iter())
            .map(|t| t.index() + 1)
            .max()
            .unwrap_or(0)
    }

    /// Token text of every record in a store, in store order.
    pub fn from_store(store: &EmbeddingStore) -> Self {
        TokenizedCorpus {
            docs: store
                .records()
                .iter()
                .map(|r| TokenizedDoc {
                    item_id: r.item_id.clone(),
                    tokens: r.token_ids.clone(),
                })
                .collect(),
        }
    }

    pub fn parse(text: &str) -> Result<Self, StoreError> {
        let mut docs = Vec::new();
        let mut ids = HashMap::new();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let (item_id, rest) = line.split_once('\t').ok_or_else(|| StoreError::CorpusParse {
                line: line_no,
                message: "expected `item_id<TAB>tokens`".into(),
            })?;
            if item_id.is_empty() {
                return Err(StoreError::CorpusParse {
                    line: line_no,
                    message: "empty item id".into(),
                });
            }
            let tokens = rest
                .split_whitespace()
                .map(|tok| {
                    tok.parse::<u32>().map(TokenId).map_err(|_| StoreError::CorpusParse {
                        line: line_no,
                        message: format!("invalid token id `{tok}`"),
                    })
                })
                .collect::<Result<Vec<_>, _>>()?;
            if ids.insert(item_id.to_owned(), line_no).is_some() {
                return Err(StoreError::CorpusParse {
                    line: line_no,
                    message: format!("duplicate item id `{item_id}`"),
                });
            }
            docs.push(TokenizedDoc {
                item_id: item_id.to_owned(),
                tokens,
            });
        }
        Ok(TokenizedCorpus { docs })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, StoreError> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), StoreError> {
        atomic_write(path.as_ref(), |w| {
            for doc in &self.docs {
                write!(w, "{}\t", doc.item_id)?;
                for (i, t) in doc.tokens.iter().enumerate() {
                    if i > 0 {
                        w.write_all(b" ")?;
                    }
                    write!(w, "{t}")?;
                }
                w.write_all(b"\n")?;
            }
            Ok(())
        })?;
        Ok(())
    }
}
