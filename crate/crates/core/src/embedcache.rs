//! On-disk activation cache: one immutable file per
//! (model, checkpoint, task, split, payload kind).
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic            4 bytes  "CPRB"
//! version          u16      1
//! dtype            u8       1 = f32 little-endian
//! payload_kind     u8       0 = token_embeddings, 1 = masked_logprobs
//! flags            u16      bit 0: records carry a content mask
//! model_id         u16 length + UTF-8 bytes
//! checkpoint_step  u64      raw optimizer steps
//! task_name        u16 length + UTF-8 bytes
//! split_name       u16 length + UTF-8 bytes
//! embedding_dim    u32      1 for masked_logprobs
//! record_count     u32
//! records          record_count x {
//!                    example_id_len u16, example_id bytes,
//!                    token_count u32,
//!                    token_count * embedding_dim f32,
//!                    [token_count mask bytes (0/1) when flag bit 0 is set]
//!                  }
//! checksum         u64      CRC-64/XZ of every preceding byte
//! ```
//!
//! A sidecar `index.jsonl` at the cache root lists committed files (and
//! "unsupported" markers written by extractors) for discovery.

use std::collections::HashSet;
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"CPRB";
pub const VERSION: u16 = 1;
pub const DTYPE_F32_LE: u8 = 1;
pub const FLAG_CONTENT_MASK: u16 = 1;
pub const FILE_EXTENSION: &str = "cprb";
pub const INDEX_FILE: &str = "index.jsonl";

const CRC64: crc::Crc<u64> = crc::Crc::<u64>::new(&crc::CRC_64_XZ);

pub(crate) fn checksum(bytes: &[u8]) -> u64 {
    CRC64.checksum(bytes)
}

#[derive(Debug, Error)]
pub enum CacheError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("bad magic {0:02x?}: not a cache file")]
    BadMagic([u8; 4]),
    #[error("unsupported cache version {0}")]
    UnsupportedVersion(u16),
    #[error("unsupported dtype code {0}")]
    UnsupportedDtype(u8),
    #[error("checksum mismatch: stored {stored:016x}, computed {computed:016x}")]
    ChecksumMismatch { stored: u64, computed: u64 },
    #[error("file truncated: needed {needed} more bytes at offset {offset}")]
    Truncated { offset: usize, needed: usize },
    #[error("malformed cache file: {0}")]
    Malformed(String),
    #[error("duplicate example id `{0}`")]
    DuplicateId(String),
    #[error("record `{0}` has zero tokens")]
    ZeroTokens(String),
    #[error("record `{id}` has dimension {found}, expected {expected}")]
    DimMismatch {
        id: String,
        expected: usize,
        found: usize,
    },
    #[error("record `{id}`: mask length {found} does not match {expected} tokens")]
    MaskLength {
        id: String,
        expected: usize,
        found: usize,
    },
    #[error("no records to write")]
    NoRecords,
    #[error("field `{0}` exceeds the format's length limit")]
    TooLong(&'static str),
    #[error("refusing to overwrite committed cache file {0}")]
    AlreadyExists(PathBuf),
}

impl CacheError {
    /// Stable short code, used by `validate-cache` and run manifests.
    pub fn code(&self) -> &'static str {
        match self {
            CacheError::Io { .. } => "io",
            CacheError::BadMagic(_) => "bad_magic",
            CacheError::UnsupportedVersion(_) => "unsupported_version",
            CacheError::UnsupportedDtype(_) => "unsupported_dtype",
            CacheError::ChecksumMismatch { .. } => "checksum_mismatch",
            CacheError::Truncated { .. } => "truncated",
            CacheError::Malformed(_) => "malformed",
            CacheError::DuplicateId(_) => "duplicate_id",
            CacheError::ZeroTokens(_) => "zero_tokens",
            CacheError::DimMismatch { .. } => "dim_mismatch",
            CacheError::MaskLength { .. } => "mask_length",
            CacheError::NoRecords => "no_records",
            CacheError::TooLong(_) => "too_long",
            CacheError::AlreadyExists(_) => "already_exists",
        }
    }
}

pub type Result<T> = std::result::Result<T, CacheError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PayloadKind {
    TokenEmbeddings,
    MaskedLogprobs,
}

impl PayloadKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PayloadKind::TokenEmbeddings => "token_embeddings",
            PayloadKind::MaskedLogprobs => "masked_logprobs",
        }
    }

    fn code(self) -> u8 {
        match self {
            PayloadKind::TokenEmbeddings => 0,
            PayloadKind::MaskedLogprobs => 1,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(PayloadKind::TokenEmbeddings),
            1 => Some(PayloadKind::MaskedLogprobs),
            _ => None,
        }
    }
}

impl fmt::Display for PayloadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CacheKey {
    pub model_id: String,
    /// Raw optimizer-step count of the checkpoint.
    pub checkpoint_step: u64,
    pub task_name: String,
    pub split_name: String,
    pub payload_kind: PayloadKind,
}

impl CacheKey {
    pub fn new(
        model_id: impl Into<String>,
        checkpoint_step: u64,
        task_name: impl Into<String>,
        split_name: impl Into<String>,
        payload_kind: PayloadKind,
    ) -> Self {
        CacheKey {
            model_id: model_id.into(),
            checkpoint_step,
            task_name: task_name.into(),
            split_name: split_name.into(),
            payload_kind,
        }
    }
}

/// Row-major `tokens x dim` matrix of f32.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenMatrix {
    tokens: usize,
    dim: usize,
    data: Vec<f32>,
}

impl TokenMatrix {
    /// Panics if `data.len() != tokens * dim`.
    pub fn new(tokens: usize, dim: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), tokens * dim, "token matrix shape mismatch");
        TokenMatrix { tokens, dim, data }
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Self {
        let dim = rows.first().map_or(0, Vec::len);
        let data: Vec<f32> = rows.iter().flatten().copied().collect();
        TokenMatrix::new(rows.len(), dim, data)
    }

    /// Column vector of per-position scalars (dim 1).
    pub fn column(values: Vec<f32>) -> Self {
        let n = values.len();
        TokenMatrix::new(n, 1, values)
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        // chunks_exact(0) panics; a zero-dim matrix has no meaningful rows
        self.data.chunks_exact(self.dim.max(1)).take(self.tokens)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CacheRecord {
    pub example_id: String,
    pub matrix: TokenMatrix,
    /// `true` for content tokens; `None` means every token is content.
    pub content_mask: Option<Vec<bool>>,
}

impl CacheRecord {
    pub fn new(example_id: impl Into<String>, matrix: TokenMatrix) -> Self {
        CacheRecord {
            example_id: example_id.into(),
            matrix,
            content_mask: None,
        }
    }

    pub fn with_mask(mut self, mask: Vec<bool>) -> Self {
        self.content_mask = Some(mask);
        self
    }

    /// Content mask with `None` expanded to all-true.
    pub fn mask(&self) -> Vec<bool> {
        self.content_mask
            .clone()
            .unwrap_or_else(|| vec![true; self.matrix.tokens()])
    }
}

/// Record id for sentence `k` of a classification example.
pub fn sentence_record_id(example_id: &str, k: usize) -> String {
    format!("{example_id}#{k}")
}

fn put_str(out: &mut Vec<u8>, s: &str, field: &'static str) -> Result<()> {
    let len = u16::try_from(s.len()).map_err(|_| CacheError::TooLong(field))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

/// Serializes `key` and `records` into the versioned layout.
pub fn encode(key: &CacheKey, records: &[CacheRecord]) -> Result<Vec<u8>> {
    let first = records.first().ok_or(CacheError::NoRecords)?;
    let dim = first.matrix.dim();
    if key.payload_kind == PayloadKind::MaskedLogprobs && dim != 1 {
        return Err(CacheError::DimMismatch {
            id: first.example_id.clone(),
            expected: 1,
            found: dim,
        });
    }
    let mut seen = HashSet::new();
    for r in records {
        if !seen.insert(r.example_id.as_str()) {
            return Err(CacheError::DuplicateId(r.example_id.clone()));
        }
        if r.matrix.tokens() == 0 {
            return Err(CacheError::ZeroTokens(r.example_id.clone()));
        }
        if r.matrix.dim() != dim {
            return Err(CacheError::DimMismatch {
                id: r.example_id.clone(),
                expected: dim,
                found: r.matrix.dim(),
            });
        }
        if let Some(mask) = &r.content_mask {
            if mask.len() != r.matrix.tokens() {
                return Err(CacheError::MaskLength {
                    id: r.example_id.clone(),
                    expected: r.matrix.tokens(),
                    found: mask.len(),
                });
            }
        }
    }
    let with_mask = records.iter().any(|r| r.content_mask.is_some());
    let flags = if with_mask { FLAG_CONTENT_MASK } else { 0 };

    let payload: usize = records
        .iter()
        .map(|r| 6 + r.example_id.len() + r.matrix.data().len() * 4 + r.matrix.tokens())
        .sum();
    let mut out = Vec::with_capacity(64 + payload);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(DTYPE_F32_LE);
    out.push(key.payload_kind.code());
    out.extend_from_slice(&flags.to_le_bytes());
    put_str(&mut out, &key.model_id, "model_id")?;
    out.extend_from_slice(&key.checkpoint_step.to_le_bytes());
    put_str(&mut out, &key.task_name, "task_name")?;
    put_str(&mut out, &key.split_name, "split_name")?;
    let dim32 = u32::try_from(dim).map_err(|_| CacheError::TooLong("embedding_dim"))?;
    out.extend_from_slice(&dim32.to_le_bytes());
    let count = u32::try_from(records.len()).map_err(|_| CacheError::TooLong("record_count"))?;
    out.extend_from_slice(&count.to_le_bytes());
    for r in records {
        put_str(&mut out, &r.example_id, "example_id")?;
        let tokens =
            u32::try_from(r.matrix.tokens()).map_err(|_| CacheError::TooLong("token_count"))?;
        out.extend_from_slice(&tokens.to_le_bytes());
        for v in r.matrix.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        if with_mask {
            match &r.content_mask {
                Some(mask) => out.extend(mask.iter().map(|&m| m as u8)),
                None => out.extend(std::iter::repeat_n(1u8, r.matrix.tokens())),
            }
        }
    }
    let sum = checksum(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let available = self.buf.len() - self.pos;
        if n > available {
            return Err(CacheError::Truncated {
                offset: self.pos,
                needed: n - available,
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u16()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec()).map_err(|e| CacheError::Malformed(e.to_string()))
    }
}

fn decode_header(c: &mut Cursor<'_>) -> Result<(CacheKey, u16, usize, usize)> {
    let magic: [u8; 4] = c.take(4)?.try_into().unwrap();
    if magic != MAGIC {
        return Err(CacheError::BadMagic(magic));
    }
    let version = c.u16()?;
    if version != VERSION {
        return Err(CacheError::UnsupportedVersion(version));
    }
    let dtype = c.u8()?;
    if dtype != DTYPE_F32_LE {
        return Err(CacheError::UnsupportedDtype(dtype));
    }
    let kind_code = c.u8()?;
    let payload_kind = PayloadKind::from_code(kind_code)
        .ok_or_else(|| CacheError::Malformed(format!("payload kind code {kind_code}")))?;
    let flags = c.u16()?;
    if flags & !FLAG_CONTENT_MASK != 0 {
        return Err(CacheError::Malformed(format!("unknown flags {flags:#06x}")));
    }
    let model_id = c.string()?;
    let checkpoint_step = c.u64()?;
    let task_name = c.string()?;
    let split_name = c.string()?;
    let dim = c.u32()? as usize;
    let count = c.u32()? as usize;
    let key = CacheKey {
        model_id,
        checkpoint_step,
        task_name,
        split_name,
        payload_kind,
    };
    Ok((key, flags, dim, count))
}

/// Parses a complete file image. Structure is checked first (so truncation is
/// reported as such), then the checksum.
pub fn decode(bytes: &[u8]) -> Result<(CacheKey, Vec<CacheRecord>)> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    let (key, flags, dim, count) = decode_header(&mut c)?;
    let with_mask = flags & FLAG_CONTENT_MASK != 0;
    let mut records = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let example_id = c.string()?;
        let tokens = c.u32()? as usize;
        if tokens == 0 {
            return Err(CacheError::ZeroTokens(example_id));
        }
        let n_floats = tokens
            .checked_mul(dim)
            .ok_or_else(|| CacheError::Malformed("record size overflow".into()))?;
        let raw = c.take(
            n_floats
                .checked_mul(4)
                .ok_or_else(|| CacheError::Malformed("record size overflow".into()))?,
        )?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let content_mask = if with_mask {
            let m = c.take(tokens)?;
            if let Some(bad) = m.iter().find(|&&b| b > 1) {
                return Err(CacheError::Malformed(format!("mask byte {bad}")));
            }
            Some(m.iter().map(|&b| b == 1).collect())
        } else {
            None
        };
        records.push(CacheRecord {
            example_id,
            matrix: TokenMatrix::new(tokens, dim, data),
            content_mask,
        });
    }
    let body_end = c.pos;
    let stored = c.u64()?;
    if c.pos != bytes.len() {
        return Err(CacheError::Malformed(format!(
            "{} trailing bytes after checksum",
            bytes.len() - c.pos
        )));
    }
    let computed = checksum(&bytes[..body_end]);
    if stored != computed {
        return Err(CacheError::ChecksumMismatch { stored, computed });
    }
    let mut seen = HashSet::new();
    for r in &records {
        if !seen.insert(r.example_id.as_str()) {
            return Err(CacheError::DuplicateId(r.example_id.clone()));
        }
    }
    Ok((key, records))
}

/// Reads and fully validates a cache file.
pub fn read_cache(path: &Path) -> Result<(CacheKey, Vec<CacheRecord>)> {
    let bytes = fs::read(path).map_err(|source| CacheError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode(&bytes)
}

/// Reads only the header of a cache file (no checksum verification).
pub fn read_header(path: &Path) -> Result<(CacheKey, usize, usize)> {
    let io = |source| CacheError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut head = Vec::new();
    File::open(path)
        .map_err(io)?
        .take(64 + 3 * u16::MAX as u64)
        .read_to_end(&mut head)
        .map_err(io)?;
    let mut c = Cursor { buf: &head, pos: 0 };
    let (key, _, dim, count) = decode_header(&mut c)?;
    Ok((key, dim, count))
}

/// The trailing checksum as stored, used as a content fingerprint.
pub fn stored_checksum(path: &Path) -> Result<u64> {
    let io = |source| CacheError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut f = File::open(path).map_err(io)?;
    let len = f.metadata().map_err(io)?.len();
    if len < 8 {
        return Err(CacheError::Truncated {
            offset: len as usize,
            needed: 8 - len as usize,
        });
    }
    f.seek(SeekFrom::End(-8)).map_err(io)?;
    let mut buf = [0u8; 8];
    f.read_exact(&mut buf).map_err(io)?;
    Ok(u64::from_le_bytes(buf))
}

fn escape_component(s: &str) -> String {
    if s.is_empty() {
        return "%".to_string();
    }
    let mut out = String::with_capacity(s.len());
    for b in s.bytes() {
        if b.is_ascii_alphanumeric() || b == b'_' || b == b'-' {
            out.push(b as char);
        } else {
            out.push_str(&format!("%{b:02X}"));
        }
    }
    out
}

/// Deterministic, injective location of a key's file under `root`:
/// `<model>/step-<20-digit step>/<task>/<split>.<kind>.cprb`, with every byte
/// outside `[A-Za-z0-9_-]` percent-escaped.
pub fn cache_path(root: &Path, key: &CacheKey) -> PathBuf {
    root.join(escape_component(&key.model_id))
        .join(format!("step-{:020}", key.checkpoint_step))
        .join(escape_component(&key.task_name))
        .join(format!(
            "{}.{}.{FILE_EXTENSION}",
            escape_component(&key.split_name),
            key.payload_kind.as_str()
        ))
}

/// Writes a new file at `path`. The bytes go to an exclusively created
/// `.partial` sibling first and are renamed into place once complete.
pub fn write_cache_file(path: &Path, key: &CacheKey, records: &[CacheRecord]) -> Result<()> {
    let bytes = encode(key, records)?;
    if path.exists() {
        return Err(CacheError::AlreadyExists(path.to_path_buf()));
    }
    let io = |source| CacheError::Io {
        path: path.to_path_buf(),
        source,
    };
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io)?;
    }
    let partial = path.with_extension(format!("{FILE_EXTENSION}.partial"));
    let mut f = OpenOptions::new()
        .write(true)
        .create_new(true)
        .open(&partial)
        .map_err(io)?;
    f.write_all(&bytes).map_err(io)?;
    f.sync_all().map_err(io)?;
    drop(f);
    if path.exists() {
        let _ = fs::remove_file(&partial);
        return Err(CacheError::AlreadyExists(path.to_path_buf()));
    }
    fs::rename(&partial, path).map_err(io)?;
    Ok(())
}

/// Writes the file for `key` under `root` and records it in the index sidecar.
pub fn write_cache(root: &Path, key: &CacheKey, records: &[CacheRecord]) -> Result<PathBuf> {
    let path = cache_path(root, key);
    write_cache_file(&path, key, records)?;
    let rel = path
        .strip_prefix(root)
        .unwrap_or(&path)
        .to_string_lossy()
        .replace('\\', "/");
    append_index(root, &IndexEntry::committed(key, rel, records.len()))?;
    Ok(path)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryStatus {
    Committed,
    /// The extractor could not produce this payload (e.g. masked scoring on
    /// an encoder-decoder model); no file exists.
    Unsupported,
}

/// One line of the index sidecar.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub model_id: String,
    pub checkpoint_step: u64,
    pub task: String,
    pub split: String,
    pub kind: PayloadKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
    #[serde(default)]
    pub record_count: usize,
    #[serde(default = "committed")]
    pub status: EntryStatus,
}

fn committed() -> EntryStatus {
    EntryStatus::Committed
}

impl IndexEntry {
    pub fn committed(key: &CacheKey, rel_path: String, record_count: usize) -> Self {
        IndexEntry {
            model_id: key.model_id.clone(),
            checkpoint_step: key.checkpoint_step,
            task: key.task_name.clone(),
            split: key.split_name.clone(),
            kind: key.payload_kind,
            path: Some(rel_path),
            record_count,
            status: EntryStatus::Committed,
        }
    }

    pub fn unsupported(key: &CacheKey) -> Self {
        IndexEntry {
            model_id: key.model_id.clone(),
            checkpoint_step: key.checkpoint_step,
            task: key.task_name.clone(),
            split: key.split_name.clone(),
            kind: key.payload_kind,
            path: None,
            record_count: 0,
            status: EntryStatus::Unsupported,
        }
    }

    pub fn key(&self) -> CacheKey {
        CacheKey::new(
            self.model_id.clone(),
            self.checkpoint_step,
            self.task.clone(),
            self.split.clone(),
            self.kind,
        )
    }
}

/// Appends one entry as a single write so concurrent appenders do not
/// interleave within a line.
pub fn append_index(root: &Path, entry: &IndexEntry) -> Result<()> {
    let path = root.join(INDEX_FILE);
    let io = |source| CacheError::Io {
        path: path.clone(),
        source,
    };
    fs::create_dir_all(root).map_err(io)?;
    let mut line =
        serde_json::to_string(entry).map_err(|e| CacheError::Malformed(e.to_string()))?;
    line.push('\n');
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .map_err(io)?;
    f.write_all(line.as_bytes()).map_err(io)?;
    Ok(())
}

/// All index entries under `root`; a missing index is an empty list.
pub fn read_index(root: &Path) -> Result<Vec<IndexEntry>> {
    let path = root.join(INDEX_FILE);
    let text = match fs::read_to_string(&path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(source) => return Err(CacheError::Io { path, source }),
    };
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| CacheError::Malformed(format!("index line {}: {e}", i + 1)))
        })
        .collect()
}

/// Outcome of checking one file in [`validate_tree`].
#[derive(Debug)]
pub struct FileCheck {
    pub path: PathBuf,
    /// Key and record count of a valid file, or why it is not.
    pub result: Result<(CacheKey, usize)>,
}

/// Fully decodes every cache file under `root` and checks that each committed
/// index entry points at an existing file. Paths come back sorted.
pub fn validate_tree(root: &Path) -> Result<Vec<FileCheck>> {
    fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
        for entry in fs::read_dir(dir)? {
            let path = entry?.path();
            if path.is_dir() {
                walk(&path, out)?;
            } else if path.extension().is_some_and(|e| e == FILE_EXTENSION) {
                out.push(path);
            }
        }
        Ok(())
    }
    let mut files = Vec::new();
    walk(root, &mut files).map_err(|source| CacheError::Io {
        path: root.to_path_buf(),
        source,
    })?;
    for e in read_index(root)? {
        if let (EntryStatus::Committed, Some(rel)) = (e.status, &e.path) {
            let p = root.join(rel);
            if !files.contains(&p) {
                files.push(p);
            }
        }
    }
    files.sort();
    Ok(files
        .into_iter()
        .map(|path| {
            let result = read_cache(&path).map(|(k, r)| (k, r.len()));
            FileCheck { path, result }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key() -> CacheKey {
        CacheKey::new(
            "m",
            100_000,
            "subj_number",
            "test",
            PayloadKind::TokenEmbeddings,
        )
    }

    fn one_record() -> Vec<CacheRecord> {
        vec![CacheRecord::new(
            "e0#0",
            TokenMatrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![-0.5, f32::MIN_POSITIVE, 7.25]]),
        )]
    }

    #[test]
    fn round_trip_single_record() {
        let bytes = encode(&key(), &one_record()).unwrap();
        let header = 4 + 2 + 1 + 1 + 2 + (2 + 1) + 8 + (2 + 11) + (2 + 4) + 4 + 4;
        let record = 2 + 4 + 4 + 2 * 3 * 4;
        assert_eq!(bytes.len(), header + record + 8);
        let (k, recs) = decode(&bytes).unwrap();
        assert_eq!(k, key());
        assert_eq!(recs, one_record());
    }

    #[test]
    fn mismatched_dims_rejected() {
        let mut recs = one_record();
        recs.push(CacheRecord::new(
            "e1#0",
            TokenMatrix::from_rows(&[vec![1.0, 2.0]]),
        ));
        assert!(matches!(
            encode(&key(), &recs),
            Err(CacheError::DimMismatch {
                expected: 3,
                found: 2,
                ..
            })
        ));
    }

    #[test]
    fn duplicate_and_empty_records_rejected() {
        let mut recs = one_record();
        recs.push(recs[0].clone());
        assert!(matches!(
            encode(&key(), &recs),
            Err(CacheError::DuplicateId(_))
        ));
        let empty = vec![CacheRecord::new("z", TokenMatrix::new(0, 3, vec![]))];
        assert!(matches!(
            encode(&key(), &empty),
            Err(CacheError::ZeroTokens(_))
        ));
    }

    #[test]
    fn read_errors_are_distinct() {
        let bytes = encode(&key(), &one_record()).unwrap();

        let mut bad_sum = bytes.clone();
        let last = bad_sum.len() - 1;
        bad_sum[last] ^= 0x01;
        assert_eq!(decode(&bad_sum).unwrap_err().code(), "checksum_mismatch");

        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert_eq!(decode(&bad_magic).unwrap_err().code(), "bad_magic");

        let mut bad_version = bytes.clone();
        bad_version[4] = 9;
        assert_eq!(
            decode(&bad_version).unwrap_err().code(),
            "unsupported_version"
        );

        let truncated = &bytes[..bytes.len() - 12];
        assert_eq!(decode(truncated).unwrap_err().code(), "truncated");
    }

    #[test]
    fn masks_survive_round_trip() {
        let recs = vec![
            CacheRecord::new(
                "a",
                TokenMatrix::from_rows(&[vec![1.0], vec![2.0], vec![3.0]]),
            )
            .with_mask(vec![false, true, false]),
            CacheRecord::new("b", TokenMatrix::from_rows(&[vec![4.0]])),
        ];
        let (_, back) = decode(&encode(&key(), &recs).unwrap()).unwrap();
        assert_eq!(back[0].content_mask, Some(vec![false, true, false]));
        assert_eq!(back[1].content_mask, Some(vec![true]));
    }

    #[test]
    fn logprob_payload_requires_dim_one() {
        let k = CacheKey::new("m", 0, "transitive", "test", PayloadKind::MaskedLogprobs);
        assert!(encode(&k, &one_record()).is_err());
        let recs = vec![CacheRecord::new(
            "p#good",
            TokenMatrix::column(vec![-1.0, -2.0]),
        )];
        assert!(encode(&k, &recs).is_ok());
    }

    #[test]
    fn cache_path_is_stable_and_injective() {
        let root = Path::new("/cache");
        assert_eq!(cache_path(root, &key()), cache_path(root, &key()));
        let mut other = key();
        other.checkpoint_step = 200_000;
        assert_ne!(cache_path(root, &key()), cache_path(root, &other));

        let mut hostile = key();
        hostile.task_name = "../etc/pass wd".into();
        let p = cache_path(root, &hostile);
        assert!(p.starts_with(root));
        assert!(p.to_string_lossy().contains("%2E%2E%2Fetc%2Fpass%20wd"));
        assert_eq!(p, cache_path(root, &hostile));

        let mut pct = key();
        pct.task_name = "%2E".into();
        let mut dot = key();
        dot.task_name = ".".into();
        assert_ne!(cache_path(root, &pct), cache_path(root, &dot));
    }

    #[test]
    fn write_refuses_overwrite_and_indexes() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_cache(dir.path(), &key(), &one_record()).unwrap();
        assert!(matches!(
            write_cache(dir.path(), &key(), &one_record()),
            Err(CacheError::AlreadyExists(_))
        ));
        let (k, recs) = read_cache(&path).unwrap();
        assert_eq!((k, recs), (key(), one_record()));
        let index = read_index(dir.path()).unwrap();
        assert_eq!(index.len(), 1);
        assert_eq!(index[0].record_count, 1);
        assert_eq!(dir.path().join(index[0].path.as_ref().unwrap()), path);
        let (hk, dim, count) = read_header(&path).unwrap();
        assert_eq!((hk, dim, count), (key(), 3, 1));
        let stored = stored_checksum(&path).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(stored, checksum(&bytes[..bytes.len() - 8]));
    }

    #[test]
    fn validate_tree_flags_bad_and_missing_files() {
        let dir = tempfile::tempdir().unwrap();
        let good = write_cache(dir.path(), &key(), &one_record()).unwrap();
        let mut other = key();
        other.split_name = "dev".into();
        let bad = write_cache(dir.path(), &other, &one_record()).unwrap();
        let mut bytes = fs::read(&bad).unwrap();
        bytes.truncate(bytes.len() - 3);
        fs::write(&bad, bytes).unwrap();
        let mut gone = key();
        gone.split_name = "train".into();
        let gone_path = write_cache(dir.path(), &gone, &one_record()).unwrap();
        fs::remove_file(&gone_path).unwrap();

        let checks = validate_tree(dir.path()).unwrap();
        assert_eq!(checks.len(), 3);
        let by_path = |p: &Path| checks.iter().find(|c| c.path == p).unwrap();
        assert_eq!(by_path(&good).result.as_ref().unwrap().1, 1);
        assert_eq!(
            by_path(&bad).result.as_ref().unwrap_err().code(),
            "truncated"
        );
        assert_eq!(
            by_path(&gone_path).result.as_ref().unwrap_err().code(),
            "io"
        );
    }
}
