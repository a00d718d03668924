//! Knowledgebase index, episodic memory cache and retrieval.
//!
//! Retrieval is exact maximum inner product search. Candidates from the
//! knowledgebase and from the per-story memory are reranked together by dot
//! product and the kept scores are turned into marginalisation weights with a
//! softmax.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap, HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Block, SentenceSplitter, Tokenizer};
use crate::embed::{dot_f32, EmbedError, Embedder, Embedding};
use crate::hashing::derive_seed;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("duplicate passage id `{0}`")]
    DuplicatePassage(String),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error("marginal weights need at least one score")]
    EmptyScores,
    #[error("non-finite retrieval score")]
    NonFiniteScore,
    #[error("knowledgebase file does not start with magic `SALKB1`")]
    BadMagic,
    #[error("knowledgebase file truncated: need {expected} bytes, found {got}")]
    Truncated { expected: u64, got: u64 },
    #[error("knowledgebase file has {0} trailing bytes")]
    TrailingBytes(u64),
    #[error("knowledgebase sidecar has {texts} passages but matrix has {rows} rows")]
    RowMismatch { texts: usize, rows: usize },
    #[error("knowledgebase sidecar line {line}: {source}")]
    Json {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("memory records must have source MEMORY and a memory id")]
    NotMemory,
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, RetrievalError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Source {
    #[serde(rename = "KB")]
    Kb,
    #[serde(rename = "MEMORY")]
    Memory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PassageRecord {
    pub passage_id: String,
    pub text: String,
    pub embedding: Embedding,
    pub source: Source,
    pub memory_id: Option<u64>,
}

impl PassageRecord {
    pub fn kb(passage_id: impl Into<String>, text: impl Into<String>, embedding: Embedding) -> Self {
        PassageRecord {
            passage_id: passage_id.into(),
            text: text.into(),
            embedding,
            source: Source::Kb,
            memory_id: None,
        }
    }

    /// A memory passage keyed by the block it was read in.
    pub fn memory(block_id: u64, text: impl Into<String>, embedding: Embedding) -> Self {
        PassageRecord {
            passage_id: format!("mem:{block_id}"),
            text: text.into(),
            embedding,
            source: Source::Memory,
            memory_id: Some(block_id),
        }
    }
}

/// Ranking order: score descending, then memory before KB, then smaller
/// memory id, then passage id.
fn rank_cmp(a: (&PassageRecord, f64), b: (&PassageRecord, f64)) -> Ordering {
    b.1.total_cmp(&a.1)
        .then_with(|| source_rank(a.0.source).cmp(&source_rank(b.0.source)))
        .then_with(|| match (a.0.memory_id, b.0.memory_id) {
            (Some(x), Some(y)) => x.cmp(&y),
            _ => Ordering::Equal,
        })
        .then_with(|| a.0.passage_id.cmp(&b.0.passage_id))
}

fn source_rank(source: Source) -> u8 {
    match source {
        Source::Memory => 0,
        Source::Kb => 1,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvictionPolicy {
    Lru,
    Fifo,
}

impl std::str::FromStr for EvictionPolicy {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "lru" => Ok(EvictionPolicy::Lru),
            "fifo" => Ok(EvictionPolicy::Fifo),
            other => Err(format!("unknown memory policy `{other}` (expected lru or fifo)")),
        }
    }
}

pub const DEFAULT_MEMORY_CAPACITY: usize = 131_072;

#[derive(Debug, Clone)]
struct CacheEntry {
    record: PassageRecord,
    tick: u64,
}

/// Bounded passage memory with FIFO or LRU eviction.
///
/// Every entry carries a tick; the entry with the smallest tick is the next
/// victim. Insertion always assigns a fresh tick. Under LRU, being returned
/// by retrieval also does; under FIFO it does not.
#[derive(Debug, Clone)]
pub struct MemoryCache {
    capacity: usize,
    policy: EvictionPolicy,
    entries: HashMap<String, CacheEntry>,
    order: BTreeMap<u64, String>,
    next_tick: u64,
}

impl MemoryCache {
    pub fn new(capacity: usize, policy: EvictionPolicy) -> Self {
        assert!(capacity > 0, "memory capacity must be positive");
        MemoryCache {
            capacity,
            policy,
            entries: HashMap::new(),
            order: BTreeMap::new(),
            next_tick: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn policy(&self) -> EvictionPolicy {
        self.policy
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, passage_id: &str) -> bool {
        self.entries.contains_key(passage_id)
    }

    /// Inserts `record`, returning the evicted victim if capacity was exceeded.
    /// Re-inserting an existing id replaces it and counts as a fresh insert.
    pub fn insert(&mut self, record: PassageRecord) -> Result<Option<PassageRecord>> {
        if record.source != Source::Memory || record.memory_id.is_none() {
            return Err(RetrievalError::NotMemory);
        }
        let tick = self.bump();
        let id = record.passage_id.clone();
        if let Some(old) = self.entries.insert(id.clone(), CacheEntry { record, tick }) {
            self.order.remove(&old.tick);
        }
        self.order.insert(tick, id);
        if self.entries.len() > self.capacity {
            let (_, victim) = self.order.pop_first().expect("non-empty order");
            let evicted = self.entries.remove(&victim).expect("order and entries agree");
            return Ok(Some(evicted.record));
        }
        Ok(None)
    }

    /// Marks `passage_id` as used. No-op under FIFO or for unknown ids.
    pub fn touch(&mut self, passage_id: &str) {
        if self.policy != EvictionPolicy::Lru {
            return;
        }
        let tick = self.next_tick;
        if let Some(entry) = self.entries.get_mut(passage_id) {
            self.order.remove(&entry.tick);
            entry.tick = tick;
            self.order.insert(tick, passage_id.to_string());
            self.next_tick += 1;
        }
    }

    fn bump(&mut self) -> u64 {
        let t = self.next_tick;
        self.next_tick += 1;
        t
    }

    /// Entries from next victim to most recent.
    pub fn iter(&self) -> impl Iterator<Item = &PassageRecord> {
        self.order.values().map(|id| &self.entries[id].record)
    }

    /// Passage ids from next victim to most recent.
    pub fn ids_in_eviction_order(&self) -> Vec<String> {
        self.order.values().cloned().collect()
    }

    fn top_k(&self, query: &Embedding, k: usize) -> Vec<(PassageRecord, f64)> {
        let mut scored: Vec<(&PassageRecord, f64)> = self
            .entries
            .values()
            .map(|e| (&e.record, query.dot(e.record.embedding.as_slice())))
            .collect();
        scored.sort_by(|a, b| rank_cmp(*a, *b));
        scored.truncate(k);
        scored.into_iter().map(|(r, s)| (r.clone(), s)).collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct KbSidecarLine {
    passage_id: String,
    text: String,
}

pub const KB_MAGIC: &[u8; 6] = b"SALKB1";
const KB_HEADER_LEN: usize = 6 + 4 + 8;
pub const KB_MATRIX_FILE: &str = "kb.bin";
pub const KB_PASSAGES_FILE: &str = "passages.jsonl";

/// Immutable knowledgebase supporting exact top-k inner product queries.
#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeBase {
    dim: usize,
    ids: Vec<String>,
    texts: Vec<String>,
    matrix: Vec<f32>,
}

const SCAN_BLOCK_ROWS: usize = 1024;

#[derive(Debug)]
struct HeapItem<'a> {
    score: f64,
    id: &'a str,
    row: usize,
}

// Max-heap on "worse" so the root is the current k-th best.
impl Ord for HeapItem<'_> {
    fn cmp(&self, other: &Self) -> Ordering {
        other.score.total_cmp(&self.score).then_with(|| self.id.cmp(other.id))
    }
}

impl PartialOrd for HeapItem<'_> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl PartialEq for HeapItem<'_> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for HeapItem<'_> {}

impl KnowledgeBase {
    pub fn empty(dim: usize) -> Self {
        KnowledgeBase {
            dim,
            ids: Vec::new(),
            texts: Vec::new(),
            matrix: Vec::new(),
        }
    }

    /// Embeds and indexes `passages`. Ids must be unique.
    pub fn build<I>(passages: I, embedder: &dyn Embedder) -> Result<Self>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        let mut kb = KnowledgeBase::empty(embedder.dim());
        let mut seen = HashSet::new();
        let mut pending: Vec<(String, String)> = Vec::new();
        for (id, text) in passages {
            if !seen.insert(id.clone()) {
                return Err(RetrievalError::DuplicatePassage(id));
            }
            pending.push((id, text));
            if pending.len() == 256 {
                kb.push_batch(std::mem::take(&mut pending), embedder)?;
            }
        }
        kb.push_batch(pending, embedder)?;
        Ok(kb)
    }

    fn push_batch(&mut self, batch: Vec<(String, String)>, embedder: &dyn Embedder) -> Result<()> {
        if batch.is_empty() {
            return Ok(());
        }
        let texts: Vec<&str> = batch.iter().map(|(_, t)| t.as_str()).collect();
        let vectors = embedder.embed_batch(&texts)?;
        for ((id, text), v) in batch.into_iter().zip(vectors) {
            v.check_dim(self.dim)?;
            self.matrix.extend_from_slice(v.as_slice());
            self.ids.push(id);
            self.texts.push(text);
        }
        Ok(())
    }

    /// Index from precomputed embeddings.
    pub fn from_embeddings<I>(dim: usize, rows: I) -> Result<Self>
    where
        I: IntoIterator<Item = (String, String, Embedding)>,
    {
        let mut kb = KnowledgeBase::empty(dim);
        let mut seen = HashSet::new();
        for (id, text, v) in rows {
            v.check_dim(dim)?;
            if !seen.insert(id.clone()) {
                return Err(RetrievalError::DuplicatePassage(id));
            }
            kb.matrix.extend_from_slice(v.as_slice());
            kb.ids.push(id);
            kb.texts.push(text);
        }
        Ok(kb)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.matrix[i * self.dim..(i + 1) * self.dim]
    }

    pub fn passage(&self, i: usize) -> PassageRecord {
        PassageRecord::kb(
            self.ids[i].clone(),
            self.texts[i].clone(),
            Embedding::new(self.row(i).to_vec()).expect("stored rows are finite"),
        )
    }

    /// Exact top-k rows by dot product, ties by passage id.
    pub fn top_k(&self, query: &Embedding, k: usize) -> Result<Vec<(usize, f64)>> {
        query.check_dim(self.dim)?;
        if k == 0 || self.is_empty() {
            return Ok(Vec::new());
        }
        let mut heap: BinaryHeap<HeapItem<'_>> = BinaryHeap::with_capacity(k + 1);
        let q = query.as_slice();
        let mut scores = vec![0.0f64; SCAN_BLOCK_ROWS];
        for block_start in (0..self.len()).step_by(SCAN_BLOCK_ROWS) {
            let block_end = (block_start + SCAN_BLOCK_ROWS).min(self.len());
            let rows = &self.matrix[block_start * self.dim..block_end * self.dim];
            for (slot, row) in scores.iter_mut().zip(rows.chunks_exact(self.dim)) {
                *slot = dot_f32(q, row);
            }
            for (offset, &score) in scores[..block_end - block_start].iter().enumerate() {
                let row = block_start + offset;
                let item = HeapItem {
                    score,
                    id: &self.ids[row],
                    row,
                };
                if heap.len() < k {
                    heap.push(item);
                } else if item < *heap.peek().expect("heap is full") {
                    heap.pop();
                    heap.push(item);
                }
            }
        }
        let mut out: Vec<HeapItem<'_>> = heap.into_vec();
        out.sort();
        Ok(out.into_iter().map(|h| (h.row, h.score)).collect())
    }

    /// Serialises the matrix: magic, u32 dimension, u64 count, then
    /// little-endian f32 rows.
    pub fn encode_matrix(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(KB_HEADER_LEN + self.matrix.len() * 4);
        out.extend_from_slice(KB_MAGIC);
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        for v in &self.matrix {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(KB_MATRIX_FILE), self.encode_matrix())?;
        let mut w = BufWriter::new(fs::File::create(dir.join(KB_PASSAGES_FILE))?);
        for (id, text) in self.ids.iter().zip(&self.texts) {
            let line = serde_json::to_string(&KbSidecarLine {
                passage_id: id.clone(),
                text: text.clone(),
            })
            .map_err(|source| RetrievalError::Json { line: 0, source })?;
            writeln!(w, "{line}")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let bytes = fs::read(dir.join(KB_MATRIX_FILE))?;
        let matrix = decode_matrix(&bytes)?;
        let reader = BufReader::new(fs::File::open(dir.join(KB_PASSAGES_FILE))?);
        let mut ids = Vec::new();
        let mut texts = Vec::new();
        let mut seen = HashSet::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: KbSidecarLine =
                serde_json::from_str(&line).map_err(|source| RetrievalError::Json { line: i + 1, source })?;
            if !seen.insert(rec.passage_id.clone()) {
                return Err(RetrievalError::DuplicatePassage(rec.passage_id));
            }
            ids.push(rec.passage_id);
            texts.push(rec.text);
        }
        if ids.len() != matrix.count {
            return Err(RetrievalError::RowMismatch {
                texts: ids.len(),
                rows: matrix.count,
            });
        }
        Ok(KnowledgeBase {
            dim: matrix.dim,
            ids,
            texts,
            matrix: matrix.values,
        })
    }

    /// Content identity for stamping into run configs.
    pub fn fingerprint(&self) -> String {
        crate::hashing::sha256_hex(&self.encode_matrix())[..16].to_string()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodedMatrix {
    pub dim: usize,
    pub count: usize,
    pub values: Vec<f32>,
}

/// Parses the binary knowledgebase matrix, rejecting bad magic, short or
/// over-long payloads and non-finite values.
pub fn decode_matrix(bytes: &[u8]) -> Result<DecodedMatrix> {
    if bytes.len() < KB_MAGIC.len() || &bytes[..KB_MAGIC.len()] != KB_MAGIC {
        return Err(RetrievalError::BadMagic);
    }
    if bytes.len() < KB_HEADER_LEN {
        return Err(RetrievalError::Truncated {
            expected: KB_HEADER_LEN as u64,
            got: bytes.len() as u64,
        });
    }
    let dim = u32::from_le_bytes(bytes[6..10].try_into().expect("4 bytes")) as u64;
    let count = u64::from_le_bytes(bytes[10..18].try_into().expect("8 bytes"));
    let payload = (bytes.len() - KB_HEADER_LEN) as u64;
    let expected = dim
        .checked_mul(count)
        .and_then(|n| n.checked_mul(4))
        .ok_or(RetrievalError::Truncated {
            expected: u64::MAX,
            got: payload,
        })?;
    if payload < expected {
        return Err(RetrievalError::Truncated {
            expected: expected + KB_HEADER_LEN as u64,
            got: bytes.len() as u64,
        });
    }
    if payload > expected {
        return Err(RetrievalError::TrailingBytes(payload - expected));
    }
    let mut values = Vec::with_capacity((expected / 4) as usize);
    for chunk in bytes[KB_HEADER_LEN..].chunks_exact(4) {
        let v = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
        if !v.is_finite() {
            return Err(EmbedError::NonFinite(values.len()).into());
        }
        values.push(v);
    }
    Ok(DecodedMatrix {
        dim: dim as usize,
        count: count as usize,
        values,
    })
}

/// Splits a source document into passages of at most `max_tokens` tokens,
/// breaking only at sentence boundaries unless a single sentence is longer
/// than the limit.
pub fn chunk_document(
    text: &str,
    max_tokens: usize,
    splitter: &dyn SentenceSplitter,
    tokenizer: &dyn Tokenizer,
) -> Vec<String> {
    let mut chunks = Vec::new();
    let mut current: Vec<String> = Vec::new();
    let mut current_tokens = 0;
    let flush = |current: &mut Vec<String>, chunks: &mut Vec<String>| {
        if !current.is_empty() {
            chunks.push(current.join(" "));
            current.clear();
        }
    };
    for sentence in splitter.split(text) {
        let n = tokenizer.count_tokens(&sentence);
        if n > max_tokens {
            flush(&mut current, &mut chunks);
            current_tokens = 0;
            let words: Vec<&str> = sentence.split_whitespace().collect();
            for piece in words.chunks(max_tokens) {
                chunks.push(piece.join(" "));
            }
            continue;
        }
        if current_tokens + n > max_tokens {
            flush(&mut current, &mut chunks);
            current_tokens = 0;
        }
        current.push(sentence);
        current_tokens += n;
    }
    flush(&mut current, &mut chunks);
    chunks
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RetrievalMode {
    KbAndMem,
    KbOnly,
    MemOnly,
    Off,
    Scrambled,
}

impl RetrievalMode {
    pub fn uses_kb(self) -> bool {
        matches!(
            self,
            RetrievalMode::KbAndMem | RetrievalMode::KbOnly | RetrievalMode::Scrambled
        )
    }

    pub fn uses_memory(self) -> bool {
        matches!(
            self,
            RetrievalMode::KbAndMem | RetrievalMode::MemOnly | RetrievalMode::Scrambled
        )
    }

    pub fn as_str(self) -> &'static str {
        match self {
            RetrievalMode::KbAndMem => "kb-mem",
            RetrievalMode::KbOnly => "kb",
            RetrievalMode::MemOnly => "mem",
            RetrievalMode::Off => "off",
            RetrievalMode::Scrambled => "scrambled",
        }
    }
}

impl std::str::FromStr for RetrievalMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "kb-mem" | "kb+mem" | "kb-and-mem" | "mem+kb" => Ok(RetrievalMode::KbAndMem),
            "kb" | "kb-only" => Ok(RetrievalMode::KbOnly),
            "mem" | "mem-only" => Ok(RetrievalMode::MemOnly),
            "off" | "none" => Ok(RetrievalMode::Off),
            "scrambled" | "scram" => Ok(RetrievalMode::Scrambled),
            other => Err(format!(
                "unknown retrieval mode `{other}` (expected kb-mem, kb, mem, off or scrambled)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievedItem {
    pub record: PassageRecord,
    pub score: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RetrievedSet {
    pub items: Vec<RetrievedItem>,
}

impl RetrievedSet {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.items.iter().map(|i| i.weight).collect()
    }

    pub fn texts(&self) -> Vec<String> {
        self.items.iter().map(|i| i.record.text.clone()).collect()
    }

    fn from_ranked(mut ranked: Vec<(PassageRecord, f64)>) -> Result<Self> {
        ranked.sort_by(|a, b| rank_cmp((&a.0, a.1), (&b.0, b.1)));
        if ranked.is_empty() {
            return Ok(RetrievedSet::default());
        }
        let scores: Vec<f64> = ranked.iter().map(|(_, s)| *s).collect();
        let weights = marginal_weights(&scores)?;
        Ok(RetrievedSet {
            items: ranked
                .into_iter()
                .zip(weights)
                .map(|((record, score), weight)| RetrievedItem { record, score, weight })
                .collect(),
        })
    }

    pub fn dump(&self, block_id: u64) -> RetrievalDump {
        RetrievalDump {
            block_id,
            retrieved: self
                .items
                .iter()
                .map(|i| DumpItem {
                    passage_id: i.record.passage_id.clone(),
                    source: i.record.source,
                    memory_id: i.record.memory_id,
                    score: i.score,
                    weight: i.weight,
                })
                .collect(),
        }
    }
}

/// Per-block record of what was retrieved, with dot-product scores and
/// marginal probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalDump {
    pub block_id: u64,
    pub retrieved: Vec<DumpItem>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DumpItem {
    pub passage_id: String,
    pub source: Source,
    pub memory_id: Option<u64>,
    pub score: f64,
    pub weight: f64,
}

/// Softmax with max subtraction.
pub fn marginal_weights(scores: &[f64]) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(RetrievalError::EmptyScores);
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(RetrievalError::NonFiniteScore);
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// Retrieves up to `k` passages from the sources enabled by `mode`.
///
/// `Scrambled` draws `k` passages uniformly without replacement from the
/// knowledgebase and memory together (seeded by `scramble_seed`) and keeps
/// their true scores. Memory passages that are returned count as used for
/// LRU purposes, most relevant last.
pub fn retrieve(
    query: &Embedding,
    kb: &KnowledgeBase,
    cache: &mut MemoryCache,
    k: usize,
    mode: RetrievalMode,
    scramble_seed: u64,
) -> Result<RetrievedSet> {
    if mode == RetrievalMode::Off || k == 0 {
        return Ok(RetrievedSet::default());
    }
    if mode.uses_kb() {
        query.check_dim(kb.dim())?;
    }
    let candidates: Vec<(PassageRecord, f64)> = if mode == RetrievalMode::Scrambled {
        scrambled_candidates(query, kb, cache, k, scramble_seed)?
    } else {
        let mut pool = Vec::new();
        if mode.uses_kb() {
            pool.extend(kb.top_k(query, k)?.into_iter().map(|(row, s)| (kb.passage(row), s)));
        }
        if mode.uses_memory() {
            for record in cache.iter() {
                record.embedding.check_dim(query.dim())?;
            }
            pool.extend(cache.top_k(query, k));
        }
        pool.sort_by(|a, b| rank_cmp((&a.0, a.1), (&b.0, b.1)));
        pool.truncate(k);
        pool
    };
    let set = RetrievedSet::from_ranked(candidates)?;
    for item in set.items.iter().rev() {
        if item.record.source == Source::Memory {
            cache.touch(&item.record.passage_id);
        }
    }
    Ok(set)
}

fn scrambled_candidates(
    query: &Embedding,
    kb: &KnowledgeBase,
    cache: &MemoryCache,
    k: usize,
    seed: u64,
) -> Result<Vec<(PassageRecord, f64)>> {
    let memory: Vec<&PassageRecord> = cache.iter().collect();
    let total = kb.len() + memory.len();
    if total == 0 {
        return Ok(Vec::new());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = rand::seq::index::sample(&mut rng, total, k.min(total));
    let mut out = Vec::with_capacity(picks.len());
    for i in picks.into_iter() {
        let record = if i < kb.len() {
            kb.passage(i)
        } else {
            memory[i - kb.len()].clone()
        };
        record.embedding.check_dim(query.dim())?;
        let score = query.dot(record.embedding.as_slice());
        out.push((record, score));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalConfig {
    pub k: usize,
    pub mode: RetrievalMode,
    pub seed: u64,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        RetrievalConfig {
            k: 20,
            mode: RetrievalMode::KbAndMem,
            seed: 0,
        }
    }
}

/// Retrieval state for one story: the shared knowledgebase plus the story's
/// own memory cache.
///
/// A block's context becomes a memory passage only once the block has been
/// scored ([`StoryRetriever::memorize`]), so retrieval can never see text the
/// reader has not reached yet.
pub struct StoryRetriever<'a> {
    kb: &'a KnowledgeBase,
    cache: MemoryCache,
    embedder: &'a dyn Embedder,
    config: RetrievalConfig,
    story_id: String,
    last_query: Option<(u64, String, Embedding)>,
}

impl<'a> StoryRetriever<'a> {
    pub fn new(
        story_id: impl Into<String>,
        kb: &'a KnowledgeBase,
        cache: MemoryCache,
        embedder: &'a dyn Embedder,
        config: RetrievalConfig,
    ) -> Self {
        StoryRetriever {
            kb,
            cache,
            embedder,
            config,
            story_id: story_id.into(),
            last_query: None,
        }
    }

    pub fn config(&self) -> &RetrievalConfig {
        &self.config
    }

    pub fn cache(&self) -> &MemoryCache {
        &self.cache
    }

    pub fn into_cache(self) -> MemoryCache {
        self.cache
    }

    fn context_embedding(&mut self, block: &Block) -> Result<Embedding> {
        let text = block.context_text();
        if let Some((id, cached_text, emb)) = &self.last_query {
            if *id == block.block_id && *cached_text == text {
                return Ok(emb.clone());
            }
        }
        let emb = self.embedder.embed(&text)?;
        self.last_query = Some((block.block_id, text, emb.clone()));
        Ok(emb)
    }

    /// Retrieval for `block` under the configured mode.
    pub fn retrieve_block(&mut self, block: &Block) -> Result<RetrievedSet> {
        self.retrieve_block_with(block, self.config.mode)
    }

    pub fn retrieve_block_with(&mut self, block: &Block, mode: RetrievalMode) -> Result<RetrievedSet> {
        if mode == RetrievalMode::Off {
            return Ok(RetrievedSet::default());
        }
        let query = self.context_embedding(block)?;
        let seed = derive_seed(self.config.seed, &[&self.story_id, "scramble"], block.block_id);
        retrieve(&query, self.kb, &mut self.cache, self.config.k, mode, seed)
    }

    /// Adds the block's context to memory.
    pub fn memorize(&mut self, block: &Block) -> Result<()> {
        let emb = self.context_embedding(block)?;
        self.cache
            .insert(PassageRecord::memory(block.block_id, block.context_text(), emb))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{RuleSplitter, WhitespaceTokenizer};

    fn unit(dim: usize, i: usize) -> Embedding {
        let mut v = vec![0.0f32; dim];
        v[i] = 1.0;
        Embedding::new(v).unwrap()
    }

    fn mem(id: u64) -> PassageRecord {
        PassageRecord::memory(id, format!("passage {id}"), unit(3, (id % 3) as usize))
    }

    #[test]
    fn orthonormal_kb_lookup() {
        let kb = KnowledgeBase::from_embeddings(
            3,
            (0..3).map(|i| (format!("p{}", i + 1), format!("text {i}"), unit(3, i))),
        )
        .unwrap();
        let hits = kb.top_k(&unit(3, 1), 1).unwrap();
        assert_eq!(hits, vec![(1, 1.0)]);
        assert_eq!(kb.passage(1).passage_id, "p2");
    }

    #[test]
    fn empty_kb_returns_nothing() {
        let kb = KnowledgeBase::empty(3);
        assert!(kb.top_k(&unit(3, 0), 5).unwrap().is_empty());
        let mut cache = MemoryCache::new(2, EvictionPolicy::Lru);
        let set = retrieve(&unit(3, 0), &kb, &mut cache, 5, RetrievalMode::KbAndMem, 0).unwrap();
        assert!(set.is_empty());
    }

    #[test]
    fn duplicate_passage_rejected() {
        let e = crate::embed::HashedBowEmbedder::new(8);
        let err = KnowledgeBase::build(
            vec![("a".to_string(), "x".to_string()), ("a".to_string(), "y".to_string())],
            &e,
        )
        .unwrap_err();
        assert!(matches!(err, RetrievalError::DuplicatePassage(id) if id == "a"));
    }

    #[test]
    fn fifo_evicts_oldest() {
        let mut cache = MemoryCache::new(2, EvictionPolicy::Fifo);
        assert!(cache.insert(mem(0)).unwrap().is_none());
        assert!(cache.insert(mem(1)).unwrap().is_none());
        let victim = cache.insert(mem(2)).unwrap().unwrap();
        assert_eq!(victim.passage_id, "mem:0");
        assert_eq!(cache.ids_in_eviction_order(), vec!["mem:1", "mem:2"]);
    }

    #[test]
    fn lru_keeps_recently_retrieved() {
        let kb = KnowledgeBase::empty(3);
        let mut cache = MemoryCache::new(2, EvictionPolicy::Lru);
        cache.insert(mem(0)).unwrap(); // A, embedding e0
        cache.insert(mem(1)).unwrap(); // B, embedding e1
        let set = retrieve(&unit(3, 0), &kb, &mut cache, 1, RetrievalMode::MemOnly, 0).unwrap();
        assert_eq!(set.items[0].record.passage_id, "mem:0");
        let victim = cache.insert(mem(2)).unwrap().unwrap();
        assert_eq!(victim.passage_id, "mem:1");
        let mut ids = cache.ids_in_eviction_order();
        ids.sort();
        assert_eq!(ids, vec!["mem:0", "mem:2"]);
    }

    #[test]
    fn capacity_one() {
        let mut cache = MemoryCache::new(1, EvictionPolicy::Lru);
        cache.insert(mem(0)).unwrap();
        assert_eq!(cache.len(), 1);
        assert!(cache.contains("mem:0"));
    }

    #[test]
    fn memory_rejects_kb_records() {
        let mut cache = MemoryCache::new(1, EvictionPolicy::Fifo);
        let err = cache.insert(PassageRecord::kb("x", "t", unit(3, 0))).unwrap_err();
        assert!(matches!(err, RetrievalError::NotMemory));
    }

    #[test]
    fn off_mode_and_singletons() {
        let kb = KnowledgeBase::from_embeddings(3, vec![("only".to_string(), "t".to_string(), unit(3, 2))]).unwrap();
        let mut cache = MemoryCache::new(4, EvictionPolicy::Fifo);
        assert!(retrieve(&unit(3, 0), &kb, &mut cache, 3, RetrievalMode::Off, 0)
            .unwrap()
            .is_empty());
        let set = retrieve(&unit(3, 0), &kb, &mut cache, 7, RetrievalMode::KbOnly, 0).unwrap();
        assert_eq!(set.len(), 1);
        assert_eq!(set.items[0].weight, 1.0);
    }

    #[test]
    fn ties_prefer_memory_then_lower_memory_id() {
        let kb = KnowledgeBase::from_embeddings(3, vec![("kb".to_string(), "t".to_string(), unit(3, 0))]).unwrap();
        let mut cache = MemoryCache::new(4, EvictionPolicy::Fifo);
        cache.insert(PassageRecord::memory(9, "a", unit(3, 0))).unwrap();
        cache.insert(PassageRecord::memory(4, "b", unit(3, 0))).unwrap();
        let set = retrieve(&unit(3, 0), &kb, &mut cache, 3, RetrievalMode::KbAndMem, 0).unwrap();
        let ids: Vec<_> = set.items.iter().map(|i| i.record.passage_id.as_str()).collect();
        assert_eq!(ids, vec!["mem:4", "mem:9", "kb"]);
    }

    #[test]
    fn scrambled_is_seeded() {
        let kb =
            KnowledgeBase::from_embeddings(3, (0..30).map(|i| (format!("p{i:02}"), String::new(), unit(3, i % 3))))
                .unwrap();
        let mut cache = MemoryCache::new(4, EvictionPolicy::Fifo);
        let a = retrieve(&unit(3, 0), &kb, &mut cache, 5, RetrievalMode::Scrambled, 11).unwrap();
        let b = retrieve(&unit(3, 0), &kb, &mut cache, 5, RetrievalMode::Scrambled, 11).unwrap();
        let c = retrieve(&unit(3, 0), &kb, &mut cache, 5, RetrievalMode::Scrambled, 12).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 5);
        assert_ne!(a, c);
        for item in &a.items {
            assert_eq!(item.score, unit(3, 0).dot(item.record.embedding.as_slice()));
        }
    }

    #[test]
    fn softmax_cases() {
        assert_eq!(marginal_weights(&[3.5]).unwrap(), vec![1.0]);
        assert_eq!(marginal_weights(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
        let w = marginal_weights(&[1000.0, 1000.1, 999.9]).unwrap();
        assert!(w.iter().all(|x| x.is_finite()));
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(w[1] > w[0] && w[1] > w[2]);
        // exp(0.1) ratio between neighbours
        assert!((w[1] / w[0] - 0.1f64.exp()).abs() < 1e-9);
        assert!(matches!(marginal_weights(&[]), Err(RetrievalError::EmptyScores)));
    }

    #[test]
    fn matrix_codec_rejects_garbage() {
        let kb = KnowledgeBase::from_embeddings(2, vec![("a".into(), "t".into(), unit(2, 1))]).unwrap();
        let bytes = kb.encode_matrix();
        let decoded = decode_matrix(&bytes).unwrap();
        assert_eq!(decoded.dim, 2);
        assert_eq!(decoded.count, 1);
        assert_eq!(decoded.values, vec![0.0, 1.0]);
        assert!(matches!(
            decode_matrix(b"NOTKB1xxxxxxxxxxxx"),
            Err(RetrievalError::BadMagic)
        ));
        assert!(matches!(
            decode_matrix(&bytes[..bytes.len() - 1]),
            Err(RetrievalError::Truncated { .. })
        ));
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(decode_matrix(&long), Err(RetrievalError::TrailingBytes(1))));
        let mut huge = bytes[..18].to_vec();
        huge[6..10].copy_from_slice(&u32::MAX.to_le_bytes());
        huge[10..18].copy_from_slice(&u64::MAX.to_le_bytes());
        assert!(decode_matrix(&huge).is_err());
    }

    #[test]
    fn chunking_snaps_to_sentences() {
        let text = "one two three. four five. six seven eight nine ten eleven.";
        let chunks = chunk_document(text, 5, &RuleSplitter::new(), &WhitespaceTokenizer);
        assert_eq!(
            chunks,
            vec!["one two three. four five.", "six seven eight nine ten", "eleven."]
        );
    }
}
