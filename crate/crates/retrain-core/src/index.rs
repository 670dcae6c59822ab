//! Inverted-index retrieval over sparse vectors.
//!
//! The bag-of-tokens index is built once from `T(D)` and stays frozen for
//! the whole training run; a parametric index over `E_θ(D)` exists for the
//! periodic re-indexing ablation and is swapped atomically between batches.
//! Search is exact top-k by inner product with ties broken by ascending
//! document ordinal.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Datastore;
use crate::encoder::{encode, EncoderParams};
use crate::error::{Error, Result};
use crate::parallel::map_ordered;
use crate::sparse::SparseVector;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum IndexKind {
    BagOfTokens,
    Parametric,
}

#[derive(Debug, Clone)]
pub struct InvertedIndex {
    pub kind: IndexKind,
    dim: usize,
    doc_ids: Vec<String>,
    /// Per-dimension posting lists of (doc ordinal, value), sorted by ordinal.
    postings: Vec<Vec<(u32, f64)>>,
    built_at_step: u64,
}

/// Ranked retrieval result for one query: scores non-increasing, ties broken
/// by ascending document ordinal, at most `k` entries.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievedSet {
    pub query_id: String,
    pub entries: Vec<(String, f64)>,
    pub k: usize,
}

impl InvertedIndex {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn doc_count(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn built_at_step(&self) -> u64 {
        self.built_at_step
    }

    pub fn doc_id(&self, ordinal: u32) -> &str {
        &self.doc_ids[ordinal as usize]
    }
}

/// Build an inverted index whose postings contain exactly the nonzeros of
/// each vector. Vectors must be nonempty and share a dimension.
pub fn build_index(
    vectors: &[SparseVector],
    doc_ids: &[String],
    kind: IndexKind,
    built_at_step: u64,
) -> Result<InvertedIndex> {
    if vectors.is_empty() {
        return Err(Error::IndexBuild("cannot build an index over an empty corpus".into()));
    }
    if vectors.len() != doc_ids.len() {
        return Err(Error::IndexBuild(format!(
            "{} vectors but {} document ids",
            vectors.len(),
            doc_ids.len()
        )));
    }
    let dim = vectors[0].dim();
    let mut postings: Vec<Vec<(u32, f64)>> = vec![Vec::new(); dim];
    for (ordinal, (vector, doc_id)) in vectors.iter().zip(doc_ids).enumerate() {
        if vector.dim() != dim {
            return Err(Error::IndexBuild(format!(
                "document {doc_id:?} has dim {} but the index has dim {dim}",
                vector.dim()
            )));
        }
        if vector.is_empty() {
            return Err(Error::IndexBuild(format!(
                "document {doc_id:?} has an empty vector and cannot be indexed"
            )));
        }
        for (d, v) in vector.iter() {
            postings[d as usize].push((ordinal as u32, v));
        }
    }
    Ok(InvertedIndex { kind, dim, doc_ids: doc_ids.to_vec(), postings, built_at_step })
}

/// Exact top-k by `sum_i q_i * d_i` over shared nonzero dimensions.
pub fn search(index: &InvertedIndex, query: &SparseVector, k: usize) -> Result<RetrievedSet> {
    assert!(k >= 1, "k must be >= 1");
    if query.dim() != index.dim {
        return Err(Error::DimMismatch { query: query.dim(), index: index.dim });
    }
    let mut scores = vec![0.0f64; index.doc_count()];
    let mut touched = vec![false; index.doc_count()];
    // Query dimensions ascend, so each document accumulates contributions in
    // ascending dimension order — bitwise identical to a sorted dense dot.
    for (d, qv) in query.iter() {
        for &(ordinal, dv) in &index.postings[d as usize] {
            scores[ordinal as usize] += qv * dv;
            touched[ordinal as usize] = true;
        }
    }
    let mut candidates: Vec<u32> =
        (0..index.doc_count() as u32).filter(|&o| touched[o as usize]).collect();
    candidates.sort_by(|&a, &b| {
        scores[b as usize]
            .partial_cmp(&scores[a as usize])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    candidates.truncate(k);
    let entries = candidates
        .into_iter()
        .map(|o| (index.doc_ids[o as usize].clone(), scores[o as usize]))
        .collect();
    Ok(RetrievedSet { query_id: String::new(), entries, k })
}

/// Two-stage late parametric search: top-`m` from the bag-of-tokens index
/// with the live query embedding, then re-rank those candidates by
/// `E_θ(q) · E_θ(d)` with the current parameters and keep the top-`k`.
pub fn late_parametric_search(
    params: &EncoderParams,
    bot_index: &InvertedIndex,
    datastore: &Datastore,
    query_tokens: &[u32],
    m: usize,
    k: usize,
    k_sparse: usize,
) -> Result<RetrievedSet> {
    assert!(m >= k && k >= 1, "require m >= k >= 1");
    let query_vec = encode(params, query_tokens, k_sparse)?;
    let stage1 = search(bot_index, &query_vec, m)?;
    rerank(params, datastore, &query_vec, &stage1, k, k_sparse)
}

/// Re-rank an existing candidate set by the parametric score.
pub fn rerank(
    params: &EncoderParams,
    datastore: &Datastore,
    query_vec: &SparseVector,
    candidates: &RetrievedSet,
    k: usize,
    k_sparse: usize,
) -> Result<RetrievedSet> {
    let scored: Vec<Result<(usize, String, f64)>> = map_ordered(&candidates.entries, |(doc_id, _)| {
        let ordinal = datastore
            .ordinal(doc_id)
            .ok_or_else(|| Error::Validation(format!("candidate {doc_id:?} not in datastore")))?;
        let doc = &datastore.documents[ordinal];
        let doc_vec = encode(params, &doc.token_ids, k_sparse)?;
        Ok((ordinal, doc_id.clone(), query_vec.dot(&doc_vec)))
    });
    let mut scored: Vec<(usize, String, f64)> = scored.into_iter().collect::<Result<_>>()?;
    scored.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap_or(std::cmp::Ordering::Equal).then(a.0.cmp(&b.0)));
    scored.truncate(k);
    Ok(RetrievedSet {
        query_id: candidates.query_id.clone(),
        entries: scored.into_iter().map(|(_, id, s)| (id, s)).collect(),
        k,
    })
}

/// How the retriever answers queries during training and evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RetrievalMode {
    /// Stage 1 over the frozen bag-of-tokens index, stage 2 re-ranks the
    /// top-m candidates with live parameters.
    LateParametric,
    /// Stage 1 only; no re-ranking.
    BotOnly,
    /// Single-stage search over a (possibly stale) parametric index.
    PeriodicReindex,
}

/// Everything needed to answer a query under the configured retrieval mode.
/// Indexes are immutable; a rebuild swaps `parametric_index` between batches.
pub struct SearchContext<'a> {
    pub params: &'a EncoderParams,
    pub datastore: &'a Datastore,
    pub bot_index: &'a InvertedIndex,
    pub parametric_index: Option<&'a InvertedIndex>,
    pub mode: RetrievalMode,
    pub m: usize,
    pub k_sparse: usize,
}

impl SearchContext<'_> {
    pub fn retrieve(&self, query_id: &str, query_tokens: &[u32], k: usize) -> Result<RetrievedSet> {
        let mut hits = match self.mode {
            RetrievalMode::LateParametric => late_parametric_search(
                self.params,
                self.bot_index,
                self.datastore,
                query_tokens,
                self.m.max(k),
                k,
                self.k_sparse,
            )?,
            RetrievalMode::BotOnly => {
                let qv = encode(self.params, query_tokens, self.k_sparse)?;
                search(self.bot_index, &qv, k)?
            }
            RetrievalMode::PeriodicReindex => {
                let index = self.parametric_index.ok_or_else(|| {
                    Error::Validation("periodic-reindex mode requires a parametric index".into())
                })?;
                let qv = encode(self.params, query_tokens, self.k_sparse)?;
                search(index, &qv, k)?
            }
        };
        hits.query_id = query_id.to_string();
        Ok(hits)
    }
}

/// Build the frozen bag-of-tokens index `T(D)` over a datastore.
pub fn build_bag_index(datastore: &Datastore) -> Result<InvertedIndex> {
    let dim = datastore.vocabulary.size();
    let vectors: Vec<SparseVector> = datastore
        .documents
        .iter()
        .map(|d| crate::corpus::bag_of_tokens(&d.token_ids, dim))
        .collect::<Result<_>>()?;
    let ids: Vec<String> = datastore.documents.iter().map(|d| d.id.clone()).collect();
    build_index(&vectors, &ids, IndexKind::BagOfTokens, 0)
}

/// Embed every document with the current parameters and build a parametric
/// index (the periodic re-indexing ablation path).
pub fn build_parametric_index(
    params: &EncoderParams,
    datastore: &Datastore,
    k_sparse: usize,
    built_at_step: u64,
) -> Result<InvertedIndex> {
    let vectors: Vec<Result<SparseVector>> =
        map_ordered(&datastore.documents, |d| encode(params, &d.token_ids, k_sparse));
    let vectors: Vec<SparseVector> = vectors.into_iter().collect::<Result<_>>()?;
    let ids: Vec<String> = datastore.documents.iter().map(|d| d.id.clone()).collect();
    build_index(&vectors, &ids, IndexKind::Parametric, built_at_step)
}

const INDEX_MAGIC: &[u8; 4] = b"SIVX";
const INDEX_VERSION: u32 = 1;

/// Serialize the index: magic, version, kind, dim, doc count, build step,
/// document ids, then per-dimension postings. Round-trips bit-exactly.
pub fn save_index(index: &InvertedIndex, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(INDEX_MAGIC)?;
    w.write_all(&INDEX_VERSION.to_le_bytes())?;
    w.write_all(&[match index.kind {
        IndexKind::BagOfTokens => 0u8,
        IndexKind::Parametric => 1u8,
    }])?;
    w.write_all(&(index.dim as u64).to_le_bytes())?;
    w.write_all(&(index.doc_count() as u64).to_le_bytes())?;
    w.write_all(&index.built_at_step.to_le_bytes())?;
    for id in &index.doc_ids {
        let bytes = id.as_bytes();
        w.write_all(&(bytes.len() as u32).to_le_bytes())?;
        w.write_all(bytes)?;
    }
    for posting in &index.postings {
        w.write_all(&(posting.len() as u64).to_le_bytes())?;
        for &(ordinal, value) in posting {
            w.write_all(&ordinal.to_le_bytes())?;
            w.write_all(&value.to_bits().to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_index(path: &Path) -> Result<InvertedIndex> {
    let file = std::fs::File::open(path)?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic)?;
    if &magic != INDEX_MAGIC {
        return Err(Error::IndexFile("bad magic: not an index file".into()));
    }
    let version = read_u32(&mut r)?;
    if version != INDEX_VERSION {
        return Err(Error::IndexFile(format!(
            "unsupported index version {version} (expected {INDEX_VERSION})"
        )));
    }
    let mut kind_byte = [0u8; 1];
    read_exact(&mut r, &mut kind_byte)?;
    let kind = match kind_byte[0] {
        0 => IndexKind::BagOfTokens,
        1 => IndexKind::Parametric,
        other => return Err(Error::IndexFile(format!("unknown index kind flag {other}"))),
    };
    let dim = read_u64(&mut r)? as usize;
    let doc_count = read_u64(&mut r)? as usize;
    let built_at_step = read_u64(&mut r)?;
    let mut doc_ids = Vec::with_capacity(doc_count);
    for _ in 0..doc_count {
        let len = read_u32(&mut r)? as usize;
        let mut buf = vec![0u8; len];
        read_exact(&mut r, &mut buf)?;
        doc_ids.push(String::from_utf8(buf).map_err(|e| Error::IndexFile(e.to_string()))?);
    }
    let mut postings = Vec::with_capacity(dim);
    for _ in 0..dim {
        let len = read_u64(&mut r)? as usize;
        let mut posting = Vec::with_capacity(len);
        for _ in 0..len {
            let ordinal = read_u32(&mut r)?;
            let bits = read_u64(&mut r)?;
            posting.push((ordinal, f64::from_bits(bits)));
        }
        postings.push(posting);
    }
    Ok(InvertedIndex { kind, dim, doc_ids, postings, built_at_step })
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| Error::IndexFile(format!("truncated index file: {e}")))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_exact(r, &mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut buf = [0u8; 8];
    read_exact(r, &mut buf)?;
    Ok(u64::from_le_bytes(buf))
}
