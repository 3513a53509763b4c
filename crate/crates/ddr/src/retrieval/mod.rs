//! Corpus encoding, exact top-k dense search, and the NDCG/Recall metric
//! suite over TREC-style run files.

mod bm25;

pub use bm25::{bm25_search, Bm25Index, Bm25Params};

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::corpus::{tokenize, Corpus, Qrels, Vocabulary};
use crate::encoder::{similarity, SimilarityKind, TokenSequence};
use crate::error::{DdrError, Result};

/// Anything that can embed a token sequence (a bare backbone or an
/// assembled model).
pub trait DocEncoder: Sync {
    fn embed(&self, seq: &TokenSequence) -> Result<Vec<f32>>;
}

impl DocEncoder for crate::encoder::EncoderBackbone<f32> {
    fn embed(&self, seq: &TokenSequence) -> Result<Vec<f32>> {
        self.encode(seq)
    }
}

impl DocEncoder for crate::rem::AssembledModel<f32> {
    fn embed(&self, seq: &TokenSequence) -> Result<Vec<f32>> {
        self.encode(seq)
    }
}

/// Where an index came from, for reproducibility audits.
#[derive(Debug, Clone, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct IndexProvenance {
    pub model_checksum: String,
    pub corpus_checksum: String,
}

/// Document embeddings in corpus order.
#[derive(Debug, Clone)]
pub struct EmbeddingIndex {
    doc_ids: Vec<String>,
    embeddings: Vec<f32>,
    dim: usize,
    similarity: SimilarityKind,
    provenance: IndexProvenance,
}

impl EmbeddingIndex {
    pub fn len(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doc_ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn similarity_kind(&self) -> SimilarityKind {
        self.similarity
    }

    pub fn doc_ids(&self) -> &[String] {
        &self.doc_ids
    }

    pub fn embedding(&self, row: usize) -> &[f32] {
        &self.embeddings[row * self.dim..(row + 1) * self.dim]
    }

    pub fn provenance(&self) -> &IndexProvenance {
        &self.provenance
    }
}

/// Encode every document of a corpus. Rows follow corpus order whether the
/// build is serial or fans out over documents.
pub fn build_index(
    encoder: &impl DocEncoder,
    corpus: &Corpus,
    vocab: &Vocabulary,
    max_len: usize,
    similarity: SimilarityKind,
    provenance: IndexProvenance,
    parallel: bool,
) -> Result<EmbeddingIndex> {
    if corpus.is_empty() {
        return Err(DdrError::Invalid("cannot index an empty corpus".to_string()));
    }
    let encode_one = |doc: &crate::corpus::Document| -> Result<Vec<f32>> {
        let seq = tokenize(&doc.text, vocab, max_len)?;
        encoder.embed(&seq)
    };
    let rows: Vec<Vec<f32>> = if parallel {
        corpus
            .docs()
            .par_iter()
            .map(encode_one)
            .collect::<Result<_>>()?
    } else {
        corpus.docs().iter().map(encode_one).collect::<Result<_>>()?
    };
    let dim = rows[0].len();
    let mut embeddings = Vec::with_capacity(rows.len() * dim);
    for row in &rows {
        if row.len() != dim {
            return Err(DdrError::Shape(format!(
                "inconsistent embedding dims {} vs {dim}",
                row.len()
            )));
        }
        embeddings.extend_from_slice(row);
    }
    Ok(EmbeddingIndex {
        doc_ids: corpus.docs().iter().map(|d| d.id.clone()).collect(),
        embeddings,
        dim,
        similarity,
        provenance,
    })
}

/// Exact top-k by similarity; ties break toward the lexicographically
/// smaller doc id. Returns all documents when `k >= len`.
pub fn search(index: &EmbeddingIndex, query: &[f32], k: usize) -> Result<Vec<(String, f32)>> {
    if k == 0 {
        return Err(DdrError::Invalid("k must be >= 1".to_string()));
    }
    if query.len() != index.dim {
        return Err(DdrError::Shape(format!(
            "query dim {} vs index dim {}",
            query.len(),
            index.dim
        )));
    }
    let mut scored: Vec<(usize, f32)> = (0..index.len())
        .map(|row| Ok((row, similarity(query, index.embedding(row), index.similarity)?)))
        .collect::<Result<_>>()?;

    let better = |a: &(usize, f32), b: &(usize, f32)| {
        b.1.total_cmp(&a.1)
            .then_with(|| index.doc_ids[a.0].cmp(&index.doc_ids[b.0]))
    };
    let k = k.min(scored.len());
    if k < scored.len() {
        scored.select_nth_unstable_by(k - 1, better);
        scored.truncate(k);
    }
    scored.sort_unstable_by(better);
    Ok(scored
        .into_iter()
        .map(|(row, score)| (index.doc_ids[row].clone(), score))
        .collect())
}

// ── Run files ────────────────────────────────────────────────────────

/// Per-query ranked results, scores non-increasing, no duplicate docs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunFile {
    rankings: BTreeMap<String, Vec<(String, f32)>>,
}

impl RunFile {
    pub fn new() -> Self {
        RunFile::default()
    }

    pub fn insert(&mut self, qid: &str, ranked: Vec<(String, f32)>) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for window in ranked.windows(2) {
            if window[1].1 > window[0].1 {
                return Err(DdrError::Invalid(format!(
                    "run for `{qid}` has increasing scores"
                )));
            }
        }
        for (docid, _) in &ranked {
            if !seen.insert(docid.clone()) {
                return Err(DdrError::Invalid(format!(
                    "run for `{qid}` repeats doc `{docid}`"
                )));
            }
        }
        if self.rankings.insert(qid.to_string(), ranked).is_some() {
            return Err(DdrError::Invalid(format!("duplicate run entry for `{qid}`")));
        }
        Ok(())
    }

    pub fn ranking(&self, qid: &str) -> Option<&[(String, f32)]> {
        self.rankings.get(qid).map(Vec::as_slice)
    }

    pub fn query_ids(&self) -> impl Iterator<Item = &str> {
        self.rankings.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.rankings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rankings.is_empty()
    }

    /// TREC format: `qid Q0 docid rank score tag`.
    pub fn write_trec(&self, path: &Path, tag: &str) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        for (qid, ranked) in &self.rankings {
            for (rank, (docid, score)) in ranked.iter().enumerate() {
                writeln!(out, "{qid} Q0 {docid} {} {score:.6} {tag}", rank + 1)?;
            }
        }
        Ok(())
    }

    pub fn read_trec(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let mut raw: BTreeMap<String, Vec<(String, f32)>> = BTreeMap::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 6 {
                return Err(DdrError::Parse {
                    path: path.display().to_string(),
                    line: i + 1,
                    message: "expected `qid Q0 docid rank score tag`".to_string(),
                });
            }
            let score: f32 = fields[4].parse().map_err(|_| DdrError::Parse {
                path: path.display().to_string(),
                line: i + 1,
                message: format!("bad score `{}`", fields[4]),
            })?;
            raw.entry(fields[0].to_string())
                .or_default()
                .push((fields[2].to_string(), score));
        }
        let mut run = RunFile::new();
        for (qid, mut ranked) in raw {
            ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
            run.insert(&qid, ranked)?;
        }
        Ok(run)
    }
}

// ── Metrics ──────────────────────────────────────────────────────────

fn relevant_grades(qrels: &Qrels, qid: &str) -> Vec<(String, u32)> {
    qrels
        .for_query(qid)
        .map(|m| {
            m.iter()
                .filter(|(_, &g)| g > 0)
                .map(|(d, &g)| (d.clone(), g))
                .collect()
        })
        .unwrap_or_default()
}

/// Mean NDCG@k with linear gain `grade / log2(rank + 1)`, averaged over the
/// qrels queries that have at least one relevant document. A query missing
/// from the run scores 0.
pub fn ndcg_at_k(run: &RunFile, qrels: &Qrels, k: usize) -> f64 {
    debug_assert!(k >= 1);
    let mut total = 0.0;
    let mut count = 0usize;
    for qid in qrels.query_ids() {
        let rel = relevant_grades(qrels, qid);
        if rel.is_empty() {
            continue;
        }
        count += 1;
        let mut ideal: Vec<u32> = rel.iter().map(|&(_, g)| g).collect();
        ideal.sort_unstable_by(|a, b| b.cmp(a));
        let idcg: f64 = ideal
            .iter()
            .take(k)
            .enumerate()
            .map(|(i, &g)| f64::from(g) / ((i + 2) as f64).log2())
            .sum();
        let Some(ranked) = run.ranking(qid) else {
            continue;
        };
        let grades: BTreeMap<&str, u32> = rel.iter().map(|(d, g)| (d.as_str(), *g)).collect();
        let dcg: f64 = ranked
            .iter()
            .take(k)
            .enumerate()
            .filter_map(|(i, (docid, _))| {
                grades
                    .get(docid.as_str())
                    .map(|&g| f64::from(g) / ((i + 2) as f64).log2())
            })
            .sum();
        total += dcg / idcg;
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

/// Mean Recall@k over the qrels queries with at least one relevant document.
pub fn recall_at_k(run: &RunFile, qrels: &Qrels, k: usize) -> f64 {
    debug_assert!(k >= 1);
    let mut total = 0.0;
    let mut count = 0usize;
    for qid in qrels.query_ids() {
        let rel = relevant_grades(qrels, qid);
        if rel.is_empty() {
            continue;
        }
        count += 1;
        let Some(ranked) = run.ranking(qid) else {
            continue;
        };
        let rel_set: std::collections::BTreeSet<&str> =
            rel.iter().map(|(d, _)| d.as_str()).collect();
        let hit = ranked
            .iter()
            .take(k)
            .filter(|(d, _)| rel_set.contains(d.as_str()))
            .count();
        total += hit as f64 / rel.len() as f64;
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

// ── Index persistence ────────────────────────────────────────────────

const INDEX_MAGIC: &[u8; 8] = b"DDRINDEX";
const INDEX_VERSION: u32 = 1;

#[derive(serde::Serialize, serde::Deserialize)]
struct IndexMeta {
    version: u32,
    dim: usize,
    similarity: SimilarityKind,
    doc_ids: Vec<String>,
    provenance: IndexProvenance,
}

impl EmbeddingIndex {
    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::to_vec(&IndexMeta {
            version: INDEX_VERSION,
            dim: self.dim,
            similarity: self.similarity,
            doc_ids: self.doc_ids.clone(),
            provenance: self.provenance.clone(),
        })?;
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        out.write_all(INDEX_MAGIC)?;
        out.write_all(&(meta.len() as u64).to_le_bytes())?;
        out.write_all(&meta)?;
        for v in &self.embeddings {
            out.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        if bytes.len() < 16 || &bytes[..8] != INDEX_MAGIC {
            return Err(DdrError::CheckpointCorrupt(format!(
                "{} is not an index file",
                path.display()
            )));
        }
        let meta_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let blob_start = 16 + meta_len;
        if bytes.len() < blob_start {
            return Err(DdrError::CheckpointCorrupt("truncated meta".to_string()));
        }
        let meta: IndexMeta = serde_json::from_slice(&bytes[16..blob_start])?;
        if meta.version != INDEX_VERSION {
            return Err(DdrError::CheckpointVersion {
                found: meta.version,
                supported: INDEX_VERSION,
            });
        }
        let expected = meta.doc_ids.len() * meta.dim * 4;
        if bytes.len() - blob_start != expected {
            return Err(DdrError::CheckpointCorrupt(format!(
                "blob is {} bytes, manifest implies {expected}",
                bytes.len() - blob_start
            )));
        }
        let embeddings: Vec<f32> = bytes[blob_start..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(EmbeddingIndex {
            doc_ids: meta.doc_ids,
            embeddings,
            dim: meta.dim,
            similarity: meta.similarity,
            provenance: meta.provenance,
        })
    }
}
