//! Robertson BM25 over an inverted index — the traditional baseline.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{lex, Corpus};
use crate::error::{DdrError, Result};

/// Anserini-default parameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Bm25Params { k1: 0.9, b: 0.4 }
    }
}

/// Term postings plus document lengths.
#[derive(Debug, Clone)]
pub struct Bm25Index {
    postings: BTreeMap<String, Vec<(usize, usize)>>,
    doc_ids: Vec<String>,
    doc_lengths: Vec<usize>,
    avg_doc_len: f64,
}

impl Bm25Index {
    pub fn build(corpus: &Corpus) -> Result<Self> {
        if corpus.is_empty() {
            return Err(DdrError::Invalid("cannot index an empty corpus".to_string()));
        }
        let mut postings: BTreeMap<String, Vec<(usize, usize)>> = BTreeMap::new();
        let mut doc_lengths = Vec::with_capacity(corpus.len());
        for (i, doc) in corpus.docs().iter().enumerate() {
            let terms = lex(&doc.text);
            doc_lengths.push(terms.len());
            let mut counts: BTreeMap<String, usize> = BTreeMap::new();
            for t in terms {
                *counts.entry(t).or_default() += 1;
            }
            for (term, tf) in counts {
                postings.entry(term).or_default().push((i, tf));
            }
        }
        let avg_doc_len =
            doc_lengths.iter().sum::<usize>() as f64 / doc_lengths.len() as f64;
        Ok(Bm25Index {
            postings,
            doc_ids: corpus.docs().iter().map(|d| d.id.clone()).collect(),
            doc_lengths,
            avg_doc_len,
        })
    }

    pub fn doc_count(&self) -> usize {
        self.doc_ids.len()
    }

    /// `ln(1 + (N - df + 0.5) / (df + 0.5))` for a term's document frequency.
    pub fn idf(&self, term: &str) -> f64 {
        let df = self.postings.get(term).map_or(0, Vec::len) as f64;
        let n = self.doc_count() as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }

    /// Top-k scored documents for the query terms; ties break toward the
    /// lexicographically smaller doc id. Only documents containing at least
    /// one query term appear.
    pub fn search(&self, query_terms: &[String], k: usize, params: Bm25Params) -> Vec<(String, f64)> {
        let mut scores: BTreeMap<usize, f64> = BTreeMap::new();
        for term in query_terms {
            let Some(posting) = self.postings.get(term) else {
                // absent terms contribute 0 to every score
                continue;
            };
            let idf = self.idf(term);
            for &(doc, tf) in posting {
                let tf = tf as f64;
                let dl = self.doc_lengths[doc] as f64;
                let norm = tf * (params.k1 + 1.0)
                    / (tf + params.k1 * (1.0 - params.b + params.b * dl / self.avg_doc_len));
                *scores.entry(doc).or_default() += idf * norm;
            }
        }
        let mut ranked: Vec<(String, f64)> = scores
            .into_iter()
            .map(|(doc, score)| (self.doc_ids[doc].clone(), score))
            .collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(k);
        ranked
    }
}

/// One-shot build-and-search.
pub fn bm25_search(
    corpus: &Corpus,
    query_terms: &[String],
    k: usize,
    params: Bm25Params,
) -> Result<Vec<(String, f64)>> {
    Ok(Bm25Index::build(corpus)?.search(query_terms, k, params))
}
