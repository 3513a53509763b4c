//! Synthetic domain-shift benchmark generator.
//!
//! Stands in for the large retrieval suites at desk scale: one labeled
//! source domain plus N unlabeled target domains whose token distributions
//! overlap the source by a controllable ratio. Documents are Zipf samples
//! over each domain's vocabulary; every query is built from salient (rare)
//! tokens of one designated document, so relevance holds by construction.
//! Teacher scores come from a deterministic lexical-overlap oracle.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{lex, Corpus, Document, Qrels, Query, Vocabulary};
use crate::error::{DdrError, Result};
use crate::numerics::rng::DdrRng;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DomainSpec {
    pub name: String,
    /// Distinct tokens in this domain's vocabulary.
    pub vocab_size: usize,
    /// Zipf exponent of the token rank-frequency curve.
    pub zipf_exponent: f64,
    /// Desired token-set Jaccard similarity with the source domain, in [0,1].
    /// Ignored for the source itself.
    pub overlap_with_source: f64,
    pub min_doc_len: usize,
    pub max_doc_len: usize,
    pub corpus_size: usize,
    pub query_count: usize,
    /// Salient tokens per generated query.
    pub query_len: usize,
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.corpus_size == 0 || self.query_len == 0 {
            return Err(DdrError::Invalid(format!("sizes must be >= 1: {self:?}")));
        }
        if !(0.0..=1.0).contains(&self.overlap_with_source) {
            return Err(DdrError::Invalid(format!(
                "overlap {} outside [0, 1]",
                self.overlap_with_source
            )));
        }
        if self.min_doc_len == 0 || self.min_doc_len > self.max_doc_len {
            return Err(DdrError::Invalid(format!(
                "doc length range {}..{}",
                self.min_doc_len, self.max_doc_len
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchmarkSpec {
    pub source: DomainSpec,
    pub targets: Vec<DomainSpec>,
    /// Held-out source queries, for in-domain evaluation.
    pub dev_query_count: usize,
    pub hard_negatives_per_query: usize,
}

impl Default for BenchmarkSpec {
    /// The default bundle: a labeled source plus three target domains at
    /// overlap 0.3.
    fn default() -> Self {
        let target = |name: &str| DomainSpec {
            name: name.to_string(),
            vocab_size: 700,
            zipf_exponent: 1.1,
            overlap_with_source: 0.3,
            min_doc_len: 20,
            max_doc_len: 40,
            corpus_size: 160,
            query_count: 24,
            query_len: 4,
        };
        BenchmarkSpec {
            source: DomainSpec {
                name: "source".to_string(),
                vocab_size: 700,
                zipf_exponent: 1.1,
                overlap_with_source: 1.0,
                min_doc_len: 20,
                max_doc_len: 40,
                corpus_size: 240,
                query_count: 64,
                query_len: 4,
            },
            targets: vec![target("t1"), target("t2"), target("t3")],
            dev_query_count: 16,
            hard_negatives_per_query: 3,
        }
    }
}

impl BenchmarkSpec {
    pub fn validate(&self) -> Result<()> {
        self.source.validate()?;
        if self.source.query_count + self.dev_query_count > self.source.corpus_size {
            return Err(DdrError::Invalid(
                "source needs one distinct relevant doc per query".to_string(),
            ));
        }
        let mut names: BTreeSet<&str> = BTreeSet::new();
        names.insert(self.source.name.as_str());
        for t in &self.targets {
            t.validate()?;
            if t.query_count > t.corpus_size {
                return Err(DdrError::Invalid(format!(
                    "target `{}` needs one distinct relevant doc per query",
                    t.name
                )));
            }
            if !names.insert(t.name.as_str()) {
                return Err(DdrError::Invalid(format!("duplicate domain name `{}`", t.name)));
            }
        }
        Ok(())
    }
}

/// Labeled training domain.
#[derive(Debug, Clone)]
pub struct SourceDomain {
    pub corpus: Corpus,
    pub train_queries: Vec<Query>,
    pub train_qrels: Qrels,
    pub dev_queries: Vec<Query>,
    pub dev_qrels: Qrels,
    /// Per train query, the top-scoring non-relevant doc ids.
    pub hard_negatives: BTreeMap<String, Vec<String>>,
    /// Teacher scores for every (train query, positive or hard negative).
    pub teacher_scores: BTreeMap<String, BTreeMap<String, f64>>,
}

/// Unlabeled adaptation domain; qrels exist for evaluation only.
#[derive(Debug, Clone)]
pub struct TargetDomain {
    pub name: String,
    pub corpus: Corpus,
    pub queries: Vec<Query>,
    pub qrels: Qrels,
}

#[derive(Debug, Clone)]
pub struct Benchmark {
    pub vocab: Vocabulary,
    pub source: SourceDomain,
    pub targets: Vec<TargetDomain>,
}

/// Normalized token-set overlap: `|q ∩ d| / sqrt(|q| |d|)`.
///
/// A pure function of the two texts; stands in for a cross-encoder teacher
/// and is monotone in true relevance by construction of the queries.
pub fn teacher_score(query_text: &str, doc_text: &str) -> f64 {
    let q: BTreeSet<String> = lex(query_text).into_iter().collect();
    let d: BTreeSet<String> = lex(doc_text).into_iter().collect();
    if q.is_empty() || d.is_empty() {
        return 0.0;
    }
    let common = q.intersection(&d).count() as f64;
    common / ((q.len() as f64) * (d.len() as f64)).sqrt()
}

/// Token list of one domain, sorted by rank (most frequent first).
struct DomainTokens {
    tokens: Vec<String>,
    /// Cumulative Zipf weights for sampling.
    cumulative: Vec<f64>,
}

impl DomainTokens {
    fn new(tokens: Vec<String>, zipf_exponent: f64) -> Self {
        let mut cumulative = Vec::with_capacity(tokens.len());
        let mut total = 0.0;
        for rank in 1..=tokens.len() {
            total += 1.0 / (rank as f64).powf(zipf_exponent);
            cumulative.push(total);
        }
        DomainTokens { tokens, cumulative }
    }

    fn sample<'a>(&'a self, rng: &mut DdrRng) -> &'a str {
        let total = *self.cumulative.last().expect("non-empty domain vocab");
        let u: f64 = rng.random_range(0.0..total);
        let idx = self.cumulative.partition_point(|&c| c <= u);
        &self.tokens[idx.min(self.tokens.len() - 1)]
    }

    /// Rank of a token: 0 = most frequent.
    fn rank(&self, token: &str) -> usize {
        self.tokens.iter().position(|t| t == token).unwrap_or(0)
    }
}

fn fresh_tokens(counter: &mut usize, n: usize) -> Vec<String> {
    let start = *counter;
    *counter += n;
    (start..start + n).map(|i| format!("w{i:05}")).collect()
}

/// Shared-token count that makes the two equal-priority sets hit the desired
/// Jaccard similarity: `J = c / (ns + nt - c)` solved for `c`.
fn shared_count(ns: usize, nt: usize, jaccard: f64) -> usize {
    let c = jaccard * (ns + nt) as f64 / (1.0 + jaccard);
    (c.round() as usize).min(ns).min(nt)
}

fn generate_docs(
    spec: &DomainSpec,
    prefix: &str,
    tokens: &DomainTokens,
    rng: &mut DdrRng,
) -> Result<Corpus> {
    let mut docs = Vec::with_capacity(spec.corpus_size);
    for i in 0..spec.corpus_size {
        let len = rng.random_range(spec.min_doc_len..=spec.max_doc_len);
        let words: Vec<&str> = (0..len).map(|_| tokens.sample(rng)).collect();
        docs.push(Document {
            id: format!("{prefix}d{i:04}"),
            text: words.join(" "),
        });
    }
    Corpus::new(docs)
}

/// Queries built from salient tokens of distinct designated documents.
fn generate_queries(
    spec: &DomainSpec,
    count: usize,
    id_prefix: &str,
    corpus: &Corpus,
    doc_indices: &[usize],
    tokens: &DomainTokens,
    rng: &mut DdrRng,
) -> (Vec<Query>, Qrels) {
    let mut queries = Vec::with_capacity(count);
    let mut qrels = Qrels::new();
    for (i, &doc_idx) in doc_indices.iter().take(count).enumerate() {
        let doc = &corpus.docs()[doc_idx];
        let distinct: Vec<String> = {
            let set: BTreeSet<String> = lex(&doc.text).into_iter().collect();
            set.into_iter().collect()
        };
        // weight by rank so rare tokens dominate the query
        let mut remaining: Vec<(String, f64)> = distinct
            .into_iter()
            .map(|t| {
                let w = (tokens.rank(&t) + 1) as f64;
                (t, w)
            })
            .collect();
        let mut picked = Vec::new();
        while picked.len() < spec.query_len && !remaining.is_empty() {
            let total: f64 = remaining.iter().map(|(_, w)| w).sum();
            let mut u: f64 = rng.random_range(0.0..total);
            let mut chosen = remaining.len() - 1;
            for (j, (_, w)) in remaining.iter().enumerate() {
                if u < *w {
                    chosen = j;
                    break;
                }
                u -= w;
            }
            picked.push(remaining.remove(chosen).0);
        }
        let qid = format!("{id_prefix}q{i:04}");
        qrels.insert(&qid, &doc.id, 1);
        queries.push(Query {
            id: qid,
            text: picked.join(" "),
        });
    }
    (queries, qrels)
}

/// Top non-relevant docs by teacher score (score desc, id asc) — the
/// desk-scale stand-in for retriever-mined hard negatives.
fn mine_hard_negatives(
    query: &Query,
    relevant: &BTreeSet<&str>,
    corpus: &Corpus,
    count: usize,
) -> Vec<(String, f64)> {
    let mut scored: Vec<(String, f64)> = corpus
        .docs()
        .iter()
        .filter(|d| !relevant.contains(d.id.as_str()))
        .map(|d| (d.id.clone(), teacher_score(&query.text, &d.text)))
        .collect();
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
    scored.truncate(count);
    scored
}

pub fn generate_synthetic_benchmark(spec: &BenchmarkSpec, rng: &mut DdrRng) -> Result<Benchmark> {
    spec.validate()?;

    let mut token_counter = 0usize;
    let source_tokens_raw = fresh_tokens(&mut token_counter, spec.source.vocab_size);
    let source_tokens = DomainTokens::new(source_tokens_raw.clone(), spec.source.zipf_exponent);

    // target vocabularies: `shared` tokens drawn from the source set, the
    // rest fresh, sized so the token-set Jaccard equals the overlap knob
    let mut all_tokens = source_tokens_raw.clone();
    let mut target_token_lists = Vec::new();
    for t in &spec.targets {
        let shared = shared_count(
            spec.source.vocab_size,
            t.vocab_size,
            t.overlap_with_source,
        );
        let picks = sample_indices(rng, source_tokens_raw.len(), shared);
        let mut toks: Vec<String> = picks
            .into_iter()
            .map(|i| source_tokens_raw[i].clone())
            .collect();
        let fresh = fresh_tokens(&mut token_counter, t.vocab_size - shared);
        all_tokens.extend(fresh.iter().cloned());
        toks.extend(fresh);
        // interleave shared and fresh across the frequency ranks
        let n = toks.len();
        for i in (1..n).rev() {
            let j = rng.random_range(0..=i);
            toks.swap(i, j);
        }
        target_token_lists.push(DomainTokens::new(toks, t.zipf_exponent));
    }
    let vocab = Vocabulary::from_tokens(all_tokens)?;

    // source corpus, train + dev queries over distinct relevant docs
    let source_corpus = generate_docs(&spec.source, "s-", &source_tokens, rng)?;
    let total_queries = spec.source.query_count + spec.dev_query_count;
    let doc_picks: Vec<usize> = sample_indices(rng, source_corpus.len(), total_queries).into_vec();
    let (train_queries, train_qrels) = generate_queries(
        &spec.source,
        spec.source.query_count,
        "s-",
        &source_corpus,
        &doc_picks[..spec.source.query_count],
        &source_tokens,
        rng,
    );
    let (dev_queries, dev_qrels) = generate_queries(
        &spec.source,
        spec.dev_query_count,
        "s-dev-",
        &source_corpus,
        &doc_picks[spec.source.query_count..],
        &source_tokens,
        rng,
    );

    let mut hard_negatives = BTreeMap::new();
    let mut teacher_scores: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
    for q in &train_queries {
        let relevant: BTreeSet<&str> = train_qrels.relevant_docs(&q.id).into_iter().collect();
        let negs = mine_hard_negatives(q, &relevant, &source_corpus, spec.hard_negatives_per_query);
        let entry = teacher_scores.entry(q.id.clone()).or_default();
        for docid in &relevant {
            let doc = source_corpus.get(docid).expect("qrels reference the corpus");
            entry.insert((*docid).to_string(), teacher_score(&q.text, &doc.text));
        }
        for (docid, score) in &negs {
            entry.insert(docid.clone(), *score);
        }
        hard_negatives.insert(q.id.clone(), negs.into_iter().map(|(d, _)| d).collect());
    }

    let mut targets = Vec::new();
    for (t, tokens) in spec.targets.iter().zip(&target_token_lists) {
        let prefix = format!("{}-", t.name);
        let corpus = generate_docs(t, &prefix, tokens, rng)?;
        let doc_picks: Vec<usize> =
            sample_indices(rng, corpus.len(), t.query_count).into_vec();
        let (queries, qrels) =
            generate_queries(t, t.query_count, &prefix, &corpus, &doc_picks, tokens, rng);
        targets.push(TargetDomain {
            name: t.name.clone(),
            corpus,
            queries,
            qrels,
        });
    }

    Ok(Benchmark {
        vocab,
        source: SourceDomain {
            corpus: source_corpus,
            train_queries,
            train_qrels,
            dev_queries,
            dev_qrels,
            hard_negatives,
            teacher_scores,
        },
        targets,
    })
}

/// Token-set Jaccard similarity between two corpora.
pub fn corpus_token_jaccard(a: &Corpus, b: &Corpus) -> f64 {
    let ta: BTreeSet<String> = a.docs().iter().flat_map(|d| lex(&d.text)).collect();
    let tb: BTreeSet<String> = b.docs().iter().flat_map(|d| lex(&d.text)).collect();
    let inter = ta.intersection(&tb).count() as f64;
    let union = ta.union(&tb).count() as f64;
    if union == 0.0 {
        0.0
    } else {
        inter / union
    }
}
