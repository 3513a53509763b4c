//! Data formats, the whitespace tokenizer, and file loaders.
//!
//! Corpora are JSON lines (`{"doc_id": ..., "text": ...}`), queries are
//! tab-separated `qid<TAB>text`, qrels use the TREC convention
//! `qid 0 docid grade`. All UTF-8.

mod generate;

pub use generate::{
    corpus_token_jaccard, generate_synthetic_benchmark, teacher_score, Benchmark, BenchmarkSpec,
    DomainSpec, SourceDomain, TargetDomain,
};

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::TokenSequence;
use crate::error::{DdrError, Result};

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const MASK_ID: usize = 2;
pub const CLS_ID: usize = 3;
pub const SEP_ID: usize = 4;
pub const RESERVED_TOKENS: [&str; 5] = ["[PAD]", "[UNK]", "[MASK]", "[CLS]", "[SEP]"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Document {
    pub id: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Query {
    pub id: String,
    pub text: String,
}

/// Documents with unique ids, in a stable order.
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    docs: Vec<Document>,
    by_id: BTreeMap<String, usize>,
}

impl Corpus {
    pub fn new(docs: Vec<Document>) -> Result<Self> {
        let mut by_id = BTreeMap::new();
        for (i, doc) in docs.iter().enumerate() {
            if doc.text.is_empty() {
                return Err(DdrError::Invalid(format!("document `{}` has empty text", doc.id)));
            }
            if by_id.insert(doc.id.clone(), i).is_some() {
                return Err(DdrError::Invalid(format!("duplicate doc id `{}`", doc.id)));
            }
        }
        Ok(Corpus { docs, by_id })
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn docs(&self) -> &[Document] {
        &self.docs
    }

    pub fn get(&self, id: &str) -> Option<&Document> {
        self.by_id.get(id).map(|&i| &self.docs[i])
    }

    pub fn contains(&self, id: &str) -> bool {
        self.by_id.contains_key(id)
    }
}

/// Relevance judgments: (query id, doc id) → grade ≥ 0.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Qrels {
    grades: BTreeMap<String, BTreeMap<String, u32>>,
}

impl Qrels {
    pub fn new() -> Self {
        Qrels::default()
    }

    pub fn insert(&mut self, qid: &str, docid: &str, grade: u32) {
        self.grades
            .entry(qid.to_string())
            .or_default()
            .insert(docid.to_string(), grade);
    }

    /// Judgments for one query (positive grades only are "relevant").
    pub fn for_query(&self, qid: &str) -> Option<&BTreeMap<String, u32>> {
        self.grades.get(qid)
    }

    pub fn relevant_docs(&self, qid: &str) -> Vec<&str> {
        self.grades
            .get(qid)
            .map(|m| {
                m.iter()
                    .filter(|(_, &g)| g > 0)
                    .map(|(d, _)| d.as_str())
                    .collect()
            })
            .unwrap_or_default()
    }

    pub fn query_ids(&self) -> impl Iterator<Item = &str> {
        self.grades.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.grades.values().map(BTreeMap::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.grades.is_empty()
    }
}

/// Token → id map with the reserved specials at fixed low ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    token_to_id: BTreeMap<String, usize>,
    tokens: Vec<String>,
}

impl Vocabulary {
    /// Reserved tokens first, then the given tokens in order, densely
    /// numbered. Duplicate or reserved-looking tokens are rejected.
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut all: Vec<String> = RESERVED_TOKENS.iter().map(|s| (*s).to_string()).collect();
        let mut seen: BTreeSet<String> = all.iter().cloned().collect();
        for t in tokens {
            let t = t.into();
            if !seen.insert(t.clone()) {
                return Err(DdrError::Invalid(format!("duplicate vocab token `{t}`")));
            }
            all.push(t);
        }
        let token_to_id = all
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Ok(Vocabulary {
            token_to_id,
            tokens: all,
        })
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Ids that masking may draw replacements from (everything non-reserved).
    pub fn first_regular_id(&self) -> usize {
        RESERVED_TOKENS.len()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = std::fs::File::create(path)?;
        for t in &self.tokens {
            writeln!(out, "{t}")?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let mut tokens = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            if i < RESERVED_TOKENS.len() {
                if line != RESERVED_TOKENS[i] {
                    return Err(DdrError::Parse {
                        path: path.display().to_string(),
                        line: i + 1,
                        message: format!("expected reserved token {}", RESERVED_TOKENS[i]),
                    });
                }
            } else {
                tokens.push(line);
            }
        }
        Vocabulary::from_tokens(tokens)
    }
}

/// Lowercased whitespace terms; shared by the tokenizer, BM25, and the
/// teacher oracle.
pub fn lex(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

/// `[CLS] tokens... [SEP]`, truncated to `max_len` with the final `[SEP]`
/// kept. Out-of-vocabulary tokens map to `[UNK]`; empty text yields
/// `[CLS][SEP]`.
pub fn tokenize(text: &str, vocab: &Vocabulary, max_len: usize) -> Result<TokenSequence> {
    if max_len < 2 {
        return Err(DdrError::Invalid(format!(
            "max_len {max_len} cannot hold [CLS] and [SEP]"
        )));
    }
    let terms = lex(text);
    let body = terms.len().min(max_len - 2);
    let mut ids = Vec::with_capacity(body + 2);
    ids.push(CLS_ID);
    for term in &terms[..body] {
        ids.push(vocab.id(term).unwrap_or(UNK_ID));
    }
    ids.push(SEP_ID);
    TokenSequence::from_ids(ids)
}

// ── File formats ─────────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct DocLine {
    doc_id: String,
    text: String,
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> DdrError {
    DdrError::Parse {
        path: path.display().to_string(),
        line,
        message: message.into(),
    }
}

pub fn load_corpus(path: &Path) -> Result<Corpus> {
    let file = std::fs::File::open(path)?;
    let mut docs = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: DocLine = serde_json::from_str(&line)
            .map_err(|e| parse_err(path, i + 1, format!("bad corpus line: {e}")))?;
        if !seen.insert(parsed.doc_id.clone()) {
            return Err(parse_err(
                path,
                i + 1,
                format!("duplicate doc id `{}`", parsed.doc_id),
            ));
        }
        docs.push(Document {
            id: parsed.doc_id,
            text: parsed.text,
        });
    }
    Corpus::new(docs)
}

pub fn save_corpus(corpus: &Corpus, path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for doc in corpus.docs() {
        let line = serde_json::to_string(&DocLine {
            doc_id: doc.id.clone(),
            text: doc.text.clone(),
        })?;
        writeln!(out, "{line}")?;
    }
    Ok(())
}

pub fn load_queries(path: &Path) -> Result<Vec<Query>> {
    let file = std::fs::File::open(path)?;
    let mut queries = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let Some((qid, text)) = line.split_once('\t') else {
            return Err(parse_err(path, i + 1, "expected `qid<TAB>text`"));
        };
        if !seen.insert(qid.to_string()) {
            return Err(parse_err(path, i + 1, format!("duplicate query id `{qid}`")));
        }
        queries.push(Query {
            id: qid.to_string(),
            text: text.to_string(),
        });
    }
    Ok(queries)
}

pub fn save_queries(queries: &[Query], path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for q in queries {
        writeln!(out, "{}\t{}", q.id, q.text)?;
    }
    Ok(())
}

/// TREC qrels: `qid 0 docid grade`. Every id must resolve against the given
/// queries and corpus.
pub fn load_qrels(path: &Path, queries: &[Query], corpus: &Corpus) -> Result<Qrels> {
    let query_ids: BTreeSet<&str> = queries.iter().map(|q| q.id.as_str()).collect();
    let file = std::fs::File::open(path)?;
    let mut qrels = Qrels::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(parse_err(path, i + 1, "expected `qid 0 docid grade`"));
        }
        let (qid, docid) = (fields[0], fields[2]);
        let grade: u32 = fields[3]
            .parse()
            .map_err(|_| parse_err(path, i + 1, format!("bad grade `{}`", fields[3])))?;
        if !query_ids.contains(qid) {
            return Err(parse_err(path, i + 1, format!("unknown query id `{qid}`")));
        }
        if !corpus.contains(docid) {
            return Err(parse_err(path, i + 1, format!("unknown doc id `{docid}`")));
        }
        qrels.insert(qid, docid, grade);
    }
    Ok(qrels)
}

pub fn save_qrels(qrels: &Qrels, path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for qid in qrels.query_ids() {
        for (docid, grade) in qrels.for_query(qid).into_iter().flatten() {
            writeln!(out, "{qid} 0 {docid} {grade}")?;
        }
    }
    Ok(())
}
