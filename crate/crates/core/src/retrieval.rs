//! Unigram tf-idf vectors over training reviews with cosine top-K retrieval
//! of the corresponding responses.

use std::collections::HashMap;
use std::fs;
use std::io::Read;
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};
use thiserror::Error;

const INDEX_MAGIC: &[u8; 4] = b"RGIX";
const INDEX_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("cannot build an index over zero documents")]
    EmptyCollection,
    #[error("top_k requires k >= 1")]
    ZeroK,
    #[error("bad vocabulary: {0}")]
    BadVocabulary(String),
    #[error("{path}: not an index file: {message}")]
    Format { path: String, message: String },
    #[error("i/o on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

fn io_err(path: &Path, source: std::io::Error) -> RetrievalError {
    RetrievalError::Io { path: path.display().to_string(), source }
}

/// Sparse vector over the index's term space; entries sorted by term id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SparseVec {
    pub entries: Vec<(u32, f64)>,
}

impl SparseVec {
    pub fn l2_norm(&self) -> f64 {
        self.entries.iter().map(|(_, w)| w * w).sum::<f64>().sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.entries.is_empty()
    }

    fn normalize(&mut self) {
        let norm = self.l2_norm();
        if norm > 0.0 {
            for (_, w) in &mut self.entries {
                *w /= norm;
            }
        }
    }

    pub fn dot(&self, other: &SparseVec) -> f64 {
        let mut sum = 0.0;
        let (mut i, mut j) = (0, 0);
        while i < self.entries.len() && j < other.entries.len() {
            let (ta, wa) = self.entries[i];
            let (tb, wb) = other.entries[j];
            match ta.cmp(&tb) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    sum += wa * wb;
                    i += 1;
                    j += 1;
                }
            }
        }
        sum
    }
}

/// Cosine similarity of two already-normalized vectors; the zero vector
/// scores 0 against everything.
pub fn cosine(a: &SparseVec, b: &SparseVec) -> f64 {
    a.dot(b)
}

/// Payload carried alongside each indexed document: the original record index
/// and the response tokens that retrieval hands to the generator.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocMeta {
    pub review_id: usize,
    pub response_tokens: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct IndexManifest {
    n_docs: usize,
    terms: Vec<String>,
    idf: Vec<f64>,
    doc_meta: Vec<DocMeta>,
}

/// Immutable unigram tf-idf index: tf = raw count,
/// idf = ln((1+N)/(1+df)) + 1, vectors L2-normalized.
#[derive(Debug, Clone)]
pub struct TfIdfIndex {
    terms: Vec<String>,
    term_ids: HashMap<String, u32>,
    idf: Vec<f64>,
    n_docs: usize,
    doc_vectors: Vec<SparseVec>,
    doc_meta: Vec<DocMeta>,
}

impl TfIdfIndex {
    /// Indexes token lists with positional review ids and empty response
    /// payloads; use `build_with_meta` to attach responses.
    pub fn build(docs: &[Vec<String>]) -> Result<Self, RetrievalError> {
        let meta = (0..docs.len())
            .map(|i| DocMeta { review_id: i, response_tokens: Vec::new() })
            .collect();
        Self::build_with_meta(docs, meta)
    }

    pub fn build_with_meta(
        docs: &[Vec<String>],
        doc_meta: Vec<DocMeta>,
    ) -> Result<Self, RetrievalError> {
        if docs.is_empty() {
            return Err(RetrievalError::EmptyCollection);
        }
        assert_eq!(docs.len(), doc_meta.len(), "one meta entry per document");
        let n_docs = docs.len();

        let mut df: HashMap<&str, usize> = HashMap::new();
        for doc in docs {
            let mut seen: Vec<&str> = doc.iter().map(String::as_str).collect();
            seen.sort_unstable();
            seen.dedup();
            for term in seen {
                *df.entry(term).or_insert(0) += 1;
            }
        }
        let mut terms: Vec<String> = df.keys().map(|t| (*t).to_owned()).collect();
        terms.sort_unstable();
        let term_ids: HashMap<String, u32> =
            terms.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        let idf: Vec<f64> = terms
            .iter()
            .map(|t| ((1 + n_docs) as f64 / (1 + df[t.as_str()]) as f64).ln() + 1.0)
            .collect();

        let mut index = TfIdfIndex {
            terms,
            term_ids,
            idf,
            n_docs,
            doc_vectors: Vec::with_capacity(n_docs),
            doc_meta,
        };
        index.doc_vectors = docs.iter().map(|d| index.vectorize(d)).collect();
        Ok(index)
    }

    /// Rebuilds a query-only index from a saved vocabulary: `vectorize`
    /// works, but there are no documents to rank. Used by consumers that
    /// persist just the term/idf tables (the response-quality filter).
    pub fn from_parts(terms: Vec<String>, idf: Vec<f64>) -> Result<Self, RetrievalError> {
        if terms.len() != idf.len() {
            return Err(RetrievalError::BadVocabulary(format!(
                "{} terms but {} idf weights",
                terms.len(),
                idf.len()
            )));
        }
        if terms.windows(2).any(|w| w[0] >= w[1]) {
            return Err(RetrievalError::BadVocabulary("terms not sorted and unique".into()));
        }
        let term_ids =
            terms.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        Ok(TfIdfIndex {
            terms,
            term_ids,
            idf,
            n_docs: 0,
            doc_vectors: Vec::new(),
            doc_meta: Vec::new(),
        })
    }

    pub fn n_docs(&self) -> usize {
        self.n_docs
    }

    /// Sorted term space; ids are positions in this slice.
    pub fn terms(&self) -> &[String] {
        &self.terms
    }

    /// Idf weights aligned with `terms`.
    pub fn idf_table(&self) -> &[f64] {
        &self.idf
    }

    pub fn doc_vector(&self, i: usize) -> &SparseVec {
        &self.doc_vectors[i]
    }

    pub fn meta(&self, i: usize) -> &DocMeta {
        &self.doc_meta[i]
    }

    /// Smoothed idf; tokens never seen at build time get the df = 0 weight
    /// ln(1+N) + 1.
    pub fn idf(&self, token: &str) -> f64 {
        match self.term_ids.get(token) {
            Some(&id) => self.idf[id as usize],
            None => ((1 + self.n_docs) as f64).ln() + 1.0,
        }
    }

    /// tf*idf over the index's term space, L2-normalized. Tokens outside the
    /// term space are dropped, so an all-unknown input yields the zero
    /// vector.
    pub fn vectorize(&self, tokens: &[String]) -> SparseVec {
        let mut tf: HashMap<u32, f64> = HashMap::new();
        for token in tokens {
            if let Some(&id) = self.term_ids.get(token) {
                *tf.entry(id).or_insert(0.0) += 1.0;
            }
        }
        let mut entries: Vec<(u32, f64)> =
            tf.into_iter().map(|(id, count)| (id, count * self.idf[id as usize])).collect();
        entries.sort_unstable_by_key(|&(id, _)| id);
        let mut vec = SparseVec { entries };
        vec.normalize();
        vec
    }

    /// The k most similar documents, scores non-increasing, ties broken by
    /// lower document index, `exclude` (when given) never present. Fewer than
    /// k documents yield a shorter result.
    pub fn top_k(
        &self,
        query: &[String],
        k: usize,
        exclude: Option<usize>,
    ) -> Result<Vec<(usize, f64)>, RetrievalError> {
        if k == 0 {
            return Err(RetrievalError::ZeroK);
        }
        let qvec = self.vectorize(query);
        let mut scored: Vec<(usize, f64)> = (0..self.n_docs)
            .filter(|&i| Some(i) != exclude)
            .map(|i| (i, cosine(&qvec, &self.doc_vectors[i])))
            .collect();
        scored.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .expect("cosine scores are finite")
                .then_with(|| a.0.cmp(&b.0))
        });
        scored.truncate(k);
        Ok(scored)
    }

    /// Binary layout: magic, version, manifest length, JSON manifest (terms,
    /// idf, doc meta), then per document a u32 entry count followed by
    /// (u32 term id, f64 weight) pairs, all little-endian.
    pub fn save(&self, path: &Path) -> Result<(), RetrievalError> {
        let manifest = IndexManifest {
            n_docs: self.n_docs,
            terms: self.terms.clone(),
            idf: self.idf.clone(),
            doc_meta: self.doc_meta.clone(),
        };
        let json = serde_json::to_vec(&manifest)
            .expect("index manifest serializes: plain data fields");
        let mut out = Vec::new();
        out.extend_from_slice(INDEX_MAGIC);
        out.write_u32::<LittleEndian>(INDEX_VERSION).expect("vec write");
        out.write_u64::<LittleEndian>(json.len() as u64).expect("vec write");
        out.extend_from_slice(&json);
        for vec in &self.doc_vectors {
            out.write_u32::<LittleEndian>(vec.entries.len() as u32).expect("vec write");
            for &(term, weight) in &vec.entries {
                out.write_u32::<LittleEndian>(term).expect("vec write");
                out.write_f64::<LittleEndian>(weight).expect("vec write");
            }
        }
        fs::write(path, out).map_err(|e| io_err(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, RetrievalError> {
        let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
        let mut cursor = std::io::Cursor::new(&bytes);
        let bad = |message: &str| RetrievalError::Format {
            path: path.display().to_string(),
            message: message.to_owned(),
        };
        let mut magic = [0u8; 4];
        cursor.read_exact(&mut magic).map_err(|_| bad("truncated magic"))?;
        if &magic != INDEX_MAGIC {
            return Err(bad("wrong magic bytes"));
        }
        let version =
            cursor.read_u32::<LittleEndian>().map_err(|_| bad("truncated version"))?;
        if version != INDEX_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let json_len =
            cursor.read_u64::<LittleEndian>().map_err(|_| bad("truncated length"))? as usize;
        let mut json = vec![0u8; json_len];
        cursor.read_exact(&mut json).map_err(|_| bad("truncated manifest"))?;
        let manifest: IndexManifest =
            serde_json::from_slice(&json).map_err(|e| bad(&format!("manifest: {e}")))?;
        if manifest.n_docs == 0 {
            return Err(bad("index holds zero documents"));
        }
        if manifest.terms.len() != manifest.idf.len()
            || manifest.doc_meta.len() != manifest.n_docs
        {
            return Err(bad("manifest arrays disagree"));
        }
        let mut doc_vectors = Vec::with_capacity(manifest.n_docs);
        for _ in 0..manifest.n_docs {
            let nnz =
                cursor.read_u32::<LittleEndian>().map_err(|_| bad("truncated vector"))?;
            let mut entries = Vec::with_capacity(nnz as usize);
            for _ in 0..nnz {
                let term =
                    cursor.read_u32::<LittleEndian>().map_err(|_| bad("truncated entry"))?;
                let weight =
                    cursor.read_f64::<LittleEndian>().map_err(|_| bad("truncated entry"))?;
                if term as usize >= manifest.terms.len() {
                    return Err(bad("term id out of range"));
                }
                entries.push((term, weight));
            }
            doc_vectors.push(SparseVec { entries });
        }
        let term_ids = manifest
            .terms
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Ok(TfIdfIndex {
            terms: manifest.terms,
            term_ids,
            idf: manifest.idf,
            n_docs: manifest.n_docs,
            doc_vectors,
            doc_meta: manifest.doc_meta,
        })
    }
}

/// Serialization-friendly view of one retrieval hit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RetrievedResponse {
    pub tokens: Vec<String>,
    pub score: f64,
}

/// Retrieves the K response token lists for `query`, padding with empty
/// entries when fewer than K documents can match, so callers always see
/// exactly K slots.
pub fn retrieve_k_padded(
    index: &TfIdfIndex,
    query: &[String],
    k: usize,
    exclude: Option<usize>,
) -> Result<Vec<RetrievedResponse>, RetrievalError> {
    let hits = index.top_k(query, k, exclude)?;
    let mut out: Vec<RetrievedResponse> = hits
        .into_iter()
        .map(|(doc, score)| RetrievedResponse {
            tokens: index.meta(doc).response_tokens.clone(),
            score,
        })
        .collect();
    out.resize_with(k, || RetrievedResponse { tokens: Vec::new(), score: 0.0 });
    Ok(out)
}
