//! Raw record ingestion, text normalization, vocabulary construction, and
//! example encoding with per-example extended ids for copyable OOV tokens.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const SOS_ID: usize = 2;
pub const EOS_ID: usize = 3;
pub const NUM_SPECIALS: usize = 4;

/// Special-token surface forms. Corpus tokens are alphanumeric runs or single
/// non-alphanumeric characters, so these can never collide with a real token.
pub const SPECIAL_TOKENS: [&str; NUM_SPECIALS] = ["<pad>", "<unk>", "<s>", "</s>"];

const VOCAB_MAGIC: &str = "revgen-vocab v1";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("corpus has no records")]
    EmptyCorpus,
    #[error("vocabulary cap must be at least 1")]
    ZeroCap,
    #[error("review is empty after normalization")]
    EmptyReview,
    #[error("{path}:{line}: {message}")]
    Parse { path: String, line: usize, message: String },
    #[error("{path}: not a vocabulary file: {message}")]
    VocabFormat { path: String, message: String },
    #[error("i/o on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

fn io_err(path: &Path, source: std::io::Error) -> CorpusError {
    CorpusError::Io { path: path.display().to_string(), source }
}

/// One raw corpus entry. `description` defaults to empty when absent;
/// `response` may be empty for inference-only inputs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawRecord {
    pub app_id: String,
    pub review: String,
    #[serde(default)]
    pub response: String,
    #[serde(default)]
    pub description: String,
}

/// Lowercases and splits text into alphanumeric runs; every other
/// non-whitespace character becomes its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    for ch in text.chars().flat_map(char::to_lowercase) {
        if ch.is_alphanumeric() {
            current.push(ch);
        } else {
            if !current.is_empty() {
                tokens.push(std::mem::take(&mut current));
            }
            if !ch.is_whitespace() {
                tokens.push(ch.to_string());
            }
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    tokens
}

/// Rule-based suffix stripper: removes "-ing", "-ed", "-es", "-s" (longest
/// applicable rule first) with length guards so short words survive intact.
pub fn lemmatize_token(token: &str) -> String {
    let n = token.chars().count();
    if !token.chars().all(|c| c.is_alphabetic()) {
        return token.to_owned();
    }
    if n >= 6 {
        if let Some(stem) = token.strip_suffix("ing") {
            return stem.to_owned();
        }
    }
    if n >= 5 {
        if let Some(stem) = token.strip_suffix("ed") {
            return stem.to_owned();
        }
        if let Some(stem) = token.strip_suffix("es") {
            return stem.to_owned();
        }
    }
    if n >= 4 && !token.ends_with("ss") {
        if let Some(stem) = token.strip_suffix('s') {
            return stem.to_owned();
        }
    }
    token.to_owned()
}

/// `tokenize` plus the optional suffix lemmatizer.
pub fn tokenize_opts(text: &str, lemmatize: bool) -> Vec<String> {
    let tokens = tokenize(text);
    if lemmatize {
        tokens.iter().map(|t| lemmatize_token(t)).collect()
    } else {
        tokens
    }
}

/// Closed token<->id map with reserved specials at ids 0..4.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    token_to_id: HashMap<String, usize>,
    id_to_token: Vec<String>,
    cap: usize,
    corpus_hash: String,
}

impl Vocabulary {
    /// Ranks tokens by descending corpus frequency (ties broken
    /// lexicographically), keeps the top `cap`, and prepends the specials.
    /// Descriptions are counted once per (app_id, description) pair since the
    /// same app-level text rides along on every record of that app.
    pub fn build(records: &[RawRecord], cap: usize) -> Result<Self, CorpusError> {
        Self::build_opts(records, cap, false)
    }

    pub fn build_opts(
        records: &[RawRecord],
        cap: usize,
        lemmatize: bool,
    ) -> Result<Self, CorpusError> {
        if records.is_empty() {
            return Err(CorpusError::EmptyCorpus);
        }
        if cap == 0 {
            return Err(CorpusError::ZeroCap);
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        let count_text = |text: &str, counts: &mut HashMap<String, usize>| {
            for token in tokenize_opts(text, lemmatize) {
                *counts.entry(token).or_insert(0) += 1;
            }
        };
        let mut seen_descriptions: BTreeSet<(&str, &str)> = BTreeSet::new();
        for record in records {
            count_text(&record.review, &mut counts);
            count_text(&record.response, &mut counts);
            if !record.description.is_empty()
                && seen_descriptions.insert((&record.app_id, &record.description))
            {
                count_text(&record.description, &mut counts);
            }
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(cap);

        let mut id_to_token: Vec<String> =
            SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        id_to_token.extend(ranked.into_iter().map(|(t, _)| t));
        let token_to_id =
            id_to_token.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Ok(Vocabulary {
            token_to_id,
            id_to_token,
            cap,
            corpus_hash: hash_records(records),
        })
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.id_to_token.get(id).map(String::as_str)
    }

    /// Total size including the four specials.
    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        false // specials are always present
    }

    pub fn cap(&self) -> usize {
        self.cap
    }

    pub fn corpus_hash(&self) -> &str {
        &self.corpus_hash
    }

    /// Hash of the vocabulary content itself; checkpoints store this to
    /// detect decode-time vocabulary mismatches.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.cap.to_le_bytes());
        for token in &self.id_to_token {
            hasher.update(token.as_bytes());
            hasher.update([0u8]);
        }
        hex(&hasher.finalize())
    }

    /// Maps ids back to surface forms: specials render as their literals,
    /// extended ids resolve through `ext` when given, anything unknown
    /// renders as the UNK literal.
    pub fn decode(&self, ids: &[usize], ext: Option<&ExtendedVocabMap>) -> Vec<String> {
        ids.iter()
            .map(|&id| {
                if let Some(token) = self.token(id) {
                    token.to_owned()
                } else if let Some(token) = ext.and_then(|m| m.token(id)) {
                    token.to_owned()
                } else {
                    SPECIAL_TOKENS[UNK_ID].to_owned()
                }
            })
            .collect()
    }

    /// Plain-text format: a header line recording the cap and source-corpus
    /// hash, then one token per line where line number (0-based from the
    /// first token line) = id - 4.
    pub fn save(&self, path: &Path) -> Result<(), CorpusError> {
        let mut out = format!(
            "{VOCAB_MAGIC} cap={} corpus_sha256={}\n",
            self.cap, self.corpus_hash
        );
        for token in &self.id_to_token[NUM_SPECIALS..] {
            out.push_str(token);
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| io_err(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        let mut lines = text.lines();
        let header = lines.next().unwrap_or("");
        let bad = |message: &str| CorpusError::VocabFormat {
            path: path.display().to_string(),
            message: message.to_owned(),
        };
        let rest = header
            .strip_prefix(VOCAB_MAGIC)
            .ok_or_else(|| bad("missing header magic"))?;
        let mut cap = None;
        let mut corpus_hash = None;
        for field in rest.split_whitespace() {
            if let Some(v) = field.strip_prefix("cap=") {
                cap = Some(v.parse::<usize>().map_err(|_| bad("bad cap field"))?);
            } else if let Some(v) = field.strip_prefix("corpus_sha256=") {
                corpus_hash = Some(v.to_owned());
            }
        }
        let cap = cap.ok_or_else(|| bad("missing cap field"))?;
        let corpus_hash = corpus_hash.ok_or_else(|| bad("missing corpus hash field"))?;
        let mut id_to_token: Vec<String> =
            SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        id_to_token.extend(lines.map(str::to_owned));
        if id_to_token.len() > cap + NUM_SPECIALS {
            return Err(bad("more tokens than the recorded cap"));
        }
        let token_to_id =
            id_to_token.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Ok(Vocabulary { token_to_id, id_to_token, cap, corpus_hash })
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Deterministic hash over the canonical JSON serialization of the records.
pub fn hash_records(records: &[RawRecord]) -> String {
    let mut hasher = Sha256::new();
    for record in records {
        // RawRecord serialization is infallible: plain string fields only.
        hasher.update(serde_json::to_string(record).expect("record serializes").as_bytes());
        hasher.update(*b"\n");
    }
    hex(&hasher.finalize())
}

/// Per-example map from source-side OOV surface tokens to dense extended ids
/// starting at `base` (= vocabulary size at encode time).
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtendedVocabMap {
    base: usize,
    tokens: Vec<String>,
}

impl ExtendedVocabMap {
    pub fn new(base: usize) -> Self {
        ExtendedVocabMap { base, tokens: Vec::new() }
    }

    pub fn base(&self) -> usize {
        self.base
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.tokens.iter().position(|t| t == token).map(|i| self.base + i)
    }

    pub fn token(&self, ext_id: usize) -> Option<&str> {
        ext_id
            .checked_sub(self.base)
            .and_then(|i| self.tokens.get(i))
            .map(String::as_str)
    }

    pub fn get_or_insert(&mut self, token: &str) -> usize {
        if let Some(id) = self.id(token) {
            return id;
        }
        self.tokens.push(token.to_owned());
        self.base + self.tokens.len() - 1
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// One training/inference instance as id sequences. Source-side OOV tokens
/// carry extended ids >= vocabulary size; the target falls back to UNK for
/// tokens available nowhere. The target is EOS-terminated and, like every
/// other sequence, at most `max_len` ids long.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodedExample {
    pub review_ids: Vec<usize>,
    pub response_ids: Vec<usize>,
    pub description_ids: Vec<usize>,
    pub retrieved_ids: Vec<Vec<usize>>,
    pub ext_map: ExtendedVocabMap,
}

impl EncodedExample {
    /// Upper bound (exclusive) on every id in this example.
    pub fn id_space(&self) -> usize {
        self.ext_map.base() + self.ext_map.len()
    }
}

/// Tokenizes a raw record and encodes it against `vocab`. `retrieved` holds
/// the K retrieved response token lists, empty lists standing in for missing
/// matches; the caller fixes K.
pub fn encode_example(
    record: &RawRecord,
    retrieved: &[Vec<String>],
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<EncodedExample, CorpusError> {
    encode_tokens(
        &tokenize(&record.review),
        &tokenize(&record.response),
        &tokenize(&record.description),
        retrieved,
        vocab,
        max_len,
    )
}

/// Encoding core for already-tokenized inputs. Sources are truncated to
/// `max_len` before the extended map is built, so truncated-away tokens are
/// not copyable; the target keeps `max_len - 1` tokens plus EOS. An empty
/// response encodes to an empty id list (inference-only records).
pub fn encode_tokens(
    review: &[String],
    response: &[String],
    description: &[String],
    retrieved: &[Vec<String>],
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<EncodedExample, CorpusError> {
    if review.is_empty() {
        return Err(CorpusError::EmptyReview);
    }
    let clip = |tokens: &[String]| -> Vec<String> {
        tokens.iter().take(max_len).cloned().collect()
    };
    let review = clip(review);
    let description = clip(description);
    let retrieved: Vec<Vec<String>> = retrieved.iter().map(|r| clip(r)).collect();

    let mut ext_map = ExtendedVocabMap::new(vocab.len());
    let encode_source = |tokens: &[String], ext_map: &mut ExtendedVocabMap| {
        tokens
            .iter()
            .map(|t| vocab.id(t).unwrap_or_else(|| ext_map.get_or_insert(t)))
            .collect::<Vec<usize>>()
    };
    let review_ids = encode_source(&review, &mut ext_map);
    let description_ids = encode_source(&description, &mut ext_map);
    let retrieved_ids: Vec<Vec<usize>> =
        retrieved.iter().map(|r| encode_source(r, &mut ext_map)).collect();

    let mut response_ids: Vec<usize> = response
        .iter()
        .take(max_len.saturating_sub(1))
        .map(|t| vocab.id(t).or_else(|| ext_map.id(t)).unwrap_or(UNK_ID))
        .collect();
    if !response.is_empty() {
        response_ids.push(EOS_ID);
    }

    Ok(EncodedExample { review_ids, response_ids, description_ids, retrieved_ids, ext_map })
}

/// Reads a UTF-8 JSONL corpus file, one record per line; blank lines are
/// rejected as malformed rather than skipped.
pub fn read_records(path: &Path) -> Result<Vec<RawRecord>, CorpusError> {
    let file = fs::File::open(path).map_err(|e| io_err(path, e))?;
    let reader = BufReader::new(file);
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        let record: RawRecord =
            serde_json::from_str(&line).map_err(|e| CorpusError::Parse {
                path: path.display().to_string(),
                line: i + 1,
                message: e.to_string(),
            })?;
        records.push(record);
    }
    if records.is_empty() {
        return Err(CorpusError::Parse {
            path: path.display().to_string(),
            line: 0,
            message: "file holds zero records".to_owned(),
        });
    }
    Ok(records)
}
