//! Text cleaning, tokenization, vocabulary and sentence embeddings.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Normalized sentence text tied to its source.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CleanText {
    text: String,
    source_id: String,
    missing: bool,
}

impl CleanText {
    pub fn as_str(&self) -> &str {
        &self.text
    }

    pub fn source_id(&self) -> &str {
        &self.source_id
    }

    /// Set when the raw input was absent or contained nothing usable.
    pub fn is_missing(&self) -> bool {
        self.missing
    }

    pub fn with_source(mut self, source_id: impl Into<String>) -> Self {
        self.source_id = source_id.into();
        self
    }
}

impl fmt::Display for CleanText {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.text)
    }
}

fn keep_char(c: char) -> bool {
    c.is_alphanumeric() || matches!(c, '\'' | '-' | '.' | ',')
}

/// Lowercases, strips everything except letters, digits, apostrophes,
/// hyphens, periods and commas, and collapses whitespace runs.
pub fn preprocess(raw: &str) -> CleanText {
    let mut text = String::with_capacity(raw.len());
    let mut pending_space = false;
    for c in raw.chars().flat_map(char::to_lowercase) {
        if c.is_whitespace() {
            pending_space = !text.is_empty();
        } else if keep_char(c) {
            if pending_space {
                text.push(' ');
                pending_space = false;
            }
            text.push(c);
        }
    }
    let missing = text.is_empty();
    CleanText {
        text,
        source_id: String::new(),
        missing,
    }
}

fn is_split_punct(c: char) -> bool {
    matches!(c, '.' | ',')
}

/// Splits clean text into surface tokens with byte offsets.
///
/// Tokens are whitespace-delimited; periods and commas always stand alone.
pub fn split_tokens(text: &str) -> Vec<(&str, usize, usize)> {
    let mut out = Vec::new();
    let mut start: Option<usize> = None;
    for (i, c) in text.char_indices() {
        if c.is_whitespace() || is_split_punct(c) {
            if let Some(s) = start.take() {
                out.push((&text[s..i], s, i));
            }
            if is_split_punct(c) {
                let end = i + c.len_utf8();
                out.push((&text[i..end], i, end));
            }
        } else if start.is_none() {
            start = Some(i);
        }
    }
    if let Some(s) = start {
        out.push((&text[s..], s, text.len()));
    }
    out
}

/// Tokens of a sentence with vocabulary ids and byte offsets into the
/// originating [`CleanText`].
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TokenSequence {
    pub surfaces: Vec<String>,
    pub ids: Vec<usize>,
    pub offsets: Vec<(usize, usize)>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.surfaces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.surfaces.is_empty()
    }

    /// Rebuilds the text the tokens came from, using one space wherever
    /// two tokens were not adjacent.
    pub fn reconstruct(&self) -> String {
        let mut out = String::new();
        let mut prev_end = None;
        for (surface, &(start, end)) in self.surfaces.iter().zip(&self.offsets) {
            if let Some(p) = prev_end {
                if start > p {
                    out.push(' ');
                }
            }
            out.push_str(surface);
            prev_end = Some(end);
        }
        out
    }

    /// Text slice spanned by tokens `start..end` in `text`.
    pub fn span_text<'a>(&self, text: &'a str, start: usize, end: usize) -> &'a str {
        &text[self.offsets[start].0..self.offsets[end - 1].1]
    }
}

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const CLS_ID: usize = 2;
pub const SEP_ID: usize = 3;
pub const RESERVED_TOKENS: [&str; 4] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::from_tokens(Vec::new())
    }
}

impl Vocabulary {
    /// Reserved tokens followed by `tokens` in order. Duplicates of
    /// earlier entries are dropped.
    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let mut all: Vec<String> = RESERVED_TOKENS.iter().map(|s| s.to_string()).collect();
        let mut index: HashMap<String, usize> =
            all.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        for t in tokens {
            if !index.contains_key(&t) {
                index.insert(t.clone(), all.len());
                all.push(t);
            }
        }
        Self { tokens: all, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Non-reserved tokens in id order.
    pub fn learned_tokens(&self) -> &[String] {
        &self.tokens[RESERVED_TOKENS.len()..]
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (i, t) in self.tokens.iter().enumerate() {
            out.push_str(t);
            out.push('\t');
            out.push_str(&i.to_string());
            out.push('\n');
        }
        out
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut tokens = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let (tok, id) = line.rsplit_once('\t').ok_or_else(|| Error::Parse {
                line: n + 1,
                message: "expected `token<TAB>id`".into(),
            })?;
            let id: usize = id.trim().parse().map_err(|_| Error::Parse {
                line: n + 1,
                message: format!("bad id {id:?}"),
            })?;
            if id != tokens.len() {
                return Err(Error::Parse {
                    line: n + 1,
                    message: format!("ids must be contiguous; expected {}", tokens.len()),
                });
            }
            tokens.push(tok.to_string());
        }
        if tokens.len() < RESERVED_TOKENS.len()
            || tokens[..RESERVED_TOKENS.len()] != RESERVED_TOKENS
        {
            return Err(Error::invalid("vocabulary must start with the reserved tokens"));
        }
        Ok(Self::from_tokens(tokens.split_off(RESERVED_TOKENS.len())))
    }
}

/// Admits every token seen at least `min_count` times. Ids follow
/// descending count, then ascending lexicographic order.
pub fn build_vocabulary(corpus: &[CleanText], min_count: usize) -> Vocabulary {
    let min_count = min_count.max(1);
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for text in corpus {
        for (surface, _, _) in split_tokens(text.as_str()) {
            *counts.entry(surface).or_default() += 1;
        }
    }
    let mut admitted: Vec<(&str, usize)> =
        counts.into_iter().filter(|&(_, c)| c >= min_count).collect();
    admitted.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    Vocabulary::from_tokens(admitted.into_iter().map(|(t, _)| t.to_string()).collect())
}

pub fn tokenize(clean: &CleanText, vocab: &Vocabulary) -> TokenSequence {
    tokenize_str(clean.as_str(), vocab)
}

pub fn tokenize_str(text: &str, vocab: &Vocabulary) -> TokenSequence {
    let mut seq = TokenSequence::default();
    for (surface, start, end) in split_tokens(text) {
        seq.ids.push(vocab.id(surface).unwrap_or(UNK_ID));
        seq.surfaces.push(surface.to_string());
        seq.offsets.push((start, end));
    }
    seq
}

/// A dense real vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vector(pub Vec<f64>);

impl Vector {
    pub fn zeros(dim: usize) -> Self {
        Vector(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

pub fn cosine_similarity(u: &Vector, v: &Vector) -> Result<f64> {
    if u.dim() != v.dim() {
        return Err(Error::DimensionMismatch {
            expected: u.dim(),
            actual: v.dim(),
        });
    }
    let (nu, nv) = (u.norm(), v.norm());
    if nu == 0.0 || nv == 0.0 {
        return Ok(0.0);
    }
    let dot: f64 = u.0.iter().zip(&v.0).map(|(a, b)| a * b).sum();
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

/// Produces fixed-dimension sentence vectors.
///
/// The default is [`HashedBagOfWords`]; an external sentence encoder can be
/// plugged in by implementing this trait.
pub trait Embedder: Send + Sync {
    fn dim(&self) -> usize;
    fn embed(&self, tokens: &TokenSequence) -> Vector;
}

/// Deterministic hashed bag-of-words projection. Each token lands in one
/// bucket with a ±1 sign; the sum is L2-normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashedBagOfWords {
    dim: usize,
}

pub const DEFAULT_EMBEDDING_DIM: usize = 256;

impl Default for HashedBagOfWords {
    fn default() -> Self {
        Self::new(DEFAULT_EMBEDDING_DIM)
    }
}

impl HashedBagOfWords {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        Self { dim }
    }

    /// Bucket index and sign for a surface token.
    pub fn bucket(&self, surface: &str) -> (usize, f64) {
        let digest = Sha256::digest(surface.as_bytes());
        let mut word = [0u8; 8];
        word.copy_from_slice(&digest[..8]);
        let bucket = (u64::from_le_bytes(word) % self.dim as u64) as usize;
        let sign = if digest[8] & 1 == 0 { 1.0 } else { -1.0 };
        (bucket, sign)
    }
}

impl Embedder for HashedBagOfWords {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, tokens: &TokenSequence) -> Vector {
        let mut v = Vector::zeros(self.dim);
        for s in &tokens.surfaces {
            let (b, sign) = self.bucket(s);
            v.0[b] += sign;
        }
        let n = v.norm();
        if n > 0.0 {
            v.0.iter_mut().for_each(|x| *x /= n);
        }
        v
    }
}

pub fn embed_sentence(tokens: &TokenSequence, embedder: &dyn Embedder) -> Vector {
    embedder.embed(tokens)
}
