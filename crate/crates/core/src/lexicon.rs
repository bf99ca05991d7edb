//! Expert lexicon of biased terms and the example-sentence rule store.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::text::{cosine_similarity, preprocess, split_tokens, tokenize, Embedder, TokenSequence, Vector, Vocabulary};

/// Default cosine threshold for rule-based flagging.
pub const DEFAULT_RULE_THRESHOLD: f64 = 0.85;

pub const DEFAULT_LEXICON_TSV: &str = include_str!("../data/lexicon.tsv");
pub const DEFAULT_RULES_TSV: &str = include_str!("../data/rules.tsv");

macro_rules! dimensions {
    ($($variant:ident => $name:literal),+ $(,)?) => {
        /// The twenty bias dimensions a text can be labelled with.
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
        pub enum BiasDimension {
            $($variant),+
        }

        impl BiasDimension {
            pub const ALL: [BiasDimension; 20] = [$(BiasDimension::$variant),+];

            pub fn name(self) -> &'static str {
                match self {
                    $(BiasDimension::$variant => $name),+
                }
            }
        }
    };
}

dimensions! {
    Race => "Race",
    Gender => "Gender",
    Religion => "Religion",
    Age => "Age",
    SexualOrientation => "Sexual Orientation",
    Profession => "Profession",
    SocialStatus => "Social Status",
    National => "National",
    Disability => "Disability",
    Education => "Education",
    BodySize => "Body Size",
    Climate => "Climate",
    Political => "Political",
    EconomicStatus => "Economic Status",
    Region => "Region",
    Ethnicity => "Ethnicity",
    Cultural => "Cultural",
    Lifestyle => "Lifestyle",
    Appearance => "Appearance",
    HealthWellness => "Health/Wellness Narrative",
}

fn dimension_key(s: &str) -> String {
    s.chars()
        .filter(|c| c.is_alphanumeric())
        .flat_map(char::to_lowercase)
        .collect()
}

impl FromStr for BiasDimension {
    type Err = Error;

    /// Case-insensitive; spaces, underscores and slashes are ignored.
    fn from_str(s: &str) -> Result<Self> {
        let key = dimension_key(s);
        BiasDimension::ALL
            .into_iter()
            .find(|d| dimension_key(d.name()) == key)
            .ok_or_else(|| Error::UnknownDimension {
                line: 0,
                name: s.to_string(),
            })
    }
}

impl fmt::Display for BiasDimension {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl Serialize for BiasDimension {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for BiasDimension {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// A dimension as it appears on an annotation record. Reviewers and
/// imported datasets may use labels outside the fixed enumeration
/// (e.g. "Ethnic Stereotyping"); those are kept verbatim.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DimensionLabel {
    Known(BiasDimension),
    Other(String),
}

impl DimensionLabel {
    pub fn parse(s: &str) -> Self {
        match s.parse() {
            Ok(d) => DimensionLabel::Known(d),
            Err(_) => DimensionLabel::Other(s.to_string()),
        }
    }

    pub fn known(&self) -> Option<BiasDimension> {
        match self {
            DimensionLabel::Known(d) => Some(*d),
            DimensionLabel::Other(_) => None,
        }
    }
}

impl From<BiasDimension> for DimensionLabel {
    fn from(d: BiasDimension) -> Self {
        DimensionLabel::Known(d)
    }
}

impl fmt::Display for DimensionLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DimensionLabel::Known(d) => f.write_str(d.name()),
            DimensionLabel::Other(s) => f.write_str(s),
        }
    }
}

impl Serialize for DimensionLabel {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for DimensionLabel {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        Ok(DimensionLabel::parse(&String::deserialize(d)?))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LexiconEntry {
    pub term: String,
    pub dimension: BiasDimension,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LexiconHit {
    pub token_start: usize,
    pub token_end: usize,
    pub matched_term: String,
    pub dimension: BiasDimension,
}

#[derive(Debug, Clone, Default)]
pub struct Lexicon {
    entries: Vec<LexiconEntry>,
    // token-joined term -> index of the first entry carrying it
    by_key: HashMap<String, usize>,
    max_tokens: usize,
}

fn match_key(term: &str) -> (String, usize) {
    let toks: Vec<&str> = split_tokens(term).into_iter().map(|(s, _, _)| s).collect();
    (toks.join(" "), toks.len())
}

impl Lexicon {
    pub fn entries(&self) -> &[LexiconEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Terms in load order, deduplicated.
    pub fn terms(&self) -> impl Iterator<Item = &str> {
        let mut seen = HashSet::new();
        self.entries
            .iter()
            .map(|e| e.term.as_str())
            .filter(move |t| seen.insert(*t))
    }

    pub fn terms_for(&self, dimension: BiasDimension) -> impl Iterator<Item = &str> {
        self.entries
            .iter()
            .filter(move |e| e.dimension == dimension)
            .map(|e| e.term.as_str())
    }

    /// Parses the `term<TAB>dimension` table format.
    pub fn parse_tsv(text: &str) -> Result<Self> {
        let mut rows = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.starts_with('#') || line.trim().is_empty() {
                continue;
            }
            let (term, dim) = line.split_once('\t').ok_or_else(|| Error::Parse {
                line: n + 1,
                message: "expected `term<TAB>dimension`".into(),
            })?;
            rows.push((n + 1, term.to_string(), dim.trim().to_string()));
        }
        load_rows(rows)
    }

    pub fn default_lexicon() -> Self {
        Self::parse_tsv(DEFAULT_LEXICON_TSV).expect("bundled lexicon is valid")
    }
}

/// Builds a lexicon from `(term, dimension name)` rows. Rows are numbered
/// from 1 in error messages.
pub fn load_lexicon<I, T, D>(rows: I) -> Result<Lexicon>
where
    I: IntoIterator<Item = (T, D)>,
    T: AsRef<str>,
    D: AsRef<str>,
{
    load_rows(
        rows.into_iter()
            .enumerate()
            .map(|(i, (t, d))| (i + 1, t.as_ref().to_string(), d.as_ref().to_string())),
    )
}

fn load_rows(rows: impl IntoIterator<Item = (usize, String, String)>) -> Result<Lexicon> {
    let mut lex = Lexicon::default();
    let mut seen = HashSet::new();
    for (line, term, dim) in rows {
        let dimension: BiasDimension = dim.parse().map_err(|_| Error::UnknownDimension {
            line,
            name: dim.clone(),
        })?;
        let term = term.trim().to_lowercase();
        if term.is_empty() {
            return Err(Error::Parse {
                line,
                message: "empty lexicon term".into(),
            });
        }
        let entry = LexiconEntry { term, dimension };
        if !seen.insert(entry.clone()) {
            continue;
        }
        let (key, n) = match_key(&entry.term);
        lex.max_tokens = lex.max_tokens.max(n);
        let idx = lex.entries.len();
        lex.by_key.entry(key).or_insert(idx);
        lex.entries.push(entry);
    }
    Ok(lex)
}

/// Exact lowercase matching of lexicon terms against a token sequence.
///
/// Candidate spans are accepted longest first, then left to right, skipping
/// any that overlap an accepted span. When a term belongs to several
/// dimensions the first-loaded entry decides. Hits are returned by position.
pub fn match_lexicon(tokens: &TokenSequence, lexicon: &Lexicon) -> Vec<LexiconHit> {
    let n = tokens.len();
    let mut candidates = Vec::new();
    for start in 0..n {
        let mut key = String::new();
        for end in start + 1..=n.min(start + lexicon.max_tokens) {
            if end > start + 1 {
                key.push(' ');
            }
            key.push_str(&tokens.surfaces[end - 1]);
            if let Some(&idx) = lexicon.by_key.get(&key) {
                candidates.push((start, end, idx));
            }
        }
    }
    candidates.sort_by_key(|&(s, e, _)| (std::cmp::Reverse(e - s), s));

    let mut taken = vec![false; n];
    let mut hits = Vec::new();
    for (s, e, idx) in candidates {
        if taken[s..e].iter().any(|&t| t) {
            continue;
        }
        taken[s..e].iter_mut().for_each(|t| *t = true);
        let entry = &lexicon.entries[idx];
        hits.push(LexiconHit {
            token_start: s,
            token_end: e,
            matched_term: entry.term.clone(),
            dimension: entry.dimension,
        });
    }
    hits.sort_by_key(|h| h.token_start);
    hits
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiasRule {
    pub rule_id: String,
    pub sentence: String,
    pub dimension: BiasDimension,
    pub rationale: String,
    pub embedding: Vector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleHit {
    pub rule_id: String,
    pub similarity: f64,
    pub dimension: BiasDimension,
}

#[derive(Debug, Clone, Default)]
pub struct RuleStore {
    rules: Vec<BiasRule>,
    dim: usize,
}

impl RuleStore {
    pub fn new(dim: usize) -> Self {
        Self {
            rules: Vec::new(),
            dim,
        }
    }

    pub fn rules(&self) -> &[BiasRule] {
        &self.rules
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    pub fn insert(&mut self, rule: BiasRule) -> Result<()> {
        if rule.embedding.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: rule.embedding.dim(),
            });
        }
        if self.rules.iter().any(|r| r.rule_id == rule.rule_id) {
            return Err(Error::invalid(format!("duplicate rule id {}", rule.rule_id)));
        }
        self.rules.push(rule);
        Ok(())
    }

    /// Parses `rule_id<TAB>dimension<TAB>rationale<TAB>sentence` lines and
    /// embeds each rule sentence with `embedder`.
    pub fn parse_tsv(text: &str, embedder: &dyn Embedder) -> Result<Self> {
        let mut store = RuleStore::new(embedder.dim());
        let vocab = Vocabulary::default();
        for (n, line) in text.lines().enumerate() {
            let line_no = n + 1;
            if line.starts_with('#') || line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.splitn(4, '\t').collect();
            let [rule_id, dim, rationale, sentence] = fields[..] else {
                return Err(Error::Parse {
                    line: line_no,
                    message: "expected 4 tab-separated fields".into(),
                });
            };
            let dimension = dim.parse().map_err(|_| Error::UnknownDimension {
                line: line_no,
                name: dim.to_string(),
            })?;
            let embedding = embedder.embed(&tokenize(&preprocess(sentence), &vocab));
            store
                .insert(BiasRule {
                    rule_id: rule_id.to_string(),
                    sentence: sentence.to_string(),
                    dimension,
                    rationale: rationale.to_string(),
                    embedding,
                })
                .map_err(|e| Error::Parse {
                    line: line_no,
                    message: e.to_string(),
                })?;
        }
        Ok(store)
    }
}

/// Rules whose embedding has cosine similarity at least `threshold` with
/// `sentence_vec`, most similar first (ties by ascending rule id).
pub fn match_rules(sentence_vec: &Vector, rules: &RuleStore, threshold: f64) -> Result<Vec<RuleHit>> {
    if sentence_vec.dim() != rules.dim {
        return Err(Error::DimensionMismatch {
            expected: rules.dim,
            actual: sentence_vec.dim(),
        });
    }
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::invalid(format!("threshold {threshold} outside [0, 1]")));
    }
    let mut hits = Vec::new();
    for rule in &rules.rules {
        let similarity = cosine_similarity(sentence_vec, &rule.embedding)?;
        if similarity >= threshold {
            hits.push(RuleHit {
                rule_id: rule.rule_id.clone(),
                similarity,
                dimension: rule.dimension,
            });
        }
    }
    hits.sort_by(|a, b| {
        b.similarity
            .total_cmp(&a.similarity)
            .then_with(|| a.rule_id.cmp(&b.rule_id))
    });
    Ok(hits)
}
