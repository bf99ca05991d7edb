//! Dataset codecs: the JSON-lines annotation schema and two-column CoNLL
//! BIO files.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::corpus::AnnotationRecord;
use crate::error::{Error, Result};
use crate::text::{tokenize_str, TokenSequence, Vocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BioTag {
    #[serde(rename = "O")]
    O,
    #[serde(rename = "B-BIAS")]
    B,
    #[serde(rename = "I-BIAS")]
    I,
}

impl BioTag {
    pub const ALL: [BioTag; 3] = [BioTag::O, BioTag::B, BioTag::I];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Self {
        Self::ALL[i]
    }

    pub fn as_str(self) -> &'static str {
        match self {
            BioTag::O => "O",
            BioTag::B => "B-BIAS",
            BioTag::I => "I-BIAS",
        }
    }
}

impl fmt::Display for BioTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BioTag {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "O" => Ok(BioTag::O),
            "B-BIAS" => Ok(BioTag::B),
            "I-BIAS" => Ok(BioTag::I),
            _ => Err(format!("unknown tag {s:?}")),
        }
    }
}

/// Index of the first `I-BIAS` that starts a sentence or follows `O`.
pub fn first_bio_violation(tags: &[BioTag]) -> Option<usize> {
    let mut prev = BioTag::O;
    for (i, &t) in tags.iter().enumerate() {
        if t == BioTag::I && prev == BioTag::O {
            return Some(i);
        }
        prev = t;
    }
    None
}

/// Rewrites every orphan `I-BIAS` to `B-BIAS`.
pub fn repair_bio(tags: &mut [BioTag]) {
    let mut prev = BioTag::O;
    for t in tags.iter_mut() {
        if *t == BioTag::I && prev == BioTag::O {
            *t = BioTag::B;
        }
        prev = *t;
    }
}

/// Decodes `(start, end)` token spans from BIO tags. Orphan `I-BIAS`
/// tags open a new span.
pub fn decode_spans(tags: &[BioTag]) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    let mut open: Option<usize> = None;
    for (i, &t) in tags.iter().enumerate() {
        match t {
            BioTag::O => {
                if let Some(s) = open.take() {
                    spans.push((s, i));
                }
            }
            BioTag::B => {
                if let Some(s) = open.replace(i) {
                    spans.push((s, i));
                }
            }
            BioTag::I => {
                if open.is_none() {
                    open = Some(i);
                }
            }
        }
    }
    if let Some(s) = open {
        spans.push((s, tags.len()));
    }
    spans
}

pub fn tags_from_spans(n: usize, spans: &[(usize, usize)]) -> Vec<BioTag> {
    let mut tags = vec![BioTag::O; n];
    for &(s, e) in spans {
        tags[s] = BioTag::B;
        for t in &mut tags[s + 1..e] {
            *t = BioTag::I;
        }
    }
    tags
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConllToken {
    pub surface: String,
    pub tag: BioTag,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConllSentence {
    pub tokens: Vec<ConllToken>,
}

impl ConllSentence {
    pub fn new(surfaces: &[String], tags: &[BioTag]) -> Self {
        Self {
            tokens: surfaces
                .iter()
                .zip(tags)
                .map(|(s, &tag)| ConllToken {
                    surface: s.clone(),
                    tag,
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tags(&self) -> Vec<BioTag> {
        self.tokens.iter().map(|t| t.tag).collect()
    }

    pub fn surfaces(&self) -> Vec<String> {
        self.tokens.iter().map(|t| t.surface.clone()).collect()
    }

    pub fn spans(&self) -> Vec<(usize, usize)> {
        decode_spans(&self.tags())
    }

    /// Span surfaces joined by single spaces.
    pub fn span_texts(&self) -> Vec<String> {
        self.spans()
            .into_iter()
            .map(|(s, e)| {
                self.tokens[s..e]
                    .iter()
                    .map(|t| t.surface.as_str())
                    .collect::<Vec<_>>()
                    .join(" ")
            })
            .collect()
    }

    pub fn is_well_formed(&self) -> bool {
        first_bio_violation(&self.tags()).is_none()
    }
}

/// Maps span strings onto token ranges of `text`. Each span takes the first
/// occurrence whose ends fall on token boundaries and that does not overlap
/// an earlier span.
pub fn align_spans(text: &str, tokens: &TokenSequence, spans: &[String]) -> Result<Vec<(usize, usize)>> {
    let mut taken = vec![false; tokens.len()];
    let mut out = Vec::with_capacity(spans.len());
    for span in spans {
        if span.is_empty() {
            return Err(Error::UnalignedSpan { span: span.clone() });
        }
        let mut aligned = None;
        let mut overlapped = false;
        for (pos, _) in text.match_indices(span.as_str()) {
            let end = pos + span.len();
            let s = tokens.offsets.iter().position(|o| o.0 == pos);
            let e = tokens.offsets.iter().position(|o| o.1 == end);
            if let (Some(s), Some(e)) = (s, e) {
                if taken[s..=e].iter().any(|&t| t) {
                    overlapped = true;
                    continue;
                }
                aligned = Some((s, e + 1));
                break;
            }
        }
        match aligned {
            Some((s, e)) => {
                taken[s..e].iter_mut().for_each(|t| *t = true);
                out.push((s, e));
            }
            None if overlapped => {
                return Err(Error::invalid(format!("span {span:?} overlaps another span")))
            }
            None => return Err(Error::UnalignedSpan { span: span.clone() }),
        }
    }
    Ok(out)
}

/// BIO sentence for a record, given the tokens of its `biased_text`.
pub fn record_to_sentence(record: &AnnotationRecord, tokens: &TokenSequence) -> Result<ConllSentence> {
    let spans = align_spans(&record.biased_text, tokens, &record.identified_biased_spans)?;
    let tags = tags_from_spans(tokens.len(), &spans);
    Ok(ConllSentence::new(&tokens.surfaces, &tags))
}

pub fn emit_sentence(sentence: &ConllSentence) -> String {
    let mut out = String::new();
    for t in &sentence.tokens {
        out.push_str(&t.surface);
        out.push(' ');
        out.push_str(t.tag.as_str());
        out.push('\n');
    }
    out.push('\n');
    out
}

pub fn emit_sentences(sentences: &[ConllSentence]) -> String {
    sentences.iter().map(emit_sentence).collect()
}

/// One `surface tag` line per token followed by a blank line.
pub fn emit_conll(record: &AnnotationRecord, tokens: &TokenSequence) -> Result<String> {
    Ok(emit_sentence(&record_to_sentence(record, tokens)?))
}

/// CoNLL text for a list of records, tokenizing each `biased_text`.
pub fn emit_conll_records(records: &[AnnotationRecord]) -> Result<String> {
    let vocab = Vocabulary::default();
    let mut out = String::new();
    for r in records {
        let tokens = tokenize_str(&r.biased_text, &vocab);
        out.push_str(&emit_conll(r, &tokens)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ConllOptions {
    /// Rewrite orphan `I-BIAS` tags to `B-BIAS` instead of rejecting them.
    pub repair: bool,
}

pub fn parse_conll(text: &str) -> Result<Vec<ConllSentence>> {
    parse_conll_with(text, ConllOptions::default())
}

/// Accepts two-column `surface tag` lines or four-column CoNLL-2003 lines
/// (first and last columns are used). `-DOCSTART-` lines are skipped.
pub fn parse_conll_with(text: &str, opts: ConllOptions) -> Result<Vec<ConllSentence>> {
    let mut sentences = Vec::new();
    let mut current = ConllSentence::default();
    let mut prev = BioTag::O;
    for (n, line) in text.lines().enumerate() {
        let line_no = n + 1;
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.is_empty() {
            if !current.is_empty() {
                sentences.push(std::mem::take(&mut current));
            }
            prev = BioTag::O;
            continue;
        }
        if cols[0] == "-DOCSTART-" {
            continue;
        }
        if cols.len() < 2 {
            return Err(Error::Parse {
                line: line_no,
                message: "expected `surface tag`".into(),
            });
        }
        let mut tag: BioTag = cols[cols.len() - 1]
            .parse()
            .map_err(|message| Error::Parse { line: line_no, message })?;
        if tag == BioTag::I && prev == BioTag::O {
            if opts.repair {
                tag = BioTag::B;
            } else {
                return Err(Error::Parse {
                    line: line_no,
                    message: "I-BIAS must follow B-BIAS or I-BIAS".into(),
                });
            }
        }
        prev = tag;
        current.tokens.push(ConllToken {
            surface: cols[0].to_string(),
            tag,
        });
    }
    if !current.is_empty() {
        sentences.push(current);
    }
    Ok(sentences)
}

/// One JSON object per record, keys in fixed order.
pub fn emit_jsonl(records: &[AnnotationRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("records serialize"));
        out.push('\n');
    }
    out
}

const REQUIRED_FIELDS: [&str; 6] = [
    "biased_text",
    "bias_label",
    "identified_biased_spans",
    "bias_dimension",
    "record_id",
    "status",
];

pub fn parse_jsonl(text: &str) -> Result<Vec<AnnotationRecord>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line_no = n + 1;
        if line.trim().is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let Some(obj) = value.as_object() else {
            return Err(Error::Parse {
                line: line_no,
                message: "expected a JSON object".into(),
            });
        };
        if let Some(field) = REQUIRED_FIELDS.iter().find(|f| !obj.contains_key(**f)) {
            return Err(Error::MissingField { line: line_no, field });
        }
        let record = serde_json::from_value(value).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        out.push(record);
    }
    Ok(out)
}
