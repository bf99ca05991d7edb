//! Corpus construction: flag candidate bias, assign provisional labels,
//! split, and finalize a documented dataset bundle.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::formats::{emit_conll_records, emit_jsonl};
use crate::lexicon::{match_lexicon, match_rules, BiasDimension, DimensionLabel, Lexicon, LexiconHit, RuleHit, RuleStore};
use crate::text::{embed_sentence, preprocess, tokenize, CleanText, Embedder, Vocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordStatus {
    AutoFlagged,
    UnderReview,
    Finalized,
    Disputed,
    Clean,
}

impl RecordStatus {
    pub const ALL: [RecordStatus; 5] = [
        RecordStatus::AutoFlagged,
        RecordStatus::UnderReview,
        RecordStatus::Finalized,
        RecordStatus::Disputed,
        RecordStatus::Clean,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RecordStatus::AutoFlagged => "auto_flagged",
            RecordStatus::UnderReview => "under_review",
            RecordStatus::Finalized => "finalized",
            RecordStatus::Disputed => "disputed",
            RecordStatus::Clean => "clean",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|st| st.as_str() == s)
    }

    /// Transitions allowed by the review workflow. Leaving `disputed`
    /// additionally requires a consensus note, checked by the caller.
    pub fn can_transition(self, to: RecordStatus) -> bool {
        use RecordStatus::*;
        matches!(
            (self, to),
            (AutoFlagged, UnderReview) | (UnderReview, Finalized) | (UnderReview, Disputed) | (Disputed, Finalized)
        )
    }

    /// Eligible for splitting and release.
    pub fn is_settled(self) -> bool {
        matches!(self, RecordStatus::Finalized | RecordStatus::Clean)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Evidence {
    Lexicon,
    Rule,
    Manual,
}

/// One annotated sentence. Serialized field order is fixed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub biased_text: String,
    pub bias_label: bool,
    pub identified_biased_spans: Vec<String>,
    pub bias_dimension: Option<DimensionLabel>,
    pub record_id: String,
    pub status: RecordStatus,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub provenance: Vec<Evidence>,
}

impl AnnotationRecord {
    pub fn validate(&self) -> Result<()> {
        if let Some(span) = self
            .identified_biased_spans
            .iter()
            .find(|s| s.is_empty() || !self.biased_text.contains(s.as_str()))
        {
            return Err(Error::invalid(format!(
                "record {}: span {span:?} not found in text",
                self.record_id
            )));
        }
        if self.status == RecordStatus::Finalized && self.bias_label && self.identified_biased_spans.is_empty() {
            return Err(Error::invalid(format!(
                "record {}: finalized biased record has no spans",
                self.record_id
            )));
        }
        Ok(())
    }
}

/// Stable identifier derived from the source id and the cleaned text.
pub fn record_id_for(clean: &CleanText) -> String {
    let mut h = Sha256::new();
    h.update(clean.source_id().as_bytes());
    h.update([0x1f]);
    h.update(clean.as_str().as_bytes());
    hex::encode(&h.finalize()[..12])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlagResult {
    pub record_id: String,
    pub flagged: bool,
    pub lexicon_hits: Vec<LexiconHit>,
    pub rule_hits: Vec<RuleHit>,
    pub candidate_dimension: Option<BiasDimension>,
}

/// Lexicon, rules and embedder used for flagging.
pub struct FlagResources<'a> {
    pub lexicon: &'a Lexicon,
    pub rules: &'a RuleStore,
    pub embedder: &'a dyn Embedder,
    pub threshold: f64,
}

/// Flags a sentence when it matches the lexicon or is similar enough to a
/// rule. The most similar rule decides the dimension; without rule hits
/// the leftmost lexicon hit does.
pub fn flag_sentence(
    clean: &CleanText,
    lexicon: &Lexicon,
    rules: &RuleStore,
    embedder: &dyn Embedder,
    threshold: f64,
) -> Result<FlagResult> {
    let tokens = tokenize(clean, &Vocabulary::default());
    let lexicon_hits = match_lexicon(&tokens, lexicon);
    let vec = embed_sentence(&tokens, embedder);
    let rule_hits = match_rules(&vec, rules, threshold)?;
    let candidate_dimension = rule_hits
        .first()
        .map(|h| h.dimension)
        .or_else(|| lexicon_hits.first().map(|h| h.dimension));
    Ok(FlagResult {
        record_id: record_id_for(clean),
        flagged: !lexicon_hits.is_empty() || !rule_hits.is_empty(),
        lexicon_hits,
        rule_hits,
        candidate_dimension,
    })
}

/// Provisional record from a flag result. Flagged sentences are
/// `auto_flagged` with lexicon-hit spans prefilled; the rest are `clean`.
pub fn assign_bias_label(flag: &FlagResult, clean: &CleanText) -> Result<AnnotationRecord> {
    let record_id = record_id_for(clean);
    if flag.record_id != record_id {
        return Err(Error::invalid(format!(
            "flag result {} does not belong to text {}",
            flag.record_id, record_id
        )));
    }
    let text = clean.as_str();
    let mut record = AnnotationRecord {
        biased_text: text.to_string(),
        bias_label: false,
        identified_biased_spans: Vec::new(),
        bias_dimension: None,
        record_id,
        status: RecordStatus::Clean,
        provenance: Vec::new(),
    };
    if flag.flagged {
        let tokens = tokenize(clean, &Vocabulary::default());
        record.bias_label = true;
        record.status = RecordStatus::AutoFlagged;
        record.bias_dimension = flag.candidate_dimension.map(DimensionLabel::Known);
        record.identified_biased_spans = flag
            .lexicon_hits
            .iter()
            .map(|h| tokens.span_text(text, h.token_start, h.token_end).to_string())
            .collect();
        if !flag.lexicon_hits.is_empty() {
            record.provenance.push(Evidence::Lexicon);
        }
        if !flag.rule_hits.is_empty() {
            record.provenance.push(Evidence::Rule);
        }
    }
    Ok(record)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub dev: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.70,
            dev: 0.15,
            test: 0.15,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<String>,
    pub dev: Vec<String>,
    pub test: Vec<String>,
}

impl Splits {
    pub fn get(&self, name: &str) -> Option<&[String]> {
        match name {
            "train" => Some(&self.train),
            "dev" => Some(&self.dev),
            "test" => Some(&self.test),
            _ => None,
        }
    }
}

/// Largest-remainder apportionment of `n` items; ties go to the earlier
/// bucket.
pub fn split_sizes(n: usize, ratios: &[f64]) -> Vec<usize> {
    let exact: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut sizes: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let assigned: usize = sizes.iter().sum();
    let mut order: Vec<usize> = (0..ratios.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().take(n.saturating_sub(assigned)) {
        sizes[i] += 1;
    }
    sizes
}

/// Seeded shuffle of the settled records, then a largest-remainder
/// partition into train/dev/test.
pub fn split_dataset(records: &[AnnotationRecord], ratios: SplitRatios, seed: u64) -> Result<Splits> {
    let r = [ratios.train, ratios.dev, ratios.test];
    if r.iter().any(|x| !x.is_finite() || *x < 0.0) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("split ratios {r:?} must be non-negative and sum to 1")));
    }
    let mut ids: Vec<String> = records
        .iter()
        .filter(|rec| rec.status.is_settled())
        .map(|rec| rec.record_id.clone())
        .collect();
    if ids.len() < 3 {
        return Err(Error::invalid(format!(
            "need at least 3 finalized or clean records to split, have {}",
            ids.len()
        )));
    }
    ids.sort();
    ids.dedup();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let sizes = split_sizes(ids.len(), &r);
    let test = ids.split_off(sizes[0] + sizes[1]);
    let dev = ids.split_off(sizes[0]);
    Ok(Splits { train: ids, dev, test })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetMetadata {
    pub identifier: String,
    pub version: String,
    pub license: String,
    pub creation_date: String,
    pub format_tags: Vec<String>,
}

impl DatasetMetadata {
    pub fn new(identifier: &str, version: &str, license: &str, creation_date: &str) -> Self {
        Self {
            identifier: identifier.into(),
            version: version.into(),
            license: license.into(),
            creation_date: creation_date.into(),
            format_tags: vec!["jsonl".into(), "conll-2003-bio".into()],
        }
    }

    /// Reads identifier, version, license and creation_date (plus optional
    /// comma-separated format_tags) from a string map.
    pub fn from_map(map: &BTreeMap<String, String>) -> Result<Self> {
        let get = |k: &str| -> Result<String> {
            map.get(k)
                .filter(|v| !v.trim().is_empty())
                .cloned()
                .ok_or_else(|| Error::invalid(format!("metadata field `{k}` is missing")))
        };
        let mut md = Self::new(&get("identifier")?, &get("version")?, &get("license")?, &get("creation_date")?);
        if let Some(tags) = map.get("format_tags") {
            md.format_tags = tags.split(',').map(|t| t.trim().to_string()).filter(|t| !t.is_empty()).collect();
        }
        md.validate()?;
        Ok(md)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("identifier", &self.identifier),
            ("version", &self.version),
            ("license", &self.license),
            ("creation_date", &self.creation_date),
        ] {
            if v.trim().is_empty() {
                return Err(Error::invalid(format!("metadata field `{name}` is missing")));
            }
        }
        if self.format_tags.is_empty() {
            return Err(Error::invalid("metadata field `format_tags` is missing"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBundle {
    pub records: Vec<AnnotationRecord>,
    pub metadata: DatasetMetadata,
    pub splits: Splits,
}

impl DatasetBundle {
    pub fn to_jsonl(&self) -> String {
        emit_jsonl(&self.records)
    }

    pub fn to_conll(&self) -> Result<String> {
        emit_conll_records(&self.records)
    }

    pub fn validate(&self) -> Result<()> {
        self.metadata.validate()?;
        let mut not_ready = Vec::new();
        for r in &self.records {
            r.validate()?;
            if !r.status.is_settled() {
                not_ready.push(r.record_id.clone());
            }
        }
        if !not_ready.is_empty() {
            return Err(Error::NotFinalized(not_ready));
        }
        let mut seen = std::collections::HashSet::new();
        for id in self.splits.train.iter().chain(&self.splits.dev).chain(&self.splits.test) {
            if !seen.insert(id.as_str()) {
                return Err(Error::invalid(format!("record {id} appears in more than one split")));
            }
        }
        if let Some(r) = self.records.iter().find(|r| !seen.contains(r.record_id.as_str())) {
            return Err(Error::invalid(format!("record {} is in no split", r.record_id)));
        }
        Ok(())
    }
}

/// Packages settled records into a validated bundle.
pub fn finalize_dataset(
    records: Vec<AnnotationRecord>,
    metadata: DatasetMetadata,
    ratios: SplitRatios,
    seed: u64,
) -> Result<DatasetBundle> {
    metadata.validate()?;
    let not_ready: Vec<String> = records
        .iter()
        .filter(|r| !r.status.is_settled())
        .map(|r| r.record_id.clone())
        .collect();
    if !not_ready.is_empty() {
        return Err(Error::NotFinalized(not_ready));
    }
    let splits = split_dataset(&records, ratios, seed)?;
    let bundle = DatasetBundle {
        records,
        metadata,
        splits,
    };
    bundle.validate()?;
    Ok(bundle)
}

#[derive(Debug, Clone)]
pub struct CorpusConfig {
    pub threshold: f64,
    pub seed: u64,
    pub ratios: SplitRatios,
    /// Trust lexicon-backed provisional labels without review. Records that
    /// were flagged only by rules still need reviewer spans and stay pending.
    pub auto_finalize: bool,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            threshold: crate::lexicon::DEFAULT_RULE_THRESHOLD,
            seed: 0,
            ratios: SplitRatios::default(),
            auto_finalize: false,
        }
    }
}

/// Result of running corpus construction over raw input lines.
#[derive(Debug, Clone)]
pub struct CorpusBuild {
    pub records: Vec<AnnotationRecord>,
    pub flags: Vec<FlagResult>,
    /// Records still awaiting review.
    pub pending: Vec<AnnotationRecord>,
    /// Present once every released record is settled.
    pub bundle: Option<DatasetBundle>,
    pub skipped_missing: usize,
}

/// Cleans, flags and labels every line of `lines`. Blank lines are counted
/// and dropped; duplicate sentences keep their first occurrence.
pub fn label_lines(
    lines: &[String],
    source: &str,
    res: &FlagResources<'_>,
) -> Result<(Vec<AnnotationRecord>, Vec<FlagResult>, usize)> {
    let mut records = Vec::new();
    let mut flags = Vec::new();
    let mut skipped = 0;
    let mut seen = std::collections::HashSet::new();
    for (i, line) in lines.iter().enumerate() {
        let clean = preprocess(line).with_source(format!("{source}:{}", i + 1));
        if clean.is_missing() {
            skipped += 1;
            continue;
        }
        if !seen.insert(clean.as_str().to_string()) {
            skipped += 1;
            continue;
        }
        let flag = flag_sentence(&clean, res.lexicon, res.rules, res.embedder, res.threshold)?;
        records.push(assign_bias_label(&flag, &clean)?);
        flags.push(flag);
    }
    Ok((records, flags, skipped))
}

pub fn build_corpus(
    lines: &[String],
    source: &str,
    res: &FlagResources<'_>,
    config: &CorpusConfig,
    metadata: DatasetMetadata,
) -> Result<CorpusBuild> {
    metadata.validate()?;
    let (mut records, flags, skipped_missing) = label_lines(lines, source, res)?;
    if records.is_empty() {
        return Err(Error::invalid("input contains no usable sentences"));
    }
    let mut pending = Vec::new();
    if config.auto_finalize {
        let mut settled = Vec::new();
        for mut r in records {
            if r.status == RecordStatus::AutoFlagged && !r.identified_biased_spans.is_empty() {
                r.status = RecordStatus::Finalized;
            }
            if r.status.is_settled() {
                settled.push(r);
            } else {
                pending.push(r);
            }
        }
        records = settled;
    } else {
        pending = records.iter().filter(|r| !r.status.is_settled()).cloned().collect();
    }
    let bundle = if pending.is_empty() || config.auto_finalize {
        Some(finalize_dataset(records.clone(), metadata, config.ratios, config.seed)?)
    } else {
        None
    };
    Ok(CorpusBuild {
        records,
        flags,
        pending,
        bundle,
        skipped_missing,
    })
}

/// Re-finalizes records that came back from review.
pub fn build_from_records(
    records: Vec<AnnotationRecord>,
    config: &CorpusConfig,
    metadata: DatasetMetadata,
) -> Result<CorpusBuild> {
    for r in &records {
        r.validate()?;
    }
    let bundle = finalize_dataset(records.clone(), metadata, config.ratios, config.seed)?;
    Ok(CorpusBuild {
        records,
        flags: Vec::new(),
        pending: Vec::new(),
        bundle: Some(bundle),
        skipped_missing: 0,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestCounts {
    pub records: usize,
    pub biased: usize,
    pub pending_review: usize,
    pub skipped_missing: usize,
    pub train: usize,
    pub dev: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestFiles {
    pub jsonl: String,
    pub conll: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pending: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flags: Option<String>,
}

/// Dataset manifest written next to the serializations.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub metadata: Option<DatasetMetadata>,
    pub counts: ManifestCounts,
    pub files: ManifestFiles,
    pub splits: Option<Splits>,
}

pub const JSONL_FILE: &str = "corpus.jsonl";
pub const CONLL_FILE: &str = "corpus.conll";
pub const PENDING_FILE: &str = "pending.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";
/// Flag evidence, one [`FlagResult`] per line, read by the review service.
pub const FLAGS_FILE: &str = "flags.jsonl";

impl CorpusBuild {
    pub fn manifest(&self) -> Manifest {
        let splits = self.bundle.as_ref().map(|b| b.splits.clone());
        let (train, dev, test) = splits
            .as_ref()
            .map(|s| (s.train.len(), s.dev.len(), s.test.len()))
            .unwrap_or_default();
        let has_pending_file = self.bundle.is_some() && !self.pending.is_empty();
        Manifest {
            stage: if self.bundle.is_some() { "final" } else { "review" }.into(),
            metadata: self.bundle.as_ref().map(|b| b.metadata.clone()),
            counts: ManifestCounts {
                records: self.records.len(),
                biased: self.records.iter().filter(|r| r.bias_label).count(),
                pending_review: self.pending.len(),
                skipped_missing: self.skipped_missing,
                train,
                dev,
                test,
            },
            files: ManifestFiles {
                jsonl: JSONL_FILE.into(),
                conll: CONLL_FILE.into(),
                pending: has_pending_file.then(|| PENDING_FILE.into()),
                flags: (!self.flags.is_empty()).then(|| FLAGS_FILE.into()),
            },
            splits,
        }
    }

    /// Writes the JSONL and CoNLL serializations and the manifest into
    /// `dir`, returning the paths written.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir)?;
        let mut written = Vec::new();
        let mut put = |name: &str, body: String| -> Result<()> {
            let p = dir.join(name);
            fs::write(&p, body)?;
            written.push(p);
            Ok(())
        };
        put(JSONL_FILE, emit_jsonl(&self.records))?;
        put(CONLL_FILE, emit_conll_records(&self.records)?)?;
        let manifest = self.manifest();
        if manifest.files.pending.is_some() {
            put(PENDING_FILE, emit_jsonl(&self.pending))?;
        }
        if manifest.files.flags.is_some() {
            let mut body = String::new();
            for f in &self.flags {
                body.push_str(&serde_json::to_string(f)?);
                body.push('\n');
            }
            put(FLAGS_FILE, body)?;
        }
        let mut body = serde_json::to_string_pretty(&manifest)?;
        body.push('\n');
        put(MANIFEST_FILE, body)?;
        Ok(written)
    }
}
