//! Inter-annotator agreement and review consensus.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lexicon::DimensionLabel;

/// Cohen's kappa for two raters labelling the same items.
///
/// Perfect agreement with a single shared category (chance agreement of 1)
/// yields 1.0; any disagreement in that degenerate case is an error.
pub fn cohen_kappa<T: Eq + Hash>(labels_a: &[T], labels_b: &[T]) -> Result<f64> {
    if labels_a.len() != labels_b.len() {
        return Err(Error::LengthMismatch {
            left: labels_a.len(),
            right: labels_b.len(),
        });
    }
    if labels_a.is_empty() {
        return Err(Error::invalid("cohen_kappa needs at least one item"));
    }
    let n = labels_a.len() as f64;
    let observed = labels_a.iter().zip(labels_b).filter(|(a, b)| a == b).count() as f64 / n;
    let categories: HashSet<&T> = labels_a.iter().chain(labels_b).collect();
    let expected: f64 = categories
        .into_iter()
        .map(|c| {
            let pa = labels_a.iter().filter(|x| *x == c).count() as f64 / n;
            let pb = labels_b.iter().filter(|x| *x == c).count() as f64 / n;
            pa * pb
        })
        .sum();
    chance_corrected(observed, expected)
}

fn chance_corrected(observed: f64, expected: f64) -> Result<f64> {
    if (1.0 - expected).abs() < 1e-15 {
        return if (1.0 - observed).abs() < 1e-15 {
            Ok(1.0)
        } else {
            Err(Error::invalid("kappa undefined: chance agreement is 1"))
        };
    }
    Ok((observed - expected) / (1.0 - expected))
}

/// Items × categories matrix of rating counts with a constant number of
/// raters per item.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RatingMatrix {
    counts: Vec<Vec<u32>>,
    raters: u32,
}

impl RatingMatrix {
    pub fn new(counts: Vec<Vec<u32>>) -> Result<Self> {
        let k = counts.first().map_or(0, Vec::len);
        if counts.is_empty() {
            return Err(Error::invalid("rating matrix has no items"));
        }
        if k < 2 {
            return Err(Error::invalid("rating matrix needs at least 2 categories"));
        }
        let raters: u32 = counts[0].iter().sum();
        for (i, row) in counts.iter().enumerate() {
            if row.len() != k {
                return Err(Error::invalid(format!("row {i} has {} categories, expected {k}", row.len())));
            }
            if row.iter().sum::<u32>() != raters {
                return Err(Error::invalid(format!("row {i} does not sum to {raters} raters")));
            }
        }
        Ok(Self { counts, raters })
    }

    /// Builds a matrix from per-item rater labels.
    pub fn from_labels<T: Ord + Clone>(items: &[Vec<T>]) -> Result<Self> {
        let cats: BTreeSet<T> = items.iter().flatten().cloned().collect();
        let mut cats: Vec<T> = cats.into_iter().collect();
        if cats.len() == 1 {
            // A second, unused category keeps the matrix well-formed.
            cats.push(cats[0].clone());
        }
        let counts = items
            .iter()
            .map(|labels| {
                let mut row = vec![0u32; cats.len().max(2)];
                for l in labels {
                    let j = cats.iter().position(|c| c == l).unwrap();
                    row[j] += 1;
                }
                row
            })
            .collect();
        Self::new(counts)
    }

    pub fn counts(&self) -> &[Vec<u32>] {
        &self.counts
    }

    pub fn raters(&self) -> u32 {
        self.raters
    }
}

/// Fleiss' kappa over a rating matrix.
pub fn fleiss_kappa(matrix: &RatingMatrix) -> Result<f64> {
    let r = matrix.raters as f64;
    if matrix.raters < 2 {
        return Err(Error::invalid("fleiss_kappa needs at least 2 raters per item"));
    }
    let n = matrix.counts.len() as f64;
    let k = matrix.counts[0].len();
    let p_bar = matrix
        .counts
        .iter()
        .map(|row| {
            let sq: f64 = row.iter().map(|&c| (c as f64) * (c as f64)).sum();
            (sq - r) / (r * (r - 1.0))
        })
        .sum::<f64>()
        / n;
    let p_e: f64 = (0..k)
        .map(|j| {
            let pj = matrix.counts.iter().map(|row| row[j] as f64).sum::<f64>() / (n * r);
            pj * pj
        })
        .sum();
    chance_corrected(p_bar, p_e)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Accept,
    Reject,
    Modify,
}

impl Decision {
    /// Label vote: accept and modify both say "biased".
    pub fn label(self) -> bool {
        !matches!(self, Decision::Reject)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Review {
    pub record_id: String,
    pub reviewer_id: String,
    pub decision: Decision,
    #[serde(default)]
    pub spans: Vec<String>,
    #[serde(default)]
    pub dimension: Option<DimensionLabel>,
    #[serde(default)]
    pub note: String,
    pub version: u64,
}

impl Review {
    pub fn validate(&self) -> Result<()> {
        if self.reviewer_id.trim().is_empty() {
            return Err(Error::invalid("review has no reviewer_id"));
        }
        if self.decision == Decision::Modify && self.spans.is_empty() {
            return Err(Error::invalid("a modify review must supply spans"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConsensusStatus {
    Finalized,
    Disputed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsensusOutcome {
    pub record_id: String,
    pub final_label: Option<bool>,
    pub final_spans: Vec<String>,
    pub final_dimension: Option<DimensionLabel>,
    pub status: ConsensusStatus,
    pub note: String,
}

/// Latest review per reviewer, keyed by reviewer id. Later versions win.
fn latest_per_reviewer(reviews: &[Review]) -> BTreeMap<&str, &Review> {
    let mut latest: BTreeMap<&str, &Review> = BTreeMap::new();
    for r in reviews {
        match latest.get(r.reviewer_id.as_str()) {
            Some(prev) if (prev.version, &prev.note) >= (r.version, &r.note) => {}
            _ => {
                latest.insert(&r.reviewer_id, r);
            }
        }
    }
    latest
}

/// Strict-majority consensus over the latest review of each reviewer.
///
/// Returns `Ok(None)` while fewer than `quorum` reviewers have voted. A tie
/// yields a disputed outcome whose note gathers the reviewers' notes.
pub fn resolve_consensus(reviews: &[Review], quorum: usize) -> Result<Option<ConsensusOutcome>> {
    if quorum == 0 {
        return Err(Error::invalid("quorum must be at least 1"));
    }
    let Some(first) = reviews.first() else {
        return Ok(None);
    };
    if let Some(r) = reviews.iter().find(|r| r.record_id != first.record_id) {
        return Err(Error::invalid(format!(
            "reviews for different records: {} and {}",
            first.record_id, r.record_id
        )));
    }
    let latest = latest_per_reviewer(reviews);
    if latest.len() < quorum {
        return Ok(None);
    }
    let votes = latest.len();
    let yes: Vec<&Review> = latest.values().copied().filter(|r| r.decision.label()).collect();
    let no = votes - yes.len();

    let notes: Vec<String> = latest
        .values()
        .filter(|r| !r.note.trim().is_empty())
        .map(|r| format!("{}: {}", r.reviewer_id, r.note.trim()))
        .collect();
    let record_id = first.record_id.clone();

    if yes.len() * 2 > votes {
        let modifiers: Vec<&Review> = yes.iter().copied().filter(|r| r.decision == Decision::Modify).collect();
        let span_source = if modifiers.is_empty() { &yes } else { &modifiers };
        let spans: BTreeSet<String> = span_source.iter().flat_map(|r| r.spans.iter().cloned()).collect();
        Ok(Some(ConsensusOutcome {
            record_id,
            final_label: Some(true),
            final_spans: spans.into_iter().collect(),
            final_dimension: majority_dimension(&yes),
            status: ConsensusStatus::Finalized,
            note: notes.join("; "),
        }))
    } else if no * 2 > votes {
        Ok(Some(ConsensusOutcome {
            record_id,
            final_label: Some(false),
            final_spans: Vec::new(),
            final_dimension: None,
            status: ConsensusStatus::Finalized,
            note: notes.join("; "),
        }))
    } else {
        let mut note = format!("tie: {} biased vs {} not biased", yes.len(), no);
        if !notes.is_empty() {
            note.push_str("; ");
            note.push_str(&notes.join("; "));
        }
        Ok(Some(ConsensusOutcome {
            record_id,
            final_label: None,
            final_spans: Vec::new(),
            final_dimension: None,
            status: ConsensusStatus::Disputed,
            note,
        }))
    }
}

fn majority_dimension(reviews: &[&Review]) -> Option<DimensionLabel> {
    let mut counts: BTreeMap<&DimensionLabel, usize> = BTreeMap::new();
    for d in reviews.iter().filter_map(|r| r.dimension.as_ref()) {
        *counts.entry(d).or_default() += 1;
    }
    // Highest count; the BTreeMap order breaks ties deterministically.
    let best = counts.values().copied().max()?;
    counts.into_iter().find(|&(_, c)| c == best).map(|(d, _)| d.clone())
}
