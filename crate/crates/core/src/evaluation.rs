//! Classification, span and agreement-free metrics, plus the training
//! carbon estimate and report tables.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::formats::{BioTag, ConllSentence};
use crate::lexicon::DimensionLabel;
use crate::model::BiasReport;
use crate::text::TokenSequence;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub confusion: Confusion,
    /// Precision had a zero denominator and was reported as 0.
    pub precision_degenerate: bool,
    /// Recall had a zero denominator and was reported as 0.
    pub recall_degenerate: bool,
}

impl MetricsReport {
    pub fn from_confusion(c: Confusion) -> Self {
        let ratio = |num: usize, den: usize| if den == 0 { (0.0, true) } else { (num as f64 / den as f64, false) };
        let (precision, precision_degenerate) = ratio(c.tp, c.tp + c.fp);
        let (recall, recall_degenerate) = ratio(c.tp, c.tp + c.fn_);
        let (accuracy, _) = ratio(c.tp + c.tn, c.total());
        Self {
            accuracy,
            precision,
            recall,
            f1: f1(precision, recall),
            confusion: c,
            precision_degenerate,
            recall_degenerate,
        }
    }
}

pub fn f1(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

/// Binary metrics with "biased" as the positive class.
pub fn sequence_metrics(pred: &[bool], gold: &[bool]) -> Result<MetricsReport> {
    if pred.len() != gold.len() {
        return Err(Error::LengthMismatch {
            left: pred.len(),
            right: gold.len(),
        });
    }
    if pred.is_empty() {
        return Err(Error::invalid("sequence_metrics needs at least one example"));
    }
    let mut c = Confusion::default();
    for (&p, &g) in pred.iter().zip(gold) {
        match (p, g) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(MetricsReport::from_confusion(c))
}

/// Area under the ROC curve as the Mann–Whitney statistic, computed from
/// mid-ranks. Ties count one half.
pub fn auc(scores: &[f64], gold: &[bool]) -> Result<f64> {
    if scores.len() != gold.len() {
        return Err(Error::LengthMismatch {
            left: scores.len(),
            right: gold.len(),
        });
    }
    let n_pos = gold.iter().filter(|&&g| g).count();
    let n_neg = gold.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::invalid("auc needs both positive and negative examples"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1..=j+1 share their mean.
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum_pos += mid * order[i..=j].iter().filter(|&&k| gold[k]).count() as f64;
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpanReport {
    /// Exact-match span precision/recall/F1 (`tn` is always 0).
    pub span: MetricsReport,
    /// Token-level F1 per tag, indexed like [`BioTag::ALL`].
    pub token_f1: [f64; 3],
    /// Unweighted mean of `token_f1`.
    pub token_macro_f1: f64,
}

pub fn span_f1(pred: &[ConllSentence], gold: &[ConllSentence]) -> Result<SpanReport> {
    if pred.len() != gold.len() {
        return Err(Error::LengthMismatch {
            left: pred.len(),
            right: gold.len(),
        });
    }
    let mut span = Confusion::default();
    let mut tag_counts = [[0usize; 3]; 3]; // [tag] -> tp, fp, fn
    for (i, (p, g)) in pred.iter().zip(gold).enumerate() {
        if p.len() != g.len() {
            return Err(Error::invalid(format!(
                "sentence {i}: {} predicted tokens vs {} gold tokens",
                p.len(),
                g.len()
            )));
        }
        let ps = p.spans();
        let gs = g.spans();
        let hits = ps.iter().filter(|s| gs.contains(s)).count();
        span.tp += hits;
        span.fp += ps.len() - hits;
        span.fn_ += gs.len() - hits;
        for (pt, gt) in p.tokens.iter().zip(&g.tokens) {
            if pt.tag == gt.tag {
                tag_counts[pt.tag.index()][0] += 1;
            } else {
                tag_counts[pt.tag.index()][1] += 1;
                tag_counts[gt.tag.index()][2] += 1;
            }
        }
    }
    let token_f1 = BioTag::ALL.map(|t| {
        let [tp, fp, fn_] = tag_counts[t.index()];
        MetricsReport::from_confusion(Confusion { tp, fp, fn_, tn: 0 }).f1
    });
    Ok(SpanReport {
        span: MetricsReport::from_confusion(span),
        token_f1,
        token_macro_f1: token_f1.iter().sum::<f64>() / 3.0,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DimensionF1 {
    pub per_dimension: BTreeMap<String, f64>,
    pub macro_f1: f64,
    /// Examples that carried no dimension and so belong to no partition.
    pub unassigned: usize,
}

/// F1 within each dimension partition and their unweighted mean.
pub fn macro_f1_by_dimension(pred: &[bool], gold: &[bool], dims: &[Option<DimensionLabel>]) -> Result<DimensionF1> {
    if pred.len() != gold.len() || pred.len() != dims.len() {
        return Err(Error::LengthMismatch {
            left: pred.len(),
            right: gold.len().min(dims.len()),
        });
    }
    let mut parts: BTreeMap<String, (Vec<bool>, Vec<bool>)> = BTreeMap::new();
    let mut unassigned = 0;
    for ((&p, &g), d) in pred.iter().zip(gold).zip(dims) {
        match d {
            Some(d) => {
                let e = parts.entry(d.to_string()).or_default();
                e.0.push(p);
                e.1.push(g);
            }
            None => unassigned += 1,
        }
    }
    let mut per_dimension = BTreeMap::new();
    for (name, (p, g)) in parts {
        per_dimension.insert(name, sequence_metrics(&p, &g)?.f1);
    }
    let macro_f1 = if per_dimension.is_empty() {
        0.0
    } else {
        per_dimension.values().sum::<f64>() / per_dimension.len() as f64
    };
    Ok(DimensionF1 {
        per_dimension,
        macro_f1,
        unassigned,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CarbonEstimate {
    pub energy_kwh: f64,
    pub emissions_kgco2e: f64,
}

/// Energy (kWh) of running at `power_watts` for `epochs` epochs of
/// `minutes_per_epoch`, and the emissions at the given grid intensity.
pub fn carbon_footprint(
    power_watts: f64,
    minutes_per_epoch: f64,
    epochs: u32,
    intensity_kgco2e_per_kwh: f64,
) -> Result<CarbonEstimate> {
    for (name, v) in [
        ("power", power_watts),
        ("minutes per epoch", minutes_per_epoch),
        ("carbon intensity", intensity_kgco2e_per_kwh),
    ] {
        if !v.is_finite() || v < 0.0 {
            return Err(Error::invalid(format!("{name} must be a non-negative number, got {v}")));
        }
    }
    let energy_kwh = (power_watts / 1000.0) * (minutes_per_epoch / 60.0) * epochs as f64;
    Ok(CarbonEstimate {
        energy_kwh,
        emissions_kgco2e: energy_kwh * intensity_kgco2e_per_kwh,
    })
}

/// Token surfaces paired with the report's attention weights.
pub fn attention_heatmap_data(report: &BiasReport, tokens: &TokenSequence) -> Result<Vec<(String, f64)>> {
    if report.attention.len() != tokens.len() {
        return Err(Error::LengthMismatch {
            left: report.attention.len(),
            right: tokens.len(),
        });
    }
    Ok(tokens.surfaces.iter().cloned().zip(report.attention.iter().copied()).collect())
}

fn pct(x: f64) -> String {
    format!("{:.2}", x * 100.0)
}

/// `model, precision, recall, f1` as tab-separated percentages.
pub fn metrics_table(rows: &[(&str, &MetricsReport)]) -> String {
    let mut out = String::from("model\taccuracy\tprecision\trecall\tf1\n");
    for (name, m) in rows {
        out.push_str(&format!(
            "{name}\t{}\t{}\t{}\t{}\n",
            pct(m.accuracy),
            pct(m.precision),
            pct(m.recall),
            pct(m.f1)
        ));
    }
    out
}

pub fn dimension_table(d: &DimensionF1) -> String {
    let mut out = String::from("dimension\tf1\n");
    for (name, f) in &d.per_dimension {
        out.push_str(&format!("{name}\t{}\n", pct(*f)));
    }
    out.push_str(&format!("macro\t{}\n", pct(d.macro_f1)));
    out
}
