//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any
//! failure. Tolerances and time budgets are fixed below.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cbdt_core::agreement::{cohen_kappa, fleiss_kappa, resolve_consensus, ConsensusStatus, Decision, RatingMatrix, Review};
use cbdt_core::corpus::{
    build_corpus, AnnotationRecord, CorpusConfig, DatasetMetadata, Evidence, FlagResources, RecordStatus,
};
use cbdt_core::evaluation::{auc, carbon_footprint, macro_f1_by_dimension, sequence_metrics, span_f1};
use cbdt_core::formats::{emit_conll, emit_jsonl, emit_sentences, parse_conll, parse_jsonl, record_to_sentence, BioTag, ConllSentence};
use cbdt_core::lexicon::{BiasDimension, DimensionLabel, Lexicon, RuleStore, DEFAULT_RULES_TSV};
use cbdt_core::model::{cbdt_detect, init_parameters, model_forward_full, Activation, ModelConfig};
use cbdt_core::text::{build_vocabulary, preprocess, tokenize_str, HashedBagOfWords, Vocabulary};
use cbdt_core::training::{
    analytic_gradient, examples_from_records, numeric_gradient, relative_errors, synthetic_corpus, train, TrainConfig,
    TrainingExample, ANCHOR_SENTENCE, ANCHOR_TERM,
};

const CARBON_TOL: f64 = 1e-9;
const GRAD_TOL: f64 = 1e-4;
const GRAD_EPS: f64 = 1e-4;
const FAULT_MIN: f64 = 0.5;
/// Entries whose numeric gradient is below this cannot reveal a doubled
/// analytic value and are reported separately.
const FAULT_FLOOR: f64 = 1e-8;
const ATTENTION_SUM_TOL: f64 = 1e-6;
const OVERFIT_ACCURACY: f64 = 0.95;
const OVERFIT_SPAN_F1: f64 = 0.90;
const ORACLE_TOL: f64 = 1e-12;
const RANDOM_CASES: usize = 100;
const ROUND_TRIP_RECORDS: usize = 1000;
const DETERMINISM_SENTENCES: usize = 1000;

type Check = Result<String, String>;
type Criterion = (u32, &'static str, Duration, fn() -> Check);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn close(name: &str, got: f64, want: f64, tol: f64) -> Result<(), String> {
    ensure((got - want).abs() <= tol, || format!("{name}: got {got}, want {want} (tol {tol:e})"))
}

// 1 ------------------------------------------------------------------------

fn carbon() -> Check {
    let est = carbon_footprint(300.0, 10.0, 4, 0.5).map_err(|e| e.to_string())?;
    close("energy_kwh", est.energy_kwh, 0.2, CARBON_TOL)?;
    close("emissions_kgco2e", est.emissions_kgco2e, 0.1, CARBON_TOL)?;
    Ok(format!(
        "{} kWh, {} kgCO2e within {CARBON_TOL:e}",
        est.energy_kwh, est.emissions_kgco2e
    ))
}

// 2 ------------------------------------------------------------------------

const LISTING: &str = "A O\ncertain O\ngroup O\nis O\nalways B-BIAS\nlazy I-BIAS\n. O\n\n";

fn random_record(rng: &mut ChaCha8Rng, n: usize) -> AnnotationRecord {
    // Distinct words keep every span's first occurrence its only one.
    let len = rng.random_range(1..=14);
    let mut words: Vec<String> = (0..len)
        .map(|i| {
            let stem: String = (0..rng.random_range(1..=6)).map(|_| rng.random_range(b'a'..=b'z') as char).collect();
            format!("{stem}{i}")
        })
        .collect();
    if rng.random_bool(0.3) {
        words.push(".".into());
    }
    let mut taken = vec![false; words.len()];
    let mut ranges = Vec::new();
    for _ in 0..rng.random_range(0..4) {
        let s = rng.random_range(0..words.len());
        let e = (s + rng.random_range(1..4)).min(words.len());
        if taken[s..e].iter().all(|t| !t) {
            taken[s..e].iter_mut().for_each(|t| *t = true);
            ranges.push((s, e));
        }
    }
    ranges.sort();
    let spans: Vec<String> = ranges.iter().map(|&(s, e)| words[s..e].join(" ")).collect();
    let dim = match rng.random_range(0..22) {
        20 => Some(DimensionLabel::Other("Ethnic Stereotyping".into())),
        21 => None,
        d => Some(DimensionLabel::Known(BiasDimension::ALL[d])),
    };
    let mut provenance: Vec<Evidence> = [Evidence::Lexicon, Evidence::Rule, Evidence::Manual]
        .into_iter()
        .filter(|_| rng.random_bool(0.4))
        .collect();
    provenance.shuffle(rng);
    AnnotationRecord {
        biased_text: words.join(" "),
        bias_label: !spans.is_empty(),
        identified_biased_spans: spans,
        bias_dimension: dim,
        record_id: format!("rec-{n:04}"),
        status: RecordStatus::ALL[rng.random_range(0..5)],
        provenance,
    }
}

fn formats() -> Check {
    let parsed = parse_conll(LISTING).map_err(|e| e.to_string())?;
    ensure(emit_sentences(&parsed) == LISTING, || "listing does not re-emit bit-exactly".into())?;
    ensure(parsed.len() == 1 && parsed[0].span_texts() == ["always lazy"], || "listing span lost".into())?;

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let records: Vec<AnnotationRecord> = (0..ROUND_TRIP_RECORDS).map(|n| random_record(&mut rng, n)).collect();
    let jsonl = emit_jsonl(&records);
    let back = parse_jsonl(&jsonl).map_err(|e| e.to_string())?;
    ensure(back == records, || "JSONL round trip changed a record".into())?;
    ensure(emit_jsonl(&back) == jsonl, || "JSONL re-emission differs".into())?;

    let vocab = Vocabulary::default();
    for r in &records {
        let tokens = tokenize_str(&r.biased_text, &vocab);
        let sentence = record_to_sentence(r, &tokens).map_err(|e| format!("{}: {e}", r.record_id))?;
        let text = emit_conll(r, &tokens).map_err(|e| e.to_string())?;
        let parsed = parse_conll(&text).map_err(|e| format!("{}: {e}", r.record_id))?;
        ensure(parsed.len() == 1 && parsed[0] == sentence, || format!("{}: CoNLL tokens or tags changed", r.record_id))?;
        ensure(parsed[0].span_texts() == r.identified_biased_spans, || {
            format!("{}: spans {:?} came back as {:?}", r.record_id, r.identified_biased_spans, parsed[0].span_texts())
        })?;
        ensure(emit_sentences(&parsed) == text, || format!("{}: CoNLL re-emission differs", r.record_id))?;
    }
    Ok(format!("listing bit-exact; {ROUND_TRIP_RECORDS} records through JSONL and CoNLL"))
}

// 3 ------------------------------------------------------------------------

fn gradient_setup() -> (cbdt_core::model::ModelParameters, TrainingExample) {
    let vocab = Vocabulary::from_tokens(["a", "b", "c", "d", "e", "f"].map(String::from).to_vec());
    let mut cfg = ModelConfig::new(vocab.len());
    cfg.d_model = 16;
    cfg.n_layers = 1;
    cfg.n_heads = 2;
    cfg.d_ff = 32;
    cfg.max_len = 7;
    cfg.activation = Activation::Tanh;
    cfg.seed = 0;
    let tokens = tokenize_str("a b c d e", &vocab);
    let ex = TrainingExample {
        tokens,
        y: true,
        tags: vec![BioTag::O, BioTag::B, BioTag::I, BioTag::O, BioTag::O],
        dimension: None,
    };
    (init_parameters(&cfg).unwrap(), ex)
}

fn gradients() -> Check {
    let (theta, ex) = gradient_setup();
    let a = analytic_gradient(&theta, &ex, 1.0).map_err(|e| e.to_string())?;
    let n = numeric_gradient(&theta, &ex, 1.0, GRAD_EPS).map_err(|e| e.to_string())?;
    let errs = relative_errors(&a, &n);
    let (worst, max_err) = errs
        .iter()
        .copied()
        .enumerate()
        .max_by(|x, y| x.1.total_cmp(&y.1))
        .unwrap_or((0, 0.0));
    ensure(max_err <= GRAD_TOL, || {
        format!("max relative error {max_err:.3e} at entry {worst} (analytic {}, numeric {})", a[worst], n[worst])
    })?;

    // Doubling entry i changes only that entry's error, so each fault is
    // detected exactly when its own error reaches the bar.
    let mut checked = 0;
    let mut undetectable = 0;
    for i in 0..a.len() {
        if n[i].abs() < FAULT_FLOOR {
            undetectable += 1;
            continue;
        }
        let mut faulty = a.clone();
        faulty[i] *= 2.0;
        let e = (faulty[i] - n[i]).abs() / n[i].abs().max(1e-8);
        ensure(e >= FAULT_MIN, || format!("fault at entry {i} gave error {e:.3e} only"))?;
        checked += 1;
    }
    let mut faulty = a.clone();
    faulty[worst] *= 2.0;
    let whole = relative_errors(&faulty, &n).into_iter().fold(0.0, f64::max);
    ensure(
        n[worst].abs() < FAULT_FLOOR || whole >= FAULT_MIN,
        || "whole-vector check missed a fault".into(),
    )?;
    Ok(format!(
        "{} parameters, max rel err {max_err:.2e} <= {GRAD_TOL:e} (eps {GRAD_EPS:e}); \
         2x fault caught on all {checked} entries with |numeric| >= {FAULT_FLOOR:e} ({undetectable} below)",
        a.len()
    ))
}

// 4 ------------------------------------------------------------------------

fn gating() -> Check {
    let vocab = Vocabulary::from_tokens((0..40).map(|i| format!("t{i}")).collect());
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut min_attention = f64::INFINITY;
    let mut worst_sum: f64 = 0.0;
    for case in 0..RANDOM_CASES {
        let mut cfg = ModelConfig::new(vocab.len());
        cfg.d_model = 16;
        cfg.n_heads = 4;
        cfg.d_ff = 32;
        cfg.n_layers = 1 + case % 2;
        cfg.max_len = 16;
        cfg.seed = case as u64;
        let mut theta = init_parameters(&cfg).unwrap();
        let len = rng.random_range(1..cfg.max_len);
        let text: Vec<String> = (0..len).map(|_| format!("t{}", rng.random_range(0..45))).collect();
        let tokens = tokenize_str(&text.join(" "), &vocab);

        theta.context_head.bias[0] = -60.0;
        let fwd = model_forward_full(&theta, &tokens, false).map_err(|e| e.to_string())?;
        ensure(fwd.context.context_score < cfg.bias_threshold, || format!("case {case}: gate did not close"))?;
        ensure(fwd.entity.e.iter().all(|&x| x == 0.0), || format!("case {case}: E not zero below threshold"))?;
        ensure(fwd.entity.attention.iter().all(|&x| x == 0.0), || format!("case {case}: A_e not zero below threshold"))?;
        let report = cbdt_detect(&theta, &tokens, cfg.bias_threshold).map_err(|e| e.to_string())?;
        ensure(report.spans.is_empty() && report.attention.iter().all(|&x| x == 0.0), || {
            format!("case {case}: detect produced spans or attention below threshold")
        })?;

        theta.context_head.bias[0] = 60.0;
        let report = cbdt_detect(&theta, &tokens, cfg.bias_threshold).map_err(|e| e.to_string())?;
        ensure(report.context_score > cfg.bias_threshold, || format!("case {case}: gate did not open"))?;
        ensure(report.attention.len() == tokens.len(), || format!("case {case}: A_e has wrong length"))?;
        let sum: f64 = report.attention.iter().sum();
        min_attention = report.attention.iter().copied().fold(min_attention, f64::min);
        worst_sum = worst_sum.max((sum - 1.0).abs());
        ensure(report.attention.iter().all(|&x| x >= 0.0), || format!("case {case}: negative attention"))?;
        close(&format!("case {case}: sum A_e"), sum, 1.0, ATTENTION_SUM_TOL)?;
    }
    Ok(format!(
        "{RANDOM_CASES} inputs each side; closed gate exact zeros; open gate min A_e {min_attention:.3e}, \
         max |sum-1| {worst_sum:.1e} <= {ATTENTION_SUM_TOL:e}"
    ))
}

// 5 ------------------------------------------------------------------------

fn overfit() -> Check {
    let records = synthetic_corpus(&Lexicon::default_lexicon(), 0).map_err(|e| e.to_string())?;
    let texts: Vec<_> = records.iter().map(|r| preprocess(&r.biased_text)).collect();
    let vocab = build_vocabulary(&texts, 1);
    let examples = examples_from_records(&records, &vocab).map_err(|e| e.to_string())?;
    let config = ModelConfig::new(vocab.len());
    let tc = TrainConfig {
        epochs: 200,
        ..TrainConfig::default()
    };
    let (theta, _) = train(&examples, &config, &tc).map_err(|e| e.to_string())?;

    let mut correct = 0;
    let (mut pred, mut gold) = (Vec::new(), Vec::new());
    for ex in &examples {
        let r = cbdt_detect(&theta, &ex.tokens, config.bias_threshold).map_err(|e| e.to_string())?;
        correct += usize::from(r.bias_label == ex.y);
        pred.push(ConllSentence::new(&ex.tokens.surfaces, &r.tags));
        gold.push(ConllSentence::new(&ex.tokens.surfaces, &ex.tags));
    }
    let accuracy = correct as f64 / examples.len() as f64;
    let f1 = span_f1(&pred, &gold).map_err(|e| e.to_string())?.span.f1;
    ensure(accuracy >= OVERFIT_ACCURACY, || format!("train accuracy {accuracy:.4} < {OVERFIT_ACCURACY}"))?;
    ensure(f1 >= OVERFIT_SPAN_F1, || format!("train span F1 {f1:.4} < {OVERFIT_SPAN_F1}"))?;

    let tokens = tokenize_str(ANCHOR_SENTENCE, &vocab);
    let r = cbdt_detect(&theta, &tokens, config.bias_threshold).map_err(|e| e.to_string())?;
    let spans: Vec<&str> = r.spans.iter().map(|&(s, e)| tokens.span_text(ANCHOR_SENTENCE, s, e)).collect();
    ensure(r.bias_label && spans == [ANCHOR_TERM], || format!("anchor detected as {} with spans {spans:?}", r.bias_label))?;
    Ok(format!(
        "{} sentences, accuracy {:.4}, span F1 {f1:.4}, anchor span {:?}",
        examples.len(),
        accuracy,
        spans[0]
    ))
}

// 6 ------------------------------------------------------------------------

fn oracle_f1(tp: f64, fp: f64, fn_: f64) -> (f64, f64, f64) {
    let p = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
    let r = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
    let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
    (p, r, f)
}

fn oracle_counts(pred: &[bool], gold: &[bool]) -> (f64, f64, f64, f64) {
    let mut c = (0.0, 0.0, 0.0, 0.0);
    for (&p, &g) in pred.iter().zip(gold) {
        match (p, g) {
            (true, true) => c.0 += 1.0,
            (true, false) => c.1 += 1.0,
            (false, true) => c.2 += 1.0,
            (false, false) => c.3 += 1.0,
        }
    }
    c
}

fn oracle_auc(scores: &[f64], gold: &[bool]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &gi) in gold.iter().enumerate() {
        for (j, &gj) in gold.iter().enumerate() {
            if gi && !gj {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

/// Exact-match spans from well-formed BIO tags, as `(start, end)`.
fn oracle_spans(tags: &[BioTag]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < tags.len() {
        if tags[i] == BioTag::B {
            let mut j = i + 1;
            while j < tags.len() && tags[j] == BioTag::I {
                j += 1;
            }
            out.push((i, j));
            i = j;
        } else {
            i += 1;
        }
    }
    out
}

fn random_tags(rng: &mut ChaCha8Rng, n: usize) -> Vec<BioTag> {
    let mut tags = Vec::with_capacity(n);
    for i in 0..n {
        let t = match rng.random_range(0..3) {
            0 => BioTag::O,
            1 => BioTag::B,
            _ if i > 0 && tags[i - 1] != BioTag::O => BioTag::I,
            _ => BioTag::O,
        };
        tags.push(t);
    }
    tags
}

fn metrics() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for case in 0..RANDOM_CASES {
        let n = rng.random_range(1..30);
        let pred: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
        let gold: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
        let m = sequence_metrics(&pred, &gold).map_err(|e| e.to_string())?;
        let (tp, fp, fn_, tn) = oracle_counts(&pred, &gold);
        let (p, r, f) = oracle_f1(tp, fp, fn_);
        close(&format!("seq {case} accuracy"), m.accuracy, (tp + tn) / n as f64, ORACLE_TOL)?;
        close(&format!("seq {case} precision"), m.precision, p, ORACLE_TOL)?;
        close(&format!("seq {case} recall"), m.recall, r, ORACLE_TOL)?;
        close(&format!("seq {case} f1"), m.f1, f, ORACLE_TOL)?;
    }
    for case in 0..RANDOM_CASES {
        let n = rng.random_range(2..25);
        let mut gold: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
        gold[0] = true;
        gold[1] = false;
        // Coarse scores force ties.
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..6) as f64 / 5.0).collect();
        let got = auc(&scores, &gold).map_err(|e| e.to_string())?;
        close(&format!("auc {case}"), got, oracle_auc(&scores, &gold), ORACLE_TOL)?;
    }
    for case in 0..RANDOM_CASES {
        let (mut pred, mut gold) = (Vec::new(), Vec::new());
        let (mut tp, mut fp, mut fn_) = (0.0, 0.0, 0.0);
        for _ in 0..rng.random_range(1..6) {
            let n = rng.random_range(1..12);
            let surfaces: Vec<String> = (0..n).map(|i| format!("w{i}")).collect();
            let pt = random_tags(&mut rng, n);
            let gt = random_tags(&mut rng, n);
            let ps = oracle_spans(&pt);
            let gs = oracle_spans(&gt);
            let hits = ps.iter().filter(|s| gs.contains(s)).count() as f64;
            tp += hits;
            fp += ps.len() as f64 - hits;
            fn_ += gs.len() as f64 - hits;
            pred.push(ConllSentence::new(&surfaces, &pt));
            gold.push(ConllSentence::new(&surfaces, &gt));
        }
        let rep = span_f1(&pred, &gold).map_err(|e| e.to_string())?;
        let (p, r, f) = oracle_f1(tp, fp, fn_);
        close(&format!("span {case} precision"), rep.span.precision, p, ORACLE_TOL)?;
        close(&format!("span {case} recall"), rep.span.recall, r, ORACLE_TOL)?;
        close(&format!("span {case} f1"), rep.span.f1, f, ORACLE_TOL)?;
    }
    for case in 0..RANDOM_CASES {
        let n = rng.random_range(1..40);
        let pred: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
        let gold: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
        let dims: Vec<Option<DimensionLabel>> = (0..n)
            .map(|_| match rng.random_range(0..5) {
                4 => None,
                d => Some(DimensionLabel::Known(BiasDimension::ALL[d])),
            })
            .collect();
        let got = macro_f1_by_dimension(&pred, &gold, &dims).map_err(|e| e.to_string())?;
        let mut groups: BTreeMap<String, (Vec<bool>, Vec<bool>)> = BTreeMap::new();
        for i in 0..n {
            if let Some(d) = &dims[i] {
                let g = groups.entry(d.to_string()).or_default();
                g.0.push(pred[i]);
                g.1.push(gold[i]);
            }
        }
        let f1s: Vec<f64> = groups
            .values()
            .map(|(p, g)| {
                let (tp, fp, fn_, _) = oracle_counts(p, g);
                oracle_f1(tp, fp, fn_).2
            })
            .collect();
        let want = if f1s.is_empty() { 0.0 } else { f1s.iter().sum::<f64>() / f1s.len() as f64 };
        close(&format!("macro {case}"), got.macro_f1, want, ORACLE_TOL)?;
    }

    // tp=2, fp=1, fn=1, tn=0.
    let m = sequence_metrics(&[true, true, true, false], &[true, true, false, true]).map_err(|e| e.to_string())?;
    for (name, v) in [("precision", m.precision), ("recall", m.recall), ("f1", m.f1)] {
        close(&format!("worked {name}"), v, 2.0 / 3.0, ORACLE_TOL)?;
    }
    let a = auc(&[0.8, 0.3, 0.5, 0.1], &[true, true, false, false]).map_err(|e| e.to_string())?;
    ensure(a == 0.75, || format!("worked AUC {a} != 0.75"))?;
    Ok(format!(
        "{RANDOM_CASES} cases each for sequence/auc/span/macro within {ORACLE_TOL:e}; P=R=F1=2/3, AUC=0.75"
    ))
}

// 7 ------------------------------------------------------------------------

fn oracle_cohen(a: &[u8], b: &[u8]) -> Option<f64> {
    let n = a.len() as f64;
    let po = a.iter().zip(b).filter(|(x, y)| x == y).count() as f64 / n;
    let mut ca: HashMap<u8, f64> = HashMap::new();
    let mut cb: HashMap<u8, f64> = HashMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *ca.entry(x).or_default() += 1.0;
        *cb.entry(y).or_default() += 1.0;
    }
    let pe: f64 = ca.iter().map(|(k, v)| v / n * cb.get(k).copied().unwrap_or(0.0) / n).sum();
    (pe < 1.0).then(|| (po - pe) / (1.0 - pe))
}

fn oracle_fleiss(counts: &[Vec<u32>]) -> Option<f64> {
    let items = counts.len() as f64;
    let r = counts[0].iter().sum::<u32>() as f64;
    let p_bar = counts
        .iter()
        .map(|row| (row.iter().map(|&c| (c * c) as f64).sum::<f64>() - r) / (r * (r - 1.0)))
        .sum::<f64>()
        / items;
    let pe: f64 = (0..counts[0].len())
        .map(|j| {
            let pj = counts.iter().map(|row| row[j] as f64).sum::<f64>() / (items * r);
            pj * pj
        })
        .sum();
    (pe < 1.0).then(|| (p_bar - pe) / (1.0 - pe))
}

fn kappas() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut cohen_cases = 0;
    while cohen_cases < RANDOM_CASES {
        let n = rng.random_range(2..40);
        let k = rng.random_range(2..5);
        let a: Vec<u8> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let b: Vec<u8> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let Some(want) = oracle_cohen(&a, &b) else { continue };
        let got = cohen_kappa(&a, &b).map_err(|e| e.to_string())?;
        close(&format!("cohen {cohen_cases}"), got, want, ORACLE_TOL)?;
        let perfect = cohen_kappa(&a, &a).map_err(|e| e.to_string())?;
        ensure(perfect == 1.0, || format!("cohen(a, a) = {perfect}"))?;
        cohen_cases += 1;
    }
    let mut fleiss_cases = 0;
    while fleiss_cases < RANDOM_CASES {
        let items = rng.random_range(1..20);
        let raters = rng.random_range(2..7u32);
        let k = rng.random_range(2..5);
        let counts: Vec<Vec<u32>> = (0..items)
            .map(|_| {
                let mut row = vec![0u32; k];
                for _ in 0..raters {
                    row[rng.random_range(0..k)] += 1;
                }
                row
            })
            .collect();
        let Some(want) = oracle_fleiss(&counts) else { continue };
        let got = fleiss_kappa(&RatingMatrix::new(counts).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
        close(&format!("fleiss {fleiss_cases}"), got, want, ORACLE_TOL)?;
        fleiss_cases += 1;
    }
    let unanimous = RatingMatrix::new(vec![vec![3, 0], vec![0, 3], vec![3, 0]]).unwrap();
    let f = fleiss_kappa(&unanimous).map_err(|e| e.to_string())?;
    ensure(f == 1.0, || format!("unanimous Fleiss {f}"))?;

    let half = cohen_kappa(&[1, 1, 1, 0], &[1, 1, 0, 0]).map_err(|e| e.to_string())?;
    ensure(half == 0.5, || format!("worked Cohen {half} != 0.5"))?;
    let neg = fleiss_kappa(&RatingMatrix::new(vec![vec![1, 1], vec![1, 1]]).unwrap()).map_err(|e| e.to_string())?;
    ensure(neg == -1.0, || format!("worked Fleiss {neg} != -1"))?;
    Ok(format!(
        "{RANDOM_CASES} Cohen and {RANDOM_CASES} Fleiss cases within {ORACLE_TOL:e}; perfect = 1.0; kappa 0.5 and -1.0 exact"
    ))
}

// 8 ------------------------------------------------------------------------

fn determinism() -> Check {
    let subjects = ["the team", "my neighbor", "a certain group", "women", "the old man", "our staff"];
    let middles = ["is always lazy", "are too emotional to lead", "walked to the park", "is bossy", "cooked dinner"];
    let tails = ["today", "again", "at work", ".", "every week"];
    let lines: Vec<String> = (0..DETERMINISM_SENTENCES)
        .map(|i| {
            format!(
                "{} {} {} {i}",
                subjects[i % subjects.len()],
                middles[(i / 6) % middles.len()],
                tails[(i / 30) % tails.len()]
            )
        })
        .collect();
    let lexicon = Lexicon::default_lexicon();
    let embedder = HashedBagOfWords::default();
    let rules = RuleStore::parse_tsv(DEFAULT_RULES_TSV, &embedder).map_err(|e| e.to_string())?;
    let res = FlagResources {
        lexicon: &lexicon,
        rules: &rules,
        embedder: &embedder,
        threshold: 0.85,
    };
    let md = DatasetMetadata::new("acceptance", "1.0.0", "CC-BY-4.0", "2024-01-01");
    let mut compared = 0;
    for auto_finalize in [false, true] {
        let config = CorpusConfig {
            seed: 8,
            auto_finalize,
            ..CorpusConfig::default()
        };
        let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
        for d in &dirs {
            let build = build_corpus(&lines, "input.txt", &res, &config, md.clone()).map_err(|e| e.to_string())?;
            build.write(d.path()).map_err(|e| e.to_string())?;
        }
        let mut names: Vec<_> = fs::read_dir(dirs[0].path()).unwrap().map(|e| e.unwrap().file_name()).collect();
        names.sort();
        ensure(names.len() >= 3, || format!("only {} files written", names.len()))?;
        for name in names {
            let a = fs::read(dirs[0].path().join(&name)).unwrap();
            let b = fs::read(dirs[1].path().join(&name)).map_err(|e| format!("{name:?}: {e}"))?;
            ensure(a == b, || format!("{name:?} differs between runs (auto_finalize {auto_finalize})"))?;
            compared += 1;
        }
    }
    Ok(format!("{DETERMINISM_SENTENCES} sentences, {compared} files byte-identical across two runs"))
}

// 9 ------------------------------------------------------------------------

fn consensus() -> Check {
    for pattern in 0u32..16 {
        let reviews: Vec<Review> = (0..4)
            .map(|i| Review {
                record_id: "r".into(),
                reviewer_id: format!("expert{i}"),
                decision: if pattern >> i & 1 == 1 { Decision::Accept } else { Decision::Reject },
                spans: vec!["always lazy".into()],
                dimension: None,
                note: String::new(),
                version: i as u64,
            })
            .collect();
        let yes = pattern.count_ones();
        let out = resolve_consensus(&reviews, 4)
            .map_err(|e| e.to_string())?
            .ok_or_else(|| format!("pattern {pattern:04b}: no outcome at quorum"))?;
        let (status, label) = match yes {
            3 | 4 => (ConsensusStatus::Finalized, Some(true)),
            0 | 1 => (ConsensusStatus::Finalized, Some(false)),
            _ => (ConsensusStatus::Disputed, None),
        };
        ensure(out.status == status && out.final_label == label, || {
            format!("pattern {pattern:04b}: got {:?}/{:?}, want {status:?}/{label:?}", out.status, out.final_label)
        })?;
        let short = resolve_consensus(&reviews[..3], 4).map_err(|e| e.to_string())?;
        ensure(short.is_none(), || format!("pattern {pattern:04b}: outcome before quorum"))?;
    }
    Ok("all 16 patterns: strict majority finalizes, 2-2 disputes".into())
}

fn main() -> ExitCode {
    let criteria: [Criterion; 9] = [
        (1, "carbon reproduction", Duration::from_secs(1), carbon),
        (2, "format fidelity", Duration::from_secs(10), formats),
        (3, "gradient correctness", Duration::from_secs(120), gradients),
        (4, "gating invariant", Duration::from_secs(30), gating),
        (5, "overfit sanity", Duration::from_secs(600), overfit),
        (6, "metric oracles", Duration::from_secs(30), metrics),
        (7, "kappa oracles", Duration::from_secs(10), kappas),
        (8, "pipeline determinism", Duration::from_secs(60), determinism),
        (9, "consensus semantics", Duration::from_secs(1), consensus),
    ];
    let mut failed = 0;
    for (id, name, budget, f) in criteria {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let took = start.elapsed();
        let result = match result {
            Ok(detail) if took > budget => Err(format!("{detail}; over time budget")),
            other => other,
        };
        let (tag, detail) = match &result {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        println!(
            "{tag} {id} {name}: {detail} [{:.2}s, budget {}s]",
            took.as_secs_f64(),
            budget.as_secs()
        );
        failed += usize::from(result.is_err());
    }
    println!("{} of 9 criteria passed", 9 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
