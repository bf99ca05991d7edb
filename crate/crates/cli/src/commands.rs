use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use cbdt_core::corpus::{
    build_corpus, build_from_records, AnnotationRecord, CorpusConfig, DatasetMetadata, FlagResources, Manifest,
    SplitRatios, Splits, JSONL_FILE, MANIFEST_FILE,
};
use cbdt_core::evaluation::{
    auc, carbon_footprint, dimension_table, macro_f1_by_dimension, metrics_table, sequence_metrics, span_f1,
};
use cbdt_core::formats::{parse_jsonl, record_to_sentence, BioTag, ConllSentence};
use cbdt_core::lexicon::{Lexicon, RuleStore, DEFAULT_RULES_TSV};
use cbdt_core::model::{cbdt_detect, save_checkpoint, Checkpoint, ModelConfig};
use cbdt_core::review::DEFAULT_QUORUM;
use cbdt_core::text::{build_vocabulary, preprocess, tokenize, tokenize_str, HashedBagOfWords};
use cbdt_core::training::{examples_from_records, synthetic_corpus, train, TrainConfig};
use serde_json::json;

use crate::config::Settings;
use crate::{user_error, BuildCorpusArgs, CarbonArgs, Cli, Command, DetectArgs, EvaluateArgs, ServeArgs, TrainArgs};

pub const CHECKPOINT_NAME: &str = "model.ckpt";
pub const CORPUS_DIR: &str = "corpus";
pub const DEFAULT_ADDR: &str = "127.0.0.1:8080";

pub fn dispatch(cli: Cli, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    let settings = Settings::load(cli.config.as_deref()).map_err(|e| user_error(format!("{e:#}")))?;
    match cli.command {
        Command::BuildCorpus(a) => build(&settings, a, out),
        Command::Train(a) => train_cmd(&settings, a, out),
        Command::Evaluate(a) => evaluate(&settings, a, out),
        Command::Detect(a) => detect(&settings, a, out),
        Command::ServeReview(a) => serve(&settings, a, out, err),
        Command::Carbon(a) => carbon(a, out),
    }
}

fn read_input(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| user_error(format!("cannot read {}: {e}", path.display())))
}

fn load_lexicon(settings: &Settings, flag: Option<PathBuf>) -> Result<Lexicon> {
    match settings.pick_opt(flag, "lexicon")? {
        Some(p) => Lexicon::parse_tsv(&read_input(&p)?).with_context(|| format!("in lexicon {}", p.display())),
        None => Ok(Lexicon::default_lexicon()),
    }
}

fn load_rules(settings: &Settings, flag: Option<PathBuf>, embedder: &HashedBagOfWords) -> Result<RuleStore> {
    let text = match settings.pick_opt(flag, "rules")? {
        Some(p) => read_input(&p)?,
        None => DEFAULT_RULES_TSV.to_string(),
    };
    Ok(RuleStore::parse_tsv(&text, embedder)?)
}

/// Records from a corpus directory (with its manifest's splits, if any)
/// or from a JSONL file.
fn load_records(path: &Path) -> Result<(Vec<AnnotationRecord>, Option<Splits>)> {
    if path.is_dir() {
        let records = parse_jsonl(&read_input(&path.join(JSONL_FILE))?)?;
        let manifest_path = path.join(MANIFEST_FILE);
        let splits = if manifest_path.is_file() {
            let m: Manifest = serde_json::from_str(&read_input(&manifest_path)?)
                .map_err(|e| user_error(format!("bad manifest {}: {e}", manifest_path.display())))?;
            m.splits
        } else {
            None
        };
        Ok((records, splits))
    } else {
        Ok((parse_jsonl(&read_input(path)?)?, None))
    }
}

/// Settled records of the requested split. Without a request the default
/// split is used when the corpus has splits, else every record.
fn select(
    records: Vec<AnnotationRecord>,
    splits: Option<&Splits>,
    requested: Option<&str>,
    default: &str,
) -> Result<Vec<AnnotationRecord>> {
    let name = requested.unwrap_or(if splits.is_some() { default } else { "all" });
    let settled = records.into_iter().filter(|r| r.status.is_settled());
    let chosen: Vec<AnnotationRecord> = if name == "all" {
        settled.collect()
    } else {
        let splits = splits.ok_or_else(|| user_error(format!("split {name:?} requested but the corpus has no splits")))?;
        let ids = splits
            .get(name)
            .ok_or_else(|| user_error(format!("unknown split {name:?}; use train, dev, test or all")))?;
        let ids: std::collections::HashSet<&str> = ids.iter().map(String::as_str).collect();
        settled.filter(|r| ids.contains(r.record_id.as_str())).collect()
    };
    if chosen.is_empty() {
        return Err(user_error(format!("no finalized or clean records in split {name:?}")));
    }
    Ok(chosen)
}

fn build(settings: &Settings, a: BuildCorpusArgs, out: &mut dyn Write) -> Result<()> {
    let dir = settings.path(a.out, "out", CORPUS_DIR)?;
    let text = read_input(&a.input)?;
    if text.trim().is_empty() {
        return Err(user_error(format!("input file {} is empty", a.input.display())));
    }
    let defaults = SplitRatios::default();
    let config = CorpusConfig {
        threshold: settings.pick(a.threshold, "threshold", cbdt_core::lexicon::DEFAULT_RULE_THRESHOLD)?,
        seed: settings.pick(a.seed, "seed", 0)?,
        ratios: SplitRatios {
            train: settings.pick(a.train_ratio, "train-ratio", defaults.train)?,
            dev: settings.pick(a.dev_ratio, "dev-ratio", defaults.dev)?,
            test: settings.pick(a.test_ratio, "test-ratio", defaults.test)?,
        },
        auto_finalize: a.auto_finalize || settings.pick(None, "auto-finalize", false)?,
    };
    let today = chrono::Local::now().date_naive().to_string();
    let metadata = DatasetMetadata::new(
        &settings.pick(a.identifier, "identifier", "cbdt-corpus".to_string())?,
        &settings.pick(a.dataset_version, "dataset-version", "1.0.0".to_string())?,
        &settings.pick(a.license, "license", "CC-BY-4.0".to_string())?,
        &settings.pick(a.creation_date, "creation-date", today)?,
    );

    let build = if a.reviewed {
        build_from_records(parse_jsonl(&text)?, &config, metadata)?
    } else {
        let embedder = HashedBagOfWords::default();
        let lexicon = load_lexicon(settings, a.lexicon)?;
        let rules = load_rules(settings, a.rules, &embedder)?;
        let source = match a.source {
            Some(s) => s,
            None => a
                .input
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| "input".into()),
        };
        let lines: Vec<String> = text.lines().map(String::from).collect();
        let res = FlagResources {
            lexicon: &lexicon,
            rules: &rules,
            embedder: &embedder,
            threshold: config.threshold,
        };
        build_corpus(&lines, &source, &res, &config, metadata)?
    };
    let written = build.write(&dir)?;
    let m = build.manifest();
    writeln!(out, "stage: {}", m.stage)?;
    writeln!(
        out,
        "records: {} (biased {}, pending review {}, skipped {})",
        m.counts.records, m.counts.biased, m.counts.pending_review, m.counts.skipped_missing
    )?;
    if m.splits.is_some() {
        writeln!(out, "splits: train {} dev {} test {}", m.counts.train, m.counts.dev, m.counts.test)?;
    }
    for p in written {
        writeln!(out, "wrote {}", p.display())?;
    }
    Ok(())
}

fn train_cmd(settings: &Settings, a: TrainArgs, out: &mut dyn Write) -> Result<()> {
    let ck_path = settings.path(a.out, "checkpoint", CHECKPOINT_NAME)?;
    let log_path = a.log.unwrap_or_else(|| {
        let mut p = ck_path.clone().into_os_string();
        p.push(".log.tsv");
        PathBuf::from(p)
    });
    let seed = settings.pick(a.seed, "seed", 0)?;
    let records = if a.synthetic {
        synthetic_corpus(&load_lexicon(settings, None)?, seed)?
    } else {
        let data = a.data.as_deref().expect("clap requires --data without --synthetic");
        let (records, splits) = load_records(data)?;
        select(records, splits.as_ref(), a.split.as_deref(), "train")?
    };

    let texts: Vec<_> = records.iter().map(|r| preprocess(&r.biased_text)).collect();
    let vocab = build_vocabulary(&texts, settings.pick(a.min_count, "min-count", 1)?);
    let dataset = examples_from_records(&records, &vocab)?;
    let longest = dataset.iter().map(|e| e.tokens.len()).max().unwrap_or(0);

    let mut mc = ModelConfig::new(vocab.len());
    mc.d_model = settings.pick(a.d_model, "d-model", mc.d_model)?;
    mc.n_layers = settings.pick(a.layers, "layers", mc.n_layers)?;
    mc.n_heads = settings.pick(a.heads, "heads", mc.n_heads)?;
    mc.d_ff = settings.pick(a.d_ff, "d-ff", mc.d_ff)?;
    mc.max_len = settings.pick(a.max_len, "max-len", mc.max_len.max(longest + 1))?;
    if let Some(act) = settings.pick_opt(a.activation, "activation")? {
        mc.activation = act.parse()?;
    }
    mc.bias_threshold = settings.pick(a.threshold, "bias-threshold", mc.bias_threshold)?;
    mc.seed = seed;

    let defaults = TrainConfig::default();
    let mut tc = TrainConfig {
        learning_rate: settings.pick(a.learning_rate, "learning-rate", defaults.learning_rate)?,
        batch_size: settings.pick(a.batch_size, "batch-size", defaults.batch_size)?,
        epochs: settings.pick(a.epochs, "epochs", defaults.epochs)?,
        dropout_rate: settings.pick(a.dropout, "dropout", defaults.dropout_rate)?,
        weight_decay: settings.pick(a.weight_decay, "weight-decay", defaults.weight_decay)?,
        entity_loss_weight: settings.pick(a.lambda, "lambda", defaults.entity_loss_weight)?,
        fine_tune_mode: defaults.fine_tune_mode,
        seed,
    };
    if let Some(mode) = settings.pick_opt(a.fine_tune, "fine-tune")? {
        tc.fine_tune_mode = mode.parse()?;
    }
    mc.dropout_rate = tc.dropout_rate;

    writeln!(
        out,
        "training on {} examples, vocabulary {}, {} epochs",
        dataset.len(),
        vocab.len(),
        tc.epochs
    )?;
    let (theta, log) = train(&dataset, &mc, &tc)?;
    if !a.quiet {
        for e in &log.epochs {
            writeln!(
                out,
                "epoch {:>4}  loss {:.6}  context {:.6}  entity {:.6}  accuracy {:.4}",
                e.epoch, e.total_loss, e.context_loss, e.entity_loss, e.accuracy
            )?;
        }
    }
    for p in [&ck_path, &log_path] {
        if let Some(parent) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(parent)?;
        }
    }
    save_checkpoint(&ck_path, &Checkpoint::new(theta, vocab)?)?;
    fs::write(&log_path, log.to_tsv())?;
    writeln!(out, "wrote {}", ck_path.display())?;
    writeln!(out, "wrote {}", log_path.display())?;
    Ok(())
}

fn load_ck(settings: &Settings, flag: Option<PathBuf>) -> Result<Checkpoint> {
    let path = settings.path(flag, "checkpoint", CHECKPOINT_NAME)?;
    let text = read_input(&path)?;
    Checkpoint::from_json(&text).with_context(|| format!("loading {}", path.display()))
}

fn evaluate(settings: &Settings, a: EvaluateArgs, out: &mut dyn Write) -> Result<()> {
    let ck = load_ck(settings, a.checkpoint)?;
    let tau = settings.pick(a.threshold, "bias-threshold", ck.params.config.bias_threshold)?;
    let (records, splits) = load_records(&a.data)?;
    let records = select(records, splits.as_ref(), a.split.as_deref(), "test")?;

    let mut pred = Vec::new();
    let mut gold = Vec::new();
    let mut scores = Vec::new();
    let mut dims = Vec::new();
    let mut pred_sent = Vec::new();
    let mut gold_sent = Vec::new();
    for r in &records {
        let tokens = tokenize_str(&r.biased_text, &ck.vocabulary);
        let report = cbdt_detect(&ck.params, &tokens, tau).with_context(|| format!("record {}", r.record_id))?;
        gold_sent.push(record_to_sentence(r, &tokens)?);
        pred_sent.push(ConllSentence::new(&tokens.surfaces, &report.tags));
        pred.push(report.bias_label);
        scores.push(report.bias_score);
        gold.push(r.bias_label);
        dims.push(r.bias_dimension.clone());
    }
    let seq = sequence_metrics(&pred, &gold)?;
    let area = auc(&scores, &gold).ok();
    let spans = span_f1(&pred_sent, &gold_sent)?;
    let by_dim = macro_f1_by_dimension(&pred, &gold, &dims)?;

    if a.json {
        let v = json!({
            "records": records.len(),
            "threshold": tau,
            "sentence": seq,
            "auc": area,
            "spans": spans,
            "dimensions": by_dim,
        });
        writeln!(out, "{}", serde_json::to_string_pretty(&v)?)?;
        return Ok(());
    }
    writeln!(out, "records: {}  threshold: {tau}", records.len())?;
    writeln!(out)?;
    write!(out, "{}", metrics_table(&[("cbdt", &seq)]))?;
    match area {
        Some(x) => writeln!(out, "auc\t{x:.4}")?,
        None => writeln!(out, "auc\tn/a (needs both classes)")?,
    }
    writeln!(out)?;
    write!(out, "{}", metrics_table(&[("spans", &spans.span)]))?;
    writeln!(out)?;
    writeln!(out, "tag\tf1")?;
    for t in BioTag::ALL {
        writeln!(out, "{t}\t{:.2}", spans.token_f1[t.index()] * 100.0)?;
    }
    writeln!(out, "macro\t{:.2}", spans.token_macro_f1 * 100.0)?;
    writeln!(out)?;
    write!(out, "{}", dimension_table(&by_dim))?;
    Ok(())
}

fn detect(settings: &Settings, a: DetectArgs, out: &mut dyn Write) -> Result<()> {
    let ck = load_ck(settings, a.checkpoint)?;
    let tau = settings.pick(a.threshold, "bias-threshold", ck.params.config.bias_threshold)?;
    let clean = preprocess(&a.text);
    if clean.is_missing() {
        return Err(user_error("--text has no content"));
    }
    let tokens = tokenize(&clean, &ck.vocabulary);
    let report = cbdt_detect(&ck.params, &tokens, tau)?;
    let span_texts: Vec<&str> = report
        .spans
        .iter()
        .map(|&(s, e)| tokens.span_text(clean.as_str(), s, e))
        .collect();
    if a.json {
        let v = json!({
            "text": clean.as_str(),
            "tokens": tokens.surfaces,
            "span_texts": span_texts,
            "report": report,
        });
        writeln!(out, "{}", serde_json::to_string_pretty(&v)?)?;
        return Ok(());
    }
    writeln!(out, "label: {}", if report.bias_label { "biased" } else { "not biased" })?;
    writeln!(out, "score: {:.4}", report.bias_score)?;
    writeln!(out, "context_score: {:.4}", report.context_score)?;
    if span_texts.is_empty() {
        writeln!(out, "spans: none")?;
    } else {
        let shown: Vec<String> = span_texts
            .iter()
            .zip(&report.spans)
            .map(|(t, (s, e))| format!("{t:?} [{s}, {e})"))
            .collect();
        writeln!(out, "spans: {}", shown.join(", "))?;
    }
    writeln!(out, "token\ttag\tattention")?;
    for (i, surface) in tokens.surfaces.iter().enumerate() {
        writeln!(out, "{surface}\t{}\t{:.4}", report.tags[i], report.attention[i])?;
    }
    Ok(())
}

fn serve(settings: &Settings, a: ServeArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    let dir = settings.path(a.corpus, "corpus", CORPUS_DIR)?;
    if !dir.join(JSONL_FILE).is_file() {
        return Err(user_error(format!("{} has no {JSONL_FILE}; run build-corpus first", dir.display())));
    }
    let addr = settings.pick(a.addr, "addr", DEFAULT_ADDR.to_string())?;
    let quorum = settings.pick(a.quorum, "quorum", DEFAULT_QUORUM)?;
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(crate::server::serve(&dir, &addr, quorum, out, err))
}

/// Six decimals with trailing zeros removed.
fn trim(x: f64) -> String {
    let s = format!("{x:.6}");
    let s = s.trim_end_matches('0');
    s.strip_suffix('.').unwrap_or(s).to_string()
}

fn carbon(a: CarbonArgs, out: &mut dyn Write) -> Result<()> {
    let est = carbon_footprint(a.watts, a.minutes, a.epochs, a.intensity)?;
    if a.json {
        writeln!(out, "{}", serde_json::to_string(&est)?)?;
    } else {
        writeln!(out, "energy: {} kWh", trim(est.energy_kwh))?;
        writeln!(out, "emissions: {} kgCO2e", trim(est.emissions_kgco2e))?;
    }
    Ok(())
}
