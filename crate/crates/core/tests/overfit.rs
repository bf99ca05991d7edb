use cbdt_core::evaluation::span_f1;
use cbdt_core::formats::ConllSentence;
use cbdt_core::lexicon::Lexicon;
use cbdt_core::model::{cbdt_detect, ModelConfig};
use cbdt_core::text::{build_vocabulary, preprocess, tokenize_str};
use cbdt_core::training::{examples_from_records, synthetic_corpus, train, TrainConfig, ANCHOR_SENTENCE};

#[test]
fn synthetic_corpus_is_learned() {
    let records = synthetic_corpus(&Lexicon::default_lexicon(), 0).unwrap();
    let texts: Vec<_> = records.iter().map(|r| preprocess(&r.biased_text)).collect();
    let vocab = build_vocabulary(&texts, 1);
    let examples = examples_from_records(&records, &vocab).unwrap();
    let config = ModelConfig::new(vocab.len());
    let tc = TrainConfig {
        epochs: 200,
        ..TrainConfig::default()
    };
    let (theta, log) = train(&examples, &config, &tc).unwrap();
    assert_eq!(log.epochs.len(), 200);

    let window = &log.epochs[150..];
    let start = window[0].total_loss;
    assert!(window.iter().all(|e| e.total_loss <= 1.05 * start));
    assert!(window.last().unwrap().total_loss <= start);

    let mut correct = 0;
    let (mut pred, mut gold) = (Vec::new(), Vec::new());
    for ex in &examples {
        let r = cbdt_detect(&theta, &ex.tokens, config.bias_threshold).unwrap();
        correct += usize::from(r.bias_label == ex.y);
        pred.push(ConllSentence::new(&ex.tokens.surfaces, &r.tags));
        gold.push(ConllSentence::new(&ex.tokens.surfaces, &ex.tags));
    }
    assert!(correct as f64 / examples.len() as f64 >= 0.95, "{correct}/32");
    let f1 = span_f1(&pred, &gold).unwrap().span.f1;
    assert!(f1 >= 0.9, "span F1 {f1}");

    let tokens = tokenize_str(ANCHOR_SENTENCE, &vocab);
    let r = cbdt_detect(&theta, &tokens, config.bias_threshold).unwrap();
    assert!(r.bias_label);
    let spans: Vec<String> = r.spans.iter().map(|&(s, e)| tokens.surfaces[s..e].join(" ")).collect();
    assert_eq!(spans, ["always lazy"]);
}
