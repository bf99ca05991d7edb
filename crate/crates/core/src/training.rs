//! Joint training of both encoders with Adam, fine-tuning modes, gradient
//! checking, and the synthetic overfit corpus.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{record_id_for, AnnotationRecord, RecordStatus};
use crate::error::{Error, Result};
use crate::formats::{first_bio_violation, record_to_sentence, BioTag};
use crate::lexicon::{match_lexicon, DimensionLabel, Lexicon};
use crate::model::{
    accumulate_gradient, init_parameters, loss_and_gradient, model_forward_full, LossParts, Mode, ModelConfig,
    ModelParameters, ParamGroup, ParamInfo,
};
use crate::text::{preprocess, tokenize, tokenize_str, TokenSequence, Vocabulary};

pub use crate::model::compute_loss;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub tokens: TokenSequence,
    pub y: bool,
    pub tags: Vec<BioTag>,
    pub dimension: Option<DimensionLabel>,
}

impl TrainingExample {
    pub fn validate(&self) -> Result<()> {
        if self.tags.len() != self.tokens.len() {
            return Err(Error::LengthMismatch {
                left: self.tags.len(),
                right: self.tokens.len(),
            });
        }
        if let Some(i) = first_bio_violation(&self.tags) {
            return Err(Error::invalid(format!("I-BIAS at token {i} does not continue a span")));
        }
        Ok(())
    }

    /// Tokenizes the record's text against `vocab` and aligns its spans.
    pub fn from_record(record: &AnnotationRecord, vocab: &Vocabulary) -> Result<Self> {
        let tokens = tokenize_str(&record.biased_text, vocab);
        let sentence = record_to_sentence(record, &tokens)?;
        Ok(Self {
            tokens,
            y: record.bias_label,
            tags: sentence.tags(),
            dimension: record.bias_dimension.clone(),
        })
    }
}

pub fn examples_from_records(records: &[AnnotationRecord], vocab: &Vocabulary) -> Result<Vec<TrainingExample>> {
    records.iter().map(|r| TrainingExample::from_record(r, vocab)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FineTuneMode {
    Full,
    /// Epoch `e` (from 0) trains the top `e + 1` layers of each encoder;
    /// embeddings join once every layer is unfrozen.
    LayerWise,
    /// Only the heads and the fusion classifier train.
    FeatureExtraction,
}

impl fmt::Display for FineTuneMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FineTuneMode::Full => "full",
            FineTuneMode::LayerWise => "layer_wise",
            FineTuneMode::FeatureExtraction => "feature_extraction",
        })
    }
}

impl FromStr for FineTuneMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "full" => Ok(FineTuneMode::Full),
            "layer_wise" => Ok(FineTuneMode::LayerWise),
            "feature_extraction" => Ok(FineTuneMode::FeatureExtraction),
            _ => Err(Error::invalid(format!("unknown fine-tune mode {s:?}"))),
        }
    }
}

impl FineTuneMode {
    pub fn trains(self, group: ParamGroup, epoch: usize, n_layers: usize) -> bool {
        match (self, group) {
            (_, ParamGroup::Head) => true,
            (FineTuneMode::Full, _) => true,
            (FineTuneMode::FeatureExtraction, _) => false,
            (FineTuneMode::LayerWise, ParamGroup::Layer(_, i)) => i + epoch + 1 >= n_layers,
            (FineTuneMode::LayerWise, ParamGroup::Embedding(_)) => epoch >= n_layers,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub dropout_rate: f64,
    pub weight_decay: f64,
    pub entity_loss_weight: f64,
    pub fine_tune_mode: FineTuneMode,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            batch_size: 64,
            epochs: 20,
            dropout_rate: 0.5,
            weight_decay: 0.0001,
            entity_loss_weight: 1.0,
            fine_tune_mode: FineTuneMode::Full,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(format!("learning_rate {} must be positive", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::invalid(format!("dropout_rate {} outside [0, 1)", self.dropout_rate)));
        }
        if !(self.weight_decay >= 0.0 && self.entity_loss_weight >= 0.0) {
            return Err(Error::invalid("weight_decay and entity_loss_weight must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub total_loss: f64,
    pub context_loss: f64,
    pub entity_loss: f64,
    /// Sentence accuracy of the training-mode predictions seen this epoch.
    pub accuracy: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochLog>,
}

impl TrainingLog {
    pub const HEADER: &'static str = "epoch\ttotal_loss\tcontext_loss\tentity_loss\taccuracy\tseconds";

    pub fn to_tsv(&self) -> String {
        let mut out = format!("{}\n", Self::HEADER);
        for e in &self.epochs {
            out.push_str(&format!(
                "{}\t{:.6}\t{:.6}\t{:.6}\t{:.4}\t{:.3}\n",
                e.epoch, e.total_loss, e.context_loss, e.entity_loss, e.accuracy, e.seconds
            ));
        }
        out
    }
}

struct Adam {
    m: ModelParameters,
    v: ModelParameters,
    steps: Vec<i32>,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Adam {
    fn new(theta: &ModelParameters) -> Self {
        let n = theta.tensors().len();
        Self {
            m: theta.zeros_like(),
            v: theta.zeros_like(),
            steps: vec![0; n],
        }
    }

    fn step(
        &mut self,
        theta: &mut ModelParameters,
        grad: &ModelParameters,
        cfg: &TrainConfig,
        trainable: impl Fn(&ParamInfo) -> bool,
    ) {
        let grads = grad.tensors();
        let tensors = theta.tensors_mut().into_iter().zip(self.m.tensors_mut()).zip(self.v.tensors_mut());
        for (i, (((info, w), (_, m)), (_, v))) in tensors.enumerate() {
            if !trainable(&info) {
                continue;
            }
            self.steps[i] += 1;
            let t = self.steps[i];
            let c1 = 1.0 - BETA1.powi(t);
            let c2 = 1.0 - BETA2.powi(t);
            let decay = if info.decay { 1.0 - cfg.learning_rate * cfg.weight_decay } else { 1.0 };
            let g = grads[i].1;
            for j in 0..w.len() {
                m[j] = BETA1 * m[j] + (1.0 - BETA1) * g[j];
                v[j] = BETA2 * v[j] + (1.0 - BETA2) * g[j] * g[j];
                let update = (m[j] / c1) / ((v[j] / c2).sqrt() + ADAM_EPS);
                w[j] = w[j] * decay - cfg.learning_rate * update;
            }
        }
    }
}

/// Initializes from `model_config` and trains.
pub fn train(
    dataset: &[TrainingExample],
    model_config: &ModelConfig,
    train_config: &TrainConfig,
) -> Result<(ModelParameters, TrainingLog)> {
    train_from(init_parameters(model_config)?, dataset, train_config)
}

/// Trains starting from existing weights. The entity branch is teacher-gated:
/// it runs for every example labelled biased and whenever the context gate
/// opens on its own.
pub fn train_from(
    mut theta: ModelParameters,
    dataset: &[TrainingExample],
    cfg: &TrainConfig,
) -> Result<(ModelParameters, TrainingLog)> {
    cfg.validate()?;
    theta.config.validate()?;
    if dataset.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    for (i, ex) in dataset.iter().enumerate() {
        ex.validate().map_err(|e| Error::invalid(format!("example {i}: {e}")))?;
    }
    let n_layers = theta.config.n_layers;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(&theta);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut log = TrainingLog::default();
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let mut sums = LossParts {
            total: 0.0,
            context: 0.0,
            entity: 0.0,
        };
        let mut correct = 0;
        for (batch_no, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut grad = theta.zeros_like();
            for &i in batch {
                let ex = &dataset[i];
                let mut mode = Mode::Train {
                    rng: &mut rng,
                    rate: cfg.dropout_rate,
                };
                let (fwd, loss) = accumulate_gradient(
                    &theta,
                    &ex.tokens,
                    ex.y,
                    &ex.tags,
                    cfg.entity_loss_weight,
                    ex.y,
                    &mut mode,
                    &mut grad,
                )?;
                if !loss.total.is_finite() {
                    return Err(Error::NonFiniteLoss { epoch, batch: batch_no });
                }
                sums.total += loss.total;
                sums.context += loss.context;
                sums.entity += loss.entity;
                if (fwd.bias_score > theta.config.bias_threshold) == ex.y {
                    correct += 1;
                }
            }
            let scale = 1.0 / batch.len() as f64;
            for (_, g) in grad.tensors_mut() {
                g.iter_mut().for_each(|x| *x *= scale);
            }
            let mode = cfg.fine_tune_mode;
            adam.step(&mut theta, &grad, cfg, |info| mode.trains(info.group, epoch, n_layers));
            if !theta.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: batch_no });
            }
        }
        let n = dataset.len() as f64;
        log.epochs.push(EpochLog {
            epoch: epoch + 1,
            total_loss: sums.total / n,
            context_loss: sums.context / n,
            entity_loss: sums.entity / n,
            accuracy: correct as f64 / n,
            seconds: started.elapsed().as_secs_f64(),
        });
    }
    Ok((theta, log))
}

/// Loss with dropout off and the entity branch forced open.
pub fn example_loss(theta: &ModelParameters, example: &TrainingExample, lambda: f64) -> Result<f64> {
    let fwd = model_forward_full(theta, &example.tokens, true)?;
    Ok(compute_loss(&fwd, example.y, &example.tags, lambda)?.total)
}

pub fn analytic_gradient(theta: &ModelParameters, example: &TrainingExample, lambda: f64) -> Result<Vec<f64>> {
    let (_, _, grad) = loss_and_gradient(theta, &example.tokens, example.y, &example.tags, lambda, true, &mut Mode::Eval)?;
    Ok(grad.flatten())
}

/// Central differences `(L(θ+ε) − L(θ−ε)) / 2ε` for every parameter.
pub fn numeric_gradient(theta: &ModelParameters, example: &TrainingExample, lambda: f64, eps: f64) -> Result<Vec<f64>> {
    let mut probe = theta.clone();
    let sizes: Vec<usize> = theta.tensors().iter().map(|(_, s)| s.len()).collect();
    let mut out = Vec::with_capacity(sizes.iter().sum());
    for (t, &len) in sizes.iter().enumerate() {
        for j in 0..len {
            let orig = theta.tensors()[t].1[j];
            probe.tensors_mut()[t].1[j] = orig + eps;
            let up = example_loss(&probe, example, lambda)?;
            probe.tensors_mut()[t].1[j] = orig - eps;
            let down = example_loss(&probe, example, lambda)?;
            probe.tensors_mut()[t].1[j] = orig;
            out.push((up - down) / (2.0 * eps));
        }
    }
    Ok(out)
}

/// `|a − n| / max(|n|, 1e-8)` per entry.
pub fn relative_errors(analytic: &[f64], numeric: &[f64]) -> Vec<f64> {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / n.abs().max(1e-8))
        .collect()
}

pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    relative_errors(analytic, numeric).into_iter().fold(0.0, f64::max)
}

/// Maximum relative error between the analytic gradient of the total loss
/// (λ = 1) and central differences with step `eps`.
pub fn gradient_check(theta: &ModelParameters, example: &TrainingExample, eps: f64) -> Result<f64> {
    if !(1e-6..=1e-3).contains(&eps) {
        return Err(Error::invalid(format!("eps {eps} outside [1e-6, 1e-3]")));
    }
    let a = analytic_gradient(theta, example, 1.0)?;
    let n = numeric_gradient(theta, example, 1.0, eps)?;
    Ok(max_relative_error(&a, &n))
}

const BIASED_TEMPLATES: [&str; 6] = [
    "a certain group is {} .",
    "people from that town are {} .",
    "everyone knows they are {} .",
    "my neighbor called them {} .",
    "the report described the workers as {} .",
    "those students seem {} to me .",
];

const NEUTRAL_SUBJECTS: [&str; 8] = [
    "the committee",
    "our team",
    "the library",
    "a local bakery",
    "the city council",
    "my cousin",
    "the museum",
    "the weather service",
];
const NEUTRAL_VERBS: [&str; 6] = ["opened", "announced", "scheduled", "reviewed", "published", "shared"];
const NEUTRAL_OBJECTS: [&str; 6] = [
    "a new schedule",
    "the annual report",
    "its summer hours",
    "a community event",
    "the updated map",
    "a short survey",
];

/// Sentence used as the fixed first biased example of the synthetic corpus.
pub const ANCHOR_SENTENCE: &str = "a certain group is always lazy .";
pub const ANCHOR_TERM: &str = "always lazy";

/// Thirty-two finalized records: sixteen sentences each carrying exactly
/// one lexicon term (the anchor sentence first when the lexicon has its
/// term) and sixteen sentences with none.
pub fn synthetic_corpus(lexicon: &Lexicon, seed: u64) -> Result<Vec<AnnotationRecord>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab = Vocabulary::default();
    let mut records = Vec::with_capacity(32);
    fn push(text: String, span: Option<(&str, DimensionLabel)>, records: &mut Vec<AnnotationRecord>) {
        let clean = preprocess(&text).with_source(format!("synthetic:{}", records.len() + 1));
        let (spans, dim) = match span {
            Some((s, d)) => (vec![s.to_string()], Some(d)),
            None => (Vec::new(), None),
        };
        records.push(AnnotationRecord {
            biased_text: clean.as_str().to_string(),
            bias_label: !spans.is_empty(),
            identified_biased_spans: spans,
            bias_dimension: dim,
            record_id: record_id_for(&clean),
            status: RecordStatus::Finalized,
            provenance: Vec::new(),
        });
    }

    let single_hit = |text: &str, term: &str| {
        let hits = match_lexicon(&tokenize(&preprocess(text), &vocab), lexicon);
        hits.len() == 1 && hits[0].matched_term == term
    };
    let mut entries: Vec<_> = lexicon.entries().iter().collect();
    if let Some(anchor) = entries.iter().position(|e| e.term == ANCHOR_TERM) {
        let e = entries.remove(anchor);
        push(ANCHOR_SENTENCE.to_string(), Some((ANCHOR_TERM, e.dimension.into())), &mut records);
    }
    entries.shuffle(&mut rng);
    for e in entries {
        if records.len() == 16 {
            break;
        }
        let template = BIASED_TEMPLATES.choose(&mut rng).expect("templates");
        let text = template.replace("{}", &e.term);
        if single_hit(&text, &e.term) {
            push(text, Some((e.term.as_str(), e.dimension.into())), &mut records);
        }
    }
    if records.len() < 16 {
        return Err(Error::invalid("lexicon too small for the synthetic corpus"));
    }
    let mut combos = Vec::new();
    for s in NEUTRAL_SUBJECTS {
        for v in NEUTRAL_VERBS {
            for o in NEUTRAL_OBJECTS {
                combos.push(format!("{s} {v} {o} ."));
            }
        }
    }
    combos.shuffle(&mut rng);
    for text in combos {
        if records.len() == 32 {
            break;
        }
        if match_lexicon(&tokenize(&preprocess(&text), &vocab), lexicon).is_empty() {
            push(text, None, &mut records);
        }
    }
    if records.len() < 32 {
        return Err(Error::invalid("could not build sixteen neutral sentences"));
    }
    Ok(records)
}
