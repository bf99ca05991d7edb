//! The dual-encoder detector: a context encoder that scores the whole
//! sentence, an entity encoder that tags biased tokens, and a fusion
//! classifier over both pooled encodings.

mod checkpoint;
mod config;
mod encoder;
mod params;

use ndarray::{s, Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::formats::{decode_spans, repair_bio, BioTag};
use crate::text::{TokenSequence, CLS_ID, UNK_ID};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use config::{sigmoid, Activation, ModelConfig};
pub use encoder::Mode;
pub use params::{
    init_parameters, Branch, Encoder, EncoderLayer, LayerNorm, Linear, ModelParameters, ParamGroup, ParamInfo,
};

use encoder::{encoder_backward, encoder_forward, softmax_rows, EncoderPass};

/// Probabilities fed to cross-entropy are clamped to `[BCE_CLAMP, 1 - BCE_CLAMP]`.
pub const BCE_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq)]
pub struct ContextEncoding {
    pub c: Array1<f64>,
    pub context_score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EntityEncoding {
    pub e: Array1<f64>,
    /// `n × 3` logits over O / B-BIAS / I-BIAS.
    pub tag_logits: Array2<f64>,
    pub attention: Vec<f64>,
    /// False when the gate kept the entity encoder from running.
    pub active: bool,
}

impl EntityEncoding {
    fn gated_off(n: usize, d: usize) -> Self {
        Self {
            e: Array1::zeros(d),
            tag_logits: Array2::zeros((n, 3)),
            attention: vec![0.0; n],
            active: false,
        }
    }

    /// Argmax tag per token, repaired so no `I-BIAS` follows `O`. All `O`
    /// when the branch did not run.
    pub fn tags(&self) -> Vec<BioTag> {
        if !self.active {
            return vec![BioTag::O; self.tag_logits.nrows()];
        }
        let mut tags: Vec<BioTag> = self
            .tag_logits
            .rows()
            .into_iter()
            .map(|row| {
                let mut best = 0;
                for j in 1..3 {
                    if row[j] > row[best] {
                        best = j;
                    }
                }
                BioTag::from_index(best)
            })
            .collect();
        repair_bio(&mut tags);
        tags
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Forward {
    pub context: ContextEncoding,
    pub entity: EntityEncoding,
    pub bias_score: f64,
}

impl Forward {
    /// The fusion input `[C; E]`.
    pub fn fused(&self) -> Array1<f64> {
        ndarray::concatenate![Axis(0), self.context.c, self.entity.e]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BiasReport {
    pub bias_score: f64,
    pub bias_label: bool,
    pub context_score: f64,
    pub spans: Vec<(usize, usize)>,
    pub tags: Vec<BioTag>,
    /// Per-token entity attention; all zeros when gated off.
    pub attention: Vec<f64>,
}

struct Trace {
    ids: Vec<usize>,
    context: EncoderPass,
    entity: Option<EncoderPass>,
    /// Head-averaged CLS attention before renormalization.
    p_bar: Array1<f64>,
}

fn input_ids(config: &ModelConfig, tokens: &TokenSequence) -> Result<Vec<usize>> {
    if tokens.len() + 1 > config.max_len {
        return Err(Error::SequenceTooLong {
            len: tokens.len(),
            max_len: config.max_len,
        });
    }
    let mut ids = Vec::with_capacity(tokens.len() + 1);
    ids.push(CLS_ID);
    ids.extend(tokens.ids.iter().map(|&id| if id < config.vocab_size { id } else { UNK_ID }));
    Ok(ids)
}

fn head_column(l: &Linear) -> ndarray::ArrayView1<'_, f64> {
    l.weight.column(0)
}

fn context_from(theta: &ModelParameters, pass: &EncoderPass) -> ContextEncoding {
    let c = pass.output.row(0).to_owned();
    let logit = c.dot(&head_column(&theta.context_head)) + theta.context_head.bias[0];
    ContextEncoding {
        c,
        context_score: sigmoid(logit),
    }
}

fn entity_from(theta: &ModelParameters, pass: &EncoderPass) -> (EntityEncoding, Array1<f64>) {
    let cfg = &theta.config;
    let n = pass.output.nrows() - 1;
    let hidden = pass.output.slice(s![1.., ..]);
    let tag_logits = hidden.dot(&theta.tag_head.weight) + &theta.tag_head.bias;
    let last = pass.layers.last().expect("at least one layer");
    let mut p_bar = Array1::<f64>::zeros(n);
    for p in &last.probs {
        p_bar += &p.slice(s![0, 1..]);
    }
    p_bar /= cfg.n_heads as f64;
    let z = p_bar.sum();
    let a = if n == 0 { Array1::zeros(0) } else { &p_bar / z };
    let e = if n == 0 {
        Array1::zeros(cfg.d_model)
    } else {
        a.dot(&hidden)
    };
    let enc = EntityEncoding {
        e,
        tag_logits,
        attention: a.to_vec(),
        active: true,
    };
    (enc, p_bar)
}

fn forward_traced(
    theta: &ModelParameters,
    tokens: &TokenSequence,
    gate_override: bool,
    threshold: f64,
    mode: &mut Mode,
) -> Result<(Forward, Trace)> {
    let cfg = &theta.config;
    let ids = input_ids(cfg, tokens)?;
    let ctx_pass = encoder_forward(&theta.context, cfg, &ids, mode);
    let context = context_from(theta, &ctx_pass);
    let (entity, ent_pass, p_bar) = if gate_override || context.context_score > threshold {
        let pass = encoder_forward(&theta.entity, cfg, &ids, mode);
        let (enc, p_bar) = entity_from(theta, &pass);
        (enc, Some(pass), p_bar)
    } else {
        (EntityEncoding::gated_off(tokens.len(), cfg.d_model), None, Array1::zeros(0))
    };
    let mut fwd = Forward {
        context,
        entity,
        bias_score: 0.0,
    };
    let logit = fwd.fused().dot(&head_column(&theta.fusion)) + theta.fusion.bias[0];
    fwd.bias_score = sigmoid(logit);
    let trace = Trace {
        ids,
        context: ctx_pass,
        entity: ent_pass,
        p_bar,
    };
    Ok((fwd, trace))
}

fn mode_for(rate: f64, train_mode: bool, rng: &mut ChaCha8Rng) -> Mode<'_> {
    if train_mode {
        Mode::Train { rng, rate }
    } else {
        Mode::Eval
    }
}

/// Runs the context encoder alone. In `train_mode` dropout masks come from
/// a generator seeded with `config.seed`.
pub fn context_encode(theta: &ModelParameters, tokens: &TokenSequence, train_mode: bool) -> Result<ContextEncoding> {
    let ids = input_ids(&theta.config, tokens)?;
    let mut rng = ChaCha8Rng::seed_from_u64(theta.config.seed);
    let mut mode = mode_for(theta.config.dropout_rate, train_mode, &mut rng);
    let pass = encoder_forward(&theta.context, &theta.config, &ids, &mut mode);
    Ok(context_from(theta, &pass))
}

/// Runs the entity encoder unconditionally.
pub fn entity_encode(theta: &ModelParameters, tokens: &TokenSequence, train_mode: bool) -> Result<EntityEncoding> {
    let ids = input_ids(&theta.config, tokens)?;
    let mut rng = ChaCha8Rng::seed_from_u64(theta.config.seed);
    let mut mode = mode_for(theta.config.dropout_rate, train_mode, &mut rng);
    let pass = encoder_forward(&theta.entity, &theta.config, &ids, &mut mode);
    Ok(entity_from(theta, &pass).0)
}

/// Full forward pass in evaluation mode using `config.bias_threshold` as the
/// gate. With `gate_override` the entity branch runs regardless of the
/// context score.
pub fn model_forward_full(theta: &ModelParameters, tokens: &TokenSequence, gate_override: bool) -> Result<Forward> {
    forward_with(theta, tokens, gate_override, &mut Mode::Eval)
}

pub fn forward_with(theta: &ModelParameters, tokens: &TokenSequence, gate_override: bool, mode: &mut Mode) -> Result<Forward> {
    Ok(forward_traced(theta, tokens, gate_override, theta.config.bias_threshold, mode)?.0)
}

/// Gated inference with threshold `tau` on both the context score and
/// the fused score.
pub fn cbdt_detect(theta: &ModelParameters, tokens: &TokenSequence, tau: f64) -> Result<BiasReport> {
    let (fwd, _) = forward_traced(theta, tokens, false, tau, &mut Mode::Eval)?;
    let tags = fwd.entity.tags();
    Ok(BiasReport {
        bias_score: fwd.bias_score,
        bias_label: fwd.bias_score > tau,
        context_score: fwd.context.context_score,
        spans: decode_spans(&tags),
        tags,
        attention: fwd.entity.attention,
    })
}

fn bce(p: f64, y: bool) -> f64 {
    let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
    if y {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// Derivative of [`bce`] with respect to the logit behind `p`.
fn bce_logit_grad(p: f64, y: bool) -> f64 {
    if p <= BCE_CLAMP || p >= 1.0 - BCE_CLAMP {
        return 0.0;
    }
    p - if y { 1.0 } else { 0.0 }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossParts {
    pub total: f64,
    pub context: f64,
    pub entity: f64,
}

/// The context part averages the binary cross-entropy of the fused score
/// and of the context head's score; the entity part is mean per-token
/// cross-entropy of the tag logits, zero when the branch did not run.
pub fn compute_loss(fwd: &Forward, y: bool, tags: &[BioTag], lambda: f64) -> Result<LossParts> {
    let context = 0.5 * (bce(fwd.bias_score, y) + bce(fwd.context.context_score, y));
    let entity = if fwd.entity.active && !tags.is_empty() {
        if tags.len() != fwd.entity.tag_logits.nrows() {
            return Err(Error::LengthMismatch {
                left: tags.len(),
                right: fwd.entity.tag_logits.nrows(),
            });
        }
        let mut sum = 0.0;
        for (row, tag) in fwd.entity.tag_logits.rows().into_iter().zip(tags) {
            let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            sum += lse - row[tag.index()];
        }
        sum / tags.len() as f64
    } else {
        0.0
    };
    Ok(LossParts {
        total: context + lambda * entity,
        context,
        entity,
    })
}

/// Loss of one example and its gradient with respect to every parameter.
pub fn loss_and_gradient(
    theta: &ModelParameters,
    tokens: &TokenSequence,
    y: bool,
    tags: &[BioTag],
    lambda: f64,
    gate_override: bool,
    mode: &mut Mode,
) -> Result<(Forward, LossParts, ModelParameters)> {
    let mut grad = theta.zeros_like();
    let (fwd, loss) = accumulate_gradient(theta, tokens, y, tags, lambda, gate_override, mode, &mut grad)?;
    Ok((fwd, loss, grad))
}

/// As [`loss_and_gradient`], adding into an existing gradient buffer.
#[allow(clippy::too_many_arguments)]
pub fn accumulate_gradient(
    theta: &ModelParameters,
    tokens: &TokenSequence,
    y: bool,
    tags: &[BioTag],
    lambda: f64,
    gate_override: bool,
    mode: &mut Mode,
    grad: &mut ModelParameters,
) -> Result<(Forward, LossParts)> {
    let cfg = &theta.config;
    let d = cfg.d_model;
    let (fwd, trace) = forward_traced(theta, tokens, gate_override, cfg.bias_threshold, mode)?;
    let loss = compute_loss(&fwd, y, tags, lambda)?;
    let m = trace.ids.len();
    let n = m - 1;

    let ds = 0.5 * bce_logit_grad(fwd.bias_score, y);
    let fused = fwd.fused();
    grad.fusion.weight.column_mut(0).scaled_add(ds, &fused);
    grad.fusion.bias[0] += ds;
    let dfused = &head_column(&theta.fusion) * ds;
    let mut dc = dfused.slice(s![..d]).to_owned();
    let de = dfused.slice(s![d..]).to_owned();

    let dcs = 0.5 * bce_logit_grad(fwd.context.context_score, y);
    grad.context_head.weight.column_mut(0).scaled_add(dcs, &fwd.context.c);
    grad.context_head.bias[0] += dcs;
    dc.scaled_add(dcs, &head_column(&theta.context_head));

    let mut dout = Array2::zeros((m, d));
    dout.row_mut(0).assign(&dc);
    encoder_backward(&theta.context, cfg, &trace.context, dout, None, &mut grad.context);

    if let Some(pass) = &trace.entity {
        if n > 0 {
            let hidden = pass.output.slice(s![1.., ..]);
            let a = Array1::from(fwd.entity.attention.clone());
            let mut dh = Array2::zeros((m, d));
            {
                let mut dtok = dh.slice_mut(s![1.., ..]);
                for (i, mut row) in dtok.rows_mut().into_iter().enumerate() {
                    row.scaled_add(a[i], &de);
                }
            }
            let da = hidden.dot(&de);
            let z = trace.p_bar.sum();
            let dp_bar = (&da - a.dot(&da)) / z;
            let mut extra = Array2::zeros((m, m));
            extra.slice_mut(s![0, 1..]).assign(&(&dp_bar / cfg.n_heads as f64));
            let extras = vec![extra; cfg.n_heads];

            if lambda != 0.0 && !tags.is_empty() {
                let mut dlogits = fwd.entity.tag_logits.clone();
                softmax_rows(&mut dlogits);
                for (i, tag) in tags.iter().enumerate() {
                    dlogits[[i, tag.index()]] -= 1.0;
                }
                dlogits *= lambda / n as f64;
                grad.tag_head.weight += &hidden.t().dot(&dlogits);
                grad.tag_head.bias += &dlogits.sum_axis(Axis(0));
                let mut dtok = dh.slice_mut(s![1.., ..]);
                dtok += &dlogits.dot(&theta.tag_head.weight.t());
            }
            encoder_backward(&theta.entity, cfg, pass, dh, Some(&extras), &mut grad.entity);
        }
    }
    Ok((fwd, loss))
}

#[cfg(test)]
mod tests;
