#![allow(clippy::needless_range_loop)]

use proptest::prelude::*;
use rand::Rng;

use super::encoder::encoder_forward;
use super::*;

fn seq(ids: &[usize]) -> TokenSequence {
    TokenSequence {
        surfaces: ids.iter().map(|i| format!("t{i}")).collect(),
        ids: ids.to_vec(),
        offsets: ids.iter().enumerate().map(|(i, _)| (3 * i, 3 * i + 2)).collect(),
    }
}

fn small_config(d: usize, layers: usize, heads: usize) -> ModelConfig {
    let mut c = ModelConfig::new(12);
    c.d_model = d;
    c.n_layers = layers;
    c.n_heads = heads;
    c.d_ff = 2 * d;
    c.max_len = 8;
    c
}

/// Initialized weights with every tensor, biases and gains included,
/// jittered so no parameter sits at a special value.
fn jittered(config: &ModelConfig, seed: u64, scale: f64) -> ModelParameters {
    let mut p = init_parameters(config).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, data) in p.tensors_mut() {
        for x in data.iter_mut() {
            *x += rng.random_range(-scale..scale);
        }
    }
    p
}

fn attention_of(theta: &ModelParameters, enc: &Encoder, tokens: &TokenSequence) -> Vec<Array2<f64>> {
    let ids = input_ids(&theta.config, tokens).unwrap();
    let pass = encoder_forward(enc, &theta.config, &ids, &mut Mode::Eval);
    pass.layers.into_iter().flat_map(|l| l.probs).collect()
}

#[test]
fn init_is_deterministic_and_shaped() {
    let mut c = small_config(16, 2, 4);
    c.seed = 7;
    let a = init_parameters(&c).unwrap();
    let b = init_parameters(&c).unwrap();
    assert_eq!(a.flatten(), b.flatten());
    for l in a.context.layers.iter().chain(&a.entity.layers) {
        for lin in [&l.query, &l.value, &l.output] {
            assert_eq!(lin.weight.dim(), (16, 16));
        }
        assert_eq!(l.key.dim(), (16, 16));
    }
    assert_eq!(a.fusion.weight.dim(), (32, 1));
    assert_eq!(a.tag_head.weight.dim(), (16, 3));
    c.seed = 8;
    assert_ne!(init_parameters(&c).unwrap().flatten(), a.flatten());
}

#[test]
fn init_weights_have_zero_mean_and_uniform_variance() {
    let mut c = ModelConfig::new(4000);
    c.d_model = 64;
    let p = init_parameters(&c).unwrap();
    let w = p.context.token_embedding.as_slice().unwrap();
    let bound = 1.0 / 8.0;
    let n = w.len() as f64;
    let mean = w.iter().sum::<f64>() / n;
    let sd = bound / 3f64.sqrt();
    assert!(mean.abs() < 3.0 * sd / n.sqrt(), "mean {mean}");
    let var = w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    assert!((var - sd * sd).abs() / (sd * sd) < 0.02, "var {var}");
    assert!(w.iter().all(|x| x.abs() <= bound));
    let ff = &p.entity.layers[0].ff_out;
    let b = 1.0 / (c.d_ff as f64).sqrt();
    assert!(ff.weight.iter().all(|x| x.abs() <= b));
    assert!(ff.bias.iter().all(|&x| x == 0.0));
    assert!(p.entity.layers[1].norm2.gain.iter().all(|&x| x == 1.0));
}

#[test]
fn invalid_config_is_rejected() {
    let mut c = small_config(16, 1, 3);
    assert!(init_parameters(&c).is_err());
    c.n_heads = 2;
    c.max_len = 1;
    assert!(init_parameters(&c).is_err());
}

#[test]
fn too_long_sequence_names_max_len() {
    let theta = init_parameters(&small_config(8, 1, 2)).unwrap();
    let err = context_encode(&theta, &seq(&[4; 8]), false).unwrap_err();
    assert!(err.to_string().contains("max_len 8"), "{err}");
    assert!(context_encode(&theta, &seq(&[4; 7]), false).is_ok());
}

#[test]
fn out_of_range_ids_map_to_unknown() {
    let theta = jittered(&small_config(8, 1, 2), 1, 0.1);
    let a = context_encode(&theta, &seq(&[4, 99]), false).unwrap();
    let b = context_encode(&theta, &seq(&[4, UNK_ID]), false).unwrap();
    assert_eq!(a, b);
}

#[test]
fn single_token_and_empty_inputs() {
    let theta = jittered(&small_config(8, 1, 2), 2, 0.1);
    let c = context_encode(&theta, &seq(&[5]), false).unwrap();
    assert!(c.context_score > 0.0 && c.context_score < 1.0);
    let e = entity_encode(&theta, &seq(&[5]), false).unwrap();
    assert_eq!(e.attention, vec![1.0]);
    let empty = entity_encode(&theta, &seq(&[]), false).unwrap();
    assert!(empty.attention.is_empty());
    assert!(empty.e.iter().all(|&x| x == 0.0));
}

/// Plain-loop encoder for one layer and one head, independent of ndarray.
fn oracle_encoder(enc: &Encoder, ids: &[usize], act: Activation) -> Vec<Vec<f64>> {
    let d = enc.token_embedding.ncols();
    let m = ids.len();
    let lin = |l: &Linear, x: &[f64]| -> Vec<f64> {
        (0..l.weight.ncols())
            .map(|j| l.bias[j] + (0..x.len()).map(|i| x[i] * l.weight[[i, j]]).sum::<f64>())
            .collect()
    };
    let norm = |n: &LayerNorm, x: &[f64]| -> Vec<f64> {
        let mu = x.iter().sum::<f64>() / d as f64;
        let var = x.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / d as f64;
        let s = (var + 1e-5).sqrt();
        (0..d).map(|i| (x[i] - mu) / s * n.gain[i] + n.bias[i]).collect()
    };
    let l = &enc.layers[0];
    let x: Vec<Vec<f64>> = (0..m)
        .map(|i| (0..d).map(|j| enc.token_embedding[[ids[i], j]] + enc.position_embedding[[i, j]]).collect())
        .collect();
    let q: Vec<_> = x.iter().map(|r| lin(&l.query, r)).collect();
    let k: Vec<Vec<f64>> = x
        .iter()
        .map(|r| (0..d).map(|j| (0..d).map(|i| r[i] * l.key[[i, j]]).sum()).collect())
        .collect();
    let v: Vec<_> = x.iter().map(|r| lin(&l.value, r)).collect();
    let mut out = Vec::new();
    for i in 0..m {
        let scores: Vec<f64> = (0..m)
            .map(|j| (0..d).map(|t| q[i][t] * k[j][t]).sum::<f64>() / (d as f64).sqrt())
            .collect();
        let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let ex: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
        let z: f64 = ex.iter().sum();
        let ctx: Vec<f64> = (0..d).map(|t| (0..m).map(|j| ex[j] / z * v[j][t]).sum()).collect();
        let a = lin(&l.output, &ctx);
        let h1 = norm(&l.norm1, &(0..d).map(|t| x[i][t] + a[t]).collect::<Vec<_>>());
        let g: Vec<f64> = lin(&l.ff_in, &h1).into_iter().map(|z| act.apply(z)).collect();
        let f = lin(&l.ff_out, &g);
        out.push(norm(&l.norm2, &(0..d).map(|t| h1[t] + f[t]).collect::<Vec<_>>()));
    }
    out
}

#[test]
fn hand_sized_forward_matches_loop_oracle() {
    for act in [Activation::Relu, Activation::Tanh, Activation::Sigmoid] {
        let mut c = small_config(2, 1, 1);
        c.activation = act;
        let theta = jittered(&c, 3, 0.5);
        let tokens = seq(&[5, 7]);
        let ids = [CLS_ID, 5, 7];

        let ctx = oracle_encoder(&theta.context, &ids, act);
        let got = context_encode(&theta, &tokens, false).unwrap();
        for t in 0..2 {
            assert!((got.c[t] - ctx[0][t]).abs() < 1e-9);
        }
        let logit: f64 = (0..2).map(|t| ctx[0][t] * theta.context_head.weight[[t, 0]]).sum::<f64>()
            + theta.context_head.bias[0];
        assert!((got.context_score - 1.0 / (1.0 + (-logit).exp())).abs() < 1e-12);

        let ent = oracle_encoder(&theta.entity, &ids, act);
        let e = entity_encode(&theta, &tokens, false).unwrap();
        for t in 0..2 {
            let want: f64 = (0..2).map(|i| e.attention[i] * ent[i + 1][t]).sum();
            assert!((e.e[t] - want).abs() < 1e-9);
        }
    }
}

#[test]
fn attention_weights_follow_cls_row() {
    let theta = jittered(&small_config(8, 2, 2), 4, 0.3);
    let tokens = seq(&[4, 5, 6]);
    let probs = attention_of(&theta, &theta.entity, &tokens);
    let last = &probs[probs.len() - 2..];
    let mut p = [0.0; 3];
    for h in last {
        for j in 0..3 {
            p[j] += h[[0, j + 1]] / 2.0;
        }
    }
    let z: f64 = p.iter().sum();
    let e = entity_encode(&theta, &tokens, false).unwrap();
    for j in 0..3 {
        assert!((e.attention[j] - p[j] / z).abs() < 1e-12);
    }
}

#[test]
fn position_embeddings_make_order_matter() {
    let theta = jittered(&small_config(8, 1, 2), 5, 0.3);
    let a = context_encode(&theta, &seq(&[4, 5, 6]), false).unwrap();
    let b = context_encode(&theta, &seq(&[6, 5, 4]), false).unwrap();
    assert_ne!(a.c, b.c);
}

#[test]
fn eval_is_deterministic_and_train_mode_applies_dropout() {
    let mut c = small_config(8, 1, 2);
    c.dropout_rate = 0.5;
    let theta = jittered(&c, 6, 0.3);
    let t = seq(&[4, 5, 6]);
    assert_eq!(context_encode(&theta, &t, false).unwrap(), context_encode(&theta, &t, false).unwrap());
    assert_eq!(context_encode(&theta, &t, true).unwrap(), context_encode(&theta, &t, true).unwrap());
    assert_ne!(context_encode(&theta, &t, true).unwrap(), context_encode(&theta, &t, false).unwrap());
}

/// Pushes the context head so the score lands on a chosen side of the gate.
fn with_context_bias(mut theta: ModelParameters, bias: f64) -> ModelParameters {
    theta.context_head.weight.fill(0.0);
    theta.context_head.bias[0] = bias;
    theta
}

#[test]
fn gate_closed_gives_exact_zeros() {
    let theta = with_context_bias(jittered(&small_config(8, 1, 2), 7, 0.3), (0.2f64 / 0.8).ln());
    let t = seq(&[4, 5, 6]);
    let r = cbdt_detect(&theta, &t, 0.5).unwrap();
    assert!((r.context_score - 0.2).abs() < 1e-12);
    assert_eq!(r.attention, vec![0.0; 3]);
    assert!(r.spans.is_empty());
    assert_eq!(r.tags, vec![BioTag::O; 3]);
    let f = model_forward_full(&theta, &t, false).unwrap();
    assert!(f.entity.e.iter().all(|&x| x.to_bits() == 0));
    assert_eq!(r.bias_label, r.bias_score > 0.5);

    let forced = model_forward_full(&theta, &t, true).unwrap();
    assert!(forced.entity.active);
    assert!((forced.entity.attention.iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn gate_open_decodes_spans() {
    let mut theta = with_context_bias(jittered(&small_config(8, 1, 2), 8, 0.3), 2.2);
    theta.tag_head.weight.fill(0.0);
    theta.tag_head.bias.assign(&ndarray::arr1(&[0.0, -1.0, 1.0]));
    let t = seq(&[4, 5, 6]);
    let r = cbdt_detect(&theta, &t, 0.5).unwrap();
    assert!(r.context_score > 0.89);
    assert!((r.attention.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    assert_eq!(r.tags, vec![BioTag::B, BioTag::I, BioTag::I]);
    assert_eq!(r.spans, vec![(0, 3)]);
}

#[test]
fn forward_without_override_matches_detect() {
    let theta = jittered(&small_config(8, 2, 2), 9, 0.5);
    for ids in [[4usize, 5, 6], [7, 8, 9], [10, 11, 4]] {
        let t = seq(&ids);
        let f = model_forward_full(&theta, &t, false).unwrap();
        let r = cbdt_detect(&theta, &t, theta.config.bias_threshold).unwrap();
        assert_eq!(f.bias_score, r.bias_score);
        assert_eq!(f.entity.attention, r.attention);
    }
}

#[test]
fn loss_closed_forms() {
    let mut theta = init_parameters(&small_config(8, 1, 2)).unwrap();
    theta.fusion.weight.fill(0.0);
    theta.context_head.weight.fill(0.0);
    theta.tag_head.weight.fill(0.0);
    let t = seq(&[4, 5]);
    let f = model_forward_full(&theta, &t, true).unwrap();
    for y in [false, true] {
        let l = compute_loss(&f, y, &[BioTag::O, BioTag::B], 1.0).unwrap();
        assert!((l.context - std::f64::consts::LN_2).abs() < 1e-6);
        assert!((l.entity - 3f64.ln()).abs() < 1e-6);
        assert_eq!(l.total, l.context + l.entity);
    }
    let mut sure = f.clone();
    sure.bias_score = 1.0;
    sure.context.context_score = 1.0;
    let l = compute_loss(&sure, true, &[BioTag::O, BioTag::B], 0.0).unwrap();
    assert!(l.context <= 1.2e-7);
    assert!(compute_loss(&f, true, &[BioTag::O], 1.0).is_err());
}

fn total_loss(theta: &ModelParameters, t: &TokenSequence, y: bool, tags: &[BioTag], lambda: f64) -> f64 {
    let f = model_forward_full(theta, t, true).unwrap();
    compute_loss(&f, y, tags, lambda).unwrap().total
}

/// Worst ratio of |analytic - numeric| to `1e-8 + 1e-4·|numeric|`.
fn fd_mismatch(theta: &ModelParameters, t: &TokenSequence, y: bool, tags: &[BioTag]) -> f64 {
    let eps = 1e-4;
    let (_, _, grad) = loss_and_gradient(theta, t, y, tags, 1.0, true, &mut Mode::Eval).unwrap();
    let analytic = grad.flatten();
    let mut probe = theta.clone();
    let mut worst: f64 = 0.0;
    let count = theta.num_parameters();
    for idx in 0..count {
        let orig = probe.flatten()[idx];
        set_flat(&mut probe, idx, orig + eps);
        let up = total_loss(&probe, t, y, tags, 1.0);
        set_flat(&mut probe, idx, orig - eps);
        let down = total_loss(&probe, t, y, tags, 1.0);
        set_flat(&mut probe, idx, orig);
        let numeric = (up - down) / (2.0 * eps);
        let err = (analytic[idx] - numeric).abs() / (1e-8 + 1e-4 * numeric.abs());
        worst = worst.max(err);
    }
    worst
}

fn set_flat(p: &mut ModelParameters, mut idx: usize, value: f64) {
    for (_, data) in p.tensors_mut() {
        if idx < data.len() {
            data[idx] = value;
            return;
        }
        idx -= data.len();
    }
    panic!("index out of range");
}

#[test]
fn gradients_match_finite_differences() {
    let mut c = small_config(8, 2, 2);
    c.vocab_size = 8;
    c.max_len = 5;
    c.activation = Activation::Tanh;
    let theta = jittered(&c, 10, 0.3);
    let t = seq(&[4, 5, 6]);
    let err = fd_mismatch(&theta, &t, true, &[BioTag::O, BioTag::B, BioTag::I]);
    assert!(err < 1.0, "gradient mismatch ratio {err}");
}

#[test]
fn gradients_match_with_relu_and_negative_label() {
    let mut c = small_config(8, 1, 2);
    c.vocab_size = 8;
    c.max_len = 5;
    let theta = jittered(&c, 11, 0.3);
    let t = seq(&[4, 7]);
    let err = fd_mismatch(&theta, &t, false, &[BioTag::O, BioTag::O]);
    assert!(err < 1.0, "gradient mismatch ratio {err}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn attention_rows_are_distributions(seed in 0u64..1000, ids in prop::collection::vec(0usize..12, 1..7)) {
        let theta = jittered(&small_config(8, 2, 2), seed, 0.5);
        let t = seq(&ids);
        for enc in [&theta.context, &theta.entity] {
            for p in attention_of(&theta, enc, &t) {
                for row in p.rows() {
                    prop_assert!((row.sum() - 1.0).abs() < 1e-6);
                    prop_assert!(row.iter().all(|&x| x >= 0.0));
                }
            }
        }
        let e = entity_encode(&theta, &t, false).unwrap();
        prop_assert!((e.attention.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        let f = model_forward_full(&theta, &t, false).unwrap();
        prop_assert_eq!(f.fused().len(), 16);
        prop_assert!(f.bias_score > 0.0 && f.bias_score < 1.0);
    }

    #[test]
    fn detected_spans_are_well_formed(seed in 0u64..1000, ids in prop::collection::vec(0usize..12, 1..7)) {
        let theta = with_context_bias(jittered(&small_config(8, 1, 2), seed, 2.0), 3.0);
        let r = cbdt_detect(&theta, &seq(&ids), 0.5).unwrap();
        prop_assert!(crate::formats::first_bio_violation(&r.tags).is_none());
        prop_assert_eq!(decode_spans(&r.tags), r.spans.clone());
        for w in r.spans.windows(2) {
            prop_assert!(w[0].1 <= w[1].0);
        }
    }
}
