use ndarray::{s, Array1, Array2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use super::params::{Encoder, EncoderLayer, LayerNorm, Linear};

pub(crate) const LN_EPS: f64 = 1e-5;

/// Evaluation runs without dropout; training draws inverted-dropout masks
/// from the supplied generator.
pub enum Mode<'a> {
    Eval,
    Train { rng: &'a mut ChaCha8Rng, rate: f64 },
}

impl Mode<'_> {
    fn mask(&mut self, rows: usize, cols: usize) -> Option<Array2<f64>> {
        match self {
            Mode::Train { rng, rate } if *rate > 0.0 => {
                let keep = 1.0 / (1.0 - *rate);
                let p = *rate;
                Some(Array2::from_shape_fn((rows, cols), |_| {
                    if rng.random::<f64>() < p {
                        0.0
                    } else {
                        keep
                    }
                }))
            }
            _ => None,
        }
    }
}

pub(crate) struct NormCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

pub(crate) struct LayerCache {
    x: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    /// Per-head attention probabilities, `m × m` each.
    pub probs: Vec<Array2<f64>>,
    concat: Array2<f64>,
    mask1: Option<Array2<f64>>,
    norm1: NormCache,
    h1: Array2<f64>,
    z1: Array2<f64>,
    g: Array2<f64>,
    mask2: Option<Array2<f64>>,
    norm2: NormCache,
}

/// Everything the backward pass needs from one encoder run.
pub(crate) struct EncoderPass {
    ids: Vec<usize>,
    pub layers: Vec<LayerCache>,
    pub output: Array2<f64>,
}

fn norm_forward(n: &LayerNorm, x: &Array2<f64>) -> (Array2<f64>, NormCache) {
    let d = x.ncols() as f64;
    let mean = x.sum_axis(Axis(1)) / d;
    let centered = x - &mean.view().insert_axis(Axis(1));
    let var = centered.mapv(|v| v * v).sum_axis(Axis(1)) / d;
    let inv_std = var.mapv(|v| 1.0 / (v + LN_EPS).sqrt());
    let xhat = centered * inv_std.view().insert_axis(Axis(1));
    let y = &xhat * &n.gain + &n.bias;
    (y, NormCache { xhat, inv_std })
}

fn norm_backward(n: &LayerNorm, c: &NormCache, dy: &Array2<f64>, grad: &mut LayerNorm) -> Array2<f64> {
    grad.gain += &(dy * &c.xhat).sum_axis(Axis(0));
    grad.bias += &dy.sum_axis(Axis(0));
    let dxhat = dy * &n.gain;
    let d = dy.ncols() as f64;
    let mean_dxhat = dxhat.sum_axis(Axis(1)) / d;
    let mean_dxhat_xhat = (&dxhat * &c.xhat).sum_axis(Axis(1)) / d;
    let inner = dxhat - &mean_dxhat.insert_axis(Axis(1)) - &c.xhat * &mean_dxhat_xhat.insert_axis(Axis(1));
    inner * c.inv_std.view().insert_axis(Axis(1))
}

fn linear_backward(l: &Linear, x: &Array2<f64>, dy: &Array2<f64>, grad: &mut Linear) -> Array2<f64> {
    grad.weight += &x.t().dot(dy);
    grad.bias += &dy.sum_axis(Axis(0));
    dy.dot(&l.weight.t())
}

pub(crate) fn softmax_rows(x: &mut Array2<f64>) {
    for mut row in x.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
}

fn apply_mask(x: Array2<f64>, mask: &Option<Array2<f64>>) -> Array2<f64> {
    match mask {
        Some(m) => x * m,
        None => x,
    }
}

fn layer_forward(l: &EncoderLayer, cfg: &ModelConfig, x: Array2<f64>, mode: &mut Mode) -> (Array2<f64>, LayerCache) {
    let (m, d) = x.dim();
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let q = l.query.forward(&x);
    let k = x.dot(&l.key);
    let v = l.value.forward(&x);
    let mut concat = Array2::zeros((m, d));
    let mut probs = Vec::with_capacity(cfg.n_heads);
    for h in 0..cfg.n_heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let mut p = q.slice(cols).dot(&k.slice(cols).t()) * scale;
        softmax_rows(&mut p);
        concat.slice_mut(cols).assign(&p.dot(&v.slice(cols)));
        probs.push(p);
    }
    let mask1 = mode.mask(m, d);
    let attn = apply_mask(l.output.forward(&concat), &mask1);
    let (h1, norm1) = norm_forward(&l.norm1, &(&x + &attn));
    let z1 = l.ff_in.forward(&h1);
    let g = z1.mapv(|z| cfg.activation.apply(z));
    let mask2 = mode.mask(m, d);
    let ff = apply_mask(l.ff_out.forward(&g), &mask2);
    let (out, norm2) = norm_forward(&l.norm2, &(&h1 + &ff));
    let cache = LayerCache {
        x,
        q,
        k,
        v,
        probs,
        concat,
        mask1,
        norm1,
        h1,
        z1,
        g,
        mask2,
        norm2,
    };
    (out, cache)
}

fn layer_backward(
    l: &EncoderLayer,
    cfg: &ModelConfig,
    c: &LayerCache,
    dout: &Array2<f64>,
    extra_dprobs: Option<&[Array2<f64>]>,
    grad: &mut EncoderLayer,
) -> Array2<f64> {
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();

    let dr2 = norm_backward(&l.norm2, &c.norm2, dout, &mut grad.norm2);
    let dff = apply_mask(dr2.clone(), &c.mask2);
    let dg = linear_backward(&l.ff_out, &c.g, &dff, &mut grad.ff_out);
    let mut dz1 = dg;
    ndarray::Zip::from(&mut dz1)
        .and(&c.z1)
        .and(&c.g)
        .for_each(|dz, &z, &a| *dz *= cfg.activation.derivative(z, a));
    let dh1 = dr2 + linear_backward(&l.ff_in, &c.h1, &dz1, &mut grad.ff_in);

    let dr1 = norm_backward(&l.norm1, &c.norm1, &dh1, &mut grad.norm1);
    let dattn = apply_mask(dr1.clone(), &c.mask1);
    let dconcat = linear_backward(&l.output, &c.concat, &dattn, &mut grad.output);

    let mut dq = Array2::zeros(c.q.raw_dim());
    let mut dk = Array2::zeros(c.k.raw_dim());
    let mut dv = Array2::zeros(c.v.raw_dim());
    for (h, p) in c.probs.iter().enumerate() {
        let cols = s![.., h * dh..(h + 1) * dh];
        let dout_h = dconcat.slice(cols);
        let mut dp = dout_h.dot(&c.v.slice(cols).t());
        if let Some(extra) = extra_dprobs {
            dp += &extra[h];
        }
        dv.slice_mut(cols).assign(&p.t().dot(&dout_h));
        let row_dot = (&dp * p).sum_axis(Axis(1));
        let dscores = (dp - &row_dot.insert_axis(Axis(1))) * p * scale;
        dq.slice_mut(cols).assign(&dscores.dot(&c.k.slice(cols)));
        dk.slice_mut(cols).assign(&dscores.t().dot(&c.q.slice(cols)));
    }
    let mut dx = dr1;
    dx += &linear_backward(&l.query, &c.x, &dq, &mut grad.query);
    grad.key += &c.x.t().dot(&dk);
    dx += &dk.dot(&l.key.t());
    dx += &linear_backward(&l.value, &c.x, &dv, &mut grad.value);
    dx
}

/// Runs the encoder over `ids` (CLS already prepended).
pub(crate) fn encoder_forward(enc: &Encoder, cfg: &ModelConfig, ids: &[usize], mode: &mut Mode) -> EncoderPass {
    let m = ids.len();
    let mut x = Array2::zeros((m, cfg.d_model));
    for (i, &id) in ids.iter().enumerate() {
        let mut row = x.row_mut(i);
        row += &enc.token_embedding.row(id);
        row += &enc.position_embedding.row(i);
    }
    let mut layers = Vec::with_capacity(enc.layers.len());
    for l in &enc.layers {
        let (out, cache) = layer_forward(l, cfg, x, mode);
        layers.push(cache);
        x = out;
    }
    EncoderPass {
        ids: ids.to_vec(),
        layers,
        output: x,
    }
}

/// Accumulates parameter gradients into `grad`. `extra_dprobs` carries
/// upstream gradients on the last layer's attention probabilities.
pub(crate) fn encoder_backward(
    enc: &Encoder,
    cfg: &ModelConfig,
    pass: &EncoderPass,
    dout: Array2<f64>,
    extra_dprobs: Option<&[Array2<f64>]>,
    grad: &mut Encoder,
) {
    let last = enc.layers.len() - 1;
    let mut d = dout;
    for i in (0..enc.layers.len()).rev() {
        let extra = if i == last { extra_dprobs } else { None };
        d = layer_backward(&enc.layers[i], cfg, &pass.layers[i], &d, extra, &mut grad.layers[i]);
    }
    for (i, &id) in pass.ids.iter().enumerate() {
        let row = d.row(i);
        let mut t = grad.token_embedding.row_mut(id);
        t += &row;
        let mut p = grad.position_embedding.row_mut(i);
        p += &row;
    }
}
