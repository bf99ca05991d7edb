use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Branch {
    Context,
    Entity,
}

impl Branch {
    fn prefix(self) -> &'static str {
        match self {
            Branch::Context => "context",
            Branch::Entity => "entity",
        }
    }
}

/// Which part of the model a tensor belongs to; drives freezing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Embedding(Branch),
    Layer(Branch, usize),
    Head,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamInfo {
    pub name: String,
    pub shape: Vec<usize>,
    /// Subject to weight decay (false for biases and layer-norm parameters).
    pub decay: bool,
    pub group: ParamGroup,
}

/// Affine map `y = x W + b` with `W` stored as `in × out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Array2::zeros((input, output)),
            bias: Array1::zeros(output),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.weight) + &self.bias
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gain: Array1<f64>,
    pub bias: Array1<f64>,
}

impl LayerNorm {
    pub fn identity(dim: usize) -> Self {
        Self {
            gain: Array1::ones(dim),
            bias: Array1::zeros(dim),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer {
    pub query: Linear,
    /// Weight only; a key bias cancels inside the softmax.
    pub key: Array2<f64>,
    pub value: Linear,
    pub output: Linear,
    pub norm1: LayerNorm,
    pub ff_in: Linear,
    pub ff_out: Linear,
    pub norm2: LayerNorm,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub token_embedding: Array2<f64>,
    pub position_embedding: Array2<f64>,
    pub layers: Vec<EncoderLayer>,
}

/// Every trainable weight of the detector: the context encoder and its
/// classification head, the entity encoder and its tag head, and the fusion
/// classifier over `[C; E]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParameters {
    pub config: ModelConfig,
    pub context: Encoder,
    pub entity: Encoder,
    /// `d_model × 1`, produces the context score.
    pub context_head: Linear,
    /// `d_model × 3`, per-token O / B-BIAS / I-BIAS logits.
    pub tag_head: Linear,
    /// `2·d_model × 1`, produces the fused bias score.
    pub fusion: Linear,
}

fn zero_encoder(c: &ModelConfig) -> Encoder {
    let d = c.d_model;
    let layer = EncoderLayer {
        query: Linear::zeros(d, d),
        key: Array2::zeros((d, d)),
        value: Linear::zeros(d, d),
        output: Linear::zeros(d, d),
        norm1: LayerNorm::identity(d),
        ff_in: Linear::zeros(d, c.d_ff),
        ff_out: Linear::zeros(c.d_ff, d),
        norm2: LayerNorm::identity(d),
    };
    Encoder {
        token_embedding: Array2::zeros((c.vocab_size, d)),
        position_embedding: Array2::zeros((c.max_len, d)),
        layers: vec![layer; c.n_layers],
    }
}

type TensorRef<'a> = (ParamInfo, &'a [f64]);
type TensorMut<'a> = (ParamInfo, &'a mut [f64]);

fn info(name: String, shape: &[usize], decay: bool, group: ParamGroup) -> ParamInfo {
    ParamInfo {
        name,
        shape: shape.to_vec(),
        decay,
        group,
    }
}

// The two traversals below must visit tensors in the same order.

fn refs_linear<'a>(out: &mut Vec<TensorRef<'a>>, name: String, l: &'a Linear, g: ParamGroup) {
    out.push((info(format!("{name}.weight"), l.weight.shape(), true, g), l.weight.as_slice().unwrap()));
    out.push((info(format!("{name}.bias"), l.bias.shape(), false, g), l.bias.as_slice().unwrap()));
}

fn refs_norm<'a>(out: &mut Vec<TensorRef<'a>>, name: String, n: &'a LayerNorm, g: ParamGroup) {
    out.push((info(format!("{name}.gain"), n.gain.shape(), false, g), n.gain.as_slice().unwrap()));
    out.push((info(format!("{name}.bias"), n.bias.shape(), false, g), n.bias.as_slice().unwrap()));
}

fn refs_encoder<'a>(out: &mut Vec<TensorRef<'a>>, branch: Branch, e: &'a Encoder) {
    let pre = branch.prefix();
    let g = ParamGroup::Embedding(branch);
    out.push((
        info(format!("{pre}.token_embedding"), e.token_embedding.shape(), true, g),
        e.token_embedding.as_slice().unwrap(),
    ));
    out.push((
        info(format!("{pre}.position_embedding"), e.position_embedding.shape(), true, g),
        e.position_embedding.as_slice().unwrap(),
    ));
    for (i, l) in e.layers.iter().enumerate() {
        let g = ParamGroup::Layer(branch, i);
        let n = |s: &str| format!("{pre}.layer{i}.{s}");
        refs_linear(out, n("query"), &l.query, g);
        out.push((info(n("key.weight"), l.key.shape(), true, g), l.key.as_slice().unwrap()));
        refs_linear(out, n("value"), &l.value, g);
        refs_linear(out, n("output"), &l.output, g);
        refs_norm(out, n("norm1"), &l.norm1, g);
        refs_linear(out, n("ff_in"), &l.ff_in, g);
        refs_linear(out, n("ff_out"), &l.ff_out, g);
        refs_norm(out, n("norm2"), &l.norm2, g);
    }
}

fn muts_linear<'a>(out: &mut Vec<TensorMut<'a>>, name: String, l: &'a mut Linear, g: ParamGroup) {
    let wi = info(format!("{name}.weight"), l.weight.shape(), true, g);
    let bi = info(format!("{name}.bias"), l.bias.shape(), false, g);
    out.push((wi, l.weight.as_slice_mut().unwrap()));
    out.push((bi, l.bias.as_slice_mut().unwrap()));
}

fn muts_norm<'a>(out: &mut Vec<TensorMut<'a>>, name: String, n: &'a mut LayerNorm, g: ParamGroup) {
    let gi = info(format!("{name}.gain"), n.gain.shape(), false, g);
    let bi = info(format!("{name}.bias"), n.bias.shape(), false, g);
    out.push((gi, n.gain.as_slice_mut().unwrap()));
    out.push((bi, n.bias.as_slice_mut().unwrap()));
}

fn muts_encoder<'a>(out: &mut Vec<TensorMut<'a>>, branch: Branch, e: &'a mut Encoder) {
    let pre = branch.prefix();
    let g = ParamGroup::Embedding(branch);
    let ti = info(format!("{pre}.token_embedding"), e.token_embedding.shape(), true, g);
    let pi = info(format!("{pre}.position_embedding"), e.position_embedding.shape(), true, g);
    out.push((ti, e.token_embedding.as_slice_mut().unwrap()));
    out.push((pi, e.position_embedding.as_slice_mut().unwrap()));
    for (i, l) in e.layers.iter_mut().enumerate() {
        let g = ParamGroup::Layer(branch, i);
        let n = |s: &str| format!("{pre}.layer{i}.{s}");
        muts_linear(out, n("query"), &mut l.query, g);
        let ki = info(n("key.weight"), l.key.shape(), true, g);
        out.push((ki, l.key.as_slice_mut().unwrap()));
        muts_linear(out, n("value"), &mut l.value, g);
        muts_linear(out, n("output"), &mut l.output, g);
        muts_norm(out, n("norm1"), &mut l.norm1, g);
        muts_linear(out, n("ff_in"), &mut l.ff_in, g);
        muts_linear(out, n("ff_out"), &mut l.ff_out, g);
        muts_norm(out, n("norm2"), &mut l.norm2, g);
    }
}

impl ModelParameters {
    /// All-zero weights (layer-norm gains 1) with the shapes `config` implies.
    pub fn zeros(config: &ModelConfig) -> Self {
        let d = config.d_model;
        Self {
            config: config.clone(),
            context: zero_encoder(config),
            entity: zero_encoder(config),
            context_head: Linear::zeros(d, 1),
            tag_head: Linear::zeros(d, 3),
            fusion: Linear::zeros(2 * d, 1),
        }
    }

    /// Same shapes, every entry zero. Used for gradients and optimizer state.
    pub fn zeros_like(&self) -> Self {
        let mut z = Self::zeros(&self.config);
        for (_, s) in z.tensors_mut() {
            s.fill(0.0);
        }
        z
    }

    /// Named tensors in a fixed traversal order.
    pub fn tensors(&self) -> Vec<(ParamInfo, &[f64])> {
        let mut out = Vec::new();
        refs_encoder(&mut out, Branch::Context, &self.context);
        refs_encoder(&mut out, Branch::Entity, &self.entity);
        refs_linear(&mut out, "context_head".into(), &self.context_head, ParamGroup::Head);
        refs_linear(&mut out, "tag_head".into(), &self.tag_head, ParamGroup::Head);
        refs_linear(&mut out, "fusion".into(), &self.fusion, ParamGroup::Head);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(ParamInfo, &mut [f64])> {
        let mut out = Vec::new();
        muts_encoder(&mut out, Branch::Context, &mut self.context);
        muts_encoder(&mut out, Branch::Entity, &mut self.entity);
        muts_linear(&mut out, "context_head".into(), &mut self.context_head, ParamGroup::Head);
        muts_linear(&mut out, "tag_head".into(), &mut self.tag_head, ParamGroup::Head);
        muts_linear(&mut out, "fusion".into(), &mut self.fusion, ParamGroup::Head);
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|(_, s)| s.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, s)| s.iter().all(|x| x.is_finite()))
    }

    /// Flat copy of every entry in traversal order.
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors().into_iter().flat_map(|(_, s)| s.iter().copied()).collect()
    }
}

/// Seeded initialization: weights uniform in ±1/√fan_in, embeddings in
/// ±1/√d_model, biases 0, layer-norm gains 1.
pub fn init_parameters(config: &ModelConfig) -> Result<ModelParameters> {
    config.validate()?;
    let mut p = ModelParameters::zeros(config);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let emb_bound = 1.0 / (config.d_model as f64).sqrt();
    for (info, data) in p.tensors_mut() {
        let bound = match info.group {
            ParamGroup::Embedding(_) => emb_bound,
            _ if info.name.ends_with(".weight") => 1.0 / (info.shape[0] as f64).sqrt(),
            _ => continue,
        };
        for x in data.iter_mut() {
            *x = rng.random_range(-bound..bound);
        }
    }
    Ok(p)
}
