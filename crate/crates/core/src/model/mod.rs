// SPDX-License-Identifier: Apache-2.0

//! Pre-norm Transformer encoder classifier.
//!
//! `tokens → embedding + sinusoidal positions → n_layers × [x + MHA(LN(x)),
//! x + FFN(LN(x))] → mean over positions → linear head`. The FFN is
//! `GELU(x·W1 + b1)·W2 + b2`. In credal mode every attention head reports
//! its per-query vacuity; the model-level uncertainty is the mean over heads
//! and positions of the final layer.

mod checkpoint;

use std::fmt;

use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};

use crate::attention::{
    check_heads, gaussian, multi_head_attention, AttentionOptions, AttentionWeights, EvidenceFn, Mechanism,
};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::rng_from;
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub seq_len: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub n_classes: usize,
    pub mechanism: Mechanism,
    pub evidence: EvidenceFn,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            seq_len: 16,
            d_model: 32,
            d_ff: 64,
            n_heads: 4,
            n_layers: 2,
            n_classes: 2,
            mechanism: Mechanism::Credal,
            evidence: EvidenceFn::Exp,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// All sizes positive (zero layers is allowed) and `d_model` divisible
    /// by `n_heads`.
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("vocab_size", self.vocab_size),
            ("seq_len", self.seq_len),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("n_heads", self.n_heads),
            ("n_classes", self.n_classes),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        check_heads(self.d_model, self.n_heads)?;
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn with_mechanism(&self, mechanism: Mechanism) -> Self {
        Self {
            mechanism,
            ..self.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights<T> {
    pub attn: AttentionWeights<T>,
    pub norm1_scale: T,
    pub norm1_bias: T,
    pub ffn_w1: T,
    pub ffn_b1: T,
    pub ffn_w2: T,
    pub ffn_b2: T,
    pub norm2_scale: T,
    pub norm2_bias: T,
}

/// Every learned tensor of the encoder, generic over the storage so the
/// same layout holds plain tensors, tape variables or optimizer moments.
#[derive(Clone, Debug, PartialEq)]
pub struct Weights<T> {
    pub embedding: T,
    pub layers: Vec<LayerWeights<T>>,
    pub head_w: T,
    pub head_b: T,
}

pub type ModelParams = Weights<Tensor>;

impl<T> Weights<T> {
    /// Visits every tensor with its checkpoint key, in canonical order.
    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a T)) {
        f("embedding".into(), &self.embedding);
        for (i, l) in self.layers.iter().enumerate() {
            for (name, list) in [("wq", &l.attn.wq), ("wk", &l.attn.wk), ("wv", &l.attn.wv)] {
                for (h, t) in list.iter().enumerate() {
                    f(format!("layers.{i}.attn.{name}.{h}"), t);
                }
            }
            f(format!("layers.{i}.attn.wo"), &l.attn.wo);
            f(format!("layers.{i}.norm1.scale"), &l.norm1_scale);
            f(format!("layers.{i}.norm1.bias"), &l.norm1_bias);
            f(format!("layers.{i}.ffn.w1"), &l.ffn_w1);
            f(format!("layers.{i}.ffn.b1"), &l.ffn_b1);
            f(format!("layers.{i}.ffn.w2"), &l.ffn_w2);
            f(format!("layers.{i}.ffn.b2"), &l.ffn_b2);
            f(format!("layers.{i}.norm2.scale"), &l.norm2_scale);
            f(format!("layers.{i}.norm2.bias"), &l.norm2_bias);
        }
        f("head.weight".into(), &self.head_w);
        f("head.bias".into(), &self.head_b);
    }

    /// Mutable counterpart of [`Weights::visit`], same order.
    pub fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(String, &'a mut T)) {
        f("embedding".into(), &mut self.embedding);
        for (i, l) in self.layers.iter_mut().enumerate() {
            for (name, list) in [("wq", &mut l.attn.wq), ("wk", &mut l.attn.wk), ("wv", &mut l.attn.wv)] {
                for (h, t) in list.iter_mut().enumerate() {
                    f(format!("layers.{i}.attn.{name}.{h}"), t);
                }
            }
            f(format!("layers.{i}.attn.wo"), &mut l.attn.wo);
            f(format!("layers.{i}.norm1.scale"), &mut l.norm1_scale);
            f(format!("layers.{i}.norm1.bias"), &mut l.norm1_bias);
            f(format!("layers.{i}.ffn.w1"), &mut l.ffn_w1);
            f(format!("layers.{i}.ffn.b1"), &mut l.ffn_b1);
            f(format!("layers.{i}.ffn.w2"), &mut l.ffn_w2);
            f(format!("layers.{i}.ffn.b2"), &mut l.ffn_b2);
            f(format!("layers.{i}.norm2.scale"), &mut l.norm2_scale);
            f(format!("layers.{i}.norm2.bias"), &mut l.norm2_bias);
        }
        f("head.weight".into(), &mut self.head_w);
        f("head.bias".into(), &mut self.head_b);
    }

    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> Weights<U> {
        Weights {
            embedding: f(&self.embedding),
            layers: self
                .layers
                .iter()
                .map(|l| LayerWeights {
                    attn: l.attn.map(&mut f),
                    norm1_scale: f(&l.norm1_scale),
                    norm1_bias: f(&l.norm1_bias),
                    ffn_w1: f(&l.ffn_w1),
                    ffn_b1: f(&l.ffn_b1),
                    ffn_w2: f(&l.ffn_w2),
                    ffn_b2: f(&l.ffn_b2),
                    norm2_scale: f(&l.norm2_scale),
                    norm2_bias: f(&l.norm2_bias),
                })
                .collect(),
            head_w: f(&self.head_w),
            head_b: f(&self.head_b),
        }
    }

    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = Vec::new();
        self.visit(&mut |n, t| out.push((n, t)));
        out
    }

    pub fn values_mut(&mut self) -> Vec<&mut T> {
        let mut out = Vec::new();
        self.visit_mut(&mut |_, t| out.push(t));
        out
    }
}

impl ModelParams {
    /// Zero-filled tensors with the shapes `config` implies.
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let (d, dh) = (config.d_model, config.d_head());
        let layer = || LayerWeights {
            attn: AttentionWeights {
                wq: vec![Tensor::zeros(&[d, dh]); config.n_heads],
                wk: vec![Tensor::zeros(&[d, dh]); config.n_heads],
                wv: vec![Tensor::zeros(&[d, dh]); config.n_heads],
                wo: Tensor::zeros(&[d, d]),
            },
            norm1_scale: Tensor::zeros(&[d]),
            norm1_bias: Tensor::zeros(&[d]),
            ffn_w1: Tensor::zeros(&[d, config.d_ff]),
            ffn_b1: Tensor::zeros(&[config.d_ff]),
            ffn_w2: Tensor::zeros(&[config.d_ff, d]),
            ffn_b2: Tensor::zeros(&[d]),
            norm2_scale: Tensor::zeros(&[d]),
            norm2_bias: Tensor::zeros(&[d]),
        };
        Ok(Self {
            embedding: Tensor::zeros(&[config.vocab_size, d]),
            layers: (0..config.n_layers).map(|_| layer()).collect(),
            head_w: Tensor::zeros(&[d, config.n_classes]),
            head_b: Tensor::zeros(&[config.n_classes]),
        })
    }

    pub fn num_scalars(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.named().iter().all(|(_, t)| t.all_finite())
    }
}

/// Deterministic initialization from `config.seed`: linear weights
/// `N(0, 1/fan_in)`, embeddings `N(0, 1)`, layer-norm scale 1 and bias 0,
/// all other biases 0.
pub fn init_params(config: &ModelConfig) -> Result<ModelParams> {
    config.validate()?;
    let mut rng = rng_from(config.seed, 0);
    let d = config.d_model;
    let embedding = gaussian(config.vocab_size, d, 1, &mut rng);
    let mut layers = Vec::with_capacity(config.n_layers);
    for _ in 0..config.n_layers {
        let attn = AttentionWeights::init(d, config.n_heads, &mut rng)?;
        layers.push(LayerWeights {
            attn,
            norm1_scale: Tensor::full(&[d], 1.0),
            norm1_bias: Tensor::zeros(&[d]),
            ffn_w1: gaussian(d, config.d_ff, d, &mut rng),
            ffn_b1: Tensor::zeros(&[config.d_ff]),
            ffn_w2: gaussian(config.d_ff, d, config.d_ff, &mut rng),
            ffn_b2: Tensor::zeros(&[d]),
            norm2_scale: Tensor::full(&[d], 1.0),
            norm2_bias: Tensor::zeros(&[d]),
        });
    }
    let head_w = gaussian(d, config.n_classes, d, &mut rng);
    Ok(ModelParams {
        embedding,
        layers,
        head_w,
        head_b: Tensor::zeros(&[config.n_classes]),
    })
}

/// `PE(pos, 2i) = sin(pos / 10000^(2i/d))`, `PE(pos, 2i+1) = cos(...)`.
pub fn sinusoidal_positions(len: usize, d_model: usize) -> Tensor {
    let mut pe = Tensor::zeros(&[len, d_model]);
    for pos in 0..len {
        for i in (0..d_model).step_by(2) {
            let angle = pos as f64 / 10000f64.powf(i as f64 / d_model as f64);
            pe.data_mut()[pos * d_model + i] = angle.sin();
            if i + 1 < d_model {
                pe.data_mut()[pos * d_model + i + 1] = angle.cos();
            }
        }
    }
    pe
}

/// Graph-level result of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace<'t> {
    /// `[1, n_classes]`.
    pub logits: Var<'t>,
    /// One `[n_heads, L]` vacuity matrix per layer, credal mode only.
    pub layer_vacuity: Vec<Var<'t>>,
}

/// Places every parameter on `tape`.
pub fn params_on_tape<'t>(tape: &'t Tape, params: &ModelParams, trainable: bool) -> Weights<Var<'t>> {
    params.map(|t| tape.leaf(t.clone(), trainable))
}

fn check_tokens(config: &ModelConfig, tokens: &[usize]) -> Result<()> {
    if tokens.len() != config.seq_len {
        return Err(Error::Input(format!(
            "expected {} tokens, got {}",
            config.seq_len,
            tokens.len()
        )));
    }
    if let Some(&t) = tokens.iter().find(|&&t| t >= config.vocab_size) {
        return Err(Error::Input(format!(
            "token {t} out of range for vocabulary of {}",
            config.vocab_size
        )));
    }
    Ok(())
}

pub fn forward_trace<'t>(params: &Weights<Var<'t>>, config: &ModelConfig, tokens: &[usize]) -> Result<ForwardTrace<'t>> {
    let opts = AttentionOptions {
        evidence: config.evidence,
        ..Default::default()
    };
    forward_trace_with(params, config, tokens, opts)
}

pub fn forward_trace_with<'t>(
    params: &Weights<Var<'t>>,
    config: &ModelConfig,
    tokens: &[usize],
    opts: AttentionOptions,
) -> Result<ForwardTrace<'t>> {
    check_tokens(config, tokens)?;
    let pe = sinusoidal_positions(tokens.len(), config.d_model);
    let mut x = params.embedding.gather_rows(tokens)?.add_const(&pe)?;
    let mut layer_vacuity = Vec::new();
    for layer in &params.layers {
        let h = x.layer_norm(layer.norm1_scale, layer.norm1_bias, LAYER_NORM_EPS)?;
        let attn = multi_head_attention(h, &layer.attn, config.mechanism, None, opts)?;
        x = x.add(attn.output)?;
        if let Some(u) = attn.head_vacuity {
            layer_vacuity.push(u);
        }
        let h = x.layer_norm(layer.norm2_scale, layer.norm2_bias, LAYER_NORM_EPS)?;
        let f = h
            .matmul(layer.ffn_w1)?
            .add_row_bias(layer.ffn_b1)?
            .gelu()
            .matmul(layer.ffn_w2)?
            .add_row_bias(layer.ffn_b2)?;
        x = x.add(f)?;
    }
    let logits = x.mean_rows()?.matmul(params.head_w)?.add_row_bias(params.head_b)?;
    Ok(ForwardTrace { logits, layer_vacuity })
}

/// Value-level classifier output.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierOutput {
    pub logits: Tensor,
    pub layer_vacuity: Vec<Tensor>,
    /// Mean final-layer vacuity; `None` in standard mode or without layers.
    pub model_uncertainty: Option<f64>,
}

impl ClassifierOutput {
    /// Highest-scoring class, ties to the lowest index.
    pub fn predicted(&self) -> usize {
        argmax(self.logits.data())
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    (0..v.len()).fold(0, |best, j| if v[j] > v[best] { j } else { best })
}

impl<'t> ForwardTrace<'t> {
    pub fn to_output(&self) -> ClassifierOutput {
        let layer_vacuity: Vec<Tensor> = self.layer_vacuity.iter().map(Var::value).collect();
        let model_uncertainty = layer_vacuity.last().map(Tensor::mean);
        let logits = self.logits.value();
        let n = logits.len();
        ClassifierOutput {
            logits: logits.reshape(vec![n]).expect("same size"),
            layer_vacuity,
            model_uncertainty,
        }
    }
}

pub fn forward_classify(params: &ModelParams, config: &ModelConfig, tokens: &[usize]) -> Result<ClassifierOutput> {
    let tape = Tape::new();
    let vars = params_on_tape(&tape, params, false);
    Ok(forward_trace(&vars, config, tokens)?.to_output())
}

/// Mean vacuity over all heads and query positions of the final layer.
pub fn model_uncertainty(output: &ClassifierOutput) -> Result<f64> {
    output
        .layer_vacuity
        .last()
        .map(Tensor::mean)
        .ok_or_else(|| Error::Contract("model uncertainty requires a credal-mode output with at least one layer".into()))
}

impl fmt::Display for ModelConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} encoder: vocab {}, L {}, d_model {}, d_ff {}, {} heads, {} layers, {} classes",
            self.mechanism,
            self.vocab_size,
            self.seq_len,
            self.d_model,
            self.d_ff,
            self.n_heads,
            self.n_layers,
            self.n_classes
        )
    }
}

#[cfg(test)]
mod tests;
