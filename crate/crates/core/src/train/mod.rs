// SPDX-License-Identifier: Apache-2.0

//! Cross-entropy training of the encoder on ID data, uncertainty evaluation,
//! abstention and the model-level gradient check.

mod eval;
mod gradcheck;
mod optim;

use std::io::Write;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use eval::{
    abstain_decision, abstention_rate, abstention_sweep, evaluate_uncertainty, score_examples, sweep_thresholds,
    Decision, ExampleScore, KindStats, UncertaintyReport,
};
pub use gradcheck::{gradient_check_model, GradCheckOptions, GradCheckReport, ParamError};
pub use optim::{adam_step, adam_update, AdamConfig, AdamState};

use crate::autodiff::{Tape, Var};
use crate::data::{Kind, LabeledSequence};
use crate::error::{Error, Result};
use crate::model::{argmax, forward_trace, init_params, params_on_tape, ModelConfig, ModelParams, Weights};
use crate::rng::rng_from;
use crate::tensor::Tensor;

/// Examples per gradient chunk. Chunk gradients are summed in chunk order,
/// so results do not depend on the thread count.
const CHUNK: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Worker threads for batch gradients.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            epochs: 20,
            batch_size: 32,
            learning_rate: adam.learning_rate,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            seed: 0,
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.threads == 0 {
            return Err(Error::Config("threads must be at least 1".into()));
        }
        self.adam().validate()
    }
}

/// `-log softmax(logits)[label]`.
pub fn cross_entropy_loss<'t>(logits: Var<'t>, label: usize) -> Result<Var<'t>> {
    logits.cross_entropy(label)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean cross-entropy over the epoch, before each batch's update.
    pub loss: f64,
    /// Training accuracy, before each batch's update.
    pub accuracy: f64,
    /// Mean final-layer vacuity in credal mode.
    pub mean_u: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub log: Vec<EpochLog>,
}

/// Sums gathered while computing one chunk's gradient.
struct ChunkResult {
    grads: Weights<Tensor>,
    loss: f64,
    correct: usize,
    u_sum: f64,
}

/// Gradient of `Σ_chunk CE / batch_len` for one chunk of examples.
fn chunk_gradient(
    params: &ModelParams,
    config: &ModelConfig,
    chunk: &[&LabeledSequence],
    batch_len: usize,
) -> Result<ChunkResult> {
    let tape = Tape::new();
    let vars = params_on_tape(&tape, params, true);
    let mut losses = Vec::with_capacity(chunk.len());
    let (mut correct, mut u_sum) = (0, 0.0);
    for seq in chunk {
        let label = seq
            .label
            .ok_or_else(|| Error::Contract("training sequences need labels".into()))?;
        let trace = forward_trace(&vars, config, &seq.tokens)?;
        if argmax(trace.logits.value_ref().data()) == label {
            correct += 1;
        }
        if let Some(u) = trace.layer_vacuity.last() {
            u_sum += u.value_ref().mean();
        }
        losses.push(cross_entropy_loss(trace.logits, label)?);
    }
    let stacked = tape.stack_rows(&losses)?;
    let loss_sum = stacked.value_ref().sum();
    let objective = stacked.sum().scale(1.0 / batch_len as f64);
    tape.backward(objective)?;
    let grads = vars.map(|v| v.grad().unwrap_or_else(|| Tensor::zeros(&v.shape())));
    Ok(ChunkResult {
        grads,
        loss: loss_sum,
        correct,
        u_sum,
    })
}

fn batch_gradient(
    params: &ModelParams,
    config: &ModelConfig,
    batch: &[&LabeledSequence],
    threads: usize,
) -> Result<ChunkResult> {
    let chunks: Vec<&[&LabeledSequence]> = batch.chunks(CHUNK).collect();
    let results: Vec<Result<ChunkResult>> = if threads <= 1 || chunks.len() == 1 {
        chunks
            .iter()
            .map(|c| chunk_gradient(params, config, c, batch.len()))
            .collect()
    } else {
        let mut slots: Vec<Option<Result<ChunkResult>>> = (0..chunks.len()).map(|_| None).collect();
        std::thread::scope(|s| {
            let per = chunks.len().div_ceil(threads);
            for (cs, out) in chunks.chunks(per).zip(slots.chunks_mut(per)) {
                s.spawn(move || {
                    for (c, o) in cs.iter().zip(out.iter_mut()) {
                        *o = Some(chunk_gradient(params, config, c, batch.len()));
                    }
                });
            }
        });
        slots.into_iter().map(|r| r.expect("every chunk computed")).collect()
    };

    let mut iter = results.into_iter();
    let mut total = iter.next().expect("non-empty batch")?;
    for r in iter {
        let r = r?;
        for (acc, g) in total.grads.values_mut().into_iter().zip(r.grads.named()) {
            for (a, x) in acc.data_mut().iter_mut().zip(g.1.data()) {
                *a += x;
            }
        }
        total.loss += r.loss;
        total.correct += r.correct;
        total.u_sum += r.u_sum;
    }
    Ok(total)
}

/// Minimizes mean cross-entropy over `dataset` (ID sequences only) with
/// Adam. Deterministic given the two configs.
pub fn train(model_config: &ModelConfig, train_config: &TrainConfig, dataset: &[LabeledSequence]) -> Result<TrainOutcome> {
    model_config.validate()?;
    train_config.validate()?;
    if let Some(bad) = dataset.iter().find(|s| s.kind != Kind::Id || s.label.is_none()) {
        return Err(Error::Contract(format!(
            "training data must be labelled ID sequences, found {}",
            bad.kind.as_str()
        )));
    }
    let mut params = init_params(model_config)?;
    let mut state = AdamState::new(&params);
    let adam = train_config.adam();
    let credal = model_config.mechanism == crate::Mechanism::Credal && model_config.n_layers > 0;
    let mut log = Vec::with_capacity(train_config.epochs);
    let mut order: Vec<usize> = (0..dataset.len()).collect();

    for epoch in 1..=train_config.epochs {
        order.shuffle(&mut rng_from(train_config.seed, epoch as u64));
        let (mut loss, mut correct, mut u_sum) = (0.0, 0, 0.0);
        for (b, idx) in order.chunks(train_config.batch_size).enumerate() {
            let batch: Vec<&LabeledSequence> = idx.iter().map(|&i| &dataset[i]).collect();
            let r = batch_gradient(&params, model_config, &batch, train_config.threads)?;
            if !r.loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch: b,
                    loss: r.loss,
                });
            }
            adam_step(&mut params, &r.grads, &mut state, &adam)?;
            loss += r.loss;
            correct += r.correct;
            u_sum += r.u_sum;
        }
        let n = dataset.len().max(1) as f64;
        log.push(EpochLog {
            epoch,
            loss: loss / n,
            accuracy: correct as f64 / n,
            mean_u: credal.then_some(u_sum / n),
        });
    }
    Ok(TrainOutcome { params, log })
}

/// One JSON object per epoch, one per line.
pub fn write_log_jsonl<W: Write>(mut w: W, log: &[EpochLog]) -> Result<()> {
    for e in log {
        serde_json::to_writer(&mut w, e)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}
