// SPDX-License-Identifier: Apache-2.0

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::Mechanism;
use crate::autodiff::{relative_error, Tape};
use crate::error::{Error, Result};
use crate::model::{forward_trace, init_params, params_on_tape, ModelConfig, ModelParams};
use crate::rng::rng_from;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradCheckOptions {
    pub tolerance: f64,
    /// Central-difference step.
    pub h: f64,
    /// Sampled parameter scalars; clamped to the model size.
    pub n_params: usize,
    /// Random sequences in the loss.
    pub n_examples: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-4,
            h: 1e-5,
            n_params: 256,
            n_examples: 4,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamError {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub mechanism: Mechanism,
    pub n_checked: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
    /// Largest errors first.
    pub worst: Vec<ParamError>,
}

const WORST_KEPT: usize = 5;

type Example = (Vec<usize>, usize);

fn mean_loss(params: &ModelParams, config: &ModelConfig, examples: &[Example]) -> Result<f64> {
    let tape = Tape::new();
    let vars = params_on_tape(&tape, params, false);
    let mut total = 0.0;
    for (tokens, label) in examples {
        total += forward_trace(&vars, config, tokens)?.logits.cross_entropy(*label)?.item();
    }
    Ok(total / examples.len() as f64)
}

/// Compares backprop gradients of the mean cross-entropy over random
/// sequences against central differences on a random subset of parameters.
pub fn gradient_check_model(config: &ModelConfig, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    config.validate()?;
    if config.n_layers > 2 {
        return Err(Error::Config(format!(
            "gradient check is meant for small models (at most 2 layers), got {}",
            config.n_layers
        )));
    }
    if !(1e-7..=1e-3).contains(&opts.h) {
        return Err(Error::Input(format!("step h = {} outside [1e-7, 1e-3]", opts.h)));
    }
    if opts.n_examples == 0 || opts.n_params == 0 {
        return Err(Error::Config("gradient check needs at least one example and one parameter".into()));
    }

    let params = init_params(config)?;
    let mut rng = rng_from(opts.seed, 1);
    let examples: Vec<Example> = (0..opts.n_examples)
        .map(|_| {
            let tokens = (0..config.seq_len).map(|_| rng.random_range(0..config.vocab_size)).collect();
            (tokens, rng.random_range(0..config.n_classes))
        })
        .collect();

    let tape = Tape::new();
    let vars = params_on_tape(&tape, &params, true);
    let mut losses = Vec::with_capacity(examples.len());
    for (tokens, label) in &examples {
        losses.push(forward_trace(&vars, config, tokens)?.logits.cross_entropy(*label)?);
    }
    let loss = tape.stack_rows(&losses)?.mean();
    tape.backward(loss)?;
    let grads: Vec<_> = vars
        .named()
        .into_iter()
        .map(|(name, v)| (name, v.grad().expect("trainable leaf")))
        .collect();

    // Flat index over all scalars, in canonical tensor order.
    let offsets: Vec<usize> = grads
        .iter()
        .scan(0, |acc, (_, g)| {
            let start = *acc;
            *acc += g.len();
            Some(start)
        })
        .collect();
    let total = params.num_scalars();
    let mut picked = sample(&mut rng, total, opts.n_params.min(total)).into_vec();
    picked.sort_unstable();

    let mut errors = Vec::with_capacity(picked.len());
    let mut probe = params.clone();
    for flat in picked {
        let t = offsets.partition_point(|&o| o <= flat) - 1;
        let e = flat - offsets[t];
        let orig = probe.values_mut()[t].data()[e];
        probe.values_mut()[t].data_mut()[e] = orig + opts.h;
        let up = mean_loss(&probe, config, &examples)?;
        probe.values_mut()[t].data_mut()[e] = orig - opts.h;
        let down = mean_loss(&probe, config, &examples)?;
        probe.values_mut()[t].data_mut()[e] = orig;
        let numeric = (up - down) / (2.0 * opts.h);
        let analytic = grads[t].1.data()[e];
        errors.push(ParamError {
            name: grads[t].0.clone(),
            index: e,
            analytic,
            numeric,
            rel_error: relative_error(analytic, numeric),
        });
    }
    errors.sort_by(|a, b| b.rel_error.total_cmp(&a.rel_error));
    let max_rel_error = errors.first().map_or(0.0, |p| p.rel_error);
    let n_checked = errors.len();
    errors.truncate(WORST_KEPT);
    Ok(GradCheckReport {
        mechanism: config.mechanism,
        n_checked,
        max_rel_error,
        tolerance: opts.tolerance,
        passed: max_rel_error < opts.tolerance,
        worst: errors,
    })
}
