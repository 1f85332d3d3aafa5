// SPDX-License-Identifier: Apache-2.0

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::attention::Mechanism;
use crate::data::{EvalSets, Kind, LabeledSequence};
use crate::error::{Error, Result};
use crate::model::{argmax, forward_classify, ModelConfig, ModelParams};

/// Per-sequence evaluation record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExampleScore {
    pub kind: Kind,
    pub index: usize,
    pub label: Option<usize>,
    pub predicted: usize,
    pub uncertainty: f64,
}

fn require_credal(config: &ModelConfig) -> Result<()> {
    if config.mechanism != Mechanism::Credal {
        return Err(Error::Contract("uncertainty requires credal mode".into()));
    }
    if config.n_layers == 0 {
        return Err(Error::Contract("uncertainty requires at least one layer".into()));
    }
    Ok(())
}

/// Runs the classifier over `seqs` and records prediction and vacuity.
pub fn score_examples(params: &ModelParams, config: &ModelConfig, seqs: &[LabeledSequence]) -> Result<Vec<ExampleScore>> {
    require_credal(config)?;
    seqs.iter()
        .enumerate()
        .map(|(index, seq)| {
            let out = forward_classify(params, config, &seq.tokens)?;
            let uncertainty = out.model_uncertainty.expect("credal mode with layers");
            Ok(ExampleScore {
                kind: seq.kind,
                index,
                label: seq.label,
                predicted: out.predicted(),
                uncertainty,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KindStats {
    pub kind: Kind,
    pub n: usize,
    pub mean_u: f64,
    /// Sample standard deviation (n − 1); 0 for a single example.
    pub std_u: f64,
}

impl KindStats {
    fn from_values(kind: Kind, us: &[f64]) -> Self {
        let n = us.len();
        let mean_u = if n == 0 { f64::NAN } else { us.iter().sum::<f64>() / n as f64 };
        let std_u = if n < 2 {
            0.0
        } else {
            (us.iter().map(|u| (u - mean_u).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        };
        Self { kind, n, mean_u, std_u }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyReport {
    pub id: KindStats,
    pub ood: KindStats,
    pub nonsense: KindStats,
    /// Accuracy on the labelled ID examples.
    pub id_accuracy: f64,
}

impl UncertaintyReport {
    pub fn from_scores(scores: &[ExampleScore]) -> Self {
        let values = |k: Kind| -> Vec<f64> { scores.iter().filter(|s| s.kind == k).map(|s| s.uncertainty).collect() };
        let labelled: Vec<&ExampleScore> = scores.iter().filter(|s| s.kind == Kind::Id && s.label.is_some()).collect();
        let correct = labelled.iter().filter(|s| s.label == Some(s.predicted)).count();
        Self {
            id: KindStats::from_values(Kind::Id, &values(Kind::Id)),
            ood: KindStats::from_values(Kind::Ood, &values(Kind::Ood)),
            nonsense: KindStats::from_values(Kind::Nonsense, &values(Kind::Nonsense)),
            id_accuracy: if labelled.is_empty() {
                f64::NAN
            } else {
                correct as f64 / labelled.len() as f64
            },
        }
    }

    pub fn kinds(&self) -> [&KindStats; 3] {
        [&self.id, &self.ood, &self.nonsense]
    }

    /// Relative gaps `(OOD − ID)/ID` and `(Nonsense − OOD)/OOD`.
    pub fn gaps(&self) -> (f64, f64) {
        (
            (self.ood.mean_u - self.id.mean_u) / self.id.mean_u,
            (self.nonsense.mean_u - self.ood.mean_u) / self.ood.mean_u,
        )
    }

    /// `ID < OOD < Nonsense`, each step at least `min_gap` relative to the
    /// smaller mean.
    pub fn ordering_holds(&self, min_gap: f64) -> bool {
        let (a, b) = self.gaps();
        a >= min_gap && b >= min_gap
    }

    pub const CSV_HEADER: [&'static str; 4] = ["kind", "n", "mean_u", "std_u"];

    /// One row per kind, then an `id_accuracy` row with empty std.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(Self::CSV_HEADER)?;
        for k in self.kinds() {
            out.write_record([
                k.kind.as_str().to_string(),
                k.n.to_string(),
                format!("{:.17e}", k.mean_u),
                format!("{:.17e}", k.std_u),
            ])?;
        }
        out.write_record([
            "id_accuracy".to_string(),
            self.id.n.to_string(),
            format!("{:.17e}", self.id_accuracy),
            String::new(),
        ])?;
        out.flush()?;
        Ok(())
    }
}

/// Mean vacuity per kind plus ID accuracy over the eval sets.
pub fn evaluate_uncertainty(params: &ModelParams, config: &ModelConfig, sets: &EvalSets) -> Result<UncertaintyReport> {
    require_credal(config)?;
    let mut scores = Vec::new();
    for kind in Kind::ALL {
        scores.extend(score_examples(params, config, sets.get(kind))?);
    }
    Ok(UncertaintyReport::from_scores(&scores))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Decision {
    Answer(usize),
    Abstain,
}

/// Abstain iff `uncertainty > tau`, otherwise answer the argmax (lowest index
/// on ties).
pub fn abstain_decision(logits: &[f64], uncertainty: f64, tau: f64) -> Decision {
    if uncertainty > tau {
        Decision::Abstain
    } else {
        Decision::Answer(argmax(logits))
    }
}

/// Fraction of `uncertainties` strictly above `tau`.
pub fn abstention_rate(uncertainties: &[f64], tau: f64) -> f64 {
    if uncertainties.is_empty() {
        return 0.0;
    }
    uncertainties.iter().filter(|&&u| u > tau).count() as f64 / uncertainties.len() as f64
}

/// `n` evenly spaced thresholds strictly inside (0, 1): `(i + 1)/(n + 1)`.
pub fn sweep_thresholds(n: usize) -> Vec<f64> {
    (0..n).map(|i| (i + 1) as f64 / (n + 1) as f64).collect()
}

/// `(tau, rate)` for each threshold.
pub fn abstention_sweep(uncertainties: &[f64], taus: &[f64]) -> Vec<(f64, f64)> {
    taus.iter().map(|&t| (t, abstention_rate(uncertainties, t))).collect()
}
