// SPDX-License-Identifier: Apache-2.0

//! Seeded token sequences of three kinds.
//!
//! * ID: two affine templates over tokens `0..32`, class 0 `(3i + 5) mod 32`
//!   and class 1 `(5i + 2) mod 32`, with each token independently replaced
//!   by a uniform draw from `0..32` with probability `noise_prob`.
//! * OOD: i.i.d. uniform tokens from the same range `0..32`.
//! * Nonsense: i.i.d. uniform tokens from `32..64`, never seen in training.
//!
//! Sequence `n` of a stream is drawn from its own generator seeded with
//! `derive_seed(seed, stream << 32 | n)`, so any subset can be regenerated
//! independently.

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_from;

/// Tokens `0..PATTERN_VOCAB` carry ID and OOD data.
pub const PATTERN_VOCAB: usize = 32;
/// Nonsense tokens come from `PATTERN_VOCAB..NONSENSE_END`.
pub const NONSENSE_END: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Kind {
    #[serde(rename = "ID")]
    Id,
    #[serde(rename = "OOD")]
    Ood,
    Nonsense,
}

impl Kind {
    pub const ALL: [Kind; 3] = [Kind::Id, Kind::Ood, Kind::Nonsense];

    pub fn as_str(self) -> &'static str {
        match self {
            Kind::Id => "ID",
            Kind::Ood => "OOD",
            Kind::Nonsense => "Nonsense",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledSequence {
    pub kind: Kind,
    /// Class index for ID sequences.
    pub label: Option<usize>,
    pub tokens: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub seq_len: usize,
    pub vocab: usize,
    /// ID training sequences.
    pub n_train: usize,
    /// Evaluation sequences per kind.
    pub n_eval: usize,
    pub noise_prob: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            seq_len: 16,
            vocab: 64,
            n_train: 2000,
            n_eval: 500,
            noise_prob: 0.15,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

#[repr(u64)]
enum Stream {
    IdTrain = 1,
    IdEval = 2,
    Ood = 3,
    Nonsense = 4,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.noise_prob) {
            return Err(Error::Config(format!("noise_prob {} outside [0, 1]", self.noise_prob)));
        }
        if self.seq_len == 0 {
            return Err(Error::Config("seq_len must be at least 1".into()));
        }
        if self.vocab < NONSENSE_END {
            return Err(Error::Config(format!(
                "vocab {} too small: nonsense tokens need {NONSENSE_END}",
                self.vocab
            )));
        }
        Ok(())
    }
}

/// Noise-free class template.
pub fn id_template(class: usize, len: usize) -> Vec<usize> {
    let (a, b) = match class {
        0 => (3, 5),
        _ => (5, 2),
    };
    (0..len).map(|i| (a * i + b) % PATTERN_VOCAB).collect()
}

fn sequences(n: usize, seed: u64, stream: Stream, mut make: impl FnMut(usize, &mut rand_chacha::ChaCha8Rng) -> LabeledSequence) -> Vec<LabeledSequence> {
    let tag = (stream as u64) << 32;
    (0..n)
        .map(|i| {
            let mut rng = rng_from(seed, tag | i as u64);
            make(i, &mut rng)
        })
        .collect()
}

/// Balanced ID sequences: sequence `n` has class `n % 2`.
pub fn gen_id(spec: &DatasetSpec, split: Split) -> Result<Vec<LabeledSequence>> {
    if !(0.0..=1.0).contains(&spec.noise_prob) {
        return Err(Error::Config(format!("noise_prob {} outside [0, 1]", spec.noise_prob)));
    }
    let (n, stream) = match split {
        Split::Train => (spec.n_train, Stream::IdTrain),
        Split::Eval => (spec.n_eval, Stream::IdEval),
    };
    Ok(sequences(n, spec.seed, stream, |i, rng| {
        let class = i % 2;
        let tokens = id_template(class, spec.seq_len)
            .into_iter()
            .map(|t| {
                if rng.random_bool(spec.noise_prob) {
                    rng.random_range(0..PATTERN_VOCAB)
                } else {
                    t
                }
            })
            .collect();
        LabeledSequence {
            kind: Kind::Id,
            label: Some(class),
            tokens,
        }
    }))
}

pub fn gen_ood(spec: &DatasetSpec) -> Result<Vec<LabeledSequence>> {
    Ok(sequences(spec.n_eval, spec.seed, Stream::Ood, |_, rng| LabeledSequence {
        kind: Kind::Ood,
        label: None,
        tokens: (0..spec.seq_len).map(|_| rng.random_range(0..PATTERN_VOCAB)).collect(),
    }))
}

pub fn gen_nonsense(spec: &DatasetSpec) -> Result<Vec<LabeledSequence>> {
    if spec.vocab < NONSENSE_END {
        return Err(Error::Config(format!(
            "vocab {} too small: nonsense tokens need {NONSENSE_END}",
            spec.vocab
        )));
    }
    Ok(sequences(spec.n_eval, spec.seed, Stream::Nonsense, |_, rng| LabeledSequence {
        kind: Kind::Nonsense,
        label: None,
        tokens: (0..spec.seq_len)
            .map(|_| rng.random_range(PATTERN_VOCAB..NONSENSE_END))
            .collect(),
    }))
}

/// Held-out sequences of every kind.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalSets {
    pub id: Vec<LabeledSequence>,
    pub ood: Vec<LabeledSequence>,
    pub nonsense: Vec<LabeledSequence>,
}

impl EvalSets {
    pub fn generate(spec: &DatasetSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self {
            id: gen_id(spec, Split::Eval)?,
            ood: gen_ood(spec)?,
            nonsense: gen_nonsense(spec)?,
        })
    }

    pub fn get(&self, kind: Kind) -> &[LabeledSequence] {
        match kind {
            Kind::Id => &self.id,
            Kind::Ood => &self.ood,
            Kind::Nonsense => &self.nonsense,
        }
    }
}

/// Writes one JSON record `{"kind", "label", "tokens"}` per line.
pub fn write_jsonl<W: Write>(mut w: W, seqs: &[LabeledSequence]) -> Result<()> {
    for s in seqs {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl(text: &str) -> Result<Vec<LabeledSequence>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

#[cfg(test)]
mod tests {
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    use super::*;

    fn spec(noise: f64) -> DatasetSpec {
        DatasetSpec {
            seq_len: 4,
            noise_prob: noise,
            n_train: 10,
            n_eval: 10,
            seed: 3,
            ..Default::default()
        }
    }

    #[test]
    fn noise_free_templates() {
        let id = gen_id(&spec(0.0), Split::Train).unwrap();
        assert_eq!(id[0].tokens, vec![5, 8, 11, 14]);
        assert_eq!(id[0].label, Some(0));
        assert_eq!(id[1].tokens, vec![2, 7, 12, 17]);
        assert_eq!(id[1].label, Some(1));
        assert_eq!(id_template(0, 16)[15], (3 * 15 + 5) % 32);
    }

    #[test]
    fn classes_are_balanced() {
        let id = gen_id(&DatasetSpec::default(), Split::Train).unwrap();
        let ones = id.iter().filter(|s| s.label == Some(1)).count();
        assert_eq!(ones * 2, id.len());
    }

    #[test]
    fn generation_is_seed_deterministic() {
        let s = DatasetSpec::default();
        assert_eq!(gen_ood(&s).unwrap(), gen_ood(&s).unwrap());
        assert_eq!(gen_id(&s, Split::Eval).unwrap(), gen_id(&s, Split::Eval).unwrap());
        let other = DatasetSpec { seed: 1, ..s.clone() };
        assert_ne!(gen_nonsense(&s).unwrap(), gen_nonsense(&other).unwrap());
        assert_ne!(gen_id(&s, Split::Train).unwrap()[..500], gen_id(&s, Split::Eval).unwrap()[..]);
    }

    fn chi_square_uniform(tokens: impl Iterator<Item = usize>, lo: usize, bins: usize) -> f64 {
        let mut counts = vec![0usize; bins];
        let mut n = 0;
        for t in tokens {
            assert!((lo..lo + bins).contains(&t), "token {t} out of range");
            counts[t - lo] += 1;
            n += 1;
        }
        let expected = n as f64 / bins as f64;
        let stat: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        1.0 - ChiSquared::new((bins - 1) as f64).unwrap().cdf(stat)
    }

    fn big(seed: u64) -> DatasetSpec {
        // 6250 sequences of 16 tokens = 10^5 tokens.
        DatasetSpec {
            n_eval: 6250,
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn ood_tokens_are_uniform_on_pattern_range() {
        let ood = gen_ood(&big(17)).unwrap();
        let p = chi_square_uniform(ood.iter().flat_map(|s| s.tokens.iter().copied()), 0, 32);
        assert!(p > 0.01, "p = {p}");
    }

    #[test]
    fn nonsense_tokens_are_uniform_on_unseen_range() {
        let ns = gen_nonsense(&big(17)).unwrap();
        let p = chi_square_uniform(ns.iter().flat_map(|s| s.tokens.iter().copied()), 32, 32);
        assert!(p > 0.01, "p = {p}");
        assert!(ns.iter().all(|s| s.label.is_none() && s.kind == Kind::Nonsense));
    }

    #[test]
    fn full_noise_is_uniform_like_ood() {
        let s = DatasetSpec {
            noise_prob: 1.0,
            n_train: 6250,
            seed: 4,
            ..Default::default()
        };
        let id = gen_id(&s, Split::Train).unwrap();
        let p = chi_square_uniform(id.iter().flat_map(|s| s.tokens.iter().copied()), 0, 32);
        assert!(p > 0.01, "p = {p}");
    }

    #[test]
    fn id_and_nonsense_never_share_tokens() {
        let s = DatasetSpec { noise_prob: 0.5, ..Default::default() };
        let id = gen_id(&s, Split::Train).unwrap();
        let ns = gen_nonsense(&s).unwrap();
        assert!(id.iter().flat_map(|s| &s.tokens).all(|&t| t < PATTERN_VOCAB));
        assert!(ns.iter().flat_map(|s| &s.tokens).all(|&t| t >= PATTERN_VOCAB));
    }

    #[test]
    fn small_vocab_rejected_for_nonsense() {
        let s = DatasetSpec { vocab: 40, ..Default::default() };
        assert!(matches!(gen_nonsense(&s), Err(Error::Config(_))));
        let s = DatasetSpec { noise_prob: 1.5, ..Default::default() };
        assert!(gen_id(&s, Split::Train).is_err());
    }

    #[test]
    fn bigram_logistic_probe_separates_classes() {
        let s = DatasetSpec::default();
        let train = gen_id(&s, Split::Train).unwrap();
        let test = gen_id(&s, Split::Eval).unwrap();
        let features = |seq: &LabeledSequence| -> Vec<usize> {
            seq.tokens.windows(2).map(|w| w[0] * 32 + w[1]).collect()
        };
        let mut w = vec![0.0; 32 * 32];
        let mut b = 0.0;
        for _ in 0..5 {
            for seq in &train {
                let f = features(seq);
                let z: f64 = b + f.iter().map(|&i| w[i]).sum::<f64>();
                let p = 1.0 / (1.0 + (-z).exp());
                let g = p - seq.label.unwrap() as f64;
                for &i in &f {
                    w[i] -= 0.1 * g;
                }
                b -= 0.1 * g;
            }
        }
        let correct = test
            .iter()
            .filter(|seq| {
                let z: f64 = b + features(seq).iter().map(|&i| w[i]).sum::<f64>();
                (z > 0.0) == (seq.label == Some(1))
            })
            .count();
        let acc = correct as f64 / test.len() as f64;
        assert!(acc > 0.9, "probe accuracy {acc}");
    }

    #[test]
    fn jsonl_schema() {
        let seqs = gen_id(&spec(0.0), Split::Train).unwrap();
        let mut buf = Vec::new();
        write_jsonl(&mut buf, &seqs[..1]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "{\"kind\":\"ID\",\"label\":0,\"tokens\":[5,8,11,14]}\n");
        assert_eq!(read_jsonl(&text).unwrap(), seqs[..1]);
        let mut buf = Vec::new();
        write_jsonl(&mut buf, &gen_ood(&spec(0.0)).unwrap()[..1]).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("{\"kind\":\"OOD\",\"label\":null"));
    }
}
