// SPDX-License-Identifier: Apache-2.0

//! Wall-clock timing of the encoder under each mechanism, plus the
//! comparison record.
//!
//! CSV schema (one row per timing or FLOP record):
//!
//! `kind,mechanism,phase,seq_len,d_model,n_heads,n_layers,reps,median_ms,p5_ms,p95_ms,overhead_pct,flops,gflops,flop_rel_diff_pct`
//!
//! `kind` is `timing` or `flops`. Timing rows leave the FLOP columns empty and
//! FLOP rows leave the timing columns and `phase` empty. `overhead_pct` is
//! relative to the standard mechanism in the same phase.

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::Mechanism;
use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::flops::{count_attention_flops, relative_flop_difference, FlopModel};
use crate::model::{forward_classify, forward_trace, init_params, params_on_tape, ModelConfig};
use crate::rng::rng_from;
use crate::train::{adam_step, AdamConfig, AdamState};

pub const MIN_REPS: usize = 30;
pub const MIN_WARMUP: usize = 5;
/// Medians below this are too close to timer granularity.
pub const MIN_MEDIAN_NS: u64 = 100_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Inference,
    TrainStep,
}

impl Phase {
    pub const ALL: [Phase; 2] = [Phase::Inference, Phase::TrainStep];

    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Inference => "inference",
            Phase::TrainStep => "train_step",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Phase::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown phase '{s}'")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub vocab_size: usize,
    pub seq_len: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub reps: usize,
    pub warmup: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            seq_len: 128,
            d_model: 256,
            d_ff: 512,
            n_heads: 4,
            n_layers: 1,
            reps: MIN_REPS,
            warmup: MIN_WARMUP,
            seed: 0,
        }
    }
}

impl BenchConfig {
    pub fn model(&self, mechanism: Mechanism) -> ModelConfig {
        ModelConfig {
            vocab_size: self.vocab_size,
            seq_len: self.seq_len,
            d_model: self.d_model,
            d_ff: self.d_ff,
            n_heads: self.n_heads,
            n_layers: self.n_layers,
            n_classes: 2,
            mechanism,
            seed: self.seed,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.reps < MIN_REPS {
            return Err(Error::Config(format!("reps must be at least {MIN_REPS}, got {}", self.reps)));
        }
        if self.warmup < MIN_WARMUP {
            return Err(Error::Config(format!(
                "warmup must be at least {MIN_WARMUP}, got {}",
                self.warmup
            )));
        }
        self.model(Mechanism::Credal).validate()
    }

    /// FLOPs of one attention layer at these dimensions.
    pub fn attention_flops(&self, mechanism: Mechanism) -> FlopModel {
        let d_head = self.d_model / self.n_heads;
        count_attention_flops(self.seq_len, d_head, d_head, self.n_heads, mechanism)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub mechanism: Mechanism,
    pub phase: Phase,
    pub seq_len: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub reps: usize,
    pub median_ns: u64,
    pub p5_ns: u64,
    pub p95_ns: u64,
}

/// Linear-interpolated quantile of sorted samples.
fn quantile(sorted: &[u64], q: f64) -> u64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    let frac = pos - lo as f64;
    (sorted[lo] as f64 + (sorted[hi] as f64 - sorted[lo] as f64) * frac).round() as u64
}

/// Median, p5 and p95 of raw durations.
pub fn summarize(samples: &[u64]) -> (u64, u64, u64) {
    let mut s = samples.to_vec();
    s.sort_unstable();
    (quantile(&s, 0.5), quantile(&s, 0.05), quantile(&s, 0.95))
}

/// Times `reps` iterations of one phase after `config.warmup` discarded ones.
/// Input tokens and initial parameters depend only on `config.seed`, so both
/// mechanisms see the same bits.
pub fn time_mechanism(config: &BenchConfig, mechanism: Mechanism, phase: Phase, reps: usize) -> Result<BenchResult> {
    let config = BenchConfig { reps, ..config.clone() };
    config.validate()?;
    let model = config.model(mechanism);
    let mut params = init_params(&model)?;
    let mut rng = rng_from(config.seed, 0xbe4c);
    let tokens: Vec<usize> = (0..model.seq_len).map(|_| rng.random_range(0..model.vocab_size)).collect();
    let adam = AdamConfig::default();
    let mut state = AdamState::new(&params);

    let mut samples = Vec::with_capacity(reps);
    for i in 0..config.warmup + reps {
        let start = Instant::now();
        match phase {
            Phase::Inference => {
                std::hint::black_box(forward_classify(&params, &model, &tokens)?);
            }
            Phase::TrainStep => {
                let tape = Tape::new();
                let vars = params_on_tape(&tape, &params, true);
                let loss = forward_trace(&vars, &model, &tokens)?.logits.cross_entropy(0)?;
                tape.backward(loss)?;
                let grads = vars.map(|v| v.grad().expect("trainable leaf"));
                drop(vars);
                adam_step(&mut params, &grads, &mut state, &adam)?;
            }
        }
        let elapsed = start.elapsed().as_nanos() as u64;
        if i >= config.warmup {
            samples.push(elapsed);
        }
    }
    let (median_ns, p5_ns, p95_ns) = summarize(&samples);
    if median_ns < MIN_MEDIAN_NS {
        return Err(Error::TimerResolution {
            median_ns,
            min_ns: MIN_MEDIAN_NS,
        });
    }
    Ok(BenchResult {
        mechanism,
        phase,
        seq_len: model.seq_len,
        d_model: model.d_model,
        n_heads: model.n_heads,
        n_layers: model.n_layers,
        reps,
        median_ns,
        p5_ns,
        p95_ns,
    })
}

/// Percent change of `other` over `baseline`.
pub fn overhead_pct(baseline_ns: u64, other_ns: u64) -> f64 {
    (other_ns as f64 / baseline_ns as f64 - 1.0) * 100.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub cpu: String,
    pub arch: String,
    pub os: String,
    pub profile: String,
    pub rustc: String,
    pub threads: usize,
}

impl Environment {
    pub fn detect() -> Self {
        let cpu = std::fs::read_to_string("/proc/cpuinfo")
            .ok()
            .and_then(|t| {
                t.lines()
                    .find(|l| l.starts_with("model name"))
                    .and_then(|l| l.split_once(':'))
                    .map(|(_, v)| v.trim().to_string())
            })
            .unwrap_or_else(|| "unknown".into());
        Self {
            cpu,
            arch: std::env::consts::ARCH.into(),
            os: std::env::consts::OS.into(),
            profile: if cfg!(debug_assertions) { "debug" } else { "release" }.into(),
            rustc: env!("CREDAL_RUSTC_VERSION").into(),
            threads: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseComparison {
    pub phase: Phase,
    pub standard_median_ns: u64,
    pub credal_median_ns: u64,
    pub overhead_pct: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub results: Vec<BenchResult>,
    pub phases: Vec<PhaseComparison>,
    pub standard_flops: FlopModel,
    pub credal_flops: FlopModel,
    pub n_layers: usize,
    pub flop_rel_diff_pct: f64,
    pub environment: Environment,
}

/// Pairs each phase's standard and credal results. Every phase present in
/// `results` needs both mechanisms, and at least one phase must be present.
pub fn compare_report(results: &[BenchResult], config: &BenchConfig, environment: Environment) -> Result<CompareReport> {
    let find = |m: Mechanism, p: Phase| results.iter().find(|r| r.mechanism == m && r.phase == p);
    let mut phases = Vec::new();
    for phase in Phase::ALL {
        match (find(Mechanism::Standard, phase), find(Mechanism::Credal, phase)) {
            (Some(s), Some(c)) => phases.push(PhaseComparison {
                phase,
                standard_median_ns: s.median_ns,
                credal_median_ns: c.median_ns,
                overhead_pct: overhead_pct(s.median_ns, c.median_ns),
            }),
            (None, None) => {}
            (s, _) => {
                let missing = if s.is_none() { Mechanism::Standard } else { Mechanism::Credal };
                return Err(Error::Report(format!("no {missing} result to pair with for phase {phase}")));
            }
        }
    }
    if phases.is_empty() {
        return Err(Error::Report("no benchmark results to compare".into()));
    }
    let standard_flops = config.attention_flops(Mechanism::Standard);
    let credal_flops = config.attention_flops(Mechanism::Credal);
    Ok(CompareReport {
        results: results.to_vec(),
        phases,
        flop_rel_diff_pct: relative_flop_difference(&standard_flops, &credal_flops) * 100.0,
        standard_flops,
        credal_flops,
        n_layers: config.n_layers,
        environment,
    })
}

pub const CSV_HEADER: [&str; 15] = [
    "kind",
    "mechanism",
    "phase",
    "seq_len",
    "d_model",
    "n_heads",
    "n_layers",
    "reps",
    "median_ms",
    "p5_ms",
    "p95_ms",
    "overhead_pct",
    "flops",
    "gflops",
    "flop_rel_diff_pct",
];

fn ms(ns: u64) -> String {
    format!("{:.6}", ns as f64 * 1e-6)
}

impl CompareReport {
    pub fn phase(&self, phase: Phase) -> Option<&PhaseComparison> {
        self.phases.iter().find(|p| p.phase == phase)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(CSV_HEADER)?;
        for r in &self.results {
            let overhead = match r.mechanism {
                Mechanism::Standard => 0.0,
                Mechanism::Credal => self.phase(r.phase).map_or(f64::NAN, |p| p.overhead_pct),
            };
            out.write_record([
                "timing".to_string(),
                r.mechanism.to_string(),
                r.phase.to_string(),
                r.seq_len.to_string(),
                r.d_model.to_string(),
                r.n_heads.to_string(),
                r.n_layers.to_string(),
                r.reps.to_string(),
                ms(r.median_ns),
                ms(r.p5_ns),
                ms(r.p95_ns),
                format!("{overhead:.3}"),
                String::new(),
                String::new(),
                String::new(),
            ])?;
        }
        for f in [&self.standard_flops, &self.credal_flops] {
            let total = f.scaled(self.n_layers as u64);
            let diff = match f.mechanism {
                Mechanism::Standard => 0.0,
                Mechanism::Credal => self.flop_rel_diff_pct,
            };
            out.write_record([
                "flops".to_string(),
                f.mechanism.to_string(),
                String::new(),
                f.seq_len.to_string(),
                (f.n_heads * f.d_k).to_string(),
                f.n_heads.to_string(),
                self.n_layers.to_string(),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
                total.to_string(),
                format!("{:.9}", total as f64 * 1e-9),
                format!("{diff:.6}"),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn result(mechanism: Mechanism, phase: Phase, median_ns: u64) -> BenchResult {
        BenchResult {
            mechanism,
            phase,
            seq_len: 128,
            d_model: 256,
            n_heads: 4,
            n_layers: 1,
            reps: 30,
            median_ns,
            p5_ns: median_ns,
            p95_ns: median_ns,
        }
    }

    fn env() -> Environment {
        Environment {
            cpu: "test".into(),
            arch: "x".into(),
            os: "y".into(),
            profile: "debug".into(),
            rustc: "rustc".into(),
            threads: 1,
        }
    }

    #[test]
    fn overhead_arithmetic() {
        assert!((overhead_pct(100_000_000, 104_400_000) - 4.4).abs() < 1e-9);
        assert_eq!(overhead_pct(7_000_000, 7_000_000), 0.0);
    }

    #[test]
    fn report_pairs_phases() {
        let rs = vec![
            result(Mechanism::Standard, Phase::Inference, 100_000_000),
            result(Mechanism::Credal, Phase::Inference, 104_400_000),
            result(Mechanism::Standard, Phase::TrainStep, 200_000_000),
            result(Mechanism::Credal, Phase::TrainStep, 200_000_000),
        ];
        let r = compare_report(&rs, &BenchConfig::default(), env()).unwrap();
        assert!((r.phase(Phase::Inference).unwrap().overhead_pct - 4.4).abs() < 1e-9);
        assert_eq!(r.phase(Phase::TrainStep).unwrap().overhead_pct, 0.0);
        assert!(r.flop_rel_diff_pct > 0.0 && r.flop_rel_diff_pct < 0.5);

        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], CSV_HEADER.join(","));
        assert_eq!(lines.iter().filter(|l| l.starts_with("timing,")).count(), 4);
        assert_eq!(lines.iter().filter(|l| l.starts_with("flops,")).count(), 2);
        assert!(lines[2].starts_with("timing,credal,inference,128,256,4,1,30,104.400000,"));
        assert!(lines[2].contains(",4.400,"));
    }

    #[test]
    fn missing_pairing_is_an_error() {
        let rs = vec![
            result(Mechanism::Standard, Phase::Inference, 1),
            result(Mechanism::Credal, Phase::Inference, 1),
            result(Mechanism::Credal, Phase::TrainStep, 1),
        ];
        let err = compare_report(&rs, &BenchConfig::default(), env()).unwrap_err();
        assert!(matches!(err, Error::Report(_)));
        assert!(compare_report(&[], &BenchConfig::default(), env()).is_err());
    }

    #[test]
    fn summary_order() {
        let samples: Vec<u64> = (1..=40).rev().collect();
        let (m, p5, p95) = summarize(&samples);
        assert!(p5 <= m && m <= p95);
        assert_eq!(m, 21); // 20.5 rounds up
        assert_eq!(p5, 3);
        assert_eq!(p95, 38);
    }

    #[test]
    fn too_few_reps_rejected() {
        let err = time_mechanism(&BenchConfig::default(), Mechanism::Credal, Phase::Inference, 5).unwrap_err();
        assert!(err.to_string().contains("at least 30"));
    }

    #[test]
    fn tiny_problem_hits_timer_floor() {
        let cfg = BenchConfig {
            seq_len: 2,
            d_model: 4,
            d_ff: 4,
            n_heads: 1,
            ..Default::default()
        };
        let err = time_mechanism(&cfg, Mechanism::Standard, Phase::Inference, 30).unwrap_err();
        assert!(matches!(err, Error::TimerResolution { .. }));
    }

    #[test]
    fn phase_names_round_trip() {
        for p in Phase::ALL {
            assert_eq!(p.as_str().parse::<Phase>().unwrap(), p);
        }
        assert!("warm".parse::<Phase>().is_err());
    }
}
