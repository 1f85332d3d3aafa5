// SPDX-License-Identifier: Apache-2.0

//! Experiment orchestration behind the `credal` binary.
//!
//! Configuration is resolved as defaults < TOML file < `CREDAL_*`
//! environment variables < command-line flags. All randomness flows from the
//! master `seed`; the `seed` fields of the individual sections are
//! overwritten with values derived from it.

use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use credal::bench::{compare_report, time_mechanism, BenchConfig, CompareReport, Environment, Phase};
use credal::data::{gen_id, write_jsonl, DatasetSpec, EvalSets, Kind, Split};
use credal::model::save_checkpoint;
use credal::rng::derive_seed;
use credal::train::{
    abstention_sweep, gradient_check_model, score_examples, sweep_thresholds, train, write_log_jsonl, EpochLog,
    ExampleScore, GradCheckOptions, GradCheckReport,
};
use credal::{Mechanism, ModelConfig, TrainConfig, UncertaintyReport};
use serde::{Deserialize, Serialize};

pub const SCHEMA_VERSION: u32 = 1;
/// Minimum relative gap between consecutive kinds for `run` to succeed.
pub const ORDERING_MIN_GAP: f64 = 0.2;
/// Points in the abstention threshold sweep.
pub const SWEEP_POINTS: usize = 21;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DatasetSpec,
    pub bench: BenchConfig,
    pub gradcheck: GradCheckOptions,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            out_dir: PathBuf::from("out"),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            data: DatasetSpec::default(),
            bench: BenchConfig::default(),
            gradcheck: GradCheckOptions::default(),
        }
    }
}

/// Values that may come from flags or the environment.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub mechanism: Option<Mechanism>,
    pub out_dir: Option<PathBuf>,
    pub reps: Option<usize>,
    pub tolerance: Option<f64>,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, credal::Error> {
        let cfg: Self = toml::from_str(text).map_err(|e| credal::Error::Config(e.to_string()))?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(credal::Error::Config(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                cfg.schema_version
            )));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, credal::Error> {
        Self::from_toml_str(&fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(m) = o.mechanism {
            self.model.mechanism = m;
        }
        if let Some(d) = &o.out_dir {
            self.out_dir = d.clone();
        }
        if let Some(r) = o.reps {
            self.bench.reps = r;
        }
        if let Some(t) = o.tolerance {
            self.gradcheck.tolerance = t;
        }
    }

    /// Fills every section seed from the master seed and checks consistency.
    pub fn resolve(mut self) -> Result<Self, credal::Error> {
        self.model.seed = derive_seed(self.seed, 1);
        self.data.seed = derive_seed(self.seed, 2);
        self.train.seed = derive_seed(self.seed, 3);
        self.gradcheck.seed = derive_seed(self.seed, 4);
        self.bench.seed = derive_seed(self.seed, 5);
        if self.data.seq_len != self.model.seq_len || self.data.vocab != self.model.vocab_size {
            return Err(credal::Error::Config(format!(
                "data (L {}, vocab {}) does not match model (L {}, vocab {})",
                self.data.seq_len, self.data.vocab, self.model.seq_len, self.model.vocab_size
            )));
        }
        self.model.validate()?;
        self.train.validate()?;
        self.data.validate()?;
        Ok(self)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Config,
    Data,
    Train,
    Evaluate,
    Write,
    Gradcheck,
    Bench,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::Config => "config",
            Stage::Data => "data",
            Stage::Train => "train",
            Stage::Evaluate => "evaluate",
            Stage::Write => "write",
            Stage::Gradcheck => "gradcheck",
            Stage::Bench => "bench",
        };
        f.write_str(s)
    }
}

#[derive(Debug, thiserror::Error)]
#[error("[{stage}] {source}")]
pub struct StageError {
    pub stage: Stage,
    #[source]
    pub source: credal::Error,
}

pub trait AtStage<T> {
    fn at(self, stage: Stage) -> Result<T, StageError>;
}

impl<T, E: Into<credal::Error>> AtStage<T> for Result<T, E> {
    fn at(self, stage: Stage) -> Result<T, StageError> {
        self.map_err(|e| StageError {
            stage,
            source: e.into(),
        })
    }
}

fn create(path: &Path) -> Result<BufWriter<File>, StageError> {
    Ok(BufWriter::new(File::create(path).at(Stage::Write)?))
}

fn finish(mut w: BufWriter<File>) -> Result<(), StageError> {
    w.flush().at(Stage::Write)
}

pub const EXAMPLE_CSV_HEADER: [&str; 5] = ["kind", "index", "label", "predicted", "uncertainty"];

pub fn write_example_scores<W: Write>(w: W, scores: &[ExampleScore]) -> Result<(), credal::Error> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(EXAMPLE_CSV_HEADER)?;
    for s in scores {
        out.write_record([
            s.kind.as_str().to_string(),
            s.index.to_string(),
            s.label.map(|l| l.to_string()).unwrap_or_default(),
            s.predicted.to_string(),
            format!("{:.17e}", s.uncertainty),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// Abstention rate per kind and over all examples, for each threshold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub tau: f64,
    pub id: f64,
    pub ood: f64,
    pub nonsense: f64,
    pub all: f64,
}

pub fn abstention_table(scores: &[ExampleScore], taus: &[f64]) -> Vec<SweepRow> {
    let us = |k: Option<Kind>| -> Vec<f64> {
        scores
            .iter()
            .filter(|s| k.is_none_or(|k| s.kind == k))
            .map(|s| s.uncertainty)
            .collect()
    };
    let rates = |k| abstention_sweep(&us(k), taus);
    let (id, ood, non, all) = (rates(Some(Kind::Id)), rates(Some(Kind::Ood)), rates(Some(Kind::Nonsense)), rates(None));
    (0..taus.len())
        .map(|i| SweepRow {
            tau: taus[i],
            id: id[i].1,
            ood: ood[i].1,
            nonsense: non[i].1,
            all: all[i].1,
        })
        .collect()
}

pub fn write_abstention_csv<W: Write>(w: W, rows: &[SweepRow]) -> Result<(), credal::Error> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["tau", "id", "ood", "nonsense", "all"])?;
    for r in rows {
        out.write_record([r.tau, r.id, r.ood, r.nonsense, r.all].map(|v| format!("{v:.17e}")))?;
    }
    out.flush()?;
    Ok(())
}

pub mod artifacts {
    pub const CHECKPOINT: &str = "checkpoint.json";
    pub const TRAIN_LOG: &str = "train_log.jsonl";
    pub const REPORT_CSV: &str = "uncertainty_report.csv";
    pub const REPORT_JSON: &str = "uncertainty_report.json";
    pub const EXAMPLES_CSV: &str = "example_scores.csv";
    pub const ABSTENTION_CSV: &str = "abstention.csv";
    pub const BENCH_CSV: &str = "bench.csv";
    pub const BENCH_JSON: &str = "bench_summary.json";
    pub const GRADCHECK_JSON: &str = "gradcheck.json";
    pub const RESOLVED_CONFIG: &str = "config.toml";
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub report: UncertaintyReport,
    pub log: Vec<EpochLog>,
    pub scores: Vec<ExampleScore>,
    pub sweep: Vec<SweepRow>,
    pub ordering_holds: bool,
}

fn write_resolved(cfg: &ExperimentConfig) -> Result<(), StageError> {
    fs::create_dir_all(&cfg.out_dir).at(Stage::Write)?;
    fs::write(cfg.out_dir.join(artifacts::RESOLVED_CONFIG), cfg.to_toml_string()).at(Stage::Write)
}

/// Data generation, training on ID, uncertainty evaluation on all kinds and
/// artifact output under `cfg.out_dir`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutcome, StageError> {
    if cfg.model.mechanism != Mechanism::Credal {
        return Err(credal::Error::Contract("uncertainty requires credal mode".into())).at(Stage::Evaluate);
    }
    write_resolved(cfg)?;
    let train_set = gen_id(&cfg.data, Split::Train).at(Stage::Data)?;
    let sets = EvalSets::generate(&cfg.data).at(Stage::Data)?;

    let outcome = train(&cfg.model, &cfg.train, &train_set).at(Stage::Train)?;

    let mut scores = Vec::new();
    for kind in Kind::ALL {
        scores.extend(score_examples(&outcome.params, &cfg.model, sets.get(kind)).at(Stage::Evaluate)?);
    }
    let report = UncertaintyReport::from_scores(&scores);
    let sweep = abstention_table(&scores, &sweep_thresholds(SWEEP_POINTS));

    let dir = &cfg.out_dir;
    save_checkpoint(&dir.join(artifacts::CHECKPOINT), &cfg.model, &outcome.params).at(Stage::Write)?;
    let mut w = create(&dir.join(artifacts::TRAIN_LOG))?;
    write_log_jsonl(&mut w, &outcome.log).at(Stage::Write)?;
    finish(w)?;
    let mut w = create(&dir.join(artifacts::REPORT_CSV))?;
    report.write_csv(&mut w).at(Stage::Write)?;
    finish(w)?;
    let mut w = create(&dir.join(artifacts::REPORT_JSON))?;
    serde_json::to_writer_pretty(&mut w, &report).at(Stage::Write)?;
    finish(w)?;
    let mut w = create(&dir.join(artifacts::EXAMPLES_CSV))?;
    write_example_scores(&mut w, &scores).at(Stage::Write)?;
    finish(w)?;
    let mut w = create(&dir.join(artifacts::ABSTENTION_CSV))?;
    write_abstention_csv(&mut w, &sweep).at(Stage::Write)?;
    finish(w)?;

    Ok(RunOutcome {
        ordering_holds: report.ordering_holds(ORDERING_MIN_GAP),
        report,
        log: outcome.log,
        scores,
        sweep,
    })
}

/// Times both mechanisms in both phases and writes the comparison.
pub fn run_bench(cfg: &ExperimentConfig) -> Result<CompareReport, StageError> {
    cfg.bench.validate().at(Stage::Config)?;
    write_resolved(cfg)?;
    let mut results = Vec::new();
    for phase in Phase::ALL {
        for mechanism in Mechanism::ALL {
            results.push(time_mechanism(&cfg.bench, mechanism, phase, cfg.bench.reps).at(Stage::Bench)?);
        }
    }
    let report = compare_report(&results, &cfg.bench, Environment::detect()).at(Stage::Bench)?;
    let mut w = create(&cfg.out_dir.join(artifacts::BENCH_CSV))?;
    report.write_csv(&mut w).at(Stage::Write)?;
    finish(w)?;
    let mut w = create(&cfg.out_dir.join(artifacts::BENCH_JSON))?;
    serde_json::to_writer_pretty(&mut w, &report).at(Stage::Write)?;
    finish(w)?;
    Ok(report)
}

/// Model-level gradient check for each requested mechanism.
pub fn run_gradcheck(cfg: &ExperimentConfig, mechanisms: &[Mechanism]) -> Result<Vec<GradCheckReport>, StageError> {
    write_resolved(cfg)?;
    let reports = mechanisms
        .iter()
        .map(|&m| gradient_check_model(&cfg.model.with_mechanism(m), &cfg.gradcheck).at(Stage::Gradcheck))
        .collect::<Result<Vec<_>, _>>()?;
    let mut w = create(&cfg.out_dir.join(artifacts::GRADCHECK_JSON))?;
    serde_json::to_writer_pretty(&mut w, &reports).at(Stage::Write)?;
    finish(w)?;
    Ok(reports)
}

/// Writes every dataset as JSONL; returns the file paths.
pub fn run_gen_data(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>, StageError> {
    write_resolved(cfg)?;
    let sets = EvalSets::generate(&cfg.data).at(Stage::Data)?;
    let files = [
        ("id_train.jsonl", gen_id(&cfg.data, Split::Train).at(Stage::Data)?),
        ("id_eval.jsonl", sets.id),
        ("ood.jsonl", sets.ood),
        ("nonsense.jsonl", sets.nonsense),
    ];
    let mut paths = Vec::new();
    for (name, seqs) in files {
        let path = cfg.out_dir.join(name);
        let mut w = create(&path)?;
        write_jsonl(&mut w, &seqs).at(Stage::Write)?;
        finish(w)?;
        paths.push(path);
    }
    Ok(paths)
}
