// SPDX-License-Identifier: Apache-2.0

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use credal::Mechanism;
use credal_cli::{
    artifacts, run_bench, run_experiment, run_gen_data, run_gradcheck, AtStage, ExperimentConfig, Overrides, Stage,
    StageError, ORDERING_MIN_GAP,
};

/// Exit code when a run completes but its check does not hold.
const EXIT_CHECK_FAILED: u8 = 1;
/// Exit code for configuration or stage errors.
const EXIT_ERROR: u8 = 2;

#[derive(Parser, Debug)]
#[command(name = "credal", version, about = "Credal attention experiments, gradient checks and benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate data, train on ID, evaluate uncertainty; exit 0 iff ID < OOD < Nonsense.
    Run(Common),
    /// Time both mechanisms for inference and a train step; write the comparison CSV.
    Bench(Common),
    /// Check model gradients against finite differences; exit 0 iff all pass.
    Gradcheck(Common),
    /// Dump the ID, OOD and Nonsense datasets as JSONL.
    GenData(Common),
}

#[derive(Args, Debug)]
struct Common {
    /// TOML experiment config.
    #[arg(long, env = "CREDAL_CONFIG")]
    config: Option<PathBuf>,
    /// Master seed.
    #[arg(long, env = "CREDAL_SEED")]
    seed: Option<u64>,
    /// Attention mechanism (for gradcheck: restrict to this one).
    #[arg(long, env = "CREDAL_MECHANISM")]
    mechanism: Option<Mechanism>,
    /// Output directory.
    #[arg(long = "out", env = "CREDAL_OUT")]
    out: Option<PathBuf>,
    /// Timed repetitions per benchmark (minimum 30).
    #[arg(long, env = "CREDAL_REPS")]
    reps: Option<usize>,
    /// Gradient check tolerance on the max relative error.
    #[arg(long, env = "CREDAL_TOLERANCE")]
    tolerance: Option<f64>,
}

impl Common {
    fn resolve(&self) -> Result<ExperimentConfig, StageError> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p).at(Stage::Config)?,
            None => ExperimentConfig::default(),
        };
        cfg.apply(&Overrides {
            seed: self.seed,
            mechanism: self.mechanism,
            out_dir: self.out.clone(),
            reps: self.reps,
            tolerance: self.tolerance,
        });
        cfg.resolve().at(Stage::Config)
    }
}

fn check(ok: bool) -> ExitCode {
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_CHECK_FAILED)
    }
}

fn execute(cli: Cli) -> Result<ExitCode, StageError> {
    match cli.command {
        Command::Run(c) => {
            let cfg = c.resolve()?;
            let out = run_experiment(&cfg)?;
            let r = &out.report;
            for k in r.kinds() {
                println!("{:<9} n={:<5} mean_U={:.6} std={:.6}", k.kind.as_str(), k.n, k.mean_u, k.std_u);
            }
            let (a, b) = r.gaps();
            println!("ID accuracy {:.4}", r.id_accuracy);
            println!(
                "gaps OOD/ID {:+.1}%, Nonsense/OOD {:+.1}% (need >= {:.0}% each): {}",
                a * 100.0,
                b * 100.0,
                ORDERING_MIN_GAP * 100.0,
                if out.ordering_holds { "ordering holds" } else { "ordering FAILS" }
            );
            println!("artifacts in {}", cfg.out_dir.display());
            Ok(check(out.ordering_holds))
        }
        Command::Bench(c) => {
            let cfg = c.resolve()?;
            let report = run_bench(&cfg)?;
            for p in &report.phases {
                println!(
                    "{:<10} standard {:>10.3} ms  credal {:>10.3} ms  overhead {:+.2}%",
                    p.phase.as_str(),
                    p.standard_median_ns as f64 * 1e-6,
                    p.credal_median_ns as f64 * 1e-6,
                    p.overhead_pct
                );
            }
            println!(
                "attention GFLOPs standard {:.6} credal {:.6} (diff {:+.3}%)",
                report.standard_flops.gflops(),
                report.credal_flops.gflops(),
                report.flop_rel_diff_pct
            );
            println!("wrote {}", cfg.out_dir.join(artifacts::BENCH_CSV).display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Gradcheck(c) => {
            let cfg = c.resolve()?;
            let mechanisms: Vec<Mechanism> = match c.mechanism {
                Some(m) => vec![m],
                None => Mechanism::ALL.to_vec(),
            };
            let reports = run_gradcheck(&cfg, &mechanisms)?;
            for r in &reports {
                println!(
                    "{:<8} {} params  max rel error {:.3e}  tolerance {:.1e}: {}",
                    r.mechanism.as_str(),
                    r.n_checked,
                    r.max_rel_error,
                    r.tolerance,
                    if r.passed { "pass" } else { "FAIL" }
                );
                if !r.passed {
                    for p in &r.worst {
                        println!(
                            "    {}[{}] analytic {:.6e} numeric {:.6e} rel {:.3e}",
                            p.name, p.index, p.analytic, p.numeric, p.rel_error
                        );
                    }
                }
            }
            Ok(check(reports.iter().all(|r| r.passed)))
        }
        Command::GenData(c) => {
            let cfg = c.resolve()?;
            for p in run_gen_data(&cfg)? {
                println!("wrote {}", p.display());
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error {e}");
            ExitCode::from(EXIT_ERROR)
        }
    }
}
