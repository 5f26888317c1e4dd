use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use demar_cli::config;
use demar_cli::eval::run_eval;
use demar_cli::runner::{run_train, TrainOutcome};
use demar_cli::sweep::{run_sweep, SweepOutcome};
use demar_cli::verify::run_verify;

const EXIT_OK: u8 = 0;
const EXIT_USAGE: u8 = 1;
const EXIT_DIVERGED: u8 = 2;
const EXIT_VERIFY_FAILED: u8 = 3;

#[derive(Parser)]
#[command(name = "demar", about = "Multiagent value-mixing Q-learning lab: train, verify, sweep, eval")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a training loop and write metrics.csv + final.ckpt.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        threads: usize,
    },
    /// Run an analysis oracle: eq5 | lemma1 | theorem1 | theorem1_elu | gradcheck.
    Verify {
        which: String,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        samples: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        threads: usize,
    },
    /// Staged hyperparameter search (stage 1: regularizer, 2: mixer ensemble, 3: utility ensemble).
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        stage: u8,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        threads: usize,
    },
    /// Evaluate a checkpoint with exploration off.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        episodes: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        threads: usize,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // Let clap print help/version normally; anything else is usage.
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::from(EXIT_OK) };
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_USAGE)
        }
    }
}

fn run(cli: Cli) -> demar::error::Result<u8> {
    match cli.cmd {
        Cmd::Train { config: path, seed, out, threads: _ } => {
            let cfg = config::load(&path)?;
            match run_train(&cfg, seed, &out)? {
                TrainOutcome::Completed => {
                    println!("completed: metrics at {}", out.join("metrics.csv").display());
                    Ok(EXIT_OK)
                }
                TrainOutcome::Diverged { step } => {
                    println!("diverged at step {step}: partial metrics at {}", out.join("metrics.csv").display());
                    Ok(EXIT_DIVERGED)
                }
            }
        }
        Cmd::Verify { which, seed, samples, out, threads } => {
            let report = run_verify(&which, seed, samples, threads)?;
            report.print();
            if let Some(dir) = out {
                report.write_csv(&dir.join("report.csv"))?;
            }
            if report.all_pass() {
                println!("verify {which}: all checks passed");
                Ok(EXIT_OK)
            } else {
                println!("verify {which}: FAILED");
                Ok(EXIT_VERIFY_FAILED)
            }
        }
        Cmd::Sweep { config: path, stage, seed, out, threads } => {
            let cfg = config::load(&path)?;
            match run_sweep(&cfg, stage, seed, &out, threads)? {
                SweepOutcome::Chosen { stage, fragment, trials } => {
                    for t in &trials {
                        println!(
                            "trial {:10} final ratio {:<10.4} return {:<10.4}{}",
                            t.label,
                            t.summary.est_true_ratio,
                            t.summary.episode_return,
                            if t.summary.diverged { " (diverged)" } else { "" }
                        );
                    }
                    println!("stage {stage} choice:\n{fragment}");
                    Ok(EXIT_OK)
                }
                SweepOutcome::Unresolved { stage, best, trials } => {
                    for t in &trials {
                        println!(
                            "trial {:10} final ratio {:<10.4} return {:<10.4}{}",
                            t.label,
                            t.summary.est_true_ratio,
                            t.summary.episode_return,
                            if t.summary.diverged { " (diverged)" } else { "" }
                        );
                    }
                    println!("stage {stage} unresolved; best trial: {best}");
                    Ok(EXIT_OK)
                }
            }
        }
        Cmd::Eval { checkpoint, config: path, episodes, seed, out, threads: _ } => {
            let cfg = config::load(&path)?;
            let r = run_eval(&checkpoint, &cfg, episodes, seed, out.as_deref())?;
            println!(
                "episodes {} | return {:.4} ± {:.4} | est {:.4} true {:.4} ratio {:.4}",
                r.episodes, r.mean_return, r.return_ci, r.est_qtot, r.true_qtot, r.est_true_ratio
            );
            Ok(EXIT_OK)
        }
    }
}
