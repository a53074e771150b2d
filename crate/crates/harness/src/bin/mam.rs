use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mam_core::ModelKind;
use mam_harness::metrics::write_csv;
use mam_harness::run::CHECKPOINT_FILE;
use mam_harness::verify::report_json;
use mam_harness::{run_bench, run_eval, run_train, run_verify, Fault, HarnessError, Result, RunConfig};

#[derive(Parser)]
#[command(name = "mam", about = "Multi-agent Mamba policies: train, evaluate, benchmark, verify")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Configuration file (key = value lines); defaults apply without one.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Replaces the configured seed list.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Policy architecture.
    #[arg(long)]
    model: Option<ModelKind>,
}

#[derive(Subcommand)]
enum Command {
    /// Train on the configured environment; writes metrics.csv and final.ckpt per seed.
    Train(Common),
    /// Greedy evaluation of a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Defaults to <out>/seed_<seed>/final.ckpt.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Time joint-action decoding against the number of agents.
    Bench(Common),
    /// Run every verification suite and print a JSON report.
    Verify {
        #[command(flatten)]
        common: Common,
        /// Inject a known defect to demonstrate that the suites catch it.
        #[arg(long, value_parser = ["none", "zoh_scan"])]
        fault: Option<String>,
    },
}

fn resolve(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seeds = vec![s];
    }
    if let Some(o) = &c.out {
        cfg.out_dir = o.clone();
    }
    if let Some(k) = c.model {
        cfg.model.kind = k;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed_{seed}"))
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(c) => {
            let cfg = resolve(&c)?;
            for &seed in &cfg.seeds {
                let out = seed_dir(&cfg.out_dir, seed);
                let r = run_train(&cfg, seed, &out)?;
                println!(
                    "seed {seed}: {} updates, greedy return {:.3} -> {:.3} (optimum {}), metrics {}",
                    r.updates,
                    r.initial_return,
                    r.final_return,
                    r.optimum,
                    r.metrics_path.display()
                );
            }
        }
        Command::Eval { common, checkpoint } => {
            let cfg = resolve(&common)?;
            for &seed in &cfg.seeds {
                let path = checkpoint.clone().unwrap_or_else(|| seed_dir(&cfg.out_dir, seed).join(CHECKPOINT_FILE));
                let r = run_eval(&cfg, seed, &path)?;
                println!(
                    "seed {seed}: mean return {:.3} +/- {:.3} over {} episodes (optimum {})",
                    r.mean,
                    r.ci95,
                    r.returns.len(),
                    r.optimum
                );
            }
        }
        Command::Bench(c) => {
            let cfg = resolve(&c)?;
            let seed = cfg.seeds[0];
            let report = run_bench(&cfg, seed)?;
            let path = cfg.out_dir.join("bench.csv");
            write_csv(&path, &report.rows)?;
            for row in &report.rows {
                println!(
                    "{:>9} n={:<4} {:.3e} s/step (std {:.1e})",
                    row.model, row.n_agents, row.seconds_per_step, row.std_seconds
                );
            }
            for (kind, slope) in &report.slopes {
                println!("{kind}: log-log slope {slope:.3}");
            }
            println!("wrote {}", path.display());
        }
        Command::Verify { common, fault } => {
            let mut cfg = resolve(&common)?;
            if let Some(f) = fault {
                cfg.fault = f.parse::<Fault>().expect("validated by clap");
            }
            let report = run_verify(cfg.seeds[0], cfg.fault);
            println!("{}", report_json(&report)?);
            if !report.passed {
                let failed: Vec<&str> = report.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
                return Err(HarnessError::VerifyFailed(failed.join(", ")));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
