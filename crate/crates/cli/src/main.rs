use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use vefia_core::audit::{dsr, min_detectable_k, monte_carlo_dsr, AuditParams};
use vefia_core::harness::{
    run_end_to_end, scale_parties, sweep_lambda, write_scale_csv, write_sweep_csv, ExperimentConfig,
};
use vefia_core::pipeline::{optimize_blocks, CostModel, DEFAULT_MAX_BLOCKS};

#[derive(Parser)]
#[command(name = "vefia", version, about = "Audited vertical federated inference simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train, provision, audit one query and write the report.
    Run {
        config: PathBuf,
        /// Overrides the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    #[command(subcommand)]
    Audit(AuditCommand),
    #[command(subcommand)]
    Pipeline(PipelineCommand),
    #[command(subcommand)]
    Sweep(SweepCommand),
    #[command(subcommand)]
    Scale(ScaleCommand),
}

#[derive(Subcommand)]
enum AuditCommand {
    /// Probability that a W-sample catches a K-fraction of abnormal inferences.
    Dsr {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        w: f64,
        #[arg(long)]
        k: f64,
        /// Also estimate by simulation with this many trials.
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Smallest abnormal ratio detected with at least the target rate.
    Mink {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        w: f64,
        #[arg(long, default_value_t = 0.9999)]
        target: f64,
    },
}

#[derive(Subcommand)]
enum PipelineCommand {
    /// Best block count and its schedule (CSV on stdout).
    Optimize {
        #[arg(long)]
        samples: usize,
        #[arg(long, default_value_t = DEFAULT_MAX_BLOCKS)]
        max_b: usize,
        /// Experiment config whose cost model to use.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum SweepCommand {
    /// Histogram MI and accuracy per λ (CSV).
    Lambda {
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum ScaleCommand {
    /// Audit time with several data parties, relative to one (CSV).
    Parties {
        config: PathBuf,
        /// Comma-separated; defaults to the config's partyCounts.
        #[arg(long, value_delimiter = ',')]
        counts: Option<Vec<usize>>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn output(path: &Option<PathBuf>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(std::fs::File::create(p).with_context(|| format!("creating {}", p.display()))?),
        None => Box::new(std::io::stdout()),
    })
}

fn load(path: &PathBuf) -> Result<ExperimentConfig> {
    ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))
}

/// Returns whether any audited batch was flagged.
fn execute(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Run { config, out } => {
            let mut cfg = load(&config)?;
            if out.is_some() {
                cfg.output_dir = out;
            }
            let s = run_end_to_end(&cfg)?;
            println!("config {}", s.config_digest);
            println!(
                "query {} served accuracy {:.4} acceptance {:.4}",
                s.query_size, s.query_accuracy, s.acceptance_accuracy
            );
            for p in &s.parties {
                let r = &p.report;
                println!(
                    "party {} W*={:.4} sampled {} blocks {} inconsistent {} flagged {} tUn={:.6} tTrScaled={:.6} tTrSampled={:.6}",
                    p.party,
                    p.w_star,
                    p.sampled,
                    p.blocks,
                    r.inconsistent_count(),
                    r.flagged,
                    r.latency.t_un,
                    r.latency.t_tr_scaled,
                    p.t_tr_sampled
                );
            }
            if let Some(dir) = &cfg.output_dir {
                println!("outputs in {}", dir.display());
            }
            Ok(s.flagged)
        }
        Command::Audit(AuditCommand::Dsr { n, w, k, trials, seed }) => {
            let params = AuditParams::new(n, w, k)?;
            println!(
                "dsr {} (sampled {}, abnormal {})",
                dsr(&params),
                params.sample_count(),
                params.abnormal_count()
            );
            if let Some(t) = trials {
                let mc = monte_carlo_dsr(&params, t, seed)?;
                println!("simulated {} ± {} over {} trials", mc.probability, mc.std_error, mc.trials);
            }
            Ok(false)
        }
        Command::Audit(AuditCommand::Mink { n, w, target }) => {
            let t = min_detectable_k(n, w, target)?;
            println!("minK {} ({} of {n}) dsr {}", t.k, t.count, t.dsr);
            Ok(false)
        }
        Command::Pipeline(PipelineCommand::Optimize { samples, max_b, config }) => {
            let cost = match &config {
                Some(p) => load(p)?.cost,
                None => CostModel::default(),
            };
            let (b, schedule) = optimize_blocks(&cost, samples, max_b)?;
            eprintln!("B* = {b}, makespan {}", schedule.makespan);
            schedule.write_csv(std::io::stdout())?;
            Ok(false)
        }
        Command::Sweep(SweepCommand::Lambda { config, out }) => {
            let rows = sweep_lambda(&load(&config)?)?;
            write_sweep_csv(&rows, output(&out)?)?;
            Ok(false)
        }
        Command::Scale(ScaleCommand::Parties { config, counts, out }) => {
            let cfg = load(&config)?;
            let counts = counts.unwrap_or_else(|| cfg.party_counts.clone());
            let rows = scale_parties(&cfg, &counts)?;
            write_scale_csv(&rows, output(&out)?)?;
            Ok(false)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match execute(Cli::parse()) {
        Ok(false) => ExitCode::SUCCESS,
        Ok(true) => {
            log::warn!("audit flagged at least one batch");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
