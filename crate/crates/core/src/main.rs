use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use cogchain::agents::EpisodeMetrics;
use cogchain::env::{write_trace_row, Environment, TRACE_HEADER};
use cogchain::harness::experiment::{run_experiment_with, run_sweep_with};
use cogchain::harness::{run_validation, ExperimentConfig, ValidationOptions};
use cogchain::rng::{derive, stream};

#[derive(Parser)]
#[command(name = "cogchain", version, about = "Train and evaluate transaction-scheduling agents")]
struct Cli {
    /// Output directory used when neither --out nor experiment.out_dir is given.
    #[arg(long, env = "COGCHAIN_OUT", default_value = "out", global = true)]
    default_out: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the configured agent and write learning curves.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train once per value of one config key and write a summary.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        key: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the oracle suites.
    Validate {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Dump a per-slot trajectory under a uniformly random policy.
    Trace {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        slots: usize,
        #[arg(long)]
        seed: Option<u64>,
        /// Destination file; standard output when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load(path: &Path, seed: Option<u64>) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn out_dir(cli_out: Option<PathBuf>, cfg: &ExperimentConfig, fallback: &Path) -> PathBuf {
    cli_out.or_else(|| cfg.out_dir.clone()).unwrap_or_else(|| fallback.to_path_buf())
}

fn progress(every: usize) -> impl FnMut(usize, &EpisodeMetrics) {
    move |rep, m| {
        if (m.episode + 1) % every == 0 {
            eprintln!(
                "replicate {rep} episode {:>6}: reward {:>9.2} successes {:>5} eps {:.3}",
                m.episode + 1,
                m.total_reward,
                m.successes,
                m.epsilon
            );
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    match cli.command {
        Command::Train { config, seed, out } => {
            let cfg = load(&config, seed)?;
            let dir = out_dir(out, &cfg, &cli.default_out);
            let every = (cfg.episodes / 20).max(1);
            let result = run_experiment_with(&cfg, Some(&dir), &mut progress(every))?;
            for run in &result.runs {
                let c = run.convergence;
                println!(
                    "replicate {}: converged reward {:.3} at episode {}{}",
                    run.replicate,
                    c.reward,
                    c.episode,
                    if c.fallback { " (fallback)" } else { "" }
                );
            }
            let (mean, se) = result.converged_reward();
            println!("mean converged reward {mean:.3} +/- {se:.3}; files in {}", dir.display());
            Ok(true)
        }
        Command::Sweep { config, key, values, seed, out } => {
            let cfg = load(&config, seed)?;
            let dir = out_dir(out, &cfg, &cli.default_out);
            let every = (cfg.episodes / 10).max(1);
            let sweep = run_sweep_with(&cfg, &key, &values, Some(&dir), &mut progress(every))?;
            println!("{key},converged_mean_reward,converged_stderr,mean_convergence_episode,fallbacks");
            for r in &sweep.rows {
                println!(
                    "{},{:.4},{:.4},{:.1},{}",
                    r.value, r.converged_mean, r.converged_stderr, r.mean_convergence_episode, r.fallbacks
                );
            }
            Ok(true)
        }
        Command::Validate { seed } => {
            let report = run_validation(&ValidationOptions { seed, ..Default::default() })?;
            print!("{report}");
            Ok(report.all_passed())
        }
        Command::Trace { config, slots, seed, out } => {
            if slots == 0 {
                bail!("--slots must be at least 1");
            }
            let cfg = load(&config, seed)?;
            let mut env_cfg = cfg.env_config()?;
            env_cfg.slots = slots;
            let mut env = Environment::new(env_cfg)?;
            env.reset(derive(cfg.seed, &[0]));
            let mut policy = stream(derive(cfg.seed, &[1]));
            let mut sink: Box<dyn Write> = match out {
                Some(p) => Box::new(BufWriter::new(File::create(&p).with_context(|| format!("creating {}", p.display()))?)),
                None => Box::new(BufWriter::new(std::io::stdout().lock())),
            };
            writeln!(sink, "{TRACE_HEADER}")?;
            for slot in 0..slots {
                let action = rand::Rng::gen_range(&mut policy, 0..env.num_actions());
                let step = env.step(action)?;
                write_trace_row(&mut sink, slot, &step.info, step.reward)?;
            }
            sink.flush()?;
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
