use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};

use sdh_harness::config::{seeds_from_env, ExperimentConfig};
use sdh_harness::plot::{line_chart, plot_metrics, Series};
use sdh_harness::verify::{counterexample, Suite};
use sdh_harness::{envs, run};
use sdh_core::oracle::counterexample_objectives;

// A closed stdout (e.g. piped into `head`) is not an error.
macro_rules! out {
    ($($t:tt)*) => {{
        use std::io::Write;
        match writeln!(std::io::stdout().lock(), $($t)*) {
            Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => {}
            r => r?,
        }
    }};
}

#[derive(Parser)]
#[command(name = "sdh", version, about = "Stochastic decision horizon experiments and checks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every seed of a config; SDH_SEED (comma-separated) overrides the seed list.
    Run {
        config: PathBuf,
        /// Output directory; defaults to the config's `output_dir`.
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Run a property suite and print a JSON report. Exits nonzero on failure.
    Verify {
        #[arg(value_enum)]
        suite: Suite,
    },
    /// Plot every metric of the matching metrics files, one SVG per metric.
    Plot {
        pattern: String,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Closed-form oracles.
    Oracle {
        #[command(subcommand)]
        which: OracleCommand,
    },
    /// Named environments.
    Env {
        #[command(subcommand)]
        which: EnvCommand,
    },
}

#[derive(Subcommand)]
enum OracleCommand {
    /// Argmax of J_AS and J_AS-N on the one-state counterexample.
    Counterexample {
        #[arg(long, default_value_t = 0.9)]
        gamma: f64,
        #[arg(long, default_value_t = 1.0)]
        kappa: f64,
        #[arg(long, default_value_t = 0.4)]
        r: f64,
        /// Also plot both objectives over the continue probability.
        #[arg(long)]
        svg: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum EnvCommand {
    /// Print an environment as an inline MDP config block.
    Export {
        #[arg(value_parser = clap::builder::PossibleValuesParser::new(envs::NAMES))]
        name: String,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match dispatch(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Run { config, out } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(seeds) = seeds_from_env()? {
                cfg.seeds = seeds;
            }
            let dir = out.unwrap_or_else(|| cfg.output_dir.clone());
            let summary = run::run(&cfg, &dir)?;
            out!("{}", serde_json::to_string_pretty(&summary)?);
            Ok(ExitCode::SUCCESS)
        }
        Command::Verify { suite } => {
            let reports = suite.run()?;
            let passed = reports.iter().all(|r| r.passed);
            out!("{}", serde_json::to_string_pretty(&reports)?);
            Ok(if passed { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
        Command::Plot { pattern, out } => {
            for p in plot_metrics(&pattern, &out)? {
                out!("{}", p.display());
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Oracle { which: OracleCommand::Counterexample { gamma, kappa, r, svg } } => {
            let res = counterexample(gamma, kappa, r)?;
            out!("{}", serde_json::to_string_pretty(&res)?);
            if let Some(path) = svg {
                let grid: Vec<f64> = (1..1000).map(|i| i as f64 / 1000.0).collect();
                let vals = grid
                    .iter()
                    .map(|&p| counterexample_objectives(p, gamma, kappa, r).map(|v| (p, v)))
                    .collect::<Result<Vec<_>, _>>()?;
                let series = [
                    Series { label: "J_AS".into(), points: vals.iter().map(|(p, v)| (*p, v.0)).collect() },
                    Series { label: "J_AS-N".into(), points: vals.iter().map(|(p, v)| (*p, v.1)).collect() },
                ];
                line_chart(&path, "counterexample objectives", "continue probability", &series, false, None)
                    .with_context(|| format!("plotting {}", path.display()))?;
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Env { which: EnvCommand::Export { name } } => {
            let spec = envs::named(&name).context("unknown environment")?;
            let inline = envs::EnvSpec::Inline { mdp: spec.build()? };
            out!("{}", serde_json::to_string_pretty(&inline)?);
            Ok(ExitCode::SUCCESS)
        }
    }
}
