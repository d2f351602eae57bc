use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use falsim::commands::{self, PlotInputs, SynthArgs};
use falsim::config::{parse_seeds, ExperimentConfig};
use falsim::{CliError, CliResult};
use falsim_core::data::{Alpha, PartitionSpec};
use falsim_core::evaluation::{Metric, DEFAULT_WIN_THRESHOLD};
use falsim_core::geometry::DEFAULT_TYPICALITY_K;

#[derive(Parser)]
#[command(
    name = "falsim",
    version,
    about = "Federated active learning simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a Gaussian-mixture train/test pair.
    Synth {
        #[arg(long, default_value_t = 10)]
        classes: usize,
        #[arg(long, default_value_t = 16)]
        dim: usize,
        /// Rows per class before the 80/20 train/test split.
        #[arg(long, default_value_t = 200)]
        per_class: usize,
        #[arg(long, default_value_t = 1.0)]
        spread: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Split a dataset across clients.
    Partition {
        #[arg(long)]
        dataset: PathBuf,
        /// Dirichlet concentration, or `uniform`.
        #[arg(long, default_value = "uniform")]
        alpha: Alpha,
        #[arg(long, default_value_t = 10)]
        clients: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output CSV of client_id,row_index.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run every seed of an experiment config.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides the config's seeds, e.g. `0,1,2,3` or `0..4`.
        #[arg(long)]
        seeds: Option<String>,
        /// Overrides the config's strategy.
        #[arg(long)]
        strategy: Option<String>,
    },
    /// Paired t-test comparison of results files.
    Compare {
        /// Results files; each strategy in them forms one group.
        #[arg(required = true)]
        results: Vec<PathBuf>,
        /// Reference strategy label (defaults to the first group).
        #[arg(long)]
        strategy: Option<String>,
        #[arg(long, default_value = "accuracy")]
        metric: Metric,
        #[arg(long, default_value_t = DEFAULT_WIN_THRESHOLD)]
        threshold: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Typicality shift between pooled and per-client neighbourhoods.
    Shift {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        partition: PathBuf,
        #[arg(long, default_value_t = DEFAULT_TYPICALITY_K)]
        k: usize,
        /// Typicality level used for the retention fraction.
        #[arg(long, default_value_t = 1.0)]
        threshold: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Turn results, summaries and histograms into plot-ready tables.
    Plotdata {
        #[arg(long = "results")]
        results: Vec<PathBuf>,
        #[arg(long = "summary")]
        summaries: Vec<PathBuf>,
        #[arg(long = "histogram")]
        histograms: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn execute(command: Command) -> CliResult<()> {
    match command {
        Command::Synth {
            classes,
            dim,
            per_class,
            spread,
            seed,
            out,
        } => {
            let (train, test) = commands::cmd_synth(&SynthArgs {
                num_classes: classes,
                dim,
                per_class,
                spread,
                seed,
                out_dir: out,
            })?;
            println!("{}\n{}", train.display(), test.display());
        }
        Command::Partition {
            dataset,
            alpha,
            clients,
            seed,
            out,
        } => {
            let spec = PartitionSpec {
                alpha,
                num_clients: clients,
                seed,
            };
            print!("{}", commands::cmd_partition(&dataset, &spec, &out)?);
        }
        Command::Run {
            config,
            out,
            seeds,
            strategy,
        } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(out) = out {
                cfg.output_dir = out;
            }
            if let Some(s) = seeds {
                cfg.seeds = parse_seeds(&s)?;
            }
            if let Some(s) = strategy {
                cfg.strategy = s.parse().map_err(CliError::from)?;
            }
            cfg.validate()?;
            let run = commands::cmd_run(&cfg)?;
            println!("{}\n{}", run.results.display(), run.selections.display());
        }
        Command::Compare {
            results,
            strategy,
            metric,
            threshold,
            out,
        } => {
            for r in commands::cmd_compare(&results, metric, strategy.as_deref(), threshold, &out)?
            {
                println!(
                    "{}\twin_rate={}\tdefeat_rate={}",
                    r.pair(),
                    r.win_rate,
                    r.defeat_rate
                );
            }
        }
        Command::Shift {
            dataset,
            partition,
            k,
            threshold,
            out,
        } => {
            let r = commands::cmd_shift(&dataset, &partition, k, threshold, &out)?;
            println!(
                "centralized_mean={}\tper_client_mean={}",
                r.centralized_mean, r.per_client_mean
            );
        }
        Command::Plotdata {
            results,
            summaries,
            histograms,
            out,
        } => {
            let inputs = PlotInputs {
                results,
                summaries,
                histograms,
            };
            for p in commands::cmd_plotdata(&inputs, &out)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}
