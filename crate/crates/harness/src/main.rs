use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use bib_core::InteractionOrder;
use bib_harness::records::{read_summary, write_results, StepWriter, SUMMARY_FILE};
use bib_harness::report::rank_methods;
use bib_harness::task::{Task, TaskSpec};
use bib_harness::experiment::run_experiment_streaming;
use bib_harness::{ExperimentConfig, DEFAULT_OUTPUT_DIR, OUTPUT_DIR_ENV};
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "bib", version, about = "Bidirectional kernel-ridge sequence design experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Order {
    Linear,
    Pairwise,
    Nk,
}

impl From<Order> for InteractionOrder {
    fn from(o: Order) -> Self {
        match o {
            Order::Linear => InteractionOrder::Linear,
            Order::Pairwise => InteractionOrder::Pairwise,
            Order::Nk => InteractionOrder::Nk,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a landscape and its offline split.
    GenTask {
        #[arg(long)]
        seed: u64,
        /// Sequence length.
        #[arg(long = "L")]
        length: usize,
        /// Alphabet size.
        #[arg(long = "A")]
        alphabet: usize,
        #[arg(long, value_enum)]
        order: Order,
        /// Neighbourhood size of NK landscapes.
        #[arg(long, default_value_t = 4)]
        nk_k: usize,
        /// Offline split size.
        #[arg(long, default_value_t = 1000)]
        size: usize,
        /// Score quantile the split is drawn below.
        #[arg(long, default_value_t = 0.5)]
        cap: f64,
        /// Allow spaces above 2^20 sequences (bounds are then sampled).
        #[arg(long)]
        allow_large: bool,
        /// Uniform samples used to bound large spaces.
        #[arg(long, default_value_t = bib_core::landscape::DEFAULT_BOUND_SAMPLES)]
        bound_samples: usize,
        /// Destination directory [default: <output dir>/<order>-L<L>-A<A>-seed<seed>].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run an experiment file.
    Run {
        config: PathBuf,
        /// Worker threads (0 = all cores); overrides the config.
        #[arg(long)]
        workers: Option<usize>,
        /// Output directory; overrides the config and $BIB_OUTPUT_DIR.
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Rank methods across tasks from one or more run records.
    Report {
        /// summary.json files or run directories.
        #[arg(required = true)]
        records: Vec<PathBuf>,
    },
}

fn default_output_dir() -> PathBuf {
    std::env::var_os(OUTPUT_DIR_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_DIR))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::GenTask { seed, length, alphabet, order, nk_k, size, cap, allow_large, bound_samples, out } => {
            let order: InteractionOrder = order.into();
            let spec = TaskSpec {
                name: format!("{}-L{length}-A{alphabet}-seed{seed}", order.name()),
                seed,
                length,
                alphabet,
                order,
                nk_k,
                split_size: size,
                percentile_cap: cap,
                allow_large,
                bound_samples,
            };
            let dir = out.unwrap_or_else(|| default_output_dir().join(&spec.name));
            let task = Task::generate(&spec)?;
            task.write(&dir)?;
            print!("{}", task.header());
            Ok(ExitCode::SUCCESS)
        }
        Command::Run { config, workers, output_dir } => {
            let file = ExperimentConfig::load(&config)?;
            let base = config.parent().unwrap_or(Path::new("."));
            let experiment = file.resolve(base)?;
            let dir = output_dir.or(file.output_dir.clone()).unwrap_or_else(default_output_dir);
            let mut steps = StepWriter::create(&dir)?;
            let (candidates, summary) =
                run_experiment_streaming(&experiment, workers.unwrap_or(file.workers), |rows| steps.write(rows))?;
            steps.finish()?;
            write_results(&dir, &candidates, &summary)?;
            for t in &summary.tasks {
                println!("{} (bounds {})", t.task, t.bound_method);
                for m in &t.methods {
                    println!("  {:<20} {:.4} +- {:.4}", m.method, m.mean, m.std);
                }
            }
            println!("wrote {}", dir.display());
            if summary.incomplete {
                eprintln!("some trajectories aborted; see {}", dir.join(SUMMARY_FILE).display());
                return Ok(ExitCode::from(2));
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Report { records } => {
            let summaries = records
                .iter()
                .map(|p| {
                    let path = if p.is_dir() { p.join(SUMMARY_FILE) } else { p.clone() };
                    read_summary(&path)
                })
                .collect::<Result<Vec<_>>>()
                .context("loading records")?;
            print!("{}", rank_methods(&summaries)?.render());
            Ok(ExitCode::SUCCESS)
        }
    }
}
