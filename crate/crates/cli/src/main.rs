use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use refscore::demo::{self, DemoSpec};
use refscore::pipeline::{ExperimentConfig, Overrides, Runner, Stage, StageStatus};
use refscore::Strategy;

/// Batch scoring of research articles with chat-completion models, plus the
/// statistics that compare those scores with expert gold standards.
#[derive(Parser)]
#[command(name = "refscore", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Completions per article, model and strategy.
    #[arg(long, global = true)]
    iterations: Option<u32>,
    /// Maximum requests in flight.
    #[arg(long, global = true)]
    concurrency: Option<usize>,
    #[arg(long, global = true, value_enum)]
    strategy: Option<StrategyArg>,
    /// Use the offline mock backend instead of live endpoints.
    #[arg(long, global = true)]
    mock: bool,
    #[arg(long, global = true)]
    cache_dir: Option<PathBuf>,
    /// Run directory (overrides `output_dir` in the config).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    Zero,
    Few,
    Both,
}

#[derive(Subcommand)]
enum Command {
    /// Load, filter and sample articles; copy gold standards into the run.
    Ingest,
    /// Build the prompt for every completion task.
    Prompt,
    /// Send tasks to the models (or the mock) and store raw responses.
    Score,
    /// Parse scores out of the raw responses.
    Extract,
    /// Correlations, cross-unit aggregates, averaging and sign tests.
    Analyze,
    /// Fusion table against each gold standard.
    Fuse,
    /// Term comparison between zero-shot and few-shot reports.
    Wata,
    /// Violin summaries and SVGs.
    Violin,
    /// Every stage in order.
    All,
    /// Write a synthetic dataset and a mock-mode config.
    Demo {
        /// Directory for the dataset.
        #[arg(long)]
        dir: PathBuf,
        /// Articles per unit of assessment.
        #[arg(long, default_value_t = 100)]
        per_unit: usize,
        /// Seed for the generated data.
        #[arg(long, default_value_t = DemoSpec::default().seed)]
        data_seed: u64,
    },
}

fn overrides(a: &RunArgs) -> Overrides {
    Overrides {
        seed: a.seed,
        iterations: a.iterations,
        concurrency: a.concurrency,
        strategies: a.strategy.map(|s| match s {
            StrategyArg::Zero => vec![Strategy::Zero],
            StrategyArg::Few => vec![Strategy::Few],
            StrategyArg::Both => vec![Strategy::Zero, Strategy::Few],
        }),
        mock: a.mock,
        cache_dir: a.cache_dir.clone(),
        out: a.out.clone(),
    }
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let stages: Vec<Stage> = match &cli.command {
        Command::Demo { dir, per_unit, data_seed } => {
            let spec = DemoSpec {
                per_unit: *per_unit,
                seed: *data_seed,
                ..DemoSpec::default()
            };
            let cfg = demo::write_demo(dir, &spec).with_context(|| format!("writing demo data to {}", dir.display()))?;
            println!("{}", cfg.display());
            return Ok(());
        }
        Command::Ingest => vec![Stage::Ingest],
        Command::Prompt => vec![Stage::Prompt],
        Command::Score => vec![Stage::Score],
        Command::Extract => vec![Stage::Extract],
        Command::Analyze => vec![Stage::Analyze],
        Command::Fuse => vec![Stage::Fuse],
        Command::Wata => vec![Stage::Wata],
        Command::Violin => vec![Stage::Violin],
        Command::All => Stage::ALL.to_vec(),
    };
    let Some(path) = &cli.run.config else {
        bail!("--config is required for this command");
    };
    let mut cfg = ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))?;
    cfg.apply(&overrides(&cli.run));
    let runner = Runner::new(cfg)?;
    let manifest = runner.run(&stages)?;
    for s in &manifest.stages {
        if !stages.contains(&s.stage) {
            continue;
        }
        let status = match s.status {
            StageStatus::Ok => "ok",
            StageStatus::Skipped => "skipped",
            StageStatus::Failed => "failed",
        };
        let counts: Vec<String> = s.counts.iter().map(|(k, v)| format!("{k}={v}")).collect();
        info!("{:<8} {status:<7} {}", s.stage.name(), counts.join(" "));
        if let Some(m) = &s.message {
            info!("         {m}");
        }
    }
    println!("{}", runner.out_dir().display());
    Ok(())
}
