//! Pipeline driver: each subcommand runs one stage over a single config
//! file, with a few flag overrides for sweeps. Progress goes to stderr;
//! artifacts go to files under the configured output directory.
//!
//! Exit codes: 0 success, 1 invalid input (bad flags, bad config, bad
//! data), 2 runtime failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use segsearch_core::pipeline::{self, Method, PipelineConfig};
use segsearch_core::Error;

#[derive(Parser)]
#[command(
    name = "segsearch",
    version,
    about = "Segment a time-series corpus, caption it, train a dual encoder, and evaluate text-driven segment retrieval"
)]
struct Cli {
    /// Pipeline config file (TOML or JSON)
    #[arg(long, global = true, default_value = "config.toml")]
    config: PathBuf,

    /// Override the config's global seed
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Override the config's output directory
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

/// Overrides for the evaluation sweep dimensions.
#[derive(Args, Debug, Default)]
struct SweepArgs {
    /// Candidate pool size(s); repeat the flag for a sweep
    #[arg(long = "pool-size")]
    pool_size: Vec<usize>,

    /// Ranking method(s): learned, random
    #[arg(long = "method")]
    method: Vec<String>,

    /// Depth of the ranked output list
    #[arg(long)]
    k: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Extract and normalize windows from the raw series corpus
    Windows,
    /// Segment every window into boundary pairs
    Segment,
    /// Caption every captionable segment
    Caption,
    /// Train the projection heads on the train/val pairs
    Train,
    /// Embed the test segments into the retrieval index
    Index,
    /// Rank candidates for the persisted query set
    Query(SweepArgs),
    /// Compute the metric suite from ranked results
    Eval(SweepArgs),
    /// The whole pipeline: windows through eval
    RunAll(SweepArgs),
}

fn apply_sweep(cfg: &mut PipelineConfig, sweep: &SweepArgs) -> Result<(), Error> {
    if !sweep.pool_size.is_empty() {
        cfg.eval.pool_sizes = sweep.pool_size.clone();
    }
    if !sweep.method.is_empty() {
        cfg.eval.methods = sweep
            .method
            .iter()
            .map(|m| m.parse::<Method>())
            .collect::<Result<_, _>>()?;
    }
    if let Some(k) = sweep.k {
        if k == 0 {
            return Err(Error::InvalidInput("--k must be >= 1".into()));
        }
        cfg.eval.k_list = vec![k];
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Error> {
    let mut cfg = PipelineConfig::load(&cli.config)?;
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    if let Some(out_dir) = cli.out_dir {
        cfg.out_dir = out_dir;
    }

    match cli.command {
        Command::Windows => {
            let n = pipeline::cmd_windows(&cfg)?;
            log::info!("wrote {n} window(s) to {}", cfg.out_dir.join("windows").display());
        }
        Command::Segment => {
            let (windows, captionable) = pipeline::cmd_segment(&cfg)?;
            log::info!("segmented {windows} window(s); {captionable} captionable segment(s)");
        }
        Command::Caption => {
            let n = pipeline::cmd_caption(&cfg)?;
            log::info!("wrote {n} segment-caption pair(s)");
        }
        Command::Train => {
            let (best_epoch, best_acc) = pipeline::cmd_train(&cfg)?;
            log::info!(
                "checkpoint at {} (best epoch {best_epoch}, val acc@1 {best_acc:.4})",
                cfg.checkpoint_path().display()
            );
        }
        Command::Index => {
            let n = pipeline::cmd_index(&cfg)?;
            log::info!("indexed {n} segment(s) at {}", cfg.index_path().display());
        }
        Command::Query(sweep) => {
            apply_sweep(&mut cfg, &sweep)?;
            let n = pipeline::cmd_query(&cfg)?;
            log::info!("wrote {n} ranked result file(s)");
        }
        Command::Eval(sweep) => {
            apply_sweep(&mut cfg, &sweep)?;
            let n = pipeline::cmd_eval(&cfg)?;
            log::info!("wrote {n} metrics report(s)");
        }
        Command::RunAll(sweep) => {
            apply_sweep(&mut cfg, &sweep)?;
            pipeline::cmd_run_all(&cfg)?;
            log::info!("pipeline complete; artifacts under {}", cfg.out_dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();

    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help/version are not errors
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0u8,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };

    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_invalid_input() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
