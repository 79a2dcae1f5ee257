use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use headrank_cli::commands::{self, Common, CorpusArgs};
use headrank_cli::CliResult;

#[derive(Parser)]
#[command(name = "headrank", version, about = "Decoding-free attention-head reranking")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// Run configuration (TOML); defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed, overriding the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Inference depth instead of the head set's l_max.
    #[arg(long = "depth-override")]
    depth_override: Option<usize>,
    /// Head list such as `L2-H1,L3-H0`, or a head-set file.
    #[arg(long)]
    heads: Option<String>,
    /// Number of core heads to select.
    #[arg(long)]
    k: Option<usize>,
}

impl From<&CommonArgs> for Common {
    fn from(a: &CommonArgs) -> Self {
        Common {
            config: a.config.clone(),
            seed: a.seed,
            out: a.out.clone(),
            depth_override: a.depth_override,
            heads: a.heads.clone(),
            k: a.k,
        }
    }
}

#[derive(Args, Clone)]
struct DataArgs {
    /// Corpus file (JSON lines).
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Qrels file for the corpus.
    #[arg(long)]
    qrels: Option<PathBuf>,
}

impl From<&DataArgs> for CorpusArgs {
    fn from(a: &DataArgs) -> Self {
        CorpusArgs {
            corpus: a.corpus.clone(),
            qrels: a.qrels.clone(),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic graded-relevance corpus.
    GenData {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Score every head on the training split and keep the top K.
    SelectHeads {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        data: DataArgs,
        /// Model checkpoint; a fresh initialization when omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Preference training of the core heads against a frozen reference.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Re-select heads on trained parameters and report the overlap.
    Recalibrate {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Rerank the test split and write a TREC run file.
    Rerank {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Compute ranking metrics for a run file.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        run: PathBuf,
    },
    /// Homogenization and promotion diagnostics for one or more runs.
    Diagnose {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        data: DataArgs,
        /// `name=path` or a path; repeatable.
        #[arg(long = "run", required = true)]
        runs: Vec<String>,
    },
    /// Token-level attention heatmap for one query.
    Visualize {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Rank columns to show, `name=path` or a path; repeatable.
        #[arg(long = "run")]
        runs: Vec<String>,
    },
    /// All phases in order into one directory.
    Pipeline {
        #[command(flatten)]
        common: CommonArgs,
    },
}

fn named(runs: &[String]) -> Vec<(String, PathBuf)> {
    runs.iter().map(|r| commands::parse_named_run(r)).collect()
}

fn run(cli: &Cli) -> CliResult<PathBuf> {
    let manifest_dir = |c: &CommonArgs| c.out.clone();
    match &cli.command {
        Command::GenData { common } => {
            commands::gen_data(&common.into())?;
            Ok(manifest_dir(common))
        }
        Command::SelectHeads { common, data, checkpoint } => {
            commands::select_heads_cmd(&common.into(), &data.into(), checkpoint.as_deref())?;
            Ok(manifest_dir(common))
        }
        Command::Train { common, data, checkpoint } => {
            commands::train_cmd(&common.into(), &data.into(), checkpoint.as_deref())?;
            Ok(manifest_dir(common))
        }
        Command::Recalibrate { common, data, checkpoint } => {
            commands::recalibrate_cmd(&common.into(), &data.into(), checkpoint)?;
            Ok(manifest_dir(common))
        }
        Command::Rerank { common, data, checkpoint } => {
            commands::rerank_cmd(&common.into(), &data.into(), checkpoint.as_deref())?;
            Ok(manifest_dir(common))
        }
        Command::Eval { common, data, run } => {
            commands::eval_cmd(&common.into(), &data.into(), run)?;
            Ok(manifest_dir(common))
        }
        Command::Diagnose { common, data, runs } => {
            commands::diagnose_cmd(&common.into(), &data.into(), &named(runs))?;
            Ok(manifest_dir(common))
        }
        Command::Visualize { common, data, checkpoint, runs } => {
            commands::visualize_cmd(&common.into(), &data.into(), checkpoint.as_deref(), &named(runs))?;
            Ok(manifest_dir(common))
        }
        Command::Pipeline { common } => {
            commands::pipeline(&common.into())?;
            Ok(manifest_dir(common))
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(dir) => {
            println!("wrote {}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", e.report_line());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
