//! The `wchamfer` command line: IDF weights, training with model selection,
//! reranking, evaluation and synthetic recovery experiments.
//!
//! Exit codes: 0 on success, 1 for domain errors (bad data, failed
//! validation), 2 for usage and I/O errors.

use std::error::Error;
use std::ffi::OsString;
use std::fmt;
use std::io;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use wchamfer::weights::SpecialPolicy;

pub mod commands;
pub mod files;

pub use commands::{
    cmd_eval, cmd_idf, cmd_recover, cmd_rerank, cmd_synth, cmd_train, CandidateSource, EvalArgs, IdfArgs, RecoverArgs,
    RerankArgs, SynthArgs, SynthTask, TrainSettings, TrainSummary,
};
pub use files::ConfigFile;

/// Marks an error as the caller's fault (exit code 2).
#[derive(Debug, Clone)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl Error for UsageError {}

pub fn exit_code(err: &anyhow::Error) -> i32 {
    if err.chain().any(|e| e.is::<io::Error>() || e.is::<UsageError>()) {
        2
    } else {
        1
    }
}

#[derive(Debug, Parser)]
#[command(name = "wchamfer", version, about = "Weighted Chamfer reranking pipeline")]
pub struct Cli {
    /// Seed for every randomized step; overrides seeds in config files.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (defaults to the number of CPUs).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Config file for `train`, spec file for `synth` and `recover`.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SpecialArg {
    Zero,
    One,
}

impl From<SpecialArg> for SpecialPolicy {
    fn from(s: SpecialArg) -> Self {
        match s {
            SpecialArg::Zero => SpecialPolicy::Zero,
            SpecialArg::One => SpecialPolicy::One,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum TaskArg {
    Recovery,
    Fewshot,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Compute normalized IDF weights from a tokenized corpus.
    Idf(IdfCli),
    /// Learn weights, select between IDF and learned on validation.
    Train(TrainCli),
    /// Rerank first-stage candidates with a weight file.
    Rerank(RerankCli),
    /// Recall, MRR and nDCG of a run against qrels.
    Eval(EvalCli),
    /// Generate synthetic planted-weight data.
    Synth(SynthCli),
    /// Sweep exact weight recovery over sample counts.
    Recover(RecoverCli),
}

#[derive(Debug, Args)]
pub struct IdfCli {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "zero")]
    pub special: SpecialArg,
    /// Comma-separated special token ids.
    #[arg(long, default_value = "")]
    pub special_ids: String,
    /// Fraction of documents to count.
    #[arg(long, default_value_t = 1.0)]
    pub sample: f64,
    #[arg(long)]
    pub vocab_size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainCli {
    /// Same as the global `--config`.
    #[arg(value_name = "CONFIG")]
    pub config_file: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RerankCli {
    #[arg(long)]
    pub queries: PathBuf,
    #[arg(long)]
    pub docs: PathBuf,
    #[arg(long)]
    pub weights: PathBuf,
    /// First-stage run file; BM25 over `--corpus` when absent.
    #[arg(long)]
    pub candidates: Option<PathBuf>,
    /// Tokenized corpus for BM25; defaults to the document store's tokens.
    #[arg(long, conflicts_with = "candidates")]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1000)]
    pub k: usize,
    #[arg(long, default_value = "wchamfer")]
    pub tag: String,
}

#[derive(Debug, Args)]
pub struct EvalCli {
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long)]
    pub qrels: PathBuf,
    /// Comma-separated cutoffs.
    #[arg(long, default_value = "10,100")]
    pub k: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthCli {
    #[arg(long, value_enum, default_value = "recovery")]
    pub task: TaskArg,
    /// `key=value` spec; falls back to `--config`, then built-in defaults.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct RecoverCli {
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Comma-separated sample counts.
    #[arg(long, default_value = "64,128,256,512")]
    pub grid: String,
    #[arg(long, default_value_t = 20)]
    pub repeats: usize,
    #[arg(long)]
    pub out: PathBuf,
}

fn dispatch(cli: Cli) -> anyhow::Result<()> {
    let seed = cli.seed;
    match cli.command {
        Command::Idf(a) => {
            cmd_idf(&IdfArgs {
                corpus: a.corpus,
                out: a.out,
                special: a.special.into(),
                special_ids: files::parse_list(&a.special_ids, "special token id")?,
                sample: a.sample,
                vocab_size: a.vocab_size,
                seed: seed.unwrap_or(0),
            })?;
        }
        Command::Train(a) => {
            let path = a
                .config_file
                .or(cli.config)
                .ok_or_else(|| UsageError("train needs a config file".into()))?;
            let config = ConfigFile::load(&path)?;
            cmd_train(&TrainSettings::from_config(&config, seed)?)?;
        }
        Command::Rerank(a) => {
            cmd_rerank(&RerankArgs {
                queries: a.queries,
                docs: a.docs,
                weights: a.weights,
                candidates: match a.candidates {
                    Some(p) => CandidateSource::File(p),
                    None => CandidateSource::Bm25(a.corpus),
                },
                out: a.out,
                k: a.k,
                tag: a.tag,
            })?;
        }
        Command::Eval(a) => {
            cmd_eval(&EvalArgs {
                run: a.run,
                qrels: a.qrels,
                ks: files::parse_list(&a.k, "cutoff")?,
                out: a.out,
            })?;
        }
        Command::Synth(a) => {
            cmd_synth(&SynthArgs {
                task: match a.task {
                    TaskArg::Recovery => SynthTask::Recovery,
                    TaskArg::Fewshot => SynthTask::FewShot,
                },
                spec: a.spec.or(cli.config),
                out_dir: a.out_dir,
                seed,
            })?;
        }
        Command::Recover(a) => {
            cmd_recover(&RecoverArgs {
                spec: a.spec.or(cli.config),
                grid: files::parse_list(&a.grid, "sample count")?,
                repeats: a.repeats,
                out: a.out,
                seed,
            })?;
        }
    }
    Ok(())
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code. Errors are printed to stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return 2;
        }
        // A pool installed earlier in this process (tests) is kept.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}
