//! `memekit` command-line entry point.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(name = "memekit", version, about = "Templatic meme dataset toolkit")]
pub struct Cli {
    /// Pipeline config file (TOML or JSON).
    #[arg(long, global = true, env = "MEMEKIT_CONFIG")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// error, warn, info, debug or trace.
    #[arg(long, global = true)]
    pub log_level: Option<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
pub enum Command {
    /// Validate, filter, split and summarise a corpus manifest.
    #[command(subcommand)]
    Corpus(CorpusCmd),
    /// Annotate memes with a vision-language model.
    #[command(subcommand)]
    Annotate(AnnotateCmd),
    /// Find template/instance pairs and export verified ones.
    #[command(subcommand, name = "match")]
    Match(MatchCmd),
    /// Embed meme images or texts into an `.emb` store.
    Embed(EmbedArgs),
    /// Score text-to-meme and meme-to-text retrieval.
    EvalRetrieval(EvalRetrievalArgs),
    /// Contrastive fine-tuning of the trainable dual encoder.
    #[command(subcommand)]
    Finetune(FinetuneCmd),
    /// Score generated captions against references.
    EvalMetrics(EvalMetricsArgs),
    /// Run the blind survey and match verification service.
    ServeReview(ServeArgs),
    /// Offline management of the review data directory.
    #[command(subcommand)]
    Review(ReviewCmd),
    /// Write a release file joining memes, annotations and verified matches.
    Export(ExportArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Corpus(c) => match c {
                CorpusCmd::Validate(_) => "corpus validate",
                CorpusCmd::Filter(_) => "corpus filter",
                CorpusCmd::Split(_) => "corpus split",
                CorpusCmd::Stats(_) => "corpus stats",
            },
            Command::Annotate(_) => "annotate run",
            Command::Match(MatchCmd::Run(_)) => "match run",
            Command::Match(MatchCmd::Export(_)) => "match export",
            Command::Embed(_) => "embed",
            Command::EvalRetrieval(_) => "eval-retrieval",
            Command::Finetune(FinetuneCmd::Run(_)) => "finetune run",
            Command::Finetune(FinetuneCmd::Eval(_)) => "finetune eval",
            Command::EvalMetrics(_) => "eval-metrics",
            Command::ServeReview(_) => "serve-review",
            Command::Review(_) => "review",
            Command::Export(_) => "export",
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct CorpusArg {
    /// Corpus directory, or the memes manifest with templates.jsonl beside it.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
}

#[derive(Debug, Subcommand, Serialize)]
pub enum CorpusCmd {
    Validate(CorpusArg),
    Filter(FilterArgs),
    Split(SplitArgs),
    Stats(StatsArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct FilterArgs {
    #[command(flatten)]
    pub input: CorpusArg,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub min_instances: Option<usize>,
    #[arg(long)]
    pub min_text_tokens: Option<usize>,
    #[arg(long)]
    pub top_k: Option<usize>,
}

#[derive(Debug, Args, Serialize)]
pub struct SplitArgs {
    #[command(flatten)]
    pub input: CorpusArg,
    /// Defaults to writing split.jsonl next to the input manifest.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub val_fraction: Option<f64>,
}

#[derive(Debug, Args, Serialize)]
pub struct StatsArgs {
    #[command(flatten)]
    pub input: CorpusArg,
    #[arg(long)]
    pub annotations: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand, Serialize)]
pub enum AnnotateCmd {
    Run(AnnotateArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct AnnotateArgs {
    #[command(flatten)]
    pub input: CorpusArg,
    /// Prompt id or family (a family picks its context variant).
    #[arg(long)]
    pub prompt: Option<String>,
    #[arg(long, conflicts_with = "no_context")]
    pub with_context: bool,
    #[arg(long)]
    pub no_context: bool,
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long)]
    pub resume: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Defaults to `<out>.failures.jsonl`.
    #[arg(long)]
    pub failures: Option<PathBuf>,
    #[arg(long)]
    pub max_in_flight: Option<usize>,
    #[arg(long)]
    pub retries: Option<u32>,
    /// Answer from a scripted response file instead of a live endpoint.
    #[arg(long)]
    pub replay: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodArg {
    Concat,
    Fusion,
    Both,
}

#[derive(Debug, Subcommand, Serialize)]
pub enum MatchCmd {
    Run(MatchRunArgs),
    Export(MatchExportArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct EncoderArgs {
    /// hash, hash-ref or checkpoint:<dir>.
    #[arg(long)]
    pub encoder: Option<String>,
    #[arg(long)]
    pub dim: Option<usize>,
}

#[derive(Debug, Args, Serialize)]
pub struct MatchRunArgs {
    #[command(flatten)]
    pub input: CorpusArg,
    #[arg(long, value_enum, default_value = "both")]
    pub method: MethodArg,
    #[arg(long)]
    pub concat_threshold: Option<f64>,
    #[arg(long)]
    pub fusion_threshold: Option<f64>,
    #[arg(long)]
    pub perceptual_threshold: Option<f64>,
    #[command(flatten)]
    pub encoder: EncoderArgs,
    #[arg(long, default_value = "candidates.jsonl")]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct MatchExportArgs {
    /// Candidates file; ignored when --data-dir is given.
    #[arg(long)]
    pub candidates: Option<PathBuf>,
    /// Review data directory holding verdicts.
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    #[arg(long)]
    pub only_verified: bool,
    /// Defaults to stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ModalityArg {
    Image,
    Text,
}

#[derive(Debug, Args, Serialize)]
pub struct EmbedArgs {
    #[command(flatten)]
    pub input: CorpusArg,
    #[arg(long, value_enum)]
    pub modality: ModalityArg,
    /// Text to embed: title, embedded_text, meme_caption or image_caption.
    #[arg(long, default_value = "embedded_text")]
    pub text: String,
    #[arg(long)]
    pub annotations: Option<PathBuf>,
    #[command(flatten)]
    pub encoder: EncoderArgs,
    #[arg(long)]
    pub normalize: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitArg {
    All,
    Train,
    Validation,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalRetrievalArgs {
    #[command(flatten)]
    pub input: CorpusArg,
    #[arg(long)]
    pub annotations: Option<PathBuf>,
    /// Comma-separated text types.
    #[arg(long, value_delimiter = ',')]
    pub texts: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',')]
    pub ks: Option<Vec<usize>>,
    #[command(flatten)]
    pub encoder: EncoderArgs,
    #[arg(long, value_enum, default_value = "all")]
    pub split: SplitArg,
    /// Defaults to stdout.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Subcommand, Serialize)]
pub enum FinetuneCmd {
    Run(FinetuneRunArgs),
    /// Score a saved checkpoint on retrieval.
    Eval(FinetuneEvalArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct FinetuneRunArgs {
    #[command(flatten)]
    pub input: CorpusArg,
    #[arg(long)]
    pub annotations: Option<PathBuf>,
    /// Text each image is trained against.
    #[arg(long, default_value = "meme_caption")]
    pub caption: String,
    /// Checkpoint directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub effective_batch: Option<usize>,
    #[arg(long)]
    pub micro_batch: Option<usize>,
    #[arg(long)]
    pub lr_peak: Option<f64>,
}

#[derive(Debug, Args, Serialize)]
pub struct FinetuneEvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub input: CorpusArg,
    #[arg(long)]
    pub annotations: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub texts: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',')]
    pub ks: Option<Vec<usize>>,
    #[arg(long, value_enum, default_value = "validation")]
    pub split: SplitArg,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalMetricsArgs {
    /// Strategy name, or `all` for one row per strategy.
    #[arg(long)]
    pub strategy: Option<String>,
    #[arg(long, value_delimiter = ',')]
    pub metrics: Option<Vec<String>>,
    /// JSONL rows `{"id", "prediction"}`.
    #[arg(long)]
    pub pred: PathBuf,
    /// JSONL rows `{"id", "references": [..]}` or `{"id", "reference"}`.
    #[arg(long = "ref")]
    pub references: PathBuf,
    #[arg(long)]
    pub unsmoothed_bleu: bool,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct ServeArgs {
    #[arg(long)]
    pub port: Option<u16>,
    #[arg(long)]
    pub host: Option<String>,
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    /// Built review UI to serve at `/`.
    #[arg(long)]
    pub ui_dir: Option<PathBuf>,
    /// Corpus whose images are served under /media.
    #[command(flatten)]
    pub input: CorpusArg,
    /// Stage-2 candidates to queue for verification at start-up.
    #[arg(long)]
    pub matches: Option<PathBuf>,
    #[arg(long, env = "MEMEKIT_ADMIN_TOKEN", hide_env_values = true)]
    #[serde(skip)]
    pub admin_token: Option<String>,
}

#[derive(Debug, Args, Serialize)]
pub struct DataDirArg {
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
}

#[derive(Debug, Subcommand, Serialize)]
pub enum ReviewCmd {
    /// Issue an opaque evaluator token.
    Token {
        #[command(flatten)]
        store: DataDirArg,
        #[arg(long, default_value = "")]
        label: String,
    },
    /// Create a survey from one annotation file per source.
    Survey {
        #[command(flatten)]
        store: DataDirArg,
        /// Comma-separated meme ids.
        #[arg(long, value_delimiter = ',', required = true)]
        memes: Vec<String>,
        #[arg(long, required = true, num_args = 2..)]
        annotations: Vec<PathBuf>,
    },
    /// Print the survey tally as JSON, or as a grid with --grid.
    Tally {
        #[command(flatten)]
        store: DataDirArg,
        #[arg(long)]
        survey: String,
        #[arg(long)]
        grid: bool,
    },
    /// Queue stage-2 candidates for verification.
    Queue {
        #[command(flatten)]
        store: DataDirArg,
        #[arg(long)]
        candidates: PathBuf,
    },
}

#[derive(Debug, Args, Serialize)]
pub struct ExportArgs {
    #[command(flatten)]
    pub input: CorpusArg,
    #[arg(long)]
    pub annotations: Option<PathBuf>,
    /// Candidates file; only verified pairs are exported.
    #[arg(long)]
    pub matches: Option<PathBuf>,
    /// Review data directory with verdicts; takes precedence over --matches.
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // usage errors exit 2, --help and --version exit 0
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    match commands::dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
