//! Command-line arguments.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(
    name = "causal-prompt",
    version,
    about = "Few-shot causal relation classification with prompts and ensembles"
)]
pub struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Draw k instances per class for training; the rest are held out.
    Split(SplitArgs),
    /// Search for the best template by fine-tuning shortlisted candidates; select on the dev set.
    Search(SearchArgs),
    /// Score a corpus with a checkpoint or a raw template and write a prediction cache.
    Classify(ClassifyArgs),
    /// Fuse prediction caches by greedy probability averaging, or vote.
    Fuse(FuseArgs),
    /// Compute precision, recall, accuracy and F1 against gold labels.
    Eval(EvalArgs),
}

#[derive(Debug, Args, Default)]
pub struct CorpusArgs {
    /// Column holding the text [default: text]
    #[arg(long)]
    pub text_column: Option<String>,
    /// Column holding the label [default: label]
    #[arg(long)]
    pub label_column: Option<String>,
    /// Column holding the instance id [default: id]
    #[arg(long)]
    pub id_column: Option<String>,
    /// Use zero-based row indexes as ids.
    #[arg(long, conflicts_with = "id_column")]
    pub row_ids: bool,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Training instances per class.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub corpus_args: CorpusArgs,
}

#[derive(Debug, Args)]
pub struct SearchArgs {
    /// Corpus to split into training and held-out parts.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Official dev corpus used for the final selection.
    #[arg(long)]
    pub dev: Option<PathBuf>,
    /// Candidate templates for the stub generator, one per line.
    #[arg(long)]
    pub templates: Option<PathBuf>,
    #[arg(long)]
    pub k: Option<usize>,
    /// Instances per class in the zero-shot ranking subset.
    #[arg(long)]
    pub m: Option<usize>,
    /// Maximum number of generated candidates.
    #[arg(long)]
    pub beam: Option<usize>,
    #[arg(long)]
    pub finalists: Option<usize>,
    #[arg(long)]
    pub seeds_per_template: Option<usize>,
    /// Rank with d demonstration prompts instead of bare prompts.
    #[arg(long)]
    pub rank_d: Option<usize>,
    #[arg(long)]
    pub dev_d: Option<usize>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory; an existing search state there is resumed.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub corpus_args: CorpusArgs,
}

#[derive(Debug, Args)]
pub struct ClassifyArgs {
    /// Instances to classify.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Labelled instances demonstrations are drawn from.
    #[arg(long)]
    pub pool: Option<PathBuf>,
    /// Fine-tuned checkpoint directory.
    #[arg(long, conflicts_with = "template")]
    pub checkpoint: Option<PathBuf>,
    /// Score the untouched model with this template.
    #[arg(long)]
    pub template: Option<String>,
    /// Prompts averaged per instance.
    #[arg(long)]
    pub d: Option<usize>,
    /// Fraction of most similar instances demonstrations are drawn from.
    #[arg(long)]
    pub fraction: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Model id written to the cache [default: checkpoint directory name]
    #[arg(long)]
    pub model_id: Option<String>,
    /// Prediction cache to write (JSON lines).
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub corpus_args: CorpusArgs,
}

#[derive(Debug, Args)]
pub struct FuseArgs {
    /// Gold labels of the fusion objective split.
    #[arg(long)]
    pub gold: Option<PathBuf>,
    /// Prediction cache; repeat for several.
    #[arg(long = "cache")]
    pub caches: Vec<PathBuf>,
    #[arg(long)]
    pub restarts: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Majority vote over an odd number of caches instead of fusion.
    #[arg(long)]
    pub vote: bool,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub corpus_args: CorpusArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, required_unless_present = "consistency")]
    pub gold: Option<PathBuf>,
    /// Prediction cache or vote output.
    #[arg(long, required_unless_present = "consistency")]
    pub predictions: Option<PathBuf>,
    /// Model to evaluate when the cache holds several.
    #[arg(long)]
    pub model_id: Option<String>,
    /// Print the report as JSON.
    #[arg(long)]
    pub json: bool,
    /// Also write the report with its inputs to this file.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Check reported (P, R, F1) rows for harmonic-mean consistency.
    #[arg(long)]
    pub consistency: bool,
    /// JSON-lines rows {name, precision, recall, f1} [default: built-in reference rows]
    #[arg(long, requires = "consistency")]
    pub rows: Option<PathBuf>,
    /// Largest tolerated deviation, in the rows' units.
    #[arg(long, default_value_t = 0.02)]
    pub tolerance: f64,
    #[command(flatten)]
    pub corpus_args: CorpusArgs,
}
