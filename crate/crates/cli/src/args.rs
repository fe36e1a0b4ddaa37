use std::path::PathBuf;

use clap::{ArgAction, Args, Parser, Subcommand, ValueEnum};

/// Task-prefix multi-task training, task relationship probing and transfer experiments.
#[derive(Debug, Parser)]
#[command(name = "prefixmtl", version)]
pub struct Cli {
    /// Directory that receives one subdirectory per run.
    #[arg(long, global = true, env = "PREFIXMTL_OUT", default_value = "runs")]
    pub out: PathBuf,

    /// Master seed. Overrides the seed of a config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Print the resolved run configuration as JSON and exit without running.
    #[arg(long, global = true)]
    pub dry_run: bool,

    /// Progress on stderr; repeat for per-step losses.
    #[arg(short, long, global = true, action = ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Unify raw task files into the k-option format and write conversion statistics.
    Convert(CorpusArgs),
    /// Multi-task training followed by fine-tuning on a target.
    Train(TrainArgs),
    /// Train a probing model and extract the task relationship matrix.
    Probe(ProbeArgs),
    /// Pairwise dual-task transfer grid.
    Transfer(TransferArgs),
    /// Rank the tasks most complementary to a target.
    Select(SelectArgs),
    /// Render tables and figures from the artifacts of an earlier run.
    Report(ReportArgs),
    /// Execute a persisted run configuration again in a fresh run directory.
    Rerun(RerunArgs),
}

#[derive(Debug, Args)]
pub struct CorpusArgs {
    /// Corpus manifest listing the task files.
    #[arg(long)]
    pub manifest: PathBuf,

    /// Options per example. Defaults to the manifest's value, then 4.
    #[arg(long)]
    pub k: Option<usize>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum PolicyArg {
    Default,
    Must,
    No,
    Only,
}

#[derive(Debug, Args)]
pub struct TrainingArgs {
    /// JSON training configuration; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub mask_ratio: Option<f64>,
    #[arg(long, value_enum)]
    pub prefix_policy: Option<PolicyArg>,
    /// Per-task cap on examples drawn each epoch.
    #[arg(long)]
    pub cap: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub finetune_epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Leave the task prefix out of every sequence.
    #[arg(long)]
    pub no_prefix: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub corpus: CorpusArgsOpt,
    #[command(flatten)]
    pub training: TrainingArgs,

    /// Fine-tune on this task and report its dev accuracy.
    #[arg(long)]
    pub target: Option<String>,

    /// single, fullset, top5, family or subset. Needs --target.
    #[arg(long)]
    pub strategy: Option<String>,

    /// Relationship matrix (file or probe run directory) for top5.
    #[arg(long)]
    pub matrix: Option<PathBuf>,

    /// Extra tasks for the subset strategy.
    #[arg(long, value_delimiter = ',')]
    pub subset: Vec<String>,

    /// Continue an interrupted train run from its last completed epoch.
    #[arg(long, value_name = "RUN_DIR", conflicts_with_all = ["manifest", "target", "strategy", "config"])]
    pub resume: Option<PathBuf>,
}

/// Corpus flags for commands that can also resume from a run directory.
#[derive(Debug, Args)]
pub struct CorpusArgsOpt {
    /// Corpus manifest listing the task files.
    #[arg(long, required_unless_present = "resume")]
    pub manifest: Option<PathBuf>,

    /// Options per example. Defaults to the manifest's value, then 4.
    #[arg(long)]
    pub k: Option<usize>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum NormalizationArg {
    Global,
    PerRow,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    #[command(flatten)]
    pub corpus: CorpusArgs,
    #[command(flatten)]
    pub training: TrainingArgs,

    #[arg(long, value_enum, default_value = "global")]
    pub normalization: NormalizationArg,

    /// Continue probing from a saved checkpoint over the same vocabulary.
    #[arg(long)]
    pub warm_start: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TransferArgs {
    #[command(flatten)]
    pub corpus: CorpusArgsOpt,
    #[command(flatten)]
    pub training: TrainingArgs,

    /// Source tasks. Defaults to every task that is not a target.
    #[arg(long, value_delimiter = ',')]
    pub sources: Vec<String>,

    #[arg(long, value_delimiter = ',', required_unless_present = "resume")]
    pub targets: Vec<String>,

    /// Relationship matrix (file or probe run directory) to correlate with the grid.
    #[arg(long)]
    pub matrix: Option<PathBuf>,

    /// Finish an interrupted grid; completed cells are reused.
    #[arg(long, value_name = "RUN_DIR", conflicts_with_all = ["manifest", "targets", "sources", "config"])]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SelectArgs {
    /// Relationship matrix file or probe run directory.
    #[arg(long)]
    pub matrix: PathBuf,

    #[arg(long)]
    pub target: String,

    #[arg(long, default_value_t = 5)]
    pub top_k: usize,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Run directory to render.
    #[arg(long)]
    pub run: PathBuf,
}

#[derive(Debug, Args)]
pub struct RerunArgs {
    /// A run.json written by an earlier command.
    #[arg(long)]
    pub run_config: PathBuf,
}
