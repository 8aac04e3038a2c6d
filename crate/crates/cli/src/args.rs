use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(
    name = "nfcgcn",
    version,
    about = "Node-feature convolution graph networks for node classification"
)]
pub struct Cli {
    /// Print one machine-readable JSON document on stdout.
    #[arg(long, global = true)]
    pub json: bool,

    /// Base directory for every relative path.
    #[arg(long, global = true, default_value = ".")]
    pub workdir: PathBuf,

    /// Cap on data-parallel worker threads.
    #[arg(long, global = true, env = "NFCGCN_THREADS")]
    pub threads: Option<usize>,

    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Convert a raw dataset to the canonical TSV layout.
    Prepare(PrepareArgs),
    /// Train one model and write its results directory and checkpoint.
    Train(TrainArgs),
    /// Score a checkpoint on one mask of a dataset.
    Eval(EvalArgs),
    /// Compare analytic gradients with central differences.
    Gradcheck(GradcheckArgs),
    /// Multi-seed studies.
    Experiment(ExperimentArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum InputFormat {
    /// `<name>.content` and `<name>.cites` files.
    Linqs,
    /// nodes.tsv, edges.tsv and optional split.tsv / idmap.tsv.
    Canonical,
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, value_enum)]
    pub format: InputFormat,
    #[arg(long)]
    pub out: PathBuf,
    /// Split preset name or `train/val/test` counts.
    #[arg(long)]
    pub split: Option<String>,
    #[arg(long, default_value_t = 1, requires = "split")]
    pub seed: u64,
}

/// Preset selection and overrides shared by `train` and `experiment`.
#[derive(Debug, Args)]
pub struct RunArgs {
    /// Dataset directory (canonical or LINQS).
    #[arg(long)]
    pub data: PathBuf,
    /// `key=value` applied to the preset; repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Let the last graph layer emit the logits directly.
    #[arg(long)]
    pub no_classifier_affine: bool,
    /// Draw fresh neighborhoods every epoch.
    #[arg(long)]
    pub resample_per_epoch: bool,
    /// Use the preset's split even when the dataset ships one.
    #[arg(long)]
    pub resplit: bool,
    /// Results root (default `<workdir>/results`).
    #[arg(long)]
    pub results: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Built-in preset name or a `.toml` file.
    #[arg(long)]
    pub preset: String,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MaskArg {
    Train,
    Val,
    Test,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = MaskArg::Test)]
    pub mask: MaskArg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum VariantArg {
    All,
    NfcGcn,
    GcnBaseline,
    NfcOnly,
    Mean5Only,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, value_enum, default_value_t = VariantArg::All)]
    pub variant: VariantArg,
    #[arg(long, default_value_t = 3)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Study {
    /// Test accuracy per preset (default: `<dataset>-1d` and `<dataset>-gcn`).
    Main,
    /// Classifier on the first-level representation, with and without convolution.
    NoGcn,
    /// Node bandwidth sweep (default n = 2..6).
    Bandwidth,
    /// Graph-layer depth sweep (default K = 1..5), with the GCN baseline alongside.
    Depth,
    /// Full-length training curves without early stopping.
    Curves,
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    /// Study to run; omit when replaying.
    #[arg(value_enum, required_unless_present = "replay")]
    pub study: Option<Study>,
    /// Rerun the study described by a `config.json` from a results directory.
    #[arg(long, conflicts_with = "study")]
    pub replay: Option<PathBuf>,
    /// Dataset name used for preset lookup and the results path
    /// (default: the data directory's name).
    #[arg(long)]
    pub dataset: Option<String>,
    /// Preset(s) replacing the study's defaults; repeatable.
    #[arg(long)]
    pub preset: Vec<String>,
    #[arg(long, default_value_t = 10)]
    pub repeats: usize,
    /// Swept values for `bandwidth` and `depth`, comma-separated.
    #[arg(long, value_delimiter = ',')]
    pub values: Vec<usize>,
    /// Skip the baseline half of the depth sweep.
    #[arg(long)]
    pub no_baseline: bool,
    #[command(flatten)]
    pub run: RunArgs,
}
