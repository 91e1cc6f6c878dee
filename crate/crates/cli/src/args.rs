use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(name = "dfp", version, about = "Decomposed forward-pass attribution toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Draw a random model from a config file.
    GenModel(GenModelArgs),
    /// Run the standard forward pass and save its trace.
    Forward(ForwardArgs),
    /// Decompose a forward pass and score the components against a target.
    Attribute(AttributeArgs),
    /// Train linear probes on hidden-state features.
    ProbeTrain(ProbeTrainArgs),
    /// Build an orthogonal projector onto the span of a set of directions.
    Project(ProjectArgs),
    /// Run an evaluation protocol over a prompt dataset.
    Evaluate(EvaluateArgs),
    /// Time a decomposed pass against per-unit ablation.
    Bench(BenchArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Json,
    Csv,
}

/// Prompt given as ids or as text through a vocabulary.
#[derive(Debug, Clone, Args, Serialize)]
pub struct PromptArgs {
    /// Token ids separated by commas or spaces.
    #[arg(long, conflicts_with = "text")]
    pub tokens: Option<String>,
    /// Whitespace-tokenized text; needs --vocab.
    #[arg(long, requires = "vocab")]
    pub text: Option<String>,
    /// Vocabulary file, one token per line.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct GenModelArgs {
    /// Model config (JSON).
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ForwardArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub prompt: PromptArgs,
    #[arg(long)]
    pub trace_out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum InitKind {
    Token,
    Heads,
    Neurons,
    Subspace,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct AttributeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub prompt: PromptArgs,
    #[arg(long, value_enum)]
    pub init: InitKind,
    /// Layer of the head, neuron or subspace decomposition.
    #[arg(long)]
    pub layer: Option<usize>,
    /// JSON list of index groups (positions for token, neurons for neurons).
    #[arg(long)]
    pub groups: Option<PathBuf>,
    /// Neuron bin width when no groups file is given.
    #[arg(long, default_value_t = 1)]
    pub bin: usize,
    /// Projector archive for the subspace decomposition.
    #[arg(long)]
    pub projector: Option<PathBuf>,
    #[arg(long, default_value = "softmax")]
    pub rule: String,
    /// depass, depass_abs, norm or coef.
    #[arg(long, default_value = "depass")]
    pub method: String,
    /// `logit:<id>` or `direction:<file>@<layer>`; defaults to the predicted token.
    #[arg(long)]
    pub target: Option<String>,
    /// `last`, `all` or a list of positions.
    #[arg(long, default_value = "last")]
    pub positions: String,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    pub format: Format,
    /// Print a text heatmap of the scores.
    #[arg(long)]
    pub heatmap: bool,
    /// Check reconstruction and completeness inline (default for f64 models).
    #[arg(long, overrides_with = "no_selfcheck")]
    pub selfcheck: bool,
    #[arg(long, overrides_with = "selfcheck")]
    pub no_selfcheck: bool,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ProbeTrainArgs {
    /// JSONL with `features` (inline vector) or `features_ref`
    /// (`archive#tensor@row`), a `label` and an optional `layer`.
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0.01)]
    pub lr: f64,
    #[arg(long, default_value_t = 1000)]
    pub steps: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub l2: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Class treated as untruthful when probes are grouped by layer.
    #[arg(long, default_value_t = 1)]
    pub untruthful_class: usize,
    #[arg(long, value_enum, default_value_t = Precision::F64)]
    pub precision: Precision,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ProjectArgs {
    /// Archive holding a `directions` tensor (rows), a single matrix, or a probe.
    #[arg(long)]
    pub directions: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = Precision::F64)]
    pub precision: Precision,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EvaluateArgs {
    #[arg(value_enum)]
    pub protocol: Protocol,
    #[arg(long)]
    pub model: PathBuf,
    /// JSONL prompts.
    #[arg(long)]
    pub dataset: PathBuf,
    /// Resolves `text` examples.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Comma-separated scoring methods.
    #[arg(long)]
    pub methods: Option<String>,
    /// Comma-separated grid: fractions K, counts k, or budgets.
    #[arg(long)]
    pub grid: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    pub format: Format,
    /// patch_top and/or recover_top (faithfulness).
    #[arg(long, default_value = "patch_top,recover_top")]
    pub kinds: String,
    /// Allow the leading BOS token to be removed.
    #[arg(long)]
    pub drop_bos: bool,
    /// heads or neurons (components).
    #[arg(long, default_value = "heads")]
    pub units: String,
    #[arg(long)]
    pub layer: Option<usize>,
    #[arg(long, default_value_t = 1)]
    pub bin: usize,
    /// top_k and/or bottom_k (components).
    #[arg(long, default_value = "top_k,bottom_k")]
    pub orders: String,
    /// Probe set archive (subspace-mask).
    #[arg(long)]
    pub probes: Option<PathBuf>,
    #[arg(long)]
    pub min_layer: Option<usize>,
    #[arg(long, default_value = "softmax")]
    pub rule: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Protocol {
    Faithfulness,
    Components,
    SubspaceMask,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchUnit {
    Neurons,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct BenchArgs {
    #[arg(value_enum)]
    pub unit: BenchUnit,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub layer: usize,
    #[command(flatten)]
    pub prompt: PromptArgs,
    /// Prompt length when no prompt is given.
    #[arg(long, default_value_t = 16)]
    pub len: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Target token; defaults to the predicted one.
    #[arg(long)]
    pub target: Option<usize>,
    #[arg(long, default_value_t = 3)]
    pub repeats: usize,
    #[arg(long)]
    pub out: PathBuf,
}
