use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "revtune", version, about = "Adapter tuning and evaluation for code-review tasks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a seeded base model and a tokenizer trained on the given corpus.
    Init(InitArgs),
    /// Train an adapter for one stage.
    Train(TrainArgs),
    /// Score an adapter on a task dataset and write a report.
    Evaluate(EvaluateArgs),
    /// Run an adapter on task records and print one response per record.
    Predict(PredictArgs),
    /// Fold a LoRA adapter into the base weights.
    Merge(MergeArgs),
    /// Summarize an adapter or checkpoint file, or print analytic accounting.
    Inspect(InspectArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Method {
    Lora,
    Prefix,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum StageArg {
    Instruct,
    Task,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum TaskArg {
    Rnp,
    Rcg,
    Cr,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum MixArg {
    Pl,
    #[value(name = "pl-nl")]
    PlNl,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum LangLabel {
    None,
    Instruction,
    Input,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum BleuModeArg {
    Sentence,
    Corpus,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum GateModeArg {
    #[value(name = "per-head")]
    PerHead,
    #[value(name = "per-layer")]
    PerLayer,
}

/// Base model and tokenizer locations shared by most subcommands.
#[derive(Args, Debug, Clone)]
pub struct ModelPaths {
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long)]
    pub tokenizer: PathBuf,
}

/// Adapter hyperparameters. Unset values fall back to the method defaults.
#[derive(Args, Debug, Clone, Default)]
pub struct AdapterFlags {
    #[arg(long, value_enum)]
    pub method: Option<Method>,
    /// LoRA rank r.
    #[arg(long)]
    pub rank: Option<usize>,
    /// LoRA scaling numerator; the update is scaled by alpha / rank.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Comma-separated LoRA targets among wq, wk, wv, wo.
    #[arg(long, value_delimiter = ',')]
    pub targets: Option<Vec<String>>,
    /// Prefix length K.
    #[arg(long)]
    pub prefix_len: Option<usize>,
    /// Number of topmost layers L that receive the prefix.
    #[arg(long)]
    pub prefix_layers: Option<usize>,
    #[arg(long, value_enum)]
    pub gate_mode: Option<GateModeArg>,
    /// Rotate prefix keys as positions -K..-1.
    #[arg(long)]
    pub rotate_prefix_keys: bool,
}

#[derive(Args, Debug)]
pub struct InitArgs {
    /// Output path of the base checkpoint.
    #[arg(long)]
    pub weights: PathBuf,
    /// Output path of the tokenizer.
    #[arg(long)]
    pub tokenizer: PathBuf,
    /// Instruction or task record files the tokenizer is trained on.
    #[arg(long, required = true, num_args = 1..)]
    pub corpus: Vec<PathBuf>,
    #[arg(long)]
    pub vocab_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Std of the normal init for weight matrices.
    #[arg(long)]
    pub init_std: Option<f64>,
    /// `key = value` file with model shape overrides.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub model: ModelPaths,
    #[command(flatten)]
    pub adapter: AdapterFlags,
    #[arg(long, value_enum)]
    pub stage: StageArg,
    #[arg(long, value_enum)]
    pub task: Option<TaskArg>,
    /// Training records: instruction records for `instruct`, task records for `task`.
    #[arg(long)]
    pub data: PathBuf,
    /// Natural-language instruction records, used with `--mix pl-nl`.
    #[arg(long)]
    pub nl_data: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "pl")]
    pub mix: MixArg,
    /// Continue from an instruction-stage adapter.
    #[arg(long)]
    pub from_adapter: Option<PathBuf>,
    /// Start the task stage from a fresh adapter.
    #[arg(long)]
    pub no_instruction_stage: bool,
    #[arg(long, value_enum, default_value = "none")]
    pub lang_label: LangLabel,
    /// Output adapter path.
    #[arg(long)]
    pub out: PathBuf,
    /// Loss log path; defaults to `<out>.loss.jsonl`.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// `key = value` file with training overrides.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub max_tokens: Option<usize>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Print paper-scale accounting for the chosen adapter and exit.
    #[arg(long)]
    pub paper_scale: bool,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub model: ModelPaths,
    /// Adapter to evaluate; the bare base model when omitted.
    #[arg(long)]
    pub adapter: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub task: TaskArg,
    #[arg(long)]
    pub data: PathBuf,
    /// Line-delimited report: one record per example plus a summary.
    #[arg(long)]
    pub report: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    #[arg(long, default_value_t = 64)]
    pub max_new_tokens: usize,
    #[arg(long, value_enum, default_value = "sentence")]
    pub bleu_mode: BleuModeArg,
    /// Compare comments case-sensitively.
    #[arg(long)]
    pub keep_case: bool,
    /// Threshold sweep output for `rnp`; defaults to `<report>.curve.jsonl`.
    #[arg(long)]
    pub curve: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "none")]
    pub lang_label: LangLabel,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[command(flatten)]
    pub model: ModelPaths,
    #[arg(long)]
    pub adapter: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub task: TaskArg,
    /// Records with `code` and optional `comment` and `lang`; stdin when omitted.
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    #[arg(long, default_value_t = 64)]
    pub max_new_tokens: usize,
    #[arg(long, value_enum, default_value = "none")]
    pub lang_label: LangLabel,
}

#[derive(Args, Debug)]
pub struct MergeArgs {
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long)]
    pub adapter: PathBuf,
    /// Merged checkpoint path; must differ from `--weights`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct InspectArgs {
    /// Adapter or base checkpoint to summarize.
    pub path: Option<PathBuf>,
    /// Analytic accounting on the 6.7B configuration; nothing is allocated.
    #[arg(long)]
    pub paper_scale: bool,
    #[command(flatten)]
    pub adapter: AdapterFlags,
    /// `key = value` file with model shape overrides for analytic accounting.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// One JSON object per line instead of a table.
    #[arg(long)]
    pub json: bool,
}
