use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

#[derive(Parser, Debug)]
#[command(name = "agd", version, about = "Attribution-guided decoding laboratory")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Where to write the run manifest (default: next to the main output).
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,
}

#[derive(Subcommand, Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "subcommand", rename_all = "kebab-case")]
pub enum Command {
    /// Generate a continuation and write a per-step trace.
    Decode(DecodeCmd),
    /// Export the relevance heatmap for one target token.
    Attribute(AttributeCmd),
    /// Evaluate a decoder on an instruction or QA dataset.
    Eval(EvalCmd),
    /// Score attention heads on counterfactual QA and pick head sets.
    ExtractHeads(ExtractHeadsCmd),
    /// Entropy percentile of greedy decoding over a dataset.
    CalibrateTau(CalibrateCmd),
    /// Generate a toy task corpus.
    GenTask(GenTaskCmd),
    /// Train a toy model with SGD.
    TrainToy(TrainCmd),
    /// Score passing outputs of an eval report with an LLM judge.
    Judge(JudgeCmd),
    /// Re-run the command recorded in a manifest.
    Replay(ReplayCmd),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct ModelArgs {
    /// Weight file.
    #[arg(long)]
    pub model: PathBuf,
    /// Arithmetic precision; f64 is the verification mode.
    #[arg(long, value_enum, default_value_t = Precision::F32)]
    pub precision: Precision,
    /// Worker threads (1 runs everything sequentially).
    #[arg(long, default_value_t = 0)]
    pub jobs: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MethodName {
    Greedy,
    Nucleus,
    Cad,
    Dola,
    Agd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttrName {
    Lrp,
    Ixg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RuleName {
    ValuePath,
    BilinearSplit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Segment {
    Instruction,
    Task,
    Context,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct AttrArgs {
    /// Attribution method.
    #[arg(long, value_enum, default_value_t = AttrName::Lrp)]
    pub attr: AttrName,
    /// Stabilizer of the epsilon rule.
    #[arg(long, default_value_t = 1e-6)]
    pub lrp_epsilon: f64,
    /// How relevance crosses attention.
    #[arg(long, value_enum, default_value_t = RuleName::ValuePath)]
    pub attention_rule: RuleName,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct MethodArgs {
    #[arg(long, value_enum, default_value_t = MethodName::Greedy)]
    pub method: MethodName,
    /// Candidate count for agd.
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    /// Minimum candidate probability for agd.
    #[arg(long, default_value_t = 0.05)]
    pub pmin: f64,
    /// Entropy gate in nats for agd; omit to guide every step.
    #[arg(long)]
    pub tau: Option<f64>,
    /// Region of interest for agd: instruction | task | context | all |
    /// span:START-END | heads:L.H,L.H | ctx-heads:FILE | param-heads:FILE.
    #[arg(long)]
    pub roi: Option<String>,
    #[command(flatten)]
    pub attr: AttrArgs,
    /// Nucleus mass.
    #[arg(long, default_value_t = 0.95)]
    pub p: f64,
    /// Sampling seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// CAD contrast strength.
    #[arg(long, default_value_t = 1.0)]
    pub alpha: f64,
    /// Segment removed for the CAD context-free pass.
    #[arg(long, value_enum, default_value_t = Segment::Instruction)]
    pub cad_drop: Segment,
    /// DoLA early-exit layer (residual entering this block).
    #[arg(long, default_value_t = 0)]
    pub contrast_layer: usize,
    /// DoLA plausibility cutoff relative to the top probability.
    #[arg(long, default_value_t = 0.1)]
    pub dola_beta: f64,
    #[arg(long, default_value_t = 64)]
    pub max_new_tokens: usize,
    /// Stop strings (single characters); EOS always stops.
    #[arg(long)]
    pub stop: Vec<String>,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct DecodeCmd {
    #[command(flatten)]
    pub model: ModelArgs,
    /// JSON request: {"prompt": ..., "segments": {"instruction": [start, end], ...}}.
    #[arg(long)]
    pub request: PathBuf,
    #[command(flatten)]
    pub method: MethodArgs,
    /// Per-step trace (JSON lines). The summary goes to standard output.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct AttributeCmd {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub request: PathBuf,
    /// Target token id; default is the most probable next token.
    #[arg(long, conflicts_with = "target_text")]
    pub target_id: Option<u32>,
    /// Target given as text; its first byte is used.
    #[arg(long)]
    pub target_text: Option<String>,
    #[command(flatten)]
    pub attr: AttrArgs,
    /// Skip per-layer normalization.
    #[arg(long)]
    pub raw: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskName {
    If,
    Qa,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FormatName {
    Chat,
    Compact,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct EvalCmd {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Dataset (JSON lines).
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum)]
    pub task: TaskName,
    /// QA prompt layout.
    #[arg(long, value_enum, default_value_t = FormatName::Chat)]
    pub format: FormatName,
    #[command(flatten)]
    pub method: MethodArgs,
    /// Report (JSON).
    #[arg(long)]
    pub out: PathBuf,
    /// Optional per-sample traces (JSON lines).
    #[arg(long)]
    pub traces: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetName {
    First,
    MeanOverAnswer,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct ExtractHeadsCmd {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Counterfactual samples (JSON lines).
    #[arg(long)]
    pub data: PathBuf,
    /// Heads per set.
    #[arg(long)]
    pub n: usize,
    #[command(flatten)]
    pub attr: AttrArgs,
    #[arg(long, value_enum, default_value_t = FormatName::Chat)]
    pub format: FormatName,
    #[arg(long, value_enum, default_value_t = TargetName::First)]
    pub target: TargetName,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct CalibrateCmd {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum)]
    pub task: TaskName,
    #[arg(long, value_enum, default_value_t = FormatName::Chat)]
    pub format: FormatName,
    #[arg(long, default_value_t = 0.8)]
    pub percentile: f64,
    #[arg(long, default_value_t = 64)]
    pub max_new_tokens: usize,
    #[arg(long)]
    pub stop: Vec<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KindName {
    KvLookup,
    KeywordInstruction,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct GenTaskCmd {
    /// Full task spec (JSON); overrides the individual flags.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = KindName::KvLookup)]
    pub kind: KindName,
    #[arg(long, default_value_t = 1000)]
    pub n_train: usize,
    #[arg(long, default_value_t = 100)]
    pub n_eval: usize,
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory for train/eval(/counterfactual) JSON lines.
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct TrainCmd {
    /// Training samples (JSON lines).
    #[arg(long)]
    pub train: PathBuf,
    /// Held-out samples for before/after loss.
    #[arg(long)]
    pub eval: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub task: TaskName,
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    #[arg(long, default_value_t = 2)]
    pub heads: usize,
    #[arg(long, default_value_t = 32)]
    pub d_model: usize,
    #[arg(long, default_value_t = 64)]
    pub max_seq_len: usize,
    #[arg(long, default_value_t = 1000)]
    pub steps: usize,
    #[arg(long, default_value_t = 0.1)]
    pub lr: f64,
    #[arg(long, default_value_t = 8)]
    pub batch: usize,
    /// Global gradient-norm clip (0 disables).
    #[arg(long, default_value_t = 1.0)]
    pub clip: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0)]
    pub jobs: usize,
    /// Weight file to write.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct JudgeCmd {
    /// Instruction dataset the report was produced from.
    #[arg(long)]
    pub data: PathBuf,
    /// Eval report; only samples satisfying all constraints are judged.
    #[arg(long)]
    pub report: PathBuf,
    /// Chat-completions URL.
    #[arg(long)]
    pub endpoint: String,
    #[arg(long)]
    pub judge_model: String,
    /// Environment variable holding the bearer token.
    #[arg(long, default_value = "AGD_JUDGE_TOKEN")]
    pub token_env: String,
    #[arg(long, default_value_t = 60.0)]
    pub timeout: f64,
    #[arg(long, default_value_t = 3)]
    pub retries: u32,
    /// Per-sample judgements (JSON lines); the summary goes to standard output.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct ReplayCmd {
    /// Manifest written by an earlier run.
    #[arg(long = "from")]
    pub from: PathBuf,
}
