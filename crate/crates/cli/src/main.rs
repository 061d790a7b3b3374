use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
mod files;
mod live;

#[derive(Parser)]
#[command(name = "geoshield", version, about = "Concept-aware perturbations against image geolocation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the block grid chosen for an image size.
    PlanGrid(PlanGridArgs),
    /// Encode a directory of images into an embedding bank.
    BuildBank(BuildBankArgs),
    /// Train the perturbation decoder on an annotated corpus.
    Train(TrainArgs),
    /// Protect images and write lossless outputs plus JSON reports.
    Protect(ProtectArgs),
    /// Run the three-stage annotation protocol over a directory of images.
    Annotate(AnnotateArgs),
    /// Query a target model on original/protected pairs and tabulate PPR.
    Evaluate(EvaluateArgs),
    /// Protect and evaluate once per n_max value.
    SweepNmax(SweepArgs),
    /// Measure how much perturbation survives JPEG re-encoding.
    JpegTest(JpegArgs),
}

/// Budget in 1/255 units.
#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Epsilon {
    #[value(name = "8")]
    E8,
    #[value(name = "16")]
    E16,
}

impl Epsilon {
    pub fn value(self) -> f64 {
        match self {
            Epsilon::E8 => 8.0 / 255.0,
            Epsilon::E16 => 16.0 / 255.0,
        }
    }
}

#[derive(Args, Clone)]
pub struct BudgetArgs {
    #[arg(long, value_enum, default_value = "16")]
    pub epsilon: Epsilon,
    #[arg(long = "nmax", default_value_t = 64)]
    pub n_max: usize,
    /// Use each block's own embedding as the prior instead of the minimax pick.
    #[arg(long)]
    pub no_minimax: bool,
    /// Ignore concepts below this confidence.
    #[arg(long, default_value_t = 0.0)]
    pub confidence_floor: f64,
}

#[derive(Args, Clone)]
pub struct ModelArgs {
    #[arg(long)]
    pub bank: PathBuf,
    /// Encoder description; defaults to the sidecar written by build-bank.
    #[arg(long)]
    pub encoder: Option<PathBuf>,
    #[arg(long)]
    pub decoder: PathBuf,
}

#[derive(Args, Clone)]
pub struct TargetArgs {
    /// Scripted answers (JSON) standing in for the target model.
    #[arg(long, conflicts_with = "endpoint_config")]
    pub target_fixture: Option<PathBuf>,
    /// OpenAI-compatible endpoint settings (JSON).
    #[arg(long)]
    pub endpoint_config: Option<PathBuf>,
    /// Location string to codes map (JSON) standing in for the geocoder.
    #[arg(long, conflicts_with = "census")]
    pub geocoder_fixture: Option<PathBuf>,
    /// Resolve locations through the US Census geocoder.
    #[arg(long)]
    pub census: bool,
    /// Persistent geocoder cache (JSON), read before and written after.
    #[arg(long)]
    pub geocoder_cache: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "direct")]
    pub style: Style,
    #[arg(long)]
    pub query: Option<String>,
    #[arg(long)]
    pub format_instructions: Option<String>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Style {
    Direct,
    Cot,
}

#[derive(Args)]
pub struct PlanGridArgs {
    #[arg(long, requires = "height", conflicts_with = "image")]
    pub width: Option<usize>,
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub image: Option<PathBuf>,
    #[arg(long = "nmax", default_value_t = 64)]
    pub n_max: usize,
    #[arg(long, default_value_t = 224)]
    pub block_side: usize,
}

#[derive(Args)]
pub struct BuildBankArgs {
    #[arg(long)]
    pub images: PathBuf,
    /// Output bank file.
    #[arg(long)]
    pub bank: PathBuf,
    /// Existing encoder description; otherwise one is created from the flags below.
    #[arg(long)]
    pub encoder: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    pub embed_dim: usize,
    #[arg(long, default_value_t = 32)]
    pub input_side: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args)]
pub struct TrainArgs {
    /// Directory of images with `<stem>.json` annotations.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Annotation directory when it differs from the corpus directory.
    #[arg(long)]
    pub annotations: Option<PathBuf>,
    #[arg(long)]
    pub bank: PathBuf,
    #[arg(long)]
    pub encoder: Option<PathBuf>,
    /// Output checkpoint.
    #[arg(long)]
    pub decoder: PathBuf,
    /// Start from this checkpoint instead of a fresh initialisation.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long, default_value_t = 224)]
    pub block_side: usize,
    /// TOML training configuration; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    pub surrogates: usize,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long)]
    pub batch_blocks: Option<usize>,
    #[arg(long, value_enum)]
    pub epsilon: Option<Epsilon>,
    #[arg(long = "nmax")]
    pub n_max: Option<usize>,
    #[arg(long)]
    pub no_minimax: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Directory for the loss history and the resolved configuration.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct ProtectArgs {
    #[arg(long, required_unless_present = "images")]
    pub image: Vec<PathBuf>,
    #[arg(long)]
    pub images: Option<PathBuf>,
    /// Annotation directory; defaults to each image's directory.
    #[arg(long)]
    pub annotations: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub budget: BudgetArgs,
    #[arg(long)]
    pub out: PathBuf,
    /// Copy images without annotations through unchanged instead of failing.
    #[arg(long)]
    pub allow_unannotated: bool,
    #[arg(long)]
    pub workers: Option<usize>,
    /// Accepted for interface uniformity; protection is deterministic.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args)]
pub struct AnnotateArgs {
    #[arg(long)]
    pub images: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Scripted per-stage responses (JSON) standing in for the model.
    #[arg(long, conflicts_with = "endpoint_config", required_unless_present = "endpoint_config")]
    pub mock: Option<PathBuf>,
    #[arg(long)]
    pub endpoint_config: Option<PathBuf>,
    /// Prompt templates (JSON with filter, scene, reasoning).
    #[arg(long)]
    pub templates: Option<PathBuf>,
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long, default_value_t = 3)]
    pub attempts: u32,
    #[arg(long, default_value_t = 500)]
    pub backoff_ms: u64,
    #[arg(long, default_value_t = 0.8)]
    pub easy_threshold: f64,
    #[arg(long, default_value_t = 0.5)]
    pub medium_threshold: f64,
}

#[derive(Args)]
pub struct EvaluateArgs {
    /// JSON list of {id, original, adversarial, truth}.
    #[arg(long)]
    pub pairs: PathBuf,
    #[command(flatten)]
    pub target: TargetArgs,
    /// Attack label written into the table.
    #[arg(long, default_value = "geoshield")]
    pub attack: String,
    #[arg(long)]
    pub tag: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub images: PathBuf,
    #[arg(long)]
    pub annotations: Option<PathBuf>,
    /// JSON map from image id to location codes.
    #[arg(long)]
    pub truth: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "1,4,16,64,256")]
    pub values: Vec<usize>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, value_enum, default_value = "16")]
    pub epsilon: Epsilon,
    #[arg(long)]
    pub no_minimax: bool,
    #[arg(long, default_value_t = 0.0)]
    pub confidence_floor: f64,
    #[command(flatten)]
    pub target: TargetArgs,
    #[arg(long, default_value = "geoshield")]
    pub attack: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct JpegArgs {
    #[arg(long, requires = "protected", conflicts_with = "pairs")]
    pub clean: Option<PathBuf>,
    #[arg(long)]
    pub protected: Option<PathBuf>,
    /// JSON list of {id, original, adversarial}.
    #[arg(long, required_unless_present = "clean")]
    pub pairs: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "95,75,50")]
    pub quality: Vec<u8>,
    #[arg(long)]
    pub out: PathBuf,
    /// Skip writing the re-encoded images.
    #[arg(long)]
    pub no_artifacts: bool,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::PlanGrid(a) => commands::plan_grid(a),
        Command::BuildBank(a) => commands::build_bank(a),
        Command::Train(a) => commands::train(a),
        Command::Protect(a) => commands::protect(a),
        Command::Annotate(a) => commands::annotate(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::SweepNmax(a) => commands::sweep_nmax(a),
        Command::JpegTest(a) => commands::jpeg_test(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
