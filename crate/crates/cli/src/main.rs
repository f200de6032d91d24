mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "esc", version, about = "Transition-aware emotional support response generation")]
pub struct Cli {
    /// JSON config file with `model`, `train` and `generation` sections.
    #[arg(long, global = true, env = "ESC_CONFIG")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Fill missing keywords and seeker emotions.
    Annotate(AnnotateArgs),
    /// Cut dialogues into examples and split them into train/dev/test.
    Split(SplitArgs),
    /// Train a model.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Write sampled responses for a dataset.
    Generate(GenerateArgs),
    /// Talk to a checkpoint on stdin.
    Chat(ChatArgs),
}

#[derive(Args, Debug)]
pub struct AnnotateArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    /// Fit TF-IDF statistics on this file instead of the input.
    #[arg(long)]
    pub fit_on: Option<PathBuf>,
    #[arg(long)]
    pub keywords_k: Option<usize>,
    /// Keep stopwords as keyword candidates.
    #[arg(long)]
    pub keep_stopwords: bool,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
pub enum SegmentationArg {
    NonOverlapping,
    PerResponse,
}

#[derive(Args, Debug)]
pub struct SplitArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Train:dev:test proportions.
    #[arg(long, default_value = "8:1:1", value_parser = config::parse_ratio)]
    pub ratio: [u32; 3],
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value = "non-overlapping")]
    pub segmentation: SegmentationArg,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
pub enum ModelSize {
    Tiny,
    Desk,
    Large,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub dev: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Continue from a trainer checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Directory for prepared-example caches.
    #[arg(long)]
    pub cache_dir: Option<PathBuf>,
    /// Print the resolved configuration and exit.
    #[arg(long)]
    pub dry_run: bool,

    /// Loss weights of generation, keywords, strategy and emotion.
    #[arg(long, value_parser = config::parse_gamma)]
    pub gamma: Option<[f64; 4]>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub warmup: Option<u64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub max_steps: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub keywords_k: Option<usize>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub clip_norm: Option<f64>,
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
    #[arg(long)]
    pub eval_every: Option<u64>,
    #[arg(long)]
    pub patience: Option<usize>,

    #[arg(long, value_enum)]
    pub model_size: Option<ModelSize>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub teacher_force_strategy: Option<bool>,
    #[arg(long)]
    pub keyword_loss_on_placeholder: Option<bool>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct GenerationFlags {
    #[arg(long)]
    pub top_p: Option<f64>,
    #[arg(long)]
    pub top_k: Option<usize>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub rep_penalty: Option<f64>,
    #[arg(long)]
    pub max_new_tokens: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub report: PathBuf,
    /// Also write the sampled responses as JSON lines.
    #[arg(long)]
    pub generations: Option<PathBuf>,
    #[command(flatten)]
    pub generation: GenerationFlags,
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    #[command(flatten)]
    pub generation: GenerationFlags,
}

#[derive(Args, Debug)]
pub struct ChatArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub generation: GenerationFlags,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
