use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;

#[derive(Parser)]
#[command(name = "callig", version, about = "Variational imitation-learning planner for robotic calligraphy")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render expert demonstrations into a dataset directory.
    Generate(GenerateArgs),
    /// Train a policy; writes checkpoint.ckpt, train_log.csv and config.toml.
    Train(TrainArgs),
    /// Evaluate a checkpoint open or closed loop; writes report.json and overlay.png.
    Eval(EvalArgs),
    /// Train and evaluate ablation variants; writes one directory per variant and summary.csv.
    Ablate(AblateArgs),
}

#[derive(Args)]
pub struct GenerateArgs {
    /// Built-in template id; repeat for several.
    #[arg(long = "template", required = true)]
    pub templates: Vec<String>,
    /// Demonstrations per template.
    #[arg(long, default_value_t = 1)]
    pub count: usize,
    /// Style seed of the first demonstration.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Render the templates exactly, without style jitter.
    #[arg(long)]
    pub no_jitter: bool,
    /// Take simulator settings from this run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; defaults to `output_dir` from the configuration.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum Mode {
    Open,
    Closed,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Evaluate on every demonstration in this dataset.
    #[arg(long, conflicts_with = "templates", required_unless_present = "templates")]
    pub dataset: Option<PathBuf>,
    /// Evaluate on a freshly rendered demonstration of this template; repeat for several.
    #[arg(long = "template")]
    pub templates: Vec<String>,
    /// Style seed for --template demonstrations.
    #[arg(long, default_value_t = 0)]
    pub style_seed: u64,
    /// Apply style jitter to --template demonstrations.
    #[arg(long)]
    pub jitter: bool,
    #[arg(long, value_enum)]
    pub mode: Mode,
    /// Closed-loop step budget (default: three times the expert length).
    #[arg(long)]
    pub max_steps: Option<usize>,
    /// Perturb observed poses during closed-loop rollouts.
    #[arg(long)]
    pub pose_noise: bool,
    /// Perturb observed images during closed-loop rollouts.
    #[arg(long)]
    pub image_noise: bool,
    #[arg(long, default_value_t = 0)]
    pub noise_seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Comma-separated variants (full, no_bilstm, no_variational, resnet_only,
    /// no_image_aug, no_pose_aug); all when omitted.
    #[arg(long, value_delimiter = ',')]
    pub variants: Vec<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(a) => commands::generate(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Ablate(a) => commands::ablate(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
