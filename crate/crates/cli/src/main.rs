mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(
    name = "sctts",
    version,
    about = "Speed-controllable text-to-speech toolkit"
)]
struct Cli {
    /// JSON config with feature, model, train, rate and paths sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Increase log detail (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic corpus with known durations and pitch.
    CorpusSynth(CorpusSynthArgs),
    /// Extract mel features and speaking rates from a manifest.
    Features(FeaturesArgs),
    /// Train a model on a manifest.
    Train(TrainArgs),
    /// Synthesize one utterance.
    Synth(SynthArgs),
    /// Mean F0 against speaking rate over a corpus.
    AnalyzeScatter(ScatterArgs),
    /// Mean F0 of synthesized speech across requested rates.
    AnalyzeF0sr(F0srArgs),
    /// Length-control accuracy across length scales.
    AnalyzeLength(LengthArgs),
}

#[derive(Args, Debug)]
pub struct CorpusSynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Pitch-speed correlation of the generator, in [-1, 1].
    #[arg(long, allow_hyphen_values = true)]
    pub correlation: Option<f64>,
    /// JSON file with generator settings.
    #[arg(long)]
    pub synth_config: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct FeaturesArgs {
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub work_dir: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Scale schedule milestones to the step budget.
    #[arg(long)]
    pub proportional_schedule: bool,
    /// Enable the style-token encoder.
    #[arg(long)]
    pub gst: bool,
    /// Use the small model preset.
    #[arg(long)]
    pub tiny: bool,
    /// Hold out this fraction of the manifest and write both halves.
    #[arg(long)]
    pub test_fraction: Option<f64>,
}

#[derive(Args, Debug)]
pub struct InferenceArgs {
    /// Checkpoint directory.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Reference WAV for style-token models.
    #[arg(long)]
    pub reference: Option<PathBuf>,
    /// Restrict attention to advance monotonically.
    #[arg(long)]
    pub monotonic: bool,
    /// Frame cap as a multiple of the expected length.
    #[arg(long, default_value_t = 1.3)]
    pub margin: f64,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[command(flatten)]
    pub inference: InferenceArgs,
    /// Whitespace-separated phoneme symbols.
    #[arg(long)]
    pub text: String,
    #[arg(long, conflicts_with = "length_scale")]
    pub sr: Option<f64>,
    #[arg(long)]
    pub length_scale: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the generated mel.
    #[arg(long)]
    pub mel_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ScatterArgs {
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct F0srArgs {
    #[command(flatten)]
    pub inference: InferenceArgs,
    /// File with one phoneme text per line.
    #[arg(long)]
    pub texts: PathBuf,
    /// Comma-separated rates; defaults to 0.6..1.4 times the mean rate.
    #[arg(long, value_delimiter = ',')]
    pub grid: Option<Vec<f64>>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct LengthArgs {
    #[command(flatten)]
    pub inference: InferenceArgs,
    /// File with one phoneme text per line.
    #[arg(long)]
    pub texts: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0.7,1.0,1.5")]
    pub scales: Vec<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).init();
    let result = config::CliConfig::load(cli.config.as_deref()).and_then(|cfg| {
        cfg.validate()?;
        match cli.command {
            Command::CorpusSynth(a) => commands::corpus_synth(&cfg, &a),
            Command::Features(a) => commands::features(&cfg, &a),
            Command::Train(a) => commands::train(&cfg, &a),
            Command::Synth(a) => commands::synth(&a),
            Command::AnalyzeScatter(a) => commands::analyze_scatter(&cfg, &a),
            Command::AnalyzeF0sr(a) => commands::analyze_f0sr(&a),
            Command::AnalyzeLength(a) => commands::analyze_length(&a),
        }
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
