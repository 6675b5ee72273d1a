mod commands;
mod error;
mod inputs;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use seld_core::dsp::FilterKind;

use crate::error::EXIT_VALIDATION;

#[derive(Debug, Parser)]
#[command(name = "seld", version, about = "3D sound event localization and detection toolkit")]
struct Cli {
    /// Print machine-readable JSON on stdout.
    #[arg(long, global = true)]
    json: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// FOA feature extraction.
    #[command(subcommand)]
    Features(FeaturesCmd),
    /// Filter-bank inspection.
    #[command(subcommand)]
    Filterbank(FilterbankCmd),
    /// Encode labels into a multi-ACCDOA target tensor.
    Encode(EncodeArgs),
    /// ADPIT loss evaluation.
    #[command(subcommand)]
    Loss(LossCmd),
    /// Detection and localization metrics.
    #[command(subcommand)]
    Metrics(MetricsCmd),
    /// SCConv-CST model operations.
    #[command(subcommand)]
    Model(ModelCmd),
    /// Tabulate metrics of several filter banks on the same references.
    Compare(CompareArgs),
}

#[derive(Debug, Args)]
pub struct BankArgs {
    #[arg(long, value_parser = parse_filter)]
    pub filter: FilterKind,
    #[arg(long, default_value_t = seld_core::dsp::DEFAULT_N_BANDS)]
    pub bands: usize,
    #[arg(long, default_value_t = seld_core::dsp::DEFAULT_F_MIN)]
    pub f_min: f64,
    #[arg(long, default_value_t = seld_core::dsp::DEFAULT_F_MAX)]
    pub f_max: f64,
}

#[derive(Debug, Subcommand)]
enum FeaturesCmd {
    /// WAV clip to a (7, T, bands) SELDT feature map.
    Extract(ExtractArgs),
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    #[command(flatten)]
    pub bank: BankArgs,
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
enum FilterbankCmd {
    /// Weight matrix as CSV, one row per band.
    Dump(DumpArgs),
}

#[derive(Debug, Args)]
pub struct DumpArgs {
    #[command(flatten)]
    pub bank: BankArgs,
    /// Output path, or `-` for stdout.
    #[arg(long)]
    pub csv: PathBuf,
}

#[derive(Debug, Args)]
pub struct EncodeArgs {
    /// Label CSV or JSON sidecar.
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Label frames in the target.
    #[arg(long, default_value_t = seld_core::labels::LABEL_FRAMES_PER_SECOND)]
    pub frames: usize,
}

#[derive(Debug, Subcommand)]
enum LossCmd {
    Eval(LossArgs),
}

#[derive(Debug, Args)]
pub struct LossArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub labels: PathBuf,
    /// Also write the JSON result here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum MetricsCmd {
    Eval(MetricsArgs),
}

#[derive(Debug, Args)]
pub struct MetricsArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long = "ref")]
    pub reference: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// One-row CSV summary.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum ModelCmd {
    /// Run the model on a feature map.
    Forward(ForwardArgs),
    /// Compare analytic and numerical gradients.
    Gradcheck(GradcheckArgs),
    /// Fit one segment with plain gradient descent.
    Overfit(OverfitArgs),
    /// Parameter count.
    Params(ParamsArgs),
}

#[derive(Debug, Args)]
pub struct ForwardArgs {
    #[arg(long)]
    pub cfg: PathBuf,
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Checkpoint to load instead of seeded initialization.
    #[arg(long)]
    pub params: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long)]
    pub cfg: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub n_params: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub h: f64,
    /// Largest acceptable relative error.
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
}

#[derive(Debug, Args)]
pub struct OverfitArgs {
    #[arg(long)]
    pub cfg: PathBuf,
    /// Segment sidecar; its `feature` entry names the feature map, otherwise
    /// seeded synthetic features are used.
    #[arg(long)]
    pub seg: PathBuf,
    #[arg(long, default_value_t = 500)]
    pub steps: usize,
    #[arg(long, default_value_t = 1e-2)]
    pub lr: f64,
    /// Per-step loss CSV.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// Save the fitted parameters.
    #[arg(long)]
    pub save: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ParamsArgs {
    #[arg(long)]
    pub cfg: PathBuf,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    /// Comma-separated filter names.
    #[arg(long, value_delimiter = ',', value_parser = parse_filter, default_value = "mel,bark,gammatone")]
    pub filters: Vec<FilterKind>,
    /// Holds `<filter>/<clip>.seldt` for every reference clip.
    #[arg(long)]
    pub pred_dir: PathBuf,
    /// Holds one `<clip>.json` or `<clip>.csv` label file per clip.
    #[arg(long)]
    pub ref_dir: PathBuf,
    /// Write the table here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_filter(s: &str) -> Result<FilterKind, String> {
    s.parse().map_err(|e: seld_core::SeldError| e.to_string())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let argv: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_VALIDATION as u8) } else { ExitCode::SUCCESS };
        }
    };
    let mut rec = manifest::Recorder::new(argv);
    let result = match cli.command {
        Command::Features(FeaturesCmd::Extract(a)) => commands::features_extract(&a, &mut rec),
        Command::Filterbank(FilterbankCmd::Dump(a)) => commands::filterbank_dump(&a, &mut rec),
        Command::Encode(a) => commands::encode(&a, &mut rec),
        Command::Loss(LossCmd::Eval(a)) => commands::loss_eval(&a, &mut rec),
        Command::Metrics(MetricsCmd::Eval(a)) => commands::metrics_eval(&a, &mut rec),
        Command::Model(ModelCmd::Forward(a)) => commands::model_forward(&a, &mut rec),
        Command::Model(ModelCmd::Gradcheck(a)) => commands::model_gradcheck(&a, &mut rec),
        Command::Model(ModelCmd::Overfit(a)) => commands::model_overfit(&a, &mut rec),
        Command::Model(ModelCmd::Params(a)) => commands::model_params(&a, &mut rec),
        Command::Compare(a) => commands::compare(&a, &mut rec),
    };
    match result {
        Ok(out) => {
            if cli.json {
                if !out.json.is_null() {
                    println!("{}", serde_json::to_string_pretty(&out.json).expect("JSON values serialize"));
                }
            } else if !out.text.is_empty() {
                println!("{}", out.text.trim_end());
            }
            match out.failure {
                Some(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(e.code as u8)
                }
                None => ExitCode::SUCCESS,
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code as u8)
        }
    }
}
