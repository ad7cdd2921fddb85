mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gated_res2net::blocks::Arch;

#[derive(Debug, Parser)]
#[command(name = "gated-res2net", version, about = "Gated Res2Net anti-spoofing pipelines")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

fn parse_arch(s: &str) -> Result<Arch, String> {
    s.parse::<Arch>().map_err(|_| format!("unknown architecture `{s}` (expected res2net, scg, mcg or mlcg)"))
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic bonafide/spoof corpus.
    SynthData(SynthArgs),
    /// Extract fixed-size CQT features for every WAV in a list.
    Extract(ExtractArgs),
    /// Train a model with dev-EER model selection.
    Train(TrainArgs),
    /// Score a protocol's trials with a checkpoint.
    Evaluate(EvaluateArgs),
    /// EER, min t-DCF and per-attack accuracy of a score file.
    Metrics(MetricsArgs),
    /// Print learnable parameter counts of a backbone.
    ParamCount(ParamCountArgs),
    /// Finite-difference gradient checks on a tiny configuration.
    GradCheck(GradCheckArgs),
    /// Re-run the command recorded in a manifest with its resolved config.
    Replay(ReplayArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// key=value file of generator settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    /// One WAV path per line, relative paths resolved against the list's directory.
    #[arg(long)]
    pub wav_list: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Lowest CQT frequency in Hz.
    #[arg(long)]
    pub fmin: Option<f64>,
    /// Frame step in seconds.
    #[arg(long)]
    pub hop: Option<f64>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub features: PathBuf,
    /// Directory holding train.txt and dev.txt.
    #[arg(long)]
    pub protocols: PathBuf,
    #[arg(long, value_parser = parse_arch)]
    pub arch: Arch,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Stop once the dev EER reaches this value.
    #[arg(long)]
    pub target_dev_eer: Option<f64>,
    /// key=value file of backbone, training and optimizer settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long)]
    pub protocol: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
}

#[derive(Debug, Args)]
pub struct MetricsArgs {
    #[arg(long)]
    pub scores: PathBuf,
    /// key=value file of t-DCF costs, priors and ASV error rates.
    #[arg(long)]
    pub tdcf_params: Option<PathBuf>,
    /// Protocol file mapping trials to attacks, for per-attack accuracy.
    #[arg(long)]
    pub attacks: Option<PathBuf>,
    /// CSV report; printed to stdout either way.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ParamCountArgs {
    #[arg(long, value_parser = parse_arch)]
    pub arch: Arch,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradCheckArgs {
    #[arg(long, value_parser = parse_arch)]
    pub arch: Arch,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of consecutive seeds to check, starting at --seed.
    #[arg(long, default_value_t = 1)]
    pub seeds: u64,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    #[arg(long)]
    pub manifest: PathBuf,
}

fn init_threads() -> Result<(), String> {
    let Ok(raw) = std::env::var("GATED_RES2NET_THREADS") else { return Ok(()) };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("GATED_RES2NET_THREADS must be a positive integer, got {raw:?}"))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let argv: Vec<String> = std::env::args().collect();
    // clap exits with status 2 on usage errors
    let cli = Cli::parse_from(&argv);
    if let Err(e) = init_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    match commands::run(cli.command, &argv, None) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
