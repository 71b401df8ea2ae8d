mod commands;
mod config;

use std::ffi::OsString;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use msrnn_core::cells::CellKind;
use msrnn_core::metrics::LossKind;
use msrnn_core::stack::SkipMode;
use msrnn_core::Error;

/// Multi-scale recurrent stacks for video prediction: data, training,
/// evaluation, cost analysis, receptive fields and frame export.
///
/// Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
#[derive(Parser, Debug)]
#[command(name = "msrnn", version, args_override_self = true)]
struct Cli {
    /// INI file with [data], [model], [train] and [eval] sections; keys are
    /// flag names and explicit flags override them
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate bouncing-digit train/test sets as STF1 files
    GenData(GenDataArgs),
    /// Train a stack with scheduled sampling
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset
    Eval(EvalArgs),
    /// Closed-form (and optionally measured) memory and FLOPs costs
    Analyze(AnalyzeArgs),
    /// Theoretical and measured receptive fields of the encoder layers
    Rf(RfArgs),
    /// Write truth, prediction and difference frames as PGM images
    Export(ExportArgs),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    /// Output directory (receives train.stf1, test.stf1, provenance.txt)
    #[arg(long)]
    out: PathBuf,
    /// Training sequences
    #[arg(long, default_value_t = 2000)]
    count: usize,
    /// Test sequences
    #[arg(long, default_value_t = 400)]
    test_count: usize,
    /// Frame side in pixels
    #[arg(long, default_value_t = 32)]
    size: usize,
    /// Digits per sequence
    #[arg(long, default_value_t = 1)]
    digits: usize,
    /// Frames per sequence
    #[arg(long, default_value_t = 20)]
    frames: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// IDX image file for training digits (synthetic glyphs when absent)
    #[arg(long)]
    idx_train: Option<PathBuf>,
    /// IDX image file for test digits (synthetic glyphs when absent)
    #[arg(long)]
    idx_test: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
struct ModelArgs {
    /// Recurrent cell
    #[arg(long, default_value_t = CellKind::ConvLstm)]
    cell: CellKind,
    /// Layer scale schedule: plain (full resolution) or ms (mirror pyramid)
    #[arg(long, default_value = "ms", value_parser = ["plain", "ms"])]
    variant: String,
    /// Encoder-to-decoder hidden-state shortcuts (unet requires --variant ms)
    #[arg(long, default_value_t = SkipMode::Unet)]
    skip: SkipMode,
    /// Stacked layers N
    #[arg(long, default_value_t = 6)]
    layers: usize,
    /// Hidden channels c
    #[arg(long, default_value_t = 8)]
    hidden: usize,
    /// Convolution kernel size k
    #[arg(long, default_value_t = 3)]
    kernel: usize,
    /// Zigzag memory flow (probe cell only)
    #[arg(long)]
    zigzag: bool,
    /// Diagonal hidden-state flow (probe cell only)
    #[arg(long)]
    diagonal: bool,
    /// Observed frames m
    #[arg(long, default_value_t = 10)]
    history: usize,
    /// Predicted frames n
    #[arg(long, default_value_t = 10)]
    horizon: usize,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Training set (STF1)
    #[arg(long)]
    train_data: PathBuf,
    /// Test set evaluated after every epoch (STF1)
    #[arg(long)]
    test_data: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    epochs: usize,
    #[arg(long, default_value_t = 4)]
    batch_size: usize,
    /// Adam learning rate
    #[arg(long, default_value_t = 3e-4)]
    lr: f32,
    /// Training loss: l1, l2 or l1+l2
    #[arg(long, default_value_t = LossKind::L1L2)]
    loss: LossKind,
    /// Fraction of all iterations after which ground truth is never fed back
    #[arg(long, default_value_t = 0.75)]
    decay: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Global gradient-norm clip
    #[arg(long, default_value_t = 10.0)]
    clip: f64,
    /// Disable gradient clipping
    #[arg(long)]
    no_clip: bool,
    /// Checkpoint written after every epoch
    #[arg(long, default_value = "model.msck")]
    checkpoint: PathBuf,
    /// Per-epoch metric log (CSV, appended)
    #[arg(long)]
    log: Option<PathBuf>,
    /// Continue from this checkpoint
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Stop after this many optimizer steps in total
    #[arg(long)]
    stop_after: Option<u64>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset to score (STF1)
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    /// Comma-separated intensity thresholds for CSI/HSS and B-MSE/B-MAE
    #[arg(long, value_delimiter = ',')]
    thresholds: Vec<f64>,
    /// Per-step metrics CSV
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    /// Layers N
    #[arg(long, default_value_t = 6)]
    layers: usize,
    /// Time steps R
    #[arg(long, default_value_t = 20)]
    steps: usize,
    /// Batch size b
    #[arg(long, default_value_t = 4)]
    batch: usize,
    /// Hidden channels c
    #[arg(long, default_value_t = 64)]
    channels: usize,
    /// Frame height h
    #[arg(long, default_value_t = 64)]
    height: usize,
    /// Frame width w
    #[arg(long, default_value_t = 64)]
    width: usize,
    /// Kernel size k
    #[arg(long, default_value_t = 3)]
    kernel: usize,
    /// Cell parameter/FLOPs multiple of a plain convolution
    #[arg(long, default_value_t = 8.0)]
    u_tilde: f64,
    /// Cell activation-space multiple
    #[arg(long, default_value_t = 8.0)]
    u: f64,
    /// Write the report rows as CSV
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Also build both stacks and count stored elements and convolution FLOPs on the tape
    #[arg(long)]
    measure: bool,
}

#[derive(Args, Debug)]
struct RfArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Square input side for the measured fields
    #[arg(long, default_value_t = 64)]
    size: usize,
    /// Weight initialization seed
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Args, Debug)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset holding the sequences to render (STF1)
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated sequence indices
    #[arg(long, value_delimiter = ',', default_value = "0")]
    indices: Vec<usize>,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    /// Also write one side-by-side montage per sequence (inputs, truth, prediction, difference rows)
    #[arg(long)]
    montage: bool,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Divisibility { .. } | Error::InvalidShape(_) | Error::ShapeMismatch { .. } => 2,
        Error::Data(_) | Error::Format(_) | Error::Io(_) => 3,
        Error::NonFinite(_) | Error::NotScalar(_) => 4,
    }
}

/// Position of the subcommand in `args` and the value of `--config`, if any.
fn locate(args: &[OsString], names: &[String]) -> (Option<usize>, Option<PathBuf>) {
    let mut sub = None;
    let mut config = None;
    let mut i = 1;
    while i < args.len() {
        let a = args[i].to_string_lossy();
        if a == "--config" {
            config = args.get(i + 1).map(PathBuf::from);
            i += 1;
        } else if let Some(p) = a.strip_prefix("--config=") {
            config = Some(PathBuf::from(p));
        } else if sub.is_none() && names.iter().any(|n| *n == a) {
            sub = Some(i);
        }
        i += 1;
    }
    (sub, config)
}

/// Splices config-file flags in right after the subcommand name.
fn expand_args(args: Vec<OsString>) -> Result<Vec<OsString>, Error> {
    let cmd = Cli::command();
    let names: Vec<String> = cmd.get_subcommands().map(|c| c.get_name().to_string()).collect();
    let (Some(pos), Some(path)) = locate(&args, &names) else {
        return Ok(args);
    };
    let name = args[pos].to_string_lossy().to_string();
    let sub = cmd.find_subcommand(&name).expect("located by name");
    let accepted: Vec<String> = sub.get_arguments().filter_map(|a| a.get_long().map(str::to_string)).collect();
    let injected = config::flags_for(&path, &name, &accepted)?;
    let mut out = args[..=pos].to_vec();
    out.extend(injected.into_iter().map(OsString::from));
    out.extend_from_slice(&args[pos + 1..]);
    Ok(out)
}

fn log_resolved(matches: &clap::ArgMatches) {
    let Some((name, sub)) = matches.subcommand() else { return };
    let cmd = Cli::command();
    let Some(spec) = cmd.find_subcommand(name) else { return };
    eprintln!("[{name}]");
    for id in sub.ids().filter(|id| spec.get_arguments().any(|a| a.get_id() == *id)) {
        if let Ok(Some(values)) = sub.try_get_raw(id.as_str()) {
            let v: Vec<String> = values.map(|v| v.to_string_lossy().into_owned()).collect();
            eprintln!("{} = {}", id, v.join(","));
        }
    }
}

fn main() -> ExitCode {
    let args = match expand_args(std::env::args_os().collect()) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(exit_code(&e));
        }
    };
    let matches = Cli::command().get_matches_from(args);
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    log_resolved(&matches);
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Analyze(a) => commands::analyze(a),
        Command::Rf(a) => commands::rf(a),
        Command::Export(a) => commands::export(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
