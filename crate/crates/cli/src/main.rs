//! `rln`: synthetic data, training, prediction and evaluation for optic disc
//! and fovea localisation.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rln_core::data::{Gaze, Modality};
use rln_core::synth::Choice;

mod commands;

#[derive(Parser, Debug)]
#[command(name = "rln", version, about = "Optic disc and fovea localisation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic dataset and its manifest.
    Synth(SynthArgs),
    /// Split a manifest into subject-disjoint train/val/test manifests.
    Split(SplitArgs),
    /// Train a model and write the best-epoch checkpoint.
    Train(TrainArgs),
    /// Run a checkpoint over a manifest.
    Predict(PredictArgs),
    /// Stratified accuracy report and accuracy curves.
    Eval(EvalArgs),
    /// Print the trainable parameter count of a configuration.
    Params(ParamsArgs),
    /// Compare analytic and finite-difference gradients.
    Gradcheck(GradcheckArgs),
    /// Grader agreement with the reference annotations.
    GraderStats(GraderStatsArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 100)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "mixed", value_parser = parse_choice::<Modality>)]
    mode: Choice<Modality>,
    #[arg(long, default_value = "mixed", value_parser = parse_choice::<Gaze>)]
    gaze: Choice<Gaze>,
    /// Image size as WIDTHxHEIGHT.
    #[arg(long, default_value = "244x192", value_parser = parse_size)]
    size: (usize, usize),
    /// Run configuration supplying the remaining generator settings.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SplitArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = 0.7)]
    train: f64,
    #[arg(long, default_value_t = 0.2)]
    val: f64,
    #[arg(long, default_value_t = 0.1)]
    test: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    val: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    log: PathBuf,
    /// Write 0 in the seconds column so repeated runs give identical logs.
    #[arg(long)]
    no_wall_time: bool,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Box-filter factor applied before the network.
    #[arg(long, default_value_t = 1)]
    downsample: usize,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    truth: PathBuf,
    #[arg(long)]
    report: PathBuf,
    #[arg(long)]
    curves: PathBuf,
    /// Laterality classifier outputs (`image_path,p_right`).
    #[arg(long)]
    class_pred: Option<PathBuf>,
    /// Factor the predictions were downsampled by; truth is scaled to match.
    #[arg(long, default_value_t = 1)]
    downsample: usize,
}

#[derive(Args, Debug)]
struct ParamsArgs {
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// First seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of consecutive seeds.
    #[arg(long, default_value_t = 100)]
    seeds: u64,
    #[arg(long, hide = true)]
    corrupt_gradient: bool,
}

#[derive(Args, Debug)]
struct GraderStatsArgs {
    #[arg(long)]
    graders: PathBuf,
    #[arg(long)]
    truth: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn parse_choice<T: std::str::FromStr<Err = rln_core::Error>>(s: &str) -> Result<Choice<T>, String> {
    s.parse().map_err(|e: rln_core::Error| e.to_string())
}

fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let (w, h) = s.split_once(['x', 'X']).ok_or("expected WIDTHxHEIGHT")?;
    let w = w.parse().map_err(|_| format!("bad width '{w}'"))?;
    let h = h.parse().map_err(|_| format!("bad height '{h}'"))?;
    Ok((w, h))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
