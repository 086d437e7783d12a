//! `splat4d`: render, fit, stream and evaluate 4D Gaussian scenes.
//!
//! Exit status: 0 on success, 1 for usage errors, 2 for bad or missing data,
//! 3 for numerical failures. A diverged fit still writes its last finite state.

mod commands;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::error::ErrorKind;
use clap::{ArgAction, Parser, Subcommand};

use commands::{Context, Failure, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "splat4d", version, about = "Render, fit, stream and evaluate 4D Gaussian scenes")]
#[command(arg_required_else_help = true)]
struct Cli {
    /// Seed for every random choice; overrides `fit.seed` from --config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads.
    #[arg(long, global = true, value_parser = clap::value_parser!(u32).range(1..))]
    threads: Option<u32>,
    /// JSON with optional `fit` and `stream` sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Add wall-clock timings to reports.
    #[arg(long, global = true)]
    timing: bool,
    /// More log output on stderr; repeat for debug.
    #[arg(short, long, global = true, action = ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render a scene from one of its cameras at a given time.
    Render(commands::RenderArgs),
    /// Learn Taylor motion from the frames of a manifest.
    FitMotion(commands::FitMotionArgs),
    /// Distill per-Gaussian features and the decoder.
    FitSemantics(commands::FitSemanticsArgs),
    /// Compose per-frame scenes causally, one manifest frame at a time.
    Stream(commands::StreamArgs),
    /// Scene flow metrics.
    EvalFlow(commands::EvalFlowArgs),
    /// Segmentation metrics.
    EvalSeg(commands::EvalSegArgs),
    /// PSNR, SSIM and optional depth RMSE.
    EvalPhoto(commands::EvalPhotoArgs),
    /// Select pixels whose decoded feature matches a text label.
    Query(commands::QueryArgs),
}

fn run(cli: &Cli) -> Result<report::Report, Failure> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n as usize)
            .build_global()
            .map_err(|e| Failure::data(format!("thread pool: {e}")))?;
    }
    let mut config = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        config.fit.seed = s;
    }
    let ctx = Context { config, timing: cli.timing };
    match &cli.command {
        Command::Render(a) => commands::render_cmd(a),
        Command::FitMotion(a) => commands::fit_motion_cmd(a, &ctx),
        Command::FitSemantics(a) => commands::fit_semantics_cmd(a, &ctx),
        Command::Stream(a) => commands::stream_cmd(a, &ctx),
        Command::EvalFlow(a) => commands::eval_flow_cmd(a),
        Command::EvalSeg(a) => commands::eval_seg_cmd(a),
        Command::EvalPhoto(a) => commands::eval_photo_cmd(a),
        Command::Query(a) => commands::query_cmd(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let started = Instant::now();
    let result = run(&cli);
    let elapsed = cli.timing.then(|| started.elapsed().as_secs_f64());
    match result {
        Ok(r) => {
            println!("{}", report::to_line(&r, elapsed));
            ExitCode::SUCCESS
        }
        Err(f) => {
            if let Some(r) = &f.report {
                println!("{}", report::to_line(r, elapsed));
            }
            eprintln!("error: {}", f.message);
            ExitCode::from(f.exit_code())
        }
    }
}
