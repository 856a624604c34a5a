use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use nvs_core::check::Fault;
use nvs_core::commands;
use nvs_core::render::Branch;
use nvs_core::Error;

/// Single-view novel view synthesis on synthetic layered scenes.
#[derive(Debug, Parser)]
#[command(name = "nvs", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write oracle images, teacher disparity, sparse points and a manifest.
    Synth { config: PathBuf },
    /// Train the coarse planes, then the fine decoder.
    Train {
        config: PathBuf,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
        /// Stop once this many total steps are done.
        #[arg(long)]
        until: Option<u64>,
    },
    /// Render one branch of a trained model to PNG and PFM.
    Render {
        config: PathBuf,
        /// source, target-N or held-out-N
        #[arg(long, default_value = "held-out-0")]
        view: String,
        #[arg(long, default_value = "joint")]
        branch: Branch,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Output path without extension.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Image and depth metrics of every branch on the held-out views.
    Eval {
        config: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run the built-in invariant suites.
    Check {
        /// Deliberately break the engine to confirm a suite notices.
        #[arg(long, value_name = "FAULT")]
        inject_fault: Option<Fault>,
    },
}

const EXIT_USAGE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_DIVERGENCE: u8 = 3;
const EXIT_SUITE: u8 = 4;

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => EXIT_CONFIG,
        Error::Divergence { .. } => EXIT_DIVERGENCE,
        _ => EXIT_USAGE,
    }
}

fn configure_threads() -> Result<(), String> {
    let Ok(v) = std::env::var("NVS_THREADS") else {
        return Ok(());
    };
    let n: usize = v.parse().map_err(|_| format!("NVS_THREADS must be a positive integer, got {v:?}"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

fn run(cmd: Command) -> Result<u8, Error> {
    match cmd {
        Command::Synth { config } => {
            for f in commands::synth(&config)? {
                println!("{}", f.display());
            }
        }
        Command::Train { config, resume, until } => {
            let out = commands::train(&config, resume, until)?;
            println!(
                "trained steps {}..{} final loss {} -> {}",
                out.first_step,
                out.steps,
                out.final_loss,
                out.checkpoint.display()
            );
        }
        Command::Render {
            config,
            view,
            branch,
            checkpoint,
            out,
        } => {
            let (png, pfm, _) = commands::render(&config, checkpoint.as_deref(), &view, branch, out.as_deref())?;
            println!("{}\n{}", png.display(), pfm.display());
        }
        Command::Eval { config, checkpoint } => {
            let (path, summary) = commands::eval(&config, checkpoint.as_deref())?;
            for b in Branch::ALL {
                let get = |k: &str| summary.get_f64(&format!("mean.{b}.{k}")).unwrap_or(f64::NAN);
                println!("{b}: psnr {:.2} ssim {:.4} rms {:.4}", get("psnr"), get("ssim"), get("rms"));
            }
            println!("{}", path.display());
        }
        Command::Check { inject_fault } => {
            let reports = commands::check(inject_fault)?;
            for r in &reports {
                println!("{r}");
            }
            if reports.iter().any(|r| !r.passed) {
                return Ok(EXIT_SUITE);
            }
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(EXIT_USAGE);
    }
    match run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
