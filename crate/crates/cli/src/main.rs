use std::fs;
use std::net::{IpAddr, SocketAddr};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use cpad_cli::commands::{self, GRADCHECK_TOL};
use cpad_cli::service::{self, AppState};
use cpad_core::eval::SweepAxis;
use cpad_core::noise::SampleMode;
use cpad_core::CameraParams;
use tracing_subscriber::EnvFilter;

#[derive(Parser)]
#[command(name = "cpad", version, about = "Camera-parameter conditioned denoising")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Camera {
    #[arg(long)]
    iso: f64,
    /// Shutter speed in s⁻¹ (30 means 1/30 s).
    #[arg(long)]
    shutter: f64,
    #[arg(long, conflicts_with = "device")]
    fnum: Option<f64>,
    /// Device code of a fixed-aperture camera.
    #[arg(long)]
    device: Option<usize>,
}

impl Camera {
    fn params(&self) -> Result<CameraParams> {
        let p = match (self.fnum, self.device) {
            (Some(f), None) => CameraParams::with_f_number(self.iso, self.shutter, f),
            (None, Some(d)) => CameraParams::with_device(self.iso, self.shutter, d),
            _ => bail!("exactly one of --fnum and --device is required"),
        };
        p.validate()?;
        Ok(p)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Print the 27-value condition vector as JSON.
    Encode {
        #[command(flatten)]
        camera: Camera,
        /// JSON file {"iso":[lo,hi],"shutter":[lo,hi],"fnum":[lo,hi]}.
        #[arg(long)]
        ranges: Option<PathBuf>,
        /// Take ranges and the device embedding from this checkpoint.
        #[arg(long)]
        ckpt: Option<PathBuf>,
    },
    /// Write a synthetic noisy/clean dataset.
    Synth {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 64)]
        patch: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// correlated or independent parameter sampling.
        #[arg(long, default_value = "correlated")]
        mode: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the finite-difference gradient checks and print a table.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a model; writes checkpoints and metrics.jsonl into --out.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Train the unconditioned baseline instead.
        #[arg(long)]
        baseline: bool,
    },
    /// Score a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also sweep ISO over these values for every image.
        #[arg(long)]
        sweep_grid: Option<String>,
    },
    /// Denoise one image repeatedly with one camera parameter swept.
    Sweep {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Optional clean reference for PSNR.
        #[arg(long)]
        clean: Option<PathBuf>,
        #[arg(long, default_value = "iso")]
        axis: SweepAxis,
        #[arg(long, default_value = "100,400,1600,6400")]
        grid: String,
        #[arg(long, default_value_t = 400.0)]
        iso: f64,
        #[arg(long, default_value_t = 30.0)]
        shutter: f64,
        #[arg(long)]
        fnum: Option<f64>,
        #[arg(long)]
        device: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve the HTTP API.
    Serve {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        bind: IpAddr,
    },
}

fn init_logging() {
    let filter = EnvFilter::try_from_env("CPAD_LOG").unwrap_or_else(|_| EnvFilter::new("info"));
    tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .init();
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Encode { camera, ranges, ckpt } => {
            let ranges = ranges.as_deref().map(commands::read_ranges).transpose()?;
            let v = commands::encode_params(&camera.params()?, ranges, ckpt.as_deref())?;
            println!("{}", serde_json::to_string(&v)?);
        }
        Command::Synth {
            n,
            patch,
            seed,
            mode,
            out,
        } => {
            let mode: SampleMode = serde_json::from_value(serde_json::Value::String(mode.clone()))
                .with_context(|| format!("unknown sampling mode {mode:?}"))?;
            commands::synth(n, patch, seed, mode, &out)?;
            tracing::info!(n, dir = %out.display(), "wrote dataset");
        }
        Command::Gradcheck { seed } => {
            let reports = commands::gradcheck(seed)?;
            print!("{}", commands::gradcheck_table(&reports));
            if !reports.iter().all(|r| r.passed(GRADCHECK_TOL)) {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Train {
            config,
            data,
            out,
            baseline,
        } => {
            let cfg = config
                .as_deref()
                .map(commands::read_run_config)
                .transpose()?
                .unwrap_or_default();
            let result = commands::train_cmd(&cfg, &data, &out, baseline)?;
            let last = result.log.iter().rev().find_map(|r| r.val_psnr);
            tracing::info!(val_psnr = ?last, dir = %out.display(), "training finished");
        }
        Command::Eval {
            ckpt,
            data,
            out,
            sweep_grid,
        } => {
            let grid = sweep_grid.as_deref().map(commands::parse_grid).transpose()?;
            let report = commands::eval_cmd(&ckpt, &data, grid.as_deref())?;
            fs::write(&out, serde_json::to_vec_pretty(&report)?)?;
            println!(
                "psnr {:.3} dB  ssim {:.4}  ({} images)",
                report.mean_psnr,
                report.mean_ssim,
                report.images.len()
            );
        }
        Command::Sweep {
            ckpt,
            image,
            clean,
            axis,
            grid,
            iso,
            shutter,
            fnum,
            device,
            out,
        } => {
            let base = Camera {
                iso,
                shutter,
                fnum: fnum.or(device.is_none().then_some(2.0)),
                device,
            }
            .params()?;
            let grid = commands::parse_grid(&grid)?;
            for r in commands::sweep_cmd(&ckpt, &image, clean.as_deref(), &base, axis, &grid, &out)? {
                println!("{}", serde_json::to_string(&r)?);
            }
        }
        Command::Serve { ckpt, port, bind } => {
            let state = AppState::load(&ckpt).with_context(|| format!("loading checkpoint {}", ckpt.display()))?;
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(service::serve(state, SocketAddr::new(bind, port)))?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    init_logging();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
