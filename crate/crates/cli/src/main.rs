//! `ptychoflow`: simulate ptychographic data, train a flow posterior, run the
//! rPIE baseline, and analyze and compare runs.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ptychoflow::experiment::{self, ExperimentConfig};
use ptychoflow::Error;

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;
const OUT_ENV: &str = "PTYCHOFLOW_OUT";

#[derive(Parser, Debug)]
#[command(
    name = "ptychoflow",
    version,
    about = "Ptychographic reconstruction with flow-based uncertainty"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Worker threads for batch and sample loops (results do not depend on it).
    #[arg(long, global = true)]
    jobs: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate ground truth, probe and noisy diffraction data.
    Simulate(RunArgs),
    /// Train the flow on a simulated dataset.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Continue from the checkpoint in the run directory.
        #[arg(long)]
        resume: bool,
    },
    /// Reconstruct with the rPIE baseline.
    Rpie(RunArgs),
    /// Sample the trained flow and write maps, modes and metrics.
    Analyze(RunArgs),
    /// Join several analyzed runs and compare their common-region phase SD.
    Report {
        /// Analyzed run directories.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Output directory for the joined tables. PTYCHOFLOW_OUT takes precedence.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Experiment configuration (JSON).
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Bundled configuration: S1, S2, S3, T1 or T1-S4.
    #[arg(long)]
    preset: Option<String>,
    /// Run directory; defaults to runs/<name>. PTYCHOFLOW_OUT takes precedence.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the master seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl RunArgs {
    fn resolve(&self) -> ptychoflow::Result<(ExperimentConfig, PathBuf)> {
        let mut config = match (&self.config, &self.preset) {
            (Some(path), _) => ExperimentConfig::load(path)?,
            (None, Some(name)) => ExperimentConfig::preset(name)?,
            (None, None) => {
                return Err(Error::InvalidConfig("pass --config PATH or --preset NAME".into()));
            }
        };
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        let out = out_dir(self.out.clone()).unwrap_or_else(|| PathBuf::from("runs").join(&config.name));
        Ok((config, out))
    }
}

/// The output directory, with `PTYCHOFLOW_OUT` overriding the `--out` flag.
fn out_dir(flag: Option<PathBuf>) -> Option<PathBuf> {
    std::env::var_os(OUT_ENV)
        .filter(|v| !v.is_empty())
        .map(PathBuf::from)
        .or(flag)
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::InvalidConfig(_) | Error::InvalidGeometry(_) | Error::Json(_) => EXIT_CONFIG,
        Error::NonFinite(_) | Error::Degenerate(_) => EXIT_NUMERICAL,
        _ => EXIT_FAILURE,
    }
}

fn run(cli: Cli) -> ptychoflow::Result<()> {
    match cli.command {
        Command::Simulate(args) => {
            let (config, out) = args.resolve()?;
            experiment::simulate(&config, &out)?;
            println!("dataset written to {}", out.display());
        }
        Command::Train { run, resume } => {
            let (config, out) = run.resolve()?;
            let (checkpoint, log) = experiment::train(&config, &out, resume)?;
            if let Some(last) = log.records.last() {
                println!(
                    "trained {} epochs; final objective {:.6e}; checkpoint in {}",
                    checkpoint.epoch,
                    last.objective,
                    out.join(experiment::CHECKPOINT_DIR).display()
                );
            }
        }
        Command::Rpie(args) => {
            let (config, out) = args.resolve()?;
            let result = experiment::rpie(&config, &out)?;
            let last = result.residuals.last().copied().unwrap_or(f64::NAN);
            println!("rPIE residual after {} sweeps: {last:.4e}", result.residuals.len());
        }
        Command::Analyze(args) => {
            let (config, out) = args.resolve()?;
            let s = experiment::analyze(&config, &out)?;
            println!(
                "{}: posterior-mean PSNR {:.2} dB, phase SSIM {:.4}, boundary/interior SD ratio {:.3}",
                s.setting, s.psnr_mag, s.ssim_phase, s.boundary_interior_ratio
            );
        }
        Command::Report { runs, out } => {
            let out =
                out_dir(out).ok_or_else(|| Error::InvalidConfig("pass --out DIR or set PTYCHOFLOW_OUT".into()))?;
            for e in experiment::report(&runs, &out)? {
                println!(
                    "{} (fov {}, overlap {:.2}): common-region mean phase SD {:.4e}",
                    e.setting, e.fov, e.overlap, e.mean_sd_phase
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(jobs) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build_global() {
            log::warn!("could not configure {jobs} worker threads: {e}");
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
