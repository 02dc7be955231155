use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use nfe_mri::commands::{self, ReconOptions, SynthOptions};
use nfe_mri::error::Error;
use nfe_mri::synth::MaskKind;

#[derive(Parser)]
#[command(name = "nfe-mri", version, about = "Dynamic MRI reconstruction with neural field expansions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a synthetic dataset with ground truth.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "desk")]
        preset: String,
        #[arg(long, default_value_t = 1.0)]
        af: f64,
        #[arg(long, default_value = "rectilinear")]
        mask: MaskKind,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Add complex white noise at this SNR in dB.
        #[arg(long)]
        noise_snr: Option<f64>,
    },
    /// Reconstruct a dataset.
    Recon {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Output spatial grid such as 128x128.
        #[arg(long)]
        out_grid: Option<String>,
    },
    /// Compare a reconstruction with a reference volume or dataset.
    Eval {
        #[arg(long)]
        rec: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarize a dataset container.
    Info {
        #[arg(long)]
        data: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Synth { out, preset, af, mask, seed, noise_snr } => {
            let m = commands::synth(&out, &SynthOptions { preset, acceleration: af, mask, seed, noise_snr_db: noise_snr })?;
            println!("wrote {} (sampling fraction {:.6})", out.display(), m.mask.sampling_fraction);
        }
        Command::Recon { data, config, out, seed, out_grid } => {
            let r = commands::recon(&data, &out, &ReconOptions { config, seed, out_grid })?;
            if let Some(last) = r.trace.rows.last() {
                println!("final data loss {:e} after {} iterations", last.data, r.trace.rows.len());
            }
            println!("wrote {}", out.display());
        }
        Command::Eval { rec, reference, out } => {
            let r = commands::eval(&rec, &reference, &out)?;
            println!("ssim mean {:.4} min {:.4}; psnr mean {:.2} dB", r.ssim.mean, r.ssim.min, r.psnr.mean);
        }
        Command::Info { data } => print!("{}", commands::info(&data)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
