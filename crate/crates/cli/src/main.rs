//! `vqdiff`: codec fitting, training, sampling, inpainting, ablation
//! sweeps and self-verification for the discrete diffusion toolkit.
//!
//! Every command writes its outputs plus a `manifest.txt` into one output
//! directory (`--out`, or `$VQDIFF_OUT/<command>`).

mod commands;
mod manifest;
mod sweep;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

// Large attention buffers are allocated and freed on every forward pass;
// the system allocator returns them to the OS each time.
#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser)]
#[command(name = "vqdiff", version, about = "Vector-quantized discrete diffusion toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
pub struct OutArg {
    /// Output directory (default: $VQDIFF_OUT/<command>).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Where the predictor comes from: a trained checkpoint or the exact
/// oracle over a token dataset.
#[derive(Args, Clone)]
pub struct ModelArgs {
    /// Training-state or model checkpoint.
    #[arg(long, conflicts_with = "oracle", required_unless_present = "oracle")]
    pub ckpt: Option<PathBuf>,
    /// Use the exact oracle denoiser over this token dataset directory.
    #[arg(long)]
    pub oracle: Option<PathBuf>,
    /// Training config supplying the schedule for `--oracle` or for a
    /// model-only checkpoint.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Clone)]
pub struct SamplerArgs {
    /// Reverse-step stride.
    #[arg(long, default_value_t = 1)]
    pub stride: usize,
    /// Truncation rate (cumulative mass kept; 1 disables).
    #[arg(long, default_value_t = vqdiff_core::sampler::DEFAULT_TRUNCATION)]
    pub trunc: f64,
    /// Condition tokens, comma or space separated.
    #[arg(long, default_value = "")]
    pub cond: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Codebook for decoding outputs to images.
    #[arg(long)]
    pub codebook: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a k-means codebook to the patches of a directory of PGM/PPM images.
    FitCodec {
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        k: usize,
        /// Patch edge in pixels (1 or 2).
        #[arg(long, default_value_t = 1)]
        patch: usize,
        #[arg(long, default_value_t = 50)]
        iters: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        out: OutArg,
    },
    /// Quantize a directory of images into `.tok` grids.
    Encode {
        #[arg(long)]
        codebook: PathBuf,
        #[arg(long)]
        images: PathBuf,
        #[command(flatten)]
        out: OutArg,
    },
    /// Render a directory of `.tok` grids back to images.
    Decode {
        #[arg(long)]
        codebook: PathBuf,
        #[arg(long)]
        tokens: PathBuf,
        #[command(flatten)]
        out: OutArg,
    },
    /// Build a noise schedule and write its table.
    Schedule {
        /// Training config holding the schedule keys (defaults otherwise).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        k: usize,
        #[command(flatten)]
        out: OutArg,
    },
    /// Train the denoiser on a token dataset.
    Train {
        #[arg(long, required_unless_present = "resume")]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Continue from a training-state checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Train until this iteration count (default: the config's).
        #[arg(long)]
        iterations: Option<usize>,
        #[command(flatten)]
        out: OutArg,
    },
    /// Generate token grids with the reverse process.
    Sample {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 16)]
        n: usize,
        #[command(flatten)]
        sampler: SamplerArgs,
        #[command(flatten)]
        out: OutArg,
    },
    /// Fill the unknown region of a grid; the stencil is a PGM where 0 marks unknown tokens.
    Inpaint {
        #[command(flatten)]
        model: ModelArgs,
        /// Partial grid (`.tok`); values under unknown stencil cells are ignored.
        #[arg(long)]
        tokens: PathBuf,
        #[arg(long)]
        stencil: PathBuf,
        #[arg(long, default_value_t = 1)]
        n: usize,
        #[command(flatten)]
        sampler: SamplerArgs,
        #[command(flatten)]
        out: OutArg,
    },
    /// Run the closed-form, sampler, loss and gradient self-checks.
    Verify {
        /// Random instances per check.
        #[arg(long, default_value_t = 200)]
        fuzz: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Test hook: corrupt step t of the checked schedule.
        #[arg(long, hide = true)]
        corrupt_schedule: Option<usize>,
        #[command(flatten)]
        out: OutArg,
    },
    /// Ablation sweeps emitting one CSV per axis.
    Sweep(sweep::SweepArgs),
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    match cli.command {
        Command::FitCodec {
            images,
            k,
            patch,
            iters,
            seed,
            out,
        } => commands::fit_codec(&images, k, patch, iters, seed, &out),
        Command::Encode {
            codebook,
            images,
            out,
        } => commands::encode(&codebook, &images, &out),
        Command::Decode {
            codebook,
            tokens,
            out,
        } => commands::decode(&codebook, &tokens, &out),
        Command::Schedule { config, k, out } => commands::schedule(config.as_deref(), k, &out),
        Command::Train {
            config,
            data,
            resume,
            iterations,
            out,
        } => commands::train(config.as_deref(), &data, resume.as_deref(), iterations, &out),
        Command::Sample {
            model,
            n,
            sampler,
            out,
        } => commands::sample(&model, n, &sampler, &out),
        Command::Inpaint {
            model,
            tokens,
            stencil,
            n,
            sampler,
            out,
        } => commands::inpaint(&model, &tokens, &stencil, n, &sampler, &out),
        Command::Verify {
            fuzz,
            seed,
            corrupt_schedule,
            out,
        } => return commands::verify(fuzz, seed, corrupt_schedule, &out),
        Command::Sweep(args) => sweep::run(&args),
    }?;
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
