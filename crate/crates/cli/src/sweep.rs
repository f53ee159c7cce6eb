//! Ablation sweeps. Each writes `sweep.csv` (deterministic given the
//! manifest) and `sweep_timings.csv` (wall-clock measurements).

use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;
use std::time::Instant;

use anyhow::Result;
use clap::{Args, ValueEnum};
use vqdiff_core::prob::total_variation;
use vqdiff_core::rng::substream;
use vqdiff_core::sampler::{ar_sample, sample, SamplerConfig, DEFAULT_TRUNCATION};
use vqdiff_core::trainer::{evaluate, load_dataset, train, Dataset, TrainConfig};
use vqdiff_core::{Condition, Denoiser, OracleDenoiser, TinyTransformer, TokenGrid, TransformerConfig};

use crate::manifest::RunManifest;
use crate::OutArg;

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Axis {
    Stride,
    MaskRate,
    Truncation,
    ArVsDiffusion,
}

impl Axis {
    fn name(self) -> &'static str {
        match self {
            Axis::Stride => "stride",
            Axis::MaskRate => "mask-rate",
            Axis::Truncation => "truncation",
            Axis::ArVsDiffusion => "ar-vs-diffusion",
        }
    }
}

#[derive(Args)]
pub struct SweepArgs {
    #[arg(long, value_enum)]
    axis: Axis,
    /// Token dataset (default: a built-in 2x2 toy set over K = 4).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Samples drawn per grid point.
    #[arg(long, default_value_t = 2000)]
    samples: usize,
    /// Training iterations for grid points that need a model.
    #[arg(long, default_value_t = 1000)]
    iterations: usize,
    /// Grid edge for the ar-vs-diffusion axis.
    #[arg(long, default_value_t = 32)]
    grid: usize,
    /// Diffusion stride for the ar-vs-diffusion axis.
    #[arg(long, default_value_t = 4)]
    stride: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    out: OutArg,
}

/// Four 2x2 grids over K = 4, equally likely, no conditions.
pub fn toy_dataset() -> Dataset {
    [[0, 1, 2, 3], [3, 3, 0, 0], [1, 0, 1, 0], [2, 3, 1, 1]]
        .into_iter()
        .map(|t| (TokenGrid::new(2, 2, 4, t.to_vec()).expect("valid toy grid"), Condition::empty()))
        .collect()
}

/// Sampled distribution over whole grids, keyed by token vector.
fn grid_histogram(
    model: &dyn Denoiser,
    data: &Dataset,
    s: &vqdiff_core::NoiseSchedule,
    cfg: &SamplerConfig,
    n: usize,
) -> Result<std::collections::BTreeMap<Vec<usize>, f64>> {
    let (h, w) = (data[0].0.height(), data[0].0.width());
    let mut hist = std::collections::BTreeMap::new();
    for i in 0..n {
        let y = &data[i % data.len()].1;
        let mut rng = substream(cfg.seed, &[i as u64]);
        let g = sample(model, h, w, y, s, cfg, &mut rng)?.grid;
        *hist.entry(g.tokens().to_vec()).or_insert(0.0) += 1.0 / n as f64;
    }
    Ok(hist)
}

fn hist_tv(a: &std::collections::BTreeMap<Vec<usize>, f64>, b: &std::collections::BTreeMap<Vec<usize>, f64>) -> f64 {
    let keys: std::collections::BTreeSet<_> = a.keys().chain(b.keys()).collect();
    let p: Vec<f64> = keys.iter().map(|k| a.get(*k).copied().unwrap_or(0.0)).collect();
    let q: Vec<f64> = keys.iter().map(|k| b.get(*k).copied().unwrap_or(0.0)).collect();
    total_variation(&p, &q)
}

fn train_config(args: &SweepArgs) -> TrainConfig {
    TrainConfig {
        iterations: args.iterations,
        warmup: (args.iterations / 10).min(200),
        width: 16,
        ffn_hidden: 32,
        lr: 3e-3,
        seed: args.seed,
        ..TrainConfig::default()
    }
}

pub fn run(args: &SweepArgs) -> Result<()> {
    let dir = crate::manifest::output_dir(args.out.out.as_deref(), "sweep");
    fs::create_dir_all(&dir)?;
    let mut m = RunManifest::new("sweep", args.seed);
    m.setting("axis", args.axis.name());
    m.setting("samples", args.samples);
    let data = match &args.data {
        Some(d) => {
            m.input_dir("data", d)?;
            load_dataset(d)?
        }
        None => toy_dataset(),
    };
    let mut csv = String::new();
    let mut timings = String::new();
    match args.axis {
        Axis::Stride => {
            let s = TrainConfig::default().schedule(data[0].0.vocab())?;
            let oracle = OracleDenoiser::from_samples(&data, s.clone())?;
            let exact = {
                let mut h = std::collections::BTreeMap::new();
                for (g, _) in &data {
                    *h.entry(g.tokens().to_vec()).or_insert(0.0) += 1.0 / data.len() as f64;
                }
                h
            };
            csv.push_str("stride,forward_passes,tv_data,tv_vs_stride1\n");
            timings.push_str("stride,seconds,samples_per_second\n");
            let mut base = None;
            for stride in [1, 2, 4, 10] {
                let cfg = SamplerConfig {
                    stride,
                    truncation_r: 1.0,
                    seed: args.seed,
                };
                let start = Instant::now();
                let hist = grid_histogram(&oracle, &data, &s, &cfg, args.samples)?;
                let secs = start.elapsed().as_secs_f64();
                let base = base.get_or_insert_with(|| hist.clone());
                let _ = writeln!(
                    csv,
                    "{stride},{},{},{}",
                    cfg.passes(s.steps()),
                    hist_tv(&hist, &exact),
                    hist_tv(&hist, base)
                );
                let _ = writeln!(timings, "{stride},{secs},{}", args.samples as f64 / secs);
            }
        }
        Axis::MaskRate => {
            m.setting("iterations", args.iterations);
            csv.push_str("gamma_bar_end,uniform_mass_end,loss,vlb,aux,marginal_tv,exact_tv\n");
            timings.push_str("gamma_bar_end,train_seconds\n");
            for gamma in [0.0, 0.3, 0.6, 0.9, 1.0] {
                // keep alpha_bar_T >= 0 at the top of the range
                let mass = f64::min(0.1, 1.0 - gamma);
                let cfg = TrainConfig {
                    gamma_bar_end: gamma,
                    uniform_mass_end: mass,
                    ..train_config(args)
                };
                let start = Instant::now();
                let state = train(cfg.clone(), &data)?;
                let secs = start.elapsed().as_secs_f64();
                let s = state.schedule()?;
                let scfg = SamplerConfig {
                    stride: 1,
                    truncation_r: DEFAULT_TRUNCATION,
                    seed: args.seed,
                };
                let e = evaluate(&state.model, &data, &s, &scfg, args.samples, cfg.lambda)?;
                let _ = writeln!(
                    csv,
                    "{gamma},{mass},{},{},{},{},{}",
                    e.loss,
                    e.vlb,
                    e.aux,
                    e.marginal_tv,
                    e.exact_tv.map_or(String::new(), |v| v.to_string())
                );
                let _ = writeln!(timings, "{gamma},{secs}");
            }
        }
        Axis::Truncation => {
            m.setting("iterations", args.iterations);
            let cfg = train_config(args);
            let start = Instant::now();
            let state = train(cfg.clone(), &data)?;
            timings.push_str("stage,seconds\n");
            let _ = writeln!(timings, "train,{}", start.elapsed().as_secs_f64());
            let s = state.schedule()?;
            csv.push_str("truncation,marginal_tv,exact_tv\n");
            for r in [0.5, 0.6, 0.7, 0.8, 0.86, 0.9, 0.95, 1.0] {
                let scfg = SamplerConfig {
                    stride: 1,
                    truncation_r: r,
                    seed: args.seed,
                };
                let e = evaluate(&state.model, &data, &s, &scfg, args.samples, cfg.lambda)?;
                let _ = writeln!(
                    csv,
                    "{r},{},{}",
                    e.marginal_tv,
                    e.exact_tv.map_or(String::new(), |v| v.to_string())
                );
            }
        }
        Axis::ArVsDiffusion => {
            m.setting("grid", args.grid);
            m.setting("stride", args.stride);
            let row = ar_vs_diffusion(args.grid, args.stride, args.samples.min(4), args.seed)?;
            csv.push_str("method,grid,forward_passes_per_sample,samples\n");
            let _ = writeln!(csv, "diffusion,{},{},{}", args.grid, row.diffusion_passes, row.samples);
            let _ = writeln!(csv, "ar,{},{},{}", args.grid, row.ar_passes, row.samples);
            timings.push_str("method,seconds,images_per_second\n");
            let _ = writeln!(timings, "diffusion,{},{}", row.diffusion_seconds, row.samples as f64 / row.diffusion_seconds);
            let _ = writeln!(timings, "ar,{},{}", row.ar_seconds, row.samples as f64 / row.ar_seconds);
            let _ = writeln!(timings, "speedup,{},", row.ar_seconds / row.diffusion_seconds);
        }
    }
    fs::write(dir.join("sweep.csv"), &csv)?;
    fs::write(dir.join("sweep_timings.csv"), &timings)?;
    m.output("sweep.csv");
    m.output("sweep_timings.csv");
    m.write(&dir)?;
    print!("{csv}");
    Ok(())
}

pub struct ArComparison {
    pub samples: usize,
    pub diffusion_passes: usize,
    pub ar_passes: usize,
    pub diffusion_seconds: f64,
    pub ar_seconds: f64,
}

/// Untrained models of identical structure on an `edge x edge` grid over
/// K = 16; T = 100 for diffusion. Only passes and time are compared.
pub fn ar_vs_diffusion(edge: usize, stride: usize, samples: usize, seed: u64) -> Result<ArComparison> {
    let arch = |causal| TransformerConfig {
        vocab: 16,
        seq_len: edge * edge,
        width: 8,
        layers: 1,
        heads: 2,
        ffn_hidden: 16,
        cond_vocab: 1,
        max_cond_len: 1,
        steps: 100,
        causal,
    };
    let diffusion = TinyTransformer::new(arch(false), seed)?;
    let ar = TinyTransformer::new(arch(true), seed)?;
    let s = TrainConfig::default().schedule(16)?;
    let cfg = SamplerConfig {
        stride,
        truncation_r: DEFAULT_TRUNCATION,
        seed,
    };
    let y = Condition::empty();
    let samples = samples.max(1);

    let start = Instant::now();
    let mut diffusion_passes = 0;
    for i in 0..samples {
        let out = sample(&diffusion, edge, edge, &y, &s, &cfg, &mut substream(seed, &[i as u64]))?;
        diffusion_passes = out.forward_passes;
    }
    let diffusion_seconds = start.elapsed().as_secs_f64();

    let start = Instant::now();
    let mut ar_passes = 0;
    for i in 0..samples {
        ar_passes = ar_sample(&ar, edge, edge, &y, &mut substream(seed, &[i as u64]))?.forward_passes;
    }
    let ar_seconds = start.elapsed().as_secs_f64();
    Ok(ArComparison {
        samples,
        diffusion_passes,
        ar_passes,
        diffusion_seconds,
        ar_seconds,
    })
}
