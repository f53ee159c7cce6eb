use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, ensure, Context, Result};
use vqdiff_core::codec::{self, read_pnm, write_pnm, Image, ToyCodebook};
use vqdiff_core::denoiser::checkpoint::{model_from_bytes, read_model, ByteReader, KIND_TRAIN_STATE};
use vqdiff_core::rng::substream;
use vqdiff_core::sampler::{self, SampleOutput, SamplerConfig};
use vqdiff_core::trainer::{self, history_csv, load_checkpoint, load_dataset, save_checkpoint, TrainConfig, TrainState};
use vqdiff_core::verify::{self, VerifyOptions};
use vqdiff_core::{Condition, Denoiser, NoiseSchedule, OracleDenoiser, TokenGrid};

use crate::manifest::{output_dir, RunManifest};
use crate::{ModelArgs, OutArg, SamplerArgs};

fn prepare_out(out: &OutArg, command: &str) -> Result<PathBuf> {
    let dir = output_dir(out.out.as_deref(), command);
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading image directory {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("pgm" | "ppm")))
        .collect();
    files.sort();
    ensure!(!files.is_empty(), "no .pgm/.ppm images in {}", dir.display());
    Ok(files)
}

fn image_ext(img: &Image) -> &'static str {
    if img.channels() == 3 {
        "ppm"
    } else {
        "pgm"
    }
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

pub fn fit_codec(images: &Path, k: usize, patch: usize, iters: usize, seed: u64, out: &OutArg) -> Result<()> {
    let files = image_files(images)?;
    let dir = prepare_out(out, "fit-codec")?;
    let mut m = RunManifest::new("fit-codec", seed);
    m.setting("k", k);
    m.setting("patch", patch);
    m.setting("iters", iters);
    let imgs = files
        .iter()
        .map(|f| {
            m.input_file(&format!("images/{}", f.file_name().unwrap_or_default().to_string_lossy()), f)?;
            read_pnm(f).with_context(|| format!("reading {}", f.display()))
        })
        .collect::<Result<Vec<_>>>()?;
    let cb = codec::fit_codebook(&imgs, k, patch, iters, seed)?;
    cb.write(dir.join("codebook.txt"))?;
    m.output("codebook.txt");
    m.write(&dir)?;
    println!("wrote {}", dir.join("codebook.txt").display());
    Ok(())
}

pub fn encode(codebook: &Path, images: &Path, out: &OutArg) -> Result<()> {
    let cb = ToyCodebook::read(codebook).with_context(|| format!("reading {}", codebook.display()))?;
    let files = image_files(images)?;
    let dir = prepare_out(out, "encode")?;
    let mut m = RunManifest::new("encode", 0);
    m.input_file("codebook", codebook)?;
    for f in &files {
        m.input_file(&format!("images/{}", f.file_name().unwrap_or_default().to_string_lossy()), f)?;
        let g = codec::encode(&read_pnm(f)?, &cb)?;
        let name = format!("{}.tok", stem(f));
        g.write(dir.join(&name))?;
        m.output(name);
    }
    m.write(&dir)?;
    println!("encoded {} images into {}", files.len(), dir.display());
    Ok(())
}

pub fn decode(codebook: &Path, tokens: &Path, out: &OutArg) -> Result<()> {
    let cb = ToyCodebook::read(codebook).with_context(|| format!("reading {}", codebook.display()))?;
    let data = load_dataset(tokens)?;
    let dir = prepare_out(out, "decode")?;
    let mut m = RunManifest::new("decode", 0);
    m.input_file("codebook", codebook)?;
    m.input_dir("tokens", tokens)?;
    for (i, (g, _)) in data.iter().enumerate() {
        let img = codec::decode(g, &cb)?;
        let name = format!("decoded_{i:03}.{}", image_ext(&img));
        write_pnm(&img, dir.join(&name))?;
        m.output(name);
    }
    m.write(&dir)?;
    Ok(())
}

fn read_config(path: Option<&Path>) -> Result<TrainConfig> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            TrainConfig::from_text(&text).with_context(|| format!("in config {}", p.display()))
        }
        None => Ok(TrainConfig::default()),
    }
}

pub fn schedule(config: Option<&Path>, k: usize, out: &OutArg) -> Result<()> {
    let cfg = read_config(config)?;
    let s = cfg.schedule(k)?;
    let dir = prepare_out(out, "schedule")?;
    let mut m = RunManifest::new("schedule", 0);
    if let Some(p) = config {
        m.input_file("config", p)?;
    }
    m.setting("k", k);
    fs::write(dir.join("schedule.txt"), s.to_table())?;
    m.output("schedule.txt");
    m.write(&dir)?;
    Ok(())
}

pub fn train(
    config: Option<&Path>,
    data_dir: &Path,
    resume: Option<&Path>,
    iterations: Option<usize>,
    out: &OutArg,
) -> Result<()> {
    let data = load_dataset(data_dir).with_context(|| format!("loading dataset {}", data_dir.display()))?;
    let dir = prepare_out(out, "train")?;
    let mut state = match resume {
        Some(p) => {
            ensure!(config.is_none(), "--resume takes its config from the checkpoint");
            load_checkpoint(p).with_context(|| format!("loading {}", p.display()))?
        }
        None => {
            let cfg = read_config(config)?;
            let (g, _) = &data[0];
            TrainState::init(cfg, g.height(), g.width(), g.vocab())?
        }
    };
    // the stored config records the run's target length
    if let Some(n) = iterations {
        state.config.iterations = n;
    }
    let until = state.config.iterations;
    let mut m = RunManifest::new("train", state.config.seed);
    match resume {
        Some(p) => m.input_file("resume", p)?,
        None => {
            if let Some(p) = config {
                m.input_file("config", p)?;
            }
        }
    }
    m.input_dir("data", data_dir)?;
    for line in state.config.to_text().lines() {
        if let Some((k, v)) = line.split_once(" = ") {
            m.setting(k, v);
        }
    }
    m.setting("until", until);

    let start = Instant::now();
    trainer::continue_training(&mut state, &data, until)
        .with_context(|| format!("training stopped after iteration {}", state.iteration))?;
    m.timing("train_seconds", start.elapsed().as_secs_f64());

    save_checkpoint(&state, dir.join("state.ckpt"))?;
    fs::write(dir.join("loss.csv"), history_csv(&state.history))?;
    fs::write(dir.join("config.txt"), state.config.to_text())?;
    for o in ["state.ckpt", "loss.csv", "config.txt"] {
        m.output(o);
    }
    m.write(&dir)?;
    let last = state.history.last();
    println!(
        "iteration {}: total loss {:.6}",
        state.iteration,
        last.map_or(f64::NAN, |r| r.total)
    );
    Ok(())
}

/// A predictor, its schedule, and the grid shape it produces.
pub struct LoadedModel {
    pub denoiser: Box<dyn Denoiser>,
    pub schedule: NoiseSchedule,
    pub shape: (usize, usize),
}

pub fn load_model(args: &ModelArgs, m: &mut RunManifest) -> Result<LoadedModel> {
    if let Some(p) = &args.config {
        m.input_file("config", p)?;
    }
    if let Some(dir) = &args.oracle {
        let data = load_dataset(dir).with_context(|| format!("loading oracle dataset {}", dir.display()))?;
        m.input_dir("oracle", dir)?;
        let cfg = read_config(args.config.as_deref())?;
        let (g, _) = &data[0];
        let schedule = cfg.schedule(g.vocab())?;
        let shape = (g.height(), g.width());
        let oracle = OracleDenoiser::from_samples(&data, schedule.clone())?;
        return Ok(LoadedModel {
            denoiser: Box::new(oracle),
            schedule,
            shape,
        });
    }
    let path = args.ckpt.as_ref().expect("clap requires --ckpt or --oracle");
    m.input_file("ckpt", path)?;
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let (_, kind) = read_model(&mut ByteReader::new(&bytes))?;
    if kind == KIND_TRAIN_STATE {
        ensure!(args.config.is_none(), "a training-state checkpoint carries its own config");
        let state = trainer::state_from_bytes(&bytes)?;
        let schedule = state.schedule()?;
        let shape = state.grid_shape();
        return Ok(LoadedModel {
            denoiser: Box::new(state.model),
            schedule,
            shape,
        });
    }
    let model = model_from_bytes(&bytes)?;
    let mut cfg = read_config(args.config.as_deref())?;
    cfg.steps = model.config().steps;
    let schedule = cfg.schedule(model.config().vocab)?;
    let h = cfg.grid_height.max(1);
    let n = model.config().seq_len;
    ensure!(n % h == 0, "grid_height {h} does not divide {n} positions");
    Ok(LoadedModel {
        denoiser: Box::new(model),
        schedule,
        shape: (h, n / h),
    })
}

pub fn parse_condition(s: &str) -> Result<Condition> {
    let toks = s
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<usize>().with_context(|| format!("bad condition token `{t}`")))
        .collect::<Result<Vec<_>>>()?;
    Ok(Condition::new(toks))
}

fn sampler_config(args: &SamplerArgs, m: &mut RunManifest) -> Result<SamplerConfig> {
    let cfg = SamplerConfig {
        stride: args.stride,
        truncation_r: args.trunc,
        seed: args.seed,
    };
    cfg.validate()?;
    m.setting("stride", cfg.stride);
    m.setting("trunc", cfg.truncation_r);
    m.setting("cond", &args.cond);
    Ok(cfg)
}

/// Writes grids, optional decoded images and the combined trace.
fn write_samples(
    outputs: &[SampleOutput],
    prefix: &str,
    codebook: Option<&ToyCodebook>,
    dir: &Path,
    m: &mut RunManifest,
) -> Result<()> {
    let mut trace = String::from("sample,t,entropy,masks\n");
    for (i, o) in outputs.iter().enumerate() {
        let name = format!("{prefix}_{i:03}.tok");
        o.grid.write(dir.join(&name))?;
        m.output(name);
        if let Some(cb) = codebook {
            let img = codec::decode(&o.grid, cb)?;
            let name = format!("{prefix}_{i:03}.{}", image_ext(&img));
            write_pnm(&img, dir.join(&name))?;
            m.output(name);
        }
        for row in &o.trace {
            trace.push_str(&format!("{i},{},{},{}\n", row.t, row.entropy, row.masks));
        }
    }
    fs::write(dir.join("trace.csv"), trace)?;
    m.output("trace.csv");
    Ok(())
}

fn read_codebook(p: Option<&Path>, m: &mut RunManifest) -> Result<Option<ToyCodebook>> {
    p.map(|p| {
        m.input_file("codebook", p)?;
        ToyCodebook::read(p).with_context(|| format!("reading {}", p.display()))
    })
    .transpose()
}

pub fn sample(model: &ModelArgs, n: usize, args: &SamplerArgs, out: &OutArg) -> Result<()> {
    let mut m = RunManifest::new("sample", args.seed);
    let loaded = load_model(model, &mut m)?;
    let cfg = sampler_config(args, &mut m)?;
    let y = parse_condition(&args.cond)?;
    let codebook = read_codebook(args.codebook.as_deref(), &mut m)?;
    let dir = prepare_out(out, "sample")?;
    m.setting("n", n);
    let (h, w) = loaded.shape;
    let start = Instant::now();
    let outputs = (0..n)
        .map(|i| {
            let mut rng = substream(cfg.seed, &[i as u64]);
            sampler::sample(loaded.denoiser.as_ref(), h, w, &y, &loaded.schedule, &cfg, &mut rng)
        })
        .collect::<vqdiff_core::Result<Vec<_>>>()?;
    m.timing("sample_seconds", start.elapsed().as_secs_f64());
    let passes = outputs.first().map_or(cfg.passes(loaded.schedule.steps()), |o| o.forward_passes);
    m.setting("forward_passes_per_sample", passes);
    write_samples(&outputs, "sample", codebook.as_ref(), &dir, &mut m)?;
    m.write(&dir)?;
    println!("{n} samples, {passes} forward passes each, in {}", dir.display());
    Ok(())
}

fn read_stencil(path: &Path, grid: &TokenGrid) -> Result<Vec<bool>> {
    let img = read_pnm(path).with_context(|| format!("reading stencil {}", path.display()))?;
    if img.channels() != 1 {
        bail!("stencil must be a grayscale PGM");
    }
    if (img.height(), img.width()) != (grid.height(), grid.width()) {
        bail!(
            "stencil is {}x{} but the grid is {}x{}",
            img.width(),
            img.height(),
            grid.width(),
            grid.height()
        );
    }
    Ok(img.data().iter().map(|&v| v > 0.0).collect())
}

pub fn inpaint(
    model: &ModelArgs,
    tokens: &Path,
    stencil: &Path,
    n: usize,
    args: &SamplerArgs,
    out: &OutArg,
) -> Result<()> {
    let mut m = RunManifest::new("inpaint", args.seed);
    let loaded = load_model(model, &mut m)?;
    let cfg = sampler_config(args, &mut m)?;
    let y = parse_condition(&args.cond)?;
    let codebook = read_codebook(args.codebook.as_deref(), &mut m)?;
    m.input_file("tokens", tokens)?;
    m.input_file("stencil", stencil)?;
    m.setting("n", n);
    let partial = TokenGrid::read(tokens).with_context(|| format!("reading {}", tokens.display()))?;
    let known = read_stencil(stencil, &partial)?;
    let dir = prepare_out(out, "inpaint")?;
    let outputs = (0..n)
        .map(|i| {
            let mut rng = substream(cfg.seed, &[i as u64]);
            sampler::inpaint(loaded.denoiser.as_ref(), &partial, &known, &y, &loaded.schedule, &cfg, &mut rng)
        })
        .collect::<vqdiff_core::Result<Vec<_>>>()?;
    write_samples(&outputs, "inpaint", codebook.as_ref(), &dir, &mut m)?;
    m.write(&dir)?;
    Ok(())
}

pub fn verify(fuzz: usize, seed: u64, corrupt: Option<usize>, out: &OutArg) -> Result<bool> {
    let opts = VerifyOptions {
        fuzz,
        seed,
        corrupt_schedule: corrupt,
    };
    let dir = prepare_out(out, "verify")?;
    let mut m = RunManifest::new("verify", seed);
    m.setting("fuzz", fuzz);
    if let Some(t) = corrupt {
        m.setting("corrupt_schedule", t);
    }
    let results = verify::run_all(&opts);
    let text = verify::report(&results);
    print!("{text}");
    fs::write(dir.join("report.txt"), &text)?;
    m.output("report.txt");
    m.write(&dir)?;
    Ok(results.iter().all(|r| r.passed))
}
