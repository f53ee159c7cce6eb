//! Flat `key = value` training configuration.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::denoiser::TransformerConfig;
use crate::error::{Error, Result};
use crate::objective::DEFAULT_LAMBDA;
use crate::schedule::{build_schedule, NoiseSchedule, Strategy, UniformMass};

/// How `uniform_mass_end` is read: total replacement mass `K * beta_bar_T`
/// or the per-entry `beta_bar_T`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UniformMassMode {
    Total,
    PerEntry,
}

impl UniformMassMode {
    pub fn name(self) -> &'static str {
        match self {
            UniformMassMode::Total => "total",
            UniformMassMode::PerEntry => "per-entry",
        }
    }
}

impl FromStr for UniformMassMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "total" => Ok(UniformMassMode::Total),
            "per-entry" => Ok(UniformMassMode::PerEntry),
            _ => Err(Error::InvalidArgument(format!("unknown uniform mass mode `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    /// Ordinary token count; `0` takes it from the dataset.
    pub vocab: usize,
    /// Grid rows; `0` takes it from the dataset.
    pub grid_height: usize,
    pub gamma_bar_end: f64,
    pub uniform_mass_end: f64,
    pub uniform_mass_mode: UniformMassMode,
    pub strategy: Strategy,
    pub lambda: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub lr: f64,
    pub warmup: usize,
    pub batch_size: usize,
    pub iterations: usize,
    pub seed: u64,
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub cond_vocab: usize,
    pub max_cond_len: usize,
    /// Global gradient-norm clip; `0` disables it.
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            vocab: 0,
            grid_height: 0,
            gamma_bar_end: 0.9,
            uniform_mass_end: 0.1,
            uniform_mass_mode: UniformMassMode::Total,
            strategy: Strategy::MaskAndReplace,
            lambda: DEFAULT_LAMBDA,
            beta1: 0.9,
            beta2: 0.96,
            adam_eps: 1e-8,
            weight_decay: 0.01,
            lr: 1e-3,
            warmup: 200,
            batch_size: 8,
            iterations: 2000,
            seed: 0,
            layers: 1,
            width: 32,
            heads: 2,
            ffn_hidden: 64,
            cond_vocab: 1,
            max_cond_len: 1,
            grad_clip: 0.0,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::InvalidArgument(format!("bad value `{value}` for `{key}`")))
}

impl TrainConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "steps" => self.steps = parse(key, value)?,
            "vocab" => self.vocab = parse(key, value)?,
            "grid_height" => self.grid_height = parse(key, value)?,
            "gamma_bar_end" => self.gamma_bar_end = parse(key, value)?,
            "uniform_mass_end" => self.uniform_mass_end = parse(key, value)?,
            "uniform_mass_mode" => self.uniform_mass_mode = value.parse()?,
            "strategy" => self.strategy = value.parse()?,
            "lambda" => self.lambda = parse(key, value)?,
            "beta1" => self.beta1 = parse(key, value)?,
            "beta2" => self.beta2 = parse(key, value)?,
            "adam_eps" => self.adam_eps = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "warmup" => self.warmup = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "iterations" => self.iterations = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "layers" => self.layers = parse(key, value)?,
            "width" => self.width = parse(key, value)?,
            "heads" => self.heads = parse(key, value)?,
            "ffn_hidden" => self.ffn_hidden = parse(key, value)?,
            "cond_vocab" => self.cond_vocab = parse(key, value)?,
            "max_cond_len" => self.max_cond_len = parse(key, value)?,
            "grad_clip" => self.grad_clip = parse(key, value)?,
            _ => return Err(Error::UnknownConfigKey(key.to_string())),
        }
        Ok(())
    }

    /// Parses `key = value` lines over the defaults. `#` starts a comment.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Format(format!("line {}: expected `key = value`", n + 1))
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Every key in a fixed order; parses back to an equal config.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        put("steps", self.steps.to_string());
        put("vocab", self.vocab.to_string());
        put("grid_height", self.grid_height.to_string());
        put("gamma_bar_end", self.gamma_bar_end.to_string());
        put("uniform_mass_end", self.uniform_mass_end.to_string());
        put("uniform_mass_mode", self.uniform_mass_mode.name().to_string());
        put("strategy", self.strategy.name().to_string());
        put("lambda", self.lambda.to_string());
        put("beta1", self.beta1.to_string());
        put("beta2", self.beta2.to_string());
        put("adam_eps", self.adam_eps.to_string());
        put("weight_decay", self.weight_decay.to_string());
        put("lr", self.lr.to_string());
        put("warmup", self.warmup.to_string());
        put("batch_size", self.batch_size.to_string());
        put("iterations", self.iterations.to_string());
        put("seed", self.seed.to_string());
        put("layers", self.layers.to_string());
        put("width", self.width.to_string());
        put("heads", self.heads.to_string());
        put("ffn_hidden", self.ffn_hidden.to_string());
        put("cond_vocab", self.cond_vocab.to_string());
        put("max_cond_len", self.max_cond_len.to_string());
        put("grad_clip", self.grad_clip.to_string());
        out
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("steps", self.steps),
            ("batch_size", self.batch_size),
            ("iterations", self.iterations),
            ("layers", self.layers),
            ("width", self.width),
            ("heads", self.heads),
            ("ffn_hidden", self.ffn_hidden),
            ("cond_vocab", self.cond_vocab),
            ("max_cond_len", self.max_cond_len),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidArgument(format!("`{k}` must be positive")));
        }
        if self.warmup > self.iterations {
            return Err(Error::InvalidArgument(format!(
                "warmup {} exceeds iterations {}",
                self.warmup, self.iterations
            )));
        }
        if !(self.lr > 0.0) || !(self.adam_eps > 0.0) {
            return Err(Error::InvalidArgument("lr and adam_eps must be positive".into()));
        }
        for (k, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::InvalidArgument(format!("`{k}` must lie in [0, 1)")));
            }
        }
        for (k, v) in [
            ("lambda", self.lambda),
            ("weight_decay", self.weight_decay),
            ("grad_clip", self.grad_clip),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::InvalidArgument(format!("`{k}` must be finite and >= 0")));
            }
        }
        Ok(())
    }

    pub fn uniform_mass(&self) -> UniformMass {
        match self.uniform_mass_mode {
            UniformMassMode::Total => UniformMass::Total(self.uniform_mass_end),
            UniformMassMode::PerEntry => UniformMass::PerEntry(self.uniform_mass_end),
        }
    }

    pub fn schedule(&self, k: usize) -> Result<NoiseSchedule> {
        build_schedule(
            self.steps,
            k,
            self.gamma_bar_end,
            self.uniform_mass().total(k),
            self.strategy,
        )
    }

    pub fn model_config(&self, k: usize, seq_len: usize) -> TransformerConfig {
        TransformerConfig {
            vocab: k,
            seq_len,
            width: self.width,
            layers: self.layers,
            heads: self.heads,
            ffn_hidden: self.ffn_hidden,
            cond_vocab: self.cond_vocab,
            max_cond_len: self.max_cond_len,
            steps: self.steps,
            causal: false,
        }
    }

    /// Learning rate for 1-based iteration `i`: linear warmup, then flat.
    pub fn lr_at(&self, i: usize) -> f64 {
        if i < self.warmup {
            self.lr * i as f64 / self.warmup as f64
        } else {
            self.lr
        }
    }
}
