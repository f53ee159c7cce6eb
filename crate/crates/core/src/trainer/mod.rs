//! Training loop: batch sampling, forward corruption, loss, AdamW with
//! linear warmup, checkpointing and evaluation.
//!
//! All randomness comes from substreams keyed by `(seed, iteration,
//! example)`, so a run resumed from a checkpoint draws exactly what the
//! uninterrupted run would have drawn.

mod checkpoint;
mod config;
mod data;
mod eval;

pub use checkpoint::{load_checkpoint, save_checkpoint, state_from_bytes, state_to_bytes};
pub use config::{TrainConfig, UniformMassMode};
pub use data::{load_dataset, Dataset};
pub use eval::{evaluate, EvalMetrics};

use rand::Rng;

use crate::denoiser::{Condition, Mat, TinyTransformer};
use crate::diffusion::sample_xt;
use crate::error::{Error, Result};
use crate::grid::TokenGrid;
use crate::objective::{diffusion_objective, DiffusionExample, LossBreakdown};
use crate::rng::{derive_seed, substream};
use crate::schedule::NoiseSchedule;

const STREAM_INIT: u64 = 0;
const STREAM_BATCH: u64 = 1;
const STREAM_EXAMPLE: u64 = 2;

/// One history row: a single example of one iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub iteration: usize,
    pub t: usize,
    pub vlb: f64,
    pub aux: f64,
    pub total: f64,
    pub lr: f64,
}

pub fn history_csv(history: &[LossRecord]) -> String {
    let mut out = String::from("iteration,t,vlb,aux,total,lr\n");
    for r in history {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.iteration, r.t, r.vlb, r.aux, r.total, r.lr
        ));
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    pub model: TinyTransformer,
    /// AdamW first moments, one matrix per parameter tensor.
    pub m: Vec<Mat>,
    /// AdamW second moments.
    pub v: Vec<Mat>,
    /// Completed iterations.
    pub iteration: usize,
    pub history: Vec<LossRecord>,
}

impl TrainState {
    /// Fresh model and zero moments for `h x w` grids over `k` tokens. The
    /// stored config records `k` and `h`.
    pub fn init(mut config: TrainConfig, h: usize, w: usize, k: usize) -> Result<Self> {
        config.validate()?;
        if config.vocab != 0 && config.vocab != k {
            return Err(Error::ModelMismatch(format!(
                "config says K = {}, data has K = {k}",
                config.vocab
            )));
        }
        if config.grid_height != 0 && config.grid_height != h {
            return Err(Error::ModelMismatch(format!(
                "config says {} grid rows, data has {h}",
                config.grid_height
            )));
        }
        config.vocab = k;
        config.grid_height = h;
        let model = TinyTransformer::new(
            config.model_config(k, h * w),
            derive_seed(config.seed, &[STREAM_INIT]),
        )?;
        let zeros: Vec<Mat> = model
            .params()
            .iter()
            .map(|p| Mat::zeros(p.rows(), p.cols()))
            .collect();
        Ok(Self {
            config,
            model,
            m: zeros.clone(),
            v: zeros,
            iteration: 0,
            history: Vec::new(),
        })
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        self.config.schedule(self.model.config().vocab)
    }

    /// Grid shape `(h, w)` the model was trained on.
    pub fn grid_shape(&self) -> (usize, usize) {
        let h = self.config.grid_height.max(1);
        (h, self.model.config().seq_len / h)
    }
}

/// `t ~ Uniform{1, ..., steps}`.
pub fn sample_timestep<R: Rng + ?Sized>(rng: &mut R, steps: usize) -> usize {
    rng.random_range(1..=steps)
}

fn check_dataset(state: &TrainState, data: &Dataset) -> Result<()> {
    let cfg = state.model.config();
    let Some((first, _)) = data.first() else {
        return Err(Error::InvalidArgument("dataset is empty".into()));
    };
    if first.vocab() != cfg.vocab || first.len() != cfg.seq_len || first.height() != state.grid_shape().0 {
        return Err(Error::ModelMismatch(format!(
            "data grids are {} tokens over K = {}, model expects {} over K = {}",
            first.len(),
            first.vocab(),
            cfg.seq_len,
            cfg.vocab
        )));
    }
    for (g, y) in data {
        if !g.same_shape(first) {
            return Err(Error::DimensionMismatch("dataset grids differ in shape".into()));
        }
        g.ensure_mask_free()?;
        state.model.encode_condition(y)?;
    }
    Ok(())
}

/// Batch for 1-based iteration `i`: indices drawn with replacement, each
/// example with its own timestep and corruption.
pub fn make_batch(
    cfg: &TrainConfig,
    data: &[(TokenGrid, Condition)],
    s: &NoiseSchedule,
    i: usize,
) -> Result<Vec<DiffusionExample>> {
    let mut pick = substream(cfg.seed, &[STREAM_BATCH, i as u64]);
    (0..cfg.batch_size)
        .map(|j| {
            let (x0, y) = &data[pick.random_range(0..data.len())];
            let mut rng = substream(cfg.seed, &[STREAM_EXAMPLE, i as u64, j as u64]);
            let t = sample_timestep(&mut rng, s.steps());
            Ok(DiffusionExample {
                x_t: sample_xt(x0, s, t, &mut rng)?,
                x0: x0.clone(),
                t,
                condition: y.clone(),
            })
        })
        .collect()
}

fn adamw_update(state: &mut TrainState, grads: &[Mat], lr: f64) {
    let cfg = &state.config;
    let i = state.iteration as i32 + 1;
    let bc1 = 1.0 - cfg.beta1.powi(i);
    let bc2 = 1.0 - cfg.beta2.powi(i);
    let params = state.model.params_mut();
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        let it = p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()));
        for ((w, &g), (m, v)) in it {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let step = (*m / bc1) / ((*v / bc2).sqrt() + cfg.adam_eps);
            *w -= lr * (step + cfg.weight_decay * *w);
        }
    }
}

/// Runs one iteration and returns its per-example losses.
pub fn train_step(state: &mut TrainState, data: &Dataset, s: &NoiseSchedule) -> Result<Vec<LossBreakdown>> {
    let i = state.iteration + 1;
    let batch = make_batch(&state.config, data, s, i)?;
    let lambda = state.config.lambda;
    let out = state
        .model
        .loss_and_gradients(&batch, |ex, logp| diffusion_objective(ex, logp, s, lambda))?;
    let mut grads = out.grads;
    grads.scale(1.0 / batch.len() as f64);
    let norm = grads.norm();
    if !norm.is_finite() {
        return Err(Error::NonFiniteLoss {
            term: "gradient norm",
            value: norm,
        });
    }
    if state.config.grad_clip > 0.0 && norm > state.config.grad_clip {
        grads.scale(state.config.grad_clip / norm);
    }
    let lr = state.config.lr_at(i);
    adamw_update(state, &grads.0, lr);
    state.iteration = i;
    for d in &out.details {
        state.history.push(LossRecord {
            iteration: i,
            t: d.t,
            vlb: d.vlb,
            aux: d.aux,
            total: d.total,
            lr,
        });
    }
    Ok(out.details)
}

/// Trains until `state.iteration == until`.
pub fn continue_training(state: &mut TrainState, data: &Dataset, until: usize) -> Result<()> {
    check_dataset(state, data)?;
    let s = state.schedule()?;
    while state.iteration < until {
        train_step(state, data, &s)?;
    }
    Ok(())
}

/// Full run of `cfg.iterations` iterations from a fresh model.
pub fn train(cfg: TrainConfig, data: &Dataset) -> Result<TrainState> {
    let Some((first, _)) = data.first() else {
        return Err(Error::InvalidArgument("dataset is empty".into()));
    };
    let iterations = cfg.iterations;
    let mut state = TrainState::init(cfg, first.height(), first.width(), first.vocab())?;
    continue_training(&mut state, data, iterations)?;
    Ok(state)
}
