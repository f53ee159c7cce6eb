//! Reverse-process generation: full-step and strided sampling, truncation,
//! inpainting, and the raster-order autoregressive baseline.

use rand::Rng;

use crate::denoiser::{Condition, Denoiser, DenoiserOutput, TinyTransformer};
use crate::error::{Error, Result};
use crate::grid::TokenGrid;
use crate::objective::{prior_dist, ReverseTable};
use crate::prob::ProbVector;
use crate::rng::draw_categorical;
use crate::schedule::NoiseSchedule;

/// Truncation rate used when none is given.
pub const DEFAULT_TRUNCATION: f64 = 0.86;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerConfig {
    pub stride: usize,
    /// Cumulative-mass threshold in `(0, 1]`; `1` disables truncation.
    pub truncation_r: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            stride: 1,
            truncation_r: DEFAULT_TRUNCATION,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 {
            return Err(Error::InvalidArgument("stride must be at least 1".into()));
        }
        if !(self.truncation_r > 0.0 && self.truncation_r <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "truncation rate {} outside (0, 1]",
                self.truncation_r
            )));
        }
        Ok(())
    }

    /// Number of reverse steps (and model calls) for a `steps`-step chain.
    pub fn passes(&self, steps: usize) -> usize {
        steps.div_ceil(self.stride)
    }
}

/// Keep the smallest most-probable prefix holding at least `r` of the mass,
/// zero the rest and renormalize. Equal probabilities rank lower index
/// first.
pub fn truncate(p: &[f64], r: f64) -> ProbVector {
    if r >= 1.0 {
        return ProbVector::from_vec_unchecked(p.to_vec());
    }
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
    let total: f64 = p.iter().sum();
    let mut kept = vec![0.0; p.len()];
    let mut mass = 0.0;
    for &i in &order {
        kept[i] = p[i];
        mass += p[i];
        if mass >= r * total {
            break;
        }
    }
    kept.iter_mut().for_each(|v| *v /= mass);
    ProbVector::from_vec_unchecked(kept)
}

/// One row of the per-step trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub t: usize,
    /// Mean entropy (nats) of the untruncated clean-token prediction.
    pub entropy: f64,
    /// MASK tokens in the grid fed to the model at this step.
    pub masks: usize,
}

#[derive(Debug, Clone)]
pub struct SampleOutput {
    pub grid: TokenGrid,
    pub forward_passes: usize,
    pub trace: Vec<TraceRow>,
}

impl SampleOutput {
    pub fn trace_csv(&self) -> String {
        let mut out = String::from("t,entropy,masks\n");
        for row in &self.trace {
            out.push_str(&format!("{},{},{}\n", row.t, row.entropy, row.masks));
        }
        out
    }
}

fn check_model(model: &dyn Denoiser, s: &NoiseSchedule, len: Option<usize>) -> Result<()> {
    if model.vocab() != s.vocab() || model.steps() != s.steps() {
        return Err(Error::ModelMismatch(format!(
            "model has K = {}, T = {}; schedule has K = {}, T = {}",
            model.vocab(),
            model.steps(),
            s.vocab(),
            s.steps()
        )));
    }
    if let (Some(a), Some(b)) = (model.seq_len(), len) {
        if a != b {
            return Err(Error::ModelMismatch(format!(
                "model covers {a} positions, grid has {b}"
            )));
        }
    }
    Ok(())
}

/// Draw `x_{t - stride}` at every position. Reverse tables depend only on
/// the current token, so they are built once per distinct value.
fn reverse_step<R: Rng + ?Sized>(
    grid: &mut TokenGrid,
    out: &DenoiserOutput,
    s: &NoiseSchedule,
    t: usize,
    stride: usize,
    r: f64,
    rng: &mut R,
) -> Result<()> {
    let mut tables: Vec<Option<ReverseTable>> = vec![None; s.vocab() + 1];
    for i in 0..grid.len() {
        let x_t = grid.get(i);
        if tables[x_t].is_none() {
            tables[x_t] = Some(ReverseTable::new(x_t, s, t, stride)?);
        }
        let table = tables[x_t].as_ref().expect("table just built");
        let p = truncate(out.row(i), r);
        // truncation can drop every clean token consistent with x_t; fall
        // back to the full prediction, which is floored and so never does
        let dist = match table.reverse(&p, x_t) {
            Err(Error::NoConsistentX0(_)) if r < 1.0 => table.reverse(out.row(i), x_t)?,
            other => other?,
        };
        grid.set(i, draw_categorical(rng, &dist))?;
    }
    Ok(())
}

fn run_chain<R: Rng + ?Sized>(
    model: &dyn Denoiser,
    mut grid: TokenGrid,
    known: Option<(&TokenGrid, &[bool])>,
    y: &Condition,
    s: &NoiseSchedule,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<SampleOutput> {
    cfg.validate()?;
    check_model(model, s, Some(grid.len()))?;
    let mut trace = Vec::with_capacity(cfg.passes(s.steps()));
    let mut t = s.steps();
    while t > 0 {
        let stride = cfg.stride.min(t);
        let out = model.predict_x0(&grid, t, y)?;
        trace.push(TraceRow {
            t,
            entropy: out.mean_entropy(),
            masks: grid.mask_count(),
        });
        reverse_step(&mut grid, &out, s, t, stride, cfg.truncation_r, rng)?;
        if let Some((partial, mask)) = known {
            for (i, _) in mask.iter().enumerate().filter(|(_, &k)| k) {
                grid.set(i, partial.get(i))?;
            }
        }
        t -= stride;
    }
    assert!(!grid.contains_mask(), "reverse chain ended on a MASK token");
    Ok(SampleOutput {
        grid,
        forward_passes: trace.len(),
        trace,
    })
}

/// Generate one `h x w` grid from the prior through the reverse chain.
#[allow(clippy::too_many_arguments)]
pub fn sample<R: Rng + ?Sized>(
    model: &dyn Denoiser,
    h: usize,
    w: usize,
    y: &Condition,
    s: &NoiseSchedule,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<SampleOutput> {
    let prior = prior_dist(s);
    let tokens = (0..h * w).map(|_| draw_categorical(rng, &prior)).collect();
    let grid = TokenGrid::new(h, w, s.vocab(), tokens)?;
    run_chain(model, grid, None, y, s, cfg, rng)
}

/// Fill the positions where `known` is false. Unknown positions start as
/// MASK; known positions are restored after every reverse step.
pub fn inpaint<R: Rng + ?Sized>(
    model: &dyn Denoiser,
    partial: &TokenGrid,
    known: &[bool],
    y: &Condition,
    s: &NoiseSchedule,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<SampleOutput> {
    if known.len() != partial.len() {
        return Err(Error::DimensionMismatch(format!(
            "stencil has {} entries for a grid of {}",
            known.len(),
            partial.len()
        )));
    }
    if partial.vocab() != s.vocab() {
        return Err(Error::ModelMismatch("grid and schedule disagree on K".into()));
    }
    let mut grid = partial.clone();
    for (i, &k) in known.iter().enumerate() {
        if k {
            if partial.get(i) == partial.mask_index() {
                return Err(Error::MaskInData);
            }
        } else {
            grid.set(i, partial.mask_index())?;
        }
    }
    if known.iter().all(|&k| k) {
        cfg.validate()?;
        check_model(model, s, Some(grid.len()))?;
        return Ok(SampleOutput {
            grid,
            forward_passes: 0,
            trace: Vec::new(),
        });
    }
    run_chain(model, grid, Some((partial, known)), y, s, cfg, rng)
}

/// Raster-order sampling with a causal model: pass `i` feeds the start
/// token (the MASK index) followed by the `i` tokens drawn so far and reads
/// the distribution of token `i` from the last row.
pub fn ar_sample<R: Rng + ?Sized>(
    model: &TinyTransformer,
    h: usize,
    w: usize,
    y: &Condition,
    rng: &mut R,
) -> Result<SampleOutput> {
    let cfg = model.config();
    if !cfg.causal {
        return Err(Error::ModelMismatch("autoregressive sampling needs a causal model".into()));
    }
    if cfg.seq_len != h * w {
        return Err(Error::ModelMismatch(format!(
            "model covers {} positions, grid has {}",
            cfg.seq_len,
            h * w
        )));
    }
    let k = cfg.vocab;
    let mut input = Vec::with_capacity(h * w);
    input.push(k);
    let mut tokens = Vec::with_capacity(h * w);
    for i in 0..h * w {
        let logp = model.log_probs(&input, None, y)?;
        let weights: Vec<f64> = logp.row(i).iter().map(|l| l.exp()).collect();
        let tok = draw_categorical(rng, &weights);
        tokens.push(tok);
        input.push(tok);
    }
    Ok(SampleOutput {
        grid: TokenGrid::new(h, w, k, tokens)?,
        forward_passes: h * w,
        trace: Vec::new(),
    })
}
