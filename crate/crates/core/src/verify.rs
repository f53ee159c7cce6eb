//! Self-checks run by `vqdiff verify`: closed forms against brute force,
//! sampler and loss invariants, and a finite-difference gradient check.
//!
//! Every check draws `fuzz` random instances from its own substream and
//! reports the largest error it saw.

use std::fmt::Write as _;

use rand::Rng;

use crate::codec::{decode, encode, ToyCodebook};
use crate::denoiser::checkpoint::{model_from_bytes, model_to_bytes};
use crate::denoiser::{Condition, Mat, TinyTransformer, TransformerConfig};
use crate::diffusion::{
    cumulative_dist, cumulative_dist_bruteforce, posterior_strided, sample_xt, transition_matrix,
    TransitionMatrix,
};
use crate::error::{Error, Result};
use crate::grid::TokenGrid;
use crate::objective::{
    ar_objective, diffusion_objective, kl_categorical, l_t_gap, reverse_dist, ArExample,
    DiffusionExample,
};
use crate::rng::substream;
use crate::sampler::truncate;
use crate::schedule::{build_schedule, NoiseSchedule, StepParams, Strategy};

/// Relative-error bound for the gradient check.
pub const GRAD_TOL: f64 = 1e-4;
/// Central-difference step.
pub const GRAD_STEP: f64 = 1e-5;
/// Gradients smaller than this are compared on an absolute scale: the
/// relative error uses `max(|analytic|, |numeric|, GRAD_FLOOR)`.
pub const GRAD_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub cases: usize,
    pub max_error: f64,
    pub tolerance: f64,
    pub detail: String,
}

impl CheckResult {
    fn from_error(name: &'static str, cases: usize, max_error: f64, tolerance: f64) -> Self {
        Self {
            name,
            passed: max_error <= tolerance,
            cases,
            max_error,
            tolerance,
            detail: String::new(),
        }
    }

    fn failed(name: &'static str, detail: String) -> Self {
        Self {
            name,
            passed: false,
            cases: 0,
            max_error: f64::NAN,
            tolerance: 0.0,
            detail,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VerifyOptions {
    pub fuzz: usize,
    pub seed: u64,
    /// Test hook: overwrite one per-step entry of the schedule under test
    /// at this `t` before validating it.
    pub corrupt_schedule: Option<usize>,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            fuzz: 200,
            seed: 0,
            corrupt_schedule: None,
        }
    }
}

fn random_schedule<R: Rng>(rng: &mut R, max_k: usize, max_t: usize) -> NoiseSchedule {
    let k = rng.random_range(1..=max_k);
    let steps = rng.random_range(1..=max_t);
    let gamma = rng.random::<f64>();
    let mass = (1.0 - gamma) * rng.random::<f64>();
    build_schedule(steps, k, gamma, mass, Strategy::MaskAndReplace).expect("feasible by construction")
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn check_schedule(opts: &VerifyOptions) -> CheckResult {
    const NAME: &str = "schedule invariants";
    let mut rng = substream(opts.seed, &[1]);
    for case in 0..opts.fuzz.max(1) {
        let mut s = random_schedule(&mut rng, 16, 100);
        if case == 0 {
            s = build_schedule(100, 16, 0.9, 0.1, Strategy::MaskAndReplace).expect("default schedule");
            if let Some(t) = opts.corrupt_schedule {
                let t = t.clamp(1, s.steps());
                let p = s.step(t);
                s.set_step_unchecked(
                    t,
                    StepParams {
                        alpha: p.alpha + 0.01,
                        ..p
                    },
                );
            }
        }
        if let Err(v) = s.validate() {
            return CheckResult::failed(NAME, format!("violated `{}` at t = {}: {}", v.invariant, v.t, v.detail));
        }
    }
    CheckResult::from_error(NAME, opts.fuzz.max(1), 0.0, 0.0)
}

pub fn check_cumulative(opts: &VerifyOptions) -> CheckResult {
    let mut rng = substream(opts.seed, &[2]);
    let mut worst: f64 = 0.0;
    for _ in 0..opts.fuzz {
        let s = random_schedule(&mut rng, 16, 100);
        let x0 = rng.random_range(0..s.vocab());
        let t = rng.random_range(0..=s.steps());
        let fast = cumulative_dist(x0, &s, t).expect("valid inputs");
        let slow = cumulative_dist_bruteforce(x0, &s, t).expect("valid inputs");
        worst = worst.max(max_abs_diff(&fast, &slow));
    }
    CheckResult::from_error("cumulative closed form vs matrix product", opts.fuzz, worst, 1e-12)
}

/// `q(x_{t-stride} = j | x_t, x0)` from explicit matrix products and Bayes'
/// rule.
fn posterior_by_products(x_t: usize, x0: usize, s: &NoiseSchedule, t: usize, stride: usize) -> Option<Vec<f64>> {
    let k = s.vocab();
    let mut before = TransitionMatrix::identity(k + 1);
    for u in 1..=t - stride {
        before = transition_matrix(s, u).ok()?.matmul(&before);
    }
    let mut segment = TransitionMatrix::identity(k + 1);
    for u in t - stride + 1..=t {
        segment = transition_matrix(s, u).ok()?.matmul(&segment);
    }
    let joint: Vec<f64> = (0..=k).map(|j| segment.get(x_t, j) * before.get(j, x0)).collect();
    let z: f64 = joint.iter().sum();
    (z > 0.0).then(|| joint.iter().map(|v| v / z).collect())
}

pub fn check_posterior(opts: &VerifyOptions) -> CheckResult {
    const NAME: &str = "posterior vs Bayes enumeration";
    let worked = StepParams {
        alpha: 0.5,
        beta: 0.15,
        gamma: 0.2,
    };
    let s = NoiseSchedule::from_steps(2, Strategy::MaskAndReplace, &[worked, worked]).expect("valid steps");
    let p = posterior_strided(2, 0, &s, 2, 1).expect("reachable");
    let mut worst = max_abs_diff(&p, &[13.0 / 36.0, 3.0 / 36.0, 20.0 / 36.0]);

    let mut rng = substream(opts.seed, &[3]);
    for _ in 0..opts.fuzz {
        let s = random_schedule(&mut rng, 8, 20);
        let t = rng.random_range(1..=s.steps());
        let stride = rng.random_range(1..=t);
        let x0 = rng.random_range(0..s.vocab());
        let x_t = rng.random_range(0..=s.vocab());
        match (posterior_strided(x_t, x0, &s, t, stride), posterior_by_products(x_t, x0, &s, t, stride)) {
            (Ok(a), Some(b)) => worst = worst.max(max_abs_diff(&a, &b)),
            (Err(Error::ZeroProbability { .. }), None) => {}
            (a, b) => {
                return CheckResult::failed(
                    NAME,
                    format!("x_t = {x_t}, x0 = {x0}, t = {t}, stride = {stride}: {a:?} vs {b:?}"),
                )
            }
        }
    }
    CheckResult::from_error(NAME, opts.fuzz + 1, worst, 1e-12)
}

pub fn check_mask_only(opts: &VerifyOptions) -> CheckResult {
    const NAME: &str = "mask-only support";
    let mut rng = substream(opts.seed, &[4]);
    let k = 6;
    let s = build_schedule(20, k, 0.9, 0.0, Strategy::MaskAndReplace).expect("feasible");
    let n = opts.fuzz.max(1) * 50;
    let x0 = TokenGrid::new(1, n, k, (0..n).map(|i| i % k).collect()).expect("valid tokens");
    for t in [1, 7, 20] {
        let x_t = sample_xt(&x0, &s, t, &mut rng).expect("valid inputs");
        if let Some(i) = (0..n).find(|&i| x_t.get(i) != x0.get(i) && x_t.get(i) != k) {
            return CheckResult::failed(NAME, format!("position {i} moved to {} at t = {t}", x_t.get(i)));
        }
    }
    for x_t in 0..k {
        for x0 in (0..k).filter(|&x0| x0 != x_t) {
            if !matches!(posterior_strided(x_t, x0, &s, 5, 1), Err(Error::ZeroProbability { .. })) {
                return CheckResult::failed(NAME, format!("x_t = {x_t} accepted from x0 = {x0}"));
            }
        }
    }
    CheckResult::from_error(NAME, 3 * n, 0.0, 0.0)
}

pub fn check_reverse(opts: &VerifyOptions) -> CheckResult {
    const NAME: &str = "reverse distribution normalization";
    let mut rng = substream(opts.seed, &[5]);
    let mut worst: f64 = 0.0;
    for _ in 0..opts.fuzz {
        let s = random_schedule(&mut rng, 8, 30);
        let k = s.vocab();
        let t = rng.random_range(1..=s.steps());
        let stride = rng.random_range(1..=t);
        let raw: Vec<f64> = (0..k).map(|_| rng.random::<f64>() + 1e-3).collect();
        let z: f64 = raw.iter().sum();
        let p: Vec<f64> = raw.iter().map(|v| v / z).collect();
        let x_t = rng.random_range(0..=k);
        let Ok(r) = reverse_dist(&p, x_t, &s, t, stride) else {
            continue;
        };
        worst = worst.max((r.iter().sum::<f64>() - 1.0).abs());
        if stride == t {
            worst = worst.max(r[k]);
        }
        if r.iter().any(|v| *v < 0.0) {
            return CheckResult::failed(NAME, "negative mass".into());
        }
    }
    CheckResult::from_error(NAME, opts.fuzz, worst, 1e-12)
}

pub fn check_truncation(opts: &VerifyOptions) -> CheckResult {
    const NAME: &str = "truncation keeps minimal mass prefix";
    let mut rng = substream(opts.seed, &[6]);
    let mut worst: f64 = 0.0;
    for _ in 0..opts.fuzz {
        let n = rng.random_range(1..=16);
        let raw: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let z: f64 = raw.iter().sum();
        let p: Vec<f64> = raw.iter().map(|v| v / z).collect();
        let r = rng.random_range(0.05..=1.0);
        let q = truncate(&p, r);
        let kept_mass: f64 = (0..n).filter(|&i| q[i] > 0.0).map(|i| p[i]).sum();
        worst = worst.max((q.iter().sum::<f64>() - 1.0).abs());
        if kept_mass < r - 1e-12 {
            return CheckResult::failed(NAME, format!("kept {kept_mass} < {r}"));
        }
        for i in 0..n {
            if q[i] > 0.0 {
                worst = worst.max((q[i] - p[i] / kept_mass).abs());
            }
        }
    }
    CheckResult::from_error(NAME, opts.fuzz, worst, 1e-12)
}

pub fn check_kl_terms(opts: &VerifyOptions) -> CheckResult {
    const NAME: &str = "KL non-negative, terminal gap zero";
    let mut rng = substream(opts.seed, &[7]);
    let mut worst: f64 = 0.0;
    for _ in 0..opts.fuzz {
        let n = rng.random_range(2..=10);
        let a: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let b: Vec<f64> = (0..n).map(|_| rng.random::<f64>() + 1e-6).collect();
        let (za, zb): (f64, f64) = (a.iter().sum(), b.iter().sum());
        let a: Vec<f64> = a.iter().map(|v| v / za).collect();
        let b: Vec<f64> = b.iter().map(|v| v / zb).collect();
        let kl = kl_categorical(&a, &b).expect("full support");
        worst = worst.max(-kl);
        worst = worst.max(kl_categorical(&a, &a).expect("same support").abs());
    }
    let s = build_schedule(100, 8, 0.9, 0.1, Strategy::MaskAndReplace).expect("default schedule");
    for _ in 0..opts.fuzz.min(50) {
        let g = TokenGrid::new(2, 2, 8, (0..4).map(|_| rng.random_range(0..8)).collect()).expect("valid");
        worst = worst.max(l_t_gap(&g, &s).expect("mask-free").abs());
    }
    CheckResult::from_error(NAME, opts.fuzz, worst, 1e-12)
}

pub fn check_codec(opts: &VerifyOptions) -> CheckResult {
    const NAME: &str = "codec fixed point";
    let mut rng = substream(opts.seed, &[8]);
    for _ in 0..opts.fuzz {
        let k = rng.random_range(1..=8);
        let edge = rng.random_range(1..=2);
        let channels = if rng.random::<bool>() { 3 } else { 1 };
        let dim = edge * edge * channels;
        let entries = (0..k).map(|_| (0..dim).map(|_| rng.random::<f64>()).collect()).collect();
        let Ok(cb) = ToyCodebook::new(entries, edge, channels) else {
            continue;
        };
        let (h, w) = (rng.random_range(1..=4), rng.random_range(1..=4));
        let g = TokenGrid::new(h, w, k, (0..h * w).map(|_| rng.random_range(0..k)).collect()).expect("valid");
        let img = decode(&g, &cb).expect("mask-free");
        let back = encode(&img, &cb).expect("shape matches");
        // duplicate entries may legitimately re-encode to the lower index
        let again = decode(&back, &cb).expect("mask-free");
        if again != img {
            return CheckResult::failed(NAME, "decode(encode(decode(g))) != decode(g)".into());
        }
    }
    CheckResult::from_error(NAME, opts.fuzz, 0.0, 0.0)
}

/// Largest relative error between analytic and central-difference
/// gradients over every parameter, and the tensor where it occurred.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientReport {
    pub params: usize,
    pub max_rel_error: f64,
    pub worst_tensor: String,
}

fn compare_gradients(
    model: &TinyTransformer,
    analytic: &[Mat],
    loss_at: impl Fn(&TinyTransformer) -> f64,
) -> GradientReport {
    let names = model.config().layout();
    let mut probe = model.clone();
    let mut worst = 0.0;
    let mut worst_tensor = String::new();
    for (tensor, grad) in analytic.iter().enumerate() {
        for e in 0..grad.data().len() {
            let orig = probe.params()[tensor].data()[e];
            probe.params_mut()[tensor].data_mut()[e] = orig + GRAD_STEP;
            let up = loss_at(&probe);
            probe.params_mut()[tensor].data_mut()[e] = orig - GRAD_STEP;
            let down = loss_at(&probe);
            probe.params_mut()[tensor].data_mut()[e] = orig;
            let numeric = (up - down) / (2.0 * GRAD_STEP);
            let a = grad.data()[e];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_FLOOR);
            if rel > worst {
                worst = rel;
                worst_tensor = names[tensor].0.clone();
            }
        }
    }
    GradientReport {
        params: model.param_count(),
        max_rel_error: worst,
        worst_tensor,
    }
}

/// Small architecture (under 2k parameters) used by the gradient check.
pub fn gradient_check_config(causal: bool) -> TransformerConfig {
    TransformerConfig {
        vocab: 4,
        seq_len: 4,
        width: 8,
        layers: 1,
        heads: 2,
        ffn_hidden: 16,
        cond_vocab: 3,
        max_cond_len: 2,
        steps: 10,
        causal,
    }
}

/// Gradient check of the full diffusion loss for a dense random model.
pub fn gradient_check_diffusion(seed: u64) -> Result<GradientReport> {
    let cfg = gradient_check_config(false);
    let model = TinyTransformer::new_dense(cfg.clone(), seed, 0.3)?;
    let s = build_schedule(cfg.steps, cfg.vocab, 0.6, 0.3, Strategy::MaskAndReplace)?;
    let mut rng = substream(seed, &[9]);
    let x0 = TokenGrid::new(2, 2, 4, (0..4).map(|_| rng.random_range(0..4)).collect())?;
    let t = rng.random_range(2..=cfg.steps);
    let ex = DiffusionExample {
        x_t: sample_xt(&x0, &s, t, &mut rng)?,
        x0,
        t,
        condition: Condition::new(vec![2, 0]),
    };
    let lambda = 0.05;
    let batch = [ex];
    let out = model.loss_and_gradients(&batch, |ex, logp| diffusion_objective(ex, logp, &s, lambda))?;
    Ok(compare_gradients(&model, &out.grads.0, |m| {
        let logp = m.log_probs(batch[0].x_t.tokens(), Some(t), &batch[0].condition).expect("valid");
        diffusion_objective(&batch[0], &logp, &s, lambda).expect("finite").0
    }))
}

/// Gradient check of the causal model under the next-token loss.
pub fn gradient_check_causal(seed: u64) -> Result<GradientReport> {
    let model = TinyTransformer::new_dense(gradient_check_config(true), seed, 0.3)?;
    let mut rng = substream(seed, &[10]);
    let x0 = TokenGrid::new(2, 2, 4, (0..4).map(|_| rng.random_range(0..4)).collect())?;
    let ex = ArExample::new(x0, Condition::new(vec![1]))?;
    let batch = [ex];
    let out = model.loss_and_gradients(&batch, ar_objective)?;
    Ok(compare_gradients(&model, &out.grads.0, |m| {
        let logp = m.log_probs(&batch[0].input, None, &batch[0].condition).expect("valid");
        ar_objective(&batch[0], &logp).expect("finite").0
    }))
}

pub fn check_gradients(opts: &VerifyOptions) -> CheckResult {
    const NAME: &str = "gradients vs central differences";
    let mut worst = 0.0;
    let mut detail = String::new();
    let mut params = 0;
    for report in [gradient_check_diffusion(opts.seed), gradient_check_causal(opts.seed)] {
        match report {
            Ok(r) => {
                params += r.params;
                if r.max_rel_error >= worst {
                    worst = r.max_rel_error;
                    detail = format!("worst tensor {}", r.worst_tensor);
                }
            }
            Err(e) => return CheckResult::failed(NAME, e.to_string()),
        }
    }
    CheckResult {
        detail,
        ..CheckResult::from_error(NAME, params, worst, GRAD_TOL)
    }
}

pub fn check_checkpoint(opts: &VerifyOptions) -> CheckResult {
    const NAME: &str = "checkpoint round trip";
    let model = match TinyTransformer::new_dense(gradient_check_config(false), opts.seed, 0.3) {
        Ok(m) => m,
        Err(e) => return CheckResult::failed(NAME, e.to_string()),
    };
    let bytes = model_to_bytes(&model);
    match model_from_bytes(&bytes) {
        Ok(back) if back == model && model_to_bytes(&back) == bytes => CheckResult::from_error(NAME, 1, 0.0, 0.0),
        Ok(_) => CheckResult::failed(NAME, "round trip changed the model".into()),
        Err(e) => CheckResult::failed(NAME, e.to_string()),
    }
}

pub fn run_all(opts: &VerifyOptions) -> Vec<CheckResult> {
    vec![
        check_schedule(opts),
        check_cumulative(opts),
        check_posterior(opts),
        check_mask_only(opts),
        check_reverse(opts),
        check_truncation(opts),
        check_kl_terms(opts),
        check_codec(opts),
        check_gradients(opts),
        check_checkpoint(opts),
    ]
}

pub fn report(results: &[CheckResult]) -> String {
    let mut out = String::new();
    for r in results {
        let _ = write!(
            out,
            "{} {}: cases={} max_error={:e} tolerance={:e}",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.cases,
            r.max_error,
            r.tolerance
        );
        if !r.detail.is_empty() {
            let _ = write!(out, " ({})", r.detail);
        }
        out.push('\n');
    }
    out
}
