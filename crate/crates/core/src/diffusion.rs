//! Forward corruption and exact probabilities.
//!
//! Every distribution here is computed in O(K) from the closed-form
//! structure of the mask-and-replace family: a column of a transition (or
//! of any product of transitions) puts `alpha + beta` on the source token,
//! `beta` on every other ordinary token and `gamma` on MASK, while MASK maps
//! to itself. Dense matrices are only built by [`transition_matrix`] and the
//! brute-force oracle [`cumulative_dist_bruteforce`].

use rand::Rng;

use crate::error::{Error, Result};
use crate::grid::TokenGrid;
use crate::prob::ProbVector;
use crate::rng::draw_categorical;
use crate::schedule::{NoiseSchedule, StepParams};

/// Factors below this switch the Bayes combination to log space.
const LOG_SPACE_THRESHOLD: f64 = 1e-30;

/// Dense column-stochastic `(K+1) x (K+1)` matrix; entry `(m, n)` is
/// `q(x_t = m | x_{t-1} = n)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix {
    size: usize,
    data: Vec<f64>,
}

impl TransitionMatrix {
    pub fn identity(size: usize) -> Self {
        let mut data = vec![0.0; size * size];
        (0..size).for_each(|i| data[i * size + i] = 1.0);
        Self { size, data }
    }

    pub fn from_params(p: StepParams, k: usize) -> Self {
        let size = k + 1;
        let mut data = vec![0.0; size * size];
        for n in 0..size {
            for m in 0..size {
                data[m * size + n] = transition_prob(p, k, n, m);
            }
        }
        Self { size, data }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn get(&self, m: usize, n: usize) -> f64 {
        self.data[m * self.size + n]
    }

    pub fn column(&self, n: usize) -> Vec<f64> {
        (0..self.size).map(|m| self.get(m, n)).collect()
    }

    /// `self * rhs`
    pub fn matmul(&self, rhs: &TransitionMatrix) -> TransitionMatrix {
        let s = self.size;
        let mut data = vec![0.0; s * s];
        for i in 0..s {
            for l in 0..s {
                let a = self.data[i * s + l];
                if a == 0.0 {
                    continue;
                }
                for j in 0..s {
                    data[i * s + j] += a * rhs.data[l * s + j];
                }
            }
        }
        TransitionMatrix { size: s, data }
    }

    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        (0..self.size)
            .map(|m| (0..self.size).map(|n| self.get(m, n) * v[n]).sum())
            .collect()
    }
}

/// `q(to | from)` for one step (or segment) with parameters `p`.
#[inline]
pub fn transition_prob(p: StepParams, k: usize, from: usize, to: usize) -> f64 {
    if from == k {
        return if to == k { 1.0 } else { 0.0 };
    }
    if to == k {
        p.gamma
    } else if to == from {
        p.alpha + p.beta
    } else {
        p.beta
    }
}

fn check_token(x: usize, k: usize) -> Result<()> {
    if x > k {
        return Err(Error::TokenOutOfRange { token: x, k });
    }
    Ok(())
}

fn check_data_token(x0: usize, k: usize) -> Result<()> {
    check_token(x0, k)?;
    if x0 == k {
        return Err(Error::MaskInData);
    }
    Ok(())
}

pub fn transition_matrix(s: &NoiseSchedule, t: usize) -> Result<TransitionMatrix> {
    s.check_step(t)?;
    Ok(TransitionMatrix::from_params(s.step(t), s.vocab()))
}

/// Column `x_prev` of the step-`t` transition matrix.
pub fn forward_step_dist(x_prev: usize, s: &NoiseSchedule, t: usize) -> Result<ProbVector> {
    s.check_step(t)?;
    let k = s.vocab();
    check_token(x_prev, k)?;
    let p = s.step(t);
    Ok(ProbVector::from_vec_unchecked(
        (0..=k).map(|m| transition_prob(p, k, x_prev, m)).collect(),
    ))
}

/// `q(x_t | x_0)` in closed form.
pub fn cumulative_dist(x0: usize, s: &NoiseSchedule, t: usize) -> Result<ProbVector> {
    let k = s.vocab();
    check_data_token(x0, k)?;
    if t > s.steps() {
        return Err(Error::TimestepOutOfRange { t, max: s.steps() });
    }
    let c = s.cumulative(t);
    Ok(ProbVector::from_vec_unchecked(
        (0..=k).map(|m| transition_prob(c, k, x0, m)).collect(),
    ))
}

/// `q(x_t | x_0)` by explicitly multiplying `t` transition matrices onto
/// the one-hot vector. Test oracle for [`cumulative_dist`].
pub fn cumulative_dist_bruteforce(x0: usize, s: &NoiseSchedule, t: usize) -> Result<ProbVector> {
    let k = s.vocab();
    check_data_token(x0, k)?;
    if t > s.steps() {
        return Err(Error::TimestepOutOfRange { t, max: s.steps() });
    }
    let mut v = vec![0.0; k + 1];
    v[x0] = 1.0;
    for step in 1..=t {
        v = transition_matrix(s, step)?.matvec(&v);
    }
    Ok(ProbVector::from_vec_unchecked(v))
}

/// Draws `x_t ~ q(x_t | x_0)` independently at every position.
pub fn sample_xt<R: Rng + ?Sized>(
    x0: &TokenGrid,
    s: &NoiseSchedule,
    t: usize,
    rng: &mut R,
) -> Result<TokenGrid> {
    s.check_step(t)?;
    x0.ensure_mask_free()?;
    if x0.vocab() != s.vocab() {
        return Err(Error::ModelMismatch(format!(
            "grid over K = {} with a schedule over K = {}",
            x0.vocab(),
            s.vocab()
        )));
    }
    let mut out = x0.clone();
    for i in 0..x0.len() {
        let dist = cumulative_dist(x0.get(i), s, t)?;
        out.set(i, draw_categorical(rng, &dist))?;
    }
    Ok(out)
}

/// Parameters of the product of steps `t_lo + 1 ..= t_hi`.
pub fn segment_params(s: &NoiseSchedule, t_hi: usize, t_lo: usize) -> Result<StepParams> {
    if t_lo >= t_hi || t_hi > s.steps() {
        return Err(Error::InvalidArgument(format!(
            "segment ({t_lo}, {t_hi}] outside 0 <= t_lo < t_hi <= {}",
            s.steps()
        )));
    }
    Ok(((t_lo + 1)..=t_hi).fold(StepParams::IDENTITY, |acc, t| {
        acc.then(s.step(t), s.vocab())
    }))
}

/// Bayes combination `q(x_t | x_lo) q(x_lo | x0) / q(x_t | x0)` over every
/// `x_lo`, where `segment` describes the jump from `x_lo` to `x_t` and
/// `lower` the cumulative corruption up to `x_lo`.
fn bayes_posterior(
    segment: StepParams,
    lower: StepParams,
    k: usize,
    x_t: usize,
    x0: usize,
) -> Result<ProbVector> {
    let mut tiny = false;
    let factors: Vec<(f64, f64)> = (0..=k)
        .map(|j| {
            let pair = (
                transition_prob(segment, k, j, x_t),
                transition_prob(lower, k, x0, j),
            );
            tiny |= (pair.0 > 0.0 && pair.0 < LOG_SPACE_THRESHOLD)
                || (pair.1 > 0.0 && pair.1 < LOG_SPACE_THRESHOLD);
            pair
        })
        .collect();
    let unreachable = || Error::ZeroProbability { x_t, x0 };
    let weights: Vec<f64> = if tiny {
        let logs: Vec<f64> = factors.iter().map(|(a, b)| a.ln() + b.ln()).collect();
        let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(unreachable());
        }
        logs.iter().map(|l| (l - max).exp()).collect()
    } else {
        factors.iter().map(|(a, b)| a * b).collect()
    };
    ProbVector::from_weights(weights).map_err(|_| unreachable())
}

/// `q(x_{t-1} | x_t, x_0)`.
pub fn posterior(x_t: usize, x0: usize, s: &NoiseSchedule, t: usize) -> Result<ProbVector> {
    posterior_strided(x_t, x0, s, t, 1)
}

/// `q(x_{t-stride} | x_t, x_0)`: the single-step posterior with the segment
/// `(t - stride, t]` in place of step `t`.
pub fn posterior_strided(
    x_t: usize,
    x0: usize,
    s: &NoiseSchedule,
    t: usize,
    stride: usize,
) -> Result<ProbVector> {
    s.check_step(t)?;
    let k = s.vocab();
    check_token(x_t, k)?;
    check_data_token(x0, k)?;
    if stride == 0 || stride > t {
        return Err(Error::InvalidArgument(format!(
            "stride {stride} must lie in 1..={t}"
        )));
    }
    let segment = if stride == 1 {
        s.step(t)
    } else {
        segment_params(s, t, t - stride)?
    };
    bayes_posterior(segment, s.cumulative(t - stride), k, x_t, x0)
}
