//! Held-out loss and sample-distribution metrics.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::denoiser::{Condition, Denoiser};
use crate::diffusion::sample_xt;
use crate::error::{Error, Result};
use crate::grid::TokenGrid;
use crate::objective::total_loss;
use crate::prob::total_variation;
use crate::rng::substream;
use crate::sampler::{sample, SamplerConfig};
use crate::schedule::NoiseSchedule;

/// Exact-distribution TV is reported when the dataset has at most this
/// many distinct `(condition, grid)` pairs.
pub const ENUMERABLE_LIMIT: usize = 256;

const STREAM_LOSS: u64 = 10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalMetrics {
    pub loss: f64,
    pub vlb: f64,
    /// Averaged over the strata with `t > 1` only, where it is defined.
    pub aux: f64,
    /// Mean over positions of the TV between sampled and data token
    /// marginals.
    pub marginal_tv: f64,
    /// TV between the sampled and data distributions over whole
    /// `(condition, grid)` pairs.
    pub exact_tv: Option<f64>,
    pub samples: usize,
}

/// `min(T, 10)` timesteps spread evenly over `1..=T`.
fn strata(steps: usize) -> Vec<usize> {
    let n = steps.min(10);
    (1..=n).map(|j| (j * steps).div_ceil(n)).collect()
}

/// Sample `i` is conditioned on the condition of dataset entry
/// `i mod len`, so conditions appear in data proportion.
pub fn evaluate(
    model: &dyn Denoiser,
    data: &[(TokenGrid, Condition)],
    s: &NoiseSchedule,
    cfg: &SamplerConfig,
    n_samples: usize,
    lambda: f64,
) -> Result<EvalMetrics> {
    let Some((first, _)) = data.first() else {
        return Err(Error::InvalidArgument("evaluation dataset is empty".into()));
    };
    let (h, w, k) = (first.height(), first.width(), first.vocab());

    let ts = strata(s.steps());
    let mut loss = [0.0; 3];
    let mut aux_count = 0usize;
    for (n, (x0, y)) in data.iter().enumerate() {
        for &t in &ts {
            let mut rng = substream(cfg.seed, &[STREAM_LOSS, n as u64, t as u64]);
            let x_t = sample_xt(x0, s, t, &mut rng)?;
            let b = total_loss(x0, &x_t, y, t, model, s, lambda)?;
            loss[0] += b.total;
            loss[1] += b.vlb;
            if t > 1 {
                loss[2] += b.aux;
                aux_count += 1;
            }
        }
    }
    let count = (data.len() * ts.len()) as f64;

    let samples: Vec<(Condition, TokenGrid)> = (0..n_samples)
        .into_par_iter()
        .map(|i| {
            let y = &data[i % data.len()].1;
            let mut rng = substream(cfg.seed, &[i as u64]);
            Ok((y.clone(), sample(model, h, w, y, s, cfg, &mut rng)?.grid))
        })
        .collect::<Result<_>>()?;

    let n = first.len();
    let mut marginal_tv = 0.0;
    if n_samples > 0 {
        for i in 0..n {
            let mut p = vec![0.0; k];
            let mut q = vec![0.0; k];
            for (g, _) in data {
                p[g.get(i)] += 1.0 / data.len() as f64;
            }
            for (_, g) in &samples {
                q[g.get(i)] += 1.0 / n_samples as f64;
            }
            marginal_tv += total_variation(&p, &q);
        }
        marginal_tv /= n as f64;
    }

    let mut joint: BTreeMap<(Condition, Vec<usize>), [f64; 2]> = BTreeMap::new();
    for (g, y) in data {
        joint.entry((y.clone(), g.tokens().to_vec())).or_default()[0] += 1.0 / data.len() as f64;
    }
    let exact_tv = (joint.len() <= ENUMERABLE_LIMIT && n_samples > 0).then(|| {
        for (y, g) in &samples {
            joint.entry((y.clone(), g.tokens().to_vec())).or_default()[1] += 1.0 / n_samples as f64;
        }
        let (p, q): (Vec<f64>, Vec<f64>) = joint.values().map(|v| (v[0], v[1])).unzip();
        total_variation(&p, &q)
    });

    Ok(EvalMetrics {
        loss: loss[0] / count,
        vlb: loss[1] / count,
        aux: if aux_count > 0 { loss[2] / aux_count as f64 } else { 0.0 },
        marginal_tv,
        exact_tv,
        samples: n_samples,
    })
}
