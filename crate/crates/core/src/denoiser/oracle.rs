use std::collections::BTreeMap;

use super::{Condition, Denoiser, DenoiserOutput};
use crate::diffusion::transition_prob;
use crate::error::{Error, Result};
use crate::grid::TokenGrid;
use crate::schedule::NoiseSchedule;

#[derive(Debug, Clone, PartialEq)]
pub struct DataEntry {
    pub grid: TokenGrid,
    pub condition: Condition,
    pub prob: f64,
}

/// Exact Bayes-optimal denoiser over an enumerated dataset.
///
/// `p(x0^i = k | x_t, y)` is the posterior mass of dataset grids with
/// token `k` at position `i`, weighting each grid `s` by
/// `p(s | y) * prod_j q(x_t^j | s^j)`.
#[derive(Debug, Clone)]
pub struct OracleDenoiser {
    entries: Vec<DataEntry>,
    schedule: NoiseSchedule,
}

impl OracleDenoiser {
    pub fn new(entries: Vec<DataEntry>, schedule: NoiseSchedule) -> Result<Self> {
        let Some(first) = entries.first() else {
            return Err(Error::InvalidArgument("oracle dataset is empty".into()));
        };
        for e in &entries {
            if !e.grid.same_shape(&first.grid) {
                return Err(Error::DimensionMismatch("oracle grids differ in shape".into()));
            }
            e.grid.ensure_mask_free()?;
            if !(e.prob >= 0.0) {
                return Err(Error::InvalidArgument(format!("bad dataset probability {}", e.prob)));
            }
        }
        if first.grid.vocab() != schedule.vocab() {
            return Err(Error::ModelMismatch(format!(
                "dataset over K = {} with a schedule over K = {}",
                first.grid.vocab(),
                schedule.vocab()
            )));
        }
        let total: f64 = entries.iter().map(|e| e.prob).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "dataset probabilities sum to {total}"
            )));
        }
        Ok(Self { entries, schedule })
    }

    /// Empirical distribution of `samples`: duplicates merge, each distinct
    /// pair gets its relative frequency.
    pub fn from_samples(samples: &[(TokenGrid, Condition)], schedule: NoiseSchedule) -> Result<Self> {
        let mut counts: BTreeMap<(Condition, Vec<usize>), (TokenGrid, usize)> = BTreeMap::new();
        for (g, y) in samples {
            counts
                .entry((y.clone(), g.tokens().to_vec()))
                .or_insert_with(|| (g.clone(), 0))
                .1 += 1;
        }
        let n = samples.len() as f64;
        let entries = counts
            .into_iter()
            .map(|((condition, _), (grid, c))| DataEntry {
                grid,
                condition,
                prob: c as f64 / n,
            })
            .collect();
        Self::new(entries, schedule)
    }

    pub fn entries(&self) -> &[DataEntry] {
        &self.entries
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    /// `p(s | y)` over the dataset grids.
    pub fn conditional(&self, y: &Condition) -> Result<Vec<(&TokenGrid, f64)>> {
        let matching: Vec<&DataEntry> = self.entries.iter().filter(|e| &e.condition == y).collect();
        let total: f64 = matching.iter().map(|e| e.prob).sum();
        if matching.is_empty() || total <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "no dataset entry carries condition {:?}",
                y.tokens()
            )));
        }
        Ok(matching.iter().map(|e| (&e.grid, e.prob / total)).collect())
    }
}

impl Denoiser for OracleDenoiser {
    fn vocab(&self) -> usize {
        self.schedule.vocab()
    }

    fn steps(&self) -> usize {
        self.schedule.steps()
    }

    fn seq_len(&self) -> Option<usize> {
        Some(self.entries[0].grid.len())
    }

    fn predict_x0(&self, x_t: &TokenGrid, t: usize, y: &Condition) -> Result<DenoiserOutput> {
        self.schedule.check_step(t)?;
        let k = self.schedule.vocab();
        let n = self.entries[0].grid.len();
        if x_t.len() != n || x_t.vocab() != k {
            return Err(Error::ModelMismatch("noisy grid shape differs from the dataset".into()));
        }
        let cum = self.schedule.cumulative(t);
        let candidates = self.conditional(y)?;
        // log weights keep long grids from underflowing
        let log_w: Vec<f64> = candidates
            .iter()
            .map(|(s, p)| {
                p.ln()
                    + s.tokens()
                        .iter()
                        .zip(x_t.tokens())
                        .map(|(&clean, &noisy)| transition_prob(cum, k, clean, noisy).ln())
                        .sum::<f64>()
            })
            .collect();
        let max = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(Error::InconsistentState);
        }
        let w: Vec<f64> = log_w.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = w.iter().sum();
        let mut probs = vec![0.0; n * k];
        for ((s, _), wi) in candidates.iter().zip(&w) {
            for (i, &tok) in s.tokens().iter().enumerate() {
                probs[i * k + tok] += wi / total;
            }
        }
        Ok(DenoiserOutput::from_probs(n, k, probs))
    }
}
