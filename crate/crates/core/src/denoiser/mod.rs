//! Predictors of the clean-token distribution `p(x0 | x_t, y)`.
//!
//! Two implementations share the [`Denoiser`] trait: the trainable
//! [`TinyTransformer`] and the exact Bayes [`OracleDenoiser`] over a small
//! enumerated dataset.

pub mod checkpoint;
mod oracle;
pub mod tape;
mod transformer;

pub use oracle::{DataEntry, OracleDenoiser};
pub use tape::Mat;
pub use transformer::{BatchLoss, Gradients, ModelExample, TinyTransformer, TransformerConfig};

use crate::error::Result;
use crate::grid::TokenGrid;

/// Probabilities are floored here so their logarithms stay finite.
pub const PROB_FLOOR: f64 = 1e-30;

/// Conditioning token sequence; empty means unconditional.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Condition(Vec<usize>);

impl Condition {
    pub fn new(tokens: Vec<usize>) -> Self {
        Self(tokens)
    }

    pub fn empty() -> Self {
        Self(Vec::new())
    }

    pub fn tokens(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// One distribution over the `K` ordinary tokens per grid position.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserOutput {
    positions: usize,
    vocab: usize,
    probs: Vec<f64>,
}

impl DenoiserOutput {
    /// Rows of `probs` must each be normalized; entries are floored at
    /// [`PROB_FLOOR`].
    pub fn from_probs(positions: usize, vocab: usize, mut probs: Vec<f64>) -> Self {
        assert_eq!(probs.len(), positions * vocab, "denoiser output shape");
        probs.iter_mut().for_each(|p| *p = p.max(PROB_FLOOR));
        Self {
            positions,
            vocab,
            probs,
        }
    }

    pub fn from_log_probs(logp: &Mat) -> Self {
        Self::from_probs(
            logp.rows(),
            logp.cols(),
            logp.data().iter().map(|l| l.exp()).collect(),
        )
    }

    pub fn positions(&self) -> usize {
        self.positions
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.probs[i * self.vocab..(i + 1) * self.vocab]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.probs[i * self.vocab..(i + 1) * self.vocab]
    }

    /// Mean per-position entropy in nats.
    pub fn mean_entropy(&self) -> f64 {
        let total: f64 = (0..self.positions)
            .map(|i| -self.row(i).iter().map(|p| p * p.ln()).sum::<f64>())
            .sum();
        total / self.positions.max(1) as f64
    }
}

pub trait Denoiser: Sync {
    /// Ordinary token count `K`.
    fn vocab(&self) -> usize;

    /// Largest timestep accepted by [`predict_x0`](Self::predict_x0).
    fn steps(&self) -> usize;

    /// Fixed grid length, if the predictor has one.
    fn seq_len(&self) -> Option<usize>;

    fn predict_x0(&self, x_t: &TokenGrid, t: usize, y: &Condition) -> Result<DenoiserOutput>;
}
