//! Shared fixtures for the criterion benches.

use vqdiff_core::trainer::TrainConfig;
use vqdiff_core::{Condition, NoiseSchedule, OracleDenoiser, TinyTransformer, TokenGrid, TransformerConfig};

/// Default 100-step mask-and-replace schedule over `k` tokens.
pub fn schedule(k: usize) -> NoiseSchedule {
    TrainConfig::default().schedule(k).expect("default schedule is feasible")
}

/// Untrained transformer over `k` tokens for `edge x edge` grids.
pub fn model(k: usize, edge: usize, width: usize, causal: bool) -> TinyTransformer {
    let cfg = TransformerConfig {
        vocab: k,
        seq_len: edge * edge,
        width,
        layers: 1,
        heads: 2,
        ffn_hidden: 2 * width,
        cond_vocab: 1,
        max_cond_len: 1,
        steps: 100,
        causal,
    };
    TinyTransformer::new(cfg, 7).expect("valid architecture")
}

/// Four 2x2 grids over K = 4 with the exact denoiser.
pub fn toy_oracle() -> OracleDenoiser {
    let grids = [[0, 1, 2, 3], [3, 3, 0, 0], [1, 0, 1, 0], [2, 2, 2, 1]];
    let samples: Vec<_> = grids
        .iter()
        .map(|g| (TokenGrid::new(2, 2, 4, g.to_vec()).unwrap(), Condition::empty()))
        .collect();
    OracleDenoiser::from_samples(&samples, schedule(4)).expect("valid dataset")
}

/// Deterministic pseudo-random grid.
pub fn grid(edge: usize, k: usize) -> TokenGrid {
    let tokens = (0..edge * edge).map(|i| (i * 7 + i / 3) % k).collect();
    TokenGrid::new(edge, edge, k, tokens).unwrap()
}
