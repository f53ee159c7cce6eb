//! Discrete diffusion over vector-quantized token grids.
//!
//! Images are quantized into token grids by a small k-means codec
//! ([`codec`]). Grids are corrupted by a mask-and-replace Markov chain
//! ([`schedule`], [`diffusion`]) and regenerated by a learned or exact
//! reverse process ([`denoiser`], [`objective`], [`sampler`]), trained with
//! the variational bound plus an auxiliary clean-token loss ([`trainer`]).

pub mod codec;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod grid;
pub mod objective;
pub mod prob;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod trainer;
pub mod verify;

pub use denoiser::{Condition, Denoiser, DenoiserOutput, OracleDenoiser, TinyTransformer, TransformerConfig};
pub use error::{Error, Result};
pub use grid::TokenGrid;
pub use prob::ProbVector;
pub use schedule::{build_schedule, NoiseSchedule, StepParams, Strategy};
