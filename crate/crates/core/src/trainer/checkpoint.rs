//! Training-state checkpoints.
//!
//! The model section (kind 1) is followed by:
//!
//! ```text
//! size  field
//! 8     completed iterations (u64)
//! 8     config text length L (u64)
//! L     config text, UTF-8 key = value lines
//! 8P    AdamW first moments
//! 8P    AdamW second moments
//! 8     history length H (u64)
//! 48H   history rows: iteration u64, t u64, vlb, aux, total, lr (f64)
//! ```
//!
//! No generator state is stored: every draw is keyed by seed, iteration
//! and example index.

use std::fs;
use std::path::Path;

use super::{LossRecord, TrainConfig, TrainState};
use crate::denoiser::checkpoint::{read_model, write_model, ByteReader, ByteWriter, KIND_TRAIN_STATE};
use crate::denoiser::Mat;
use crate::error::{Error, Result};

pub fn state_to_bytes(state: &TrainState) -> Vec<u8> {
    let mut w = ByteWriter::new();
    write_model(&mut w, &state.model, KIND_TRAIN_STATE);
    w.u64(state.iteration as u64);
    let text = state.config.to_text();
    w.u64(text.len() as u64);
    w.bytes(text.as_bytes());
    for m in state.m.iter().chain(&state.v) {
        w.f64s(m.data());
    }
    w.u64(state.history.len() as u64);
    for r in &state.history {
        w.u64(r.iteration as u64);
        w.u64(r.t as u64);
        w.f64s(&[r.vlb, r.aux, r.total, r.lr]);
    }
    w.into_inner()
}

pub fn state_from_bytes(bytes: &[u8]) -> Result<TrainState> {
    let mut r = ByteReader::new(bytes);
    let (model, kind) = read_model(&mut r)?;
    if kind != KIND_TRAIN_STATE {
        return Err(Error::Format("checkpoint holds a model without training state".into()));
    }
    let iteration = r.u64()? as usize;
    let len = r.u64()? as usize;
    let text = std::str::from_utf8(r.take(len)?)
        .map_err(|_| Error::Format("config section is not UTF-8".into()))?;
    let config = TrainConfig::from_text(text)?;
    let moments = |r: &mut ByteReader<'_>| {
        model
            .params()
            .iter()
            .map(|p| Ok(Mat::from_vec(p.rows(), p.cols(), r.f64s(p.rows() * p.cols())?)))
            .collect::<Result<Vec<_>>>()
    };
    let m = moments(&mut r)?;
    let v = moments(&mut r)?;
    let rows = r.u64()? as usize;
    let mut history = Vec::with_capacity(rows.min(1 << 20));
    for _ in 0..rows {
        let iteration = r.u64()? as usize;
        let t = r.u64()? as usize;
        let f = r.f64s(4)?;
        history.push(LossRecord {
            iteration,
            t,
            vlb: f[0],
            aux: f[1],
            total: f[2],
            lr: f[3],
        });
    }
    if !r.is_empty() {
        return Err(Error::Format("trailing bytes after training state".into()));
    }
    if config.model_config(model.config().vocab, model.config().seq_len) != *model.config() {
        return Err(Error::Format("stored config disagrees with the stored model".into()));
    }
    Ok(TrainState {
        config,
        model,
        m,
        v,
        iteration,
        history,
    })
}

pub fn save_checkpoint(state: &TrainState, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, state_to_bytes(state))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<TrainState> {
    state_from_bytes(&fs::read(path)?)
}
