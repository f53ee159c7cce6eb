//! Binary checkpoint format.
//!
//! All integers are little-endian; all floats are little-endian IEEE-754
//! binary64.
//!
//! ```text
//! offset  size  field
//! 0       8     magic "VQDDCKPT"
//! 8       4     format version (u32) = 1
//! 12      4     kind (u32): 0 = model only, 1 = training state
//! 16      40    architecture, ten u32: vocab, seq_len, width, layers, heads,
//!               ffn_hidden, cond_vocab, max_cond_len, steps, causal (0/1)
//! 56      8     parameter count P (u64)
//! 64      8P    parameters, tensors in TransformerConfig::layout order,
//!               each row-major
//! ```
//!
//! A training-state checkpoint (kind 1) continues with the trainer's
//! section, see `trainer::checkpoint`.

use super::tape::Mat;
use super::transformer::{TinyTransformer, TransformerConfig};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"VQDDCKPT";
pub const VERSION: u32 = 1;
pub const KIND_MODEL: u32 = 0;
pub const KIND_TRAIN_STATE: u32 = 1;

#[derive(Default)]
pub struct ByteWriter {
    buf: Vec<u8>,
}

impl ByteWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64s(&mut self, vs: &[f64]) {
        vs.iter().for_each(|&v| self.f64(v));
    }

    pub fn into_inner(self) -> Vec<u8> {
        self.buf
    }
}

pub struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format("truncated checkpoint".into()))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64()).collect()
    }

    pub fn is_empty(&self) -> bool {
        self.pos == self.buf.len()
    }
}

fn arch_fields(c: &TransformerConfig) -> [usize; 10] {
    [
        c.vocab,
        c.seq_len,
        c.width,
        c.layers,
        c.heads,
        c.ffn_hidden,
        c.cond_vocab,
        c.max_cond_len,
        c.steps,
        c.causal as usize,
    ]
}

/// Header and parameters of `model` with the given `kind`.
pub fn write_model(w: &mut ByteWriter, model: &TinyTransformer, kind: u32) {
    w.bytes(MAGIC);
    w.u32(VERSION);
    w.u32(kind);
    for v in arch_fields(model.config()) {
        w.u32(v as u32);
    }
    w.u64(model.param_count() as u64);
    for p in model.params() {
        w.f64s(p.data());
    }
}

/// Reads the header and parameters; returns the model and the kind tag.
pub fn read_model(r: &mut ByteReader<'_>) -> Result<(TinyTransformer, u32)> {
    if r.take(8)? != MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "checkpoint version {version} is not supported (expected {VERSION})"
        )));
    }
    let kind = r.u32()?;
    if kind != KIND_MODEL && kind != KIND_TRAIN_STATE {
        return Err(Error::Format(format!("unknown checkpoint kind {kind}")));
    }
    let mut f = [0usize; 10];
    for v in &mut f {
        *v = r.u32()? as usize;
    }
    let config = TransformerConfig {
        vocab: f[0],
        seq_len: f[1],
        width: f[2],
        layers: f[3],
        heads: f[4],
        ffn_hidden: f[5],
        cond_vocab: f[6],
        max_cond_len: f[7],
        steps: f[8],
        causal: match f[9] {
            0 => false,
            1 => true,
            other => return Err(Error::Format(format!("bad causal flag {other}"))),
        },
    };
    config.validate()?;
    let count = r.u64()? as usize;
    if count != config.param_count() {
        return Err(Error::Format(format!(
            "checkpoint holds {count} parameters, architecture needs {}",
            config.param_count()
        )));
    }
    let params = config
        .layout()
        .iter()
        .map(|(_, rows, cols)| Ok(Mat::from_vec(*rows, *cols, r.f64s(rows * cols)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok((TinyTransformer::from_params(config, params)?, kind))
}

pub fn model_to_bytes(model: &TinyTransformer) -> Vec<u8> {
    let mut w = ByteWriter::new();
    write_model(&mut w, model, KIND_MODEL);
    w.into_inner()
}

/// Loads a model from either checkpoint kind; trailing training state is
/// ignored.
pub fn model_from_bytes(bytes: &[u8]) -> Result<TinyTransformer> {
    let mut r = ByteReader::new(bytes);
    let (model, kind) = read_model(&mut r)?;
    if kind == KIND_MODEL && !r.is_empty() {
        return Err(Error::Format("trailing bytes after model checkpoint".into()));
    }
    Ok(model)
}
