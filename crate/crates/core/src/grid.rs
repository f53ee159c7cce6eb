//! Token grids and their text serialization.
//!
//! A grid holds `h * w` tokens in row-major order over an alphabet of `k`
//! ordinary tokens plus one MASK token at index `k`.
//!
//! Text format: a header line `h w K` followed by `h * w` whitespace
//! separated integers (written one grid row per line).

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenGrid {
    h: usize,
    w: usize,
    k: usize,
    tokens: Vec<usize>,
}

impl TokenGrid {
    pub fn new(h: usize, w: usize, k: usize, tokens: Vec<usize>) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidArgument("K must be at least 1".into()));
        }
        if tokens.len() != h * w {
            return Err(Error::DimensionMismatch(format!(
                "{} tokens for a {h}x{w} grid",
                tokens.len()
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t > k) {
            return Err(Error::TokenOutOfRange { token: bad, k });
        }
        Ok(Self { h, w, k, tokens })
    }

    pub fn filled(h: usize, w: usize, k: usize, token: usize) -> Result<Self> {
        Self::new(h, w, k, vec![token; h * w])
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    /// Number of ordinary tokens `K`.
    pub fn vocab(&self) -> usize {
        self.k
    }

    pub fn mask_index(&self) -> usize {
        self.k
    }

    /// Sequence length `N = h * w`.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn get(&self, i: usize) -> usize {
        self.tokens[i]
    }

    pub fn set(&mut self, i: usize, token: usize) -> Result<()> {
        if token > self.k {
            return Err(Error::TokenOutOfRange { token, k: self.k });
        }
        self.tokens[i] = token;
        Ok(())
    }

    pub fn contains_mask(&self) -> bool {
        self.tokens.contains(&self.k)
    }

    pub fn mask_count(&self) -> usize {
        self.tokens.iter().filter(|&&t| t == self.k).count()
    }

    /// Fails with [`Error::MaskInData`] if any token is MASK.
    pub fn ensure_mask_free(&self) -> Result<()> {
        if self.contains_mask() {
            Err(Error::MaskInData)
        } else {
            Ok(())
        }
    }

    pub fn same_shape(&self, other: &TokenGrid) -> bool {
        self.h == other.h && self.w == other.w && self.k == other.k
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{} {} {}\n", self.h, self.w, self.k);
        for row in self.tokens.chunks(self.w.max(1)) {
            let line: Vec<String> = row.iter().map(|t| t.to_string()).collect();
            let _ = writeln!(out, "{}", line.join(" "));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut fields = text.split_whitespace().map(|s| {
            s.parse::<usize>()
                .map_err(|_| Error::Format(format!("expected a non-negative integer, got `{s}`")))
        });
        let mut header = || {
            fields
                .next()
                .unwrap_or_else(|| Err(Error::Format("truncated token grid header".into())))
        };
        let h = header()?;
        let w = header()?;
        let k = header()?;
        let tokens = fields.collect::<Result<Vec<_>>>()?;
        if tokens.len() != h * w {
            return Err(Error::Format(format!(
                "expected {} tokens, found {}",
                h * w,
                tokens.len()
            )));
        }
        Self::new(h, w, k, tokens)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }
}
