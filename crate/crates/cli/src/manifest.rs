//! Run manifests.
//!
//! `manifest.txt` holds everything that determines a run's outputs
//! (command, resolved settings, seed, a content hash of the inputs) plus
//! the output list, as `key = value` lines. Wall-clock timings go to a
//! separate `timings.txt` so that reruns leave the manifest and every
//! output byte-identical.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const TIMINGS_FILE: &str = "timings.txt";

/// Environment variable naming the default output root.
pub const OUT_ROOT_VAR: &str = "VQDIFF_OUT";

/// `--out` if given, else `$VQDIFF_OUT/<command>`, else `vqdiff-out/<command>`.
pub fn output_dir(out: Option<&Path>, command: &str) -> PathBuf {
    match out {
        Some(p) => p.to_path_buf(),
        None => std::env::var_os(OUT_ROOT_VAR)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("vqdiff-out"))
            .join(command),
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Git-style blob hash: SHA-256 over `blob <len>\0<bytes>`.
pub fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex(&h.finalize())
}

pub struct RunManifest {
    command: String,
    seed: u64,
    settings: Vec<(String, String)>,
    /// `(label, blob hash)` per input file, in the order added.
    inputs: Vec<(String, String)>,
    outputs: Vec<String>,
    timings: Vec<(String, f64)>,
    started: Instant,
}

impl RunManifest {
    pub fn new(command: &str, seed: u64) -> Self {
        Self {
            command: command.to_string(),
            seed,
            settings: Vec::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            timings: Vec::new(),
            started: Instant::now(),
        }
    }

    pub fn setting(&mut self, key: &str, value: impl ToString) {
        self.settings.push((key.to_string(), value.to_string()));
    }

    /// Hashes one input file; `label` should not depend on where the file
    /// lives so that moved inputs hash the same.
    pub fn input_file(&mut self, label: &str, path: &Path) -> Result<()> {
        let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        self.inputs.push((label.to_string(), blob_hash(&bytes)));
        Ok(())
    }

    /// Hashes every regular file of `dir` in name order.
    pub fn input_dir(&mut self, label: &str, dir: &Path) -> Result<()> {
        let mut names: Vec<_> = fs::read_dir(dir)
            .with_context(|| format!("reading directory {}", dir.display()))?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().is_file())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .collect();
        names.sort();
        for name in names {
            self.input_file(&format!("{label}/{name}"), &dir.join(&name))?;
        }
        Ok(())
    }

    pub fn output(&mut self, rel: impl Into<String>) {
        self.outputs.push(rel.into());
    }

    pub fn timing(&mut self, key: &str, seconds: f64) {
        self.timings.push((key.to_string(), seconds));
    }

    pub fn input_hash(&self) -> String {
        let mut h = Sha256::new();
        for (label, hash) in &self.inputs {
            h.update(format!("{label} {hash}\n").as_bytes());
        }
        hex(&h.finalize())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "command = {}", self.command);
        let _ = writeln!(out, "seed = {}", self.seed);
        let _ = writeln!(out, "input_hash = {}", self.input_hash());
        for (label, hash) in &self.inputs {
            let _ = writeln!(out, "input.{label} = {hash}");
        }
        for (k, v) in &self.settings {
            let _ = writeln!(out, "config.{k} = {v}");
        }
        for (i, o) in self.outputs.iter().enumerate() {
            let _ = writeln!(out, "output.{i} = {o}");
        }
        out
    }

    pub fn write(mut self, dir: &Path) -> Result<()> {
        let total = self.started.elapsed().as_secs_f64();
        self.timing("total_seconds", total);
        fs::write(dir.join(MANIFEST_FILE), self.to_text())?;
        let mut t = String::new();
        for (k, v) in &self.timings {
            let _ = writeln!(t, "{k} = {v}");
        }
        fs::write(dir.join(TIMINGS_FILE), t)?;
        Ok(())
    }
}
