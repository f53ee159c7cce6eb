//! Toy vector-quantized image codec.
//!
//! Images are cut into `patch_edge x patch_edge` patches and each patch is
//! replaced by the index of its nearest codebook entry. The codebook is
//! fitted with k-means. This gives the diffusion engine a discrete, decodable
//! token space without any learned encoder.

mod pnm;

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;

pub use pnm::{decode_pnm, encode_pnm, read_pnm, write_pnm};

use crate::error::{Error, Result};
use crate::grid::TokenGrid;
use crate::rng::{draw_categorical, substream};

/// Row-major image with interleaved channels, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidArgument(format!(
                "images have 1 or 3 channels, got {channels}"
            )));
        }
        if data.len() != width * height * channels {
            return Err(Error::DimensionMismatch(format!(
                "{} values for a {width}x{height}x{channels} image",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite() || !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument("pixel values must lie in [0, 1]".into()));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, pixel: &[f64]) -> Result<Self> {
        let data = pixel
            .iter()
            .copied()
            .cycle()
            .take(width * height * pixel.len())
            .collect();
        Self::new(width, height, pixel.len(), data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let o = (y * self.width + x) * self.channels;
        &self.data[o..o + self.channels]
    }

    fn check_patchable(&self, edge: usize) -> Result<()> {
        if edge == 0 || !self.width.is_multiple_of(edge) || !self.height.is_multiple_of(edge) {
            return Err(Error::DimensionMismatch(format!(
                "{}x{} image is not divisible into {edge}x{edge} patches",
                self.width, self.height
            )));
        }
        Ok(())
    }

    /// Patches in row-major grid order; each patch is flattened as
    /// (row, column, channel).
    pub fn patches(&self, edge: usize) -> Result<Vec<Vec<f64>>> {
        self.check_patchable(edge)?;
        let (gh, gw) = (self.height / edge, self.width / edge);
        let mut out = Vec::with_capacity(gh * gw);
        for gy in 0..gh {
            for gx in 0..gw {
                let mut patch = Vec::with_capacity(edge * edge * self.channels);
                for dy in 0..edge {
                    for dx in 0..edge {
                        patch.extend_from_slice(self.pixel(gx * edge + dx, gy * edge + dy));
                    }
                }
                out.push(patch);
            }
        }
        Ok(out)
    }
}

/// K centroids of dimension `patch_edge^2 * channels`.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyCodebook {
    entries: Vec<Vec<f64>>,
    patch_edge: usize,
    channels: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest entry by squared distance; ties go to the lowest index.
fn nearest(entries: &[Vec<f64>], v: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, e) in entries.iter().enumerate() {
        let d = sq_dist(e, v);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

impl ToyCodebook {
    pub fn new(entries: Vec<Vec<f64>>, patch_edge: usize, channels: usize) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::InvalidArgument("codebook needs K >= 1 entries".into()));
        }
        if patch_edge == 0 || (channels != 1 && channels != 3) {
            return Err(Error::InvalidArgument(format!(
                "bad patch geometry: edge {patch_edge}, channels {channels}"
            )));
        }
        let d = patch_edge * patch_edge * channels;
        for e in &entries {
            if e.len() != d {
                return Err(Error::DimensionMismatch(format!(
                    "entry of length {} in a codebook of dimension {d}",
                    e.len()
                )));
            }
            if e.iter().any(|v| !v.is_finite() || !(0.0..=1.0).contains(v)) {
                return Err(Error::InvalidArgument("codebook values must lie in [0, 1]".into()));
            }
        }
        Ok(Self {
            entries,
            patch_edge,
            channels,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[Vec<f64>] {
        &self.entries
    }

    pub fn patch_edge(&self) -> usize {
        self.patch_edge
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dim(&self) -> usize {
        self.patch_edge * self.patch_edge * self.channels
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("vqdiff-codebook 1\n");
        let _ = writeln!(
            out,
            "{} {} {} {}",
            self.len(),
            self.dim(),
            self.patch_edge,
            self.channels
        );
        for e in &self.entries {
            let line: Vec<String> = e.iter().map(|v| v.to_string()).collect();
            let _ = writeln!(out, "{}", line.join(" "));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some("vqdiff-codebook 1") {
            return Err(Error::Format("missing codebook header".into()));
        }
        let dims: Vec<usize> = lines
            .next()
            .ok_or_else(|| Error::Format("missing codebook dimensions".into()))?
            .split_whitespace()
            .map(|s| s.parse().map_err(|_| Error::Format(format!("bad dimension `{s}`"))))
            .collect::<Result<_>>()?;
        let [k, d, edge, channels] = dims[..] else {
            return Err(Error::Format("codebook dimension line needs 4 fields".into()));
        };
        let values: Vec<f64> = lines
            .flat_map(str::split_whitespace)
            .map(|s| s.parse().map_err(|_| Error::Format(format!("bad value `{s}`"))))
            .collect::<Result<_>>()?;
        if values.len() != k * d || d != edge * edge * channels {
            return Err(Error::Format("codebook body does not match its header".into()));
        }
        Self::new(values.chunks(d.max(1)).map(<[f64]>::to_vec).collect(), edge, channels)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }
}

/// Fits a `k`-entry codebook to the patches of `images` with k-means.
///
/// Initialization is k-means++ over the distinct patches, so the starting
/// centroids are always distinct. A cluster that empties during Lloyd
/// iterations is re-seeded from the patch farthest from its centroid.
pub fn fit_codebook(
    images: &[Image],
    k: usize,
    patch_edge: usize,
    iters: usize,
    seed: u64,
) -> Result<ToyCodebook> {
    if k == 0 {
        return Err(Error::InvalidArgument("K must be at least 1".into()));
    }
    if iters == 0 {
        return Err(Error::InvalidArgument("k-means needs at least one iteration".into()));
    }
    let Some(first) = images.first() else {
        return Err(Error::InsufficientData { distinct: 0, k });
    };
    let channels = first.channels();
    let mut patches = Vec::new();
    for img in images {
        if img.channels() != channels {
            return Err(Error::DimensionMismatch("images mix channel counts".into()));
        }
        patches.extend(img.patches(patch_edge)?);
    }

    let mut seen = HashSet::new();
    let distinct: Vec<&Vec<f64>> = patches
        .iter()
        .filter(|p| seen.insert(p.iter().map(|v| v.to_bits()).collect::<Vec<_>>()))
        .collect();
    if distinct.len() < k {
        return Err(Error::InsufficientData {
            distinct: distinct.len(),
            k,
        });
    }

    let mut rng = substream(seed, &[0xC0DE]);
    let mut centroids: Vec<Vec<f64>> = vec![distinct[rng.random_range(0..distinct.len())].clone()];
    while centroids.len() < k {
        let weights: Vec<f64> = distinct.iter().map(|p| nearest(&centroids, p).1).collect();
        centroids.push(distinct[draw_categorical(&mut rng, &weights)].clone());
    }

    let dim = patch_edge * patch_edge * channels;
    let mut assignment = vec![usize::MAX; patches.len()];
    for _ in 0..iters {
        let mut changed = false;
        let mut dists = vec![0.0; patches.len()];
        for (i, p) in patches.iter().enumerate() {
            let (c, d) = nearest(&centroids, p);
            changed |= assignment[i] != c;
            assignment[i] = c;
            dists[i] = d;
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &c) in patches.iter().zip(&assignment) {
            counts[c] += 1;
            for (s, v) in sums[c].iter_mut().zip(p) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                // farthest patch from its current centroid; ties to the lowest index
                let far = dists
                    .iter()
                    .enumerate()
                    .fold(0, |best, (i, &d)| if d > dists[best] { i } else { best });
                centroids[c] = patches[far].clone();
                dists[far] = 0.0;
                assignment[far] = c;
                changed = true;
            } else {
                centroids[c] = sums[c]
                    .iter()
                    .map(|s| (s / counts[c] as f64).clamp(0.0, 1.0))
                    .collect();
            }
        }
        if !changed {
            break;
        }
    }
    ToyCodebook::new(centroids, patch_edge, channels)
}

pub fn encode(img: &Image, cb: &ToyCodebook) -> Result<TokenGrid> {
    if img.channels() != cb.channels() {
        return Err(Error::DimensionMismatch(format!(
            "{}-channel image with a {}-channel codebook",
            img.channels(),
            cb.channels()
        )));
    }
    let edge = cb.patch_edge();
    let tokens = img
        .patches(edge)?
        .iter()
        .map(|p| nearest(cb.entries(), p).0)
        .collect();
    TokenGrid::new(img.height() / edge, img.width() / edge, cb.len(), tokens)
}

pub fn decode(g: &TokenGrid, cb: &ToyCodebook) -> Result<Image> {
    if g.vocab() != cb.len() {
        return Err(Error::DimensionMismatch(format!(
            "grid over K = {} decoded with a codebook of {} entries",
            g.vocab(),
            cb.len()
        )));
    }
    if let Some(pos) = g.tokens().iter().position(|&t| t == g.mask_index()) {
        return Err(Error::CannotDecodeMask(pos));
    }
    let edge = cb.patch_edge();
    let c = cb.channels();
    let (width, height) = (g.width() * edge, g.height() * edge);
    let mut data = vec![0.0; width * height * c];
    for gy in 0..g.height() {
        for gx in 0..g.width() {
            let entry = &cb.entries()[g.get(gy * g.width() + gx)];
            for dy in 0..edge {
                for dx in 0..edge {
                    let src = (dy * edge + dx) * c;
                    let dst = ((gy * edge + dy) * width + gx * edge + dx) * c;
                    data[dst..dst + c].copy_from_slice(&entry[src..src + c]);
                }
            }
        }
    }
    Image::new(width, height, c, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{any, prop_assert_eq, proptest};

    fn two_color_image() -> Image {
        let mut data = Vec::new();
        for i in 0..16 {
            data.extend(if i % 3 == 0 { [0.2, 0.4, 0.6] } else { [0.9, 0.1, 0.0] });
        }
        Image::new(4, 4, 3, data).unwrap()
    }

    #[test]
    fn single_gray_image_single_centroid() {
        let img = Image::filled(4, 2, &[0.5]).unwrap();
        let cb = fit_codebook(&[img], 1, 1, 10, 3).unwrap();
        assert_eq!(cb.entries(), &[vec![0.5]]);
    }

    #[test]
    fn two_colors_two_centroids() {
        let cb = fit_codebook(&[two_color_image()], 2, 1, 20, 11).unwrap();
        let mut got = cb.entries().to_vec();
        got.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let want = [[0.2, 0.4, 0.6], [0.9, 0.1, 0.0]];
        for (g, w) in got.iter().zip(&want) {
            for (a, b) in g.iter().zip(w) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fitting_is_deterministic_per_seed() {
        let imgs = [two_color_image(), Image::filled(4, 4, &[0.3, 0.3, 0.3]).unwrap()];
        let a = fit_codebook(&imgs, 3, 2, 15, 5).unwrap();
        let b = fit_codebook(&imgs, 3, 2, 15, 5).unwrap();
        assert_eq!(a.to_text(), b.to_text());
    }

    #[test]
    fn insufficient_and_zero_k() {
        let img = Image::filled(2, 2, &[0.1]).unwrap();
        assert!(matches!(
            fit_codebook(&[img.clone()], 2, 1, 5, 0),
            Err(Error::InsufficientData { distinct: 1, k: 2 })
        ));
        assert!(fit_codebook(&[img], 0, 1, 5, 0).is_err());
    }

    #[test]
    fn exact_entries_encode_to_their_indices() {
        let cb = ToyCodebook::new(vec![vec![0.0], vec![0.5], vec![1.0]], 1, 1).unwrap();
        let img = Image::new(3, 1, 1, vec![1.0, 0.0, 0.5]).unwrap();
        assert_eq!(encode(&img, &cb).unwrap().tokens(), &[2, 0, 1]);
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let cb = ToyCodebook::new(vec![vec![0.75], vec![0.25]], 1, 1).unwrap();
        let img = Image::new(1, 1, 1, vec![0.5]).unwrap();
        assert_eq!(encode(&img, &cb).unwrap().tokens(), &[0]);
    }

    #[test]
    fn decode_all_zero_grid_tiles_entry_zero() {
        let cb = ToyCodebook::new(vec![vec![0.1, 0.2, 0.3, 0.4], vec![1.0; 4]], 2, 1).unwrap();
        let g = TokenGrid::filled(2, 2, 2, 0).unwrap();
        let img = decode(&g, &cb).unwrap();
        assert_eq!((img.width(), img.height()), (4, 4));
        assert_eq!(img.pixel(0, 0), &[0.1]);
        assert_eq!(img.pixel(1, 0), &[0.2]);
        assert_eq!(img.pixel(3, 1), &[0.4]);
        assert_eq!(img.pixel(2, 3), &[0.3]);
    }

    #[test]
    fn decode_rejects_mask() {
        let cb = ToyCodebook::new(vec![vec![0.0], vec![1.0]], 1, 1).unwrap();
        let g = TokenGrid::new(1, 2, 2, vec![0, 2]).unwrap();
        assert!(matches!(decode(&g, &cb), Err(Error::CannotDecodeMask(1))));
    }

    #[test]
    fn dimension_mismatch_on_encode() {
        let cb = ToyCodebook::new(vec![vec![0.0; 4]], 2, 1).unwrap();
        let img = Image::filled(3, 2, &[0.0]).unwrap();
        assert!(matches!(encode(&img, &cb), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn reconstruction_error_bounded_by_fit_distance() {
        let mut rng = substream(99, &[]);
        let imgs: Vec<Image> = (0..3)
            .map(|_| {
                let data = (0..8 * 8 * 3).map(|_| rng.random::<f64>()).collect();
                Image::new(8, 8, 3, data).unwrap()
            })
            .collect();
        let cb = fit_codebook(&imgs, 6, 2, 25, 1).unwrap();
        // brute force: every patch against every centroid
        let mut max_fit = 0.0f64;
        for img in &imgs {
            for p in img.patches(2).unwrap() {
                let d = cb
                    .entries()
                    .iter()
                    .map(|e| sq_dist(e, &p).sqrt())
                    .fold(f64::INFINITY, f64::min);
                max_fit = max_fit.max(d);
            }
        }
        for img in &imgs {
            let rec = decode(&encode(img, &cb).unwrap(), &cb).unwrap();
            let orig = img.patches(2).unwrap();
            let back = rec.patches(2).unwrap();
            for (a, b) in orig.iter().zip(&back) {
                assert!(sq_dist(a, b).sqrt() <= max_fit + 1e-12);
            }
        }
    }

    #[test]
    fn codebook_text_round_trip() {
        let cb = fit_codebook(&[two_color_image()], 2, 2, 5, 4).unwrap();
        assert_eq!(ToyCodebook::from_text(&cb.to_text()).unwrap(), cb);
    }

    proptest! {
        #[test]
        fn encode_decode_fixed_point(seed in any::<u64>(), k in 1usize..6, h in 1usize..4, w in 1usize..4) {
            let mut rng = substream(seed, &[]);
            let entries: Vec<Vec<f64>> = (0..k).map(|i| vec![i as f64 / k as f64, rng.random::<f64>(), 0.5, 0.1, 0.2, 0.3, 0.4, 0.6, 0.7, 0.8, 0.9, 1.0]).collect();
            let cb = ToyCodebook::new(entries, 2, 3).unwrap();
            let tokens = (0..h * w).map(|_| rng.random_range(0..k)).collect();
            let g = TokenGrid::new(h, w, k, tokens).unwrap();
            let img = decode(&g, &cb).unwrap();
            prop_assert_eq!(encode(&img, &cb).unwrap(), g.clone());
            // decode . encode is idempotent
            let once = decode(&encode(&img, &cb).unwrap(), &cb).unwrap();
            let twice = decode(&encode(&once, &cb).unwrap(), &cb).unwrap();
            prop_assert_eq!(once, twice);
        }
    }
}
