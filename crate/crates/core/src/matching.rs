//! Prototype construction and dense cosine matching.
//!
//! Support features are split by the downsampled support mask into
//! foreground and background vectors. Each side is turned into a prototype
//! set by one of three strategies (dense, masked patch average, global
//! pool). Every query cell is scored by its best cosine match on each side
//! and labelled foreground when the foreground score is strictly higher.

use std::fmt;
use std::str::FromStr;

use ndarray::{s, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureMap;
use crate::mask::BinaryMask;

/// Floor for the cosine denominator.
pub const COSINE_EPS: f32 = 1e-8;
pub const DEFAULT_PATCH_SIZE: usize = 3;
/// Stride of the patch average. Fixed; exposed for config echoes.
pub const PATCH_STRIDE: usize = 1;

// Query rows per similarity block; bounds the temporary dot-product matrix.
const QUERY_BLOCK: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrototypeStrategy {
    /// Keep every support vector.
    Dense,
    /// Masked `k × k` neighbourhood mean around every support cell.
    Patch,
    /// One global mean vector.
    Pool,
}

impl fmt::Display for PrototypeStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PrototypeStrategy::Dense => "dense",
            PrototypeStrategy::Patch => "patch",
            PrototypeStrategy::Pool => "pool",
        })
    }
}

impl FromStr for PrototypeStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dense" => Ok(PrototypeStrategy::Dense),
            "patch" => Ok(PrototypeStrategy::Patch),
            "pool" | "pooling" => Ok(PrototypeStrategy::Pool),
            other => Err(Error::InvalidArgument(format!(
                "unknown prototype strategy '{other}' (expected dense, patch or pool)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrototypeConfig {
    pub fg: PrototypeStrategy,
    pub bg: PrototypeStrategy,
    /// Side of the patch-average window; odd.
    pub patch_size: usize,
}

impl Default for PrototypeConfig {
    fn default() -> Self {
        PrototypeConfig {
            fg: PrototypeStrategy::Patch,
            bg: PrototypeStrategy::Dense,
            patch_size: DEFAULT_PATCH_SIZE,
        }
    }
}

impl PrototypeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.patch_size.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "patch size must be odd and >= 1, got {}",
                self.patch_size
            )));
        }
        Ok(())
    }
}

/// A list of equal-length vectors stored contiguously.
#[derive(Clone, Debug, PartialEq)]
pub struct VectorSet {
    dim: usize,
    data: Vec<f32>,
}

impl VectorSet {
    pub fn new(dim: usize) -> Self {
        VectorSet {
            dim,
            data: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len().checked_div(self.dim).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn push(&mut self, v: &[f32]) {
        debug_assert_eq!(v.len(), self.dim);
        self.data.extend_from_slice(v);
    }

    pub fn get(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter(&self) -> std::slice::ChunksExact<'_, f32> {
        self.data.chunks_exact(self.dim)
    }

    fn extend(&mut self, other: &VectorSet) {
        debug_assert_eq!(self.dim, other.dim);
        self.data.extend_from_slice(&other.data);
    }

    fn mean(&self) -> Vec<f32> {
        let mut acc = vec![0.0f64; self.dim];
        for v in self.iter() {
            for (a, &x) in acc.iter_mut().zip(v) {
                *a += x as f64;
            }
        }
        let n = self.len() as f64;
        acc.into_iter().map(|a| (a / n) as f32).collect()
    }

    fn without_zero_vectors(self) -> VectorSet {
        let mut out = VectorSet::new(self.dim);
        for v in self.iter() {
            if v.iter().any(|&x| x != 0.0) {
                out.push(v);
            }
        }
        out
    }

    fn view(&self) -> ArrayView2<'_, f32> {
        ArrayView2::from_shape((self.len(), self.dim), &self.data).expect("contiguous vector set")
    }
}

/// Foreground and background prototypes. Both sides are nonempty and hold
/// no all-zero vector.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeSet {
    pub foreground: VectorSet,
    pub background: VectorSet,
    pub fg_strategy: PrototypeStrategy,
    pub bg_strategy: PrototypeStrategy,
}

impl PrototypeSet {
    pub fn dim(&self) -> usize {
        self.foreground.dim()
    }
}

fn check_mask_shape(f: &FeatureMap, mask: &BinaryMask) -> Result<()> {
    if mask.dims() != (f.width(), f.height()) {
        return Err(Error::DimensionMismatch {
            what: "support mask vs feature grid",
            expected: (f.width(), f.height()),
            got: mask.dims(),
        });
    }
    Ok(())
}

/// Splits support features into the vectors under foreground cells and
/// those under background cells, in row-major order.
pub fn partition_support(f: &FeatureMap, mask: &BinaryMask) -> Result<(VectorSet, VectorSet)> {
    check_mask_shape(f, mask)?;
    let mut fg = VectorSet::new(f.channels());
    let mut bg = VectorSet::new(f.channels());
    for y in 0..f.height() {
        for x in 0..f.width() {
            if mask.get(x, y) {
                fg.push(f.vector(y, x));
            } else {
                bg.push(f.vector(y, x));
            }
        }
    }
    if fg.is_empty() {
        return Err(Error::Matching("support mask has no foreground cells".into()));
    }
    if bg.is_empty() {
        return Err(Error::Matching("no background prototypes available".into()));
    }
    Ok((fg, bg))
}

/// For every cell whose label equals `label`, the mean of the vectors in its
/// `k × k` window restricted to cells with the same label.
fn patch_average(f: &FeatureMap, mask: &BinaryMask, label: bool, k: usize) -> VectorSet {
    let r = (k / 2) as isize;
    let (h, w, c) = (f.height() as isize, f.width() as isize, f.channels());
    let mut out = VectorSet::new(c);
    let mut acc = vec![0.0f64; c];
    for y in 0..h {
        for x in 0..w {
            if mask.get(x as usize, y as usize) != label {
                continue;
            }
            acc.iter_mut().for_each(|a| *a = 0.0);
            let mut n = 0usize;
            for ny in (y - r).max(0)..=(y + r).min(h - 1) {
                for nx in (x - r).max(0)..=(x + r).min(w - 1) {
                    if mask.get(nx as usize, ny as usize) != label {
                        continue;
                    }
                    for (a, &v) in acc.iter_mut().zip(f.vector(ny as usize, nx as usize)) {
                        *a += v as f64;
                    }
                    n += 1;
                }
            }
            let mean: Vec<f32> = acc.iter().map(|a| (a / n as f64) as f32).collect();
            out.push(&mean);
        }
    }
    out
}

fn apply_strategy(
    strategy: PrototypeStrategy,
    shots: &[(&FeatureMap, &BinaryMask)],
    label: bool,
    partitioned: &VectorSet,
    patch_size: usize,
) -> VectorSet {
    match strategy {
        PrototypeStrategy::Dense => partitioned.clone(),
        PrototypeStrategy::Pool => {
            let mut out = VectorSet::new(partitioned.dim());
            out.push(&partitioned.mean());
            out
        }
        // Patch averaging is spatial, so it runs per shot; concatenating the
        // results equals concatenating first and averaging in place.
        PrototypeStrategy::Patch => {
            let mut out = VectorSet::new(partitioned.dim());
            for (f, m) in shots {
                out.extend(&patch_average(f, m, label, patch_size));
            }
            out
        }
    }
}

/// Builds prototypes from one or more `(features, downsampled mask)` shots.
/// Vector sets of all shots are concatenated before the strategy is applied.
pub fn build_prototypes(shots: &[(&FeatureMap, &BinaryMask)], cfg: &PrototypeConfig) -> Result<PrototypeSet> {
    cfg.validate()?;
    let Some((first, _)) = shots.first() else {
        return Err(Error::InvalidArgument("at least one support shot is required".into()));
    };
    let dim = first.channels();
    let mut fg_all = VectorSet::new(dim);
    let mut bg_all = VectorSet::new(dim);
    for (i, (f, m)) in shots.iter().enumerate() {
        if f.channels() != dim {
            return Err(Error::Matching(format!(
                "support {i} has {} channels, expected {dim}",
                f.channels()
            )));
        }
        let (fg, bg) = partition_support(f, m).map_err(|e| e.context(format!("support {i}")))?;
        fg_all.extend(&fg);
        bg_all.extend(&bg);
    }
    let foreground = apply_strategy(cfg.fg, shots, true, &fg_all, cfg.patch_size).without_zero_vectors();
    let background = apply_strategy(cfg.bg, shots, false, &bg_all, cfg.patch_size).without_zero_vectors();
    if foreground.is_empty() {
        return Err(Error::Matching("every foreground prototype is a zero vector".into()));
    }
    if background.is_empty() {
        return Err(Error::Matching("every background prototype is a zero vector".into()));
    }
    Ok(PrototypeSet {
        foreground,
        background,
        fg_strategy: cfg.fg,
        bg_strategy: cfg.bg,
    })
}

/// Best foreground and background cosine score of every query cell.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMaps {
    pub height: usize,
    pub width: usize,
    pub fg: Vec<f32>,
    pub bg: Vec<f32>,
}

impl SimilarityMaps {
    pub fn fg_at(&self, y: usize, x: usize) -> f32 {
        self.fg[y * self.width + x]
    }

    pub fn bg_at(&self, y: usize, x: usize) -> f32 {
        self.bg[y * self.width + x]
    }
}

fn norms(rows: ArrayView2<'_, f32>) -> Vec<f32> {
    rows.rows()
        .into_iter()
        .map(|r| r.iter().map(|v| v * v).sum::<f32>().sqrt())
        .collect()
}

// max_k  <q, p_k> / max(|q| |p_k|, eps)  for every query row.
fn max_cosine(query: ArrayView2<'_, f32>, query_norms: &[f32], protos: &VectorSet) -> Vec<f32> {
    let p = protos.view();
    let p_norms = norms(p);
    let pt = p.t();
    let mut out = Vec::with_capacity(query.nrows());
    let mut start = 0;
    while start < query.nrows() {
        let end = (start + QUERY_BLOCK).min(query.nrows());
        let dots = query.slice(s![start..end, ..]).dot(&pt);
        for (row, &qn) in dots.rows().into_iter().zip(&query_norms[start..end]) {
            let best = row
                .iter()
                .zip(&p_norms)
                .map(|(&d, &pn)| d / (qn * pn).max(COSINE_EPS))
                .fold(f32::NEG_INFINITY, f32::max);
            out.push(best);
        }
        start = end;
    }
    out
}

pub fn similarity_maps(query: &FeatureMap, protos: &PrototypeSet) -> Result<SimilarityMaps> {
    if query.channels() != protos.dim() {
        return Err(Error::Matching(format!(
            "query has {} channels but prototypes have {}",
            query.channels(),
            protos.dim()
        )));
    }
    let q = ArrayView2::from_shape((query.height() * query.width(), query.channels()), query.data())
        .expect("contiguous feature map");
    let qn = norms(q);
    Ok(SimilarityMaps {
        height: query.height(),
        width: query.width(),
        fg: max_cosine(q, &qn, &protos.foreground),
        bg: max_cosine(q, &qn, &protos.background),
    })
}

/// Foreground where `fg > bg` (ties are background), then nearest-neighbour
/// upsampling of the decision to `width × height`.
pub fn decide_mask(maps: &SimilarityMaps, width: usize, height: usize) -> BinaryMask {
    let (gw, gh) = (maps.width, maps.height);
    BinaryMask::from_fn(width, height, |x, y| {
        let gx = (x * gw / width).min(gw - 1);
        let gy = (y * gh / height).min(gh - 1);
        maps.fg_at(gy, gx) > maps.bg_at(gy, gx)
    })
}
