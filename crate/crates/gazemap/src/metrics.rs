//! Saliency evaluation metrics: KLD, CC, NSS and SIM, following the common
//! benchmark conventions.
//!
//! KLD is computed as KL(GT || prediction) over the two maps normalized to
//! probability distributions, with a small epsilon inside the logarithm
//! (`DEFAULT_EPS`, configurable) guarding empty cells. CC is plain Pearson
//! correlation over pixels and reports NaN when either map has zero
//! variance; aggregation excludes and counts those. NSS standardizes the
//! prediction to zero mean and unit (population) variance and averages it
//! over discrete fixation cells. SIM is the histogram intersection of the
//! two normalized maps.

use std::io::Read;
use std::path::Path;

use ndarray::Array2;

use crate::raster::RasterError;

/// Epsilon inside the KLD logarithm.
pub const DEFAULT_EPS: f64 = 1e-12;

/// Percentile used to derive fixations from a continuous map when no
/// discrete fixation data exists.
pub const DEFAULT_FIXATION_PERCENTILE: f64 = 99.5;

#[derive(Debug, thiserror::Error)]
pub enum MetricError {
    #[error("map contains non-finite or negative values")]
    InvalidMap,
    #[error("map is empty")]
    EmptyMap,
    #[error("cannot normalize an all-zero map")]
    AllZero,
    #[error("shape mismatch: {0}x{1} vs {2}x{3}")]
    ShapeMismatch(usize, usize, usize, usize),
    #[error("fixation set is empty")]
    NoFixations,
    #[error("fixation ({0}, {1}) outside a {2}x{3} map")]
    FixationOutOfBounds(usize, usize, usize, usize),
    #[error("percentile {0} outside [0, 100]")]
    BadPercentile(f64),
    #[error("float tensor has shape {0:?}, expected a single channel H x W")]
    NotAMap(Vec<usize>),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Tensor(#[from] crate::patch::PatchError),
    #[error("CSV: {0}")]
    Csv(#[from] csv::Error),
    #[error("I/O: {0}")]
    Io(#[from] std::io::Error),
}

/// A non-negative, finite saliency grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    grid: Array2<f64>,
}

impl SaliencyMap {
    pub fn new(grid: Array2<f64>) -> Result<Self, MetricError> {
        if grid.is_empty() {
            return Err(MetricError::EmptyMap);
        }
        if grid.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(MetricError::InvalidMap);
        }
        Ok(Self { grid })
    }

    pub fn grid(&self) -> &Array2<f64> {
        &self.grid
    }

    pub fn dim(&self) -> (usize, usize) {
        self.grid.dim()
    }

    /// Load from an 8- or 16-bit PGM, normalized by its maxval.
    pub fn from_pgm<P: AsRef<Path>>(path: P) -> Result<Self, MetricError> {
        let g = crate::raster::read_pgm(path)?;
        Self::new(g.mapv(|v| v as f64))
    }

    /// Load from the crate's float tensor format (f32 binary + JSON shape
    /// sidecar). Accepts `[H, W]` or a single-channel `[1, H, W]`.
    pub fn from_float_binary<P: AsRef<Path>>(path: P) -> Result<Self, MetricError> {
        let (shape, data) = crate::patch::read_f32_tensor(&path)?;
        let (h, w) = match shape.as_slice() {
            [h, w] => (*h, *w),
            [1, h, w] => (*h, *w),
            _ => return Err(MetricError::NotAMap(shape)),
        };
        let grid = Array2::from_shape_vec((h, w), data.iter().map(|&v| v as f64).collect())
            .expect("shape checked against data length");
        Self::new(grid)
    }
}

/// Discrete gaze locations as (row, col) cells.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct FixationSet {
    pub points: Vec<(usize, usize)>,
}

impl FixationSet {
    /// Read a `row,col` CSV (header required).
    pub fn read_csv<R: Read>(reader: R) -> Result<Self, MetricError> {
        #[derive(serde::Deserialize)]
        struct Row {
            row: usize,
            col: usize,
        }
        let mut points = Vec::new();
        for row in csv::Reader::from_reader(reader).deserialize() {
            let r: Row = row?;
            points.push((r.row, r.col));
        }
        Ok(Self { points })
    }

    pub fn read_csv_file<P: AsRef<Path>>(path: P) -> Result<Self, MetricError> {
        Self::read_csv(std::fs::File::open(path)?)
    }
}

fn check_shapes(a: &SaliencyMap, b: &SaliencyMap) -> Result<(), MetricError> {
    let (ah, aw) = a.dim();
    let (bh, bw) = b.dim();
    if (ah, aw) != (bh, bw) {
        return Err(MetricError::ShapeMismatch(ah, aw, bh, bw));
    }
    Ok(())
}

/// Scale a map so its cells sum to 1.
pub fn normalize_to_distribution(map: &SaliencyMap) -> Result<Array2<f64>, MetricError> {
    let sum: f64 = map.grid.sum();
    if sum <= 0.0 {
        return Err(MetricError::AllZero);
    }
    Ok(map.grid.mapv(|v| v / sum))
}

/// KL divergence of the normalized ground truth from the normalized
/// prediction: `sum_i G_i * ln(eps + G_i / (eps + P_i))`.
pub fn kld(pred: &SaliencyMap, gt: &SaliencyMap) -> Result<f64, MetricError> {
    kld_with_eps(pred, gt, DEFAULT_EPS)
}

pub fn kld_with_eps(pred: &SaliencyMap, gt: &SaliencyMap, eps: f64) -> Result<f64, MetricError> {
    check_shapes(pred, gt)?;
    let p = normalize_to_distribution(pred)?;
    let g = normalize_to_distribution(gt)?;
    Ok(g.iter().zip(p.iter()).map(|(&gi, &pi)| gi * (eps + gi / (eps + pi)).ln()).sum())
}

/// Pearson correlation over all pixels. Zero variance in either map is not
/// an error but the NaN sentinel, which aggregation excludes and counts.
pub fn cc(pred: &SaliencyMap, gt: &SaliencyMap) -> Result<f64, MetricError> {
    check_shapes(pred, gt)?;
    let constant = |m: &SaliencyMap| m.grid.iter().all(|&v| v == m.grid[(0, 0)]);
    if constant(pred) || constant(gt) {
        return Ok(f64::NAN);
    }
    let n = pred.grid.len() as f64;
    let mp = pred.grid.sum() / n;
    let mg = gt.grid.sum() / n;
    let (mut cov, mut vp, mut vg) = (0.0, 0.0, 0.0);
    for (&a, &b) in pred.grid.iter().zip(gt.grid.iter()) {
        let (da, db) = (a - mp, b - mg);
        cov += da * db;
        vp += da * da;
        vg += db * db;
    }
    if vp == 0.0 || vg == 0.0 {
        return Ok(f64::NAN);
    }
    Ok(cov / (vp * vg).sqrt())
}

/// Mean standardized prediction value over the fixation cells; population
/// standard deviation. A constant prediction scores 0 by convention.
pub fn nss(pred: &SaliencyMap, fixations: &FixationSet) -> Result<f64, MetricError> {
    if fixations.points.is_empty() {
        return Err(MetricError::NoFixations);
    }
    let (h, w) = pred.dim();
    for &(r, c) in &fixations.points {
        if r >= h || c >= w {
            return Err(MetricError::FixationOutOfBounds(r, c, h, w));
        }
    }
    if pred.grid.iter().all(|&v| v == pred.grid[(0, 0)]) {
        return Ok(0.0);
    }
    let n = pred.grid.len() as f64;
    let mean = pred.grid.sum() / n;
    let var = pred.grid.iter().map(|&v| (v - mean).powi(2)).sum::<f64>() / n;
    if var == 0.0 {
        return Ok(0.0);
    }
    let sd = var.sqrt();
    let s: f64 = fixations.points.iter().map(|&(r, c)| (pred.grid[(r, c)] - mean) / sd).sum();
    Ok(s / fixations.points.len() as f64)
}

/// Histogram intersection of the two normalized maps: `sum_i min(P_i, G_i)`.
pub fn sim(pred: &SaliencyMap, gt: &SaliencyMap) -> Result<f64, MetricError> {
    check_shapes(pred, gt)?;
    let p = normalize_to_distribution(pred)?;
    let g = normalize_to_distribution(gt)?;
    Ok(p.iter().zip(g.iter()).map(|(&a, &b)| a.min(b)).sum())
}

/// Derive fixations from a continuous map: cells at or above the
/// nearest-rank `percentile` of all values, restricted to positive cells.
pub fn fixations_from_map(gt: &SaliencyMap, percentile: f64) -> Result<FixationSet, MetricError> {
    if !(0.0..=100.0).contains(&percentile) {
        return Err(MetricError::BadPercentile(percentile));
    }
    let mut vals: Vec<f64> = gt.grid.iter().copied().collect();
    vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = vals.len();
    let rank = ((percentile / 100.0 * n as f64).ceil() as usize).clamp(1, n);
    let thresh = vals[rank - 1];
    let points = gt
        .grid
        .indexed_iter()
        .filter(|&(_, &v)| v >= thresh && v > 0.0)
        .map(|((r, c), _)| (r, c))
        .collect();
    Ok(FixationSet { points })
}

/// Streaming mean that skips NaN samples but remembers how many it skipped.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct MeanAccumulator {
    sum: f64,
    count: usize,
    nan_count: usize,
}

impl MeanAccumulator {
    pub fn push(&mut self, v: f64) {
        if v.is_nan() {
            self.nan_count += 1;
        } else {
            self.sum += v;
            self.count += 1;
        }
    }

    pub fn mean(&self) -> Option<f64> {
        (self.count > 0).then(|| self.sum / self.count as f64)
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn nan_count(&self) -> usize {
        self.nan_count
    }
}
