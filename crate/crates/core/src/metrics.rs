//! Region-quality metrics.
//!
//! A region map is thresholded at its top-n% pixels for a grid of `n`; the
//! IoU with the ground-truth mask traced over the threshold fraction gives a
//! curve whose area is normalized between a random-region reference
//! (`auc_low`) and an ideal-region reference (`auc_high`). That normalized
//! area is NRA; a sample is a hit when NRA > 0.5.
//!
//! Curves are integrated with the trapezoid rule over the threshold fraction
//! `x = n / 100`, anchored at the origin: selecting no pixels gives IoU 0.

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::explain::{bilinear_upsample, ConceptRegionMap};
use crate::{Error, Result};

/// Default threshold grid: 1, 2, ..., 100 percent.
pub fn default_grid() -> Vec<f64> {
    (1..=100).map(f64::from).collect()
}

pub fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::config("threshold grid is empty"));
    }
    if grid.iter().any(|&n| !(n > 0.0 && n <= 100.0)) {
        return Err(Error::config("thresholds must lie in (0, 100]"));
    }
    if grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::config("thresholds must be strictly increasing"));
    }
    Ok(())
}

/// Number of pixels in the top-`n`% selection of `total` pixels.
fn selection_size(n: f64, total: usize) -> usize {
    let x = n * total as f64 / 100.0;
    // Guard against representation error such as 7 * 100 / 100 = 7.000000000000001.
    let k = (x - 1e-9).ceil().max(0.0) as usize;
    k.min(total)
}

/// Pixel indices sorted by descending value, ties in row-major order.
fn ranking(region: ArrayView2<'_, f64>) -> Vec<usize> {
    let flat: Vec<f64> = region.iter().copied().collect();
    let mut idx: Vec<usize> = (0..flat.len()).collect();
    idx.sort_by(|&a, &b| flat[b].total_cmp(&flat[a]).then(a.cmp(&b)));
    idx
}

fn check_pair(region: ArrayView2<'_, f64>, mask: ArrayView2<'_, bool>) -> Result<usize> {
    if region.dim() != mask.dim() {
        return Err(Error::Dimension(format!(
            "region {:?} vs mask {:?}",
            region.dim(),
            mask.dim()
        )));
    }
    let positives = mask.iter().filter(|&&m| m).count();
    if positives == 0 {
        return Err(Error::UndefinedMetric("mask has no positive pixels".into()));
    }
    Ok(positives)
}

/// IoU between the top-`n`% pixels of `region` and `mask`.
pub fn iou_at_threshold(
    region: ArrayView2<'_, f64>,
    mask: ArrayView2<'_, bool>,
    n: f64,
) -> Result<f64> {
    let curve = threshold_curve(region, mask, &[n])?;
    Ok(curve.ious[0])
}

/// IoU as a function of the top-n% threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdCurve {
    pub thresholds: Vec<f64>,
    pub ious: Vec<f64>,
    pub auc: f64,
}

/// Trapezoid area of `ys` over `xs` with the implicit origin `(0, 0)`.
pub fn curve_area(xs: &[f64], ys: &[f64]) -> f64 {
    let mut area = 0.0;
    let (mut px, mut py) = (0.0, 0.0);
    for (&x, &y) in xs.iter().zip(ys) {
        area += 0.5 * (x - px) * (y + py);
        px = x;
        py = y;
    }
    area
}

pub fn threshold_curve(
    region: ArrayView2<'_, f64>,
    mask: ArrayView2<'_, bool>,
    grid: &[f64],
) -> Result<ThresholdCurve> {
    check_grid(grid)?;
    let positives = check_pair(region, mask)?;
    let order = ranking(region);
    let mask_flat: Vec<bool> = mask.iter().copied().collect();
    let total = order.len();
    let mut ious = Vec::with_capacity(grid.len());
    let mut taken = 0usize;
    let mut hits = 0usize;
    for &n in grid {
        let k = selection_size(n, total);
        while taken < k {
            hits += usize::from(mask_flat[order[taken]]);
            taken += 1;
        }
        let union = k + positives - hits;
        ious.push(hits as f64 / union as f64);
    }
    let xs: Vec<f64> = grid.iter().map(|n| n / 100.0).collect();
    let auc = curve_area(&xs, &ious);
    Ok(ThresholdCurve {
        thresholds: grid.to_vec(),
        ious,
        auc,
    })
}

/// Expected-value IoU of a uniformly random selection of fraction `a`
/// against a mask of fraction `m`.
pub fn random_iou(a: f64, m: f64) -> f64 {
    if a <= 0.0 {
        return 0.0;
    }
    a * m / (a + m - a * m)
}

/// IoU of the ideal selection (mask pixels first) at fraction `a`.
pub fn ideal_iou(a: f64, m: f64) -> f64 {
    if a <= m {
        a / m
    } else {
        m / a
    }
}

/// `(auc_high, auc_low)` for mask fraction `m`.
///
/// `auc_high = m/2 - m ln m` is the exact integral of the ideal curve;
/// `auc_low` integrates [`random_iou`] on `grid` with the same rule as
/// [`threshold_curve`].
pub fn reference_aucs(m: f64, grid: &[f64]) -> Result<(f64, f64)> {
    if !(m > 0.0 && m <= 1.0) {
        return Err(Error::UndefinedMetric(format!("mask fraction {m} outside (0, 1]")));
    }
    check_grid(grid)?;
    let high = m / 2.0 - m * m.ln();
    let xs: Vec<f64> = grid.iter().map(|n| n / 100.0).collect();
    let ys: Vec<f64> = xs.iter().map(|&a| random_iou(a, m)).collect();
    Ok((high, curve_area(&xs, &ys)))
}

/// Normalized Region Accuracy; not clamped.
pub fn nra(auc: f64, auc_high: f64, auc_low: f64) -> Result<f64> {
    if !(auc_high > auc_low) {
        return Err(Error::UndefinedMetric(format!(
            "auc_high {auc_high} does not exceed auc_low {auc_low}"
        )));
    }
    Ok((auc - auc_low) / (auc_high - auc_low))
}

/// Energy-based pointing game: share of region mass inside the mask.
pub fn epg(region: ArrayView2<'_, f64>, mask: ArrayView2<'_, bool>) -> Result<f64> {
    check_pair(region, mask)?;
    let mut inside = 0.0;
    let mut total = 0.0;
    for (&r, &m) in region.iter().zip(mask.iter()) {
        total += r;
        if m {
            inside += r;
        }
    }
    if !(total > 0.0) {
        return Err(Error::UndefinedMetric("region map has no positive mass".into()));
    }
    Ok(inside / total)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionEvalResult {
    pub epg: f64,
    pub auc: f64,
    pub auc_high: f64,
    pub auc_low: f64,
    pub nra: f64,
    pub hit: bool,
}

impl RegionEvalResult {
    /// A sample whose region is degenerate (all zero), recorded as a miss.
    pub fn failure(auc_high: f64, auc_low: f64) -> Self {
        Self {
            epg: 0.0,
            auc: auc_low,
            auc_high,
            auc_low,
            nra: 0.0,
            hit: false,
        }
    }
}

/// All metrics for one region map against one mask (same resolution).
pub fn evaluate_region(
    region: ArrayView2<'_, f64>,
    mask: ArrayView2<'_, bool>,
    grid: &[f64],
) -> Result<RegionEvalResult> {
    let positives = check_pair(region, mask)?;
    let m = positives as f64 / mask.len() as f64;
    let (auc_high, auc_low) = reference_aucs(m, grid)?;
    if !region.iter().any(|&v| v > 0.0) {
        return Ok(RegionEvalResult::failure(auc_high, auc_low));
    }
    let curve = threshold_curve(region, mask, grid)?;
    let nra = nra(curve.auc, auc_high, auc_low)?;
    Ok(RegionEvalResult {
        epg: epg(region, mask)?,
        auc: curve.auc,
        auc_high,
        auc_low,
        nra,
        hit: nra > 0.5,
    })
}

/// Fraction of samples with NRA strictly above 0.5.
pub fn hit_rate(results: &[RegionEvalResult]) -> Result<f64> {
    if results.is_empty() {
        return Err(Error::UndefinedMetric("hit rate of zero samples".into()));
    }
    Ok(results.iter().filter(|r| r.nra > 0.5).count() as f64 / results.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    /// Among the `k` highest association scores, keep the best NRA.
    BestNraOfTopK,
    /// Evaluate only the highest association score.
    Top1ByAssociation,
}

impl std::str::FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "best_nra_of_top_k" => Ok(EvalMode::BestNraOfTopK),
            "top1_by_association" => Ok(EvalMode::Top1ByAssociation),
            other => Err(Error::config(format!("unknown evaluation mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for EvalMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EvalMode::BestNraOfTopK => "best_nra_of_top_k",
            EvalMode::Top1ByAssociation => "top1_by_association",
        })
    }
}

/// Upsampled candidate map at the mask's resolution.
fn candidate_at(c: &ConceptRegionMap, shape: (usize, usize)) -> Array2<f64> {
    match &c.upsampled {
        Some(u) if u.dim() == shape => u.clone(),
        _ => bilinear_upsample(c.map.view(), shape.0, shape.1),
    }
}

/// Indices of candidates by descending association score, ties by position.
pub fn association_order(candidates: &[ConceptRegionMap]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..candidates.len()).collect();
    idx.sort_by(|&a, &b| {
        candidates[b]
            .association_score
            .total_cmp(&candidates[a].association_score)
            .then(a.cmp(&b))
    });
    idx
}

/// Evaluates region candidates (one per layer) under `mode`. Returns the
/// result and the index of the candidate it came from.
pub fn evaluate_candidates(
    candidates: &[ConceptRegionMap],
    mask: ArrayView2<'_, bool>,
    mode: EvalMode,
    k: usize,
    grid: &[f64],
) -> Result<(RegionEvalResult, usize)> {
    if k < 1 {
        return Err(Error::config("k must be at least 1"));
    }
    if candidates.is_empty() {
        return Err(Error::config("no region candidates"));
    }
    let order = association_order(candidates);
    let take = match mode {
        EvalMode::BestNraOfTopK => k.min(order.len()),
        EvalMode::Top1ByAssociation => 1,
    };
    let mut best: Option<(RegionEvalResult, usize)> = None;
    for &i in &order[..take] {
        let region = candidate_at(&candidates[i], mask.dim());
        let r = evaluate_region(region.view(), mask, grid)?;
        if best.as_ref().is_none_or(|(b, _)| r.nra > b.nra) {
            best = Some((r, i));
        }
    }
    Ok(best.expect("at least one candidate evaluated"))
}

/// A seed-deterministic uniform random region map.
pub fn random_region(h: usize, w: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((h, w), |_| rng.random::<f64>())
}
