//! Concept regions, association scores and contributions.
//!
//! For a scalar score (a concept score `S^t` or a class probability `p^c`)
//! the channel weights of layer `l` are the spatially summed gradients of the
//! score with respect to that layer's maps divided by `H_l * W_l`. The
//! region map is the ReLU of the weighted channel sum. Layers are ranked by
//! the area under the score-decrease curve obtained by masking the top-K
//! most important channels one at a time (importance = weight * pooled
//! activation), replacing each with the layer's mean pooled activation.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::learner::{concept_score_gradient, TranslatorNetwork};
use crate::model::{
    mask_session, pool_layer, softmax_gradient, ClassPrediction, Classifier, GradientSeeds,
    LayerActivations, Session,
};
use crate::vlm::{ConceptText, Embedding};
use crate::{Error, Image, Result};

/// Default number of channels masked per curve.
pub const DEFAULT_TOP_K: usize = 20;

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelWeights {
    pub layer_index: usize,
    pub weights: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConceptRegionMap {
    /// `None` for class-driven (Grad-CAM) maps.
    pub concept: Option<ConceptText>,
    pub layer_index: usize,
    /// Non-negative map at layer resolution.
    pub map: Array2<f64>,
    /// Bilinear upsampling of `map` to image resolution.
    pub upsampled: Option<Array2<f64>>,
    pub association_score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurveTarget {
    ConceptScore,
    ClassScore,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskingCurve {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub base_score: f64,
    pub target: CurveTarget,
    /// Channels in masking order.
    pub channel_order: Vec<usize>,
    pub mask_value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContributionScore {
    pub concept: ConceptText,
    pub layer_index: usize,
    pub value: f64,
}

/// What a differentiation pass is driven by.
#[derive(Debug, Clone, Copy)]
pub enum ScoreTarget<'a> {
    /// `S^t = cos(h(z), E_text(t))` with `z` built per `multi_layer`.
    Concept {
        translator: &'a TranslatorNetwork,
        text: &'a Embedding,
        multi_layer: bool,
    },
    /// `p^c`, the softmax probability of class `c`.
    Class(usize),
}

impl ScoreTarget<'_> {
    fn kind(&self) -> CurveTarget {
        match self {
            ScoreTarget::Concept { .. } => CurveTarget::ConceptScore,
            ScoreTarget::Class(_) => CurveTarget::ClassScore,
        }
    }

    /// Score value for a (possibly masked) session.
    pub fn score(&self, session: &Session) -> Result<f64> {
        match *self {
            ScoreTarget::Concept {
                translator,
                text,
                multi_layer,
            } => {
                let z = session.translator_input(multi_layer);
                crate::learner::concept_score(translator, &z, text)
            }
            ScoreTarget::Class(c) => class_probability(session.prediction(), c),
        }
    }

    /// Score and back-propagation seeds.
    fn seeds(&self, session: &Session) -> Result<(f64, GradientSeeds)> {
        match *self {
            ScoreTarget::Concept {
                translator,
                text,
                multi_layer,
            } => {
                let z = session.translator_input(multi_layer);
                let (score, dz) = concept_score_gradient(translator, &z.values, text)?;
                Ok((score, GradientSeeds::from_pooled_gradient(&z, &dz, session)?))
            }
            ScoreTarget::Class(c) => {
                let pred = session.prediction();
                let score = class_probability(pred, c)?;
                let seeds = GradientSeeds {
                    logits: Some(softmax_gradient(&pred.probabilities, c)),
                    activations: Vec::new(),
                };
                Ok((score, seeds))
            }
        }
    }
}

fn class_probability(pred: &ClassPrediction, c: usize) -> Result<f64> {
    pred.probabilities.get(c).copied().ok_or(Error::Index {
        what: "classes",
        index: c,
        len: pred.probabilities.len(),
    })
}

/// Channel weights for every captured layer from one backward pass.
pub fn all_layer_weights<M: Classifier + ?Sized>(
    model: &M,
    session: &Session,
    target: &ScoreTarget<'_>,
) -> Result<(f64, Vec<ChannelWeights>)> {
    let (score, seeds) = target.seeds(session)?;
    let grads = model.backward(session, &seeds)?;
    let weights = grads
        .into_iter()
        .map(|g| {
            let (_, h, w) = g.grad.dim();
            let gamma = (h * w) as f64;
            ChannelWeights {
                layer_index: g.layer_index,
                weights: g.grad.sum_axis(Axis(2)).sum_axis(Axis(1)) / gamma,
            }
        })
        .collect();
    Ok((score, weights))
}

/// Weights `beta_k = (1 / (H_l W_l)) * sum_ij dS / dA_k(i, j)` for one layer.
pub fn concept_weights<M: Classifier + ?Sized>(
    model: &M,
    session: &Session,
    target: &ScoreTarget<'_>,
    layer_index: usize,
) -> Result<ChannelWeights> {
    let (_, all) = all_layer_weights(model, session, target)?;
    all.into_iter()
        .find(|w| w.layer_index == layer_index)
        .ok_or_else(|| {
            Error::Gradient(format!("layer {layer_index} is not on the differentiation path"))
        })
}

/// `sum_k w_k A_k` before the ReLU.
pub fn fused_map(acts: &LayerActivations, w: &ChannelWeights) -> Result<Array2<f64>> {
    if acts.layer_index != w.layer_index || acts.channels() != w.weights.len() {
        return Err(Error::Dimension(format!(
            "weights for layer {} ({} channels) applied to layer {} ({} channels)",
            w.layer_index,
            w.weights.len(),
            acts.layer_index,
            acts.channels()
        )));
    }
    let mut out = Array2::zeros((acts.height(), acts.width()));
    for (k, ch) in acts.maps.axis_iter(Axis(0)).enumerate() {
        out.scaled_add(w.weights[k], &ch);
    }
    Ok(out)
}

/// Region map `ReLU(sum_k w_k A_k)`, upsampled to `image_size` when given.
pub fn region_map(
    acts: &LayerActivations,
    w: &ChannelWeights,
    image_size: Option<(usize, usize)>,
) -> Result<ConceptRegionMap> {
    let map = fused_map(acts, w)?.mapv(|v| v.max(0.0));
    let upsampled = image_size.map(|(h, wd)| bilinear_upsample(map.view(), h, wd));
    Ok(ConceptRegionMap {
        concept: None,
        layer_index: acts.layer_index,
        map,
        upsampled,
        association_score: 0.0,
    })
}

/// Grad-CAM on the last captured layer, driven by `p^c`.
pub fn gradcam_map<M: Classifier + ?Sized>(
    model: &M,
    session: &Session,
    class: usize,
) -> Result<ConceptRegionMap> {
    let last = session
        .activations()
        .last()
        .ok_or_else(|| Error::config("session has no captured layers"))?;
    let w = concept_weights(model, session, &ScoreTarget::Class(class), last.layer_index)?;
    let [_, h, wd] = model.input_shape();
    region_map(last, &w, Some((h, wd)))
}

/// Bilinear resize with half-pixel centers, edge-clamped.
pub fn bilinear_upsample(map: ArrayView2<'_, f64>, out_h: usize, out_w: usize) -> Array2<f64> {
    let (in_h, in_w) = map.dim();
    let coords = |out: usize, inn: usize| -> Vec<(usize, usize, f64)> {
        (0..out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * inn as f64 / out as f64 - 0.5).max(0.0);
                let i0 = (src.floor() as usize).min(inn - 1);
                let i1 = (i0 + 1).min(inn - 1);
                (i0, i1, src - i0 as f64)
            })
            .collect()
    };
    let ys = coords(out_h, in_h);
    let xs = coords(out_w, in_w);
    Array2::from_shape_fn((out_h, out_w), |(y, x)| {
        let (y0, y1, fy) = ys[y];
        let (x0, x1, fx) = xs[x];
        let top = map[[y0, x0]] * (1.0 - fx) + map[[y0, x1]] * fx;
        let bot = map[[y1, x0]] * (1.0 - fx) + map[[y1, x1]] * fx;
        top * (1.0 - fy) + bot * fy
    })
}

/// Channels ordered by descending importance `w_k * z_k`, ties by index.
pub fn importance_order(w: &ChannelWeights, acts: &LayerActivations) -> Vec<usize> {
    let z = pool_layer(acts).values;
    let importance: Vec<f64> = w.weights.iter().zip(z.iter()).map(|(a, b)| a * b).collect();
    let mut idx: Vec<usize> = (0..importance.len()).collect();
    idx.sort_by(|&a, &b| importance[b].total_cmp(&importance[a]).then(a.cmp(&b)));
    idx
}

/// Score-decrease curve for cumulatively masking `order[..k]` at
/// `layer_index`, measured on `measure`.
pub fn masking_curve_with_order<M: Classifier + ?Sized>(
    model: &M,
    session: &Session,
    measure: &ScoreTarget<'_>,
    layer_index: usize,
    order: &[usize],
    k: usize,
) -> Result<MaskingCurve> {
    let acts = session.layer(layer_index)?;
    let c = acts.channels();
    if k == 0 || k > c {
        return Err(Error::config(format!(
            "K = {k} must lie in 1..={c} for layer {layer_index}"
        )));
    }
    if order.len() < k {
        return Err(Error::config("channel order shorter than K"));
    }
    let z = pool_layer(acts).values;
    let mask_value = z.mean().expect("non-empty layer");
    let base_score = measure.score(session)?;
    let mut y = Vec::with_capacity(k + 1);
    y.push(0.0);
    for i in 1..=k {
        let masked = mask_session(model, session, layer_index, &order[..i], mask_value)?;
        y.push(base_score - measure.score(&masked)?);
    }
    Ok(MaskingCurve {
        x: (0..=k).map(|i| i as f64 / k as f64).collect(),
        y,
        base_score,
        target: measure.kind(),
        channel_order: order[..k].to_vec(),
        mask_value,
    })
}

/// Masking curve where channel importance comes from `target` itself.
pub fn masking_curve<M: Classifier + ?Sized>(
    model: &M,
    session: &Session,
    target: &ScoreTarget<'_>,
    layer_index: usize,
    k: usize,
) -> Result<MaskingCurve> {
    let w = concept_weights(model, session, target, layer_index)?;
    let order = importance_order(&w, session.layer(layer_index)?);
    masking_curve_with_order(model, session, target, layer_index, &order, k)
}

/// Trapezoid area under the curve over `x` in `[0, 1]`.
pub fn curve_auc(curve: &MaskingCurve) -> f64 {
    curve
        .x
        .windows(2)
        .zip(curve.y.windows(2))
        .map(|(x, y)| 0.5 * (x[1] - x[0]) * (y[0] + y[1]))
        .sum()
}

/// Index of the maximum association score, ties to the lowest layer.
pub fn select_layer(scores: &[(usize, f64)]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for &(layer, s) in scores {
        match best {
            Some((_, b)) if s <= b => {}
            _ => best = Some((layer, s)),
        }
    }
    best.map(|(l, _)| l)
}

fn effective_k(k: usize, channels: usize) -> usize {
    k.min(channels)
}

/// Everything computed for one concept on one image.
#[derive(Debug, Clone)]
pub struct ConceptExplanation {
    pub concept: ConceptText,
    pub score: f64,
    /// One candidate per captured layer, in layer order, each carrying its
    /// association score.
    pub candidates: Vec<ConceptRegionMap>,
    pub curves: Vec<MaskingCurve>,
    pub weights: Vec<ChannelWeights>,
    pub best_layer: usize,
}

impl ConceptExplanation {
    pub fn association_scores(&self) -> Vec<(usize, f64)> {
        self.candidates
            .iter()
            .map(|c| (c.layer_index, c.association_score))
            .collect()
    }

    pub fn candidate(&self, layer_index: usize) -> Option<&ConceptRegionMap> {
        self.candidates.iter().find(|c| c.layer_index == layer_index)
    }
}

/// Region candidates and association scores for one concept across all
/// captured layers. `k` is clamped to each layer's channel count.
pub fn explain_concept<M: Classifier + ?Sized>(
    model: &M,
    session: &Session,
    translator: &TranslatorNetwork,
    concept: &ConceptText,
    text: &Embedding,
    multi_layer: bool,
    k: usize,
) -> Result<ConceptExplanation> {
    let target = ScoreTarget::Concept {
        translator,
        text,
        multi_layer,
    };
    let (score, weights) = all_layer_weights(model, session, &target)?;
    let [_, h, w] = model.input_shape();
    let mut candidates = Vec::with_capacity(weights.len());
    let mut curves = Vec::with_capacity(weights.len());
    for cw in &weights {
        let acts = session.layer(cw.layer_index)?;
        let order = importance_order(cw, acts);
        let kk = effective_k(k, acts.channels());
        let curve = masking_curve_with_order(model, session, &target, cw.layer_index, &order, kk)?;
        let mut region = region_map(acts, cw, Some((h, w)))?;
        region.concept = Some(concept.clone());
        region.association_score = curve_auc(&curve);
        candidates.push(region);
        curves.push(curve);
    }
    let scores: Vec<(usize, f64)> = candidates
        .iter()
        .map(|c| (c.layer_index, c.association_score))
        .collect();
    let best_layer = select_layer(&scores).expect("at least one layer");
    Ok(ConceptExplanation {
        concept: concept.clone(),
        score,
        candidates,
        curves,
        weights,
        best_layer,
    })
}

/// Association score (masking AUC of `S^t`) per captured layer.
pub fn association_scores<M: Classifier + ?Sized>(
    model: &M,
    session: &Session,
    translator: &TranslatorNetwork,
    concept: &ConceptText,
    text: &Embedding,
    multi_layer: bool,
    k: usize,
) -> Result<Vec<(usize, f64)>> {
    Ok(explain_concept(model, session, translator, concept, text, multi_layer, k)?
        .association_scores())
}

/// Contribution of a concept to class `class`: channels ordered by the
/// concept's importance at `layer_index`, impact measured on `p^c`.
#[allow(clippy::too_many_arguments)]
pub fn concept_contribution<M: Classifier + ?Sized>(
    model: &M,
    session: &Session,
    translator: &TranslatorNetwork,
    concept: &ConceptText,
    text: &Embedding,
    multi_layer: bool,
    class: usize,
    layer_index: usize,
    k: usize,
) -> Result<(ContributionScore, MaskingCurve)> {
    let target = ScoreTarget::Concept {
        translator,
        text,
        multi_layer,
    };
    let w = concept_weights(model, session, &target, layer_index)?;
    contribution_from_weights(model, session, concept, &w, class, k)
}

/// [`concept_contribution`] with precomputed concept weights.
pub fn contribution_from_weights<M: Classifier + ?Sized>(
    model: &M,
    session: &Session,
    concept: &ConceptText,
    w: &ChannelWeights,
    class: usize,
    k: usize,
) -> Result<(ContributionScore, MaskingCurve)> {
    let acts = session.layer(w.layer_index)?;
    let order = importance_order(w, acts);
    let kk = effective_k(k, acts.channels());
    let curve = masking_curve_with_order(
        model,
        session,
        &ScoreTarget::Class(class),
        w.layer_index,
        &order,
        kk,
    )?;
    Ok((
        ContributionScore {
            concept: concept.clone(),
            layer_index: w.layer_index,
            value: curve_auc(&curve),
        },
        curve,
    ))
}

/// Cell boundaries for splitting `len` into `parts` near-equal pieces.
fn cell_bounds(len: usize, parts: usize) -> Vec<(usize, usize)> {
    (0..parts)
        .map(|i| (i * len / parts, (i + 1) * len / parts))
        .collect()
}

/// Outcome of masking the top patches of a region.
#[derive(Debug, Clone)]
pub struct Counterfactual {
    pub masked_image: Image,
    pub before: ClassPrediction,
    pub after: ClassPrediction,
    /// Masked cells as `(row, col)` in ranking order.
    pub cells: Vec<(usize, usize)>,
}

/// Splits the image into `patch_grid x patch_grid` cells, ranks them by mean
/// upsampled region value (ties row-major), fills the top
/// `ceil(coverage * cells)` with `fill`, and re-classifies.
pub fn counterfactual_patch_mask<M: Classifier + ?Sized>(
    model: &M,
    image: &Image,
    region: &ConceptRegionMap,
    patch_grid: usize,
    coverage: f64,
    fill: [f64; 3],
) -> Result<Counterfactual> {
    if !(0.0..=1.0).contains(&coverage) {
        return Err(Error::config(format!("coverage {coverage} outside [0, 1]")));
    }
    let (_, h, w) = image.dim();
    if patch_grid == 0 || patch_grid > h.min(w) {
        return Err(Error::config(format!("patch grid {patch_grid} does not fit {h}x{w}")));
    }
    let up = match &region.upsampled {
        Some(u) if u.dim() == (h, w) => u.clone(),
        _ => bilinear_upsample(region.map.view(), h, w),
    };
    let rows = cell_bounds(h, patch_grid);
    let cols = cell_bounds(w, patch_grid);
    let mut cells = Vec::with_capacity(patch_grid * patch_grid);
    for (r, &(y0, y1)) in rows.iter().enumerate() {
        for (c, &(x0, x1)) in cols.iter().enumerate() {
            let patch = up.slice(ndarray::s![y0..y1, x0..x1]);
            cells.push(((r, c), patch.mean().unwrap_or(0.0)));
        }
    }
    // Stable sort keeps row-major order among ties.
    cells.sort_by(|a, b| b.1.total_cmp(&a.1));
    let n_cells = cells.len();
    let take = (((coverage * n_cells as f64) - 1e-9).ceil().max(0.0) as usize).min(n_cells);
    let mut masked = image.clone();
    let chosen: Vec<(usize, usize)> = cells[..take].iter().map(|c| c.0).collect();
    for &(r, c) in &chosen {
        let (y0, y1) = rows[r];
        let (x0, x1) = cols[c];
        for (ch, &v) in fill.iter().enumerate() {
            masked
                .slice_mut(ndarray::s![ch, y0..y1, x0..x1])
                .fill(v);
        }
    }
    let before = model.forward(image)?.prediction().clone();
    let after = model.forward(&masked)?.prediction().clone();
    Ok(Counterfactual {
        masked_image: masked,
        before,
        after,
        cells: chosen,
    })
}

/// Metadata written next to a region PNG.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionSidecar {
    pub concept: Option<String>,
    pub layer_index: usize,
    pub height: usize,
    pub width: usize,
    /// Pixel value `p` maps back to `min + p / 255 * (max - min)`.
    pub min: f64,
    pub max: f64,
    pub association_score: f64,
}

/// Writes the upsampled map as an 8-bit grayscale PNG, min-max scaled.
pub fn write_region_png(region: &ConceptRegionMap, path: &Path) -> Result<RegionSidecar> {
    let map = region.upsampled.as_ref().unwrap_or(&region.map);
    let (h, w) = map.dim();
    let min = map.iter().copied().fold(f64::INFINITY, f64::min);
    let max = map.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if max > min { max - min } else { 1.0 };
    let pixels: Vec<u8> = map
        .iter()
        .map(|&v| (((v - min) / span) * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    let img = image::GrayImage::from_raw(w as u32, h as u32, pixels).expect("buffer size");
    img.save(path).map_err(|e| Error::Image {
        path: path.display().to_string(),
        source: e,
    })?;
    Ok(RegionSidecar {
        concept: region.concept.as_ref().map(|c| c.label.clone()),
        layer_index: region.layer_index,
        height: h,
        width: w,
        min,
        max,
        association_score: region.association_score,
    })
}

/// Magic bytes of the raw float container.
pub const RAW_MAGIC: &[u8; 4] = b"RMAP";

/// Writes an array as: `RMAP`, u32 LE version (1), u32 LE rank, rank x u64 LE
/// dims, then f32 LE values in C order.
pub fn write_raw_map(map: ArrayView2<'_, f64>, path: &Path) -> Result<()> {
    let mut buf = Vec::with_capacity(24 + map.len() * 4);
    buf.extend_from_slice(RAW_MAGIC);
    buf.extend_from_slice(&1u32.to_le_bytes());
    buf.extend_from_slice(&2u32.to_le_bytes());
    for d in [map.nrows(), map.ncols()] {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in map.iter() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_raw_map(path: &Path) -> Result<Array2<f32>> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    let bad = || Error::Dimension(format!("{} is not a raw map container", path.display()));
    if buf.len() < 12 || &buf[..4] != RAW_MAGIC {
        return Err(bad());
    }
    let u32_at = |o: usize| u32::from_le_bytes(buf[o..o + 4].try_into().expect("4 bytes"));
    if u32_at(4) != 1 || u32_at(8) != 2 || buf.len() < 28 {
        return Err(bad());
    }
    let u64_at = |o: usize| u64::from_le_bytes(buf[o..o + 8].try_into().expect("8 bytes")) as usize;
    let (h, w) = (u64_at(12), u64_at(20));
    let data = &buf[28..];
    if data.len() != h * w * 4 {
        return Err(bad());
    }
    let values = data
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Array2::from_shape_vec((h, w), values).map_err(|_| bad())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array3};
    use proptest::prelude::*;

    fn layer(maps: Array3<f64>) -> LayerActivations {
        LayerActivations::new(1, maps).unwrap()
    }

    fn weights(w: Vec<f64>) -> ChannelWeights {
        ChannelWeights { layer_index: 1, weights: Array1::from(w) }
    }

    #[test]
    fn region_single_channel_identity() {
        let a = layer(array![[[1.0, 2.0], [0.0, 3.0]]]);
        let r = region_map(&a, &weights(vec![1.0]), None).unwrap();
        assert_eq!(r.map, array![[1.0, 2.0], [0.0, 3.0]]);
    }

    #[test]
    fn region_negative_weight_is_zero() {
        let a = layer(array![[[1.0, 2.0], [0.5, 3.0]]]);
        let r = region_map(&a, &weights(vec![-1.0]), None).unwrap();
        assert!(r.map.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn region_two_channel_arithmetic() {
        let a = layer(array![[[3.0]], [[-1.0]]]);
        let r = region_map(&a, &weights(vec![1.0, 2.0]), None).unwrap();
        assert_eq!(r.map[[0, 0]], 1.0);
    }

    #[test]
    fn region_mismatch() {
        let a = layer(array![[[3.0]], [[-1.0]]]);
        assert!(region_map(&a, &weights(vec![1.0]), None).is_err());
    }

    #[test]
    fn curve_auc_closed_forms() {
        let flat = |d: f64, k: usize| MaskingCurve {
            x: (0..=k).map(|i| i as f64 / k as f64).collect(),
            y: std::iter::once(0.0).chain(std::iter::repeat(d).take(k)).collect(),
            base_score: 0.0,
            target: CurveTarget::ConceptScore,
            channel_order: (0..k).collect(),
            mask_value: 0.0,
        };
        let zero = flat(0.0, 20);
        assert_eq!(curve_auc(&zero), 0.0);
        assert!((curve_auc(&flat(1.0, 20)) - 0.975).abs() < 1e-12);
        assert!((curve_auc(&flat(-1.0, 20)) + 0.975).abs() < 1e-12);
        for k in 1..30 {
            let d = 0.37;
            assert!((curve_auc(&flat(d, k)) - d * (1.0 - 1.0 / (2.0 * k as f64))).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_selection() {
        assert_eq!(select_layer(&[(1, 0.1), (2, 0.9), (3, 0.3), (4, 0.2)]), Some(2));
        assert_eq!(select_layer(&[(1, 0.0), (2, 0.0), (3, 0.0)]), Some(1));
        assert_eq!(select_layer(&[]), None);
    }

    #[test]
    fn importance_ties_break_low() {
        let a = layer(Array3::from_elem((4, 2, 2), 1.0));
        let order = importance_order(&weights(vec![0.5, 2.0, 2.0, 0.5]), &a);
        assert_eq!(order, vec![1, 2, 0, 3]);
    }

    #[test]
    fn upsample_constant_and_shape() {
        let m = Array2::from_elem((4, 4), 2.5);
        let u = bilinear_upsample(m.view(), 64, 64);
        assert_eq!(u.dim(), (64, 64));
        assert!(u.iter().all(|&v| (v - 2.5).abs() < 1e-12));
        let m = array![[0.0, 1.0]];
        let u = bilinear_upsample(m.view(), 1, 4);
        assert_eq!(u, array![[0.0, 0.25, 0.75, 1.0]]);
    }

    #[test]
    fn raw_map_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.bin");
        let m = array![[0.5, 1.25, -3.0], [2.0, 0.0, 7.5]];
        write_raw_map(m.view(), &p).unwrap();
        let back = read_raw_map(&p).unwrap();
        assert_eq!(back.dim(), (2, 3));
        for (a, b) in back.iter().zip(m.iter()) {
            assert_eq!(*a as f64, *b);
        }
        std::fs::write(&p, b"nope").unwrap();
        assert!(read_raw_map(&p).is_err());
    }

    #[test]
    fn png_export_scales_min_max() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.png");
        let r = ConceptRegionMap {
            concept: None,
            layer_index: 2,
            map: array![[1.0, 3.0]],
            upsampled: None,
            association_score: 0.4,
        };
        let side = write_region_png(&r, &p).unwrap();
        assert_eq!((side.min, side.max), (1.0, 3.0));
        let img = image::open(&p).unwrap().to_luma8();
        assert_eq!(img.as_raw(), &vec![0u8, 255u8]);
    }

    proptest! {
        #[test]
        fn fusion_is_linear_before_relu(
            vals in proptest::collection::vec(-3.0f64..3.0, 3 * 4 * 4),
            w1 in proptest::collection::vec(-2.0f64..2.0, 3),
            w2 in proptest::collection::vec(-2.0f64..2.0, 3),
        ) {
            let a = layer(Array3::from_shape_vec((3, 4, 4), vals).unwrap());
            let sum: Vec<f64> = w1.iter().zip(&w2).map(|(x, y)| x + y).collect();
            let f1 = fused_map(&a, &weights(w1)).unwrap();
            let f2 = fused_map(&a, &weights(w2)).unwrap();
            let fs = fused_map(&a, &weights(sum.clone())).unwrap();
            for ((x, y), s) in f1.iter().zip(f2.iter()).zip(fs.iter()) {
                prop_assert!((x + y - s).abs() < 1e-12);
            }
            let r = region_map(&a, &weights(sum), Some((8, 8))).unwrap();
            prop_assert!(r.map.iter().all(|&v| v >= 0.0));
            prop_assert!(r.upsampled.unwrap().iter().all(|&v| v >= 0.0));
        }
    }
}
