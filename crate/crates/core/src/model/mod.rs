//! Classifier adapter.
//!
//! Any differentiable classifier is exposed through [`Classifier`]: a forward
//! pass returns a [`Session`] holding the captured per-layer activation maps,
//! the class prediction, and whatever backbone-private state the backward
//! pass needs. Sessions can be resumed from a captured layer with edited
//! activations, which is how channel masking recomputes everything
//! downstream while leaving upstream layers untouched.

mod toy_cnn;

use std::any::Any;
use std::collections::BTreeSet;

use ndarray::{Array1, Array2, Array3, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::{Error, Image, Result};

pub use toy_cnn::{
    accuracy, train_classifier, Activation, ClassifierTrainConfig, ClassifierTrainReport, ToyCnn,
    ToyCnnSpec,
};

/// Activation maps of one captured layer, shaped `(channels, height, width)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerActivations {
    pub layer_index: usize,
    pub maps: Array3<f64>,
}

impl LayerActivations {
    pub fn new(layer_index: usize, maps: Array3<f64>) -> Result<Self> {
        let (c, h, w) = maps.dim();
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::Dimension(format!(
                "layer {layer_index} activations must be non-empty, got ({c}, {h}, {w})"
            )));
        }
        if maps.iter().any(|v| !v.is_finite()) {
            return Err(Error::Dimension(format!(
                "layer {layer_index} activations contain non-finite values"
            )));
        }
        Ok(Self { layer_index, maps })
    }

    pub fn channels(&self) -> usize {
        self.maps.dim().0
    }

    pub fn height(&self) -> usize {
        self.maps.dim().1
    }

    pub fn width(&self) -> usize {
        self.maps.dim().2
    }

    /// Number of spatial positions, the global-average-pool denominator.
    pub fn spatial_size(&self) -> usize {
        self.height() * self.width()
    }
}

/// Global-average-pooled activations of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledEmbedding {
    pub layer_index: usize,
    pub values: Array1<f64>,
}

/// Where one layer's pooled vector sits inside a [`ConcatEmbedding`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSlice {
    pub layer_index: usize,
    pub start: usize,
    pub len: usize,
}

/// Concatenation of pooled embeddings across layers, in layer order.
#[derive(Debug, Clone, PartialEq)]
pub struct ConcatEmbedding {
    pub values: Array1<f64>,
    pub layer_offsets: Vec<LayerSlice>,
}

impl ConcatEmbedding {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn slice_of(&self, layer_index: usize) -> Option<LayerSlice> {
        self.layer_offsets
            .iter()
            .copied()
            .find(|s| s.layer_index == layer_index)
    }
}

/// Logits, softmax probabilities and the arg-max class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassPrediction {
    pub logits: Vec<f64>,
    pub probabilities: Vec<f64>,
    pub predicted_class: usize,
}

impl ClassPrediction {
    pub fn from_logits(logits: Vec<f64>) -> Self {
        let probabilities = softmax(&logits);
        let predicted_class = argmax(&probabilities);
        Self {
            logits,
            probabilities,
            predicted_class,
        }
    }
}

pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// First index of the maximum; NaNs never win.
pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Gradient of `probabilities[class]` with respect to the logits.
pub fn softmax_gradient(probabilities: &[f64], class: usize) -> Array1<f64> {
    let pc = probabilities[class];
    Array1::from_iter(probabilities.iter().enumerate().map(|(j, &pj)| {
        if j == class {
            pc * (1.0 - pj)
        } else {
            -pc * pj
        }
    }))
}

/// One forward pass worth of state: captured activations, prediction, and
/// backbone-private caches for the backward pass.
///
/// A session is owned by a single explanation job. Resumed sessions (after a
/// channel edit) keep the edited layer and everything upstream.
pub struct Session {
    activations: Vec<LayerActivations>,
    prediction: ClassPrediction,
    resumed_from: Option<usize>,
    state: Box<dyn Any + Send + Sync>,
}

impl std::fmt::Debug for Session {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Session")
            .field("layers", &self.layer_indices())
            .field("prediction", &self.prediction)
            .field("resumed_from", &self.resumed_from)
            .finish()
    }
}

impl Session {
    pub fn new(
        activations: Vec<LayerActivations>,
        prediction: ClassPrediction,
        resumed_from: Option<usize>,
        state: Box<dyn Any + Send + Sync>,
    ) -> Self {
        Self {
            activations,
            prediction,
            resumed_from,
            state,
        }
    }

    pub fn activations(&self) -> &[LayerActivations] {
        &self.activations
    }

    pub fn prediction(&self) -> &ClassPrediction {
        &self.prediction
    }

    pub fn resumed_from(&self) -> Option<usize> {
        self.resumed_from
    }

    pub fn state<T: 'static>(&self) -> Option<&T> {
        self.state.downcast_ref()
    }

    pub fn layer_indices(&self) -> Vec<usize> {
        self.activations.iter().map(|a| a.layer_index).collect()
    }

    pub fn layer(&self, layer_index: usize) -> Result<&LayerActivations> {
        self.activations
            .iter()
            .find(|a| a.layer_index == layer_index)
            .ok_or_else(|| Error::config(format!("layer {layer_index} was not captured")))
    }

    pub fn pooled(&self) -> Vec<PooledEmbedding> {
        self.activations.iter().map(pool_layer).collect()
    }

    /// `z_cat` over every captured layer.
    pub fn concat(&self) -> ConcatEmbedding {
        concat_layers(&self.pooled()).expect("captured layers are unique and ordered")
    }

    /// The pooled embedding of the last captured layer (`z^L`).
    pub fn last_pooled(&self) -> PooledEmbedding {
        pool_layer(self.activations.last().expect("sessions hold at least one layer"))
    }

    /// The translator input: `z_cat` when `multi_layer`, otherwise `z^L`
    /// wrapped as a single-layer concatenation.
    pub fn translator_input(&self, multi_layer: bool) -> ConcatEmbedding {
        if multi_layer {
            self.concat()
        } else {
            concat_layers(&[self.last_pooled()]).expect("single layer")
        }
    }
}

/// Per-layer gradient injections for [`Classifier::backward`].
#[derive(Debug, Clone, Default)]
pub struct GradientSeeds {
    /// Gradient of the scalar with respect to the logits.
    pub logits: Option<Array1<f64>>,
    /// Direct gradients with respect to captured activation maps.
    pub activations: Vec<(usize, Array3<f64>)>,
}

impl GradientSeeds {
    /// Seeds from a gradient with respect to pooled embeddings laid out as
    /// `z`: each pooled component spreads uniformly over its channel map.
    pub fn from_pooled_gradient(
        z: &ConcatEmbedding,
        grad: &Array1<f64>,
        session: &Session,
    ) -> Result<Self> {
        if grad.len() != z.len() {
            return Err(Error::Dimension(format!(
                "pooled gradient has length {}, embedding has {}",
                grad.len(),
                z.len()
            )));
        }
        let mut activations = Vec::with_capacity(z.layer_offsets.len());
        for slice in &z.layer_offsets {
            let acts = session.layer(slice.layer_index)?;
            let (c, h, w) = acts.maps.dim();
            if c != slice.len {
                return Err(Error::Dimension(format!(
                    "layer {} has {c} channels, embedding slice has {}",
                    slice.layer_index, slice.len
                )));
            }
            let gamma = (h * w) as f64;
            let mut seed = Array3::zeros((c, h, w));
            for (k, mut ch) in seed.axis_iter_mut(Axis(0)).enumerate() {
                ch.fill(grad[slice.start + k] / gamma);
            }
            activations.push((slice.layer_index, seed));
        }
        Ok(Self {
            logits: None,
            activations,
        })
    }
}

/// Gradient of a scalar with respect to one captured layer's maps.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGradient {
    pub layer_index: usize,
    pub grad: Array3<f64>,
}

/// A differentiable image classifier with declared capture points.
pub trait Classifier: Send + Sync {
    fn name(&self) -> &str;

    /// Expected input shape `(3, H, W)`.
    fn input_shape(&self) -> [usize; 3];

    fn num_classes(&self) -> usize;

    /// Ordered, unique layer indices (starting at 1) whose outputs are captured.
    fn capture_points(&self) -> Vec<usize>;

    fn forward(&self, image: &Image) -> Result<Session>;

    /// Replaces the activations of `replaced.layer_index` and recomputes every
    /// downstream layer and the prediction.
    fn resume(&self, session: &Session, replaced: LayerActivations) -> Result<Session>;

    /// Back-propagates the seeded scalar and returns its total gradient with
    /// respect to every captured layer, in capture order.
    fn backward(&self, session: &Session, seeds: &GradientSeeds) -> Result<Vec<LayerGradient>>;
}

pub(crate) fn check_image(model: &dyn Classifier, image: &Image) -> Result<()> {
    let expected = model.input_shape();
    let (c, h, w) = image.dim();
    if [c, h, w] != expected {
        return Err(Error::InputShape {
            expected: format!("{expected:?}"),
            got: format!("[{c}, {h}, {w}]"),
        });
    }
    Ok(())
}

/// Runs the model and returns the captured activations with the prediction.
pub fn forward_with_activations<M: Classifier + ?Sized>(
    model: &M,
    image: &Image,
) -> Result<(Vec<LayerActivations>, ClassPrediction)> {
    let session = model.forward(image)?;
    Ok((session.activations, session.prediction))
}

/// Global average pooling over the spatial dimensions.
pub fn pool_layer(acts: &LayerActivations) -> PooledEmbedding {
    let (c, h, w) = acts.maps.dim();
    let n = (h * w) as f64;
    let values = Array1::from_iter((0..c).map(|k| {
        let ch = acts.maps.index_axis(Axis(0), k);
        ch.iter().sum::<f64>() / n
    }));
    PooledEmbedding {
        layer_index: acts.layer_index,
        values,
    }
}

/// Concatenates pooled embeddings in order, recording each layer's slice.
pub fn concat_layers(pooled: &[PooledEmbedding]) -> Result<ConcatEmbedding> {
    if pooled.is_empty() {
        return Err(Error::config("cannot concatenate zero layers"));
    }
    let mut seen = BTreeSet::new();
    for p in pooled {
        if !seen.insert(p.layer_index) {
            return Err(Error::config(format!(
                "duplicate layer index {}",
                p.layer_index
            )));
        }
    }
    if pooled
        .windows(2)
        .any(|w| w[0].layer_index >= w[1].layer_index)
    {
        return Err(Error::config("pooled embeddings must be ordered by layer index"));
    }
    let total: usize = pooled.iter().map(|p| p.values.len()).sum();
    let mut values = Vec::with_capacity(total);
    let mut layer_offsets = Vec::with_capacity(pooled.len());
    for p in pooled {
        layer_offsets.push(LayerSlice {
            layer_index: p.layer_index,
            start: values.len(),
            len: p.values.len(),
        });
        values.extend(p.values.iter().copied());
    }
    Ok(ConcatEmbedding {
        values: Array1::from(values),
        layer_offsets,
    })
}

/// Reshapes a transformer token sequence `(N, D)` into maps `(D, S, S)`.
///
/// The class token, when present, is the first token and is dropped. Token
/// `p` of the remaining sequence lands at cell `(p / S, p % S)`.
pub fn tokens_to_grid(
    tokens: ArrayView2<'_, f64>,
    has_class_token: bool,
    layer_index: usize,
) -> Result<LayerActivations> {
    let (n, d) = tokens.dim();
    let skip = usize::from(has_class_token);
    if n <= skip {
        return Err(Error::Reshape { tokens: n });
    }
    let count = n - skip;
    let side = (count as f64).sqrt().round() as usize;
    if side * side != count {
        return Err(Error::Reshape { tokens: count });
    }
    let mut maps = Array3::zeros((d, side, side));
    for p in 0..count {
        let row = tokens.row(p + skip);
        let (i, j) = (p / side, p % side);
        for c in 0..d {
            maps[[c, i, j]] = row[c];
        }
    }
    LayerActivations::new(layer_index, maps)
}

/// Inverse of [`tokens_to_grid`] without the class token: row-major flatten
/// of the spatial grid into `(S*S, D)`.
pub fn grid_to_tokens(acts: &LayerActivations) -> Array2<f64> {
    let (d, h, w) = acts.maps.dim();
    let mut out = Array2::zeros((h * w, d));
    for i in 0..h {
        for j in 0..w {
            for c in 0..d {
                out[[i * w + j, c]] = acts.maps[[c, i, j]];
            }
        }
    }
    out
}

/// Replaces every spatial entry of the listed channels at `layer_index` with
/// `mask_value` and recomputes downstream from the given session.
pub fn mask_session<M: Classifier + ?Sized>(
    model: &M,
    session: &Session,
    layer_index: usize,
    channels: &[usize],
    mask_value: f64,
) -> Result<Session> {
    if !mask_value.is_finite() {
        return Err(Error::config("mask value must be finite"));
    }
    let acts = session.layer(layer_index)?;
    let c = acts.channels();
    if let Some(&bad) = channels.iter().find(|&&k| k >= c) {
        return Err(Error::Index {
            what: "layer channels",
            index: bad,
            len: c,
        });
    }
    let mut maps = acts.maps.clone();
    for &k in channels {
        maps.index_axis_mut(Axis(0), k).fill(mask_value);
    }
    model.resume(session, LayerActivations { layer_index, maps })
}

/// Forward pass, channel mask at `layer_index`, downstream recompute.
pub fn mask_channels_and_recompute<M: Classifier + ?Sized>(
    model: &M,
    image: &Image,
    layer_index: usize,
    channels: &[usize],
    mask_value: f64,
) -> Result<(ClassPrediction, ConcatEmbedding)> {
    let base = model.forward(image)?;
    let masked = mask_session(model, &base, layer_index, channels, mask_value)?;
    let z = masked.concat();
    Ok((masked.prediction, z))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array};
    use proptest::prelude::*;

    fn acts(layer: usize, maps: Array3<f64>) -> LayerActivations {
        LayerActivations::new(layer, maps).unwrap()
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let p = ClassPrediction::from_logits(vec![0.0, 0.0]);
        assert_eq!(p.probabilities, vec![0.5, 0.5]);
        assert_eq!(p.predicted_class, 0);
    }

    #[test]
    fn argmax_ties_break_low() {
        let p = ClassPrediction::from_logits(vec![1.0, 3.0, 3.0]);
        assert_eq!(p.predicted_class, 1);
        assert!((p.probabilities.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pool_constant_and_mean() {
        let maps = array![[[2.0, 2.0], [2.0, 2.0]], [[1.0, 3.0], [5.0, 7.0]], [[0.0, 0.0], [0.0, 0.0]]];
        let p = pool_layer(&acts(1, maps));
        assert_eq!(p.values.len(), 3);
        assert_eq!(p.values[0], 2.0);
        assert_eq!(p.values[1], 4.0);
    }

    #[test]
    fn concat_records_offsets() {
        let a = PooledEmbedding { layer_index: 1, values: array![1.0, 2.0] };
        let b = PooledEmbedding { layer_index: 2, values: array![3.0, 4.0, 5.0] };
        let z = concat_layers(&[a.clone(), b]).unwrap();
        assert_eq!(z.values, array![1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!(
            z.layer_offsets,
            vec![
                LayerSlice { layer_index: 1, start: 0, len: 2 },
                LayerSlice { layer_index: 2, start: 2, len: 3 }
            ]
        );
        let single = concat_layers(&[a.clone()]).unwrap();
        assert_eq!(single.values, a.values);
    }

    #[test]
    fn concat_resnet_style_widths() {
        let pooled: Vec<_> = [256, 512, 1024, 2048]
            .iter()
            .enumerate()
            .map(|(i, &n)| PooledEmbedding { layer_index: i + 1, values: Array1::zeros(n) })
            .collect();
        assert_eq!(concat_layers(&pooled).unwrap().len(), 3840);
    }

    #[test]
    fn concat_rejects_duplicates() {
        let a = PooledEmbedding { layer_index: 1, values: array![1.0] };
        assert!(matches!(concat_layers(&[a.clone(), a]), Err(Error::Config(_))));
        assert!(concat_layers(&[]).is_err());
    }

    #[test]
    fn tokens_vit_shape() {
        let tokens = Array2::<f64>::zeros((197, 768));
        let g = tokens_to_grid(tokens.view(), true, 12).unwrap();
        assert_eq!(g.maps.dim(), (768, 14, 14));
    }

    #[test]
    fn tokens_non_square_rejected() {
        let tokens = Array2::<f64>::zeros((17, 4));
        assert!(matches!(tokens_to_grid(tokens.view(), false, 1), Err(Error::Reshape { .. })));
        // 17 with the class token dropped leaves 16 = 4x4.
        assert!(tokens_to_grid(tokens.view(), true, 1).is_ok());
    }

    #[test]
    fn tokens_row_major_placement() {
        let tokens = array![[0.0, 10.0], [1.0, 11.0], [2.0, 12.0], [3.0, 13.0]];
        let g = tokens_to_grid(tokens.view(), false, 1).unwrap();
        for c in 0..2 {
            assert_eq!(g.maps[[c, 0, 0]], tokens[[0, c]]);
            assert_eq!(g.maps[[c, 0, 1]], tokens[[1, c]]);
            assert_eq!(g.maps[[c, 1, 0]], tokens[[2, c]]);
            assert_eq!(g.maps[[c, 1, 1]], tokens[[3, c]]);
        }
    }

    #[test]
    fn invalid_activations_rejected() {
        assert!(LayerActivations::new(1, Array3::zeros((0, 2, 2))).is_err());
        let mut m = Array3::zeros((1, 2, 2));
        m[[0, 0, 0]] = f64::NAN;
        assert!(LayerActivations::new(1, m).is_err());
    }

    #[test]
    fn softmax_gradient_matches_finite_differences() {
        let logits = vec![0.3, -1.2, 2.0];
        let p = softmax(&logits);
        for class in 0..3 {
            let g = softmax_gradient(&p, class);
            for j in 0..3 {
                let h = 1e-6;
                let mut up = logits.clone();
                up[j] += h;
                let mut dn = logits.clone();
                dn[j] -= h;
                let fd = (softmax(&up)[class] - softmax(&dn)[class]) / (2.0 * h);
                assert!((fd - g[j]).abs() < 1e-8);
            }
        }
    }

    proptest! {
        #[test]
        fn tokens_round_trip(side in 1usize..6, d in 1usize..5, seed in 0u64..1000) {
            let n = side * side;
            let tokens = Array::from_shape_fn((n, d), |(p, c)| ((p * 31 + c * 7) as f64 + seed as f64).sin());
            let g = tokens_to_grid(tokens.view(), false, 1).unwrap();
            prop_assert_eq!(grid_to_tokens(&g), tokens);
        }
    }
}
