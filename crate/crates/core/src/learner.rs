//! Translator learning.
//!
//! The translator is an MLP (tanh hidden layers, linear output) from pooled
//! classifier features into the VLM embedding space. It is trained to mimic
//! the VLM's raw image embedding (mean squared error) with an optional
//! similarity term that matches per-concept cosine scores.

use std::path::Path;

use ndarray::Array1;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::model::{Classifier, ConcatEmbedding, LayerSlice, PooledEmbedding};
use crate::vlm::{
    cosine, cosine_gradient, embed, ConceptText, EmbedInput, Embedding, Modality,
    VisionLanguageModel,
};
use crate::{par, Error, Image, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum HiddenActivation {
    #[default]
    Tanh,
    Identity,
}

impl HiddenActivation {
    fn apply(self, u: f64) -> f64 {
        match self {
            HiddenActivation::Tanh => u.tanh(),
            HiddenActivation::Identity => u,
        }
    }

    /// Derivative expressed through the activation output.
    fn derivative_from_output(self, a: f64) -> f64 {
        match self {
            HiddenActivation::Tanh => 1.0 - a * a,
            HiddenActivation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub in_dim: usize,
    pub out_dim: usize,
    /// `(out, in)` row-major.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl DenseLayer {
    fn forward(&self, x: &[f64]) -> Vec<f64> {
        (0..self.out_dim)
            .map(|o| {
                let row = &self.weight[o * self.in_dim..(o + 1) * self.in_dim];
                self.bias[o] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
            })
            .collect()
    }
}

/// The learned map from pooled classifier features to VLM space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranslatorNetwork {
    layers: Vec<DenseLayer>,
    hidden_activation: HiddenActivation,
}

/// Parameter gradients laid out like [`TranslatorNetwork`] layers.
#[derive(Debug, Clone, PartialEq)]
pub struct TranslatorGrads {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl TranslatorGrads {
    fn zeros_like(h: &TranslatorNetwork) -> Self {
        Self {
            weights: h.layers.iter().map(|l| vec![0.0; l.weight.len()]).collect(),
            biases: h.layers.iter().map(|l| vec![0.0; l.bias.len()]).collect(),
        }
    }

    fn add_assign(&mut self, other: &TranslatorGrads) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }
}

struct ForwardCache {
    /// Input to each layer; `inputs[0]` is the translator input.
    inputs: Vec<Vec<f64>>,
    output: Vec<f64>,
}

/// Anything the translator can consume.
pub trait TranslatorInput {
    fn feature_values(&self) -> &Array1<f64>;
}

impl TranslatorInput for ConcatEmbedding {
    fn feature_values(&self) -> &Array1<f64> {
        &self.values
    }
}

impl TranslatorInput for PooledEmbedding {
    fn feature_values(&self) -> &Array1<f64> {
        &self.values
    }
}

impl TranslatorInput for Array1<f64> {
    fn feature_values(&self) -> &Array1<f64> {
        self
    }
}

impl TranslatorNetwork {
    /// Random initialization (Glorot uniform, zero bias) for the chain
    /// `dims[0] -> dims[1] -> ... -> dims[n]`.
    pub fn new(dims: &[usize], hidden_activation: HiddenActivation, seed: u64) -> Result<Self> {
        if dims.len() < 2 || dims.iter().any(|&d| d == 0) {
            return Err(Error::config(format!("invalid translator dims {dims:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = dims
            .windows(2)
            .map(|w| {
                let (i, o) = (w[0], w[1]);
                let bound = (6.0 / (i + o) as f64).sqrt();
                DenseLayer {
                    in_dim: i,
                    out_dim: o,
                    weight: (0..i * o).map(|_| rng.random_range(-bound..bound)).collect(),
                    bias: vec![0.0; o],
                }
            })
            .collect();
        Ok(Self {
            layers,
            hidden_activation,
        })
    }

    /// Builds a network from explicit layers; dims must chain.
    pub fn from_layers(layers: Vec<DenseLayer>, hidden_activation: HiddenActivation) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::config("translator needs at least one layer"));
        }
        for l in &layers {
            if l.weight.len() != l.in_dim * l.out_dim || l.bias.len() != l.out_dim {
                return Err(Error::Dimension("dense layer parameter shape".into()));
            }
            if l.weight.iter().chain(&l.bias).any(|v| !v.is_finite()) {
                return Err(Error::config("translator parameters must be finite"));
            }
        }
        if layers.windows(2).any(|w| w[0].out_dim != w[1].in_dim) {
            return Err(Error::Dimension("translator layer dims do not chain".into()));
        }
        Ok(Self {
            layers,
            hidden_activation,
        })
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        self.layers.iter().map(|l| (l.in_dim, l.out_dim)).collect()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").out_dim
    }

    pub fn hidden_activation(&self) -> HiddenActivation {
        self.hidden_activation
    }

    fn check_input(&self, x: &Array1<f64>) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::Dimension(format!(
                "translator expects {} inputs, got {}",
                self.input_dim(),
                x.len()
            )));
        }
        Ok(())
    }

    fn forward_cached(&self, x: &[f64]) -> ForwardCache {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut cur = x.to_vec();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut out = layer.forward(&cur);
            if i < last {
                out.iter_mut().for_each(|v| *v = self.hidden_activation.apply(*v));
            }
            inputs.push(cur);
            cur = out;
        }
        ForwardCache {
            inputs,
            output: cur,
        }
    }

    /// Back-propagates `d_out` through the cached pass. Returns the input
    /// gradient and accumulates parameter gradients when requested.
    fn backward_cached(
        &self,
        cache: &ForwardCache,
        d_out: &[f64],
        mut grads: Option<&mut TranslatorGrads>,
    ) -> Vec<f64> {
        let mut delta = d_out.to_vec();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let input = &cache.inputs[i];
            if let Some(g) = grads.as_deref_mut() {
                for o in 0..layer.out_dim {
                    let row = &mut g.weights[i][o * layer.in_dim..(o + 1) * layer.in_dim];
                    row.iter_mut()
                        .zip(input)
                        .for_each(|(w, x)| *w += delta[o] * x);
                    g.biases[i][o] += delta[o];
                }
            }
            let mut d_in = vec![0.0; layer.in_dim];
            for o in 0..layer.out_dim {
                let row = &layer.weight[o * layer.in_dim..(o + 1) * layer.in_dim];
                d_in.iter_mut().zip(row).for_each(|(d, w)| *d += delta[o] * w);
            }
            if i > 0 {
                // `input` is the previous layer's activated output.
                d_in.iter_mut()
                    .zip(input)
                    .for_each(|(d, a)| *d *= self.hidden_activation.derivative_from_output(*a));
            }
            delta = d_in;
        }
        delta
    }

    /// Raw translated embedding values.
    pub fn forward(&self, x: &Array1<f64>) -> Result<Array1<f64>> {
        self.check_input(x)?;
        Ok(Array1::from(self.forward_cached(x.as_slice().expect("contiguous")).output))
    }

    /// Gradient of `d_out · h(x)` with respect to `x`.
    pub fn input_gradient(&self, x: &Array1<f64>, d_out: &Array1<f64>) -> Result<Array1<f64>> {
        self.check_input(x)?;
        if d_out.len() != self.output_dim() {
            return Err(Error::Dimension("output gradient length".into()));
        }
        let cache = self.forward_cached(x.as_slice().expect("contiguous"));
        Ok(Array1::from(self.backward_cached(
            &cache,
            d_out.as_slice().expect("contiguous"),
            None,
        )))
    }

    fn params_mut(&mut self) -> impl Iterator<Item = &mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weight.as_mut_slice(), l.bias.as_mut_slice()])
    }

    fn all_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(&l.bias).all(|v| v.is_finite()))
    }
}

/// Translates classifier features into an (un-normalized) image embedding.
pub fn translate<I: TranslatorInput + ?Sized>(h: &TranslatorNetwork, z: &I) -> Result<Embedding> {
    Ok(Embedding::image(h.forward(z.feature_values())?))
}

/// Concept prediction score: cosine between `h(z)` and the text embedding.
pub fn concept_score<I: TranslatorInput + ?Sized>(
    h: &TranslatorNetwork,
    z: &I,
    txt: &Embedding,
) -> Result<f64> {
    if txt.modality != Modality::Text {
        return Err(Error::config("concept score needs a text embedding"));
    }
    cosine(&h.forward(z.feature_values())?, &txt.values)
}

/// Gradient of [`concept_score`] with respect to the translator input.
pub fn concept_score_gradient(
    h: &TranslatorNetwork,
    z: &Array1<f64>,
    txt: &Embedding,
) -> Result<(f64, Array1<f64>)> {
    let out = h.forward(z)?;
    let t = crate::vlm::l2_normalize(&txt.values);
    let score = cosine(&out, &t)?;
    let d_out = cosine_gradient(&out, &t);
    Ok((score, h.input_gradient(z, &d_out)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct LossTerms {
    pub emb: f64,
    pub sim: f64,
    pub total: f64,
}

impl LossTerms {
    fn scale(self, s: f64) -> Self {
        Self {
            emb: self.emb * s,
            sim: self.sim * s,
            total: self.total * s,
        }
    }

    fn add(self, o: Self) -> Self {
        Self {
            emb: self.emb + o.emb,
            sim: self.sim + o.sim,
            total: self.total + o.total,
        }
    }

    fn is_finite(&self) -> bool {
        self.emb.is_finite() && self.sim.is_finite() && self.total.is_finite()
    }
}

/// Loss terms and their gradient with respect to the translator output.
fn loss_and_output_gradient(
    out: &[f64],
    target: &Array1<f64>,
    texts: &[Array1<f64>],
    lambda_sim: f64,
    use_similarity_loss: bool,
) -> Result<(LossTerms, Vec<f64>)> {
    let d = out.len();
    if target.len() != d {
        return Err(Error::Dimension(format!(
            "translator output has {d} dims, image embedding {}",
            target.len()
        )));
    }
    let mut emb = 0.0;
    let mut grad = vec![0.0; d];
    for ((g, &o), &t) in grad.iter_mut().zip(out).zip(target) {
        let diff = o - t;
        emb += diff * diff;
        *g = 2.0 * diff / d as f64;
    }
    emb /= d as f64;
    let mut sim = 0.0;
    if use_similarity_loss {
        if texts.is_empty() {
            return Err(Error::config("similarity loss requires a non-empty concept set"));
        }
        let out_v = Array1::from(out.to_vec());
        let n = texts.len() as f64;
        for t in texts {
            if t.len() != d {
                return Err(Error::Dimension("text embedding dimension".into()));
            }
            let s = cosine(&out_v, t)?;
            let s_vlm = cosine(target, t)?;
            let diff = s - s_vlm;
            sim += diff * diff;
            let cg = cosine_gradient(&out_v, t);
            for (g, c) in grad.iter_mut().zip(cg.iter()) {
                *g += lambda_sim * 2.0 * diff / n * c;
            }
        }
        sim /= n;
    }
    let total = if use_similarity_loss {
        emb + lambda_sim * sim
    } else {
        emb
    };
    Ok((LossTerms { emb, sim, total }, grad))
}

/// Embedding, similarity and total loss for one image.
///
/// `txt_batch` must hold text embeddings; `vlm_img` is the raw image
/// embedding of the same image.
pub fn losses<I: TranslatorInput + ?Sized>(
    h: &TranslatorNetwork,
    z: &I,
    vlm_img: &Embedding,
    txt_batch: &[Embedding],
    lambda_sim: f64,
    use_similarity_loss: bool,
) -> Result<LossTerms> {
    let out = h.forward(z.feature_values())?;
    let texts: Vec<Array1<f64>> = txt_batch.iter().map(|t| t.values.clone()).collect();
    let (terms, _) = loss_and_output_gradient(
        out.as_slice().expect("contiguous"),
        &vlm_img.values,
        &texts,
        lambda_sim,
        use_similarity_loss,
    )?;
    Ok(terms)
}

/// Loss terms and parameter gradients of `total` for one image.
pub fn loss_gradients<I: TranslatorInput + ?Sized>(
    h: &TranslatorNetwork,
    z: &I,
    vlm_img: &Embedding,
    txt_batch: &[Embedding],
    lambda_sim: f64,
    use_similarity_loss: bool,
) -> Result<(LossTerms, TranslatorGrads)> {
    let texts: Vec<Array1<f64>> = txt_batch.iter().map(|t| t.values.clone()).collect();
    sample_gradient(
        h,
        z.feature_values(),
        &vlm_img.values,
        &texts,
        lambda_sim,
        use_similarity_loss,
    )
}

fn sample_gradient(
    h: &TranslatorNetwork,
    z: &Array1<f64>,
    target: &Array1<f64>,
    texts: &[Array1<f64>],
    lambda_sim: f64,
    use_similarity_loss: bool,
) -> Result<(LossTerms, TranslatorGrads)> {
    h.check_input(z)?;
    let cache = h.forward_cached(z.as_slice().expect("contiguous"));
    let (terms, d_out) =
        loss_and_output_gradient(&cache.output, target, texts, lambda_sim, use_similarity_loss)?;
    let mut grads = TranslatorGrads::zeros_like(h);
    h.backward_cached(&cache, &d_out, Some(&mut grads));
    Ok((terms, grads))
}

/// Translator training settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub base_lr: f64,
    pub warmup_peak_lr: f64,
    /// Linear warm-up length; 0 disables warm-up (the rate starts at `base_lr`).
    pub warmup_epochs: usize,
    pub lr_decay_factor: f64,
    pub plateau_epochs: usize,
    pub early_stop_patience: usize,
    pub momentum: f64,
    pub lambda_sim: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub use_similarity_loss: bool,
    pub multi_layer: bool,
    /// Hidden widths between the input and the VLM dimension.
    pub hidden_dims: Vec<usize>,
    pub validation_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 150,
            base_lr: 0.1,
            warmup_peak_lr: 0.2,
            warmup_epochs: 5,
            lr_decay_factor: 0.1,
            plateau_epochs: 4,
            early_stop_patience: 10,
            momentum: 0.9,
            lambda_sim: 0.001,
            batch_size: 64,
            seed: 0,
            use_similarity_loss: true,
            multi_layer: true,
            hidden_dims: vec![256, 128],
            validation_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_epochs == 0 {
            return Err(Error::config("max_epochs must be at least 1"));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor < 1.0) {
            return Err(Error::config("lr_decay_factor must lie in (0, 1)"));
        }
        if !(self.lambda_sim >= 0.0) {
            return Err(Error::config("lambda_sim must be non-negative"));
        }
        if self.plateau_epochs == 0 || self.early_stop_patience == 0 {
            return Err(Error::config("plateau_epochs and early_stop_patience must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if !(self.base_lr > 0.0) || !(self.warmup_peak_lr > 0.0) {
            return Err(Error::config("learning rates must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::config("validation_fraction must lie in [0, 1)"));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train: LossTerms,
    pub validation: LossTerms,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub initial_validation: LossTerms,
    pub epochs: Vec<EpochRecord>,
    pub stopped_epoch: usize,
    pub best_epoch: usize,
    pub final_lr: f64,
    pub use_similarity_loss: bool,
    pub multi_layer: bool,
    pub checkpoint: Option<String>,
}

/// Pre-computed translator inputs and targets for a set of images.
#[derive(Debug, Clone)]
pub struct FeatureSet {
    pub inputs: Vec<Array1<f64>>,
    pub targets: Vec<Array1<f64>>,
    pub layer_offsets: Vec<LayerSlice>,
}

/// Runs the frozen classifier and VLM over `images`.
pub fn extract_features(
    model: &dyn Classifier,
    vlm: &dyn VisionLanguageModel,
    images: &[Image],
    multi_layer: bool,
) -> Result<FeatureSet> {
    let rows = par::map(images, |img| -> Result<(ConcatEmbedding, Array1<f64>)> {
        let session = model.forward(img)?;
        let z = session.translator_input(multi_layer);
        let target = embed(vlm, EmbedInput::Image(img))?.values;
        Ok((z, target))
    });
    let mut inputs = Vec::with_capacity(rows.len());
    let mut targets = Vec::with_capacity(rows.len());
    let mut layer_offsets = Vec::new();
    for row in rows {
        let (z, t) = row?;
        layer_offsets = z.layer_offsets;
        inputs.push(z.values);
        targets.push(t);
    }
    Ok(FeatureSet {
        inputs,
        targets,
        layer_offsets,
    })
}

/// Seed-deterministic train/validation split of `n` items.
pub fn validation_split(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_5b11);
    idx.shuffle(&mut rng);
    let n_val = if n < 2 || fraction <= 0.0 {
        0
    } else {
        ((n as f64 * fraction).round() as usize).clamp(1, n - 1)
    };
    let val = idx[..n_val].to_vec();
    let train = idx[n_val..].to_vec();
    (train, val)
}

fn lr_for_epoch(cfg: &TrainConfig, epoch: usize, decays: i32) -> f64 {
    if cfg.warmup_epochs > 0 && epoch < cfg.warmup_epochs {
        cfg.base_lr + (cfg.warmup_peak_lr - cfg.base_lr) * epoch as f64 / cfg.warmup_epochs as f64
    } else {
        let start = if cfg.warmup_epochs > 0 {
            cfg.warmup_peak_lr
        } else {
            cfg.base_lr
        };
        start * cfg.lr_decay_factor.powi(decays)
    }
}

fn evaluate(
    h: &TranslatorNetwork,
    features: &FeatureSet,
    idx: &[usize],
    texts: &[Array1<f64>],
    cfg: &TrainConfig,
) -> Result<LossTerms> {
    let parts = par::map_chunks(idx, 16, |chunk| -> Result<LossTerms> {
        let mut acc = LossTerms::default();
        for &i in chunk {
            let out = h.forward(&features.inputs[i])?;
            let (t, _) = loss_and_output_gradient(
                out.as_slice().expect("contiguous"),
                &features.targets[i],
                texts,
                cfg.lambda_sim,
                cfg.use_similarity_loss,
            )?;
            acc = acc.add(t);
        }
        Ok(acc)
    });
    let mut acc = LossTerms::default();
    for p in parts {
        acc = acc.add(p?);
    }
    Ok(acc.scale(1.0 / idx.len().max(1) as f64))
}

/// Trains a translator on pre-extracted features.
///
/// The learning rate ramps linearly from `base_lr` to `warmup_peak_lr`
/// over `warmup_epochs`, then is multiplied by `lr_decay_factor` whenever the
/// validation total loss has not improved for `plateau_epochs` epochs.
/// Training stops after `max_epochs` or `early_stop_patience` epochs without
/// improvement, and the best-validation parameters are returned.
pub fn train_on_features(
    features: &FeatureSet,
    texts: &[Embedding],
    cfg: &TrainConfig,
) -> Result<(TranslatorNetwork, TrainReport)> {
    cfg.validate()?;
    let n = features.inputs.len();
    if n == 0 {
        return Err(Error::EmptyDataset("no translator training images".into()));
    }
    if cfg.use_similarity_loss && texts.is_empty() {
        return Err(Error::config("similarity loss requires a non-empty concept set"));
    }
    let texts: Vec<Array1<f64>> = texts
        .iter()
        .map(|t| crate::vlm::l2_normalize(&t.values))
        .collect();
    let (train_idx, mut val_idx) = validation_split(n, cfg.validation_fraction, cfg.seed);
    if val_idx.is_empty() {
        val_idx = train_idx.clone();
    }
    let in_dim = features.inputs[0].len();
    let out_dim = features.targets[0].len();
    let mut dims = vec![in_dim];
    dims.extend(&cfg.hidden_dims);
    dims.push(out_dim);
    let mut h = TranslatorNetwork::new(&dims, HiddenActivation::Tanh, cfg.seed)?;

    let initial_validation = evaluate(&h, features, &val_idx, &texts, cfg)?;
    let mut best = h.clone();
    let mut best_loss = initial_validation.total;
    let mut best_epoch = 0;
    let mut since_improve = 0usize;
    let mut since_decay_check = 0usize;
    let mut decays = 0i32;
    let mut velocity = TranslatorGrads::zeros_like(&h);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut order = train_idx.clone();
    let mut epochs = Vec::new();
    let mut lr = lr_for_epoch(cfg, 0, 0);

    for epoch in 0..cfg.max_epochs {
        lr = lr_for_epoch(cfg, epoch, decays);
        order.shuffle(&mut rng);
        let mut train_sum = LossTerms::default();
        for batch in order.chunks(cfg.batch_size) {
            let frozen = &h;
            let parts = par::map_chunks(batch, 8, |chunk| -> Result<(LossTerms, TranslatorGrads)> {
                let mut terms = LossTerms::default();
                let mut grads = TranslatorGrads::zeros_like(frozen);
                for &i in chunk {
                    let (t, g) = sample_gradient(
                        frozen,
                        &features.inputs[i],
                        &features.targets[i],
                        &texts,
                        cfg.lambda_sim,
                        cfg.use_similarity_loss,
                    )?;
                    terms = terms.add(t);
                    grads.add_assign(&g);
                }
                Ok((terms, grads))
            });
            let mut grads = TranslatorGrads::zeros_like(&h);
            for p in parts {
                let (t, g) = p?;
                train_sum = train_sum.add(t);
                grads.add_assign(&g);
            }
            if !train_sum.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch: epoch + 1,
                    detail: format!("training loss {train_sum:?} at lr {lr}"),
                });
            }
            let scale = 1.0 / batch.len() as f64;
            let grad_slices = grads
                .weights
                .iter()
                .zip(&grads.biases)
                .flat_map(|(w, b)| [w.as_slice(), b.as_slice()]);
            let vel_slices = velocity
                .weights
                .iter_mut()
                .zip(velocity.biases.iter_mut())
                .flat_map(|(w, b)| [w.as_mut_slice(), b.as_mut_slice()]);
            for ((p, g), v) in h.params_mut().zip(grad_slices).zip(vel_slices) {
                for j in 0..p.len() {
                    v[j] = cfg.momentum * v[j] + g[j] * scale;
                    p[j] -= lr * v[j];
                }
            }
        }
        if !h.all_finite() {
            return Err(Error::NonFiniteLoss {
                epoch: epoch + 1,
                detail: format!("translator parameters diverged at lr {lr}"),
            });
        }
        let validation = evaluate(&h, features, &val_idx, &texts, cfg)?;
        if !validation.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch: epoch + 1,
                detail: format!("validation loss {validation:?}"),
            });
        }
        epochs.push(EpochRecord {
            epoch: epoch + 1,
            lr,
            train: train_sum.scale(1.0 / train_idx.len() as f64),
            validation,
        });
        if validation.total < best_loss {
            best_loss = validation.total;
            best = h.clone();
            best_epoch = epoch + 1;
            since_improve = 0;
            since_decay_check = 0;
        } else {
            since_improve += 1;
            let warming = cfg.warmup_epochs > 0 && epoch + 1 < cfg.warmup_epochs;
            if !warming {
                since_decay_check += 1;
                if since_decay_check >= cfg.plateau_epochs {
                    decays += 1;
                    since_decay_check = 0;
                }
            }
        }
        if since_improve >= cfg.early_stop_patience {
            break;
        }
    }
    let stopped_epoch = epochs.len();
    Ok((
        best,
        TrainReport {
            initial_validation,
            epochs,
            stopped_epoch,
            best_epoch,
            final_lr: lr,
            use_similarity_loss: cfg.use_similarity_loss,
            multi_layer: cfg.multi_layer,
            checkpoint: None,
        },
    ))
}

/// Trains a translator for `model` against `vlm` on `images`.
///
/// Both backbones are only borrowed immutably; features and targets are
/// extracted once, then batches are drawn in a seed-deterministic order.
pub fn train_translator(
    model: &dyn Classifier,
    vlm: &dyn VisionLanguageModel,
    images: &[Image],
    concepts: &[ConceptText],
    cfg: &TrainConfig,
) -> Result<(TranslatorNetwork, TrainReport)> {
    cfg.validate()?;
    if images.is_empty() {
        return Err(Error::EmptyDataset("no translator training images".into()));
    }
    let texts = if cfg.use_similarity_loss {
        concepts
            .iter()
            .map(|c| embed(vlm, EmbedInput::Text(c)))
            .collect::<Result<Vec<_>>>()?
    } else {
        Vec::new()
    };
    let features = extract_features(model, vlm, images, cfg.multi_layer)?;
    train_on_features(&features, &texts, cfg)
}

/// On-disk translator checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TranslatorCheckpoint {
    pub format_version: u32,
    pub network: TranslatorNetwork,
    pub normalization_policy: String,
    pub multi_layer: bool,
    pub input_layers: Vec<LayerSlice>,
    pub config_hash: String,
}

pub const NORMALIZATION_POLICY: &str = "text_l2_image_raw_cosine_similarity";

impl TranslatorCheckpoint {
    pub fn new(
        network: TranslatorNetwork,
        cfg: &TrainConfig,
        input_layers: Vec<LayerSlice>,
    ) -> Self {
        Self {
            format_version: 1,
            network,
            normalization_policy: NORMALIZATION_POLICY.to_string(),
            multi_layer: cfg.multi_layer,
            input_layers,
            config_hash: cfg.hash(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self).expect("checkpoint serializes");
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Self = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        let network = TranslatorNetwork::from_layers(ck.network.layers.clone(), ck.network.hidden_activation)?;
        Ok(Self { network, ..ck })
    }
}
