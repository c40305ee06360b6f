//! A small convolutional classifier with hand-written backward passes.
//!
//! Each stage is `conv3x3 (same padding) -> activation -> 2x2 average pool`,
//! and the output of every stage is a capture point. The head is global
//! average pooling followed by a linear layer, so `z^L` is exactly what the
//! head consumes.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, Array3, ArrayView2, ArrayViewMut2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{
    check_image, ClassPrediction, Classifier, GradientSeeds, LayerActivations, LayerGradient,
    Session,
};
use crate::{par, Error, Image, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    /// Smooth variant, handy for finite-difference checks.
    Softplus,
}

impl Activation {
    fn apply(self, u: f64) -> f64 {
        match self {
            Activation::Relu => u.max(0.0),
            Activation::Softplus => u.max(0.0) + (-u.abs()).exp().ln_1p(),
        }
    }

    fn derivative(self, u: f64) -> f64 {
        match self {
            Activation::Relu => {
                if u > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Softplus => 1.0 / (1.0 + (-u).exp()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyCnnSpec {
    /// Square input side length.
    pub input_size: usize,
    /// Output channels of each stage.
    pub channels: Vec<usize>,
    pub num_classes: usize,
    #[serde(default)]
    pub activation: Activation,
    /// Initialization seed.
    #[serde(default)]
    pub seed: u64,
}

impl ToyCnnSpec {
    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() {
            return Err(Error::config("toy CNN needs at least one capture stage"));
        }
        if self.channels.iter().any(|&c| c == 0) {
            return Err(Error::config("stage channel counts must be positive"));
        }
        if self.num_classes == 0 {
            return Err(Error::config("num_classes must be positive"));
        }
        let div = 1usize << self.channels.len();
        if self.input_size == 0 || self.input_size % div != 0 {
            return Err(Error::config(format!(
                "input size {} is not divisible by 2^{}",
                self.input_size,
                self.channels.len()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ConvStage {
    in_ch: usize,
    out_ch: usize,
    /// `(out, in, 3, 3)` row-major.
    weight: Vec<f64>,
    bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyCnn {
    spec: ToyCnnSpec,
    stages: Vec<ConvStage>,
    /// `(classes, C_L)` row-major.
    head_weight: Vec<f64>,
    head_bias: Vec<f64>,
}

struct ToyState {
    image: Vec<f64>,
    /// Pre-activation conv outputs of each stage, at full stage resolution.
    pre: Vec<Vec<f64>>,
}

impl ToyCnn {
    pub fn new(spec: ToyCnnSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut stages = Vec::with_capacity(spec.channels.len());
        let mut in_ch = 3;
        for &out_ch in &spec.channels {
            let std = (2.0 / (in_ch * 9) as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("positive std");
            let weight = (0..out_ch * in_ch * 9).map(|_| normal.sample(&mut rng)).collect();
            stages.push(ConvStage {
                in_ch,
                out_ch,
                weight,
                bias: vec![0.0; out_ch],
            });
            in_ch = out_ch;
        }
        let std = (1.0 / in_ch as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        let head_weight = (0..spec.num_classes * in_ch)
            .map(|_| normal.sample(&mut rng))
            .collect();
        Ok(Self {
            head_bias: vec![0.0; spec.num_classes],
            spec,
            stages,
            head_weight,
        })
    }

    /// Checks that parameter shapes agree with the spec, e.g. after
    /// deserializing.
    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        let bad = |what: &str| Err(Error::Dimension(format!("toy CNN {what} disagrees with its spec")));
        if self.stages.len() != self.spec.channels.len() {
            return bad("stage count");
        }
        let mut in_ch = 3;
        for (st, &out_ch) in self.stages.iter().zip(&self.spec.channels) {
            if st.in_ch != in_ch
                || st.out_ch != out_ch
                || st.weight.len() != out_ch * in_ch * 9
                || st.bias.len() != out_ch
            {
                return bad("stage shape");
            }
            in_ch = out_ch;
        }
        if self.head_weight.len() != self.spec.num_classes * in_ch
            || self.head_bias.len() != self.spec.num_classes
        {
            return bad("head shape");
        }
        if self.flat_parameters().iter().any(|v| !v.is_finite()) {
            return Err(Error::Dimension("toy CNN has non-finite parameters".into()));
        }
        Ok(())
    }

    pub fn spec(&self) -> &ToyCnnSpec {
        &self.spec
    }

    /// Head weights as `(classes, C_L)`.
    pub fn head_weight(&self) -> ndarray::ArrayView2<'_, f64> {
        let c = self.stages.last().map(|s| s.out_ch).unwrap_or(0);
        ndarray::ArrayView2::from_shape((self.spec.num_classes, c), &self.head_weight)
            .expect("head shape")
    }

    pub fn head_bias(&self) -> &[f64] {
        &self.head_bias
    }

    pub fn set_head(&mut self, weight: &[f64], bias: &[f64]) -> Result<()> {
        if weight.len() != self.head_weight.len() || bias.len() != self.head_bias.len() {
            return Err(Error::Dimension("head parameter shapes differ".into()));
        }
        self.head_weight.copy_from_slice(weight);
        self.head_bias.copy_from_slice(bias);
        Ok(())
    }

    /// Overwrites one stage's conv parameters (`(out, in, 3, 3)` weights).
    pub fn set_stage(&mut self, stage: usize, weight: &[f64], bias: &[f64]) -> Result<()> {
        let s = self
            .stages
            .get_mut(stage)
            .ok_or(Error::Index { what: "stages", index: stage, len: self.spec.channels.len() })?;
        if weight.len() != s.weight.len() || bias.len() != s.bias.len() {
            return Err(Error::Dimension("stage parameter shapes differ".into()));
        }
        s.weight.copy_from_slice(weight);
        s.bias.copy_from_slice(bias);
        Ok(())
    }

    pub fn num_parameters(&self) -> usize {
        self.parameters().iter().map(|p| p.len()).sum()
    }

    fn parameters(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for s in &self.stages {
            out.push(&s.weight);
            out.push(&s.bias);
        }
        out.push(&self.head_weight);
        out.push(&self.head_bias);
        out
    }

    fn parameters_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for s in &mut self.stages {
            out.push(&mut s.weight);
            out.push(&mut s.bias);
        }
        out.push(&mut self.head_weight);
        out.push(&mut self.head_bias);
        out
    }

    fn zero_grads(&self) -> Vec<Vec<f64>> {
        self.parameters().iter().map(|p| vec![0.0; p.len()]).collect()
    }

    fn stage_side(&self, stage: usize) -> usize {
        self.spec.input_size >> stage
    }

    /// Runs stages `from..` on `input` (the output of stage `from - 1`, or
    /// the image). Returns captured activations and pre-activations.
    fn run_stages(&self, from: usize, input: &[f64]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let mut acts = Vec::new();
        let mut pres = Vec::new();
        let mut x: Vec<f64> = input.to_vec();
        for (s, stage) in self.stages.iter().enumerate().skip(from) {
            let side = self.stage_side(s);
            let pre = conv_forward(&x, stage, side, side);
            let post: Vec<f64> = pre.iter().map(|&u| self.spec.activation.apply(u)).collect();
            let pooled = avg_pool2(&post, stage.out_ch, side, side);
            pres.push(pre);
            acts.push(pooled.clone());
            x = pooled;
        }
        (acts, pres)
    }

    fn head(&self, last: &[f64]) -> Vec<f64> {
        let c = self.stages.last().expect("validated").out_ch;
        let side = self.stage_side(self.stages.len());
        let n = (side * side) as f64;
        let z: Vec<f64> = (0..c)
            .map(|k| last[k * side * side..(k + 1) * side * side].iter().sum::<f64>() / n)
            .collect();
        (0..self.spec.num_classes)
            .map(|j| {
                let row = &self.head_weight[j * c..(j + 1) * c];
                self.head_bias[j] + row.iter().zip(&z).map(|(w, z)| w * z).sum::<f64>()
            })
            .collect()
    }

    fn to_layer(&self, stage: usize, data: Vec<f64>) -> LayerActivations {
        let side = self.stage_side(stage + 1);
        let maps = Array3::from_shape_vec((self.stages[stage].out_ch, side, side), data)
            .expect("stage output shape");
        LayerActivations {
            layer_index: stage + 1,
            maps,
        }
    }

    /// Plain forward pass without capture bookkeeping.
    pub fn logits(&self, image: &Image) -> Result<Vec<f64>> {
        check_image(self, image)?;
        let input = image.as_standard_layout();
        let (acts, _) = self.run_stages(0, input.as_slice().expect("standard layout"));
        Ok(self.head(acts.last().expect("validated")))
    }

    /// Back-propagation core. `grad_logits` enters at the head, `seeds` at
    /// captured layers. Returns the total gradient at every captured layer
    /// and, when `param_grads` is given, accumulates parameter gradients.
    fn backprop(
        &self,
        state: &ToyState,
        activations: &[LayerActivations],
        grad_logits: Option<&[f64]>,
        seeds: &[(usize, Array3<f64>)],
        mut param_grads: Option<&mut Vec<Vec<f64>>>,
    ) -> Result<Vec<LayerGradient>> {
        let n_stages = self.stages.len();
        let mut grads: Vec<Vec<f64>> = activations
            .iter()
            .map(|a| vec![0.0; a.maps.len()])
            .collect();
        for (layer_index, seed) in seeds {
            let pos = layer_index
                .checked_sub(1)
                .filter(|&p| p < n_stages)
                .ok_or_else(|| Error::Gradient(format!("layer {layer_index} is not captured")))?;
            if seed.dim() != activations[pos].maps.dim() {
                return Err(Error::Dimension(format!(
                    "seed for layer {layer_index} has shape {:?}, activations {:?}",
                    seed.dim(),
                    activations[pos].maps.dim()
                )));
            }
            for (g, s) in grads[pos].iter_mut().zip(seed.iter()) {
                *g += s;
            }
        }

        if let Some(gl) = grad_logits {
            if gl.len() != self.spec.num_classes {
                return Err(Error::Dimension("logit gradient length".into()));
            }
            let c = self.stages[n_stages - 1].out_ch;
            let side = self.stage_side(n_stages);
            let hw = side * side;
            let last = activations[n_stages - 1]
                .maps
                .as_slice()
                .expect("standard layout");
            if let Some(pg) = param_grads.as_deref_mut() {
                let z: Vec<f64> = (0..c)
                    .map(|k| last[k * hw..(k + 1) * hw].iter().sum::<f64>() / hw as f64)
                    .collect();
                let hw_idx = pg.len() - 2;
                for j in 0..self.spec.num_classes {
                    for k in 0..c {
                        pg[hw_idx][j * c + k] += gl[j] * z[k];
                    }
                    pg[hw_idx + 1][j] += gl[j];
                }
            }
            let g_last = &mut grads[n_stages - 1];
            for k in 0..c {
                let dz: f64 = (0..self.spec.num_classes)
                    .map(|j| gl[j] * self.head_weight[j * c + k])
                    .sum();
                let v = dz / hw as f64;
                for g in &mut g_last[k * hw..(k + 1) * hw] {
                    *g += v;
                }
            }
        }

        for s in (0..n_stages).rev() {
            let stage = &self.stages[s];
            let side = self.stage_side(s);
            let d_post = avg_pool2_backward(&grads[s], stage.out_ch, side, side);
            let pre = &state.pre[s];
            let d_pre: Vec<f64> = d_post
                .iter()
                .zip(pre)
                .map(|(&g, &u)| g * self.spec.activation.derivative(u))
                .collect();
            let input: &[f64] = if s == 0 {
                &state.image
            } else {
                activations[s - 1].maps.as_slice().expect("standard layout")
            };
            if let Some(pg) = param_grads.as_deref_mut() {
                let (wg, rest) = pg[2 * s..].split_at_mut(1);
                conv_backward_params(input, &d_pre, stage, side, side, &mut wg[0], &mut rest[0]);
            }
            if s > 0 {
                let d_in = conv_backward_input(&d_pre, stage, side, side);
                for (g, d) in grads[s - 1].iter_mut().zip(d_in) {
                    *g += d;
                }
            }
        }

        Ok(grads
            .into_iter()
            .enumerate()
            .map(|(s, g)| LayerGradient {
                layer_index: s + 1,
                grad: Array3::from_shape_vec(activations[s].maps.dim(), g).expect("shape"),
            })
            .collect())
    }

    /// Cross-entropy loss and its parameter gradients for one sample.
    fn sample_gradient(&self, image: &Image, label: usize) -> Result<(f64, bool, Vec<Vec<f64>>)> {
        let session = self.forward(image)?;
        let state: &ToyState = session.state().expect("toy session");
        let p = &session.prediction().probabilities;
        let loss = -(p[label].max(1e-300)).ln();
        let correct = session.prediction().predicted_class == label;
        let mut gl = p.clone();
        gl[label] -= 1.0;
        let mut pg = self.zero_grads();
        self.backprop(state, session.activations(), Some(&gl), &[], Some(&mut pg))?;
        Ok((loss, correct, pg))
    }
}

impl Classifier for ToyCnn {
    fn name(&self) -> &str {
        "toy_cnn"
    }

    fn input_shape(&self) -> [usize; 3] {
        [3, self.spec.input_size, self.spec.input_size]
    }

    fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    fn capture_points(&self) -> Vec<usize> {
        (1..=self.stages.len()).collect()
    }

    fn forward(&self, image: &Image) -> Result<Session> {
        check_image(self, image)?;
        let input = image.as_standard_layout();
        let input = input.as_slice().expect("standard layout");
        if input.iter().any(|v| !v.is_finite()) {
            return Err(Error::InputShape {
                expected: "finite pixel values".into(),
                got: "non-finite values".into(),
            });
        }
        let (acts, pres) = self.run_stages(0, input);
        let logits = self.head(acts.last().expect("validated"));
        let activations = acts
            .into_iter()
            .enumerate()
            .map(|(s, a)| self.to_layer(s, a))
            .collect();
        Ok(Session::new(
            activations,
            ClassPrediction::from_logits(logits),
            None,
            Box::new(ToyState {
                image: input.to_vec(),
                pre: pres,
            }),
        ))
    }

    fn resume(&self, session: &Session, replaced: LayerActivations) -> Result<Session> {
        let pos = replaced
            .layer_index
            .checked_sub(1)
            .filter(|&p| p < self.stages.len())
            .ok_or(Error::Index {
                what: "capture points",
                index: replaced.layer_index,
                len: self.stages.len(),
            })?;
        let current = session.layer(replaced.layer_index)?;
        if current.maps.dim() != replaced.maps.dim() {
            return Err(Error::Dimension(format!(
                "replacement for layer {} has shape {:?}, expected {:?}",
                replaced.layer_index,
                replaced.maps.dim(),
                current.maps.dim()
            )));
        }
        let replaced = LayerActivations {
            layer_index: replaced.layer_index,
            maps: replaced.maps.as_standard_layout().into_owned(),
        };
        let (acts, _) = self.run_stages(pos + 1, replaced.maps.as_slice().expect("standard"));
        let mut activations: Vec<LayerActivations> = session.activations()[..pos].to_vec();
        activations.push(replaced);
        for (i, a) in acts.into_iter().enumerate() {
            activations.push(self.to_layer(pos + 1 + i, a));
        }
        let logits = self.head(
            activations
                .last()
                .expect("non-empty")
                .maps
                .as_slice()
                .expect("standard"),
        );
        let layer_index = pos + 1;
        let resumed_from = Some(session.resumed_from().map_or(layer_index, |r| r.min(layer_index)));
        Ok(Session::new(
            activations,
            ClassPrediction::from_logits(logits),
            resumed_from,
            Box::new(()),
        ))
    }

    fn backward(&self, session: &Session, seeds: &GradientSeeds) -> Result<Vec<LayerGradient>> {
        let state: &ToyState = session.state().ok_or_else(|| {
            Error::Gradient("session was resumed after an edit; run a fresh forward pass".into())
        })?;
        self.backprop(
            state,
            session.activations(),
            seeds.logits.as_ref().map(|g| g.as_slice().expect("contiguous")),
            &seeds.activations,
            None,
        )
    }
}

/// `(in_ch * 9, h * w)` patch matrix for a 3x3 same-padded convolution.
fn im2col(input: &[f64], in_ch: usize, h: usize, w: usize) -> Array2<f64> {
    let hw = h * w;
    let mut cols = Array2::zeros((in_ch * 9, hw));
    let buf = cols.as_slice_mut().expect("standard layout");
    for i in 0..in_ch {
        let src = &input[i * hw..(i + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut buf[((i * 3 + ky) * 3 + kx) * hw..][..hw];
                let (y0, y1, x0, x1, dy, dx) = window(h, w, ky, kx);
                for y in y0..y1 {
                    let sy = (y as isize + dy) as usize;
                    let sx0 = (x0 as isize + dx) as usize;
                    row[y * w + x0..y * w + x1].copy_from_slice(&src[sy * w + sx0..sy * w + sx0 + (x1 - x0)]);
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`].
fn col2im(cols: &Array2<f64>, in_ch: usize, h: usize, w: usize) -> Vec<f64> {
    let hw = h * w;
    let buf = cols.as_slice().expect("standard layout");
    let mut out = vec![0.0; in_ch * hw];
    for i in 0..in_ch {
        let dst = &mut out[i * hw..(i + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &buf[((i * 3 + ky) * 3 + kx) * hw..][..hw];
                let (y0, y1, x0, x1, dy, dx) = window(h, w, ky, kx);
                for y in y0..y1 {
                    let sy = (y as isize + dy) as usize;
                    let sx0 = (x0 as isize + dx) as usize;
                    for (d, g) in dst[sy * w + sx0..sy * w + sx0 + (x1 - x0)]
                        .iter_mut()
                        .zip(&row[y * w + x0..y * w + x1])
                    {
                        *d += g;
                    }
                }
            }
        }
    }
    out
}

fn weight_matrix(stage: &ConvStage) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape((stage.out_ch, stage.in_ch * 9), &stage.weight).expect("weight shape")
}

fn conv_forward(input: &[f64], stage: &ConvStage, h: usize, w: usize) -> Vec<f64> {
    let hw = h * w;
    let cols = im2col(input, stage.in_ch, h, w);
    let mut out = Array2::from_shape_fn((stage.out_ch, hw), |(o, _)| stage.bias[o]);
    general_mat_mul(1.0, &weight_matrix(stage), &cols, 1.0, &mut out);
    out.into_raw_vec_and_offset().0
}

fn conv_backward_input(d_out: &[f64], stage: &ConvStage, h: usize, w: usize) -> Vec<f64> {
    let g = ArrayView2::from_shape((stage.out_ch, h * w), d_out).expect("gradient shape");
    let d_cols = weight_matrix(stage).t().dot(&g);
    col2im(&d_cols, stage.in_ch, h, w)
}

fn conv_backward_params(
    input: &[f64],
    d_out: &[f64],
    stage: &ConvStage,
    h: usize,
    w: usize,
    d_weight: &mut [f64],
    d_bias: &mut [f64],
) {
    let hw = h * w;
    let g = ArrayView2::from_shape((stage.out_ch, hw), d_out).expect("gradient shape");
    for (o, b) in d_bias.iter_mut().enumerate() {
        *b += g.row(o).sum();
    }
    let cols = im2col(input, stage.in_ch, h, w);
    let mut dw = ArrayViewMut2::from_shape((stage.out_ch, stage.in_ch * 9), d_weight).expect("weight shape");
    general_mat_mul(1.0, &g, &cols.t(), 1.0, &mut dw);
}

/// Valid output range and source offset for kernel tap `(ky, kx)`.
fn window(h: usize, w: usize, ky: usize, kx: usize) -> (usize, usize, usize, usize, isize, isize) {
    let dy = ky as isize - 1;
    let dx = kx as isize - 1;
    let y0 = (-dy).max(0) as usize;
    let y1 = (h as isize - dy.max(0)) as usize;
    let x0 = (-dx).max(0) as usize;
    let x1 = (w as isize - dx.max(0)) as usize;
    (y0, y1, x0, x1, dy, dx)
}

fn avg_pool2(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; c * oh * ow];
    for k in 0..c {
        let src = &x[k * h * w..(k + 1) * h * w];
        for y in 0..oh {
            for xx in 0..ow {
                let a = src[2 * y * w + 2 * xx];
                let b = src[2 * y * w + 2 * xx + 1];
                let cc = src[(2 * y + 1) * w + 2 * xx];
                let d = src[(2 * y + 1) * w + 2 * xx + 1];
                out[k * oh * ow + y * ow + xx] = 0.25 * (a + b + cc + d);
            }
        }
    }
    out
}

fn avg_pool2_backward(g: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; c * h * w];
    for k in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                let v = 0.25 * g[k * oh * ow + y * ow + x];
                let base = k * h * w;
                out[base + 2 * y * w + 2 * x] = v;
                out[base + 2 * y * w + 2 * x + 1] = v;
                out[base + (2 * y + 1) * w + 2 * x] = v;
                out[base + (2 * y + 1) * w + 2 * x + 1] = v;
            }
        }
    }
    out
}

/// Adam settings and schedule for fitting the toy backbone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 16,
            learning_rate: 1e-2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierTrainReport {
    pub epoch_loss: Vec<f64>,
    pub epoch_train_accuracy: Vec<f64>,
}

/// Fits the toy CNN with Adam on cross-entropy. Batches are processed in
/// parallel chunks and reduced in a fixed order, so a run is reproducible
/// from `cfg.seed` regardless of thread count.
pub fn train_classifier(
    model: &mut ToyCnn,
    images: &[Image],
    labels: &[usize],
    cfg: &ClassifierTrainConfig,
) -> Result<ClassifierTrainReport> {
    if images.is_empty() {
        return Err(Error::EmptyDataset("no classifier training images".into()));
    }
    if images.len() != labels.len() {
        return Err(Error::Dimension("images and labels differ in length".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= model.spec.num_classes) {
        return Err(Error::Index { what: "classes", index: bad, len: model.spec.num_classes });
    }
    if cfg.batch_size == 0 {
        return Err(Error::config("batch_size must be positive"));
    }
    let (beta1, beta2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);
    let mut m = model.zero_grads();
    let mut v = model.zero_grads();
    let mut step = 0i32;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut report = ClassifierTrainReport {
        epoch_loss: Vec::new(),
        epoch_train_accuracy: Vec::new(),
    };
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let frozen: &ToyCnn = model;
            let parts = par::map_chunks(batch, 4, |chunk| -> Result<(f64, usize, Vec<Vec<f64>>)> {
                let mut acc = frozen.zero_grads();
                let mut loss = 0.0;
                let mut hits = 0;
                for &i in chunk {
                    let (l, ok, g) = frozen.sample_gradient(&images[i], labels[i])?;
                    loss += l;
                    hits += usize::from(ok);
                    for (a, b) in acc.iter_mut().zip(&g) {
                        for (x, y) in a.iter_mut().zip(b) {
                            *x += y;
                        }
                    }
                }
                Ok((loss, hits, acc))
            });
            let mut grads = model.zero_grads();
            for part in parts {
                let (l, hits, g) = part?;
                loss_sum += l;
                correct += hits;
                for (a, b) in grads.iter_mut().zip(&g) {
                    for (x, y) in a.iter_mut().zip(b) {
                        *x += y;
                    }
                }
            }
            if !loss_sum.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    detail: "classifier cross-entropy".into(),
                });
            }
            step += 1;
            let scale = 1.0 / batch.len() as f64;
            let bc1 = 1.0 - beta1.powi(step);
            let bc2 = 1.0 - beta2.powi(step);
            for (((p, g), m), v) in model
                .parameters_mut()
                .into_iter()
                .zip(&grads)
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                for j in 0..p.len() {
                    let gj = g[j] * scale;
                    m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                    v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                    p[j] -= cfg.learning_rate * (m[j] / bc1) / ((v[j] / bc2).sqrt() + eps);
                }
            }
        }
        report.epoch_loss.push(loss_sum / images.len() as f64);
        report
            .epoch_train_accuracy
            .push(correct as f64 / images.len() as f64);
    }
    Ok(report)
}

/// Fraction of images whose arg-max prediction equals the label.
pub fn accuracy(model: &dyn Classifier, images: &[Image], labels: &[usize]) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::EmptyDataset("no images to score".into()));
    }
    let preds = par::map(images, |img| model.forward(img).map(|s| s.prediction().predicted_class));
    let mut hits = 0usize;
    for (p, &l) in preds.into_iter().zip(labels) {
        hits += usize::from(p? == l);
    }
    Ok(hits as f64 / images.len() as f64)
}

impl ToyCnn {
    /// Flattened parameters in a fixed order (stage weights/biases, head).
    pub fn flat_parameters(&self) -> Array1<f64> {
        Array1::from_iter(self.parameters().into_iter().flatten().copied())
    }
}
