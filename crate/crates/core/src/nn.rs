//! A desk-scale CNN classifier with hand-written gradients, a synthetic
//! four-class audio dataset and a plain SGD trainer.
//!
//! Network: `conv 3x3 (1 -> 8) -> ReLU -> maxpool 2x2 -> conv 3x3 (8 -> 16)
//! -> ReLU -> global average pool -> linear (16 -> n_classes)`. Convolutions
//! use zero padding of one pixel. Inputs are `F x T` spectrograms; both sides
//! must be at least [`MIN_INPUT`].
//!
//! Everything is generic over the scalar type so training can run in `f32`
//! while gradient checks run in `f64`.

use std::f64::consts::PI;
use std::fmt;
use std::iter::Sum;
use std::path::Path;

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView2, ArrayViewMut2, LinalgScalar};
use num_traits::Float;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::AudioClip;
use crate::features::{log_mel, SpectrogramConfig};
use crate::flops::{builtin_arch, model_flops, Convention};
use crate::simpf::{compress, CompressionSpec, TimeFrequency};
use crate::{Error, Result};

pub const CONV1_CHANNELS: usize = 8;
pub const CONV2_CHANNELS: usize = 16;
const K: usize = 3;
/// Smallest accepted input height and width.
pub const MIN_INPUT: usize = 8;

pub trait Scalar: Float + LinalgScalar + Sum + Send + Sync + fmt::Debug + 'static {}
impl Scalar for f32 {}
impl Scalar for f64 {}

fn cast<S: Scalar>(v: f64) -> S {
    S::from(v).expect("finite value fits the scalar type")
}

/// Class index in `0..n_classes`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Label(usize);

impl Label {
    pub fn new(index: usize, n_classes: usize) -> Result<Self> {
        if index >= n_classes {
            return Err(Error::Config(format!(
                "label {index} out of range for {n_classes} classes"
            )));
        }
        Ok(Self(index))
    }

    pub fn index(self) -> usize {
        self.0
    }
}

/// Parameters of the classifier. Also used to hold gradients, which have the
/// same shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct TinyCnnModel<S> {
    /// `[8][1][3][3]`
    pub conv1_weight: Vec<S>,
    pub conv1_bias: Vec<S>,
    /// `[16][8][3][3]`
    pub conv2_weight: Vec<S>,
    pub conv2_bias: Vec<S>,
    /// `[n_classes][16]`
    pub fc_weight: Vec<S>,
    pub fc_bias: Vec<S>,
}

pub type Gradients<S> = TinyCnnModel<S>;

pub const TENSOR_NAMES: [&str; 6] = [
    "conv1.weight",
    "conv1.bias",
    "conv2.weight",
    "conv2.bias",
    "fc.weight",
    "fc.bias",
];

impl<S: Scalar> TinyCnnModel<S> {
    pub fn zeros(n_classes: usize) -> Self {
        Self {
            conv1_weight: vec![S::zero(); CONV1_CHANNELS * K * K],
            conv1_bias: vec![S::zero(); CONV1_CHANNELS],
            conv2_weight: vec![S::zero(); CONV2_CHANNELS * CONV1_CHANNELS * K * K],
            conv2_bias: vec![S::zero(); CONV2_CHANNELS],
            fc_weight: vec![S::zero(); n_classes * CONV2_CHANNELS],
            fc_bias: vec![S::zero(); n_classes],
        }
    }

    /// He-uniform convolution weights, LeCun-uniform output layer, zero biases.
    pub fn init(n_classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut model = Self::zeros(n_classes);
        let mut fill = |w: &mut [S], bound: f64| {
            for v in w {
                *v = cast(rng.random_range(-bound..bound));
            }
        };
        fill(&mut model.conv1_weight, (6.0 / 9.0f64).sqrt());
        fill(&mut model.conv2_weight, (6.0 / 72.0f64).sqrt());
        fill(&mut model.fc_weight, (6.0 / 16.0f64).sqrt());
        model
    }

    pub fn n_classes(&self) -> usize {
        self.fc_bias.len()
    }

    pub fn tensors(&self) -> [&[S]; 6] {
        [
            &self.conv1_weight,
            &self.conv1_bias,
            &self.conv2_weight,
            &self.conv2_bias,
            &self.fc_weight,
            &self.fc_bias,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Vec<S>; 6] {
        [
            &mut self.conv1_weight,
            &mut self.conv1_bias,
            &mut self.conv2_weight,
            &mut self.conv2_bias,
            &mut self.fc_weight,
            &mut self.fc_bias,
        ]
    }

    /// Shape of each tensor, in [`TENSOR_NAMES`] order.
    pub fn shapes(&self) -> [Vec<usize>; 6] {
        let n = self.n_classes();
        [
            vec![CONV1_CHANNELS, 1, K, K],
            vec![CONV1_CHANNELS],
            vec![CONV2_CHANNELS, CONV1_CHANNELS, K, K],
            vec![CONV2_CHANNELS],
            vec![n, CONV2_CHANNELS],
            vec![n],
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub fn cast<T: Scalar>(&self) -> TinyCnnModel<T> {
        let c = |v: &[S]| v.iter().map(|x| T::from(*x).expect("cast")).collect();
        TinyCnnModel {
            conv1_weight: c(&self.conv1_weight),
            conv1_bias: c(&self.conv1_bias),
            conv2_weight: c(&self.conv2_weight),
            conv2_bias: c(&self.conv2_bias),
            fc_weight: c(&self.fc_weight),
            fc_bias: c(&self.fc_bias),
        }
    }

    /// `self -= lr * grads`.
    pub fn sgd_step(&mut self, grads: &Gradients<S>, lr: S) {
        for (param, grad) in self.tensors_mut().into_iter().zip(grads.tensors()) {
            for (p, g) in param.iter_mut().zip(grad) {
                *p = *p - lr * *g;
            }
        }
    }
}

/// One network input: a row-major `height x width` plane.
#[derive(Debug, Clone, PartialEq)]
pub struct Input<S> {
    pub data: Vec<S>,
    pub height: usize,
    pub width: usize,
}

impl<S: Scalar> Input<S> {
    pub fn new(data: Vec<S>, height: usize, width: usize) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "{} values cannot fill a {height} x {width} input",
                data.len()
            )));
        }
        if height < MIN_INPUT || width < MIN_INPUT {
            return Err(Error::InputTooShort(format!(
                "network input is {height} x {width}; both sides must be at least {MIN_INPUT} \
                 (after compression the frame count is floor(kT) = {width})"
            )));
        }
        Ok(Self { data, height, width })
    }

    pub fn from_spectrogram<X: TimeFrequency + ?Sized>(x: &X) -> Result<Self> {
        let m = x.matrix();
        Self::new(m.iter().map(|&v| cast(v)).collect(), m.nrows(), m.ncols())
    }

    /// Per-input standardization to zero mean and unit variance.
    pub fn standardized<X: TimeFrequency + ?Sized>(x: &X) -> Result<Self> {
        let m = x.matrix();
        let n = m.len() as f64;
        let mean = m.iter().sum::<f64>() / n;
        let var = m.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let scale = if var > 0.0 { 1.0 / var.sqrt() } else { 1.0 };
        Self::new(
            m.iter().map(|&v| cast((v - mean) * scale)).collect(),
            m.nrows(),
            m.ncols(),
        )
    }
}

/// Unfolds `cin x h x w` into a `(cin * 9) x (h * w)` patch matrix for a
/// zero-padded 3x3 kernel.
fn im2col<S: Scalar>(input: &[S], cin: usize, h: usize, w: usize) -> Array2<S> {
    let plane = h * w;
    let mut cols = Array2::zeros((cin * K * K, plane));
    for c in 0..cin {
        let src = &input[c * plane..(c + 1) * plane];
        for di in 0..K {
            for dj in 0..K {
                let mut row = cols.row_mut((c * K + di) * K + dj);
                let dst = row.as_slice_mut().expect("standard layout");
                let (i0, i1) = (1usize.saturating_sub(di), (h + 1 - di).min(h));
                let (j0, j1) = (1usize.saturating_sub(dj), (w + 1 - dj).min(w));
                for i in i0..i1 {
                    let si = i + di - 1;
                    dst[i * w + j0..i * w + j1].copy_from_slice(&src[si * w + j0 + dj - 1..si * w + j1 + dj - 1]);
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the input.
fn col2im<S: Scalar>(cols: &Array2<S>, cin: usize, h: usize, w: usize, out: &mut [S]) {
    let plane = h * w;
    for c in 0..cin {
        let dst = &mut out[c * plane..(c + 1) * plane];
        for di in 0..K {
            for dj in 0..K {
                let row = cols.row((c * K + di) * K + dj);
                let src = row.as_slice().expect("standard layout");
                let (i0, i1) = (1usize.saturating_sub(di), (h + 1 - di).min(h));
                let (j0, j1) = (1usize.saturating_sub(dj), (w + 1 - dj).min(w));
                for i in i0..i1 {
                    let si = i + di - 1;
                    let d = &mut dst[si * w + j0 + dj - 1..si * w + j1 + dj - 1];
                    for (dv, sv) in d.iter_mut().zip(&src[i * w + j0..i * w + j1]) {
                        *dv = *dv + *sv;
                    }
                }
            }
        }
    }
}

fn weight_matrix<S: Scalar>(weight: &[S], cout: usize) -> ArrayView2<'_, S> {
    ArrayView2::from_shape((cout, weight.len() / cout), weight).expect("weight shape")
}

/// `cout x (h * w)` pre-activations from a patch matrix.
fn conv_forward<S: Scalar>(cols: &Array2<S>, weight: &[S], bias: &[S]) -> Array2<S> {
    let cout = bias.len();
    let mut out = Array2::from_shape_fn((cout, cols.ncols()), |(o, _)| bias[o]);
    general_mat_mul(S::one(), &weight_matrix(weight, cout), cols, S::one(), &mut out);
    out
}

/// Accumulates weight and bias gradients; returns the patch gradient when
/// `want_input` is set.
fn conv_backward<S: Scalar>(
    cols: &Array2<S>,
    weight: &[S],
    dout: &Array2<S>,
    dweight: &mut [S],
    dbias: &mut [S],
    want_input: bool,
) -> Option<Array2<S>> {
    let cout = dbias.len();
    for (db, row) in dbias.iter_mut().zip(dout.rows()) {
        *db = *db + row.iter().copied().sum::<S>();
    }
    let mut dw = ArrayViewMut2::from_shape((cout, dweight.len() / cout), dweight).expect("weight shape");
    general_mat_mul(S::one(), dout, &cols.t(), S::one(), &mut dw);
    want_input.then(|| weight_matrix(weight, cout).t().dot(dout))
}

/// Intermediate activations kept for the backward pass.
struct Trace<S> {
    cols1: Array2<S>,
    a1: Array2<S>,
    cols2: Array2<S>,
    argmax: Vec<usize>,
    a2: Array2<S>,
    features: Vec<S>,
    h2: usize,
    w2: usize,
}

fn forward_trace<S: Scalar>(model: &TinyCnnModel<S>, x: &Input<S>) -> (Vec<S>, Trace<S>) {
    let (h, w) = (x.height, x.width);
    let cols1 = im2col(&x.data, 1, h, w);
    let a1 = conv_forward(&cols1, &model.conv1_weight, &model.conv1_bias);
    let a1s = a1.as_slice().expect("standard layout");

    let (h2, w2) = (h / 2, w / 2);
    let mut pooled = vec![S::zero(); CONV1_CHANNELS * h2 * w2];
    let mut argmax = vec![0usize; pooled.len()];
    for c in 0..CONV1_CHANNELS {
        for i in 0..h2 {
            for j in 0..w2 {
                let mut best_idx = c * h * w + 2 * i * w + 2 * j;
                let mut best = a1s[best_idx].max(S::zero());
                for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = c * h * w + (2 * i + di) * w + 2 * j + dj;
                    let v = a1s[idx].max(S::zero());
                    if v > best {
                        best = v;
                        best_idx = idx;
                    }
                }
                let o = (c * h2 + i) * w2 + j;
                pooled[o] = best;
                argmax[o] = best_idx;
            }
        }
    }

    let cols2 = im2col(&pooled, CONV1_CHANNELS, h2, w2);
    let a2 = conv_forward(&cols2, &model.conv2_weight, &model.conv2_bias);
    let area = cast::<S>((h2 * w2) as f64);
    let features: Vec<S> = a2
        .rows()
        .into_iter()
        .map(|plane| plane.iter().map(|v| v.max(S::zero())).sum::<S>() / area)
        .collect();

    let n = model.n_classes();
    let logits = (0..n)
        .map(|k| {
            model.fc_bias[k]
                + features
                    .iter()
                    .zip(&model.fc_weight[k * CONV2_CHANNELS..(k + 1) * CONV2_CHANNELS])
                    .map(|(f, w)| *f * *w)
                    .sum::<S>()
        })
        .collect();
    (logits, Trace { cols1, a1, cols2, argmax, a2, features, h2, w2 })
}

#[allow(clippy::needless_range_loop)]
fn backward<S: Scalar>(
    model: &TinyCnnModel<S>,
    trace: &Trace<S>,
    dlogits: &[S],
    grads: &mut Gradients<S>,
) {
    let (h2, w2) = (trace.h2, trace.w2);
    let n = model.n_classes();
    let mut dfeat = [S::zero(); CONV2_CHANNELS];
    for k in 0..n {
        let dz = dlogits[k];
        grads.fc_bias[k] = grads.fc_bias[k] + dz;
        for o in 0..CONV2_CHANNELS {
            let idx = k * CONV2_CHANNELS + o;
            grads.fc_weight[idx] = grads.fc_weight[idx] + dz * trace.features[o];
            dfeat[o] = dfeat[o] + dz * model.fc_weight[idx];
        }
    }

    let area = cast::<S>((h2 * w2) as f64);
    let mut da2 = trace.a2.clone();
    for (o, mut row) in da2.rows_mut().into_iter().enumerate() {
        let g = dfeat[o] / area;
        row.mapv_inplace(|a| if a > S::zero() { g } else { S::zero() });
    }
    let dcols2 = conv_backward(
        &trace.cols2,
        &model.conv2_weight,
        &da2,
        &mut grads.conv2_weight,
        &mut grads.conv2_bias,
        true,
    )
    .expect("input gradient requested");
    let mut dpooled = vec![S::zero(); trace.argmax.len()];
    col2im(&dcols2, CONV1_CHANNELS, h2, w2, &mut dpooled);

    let a1s = trace.a1.as_slice().expect("standard layout");
    let mut da1 = Array2::zeros(trace.a1.raw_dim());
    let da1s = da1.as_slice_mut().expect("standard layout");
    for (o, &src) in trace.argmax.iter().enumerate() {
        if a1s[src] > S::zero() {
            da1s[src] = da1s[src] + dpooled[o];
        }
    }
    conv_backward(
        &trace.cols1,
        &model.conv1_weight,
        &da1,
        &mut grads.conv1_weight,
        &mut grads.conv1_bias,
        false,
    );
}

/// Class scores for one input.
pub fn forward_input<S: Scalar>(model: &TinyCnnModel<S>, x: &Input<S>) -> Vec<S> {
    forward_trace(model, x).0
}

/// Class scores (logits) for a spectrogram, used as-is (no standardization).
pub fn forward<S: Scalar, X: TimeFrequency + ?Sized>(model: &TinyCnnModel<S>, x: &X) -> Result<Vec<S>> {
    Ok(forward_input(model, &Input::from_spectrogram(x)?))
}

pub fn softmax<S: Scalar>(logits: &[S]) -> Vec<S> {
    let max = logits.iter().copied().fold(S::neg_infinity(), S::max);
    let exps: Vec<S> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: S = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn argmax<S: Scalar>(v: &[S]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// A prepared network input with its label.
#[derive(Debug, Clone, PartialEq)]
pub struct Example<S> {
    pub input: Input<S>,
    pub label: Label,
}

/// Mean softmax cross-entropy over the batch and its gradient.
pub fn loss_and_grads<S: Scalar>(model: &TinyCnnModel<S>, batch: &[Example<S>]) -> Result<(S, Gradients<S>)> {
    let (loss, grads, _) = batch_step(model, batch)?;
    Ok((loss, grads))
}

/// Loss, gradients and the number of argmax-correct examples.
fn batch_step<S: Scalar>(model: &TinyCnnModel<S>, batch: &[Example<S>]) -> Result<(S, Gradients<S>, usize)> {
    if batch.is_empty() {
        return Err(Error::Config("cannot compute a loss on an empty batch".into()));
    }
    let n = model.n_classes();
    let scale = S::one() / cast::<S>(batch.len() as f64);
    let mut grads = TinyCnnModel::zeros(n);
    let mut loss = S::zero();
    let mut correct = 0;
    for ex in batch {
        let (logits, trace) = forward_trace(model, &ex.input);
        if argmax(&logits) == ex.label.index() {
            correct += 1;
        }
        let max = logits.iter().copied().fold(S::neg_infinity(), S::max);
        let log_total = logits.iter().map(|&z| (z - max).exp()).sum::<S>().ln() + max;
        loss = loss + (log_total - logits[ex.label.index()]) * scale;
        let probs = softmax(&logits);
        let dlogits: Vec<S> = probs
            .iter()
            .enumerate()
            .map(|(k, &p)| (if k == ex.label.index() { p - S::one() } else { p }) * scale)
            .collect();
        backward(model, &trace, &dlogits, &mut grads);
    }
    Ok((loss, grads, correct))
}

/// Which waveform a synthetic clip contains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SynthClass {
    PureTone,
    UpChirp,
    NoiseBurst,
    AmTone,
}

impl SynthClass {
    pub const ALL: [SynthClass; 4] = [
        SynthClass::PureTone,
        SynthClass::UpChirp,
        SynthClass::NoiseBurst,
        SynthClass::AmTone,
    ];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthDatasetSpec {
    /// Uses the first `n_classes` entries of [`SynthClass::ALL`].
    pub n_classes: usize,
    pub clips_per_class: usize,
    pub clip_seconds: f64,
    pub sample_rate: u32,
    pub seed: u64,
    /// Relative jitter applied to each class's base frequency.
    pub freq_jitter: f64,
}

impl Default for SynthDatasetSpec {
    fn default() -> Self {
        Self {
            n_classes: 4,
            clips_per_class: 100,
            clip_seconds: 1.0,
            sample_rate: 16_000,
            seed: 0,
            freq_jitter: 0.2,
        }
    }
}

pub const TONE_BASE_HZ: f64 = 1000.0;
pub const CHIRP_START_HZ: f64 = 250.0;
pub const CHIRP_SPAN: f64 = 16.0;
pub const AM_RATE_HZ: f64 = 4.0;
const BACKGROUND_LEVEL: f64 = 0.005;
const PEAK: f64 = 0.9;

fn synth_clip(class: SynthClass, spec: &SynthDatasetSpec, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let sr = f64::from(spec.sample_rate);
    let n = (spec.clip_seconds * sr).round() as usize;
    let jitter = |rng: &mut ChaCha8Rng| 1.0 + rng.random_range(-spec.freq_jitter..=spec.freq_jitter);
    let phase = rng.random_range(0.0..2.0 * PI);
    let mut x: Vec<f64> = match class {
        SynthClass::PureTone => {
            let f = TONE_BASE_HZ * jitter(rng);
            (0..n).map(|i| (2.0 * PI * f * i as f64 / sr + phase).sin()).collect()
        }
        SynthClass::UpChirp => {
            let f0 = CHIRP_START_HZ * jitter(rng);
            let rate = f0 * (CHIRP_SPAN - 1.0) / spec.clip_seconds;
            (0..n)
                .map(|i| {
                    let t = i as f64 / sr;
                    (2.0 * PI * (f0 * t + 0.5 * rate * t * t) + phase).sin()
                })
                .collect()
        }
        SynthClass::NoiseBurst => {
            let len = rng.random_range(0.25..0.5) * spec.clip_seconds;
            let onset = rng.random_range(0.0..spec.clip_seconds - len);
            let (a, b) = ((onset * sr) as usize, ((onset + len) * sr) as usize);
            (0..n)
                .map(|i| {
                    let v: f64 = rng.random_range(-1.0..1.0);
                    if (a..b).contains(&i) { v } else { 0.0 }
                })
                .collect()
        }
        SynthClass::AmTone => {
            let f = TONE_BASE_HZ * jitter(rng);
            let fm = AM_RATE_HZ * jitter(rng);
            let mod_phase = rng.random_range(0.0..2.0 * PI);
            (0..n)
                .map(|i| {
                    let t = i as f64 / sr;
                    let env = if (2.0 * PI * fm * t + mod_phase).sin() >= 0.0 { 1.0 } else { 0.0 };
                    env * (2.0 * PI * f * t + phase).sin()
                })
                .collect()
        }
    };
    for v in &mut x {
        *v += BACKGROUND_LEVEL * rng.random_range(-1.0..1.0);
    }
    let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        x.iter_mut().for_each(|v| *v *= PEAK / peak);
    }
    x
}

/// Generates a class-balanced labelled dataset, deterministic in `spec.seed`.
/// Items cycle through the classes, so any prefix whose length is a multiple
/// of `n_classes` is also balanced.
pub fn synth_dataset(spec: &SynthDatasetSpec) -> Result<Vec<(AudioClip, Label)>> {
    if !(1..=SynthClass::ALL.len()).contains(&spec.n_classes) {
        return Err(Error::Config(format!(
            "n_classes must be between 1 and {}",
            SynthClass::ALL.len()
        )));
    }
    if !(spec.clip_seconds > 0.0 && spec.clip_seconds.is_finite()) {
        return Err(Error::Config("clip duration must be positive".into()));
    }
    if !(0.0..1.0).contains(&spec.freq_jitter) {
        return Err(Error::Config("frequency jitter must lie in [0, 1)".into()));
    }
    let highest = CHIRP_START_HZ * (1.0 + spec.freq_jitter) * CHIRP_SPAN;
    if f64::from(spec.sample_rate) <= 2.0 * highest {
        return Err(Error::Config(format!(
            "sample rate {} Hz cannot carry the chirp class up to {highest} Hz",
            spec.sample_rate
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Vec::with_capacity(spec.n_classes * spec.clips_per_class);
    for _ in 0..spec.clips_per_class {
        for (idx, class) in SynthClass::ALL[..spec.n_classes].iter().enumerate() {
            let samples = synth_clip(*class, spec, &mut rng).into_iter().map(|v| v as f32).collect();
            out.push((AudioClip::new(samples, spec.sample_rate)?, Label(idx)));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub spectrogram: SpectrogramConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-2,
            batch_size: 16,
            epochs: 30,
            seed: 0,
            spectrogram: SpectrogramConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::Config("learning rate must be a non-negative real".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch size and epochs must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    /// Running accuracy over the epoch, scored before each batch's update.
    pub train_acc: f64,
    pub test_acc: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochStats>,
}

impl History {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,loss,train_acc,test_acc\n");
        for e in &self.epochs {
            let test = e.test_acc.map(|a| a.to_string()).unwrap_or_default();
            out.push_str(&format!("{},{},{},{}\n", e.epoch, e.loss, e.train_acc, test));
        }
        out
    }

    pub fn last(&self) -> Option<&EpochStats> {
        self.epochs.last()
    }
}

/// Log-mel, optional compression, then per-input standardization. Errors
/// carry the index of the offending clip.
pub fn prepare<S: Scalar>(
    dataset: &[(AudioClip, Label)],
    spectrogram: &SpectrogramConfig,
    frontend: Option<CompressionSpec>,
) -> Result<Vec<Example<S>>> {
    dataset
        .par_iter()
        .enumerate()
        .map(|(index, (clip, label))| {
            let wrap = |e: Error| Error::Frontend { index, source: Box::new(e) };
            let mel = log_mel(clip, spectrogram).map_err(wrap)?;
            let input = match frontend {
                Some(spec) => Input::standardized(&compress(&mel, spec).map_err(wrap)?),
                None => Input::standardized(&mel),
            }
            .map_err(wrap)?;
            Ok(Example { input, label: *label })
        })
        .collect()
}

/// Mini-batch SGD over prepared examples; reshuffles every epoch from
/// `cfg.seed`. Single-threaded and deterministic.
pub fn fit(
    mut model: TinyCnnModel<f32>,
    train_set: &[Example<f32>],
    test_set: Option<&[Example<f32>]>,
    cfg: &TrainConfig,
) -> Result<(TinyCnnModel<f32>, History)> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let lr = cfg.learning_rate as f32;
    let mut history = History::default();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0f64;
        let mut correct = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<Example<f32>> = chunk.iter().map(|&i| train_set[i].clone()).collect();
            let (loss, grads, hits) = batch_step(&model, &batch)?;
            correct += hits;
            loss_sum += f64::from(loss) * batch.len() as f64;
            model.sgd_step(&grads, lr);
        }
        if !model.is_finite() {
            return Err(Error::Config(format!(
                "parameters diverged at epoch {epoch}; lower the learning rate"
            )));
        }
        history.epochs.push(EpochStats {
            epoch,
            loss: loss_sum / train_set.len() as f64,
            train_acc: correct as f64 / train_set.len() as f64,
            test_acc: test_set.map(|t| accuracy(&model, t)),
        });
    }
    Ok((model, history))
}

/// Prepares the clips and trains on them.
pub fn train(
    model: TinyCnnModel<f32>,
    dataset: &[(AudioClip, Label)],
    frontend: Option<CompressionSpec>,
    cfg: &TrainConfig,
) -> Result<(TinyCnnModel<f32>, History)> {
    let examples = prepare(dataset, &cfg.spectrogram, frontend)?;
    fit(model, &examples, None, cfg)
}

/// Fraction of examples whose argmax logit equals the label. Examples are
/// scored in parallel; the model is read-only.
pub fn accuracy<S: Scalar>(model: &TinyCnnModel<S>, examples: &[Example<S>]) -> f64 {
    if examples.is_empty() {
        return 0.0;
    }
    let correct = examples
        .par_iter()
        .filter(|ex| argmax(&forward_input(model, &ex.input)) == ex.label.index())
        .count();
    correct as f64 / examples.len() as f64
}

/// Prepares the clips with the default spectrogram settings and scores them.
pub fn evaluate(
    model: &TinyCnnModel<f32>,
    dataset: &[(AudioClip, Label)],
    frontend: Option<CompressionSpec>,
) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::Config("evaluation set is empty".into()));
    }
    let examples = prepare(dataset, &SpectrogramConfig::default(), frontend)?;
    Ok(accuracy(model, &examples))
}

/// Settings for [`run_demo`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoConfig {
    pub frontend: Option<CompressionSpec>,
    pub train_clips_per_class: usize,
    pub test_clips_per_class: usize,
    pub train: TrainConfig,
}

impl Default for DemoConfig {
    fn default() -> Self {
        Self {
            frontend: None,
            train_clips_per_class: 100,
            test_clips_per_class: 50,
            train: TrainConfig::default(),
        }
    }
}

/// Test clips are drawn from `seed + DEMO_TEST_SEED_OFFSET` so they never
/// coincide with the training clips.
pub const DEMO_TEST_SEED_OFFSET: u64 = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoReport {
    pub seed: u64,
    pub frontend: Option<CompressionSpec>,
    pub train_clips: usize,
    pub test_clips: usize,
    pub test_accuracy: f64,
    /// Network input frames without and with the front-end.
    pub baseline_frames: usize,
    pub frames: usize,
    pub baseline_flops: u64,
    pub flops: u64,
    pub flops_ratio: f64,
    pub history: History,
    #[serde(skip)]
    pub model: Option<TinyCnnModel<f32>>,
}

/// Trains the tiny CNN on the synthetic set with `cfg.train.seed` driving the
/// data, initialization and shuffling; reports test accuracy and the model's
/// FLOPs (default convention) with and without the front-end.
pub fn run_demo(cfg: &DemoConfig) -> Result<DemoReport> {
    let seed = cfg.train.seed;
    let synth = |clips_per_class, seed| {
        synth_dataset(&SynthDatasetSpec { clips_per_class, seed, ..Default::default() })
    };
    let train_set = synth(cfg.train_clips_per_class, seed)?;
    let test_set = synth(cfg.test_clips_per_class, seed.wrapping_add(DEMO_TEST_SEED_OFFSET))?;
    if train_set.is_empty() || test_set.is_empty() {
        return Err(Error::Config("demo needs at least one clip per class in both splits".into()));
    }
    let train_ex = prepare(&train_set, &cfg.train.spectrogram, cfg.frontend)?;
    let test_ex = prepare(&test_set, &cfg.train.spectrogram, cfg.frontend)?;
    let n_classes = SynthDatasetSpec::default().n_classes;
    let (model, history) = fit(TinyCnnModel::init(n_classes, seed), &train_ex, Some(&test_ex), &cfg.train)?;

    let frames = train_ex[0].input.width;
    let baseline_frames = cfg.train.spectrogram.n_frames(train_set[0].0.len());
    let mut arch = builtin_arch("tinycnn").expect("bundled arch");
    arch.mel_bins = cfg.train.spectrogram.n_mels;
    let baseline_flops = model_flops(&arch, baseline_frames, Convention::default())?.total;
    let flops = model_flops(&arch, frames, Convention::default())?.total;
    Ok(DemoReport {
        seed,
        frontend: cfg.frontend,
        train_clips: train_ex.len(),
        test_clips: test_ex.len(),
        test_accuracy: accuracy(&model, &test_ex),
        baseline_frames,
        frames,
        baseline_flops,
        flops,
        flops_ratio: flops as f64 / baseline_flops as f64,
        history,
        model: Some(model),
    })
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SPFCNN01";

/// Checkpoint layout: magic, `u32` tensor count, then per tensor a `u32` rank,
/// `u32` dimensions and row-major little-endian `f32` values.
pub fn encode_checkpoint(model: &TinyCnnModel<f32>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&6u32.to_le_bytes());
    for (shape, values) in model.shapes().iter().zip(model.tensors()) {
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for d in shape {
            out.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<TinyCnnModel<f32>> {
    let bad = |msg: &str| Error::Container(format!("checkpoint: {msg}"));
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let end = pos.checked_add(n).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated"))?;
        let s = &bytes[pos..end];
        pos = end;
        Ok(s)
    };
    if take(8)? != CHECKPOINT_MAGIC {
        return Err(bad("bad magic"));
    }
    let read_u32 = |s: &[u8]| u32::from_le_bytes(s.try_into().expect("4 bytes")) as usize;
    if read_u32(take(4)?) != 6 {
        return Err(bad("expected 6 tensors"));
    }
    let mut tensors: Vec<(Vec<usize>, Vec<f32>)> = Vec::with_capacity(6);
    for _ in 0..6 {
        let rank = read_u32(take(4)?);
        if rank > 4 {
            return Err(bad("tensor rank too large"));
        }
        let shape: Vec<usize> = (0..rank).map(|_| take(4).map(read_u32)).collect::<Result<_>>()?;
        let len: usize = shape.iter().product();
        let raw = take(len.checked_mul(4).ok_or_else(|| bad("tensor too large"))?)?;
        let values = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        tensors.push((shape, values));
    }
    if pos != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    let n_classes = tensors[5].0.first().copied().ok_or_else(|| bad("empty output layer"))?;
    let mut model = TinyCnnModel::<f32>::zeros(n_classes);
    let expected = model.shapes();
    for (i, ((shape, values), slot)) in tensors.into_iter().zip(model.tensors_mut()).enumerate() {
        if shape != expected[i] {
            return Err(bad(&format!("{} has shape {shape:?}, expected {:?}", TENSOR_NAMES[i], expected[i])));
        }
        *slot = values;
    }
    if !model.is_finite() {
        return Err(bad("non-finite parameter"));
    }
    Ok(model)
}

pub fn save_checkpoint(path: impl AsRef<Path>, model: &TinyCnnModel<f32>) -> Result<()> {
    std::fs::write(path, encode_checkpoint(model))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<TinyCnnModel<f32>> {
    decode_checkpoint(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::stft_power;
    use ndarray::Array2;

    fn input(h: usize, w: usize, seed: u64) -> Input<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Input::new((0..h * w).map(|_| rng.random_range(-1.0..1.0)).collect(), h, w).unwrap()
    }

    #[test]
    fn zero_weights_give_the_bias() {
        let mut model = TinyCnnModel::<f64>::zeros(4);
        model.fc_bias = vec![0.5, -1.0, 2.0, 0.0];
        let x = Array2::<f64>::zeros((8, 8));
        assert_eq!(forward(&model, &x).unwrap(), vec![0.5, -1.0, 2.0, 0.0]);
    }

    #[test]
    fn logits_have_one_entry_per_class() {
        let model = TinyCnnModel::<f32>::init(3, 1);
        let x = Array2::from_shape_fn((64, 51), |(i, j)| ((i * j) % 7) as f64 - 3.0);
        let logits = forward(&model, &x).unwrap();
        assert_eq!(logits.len(), 3);
        assert!(logits.iter().all(|v| v.is_finite()));
    }

    /// Straight-line reference forward pass on an 8x8 input, written with
    /// explicit index arithmetic and no shared helpers.
    #[allow(clippy::needless_range_loop)]
    fn reference_forward(model: &TinyCnnModel<f64>, x: &[[f64; 8]; 8]) -> Vec<f64> {
        let at = |img: &dyn Fn(i64, i64) -> f64, i: i64, j: i64| -> f64 {
            if (0..8).contains(&i) && (0..8).contains(&j) { img(i, j) } else { 0.0 }
        };
        let mut r1 = [[[0.0; 8]; 8]; 8];
        for c in 0..8 {
            for i in 0..8 {
                for j in 0..8 {
                    let mut s = model.conv1_bias[c];
                    for di in 0..3 {
                        for dj in 0..3 {
                            let v = at(&|a, b| x[a as usize][b as usize], i as i64 + di - 1, j as i64 + dj - 1);
                            s += model.conv1_weight[c * 9 + (di * 3 + dj) as usize] * v;
                        }
                    }
                    r1[c][i][j] = s.max(0.0);
                }
            }
        }
        let mut p = [[[0.0; 4]; 4]; 8];
        for c in 0..8 {
            for i in 0..4 {
                for j in 0..4 {
                    p[c][i][j] = r1[c][2 * i][2 * j]
                        .max(r1[c][2 * i][2 * j + 1])
                        .max(r1[c][2 * i + 1][2 * j])
                        .max(r1[c][2 * i + 1][2 * j + 1]);
                }
            }
        }
        let mut feats = [0.0; 16];
        for o in 0..16 {
            let mut total = 0.0;
            for i in 0..4i64 {
                for j in 0..4i64 {
                    let mut s = model.conv2_bias[o];
                    for c in 0..8 {
                        for di in 0..3 {
                            for dj in 0..3 {
                                let (a, b) = (i + di - 1, j + dj - 1);
                                if (0..4).contains(&a) && (0..4).contains(&b) {
                                    s += model.conv2_weight[((o * 8 + c) * 3 + di as usize) * 3 + dj as usize]
                                        * p[c][a as usize][b as usize];
                                }
                            }
                        }
                    }
                    total += s.max(0.0);
                }
            }
            feats[o] = total / 16.0;
        }
        (0..model.n_classes())
            .map(|k| model.fc_bias[k] + (0..16).map(|o| model.fc_weight[k * 16 + o] * feats[o]).sum::<f64>())
            .collect()
    }

    #[test]
    fn forward_matches_reference_on_8x8() {
        let mut model = TinyCnnModel::<f64>::zeros(3);
        for (t, tensor) in model.tensors_mut().into_iter().enumerate() {
            for (i, v) in tensor.iter_mut().enumerate() {
                *v = (((i * 7 + t * 3) % 11) as f64 - 5.0) / 20.0;
            }
        }
        let mut x = [[0.0; 8]; 8];
        for (i, row) in x.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = ((i * 8 + j) % 5) as f64 - 2.0 + 0.1 * i as f64;
            }
        }
        let flat: Vec<f64> = x.iter().flatten().copied().collect();
        let got = forward_input(&model, &Input::new(flat, 8, 8).unwrap());
        let want = reference_forward(&model, &x);
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn narrow_inputs_are_rejected() {
        let model = TinyCnnModel::<f32>::init(4, 0);
        for (h, w) in [(64, 7), (7, 64), (64, 1)] {
            let x = Array2::<f64>::zeros((h, w));
            assert!(matches!(forward(&model, &x), Err(Error::InputTooShort(_))));
        }
        assert!(forward(&model, &Array2::<f64>::zeros((8, 8))).is_ok());
    }

    #[test]
    fn uniform_logits_give_ln4() {
        let model = TinyCnnModel::<f64>::zeros(4);
        let batch = vec![Example { input: input(8, 9, 1), label: Label(2) }];
        let (loss, grads) = loss_and_grads(&model, &batch).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-12);
        assert_eq!(grads.fc_bias, vec![0.25, 0.25, -0.75, 0.25]);
    }

    #[test]
    fn bias_gradient_is_mean_residual() {
        let model = TinyCnnModel::<f64>::init(4, 5);
        let batch: Vec<Example<f64>> = (0..3)
            .map(|i| Example { input: input(9, 10, i), label: Label(i as usize) })
            .collect();
        let (_, grads) = loss_and_grads(&model, &batch).unwrap();
        let mut expect = vec![0.0; 4];
        for ex in &batch {
            let p = softmax(&forward_input(&model, &ex.input));
            for k in 0..4 {
                expect[k] += (p[k] - if k == ex.label.index() { 1.0 } else { 0.0 }) / 3.0;
            }
        }
        for (a, b) in grads.fc_bias.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_batch_is_rejected() {
        let model = TinyCnnModel::<f64>::zeros(4);
        assert!(loss_and_grads(&model, &[]).is_err());
    }

    #[test]
    fn softmax_sums_to_one() {
        let p = softmax(&[1000.0f64, -3.0, 2.5, 0.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p.iter().all(|v| v.is_finite() && *v >= 0.0));
    }

    #[test]
    fn label_range() {
        assert!(Label::new(3, 4).is_ok());
        assert!(Label::new(4, 4).is_err());
    }

    #[test]
    fn dataset_is_deterministic_and_balanced() {
        let spec = SynthDatasetSpec { clips_per_class: 25, seed: 7, ..Default::default() };
        let a = synth_dataset(&spec).unwrap();
        let b = synth_dataset(&spec).unwrap();
        assert_eq!(a.len(), 100);
        assert!(a.iter().zip(&b).all(|(x, y)| x.1 == y.1
            && x.0.samples().iter().zip(y.0.samples()).all(|(p, q)| p.to_bits() == q.to_bits())));
        for k in 0..4 {
            assert_eq!(a.iter().filter(|(_, l)| l.index() == k).count(), 25);
        }
        for (clip, _) in &a {
            let peak = clip.samples().iter().fold(0.0f32, |m, v| m.max(v.abs()));
            assert!((peak - 0.9).abs() < 1e-6);
            assert_eq!(clip.len(), 16_000);
        }
        let other = synth_dataset(&SynthDatasetSpec { seed: 8, ..spec }).unwrap();
        assert_ne!(a[0].0, other[0].0);
    }

    #[test]
    fn tone_clips_peak_inside_the_jitter_band() {
        let spec = SynthDatasetSpec { n_classes: 1, clips_per_class: 10, seed: 3, ..Default::default() };
        let cfg = SpectrogramConfig::default();
        let bin_hz = 16_000.0 / 1024.0;
        let (lo, hi) = (TONE_BASE_HZ * 0.8 / bin_hz, TONE_BASE_HZ * 1.2 / bin_hz);
        for (clip, label) in synth_dataset(&spec).unwrap() {
            assert_eq!(label.index(), 0);
            let p = stft_power(&clip, &cfg).unwrap();
            let col = p.column(25);
            let peak = (0..col.len()).max_by(|&a, &b| col[a].total_cmp(&col[b])).unwrap() as f64;
            assert!(peak >= lo.floor() && peak <= hi.ceil(), "peak bin {peak}");
            // Naive DFT on the same frame agrees on the peak.
            let w = crate::features::hann_window(1024);
            let start = 25 * 320 - 512;
            let frame: Vec<f64> = (0..1024).map(|i| f64::from(clip.samples()[start + i]) * w[i]).collect();
            let dft_peak = (0..=512usize)
                .max_by(|&a, &b| {
                    let power = |k: usize| {
                        let (mut re, mut im) = (0.0, 0.0);
                        for (t, v) in frame.iter().enumerate() {
                            let ang = -2.0 * PI * ((k * t) % 1024) as f64 / 1024.0;
                            re += v * ang.cos();
                            im += v * ang.sin();
                        }
                        re * re + im * im
                    };
                    power(a).total_cmp(&power(b))
                })
                .unwrap() as f64;
            assert_eq!(dft_peak, peak);
        }
    }

    #[test]
    fn dataset_spec_validation() {
        assert!(synth_dataset(&SynthDatasetSpec { n_classes: 5, ..Default::default() }).is_err());
        assert!(synth_dataset(&SynthDatasetSpec { n_classes: 0, ..Default::default() }).is_err());
        assert!(synth_dataset(&SynthDatasetSpec { sample_rate: 8000, ..Default::default() }).is_err());
        assert!(synth_dataset(&SynthDatasetSpec { sample_rate: 11_025, clips_per_class: 1, ..Default::default() }).is_ok());
    }

    fn small_dataset(seed: u64) -> Vec<(AudioClip, Label)> {
        synth_dataset(&SynthDatasetSpec { clips_per_class: 3, clip_seconds: 0.3, seed, ..Default::default() }).unwrap()
    }

    #[test]
    fn zero_learning_rate_leaves_parameters() {
        let model = TinyCnnModel::<f32>::init(4, 9);
        let cfg = TrainConfig { learning_rate: 0.0, epochs: 2, batch_size: 4, ..Default::default() };
        let (trained, history) = train(model.clone(), &small_dataset(1), None, &cfg).unwrap();
        assert_eq!(trained, model);
        assert_eq!(history.epochs.len(), 2);
    }

    #[test]
    fn training_is_deterministic() {
        let data = small_dataset(2);
        let cfg = TrainConfig { epochs: 3, batch_size: 4, seed: 5, ..Default::default() };
        let a = train(TinyCnnModel::init(4, 1), &data, None, &cfg).unwrap();
        let b = train(TinyCnnModel::init(4, 1), &data, None, &cfg).unwrap();
        assert_eq!(a, b);
        assert!(a.0.is_finite());
    }

    #[test]
    fn frontend_errors_name_the_clip() {
        // 0.3 s at 16 kHz gives 16 frames; k = 1/4 leaves 4 < 8.
        let data = small_dataset(3);
        let err = train(TinyCnnModel::init(4, 1), &data, Some("avg:4".parse().unwrap()), &TrainConfig::default())
            .unwrap_err();
        match err {
            Error::Frontend { index, source } => {
                assert_eq!(index, 0);
                assert!(matches!(*source, Error::InputTooShort(_)));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn constant_predictor_scores_one_quarter() {
        let mut model = TinyCnnModel::<f32>::zeros(4);
        model.fc_bias[1] = 1.0;
        let data = small_dataset(4);
        assert_eq!(evaluate(&model, &data, None).unwrap(), 0.25);
    }

    #[test]
    fn history_csv() {
        let h = History {
            epochs: vec![
                EpochStats { epoch: 1, loss: 1.5, train_acc: 0.25, test_acc: None },
                EpochStats { epoch: 2, loss: 0.5, train_acc: 0.75, test_acc: Some(0.5) },
            ],
        };
        assert_eq!(h.to_csv(), "epoch,loss,train_acc,test_acc\n1,1.5,0.25,\n2,0.5,0.75,0.5\n");
    }

    #[test]
    fn checkpoint_round_trip() {
        let model = TinyCnnModel::<f32>::init(5, 3);
        let bytes = encode_checkpoint(&model);
        assert_eq!(decode_checkpoint(&bytes).unwrap(), model);
        assert!(decode_checkpoint(&bytes[..bytes.len() - 2]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'x';
        assert!(decode_checkpoint(&bad).is_err());
    }
}
