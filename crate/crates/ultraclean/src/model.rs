//! A small from-scratch convolutional classifier.
//!
//! Architecture: conv(C->8, 3x3, pad 1) / ReLU / maxpool 2x2 /
//! conv(8->16, 3x3, pad 1) / ReLU / maxpool 2x2 / dense -> num_classes.
//!
//! Parameters are stored as f32 (checkpoints round-trip bit-exactly) while
//! all arithmetic runs in f64, which keeps the backprop finite-difference
//! oracle comfortably inside its tolerance. Training is a fixed sequence of
//! operations: per-sample gradients inside a batch may be computed in
//! parallel but are always reduced in index order, so results are bitwise
//! independent of thread count.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dataio::{Image, LabeledDataset};
use crate::error::{Error, Result};

pub const CONV1_OUT: usize = 8;
pub const CONV2_OUT: usize = 16;
const KERNEL: usize = 3;

/// All weights and biases of the classifier plus its architecture descriptor.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub input_h: usize,
    pub input_w: usize,
    pub input_c: usize,
    pub num_classes: usize,
    /// conv1 weights, `[CONV1_OUT][input_c][3][3]` flattened.
    pub conv1_w: Vec<f32>,
    pub conv1_b: Vec<f32>,
    /// conv2 weights, `[CONV2_OUT][CONV1_OUT][3][3]` flattened.
    pub conv2_w: Vec<f32>,
    pub conv2_b: Vec<f32>,
    /// dense weights, `[num_classes][feature_len]` flattened.
    pub fc_w: Vec<f32>,
    pub fc_b: Vec<f32>,
    pub trained: bool,
    pub rng_seed: u64,
}

impl ModelParams {
    /// Length of the penultimate feature vector: 16 * (H/4) * (W/4).
    pub fn feature_len(&self) -> usize {
        CONV2_OUT * (self.input_h / 4) * (self.input_w / 4)
    }

    fn check_input(&self, img: &Image) -> Result<()> {
        if img.shape() != (self.input_h, self.input_w, self.input_c) {
            return Err(Error::Shape(format!(
                "input {:?} does not match model input {:?}",
                img.shape(),
                (self.input_h, self.input_w, self.input_c)
            )));
        }
        Ok(())
    }
}

/// Training hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub rng_seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must be in [0,1)".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be >= 0".into()));
        }
        Ok(())
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            epochs: 20,
            batch_size: 32,
            rng_seed: 0,
        }
    }
}

/// Per-epoch mean cross-entropy and the final training accuracy.
#[derive(Debug, Clone, Default)]
pub struct TrainStats {
    pub epoch_losses: Vec<f64>,
    pub final_train_accuracy: f64,
}

/// Objective whose gradient with respect to the input pixels is requested.
#[derive(Debug, Clone)]
pub enum Objective<'a> {
    /// Cross-entropy of the softmax output against `label`.
    LabelLoss { label: usize },
    /// Squared L2 distance between the penultimate features and `reference`.
    FeatureDistance { reference: &'a [f64] },
    /// Squared error between one pre-softmax logit and a target value.
    UnitActivation { unit: usize, target: f64 },
}

/// Deterministic fan-in-scaled uniform initialization; biases start at zero.
/// Input sides must be divisible by 4 (two 2x2 pools).
pub fn init(input_shape: (usize, usize, usize), num_classes: usize, seed: u64) -> Result<ModelParams> {
    let (h, w, c) = input_shape;
    if h % 4 != 0 || w % 4 != 0 || h == 0 || w == 0 {
        return Err(Error::Shape(format!("input sides must be multiples of 4, got {h}x{w}")));
    }
    if c != 1 && c != 3 {
        return Err(Error::Shape(format!("input channels must be 1 or 3, got {c}")));
    }
    if num_classes < 2 {
        return Err(Error::Config("num_classes must be >= 2".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut uniform = |count: usize, fan_in: usize| -> Vec<f32> {
        let bound = (6.0 / fan_in as f64).sqrt();
        (0..count).map(|_| rng.gen_range(-bound..bound) as f32).collect()
    };
    let feature_len = CONV2_OUT * (h / 4) * (w / 4);
    Ok(ModelParams {
        input_h: h,
        input_w: w,
        input_c: c,
        num_classes,
        conv1_w: uniform(CONV1_OUT * c * KERNEL * KERNEL, c * KERNEL * KERNEL),
        conv1_b: vec![0.0; CONV1_OUT],
        conv2_w: uniform(CONV2_OUT * CONV1_OUT * KERNEL * KERNEL, CONV1_OUT * KERNEL * KERNEL),
        conv2_b: vec![0.0; CONV2_OUT],
        fc_w: uniform(num_classes * feature_len, feature_len),
        fc_b: vec![0.0; num_classes],
        trained: false,
        rng_seed: seed,
    })
}

// ---------------------------------------------------------------------------
// Forward / backward core
// ---------------------------------------------------------------------------

struct Trace {
    input: Vec<f64>, // CHW
    z1: Vec<f64>,
    pool1: Vec<f64>,
    arg1: Vec<u8>,
    z2: Vec<f64>,
    pool2: Vec<f64>,
    arg2: Vec<u8>,
    logits: Vec<f64>,
}

fn hwc_to_chw(img: &Image) -> Vec<f64> {
    let (h, w, c) = img.shape();
    let mut out = vec![0.0f64; h * w * c];
    let data = img.data();
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                out[ch * h * w + y * w + x] = data[(y * w + x) * c + ch] as f64;
            }
        }
    }
    out
}

fn chw_to_hwc(grad: &[f64], h: usize, w: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0f64; h * w * c];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                out[(y * w + x) * c + ch] = grad[ch * h * w + y * w + x];
            }
        }
    }
    out
}

/// 3x3 convolution with zero padding 1; input and output are CHW planes.
fn conv_forward(
    input: &[f64],
    h: usize,
    w: usize,
    in_c: usize,
    weights: &[f32],
    biases: &[f32],
    out_c: usize,
) -> Vec<f64> {
    let mut out = vec![0.0f64; out_c * h * w];
    for o in 0..out_c {
        let out_plane = &mut out[o * h * w..(o + 1) * h * w];
        out_plane.iter_mut().for_each(|v| *v = biases[o] as f64);
        for ic in 0..in_c {
            let in_plane = &input[ic * h * w..(ic + 1) * h * w];
            let wbase = (o * in_c + ic) * KERNEL * KERNEL;
            for ky in 0..KERNEL {
                for kx in 0..KERNEL {
                    let wv = weights[wbase + ky * KERNEL + kx] as f64;
                    if wv == 0.0 {
                        continue;
                    }
                    let dy = ky as isize - 1;
                    let dx = kx as isize - 1;
                    let y_lo = (-dy).max(0) as usize;
                    let y_hi = ((h as isize - dy).min(h as isize)) as usize;
                    let x_lo = (-dx).max(0) as usize;
                    let x_hi = ((w as isize - dx).min(w as isize)) as usize;
                    for y in y_lo..y_hi {
                        let src = ((y as isize + dy) as usize) * w;
                        let dst = y * w;
                        for x in x_lo..x_hi {
                            out_plane[dst + x] += wv * in_plane[src + (x as isize + dx) as usize];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradients of a 3x3 pad-1 convolution. Returns (dweights, dbiases, dinput).
fn conv_backward(
    dout: &[f64],
    input: &[f64],
    h: usize,
    w: usize,
    in_c: usize,
    weights: &[f32],
    out_c: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut dw = vec![0.0f64; out_c * in_c * KERNEL * KERNEL];
    let mut db = vec![0.0f64; out_c];
    let mut dinput = vec![0.0f64; in_c * h * w];
    for o in 0..out_c {
        let dout_plane = &dout[o * h * w..(o + 1) * h * w];
        db[o] += dout_plane.iter().sum::<f64>();
        for ic in 0..in_c {
            let in_plane = &input[ic * h * w..(ic + 1) * h * w];
            let din_plane = &mut dinput[ic * h * w..(ic + 1) * h * w];
            let wbase = (o * in_c + ic) * KERNEL * KERNEL;
            for ky in 0..KERNEL {
                for kx in 0..KERNEL {
                    let dy = ky as isize - 1;
                    let dx = kx as isize - 1;
                    let y_lo = (-dy).max(0) as usize;
                    let y_hi = ((h as isize - dy).min(h as isize)) as usize;
                    let x_lo = (-dx).max(0) as usize;
                    let x_hi = ((w as isize - dx).min(w as isize)) as usize;
                    let mut wgrad = 0.0f64;
                    let wv = weights[wbase + ky * KERNEL + kx] as f64;
                    for y in y_lo..y_hi {
                        let src = ((y as isize + dy) as usize) * w;
                        let dst = y * w;
                        for x in x_lo..x_hi {
                            let g = dout_plane[dst + x];
                            let xi = src + (x as isize + dx) as usize;
                            wgrad += g * in_plane[xi];
                            din_plane[xi] += g * wv;
                        }
                    }
                    dw[wbase + ky * KERNEL + kx] += wgrad;
                }
            }
        }
    }
    (dw, db, dinput)
}

/// ReLU + 2x2 max pooling in one pass, recording the winning offset
/// (first maximum in scan order) for the backward scatter.
fn relu_pool(z: &[f64], h: usize, w: usize, c: usize) -> (Vec<f64>, Vec<u8>) {
    let (ph, pw) = (h / 2, w / 2);
    let mut out = vec![0.0f64; c * ph * pw];
    let mut arg = vec![0u8; c * ph * pw];
    for ch in 0..c {
        let plane = &z[ch * h * w..(ch + 1) * h * w];
        for py in 0..ph {
            for px in 0..pw {
                let mut best = f64::NEG_INFINITY;
                let mut best_at = 0u8;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let v = plane[(py * 2 + dy) * w + px * 2 + dx].max(0.0);
                        if v > best {
                            best = v;
                            best_at = (dy * 2 + dx) as u8;
                        }
                    }
                }
                out[ch * ph * pw + py * pw + px] = best;
                arg[ch * ph * pw + py * pw + px] = best_at;
            }
        }
    }
    (out, arg)
}

/// Backward of relu_pool: routes each pooled gradient to the winning cell,
/// gated by the ReLU mask (z > 0).
fn relu_pool_backward(
    dpool: &[f64],
    arg: &[u8],
    z: &[f64],
    h: usize,
    w: usize,
    c: usize,
) -> Vec<f64> {
    let (ph, pw) = (h / 2, w / 2);
    let mut dz = vec![0.0f64; c * h * w];
    for ch in 0..c {
        for py in 0..ph {
            for px in 0..pw {
                let i = ch * ph * pw + py * pw + px;
                let a = arg[i] as usize;
                let (dy, dx) = (a / 2, a % 2);
                let zi = ch * h * w + (py * 2 + dy) * w + px * 2 + dx;
                if z[zi] > 0.0 {
                    dz[zi] = dpool[i];
                }
            }
        }
    }
    dz
}

fn forward_trace(params: &ModelParams, img: &Image) -> Trace {
    let (h, w, c) = (params.input_h, params.input_w, params.input_c);
    let input = hwc_to_chw(img);
    let z1 = conv_forward(&input, h, w, c, &params.conv1_w, &params.conv1_b, CONV1_OUT);
    let (pool1, arg1) = relu_pool(&z1, h, w, CONV1_OUT);
    let (h1, w1) = (h / 2, w / 2);
    let z2 = conv_forward(&pool1, h1, w1, CONV1_OUT, &params.conv2_w, &params.conv2_b, CONV2_OUT);
    let (pool2, arg2) = relu_pool(&z2, h1, w1, CONV2_OUT);
    let feat = &pool2;
    let mut logits = vec![0.0f64; params.num_classes];
    for (k, logit) in logits.iter_mut().enumerate() {
        let row = &params.fc_w[k * feat.len()..(k + 1) * feat.len()];
        let mut acc = params.fc_b[k] as f64;
        for (wv, fv) in row.iter().zip(feat.iter()) {
            acc += *wv as f64 * fv;
        }
        *logit = acc;
    }
    Trace { input, z1, pool1, arg1, z2, pool2, arg2, logits }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Softmax probabilities for one input.
pub fn forward_softmax(params: &ModelParams, img: &Image) -> Result<Vec<f64>> {
    params.check_input(img)?;
    Ok(softmax(&forward_trace(params, img).logits))
}

/// Raw pre-softmax logits (the Trojan attack optimizes one of these).
pub fn forward_logits(params: &ModelParams, img: &Image) -> Result<Vec<f64>> {
    params.check_input(img)?;
    Ok(forward_trace(params, img).logits)
}

/// Penultimate features: the flattened post-pool activations.
pub fn features(params: &ModelParams, img: &Image) -> Result<Vec<f64>> {
    params.check_input(img)?;
    Ok(forward_trace(params, img).pool2)
}

/// Arg-max prediction; ties break toward the lowest class index.
pub fn predict(params: &ModelParams, img: &Image) -> Result<usize> {
    let logits = forward_logits(params, img)?;
    let mut best = 0usize;
    for (k, &l) in logits.iter().enumerate() {
        if l > logits[best] {
            best = k;
        }
    }
    Ok(best)
}

/// Parameter-shaped gradient accumulator.
#[derive(Clone)]
struct Grads {
    conv1_w: Vec<f64>,
    conv1_b: Vec<f64>,
    conv2_w: Vec<f64>,
    conv2_b: Vec<f64>,
    fc_w: Vec<f64>,
    fc_b: Vec<f64>,
}

impl Grads {
    fn zeros(params: &ModelParams) -> Self {
        Self {
            conv1_w: vec![0.0; params.conv1_w.len()],
            conv1_b: vec![0.0; params.conv1_b.len()],
            conv2_w: vec![0.0; params.conv2_w.len()],
            conv2_b: vec![0.0; params.conv2_b.len()],
            fc_w: vec![0.0; params.fc_w.len()],
            fc_b: vec![0.0; params.fc_b.len()],
        }
    }

    fn add(&mut self, other: &Grads) {
        for (a, b) in self.conv1_w.iter_mut().zip(&other.conv1_w) {
            *a += b;
        }
        for (a, b) in self.conv1_b.iter_mut().zip(&other.conv1_b) {
            *a += b;
        }
        for (a, b) in self.conv2_w.iter_mut().zip(&other.conv2_w) {
            *a += b;
        }
        for (a, b) in self.conv2_b.iter_mut().zip(&other.conv2_b) {
            *a += b;
        }
        for (a, b) in self.fc_w.iter_mut().zip(&other.fc_w) {
            *a += b;
        }
        for (a, b) in self.fc_b.iter_mut().zip(&other.fc_b) {
            *a += b;
        }
    }
}

/// Full backward pass from a logit-space (or feature-space) gradient.
/// Returns parameter gradients and the input gradient in CHW layout.
fn backward(
    params: &ModelParams,
    trace: &Trace,
    dlogits: Option<&[f64]>,
    dfeat_direct: Option<&[f64]>,
) -> (Grads, Vec<f64>) {
    let (h, w, c) = (params.input_h, params.input_w, params.input_c);
    let (h1, w1) = (h / 2, w / 2);
    let feat_len = trace.pool2.len();
    let mut grads = Grads::zeros(params);

    let mut dfeat = vec![0.0f64; feat_len];
    if let Some(dl) = dlogits {
        for (k, &g) in dl.iter().enumerate() {
            grads.fc_b[k] = g;
            let row = &params.fc_w[k * feat_len..(k + 1) * feat_len];
            let grow = &mut grads.fc_w[k * feat_len..(k + 1) * feat_len];
            for i in 0..feat_len {
                grow[i] = g * trace.pool2[i];
                dfeat[i] += g * row[i] as f64;
            }
        }
    }
    if let Some(df) = dfeat_direct {
        for (a, b) in dfeat.iter_mut().zip(df) {
            *a += b;
        }
    }

    let dz2 = relu_pool_backward(&dfeat, &trace.arg2, &trace.z2, h1, w1, CONV2_OUT);
    let (dw2, db2, dpool1) =
        conv_backward(&dz2, &trace.pool1, h1, w1, CONV1_OUT, &params.conv2_w, CONV2_OUT);
    grads.conv2_w = dw2;
    grads.conv2_b = db2;

    let dz1 = relu_pool_backward(&dpool1, &trace.arg1, &trace.z1, h, w, CONV1_OUT);
    let (dw1, db1, dinput) = conv_backward(&dz1, &trace.input, h, w, c, &params.conv1_w, CONV1_OUT);
    grads.conv1_w = dw1;
    grads.conv1_b = db1;

    (grads, dinput)
}

/// Exact backpropagated gradient of the named objective with respect to the
/// input pixels, returned in the image's HWC layout.
pub fn input_gradient(params: &ModelParams, img: &Image, objective: &Objective) -> Result<Vec<f64>> {
    params.check_input(img)?;
    let trace = forward_trace(params, img);
    let (dlogits, dfeat): (Option<Vec<f64>>, Option<Vec<f64>>) = match objective {
        Objective::LabelLoss { label } => {
            if *label >= params.num_classes {
                return Err(Error::Config(format!(
                    "label {label} >= num_classes {}",
                    params.num_classes
                )));
            }
            let mut d = softmax(&trace.logits);
            d[*label] -= 1.0;
            (Some(d), None)
        }
        Objective::FeatureDistance { reference } => {
            if reference.len() != trace.pool2.len() {
                return Err(Error::Shape(format!(
                    "reference feature length {} != {}",
                    reference.len(),
                    trace.pool2.len()
                )));
            }
            let d: Vec<f64> =
                trace.pool2.iter().zip(reference.iter()).map(|(f, r)| 2.0 * (f - r)).collect();
            (None, Some(d))
        }
        Objective::UnitActivation { unit, target } => {
            if *unit >= params.num_classes {
                return Err(Error::Config(format!(
                    "unit {unit} >= num_classes {}",
                    params.num_classes
                )));
            }
            let mut d = vec![0.0f64; params.num_classes];
            d[*unit] = 2.0 * (trace.logits[*unit] - target);
            (Some(d), None)
        }
    };
    let (_, dinput) = backward(params, &trace, dlogits.as_deref(), dfeat.as_deref());
    Ok(chw_to_hwc(&dinput, params.input_h, params.input_w, params.input_c))
}

fn sample_loss_and_grads(params: &ModelParams, img: &Image, label: usize) -> (f64, Grads) {
    let trace = forward_trace(params, img);
    let probs = softmax(&trace.logits);
    let loss = -(probs[label].max(1e-300)).ln();
    let mut dlogits = probs;
    dlogits[label] -= 1.0;
    let (grads, _) = backward(params, &trace, Some(&dlogits), None);
    (loss, grads)
}

/// SGD with momentum and weight decay over shuffled mini-batches.
///
/// Deterministic for a fixed `(params, ds, cfg)`. With `epochs == 0` the
/// parameters are returned unchanged and the trained flag is not set.
pub fn train(
    params: &ModelParams,
    ds: &LabeledDataset,
    cfg: &TrainConfig,
) -> Result<(ModelParams, TrainStats)> {
    cfg.validate()?;
    if ds.is_empty() {
        return Err(Error::Usage("cannot train on an empty dataset".into()));
    }
    if ds.num_classes != params.num_classes {
        return Err(Error::Shape(format!(
            "dataset has {} classes, model {}",
            ds.num_classes, params.num_classes
        )));
    }
    params.check_input(&ds.images[0])?;
    let mut out = params.clone();
    if cfg.epochs == 0 {
        return Ok((out, TrainStats::default()));
    }

    let mut velocity = Grads::zeros(params);
    let mut stats = TrainStats::default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let n = ds.len();
    let mut order: Vec<usize> = (0..n).collect();

    for _epoch in 0..cfg.epochs {
        // Fisher-Yates from the config stream; one shuffle per epoch.
        for i in (1..n).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let mut epoch_loss = 0.0f64;
        for batch in order.chunks(cfg.batch_size) {
            // Per-sample gradients in parallel, reduced in index order.
            let results: Vec<(f64, Grads)> = batch
                .par_iter()
                .map(|&i| sample_loss_and_grads(&out, &ds.images[i], ds.labels[i]))
                .collect();
            let mut sum = Grads::zeros(&out);
            for (loss, g) in &results {
                epoch_loss += loss;
                sum.add(g);
            }
            let scale = 1.0 / batch.len() as f64;
            update(&mut out.conv1_w, &mut velocity.conv1_w, &sum.conv1_w, scale, cfg);
            update(&mut out.conv1_b, &mut velocity.conv1_b, &sum.conv1_b, scale, cfg);
            update(&mut out.conv2_w, &mut velocity.conv2_w, &sum.conv2_w, scale, cfg);
            update(&mut out.conv2_b, &mut velocity.conv2_b, &sum.conv2_b, scale, cfg);
            update(&mut out.fc_w, &mut velocity.fc_w, &sum.fc_w, scale, cfg);
            update(&mut out.fc_b, &mut velocity.fc_b, &sum.fc_b, scale, cfg);
        }
        stats.epoch_losses.push(epoch_loss / n as f64);
    }
    out.trained = true;
    stats.final_train_accuracy = evaluate(&out, ds)?;
    Ok((out, stats))
}

fn update(theta: &mut [f32], velocity: &mut [f64], grad_sum: &[f64], scale: f64, cfg: &TrainConfig) {
    for ((t, v), g) in theta.iter_mut().zip(velocity.iter_mut()).zip(grad_sum) {
        let grad = g * scale + cfg.weight_decay * *t as f64;
        *v = cfg.momentum * *v + grad;
        *t = (*t as f64 - cfg.learning_rate * *v) as f32;
    }
}

/// Arg-max accuracy over a dataset. Requires a trained model.
pub fn evaluate(params: &ModelParams, ds: &LabeledDataset) -> Result<f64> {
    if !params.trained {
        return Err(Error::Usage("model is not trained".into()));
    }
    if ds.is_empty() {
        return Err(Error::Usage("cannot evaluate on an empty dataset".into()));
    }
    let correct: usize = ds
        .images
        .par_iter()
        .zip(&ds.labels)
        .map(|(img, &label)| (predict(params, img).unwrap() == label) as usize)
        .sum();
    Ok(correct as f64 / ds.len() as f64)
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------
//
// Layout (little-endian): magic "UCMP", version u16, input h/w/c u32,
// num_classes u32, rng_seed u64, trained u8, then six tensors, each as
// ndim u8, dims u32 x ndim, f32 data.

const CKPT_MAGIC: &[u8; 4] = b"UCMP";
const CKPT_VERSION: u16 = 1;

pub fn save_params(params: &ModelParams, path: impl AsRef<Path>) -> Result<()> {
    let mut out = BufWriter::new(File::create(path.as_ref())?);
    out.write_all(CKPT_MAGIC)?;
    out.write_all(&CKPT_VERSION.to_le_bytes())?;
    for dim in [params.input_h, params.input_w, params.input_c, params.num_classes] {
        out.write_all(&(dim as u32).to_le_bytes())?;
    }
    out.write_all(&params.rng_seed.to_le_bytes())?;
    out.write_all(&[params.trained as u8])?;
    let feat = params.feature_len();
    let tensors: [(&[f32], Vec<usize>); 6] = [
        (&params.conv1_w, vec![CONV1_OUT, params.input_c, KERNEL, KERNEL]),
        (&params.conv1_b, vec![CONV1_OUT]),
        (&params.conv2_w, vec![CONV2_OUT, CONV1_OUT, KERNEL, KERNEL]),
        (&params.conv2_b, vec![CONV2_OUT]),
        (&params.fc_w, vec![params.num_classes, feat]),
        (&params.fc_b, vec![params.num_classes]),
    ];
    for (data, dims) in tensors {
        out.write_all(&[dims.len() as u8])?;
        for d in &dims {
            out.write_all(&(*d as u32).to_le_bytes())?;
        }
        for v in data {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn load_params(path: impl AsRef<Path>) -> Result<ModelParams> {
    let file = File::open(path.as_ref())?;
    let mut reader = BufReader::new(file);
    let corrupt = |what: &str| Error::Format(format!("corrupt checkpoint: truncated at {what}"));

    let mut magic = [0u8; 4];
    reader.read_exact(&mut magic).map_err(|_| corrupt("magic"))?;
    if &magic != CKPT_MAGIC {
        return Err(Error::Format("corrupt checkpoint: bad magic".into()));
    }
    let mut b2 = [0u8; 2];
    reader.read_exact(&mut b2).map_err(|_| corrupt("version"))?;
    let version = u16::from_le_bytes(b2);
    if version != CKPT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let mut b4 = [0u8; 4];
    let mut read_u32 = |reader: &mut BufReader<File>, what: &str| -> Result<usize> {
        reader.read_exact(&mut b4).map_err(|_| corrupt(what))?;
        Ok(u32::from_le_bytes(b4) as usize)
    };
    let h = read_u32(&mut reader, "height")?;
    let w = read_u32(&mut reader, "width")?;
    let c = read_u32(&mut reader, "channels")?;
    let num_classes = read_u32(&mut reader, "class count")?;
    let mut b8 = [0u8; 8];
    reader.read_exact(&mut b8).map_err(|_| corrupt("seed"))?;
    let rng_seed = u64::from_le_bytes(b8);
    let mut b1 = [0u8; 1];
    reader.read_exact(&mut b1).map_err(|_| corrupt("trained flag"))?;
    let trained = b1[0] != 0;

    if h % 4 != 0 || w % 4 != 0 || h == 0 || w == 0 {
        return Err(Error::Shape(format!("checkpoint input {h}x{w} is not a multiple of 4")));
    }
    let feat = CONV2_OUT * (h / 4) * (w / 4);
    let expected: [Vec<usize>; 6] = [
        vec![CONV1_OUT, c, KERNEL, KERNEL],
        vec![CONV1_OUT],
        vec![CONV2_OUT, CONV1_OUT, KERNEL, KERNEL],
        vec![CONV2_OUT],
        vec![num_classes, feat],
        vec![num_classes],
    ];
    let mut tensors: Vec<Vec<f32>> = Vec::with_capacity(6);
    for dims_expected in &expected {
        let mut nd = [0u8; 1];
        reader.read_exact(&mut nd).map_err(|_| corrupt("tensor rank"))?;
        let mut dims = Vec::with_capacity(nd[0] as usize);
        for _ in 0..nd[0] {
            let mut d = [0u8; 4];
            reader.read_exact(&mut d).map_err(|_| corrupt("tensor dims"))?;
            dims.push(u32::from_le_bytes(d) as usize);
        }
        if &dims != dims_expected {
            return Err(Error::Shape(format!(
                "checkpoint tensor shape {dims:?} does not match architecture {dims_expected:?}"
            )));
        }
        let count: usize = dims.iter().product();
        let mut data = Vec::with_capacity(count);
        for _ in 0..count {
            let mut fb = [0u8; 4];
            reader.read_exact(&mut fb).map_err(|_| corrupt("tensor data"))?;
            data.push(f32::from_le_bytes(fb));
        }
        tensors.push(data);
    }
    let fc_b = tensors.pop().unwrap();
    let fc_w = tensors.pop().unwrap();
    let conv2_b = tensors.pop().unwrap();
    let conv2_w = tensors.pop().unwrap();
    let conv1_b = tensors.pop().unwrap();
    let conv1_w = tensors.pop().unwrap();
    Ok(ModelParams {
        input_h: h,
        input_w: w,
        input_c: c,
        num_classes,
        conv1_w,
        conv1_b,
        conv2_w,
        conv2_b,
        fc_w,
        fc_b,
        trained,
        rng_seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::generate_synthetic;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(seed: u64, h: usize, w: usize, c: usize) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..h * w * c).map(|_| rng.gen_range(0.0..=1.0)).collect();
        Image::new(h, w, c, data).unwrap()
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let a = init((16, 16, 3), 10, 42).unwrap();
        let b = init((16, 16, 3), 10, 42).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.fc_b.len(), 10);
        let bound1 = (6.0f64 / (3 * 9) as f64).sqrt() as f32;
        assert!(a.conv1_w.iter().all(|w| w.abs() <= bound1));
        let bound_fc = (6.0f64 / a.feature_len() as f64).sqrt() as f32;
        assert!(a.fc_w.iter().all(|w| w.abs() <= bound_fc));
    }

    #[test]
    fn init_rejects_bad_shapes() {
        assert!(init((15, 16, 3), 10, 0).is_err());
        assert!(init((16, 16, 2), 10, 0).is_err());
    }

    #[test]
    fn softmax_sums_to_one() {
        let params = init((16, 16, 3), 10, 1).unwrap();
        let img = random_image(2, 16, 16, 3);
        let probs = forward_softmax(&params, &img).unwrap();
        let sum: f64 = probs.iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
        assert!(probs.iter().all(|&p| p >= 0.0));
    }

    #[test]
    fn zeroed_params_give_uniform_output() {
        let mut params = init((16, 16, 3), 4, 1).unwrap();
        params.conv1_w.iter_mut().for_each(|w| *w = 0.0);
        params.conv2_w.iter_mut().for_each(|w| *w = 0.0);
        params.fc_w.iter_mut().for_each(|w| *w = 0.0);
        let probs = forward_softmax(&params, &random_image(3, 16, 16, 3)).unwrap();
        for &p in &probs {
            assert!((p - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_shift_invariance_via_biases() {
        let params = init((16, 16, 3), 5, 7).unwrap();
        let img = random_image(4, 16, 16, 3);
        let base = forward_softmax(&params, &img).unwrap();
        let mut shifted = params.clone();
        shifted.fc_b.iter_mut().for_each(|b| *b += 3.5);
        let out = forward_softmax(&shifted, &img).unwrap();
        for (a, b) in base.iter().zip(&out) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn features_shape_and_nonnegativity() {
        let params = init((16, 16, 3), 10, 1).unwrap();
        let img = random_image(5, 16, 16, 3);
        let f = features(&params, &img).unwrap();
        assert_eq!(f.len(), 16 * 4 * 4);
        assert!(f.iter().all(|&v| v >= 0.0));
        let again = features(&params, &img).unwrap();
        assert_eq!(f, again);
    }

    #[test]
    fn features_of_zero_image_follow_biases() {
        let mut params = init((16, 16, 3), 4, 1).unwrap();
        params.conv1_w.iter_mut().for_each(|w| *w = 0.0);
        params.conv2_w.iter_mut().for_each(|w| *w = 0.0);
        params.conv1_b.iter_mut().for_each(|b| *b = 0.2);
        params.conv2_b.iter_mut().for_each(|b| *b = 0.3);
        let f = features(&params, &Image::zeros(16, 16, 3)).unwrap();
        // conv2 sees constant 0.2 but has zero weights, so only its bias remains.
        let expect = 0.3f32 as f64;
        assert!(f.iter().all(|&v| (v - expect).abs() < 1e-12));
    }

    #[test]
    fn shape_mismatch_rejected() {
        let params = init((16, 16, 3), 10, 1).unwrap();
        let img = random_image(5, 16, 16, 1);
        assert!(forward_softmax(&params, &img).is_err());
    }

    /// Central finite differences on f32 storage: perturb the stored value,
    /// measure the realized spacing, and divide by it.
    fn fd_input(params: &ModelParams, img: &Image, obj: &Objective, idx: usize) -> f64 {
        let h = 1e-3f32;
        let (ih, iw, ic) = img.shape();
        let mut plus = img.data().to_vec();
        let mut minus = plus.clone();
        let base = plus[idx];
        plus[idx] = base + h;
        minus[idx] = base - h;
        let spacing = (plus[idx] - minus[idx]) as f64;
        let img_p = Image::new(ih, iw, ic, plus).unwrap();
        let img_m = Image::new(ih, iw, ic, minus).unwrap();
        (objective_value(params, &img_p, obj) - objective_value(params, &img_m, obj)) / spacing
    }

    fn objective_value(params: &ModelParams, img: &Image, obj: &Objective) -> f64 {
        match obj {
            Objective::LabelLoss { label } => {
                let probs = forward_softmax(params, img).unwrap();
                -probs[*label].ln()
            }
            Objective::FeatureDistance { reference } => {
                let f = features(params, img).unwrap();
                f.iter().zip(reference.iter()).map(|(a, b)| (a - b) * (a - b)).sum()
            }
            Objective::UnitActivation { unit, target } => {
                let logits = forward_logits(params, img).unwrap();
                (logits[*unit] - target) * (logits[*unit] - target)
            }
        }
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let params = init((16, 16, 3), 6, 11).unwrap();
        // Keep pixels away from 0/1 so x +/- h stays in range.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data: Vec<f32> = (0..16 * 16 * 3).map(|_| rng.gen_range(0.1..0.9)).collect();
        let img = Image::new(16, 16, 3, data).unwrap();
        let reference: Vec<f64> = (0..params.feature_len()).map(|i| (i % 7) as f64 * 0.1).collect();
        let objectives = [
            Objective::LabelLoss { label: 2 },
            Objective::FeatureDistance { reference: &reference },
            Objective::UnitActivation { unit: 1, target: 10.0 },
        ];
        for obj in &objectives {
            let grad = input_gradient(&params, &img, obj).unwrap();
            for k in 0..25 {
                let idx = rng.gen_range(0..grad.len());
                let fd = fd_input(&params, &img, obj, idx);
                let an = grad[idx];
                let denom = fd.abs().max(an.abs()).max(1e-6);
                assert!(
                    (fd - an).abs() / denom < 1e-3,
                    "coord {k}: fd={fd}, analytic={an} for {obj:?}"
                );
            }
        }
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let params = init((16, 16, 3), 4, 13).unwrap();
        let img = random_image(17, 16, 16, 3);
        let label = 1usize;
        let (_, grads) = sample_loss_and_grads(&params, &img, label);
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        // (accessor, analytic grads) pairs across all tensors.
        let tensors: [(&str, usize); 6] = [
            ("conv1_w", params.conv1_w.len()),
            ("conv1_b", params.conv1_b.len()),
            ("conv2_w", params.conv2_w.len()),
            ("conv2_b", params.conv2_b.len()),
            ("fc_w", params.fc_w.len()),
            ("fc_b", params.fc_b.len()),
        ];
        for k in 0..25 {
            let (name, len) = tensors[k % tensors.len()];
            let idx = rng.gen_range(0..len);
            let h = 1e-3f32;
            let mut p_plus = params.clone();
            let mut p_minus = params.clone();
            let (slice_p, slice_m, analytic) = match name {
                "conv1_w" => (&mut p_plus.conv1_w, &mut p_minus.conv1_w, grads.conv1_w[idx]),
                "conv1_b" => (&mut p_plus.conv1_b, &mut p_minus.conv1_b, grads.conv1_b[idx]),
                "conv2_w" => (&mut p_plus.conv2_w, &mut p_minus.conv2_w, grads.conv2_w[idx]),
                "conv2_b" => (&mut p_plus.conv2_b, &mut p_minus.conv2_b, grads.conv2_b[idx]),
                "fc_w" => (&mut p_plus.fc_w, &mut p_minus.fc_w, grads.fc_w[idx]),
                _ => (&mut p_plus.fc_b, &mut p_minus.fc_b, grads.fc_b[idx]),
            };
            let base = slice_p[idx];
            slice_p[idx] = base + h;
            slice_m[idx] = base - h;
            let spacing = (slice_p[idx] - slice_m[idx]) as f64;
            let loss_p = objective_value(&p_plus, &img, &Objective::LabelLoss { label });
            let loss_m = objective_value(&p_minus, &img, &Objective::LabelLoss { label });
            let fd = (loss_p - loss_m) / spacing;
            let denom = fd.abs().max(analytic.abs()).max(1e-6);
            assert!(
                (fd - analytic).abs() / denom < 1e-3,
                "{name}[{idx}]: fd={fd}, analytic={analytic}"
            );
        }
    }

    #[test]
    fn feature_distance_to_self_has_zero_gradient() {
        let params = init((16, 16, 3), 4, 3).unwrap();
        let img = random_image(8, 16, 16, 3);
        let f = features(&params, &img).unwrap();
        let grad =
            input_gradient(&params, &img, &Objective::FeatureDistance { reference: &f }).unwrap();
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn gradient_scales_linearly_with_loss() {
        let params = init((16, 16, 3), 4, 3).unwrap();
        let img = random_image(9, 16, 16, 3);
        let logits = forward_logits(&params, &img).unwrap();
        // (logit - t)^2 has gradient 2(logit - t) * dlogit/dx: doubling the
        // residual doubles the input gradient exactly.
        let t1 = logits[2] - 1.0;
        let t2 = logits[2] - 2.0;
        let g1 =
            input_gradient(&params, &img, &Objective::UnitActivation { unit: 2, target: t1 })
                .unwrap();
        let g2 =
            input_gradient(&params, &img, &Objective::UnitActivation { unit: 2, target: t2 })
                .unwrap();
        for (a, b) in g1.iter().zip(&g2) {
            assert!((2.0 * a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn training_reaches_95_percent_on_synthetic() {
        let ds = generate_synthetic(1, 40, 4, 16).unwrap();
        let params = init((16, 16, 3), 4, 7).unwrap();
        let cfg = TrainConfig { epochs: 5, rng_seed: 3, ..TrainConfig::default() };
        let (trained, stats) = train(&params, &ds, &cfg).unwrap();
        assert!(trained.trained);
        assert!(
            stats.final_train_accuracy >= 0.95,
            "train accuracy {}",
            stats.final_train_accuracy
        );
    }

    #[test]
    fn loss_decreases_over_first_epochs() {
        let ds = generate_synthetic(2, 30, 4, 16).unwrap();
        let params = init((16, 16, 3), 4, 7).unwrap();
        let cfg = TrainConfig { epochs: 3, rng_seed: 3, ..TrainConfig::default() };
        let (_, stats) = train(&params, &ds, &cfg).unwrap();
        assert!(stats.epoch_losses[1] < stats.epoch_losses[0]);
        assert!(stats.epoch_losses[2] < stats.epoch_losses[1]);
    }

    #[test]
    fn zero_epochs_is_identity() {
        let ds = generate_synthetic(3, 5, 2, 16).unwrap();
        let params = init((16, 16, 3), 2, 7).unwrap();
        let cfg = TrainConfig { epochs: 0, ..TrainConfig::default() };
        let (out, stats) = train(&params, &ds, &cfg).unwrap();
        assert_eq!(params, out);
        assert!(!out.trained);
        assert!(stats.epoch_losses.is_empty());
    }

    #[test]
    fn training_is_bitwise_deterministic() {
        let ds = generate_synthetic(4, 10, 3, 16).unwrap();
        let params = init((16, 16, 3), 3, 9).unwrap();
        let cfg = TrainConfig { epochs: 2, rng_seed: 5, ..TrainConfig::default() };
        let (a, _) = train(&params, &ds, &cfg).unwrap();
        let (b, _) = train(&params, &ds, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn evaluate_matches_recount_and_edge_cases() {
        let ds = generate_synthetic(5, 25, 4, 16).unwrap();
        let params = init((16, 16, 3), 4, 7).unwrap();
        let cfg = TrainConfig { epochs: 3, rng_seed: 3, ..TrainConfig::default() };
        let (trained, _) = train(&params, &ds, &cfg).unwrap();
        let acc = evaluate(&trained, &ds).unwrap();
        let mut correct = 0usize;
        for (img, &label) in ds.images.iter().zip(&ds.labels) {
            if predict(&trained, img).unwrap() == label {
                correct += 1;
            }
        }
        assert_eq!(acc, correct as f64 / ds.len() as f64);

        // Constant predictor via a dominant bias.
        let mut constant = init((16, 16, 3), 4, 7).unwrap();
        constant.fc_b[2] = 100.0;
        constant.trained = true;
        let all_twos = LabeledDataset::new(ds.images[..4].to_vec(), vec![2; 4], 4).unwrap();
        assert_eq!(evaluate(&constant, &all_twos).unwrap(), 1.0);
        let one_wrong = LabeledDataset::new(ds.images[..1].to_vec(), vec![0], 4).unwrap();
        assert_eq!(evaluate(&constant, &one_wrong).unwrap(), 0.0);
    }

    #[test]
    fn untrained_model_cannot_evaluate() {
        let ds = generate_synthetic(6, 5, 2, 16).unwrap();
        let params = init((16, 16, 3), 2, 7).unwrap();
        assert!(evaluate(&params, &ds).is_err());
    }

    #[test]
    fn argmax_tie_breaks_to_lowest_index() {
        let mut params = init((16, 16, 3), 4, 7).unwrap();
        params.conv1_w.iter_mut().for_each(|w| *w = 0.0);
        params.conv2_w.iter_mut().for_each(|w| *w = 0.0);
        params.fc_w.iter_mut().for_each(|w| *w = 0.0);
        params.fc_b = vec![1.0, 1.0, 1.0, 1.0];
        let img = Image::zeros(16, 16, 3);
        assert_eq!(predict(&params, &img).unwrap(), 0);
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let ds = generate_synthetic(7, 5, 3, 16).unwrap();
        let params = init((16, 16, 3), 3, 11).unwrap();
        let cfg = TrainConfig { epochs: 1, rng_seed: 2, ..TrainConfig::default() };
        let (trained, _) = train(&params, &ds, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ucmp");
        save_params(&trained, &path).unwrap();
        let loaded = load_params(&path).unwrap();
        assert_eq!(trained, loaded);
    }

    #[test]
    fn truncated_checkpoint_is_corrupt() {
        let params = init((16, 16, 3), 3, 11).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ucmp");
        save_params(&params, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 10]).unwrap();
        let err = load_params(&path).unwrap_err();
        assert!(err.to_string().contains("corrupt"), "{err}");
    }

    #[test]
    fn wrong_architecture_checkpoint_is_shape_mismatch() {
        let params = init((16, 16, 3), 3, 11).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ucmp");
        save_params(&params, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        // First tensor's first dim lives right after header (4+2+16+8+1) + 1.
        let dim_offset = 4 + 2 + 16 + 8 + 1 + 1;
        bytes[dim_offset] = 4; // claim conv1 has 4 output maps
        std::fs::write(&path, bytes).unwrap();
        let err = load_params(&path).unwrap_err();
        assert!(matches!(err, Error::Shape(_)), "{err}");
    }
}
