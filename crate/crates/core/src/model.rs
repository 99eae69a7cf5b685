//! Encoder-decoder GRU that marks, per step, whether the frame a step
//! leads into was displaced by the shuffle.
//!
//! The encoder folds the whole feature sequence into a context (the
//! final hidden state of every layer). The decoder starts from that
//! context, re-reads the same sequence with the top context vector
//! concatenated onto every input, and emits two-class logits per step.
//! Training is plain backpropagation through time with per-sequence
//! Adam updates; everything is seeded and bit-reproducible.
//!
//! Checkpoints are a single-line JSON header followed by the raw
//! parameters as little-endian f64, ordered: encoder layers bottom to
//! top, then decoder layers, each layer as W_z, W_r, W_h, U_z, U_r,
//! U_h (row-major), b_z, b_r, b_h; then W_out row-major and b_out.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, seeded};
use crate::zone::FeatureSequence;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Row-major dense matrix, just enough linear algebra for the cells.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Mat {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    fn uniform(rows: usize, cols: usize, scale: f64, rng: &mut impl Rng) -> Mat {
        Mat {
            rows,
            cols,
            data: (0..rows * cols)
                .map(|_| rng.gen_range(-scale..scale))
                .collect(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// out = M x
    fn mul_vec(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (r, o) in out.iter_mut().enumerate() {
            let row = &self.data[r * self.cols..(r + 1) * self.cols];
            let mut acc = 0.0;
            for (w, v) in row.iter().zip(x) {
                acc += w * v;
            }
            *o = acc;
        }
    }

    /// out += M x
    fn mul_vec_add(&self, x: &[f64], out: &mut [f64]) {
        for (r, o) in out.iter_mut().enumerate() {
            let row = &self.data[r * self.cols..(r + 1) * self.cols];
            let mut acc = 0.0;
            for (w, v) in row.iter().zip(x) {
                acc += w * v;
            }
            *o += acc;
        }
    }

    /// out += Mᵀ v
    fn tr_mul_vec_add(&self, v: &[f64], out: &mut [f64]) {
        debug_assert_eq!(v.len(), self.rows);
        debug_assert_eq!(out.len(), self.cols);
        for (r, &vr) in v.iter().enumerate() {
            let row = &self.data[r * self.cols..(r + 1) * self.cols];
            for (o, w) in out.iter_mut().zip(row) {
                *o += w * vr;
            }
        }
    }

    /// M += v xᵀ
    fn add_outer(&mut self, v: &[f64], x: &[f64]) {
        debug_assert_eq!(v.len(), self.rows);
        debug_assert_eq!(x.len(), self.cols);
        for (r, &vr) in v.iter().enumerate() {
            let row = &mut self.data[r * self.cols..(r + 1) * self.cols];
            for (o, xv) in row.iter_mut().zip(x) {
                *o += vr * xv;
            }
        }
    }
}

/// Weights of one GRU layer.
#[derive(Debug, Clone, PartialEq)]
pub struct GruLayerParams {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub(crate) w_z: Mat,
    pub(crate) w_r: Mat,
    pub(crate) w_h: Mat,
    pub(crate) u_z: Mat,
    pub(crate) u_r: Mat,
    pub(crate) u_h: Mat,
    pub(crate) b_z: Vec<f64>,
    pub(crate) b_r: Vec<f64>,
    pub(crate) b_h: Vec<f64>,
}

impl GruLayerParams {
    pub fn zeros(input_dim: usize, hidden_dim: usize) -> GruLayerParams {
        GruLayerParams {
            input_dim,
            hidden_dim,
            w_z: Mat::zeros(hidden_dim, input_dim),
            w_r: Mat::zeros(hidden_dim, input_dim),
            w_h: Mat::zeros(hidden_dim, input_dim),
            u_z: Mat::zeros(hidden_dim, hidden_dim),
            u_r: Mat::zeros(hidden_dim, hidden_dim),
            u_h: Mat::zeros(hidden_dim, hidden_dim),
            b_z: vec![0.0; hidden_dim],
            b_r: vec![0.0; hidden_dim],
            b_h: vec![0.0; hidden_dim],
        }
    }

    fn uniform(input_dim: usize, hidden_dim: usize, scale: f64, rng: &mut impl Rng) -> Self {
        GruLayerParams {
            input_dim,
            hidden_dim,
            w_z: Mat::uniform(hidden_dim, input_dim, scale, rng),
            w_r: Mat::uniform(hidden_dim, input_dim, scale, rng),
            w_h: Mat::uniform(hidden_dim, input_dim, scale, rng),
            u_z: Mat::uniform(hidden_dim, hidden_dim, scale, rng),
            u_r: Mat::uniform(hidden_dim, hidden_dim, scale, rng),
            u_h: Mat::uniform(hidden_dim, hidden_dim, scale, rng),
            b_z: (0..hidden_dim).map(|_| rng.gen_range(-scale..scale)).collect(),
            b_r: (0..hidden_dim).map(|_| rng.gen_range(-scale..scale)).collect(),
            b_h: (0..hidden_dim).map(|_| rng.gen_range(-scale..scale)).collect(),
        }
    }

    fn slices(&self) -> [&[f64]; 9] {
        [
            self.w_z.data(),
            self.w_r.data(),
            self.w_h.data(),
            self.u_z.data(),
            self.u_r.data(),
            self.u_h.data(),
            &self.b_z,
            &self.b_r,
            &self.b_h,
        ]
    }

    fn slices_mut(&mut self) -> [&mut [f64]; 9] {
        [
            &mut self.w_z.data,
            &mut self.w_r.data,
            &mut self.w_h.data,
            &mut self.u_z.data,
            &mut self.u_r.data,
            &mut self.u_h.data,
            &mut self.b_z,
            &mut self.b_r,
            &mut self.b_h,
        ]
    }
}

/// The full trainable state: encoder stack, decoder stack, output head.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderDecoderParams {
    pub feature_dim: usize,
    pub hidden: usize,
    pub n_layers: usize,
    pub(crate) encoder: Vec<GruLayerParams>,
    pub(crate) decoder: Vec<GruLayerParams>,
    pub(crate) w_out: Mat,
    pub(crate) b_out: Vec<f64>,
}

fn layer_input_dims(feature_dim: usize, hidden: usize, n_layers: usize) -> (Vec<usize>, Vec<usize>) {
    let enc = (0..n_layers)
        .map(|l| if l == 0 { feature_dim } else { hidden })
        .collect();
    // decoder layer 0 sees the step features with the top context vector
    // appended
    let dec = (0..n_layers)
        .map(|l| if l == 0 { feature_dim + hidden } else { hidden })
        .collect();
    (enc, dec)
}

impl EncoderDecoderParams {
    pub fn zeros(feature_dim: usize, hidden: usize, n_layers: usize) -> Result<Self> {
        Self::validate_dims(feature_dim, hidden, n_layers)?;
        let (enc_dims, dec_dims) = layer_input_dims(feature_dim, hidden, n_layers);
        Ok(EncoderDecoderParams {
            feature_dim,
            hidden,
            n_layers,
            encoder: enc_dims
                .iter()
                .map(|&d| GruLayerParams::zeros(d, hidden))
                .collect(),
            decoder: dec_dims
                .iter()
                .map(|&d| GruLayerParams::zeros(d, hidden))
                .collect(),
            w_out: Mat::zeros(2, hidden),
            b_out: vec![0.0; 2],
        })
    }

    /// Fresh seeded initialization, every parameter uniform in
    /// (-init_scale, init_scale).
    pub fn init(
        feature_dim: usize,
        hidden: usize,
        n_layers: usize,
        init_scale: f64,
        seed: u64,
    ) -> Result<Self> {
        Self::validate_dims(feature_dim, hidden, n_layers)?;
        if !(init_scale > 0.0 && init_scale.is_finite()) {
            return Err(Error::InvalidParam(format!(
                "init_scale {init_scale} must be positive"
            )));
        }
        let mut rng = seeded(seed);
        let (enc_dims, dec_dims) = layer_input_dims(feature_dim, hidden, n_layers);
        Ok(EncoderDecoderParams {
            feature_dim,
            hidden,
            n_layers,
            encoder: enc_dims
                .iter()
                .map(|&d| GruLayerParams::uniform(d, hidden, init_scale, &mut rng))
                .collect(),
            decoder: dec_dims
                .iter()
                .map(|&d| GruLayerParams::uniform(d, hidden, init_scale, &mut rng))
                .collect(),
            w_out: Mat::uniform(2, hidden, init_scale, &mut rng),
            b_out: (0..2).map(|_| rng.gen_range(-init_scale..init_scale)).collect(),
        })
    }

    fn validate_dims(feature_dim: usize, hidden: usize, n_layers: usize) -> Result<()> {
        if feature_dim == 0 || hidden == 0 || n_layers == 0 {
            return Err(Error::InvalidParam(
                "feature_dim, hidden, n_layers must all be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.feature_dim, self.hidden, self.n_layers).unwrap()
    }

    /// Every parameter block in checkpoint order.
    pub fn param_slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for layer in self.encoder.iter().chain(&self.decoder) {
            out.extend(layer.slices());
        }
        out.push(self.w_out.data());
        out.push(&self.b_out);
        out
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for layer in self.encoder.iter_mut().chain(self.decoder.iter_mut()) {
            out.extend(layer.slices_mut());
        }
        out.push(&mut self.w_out.data);
        out.push(&mut self.b_out);
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_slices().iter().map(|s| s.len()).sum()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

struct CellCache {
    x: Vec<f64>,
    h_prev: Vec<f64>,
    z: Vec<f64>,
    r: Vec<f64>,
    rh: Vec<f64>,
    hbar: Vec<f64>,
    h: Vec<f64>,
}

fn gru_cell_cached(p: &GruLayerParams, x: &[f64], h_prev: &[f64]) -> CellCache {
    let hd = p.hidden_dim;
    let mut z = vec![0.0; hd];
    p.w_z.mul_vec(x, &mut z);
    p.u_z.mul_vec_add(h_prev, &mut z);
    for (v, b) in z.iter_mut().zip(&p.b_z) {
        *v = sigmoid(*v + b);
    }
    let mut r = vec![0.0; hd];
    p.w_r.mul_vec(x, &mut r);
    p.u_r.mul_vec_add(h_prev, &mut r);
    for (v, b) in r.iter_mut().zip(&p.b_r) {
        *v = sigmoid(*v + b);
    }
    let rh: Vec<f64> = r.iter().zip(h_prev).map(|(a, b)| a * b).collect();
    let mut hbar = vec![0.0; hd];
    p.w_h.mul_vec(x, &mut hbar);
    p.u_h.mul_vec_add(&rh, &mut hbar);
    for (v, b) in hbar.iter_mut().zip(&p.b_h) {
        *v = (*v + b).tanh();
    }
    let h: Vec<f64> = z
        .iter()
        .zip(&hbar)
        .zip(h_prev)
        .map(|((zv, hb), hp)| (1.0 - zv) * hp + zv * hb)
        .collect();
    CellCache {
        x: x.to_vec(),
        h_prev: h_prev.to_vec(),
        z,
        r,
        rh,
        hbar,
        h,
    }
}

/// One GRU step: update and reset gates, candidate state, convex blend
/// with the previous hidden state.
pub fn gru_cell(p: &GruLayerParams, x: &[f64], h_prev: &[f64]) -> Result<Vec<f64>> {
    if x.len() != p.input_dim || h_prev.len() != p.hidden_dim {
        return Err(Error::Mismatch(format!(
            "cell expects input {} / hidden {}, got {} / {}",
            p.input_dim,
            p.hidden_dim,
            x.len(),
            h_prev.len()
        )));
    }
    Ok(gru_cell_cached(p, x, h_prev).h)
}

/// Runs a layer stack over per-step base inputs. Layer l at step t reads
/// layer l-1's output at t (the base input for layer 0).
fn run_stack(
    layers: &[GruLayerParams],
    base_inputs: &[Vec<f64>],
    init_h: Option<&[Vec<f64>]>,
) -> Vec<Vec<CellCache>> {
    let hd = layers[0].hidden_dim;
    let mut hidden: Vec<Vec<f64>> = match init_h {
        Some(h) => h.to_vec(),
        None => vec![vec![0.0; hd]; layers.len()],
    };
    let mut caches: Vec<Vec<CellCache>> = (0..layers.len()).map(|_| Vec::new()).collect();
    for x in base_inputs {
        let mut input = x.clone();
        for (l, layer) in layers.iter().enumerate() {
            let cache = gru_cell_cached(layer, &input, &hidden[l]);
            hidden[l] = cache.h.clone();
            input = cache.h.clone();
            caches[l].push(cache);
        }
    }
    caches
}

/// Encoder result: the top layer's hidden state after every step, and
/// the context (every layer's final hidden state, bottom to top).
#[derive(Debug, Clone, PartialEq)]
pub struct EncodeOutput {
    pub step_outputs: Vec<Vec<f64>>,
    pub context: Vec<Vec<f64>>,
}

fn check_seq(p: &EncoderDecoderParams, seq: &FeatureSequence) -> Result<()> {
    if seq.is_empty() {
        return Err(Error::InvalidParam("empty feature sequence".into()));
    }
    if seq.dim() != p.feature_dim {
        return Err(Error::Mismatch(format!(
            "sequence dim {} but model expects {}",
            seq.dim(),
            p.feature_dim
        )));
    }
    Ok(())
}

/// Fold a sequence into its context.
pub fn encode(p: &EncoderDecoderParams, seq: &FeatureSequence) -> Result<EncodeOutput> {
    check_seq(p, seq)?;
    let caches = run_stack(&p.encoder, seq.steps(), None);
    Ok(EncodeOutput {
        step_outputs: caches[p.n_layers - 1].iter().map(|c| c.h.clone()).collect(),
        context: caches.iter().map(|l| l.last().unwrap().h.clone()).collect(),
    })
}

/// Per-step verdict of the decoder.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepPrediction {
    pub logits: [f64; 2],
    /// softmax probability of the "displaced" class
    pub p_displaced: f64,
    /// argmax class; class 1 only on a strictly larger logit
    pub label: u8,
}

fn prediction_from_logits(l0: f64, l1: f64) -> StepPrediction {
    let m = l0.max(l1);
    let e0 = (l0 - m).exp();
    let e1 = (l1 - m).exp();
    StepPrediction {
        logits: [l0, l1],
        p_displaced: e1 / (e0 + e1),
        label: u8::from(l1 > l0),
    }
}

fn decoder_inputs(seq: &FeatureSequence, c_top: &[f64]) -> Vec<Vec<f64>> {
    seq.steps()
        .iter()
        .map(|x| {
            let mut v = Vec::with_capacity(x.len() + c_top.len());
            v.extend_from_slice(x);
            v.extend_from_slice(c_top);
            v
        })
        .collect()
}

fn logits_of(p: &EncoderDecoderParams, h_top: &[f64]) -> (f64, f64) {
    let mut logits = [0.0; 2];
    p.w_out.mul_vec(h_top, &mut logits);
    (logits[0] + p.b_out[0], logits[1] + p.b_out[1])
}

/// Re-read the sequence starting from a context and emit one prediction
/// per step.
pub fn decode(
    p: &EncoderDecoderParams,
    seq: &FeatureSequence,
    context: &[Vec<f64>],
) -> Result<Vec<StepPrediction>> {
    check_seq(p, seq)?;
    if context.len() != p.n_layers || context.iter().any(|c| c.len() != p.hidden) {
        return Err(Error::Mismatch("context shape mismatch".into()));
    }
    let inputs = decoder_inputs(seq, &context[p.n_layers - 1]);
    let caches = run_stack(&p.decoder, &inputs, Some(context));
    Ok(caches[p.n_layers - 1]
        .iter()
        .map(|c| {
            let (l0, l1) = logits_of(p, &c.h);
            prediction_from_logits(l0, l1)
        })
        .collect())
}

/// Encode then decode in one call.
pub fn predict(p: &EncoderDecoderParams, seq: &FeatureSequence) -> Result<Vec<StepPrediction>> {
    let enc = encode(p, seq)?;
    decode(p, seq, &enc.context)
}

fn check_labels(labels: &[u8], steps: usize) -> Result<()> {
    if labels.len() != steps {
        return Err(Error::Mismatch(format!(
            "{} labels for {steps} steps",
            labels.len()
        )));
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::InvalidParam("labels must be 0 or 1".into()));
    }
    Ok(())
}

/// Mean softmax cross-entropy of predictions against 0/1 labels,
/// computed stably from the logits.
pub fn loss(preds: &[StepPrediction], labels: &[u8]) -> Result<f64> {
    check_labels(labels, preds.len())?;
    if preds.is_empty() {
        return Err(Error::InvalidParam("no predictions".into()));
    }
    let mut sum = 0.0;
    for (pr, &y) in preds.iter().zip(labels) {
        let [l0, l1] = pr.logits;
        let m = l0.max(l1);
        let lse = m + ((l0 - m).exp() + (l1 - m).exp()).ln();
        let ly = if y == 1 { l1 } else { l0 };
        sum += lse - ly;
    }
    Ok(sum / preds.len() as f64)
}

/// Fraction of steps whose hard label matches.
pub fn predict_accuracy(
    p: &EncoderDecoderParams,
    seq: &FeatureSequence,
    labels: &[u8],
) -> Result<f64> {
    check_labels(labels, seq.len())?;
    let preds = predict(p, seq)?;
    let hits = preds
        .iter()
        .zip(labels)
        .filter(|(pr, &y)| pr.label == y)
        .count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Backward of one cell. `dh` is the loss gradient on this step's
/// output; fills `dx` (gradient on the layer input) and `dh_prev`
/// (gradient carried to the previous step), accumulating parameter
/// gradients into `g`.
fn cell_backward(
    p: &GruLayerParams,
    g: &mut GruLayerParams,
    cache: &CellCache,
    dh: &[f64],
    dx: &mut [f64],
    dh_prev: &mut [f64],
) {
    let hd = p.hidden_dim;
    let mut da_z = vec![0.0; hd];
    let mut da_r = vec![0.0; hd];
    let mut da_h = vec![0.0; hd];
    let mut drh = vec![0.0; hd];

    for i in 0..hd {
        let z = cache.z[i];
        let hbar = cache.hbar[i];
        let hp = cache.h_prev[i];
        // h = (1-z)*h_prev + z*hbar
        let dz = dh[i] * (hbar - hp);
        let dhbar = dh[i] * z;
        dh_prev[i] = dh[i] * (1.0 - z);
        da_h[i] = dhbar * (1.0 - hbar * hbar);
        da_z[i] = dz * z * (1.0 - z);
    }
    p.u_h.tr_mul_vec_add(&da_h, &mut drh);
    for i in 0..hd {
        let dr = drh[i] * cache.h_prev[i];
        dh_prev[i] += drh[i] * cache.r[i];
        da_r[i] = dr * cache.r[i] * (1.0 - cache.r[i]);
    }
    p.u_z.tr_mul_vec_add(&da_z, dh_prev);
    p.u_r.tr_mul_vec_add(&da_r, dh_prev);

    g.w_z.add_outer(&da_z, &cache.x);
    g.w_r.add_outer(&da_r, &cache.x);
    g.w_h.add_outer(&da_h, &cache.x);
    g.u_z.add_outer(&da_z, &cache.h_prev);
    g.u_r.add_outer(&da_r, &cache.h_prev);
    g.u_h.add_outer(&da_h, &cache.rh);
    for i in 0..hd {
        g.b_z[i] += da_z[i];
        g.b_r[i] += da_r[i];
        g.b_h[i] += da_h[i];
    }

    for v in dx.iter_mut() {
        *v = 0.0;
    }
    p.w_z.tr_mul_vec_add(&da_z, dx);
    p.w_r.tr_mul_vec_add(&da_r, dx);
    p.w_h.tr_mul_vec_add(&da_h, dx);
}

/// Backward through a stack. `dh_final[l]` is the gradient already
/// sitting on layer l's hidden state after the last step (from whatever
/// consumed it); `dh_step[t]` is extra gradient injected on the top
/// layer's output at step t. Returns the gradient on each layer's
/// initial hidden state and on the base inputs.
fn stack_backward(
    layers: &[GruLayerParams],
    grads: &mut [GruLayerParams],
    caches: &[Vec<CellCache>],
    dh_final: Vec<Vec<f64>>,
    dh_step: &[Vec<f64>],
) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let n_layers = layers.len();
    let steps = caches[0].len();
    let mut carry = dh_final;
    let mut d_inputs = vec![vec![0.0; layers[0].input_dim]; steps];
    let mut dx_buf: Vec<Vec<f64>> = layers
        .iter()
        .map(|l| vec![0.0; l.input_dim])
        .collect();
    for t in (0..steps).rev() {
        for l in (0..n_layers).rev() {
            let mut dh = std::mem::take(&mut carry[l]);
            if l == n_layers - 1 && !dh_step.is_empty() {
                for (a, b) in dh.iter_mut().zip(&dh_step[t]) {
                    *a += b;
                }
            }
            let mut dh_prev = vec![0.0; layers[l].hidden_dim];
            cell_backward(
                &layers[l],
                &mut grads[l],
                &caches[l][t],
                &dh,
                &mut dx_buf[l],
                &mut dh_prev,
            );
            carry[l] = dh_prev;
            if l > 0 {
                // layer input was the hidden state below
                carry[l - 1]
                    .iter_mut()
                    .zip(&dx_buf[l])
                    .for_each(|(a, b)| *a += b);
            } else {
                d_inputs[t].copy_from_slice(&dx_buf[0]);
            }
        }
    }
    (carry, d_inputs)
}

struct ForwardBackward {
    loss: f64,
    accuracy: f64,
    grads: EncoderDecoderParams,
}

fn forward_backward(
    p: &EncoderDecoderParams,
    seq: &FeatureSequence,
    labels: &[u8],
) -> Result<ForwardBackward> {
    check_seq(p, seq)?;
    check_labels(labels, seq.len())?;
    let steps = seq.len();
    let top = p.n_layers - 1;

    let enc_caches = run_stack(&p.encoder, seq.steps(), None);
    let context: Vec<Vec<f64>> = enc_caches
        .iter()
        .map(|l| l.last().unwrap().h.clone())
        .collect();
    let dec_inputs = decoder_inputs(seq, &context[top]);
    let dec_caches = run_stack(&p.decoder, &dec_inputs, Some(&context));

    let preds: Vec<StepPrediction> = dec_caches[top]
        .iter()
        .map(|c| {
            let (l0, l1) = logits_of(p, &c.h);
            prediction_from_logits(l0, l1)
        })
        .collect();
    let loss_val = loss(&preds, labels)?;
    let accuracy = preds
        .iter()
        .zip(labels)
        .filter(|(pr, &y)| pr.label == y)
        .count() as f64
        / steps as f64;

    let mut grads = p.zeros_like();

    // output head; dlogits = (softmax - onehot) / steps
    let mut dh_step = vec![vec![0.0; p.hidden]; steps];
    for t in 0..steps {
        let pr = &preds[t];
        let p1 = pr.p_displaced;
        let y = labels[t] as f64;
        let dl = [(1.0 - p1 - (1.0 - y)) / steps as f64, (p1 - y) / steps as f64];
        grads.w_out.add_outer(&dl, &dec_caches[top][t].h);
        grads.b_out[0] += dl[0];
        grads.b_out[1] += dl[1];
        p.w_out.tr_mul_vec_add(&dl, &mut dh_step[t]);
    }

    let (dec_init_grad, dec_dinputs) = stack_backward(
        &p.decoder,
        &mut grads.decoder,
        &dec_caches,
        vec![vec![0.0; p.hidden]; p.n_layers],
        &dh_step,
    );

    // decoder initial hiddens were the context; the appended context
    // vector in every input also lands on the top context entry
    let mut enc_final_grad = dec_init_grad;
    for din in &dec_dinputs {
        for (a, b) in enc_final_grad[top].iter_mut().zip(&din[p.feature_dim..]) {
            *a += b;
        }
    }

    let (_, _) = stack_backward(&p.encoder, &mut grads.encoder, &enc_caches, enc_final_grad, &[]);

    Ok(ForwardBackward {
        loss: loss_val,
        accuracy,
        grads,
    })
}

/// Exact loss gradients for one sequence, shaped like the parameters.
pub fn gradients(
    p: &EncoderDecoderParams,
    seq: &FeatureSequence,
    labels: &[u8],
) -> Result<EncoderDecoderParams> {
    Ok(forward_backward(p, seq, labels)?.grads)
}

/// Loss of one sequence under the current parameters.
pub fn sequence_loss(
    p: &EncoderDecoderParams,
    seq: &FeatureSequence,
    labels: &[u8],
) -> Result<f64> {
    check_labels(labels, seq.len())?;
    loss(&predict(p, seq)?, labels)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub hidden: usize,
    pub n_layers: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub gradient_clip_norm: f64,
    pub init_scale: f64,
    pub seed: u64,
    /// Keep a copy of the parameters every this many epochs.
    pub snapshot_every: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            hidden: 64,
            n_layers: 2,
            learning_rate: 1e-3,
            epochs: 100,
            gradient_clip_norm: 5.0,
            init_scale: 0.1,
            seed: 0,
            snapshot_every: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.n_layers == 0 {
            return Err(Error::InvalidParam("hidden and n_layers must be positive".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidParam("learning_rate must be finite and >= 0".into()));
        }
        if !(self.gradient_clip_norm > 0.0) {
            return Err(Error::InvalidParam("gradient_clip_norm must be positive".into()));
        }
        if !(self.init_scale > 0.0 && self.init_scale.is_finite()) {
            return Err(Error::InvalidParam("init_scale must be positive".into()));
        }
        if self.snapshot_every == Some(0) {
            return Err(Error::InvalidParam("snapshot_every must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub mean_accuracy: f64,
}

pub struct TrainOutcome {
    pub params: EncoderDecoderParams,
    pub history: Vec<EpochStats>,
    /// (completed epoch, parameters at that point), per snapshot_every.
    pub snapshots: Vec<(usize, EncoderDecoderParams)>,
}

fn clip_gradients(grads: &mut EncoderDecoderParams, max_norm: f64) {
    let norm_sq: f64 = grads
        .param_slices()
        .iter()
        .flat_map(|s| s.iter())
        .map(|v| v * v)
        .sum();
    let norm = norm_sq.sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for s in grads.param_slices_mut() {
            for v in s {
                *v *= scale;
            }
        }
    }
}

/// Train from scratch. Sequences are visited one at a time in a seeded
/// shuffled order that depends only on (seed, epoch), so a run of n
/// epochs passes through the same states as the first n epochs of any
/// longer run.
pub fn train(dataset: &[(FeatureSequence, Vec<u8>)], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidParam("empty training set".into()));
    }
    let dim = dataset[0].0.dim();
    for (i, (seq, labels)) in dataset.iter().enumerate() {
        if seq.dim() != dim {
            return Err(Error::Mismatch(format!(
                "sequence {i} has dim {}, expected {dim}",
                seq.dim()
            )));
        }
        check_labels(labels, seq.len())?;
    }

    let mut params = EncoderDecoderParams::init(dim, cfg.hidden, cfg.n_layers, cfg.init_scale, cfg.seed)?;
    let mut m = params.zeros_like();
    let mut v = params.zeros_like();
    let mut adam_t = 0u64;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut snapshots = Vec::new();

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        let mut rng = seeded(derive_seed(cfg.seed, 1 + epoch as u64));
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }

        let mut loss_sum = 0.0;
        let mut acc_sum = 0.0;
        for &i in &order {
            let (seq, labels) = &dataset[i];
            let fb = forward_backward(&params, seq, labels)?;
            if !fb.loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, sequence: i });
            }
            loss_sum += fb.loss;
            acc_sum += fb.accuracy;

            let mut grads = fb.grads;
            clip_gradients(&mut grads, cfg.gradient_clip_norm);
            adam_t += 1;
            let bc1 = 1.0 - ADAM_BETA1.powi(adam_t as i32);
            let bc2 = 1.0 - ADAM_BETA2.powi(adam_t as i32);
            let mut ps = params.param_slices_mut();
            let mut ms = m.param_slices_mut();
            let mut vs = v.param_slices_mut();
            let gs = grads.param_slices();
            for k in 0..ps.len() {
                let (p_s, m_s, v_s, g_s) = (&mut ps[k], &mut ms[k], &mut vs[k], gs[k]);
                for j in 0..g_s.len() {
                    let g = g_s[j];
                    m_s[j] = ADAM_BETA1 * m_s[j] + (1.0 - ADAM_BETA1) * g;
                    v_s[j] = ADAM_BETA2 * v_s[j] + (1.0 - ADAM_BETA2) * g * g;
                    let mh = m_s[j] / bc1;
                    let vh = v_s[j] / bc2;
                    p_s[j] -= cfg.learning_rate * mh / (vh.sqrt() + ADAM_EPS);
                }
            }
        }
        history.push(EpochStats {
            epoch: epoch + 1,
            mean_loss: loss_sum / dataset.len() as f64,
            mean_accuracy: acc_sum / dataset.len() as f64,
        });
        if let Some(k) = cfg.snapshot_every {
            if (epoch + 1) % k == 0 {
                snapshots.push((epoch + 1, params.clone()));
            }
        }
    }

    Ok(TrainOutcome {
        params,
        history,
        snapshots,
    })
}

// ------------------------------------------------------- checkpoints --

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    version: u32,
    feature_dim: usize,
    hidden: usize,
    n_layers: usize,
    seed: u64,
    standardized: bool,
}

const CHECKPOINT_FORMAT: &str = "dzl-gru";
const CHECKPOINT_VERSION: u32 = 1;
const MAX_HEADER_BYTES: usize = 4096;

/// Parameters plus what scoring needs to reproduce the feature pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: EncoderDecoderParams,
    pub seed: u64,
    /// Features were standardized per clip when this model was trained.
    pub standardized: bool,
}

fn checked_param_count(feature_dim: usize, hidden: usize, n_layers: usize) -> Option<u64> {
    let d = feature_dim as u128;
    let h = hidden as u128;
    let l = n_layers as u128;
    let layer = |input: u128| 3 * h * input + 3 * h * h + 3 * h;
    let enc = layer(d) + (l - 1) * layer(h);
    let dec = layer(d + h) + (l - 1) * layer(h);
    let total = enc + dec + 2 * h + 2;
    if total > (1 << 32) {
        None
    } else {
        Some(total as u64)
    }
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Vec<u8> {
    let header = CheckpointHeader {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        feature_dim: ck.params.feature_dim,
        hidden: ck.params.hidden,
        n_layers: ck.params.n_layers,
        seed: ck.seed,
        standardized: ck.standardized,
    };
    let mut out = serde_json::to_string(&header).unwrap().into_bytes();
    out.push(b'\n');
    for s in ck.params.param_slices() {
        for v in s {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let nl = bytes
        .iter()
        .take(MAX_HEADER_BYTES)
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Format("checkpoint header line not found".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[..nl])?;
    if header.format != CHECKPOINT_FORMAT {
        return Err(Error::Format(format!("unknown format {:?}", header.format)));
    }
    if header.version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported version {}", header.version)));
    }
    if header.feature_dim == 0 || header.hidden == 0 || header.n_layers == 0 {
        return Err(Error::Format("zero dimension in header".into()));
    }
    let count = checked_param_count(header.feature_dim, header.hidden, header.n_layers)
        .ok_or_else(|| Error::Format("parameter count out of range".into()))?;
    let payload = &bytes[nl + 1..];
    if payload.len() as u64 != count * 8 {
        return Err(Error::Format(format!(
            "payload is {} bytes, header implies {}",
            payload.len(),
            count * 8
        )));
    }
    let mut params =
        EncoderDecoderParams::zeros(header.feature_dim, header.hidden, header.n_layers)?;
    let mut offset = 0;
    for s in params.param_slices_mut() {
        for v in s {
            let raw: [u8; 8] = payload[offset..offset + 8].try_into().unwrap();
            *v = f64::from_le_bytes(raw);
            if !v.is_finite() {
                return Err(Error::Format("non-finite parameter value".into()));
            }
            offset += 8;
        }
    }
    Ok(Checkpoint {
        params,
        seed: header.seed,
        standardized: header.standardized,
    })
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    std::fs::write(path, encode_checkpoint(ck)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
