//! Mask optimization and a trainable mask estimator.
//!
//! Two consumers of the loss gradients live here. [`optimize_mask`] runs
//! projected gradient descent directly on the mask entries of one utterance —
//! a desk-scale tool for probing what a loss considers optimal. [`mlp_train`]
//! fits a small multilayer perceptron that predicts the mask from
//! log-magnitude mixture features, backpropagating the analytic mask
//! gradients through a logistic output layer.
//!
//! Everything is seeded and deterministic: reruns with the same inputs and
//! configuration reproduce the same weights bit for bit, with or without the
//! `parallel` feature.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::ops::Range;
use std::path::Path;

use crate::error::{Error, Result};
use crate::exec;
use crate::losses::{LossContext, LossKind, LossWeights};
use crate::matrix::Matrix;
use crate::stft::{self, SpectralFrames, StftConfig};

/// Floor added to magnitudes before the log in the feature front end.
pub const FEATURE_EPS: f64 = 1e-10;
/// Checkpoint schema version written by [`MlpMaskModel::save_checkpoint`].
pub const CHECKPOINT_VERSION: u32 = 1;

// ---------------------------------------------------------------------------
// Direct mask optimization.
// ---------------------------------------------------------------------------

/// Settings for [`optimize_mask`].
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizeConfig {
    /// Initial gradient step size.
    pub step: f64,
    /// Iteration budget.
    pub max_iters: usize,
    /// Stop once an accepted step improves the objective by less than this.
    pub tol: f64,
    /// Upper clip of the mask (lower clip is 0).
    pub mask_max: f64,
    /// Initial value of every mask entry.
    pub init: f64,
}

impl Default for OptimizeConfig {
    fn default() -> Self {
        OptimizeConfig { step: 0.5, max_iters: 1000, tol: 1e-12, mask_max: 2.0, init: 1.0 }
    }
}

/// What happened during an [`optimize_mask`] run.
#[derive(Clone, Debug)]
pub struct OptimizeTrace {
    /// Objective after each accepted step, starting with the initial mask.
    /// Never increasing: steps are only accepted if they don't raise the
    /// objective.
    pub objective: Vec<f64>,
    pub iterations: usize,
    /// True when the run stopped because improvement fell below `tol` (or no
    /// descent step could be found), false when the iteration budget ran out.
    pub converged: bool,
}

/// Minimizes `kind` over the mask by projected gradient descent with a
/// halving line search: a step is only accepted if it does not increase the
/// objective, the step size halves on rejection and regrows gently after
/// acceptance, and every iterate is clipped to `[0, mask_max]`.
pub fn optimize_mask(
    kind: LossKind,
    ctx: &LossContext,
    cfg: &OptimizeConfig,
) -> Result<(Matrix, OptimizeTrace)> {
    if !(cfg.step > 0.0) || !(cfg.mask_max > 0.0) || cfg.max_iters == 0 || !(cfg.tol >= 0.0) {
        return Err(Error::InvalidConfig(format!(
            "optimizer needs step > 0, mask_max > 0, max_iters > 0, tol >= 0; got {cfg:?}"
        )));
    }
    const MAX_HALVINGS: usize = 60;
    const GROW: f64 = 1.5;
    let step_cap = cfg.step * 16.0;
    let mut mask =
        Matrix::filled(ctx.frames(), ctx.half_bins(), cfg.init.clamp(0.0, cfg.mask_max));
    let mut res = ctx.evaluate(kind, &mask)?;
    let mut objective = vec![res.total];
    let mut step = cfg.step;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < cfg.max_iters {
        iterations += 1;
        let scale = 1.0 / res.per_frame.len() as f64;
        let mut accepted = false;
        for _ in 0..MAX_HALVINGS {
            let cand = Matrix::from_fn(mask.rows(), mask.cols(), |l, k| {
                (mask.get(l, k) - step * scale * res.grad.get(l, k)).clamp(0.0, cfg.mask_max)
            });
            let cand_res = ctx.evaluate(kind, &cand)?;
            if cand_res.total <= res.total {
                let improvement = res.total - cand_res.total;
                mask = cand;
                res = cand_res;
                objective.push(res.total);
                accepted = true;
                if improvement < cfg.tol {
                    converged = true;
                }
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            converged = true; // no descent direction left at any step size
        }
        if converged {
            break;
        }
        step = (step * GROW).min(step_cap);
    }
    Ok((mask, OptimizeTrace { objective, iterations, converged }))
}

// ---------------------------------------------------------------------------
// Learning-rate schedule.
// ---------------------------------------------------------------------------

/// Plateau-halving schedule: the rate halves after two consecutive epochs
/// without a new best validation loss.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LrSchedule {
    lr: f64,
    best: f64,
    stall: usize,
}

impl LrSchedule {
    pub fn new(lr: f64) -> Self {
        LrSchedule { lr, best: f64::INFINITY, stall: 0 }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Feeds one epoch's validation loss; returns the rate for the next
    /// epoch.
    pub fn observe(&mut self, val_loss: f64) -> f64 {
        if val_loss < self.best {
            self.best = val_loss;
            self.stall = 0;
        } else {
            self.stall += 1;
            if self.stall >= 2 {
                self.lr *= 0.5;
                self.stall = 0;
            }
        }
        self.lr
    }
}

// ---------------------------------------------------------------------------
// Feature front end and normalization.
// ---------------------------------------------------------------------------

/// Per-column normalization statistics, frozen after fitting on the training
/// split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    /// Columns with less spread than this are clamped so normalization never
    /// divides by (near) zero.
    pub const STD_FLOOR: f64 = 1e-8;

    /// Population mean and standard deviation per column over all rows of
    /// all matrices.
    pub fn fit(features: &[&Matrix]) -> Result<NormStats> {
        let cols = features.first().map(|m| m.cols()).unwrap_or(0);
        let count: usize = features.iter().map(|m| m.rows()).sum();
        if cols == 0 || count == 0 {
            return Err(Error::InvalidConfig("no feature frames to fit".into()));
        }
        let mut mean = vec![0.0; cols];
        for m in features {
            if m.cols() != cols {
                return Err(Error::ShapeMismatch {
                    expected: format!("{cols} feature columns"),
                    got: format!("{}", m.cols()),
                });
            }
            for l in 0..m.rows() {
                for (acc, v) in mean.iter_mut().zip(m.row(l)) {
                    *acc += v;
                }
            }
        }
        for v in &mut mean {
            *v /= count as f64;
        }
        let mut var = vec![0.0; cols];
        for m in features {
            for l in 0..m.rows() {
                for (c, v) in m.row(l).iter().enumerate() {
                    let d = v - mean[c];
                    var[c] += d * d;
                }
            }
        }
        let std = var.iter().map(|v| (v / count as f64).sqrt().max(Self::STD_FLOOR)).collect();
        Ok(NormStats { mean, std })
    }

    /// `(x - mean) / std` per column.
    pub fn normalize(&self, features: &Matrix) -> Result<Matrix> {
        if features.cols() != self.mean.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} feature columns", self.mean.len()),
                got: format!("{}", features.cols()),
            });
        }
        Ok(Matrix::from_fn(features.rows(), features.cols(), |l, c| {
            (features.get(l, c) - self.mean[c]) / self.std[c]
        }))
    }
}

/// Raw per-frame features of a mixture: log magnitudes on the extended bin
/// grid, floored at [`FEATURE_EPS`].
pub fn mixture_features(mixture: &SpectralFrames) -> Matrix {
    stft::extend_bins(mixture).map(|v| (v + FEATURE_EPS).ln())
}

/// Stacks `context` consecutive feature frames (centered on each frame,
/// replicate-padded at the signal edges) into one row per frame.
fn window_features(features: &Matrix, context: usize) -> Matrix {
    let half = context / 2;
    let cols = features.cols();
    let last = features.rows() - 1;
    Matrix::from_fn(features.rows(), cols * context, |l, j| {
        let offset = j / cols;
        let c = j % cols;
        let src = (l + offset).saturating_sub(half).min(last);
        features.get(src, c)
    })
}

// ---------------------------------------------------------------------------
// The MLP mask model.
// ---------------------------------------------------------------------------

/// Network architecture. The input dimension is `input_bins * context`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MlpConfig {
    /// Feature bins per frame (the extended-bin count of the front end).
    pub input_bins: usize,
    /// Consecutive frames per input window; odd.
    pub context: usize,
    /// Hidden layer widths.
    pub hidden: Vec<usize>,
    /// Negative-side slope of the hidden activations.
    pub leaky_slope: f64,
}

impl Default for MlpConfig {
    fn default() -> Self {
        MlpConfig {
            input_bins: stft::DEFAULT_EXTENDED_BINS,
            context: 5,
            hidden: vec![256, 256],
            leaky_slope: 0.01,
        }
    }
}

impl MlpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_bins == 0 || self.context == 0 || self.context % 2 == 0 {
            return Err(Error::InvalidConfig(format!(
                "need input_bins > 0 and odd context, got {} bins, context {}",
                self.input_bins, self.context
            )));
        }
        if self.hidden.iter().any(|&h| h == 0) {
            return Err(Error::InvalidConfig("hidden layer of width 0".into()));
        }
        if !(0.0..1.0).contains(&self.leaky_slope) {
            return Err(Error::InvalidConfig(format!(
                "leaky_slope must lie in [0, 1), got {}",
                self.leaky_slope
            )));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.input_bins * self.context
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Layer {
    /// `out × in` weights.
    w: Matrix,
    b: Vec<f64>,
}

struct LayerGrad {
    dw: Matrix,
    db: Vec<f64>,
}

fn logistic(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// `input · wᵀ + b`, parallel over input rows.
fn affine(input: &Matrix, layer: &Layer) -> Matrix {
    let out_dim = layer.b.len();
    let rows = exec::map_indexed(input.rows(), |r| {
        let a = input.row(r);
        let mut out = Vec::with_capacity(out_dim);
        for o in 0..out_dim {
            let w = layer.w.row(o);
            let mut acc = layer.b[o];
            for (wi, ai) in w.iter().zip(a) {
                acc += wi * ai;
            }
            out.push(acc);
        }
        out
    });
    from_row_vecs(rows, out_dim)
}

/// `delta · w` (back through a layer), parallel over rows.
fn matmul_nn(delta: &Matrix, w: &Matrix) -> Matrix {
    let in_dim = w.cols();
    let rows = exec::map_indexed(delta.rows(), |r| {
        let d = delta.row(r);
        let mut out = vec![0.0; in_dim];
        for (o, &dv) in d.iter().enumerate() {
            if dv != 0.0 {
                for (ov, wv) in out.iter_mut().zip(w.row(o)) {
                    *ov += dv * wv;
                }
            }
        }
        out
    });
    from_row_vecs(rows, in_dim)
}

/// `deltaᵀ · act` (weight gradient), parallel over output rows; the batch
/// reduction inside each row runs in fixed order.
fn matmul_tn(delta: &Matrix, act: &Matrix) -> Matrix {
    let in_dim = act.cols();
    let rows = exec::map_indexed(delta.cols(), |o| {
        let mut out = vec![0.0; in_dim];
        for b in 0..delta.rows() {
            let dv = delta.get(b, o);
            if dv != 0.0 {
                for (ov, av) in out.iter_mut().zip(act.row(b)) {
                    *ov += dv * av;
                }
            }
        }
        out
    });
    from_row_vecs(rows, in_dim)
}

fn from_row_vecs(rows: Vec<Vec<f64>>, cols: usize) -> Matrix {
    let mut out = Matrix::zeros(rows.len(), cols);
    for (r, row) in rows.into_iter().enumerate() {
        out.row_mut(r).copy_from_slice(&row);
    }
    out
}

struct ForwardPass {
    /// `acts[0]` is the input; `acts[i]` the post-activation output of layer
    /// `i-1`; the last entry is the predicted mask.
    acts: Vec<Matrix>,
}

impl ForwardPass {
    fn mask(&self) -> &Matrix {
        self.acts.last().unwrap()
    }
}

/// Feed-forward mask estimator: leaky-ReLU hidden layers, logistic output,
/// together with the frozen feature normalization it was trained with.
#[derive(Clone, Debug)]
pub struct MlpMaskModel {
    cfg: MlpConfig,
    norm: NormStats,
    layers: Vec<Layer>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format_version: u32,
    cfg: MlpConfig,
    output_bins: usize,
    layers: Vec<Layer>,
    norm: NormStats,
}

impl MlpMaskModel {
    /// Fresh network with weights drawn uniformly from
    /// `±1/sqrt(fan_in)` (seeded) and zero biases.
    pub fn new(cfg: MlpConfig, norm: NormStats, output_bins: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if output_bins == 0 {
            return Err(Error::InvalidConfig("output_bins must be positive".into()));
        }
        if norm.mean.len() != cfg.input_bins || norm.std.len() != cfg.input_bins {
            return Err(Error::ShapeMismatch {
                expected: format!("normalization over {} bins", cfg.input_bins),
                got: format!("{} / {}", norm.mean.len(), norm.std.len()),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut dims = vec![cfg.input_dim()];
        dims.extend_from_slice(&cfg.hidden);
        dims.push(output_bins);
        let layers = dims
            .windows(2)
            .map(|d| {
                let bound = 1.0 / (d[0] as f64).sqrt();
                Layer {
                    w: Matrix::from_fn(d[1], d[0], |_, _| rng.gen_range(-bound..bound)),
                    b: vec![0.0; d[1]],
                }
            })
            .collect();
        Ok(MlpMaskModel { cfg, norm, layers })
    }

    pub fn config(&self) -> &MlpConfig {
        &self.cfg
    }

    pub fn norm(&self) -> &NormStats {
        &self.norm
    }

    pub fn output_bins(&self) -> usize {
        self.layers.last().map(|l| l.b.len()).unwrap_or(0)
    }

    fn forward(&self, input: &Matrix) -> ForwardPass {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(input.clone());
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let z = affine(acts.last().unwrap(), layer);
            let a = if i == last {
                z.map(logistic)
            } else {
                let slope = self.cfg.leaky_slope;
                z.map(|v| if v > 0.0 { v } else { slope * v })
            };
            acts.push(a);
        }
        ForwardPass { acts }
    }

    /// Parameter gradients for a mask gradient `dJ/dmask`, chained through
    /// the logistic output (`σ' = m(1-m)`) and the hidden activations.
    fn backward(&self, fp: &ForwardPass, grad_mask: &Matrix) -> Vec<LayerGrad> {
        let n = self.layers.len();
        let out = fp.mask();
        let mut delta = Matrix::from_fn(out.rows(), out.cols(), |r, c| {
            let m = out.get(r, c);
            grad_mask.get(r, c) * m * (1.0 - m)
        });
        let mut grads: Vec<Option<LayerGrad>> = (0..n).map(|_| None).collect();
        for i in (0..n).rev() {
            let act_in = &fp.acts[i];
            let db: Vec<f64> = (0..delta.cols())
                .map(|o| (0..delta.rows()).map(|b| delta.get(b, o)).sum())
                .collect();
            grads[i] = Some(LayerGrad { dw: matmul_tn(&delta, act_in), db });
            if i > 0 {
                let back = matmul_nn(&delta, &self.layers[i].w);
                let slope = self.cfg.leaky_slope;
                let a = &fp.acts[i]; // post-activation of the previous layer
                delta = Matrix::from_fn(back.rows(), back.cols(), |r, c| {
                    let gate = if a.get(r, c) > 0.0 { 1.0 } else { slope };
                    back.get(r, c) * gate
                });
            }
        }
        grads.into_iter().map(Option::unwrap).collect()
    }

    /// Normalizes and windows raw per-frame features, then runs the network.
    /// The result has one row per frame with entries in `(0, 1)` — up to
    /// floating-point saturation of the logistic, which rounds to exactly
    /// 0.0 or 1.0 once a pre-activation magnitude passes roughly 37.
    pub fn predict_mask(&self, raw_features: &Matrix) -> Result<Matrix> {
        let normed = self.norm.normalize(raw_features)?;
        let input = window_features(&normed, self.cfg.context);
        Ok(self.forward(&input).acts.pop().unwrap())
    }

    pub fn save_checkpoint<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let ck = Checkpoint {
            format_version: CHECKPOINT_VERSION,
            cfg: self.cfg.clone(),
            output_bins: self.output_bins(),
            layers: self.layers.clone(),
            norm: self.norm.clone(),
        };
        std::fs::write(path, serde_json::to_string_pretty(&ck)?)?;
        Ok(())
    }

    pub fn load_checkpoint<P: AsRef<Path>>(path: P) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if ck.format_version != CHECKPOINT_VERSION {
            return Err(Error::InvalidConfig(format!(
                "checkpoint format {} not supported (expected {CHECKPOINT_VERSION})",
                ck.format_version
            )));
        }
        ck.cfg.validate()?;
        let mut dims = vec![ck.cfg.input_dim()];
        dims.extend_from_slice(&ck.cfg.hidden);
        dims.push(ck.output_bins);
        if ck.layers.len() + 1 != dims.len() {
            return Err(Error::InvalidConfig(format!(
                "checkpoint has {} layers, architecture needs {}",
                ck.layers.len(),
                dims.len() - 1
            )));
        }
        for (i, layer) in ck.layers.iter().enumerate() {
            if layer.w.rows() != dims[i + 1]
                || layer.w.cols() != dims[i]
                || layer.b.len() != dims[i + 1]
            {
                return Err(Error::ShapeMismatch {
                    expected: format!("layer {i}: {} x {} weights", dims[i + 1], dims[i]),
                    got: format!("{} x {}", layer.w.rows(), layer.w.cols()),
                });
            }
        }
        if ck.norm.mean.len() != ck.cfg.input_bins || ck.norm.std.len() != ck.cfg.input_bins {
            return Err(Error::InvalidConfig("checkpoint normalization size mismatch".into()));
        }
        Ok(MlpMaskModel { cfg: ck.cfg, norm: ck.norm, layers: ck.layers })
    }
}

// ---------------------------------------------------------------------------
// Training.
// ---------------------------------------------------------------------------

/// Parameter update rule.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Sgd
    }
}

impl OptimizerKind {
    /// Adam with the usual defaults.
    pub fn adam() -> Self {
        OptimizerKind::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Everything [`mlp_train`] needs besides the data.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub kind: LossKind,
    pub weights: LossWeights,
    pub epochs: usize,
    /// Initial learning rate; halved on validation plateaus.
    pub lr: f64,
    /// Frames per training chunk. An utterance shorter than this forms a
    /// single chunk; a short tail merges into the previous chunk.
    pub minibatch: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    pub mlp: MlpConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            kind: LossKind::Cl2,
            weights: LossWeights::for_2cl(),
            epochs: 50,
            lr: 2e-4,
            minibatch: 128,
            seed: 0,
            optimizer: OptimizerKind::Sgd,
            mlp: MlpConfig::default(),
        }
    }
}

/// One training pair: clean speech and the noise under it, time domain,
/// equal length.
#[derive(Clone, Debug)]
pub struct Utterance {
    pub speech: Vec<f64>,
    pub noise: Vec<f64>,
}

/// Per-epoch record of a training run.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Frame-weighted mean chunk objective seen during the epoch.
    pub train_loss: f64,
    /// Frame-weighted mean objective on the held-out utterances.
    pub val_loss: f64,
    /// Learning rate the epoch ran with.
    pub lr: f64,
}

/// A trained model plus its epoch history.
pub struct TrainOutcome {
    pub model: MlpMaskModel,
    pub history: Vec<EpochStats>,
}

struct AdamState {
    t: u64,
    w_m: Vec<Matrix>,
    w_v: Vec<Matrix>,
    b_m: Vec<Vec<f64>>,
    b_v: Vec<Vec<f64>>,
}

impl AdamState {
    fn new(layers: &[Layer]) -> Self {
        AdamState {
            t: 0,
            w_m: layers.iter().map(|l| Matrix::zeros(l.w.rows(), l.w.cols())).collect(),
            w_v: layers.iter().map(|l| Matrix::zeros(l.w.rows(), l.w.cols())).collect(),
            b_m: layers.iter().map(|l| vec![0.0; l.b.len()]).collect(),
            b_v: layers.iter().map(|l| vec![0.0; l.b.len()]).collect(),
        }
    }
}

fn apply_update(
    layers: &mut [Layer],
    grads: &[LayerGrad],
    lr: f64,
    optimizer: &OptimizerKind,
    adam: &mut AdamState,
) {
    match *optimizer {
        OptimizerKind::Sgd => {
            for (layer, g) in layers.iter_mut().zip(grads) {
                for (w, dw) in layer.w.data_mut().iter_mut().zip(g.dw.data()) {
                    *w -= lr * dw;
                }
                for (b, db) in layer.b.iter_mut().zip(&g.db) {
                    *b -= lr * db;
                }
            }
        }
        OptimizerKind::Adam { beta1, beta2, eps } => {
            adam.t += 1;
            let bc1 = 1.0 - beta1.powi(adam.t as i32);
            let bc2 = 1.0 - beta2.powi(adam.t as i32);
            for (i, (layer, g)) in layers.iter_mut().zip(grads).enumerate() {
                let (m, v) = (adam.w_m[i].data_mut(), adam.w_v[i].data_mut());
                for (((w, dw), mi), vi) in
                    layer.w.data_mut().iter_mut().zip(g.dw.data()).zip(m).zip(v)
                {
                    *mi = beta1 * *mi + (1.0 - beta1) * dw;
                    *vi = beta2 * *vi + (1.0 - beta2) * dw * dw;
                    *w -= lr * (*mi / bc1) / ((*vi / bc2).sqrt() + eps);
                }
                let (m, v) = (adam.b_m[i].iter_mut(), adam.b_v[i].iter_mut());
                for (((b, db), mi), vi) in layer.b.iter_mut().zip(&g.db).zip(m).zip(v) {
                    *mi = beta1 * *mi + (1.0 - beta1) * db;
                    *vi = beta2 * *vi + (1.0 - beta2) * db * db;
                    *b -= lr * (*mi / bc1) / ((*vi / bc2).sqrt() + eps);
                }
            }
        }
    }
}

/// Splits `frames` into consecutive chunks of `minibatch` frames, merging a
/// short tail into the previous chunk so no chunk is shorter than the
/// minibatch except when the whole utterance is.
fn chunk_ranges(frames: usize, minibatch: usize) -> Vec<Range<usize>> {
    if frames <= minibatch {
        return vec![0..frames];
    }
    let mut out = Vec::new();
    let mut start = 0;
    while start + minibatch <= frames {
        out.push(start..start + minibatch);
        start += minibatch;
    }
    if start < frames {
        let tail_start = out.pop().unwrap().start;
        out.push(tail_start..frames);
    }
    out
}

struct Chunk {
    utt: usize,
    range: Range<usize>,
    ctx: LossContext,
}

/// Trains an MLP mask estimator on `(speech, noise)` pairs.
///
/// The last fifth of the utterances (at least one) is held out for
/// validation; feature normalization is fit on the training split only.
/// Chunks are visited in a freshly seeded random order each epoch
/// (`seed ^ epoch`), and the learning rate halves when the validation loss
/// plateaus for two epochs. A non-finite objective aborts with
/// [`Error::Diverged`].
pub fn mlp_train(
    utterances: &[Utterance],
    stft_cfg: &StftConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    stft_cfg.validate()?;
    cfg.weights.validate()?;
    cfg.mlp.validate()?;
    if cfg.epochs == 0 || !(cfg.lr > 0.0) || cfg.minibatch == 0 {
        return Err(Error::InvalidConfig(format!(
            "need epochs > 0, lr > 0, minibatch > 0; got epochs {}, lr {}, minibatch {}",
            cfg.epochs, cfg.lr, cfg.minibatch
        )));
    }
    if utterances.len() < 2 {
        return Err(Error::InvalidConfig(
            "need at least 2 utterances to hold out a validation split".into(),
        ));
    }
    if cfg.mlp.input_bins != stft_cfg.extended_bins {
        return Err(Error::InvalidConfig(format!(
            "model expects {} feature bins but the front end produces {}",
            cfg.mlp.input_bins, stft_cfg.extended_bins
        )));
    }

    struct Prep {
        ctx: LossContext,
        features_raw: Matrix,
    }
    let mut preps = Vec::with_capacity(utterances.len());
    for u in utterances {
        if u.speech.len() != u.noise.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} noise samples", u.speech.len()),
                got: format!("{}", u.noise.len()),
            });
        }
        let s = stft::analyze(&u.speech, stft_cfg)?;
        let d = stft::analyze(&u.noise, stft_cfg)?;
        let mixture = stft::add_frames(&s, &d)?;
        preps.push(Prep {
            ctx: LossContext::new(&u.speech, &s, &d, cfg.weights)?,
            features_raw: mixture_features(&mixture),
        });
    }

    let n_val = (utterances.len() / 5).max(1);
    let n_train = utterances.len() - n_val;
    let train_feats: Vec<&Matrix> = preps[..n_train].iter().map(|p| &p.features_raw).collect();
    let norm = NormStats::fit(&train_feats)?;
    let inputs: Vec<Matrix> = preps
        .iter()
        .map(|p| Ok(window_features(&norm.normalize(&p.features_raw)?, cfg.mlp.context)))
        .collect::<Result<_>>()?;

    let make_chunks = |range: Range<usize>| -> Vec<Chunk> {
        range
            .flat_map(|utt| {
                chunk_ranges(preps[utt].ctx.frames(), cfg.minibatch)
                    .into_iter()
                    .map(move |r| (utt, r))
            })
            .map(|(utt, r)| Chunk { utt, range: r.clone(), ctx: preps[utt].ctx.slice(r) })
            .collect()
    };
    let train_chunks = make_chunks(0..n_train);
    let val_chunks = make_chunks(n_train..utterances.len());

    let mut model = MlpMaskModel::new(cfg.mlp.clone(), norm, stft_cfg.half_bins(), cfg.seed)?;
    let mut adam = AdamState::new(&model.layers);
    let mut sched = LrSchedule::new(cfg.lr);
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let lr = sched.lr();
        let mut order: Vec<usize> = (0..train_chunks.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed ^ epoch as u64));
        let mut loss_acc = 0.0;
        let mut frame_acc = 0usize;
        for (step, &ci) in order.iter().enumerate() {
            let chunk = &train_chunks[ci];
            let input = inputs[chunk.utt].sub_rows(chunk.range.clone());
            let fp = model.forward(&input);
            let res = chunk.ctx.evaluate(cfg.kind, fp.mask())?;
            if !res.total.is_finite() {
                return Err(Error::Diverged { epoch, step });
            }
            loss_acc += res.total * res.per_frame.len() as f64;
            frame_acc += res.per_frame.len();
            let scale = 1.0 / res.per_frame.len() as f64;
            let grad_mask = res.grad.map(|g| g * scale);
            let grads = model.backward(&fp, &grad_mask);
            apply_update(&mut model.layers, &grads, lr, &cfg.optimizer, &mut adam);
        }
        let train_loss = loss_acc / frame_acc.max(1) as f64;

        let mut val_acc = 0.0;
        let mut val_frames = 0usize;
        for chunk in &val_chunks {
            let input = inputs[chunk.utt].sub_rows(chunk.range.clone());
            let fp = model.forward(&input);
            let res = chunk.ctx.evaluate(cfg.kind, fp.mask())?;
            val_acc += res.total * res.per_frame.len() as f64;
            val_frames += res.per_frame.len();
        }
        let val_loss = val_acc / val_frames.max(1) as f64;
        if !val_loss.is_finite() {
            return Err(Error::Diverged { epoch, step: order.len() });
        }
        history.push(EpochStats { epoch, train_loss, val_loss, lr });
        sched.observe(val_loss);
    }
    Ok(TrainOutcome { model, history })
}
