//! Aux-LSTM and vanilla LSTM trajectory networks.
//!
//! Aux topology: stacked LSTM over the input sequence; the last hidden state
//! feeds a secondary linear-sigmoid head and, concatenated with the context
//! vector, a batch-norm + (dropout, relu dense) stack ending in a sigmoid
//! head. Vanilla: stacked LSTM then the sigmoid head. Both heads emit the
//! flattened `(x, y)` target of `output_steps` steps in normalized units.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crosspath_numkit::layers::BATCHNORM_MOMENTUM;
use crosspath_numkit::{
    clip_global_norm, dropout_mask, glorot_uniform, Activation, BatchStats, Container, LstmWeights, NumError,
    OptimizerState, ParamMap, Tape, Tensor, Var,
};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::seed::TrainSeeds;
use crate::windowing::{NormalizationParams, NormalizedSample, WindowingSpec};

pub const CLIP_NORM: f64 = 5.0;
pub const DEFAULT_SECONDARY_WEIGHT: f64 = 0.2;
const PREDICT_BATCH: usize = 512;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Aux,
    Vanilla,
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Aux => "aux",
            ModelKind::Vanilla => "vanilla",
        })
    }
}

impl FromStr for ModelKind {
    type Err = CoreError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "aux" => Ok(ModelKind::Aux),
            "vanilla" => Ok(ModelKind::Vanilla),
            _ => Err(CoreError::Config(format!("unknown model kind `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub lstm_layers: usize,
    pub dense_layers: usize,
    pub nodes: usize,
    pub dropout: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub secondary_loss_weight: f64,
    pub learning_rate: f64,
    pub input_features: usize,
    pub context_len: usize,
    pub output_steps: usize,
}

impl ModelConfig {
    pub fn aux(input_features: usize, context_len: usize, output_steps: usize) -> Self {
        Self {
            kind: ModelKind::Aux,
            lstm_layers: 1,
            dense_layers: 1,
            nodes: 50,
            dropout: 0.0,
            batch_size: 32,
            epochs: 100,
            secondary_loss_weight: DEFAULT_SECONDARY_WEIGHT,
            learning_rate: 1e-3,
            input_features,
            context_len,
            output_steps,
        }
    }

    pub fn vanilla(input_features: usize, output_steps: usize) -> Self {
        Self {
            kind: ModelKind::Vanilla,
            dense_layers: 0,
            context_len: 0,
            secondary_loss_weight: 0.0,
            ..Self::aux(input_features, 0, output_steps)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(CoreError::Build(m));
        if !(1..=3).contains(&self.lstm_layers) {
            return fail(format!("lstm_layers = {} outside 1..=3", self.lstm_layers));
        }
        match self.kind {
            ModelKind::Aux if !(1..=3).contains(&self.dense_layers) => {
                return fail(format!("dense_layers = {} outside 1..=3", self.dense_layers));
            }
            ModelKind::Vanilla if self.dense_layers != 0 => {
                return fail("vanilla networks have no dense layers".into());
            }
            _ => {}
        }
        if self.nodes == 0 || self.batch_size == 0 || self.epochs == 0 {
            return fail("nodes, batch_size and epochs must be positive".into());
        }
        if self.input_features == 0 || self.output_steps == 0 {
            return fail("input_features and output_steps must be positive".into());
        }
        if self.kind == ModelKind::Aux && self.context_len == 0 {
            return fail("aux networks need a context vector".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout = {} outside [0, 1)", self.dropout));
        }
        if !(self.secondary_loss_weight >= 0.0 && self.secondary_loss_weight.is_finite()) {
            return fail("secondary loss weight must be non-negative".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail("learning rate must be positive".into());
        }
        Ok(())
    }

    pub fn output_dim(&self) -> usize {
        2 * self.output_steps
    }

    /// Closed-form parameter count from the layer shapes.
    pub fn parameter_count(&self) -> usize {
        let (f, h, c, o) = (self.input_features, self.nodes, self.context_len, self.output_dim());
        let lstm = |fan_in: usize| 4 * h * (fan_in + h) + 4 * h;
        let mut n = lstm(f) + (self.lstm_layers - 1) * lstm(h);
        match self.kind {
            ModelKind::Vanilla => n += o * h + o,
            ModelKind::Aux => {
                let merged = h + c;
                n += o * h + o; // secondary head
                n += 2 * merged; // batch-norm scale and shift
                n += h * merged + h;
                n += (self.dense_layers - 1) * (h * h + h);
                n += o * h + o;
            }
        }
        n
    }
}

/// A mini-batch laid out time-major, left-padded to the longest input.
pub struct Batch {
    pub size: usize,
    pub steps: Vec<Tensor>,
    /// Per-step row validity; `None` when every row is valid.
    pub step_masks: Vec<Option<Vec<f64>>>,
    pub context: Tensor,
    pub target: Tensor,
    pub mask: Vec<f64>,
}

impl Batch {
    pub fn from_samples(samples: &[&NormalizedSample], n_features: usize) -> Result<Self> {
        let size = samples.len();
        if size == 0 {
            return Err(CoreError::State("empty batch".into()));
        }
        let t_max = samples.iter().map(|s| s.input_len).max().unwrap_or(0);
        if t_max == 0 {
            return Err(CoreError::State("samples have no input steps".into()));
        }
        let ctx_len = samples[0].context.len();
        let out_len = samples[0].target.len();
        let mut steps = Vec::with_capacity(t_max);
        let mut step_masks = Vec::with_capacity(t_max);
        for t in 0..t_max {
            let mut data = vec![0.0; size * n_features];
            let mut m = vec![1.0; size];
            let mut ragged = false;
            for (r, s) in samples.iter().enumerate() {
                let offset = t_max - s.input_len;
                if t < offset {
                    m[r] = 0.0;
                    ragged = true;
                } else {
                    let src = (t - offset) * n_features;
                    data[r * n_features..(r + 1) * n_features].copy_from_slice(&s.input[src..src + n_features]);
                }
            }
            steps.push(Tensor::new(vec![size, n_features], data)?);
            step_masks.push(ragged.then_some(m));
        }
        let mut context = Vec::with_capacity(size * ctx_len);
        let mut target = Vec::with_capacity(size * out_len);
        let mut mask = Vec::with_capacity(size * out_len);
        for s in samples {
            if s.context.len() != ctx_len || s.target.len() != out_len {
                return Err(CoreError::State("samples in a batch must share shapes".into()));
            }
            context.extend_from_slice(&s.context);
            target.extend_from_slice(&s.target);
            mask.extend_from_slice(&s.mask);
        }
        Ok(Self {
            size,
            steps,
            step_masks,
            context: Tensor::new(vec![size, ctx_len], context)?,
            target: Tensor::new(vec![size, out_len], target)?,
            mask,
        })
    }
}

/// Train mode draws dropout masks from the given generator.
pub enum Pass<'r> {
    Train(&'r mut ChaCha8Rng),
    Infer,
}

struct Recorded {
    main: Var,
    secondary: Option<Var>,
    stats: Option<BatchStats>,
}

/// Result of one differentiated mini-batch.
pub struct StepResult {
    pub loss: f64,
    pub grads: ParamMap,
    pub main: Tensor,
    pub batch_stats: Option<BatchStats>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub config: ModelConfig,
    pub params: ParamMap,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

fn lstm_names(l: usize) -> [String; 3] {
    [format!("lstm{l}.w_in"), format!("lstm{l}.w_rec"), format!("lstm{l}.b")]
}

impl Network {
    pub fn build(config: &ModelConfig, init_seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
        let mut params = ParamMap::new();
        let h = config.nodes;
        let o = config.output_dim();
        for l in 0..config.lstm_layers {
            let fan_in = if l == 0 { config.input_features } else { h };
            let w = LstmWeights::init(fan_in, h, &mut rng);
            let [a, b, c] = lstm_names(l);
            params.insert(a, w.input);
            params.insert(b, w.recurrent);
            params.insert(c, w.bias);
        }
        let dense = |params: &mut ParamMap, name: &str, out: usize, fan_in: usize, rng: &mut ChaCha8Rng| {
            params.insert(format!("{name}.w"), glorot_uniform(out, fan_in, rng));
            params.insert(format!("{name}.b"), Tensor::zeros(&[out]));
        };
        let (running_mean, running_var) = match config.kind {
            ModelKind::Vanilla => {
                dense(&mut params, "out", o, h, &mut rng);
                (Vec::new(), Vec::new())
            }
            ModelKind::Aux => {
                let merged = h + config.context_len;
                dense(&mut params, "aux", o, h, &mut rng);
                params.insert("bn.gamma".into(), Tensor::full(&[merged], 1.0));
                params.insert("bn.beta".into(), Tensor::zeros(&[merged]));
                for d in 0..config.dense_layers {
                    let fan_in = if d == 0 { merged } else { h };
                    dense(&mut params, &format!("dense{d}"), h, fan_in, &mut rng);
                }
                dense(&mut params, "out", o, h, &mut rng);
                (vec![0.0; merged], vec![1.0; merged])
            }
        };
        Ok(Self {
            config: config.clone(),
            params,
            running_mean,
            running_var,
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    fn param(&self, tape: &mut Tape, name: &str) -> Result<Var> {
        let t = self
            .params
            .get(name)
            .ok_or_else(|| CoreError::State(format!("missing parameter `{name}`")))?;
        Ok(tape.param(name, t)?)
    }

    fn dropout(&self, tape: &mut Tape, x: Var, pass: &mut Pass<'_>) -> Result<Var> {
        let rate = self.config.dropout;
        match pass {
            Pass::Train(rng) if rate > 0.0 => {
                let n = tape.value(x)?.len();
                Ok(tape.dropout(x, dropout_mask(n, rate, &mut **rng))?)
            }
            _ => Ok(x),
        }
    }

    /// Record the LSTM stack; returns the last hidden state `[B × H]`.
    fn record_encoder(&self, tape: &mut Tape, batch: &Batch, pass: &mut Pass<'_>) -> Result<Var> {
        let h = self.config.nodes;
        let layers = self.config.lstm_layers;
        let t_len = batch.steps.len();
        let mut inputs = batch
            .steps
            .iter()
            .map(|x| tape.constant(x.clone()))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        for l in 0..layers {
            let [a, b, c] = lstm_names(l);
            let (wi, wr, bias) = (self.param(tape, &a)?, self.param(tape, &b)?, self.param(tape, &c)?);
            let last_layer = l + 1 == layers;
            let mut state = None;
            let mut outputs = Vec::with_capacity(if last_layer { 1 } else { t_len });
            for (t, &x) in inputs.iter().enumerate() {
                let s = tape.lstm_cell(x, state, wi, wr, bias, batch.step_masks[t].as_deref())?;
                state = Some(s);
                if !last_layer || t + 1 == t_len {
                    let hs = tape.slice_cols(s, 0, h)?;
                    outputs.push(if last_layer { hs } else { self.dropout(tape, hs, pass)? });
                }
            }
            inputs = outputs;
        }
        inputs
            .pop()
            .ok_or_else(|| CoreError::State("empty input sequence".into()))
    }

    fn record_head(&self, tape: &mut Tape, h_last: Var, context: Var, pass: &mut Pass<'_>) -> Result<Recorded> {
        let linear = |net: &Self, tape: &mut Tape, x: Var, name: &str, act: Activation| -> Result<Var> {
            let w = net.param(tape, &format!("{name}.w"))?;
            let b = net.param(tape, &format!("{name}.b"))?;
            let z = tape.linear(x, w, b)?;
            Ok(tape.activation(z, act)?)
        };
        match self.config.kind {
            ModelKind::Vanilla => Ok(Recorded {
                main: linear(self, tape, h_last, "out", Activation::Sigmoid)?,
                secondary: None,
                stats: None,
            }),
            ModelKind::Aux => {
                let secondary = linear(self, tape, h_last, "aux", Activation::Sigmoid)?;
                let merged = tape.concat_cols(h_last, context)?;
                let gamma = self.param(tape, "bn.gamma")?;
                let beta = self.param(tape, "bn.beta")?;
                let (mut z, stats) = match pass {
                    Pass::Train(_) => {
                        let (z, s) = tape.batchnorm_train(merged, gamma, beta)?;
                        (z, Some(s))
                    }
                    Pass::Infer => (
                        tape.batchnorm_infer(merged, gamma, beta, &self.running_mean, &self.running_var)?,
                        None,
                    ),
                };
                for d in 0..self.config.dense_layers {
                    z = self.dropout(tape, z, pass)?;
                    z = linear(self, tape, z, &format!("dense{d}"), Activation::Relu)?;
                }
                Ok(Recorded {
                    main: linear(self, tape, z, "out", Activation::Sigmoid)?,
                    secondary: Some(secondary),
                    stats,
                })
            }
        }
    }

    fn record(&self, tape: &mut Tape, batch: &Batch, pass: &mut Pass<'_>) -> Result<Recorded> {
        let h_last = self.record_encoder(tape, batch, pass)?;
        let context = tape.constant(batch.context.clone())?;
        self.record_head(tape, h_last, context, pass)
    }

    fn record_objective(&self, tape: &mut Tape, rec: &Recorded, batch: &Batch) -> Result<Var> {
        let main = tape.masked_mse(rec.main, &batch.target, &batch.mask)?;
        match rec.secondary {
            Some(sec) if self.config.secondary_loss_weight > 0.0 => {
                let s = tape.masked_mse(sec, &batch.target, &batch.mask)?;
                let s = tape.scale(s, self.config.secondary_loss_weight)?;
                Ok(tape.add(main, s)?)
            }
            _ => Ok(main),
        }
    }

    /// Dual-loss objective of one batch without gradients.
    pub fn objective(&self, batch: &Batch, mut pass: Pass<'_>) -> Result<f64> {
        let mut tape = Tape::new();
        let rec = self.record(&mut tape, batch, &mut pass)?;
        let l = self.record_objective(&mut tape, &rec, batch)?;
        Ok(tape.value(l)?.item()?)
    }

    /// Objective plus gradients for every parameter.
    pub fn objective_and_grads(&self, batch: &Batch, mut pass: Pass<'_>) -> Result<StepResult> {
        let mut tape = Tape::new();
        let rec = self.record(&mut tape, batch, &mut pass)?;
        let l = self.record_objective(&mut tape, &rec, batch)?;
        let loss = tape.value(l)?.item()?;
        let main = tape.value(rec.main)?.clone();
        let grads = tape.backward(l)?.into_params();
        Ok(StepResult {
            loss,
            grads,
            main,
            batch_stats: rec.stats,
        })
    }

    /// Infer-mode main and secondary outputs for a batch.
    pub fn forward(&self, batch: &Batch) -> Result<(Tensor, Option<Tensor>)> {
        let mut tape = Tape::new();
        let rec = self.record(&mut tape, batch, &mut Pass::Infer)?;
        let main = tape.value(rec.main)?.clone();
        let sec = rec.secondary.map(|s| tape.value(s).cloned()).transpose()?;
        Ok((main, sec))
    }

    /// Infer-mode last hidden state `[B × H]`; independent of the context.
    pub fn encode(&self, batch: &Batch) -> Result<Tensor> {
        let mut tape = Tape::new();
        let h = self.record_encoder(&mut tape, batch, &mut Pass::Infer)?;
        Ok(tape.value(h)?.clone())
    }

    /// Infer-mode main output from precomputed hidden states and contexts.
    pub fn head(&self, h_last: &Tensor, context: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let h = tape.constant(h_last.clone())?;
        let c = tape.constant(context.clone())?;
        let rec = self.record_head(&mut tape, h, c, &mut Pass::Infer)?;
        Ok(tape.value(rec.main)?.clone())
    }

    /// Normalized main-head outputs for every sample, in order.
    pub fn predict_normalized(&self, samples: &[NormalizedSample]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(PREDICT_BATCH) {
            let refs: Vec<&NormalizedSample> = chunk.iter().collect();
            let batch = Batch::from_samples(&refs, self.config.input_features)?;
            let (main, _) = self.forward(&batch)?;
            let width = self.config.output_dim();
            out.extend(main.data().chunks(width).map(<[f64]>::to_vec));
        }
        Ok(out)
    }

    /// Denormalized `(x, y)` predictions for the valid target steps.
    pub fn predict(&self, norm: &NormalizationParams, sample: &NormalizedSample) -> Result<Vec<[f64; 2]>> {
        let pred = self.predict_normalized(std::slice::from_ref(sample))?;
        let metres = norm.denormalize_xy(&pred[0])?;
        Ok(metres
            .chunks(2)
            .zip(sample.mask.chunks(2))
            .filter(|(_, m)| m[0] > 0.0)
            .map(|(p, _)| [p[0], p[1]])
            .collect())
    }

    fn update_running(&mut self, stats: &BatchStats) {
        let m = BATCHNORM_MOMENTUM;
        for (r, b) in self.running_mean.iter_mut().zip(&stats.mean) {
            *r = m * *r + (1.0 - m) * b;
        }
        for (r, b) in self.running_var.iter_mut().zip(&stats.var) {
            *r = m * *r + (1.0 - m) * b;
        }
    }
}

/// Masked MSE of the main head plus `λ` times that of the secondary head.
pub fn loss(pred: &[f64], secondary: &[f64], target: &[f64], mask: &[f64], lambda: f64) -> Result<f64> {
    Ok(masked_mse(pred, target, mask)? + lambda * masked_mse(secondary, target, mask)?)
}

fn masked_mse(pred: &[f64], target: &[f64], mask: &[f64]) -> Result<f64> {
    if pred.len() != target.len() || pred.len() != mask.len() {
        return Err(CoreError::State("prediction, target and mask lengths differ".into()));
    }
    let denom: f64 = mask.iter().sum();
    if denom <= 0.0 {
        return Err(NumError::EmptyTarget.into());
    }
    Ok(pred
        .iter()
        .zip(target)
        .zip(mask)
        .map(|((p, t), w)| w * (p - t) * (p - t))
        .sum::<f64>()
        / denom)
}

/// Root of the mean squared error over every valid coordinate entry
/// (x and y pooled).
pub fn rmse(pred: &[f64], target: &[f64], mask: &[f64]) -> Result<f64> {
    Ok(masked_mse(pred, target, mask)?.sqrt())
}

/// Running sum of squared metre errors.
#[derive(Clone, Copy, Debug, Default)]
pub struct ErrorAccumulator {
    pub sq: f64,
    pub n: f64,
}

impl ErrorAccumulator {
    pub fn add(&mut self, pred_m: &[f64], target_m: &[f64], mask: &[f64]) {
        for ((p, t), w) in pred_m.iter().zip(target_m).zip(mask) {
            self.sq += w * (p - t) * (p - t);
            self.n += w;
        }
    }

    pub fn rmse(&self) -> Result<f64> {
        if self.n <= 0.0 {
            return Err(NumError::EmptyTarget.into());
        }
        Ok((self.sq / self.n).sqrt())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_rmse: f64,
    pub val_loss: Option<f64>,
    pub val_rmse: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
}

impl TrainingHistory {
    pub fn best(&self) -> Option<&EpochRecord> {
        self.epochs.get(self.best_epoch.checked_sub(1)?)
    }

    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut s = String::from("epoch,train_loss,train_rmse,val_loss,val_rmse\n");
        for e in &self.epochs {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                e.epoch,
                e.train_loss,
                e.train_rmse,
                opt(e.val_loss),
                opt(e.val_rmse)
            ));
        }
        s
    }
}

/// Loss and metre RMSE of a network over a sample set (infer mode).
pub fn evaluate(net: &Network, samples: &[NormalizedSample], norm: &NormalizationParams) -> Result<(f64, f64)> {
    let lambda = net.config.secondary_loss_weight;
    let (mut main_sq, mut sec_sq, mut weight) = (0.0, 0.0, 0.0);
    let mut err = ErrorAccumulator::default();
    for chunk in samples.chunks(PREDICT_BATCH) {
        let refs: Vec<&NormalizedSample> = chunk.iter().collect();
        let batch = Batch::from_samples(&refs, net.config.input_features)?;
        let (main, sec) = net.forward(&batch)?;
        for (i, w) in batch.mask.iter().enumerate() {
            let t = batch.target.data()[i];
            main_sq += w * (main.data()[i] - t).powi(2);
            if let Some(s) = &sec {
                sec_sq += w * (s.data()[i] - t).powi(2);
            }
            weight += w;
        }
        let width = net.config.output_dim();
        for (row, s) in main.data().chunks(width).zip(chunk) {
            err.add(&norm.denormalize_xy(row)?, &s.raw_target, &s.mask);
        }
    }
    if weight <= 0.0 {
        return Err(NumError::EmptyTarget.into());
    }
    let sec_term = if net.config.kind == ModelKind::Aux { lambda * sec_sq / weight } else { 0.0 };
    Ok((main_sq / weight + sec_term, err.rmse()?))
}

/// Batch boundaries that never leave a single-row batch behind when the
/// network normalizes over the batch.
fn batch_ranges(n: usize, batch_size: usize, avoid_singleton: bool) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = 0;
    while start < n {
        let mut end = (start + batch_size).min(n);
        if avoid_singleton && n - end == 1 {
            end = n;
        }
        out.push((start, end));
        start = end;
    }
    out
}

/// Mini-batch training with seeded shuffling and dropout. When `val` is
/// non-empty the parameters of the epoch with the lowest validation loss
/// are kept; otherwise the last epoch's.
pub fn train(
    net: &mut Network,
    train: &[NormalizedSample],
    val: &[NormalizedSample],
    norm: &NormalizationParams,
    seeds: TrainSeeds,
) -> Result<TrainingHistory> {
    if train.is_empty() {
        return Err(CoreError::State("training set is empty".into()));
    }
    let cfg = net.config.clone();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(seeds.shuffle);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(seeds.dropout);
    let mut opt = OptimizerState::with_lr(cfg.learning_rate);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let ranges = batch_ranges(train.len(), cfg.batch_size, cfg.kind == ModelKind::Aux);
    let mut history = TrainingHistory::default();
    let mut best: Option<(f64, Network)> = None;
    let diverged = |epoch: usize, e: CoreError| match e {
        CoreError::Num(NumError::Diverged(m)) => CoreError::Diverged { epoch, message: m },
        other => other,
    };

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let (mut loss_sum, mut count) = (0.0, 0usize);
        let mut err = ErrorAccumulator::default();
        for &(a, b) in &ranges {
            let refs: Vec<&NormalizedSample> = order[a..b].iter().map(|&i| &train[i]).collect();
            let batch = Batch::from_samples(&refs, cfg.input_features)?;
            let mut step = net
                .objective_and_grads(&batch, Pass::Train(&mut dropout_rng))
                .map_err(|e| diverged(epoch, e))?;
            if !step.loss.is_finite() {
                return Err(CoreError::Diverged {
                    epoch,
                    message: format!("non-finite loss {}", step.loss),
                });
            }
            clip_global_norm(&mut step.grads, CLIP_NORM);
            opt.step(&mut net.params, &step.grads)
                .map_err(|e| diverged(epoch, e.into()))?;
            if let Some(stats) = &step.batch_stats {
                net.update_running(stats);
            }
            loss_sum += step.loss * batch.size as f64;
            count += batch.size;
            for (row, s) in step.main.data().chunks(cfg.output_dim()).zip(&refs) {
                err.add(&norm.denormalize_xy(row)?, &s.raw_target, &s.mask);
            }
        }
        let (val_loss, val_rmse) = if val.is_empty() {
            (None, None)
        } else {
            let (l, r) = evaluate(net, val, norm)?;
            if !l.is_finite() {
                return Err(CoreError::Diverged {
                    epoch,
                    message: format!("non-finite validation loss {l}"),
                });
            }
            (Some(l), Some(r))
        };
        history.epochs.push(EpochRecord {
            epoch,
            train_loss: loss_sum / count as f64,
            train_rmse: err.rmse()?,
            val_loss,
            val_rmse,
        });
        match val_loss {
            Some(l) if best.as_ref().is_none_or(|(b, _)| l < *b) => {
                best = Some((l, net.clone()));
                history.best_epoch = epoch;
            }
            None => history.best_epoch = epoch,
            _ => {}
        }
    }
    if let Some((_, kept)) = best {
        *net = kept;
    }
    Ok(history)
}

pub const MODEL_SCHEMA: &str = "crosspath-model/1";

/// Everything needed to reuse a trained network on new crossings.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelArtifact {
    pub network: Network,
    pub normalization: NormalizationParams,
    pub windowing: WindowingSpec,
    /// Free-form provenance (data type, seeds, split).
    pub provenance: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct ArtifactMeta {
    schema: String,
    config: ModelConfig,
    normalization: NormalizationParams,
    windowing: WindowingSpec,
    provenance: serde_json::Value,
}

impl ModelArtifact {
    pub fn to_container(&self) -> Result<Container> {
        let meta = ArtifactMeta {
            schema: MODEL_SCHEMA.into(),
            config: self.network.config.clone(),
            normalization: self.normalization.clone(),
            windowing: self.windowing,
            provenance: self.provenance.clone(),
        };
        let meta = serde_json::to_string(&meta).map_err(|e| CoreError::State(e.to_string()))?;
        let mut tensors: BTreeMap<String, Tensor> = self.network.params.clone();
        if !self.network.running_mean.is_empty() {
            tensors.insert("bn.running_mean".into(), Tensor::vector(self.network.running_mean.clone()));
            tensors.insert("bn.running_var".into(), Tensor::vector(self.network.running_var.clone()));
        }
        Ok(Container::new(meta, tensors))
    }

    pub fn from_container(c: Container) -> Result<Self> {
        let meta: ArtifactMeta =
            serde_json::from_str(&c.meta).map_err(|e| CoreError::schema("meta", e.to_string()))?;
        if meta.schema != MODEL_SCHEMA {
            return Err(CoreError::SchemaVersion {
                expected: MODEL_SCHEMA.into(),
                found: meta.schema,
            });
        }
        let mut tensors = c.tensors;
        let running_mean = tensors.remove("bn.running_mean").map(Tensor::into_data).unwrap_or_default();
        let running_var = tensors.remove("bn.running_var").map(Tensor::into_data).unwrap_or_default();
        let network = Network {
            config: meta.config,
            params: tensors,
            running_mean,
            running_var,
        };
        let reference = Network::build(&network.config, 0)?;
        for (name, t) in &reference.params {
            match network.params.get(name) {
                Some(p) if p.shape() == t.shape() && p.all_finite() => {}
                _ => return Err(CoreError::schema(name.clone(), "missing, misshapen or non-finite tensor")),
            }
        }
        if network.params.len() != reference.params.len() || network.running_mean.len() != reference.running_mean.len()
        {
            return Err(CoreError::schema("tensors", "tensor set does not match the configuration"));
        }
        Ok(Self {
            network,
            normalization: meta.normalization,
            windowing: meta.windowing,
            provenance: meta.provenance,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_container()?.to_bytes()).map_err(|e| CoreError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| CoreError::io(path, e))?;
        Self::from_container(Container::from_bytes(&bytes)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::windowing::NormalizedSample;
    use rand::Rng;

    fn sample(rng: &mut ChaCha8Rng, t_in: usize, f: usize, c: usize, t_out: usize) -> NormalizedSample {
        let target: Vec<f64> = (0..2 * t_out).map(|_| rng.random_range(0.1..0.9)).collect();
        NormalizedSample {
            input: (0..t_in * f).map(|_| rng.random_range(0.0..1.0)).collect(),
            input_len: t_in,
            context: (0..c).map(|_| f64::from(rng.random_range(0..2u8))).collect(),
            raw_target: target.clone(),
            target,
            mask: vec![1.0; 2 * t_out],
        }
    }

    #[test]
    fn aux_parameter_count_closed_form() {
        let mut cfg = ModelConfig::aux(4, 10, 10);
        cfg.lstm_layers = 2;
        cfg.dense_layers = 2;
        cfg.nodes = 50;
        // lstm 11000 + 20200, secondary 1020, bn 120, dense 3050 + 2550, out 1020
        assert_eq!(cfg.parameter_count(), 38960);
        let net = Network::build(&cfg, 1).unwrap();
        assert_eq!(net.parameter_count(), 38960);
        assert_eq!(net.params["out.w"].shape(), &[20, 50]);

        let mut van = ModelConfig::vanilla(4, 10);
        van.lstm_layers = 2;
        van.nodes = 50;
        let v = Network::build(&van, 1).unwrap();
        assert_eq!(v.parameter_count(), 32220);
        assert!(v.parameter_count() < net.parameter_count());
    }

    #[test]
    fn aux_without_context_is_vanilla_plus_secondary_head() {
        let mut aux = ModelConfig::aux(3, 10, 5);
        aux.nodes = 8;
        aux.lstm_layers = 2;
        aux.dense_layers = 2;
        let van = ModelConfig {
            nodes: 8,
            lstm_layers: 2,
            ..ModelConfig::vanilla(3, 5)
        };
        let a = Network::build(&aux, 0).unwrap();
        let v = Network::build(&van, 0).unwrap();
        let count = |net: &Network, pred: &dyn Fn(&str) -> bool| -> usize {
            net.params.iter().filter(|(k, _)| pred(k)).map(|(_, t)| t.len()).sum()
        };
        let context_branch = count(&a, &|k| k.starts_with("bn.") || k.starts_with("dense"));
        let secondary = count(&a, &|k| k.starts_with("aux."));
        assert_eq!(a.parameter_count() - context_branch, v.parameter_count() + secondary);
    }

    #[test]
    fn build_rejects_bad_configs() {
        let mut cfg = ModelConfig::aux(4, 10, 10);
        cfg.lstm_layers = 0;
        assert!(matches!(Network::build(&cfg, 0), Err(CoreError::Build(_))));
        let mut cfg = ModelConfig::vanilla(4, 10);
        cfg.dense_layers = 1;
        assert!(Network::build(&cfg, 0).is_err());
        let mut cfg = ModelConfig::aux(4, 10, 10);
        cfg.dropout = 1.0;
        assert!(Network::build(&cfg, 0).is_err());
    }

    #[test]
    fn loss_examples() {
        let t = [0.5, 0.5];
        let m = [1.0, 1.0];
        assert_eq!(loss(&t, &t, &t, &m, 0.7).unwrap(), 0.0);
        let l = loss(&[0.7, 0.9], &[0.0, 0.0], &t, &m, 0.0).unwrap();
        assert!((l - 0.10).abs() < 1e-12);
        let sec = [0.1, 0.3];
        let msec = ((0.4f64).powi(2) + (0.2f64).powi(2)) / 2.0;
        assert!((loss(&t, &sec, &t, &m, 0.2).unwrap() - 0.2 * msec).abs() < 1e-15);
        assert!(matches!(
            loss(&t, &t, &t, &[0.0, 0.0], 0.2),
            Err(CoreError::Num(NumError::EmptyTarget))
        ));
    }

    #[test]
    fn rmse_examples() {
        let target = vec![1.0, 2.0, 3.0, 4.0];
        let mask = vec![1.0; 4];
        assert_eq!(rmse(&target, &target, &mask).unwrap(), 0.0);
        let shifted: Vec<f64> = target
            .chunks(2)
            .flat_map(|r| [r[0] + 0.3, r[1] + 0.4])
            .collect();
        assert!((rmse(&shifted, &target, &mask).unwrap() - 0.125f64.sqrt()).abs() < 1e-12);
        let e = 0.8;
        let r = rmse(&[e, 0.0], &[0.0, 0.0], &[1.0, 1.0]).unwrap();
        assert!((r - e / 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn untrained_outputs_are_bounded_and_shaped() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let samples: Vec<NormalizedSample> = (0..5).map(|_| sample(&mut rng, 6, 4, 10, 3)).collect();
        for cfg in [ModelConfig::aux(4, 10, 3), ModelConfig::vanilla(4, 3)] {
            let net = Network::build(&cfg, 9).unwrap();
            let preds = net.predict_normalized(&samples).unwrap();
            assert_eq!(preds.len(), 5);
            for p in preds {
                assert_eq!(p.len(), 6);
                assert!(p.iter().all(|v| *v > 0.0 && *v < 1.0));
            }
        }
    }

    #[test]
    fn head_matches_full_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let samples: Vec<NormalizedSample> = (0..4).map(|_| sample(&mut rng, 5, 2, 10, 2)).collect();
        let net = Network::build(&ModelConfig::aux(2, 10, 2), 2).unwrap();
        let refs: Vec<&NormalizedSample> = samples.iter().collect();
        let batch = Batch::from_samples(&refs, 2).unwrap();
        let (full, _) = net.forward(&batch).unwrap();
        let h = net.encode(&batch).unwrap();
        assert_eq!(net.head(&h, &batch.context).unwrap(), full);
    }

    #[test]
    fn left_padding_matches_unpadded_run() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let short = sample(&mut rng, 3, 2, 10, 2);
        let long = sample(&mut rng, 7, 2, 10, 2);
        let net = Network::build(&ModelConfig::aux(2, 10, 2), 3).unwrap();
        let alone = net.encode(&Batch::from_samples(&[&short], 2).unwrap()).unwrap();
        let mixed = net.encode(&Batch::from_samples(&[&long, &short], 2).unwrap()).unwrap();
        for (a, b) in alone.row(0).iter().zip(mixed.row(1)) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    fn linear_task(n: usize, seed: u64) -> Vec<NormalizedSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let a: f64 = rng.random_range(0.1..0.9);
                let b: f64 = rng.random_range(0.0..0.2);
                let input: Vec<f64> = (0..5).flat_map(|k| [a, b * k as f64 / 4.0]).collect();
                let target = vec![a, b + 0.3, a, b + 0.5];
                NormalizedSample {
                    input,
                    input_len: 5,
                    context: vec![0.0; 10],
                    raw_target: target.clone(),
                    target,
                    mask: vec![1.0; 4],
                }
            })
            .collect()
    }

    fn identity_norm() -> NormalizationParams {
        NormalizationParams {
            min: vec![0.0, 0.0],
            max: vec![1.0, 1.0],
            sentinel_column: None,
        }
    }

    #[test]
    fn learns_a_linear_mapping() {
        let data = linear_task(64, 1);
        let mut cfg = ModelConfig::vanilla(2, 2);
        cfg.nodes = 10;
        cfg.epochs = 200;
        cfg.batch_size = 16;
        cfg.learning_rate = 3e-3;
        let mut net = Network::build(&cfg, 1).unwrap();
        let h = train(&mut net, &data, &[], &identity_norm(), TrainSeeds::from_one(1)).unwrap();
        let first = h.epochs[0].train_loss;
        let last = h.epochs.last().unwrap().train_loss;
        assert!(last < 0.1 * first, "{first} -> {last}");
        assert_eq!(h.best_epoch, 200);
    }

    #[test]
    fn training_is_deterministic() {
        let data = linear_task(40, 2);
        let mut cfg = ModelConfig::aux(2, 10, 2);
        cfg.nodes = 6;
        cfg.epochs = 3;
        cfg.batch_size = 8;
        cfg.dropout = 0.2;
        let run = || {
            let mut net = Network::build(&cfg, 4).unwrap();
            let h = train(&mut net, &data[..30], &data[30..], &identity_norm(), TrainSeeds::from_one(5)).unwrap();
            (h, net)
        };
        let (h1, n1) = run();
        let (h2, n2) = run();
        assert_eq!(h1, h2);
        assert_eq!(n1, n2);
        assert_eq!(h1.epochs.len(), 3);
        assert!((1..=3).contains(&h1.best_epoch));
    }

    #[test]
    fn secondary_weight_changes_the_trajectory() {
        let data = linear_task(32, 3);
        let mut cfg = ModelConfig::aux(2, 10, 2);
        cfg.nodes = 6;
        cfg.epochs = 1;
        cfg.batch_size = 8;
        let run = |lambda: f64| {
            let mut c = cfg.clone();
            c.secondary_loss_weight = lambda;
            let mut net = Network::build(&c, 4).unwrap();
            train(&mut net, &data, &[], &identity_norm(), TrainSeeds::from_one(5)).unwrap();
            net.params["lstm0.w_in"].clone()
        };
        assert_ne!(run(0.0), run(0.2));
    }

    #[test]
    fn singleton_batches_are_merged() {
        assert_eq!(batch_ranges(9, 4, true), vec![(0, 4), (4, 9)]);
        assert_eq!(batch_ranges(9, 4, false), vec![(0, 4), (4, 8), (8, 9)]);
        assert_eq!(batch_ranges(1, 4, true), vec![(0, 1)]);
    }

    #[test]
    fn artifact_round_trip() {
        let cfg = ModelConfig::aux(4, 10, 3);
        let art = ModelArtifact {
            network: Network::build(&cfg, 1).unwrap(),
            normalization: NormalizationParams {
                min: vec![0.0; 4],
                max: vec![1.0, 2.0, 3.0, 4.0],
                sentinel_column: Some(3),
            },
            windowing: crate::windowing::DataType::T11.spec(crate::windowing::Variant::Xyod, 1),
            provenance: serde_json::json!({"seed": 7}),
        };
        let bytes = art.to_container().unwrap().to_bytes();
        let back = ModelArtifact::from_container(Container::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back, art);
        assert_eq!(back.to_container().unwrap().to_bytes(), bytes);
    }
}
