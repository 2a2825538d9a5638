//! Layer primitives: activations, the LSTM cell, dense, batch normalization
//! and dropout. The free functions here are the eager (tape-free) forms; the
//! [`Tape`](crate::Tape) records the same kernels with their adjoints.
//!
//! Weight matrices use the `[out × in]` convention, so a dense layer computes
//! `activation(W·x + b)` and a batch of row vectors `X` maps to `X·Wᵀ + b`.
//! LSTM gate blocks are stacked in the order input, forget, candidate, output.

use rand::Rng;

use crate::error::{dim_err, NumError, Result};
use crate::tensor::{gemm, Tensor};

pub const BATCHNORM_EPS: f64 = 1e-5;
pub const BATCHNORM_MOMENTUM: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Activation {
    Relu,
    Sigmoid,
    Tanh,
    Linear,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Sigmoid => sigmoid(x),
            Activation::Tanh => x.tanh(),
            Activation::Linear => x,
        }
    }

    /// Derivative expressed through the activation's output `y`.
    pub fn grad_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Tanh => 1.0 - y * y,
            Activation::Linear => 1.0,
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Dense,
    Lstm,
    BatchNorm,
    Dropout,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub width: usize,
    pub activation: Activation,
    pub dropout_rate: f64,
}

impl LayerSpec {
    pub fn new(kind: LayerKind, width: usize, activation: Activation, dropout_rate: f64) -> Result<Self> {
        let spec = Self {
            kind,
            width,
            activation,
            dropout_rate,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 {
            return Err(NumError::InvalidLayer("width must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(NumError::InvalidLayer(format!(
                "dropout rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        Ok(())
    }
}

/// Parameters of one LSTM layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmWeights {
    /// `[4H × F]`
    pub input: Tensor,
    /// `[4H × H]`
    pub recurrent: Tensor,
    /// `[4H]`
    pub bias: Tensor,
}

impl LstmWeights {
    pub fn zeros(input_dim: usize, hidden: usize) -> Self {
        Self {
            input: Tensor::zeros(&[4 * hidden, input_dim]),
            recurrent: Tensor::zeros(&[4 * hidden, hidden]),
            bias: Tensor::zeros(&[4 * hidden]),
        }
    }

    /// Uniform ±1/sqrt(fan_in) kernels, forget-gate bias 1, other biases 0.
    pub fn init<R: Rng + ?Sized>(input_dim: usize, hidden: usize, rng: &mut R) -> Self {
        let mut w = Self::zeros(input_dim, hidden);
        let bound = 1.0 / (input_dim as f64).sqrt();
        for v in w.input.data_mut() {
            *v = rng.random_range(-bound..bound);
        }
        let bound = 1.0 / (hidden as f64).sqrt();
        for v in w.recurrent.data_mut() {
            *v = rng.random_range(-bound..bound);
        }
        w.bias.data_mut()[hidden..2 * hidden].fill(1.0);
        w
    }

    pub fn hidden(&self) -> usize {
        self.recurrent.shape()[1]
    }

    pub fn input_dim(&self) -> usize {
        self.input.shape()[1]
    }

    pub(crate) fn check(&self) -> Result<()> {
        let h = self.recurrent.shape().get(1).copied().unwrap_or(0);
        let ok = self.recurrent.shape() == [4 * h, h]
            && self.input.shape().len() == 2
            && self.input.shape()[0] == 4 * h
            && self.bias.shape() == [4 * h];
        if ok && h > 0 {
            Ok(())
        } else {
            Err(dim_err(
                "lstm weights",
                format!(
                    "input {:?}, recurrent {:?}, bias {:?}",
                    self.input.shape(),
                    self.recurrent.shape(),
                    self.bias.shape()
                ),
            ))
        }
    }
}

/// Glorot-uniform `[out × in]` kernel.
pub fn glorot_uniform<R: Rng + ?Sized>(out_dim: usize, in_dim: usize, rng: &mut R) -> Tensor {
    let bound = (6.0 / (in_dim + out_dim) as f64).sqrt();
    let data = (0..out_dim * in_dim)
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    Tensor::new(vec![out_dim, in_dim], data).expect("glorot shape")
}

/// Output of one batched LSTM step. `gates` holds activated `[i f g o]`
/// blocks per row, all buffers row-major over the batch.
pub(crate) struct LstmStep {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
    pub gates: Vec<f64>,
    pub tanh_c: Vec<f64>,
}

/// Batched LSTM step. `mask[r] == 0` carries row `r`'s state through unchanged.
#[allow(clippy::too_many_arguments)]
pub(crate) fn lstm_step(
    x: &[f64],
    batch: usize,
    input_dim: usize,
    h_prev: &[f64],
    c_prev: &[f64],
    w_in: &[f64],
    w_rec: &[f64],
    bias: &[f64],
    hidden: usize,
    mask: Option<&[f64]>,
) -> LstmStep {
    let g4 = 4 * hidden;
    let mut pre = vec![0.0; batch * g4];
    for row in pre.chunks_mut(g4) {
        row.copy_from_slice(bias);
    }
    gemm(batch, input_dim, g4, x, false, w_in, true, &mut pre, 1.0);
    gemm(batch, hidden, g4, h_prev, false, w_rec, true, &mut pre, 1.0);

    let mut h = vec![0.0; batch * hidden];
    let mut c = vec![0.0; batch * hidden];
    let mut tanh_c = vec![0.0; batch * hidden];
    for r in 0..batch {
        let p = &mut pre[r * g4..(r + 1) * g4];
        for j in 0..hidden {
            p[j] = sigmoid(p[j]);
            p[hidden + j] = sigmoid(p[hidden + j]);
            p[2 * hidden + j] = p[2 * hidden + j].tanh();
            p[3 * hidden + j] = sigmoid(p[3 * hidden + j]);
        }
        let m = mask.map_or(1.0, |m| m[r]);
        for j in 0..hidden {
            let k = r * hidden + j;
            let cn = p[hidden + j] * c_prev[k] + p[j] * p[2 * hidden + j];
            let tc = cn.tanh();
            let hn = p[3 * hidden + j] * tc;
            tanh_c[k] = tc;
            c[k] = m * cn + (1.0 - m) * c_prev[k];
            h[k] = m * hn + (1.0 - m) * h_prev[k];
        }
    }
    LstmStep {
        h,
        c,
        gates: pre,
        tanh_c,
    }
}

fn as_batch(x: &Tensor) -> (usize, usize) {
    x.matrix_dims()
}

/// One LSTM cell step on a single vector or a `[B × F]` batch.
pub fn lstm_cell_forward(
    x_t: &Tensor,
    h_prev: &Tensor,
    c_prev: &Tensor,
    weights: &LstmWeights,
) -> Result<(Tensor, Tensor)> {
    weights.check()?;
    let hidden = weights.hidden();
    let (batch, f) = as_batch(x_t);
    if f != weights.input_dim() {
        return Err(dim_err(
            "lstm_cell",
            format!("input width {f}, weights expect {}", weights.input_dim()),
        ));
    }
    for (name, t) in [("h_prev", h_prev), ("c_prev", c_prev)] {
        if as_batch(t) != (batch, hidden) {
            return Err(dim_err(
                "lstm_cell",
                format!("{name} is {:?}, expected {batch}x{hidden}", t.shape()),
            ));
        }
    }
    let step = lstm_step(
        x_t.data(),
        batch,
        f,
        h_prev.data(),
        c_prev.data(),
        weights.input.data(),
        weights.recurrent.data(),
        weights.bias.data(),
        hidden,
        None,
    );
    let shape = h_prev.shape().to_vec();
    Ok((Tensor::new(shape.clone(), step.h)?, Tensor::new(shape, step.c)?))
}

/// `activation(W·x + b)` for a vector `x`, or row-wise for a `[B × in]` batch.
pub fn dense_forward(x: &Tensor, weights: &Tensor, bias: &Tensor, activation: Activation) -> Result<Tensor> {
    let (out_dim, in_dim) = weights.matrix_dims();
    let (batch, f) = as_batch(x);
    if weights.shape().len() != 2 || f != in_dim || bias.len() != out_dim {
        return Err(dim_err(
            "dense",
            format!(
                "x {:?}, weights {:?}, bias {:?}",
                x.shape(),
                weights.shape(),
                bias.shape()
            ),
        ));
    }
    let mut out = vec![0.0; batch * out_dim];
    for row in out.chunks_mut(out_dim) {
        row.copy_from_slice(bias.data());
    }
    gemm(batch, in_dim, out_dim, x.data(), false, weights.data(), true, &mut out, 1.0);
    out.iter_mut().for_each(|v| *v = activation.apply(*v));
    let shape = if x.shape().len() == 1 {
        vec![out_dim]
    } else {
        vec![batch, out_dim]
    };
    Tensor::new(shape, out)
}

/// Learned scale/shift plus running statistics for one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
}

impl BatchNormState {
    pub fn new(width: usize) -> Self {
        Self {
            gamma: Tensor::full(&[width], 1.0),
            beta: Tensor::zeros(&[width]),
            running_mean: Tensor::zeros(&[width]),
            running_var: Tensor::full(&[width], 1.0),
        }
    }

    pub fn width(&self) -> usize {
        self.gamma.len()
    }

    /// Folds a batch's statistics into the running estimates.
    pub fn update_running(&mut self, mean: &[f64], var: &[f64]) {
        let m = BATCHNORM_MOMENTUM;
        for (r, b) in self.running_mean.data_mut().iter_mut().zip(mean) {
            *r = m * *r + (1.0 - m) * b;
        }
        for (r, b) in self.running_var.data_mut().iter_mut().zip(var) {
            *r = m * *r + (1.0 - m) * b;
        }
    }
}

/// Per-column mean and biased variance of a `[B × C]` buffer.
pub(crate) fn column_stats(x: &[f64], batch: usize, cols: usize) -> (Vec<f64>, Vec<f64>) {
    let mut mean = vec![0.0; cols];
    for row in x.chunks(cols) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= batch as f64);
    let mut var = vec![0.0; cols];
    for row in x.chunks(cols) {
        for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    var.iter_mut().for_each(|s| *s /= batch as f64);
    (mean, var)
}

pub fn batchnorm_forward(batch: &Tensor, state: &mut BatchNormState, mode: Mode) -> Result<Tensor> {
    let (rows, cols) = batch.matrix_dims();
    if cols != state.width() {
        return Err(dim_err(
            "batchnorm",
            format!("batch has {cols} columns, layer has {}", state.width()),
        ));
    }
    let (mean, var) = match mode {
        Mode::Train => {
            if rows < 2 {
                return Err(NumError::DegenerateBatch(rows));
            }
            let (mean, var) = column_stats(batch.data(), rows, cols);
            state.update_running(&mean, &var);
            (mean, var)
        }
        Mode::Infer => (
            state.running_mean.data().to_vec(),
            state.running_var.data().to_vec(),
        ),
    };
    let mut out = batch.data().to_vec();
    for row in out.chunks_mut(cols) {
        for j in 0..cols {
            let xhat = (row[j] - mean[j]) / (var[j] + BATCHNORM_EPS).sqrt();
            row[j] = state.gamma.data()[j] * xhat + state.beta.data()[j];
        }
    }
    Tensor::new(batch.shape().to_vec(), out)
}

/// Inverted-dropout keep mask: survivors carry `1/(1-rate)`, dropped entries 0.
pub fn dropout_mask<R: Rng + ?Sized>(len: usize, rate: f64, rng: &mut R) -> Vec<f64> {
    if rate <= 0.0 {
        return vec![1.0; len];
    }
    let scale = 1.0 / (1.0 - rate);
    (0..len)
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { scale })
        .collect()
}

pub fn dropout_forward<R: Rng + ?Sized>(x: &Tensor, rate: f64, mode: Mode, rng: &mut R) -> Tensor {
    if mode == Mode::Infer || rate <= 0.0 {
        return x.clone();
    }
    let mask = dropout_mask(x.len(), rate, rng);
    let mut out = x.clone();
    for (v, m) in out.data_mut().iter_mut().zip(mask) {
        *v *= m;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_cell_with_zero_state_stays_zero() {
        let w = LstmWeights::zeros(3, 2);
        let x = Tensor::vector(vec![0.4, -1.0, 2.0]);
        let (h, c) = lstm_cell_forward(&x, &Tensor::zeros(&[2]), &Tensor::zeros(&[2]), &w).unwrap();
        assert_eq!(h.data(), &[0.0, 0.0]);
        assert_eq!(c.data(), &[0.0, 0.0]);
    }

    #[test]
    fn zero_cell_halves_unit_cell_state() {
        let w = LstmWeights::zeros(1, 1);
        let (h, c) = lstm_cell_forward(
            &Tensor::vector(vec![0.7]),
            &Tensor::vector(vec![0.0]),
            &Tensor::vector(vec![1.0]),
            &w,
        )
        .unwrap();
        assert!((c.data()[0] - 0.5).abs() < 1e-15);
        // 0.5 * tanh(0.5)
        assert!((h.data()[0] - 0.231_058_578_630_005).abs() < 1e-12);
    }

    #[test]
    fn lstm_rejects_mismatched_input() {
        let w = LstmWeights::zeros(3, 2);
        let err = lstm_cell_forward(
            &Tensor::vector(vec![1.0, 2.0]),
            &Tensor::zeros(&[2]),
            &Tensor::zeros(&[2]),
            &w,
        );
        assert!(matches!(err, Err(NumError::Dimension { .. })));
    }

    #[test]
    fn dense_examples() {
        let eye = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let x = Tensor::vector(vec![0.3, -2.0]);
        let y = dense_forward(&x, &eye, &Tensor::zeros(&[2]), Activation::Linear).unwrap();
        assert_eq!(y.data(), x.data());

        let w = Tensor::from_rows(&[vec![1.0, 1.0]]).unwrap();
        let y = dense_forward(
            &Tensor::vector(vec![0.3, 0.2]),
            &w,
            &Tensor::vector(vec![-1.0]),
            Activation::Relu,
        )
        .unwrap();
        assert_eq!(y.data(), &[0.0]);

        let w = Tensor::from_rows(&[vec![2.0]]).unwrap();
        let y = dense_forward(&Tensor::vector(vec![0.0]), &w, &Tensor::zeros(&[1]), Activation::Sigmoid).unwrap();
        assert_eq!(y.data(), &[0.5]);

        assert!(dense_forward(&Tensor::vector(vec![1.0; 3]), &w, &Tensor::zeros(&[1]), Activation::Relu).is_err());
    }

    #[test]
    fn batchnorm_train_standardizes_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f64> = (0..40).map(|_| rng.random_range(-5.0..9.0)).collect();
        let x = Tensor::new(vec![10, 4], data).unwrap();
        let mut st = BatchNormState::new(4);
        let y = batchnorm_forward(&x, &mut st, Mode::Train).unwrap();
        let (mean, var) = column_stats(y.data(), 10, 4);
        for j in 0..4 {
            assert!(mean[j].abs() < 1e-6);
            assert!((var[j] - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn batchnorm_constant_column_is_zero() {
        let x = Tensor::from_rows(&[vec![3.0, 1.0], vec![3.0, 2.0], vec![3.0, 5.0]]).unwrap();
        let mut st = BatchNormState::new(2);
        let y = batchnorm_forward(&x, &mut st, Mode::Train).unwrap();
        for r in 0..3 {
            assert_eq!(y.row(r)[0], 0.0);
        }
    }

    #[test]
    fn batchnorm_infer_uses_running_stats() {
        let mut st = BatchNormState::new(1);
        st.running_mean = Tensor::vector(vec![2.0]);
        st.running_var = Tensor::vector(vec![4.0]);
        let y = batchnorm_forward(&Tensor::new(vec![1, 1], vec![4.0]).unwrap(), &mut st, Mode::Infer).unwrap();
        // (4 - 2) / sqrt(4 + 1e-5)
        assert!((y.data()[0] - 0.999_998_750_002_343_7).abs() < 1e-12);
    }

    #[test]
    fn batchnorm_single_row_train_is_degenerate() {
        let mut st = BatchNormState::new(2);
        let x = Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        assert_eq!(
            batchnorm_forward(&x, &mut st, Mode::Train),
            Err(NumError::DegenerateBatch(1))
        );
    }

    #[test]
    fn batchnorm_running_stats_momentum() {
        let mut st = BatchNormState::new(1);
        let x = Tensor::new(vec![2, 1], vec![1.0, 3.0]).unwrap();
        batchnorm_forward(&x, &mut st, Mode::Train).unwrap();
        // mean 2, biased var 1
        assert!((st.running_mean.data()[0] - 0.2).abs() < 1e-15);
        assert!((st.running_var.data()[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn dropout_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::full(&[100], 2.0);
        assert_eq!(dropout_forward(&x, 0.0, Mode::Train, &mut rng), x);
        assert_eq!(dropout_forward(&x, 0.5, Mode::Infer, &mut rng), x);
    }

    #[test]
    fn dropout_survival_rate() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::full(&[100_000], 1.0);
        let y = dropout_forward(&x, 0.5, Mode::Train, &mut rng);
        let alive = y.data().iter().filter(|v| **v != 0.0).count() as f64 / 1e5;
        assert!((alive - 0.5).abs() < 0.01, "surviving fraction {alive}");
        assert!(y.data().iter().all(|v| *v == 0.0 || *v == 2.0));
    }

    #[test]
    fn layer_spec_validation() {
        assert!(LayerSpec::new(LayerKind::Dropout, 4, Activation::Linear, 1.0).is_err());
        assert!(LayerSpec::new(LayerKind::Dense, 0, Activation::Relu, 0.0).is_err());
        assert!(LayerSpec::new(LayerKind::Lstm, 10, Activation::Tanh, 0.2).is_ok());
    }

    #[test]
    fn lstm_init_forget_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w = LstmWeights::init(4, 3, &mut rng);
        assert_eq!(&w.bias.data()[3..6], &[1.0; 3]);
        assert_eq!(&w.bias.data()[0..3], &[0.0; 3]);
        assert!(w.input.data().iter().all(|v| v.abs() <= 0.5));
        assert!(w.recurrent.data().iter().all(|v| v.abs() <= 1.0 / 3f64.sqrt()));
    }
}
