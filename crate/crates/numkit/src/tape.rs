//! Tape-based reverse-mode differentiation.
//!
//! Every primitive appends one node holding its output value and whatever it
//! needs for the adjoint. Nodes are only ever appended after their operands,
//! so walking the node list backwards is a reverse topological order.
//!
//! A tape is single-use: build it during one forward pass, call
//! [`Tape::backward`] once, then drop it.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{dim_err, NumError, Result};
use crate::layers::{column_stats, lstm_step, Activation, BATCHNORM_EPS};
use crate::tensor::{gemm, Tensor};

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// Handle to a node on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    index: usize,
}

enum Op {
    Constant,
    Param,
    Linear {
        x: usize,
        w: usize,
        b: usize,
    },
    Act {
        x: usize,
        act: Activation,
    },
    Add {
        a: usize,
        b: usize,
    },
    Scale {
        x: usize,
        k: f64,
    },
    Sum {
        x: usize,
    },
    Concat {
        a: usize,
        b: usize,
    },
    SliceCols {
        x: usize,
        start: usize,
        end: usize,
    },
    Lstm {
        x: usize,
        state: Option<usize>,
        w_in: usize,
        w_rec: usize,
        bias: usize,
        mask: Option<Vec<f64>>,
        gates: Vec<f64>,
        tanh_c: Vec<f64>,
        h_prev: Vec<f64>,
        c_prev: Vec<f64>,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    Dropout {
        x: usize,
        mask: Vec<f64>,
    },
    MaskedMse {
        pred: usize,
        target: Vec<f64>,
        weights: Vec<f64>,
        denom: f64,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Per-column batch statistics produced by a train-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    params: Vec<(String, usize)>,
    consumed: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            params: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(NumError::Graph(format!(
                "variable {} belongs to tape {}, not tape {}",
                v.index, v.tape, self.id
            )));
        }
        Ok(v.index)
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Result<Var> {
        if self.consumed {
            return Err(NumError::Graph("tape already consumed by backward()".into()));
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        })
    }

    fn needs(&self, i: usize) -> bool {
        self.nodes[i].needs_grad
    }

    pub fn value(&self, v: Var) -> Result<&Tensor> {
        Ok(&self.nodes[self.idx(v)?].value)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Constant, false)
    }

    /// A named trainable leaf; its gradient is reported by [`Gradients::params`].
    pub fn param(&mut self, name: &str, value: &Tensor) -> Result<Var> {
        let v = self.push(value.clone(), Op::Param, true)?;
        self.params.push((name.to_string(), v.index));
        Ok(v)
    }

    /// `x·wᵀ + b` with `x: [B × in]`, `w: [out × in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xi, wi, bi) = (self.idx(x)?, self.idx(w)?, self.idx(b)?);
        let (batch, in_dim) = self.nodes[xi].value.matrix_dims();
        let wv = &self.nodes[wi].value;
        let bv = &self.nodes[bi].value;
        if wv.shape().len() != 2 || wv.shape()[1] != in_dim || bv.len() != wv.shape()[0] {
            return Err(dim_err(
                "linear",
                format!("x {batch}x{in_dim}, w {:?}, b {:?}", wv.shape(), bv.shape()),
            ));
        }
        let out_dim = wv.shape()[0];
        let mut out = vec![0.0; batch * out_dim];
        for row in out.chunks_mut(out_dim) {
            row.copy_from_slice(bv.data());
        }
        gemm(
            batch,
            in_dim,
            out_dim,
            self.nodes[xi].value.data(),
            false,
            wv.data(),
            true,
            &mut out,
            1.0,
        );
        let needs = self.needs(xi) || self.needs(wi) || self.needs(bi);
        self.push(
            Tensor::new(vec![batch, out_dim], out)?,
            Op::Linear {
                x: xi,
                w: wi,
                b: bi,
            },
            needs,
        )
    }

    pub fn activation(&mut self, x: Var, act: Activation) -> Result<Var> {
        let xi = self.idx(x)?;
        let value = self.nodes[xi].value.map(|v| act.apply(v));
        let needs = self.needs(xi);
        self.push(value, Op::Act { x: xi, act }, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let mut value = self.nodes[ai].value.clone();
        if !value.same_shape(&self.nodes[bi].value) {
            return Err(dim_err(
                "add",
                format!("{:?} + {:?}", value.shape(), self.nodes[bi].value.shape()),
            ));
        }
        value.add_assign(&self.nodes[bi].value)?;
        let needs = self.needs(ai) || self.needs(bi);
        self.push(value, Op::Add { a: ai, b: bi }, needs)
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Result<Var> {
        let xi = self.idx(x)?;
        let value = self.nodes[xi].value.map(|v| v * k);
        let needs = self.needs(xi);
        self.push(value, Op::Scale { x: xi, k }, needs)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let total = self.nodes[xi].value.sum();
        let needs = self.needs(xi);
        self.push(Tensor::scalar(total), Op::Sum { x: xi }, needs)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x)?.len();
        if n == 0 {
            return Err(dim_err("mean", "empty tensor"));
        }
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Column-wise concatenation of two `[B × _]` matrices.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let (ra, ca) = self.nodes[ai].value.matrix_dims();
        let (rb, cb) = self.nodes[bi].value.matrix_dims();
        if ra != rb {
            return Err(dim_err("concat", format!("{ra} rows vs {rb} rows")));
        }
        let mut out = Vec::with_capacity(ra * (ca + cb));
        for r in 0..ra {
            out.extend_from_slice(&self.nodes[ai].value.data()[r * ca..(r + 1) * ca]);
            out.extend_from_slice(&self.nodes[bi].value.data()[r * cb..(r + 1) * cb]);
        }
        let needs = self.needs(ai) || self.needs(bi);
        self.push(
            Tensor::new(vec![ra, ca + cb], out)?,
            Op::Concat { a: ai, b: bi },
            needs,
        )
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xi = self.idx(x)?;
        let (rows, cols) = self.nodes[xi].value.matrix_dims();
        if start >= end || end > cols {
            return Err(dim_err("slice_cols", format!("{start}..{end} of {cols}")));
        }
        let w = end - start;
        let mut out = Vec::with_capacity(rows * w);
        for r in 0..rows {
            out.extend_from_slice(&self.nodes[xi].value.data()[r * cols + start..r * cols + end]);
        }
        let needs = self.needs(xi);
        self.push(
            Tensor::new(vec![rows, w], out)?,
            Op::SliceCols { x: xi, start, end },
            needs,
        )
    }

    /// One batched LSTM step. The result is the packed state `[B × 2H]`
    /// (hidden state in the first `H` columns, cell state in the last `H`);
    /// feed it back as `state` for the next step and use
    /// [`slice_cols`](Self::slice_cols) to read the hidden state.
    /// `state = None` starts from zeros. Rows whose `step_mask` entry is 0
    /// carry their previous state through unchanged.
    pub fn lstm_cell(
        &mut self,
        x: Var,
        state: Option<Var>,
        w_in: Var,
        w_rec: Var,
        bias: Var,
        step_mask: Option<&[f64]>,
    ) -> Result<Var> {
        let (xi, wi, ri, bi) = (self.idx(x)?, self.idx(w_in)?, self.idx(w_rec)?, self.idx(bias)?);
        let si = state.map(|s| self.idx(s)).transpose()?;
        let hidden = self.nodes[ri].value.shape().get(1).copied().unwrap_or(0);
        let (batch, input_dim) = self.nodes[xi].value.matrix_dims();
        let shapes_ok = hidden > 0
            && self.nodes[ri].value.shape() == [4 * hidden, hidden]
            && self.nodes[wi].value.shape() == [4 * hidden, input_dim]
            && self.nodes[bi].value.shape() == [4 * hidden];
        if !shapes_ok {
            return Err(dim_err(
                "lstm_cell",
                format!(
                    "x {batch}x{input_dim}, w_in {:?}, w_rec {:?}, bias {:?}",
                    self.nodes[wi].value.shape(),
                    self.nodes[ri].value.shape(),
                    self.nodes[bi].value.shape()
                ),
            ));
        }
        if let Some(m) = step_mask {
            if m.len() != batch {
                return Err(dim_err("lstm_cell", format!("mask {} for batch {batch}", m.len())));
            }
        }
        let (h_prev, c_prev) = match si {
            Some(s) => {
                let sv = &self.nodes[s].value;
                if sv.matrix_dims() != (batch, 2 * hidden) {
                    return Err(dim_err(
                        "lstm_cell",
                        format!("state {:?}, expected {batch}x{}", sv.shape(), 2 * hidden),
                    ));
                }
                let mut h = Vec::with_capacity(batch * hidden);
                let mut c = Vec::with_capacity(batch * hidden);
                for row in sv.data().chunks(2 * hidden) {
                    h.extend_from_slice(&row[..hidden]);
                    c.extend_from_slice(&row[hidden..]);
                }
                (h, c)
            }
            None => (vec![0.0; batch * hidden], vec![0.0; batch * hidden]),
        };
        let step = lstm_step(
            self.nodes[xi].value.data(),
            batch,
            input_dim,
            &h_prev,
            &c_prev,
            self.nodes[wi].value.data(),
            self.nodes[ri].value.data(),
            self.nodes[bi].value.data(),
            hidden,
            step_mask,
        );
        let mut packed = Vec::with_capacity(batch * 2 * hidden);
        for r in 0..batch {
            packed.extend_from_slice(&step.h[r * hidden..(r + 1) * hidden]);
            packed.extend_from_slice(&step.c[r * hidden..(r + 1) * hidden]);
        }
        let needs = self.needs(xi)
            || self.needs(wi)
            || self.needs(ri)
            || self.needs(bi)
            || si.is_some_and(|s| self.needs(s));
        self.push(
            Tensor::new(vec![batch, 2 * hidden], packed)?,
            Op::Lstm {
                x: xi,
                state: si,
                w_in: wi,
                w_rec: ri,
                bias: bi,
                mask: step_mask.map(<[f64]>::to_vec),
                gates: step.gates,
                tanh_c: step.tanh_c,
                h_prev,
                c_prev,
            },
            needs,
        )
    }

    /// Train-mode batch norm over rows of `x: [B × C]`. Returns the batch
    /// statistics so the caller can update running estimates.
    pub fn batchnorm_train(&mut self, x: Var, gamma: Var, beta: Var) -> Result<(Var, BatchStats)> {
        let (xi, gi, bi) = (self.idx(x)?, self.idx(gamma)?, self.idx(beta)?);
        let (rows, cols) = self.nodes[xi].value.matrix_dims();
        if rows < 2 {
            return Err(NumError::DegenerateBatch(rows));
        }
        self.check_affine(gi, bi, cols)?;
        let (mean, var) = column_stats(self.nodes[xi].value.data(), rows, cols);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BATCHNORM_EPS).sqrt()).collect();
        let (xhat, out) = self.normalize(xi, gi, bi, &mean, &inv_std);
        let needs = self.needs(xi) || self.needs(gi) || self.needs(bi);
        let v = self.push(
            Tensor::new(vec![rows, cols], out)?,
            Op::BatchNorm {
                x: xi,
                gamma: gi,
                beta: bi,
                xhat,
                inv_std,
                train: true,
            },
            needs,
        )?;
        Ok((v, BatchStats { mean, var }))
    }

    /// Infer-mode batch norm with fixed running statistics.
    pub fn batchnorm_infer(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
    ) -> Result<Var> {
        let (xi, gi, bi) = (self.idx(x)?, self.idx(gamma)?, self.idx(beta)?);
        let (rows, cols) = self.nodes[xi].value.matrix_dims();
        self.check_affine(gi, bi, cols)?;
        if running_mean.len() != cols || running_var.len() != cols {
            return Err(dim_err("batchnorm", "running statistics width"));
        }
        let inv_std: Vec<f64> = running_var
            .iter()
            .map(|v| 1.0 / (v + BATCHNORM_EPS).sqrt())
            .collect();
        let (xhat, out) = self.normalize(xi, gi, bi, running_mean, &inv_std);
        let needs = self.needs(xi) || self.needs(gi) || self.needs(bi);
        self.push(
            Tensor::new(vec![rows, cols], out)?,
            Op::BatchNorm {
                x: xi,
                gamma: gi,
                beta: bi,
                xhat,
                inv_std,
                train: false,
            },
            needs,
        )
    }

    fn check_affine(&self, gi: usize, bi: usize, cols: usize) -> Result<()> {
        if self.nodes[gi].value.len() != cols || self.nodes[bi].value.len() != cols {
            return Err(dim_err(
                "batchnorm",
                format!(
                    "{cols} columns, gamma {:?}, beta {:?}",
                    self.nodes[gi].value.shape(),
                    self.nodes[bi].value.shape()
                ),
            ));
        }
        Ok(())
    }

    fn normalize(&self, xi: usize, gi: usize, bi: usize, mean: &[f64], inv_std: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let cols = mean.len();
        let x = self.nodes[xi].value.data();
        let gamma = self.nodes[gi].value.data();
        let beta = self.nodes[bi].value.data();
        let mut xhat = Vec::with_capacity(x.len());
        let mut out = Vec::with_capacity(x.len());
        for row in x.chunks(cols) {
            for j in 0..cols {
                let h = (row[j] - mean[j]) * inv_std[j];
                xhat.push(h);
                out.push(gamma[j] * h + beta[j]);
            }
        }
        (xhat, out)
    }

    /// Elementwise multiply by a precomputed (already rescaled) keep mask.
    pub fn dropout(&mut self, x: Var, mask: Vec<f64>) -> Result<Var> {
        let xi = self.idx(x)?;
        if mask.len() != self.nodes[xi].value.len() {
            return Err(dim_err("dropout", "mask length"));
        }
        let mut value = self.nodes[xi].value.clone();
        for (v, m) in value.data_mut().iter_mut().zip(&mask) {
            *v *= m;
        }
        let needs = self.needs(xi);
        self.push(value, Op::Dropout { x: xi, mask }, needs)
    }

    /// Mean squared error over entries whose `mask` weight is non-zero:
    /// `Σ w·(p − t)² / Σ w`.
    pub fn masked_mse(&mut self, pred: Var, target: &Tensor, mask: &[f64]) -> Result<Var> {
        let pi = self.idx(pred)?;
        let p = &self.nodes[pi].value;
        if p.len() != target.len() || p.len() != mask.len() {
            return Err(dim_err(
                "masked_mse",
                format!(
                    "pred {:?}, target {:?}, mask {}",
                    p.shape(),
                    target.shape(),
                    mask.len()
                ),
            ));
        }
        let denom: f64 = mask.iter().sum();
        if denom <= 0.0 {
            return Err(NumError::EmptyTarget);
        }
        let loss = p
            .data()
            .iter()
            .zip(target.data())
            .zip(mask)
            .map(|((a, b), w)| w * (a - b) * (a - b))
            .sum::<f64>()
            / denom;
        let needs = self.needs(pi);
        self.push(
            Tensor::scalar(loss),
            Op::MaskedMse {
                pred: pi,
                target: target.data().to_vec(),
                weights: mask.to_vec(),
                denom,
            },
            needs,
        )
    }

    /// Reverse sweep from a scalar `loss`. A tape can be differentiated once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        let li = self.idx(loss)?;
        if self.consumed {
            return Err(NumError::Graph(
                "backward() already ran on this tape; record a new forward pass".into(),
            ));
        }
        if self.nodes[li].value.len() != 1 {
            return Err(dim_err(
                "backward",
                format!("loss must be scalar, got {:?}", self.nodes[li].value.shape()),
            ));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[li] = Some(vec![1.0]);
        for i in (0..=li).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        let mut params = BTreeMap::new();
        for (name, i) in &self.params {
            let shape = self.nodes[*i].value.shape().to_vec();
            let data = grads[*i]
                .clone()
                .unwrap_or_else(|| vec![0.0; self.nodes[*i].value.len()]);
            let g = Tensor::new(shape, data)?;
            match params.get_mut(name) {
                None => {
                    params.insert(name.clone(), g);
                }
                // A parameter registered twice accumulates both uses.
                Some(acc) => {
                    let acc: &mut Tensor = acc;
                    acc.add_assign(&g)?;
                }
            }
        }
        let tensors = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| g.map(|d| Tensor::new(n.value.shape().to_vec(), d).expect("grad shape")))
            .collect();
        Ok(Gradients {
            tape: self.id,
            nodes: tensors,
            params,
        })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        if !node.needs_grad {
            return;
        }
        match &node.op {
            Op::Constant | Op::Param => {}
            Op::Linear { x, w, b } => {
                let xv = &self.nodes[*x].value;
                let wv = &self.nodes[*w].value;
                let (batch, in_dim) = xv.matrix_dims();
                let out_dim = wv.shape()[0];
                if self.needs(*x) {
                    let gx = slot(grads, *x, batch * in_dim);
                    gemm(batch, out_dim, in_dim, g, false, wv.data(), false, gx, 1.0);
                }
                if self.needs(*w) {
                    let gw = slot(grads, *w, out_dim * in_dim);
                    gemm(out_dim, batch, in_dim, g, true, xv.data(), false, gw, 1.0);
                }
                if self.needs(*b) {
                    let gb = slot(grads, *b, out_dim);
                    for row in g.chunks(out_dim) {
                        for (a, v) in gb.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                }
            }
            Op::Act { x, act } => {
                if self.needs(*x) {
                    let y = node.value.data();
                    let gx = slot(grads, *x, y.len());
                    for ((a, gy), yv) in gx.iter_mut().zip(g).zip(y) {
                        *a += gy * act.grad_from_output(*yv);
                    }
                }
            }
            Op::Add { a, b } => {
                for t in [*a, *b] {
                    if self.needs(t) {
                        let gt = slot(grads, t, g.len());
                        for (s, v) in gt.iter_mut().zip(g) {
                            *s += v;
                        }
                    }
                }
            }
            Op::Scale { x, k } => {
                if self.needs(*x) {
                    let gx = slot(grads, *x, g.len());
                    for (s, v) in gx.iter_mut().zip(g) {
                        *s += k * v;
                    }
                }
            }
            Op::Sum { x } => {
                if self.needs(*x) {
                    let n = self.nodes[*x].value.len();
                    let gx = slot(grads, *x, n);
                    gx.iter_mut().for_each(|s| *s += g[0]);
                }
            }
            Op::Concat { a, b } => {
                let (rows, ca) = self.nodes[*a].value.matrix_dims();
                let cb = self.nodes[*b].value.matrix_dims().1;
                let w = ca + cb;
                if self.needs(*a) {
                    let ga = slot(grads, *a, rows * ca);
                    for r in 0..rows {
                        for j in 0..ca {
                            ga[r * ca + j] += g[r * w + j];
                        }
                    }
                }
                if self.needs(*b) {
                    let gb = slot(grads, *b, rows * cb);
                    for r in 0..rows {
                        for j in 0..cb {
                            gb[r * cb + j] += g[r * w + ca + j];
                        }
                    }
                }
            }
            Op::SliceCols { x, start, end } => {
                if self.needs(*x) {
                    let (rows, cols) = self.nodes[*x].value.matrix_dims();
                    let w = end - start;
                    let gx = slot(grads, *x, rows * cols);
                    for r in 0..rows {
                        for j in 0..w {
                            gx[r * cols + start + j] += g[r * w + j];
                        }
                    }
                }
            }
            Op::Lstm {
                x,
                state,
                w_in,
                w_rec,
                bias,
                mask,
                gates,
                tanh_c,
                h_prev,
                c_prev,
            } => {
                let (batch, input_dim) = self.nodes[*x].value.matrix_dims();
                let hidden = self.nodes[*w_rec].value.shape()[1];
                let g4 = 4 * hidden;
                let mut d_pre = vec![0.0; batch * g4];
                let mut d_state = vec![0.0; batch * 2 * hidden];
                for r in 0..batch {
                    let m = mask.as_ref().map_or(1.0, |m| m[r]);
                    let gr = &gates[r * g4..(r + 1) * g4];
                    for j in 0..hidden {
                        let k = r * hidden + j;
                        let dh_out = g[r * 2 * hidden + j];
                        let dc_out = g[r * 2 * hidden + hidden + j];
                        let (ig, fg, cg, og) = (gr[j], gr[hidden + j], gr[2 * hidden + j], gr[3 * hidden + j]);
                        let tc = tanh_c[k];
                        let dh = m * dh_out;
                        let dc = m * dc_out + dh * og * (1.0 - tc * tc);
                        let d_o = dh * tc;
                        let d_i = dc * cg;
                        let d_g = dc * ig;
                        let d_f = dc * c_prev[k];
                        let dp = &mut d_pre[r * g4..(r + 1) * g4];
                        dp[j] = d_i * ig * (1.0 - ig);
                        dp[hidden + j] = d_f * fg * (1.0 - fg);
                        dp[2 * hidden + j] = d_g * (1.0 - cg * cg);
                        dp[3 * hidden + j] = d_o * og * (1.0 - og);
                        d_state[r * 2 * hidden + j] = (1.0 - m) * dh_out;
                        d_state[r * 2 * hidden + hidden + j] = dc * fg + (1.0 - m) * dc_out;
                    }
                }
                let w_in_v = self.nodes[*w_in].value.data();
                let w_rec_v = self.nodes[*w_rec].value.data();
                if self.needs(*x) {
                    let gx = slot(grads, *x, batch * input_dim);
                    gemm(batch, g4, input_dim, &d_pre, false, w_in_v, false, gx, 1.0);
                }
                if self.needs(*w_in) {
                    let gw = slot(grads, *w_in, g4 * input_dim);
                    gemm(g4, batch, input_dim, &d_pre, true, self.nodes[*x].value.data(), false, gw, 1.0);
                }
                if self.needs(*w_rec) {
                    let gw = slot(grads, *w_rec, g4 * hidden);
                    gemm(g4, batch, hidden, &d_pre, true, h_prev, false, gw, 1.0);
                }
                if self.needs(*bias) {
                    let gb = slot(grads, *bias, g4);
                    for row in d_pre.chunks(g4) {
                        for (a, v) in gb.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                }
                if let Some(s) = state {
                    if self.needs(*s) {
                        let mut dh_prev = vec![0.0; batch * hidden];
                        gemm(batch, g4, hidden, &d_pre, false, w_rec_v, false, &mut dh_prev, 0.0);
                        let gs = slot(grads, *s, batch * 2 * hidden);
                        for r in 0..batch {
                            for j in 0..hidden {
                                let base = r * 2 * hidden;
                                gs[base + j] += d_state[base + j] + dh_prev[r * hidden + j];
                                gs[base + hidden + j] += d_state[base + hidden + j];
                            }
                        }
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let (rows, cols) = self.nodes[*x].value.matrix_dims();
                let gv = self.nodes[*gamma].value.data();
                if self.needs(*gamma) {
                    let gg = slot(grads, *gamma, cols);
                    for (gr, hr) in g.chunks(cols).zip(xhat.chunks(cols)) {
                        for j in 0..cols {
                            gg[j] += gr[j] * hr[j];
                        }
                    }
                }
                if self.needs(*beta) {
                    let gb = slot(grads, *beta, cols);
                    for gr in g.chunks(cols) {
                        for j in 0..cols {
                            gb[j] += gr[j];
                        }
                    }
                }
                if self.needs(*x) {
                    let gx = slot(grads, *x, rows * cols);
                    if *train {
                        let n = rows as f64;
                        let mut sum_d = vec![0.0; cols];
                        let mut sum_dh = vec![0.0; cols];
                        for (gr, hr) in g.chunks(cols).zip(xhat.chunks(cols)) {
                            for j in 0..cols {
                                let d = gr[j] * gv[j];
                                sum_d[j] += d;
                                sum_dh[j] += d * hr[j];
                            }
                        }
                        for r in 0..rows {
                            for j in 0..cols {
                                let k = r * cols + j;
                                let d = g[k] * gv[j];
                                gx[k] += inv_std[j] / n * (n * d - sum_d[j] - xhat[k] * sum_dh[j]);
                            }
                        }
                    } else {
                        for r in 0..rows {
                            for j in 0..cols {
                                let k = r * cols + j;
                                gx[k] += g[k] * gv[j] * inv_std[j];
                            }
                        }
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if self.needs(*x) {
                    let gx = slot(grads, *x, mask.len());
                    for ((a, v), m) in gx.iter_mut().zip(g).zip(mask) {
                        *a += v * m;
                    }
                }
            }
            Op::MaskedMse {
                pred,
                target,
                weights,
                denom,
            } => {
                if self.needs(*pred) {
                    let p = self.nodes[*pred].value.data();
                    let gp = slot(grads, *pred, p.len());
                    let k = 2.0 * g[0] / denom;
                    for (((a, pv), t), w) in gp.iter_mut().zip(p).zip(target).zip(weights) {
                        *a += k * w * (pv - t);
                    }
                }
            }
        }
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], i: usize, len: usize) -> &mut [f64] {
    grads[i].get_or_insert_with(|| vec![0.0; len])
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    tape: u64,
    nodes: Vec<Option<Tensor>>,
    params: BTreeMap<String, Tensor>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`; `None` when no path reaches the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.nodes.get(v.index).and_then(Option::as_ref)
    }

    /// Gradients of every registered parameter, zero-filled when unreachable.
    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn into_params(self) -> BTreeMap<String, Tensor> {
        self.params
    }
}
