//! Vanilla single-layer RNN: `h_τ = σ(U h_{τ-1} + W x_τ)`, `y_τ = V h_τ`, `h_0 = 0`.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::linalg::{self, Matrix};
use crate::losses::LossSpec;

/// Sequences per work item when gradients are accumulated in parallel.
/// Chunks are reduced in index order, so results do not depend on thread count.
const CHUNK: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    pub fn lipschitz(self) -> f64 {
        1.0
    }

    /// Entry-wise bound on the activation output, if there is one.
    pub fn entry_bound(self) -> Option<f64> {
        match self {
            Activation::Relu => None,
            Activation::Tanh => Some(1.0),
        }
    }

    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the output `h = σ(x)`; relu uses 0 at the kink.
    fn derivative_at_output(self, h: f64) -> f64 {
        match self {
            Activation::Relu => {
                if h > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - h * h,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            other => invalid(format!("unknown activation {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RnnParams {
    pub u: Matrix,
    pub w: Matrix,
    pub v: Matrix,
    pub activation: Activation,
}

impl RnnParams {
    pub fn new(u: Matrix, w: Matrix, v: Matrix, activation: Activation) -> Result<Self> {
        let d_h = u.rows();
        if u.cols() != d_h {
            return Err(Error::Shape(format!("U must be square, got {:?}", u.shape())));
        }
        if w.rows() != d_h {
            return Err(Error::Shape(format!("W has {} rows, expected {d_h}", w.rows())));
        }
        if v.cols() != d_h {
            return Err(Error::Shape(format!("V has {} columns, expected {d_h}", v.cols())));
        }
        if !(u.is_finite() && w.is_finite() && v.is_finite()) {
            return Err(Error::NonFinite("RNN weights".into()));
        }
        Ok(Self { u, w, v, activation })
    }

    pub fn zeros(d_x: usize, d_h: usize, d_y: usize, activation: Activation) -> Self {
        Self {
            u: Matrix::zeros(d_h, d_h),
            w: Matrix::zeros(d_h, d_x),
            v: Matrix::zeros(d_y, d_h),
            activation,
        }
    }

    pub fn d_x(&self) -> usize {
        self.w.cols()
    }

    pub fn d_h(&self) -> usize {
        self.u.rows()
    }

    pub fn d_y(&self) -> usize {
        self.v.rows()
    }

    pub fn num_params(&self) -> usize {
        self.u.data().len() + self.w.data().len() + self.v.data().len()
    }

    /// Parameters flattened in the order U, W, V.
    pub fn flatten(&self) -> Vec<f64> {
        [self.u.data(), self.w.data(), self.v.data()].concat()
    }

    pub(crate) fn param_mut(&mut self, idx: usize) -> &mut f64 {
        let nu = self.u.data().len();
        let nw = self.w.data().len();
        if idx < nu {
            &mut self.u.data_mut()[idx]
        } else if idx < nu + nw {
            &mut self.w.data_mut()[idx - nu]
        } else {
            &mut self.v.data_mut()[idx - nu - nw]
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Labels {
    /// One label per sequence, scored on the last output.
    Terminal(Vec<usize>),
    /// One label per time step.
    PerStep(Vec<Vec<usize>>),
}

/// `n` input sequences of equal length `t` with their labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceBatch {
    inputs: Vec<Vec<Vec<f64>>>,
    labels: Labels,
    b_x: f64,
}

impl SequenceBatch {
    /// Checks shapes and that every input vector has norm at most `b_x`.
    pub fn new(inputs: Vec<Vec<Vec<f64>>>, labels: Labels, b_x: f64) -> Result<Self> {
        if inputs.is_empty() {
            return invalid("empty batch");
        }
        let t = inputs[0].len();
        if t == 0 {
            return invalid("sequences must have at least one step");
        }
        let d_x = inputs[0][0].len();
        if d_x == 0 {
            return invalid("input dimension must be positive");
        }
        for (i, seq) in inputs.iter().enumerate() {
            if seq.len() != t {
                return Err(Error::Shape(format!(
                    "sequence {i} has length {}, expected {t}",
                    seq.len()
                )));
            }
            for (tau, x) in seq.iter().enumerate() {
                if x.len() != d_x {
                    return Err(Error::Shape(format!("input ({i}, {tau}) has dimension {}", x.len())));
                }
                if x.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!("input ({i}, {tau})")));
                }
                let nrm = linalg::norm2(x);
                if nrm > b_x * (1.0 + 1e-12) + 1e-15 {
                    return invalid(format!("input ({i}, {tau}) has norm {nrm} > B_x = {b_x}"));
                }
            }
        }
        match &labels {
            Labels::Terminal(z) if z.len() != inputs.len() => {
                return Err(Error::Shape(format!(
                    "{} labels for {} sequences",
                    z.len(),
                    inputs.len()
                )))
            }
            Labels::PerStep(z) if z.len() != inputs.len() || z.iter().any(|s| s.len() != t) => {
                return Err(Error::Shape("per-step labels do not match the inputs".into()))
            }
            _ => {}
        }
        Ok(Self { inputs, labels, b_x })
    }

    /// Like [`SequenceBatch::new`] with `B_x` set to the largest input norm.
    pub fn with_measured_bound(inputs: Vec<Vec<Vec<f64>>>, labels: Labels) -> Result<Self> {
        let b_x = inputs.iter().flatten().map(|x| linalg::norm2(x)).fold(0.0, f64::max);
        Self::new(inputs, labels, b_x)
    }

    pub fn n(&self) -> usize {
        self.inputs.len()
    }

    pub fn t(&self) -> usize {
        self.inputs[0].len()
    }

    pub fn d_x(&self) -> usize {
        self.inputs[0][0].len()
    }

    pub fn b_x(&self) -> f64 {
        self.b_x
    }

    pub fn inputs(&self) -> &[Vec<Vec<f64>>] {
        &self.inputs
    }

    pub fn sequence(&self, i: usize) -> &[Vec<f64>] {
        &self.inputs[i]
    }

    pub fn labels(&self) -> &Labels {
        &self.labels
    }

    /// Label scored at step `tau` (0-based) of sequence `i`.
    pub fn label_at(&self, i: usize, tau: usize) -> Option<usize> {
        match &self.labels {
            Labels::Terminal(z) => (tau + 1 == self.t()).then(|| z[i]),
            Labels::PerStep(z) => Some(z[i][tau]),
        }
    }

    /// Labels used for the terminal output.
    pub fn terminal_labels(&self) -> Vec<usize> {
        match &self.labels {
            Labels::Terminal(z) => z.clone(),
            Labels::PerStep(z) => z.iter().map(|s| *s.last().unwrap()).collect(),
        }
    }

    /// Largest label plus one.
    pub fn num_classes(&self) -> usize {
        match &self.labels {
            Labels::Terminal(z) => z.iter().copied().max().unwrap_or(0) + 1,
            Labels::PerStep(z) => z.iter().flatten().copied().max().unwrap_or(0) + 1,
        }
    }

    /// Largest per-step input norm actually present.
    pub fn max_step_norm(&self) -> f64 {
        self.inputs
            .iter()
            .flatten()
            .map(|x| linalg::norm2(x))
            .fold(0.0, f64::max)
    }

    pub fn subset(&self, idx: &[usize]) -> SequenceBatch {
        let inputs = idx.iter().map(|&i| self.inputs[i].clone()).collect();
        let labels = match &self.labels {
            Labels::Terminal(z) => Labels::Terminal(idx.iter().map(|&i| z[i]).collect()),
            Labels::PerStep(z) => Labels::PerStep(idx.iter().map(|&i| z[i].clone()).collect()),
        };
        SequenceBatch {
            inputs,
            labels,
            b_x: self.b_x,
        }
    }

    fn steps_scored(&self) -> usize {
        match self.labels {
            Labels::Terminal(_) => 1,
            Labels::PerStep(_) => self.t(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub hidden: Vec<Vec<f64>>,
    pub outputs: Vec<Vec<f64>>,
}

impl Trace {
    pub fn last_output(&self) -> &[f64] {
        self.outputs.last().expect("trace has at least one step")
    }

    pub fn last_hidden(&self) -> &[f64] {
        self.hidden.last().expect("trace has at least one step")
    }
}

pub fn forward(p: &RnnParams, seq: &[Vec<f64>]) -> Result<Trace> {
    let d_h = p.d_h();
    let mut hidden = Vec::with_capacity(seq.len());
    let mut outputs = Vec::with_capacity(seq.len());
    let mut h = vec![0.0; d_h];
    for (tau, x) in seq.iter().enumerate() {
        if x.len() != p.d_x() {
            return Err(Error::Shape(format!(
                "step {tau} input has dimension {}, expected {}",
                x.len(),
                p.d_x()
            )));
        }
        let mut pre = vec![0.0; d_h];
        p.u.matvec_into(&h, &mut pre);
        for (i, a) in pre.iter_mut().enumerate() {
            *a += linalg::dot(p.w.row(i), x);
        }
        h = pre.into_iter().map(|a| p.activation.apply(a)).collect();
        let y = p.v.matvec_unchecked(&h);
        if h.iter().chain(&y).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("activation exploded at step {}", tau + 1)));
        }
        hidden.push(h.clone());
        outputs.push(y);
    }
    Ok(Trace { hidden, outputs })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub du: Matrix,
    pub dw: Matrix,
    pub dv: Matrix,
}

impl Gradients {
    pub fn zeros_like(p: &RnnParams) -> Self {
        Self {
            du: Matrix::zeros(p.d_h(), p.d_h()),
            dw: Matrix::zeros(p.d_h(), p.d_x()),
            dv: Matrix::zeros(p.d_y(), p.d_h()),
        }
    }

    /// Frobenius norm of all three gradients stacked together.
    pub fn global_norm(&self) -> f64 {
        let s: f64 = [&self.du, &self.dw, &self.dv]
            .iter()
            .map(|m| linalg::frobenius_norm(m).powi(2))
            .sum();
        s.sqrt()
    }

    pub fn flatten(&self) -> Vec<f64> {
        [self.du.data(), self.dw.data(), self.dv.data()].concat()
    }

    fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in [
            (&mut self.du, &other.du),
            (&mut self.dw, &other.dw),
            (&mut self.dv, &other.dv),
        ] {
            a.data_mut().iter_mut().zip(b.data()).for_each(|(x, y)| *x += y);
        }
    }
}

/// Loss of one sequence (averaged over scored steps) and its per-sequence
/// contribution to the gradient, scaled by `weight`.
fn sequence_backward(
    p: &RnnParams,
    batch: &SequenceBatch,
    loss: &LossSpec,
    i: usize,
    weight: f64,
    acc: &mut Gradients,
) -> Result<f64> {
    let seq = batch.sequence(i);
    let trace = forward(p, seq)?;
    let t = seq.len();
    let step_weight = 1.0 / batch.steps_scored() as f64;
    let d_h = p.d_h();
    let mut value = 0.0;
    let mut carry = vec![0.0; d_h];
    for tau in (0..t).rev() {
        let h = &trace.hidden[tau];
        let mut dh = std::mem::take(&mut carry);
        if let Some(z) = batch.label_at(i, tau) {
            let l = loss.eval(&trace.outputs[tau], z)?;
            value += step_weight * l.value;
            let dy: Vec<f64> = l.grad.iter().map(|g| g * weight * step_weight).collect();
            acc.dv.rank1_acc(1.0, &dy, h);
            p.v.tmatvec_acc(&dy, &mut dh);
        }
        let da: Vec<f64> = dh
            .iter()
            .zip(h)
            .map(|(g, &hv)| g * p.activation.derivative_at_output(hv))
            .collect();
        if tau > 0 {
            acc.du.rank1_acc(1.0, &da, &trace.hidden[tau - 1]);
        }
        acc.dw.rank1_acc(1.0, &da, &seq[tau]);
        carry = vec![0.0; d_h];
        p.u.tmatvec_acc(&da, &mut carry);
    }
    let finite = [&acc.du, &acc.dw, &acc.dv].iter().all(|m| m.is_finite());
    if !finite || !value.is_finite() {
        return Err(Error::NonFinite(format!("gradient of sequence {i}")));
    }
    Ok(value)
}

/// `Σ_i weights[i]·ℓ_i` and its gradient, where `ℓ_i` is the loss of sequence `i`.
pub fn weighted_loss_and_gradient(
    p: &RnnParams,
    batch: &SequenceBatch,
    loss: &LossSpec,
    weights: &[f64],
) -> Result<(f64, Gradients)> {
    if weights.len() != batch.n() {
        return Err(Error::Shape(format!(
            "{} weights for {} sequences",
            weights.len(),
            batch.n()
        )));
    }
    if batch.d_x() != p.d_x() {
        return Err(Error::Shape(format!(
            "batch d_x {} vs model d_x {}",
            batch.d_x(),
            p.d_x()
        )));
    }
    let chunks: Vec<Result<(f64, Gradients)>> = (0..batch.n())
        .collect::<Vec<_>>()
        .par_chunks(CHUNK)
        .map(|idx| {
            let mut g = Gradients::zeros_like(p);
            let mut v = 0.0;
            for &i in idx {
                v += weights[i] * sequence_backward(p, batch, loss, i, weights[i], &mut g)?;
            }
            Ok((v, g))
        })
        .collect();
    let mut total = 0.0;
    let mut grads = Gradients::zeros_like(p);
    for c in chunks {
        let (v, g) = c?;
        total += v;
        grads.add_assign(&g);
    }
    Ok((total, grads))
}

/// Empirical risk over the batch and its exact gradient.
pub fn risk_and_gradient(p: &RnnParams, batch: &SequenceBatch, loss: &LossSpec) -> Result<(f64, Gradients)> {
    let w = vec![1.0 / batch.n() as f64; batch.n()];
    weighted_loss_and_gradient(p, batch, loss, &w)
}

pub fn bptt_gradient(p: &RnnParams, batch: &SequenceBatch, loss: &LossSpec) -> Result<Gradients> {
    Ok(risk_and_gradient(p, batch, loss)?.1)
}

/// Per-sequence losses, in batch order.
pub fn sequence_losses(p: &RnnParams, batch: &SequenceBatch, loss: &LossSpec) -> Result<Vec<f64>> {
    let scored = batch.steps_scored() as f64;
    (0..batch.n())
        .into_par_iter()
        .map(|i| {
            let trace = forward(p, batch.sequence(i))?;
            let mut v = 0.0;
            for tau in 0..batch.t() {
                if let Some(z) = batch.label_at(i, tau) {
                    v += loss.value(&trace.outputs[tau], z)?;
                }
            }
            Ok(v / scored)
        })
        .collect()
}

pub fn empirical_risk(p: &RnnParams, batch: &SequenceBatch, loss: &LossSpec) -> Result<f64> {
    let l = sequence_losses(p, batch, loss)?;
    Ok(l.iter().sum::<f64>() / l.len() as f64)
}

/// Clips the global gradient norm to `clip`, then takes an SGD step of size `lr`.
pub fn clip_and_step(p: &RnnParams, g: &Gradients, lr: f64, clip: f64) -> Result<RnnParams> {
    if !(lr >= 0.0 && lr.is_finite()) {
        return invalid(format!("learning rate must be nonnegative, got {lr}"));
    }
    if !(clip > 0.0) {
        return invalid(format!("clip must be positive, got {clip}"));
    }
    let norm = g.global_norm();
    let scale = if norm > clip { clip / norm } else { 1.0 };
    let step = |m: &Matrix, d: &Matrix| -> Result<Matrix> { m.sub(&d.scale(lr * scale)?) };
    RnnParams::new(step(&p.u, &g.du)?, step(&p.w, &g.dw)?, step(&p.v, &g.dv)?, p.activation)
}

/// On-disk model format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub d_x: usize,
    pub d_h: usize,
    pub d_y: usize,
    pub activation: Activation,
    #[serde(rename = "U")]
    pub u: Vec<f64>,
    #[serde(rename = "W")]
    pub w: Vec<f64>,
    #[serde(rename = "V")]
    pub v: Vec<f64>,
    pub seed: u64,
    pub epoch: usize,
}

impl Checkpoint {
    pub fn from_params(p: &RnnParams, seed: u64, epoch: usize) -> Self {
        Self {
            d_x: p.d_x(),
            d_h: p.d_h(),
            d_y: p.d_y(),
            activation: p.activation,
            u: p.u.data().to_vec(),
            w: p.w.data().to_vec(),
            v: p.v.data().to_vec(),
            seed,
            epoch,
        }
    }

    pub fn params(&self) -> Result<RnnParams> {
        RnnParams::new(
            Matrix::from_vec(self.d_h, self.d_h, self.u.clone())?,
            Matrix::from_vec(self.d_h, self.d_x, self.w.clone())?,
            Matrix::from_vec(self.d_y, self.d_h, self.v.clone())?,
            self.activation,
        )
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let c: Checkpoint = serde_json::from_str(s)?;
        c.params()?;
        Ok(c)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
