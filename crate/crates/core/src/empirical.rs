//! Monte-Carlo estimates of empirical Rademacher complexity and randomized
//! checks of the norm and Lipschitz inequalities behind the bounds.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::capacity::{recurrence_constants, Flavor, NormProfile};
use crate::error::{invalid, Error, Result};
use crate::linalg::{self, Matrix};
use crate::losses::{margin_operator, LossSpec};
use crate::rng::{self, StreamRng};
use crate::rnn::{self, forward, Activation, Labels, RnnParams, SequenceBatch};

/// Radii of the parameter set searched by the estimator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassConstraints {
    pub b_u: f64,
    pub b_v: f64,
    pub b_w: f64,
    pub m_u: Option<f64>,
    pub activation: Activation,
}

impl ClassConstraints {
    pub fn validate(&self) -> Result<()> {
        for (name, r) in [("B_U", self.b_u), ("B_V", self.b_v), ("B_W", self.b_w)] {
            if !(r >= 0.0 && r.is_finite()) {
                return invalid(format!("{name} must be finite and nonnegative, got {r}"));
            }
        }
        if let Some(m) = self.m_u {
            if !(m >= 0.0 && m <= self.b_u) {
                return invalid(format!("M_U = {m} must lie in [0, B_U = {}]", self.b_u));
            }
        }
        Ok(())
    }

    /// Norm profile whose bounds cover every member of the class on `data`.
    pub fn profile(&self, d_h: usize, d_y: usize, data: &SequenceBatch) -> NormProfile {
        let (d_x, b_x) = (data.d_x(), data.b_x());
        let sq = |k: usize| (k as f64).sqrt();
        NormProfile {
            d_x,
            d_h,
            d_y,
            rho_h: self.activation.lipschitz(),
            b_x,
            b_row: b_x,
            b_u: self.b_u,
            b_v: self.b_v,
            b_w: self.b_w,
            m_u: self.m_u.unwrap_or(self.b_u),
            m_v: self.b_v,
            m_w: self.b_w,
            b_x1: sq(d_x) * b_x,
            b_u1: sq(d_h) * self.b_u,
            b_v1: sq(d_y) * self.b_v,
            b_w1: sq(d_h) * self.b_w,
            entry_bound: self.activation.entry_bound(),
            activation: Some(self.activation),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErcEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub draws: usize,
    pub restarts: usize,
    pub best_correlations: Vec<f64>,
    /// Restarts dropped because the ascent produced a non-finite objective.
    pub discarded_restarts: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignMode {
    Sampled {
        draws: usize,
    },
    /// All `2^n` sign vectors, each paired with its negation.
    Exhaustive,
}

const MAX_EXHAUSTIVE_N: usize = 20;

/// Something that can (approximately) maximize the signed correlation over a class.
pub trait CorrelationMaximizer: Sync {
    fn n(&self) -> usize;

    /// Returns `sup_f (1/n) Σ ε_i ℓ_i(f)` (or a lower estimate of it) and the
    /// number of discarded restarts.
    fn maximize(&self, signs: &[f64], seed: u64, draw: u64) -> Result<(f64, usize)>;

    fn restarts(&self) -> usize {
        1
    }
}

/// A class given by its loss values on the sample; the supremum is exact.
#[derive(Debug, Clone, PartialEq)]
pub struct FiniteClass {
    values: Vec<Vec<f64>>,
}

impl FiniteClass {
    pub fn new(values: Vec<Vec<f64>>) -> Result<Self> {
        let n = values.first().map_or(0, Vec::len);
        if n == 0 || values.iter().any(|v| v.len() != n) {
            return invalid("finite class needs members with equal, positive sample counts");
        }
        Ok(Self { values })
    }

    /// The pair `{f, −f}` with `f ≡ 1` on `n` points.
    pub fn symmetric_pair(n: usize) -> Result<Self> {
        Self::new(vec![vec![1.0; n], vec![-1.0; n]])
    }
}

impl CorrelationMaximizer for FiniteClass {
    fn n(&self) -> usize {
        self.values[0].len()
    }

    fn maximize(&self, signs: &[f64], _seed: u64, _draw: u64) -> Result<(f64, usize)> {
        let n = self.n() as f64;
        let best = self
            .values
            .iter()
            .map(|v| linalg::dot(v, signs) / n)
            .fold(f64::NEG_INFINITY, f64::max);
        Ok((best, 0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AscentOptions {
    pub restarts: usize,
    pub steps: usize,
    pub lr: f64,
}

impl Default for AscentOptions {
    fn default() -> Self {
        Self {
            restarts: 8,
            steps: 200,
            lr: 0.05,
        }
    }
}

/// The loss class of RNNs within [`ClassConstraints`], searched by projected gradient ascent.
pub struct RnnLossClass<'a> {
    pub constraints: ClassConstraints,
    pub d_h: usize,
    pub d_y: usize,
    pub data: &'a SequenceBatch,
    pub loss: LossSpec,
    pub ascent: AscentOptions,
}

fn project_frobenius(m: &mut Matrix, radius: f64) {
    let f = linalg::frobenius_norm(m);
    if f > radius {
        let s = if f > 0.0 { radius / f } else { 0.0 };
        m.scale_in_place(s);
    }
}

impl RnnLossClass<'_> {
    fn project(&self, p: &mut RnnParams) {
        let c = &self.constraints;
        project_frobenius(&mut p.u, c.b_u);
        project_frobenius(&mut p.v, c.b_v);
        project_frobenius(&mut p.w, c.b_w);
        if let Some(m_u) = c.m_u {
            // fall back to the Frobenius norm, an upper bound, if power iteration stalls
            let sigma = linalg::spectral_norm_default(&p.u).unwrap_or_else(|_| linalg::frobenius_norm(&p.u));
            if sigma > m_u {
                p.u.scale_in_place(if sigma > 0.0 { m_u / sigma } else { 0.0 });
            }
        }
    }

    fn initial(&self, rng: &mut StreamRng) -> RnnParams {
        let c = &self.constraints;
        let d_x = self.data.d_x();
        let mut draw = |rows: usize, cols: usize, radius: f64| {
            let mut m = Matrix::random_normal(rng, rows, cols, 1.0);
            let f = linalg::frobenius_norm(&m);
            let target = radius * rng.random_range(0.5..=1.0);
            m.scale_in_place(if f > 0.0 { target / f } else { 0.0 });
            m
        };
        let u = draw(self.d_h, self.d_h, c.b_u);
        let w = draw(self.d_h, d_x, c.b_w);
        let v = draw(self.d_y, self.d_h, c.b_v);
        let mut p = RnnParams {
            u,
            w,
            v,
            activation: c.activation,
        };
        self.project(&mut p);
        p
    }

    fn ascend(&self, signs: &[f64], rng: &mut StreamRng) -> Result<Option<f64>> {
        let n = self.data.n() as f64;
        let weights: Vec<f64> = signs.iter().map(|s| s / n).collect();
        let mut p = self.initial(rng);
        let mut best = f64::NEG_INFINITY;
        for step in 0..=self.ascent.steps {
            let (obj, g) = match rnn::weighted_loss_and_gradient(&p, self.data, &self.loss, &weights) {
                Ok(v) => v,
                Err(Error::NonFinite(_)) => return Ok(None),
                Err(e) => return Err(e),
            };
            best = best.max(obj);
            if step == self.ascent.steps {
                break;
            }
            for (m, d) in [(&mut p.u, &g.du), (&mut p.w, &g.dw), (&mut p.v, &g.dv)] {
                m.data_mut()
                    .iter_mut()
                    .zip(d.data())
                    .for_each(|(x, gx)| *x += self.ascent.lr * gx);
            }
            if !(p.u.is_finite() && p.w.is_finite() && p.v.is_finite()) {
                return Ok(None);
            }
            self.project(&mut p);
        }
        Ok(best.is_finite().then_some(best))
    }
}

impl CorrelationMaximizer for RnnLossClass<'_> {
    fn n(&self) -> usize {
        self.data.n()
    }

    fn restarts(&self) -> usize {
        self.ascent.restarts
    }

    fn maximize(&self, signs: &[f64], seed: u64, draw: u64) -> Result<(f64, usize)> {
        let mut best = f64::NEG_INFINITY;
        let mut discarded = 0;
        for r in 0..self.ascent.restarts {
            let mut rng = rng::stream(seed, &[draw, r as u64, 0xA5]);
            match self.ascend(signs, &mut rng)? {
                Some(v) => best = best.max(v),
                None => discarded += 1,
            }
        }
        if !best.is_finite() {
            return Err(Error::NonFinite(format!("every restart of draw {draw} diverged")));
        }
        Ok((best, discarded))
    }
}

fn exhaustive_signs(n: usize) -> Result<Vec<Vec<f64>>> {
    if n > MAX_EXHAUSTIVE_N {
        return invalid(format!(
            "exhaustive sign enumeration limited to n <= {MAX_EXHAUSTIVE_N}"
        ));
    }
    let half = 1usize << (n - 1);
    let mut out = Vec::with_capacity(2 * half);
    for k in 0..half {
        let s: Vec<f64> = (0..n)
            .map(|i| if i + 1 < n && (k >> i) & 1 == 1 { -1.0 } else { 1.0 })
            .collect();
        out.push(s.iter().map(|x| -x).collect());
        out.push(s);
    }
    Ok(out)
}

/// Averages the maximized correlation over sign vectors.
pub fn estimate_erc<M: CorrelationMaximizer>(m: &M, mode: SignMode, seed: u64) -> Result<ErcEstimate> {
    let n = m.n();
    let signs: Vec<Vec<f64>> = match mode {
        SignMode::Sampled { draws } => {
            if draws == 0 {
                return invalid("draws must be at least 1");
            }
            (0..draws)
                .map(|k| rng::rademacher_signs(&mut rng::stream(seed, &[k as u64, 0x51]), n))
                .collect()
        }
        SignMode::Exhaustive => exhaustive_signs(n)?,
    };
    let results: Vec<(f64, usize)> = signs
        .par_iter()
        .enumerate()
        .map(|(k, s)| m.maximize(s, seed, k as u64))
        .collect::<Result<_>>()?;
    let best: Vec<f64> = results.iter().map(|r| r.0).collect();
    let discarded = results.iter().map(|r| r.1).sum();
    let k = best.len() as f64;
    let mean = best.iter().sum::<f64>() / k;
    let std_error = match mode {
        SignMode::Exhaustive => 0.0,
        SignMode::Sampled { .. } if best.len() > 1 => {
            let var = best.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (k - 1.0);
            (var / k).sqrt()
        }
        SignMode::Sampled { .. } => 0.0,
    };
    Ok(ErcEstimate {
        mean,
        std_error,
        draws: best.len(),
        restarts: m.restarts(),
        best_correlations: best,
        discarded_restarts: discarded,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErcOptions {
    pub draws: usize,
    pub ascent: AscentOptions,
    pub seed: u64,
}

impl Default for ErcOptions {
    fn default() -> Self {
        Self {
            draws: 64,
            ascent: AscentOptions::default(),
            seed: 0,
        }
    }
}

/// Monte-Carlo lower estimate of the empirical Rademacher complexity of the RNN loss class.
pub fn estimate_erc_mc(
    constraints: &ClassConstraints,
    d_h: usize,
    d_y: usize,
    data: &SequenceBatch,
    loss: &LossSpec,
    opts: &ErcOptions,
) -> Result<ErcEstimate> {
    constraints.validate()?;
    loss.validate()?;
    if opts.ascent.restarts == 0 {
        return invalid("restarts must be at least 1");
    }
    if d_h == 0 || d_y < 2 {
        return invalid("need d_h >= 1 and at least two output classes");
    }
    if data.num_classes() > d_y {
        return invalid(format!("labels reach class {} but d_y = {d_y}", data.num_classes() - 1));
    }
    let class = RnnLossClass {
        constraints: *constraints,
        d_h,
        d_y,
        data,
        loss: *loss,
        ascent: opts.ascent,
    };
    estimate_erc(&class, SignMode::Sampled { draws: opts.draws }, opts.seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub op: String,
    pub trials: usize,
    pub violations: usize,
    pub max_slack_ratio: f64,
    pub seed: u64,
}

impl VerificationReport {
    fn from_ratios(op: &str, seed: u64, ratios: &[(f64, bool)]) -> Self {
        Self {
            op: op.to_string(),
            trials: ratios.len(),
            violations: ratios.iter().filter(|r| r.1).count(),
            max_slack_ratio: ratios.iter().map(|r| r.0).fold(0.0, f64::max),
            seed,
        }
    }

    pub fn passed(&self) -> bool {
        self.violations == 0
    }
}

const REL_SLACK: f64 = 1e-9;

/// `lhs / rhs` and whether `lhs` exceeds `rhs` beyond the relative slack.
fn ratio(lhs: f64, rhs: f64) -> (f64, bool) {
    let violated = lhs > rhs * (1.0 + REL_SLACK) + 1e-300;
    let r = if rhs > 0.0 {
        lhs / rhs
    } else if lhs > 0.0 {
        f64::INFINITY
    } else {
        0.0
    };
    (r, violated)
}

fn merge(a: (f64, bool), b: (f64, bool)) -> (f64, bool) {
    (a.0.max(b.0), a.1 || b.1)
}

/// Size limits for randomly generated verification instances.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VerifyDims {
    pub max_d: usize,
    pub max_t: usize,
}

impl Default for VerifyDims {
    fn default() -> Self {
        Self { max_d: 8, max_t: 12 }
    }
}

/// Exact norms of `p` as a profile (inputs bounded by `b_x`).
fn tight_profile(p: &RnnParams, b_x: f64) -> Result<NormProfile> {
    let spec = |m: &Matrix| -> Result<f64> {
        // the spectral norm never exceeds the Frobenius norm
        Ok(linalg::spectral_norm_default(m)?.min(linalg::frobenius_norm(m)))
    };
    Ok(NormProfile {
        d_x: p.d_x(),
        d_h: p.d_h(),
        d_y: p.d_y(),
        rho_h: p.activation.lipschitz(),
        b_x,
        b_row: b_x,
        b_u: linalg::frobenius_norm(&p.u),
        b_v: linalg::frobenius_norm(&p.v),
        b_w: linalg::frobenius_norm(&p.w),
        m_u: spec(&p.u)?,
        m_v: spec(&p.v)?,
        m_w: spec(&p.w)?,
        b_x1: 0.0,
        b_u1: linalg::one_norm(&p.u),
        b_v1: linalg::one_norm(&p.v),
        b_w1: linalg::one_norm(&p.w),
        entry_bound: p.activation.entry_bound(),
        activation: Some(p.activation),
    })
}

/// Largest ratio of `‖h_τ‖` to its bound over all steps, for the Frobenius
/// and spectral recurrences, and whether the bounded-activation check failed.
pub fn hidden_norm_check(p: &RnnParams, seq: &[Vec<f64>], b_x: f64) -> Result<(f64, bool)> {
    let prof = tight_profile(p, b_x)?;
    let tr = forward(p, seq)?;
    let mut out = (0.0, false);
    for (tau, h) in tr.hidden.iter().enumerate() {
        let hn = linalg::norm2(h);
        for flavor in [Flavor::Frobenius, Flavor::Spectral] {
            let k = recurrence_constants(&prof, tau + 1, flavor)?;
            out = merge(out, ratio(hn, prof.rho_h * prof.b_w * prof.b_x * k.c_t));
        }
        if let Some(b) = p.activation.entry_bound() {
            out.1 |= h.iter().any(|x| x.abs() > b);
        }
    }
    Ok(out)
}

fn random_activation(rng: &mut StreamRng) -> Activation {
    if rng.random::<bool>() {
        Activation::Relu
    } else {
        Activation::Tanh
    }
}

/// Gaussian matrix whose expected Frobenius norm is about `scale`.
fn random_matrix(rng: &mut StreamRng, rows: usize, cols: usize) -> Matrix {
    let scale = rng.random_range(0.0..1.6) / ((rows * cols) as f64).sqrt();
    Matrix::random_normal(rng, rows, cols, scale)
}

fn random_params(rng: &mut StreamRng, d_x: usize, d_h: usize, d_y: usize, act: Activation) -> RnnParams {
    RnnParams {
        u: random_matrix(rng, d_h, d_h),
        w: random_matrix(rng, d_h, d_x),
        v: random_matrix(rng, d_y, d_h),
        activation: act,
    }
}

/// Inputs with norms in `(0, b_x]`; roughly a third sit exactly on the sphere.
fn random_sequence(rng: &mut StreamRng, t: usize, d_x: usize, b_x: f64) -> Vec<Vec<f64>> {
    (0..t)
        .map(|_| {
            let r = if rng.random_range(0..3) == 0 {
                b_x
            } else {
                b_x * rng.random_range(0.0..1.0f64)
            };
            rng::unit_vec(rng, d_x).into_iter().map(|x| x * r).collect()
        })
        .collect()
}

fn random_dims(rng: &mut StreamRng, dims: VerifyDims) -> (usize, usize, usize, usize) {
    (
        rng.random_range(1..=dims.max_d),
        rng.random_range(1..=dims.max_d),
        rng.random_range(1..=dims.max_d),
        rng.random_range(1..=dims.max_t),
    )
}

/// Hidden-state norm bound on random networks and admissible inputs.
pub fn verify_hidden_norm(trials: usize, dims: VerifyDims, seed: u64) -> Result<VerificationReport> {
    if trials == 0 {
        return invalid("trials must be at least 1");
    }
    let ratios: Vec<(f64, bool)> = (0..trials)
        .into_par_iter()
        .map(|k| {
            let rng = &mut rng::stream(seed, &[k as u64, 0x41]);
            let (d_x, d_h, d_y, t) = random_dims(rng, dims);
            let act = random_activation(rng);
            let p = random_params(rng, d_x, d_h, d_y, act);
            let b_x = rng.random_range(0.5..2.0);
            let seq = random_sequence(rng, t, d_x, b_x);
            hidden_norm_check(&p, &seq, b_x)
        })
        .collect::<Result<_>>()?;
    Ok(VerificationReport::from_ratios("hidden_norm", seed, &ratios))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Perturbation {
    All,
    OnlyV,
}

/// `‖y_t − y'_t‖` against `L_V‖ΔV‖ + L_U‖ΔU‖ + L_W‖ΔW‖` for two networks on the same inputs.
pub fn output_lipschitz_check(
    p: &RnnParams,
    q: &RnnParams,
    seq: &[Vec<f64>],
    b_x: f64,
    flavor: Flavor,
) -> Result<(f64, bool)> {
    let a = tight_profile(p, b_x)?;
    let b = tight_profile(q, b_x)?;
    let prof = NormProfile {
        b_u: a.b_u.max(b.b_u),
        b_v: a.b_v.max(b.b_v),
        b_w: a.b_w.max(b.b_w),
        m_u: a.m_u.max(b.m_u),
        m_v: a.m_v.max(b.m_v),
        m_w: a.m_w.max(b.m_w),
        ..a
    };
    let t = seq.len();
    let (l_v, l_u, l_w) = crate::capacity::lipschitz_constants(&prof, t, flavor)?;
    let y = forward(p, seq)?;
    let y2 = forward(q, seq)?;
    let lhs: f64 = linalg::norm2(
        &y.last_output()
            .iter()
            .zip(y2.last_output())
            .map(|(a, b)| a - b)
            .collect::<Vec<_>>(),
    );
    let dist = |m1: &Matrix, m2: &Matrix| -> Result<f64> { Ok(linalg::frobenius_norm(&m1.sub(m2)?)) };
    let rhs = l_v * dist(&p.v, &q.v)? + l_u * dist(&p.u, &q.u)? + l_w * dist(&p.w, &q.w)?;
    Ok(ratio(lhs, rhs))
}

fn perturb(rng: &mut StreamRng, m: &Matrix) -> Matrix {
    let scale = 10f64.powf(rng.random_range(-4.0..0.0));
    let d = Matrix::random_normal(rng, m.rows(), m.cols(), scale);
    m.add(&d).expect("same shape")
}

pub fn verify_output_lipschitz(
    trials: usize,
    dims: VerifyDims,
    mode: Perturbation,
    flavor: Flavor,
    seed: u64,
) -> Result<VerificationReport> {
    if trials == 0 {
        return invalid("trials must be at least 1");
    }
    let ratios: Vec<(f64, bool)> = (0..trials)
        .into_par_iter()
        .map(|k| {
            let rng = &mut rng::stream(seed, &[k as u64, 0x42]);
            let (d_x, d_h, d_y, t) = random_dims(rng, dims);
            let act = random_activation(rng);
            let p = random_params(rng, d_x, d_h, d_y, act);
            let mut q = p.clone();
            q.v = perturb(rng, &p.v);
            if mode == Perturbation::All {
                q.u = perturb(rng, &p.u);
                q.w = perturb(rng, &p.w);
            }
            let b_x = rng.random_range(0.5..2.0);
            let seq = random_sequence(rng, t, d_x, b_x);
            output_lipschitz_check(&p, &q, &seq, b_x, flavor)
        })
        .collect::<Result<_>>()?;
    let op = match mode {
        Perturbation::All => "output_lipschitz",
        Perturbation::OnlyV => "output_lipschitz_v",
    };
    Ok(VerificationReport::from_ratios(op, seed, &ratios))
}

/// `|ℓ(f) − ℓ(f')|` against `ρ‖f − f'‖`.
pub fn loss_lipschitz_check(loss: &LossSpec, f: &[f64], g: &[f64], z: usize) -> Result<(f64, bool)> {
    let diff = (loss.value(f, z)? - loss.value(g, z)?).abs();
    let dist = linalg::norm2(&f.iter().zip(g).map(|(a, b)| a - b).collect::<Vec<_>>());
    let rhs = loss.rho() * dist;
    let r = if rhs > 0.0 {
        diff / rhs
    } else if diff > 0.0 {
        f64::INFINITY
    } else {
        0.0
    };
    Ok((r, diff > rhs + 1e-12))
}

pub fn verify_loss_lipschitz(loss: &LossSpec, trials: usize, max_k: usize, seed: u64) -> Result<VerificationReport> {
    loss.validate()?;
    if trials == 0 || max_k < 2 {
        return invalid("need trials >= 1 and max_k >= 2");
    }
    let ratios: Vec<(f64, bool)> = (0..trials)
        .into_par_iter()
        .map(|k| {
            let rng = &mut rng::stream(seed, &[k as u64, 0x43]);
            let classes = rng.random_range(2..=max_k);
            let scale = 10f64.powf(rng.random_range(-2.0..1.0));
            let f: Vec<f64> = rng::normal_vec(rng, classes).iter().map(|x| x * scale).collect();
            let step = 10f64.powf(rng.random_range(-3.0..1.0));
            let g: Vec<f64> = f
                .iter()
                .zip(rng::normal_vec(rng, classes))
                .map(|(a, e)| a + step * e)
                .collect();
            let z = rng.random_range(0..classes);
            loss_lipschitz_check(loss, &f, &g, z)
        })
        .collect::<Result<_>>()?;
    let op = format!("loss_lipschitz_{}", loss.name());
    Ok(VerificationReport::from_ratios(&op, seed, &ratios))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradientCheck {
    pub max_relative_error: f64,
    pub coordinates: usize,
}

const MAX_FD_COORDS: usize = 200;

/// Relative error with a floor so that two tiny gradients compare as equal.
fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Central finite differences of the empirical risk against BPTT.
pub fn gradient_check(p: &RnnParams, batch: &SequenceBatch, loss: &LossSpec, fd_step: f64) -> Result<GradientCheck> {
    if !(fd_step > 0.0) {
        return invalid(format!("fd_step must be positive, got {fd_step}"));
    }
    let analytic = rnn::bptt_gradient(p, batch, loss)?.flatten();
    let total = p.num_params();
    let coords: Vec<usize> = if total <= MAX_FD_COORDS {
        (0..total).collect()
    } else {
        let mut rng = rng::stream(0, &[total as u64, 0x44]);
        rand::seq::index::sample(&mut rng, total, MAX_FD_COORDS).into_vec()
    };
    let mut worst = 0.0f64;
    for &i in &coords {
        let mut q = p.clone();
        let x = *q.param_mut(i);
        *q.param_mut(i) = x + fd_step;
        let up = rnn::empirical_risk(&q, batch, loss)?;
        *q.param_mut(i) = x - fd_step;
        let down = rnn::empirical_risk(&q, batch, loss)?;
        let numeric = (up - down) / (2.0 * fd_step);
        worst = worst.max(rel_error(analytic[i], numeric));
    }
    Ok(GradientCheck {
        max_relative_error: worst,
        coordinates: coords.len(),
    })
}

/// Smallest distance of the configuration to a non-differentiable point:
/// relu pre-activations at 0, ties in the runner-up class, and loss knots.
pub fn kink_margin(p: &RnnParams, batch: &SequenceBatch, loss: &LossSpec) -> Result<f64> {
    let mut margin = f64::INFINITY;
    for i in 0..batch.n() {
        let seq = batch.sequence(i);
        let tr = forward(p, seq)?;
        if p.activation == Activation::Relu {
            let mut prev = vec![0.0; p.d_h()];
            for (tau, x) in seq.iter().enumerate() {
                let mut pre = p.u.matvec(&prev)?;
                let wx = p.w.matvec(x)?;
                pre.iter_mut().zip(&wx).for_each(|(a, b)| *a += b);
                margin = pre.iter().fold(margin, |m, a| m.min(a.abs()));
                prev = tr.hidden[tau].clone();
            }
        }
        if matches!(loss, LossSpec::CrossEntropy) {
            continue;
        }
        for tau in 0..batch.t() {
            let Some(z) = batch.label_at(i, tau) else { continue };
            let f = &tr.outputs[tau];
            let psi = margin_operator(f, z)?;
            let knots: &[f64] = match *loss {
                LossSpec::Hinge => &[-1.0],
                LossSpec::Ramp { gamma } => &[0.0, -gamma],
                LossSpec::CrossEntropy => &[],
            };
            // gradient of ψ changes only where it is non-zero
            let active = match *loss {
                LossSpec::Hinge => psi > -1.0,
                LossSpec::Ramp { gamma } => psi > -gamma && psi < 0.0,
                LossSpec::CrossEntropy => false,
            };
            margin = knots.iter().fold(margin, |m, k| m.min((psi - k).abs()));
            if active {
                let mut others: Vec<f64> = f.iter().enumerate().filter(|(k, _)| *k != z).map(|(_, v)| *v).collect();
                others.sort_by(|a, b| b.total_cmp(a));
                if others.len() > 1 {
                    margin = margin.min(others[0] - others[1]);
                }
            }
        }
    }
    Ok(margin)
}

/// Measured norms of `p` and `data`.
pub fn extract_norm_profile(p: &RnnParams, data: &SequenceBatch) -> Result<NormProfile> {
    if data.d_x() != p.d_x() {
        return Err(Error::Shape(format!(
            "data d_x {} vs model d_x {}",
            data.d_x(),
            p.d_x()
        )));
    }
    let b_x1 = data
        .inputs()
        .iter()
        .flatten()
        .map(|x| linalg::norm1(x))
        .fold(0.0, f64::max);
    norm_profile(p, data.max_step_norm(), b_x1)
}

/// Profile of `p` for inputs with step norms at most `b_x` (Euclidean) and `b_x1` (1-norm).
pub fn norm_profile(p: &RnnParams, b_x: f64, b_x1: f64) -> Result<NormProfile> {
    let spec = |m: &Matrix| linalg::spectral_norm_default(m);
    let prof = NormProfile {
        d_x: p.d_x(),
        d_h: p.d_h(),
        d_y: p.d_y(),
        rho_h: p.activation.lipschitz(),
        b_x,
        b_row: b_x,
        b_u: linalg::frobenius_norm(&p.u),
        b_v: linalg::frobenius_norm(&p.v),
        b_w: linalg::frobenius_norm(&p.w),
        m_u: spec(&p.u)?,
        m_v: spec(&p.v)?,
        m_w: spec(&p.w)?,
        b_x1,
        b_u1: linalg::one_norm(&p.u),
        b_v1: linalg::one_norm(&p.v),
        b_w1: linalg::one_norm(&p.w),
        entry_bound: p.activation.entry_bound(),
        activation: Some(p.activation),
    };
    prof.validate()?;
    Ok(prof)
}

/// Largest terminal output norm over the data, an alternative to the analytic output bound.
pub fn measured_output_bound(p: &RnnParams, data: &SequenceBatch) -> Result<f64> {
    let norms: Vec<f64> = (0..data.n())
        .into_par_iter()
        .map(|i| Ok(linalg::norm2(forward(p, data.sequence(i))?.last_output())))
        .collect::<Result<_>>()?;
    Ok(norms.into_iter().fold(0.0, f64::max))
}

/// Random batch of `n` sequences for verification and estimation fixtures.
pub fn random_batch(n: usize, t: usize, d_x: usize, classes: usize, b_x: f64, seed: u64) -> Result<SequenceBatch> {
    if n == 0 || t == 0 || d_x == 0 || classes < 2 {
        return invalid("random_batch needs positive sizes and at least two classes");
    }
    let rng = &mut rng::stream(seed, &[0x45]);
    let inputs = (0..n).map(|_| random_sequence(rng, t, d_x, b_x)).collect();
    let labels = (0..n).map(|_| rng.random_range(0..classes)).collect();
    SequenceBatch::new(inputs, Labels::Terminal(labels), b_x)
}

/// Random parameters with entries of order `1/√size`.
pub fn random_rnn(d_x: usize, d_h: usize, d_y: usize, activation: Activation, seed: u64) -> RnnParams {
    random_params(&mut rng::stream(seed, &[0x46]), d_x, d_h, d_y, activation)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finite_class_pair_is_one_half() {
        let c = FiniteClass::symmetric_pair(2).unwrap();
        let e = estimate_erc(&c, SignMode::Exhaustive, 0).unwrap();
        assert_eq!(e.mean, 0.5);
        assert_eq!(e.draws, 4);
    }

    #[test]
    fn exhaustive_signs_are_all_distinct() {
        let s = exhaustive_signs(4).unwrap();
        assert_eq!(s.len(), 16);
        let mut keys: Vec<String> = s.iter().map(|v| format!("{v:?}")).collect();
        keys.sort();
        keys.dedup();
        assert_eq!(keys.len(), 16);
    }

    #[test]
    fn singleton_class_is_zero() {
        let data = random_batch(4, 3, 2, 2, 1.0, 1).unwrap();
        let c = ClassConstraints {
            b_u: 0.0,
            b_v: 0.0,
            b_w: 0.0,
            m_u: None,
            activation: Activation::Tanh,
        };
        let class = RnnLossClass {
            constraints: c,
            d_h: 3,
            d_y: 2,
            data: &data,
            loss: LossSpec::ramp(1.0).unwrap(),
            ascent: AscentOptions {
                restarts: 2,
                steps: 5,
                lr: 0.05,
            },
        };
        let e = estimate_erc(&class, SignMode::Exhaustive, 3).unwrap();
        assert_eq!(e.mean, 0.0);
    }

    #[test]
    fn hidden_norm_examples() {
        let p = RnnParams::zeros(2, 3, 2, Activation::Relu);
        let seq = vec![vec![0.6, 0.8]; 4];
        assert_eq!(hidden_norm_check(&p, &seq, 1.0).unwrap(), (0.0, false));
        let one = || Matrix::from_vec(1, 1, vec![1.0]).unwrap();
        let p = RnnParams::new(one(), one(), one(), Activation::Relu).unwrap();
        let (r, bad) = hidden_norm_check(&p, &vec![vec![1.0]; 6], 1.0).unwrap();
        assert!(!bad);
        assert!((r - 1.0).abs() < 1e-12);
    }

    #[test]
    fn identical_pair_has_zero_gap() {
        let p = random_rnn(3, 4, 2, Activation::Tanh, 5);
        let seq = vec![vec![0.5, 0.5, 0.5]; 3];
        let (r, bad) = output_lipschitz_check(&p, &p, &seq, 1.0, Flavor::Frobenius).unwrap();
        assert_eq!((r, bad), (0.0, false));
    }

    #[test]
    fn identical_logits_have_zero_gap() {
        let (r, bad) = loss_lipschitz_check(&LossSpec::CrossEntropy, &[1.0, 2.0], &[1.0, 2.0], 1).unwrap();
        assert_eq!((r, bad), (0.0, false));
    }

    #[test]
    fn small_verifications_pass() {
        assert!(verify_hidden_norm(50, VerifyDims::default(), 1).unwrap().passed());
        assert!(
            verify_output_lipschitz(50, VerifyDims::default(), Perturbation::All, Flavor::Frobenius, 1)
                .unwrap()
                .passed()
        );
        assert!(verify_loss_lipschitz(&LossSpec::Hinge, 200, 10, 1).unwrap().passed());
    }

    #[test]
    fn zero_model_gradient_check() {
        let p = RnnParams::zeros(2, 2, 2, Activation::Relu);
        let data = random_batch(3, 2, 2, 2, 1.0, 2).unwrap();
        let g = gradient_check(&p, &data, &LossSpec::ramp(1.0).unwrap(), 1e-5).unwrap();
        assert_eq!(g.max_relative_error, 0.0);
        assert_eq!(g.coordinates, 12);
    }

    #[test]
    fn profile_examples() {
        let data = random_batch(2, 2, 2, 2, 1.0, 3).unwrap();
        let zero = RnnParams::zeros(2, 2, 2, Activation::Relu);
        let prof = extract_norm_profile(&zero, &data).unwrap();
        assert_eq!(
            (prof.b_u, prof.m_u, prof.b_u1, prof.b_w, prof.m_v),
            (0.0, 0.0, 0.0, 0.0, 0.0)
        );
        let mut p = zero.clone();
        p.u = Matrix::diag(&[3.0, 1.0]);
        let prof = extract_norm_profile(&p, &data).unwrap();
        assert!((prof.b_u - 10f64.sqrt()).abs() < 1e-15);
        assert!((prof.m_u - 3.0).abs() < 1e-9);
        assert_eq!(prof.b_u1, 3.0);
    }

    #[test]
    fn estimates_are_deterministic() {
        let data = random_batch(6, 2, 2, 2, 1.0, 4).unwrap();
        let c = ClassConstraints {
            b_u: 1.0,
            b_v: 1.0,
            b_w: 1.0,
            m_u: Some(0.8),
            activation: Activation::Tanh,
        };
        let opts = ErcOptions {
            draws: 4,
            ascent: AscentOptions {
                restarts: 2,
                steps: 10,
                lr: 0.05,
            },
            seed: 9,
        };
        let loss = LossSpec::ramp(1.0).unwrap();
        let a = estimate_erc_mc(&c, 3, 2, &data, &loss, &opts).unwrap();
        let b = estimate_erc_mc(&c, 3, 2, &data, &loss, &opts).unwrap();
        assert_eq!(a, b);
    }
}
