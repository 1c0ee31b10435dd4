//! Closed-form capacity quantities: recurrence constants, covering numbers,
//! the Dudley integral, the bound families and the estimation-error terms.
//!
//! Geometric-type sums are accumulated term by term so that `ρ_h B_U = 1`
//! needs no special case.

use std::io::Write;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, Error, Result};
use crate::linalg::{self, Matrix};
use crate::losses::{loss_constants, LossSpec};
use crate::rnn::Activation;

/// Every norm and dimension the bounds consume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormProfile {
    pub d_x: usize,
    pub d_h: usize,
    pub d_y: usize,
    pub rho_h: f64,
    #[serde(rename = "B_x")]
    pub b_x: f64,
    #[serde(rename = "B_row")]
    pub b_row: f64,
    #[serde(rename = "B_U")]
    pub b_u: f64,
    #[serde(rename = "B_V")]
    pub b_v: f64,
    #[serde(rename = "B_W")]
    pub b_w: f64,
    #[serde(rename = "M_U")]
    pub m_u: f64,
    #[serde(rename = "M_V")]
    pub m_v: f64,
    #[serde(rename = "M_W")]
    pub m_w: f64,
    #[serde(rename = "B_x1")]
    pub b_x1: f64,
    #[serde(rename = "B_U1")]
    pub b_u1: f64,
    #[serde(rename = "B_V1")]
    pub b_v1: f64,
    #[serde(rename = "B_W1")]
    pub b_w1: f64,
    /// Entry-wise activation bound, present for bounded activations.
    #[serde(rename = "b", default)]
    pub entry_bound: Option<f64>,
    #[serde(default)]
    pub activation: Option<Activation>,
}

const NORM_TOL: f64 = 1e-8;

impl NormProfile {
    /// Profile with every norm equal to one and `ρ_h = 1`.
    pub fn unit(d_x: usize, d_h: usize, d_y: usize) -> Self {
        Self {
            d_x,
            d_h,
            d_y,
            rho_h: 1.0,
            b_x: 1.0,
            b_row: 1.0,
            b_u: 1.0,
            b_v: 1.0,
            b_w: 1.0,
            m_u: 1.0,
            m_v: 1.0,
            m_w: 1.0,
            b_x1: 1.0,
            b_u1: 1.0,
            b_v1: 1.0,
            b_w1: 1.0,
            entry_bound: None,
            activation: None,
        }
    }

    pub fn d(&self) -> usize {
        self.d_x.max(self.d_h).max(self.d_y)
    }

    pub fn d_prime(&self) -> f64 {
        ((self.d_x * self.d_h + self.d_h * self.d_h + self.d_h * self.d_y) as f64).sqrt()
    }

    fn named_values(&self) -> [(&'static str, f64); 13] {
        [
            ("rho_h", self.rho_h),
            ("B_x", self.b_x),
            ("B_row", self.b_row),
            ("B_U", self.b_u),
            ("B_V", self.b_v),
            ("B_W", self.b_w),
            ("M_U", self.m_u),
            ("M_V", self.m_v),
            ("M_W", self.m_w),
            ("B_x1", self.b_x1),
            ("B_U1", self.b_u1),
            ("B_V1", self.b_v1),
            ("B_W1", self.b_w1),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_x == 0 || self.d_h == 0 || self.d_y == 0 {
            return invalid("profile dimensions must be positive");
        }
        for (name, v) in self.named_values() {
            if !(v >= 0.0 && v.is_finite()) {
                return invalid(format!("{name} must be finite and nonnegative, got {v}"));
            }
        }
        if let Some(b) = self.entry_bound {
            if !(b >= 0.0 && b.is_finite()) {
                return invalid(format!("b must be finite and nonnegative, got {b}"));
            }
        }
        for (m, b, name) in [
            (self.m_u, self.b_u, "U"),
            (self.m_v, self.b_v, "V"),
            (self.m_w, self.b_w, "W"),
        ] {
            if m > b + NORM_TOL * (1.0 + b) {
                return invalid(format!("M_{name} = {m} exceeds B_{name} = {b}"));
            }
        }
        Ok(())
    }

    /// Short SHA-256 digest of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("profile serializes");
        let digest = Sha256::digest(&json);
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Flavor {
    /// Recurrence driven by the Frobenius norm of U.
    #[default]
    Frobenius,
    /// Recurrence driven by the spectral norm of U.
    Spectral,
}

impl std::str::FromStr for Flavor {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "frobenius" => Ok(Flavor::Frobenius),
            "spectral" => Ok(Flavor::Spectral),
            other => invalid(format!("unknown flavor {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecurrenceConstants {
    pub flavor: Flavor,
    pub t: usize,
    pub a: f64,
    pub b_t: f64,
    pub c_t: f64,
    pub g_t: f64,
}

/// `(Σ_{j<t} x^j, Σ_{j<t-1} (j+1) x^j)` by direct accumulation.
pub fn power_sums(x: f64, t: usize) -> (f64, f64) {
    let mut c = 0.0;
    let mut b = 0.0;
    let mut pow = 1.0;
    for j in 0..t {
        c += pow;
        if j + 1 < t {
            b += (j + 1) as f64 * pow;
        }
        pow *= x;
    }
    (c, b)
}

fn check_t(t: usize) -> Result<()> {
    if t == 0 {
        return invalid("sequence length t must be at least 1");
    }
    Ok(())
}

fn check_n(n: usize) -> Result<()> {
    if n == 0 {
        return invalid("sample size n must be at least 1");
    }
    Ok(())
}

fn finite(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Range(format!("{what} overflows 64-bit range")))
    }
}

pub fn recurrence_constants(p: &NormProfile, t: usize, flavor: Flavor) -> Result<RecurrenceConstants> {
    p.validate()?;
    check_t(t)?;
    let u = match flavor {
        Flavor::Frobenius => p.b_u,
        Flavor::Spectral => p.m_u,
    };
    let (c_t, b_t) = power_sums(p.rho_h * u, t);
    let c_t = finite(c_t, "c_t")?;
    let b_t = finite(b_t, "b_t")?;
    let a = p.rho_h * p.b_x;
    let g_t = finite(a * p.b_v * p.b_w * c_t.max(p.rho_h * p.b_u * b_t), "g_t")?;
    Ok(RecurrenceConstants {
        flavor,
        t,
        a,
        b_t,
        c_t,
        g_t,
    })
}

/// Lipschitz constants of the output in V, U and W, in that order.
pub fn lipschitz_constants(p: &NormProfile, t: usize, flavor: Flavor) -> Result<(f64, f64, f64)> {
    let k = recurrence_constants(p, t, flavor)?;
    Ok((
        k.a * p.b_w * k.c_t,
        k.a * p.rho_h * p.b_w * p.b_v * k.b_t,
        k.a * p.b_v * k.c_t,
    ))
}

fn need_b(p: &NormProfile) -> Result<f64> {
    p.entry_bound
        .ok_or_else(|| Error::InvalidArgument("bound needs the activation entry bound b".into()))
}

pub fn g_star(p: &NormProfile, t: usize, n: usize) -> Result<f64> {
    let b = need_b(p)?;
    check_n(n)?;
    let k = recurrence_constants(p, t, Flavor::Spectral)?;
    let arm = (b * ((n * p.d()) as f64).sqrt()).min(p.rho_h * p.b_x * p.b_w * k.c_t);
    finite(p.b_v * arm * (p.rho_h * p.b_u * k.b_t / k.c_t).max(1.0), "g*_t")
}

/// Log covering number bound for a Frobenius ball of radius `lambda` in `d1 × d2` matrices.
pub fn covering_number_matrix(lambda: f64, d1: usize, d2: usize, eps: f64) -> Result<f64> {
    if !(lambda >= 0.0) || !(eps > 0.0) || d1 == 0 || d2 == 0 {
        return invalid("covering_number_matrix needs lambda >= 0, eps > 0 and positive dimensions");
    }
    let dd = (d1 * d2) as f64;
    Ok((lambda * lambda * dd / (eps * eps)).ceil() * (2.0 * dd).ln())
}

pub fn covering_number_class(p: &NormProfile, t: usize, eps: f64, flavor: Flavor) -> Result<f64> {
    if !(eps > 0.0) {
        return invalid("eps must be positive");
    }
    let k = recurrence_constants(p, t, flavor)?;
    let d = p.d() as f64;
    Ok(27.0 * d * d * k.g_t * k.g_t * (2.0 * d * d).ln() / (eps * eps))
}

/// The three un-ceiled log covering terms whose sum the class bound dominates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoveringTerms {
    pub u: f64,
    pub v: f64,
    pub w: f64,
}

impl CoveringTerms {
    pub fn sum(&self) -> f64 {
        self.u + self.v + self.w
    }
}

pub fn covering_terms(p: &NormProfile, t: usize, eps: f64, flavor: Flavor) -> Result<CoveringTerms> {
    if !(eps > 0.0) {
        return invalid("eps must be positive");
    }
    let (l_v, l_u, l_w) = lipschitz_constants(p, t, flavor)?;
    let (dx, dh, dy) = (p.d_x as f64, p.d_h as f64, p.d_y as f64);
    let e2 = eps * eps;
    Ok(CoveringTerms {
        u: 9.0 * dh * dh * (p.b_u * l_u).powi(2) / e2 * (2.0 * dh * dh).ln(),
        v: 9.0 * dh * dy * (p.b_v * l_v).powi(2) / e2 * (2.0 * dy * dh).ln(),
        w: 9.0 * dx * dh * (p.b_w * l_w).powi(2) / e2 * (2.0 * dh * dx).ln(),
    })
}

/// Dudley integral for a class with `log N(ε) ≤ C/ε²` and radius `r`.
pub fn dudley_bound(c: f64, r: f64, n: usize, alpha: f64) -> Result<f64> {
    check_n(n)?;
    if !(c >= 0.0) {
        return invalid(format!("C must be nonnegative, got {c}"));
    }
    let sn = (n as f64).sqrt();
    let upper = 2.0 * r * sn;
    if !(alpha > 0.0 && alpha < upper) {
        return Err(Error::Range(format!("alpha = {alpha} must lie in (0, {upper})")));
    }
    Ok(4.0 * alpha / sn + 12.0 * c.sqrt() / n as f64 * (upper / alpha).ln())
}

/// A bound value together with whether a logarithm was clamped at zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluated {
    pub value: f64,
    pub clamped: bool,
}

fn clamped_ln(x: f64) -> (f64, bool) {
    if x > 1.0 {
        (x.ln(), false)
    } else {
        (0.0, true)
    }
}

/// Rademacher complexity bound of the loss class with the explicit proof constants.
pub fn rademacher_exact(p: &NormProfile, t: usize, n: usize, rho: f64, flavor: Flavor) -> Result<Evaluated> {
    check_n(n)?;
    if !(rho >= 0.0) {
        return invalid(format!("rho must be nonnegative, got {rho}"));
    }
    let k = recurrence_constants(p, t, flavor)?;
    let nf = n as f64;
    let d = p.d() as f64;
    let r = k.a * p.b_v * p.b_w * k.c_t;
    let (log_term, clamped) = clamped_ln(2.0 * r * nf);
    let value = 8.0 * rho / nf + 72.0 * rho * d * k.g_t / nf * (3.0 * (2.0 * d * d).ln()).sqrt() * log_term;
    Ok(Evaluated {
        value: finite(value, "rademacher_exact")?,
        clamped,
    })
}

/// Matrix 1-norm based competitor bound.
pub fn bound1(p: &NormProfile, t: usize, n: usize) -> Result<f64> {
    p.validate()?;
    check_t(t)?;
    check_n(n)?;
    // Σ_{j<t} (j+1) y^j is the second power sum at length t+1
    let (_, lambda) = power_sums(p.rho_h * p.b_u1, t + 1);
    finite(p.b_x1 * p.b_w1 * p.b_v1 * lambda / n as f64, "bound1")
}

/// Spectral/Frobenius competitor bound, written without divisions by `M_V`, `M_W`.
pub fn bound2(p: &NormProfile, t: usize, n: usize) -> Result<f64> {
    p.validate()?;
    check_t(t)?;
    check_n(n)?;
    let tf = t as f64;
    let d = p.d() as f64;
    let growth = (p.rho_h * p.m_u).powi(t as i32 - 1).max(1.0);
    let (mv, mw) = (p.m_v, p.m_w);
    let root = (mv * mv * mw * mw * tf * tf * p.b_u * p.b_u + mv * mv * p.b_w * p.b_w + mw * mw * p.b_v * p.b_v).sqrt();
    finite(
        p.b_row * tf * d * d.ln().sqrt() * growth * root / (n as f64).sqrt(),
        "bound2",
    )
}

/// Competitor bound for bounded activations.
pub fn bound3(p: &NormProfile, t: usize, n: usize) -> Result<f64> {
    let b = need_b(p)?;
    check_n(n)?;
    let k = recurrence_constants(p, t, Flavor::Spectral)?;
    let dp = p.d_prime();
    let s_f = p.b_u + p.b_w + p.b_v;
    let arm = (b * dp.sqrt()).min(p.b_row * p.m_w * k.c_t);
    finite(
        p.b_row * p.m_w * p.m_u * arm * k.c_t * s_f * (dp * dp.ln()).sqrt() / (n as f64).sqrt(),
        "bound3",
    )
}

pub fn bound4(p: &NormProfile, t: usize, n: usize) -> Result<Evaluated> {
    check_n(n)?;
    let k = recurrence_constants(p, t, Flavor::Spectral)?;
    let nf = n as f64;
    let d = p.d() as f64;
    let (log_term, clamped) = clamped_ln(p.rho_h * nf * p.b_x * p.b_v * p.b_w * k.c_t);
    Ok(Evaluated {
        value: finite(k.g_t * d * d.ln().sqrt() * log_term / nf, "bound4")?,
        clamped,
    })
}

pub fn bound4_star(p: &NormProfile, t: usize, n: usize) -> Result<Evaluated> {
    let b = need_b(p)?;
    let gs = g_star(p, t, n)?;
    let k = recurrence_constants(p, t, Flavor::Spectral)?;
    let nf = n as f64;
    let d = p.d() as f64;
    let arm = (b * (nf * d).sqrt()).min(p.rho_h * p.b_x * p.b_w * k.c_t);
    let (log_term, clamped) = clamped_ln(nf * p.b_v * arm);
    Ok(Evaluated {
        value: finite(gs * d * d.ln().sqrt() * log_term / nf, "bound4_star")?,
        clamped,
    })
}

/// `3 C_t √(log(2/δ) / (2n))`.
pub fn stochastic_term(c_t: f64, delta: f64, n: usize) -> Result<f64> {
    check_n(n)?;
    if !(delta > 0.0 && delta < 1.0) {
        return invalid(format!("delta must lie in (0, 1), got {delta}"));
    }
    Ok(3.0 * c_t * ((2.0 / delta).ln() / (2.0 * n as f64)).sqrt())
}

/// Output bound `ρ_h B_x B_V B_W c_t` used when no measured bound is supplied.
pub fn analytic_output_bound(p: &NormProfile, t: usize) -> Result<f64> {
    let k = recurrence_constants(p, t, Flavor::Frobenius)?;
    Ok(k.a * p.b_v * p.b_w * k.c_t)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeneralizationBound {
    pub total: f64,
    pub rademacher: f64,
    pub stochastic: f64,
    pub rho: f64,
    pub c_t: f64,
    pub clamped: bool,
}

/// `R̂ + 2·rademacher_exact + 3 C_t √(log(2/δ)/(2n))`.
#[allow(clippy::too_many_arguments)]
pub fn generalization_bound(
    empirical_risk: f64,
    p: &NormProfile,
    t: usize,
    n: usize,
    delta: f64,
    loss: &LossSpec,
    omega_t: Option<f64>,
    flavor: Flavor,
) -> Result<GeneralizationBound> {
    if !empirical_risk.is_finite() {
        return invalid("empirical risk must be finite");
    }
    let omega = match omega_t {
        Some(w) => Some(w),
        None if loss.natural_bound().is_none() => Some(analytic_output_bound(p, t)?),
        None => None,
    };
    let (rho, c_t) = loss_constants(loss, omega)?;
    let rad = rademacher_exact(p, t, n, rho, flavor)?;
    let stochastic = stochastic_term(c_t, delta, n)?;
    Ok(GeneralizationBound {
        total: empirical_risk + 2.0 * rad.value + stochastic,
        rademacher: rad.value,
        stochastic,
        rho,
        c_t,
        clamped: rad.clamped,
    })
}

fn check_local(c1: f64, alpha: f64) -> Result<()> {
    if !(c1 > 1.0) {
        return invalid(format!("c1 must exceed 1, got {c1}"));
    }
    if !(alpha > 0.0) {
        return invalid(format!("alpha must be positive, got {alpha}"));
    }
    Ok(())
}

/// `η_t = (3√3 c₁/α) d √(log 2d²) g_t`.
pub fn eta(p: &NormProfile, t: usize, c1: f64, alpha: f64, flavor: Flavor) -> Result<f64> {
    check_local(c1, alpha)?;
    let k = recurrence_constants(p, t, flavor)?;
    let d = p.d() as f64;
    finite(
        3.0 * 3f64.sqrt() * c1 / alpha * d * (2.0 * d * d).ln().sqrt() * k.g_t,
        "eta_t",
    )
}

/// Local Rademacher complexity of a Frobenius ball of radius `r`.
#[allow(clippy::too_many_arguments)]
pub fn local_rademacher(
    p: &NormProfile,
    t: usize,
    n: usize,
    r: f64,
    c1: f64,
    alpha: f64,
    flavor: Flavor,
) -> Result<f64> {
    check_n(n)?;
    if !(r >= 0.0) {
        return invalid(format!("radius must be nonnegative, got {r}"));
    }
    Ok(eta(p, t, c1, alpha, flavor)? * r / (n as f64).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimationError {
    pub eta: f64,
    pub theta: f64,
    pub phi_star: f64,
    pub excess_risk_bound: f64,
    pub nu: f64,
    pub vartheta: f64,
    /// `1 − 2e^{−ϑ}/(1 − e^{−3ϑ})`, clamped to `[0, 1)`.
    pub probability: f64,
    /// Natural log of `2e^{−ϑ}/(1 − e^{−3ϑ})`; keeps resolution once the probability saturates.
    pub log_failure_probability: f64,
    pub delta_t: f64,
    /// Whether the supplied `Δ_t` is at most `φ*²`.
    pub delta_t_small: bool,
}

/// Inputs of the estimation-error bound besides the profile.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimationInputs {
    /// Defaults to `0.9/(ρ A_t)`.
    pub theta: Option<f64>,
    pub omega: f64,
    pub rho: f64,
    pub a_t: f64,
    pub c1: f64,
    /// Defaults to `1/√n`.
    pub alpha: Option<f64>,
    pub delta_t: f64,
    pub flavor: Flavor,
}

impl EstimationInputs {
    pub fn new(omega: f64, rho: f64, a_t: f64) -> Self {
        Self {
            theta: None,
            omega,
            rho,
            a_t,
            c1: 2.0,
            alpha: None,
            delta_t: 0.0,
            flavor: Flavor::Frobenius,
        }
    }
}

const BELOW_ONE: f64 = 1.0 - f64::EPSILON / 2.0;

pub fn estimation_error_from_eta(
    eta: f64,
    n: usize,
    theta: f64,
    omega: f64,
    rho: f64,
    a_t: f64,
) -> Result<EstimationError> {
    check_n(n)?;
    if !(eta >= 0.0 && eta.is_finite()) {
        return invalid(format!("eta must be finite and nonnegative, got {eta}"));
    }
    if !(theta > 0.0 && omega > 0.0 && rho > 0.0 && a_t > 0.0) {
        return invalid("theta, omega, rho and A_t must be positive");
    }
    if !(rho * a_t * theta < 1.0) {
        return invalid(format!(
            "precondition rho*A_t*theta < 1 violated ({})",
            rho * a_t * theta
        ));
    }
    let nf = n as f64;
    let phi_star = 48.0 * eta / (nf.sqrt() * theta);
    let excess_risk_bound = rho * theta * phi_star * phi_star;
    let nu = (1.0 / 288.0f64).min(1.0 / (207.0 * theta * omega));
    let vartheta = nf * nu * theta * theta * phi_star * phi_star;
    let failure = 2.0 * (-vartheta).exp() / (1.0 - (-3.0 * vartheta).exp());
    let log_failure_probability = 2f64.ln() - vartheta - (-(-3.0 * vartheta).exp()).ln_1p();
    let probability = if failure.is_nan() {
        0.0
    } else {
        (1.0 - failure).clamp(0.0, BELOW_ONE)
    };
    Ok(EstimationError {
        eta,
        theta,
        phi_star,
        excess_risk_bound,
        nu,
        vartheta,
        probability,
        log_failure_probability,
        delta_t: 0.0,
        delta_t_small: true,
    })
}

pub fn estimation_error(p: &NormProfile, t: usize, n: usize, inputs: &EstimationInputs) -> Result<EstimationError> {
    check_n(n)?;
    let alpha = inputs.alpha.unwrap_or(1.0 / (n as f64).sqrt());
    let theta = inputs.theta.unwrap_or(0.9 / (inputs.rho * inputs.a_t));
    if !(inputs.delta_t >= 0.0) {
        return invalid("delta_t must be nonnegative");
    }
    let e = eta(p, t, inputs.c1, alpha, inputs.flavor)?;
    let mut out = estimation_error_from_eta(e, n, theta, inputs.omega, inputs.rho, inputs.a_t)?;
    out.delta_t = inputs.delta_t;
    out.delta_t_small = inputs.delta_t <= out.phi_star * out.phi_star;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BernsteinConstant {
    pub a_t: f64,
    pub lambda_min: f64,
}

/// Orthonormal basis of the complement of the all-ones vector, as columns.
fn helmert_basis(k: usize) -> Matrix {
    let mut q = Matrix::zeros(k, k - 1);
    let data = q.data_mut();
    for j in 1..k {
        let s = 1.0 / ((j * (j + 1)) as f64).sqrt();
        for i in 0..j {
            data[i * (k - 1) + (j - 1)] = s;
        }
        data[j * (k - 1) + (j - 1)] = -(j as f64) * s;
    }
    q
}

/// Bernstein constant of the cross-entropy loss at softmax output `q`.
///
/// `H = diag(q) − qqᵀ` always annihilates the all-ones vector, so its
/// smallest eigenvalue is taken on the orthogonal complement of that vector.
pub fn bernstein_constant_ce(q: &[f64]) -> Result<BernsteinConstant> {
    let k = q.len();
    if k < 2 {
        return invalid("need at least two classes");
    }
    if q.iter().any(|&x| !(x > 0.0 && x.is_finite())) {
        return invalid("probabilities must be positive");
    }
    let s: f64 = q.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return invalid(format!("probabilities sum to {s}"));
    }
    let mut h = Matrix::zeros(k, k);
    for i in 0..k {
        for j in 0..k {
            h.data_mut()[i * k + j] = if i == j { q[i] } else { 0.0 } - q[i] * q[j];
        }
    }
    let basis = helmert_basis(k);
    let restricted = basis.transpose().matmul(&h)?.matmul(&basis)?;
    // symmetrize away rounding noise
    let rt = restricted.transpose();
    let sym = restricted.add(&rt)?.scale(0.5)?;
    let lambda_min = linalg::symmetric_eigenvalues(&sym)?[0];
    if lambda_min < 1e-12 {
        return Err(Error::Range(format!(
            "degenerate distribution: restricted eigenvalue {lambda_min:e}"
        )));
    }
    Ok(BernsteinConstant {
        a_t: 2.0 / lambda_min,
        lambda_min,
    })
}

/// Which bounds a report evaluates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundSelection {
    pub bound1: bool,
    pub bound2: bool,
    pub bound3: bool,
    pub bound4: bool,
    pub bound4_star: bool,
}

impl BoundSelection {
    pub fn all() -> Self {
        Self {
            bound1: true,
            bound2: true,
            bound3: true,
            bound4: true,
            bound4_star: true,
        }
    }

    /// Parses `all` or a comma list such as `1,2,4,4star`.
    pub fn parse(s: &str) -> Result<Self> {
        if s.trim() == "all" {
            return Ok(Self::all());
        }
        let mut sel = Self {
            bound1: false,
            bound2: false,
            bound3: false,
            bound4: false,
            bound4_star: false,
        };
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part.trim_start_matches("bound") {
                "1" => sel.bound1 = true,
                "2" => sel.bound2 = true,
                "3" => sel.bound3 = true,
                "4" => sel.bound4 = true,
                "4*" | "4star" | "4_star" => sel.bound4_star = true,
                other => return invalid(format!("unknown bound {other:?}")),
            }
        }
        Ok(sel)
    }
}

impl Default for BoundSelection {
    fn default() -> Self {
        Self::all()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundOptions {
    pub delta: f64,
    pub empirical_risk: f64,
    /// Output bound for unbounded losses; the analytic bound is used when absent.
    pub omega: Option<f64>,
    pub flavor: Flavor,
    pub which: BoundSelection,
}

impl Default for BoundOptions {
    fn default() -> Self {
        Self {
            delta: 0.01,
            empirical_risk: 0.0,
            omega: None,
            flavor: Flavor::Frobenius,
            which: BoundSelection::all(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub dataset: String,
    pub t: usize,
    pub n: usize,
    pub d_x: usize,
    pub d_h: usize,
    pub d_y: usize,
    pub activation: String,
    pub loss: String,
    pub bound1: Option<f64>,
    pub bound2: Option<f64>,
    pub bound3: Option<f64>,
    pub bound4: Option<f64>,
    pub bound4_star: Option<f64>,
    pub rademacher_exact: f64,
    pub theorem2_total: f64,
    pub stochastic_term: f64,
    pub empirical_risk: f64,
    pub delta: f64,
    pub rho: f64,
    pub c_t: f64,
    pub omega: Option<f64>,
    pub flavor: Flavor,
    pub profile_hash: String,
    pub flags: Vec<String>,
}

impl BoundReport {
    pub fn compute(
        dataset: &str,
        p: &NormProfile,
        t: usize,
        n: usize,
        loss: &LossSpec,
        opts: &BoundOptions,
    ) -> Result<Self> {
        p.validate()?;
        let mut flags = Vec::new();
        let mut note = |name: &str, e: Evaluated| {
            if e.clamped {
                flags.push(format!("log_clamped:{name}"));
            }
            e.value
        };
        let has_b = p.entry_bound.is_some();
        let bound1 = opts.which.bound1.then(|| bound1(p, t, n)).transpose()?;
        let bound2 = opts.which.bound2.then(|| bound2(p, t, n)).transpose()?;
        let bound3 = (opts.which.bound3 && has_b).then(|| bound3(p, t, n)).transpose()?;
        let b4 = opts.which.bound4.then(|| bound4(p, t, n)).transpose()?;
        let bound4 = b4.map(|e| note("bound4", e));
        let b4s = (opts.which.bound4_star && has_b)
            .then(|| bound4_star(p, t, n))
            .transpose()?;
        let bound4_star = b4s.map(|e| note("bound4_star", e));

        let omega = match opts.omega {
            Some(w) => Some(w),
            None if loss.natural_bound().is_none() => Some(analytic_output_bound(p, t)?),
            None => None,
        };
        let g = generalization_bound(opts.empirical_risk, p, t, n, opts.delta, loss, omega, opts.flavor)?;
        if g.clamped {
            flags.push("log_clamped:rademacher_exact".into());
        }
        let activation = p.activation.map_or_else(
            || if has_b { "bounded" } else { "unbounded" }.to_string(),
            |a| a.name().to_string(),
        );
        Ok(Self {
            dataset: dataset.to_string(),
            t,
            n,
            d_x: p.d_x,
            d_h: p.d_h,
            d_y: p.d_y,
            activation,
            loss: loss.name().to_string(),
            bound1,
            bound2,
            bound3,
            bound4,
            bound4_star,
            rademacher_exact: g.rademacher,
            theorem2_total: g.total,
            stochastic_term: g.stochastic,
            empirical_risk: opts.empirical_risk,
            delta: opts.delta,
            rho: g.rho,
            c_t: g.c_t,
            omega,
            flavor: opts.flavor,
            profile_hash: p.hash(),
            flags,
        })
    }

    /// `100·(Bound_i − Bound4)/Bound4` for bounds 1–3; empty when Bound4 was not selected.
    pub fn improvement_percentages(&self) -> [Option<f64>; 3] {
        let r = self.bound4;
        [self.bound1, self.bound2, self.bound3].map(|b| {
            b.zip(r)
                .and_then(|(b, r)| (r > 0.0).then(|| improvement_percentage(b, r)))
        })
    }
}

pub fn improvement_percentage(bound: f64, reference: f64) -> f64 {
    100.0 * (bound - reference) / reference
}

pub const CSV_COLUMNS: [&str; 16] = [
    "dataset",
    "t",
    "n",
    "d_x",
    "d_h",
    "d_y",
    "activation",
    "loss",
    "bound1",
    "bound2",
    "bound3",
    "bound4",
    "bound4_star",
    "rademacher_exact",
    "theorem2_total",
    "flags",
];

pub const IMP_COLUMNS: [&str; 3] = ["imp_per1", "imp_per2", "imp_per3"];

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Writes one row per report; `imp_per` appends the improvement columns.
pub fn write_csv<W: Write>(reports: &[BoundReport], imp_per: bool, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<&str> = CSV_COLUMNS.to_vec();
    if imp_per {
        header.extend(IMP_COLUMNS);
    }
    w.write_record(&header)?;
    for r in reports {
        let mut row = vec![
            r.dataset.clone(),
            r.t.to_string(),
            r.n.to_string(),
            r.d_x.to_string(),
            r.d_h.to_string(),
            r.d_y.to_string(),
            r.activation.clone(),
            r.loss.clone(),
            opt(r.bound1),
            opt(r.bound2),
            opt(r.bound3),
            opt(r.bound4),
            opt(r.bound4_star),
            r.rademacher_exact.to_string(),
            r.theorem2_total.to_string(),
            r.flags.join(";"),
        ];
        if imp_per {
            row.extend(r.improvement_percentages().map(opt));
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn csv_string(reports: &[BoundReport], imp_per: bool) -> Result<String> {
    let mut buf = Vec::new();
    write_csv(reports, imp_per, &mut buf)?;
    String::from_utf8(buf).map_err(|e| Error::Data(e.to_string()))
}
