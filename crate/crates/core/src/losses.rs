//! Classification losses on the network output `f` (one score per class).
//!
//! Class labels are 0-based indices into `f`.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossSpec {
    CrossEntropy,
    Hinge,
    Ramp { gamma: f64 },
}

/// Loss value together with a (sub)gradient with respect to `f`.
#[derive(Debug, Clone, PartialEq)]
pub struct LossEval {
    pub value: f64,
    pub grad: Vec<f64>,
}

impl LossSpec {
    pub fn ramp(gamma: f64) -> Result<Self> {
        let spec = LossSpec::Ramp { gamma };
        spec.validate()?;
        Ok(spec)
    }

    /// Parses `cross_entropy`, `hinge` or `ramp` (the latter needs `gamma`).
    pub fn from_name(name: &str, gamma: Option<f64>) -> Result<Self> {
        match name {
            "cross_entropy" | "ce" => Ok(LossSpec::CrossEntropy),
            "hinge" => Ok(LossSpec::Hinge),
            "ramp" => LossSpec::ramp(gamma.unwrap_or(1.0)),
            other => invalid(format!("unknown loss {other:?}")),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LossSpec::CrossEntropy => "cross_entropy",
            LossSpec::Hinge => "hinge",
            LossSpec::Ramp { .. } => "ramp",
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let LossSpec::Ramp { gamma } = *self {
            if !(gamma > 0.0 && gamma.is_finite()) {
                return invalid(format!("ramp gamma must be positive, got {gamma}"));
            }
        }
        Ok(())
    }

    /// Lipschitz constant with respect to `f` in the Euclidean norm.
    pub fn rho(&self) -> f64 {
        match *self {
            LossSpec::CrossEntropy | LossSpec::Hinge => std::f64::consts::SQRT_2,
            LossSpec::Ramp { gamma } => 2.0 / gamma,
        }
    }

    /// Bound on the loss that holds without any assumption on the outputs.
    pub fn natural_bound(&self) -> Option<f64> {
        match self {
            LossSpec::Ramp { .. } => Some(1.0),
            _ => None,
        }
    }

    pub fn eval(&self, f: &[f64], z: usize) -> Result<LossEval> {
        match *self {
            LossSpec::CrossEntropy => cross_entropy(f, z),
            LossSpec::Hinge => hinge(f, z),
            LossSpec::Ramp { gamma } => ramp(f, z, gamma),
        }
    }

    pub fn value(&self, f: &[f64], z: usize) -> Result<f64> {
        Ok(self.eval(f, z)?.value)
    }
}

fn check_label(f: &[f64], z: usize) -> Result<()> {
    if f.len() < 2 {
        return invalid(format!("need at least 2 classes, got {}", f.len()));
    }
    if z >= f.len() {
        return invalid(format!("label {z} out of range for {} classes", f.len()));
    }
    Ok(())
}

pub fn softmax(f: &[f64]) -> Vec<f64> {
    let m = f.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = f.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

fn log_sum_exp(f: &[f64]) -> f64 {
    let m = f.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + f.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn cross_entropy(f: &[f64], z: usize) -> Result<LossEval> {
    check_label(f, z)?;
    let value = log_sum_exp(f) - f[z];
    let mut grad = softmax(f);
    grad[z] -= 1.0;
    Ok(LossEval { value, grad })
}

/// The runner-up index (largest score other than `z`, lowest index on ties).
fn runner_up(q: &[f64], z: usize) -> usize {
    let mut best = usize::MAX;
    for (k, &v) in q.iter().enumerate() {
        if k != z && (best == usize::MAX || v > q[best]) {
            best = k;
        }
    }
    best
}

/// `max_{k != z} q_k - q_z`.
pub fn margin_operator(q: &[f64], z: usize) -> Result<f64> {
    check_label(q, z)?;
    Ok(q[runner_up(q, z)] - q[z])
}

fn margin_direction(f: &[f64], z: usize, scale: f64) -> Vec<f64> {
    let mut g = vec![0.0; f.len()];
    g[runner_up(f, z)] = scale;
    g[z] = -scale;
    g
}

pub fn hinge(f: &[f64], z: usize) -> Result<LossEval> {
    let psi = margin_operator(f, z)?;
    let value = (1.0 + psi).max(0.0);
    let grad = if 1.0 + psi > 0.0 {
        margin_direction(f, z, 1.0)
    } else {
        vec![0.0; f.len()]
    };
    Ok(LossEval { value, grad })
}

/// Ramp loss as a function of the margin alone.
pub fn ramp_of_margin(psi: f64, gamma: f64) -> f64 {
    if psi > 0.0 {
        1.0
    } else if psi >= -gamma {
        1.0 + psi / gamma
    } else {
        0.0
    }
}

pub fn ramp(f: &[f64], z: usize, gamma: f64) -> Result<LossEval> {
    LossSpec::Ramp { gamma }.validate()?;
    let psi = margin_operator(f, z)?;
    let value = ramp_of_margin(psi, gamma);
    // knots take the flat-side derivative
    let grad = if psi > -gamma && psi < 0.0 {
        margin_direction(f, z, 1.0 / gamma)
    } else {
        vec![0.0; f.len()]
    };
    Ok(LossEval { value, grad })
}

/// Returns `(rho, C_t)`. Losses without a natural bound need the output bound `omega_t`.
pub fn loss_constants(spec: &LossSpec, omega_t: Option<f64>) -> Result<(f64, f64)> {
    spec.validate()?;
    let rho = spec.rho();
    if let Some(c) = spec.natural_bound() {
        return Ok((rho, c));
    }
    match omega_t {
        Some(w) if w > 0.0 && w.is_finite() => Ok((rho, 2.0 * rho * w)),
        Some(w) => Err(Error::InvalidArgument(format!(
            "omega_t must be positive and finite, got {w}"
        ))),
        None => invalid(format!("{} loss needs an output bound omega_t", spec.name())),
    }
}
