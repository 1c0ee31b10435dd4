//! Python bindings. Structured values cross the boundary as JSON-compatible
//! dicts and lists; the `*_json` functions hold the logic and are plain Rust.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use rnncap_core::capacity::{self, BoundOptions, BoundReport, BoundSelection, Flavor, NormProfile};
use rnncap_core::empirical::{self, Perturbation, VerifyDims};
use rnncap_core::harness::{self, TrainConfig};
use rnncap_core::linalg::{self, Matrix};
use rnncap_core::{Checkpoint, Error, LossSpec};
use serde::Serialize;

fn py_err(e: Error) -> PyErr {
    if e.is_validation() {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

fn json<T: Serialize>(v: &T) -> rnncap_core::Result<String> {
    Ok(serde_json::to_string(v)?)
}

fn loss_spec(loss: &str, gamma: Option<f64>) -> rnncap_core::Result<LossSpec> {
    let gamma = if loss == "ramp" { gamma.or(Some(1.0)) } else { gamma };
    LossSpec::from_name(loss, gamma)
}

fn parse_profile(text: &str) -> rnncap_core::Result<NormProfile> {
    let p: NormProfile = serde_json::from_str(text)?;
    p.validate()?;
    Ok(p)
}

pub fn norm_profile_json(checkpoint: &str, b_x: f64) -> rnncap_core::Result<String> {
    let params = Checkpoint::from_json(checkpoint)?.params()?;
    let b_x1 = (params.d_x() as f64).sqrt() * b_x;
    json(&empirical::norm_profile(&params, b_x, b_x1)?)
}

#[allow(clippy::too_many_arguments)]
pub fn bounds_json(
    profiles: &[(String, String)],
    t: usize,
    n: usize,
    loss: &str,
    gamma: Option<f64>,
    which: &str,
    delta: f64,
    empirical_risk: f64,
    flavor: &str,
) -> rnncap_core::Result<Vec<BoundReport>> {
    let opts = BoundOptions {
        delta,
        empirical_risk,
        omega: None,
        flavor: flavor.parse()?,
        which: BoundSelection::parse(which)?,
    };
    let loss = loss_spec(loss, gamma)?;
    let parsed = profiles
        .iter()
        .map(|(label, text)| Ok((label.clone(), parse_profile(text)?)))
        .collect::<rnncap_core::Result<Vec<_>>>()?;
    harness::compare_profiles(&parsed, t, n, &loss, &opts)
}

pub fn train_json(config: &str) -> rnncap_core::Result<String> {
    let cfg = TrainConfig::from_json(config)?;
    let result = harness::train(&cfg, |_| {})?;
    #[derive(Serialize)]
    struct Out<'a> {
        checkpoint: &'a Checkpoint,
        loss_curve: &'a [f64],
        profile: NormProfile,
    }
    json(&Out {
        checkpoint: result.checkpoints.last().expect("epoch 0 checkpoint"),
        loss_curve: &result.loss_curve,
        profile: empirical::extract_norm_profile(&result.params, &result.data)?,
    })
}

pub fn verify_json(suite: &str, trials: usize, seed: u64) -> rnncap_core::Result<String> {
    let dims = VerifyDims::default();
    let reports = match suite {
        "hidden" => vec![empirical::verify_hidden_norm(trials, dims, seed)?],
        "output" => vec![empirical::verify_output_lipschitz(
            trials,
            dims,
            Perturbation::All,
            Flavor::Frobenius,
            seed,
        )?],
        "loss" => [LossSpec::CrossEntropy, LossSpec::Hinge, LossSpec::Ramp { gamma: 1.0 }]
            .iter()
            .map(|l| empirical::verify_loss_lipschitz(l, trials, 8, seed))
            .collect::<rnncap_core::Result<_>>()?,
        other => return Err(Error::InvalidArgument(format!("unknown suite {other:?}"))),
    };
    json(&reports)
}

/// Converts a dict/list argument to JSON text; strings pass through.
fn as_json_text(obj: &Bound<'_, PyAny>) -> PyResult<String> {
    if let Ok(s) = obj.extract::<String>() {
        return Ok(s);
    }
    obj.py().import("json")?.call_method1("dumps", (obj,))?.extract()
}

fn from_json_text<'py>(py: Python<'py>, text: &str) -> PyResult<Bound<'py, PyAny>> {
    py.import("json")?.call_method1("loads", (text,))
}

/// Largest singular value of a matrix given as a list of rows.
#[pyfunction]
fn spectral_norm(rows: Vec<Vec<f64>>) -> PyResult<f64> {
    let m = Matrix::from_rows(&rows).map_err(py_err)?;
    linalg::spectral_norm_default(&m).map_err(py_err)
}

/// `(c_t, b_t)`: the power sums `Σ_{j<t} x^j` and `Σ_{j<t-1} (j+1) x^j`.
#[pyfunction]
fn power_sums(x: f64, t: usize) -> (f64, f64) {
    capacity::power_sums(x, t)
}

#[pyfunction]
#[pyo3(signature = (checkpoint, b_x = 1.0))]
fn norm_profile<'py>(checkpoint: &Bound<'py, PyAny>, b_x: f64) -> PyResult<Bound<'py, PyAny>> {
    let text = norm_profile_json(&as_json_text(checkpoint)?, b_x).map_err(py_err)?;
    from_json_text(checkpoint.py(), &text)
}

#[pyfunction]
#[pyo3(signature = (profile, t, n, loss = "ramp", gamma = None, which = "all", delta = 0.01, empirical_risk = 0.0, flavor = "frobenius"))]
#[allow(clippy::too_many_arguments)]
fn bounds<'py>(
    profile: &Bound<'py, PyAny>,
    t: usize,
    n: usize,
    loss: &str,
    gamma: Option<f64>,
    which: &str,
    delta: f64,
    empirical_risk: f64,
    flavor: &str,
) -> PyResult<Bound<'py, PyAny>> {
    let profiles = [(String::new(), as_json_text(profile)?)];
    let reports = bounds_json(&profiles, t, n, loss, gamma, which, delta, empirical_risk, flavor).map_err(py_err)?;
    from_json_text(profile.py(), &json(&reports[0]).map_err(py_err)?)
}

/// CSV table, with improvement columns, for `(label, profile)` pairs.
#[pyfunction]
#[pyo3(signature = (profiles, t, n, loss = "ramp", gamma = None, which = "all", flavor = "frobenius"))]
#[allow(clippy::too_many_arguments)]
fn compare(
    profiles: Vec<(String, Bound<'_, PyAny>)>,
    t: usize,
    n: usize,
    loss: &str,
    gamma: Option<f64>,
    which: &str,
    flavor: &str,
) -> PyResult<String> {
    let texts = profiles
        .iter()
        .map(|(label, p)| Ok((label.clone(), as_json_text(p)?)))
        .collect::<PyResult<Vec<_>>>()?;
    let reports = bounds_json(&texts, t, n, loss, gamma, which, 0.01, 0.0, flavor).map_err(py_err)?;
    capacity::csv_string(&reports, true).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (profile, t, n, rho = 1.0, flavor = "frobenius"))]
fn rademacher_exact(profile: &Bound<'_, PyAny>, t: usize, n: usize, rho: f64, flavor: &str) -> PyResult<f64> {
    let p = parse_profile(&as_json_text(profile)?).map_err(py_err)?;
    let flavor: Flavor = flavor.parse().map_err(py_err)?;
    Ok(capacity::rademacher_exact(&p, t, n, rho, flavor).map_err(py_err)?.value)
}

/// Trains from a TrainConfig; returns the final checkpoint, loss curve and norm profile.
#[pyfunction]
fn train<'py>(config: &Bound<'py, PyAny>) -> PyResult<Bound<'py, PyAny>> {
    let text = as_json_text(config)?;
    let py = config.py();
    let out = py.detach(|| train_json(&text)).map_err(py_err)?;
    from_json_text(py, &out)
}

#[pyfunction]
#[pyo3(signature = (suite = "hidden", trials = 1000, seed = 0))]
fn verify<'py>(py: Python<'py>, suite: &str, trials: usize, seed: u64) -> PyResult<Bound<'py, PyAny>> {
    let out = verify_json(suite, trials, seed).map_err(py_err)?;
    from_json_text(py, &out)
}

#[pymodule]
fn rnncap(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(spectral_norm, m)?)?;
    m.add_function(wrap_pyfunction!(power_sums, m)?)?;
    m.add_function(wrap_pyfunction!(norm_profile, m)?)?;
    m.add_function(wrap_pyfunction!(bounds, m)?)?;
    m.add_function(wrap_pyfunction!(compare, m)?)?;
    m.add_function(wrap_pyfunction!(rademacher_exact, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(verify, m)?)?;
    Ok(())
}
