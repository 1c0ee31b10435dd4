#![allow(dead_code)]

use rand::Rng;
use rnncap_core::capacity::NormProfile;
use rnncap_core::empirical;
use rnncap_core::losses::LossSpec;
use rnncap_core::rng::{self, StreamRng};
use rnncap_core::rnn::{Activation, RnnParams, SequenceBatch};

/// Random valid profile: spectral norms below Frobenius norms, optional entry bound.
pub fn random_profile(rng: &mut StreamRng, with_b: bool) -> NormProfile {
    let mut draw = |hi: f64| rng.random_range(0.0..hi);
    let (b_u, b_v, b_w) = (draw(2.0), draw(3.0), draw(3.0));
    let (fu, fv, fw) = (draw(1.0), draw(1.0), draw(1.0));
    let b_x = draw(2.0) + 0.01;
    let mut p = NormProfile {
        d_x: 0,
        d_h: 0,
        d_y: 0,
        rho_h: 1.0,
        b_x,
        b_row: b_x,
        b_u,
        b_v,
        b_w,
        m_u: b_u * fu,
        m_v: b_v * fv,
        m_w: b_w * fw,
        b_x1: draw(3.0),
        b_u1: draw(2.0),
        b_v1: draw(3.0),
        b_w1: draw(3.0),
        entry_bound: None,
        activation: None,
    };
    p.d_x = rng.random_range(1..=32);
    p.d_h = rng.random_range(1..=32);
    p.d_y = rng.random_range(1..=32);
    if with_b {
        p.entry_bound = Some(rng.random_range(0.1..2.0));
    }
    p
}

pub fn profiles(seed: u64, count: usize, with_b: bool) -> Vec<NormProfile> {
    (0..count)
        .map(|k| random_profile(&mut rng::stream(seed, &[k as u64]), with_b))
        .collect()
}

/// Adaptive Simpson quadrature.
pub fn integrate(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    fn simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64) -> f64 {
        let m = 0.5 * (a + b);
        (b - a) / 6.0 * (f(a) + 4.0 * f(m) + f(b))
    }
    fn rec(f: &dyn Fn(f64) -> f64, a: f64, b: f64, whole: f64, tol: f64, depth: u32) -> f64 {
        let m = 0.5 * (a + b);
        let (l, r) = (simpson(f, a, m), simpson(f, m, b));
        if depth == 0 || (l + r - whole).abs() <= 15.0 * tol {
            l + r + (l + r - whole) / 15.0
        } else {
            rec(f, a, m, l, tol / 2.0, depth - 1) + rec(f, m, b, r, tol / 2.0, depth - 1)
        }
    }
    rec(f, a, b, simpson(f, a, b), tol, 50)
}

/// Small random model and batch for gradient checks (d ≤ 6, t ≤ 5).
pub fn gradient_config(seed: u64, loss: &LossSpec) -> (RnnParams, SequenceBatch) {
    let rng = &mut rng::stream(seed, &[0x77]);
    let d_x = rng.random_range(1..=6);
    let d_h = rng.random_range(1..=6);
    let k = rng.random_range(2..=6);
    let t = rng.random_range(1..=5);
    let n = rng.random_range(1..=4);
    let act = if rng.random::<bool>() {
        Activation::Relu
    } else {
        Activation::Tanh
    };
    let mut p = empirical::random_rnn(d_x, d_h, k, act, seed);
    // keep margin losses in their sloped region most of the time
    if !matches!(loss, LossSpec::CrossEntropy) {
        p.v = p.v.scale(0.5).unwrap();
    }
    let data = empirical::random_batch(n, t, d_x, k, 1.0, seed).unwrap();
    (p, data)
}

/// Runs the gradient check on `count` configurations kept at least `1e-3` away from kinks.
pub fn gradient_checks(loss: &LossSpec, count: usize) -> Vec<(u64, empirical::GradientCheck)> {
    let mut out = Vec::new();
    let mut seed = 0;
    while out.len() < count {
        seed += 1;
        let (p, data) = gradient_config(seed, loss);
        if empirical::kink_margin(&p, &data, loss).unwrap() < 1e-3 {
            continue;
        }
        out.push((seed, empirical::gradient_check(&p, &data, loss, 1e-5).unwrap()));
    }
    out
}
