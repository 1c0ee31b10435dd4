//! Library values checked against independently computed references.

mod common;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rnncap_core::capacity::{self, Flavor, NormProfile};
use rnncap_core::empirical::{self, estimate_erc, FiniteClass, Perturbation, SignMode, VerifyDims};
use rnncap_core::harness::{synth_dataset, Task};
use rnncap_core::linalg::{self, Matrix};
use rnncap_core::losses::{self, LossSpec};
use rnncap_core::rng;
use rnncap_core::rnn::{self, Activation, Labels, RnnParams, SequenceBatch};

fn to_na(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.data())
}

#[test]
fn spectral_norm_matches_svd() {
    for k in 0..200u64 {
        let rng = &mut rng::stream(11, &[k]);
        let (r, c) = if k == 0 {
            (5, 5)
        } else {
            (rng.random_range(1..=12), rng.random_range(1..=12))
        };
        let m = Matrix::random_normal(rng, r, c, 1.0);
        let want = to_na(&m).singular_values().max();
        let got = linalg::spectral_norm(&m, 1e-12, 20_000, k).unwrap();
        assert!((got - want).abs() <= 1e-8 * want.max(1.0), "{r}x{c}: {got} vs {want}");
    }
}

#[test]
fn softmax_two_classes() {
    let q = losses::softmax(&[1.0, 0.0]);
    let e = std::f64::consts::E;
    assert!((q[0] - 0.73106).abs() < 1e-5 && (q[1] - 0.26894).abs() < 1e-5);
    assert!((q[0] - e / (1.0 + e)).abs() < 1e-15);
}

#[test]
fn bptt_matches_finite_differences() {
    for loss in [LossSpec::CrossEntropy, LossSpec::Hinge, LossSpec::Ramp { gamma: 1.0 }] {
        for (seed, g) in common::gradient_checks(&loss, 20) {
            assert!(g.max_relative_error <= 1e-4, "{loss:?} seed {seed}: {g:?}");
        }
    }
}

#[test]
fn scalar_chain_rule_relu() {
    // single step: y = V relu(W x), cross-entropy on two classes
    let (w, x) = (0.8, 0.5);
    let v = [0.3, -0.4];
    let p = RnnParams::new(
        Matrix::from_vec(1, 1, vec![0.9]).unwrap(),
        Matrix::from_vec(1, 1, vec![w]).unwrap(),
        Matrix::from_vec(2, 1, v.to_vec()).unwrap(),
        Activation::Relu,
    )
    .unwrap();
    let batch = SequenceBatch::new(vec![vec![vec![x]]], Labels::Terminal(vec![1]), 1.0).unwrap();
    let g = rnn::bptt_gradient(&p, &batch, &LossSpec::CrossEntropy).unwrap();
    let h = w * x;
    let f = [v[0] * h, v[1] * h];
    let e0 = f[0].exp();
    let e1 = f[1].exp();
    let dl = [e0 / (e0 + e1), e1 / (e0 + e1) - 1.0];
    assert!((g.dv.data()[0] - dl[0] * h).abs() < 1e-15);
    assert!((g.dv.data()[1] - dl[1] * h).abs() < 1e-15);
    let dh = dl[0] * v[0] + dl[1] * v[1];
    assert!((g.dw.data()[0] - dh * x).abs() < 1e-15);
}

#[test]
fn recurrence_sums_match_closed_forms() {
    for k in 0..500u64 {
        let rng = &mut rng::stream(12, &[k]);
        let x: f64 = rng.random_range(0.0..1.8);
        if (x - 1.0).abs() < 1e-3 {
            continue;
        }
        let t = rng.random_range(1..=40);
        let (c, b) = capacity::power_sums(x, t);
        let c_closed = (x.powi(t as i32) - 1.0) / (x - 1.0);
        let b_closed = (t as f64 * x.powi(t as i32 - 1) - c_closed) / (x - 1.0);
        assert!(
            (c - c_closed).abs() <= 1e-10 * c_closed.abs().max(1.0),
            "c: x={x} t={t}"
        );
        assert!(
            (b - b_closed).abs() <= 1e-10 * b_closed.abs().max(1.0),
            "b: x={x} t={t}"
        );
    }
}

#[test]
fn dudley_matches_quadrature() {
    // the worked instance
    let c: f64 = 1.0;
    let q = 4.0 * 0.1 / 10.0 + 12.0 / 100.0 * common::integrate(&|e| c.sqrt() / e, 0.1, 20.0, 1e-12);
    assert!((capacity::dudley_bound(1.0, 1.0, 100, 0.1).unwrap() - q).abs() < 1e-9);
    assert!((q - 0.67580).abs() < 1e-5);
    for k in 0..50u64 {
        let rng = &mut rng::stream(13, &[k]);
        let c = rng.random_range(0.0..100.0);
        let r = rng.random_range(0.1..10.0);
        let n = rng.random_range(1..10_000usize);
        let upper = 2.0 * r * (n as f64).sqrt();
        let alpha = upper * rng.random_range(0.001..0.9);
        let sn = (n as f64).sqrt();
        let quad =
            4.0 * alpha / sn + 12.0 / n as f64 * common::integrate(&|e| (c / (e * e)).sqrt(), alpha, upper, 1e-12);
        let closed = capacity::dudley_bound(c, r, n, alpha).unwrap();
        assert!((closed - quad).abs() <= 1e-3 * quad, "{closed} vs {quad}");
    }
}

#[test]
fn g_star_below_g_prime() {
    for p in common::profiles(14, 1000, true) {
        let n = 1 + (p.d_x * 997) % 5000;
        let t = 1 + p.d_h % 12;
        let gs = capacity::g_star(&p, t, n).unwrap();
        let gp = capacity::recurrence_constants(&p, t, Flavor::Spectral).unwrap().g_t;
        assert!(gs <= gp * (1.0 + 1e-12), "{gs} > {gp}");
    }
}

#[test]
fn class_covering_dominates_chain_terms() {
    for (k, p) in common::profiles(15, 100, false).iter().enumerate() {
        let t = 1 + k % 10;
        for flavor in [Flavor::Frobenius, Flavor::Spectral] {
            let eps = 0.1 + k as f64 / 50.0;
            let class = capacity::covering_number_class(p, t, eps, flavor).unwrap();
            let terms = capacity::covering_terms(p, t, eps, flavor).unwrap();
            assert!(terms.sum() <= class * (1.0 + 1e-12), "{} > {class}", terms.sum());
        }
    }
}

/// Smallest n at which the log factor of the exact complexity is past its peak.
fn log_regime_start(p: &NormProfile, t: usize) -> usize {
    let k = capacity::recurrence_constants(p, t, Flavor::Frobenius).unwrap();
    let r = k.a * p.b_v * p.b_w * k.c_t;
    (std::f64::consts::E / (2.0 * r)).ceil().max(2.0) as usize
}

#[test]
fn rademacher_exact_decreases_with_n() {
    let mut compared = 0;
    for p in common::profiles(16, 200, false) {
        let start = log_regime_start(&p, 4);
        for n in [2usize, 5, 17, 100, 1000].into_iter().filter(|&n| n >= start) {
            compared += 1;
            let a = capacity::rademacher_exact(&p, 4, n, 1.0, Flavor::Frobenius).unwrap();
            let b = capacity::rademacher_exact(&p, 4, 2 * n, 1.0, Flavor::Frobenius).unwrap();
            assert!(b.value < a.value, "n={n}: {} !< {}", b.value, a.value);
        }
    }
    assert!(compared > 500);
}

#[test]
fn clamped_log_breaks_monotonicity_below_regime() {
    // tiny radii: the log is clamped at small n, then turns positive
    let mut p = NormProfile::unit(2, 2, 2);
    p.b_v = 0.2;
    p.m_v = 0.2;
    let small = capacity::rademacher_exact(&p, 1, 2, 1.0, Flavor::Frobenius).unwrap();
    let large = capacity::rademacher_exact(&p, 1, 4, 1.0, Flavor::Frobenius).unwrap();
    assert!(small.clamped && !large.clamped);
    assert!(large.value > small.value);
}

#[test]
fn generalization_bound_decreases_with_n() {
    let loss = LossSpec::ramp(1.0).unwrap();
    for p in common::profiles(17, 100, false) {
        let start = log_regime_start(&p, 5).max(8);
        let mut prev = f64::INFINITY;
        for n in (3..20).map(|e| 1usize << e).filter(|&n| n >= start) {
            let g = capacity::generalization_bound(0.1, &p, 5, n, 0.01, &loss, None, Flavor::Frobenius).unwrap();
            assert!(g.total < prev);
            prev = g.total;
        }
    }
}

fn restricted_min_eigen_oracle(q: &[f64]) -> f64 {
    let k = q.len();
    let h = DMatrix::from_fn(k, k, |i, j| if i == j { q[i] } else { 0.0 } - q[i] * q[j]);
    let eig = SymmetricEigen::new(h);
    let ones = nalgebra::DVector::from_element(k, 1.0 / (k as f64).sqrt());
    // drop the eigenvector aligned with the all-ones direction
    let drop = (0..k)
        .max_by(|&a, &b| {
            let da = eig.eigenvectors.column(a).dot(&ones).abs();
            let db = eig.eigenvectors.column(b).dot(&ones).abs();
            da.total_cmp(&db)
        })
        .unwrap();
    (0..k)
        .filter(|&i| i != drop)
        .map(|i| eig.eigenvalues[i])
        .fold(f64::INFINITY, f64::min)
}

#[test]
fn bernstein_constant_matches_eigensolver() {
    let b = capacity::bernstein_constant_ce(&[1.0 / 3.0; 3]).unwrap();
    assert!((b.lambda_min - restricted_min_eigen_oracle(&[1.0 / 3.0; 3])).abs() < 1e-12);
    assert!((b.a_t - 6.0).abs() < 1e-10);
    let skew = [0.999, 0.001];
    let b = capacity::bernstein_constant_ce(&skew).unwrap();
    assert!((b.lambda_min - restricted_min_eigen_oracle(&skew)).abs() < 1e-12);
    assert!((b.lambda_min - 2.0 * 0.999 * 0.001).abs() < 1e-12);
    for k in 0..100u64 {
        let rng = &mut rng::stream(18, &[k]);
        let classes = rng.random_range(2..=8);
        let raw: Vec<f64> = (0..classes).map(|_| rng.random_range(0.05..1.0)).collect();
        let s: f64 = raw.iter().sum();
        let q: Vec<f64> = raw.iter().map(|x| x / s).collect();
        let b = capacity::bernstein_constant_ce(&q).unwrap();
        let want = restricted_min_eigen_oracle(&q);
        assert!(
            (b.lambda_min - want).abs() < 1e-10 * want.max(1e-3),
            "{} vs {want}",
            b.lambda_min
        );
    }
}

#[test]
fn estimation_error_scalar_evaluation() {
    let e = capacity::estimation_error_from_eta(1.0, 2304, 1.0, 1.0, 0.5, 1.0).unwrap();
    let vartheta: f64 = 2304.0 * (1.0 / 288.0) * 1.0 * 1.0;
    let prob = 1.0 - 2.0 * (-vartheta).exp() / (1.0 - (-3.0 * vartheta).exp());
    assert!((e.vartheta - vartheta).abs() < 1e-12);
    assert!((e.probability - prob).abs() < 1e-12);
    assert!((e.probability - 0.99933).abs() < 1e-5);
}

#[test]
fn label_balance() {
    // parity over two classes and majority over two classes with odd t are fair coins
    for (task, t, d_x) in [(Task::SyntheticParity, 4, 3), (Task::SyntheticMajority, 5, 2)] {
        let b = synth_dataset(task, 10_000, t, d_x, 2, 21).unwrap();
        let ones = b.terminal_labels().iter().filter(|&&z| z == 1).count() as f64;
        let sigma = (10_000.0f64 * 0.25).sqrt();
        assert!((ones - 5000.0).abs() <= 3.0 * sigma, "{task:?}: {ones}");
    }
}

#[test]
fn only_v_perturbation_bound() {
    let r = empirical::verify_output_lipschitz(200, VerifyDims::default(), Perturbation::OnlyV, Flavor::Frobenius, 5)
        .unwrap();
    assert_eq!(r.violations, 0);
    assert!(r.max_slack_ratio <= 1.0);
}

#[test]
fn sampled_erc_matches_enumeration() {
    for k in 0..10u64 {
        let rng = &mut rng::stream(19, &[k]);
        let n = rng.random_range(2..=10);
        let members = rng.random_range(1..=5);
        let values: Vec<Vec<f64>> = (0..members)
            .map(|_| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let class = FiniteClass::new(values.clone()).unwrap();
        let sampled = estimate_erc(&class, SignMode::Sampled { draws: 400 }, k).unwrap();
        // brute force, independent of the library's enumeration
        let mut total = 0.0;
        for mask in 0..(1u32 << n) {
            let s: Vec<f64> = (0..n).map(|i| if mask >> i & 1 == 1 { 1.0 } else { -1.0 }).collect();
            total += values
                .iter()
                .map(|v| v.iter().zip(&s).map(|(a, b)| a * b).sum::<f64>() / n as f64)
                .fold(f64::NEG_INFINITY, f64::max);
        }
        let exact = total / (1u32 << n) as f64;
        assert!(
            (sampled.mean - exact).abs() <= 3.0 * sampled.std_error.max(1e-12),
            "{} vs {exact}",
            sampled.mean
        );
        let exh = estimate_erc(&class, SignMode::Exhaustive, 0).unwrap();
        assert!((exh.mean - exact).abs() < 1e-12);
    }
}

#[test]
fn spectral_profile_norms_below_frobenius() {
    let data = empirical::random_batch(3, 2, 4, 3, 1.0, 1).unwrap();
    for k in 0..1000u64 {
        let p = empirical::random_rnn(4, 1 + (k as usize % 8), 3, Activation::Relu, k);
        let prof: NormProfile = empirical::extract_norm_profile(&p, &data).unwrap();
        assert!(prof.m_u <= prof.b_u + 1e-10);
        assert!(prof.m_v <= prof.b_v + 1e-10);
        assert!(prof.m_w <= prof.b_w + 1e-10);
    }
}
