//! Dense row-major matrices and the three norms the capacity bounds consume:
//! Frobenius, matrix 1-norm (max column absolute sum) and spectral norm.

use crate::error::{invalid, Error, Result};
use crate::rng;

/// Default convergence tolerance for [`spectral_norm`].
pub const SPECTRAL_TOL: f64 = 1e-10;
/// Default iteration cap for [`spectral_norm`] (per attempt).
pub const SPECTRAL_MAX_ITER: usize = 1000;

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn diag(values: &[f64]) -> Self {
        let n = values.len();
        let mut m = Self::zeros(n, n);
        for (i, v) in values.iter().enumerate() {
            m.data[i * n + i] = *v;
        }
        m
    }

    /// Builds a matrix from row-major data, rejecting bad lengths and non-finite entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Shape(format!("empty matrix {rows}x{cols}")));
        }
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{rows}x{cols} matrix needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("matrix entry {pos}")));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Self::from_vec(r, c, rows.concat())
    }

    /// Entries drawn i.i.d. from N(0, scale^2).
    pub fn random_normal(rng: &mut rng::StreamRng, rows: usize, cols: usize, scale: f64) -> Self {
        let data = rng::normal_vec(rng, rows * cols)
            .into_iter()
            .map(|x| x * scale)
            .collect();
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&x| x == 0.0)
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.cols {
            return Err(Error::Shape(format!(
                "{}x{} matrix times vector of length {}",
                self.rows,
                self.cols,
                v.len()
            )));
        }
        let out = self.matvec_unchecked(v);
        check_finite_slice(&out, "matvec")?;
        Ok(out)
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::Shape(format!(
                "{}x{} times {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let brow = other.row(k);
                let orow = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        check_finite_slice(&out.data, "matmul")?;
        Ok(out)
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn scale(&self, c: f64) -> Result<Matrix> {
        let data: Vec<f64> = self.data.iter().map(|x| x * c).collect();
        check_finite_slice(&data, "scale")?;
        Ok(Matrix { data, ..*self })
    }

    fn zip_with(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!("{:?} vs {:?}", self.shape(), other.shape())));
        }
        let data: Vec<f64> = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        check_finite_slice(&data, "elementwise op")?;
        Ok(Matrix { data, ..*self })
    }

    pub(crate) fn scale_in_place(&mut self, c: f64) {
        self.data.iter_mut().for_each(|x| *x *= c);
    }

    pub(crate) fn matvec_unchecked(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.rows];
        self.matvec_into(v, &mut out);
        out
    }

    /// out = self * v
    pub(crate) fn matvec_into(&self, v: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            *o = dot(self.row(i), v);
        }
    }

    /// out += self^T * v
    pub(crate) fn tmatvec_acc(&self, v: &[f64], out: &mut [f64]) {
        for (i, &vi) in v.iter().enumerate() {
            if vi == 0.0 {
                continue;
            }
            for (o, a) in out.iter_mut().zip(self.row(i)) {
                *o += a * vi;
            }
        }
    }

    /// self += c * u v^T
    pub(crate) fn rank1_acc(&mut self, c: f64, u: &[f64], v: &[f64]) {
        for (i, &ui) in u.iter().enumerate() {
            let s = c * ui;
            if s == 0.0 {
                continue;
            }
            let row = &mut self.data[i * self.cols..(i + 1) * self.cols];
            for (r, &vj) in row.iter_mut().zip(v) {
                *r += s * vj;
            }
        }
    }
}

fn check_finite_slice(data: &[f64], what: &str) -> Result<()> {
    if data.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{what} produced a non-finite entry")))
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

pub fn norm1(v: &[f64]) -> f64 {
    v.iter().map(|x| x.abs()).sum()
}

pub fn frobenius_norm(m: &Matrix) -> f64 {
    norm2(&m.data)
}

/// Maximum over columns of the column absolute sum.
pub fn one_norm(m: &Matrix) -> f64 {
    (0..m.cols)
        .map(|j| (0..m.rows).map(|i| m.get(i, j).abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Largest singular value via power iteration on `m^T m`.
///
/// Starts from a seeded random unit vector and stops when successive
/// estimates `||m v||` differ by less than `tol`. If `max_iter` iterations
/// pass without convergence the iteration restarts once from a fresh vector;
/// a second failure is reported as [`Error::NoConvergence`].
pub fn spectral_norm(m: &Matrix, tol: f64, max_iter: usize, seed: u64) -> Result<f64> {
    if !(tol > 0.0) {
        return invalid(format!("spectral_norm tol must be positive, got {tol}"));
    }
    if max_iter == 0 {
        return invalid("spectral_norm max_iter must be at least 1");
    }
    if m.is_zero() {
        return Ok(0.0);
    }
    let mut last_estimate = 0.0;
    let mut last_gap = f64::INFINITY;
    let mut mv = vec![0.0; m.rows];
    for attempt in 0..2u64 {
        let mut v = rng::unit_vec(&mut rng::stream(seed, &[attempt]), m.cols);
        m.matvec_into(&v, &mut mv);
        let mut prev = norm2(&mv);
        for _ in 0..max_iter {
            let mut w = vec![0.0; m.cols];
            m.tmatvec_acc(&mv, &mut w);
            let wn = norm2(&w);
            if wn == 0.0 {
                // start vector fell in the null space
                break;
            }
            v.iter_mut().zip(&w).for_each(|(vi, wi)| *vi = wi / wn);
            m.matvec_into(&v, &mut mv);
            let sigma = norm2(&mv);
            last_gap = (sigma - prev).abs();
            last_estimate = sigma;
            if last_gap < tol {
                return Ok(sigma);
            }
            prev = sigma;
        }
    }
    Err(Error::NoConvergence {
        iterations: 2 * max_iter,
        estimate: last_estimate,
        gap: last_gap,
    })
}

/// [`spectral_norm`] with the crate defaults and seed 0.
pub fn spectral_norm_default(m: &Matrix) -> Result<f64> {
    spectral_norm(m, SPECTRAL_TOL, SPECTRAL_MAX_ITER, 0)
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, ascending.
pub fn symmetric_eigenvalues(m: &Matrix) -> Result<Vec<f64>> {
    let n = m.rows;
    if m.cols != n {
        return Err(Error::Shape(format!("eigenvalues of {}x{} matrix", m.rows, m.cols)));
    }
    for i in 0..n {
        for j in 0..i {
            let (a, b) = (m.get(i, j), m.get(j, i));
            if (a - b).abs() > 1e-12 * (1.0 + a.abs().max(b.abs())) {
                return invalid("symmetric_eigenvalues: matrix is not symmetric");
            }
        }
    }
    let mut a = m.data.clone();
    let scale = norm2(&a).max(f64::MIN_POSITIVE);
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j] * a[i * n + j])
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut eig: Vec<f64> = (0..n).map(|i| a[i * n + i]).collect();
    eig.sort_by(f64::total_cmp);
    Ok(eig)
}
