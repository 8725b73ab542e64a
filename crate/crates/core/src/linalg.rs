//! Dense linear-algebra helpers shared by the emulator and the likelihoods.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Floor applied to variances before taking logs.
pub const VARIANCE_FLOOR: f64 = 1e-300;

/// Lower Cholesky factor stored row-major for allocation-light triangular solves.
#[derive(Debug, Clone)]
pub struct LowerFactor {
    n: usize,
    data: Vec<f64>,
}

impl LowerFactor {
    /// Factor a symmetric positive-definite matrix.
    pub fn factor(matrix: &DMatrix<f64>) -> Result<Self> {
        let n = matrix.nrows();
        if n != matrix.ncols() {
            return Err(Error::domain("cholesky of a non-square matrix"));
        }
        let chol = matrix.clone().cholesky().ok_or_else(|| {
            Error::Factorization(format!("{n}x{n} matrix is not positive definite"))
        })?;
        let l = chol.l();
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                data[i * n + j] = l[(i, j)];
            }
        }
        Ok(Self { n, data })
    }

    /// Factor `matrix + jitter * I`, escalating the jitter by 100x up to `max_tries` times.
    /// Returns the factor and the jitter that was finally used.
    pub fn factor_with_jitter(
        matrix: &DMatrix<f64>,
        initial_jitter: f64,
        max_tries: usize,
    ) -> Result<(Self, f64)> {
        if let Ok(f) = Self::factor(matrix) {
            return Ok((f, 0.0));
        }
        let scale = matrix.diagonal().iter().fold(0.0_f64, |a, &b| a.max(b.abs())).max(1.0);
        let mut jitter = initial_jitter * scale;
        for _ in 0..max_tries {
            let mut m = matrix.clone();
            for i in 0..m.nrows() {
                m[(i, i)] += jitter;
            }
            if let Ok(f) = Self::factor(&m) {
                return Ok((f, jitter));
            }
            jitter *= 100.0;
        }
        Err(Error::Factorization(format!(
            "matrix not positive definite even with jitter {jitter:e}"
        )))
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    /// Solve `L v = b`.
    pub fn forward_solve(&self, b: &[f64]) -> Vec<f64> {
        let mut v = b.to_vec();
        self.forward_solve_in_place(&mut v);
        v
    }

    pub fn forward_solve_in_place(&self, v: &mut [f64]) {
        let n = self.n;
        for i in 0..n {
            let row = &self.data[i * n..i * n + i];
            let s: f64 = row.iter().zip(v[..i].iter()).map(|(a, b)| a * b).sum();
            v[i] = (v[i] - s) / self.data[i * n + i];
        }
    }

    /// Solve `Lᵀ x = v`.
    pub fn backward_solve_in_place(&self, v: &mut [f64]) {
        let n = self.n;
        for i in (0..n).rev() {
            let mut s = v[i];
            for k in i + 1..n {
                s -= self.data[k * n + i] * v[k];
            }
            v[i] = s / self.data[i * n + i];
        }
    }

    /// Solve `(L Lᵀ) x = b`.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut v = self.forward_solve(b);
        self.backward_solve_in_place(&mut v);
        v
    }

    pub fn log_det(&self) -> f64 {
        (0..self.n).map(|i| self.data[i * self.n + i].ln()).sum::<f64>() * 2.0
    }

    /// Full inverse of `L Lᵀ`.
    pub fn inverse(&self) -> DMatrix<f64> {
        let n = self.n;
        let mut inv = DMatrix::zeros(n, n);
        let mut e = vec![0.0; n];
        for j in 0..n {
            e.iter_mut().for_each(|x| *x = 0.0);
            e[j] = 1.0;
            let col = self.solve(&e);
            for i in 0..n {
                inv[(i, j)] = col[i];
            }
        }
        inv
    }

    /// Dense copy of `L`.
    pub fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.n, self.n, |i, j| if j <= i { self.get(i, j) } else { 0.0 })
    }
}

/// Log-density of `N(0, L Lᵀ)` at `resid`.
pub fn mvn_logpdf_factored(resid: &[f64], factor: &LowerFactor) -> f64 {
    let v = factor.forward_solve(resid);
    let quad: f64 = v.iter().map(|x| x * x).sum();
    -0.5 * (resid.len() as f64 * LN_2PI + factor.log_det() + quad)
}

/// Log-density of independent normals with per-coordinate variances.
pub fn diag_gaussian_logpdf(resid: &[f64], variances: &[f64]) -> f64 {
    resid
        .iter()
        .zip(variances)
        .map(|(r, v)| {
            let v = v.max(VARIANCE_FLOOR);
            -0.5 * (LN_2PI + v.ln() + r * r / v)
        })
        .sum()
}

/// Log-density of independent normals sharing one variance.
pub fn iso_gaussian_logpdf(resid: &[f64], variance: f64) -> f64 {
    let v = variance.max(VARIANCE_FLOOR);
    let ss: f64 = resid.iter().map(|r| r * r).sum();
    -0.5 * (resid.len() as f64 * (LN_2PI + v.ln()) + ss / v)
}

/// Project a symmetric matrix onto the SPD cone by flooring its eigenvalues.
/// Returns the projected matrix and whether any eigenvalue was raised.
pub fn floor_eigenvalues(matrix: &DMatrix<f64>, floor: f64) -> (DMatrix<f64>, bool) {
    let sym = (matrix + matrix.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym.clone());
    if eig.eigenvalues.iter().all(|&l| l >= floor) {
        return (sym, false);
    }
    let lambda = DVector::from_iterator(
        eig.eigenvalues.len(),
        eig.eigenvalues.iter().map(|&l| l.max(floor)),
    );
    let q = &eig.eigenvectors;
    let projected = q * DMatrix::from_diagonal(&lambda) * q.transpose();
    ((&projected + projected.transpose()) * 0.5, true)
}

pub fn min_eigenvalue(matrix: &DMatrix<f64>) -> f64 {
    let sym = (matrix + matrix.transpose()) * 0.5;
    SymmetricEigen::new(sym)
        .eigenvalues
        .iter()
        .fold(f64::INFINITY, |a, &b| a.min(b))
}

pub fn log_sum_exp(values: &[f64]) -> f64 {
    let m = values.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    if !m.is_finite() {
        return m;
    }
    m + values.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}
