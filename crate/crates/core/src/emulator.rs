//! Kriging emulator of an expensive function.
//!
//! A Gaussian process `F(x) = H(x)ᵀβ + ζ(x)` with `Cov ζ(x), ζ(x') = σ² K_φ(x, x')`
//! is fitted by maximum likelihood to exact evaluations `z` on a design, then
//! conditioned on those evaluations. β and σ² are profiled out in closed form
//! (generalized least squares) so only the kernel range φ is searched
//! numerically. All hyperparameters are then plugged in as known.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::design::{sq_dist, Design};
use crate::error::{Error, Result};
use crate::linalg::{LowerFactor, LN_2PI};
use crate::models::StructuralModel;

pub const DEFAULT_NUGGET: f64 = 1e-10;
pub const DEFAULT_PHI_BOUNDS: (f64, f64) = (1e-3, 1e3);
/// Relative tolerance below which a negative conditional variance is treated as zero.
pub const VARIANCE_CLAMP_TOL: f64 = 1e-8;

const GRID_POINTS: usize = 25;
const GOLDEN_ITERS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelFamily {
    Gaussian,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub phi: f64,
}

impl KernelSpec {
    pub fn eval(&self, x: &[f64], x2: &[f64]) -> f64 {
        match self.family {
            KernelFamily::Gaussian => gaussian_kernel(x, x2, self.phi),
        }
    }

    fn from_sq_dist(&self, sq: f64) -> f64 {
        match self.family {
            KernelFamily::Gaussian => (-self.phi * sq).exp(),
        }
    }
}

/// `exp(-φ |x - x2|²)`.
pub fn gaussian_kernel(x: &[f64], x2: &[f64], phi: f64) -> f64 {
    (-phi * sq_dist(x, x2)).exp()
}

/// Trend basis `H(x)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegressorSpec {
    /// `H(x) = (1)`.
    Constant,
    /// `H(x) = (1, x_1, …, x_d)`.
    Linear,
}

impl RegressorSpec {
    pub fn len(&self, d: usize) -> usize {
        match self {
            RegressorSpec::Constant => 1,
            RegressorSpec::Linear => d + 1,
        }
    }

    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        match self {
            RegressorSpec::Constant => vec![1.0],
            RegressorSpec::Linear => std::iter::once(1.0).chain(x.iter().copied()).collect(),
        }
    }

    fn dot(&self, x: &[f64], beta: &[f64]) -> f64 {
        match self {
            RegressorSpec::Constant => beta[0],
            RegressorSpec::Linear => {
                beta[0] + x.iter().zip(&beta[1..]).map(|(a, b)| a * b).sum::<f64>()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmulatorParams {
    pub beta: Vec<f64>,
    pub sigma2: f64,
    pub phi: f64,
    pub nugget: f64,
}

/// Profiled Gaussian-process log-likelihood at a fixed φ.
#[derive(Debug, Clone, PartialEq)]
pub struct ProfileFit {
    pub loglik: f64,
    pub beta: Vec<f64>,
    pub sigma2: f64,
    /// The trend explains `z` exactly, so σ̂² = 0 and the likelihood is unbounded.
    pub degenerate: bool,
}

struct Profiled {
    fit: ProfileFit,
    factor: LowerFactor,
}

fn correlation_matrix(points: &[Vec<f64>], kernel: &KernelSpec, nugget: f64) -> DMatrix<f64> {
    let n = points.len();
    let mut m = DMatrix::zeros(n, n);
    for i in 0..n {
        m[(i, i)] = 1.0 + nugget;
        for j in 0..i {
            let k = kernel.eval(&points[i], &points[j]);
            m[(i, j)] = k;
            m[(j, i)] = k;
        }
    }
    m
}

fn profile(
    design: &Design,
    z: &[f64],
    regressors: RegressorSpec,
    kernel: &KernelSpec,
    nugget: f64,
) -> Result<Profiled> {
    let n = design.len();
    let d = design.dim();
    let l = regressors.len(d);
    if z.len() != n {
        return Err(Error::domain(format!("{} evaluations for {n} design points", z.len())));
    }
    if n <= l {
        return Err(Error::Fit(format!("need more than {l} design points, got {n}")));
    }
    let sigma = correlation_matrix(&design.points, kernel, nugget);
    let factor = LowerFactor::factor(&sigma).map_err(|_| {
        Error::Factorization(format!(
            "correlation matrix not positive definite at phi = {:e}, nugget = {nugget:e}",
            kernel.phi
        ))
    })?;

    // Whitened regression: A = L⁻¹H, b = L⁻¹z.
    let mut a = DMatrix::zeros(n, l);
    for j in 0..l {
        let col: Vec<f64> = design.points.iter().map(|x| regressors.eval(x)[j]).collect();
        let w = factor.forward_solve(&col);
        a.set_column(j, &DVector::from_vec(w));
    }
    let b = DVector::from_vec(factor.forward_solve(z));
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let rank = svd.singular_values.iter().filter(|&&s| s > 1e-10 * smax).count();
    if smax <= 0.0 || rank < l {
        return Err(Error::Fit(format!("regressor matrix is rank deficient ({rank} < {l})")));
    }
    let beta = svd
        .solve(&b, 1e-12 * smax)
        .map_err(|e| Error::Fit(format!("least squares solve failed: {e}")))?;
    let resid = &b - &a * &beta;
    let quad = resid.norm_squared();
    let mut sigma2 = quad / n as f64;
    let scale = z.iter().map(|v| v * v).sum::<f64>() / n as f64;
    let degenerate = sigma2 <= 1e-24 * scale.max(f64::MIN_POSITIVE);
    let loglik = if degenerate {
        sigma2 = 0.0;
        f64::INFINITY
    } else {
        -0.5 * n as f64 * (LN_2PI + sigma2.ln()) - 0.5 * factor.log_det() - 0.5 * n as f64
    };
    Ok(Profiled {
        fit: ProfileFit { loglik, beta: beta.iter().copied().collect(), sigma2, degenerate },
        factor,
    })
}

/// Profiled log-likelihood of the GP at a fixed range `phi`.
pub fn gp_profile_loglik(
    design: &Design,
    z: &[f64],
    regressors: RegressorSpec,
    phi: f64,
    nugget: f64,
) -> Result<ProfileFit> {
    if !(phi > 0.0) {
        return Err(Error::domain("phi must be positive"));
    }
    let kernel = KernelSpec { family: KernelFamily::Gaussian, phi };
    profile(design, z, regressors, &kernel, nugget).map(|p| p.fit)
}

/// Fitting controls shared by every emulator in a bank.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmulatorOptions {
    pub regressors: RegressorSpec,
    pub family: KernelFamily,
    pub phi_bounds: (f64, f64),
    pub nugget: f64,
}

impl Default for EmulatorOptions {
    fn default() -> Self {
        Self {
            regressors: RegressorSpec::Linear,
            family: KernelFamily::Gaussian,
            phi_bounds: DEFAULT_PHI_BOUNDS,
            nugget: DEFAULT_NUGGET,
        }
    }
}

/// A fitted, conditioned Gaussian process.
#[derive(Debug, Clone)]
pub struct Emulator {
    design: Design,
    z: Vec<f64>,
    regressors: RegressorSpec,
    kernel: KernelSpec,
    params: EmulatorParams,
    degenerate: bool,
    factor: LowerFactor,
    /// `(Σ_DD + nugget I)⁻¹ (z - H_D β̂)`.
    weights: Vec<f64>,
}

/// Fit an emulator, choosing φ by maximizing the profiled likelihood over `opts.phi_bounds`.
///
/// The search is a coarse scan of log φ followed by golden-section refinement
/// inside the bracket around the best scan point.
pub fn fit_emulator(design: &Design, z: &[f64], opts: &EmulatorOptions) -> Result<Emulator> {
    let (lo, hi) = opts.phi_bounds;
    if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
        return Err(Error::domain(format!("invalid phi bounds [{lo}, {hi}]")));
    }
    if !(opts.nugget >= 0.0) {
        return Err(Error::domain("nugget must be nonnegative"));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::Fit("non-finite evaluation in z".into()));
    }
    if let Some((i, j)) = design.find_duplicate(1e-12) {
        return Err(Error::Fit(format!(
            "singular correlation matrix: design points {i} and {j} coincide"
        )));
    }
    let objective = |log_phi: f64| -> f64 {
        let kernel = KernelSpec { family: opts.family, phi: log_phi.exp() };
        match profile(design, z, opts.regressors, &kernel, opts.nugget) {
            Ok(p) if !p.fit.loglik.is_nan() => p.fit.loglik,
            _ => f64::NEG_INFINITY,
        }
    };

    let phi = if lo == hi {
        lo
    } else {
        let (a, b) = (lo.ln(), hi.ln());
        let grid: Vec<f64> = (0..GRID_POINTS)
            .map(|k| a + (b - a) * k as f64 / (GRID_POINTS - 1) as f64)
            .collect();
        let values: Vec<f64> = grid.iter().map(|&g| objective(g)).collect();
        let (best, best_val) = values
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
        if best_val == f64::NEG_INFINITY {
            return Err(Error::Fit(format!(
                "profiled likelihood is non-finite over phi in [{lo:e}, {hi:e}]"
            )));
        }
        if best_val == f64::INFINITY {
            grid[best].exp()
        } else {
            let left = grid[best.saturating_sub(1)];
            let right = grid[(best + 1).min(GRID_POINTS - 1)];
            let (x, fx) = golden_max(&objective, left, right);
            if fx >= best_val { x.exp() } else { grid[best].exp() }
        }
    };
    build_emulator(design.clone(), z.to_vec(), opts, phi, None)
}

fn golden_max(f: &impl Fn(f64) -> f64, mut a: f64, mut b: f64) -> (f64, f64) {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    for _ in 0..GOLDEN_ITERS {
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    if fc >= fd { (c, fc) } else { (d, fd) }
}

fn build_emulator(
    design: Design,
    z: Vec<f64>,
    opts: &EmulatorOptions,
    phi: f64,
    stored: Option<&EmulatorParams>,
) -> Result<Emulator> {
    let kernel = KernelSpec { family: opts.family, phi };
    let (params, degenerate, factor) = match stored {
        None => {
            let p = profile(&design, &z, opts.regressors, &kernel, opts.nugget)?;
            let params = EmulatorParams {
                beta: p.fit.beta,
                sigma2: p.fit.sigma2,
                phi,
                nugget: opts.nugget,
            };
            (params, p.fit.degenerate, p.factor)
        }
        Some(params) => {
            let sigma = correlation_matrix(&design.points, &kernel, params.nugget);
            let factor = LowerFactor::factor(&sigma)?;
            (params.clone(), params.sigma2 == 0.0, factor)
        }
    };
    let resid: Vec<f64> = design
        .points
        .iter()
        .zip(&z)
        .map(|(x, zk)| zk - opts.regressors.dot(x, &params.beta))
        .collect();
    let weights = factor.solve(&resid);
    Ok(Emulator {
        design,
        z,
        regressors: opts.regressors,
        kernel,
        params,
        degenerate,
        factor,
        weights,
    })
}

impl Emulator {
    pub fn design(&self) -> &Design {
        &self.design
    }

    pub fn evaluations(&self) -> &[f64] {
        &self.z
    }

    pub fn params(&self) -> &EmulatorParams {
        &self.params
    }

    pub fn kernel(&self) -> KernelSpec {
        self.kernel
    }

    pub fn regressors(&self) -> RegressorSpec {
        self.regressors
    }

    pub fn is_degenerate(&self) -> bool {
        self.degenerate
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Lower Cholesky factor of `Σ_DD + nugget I`.
    pub fn factor(&self) -> &LowerFactor {
        &self.factor
    }

    pub fn in_domain(&self, x: &[f64]) -> bool {
        self.design.bounds.contains(x)
    }

    /// `Σ_xD`: correlations between `x` and each design point.
    pub fn kernel_vector(&self, x: &[f64]) -> Vec<f64> {
        self.design.points.iter().map(|p| self.kernel.eval(x, p)).collect()
    }

    fn kernel_vector_from_sq(&self, sq: &[f64]) -> Vec<f64> {
        sq.iter().map(|&s| self.kernel.from_sq_dist(s)).collect()
    }

    /// `L⁻¹ Σ_xD`, so that `Σ_xDᵀ Σ_DD⁻¹ Σ_x'D = v(x)·v(x')`.
    pub fn whitened_kernel_vector(&self, x: &[f64]) -> Vec<f64> {
        let mut v = self.kernel_vector(x);
        self.factor.forward_solve_in_place(&mut v);
        v
    }

    /// Conditional mean `m_D(x)`.
    pub fn predict_mean(&self, x: &[f64]) -> f64 {
        let k = self.kernel_vector(x);
        self.mean_from_kernel(x, &k)
    }

    fn mean_from_kernel(&self, x: &[f64], k: &[f64]) -> f64 {
        self.regressors.dot(x, &self.params.beta)
            + k.iter().zip(&self.weights).map(|(a, b)| a * b).sum::<f64>()
    }

    /// Conditional covariance `C_D(x, x2)`.
    pub fn predict_cov(&self, x: &[f64], x2: &[f64]) -> Result<f64> {
        let v1 = self.whitened_kernel_vector(x);
        if x == x2 {
            return self.clamp_variance(self.params.sigma2 * (1.0 - dot(&v1, &v1)));
        }
        let v2 = self.whitened_kernel_vector(x2);
        Ok(self.cov_from_whitened(x, x2, &v1, &v2))
    }

    /// `σ̂² (K(x, x2) - v(x)·v(x2))` from precomputed whitened kernel vectors.
    pub fn cov_from_whitened(&self, x: &[f64], x2: &[f64], v1: &[f64], v2: &[f64]) -> f64 {
        self.params.sigma2 * (self.kernel.eval(x, x2) - dot(v1, v2))
    }

    /// Conditional variance `C_D(x, x)`, clamped at zero within tolerance.
    pub fn predict_var(&self, x: &[f64]) -> Result<f64> {
        self.predict_cov(x, x)
    }

    pub(crate) fn clamp_variance(&self, var: f64) -> Result<f64> {
        if var >= 0.0 {
            Ok(var)
        } else if var >= -VARIANCE_CLAMP_TOL * self.params.sigma2 {
            Ok(0.0)
        } else {
            Err(Error::NumericalHealth(format!(
                "conditional variance {var:e} is negative beyond tolerance (sigma2 = {:e})",
                self.params.sigma2
            )))
        }
    }

    /// Point-wise error functional `P_D(x) = C_D(x, x) / σ̂²`.
    pub fn pointwise_bound(&self, x: &[f64]) -> Result<f64> {
        if self.params.sigma2 <= 0.0 {
            return Err(Error::domain("pointwise bound undefined for a degenerate fit (sigma2 = 0)"));
        }
        Ok((self.predict_var(x)? / self.params.sigma2).max(0.0))
    }

    /// Mean and (optionally) variance from squared distances to the design points.
    fn predict_from_sq(&self, x: &[f64], sq: &[f64], want_var: bool) -> Result<(f64, Option<f64>)> {
        let mut k = self.kernel_vector_from_sq(sq);
        let mean = self.mean_from_kernel(x, &k);
        if !want_var {
            return Ok((mean, None));
        }
        self.factor.forward_solve_in_place(&mut k);
        let var = self.clamp_variance(self.params.sigma2 * (1.0 - dot(&k, &k)))?;
        Ok((mean, Some(var)))
    }

    /// Closed-form leave-one-out residuals with hyperparameters held fixed.
    pub fn leave_one_out_residuals(&self) -> Vec<f64> {
        let inv = self.factor.inverse();
        self.weights.iter().enumerate().map(|(k, w)| w / inv[(k, k)]).collect()
    }

    pub fn leave_one_out_rmse(&self) -> f64 {
        let r = self.leave_one_out_residuals();
        (r.iter().map(|e| e * e).sum::<f64>() / r.len() as f64).sqrt()
    }

    pub fn to_file(&self) -> EmulatorFile {
        EmulatorFile {
            design: self.design.clone(),
            z: self.z.clone(),
            regressors: self.regressors,
            family: self.kernel.family,
            params: self.params.clone(),
        }
    }

    pub fn from_file(file: EmulatorFile) -> Result<Self> {
        let opts = EmulatorOptions {
            regressors: file.regressors,
            family: file.family,
            phi_bounds: (file.params.phi, file.params.phi),
            nugget: file.params.nugget,
        };
        let phi = file.params.phi;
        build_emulator(file.design, file.z, &opts, phi, Some(&file.params))
    }

    /// CSV rows `x1..xd, mean, var, bound` for an audit of predictions.
    pub fn prediction_audit_csv(&self, points: &[Vec<f64>]) -> Result<String> {
        let d = self.design.dim();
        let mut out: Vec<String> = (1..=d).map(|k| format!("x{k}")).collect();
        out.extend(["mean", "var", "bound"].map(String::from));
        let mut text = out.join(",");
        text.push('\n');
        for x in points {
            let mean = self.predict_mean(x);
            let var = self.predict_var(x)?;
            let bound = if self.params.sigma2 > 0.0 { var / self.params.sigma2 } else { 0.0 };
            let mut row: Vec<String> = x.iter().map(|v| format!("{v:?}")).collect();
            row.extend([mean, var, bound].map(|v| format!("{v:?}")));
            text.push_str(&row.join(","));
            text.push('\n');
        }
        Ok(text)
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Self-describing serialized form of an [`Emulator`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmulatorFile {
    pub design: Design,
    pub z: Vec<f64>,
    pub regressors: RegressorSpec,
    pub family: KernelFamily,
    pub params: EmulatorParams,
}

/// Per-time fit diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankTimeReport {
    pub time: f64,
    pub sigma2: f64,
    pub phi: f64,
    pub loo_rmse: f64,
    pub solver_calls: usize,
}

/// One emulator per observation time, all sharing a design over ψ-space.
#[derive(Debug, Clone)]
pub struct EmulatorBank {
    times: Vec<f64>,
    emulators: Vec<Emulator>,
    solver_calls: usize,
}

/// Evaluations `z[t][k] = f(t, x_k)` of a model on a design; one solver call per point.
pub fn evaluate_on_design(
    model: &dyn StructuralModel,
    times: &[f64],
    design: &Design,
) -> Result<Vec<Vec<f64>>> {
    let per_point: Vec<Vec<f64>> = design
        .points
        .par_iter()
        .map(|x| model.eval(times, x))
        .collect::<Result<_>>()?;
    Ok((0..times.len())
        .map(|j| per_point.iter().map(|row| row[j]).collect())
        .collect())
}

impl EmulatorBank {
    /// Evaluate `model` once per design point and fit one emulator per time.
    pub fn fit(
        model: &dyn StructuralModel,
        times: &[f64],
        design: &Design,
        opts: &EmulatorOptions,
    ) -> Result<Self> {
        if design.dim() != model.dim() {
            return Err(Error::domain(format!(
                "design dimension {} does not match model dimension {}",
                design.dim(),
                model.dim()
            )));
        }
        let z = evaluate_on_design(model, times, design)?;
        let mut bank = Self::from_evaluations(times, design, &z, opts)?;
        bank.solver_calls = design.len();
        Ok(bank)
    }

    pub fn from_evaluations(
        times: &[f64],
        design: &Design,
        z: &[Vec<f64>],
        opts: &EmulatorOptions,
    ) -> Result<Self> {
        if times.is_empty() {
            return Err(Error::domain("emulator bank needs at least one time"));
        }
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::domain("bank times must be strictly increasing"));
        }
        if z.len() != times.len() {
            return Err(Error::domain("one evaluation vector per time is required"));
        }
        let emulators = z
            .par_iter()
            .enumerate()
            .map(|(j, zt)| {
                fit_emulator(design, zt, opts)
                    .map_err(|e| Error::Fit(format!("time {}: {e}", times[j])))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { times: times.to_vec(), emulators, solver_calls: 0 })
    }

    pub fn from_emulators(times: Vec<f64>, emulators: Vec<Emulator>) -> Result<Self> {
        if times.len() != emulators.len() || times.is_empty() {
            return Err(Error::domain("one emulator per time is required"));
        }
        let first = emulators[0].design();
        if emulators.iter().any(|e| e.design().points != first.points) {
            return Err(Error::domain("all emulators in a bank must share one design"));
        }
        Ok(Self { times, emulators, solver_calls: 0 })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn emulators(&self) -> &[Emulator] {
        &self.emulators
    }

    pub fn emulator(&self, idx: usize) -> &Emulator {
        &self.emulators[idx]
    }

    pub fn design(&self) -> &Design {
        self.emulators[0].design()
    }

    pub fn dim(&self) -> usize {
        self.design().dim()
    }

    pub fn solver_calls(&self) -> usize {
        self.solver_calls
    }

    pub fn in_domain(&self, psi: &[f64]) -> bool {
        self.design().bounds.contains(psi)
    }

    pub fn time_index(&self, t: f64) -> Option<usize> {
        self.times
            .iter()
            .position(|&s| (s - t).abs() <= 1e-9 * s.abs().max(1.0))
    }

    /// Emulator index for each observation time.
    pub fn indices_for(&self, times: &[f64]) -> Result<Vec<usize>> {
        times
            .iter()
            .map(|&t| {
                self.time_index(t).ok_or_else(|| {
                    Error::domain(format!("observation time {t} is not covered by the emulator bank"))
                })
            })
            .collect()
    }

    /// Means (and variances when `want_var`) at `psi` for the given emulator indices.
    pub fn predict(
        &self,
        indices: &[usize],
        psi: &[f64],
        want_var: bool,
    ) -> Result<(Vec<f64>, Option<Vec<f64>>)> {
        let sq: Vec<f64> = self.design().points.iter().map(|p| sq_dist(psi, p)).collect();
        let mut means = Vec::with_capacity(indices.len());
        let mut vars = want_var.then(|| Vec::with_capacity(indices.len()));
        for &j in indices {
            let (m, v) = self.emulators[j].predict_from_sq(psi, &sq, want_var)?;
            means.push(m);
            if let (Some(vs), Some(v)) = (vars.as_mut(), v) {
                vs.push(v);
            }
        }
        Ok((means, vars))
    }

    pub fn report(&self) -> Vec<BankTimeReport> {
        self.times
            .iter()
            .zip(&self.emulators)
            .map(|(&time, e)| BankTimeReport {
                time,
                sigma2: e.params().sigma2,
                phi: e.params().phi,
                loo_rmse: e.leave_one_out_rmse(),
                solver_calls: self.solver_calls,
            })
            .collect()
    }

    pub fn to_file(&self) -> BankFile {
        BankFile {
            times: self.times.clone(),
            solver_calls: self.solver_calls,
            emulators: self.emulators.iter().map(Emulator::to_file).collect(),
        }
    }

    pub fn from_file(file: BankFile) -> Result<Self> {
        let emulators = file
            .emulators
            .into_iter()
            .map(Emulator::from_file)
            .collect::<Result<Vec<_>>>()?;
        let mut bank = Self::from_emulators(file.times, emulators)?;
        bank.solver_calls = file.solver_calls;
        Ok(bank)
    }
}

/// Serialized [`EmulatorBank`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankFile {
    pub times: Vec<f64>,
    pub solver_calls: usize,
    pub emulators: Vec<EmulatorFile>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::{lhs_design, Bounds};
    use approx::assert_relative_eq;

    fn line_design(xs: &[f64]) -> Design {
        let lo = xs.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        Design::from_points(
            Bounds::new(vec![lo], vec![hi]).unwrap(),
            xs.iter().map(|&x| vec![x]).collect(),
            0,
        )
        .unwrap()
    }

    fn fixed(phi: f64, regressors: RegressorSpec) -> EmulatorOptions {
        EmulatorOptions { regressors, phi_bounds: (phi, phi), ..Default::default() }
    }

    #[test]
    fn kernel_values() {
        assert_eq!(gaussian_kernel(&[0.3, 0.2], &[0.3, 0.2], 4.0), 1.0);
        assert_relative_eq!(gaussian_kernel(&[0.0, 0.0], &[1.0, 1.0], 0.5), (-1.0f64).exp());
        assert_relative_eq!(gaussian_kernel(&[0.0], &[5.0], 1e-12), 1.0, epsilon = 1e-10);
        let a = [0.1, 0.7];
        let b = [0.9, -0.4];
        assert_eq!(gaussian_kernel(&a, &b, 2.0), gaussian_kernel(&b, &a, 2.0));
    }

    #[test]
    fn constant_data_is_degenerate() {
        let d = line_design(&[0.0, 0.4, 1.0]);
        let fit = gp_profile_loglik(&d, &[2.5, 2.5, 2.5], RegressorSpec::Constant, 3.0, 1e-10).unwrap();
        assert!(fit.degenerate);
        assert_eq!(fit.sigma2, 0.0);
        assert_relative_eq!(fit.beta[0], 2.5, epsilon = 1e-12);
    }

    #[test]
    fn too_few_points_for_the_trend() {
        let d = line_design(&[0.0, 1.0]);
        assert!(matches!(
            gp_profile_loglik(&d, &[1.0, 2.0], RegressorSpec::Linear, 1.0, 1e-10),
            Err(Error::Fit(_))
        ));
    }

    #[test]
    fn collinear_design_is_rank_deficient() {
        let b = Bounds::new(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap();
        let pts = vec![vec![0.1, 0.5], vec![0.4, 0.5], vec![0.9, 0.5], vec![0.6, 0.5]];
        let d = Design::from_points(b, pts, 0).unwrap();
        let r = gp_profile_loglik(&d, &[1.0, 2.0, 0.5, 0.3], RegressorSpec::Linear, 1.0, 1e-10);
        assert!(matches!(r, Err(Error::Fit(_))), "{r:?}");
    }

    #[test]
    fn profiled_beta_is_optimal() {
        let d = line_design(&[0.0, 0.3, 0.5, 0.8, 1.0]);
        let z = [0.1, 0.9, 0.4, -0.3, 0.2];
        let fit = gp_profile_loglik(&d, &z, RegressorSpec::Linear, 5.0, 1e-10).unwrap();
        let sigma = correlation_matrix(&d.points, &KernelSpec { family: KernelFamily::Gaussian, phi: 5.0 }, 1e-10);
        let inv = sigma.clone().try_inverse().unwrap();
        let ll = |beta: &[f64]| {
            let r = DVector::from_iterator(5, d.points.iter().zip(&z).map(|(x, zk)| zk - beta[0] - beta[1] * x[0]));
            let q = (r.transpose() * &inv * &r)[(0, 0)];
            -0.5 * (5.0 * (LN_2PI + fit.sigma2.ln()) + sigma.determinant().ln()) - 0.5 * q / fit.sigma2
        };
        assert_relative_eq!(ll(&fit.beta), fit.loglik, epsilon = 1e-8);
        for delta in [[0.01, 0.0], [0.0, -0.02], [-0.1, 0.1]] {
            let b = [fit.beta[0] + delta[0], fit.beta[1] + delta[1]];
            assert!(ll(&b) <= fit.loglik);
        }
    }

    #[test]
    fn collapsed_bounds_fix_phi() {
        let d = line_design(&[0.0, 0.25, 0.5, 0.75, 1.0]);
        let z: Vec<f64> = d.points.iter().map(|x| x[0].sin()).collect();
        let em = fit_emulator(&d, &z, &fixed(2.0, RegressorSpec::Constant)).unwrap();
        assert_eq!(em.params().phi, 2.0);
        let prof = gp_profile_loglik(&d, &z, RegressorSpec::Constant, 2.0, DEFAULT_NUGGET).unwrap();
        assert_eq!(em.params().beta, prof.beta);
        assert_eq!(em.params().sigma2, prof.sigma2);
    }

    #[test]
    fn interpolates_design_points_at_a_well_conditioned_range() {
        let b = Bounds::new(vec![0.0, 0.0], vec![2.0, 1.0]).unwrap();
        let d = lhs_design(&b, 15, 3).unwrap();
        let z: Vec<f64> = d.points.iter().map(|x| (x[0] * 1.3).sin() + x[1] * x[1]).collect();
        let em = fit_emulator(&d, &z, &fixed(10.0, RegressorSpec::Linear)).unwrap();
        for (x, zk) in d.points.iter().zip(&z) {
            assert!((em.predict_mean(x) - zk).abs() <= 1e-8 * (1.0 + zk.abs()));
            assert!(em.predict_var(x).unwrap() <= 1e-8 * em.params().sigma2);
            assert!(em.pointwise_bound(x).unwrap() <= 1e-8);
        }
    }

    #[test]
    fn far_away_prediction_falls_back_to_trend() {
        let d = line_design(&[0.0, 0.5, 1.0]);
        let em = fit_emulator(&d, &[1.0, 3.0, 2.0], &fixed(1.0, RegressorSpec::Constant)).unwrap();
        let far = [50.0];
        assert_relative_eq!(em.predict_mean(&far), em.params().beta[0], epsilon = 1e-12);
        assert_relative_eq!(em.pointwise_bound(&far).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn more_points_fit_sine_better() {
        let grid: Vec<f64> = (0..50).map(|k| std::f64::consts::PI * k as f64 / 49.0).collect();
        let err = |n: usize| {
            let xs: Vec<f64> = (0..n).map(|k| std::f64::consts::PI * k as f64 / (n - 1) as f64).collect();
            let d = line_design(&xs);
            let z: Vec<f64> = xs.iter().map(|x| x.sin()).collect();
            let em = fit_emulator(&d, &z, &EmulatorOptions { regressors: RegressorSpec::Constant, ..Default::default() }).unwrap();
            grid.iter().map(|&x| (em.predict_mean(&[x]) - x.sin()).abs()).sum::<f64>() / grid.len() as f64
        };
        assert!(err(5) < err(3));
    }

    #[test]
    fn covariance_is_symmetric_and_shrinks() {
        let b = Bounds::new(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap();
        let d = lhs_design(&b, 8, 9).unwrap();
        let z: Vec<f64> = d.points.iter().map(|x| x[0] - 2.0 * x[1] * x[0]).collect();
        let em = fit_emulator(&d, &z, &fixed(3.0, RegressorSpec::Linear)).unwrap();
        let x = [0.13, 0.77];
        let y = [0.61, 0.05];
        assert_eq!(em.predict_cov(&x, &y).unwrap(), em.predict_cov(&y, &x).unwrap());
        assert!(em.predict_var(&x).unwrap() <= em.params().sigma2);
    }

    #[test]
    fn degenerate_bound_is_a_domain_error() {
        let d = line_design(&[0.0, 0.5, 1.0]);
        let em = fit_emulator(&d, &[1.0, 1.0, 1.0], &fixed(1.0, RegressorSpec::Constant)).unwrap();
        assert!(em.is_degenerate());
        assert!(matches!(em.pointwise_bound(&[0.2]), Err(Error::Domain(_))));
    }

    #[test]
    fn duplicate_points_fail_the_fit() {
        let b = Bounds::new(vec![0.0], vec![1.0]).unwrap();
        let d = Design::from_points(b, vec![vec![0.1], vec![0.5], vec![0.5], vec![0.9]], 0).unwrap();
        let r = fit_emulator(&d, &[1.0, 2.0, 2.0, 0.0], &EmulatorOptions::default());
        assert!(matches!(r, Err(Error::Fit(_))));
    }

    #[test]
    fn refit_is_bit_identical_and_file_round_trips() {
        let b = Bounds::new(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap();
        let d = lhs_design(&b, 12, 1).unwrap();
        let z: Vec<f64> = d.points.iter().map(|x| (3.0 * x[0]).cos() * x[1]).collect();
        let a = fit_emulator(&d, &z, &EmulatorOptions::default()).unwrap();
        let c = fit_emulator(&d, &z, &EmulatorOptions::default()).unwrap();
        assert_eq!(a.params(), c.params());
        assert_eq!(a.weights(), c.weights());
        let json = serde_json::to_string(&a.to_file()).unwrap();
        let back = Emulator::from_file(serde_json::from_str(&json).unwrap()).unwrap();
        assert_eq!(back.params(), a.params());
        assert_eq!(back.weights(), a.weights());
        let x = [0.42, 0.17];
        assert_eq!(back.predict_mean(&x), a.predict_mean(&x));
    }

    #[test]
    fn loo_residuals_match_explicit_refits() {
        let d = line_design(&[0.0, 0.2, 0.45, 0.7, 0.85, 1.0]);
        let z: Vec<f64> = d.points.iter().map(|x| (4.0 * x[0]).sin()).collect();
        let opts = fixed(4.0, RegressorSpec::Constant);
        let em = fit_emulator(&d, &z, &opts).unwrap();
        let loo = em.leave_one_out_residuals();
        // With β held at its full-data value, dropping point k and predicting it
        // reproduces the closed form.
        for k in 0..d.len() {
            let keep: Vec<usize> = (0..d.len()).filter(|&i| i != k).collect();
            let pts: Vec<Vec<f64>> = keep.iter().map(|&i| d.points[i].clone()).collect();
            let zk: Vec<f64> = keep.iter().map(|&i| z[i]).collect();
            let sub = Design::from_points(d.bounds.clone(), pts, 0).unwrap();
            let stored = EmulatorParams { nugget: DEFAULT_NUGGET, ..em.params().clone() };
            let sub_em = build_emulator(sub, zk, &opts, 4.0, Some(&stored)).unwrap();
            let pred = sub_em.predict_mean(&d.points[k]);
            assert_relative_eq!(z[k] - pred, loo[k], epsilon = 1e-6);
        }
    }

    #[test]
    fn bank_matches_single_emulators() {
        let b = Bounds::new(vec![0.0], vec![2.0]).unwrap();
        let d = lhs_design(&b, 8, 4).unwrap();
        let times = [0.5, 1.0];
        let z: Vec<Vec<f64>> = times
            .iter()
            .map(|t| d.points.iter().map(|x| x[0] * (-(*t) * x[0]).exp()).collect())
            .collect();
        let bank = EmulatorBank::from_evaluations(&times, &d, &z, &EmulatorOptions::default()).unwrap();
        let psi = [0.77];
        let idx = bank.indices_for(&[1.0, 0.5]).unwrap();
        assert_eq!(idx, vec![1, 0]);
        let (m, v) = bank.predict(&idx, &psi, true).unwrap();
        let v = v.unwrap();
        for (k, &j) in idx.iter().enumerate() {
            assert_relative_eq!(m[k], bank.emulator(j).predict_mean(&psi), epsilon = 1e-14);
            assert_relative_eq!(v[k], bank.emulator(j).predict_var(&psi).unwrap(), epsilon = 1e-14);
        }
        assert!(bank.indices_for(&[0.75]).is_err());
        let json = serde_json::to_string(&bank.to_file()).unwrap();
        let back = EmulatorBank::from_file(serde_json::from_str(&json).unwrap()).unwrap();
        assert_eq!(back.predict(&idx, &psi, true).unwrap().0, m);
    }
}
