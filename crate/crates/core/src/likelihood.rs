//! Conditional log-densities of the observations given the individual parameters, for the
//! exact model and the simple, intermediate and complete emulator-based models, plus a
//! Gauss–Hermite marginal-likelihood oracle for low-dimensional checks.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::emulator::{Emulator, EmulatorBank};
use crate::error::{Error, Result};
use crate::linalg::{
    diag_gaussian_logpdf, iso_gaussian_logpdf, log_sum_exp, mvn_logpdf_factored, LowerFactor,
};
use crate::models::StructuralModel;

/// Population parameters θ = (μ, Ω, σ²).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationParams {
    pub mu: Vec<f64>,
    /// Row-major `d × d` covariance of the random effects.
    pub omega: Vec<Vec<f64>>,
    /// Residual variance σ_ε².
    pub sigma2: f64,
}

impl PopulationParams {
    pub fn new(mu: Vec<f64>, omega: &DMatrix<f64>, sigma2: f64) -> Result<Self> {
        let p = Self { mu, omega: matrix_to_rows(omega), sigma2 };
        p.validate()?;
        Ok(p)
    }

    /// Independent random effects with the given variances.
    pub fn diagonal(mu: Vec<f64>, variances: &[f64], sigma2: f64) -> Result<Self> {
        let omega = DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(variances));
        Self::new(mu, &omega, sigma2)
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn omega_matrix(&self) -> DMatrix<f64> {
        let d = self.dim();
        DMatrix::from_fn(d, d, |i, j| self.omega[i][j])
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if d == 0 {
            return Err(Error::domain("population parameters need d >= 1"));
        }
        if self.omega.len() != d || self.omega.iter().any(|r| r.len() != d) {
            return Err(Error::domain("omega must be d x d"));
        }
        if self.mu.iter().chain(self.omega.iter().flatten()).any(|v| !v.is_finite()) {
            return Err(Error::domain("non-finite population parameter"));
        }
        for i in 0..d {
            for j in 0..i {
                if (self.omega[i][j] - self.omega[j][i]).abs()
                    > 1e-12 * (1.0 + self.omega[i][j].abs())
                {
                    return Err(Error::domain("omega must be symmetric"));
                }
            }
        }
        if !(self.sigma2 > 0.0 && self.sigma2.is_finite()) {
            return Err(Error::domain(format!("sigma2 must be positive, got {}", self.sigma2)));
        }
        LowerFactor::factor(&self.omega_matrix())
            .map_err(|_| Error::domain("omega is not positive definite"))?;
        Ok(())
    }

    /// Flat vector `(μ, vech Ω, σ²)` with Ω in upper-triangular row order.
    pub fn to_vector(&self) -> Vec<f64> {
        let d = self.dim();
        let mut v = self.mu.clone();
        for i in 0..d {
            for j in i..d {
                v.push(self.omega[i][j]);
            }
        }
        v.push(self.sigma2);
        v
    }

    /// Names matching [`Self::to_vector`].
    pub fn parameter_names(d: usize) -> Vec<String> {
        let mut names: Vec<String> = (1..=d).map(|k| format!("mu_{k}")).collect();
        for i in 1..=d {
            for j in i..=d {
                names.push(format!("omega_{i}{j}"));
            }
        }
        names.push("sigma2".into());
        names
    }
}

pub(crate) fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Individual {
    pub id: String,
    pub times: Vec<f64>,
    pub y: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Dataset {
    pub individuals: Vec<Individual>,
}

impl Dataset {
    pub fn new(individuals: Vec<Individual>) -> Result<Self> {
        let d = Self { individuals };
        d.validate()?;
        Ok(d)
    }

    pub fn len(&self) -> usize {
        self.individuals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.individuals.is_empty()
    }

    pub fn n_tot(&self) -> usize {
        self.individuals.iter().map(|i| i.y.len()).sum()
    }

    pub fn validate(&self) -> Result<()> {
        for ind in &self.individuals {
            if ind.y.is_empty() || ind.y.len() != ind.times.len() {
                return Err(Error::domain(format!("individual {} has no usable observations", ind.id)));
            }
            if ind.times.windows(2).any(|w| w[1] <= w[0]) {
                return Err(Error::domain(format!(
                    "times of individual {} are not strictly increasing",
                    ind.id
                )));
            }
            if ind.y.iter().chain(&ind.times).any(|v| !v.is_finite()) {
                return Err(Error::domain(format!("non-finite value for individual {}", ind.id)));
            }
        }
        Ok(())
    }

    /// CSV with header `id,time,y`, rows grouped by individual.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("id,time,y\n");
        for ind in &self.individuals {
            for (t, y) in ind.times.iter().zip(&ind.y) {
                s.push_str(&format!("{},{t:?},{y:?}\n", ind.id));
            }
        }
        s
    }

    /// Parse `id,time,y` rows; individuals keep their order of first appearance.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or_else(|| Error::Parse("empty dataset file".into()))?;
        let cols: Vec<&str> = header.split(',').map(str::trim).collect();
        if cols != ["id", "time", "y"] {
            return Err(Error::Parse(format!("expected header `id,time,y`, got `{header}`")));
        }
        let mut individuals: Vec<Individual> = Vec::new();
        let mut index = std::collections::HashMap::new();
        for (lineno, line) in lines {
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != 3 {
                return Err(Error::Parse(format!("line {}: expected 3 fields", lineno + 1)));
            }
            let num = |s: &str| {
                s.parse::<f64>()
                    .map_err(|e| Error::Parse(format!("line {}: `{s}`: {e}", lineno + 1)))
            };
            let (t, y) = (num(fields[1])?, num(fields[2])?);
            let k = *index.entry(fields[0].to_string()).or_insert_with(|| {
                individuals.push(Individual { id: fields[0].to_string(), times: vec![], y: vec![] });
                individuals.len() - 1
            });
            individuals[k].times.push(t);
            individuals[k].y.push(y);
        }
        Self::new(individuals)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantKind {
    Exact,
    Simple,
    Intermediate,
    Complete,
}

impl VariantKind {
    pub const ALL: [VariantKind; 4] =
        [VariantKind::Exact, VariantKind::Simple, VariantKind::Intermediate, VariantKind::Complete];

    pub fn name(&self) -> &'static str {
        match self {
            VariantKind::Exact => "exact",
            VariantKind::Simple => "simple",
            VariantKind::Intermediate => "intermediate",
            VariantKind::Complete => "complete",
        }
    }

    pub fn uses_emulator(&self) -> bool {
        !matches!(self, VariantKind::Exact)
    }
}

impl std::fmt::Display for VariantKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for VariantKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        VariantKind::ALL
            .into_iter()
            .find(|v| v.name() == s.to_ascii_lowercase())
            .ok_or_else(|| {
                Error::Parse(format!("unknown variant `{s}` (exact, simple, intermediate, complete)"))
            })
    }
}

/// Which regression function the observations are modeled with.
#[derive(Clone, Copy)]
pub enum ModelVariant<'a> {
    Exact(&'a dyn StructuralModel),
    Simple(&'a EmulatorBank),
    Intermediate(&'a EmulatorBank),
    Complete(&'a EmulatorBank),
}

impl<'a> ModelVariant<'a> {
    pub fn kind(&self) -> VariantKind {
        match self {
            ModelVariant::Exact(_) => VariantKind::Exact,
            ModelVariant::Simple(_) => VariantKind::Simple,
            ModelVariant::Intermediate(_) => VariantKind::Intermediate,
            ModelVariant::Complete(_) => VariantKind::Complete,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            ModelVariant::Exact(m) => m.dim(),
            ModelVariant::Simple(b) | ModelVariant::Intermediate(b) | ModelVariant::Complete(b) => {
                b.dim()
            }
        }
    }

    pub fn bank(&self) -> Option<&'a EmulatorBank> {
        match self {
            ModelVariant::Exact(_) => None,
            ModelVariant::Simple(b) | ModelVariant::Intermediate(b) | ModelVariant::Complete(b) => {
                Some(b)
            }
        }
    }

    pub fn with_kind(bank: &'a EmulatorBank, kind: VariantKind) -> Result<Self> {
        match kind {
            VariantKind::Simple => Ok(ModelVariant::Simple(bank)),
            VariantKind::Intermediate => Ok(ModelVariant::Intermediate(bank)),
            VariantKind::Complete => Ok(ModelVariant::Complete(bank)),
            VariantKind::Exact => Err(Error::domain("the exact variant needs a structural model")),
        }
    }
}

/// A variant bound to a dataset, with observation times resolved to emulator indices.
#[derive(Clone)]
pub struct Evaluator<'a> {
    variant: ModelVariant<'a>,
    data: &'a Dataset,
    indices: Vec<Vec<usize>>,
}

/// Observations of one emulator time across individuals: `(individual, position)` pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeBlock {
    pub time_index: usize,
    pub members: Vec<(usize, usize)>,
}

impl<'a> Evaluator<'a> {
    pub fn new(variant: ModelVariant<'a>, data: &'a Dataset) -> Result<Self> {
        data.validate()?;
        let indices = match variant.bank() {
            Some(bank) => data
                .individuals
                .iter()
                .map(|ind| bank.indices_for(&ind.times))
                .collect::<Result<_>>()?,
            None => Vec::new(),
        };
        Ok(Self { variant, data, indices })
    }

    pub fn variant(&self) -> ModelVariant<'a> {
        self.variant
    }

    pub fn data(&self) -> &'a Dataset {
        self.data
    }

    pub fn dim(&self) -> usize {
        self.variant.dim()
    }

    /// Predicted mean of individual `i` at `psi` (f for Exact, m_D otherwise).
    pub fn mean(&self, i: usize, psi: &[f64]) -> Result<Vec<f64>> {
        match self.variant {
            ModelVariant::Exact(model) => model.eval(&self.data.individuals[i].times, psi),
            ModelVariant::Simple(b) | ModelVariant::Intermediate(b) | ModelVariant::Complete(b) => {
                Ok(b.predict(&self.indices[i], psi, false)?.0)
            }
        }
    }

    /// Mean and the per-observation emulator variance Λ (zeros for Exact/Simple).
    pub fn mean_and_lambda(&self, i: usize, psi: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        match self.variant {
            ModelVariant::Intermediate(b) | ModelVariant::Complete(b) => {
                let (m, v) = b.predict(&self.indices[i], psi, true)?;
                Ok((m, v.unwrap_or_default()))
            }
            _ => {
                let m = self.mean(i, psi)?;
                let n = m.len();
                Ok((m, vec![0.0; n]))
            }
        }
    }

    /// `log p(y_i | ψ_i; θ)` for the individually separable variants.
    pub fn cond_loglik(&self, i: usize, psi: &[f64], theta: &PopulationParams) -> Result<f64> {
        let y = &self.data.individuals[i].y;
        match self.variant {
            ModelVariant::Exact(_) | ModelVariant::Simple(_) => {
                let m = self.mean(i, psi)?;
                Ok(iso_gaussian_logpdf(&residual(y, &m), theta.sigma2))
            }
            ModelVariant::Intermediate(_) => {
                let (m, lambda) = self.mean_and_lambda(i, psi)?;
                let v: Vec<f64> = lambda.iter().map(|l| theta.sigma2 + l).collect();
                Ok(diag_gaussian_logpdf(&residual(y, &m), &v))
            }
            ModelVariant::Complete(_) => Err(Error::domain(
                "the complete variant is not separable; use the joint likelihood",
            )),
        }
    }

    /// Group observations by emulator time (complete variant covariance blocks).
    pub fn time_blocks(&self) -> Vec<TimeBlock> {
        let Some(bank) = self.variant.bank() else { return Vec::new() };
        let mut blocks: Vec<TimeBlock> = (0..bank.times().len())
            .map(|j| TimeBlock { time_index: j, members: Vec::new() })
            .collect();
        for (i, idx) in self.indices.iter().enumerate() {
            for (pos, &j) in idx.iter().enumerate() {
                blocks[j].members.push((i, pos));
            }
        }
        blocks.retain(|b| !b.members.is_empty());
        blocks
    }

    /// Joint log-density of all observations given all ψ under the complete variant.
    pub fn complete_loglik(&self, psi: &[Vec<f64>], theta: &PopulationParams) -> Result<f64> {
        let bank = self
            .variant
            .bank()
            .ok_or_else(|| Error::domain("complete likelihood needs an emulator bank"))?;
        if psi.len() != self.data.len() {
            return Err(Error::domain("one psi vector per individual is required"));
        }
        let mut total = 0.0;
        for block in self.time_blocks() {
            let em = bank.emulator(block.time_index);
            let pts: Vec<&[f64]> = block.members.iter().map(|&(i, _)| psi[i].as_slice()).collect();
            let whitened: Vec<Vec<f64>> = pts.iter().map(|p| em.whitened_kernel_vector(p)).collect();
            let resid: Vec<f64> = block
                .members
                .iter()
                .zip(&pts)
                .map(|(&(i, pos), p)| self.data.individuals[i].y[pos] - em.predict_mean(p))
                .collect();
            let mut cov = block_covariance(em, &pts, &whitened)?;
            for k in 0..cov.nrows() {
                cov[(k, k)] += theta.sigma2;
            }
            let factor = factor_block(&cov)?;
            total += mvn_logpdf_factored(&resid, &factor);
        }
        Ok(total)
    }
}

pub(crate) fn residual(y: &[f64], m: &[f64]) -> Vec<f64> {
    y.iter().zip(m).map(|(a, b)| a - b).collect()
}

/// Emulator covariance `C_D` among several ψ at one time, from their whitened kernel vectors.
pub fn block_covariance(em: &Emulator, pts: &[&[f64]], whitened: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let n = pts.len();
    let mut c = DMatrix::zeros(n, n);
    for a in 0..n {
        let va = &whitened[a];
        let var = em.params().sigma2 * (1.0 - va.iter().map(|x| x * x).sum::<f64>());
        c[(a, a)] = em.clamp_variance(var)?;
        for b in 0..a {
            let v = em.cov_from_whitened(pts[a], pts[b], va, &whitened[b]);
            c[(a, b)] = v;
            c[(b, a)] = v;
        }
    }
    Ok(c)
}

/// Factor `σ² I + C_D`, escalating a diagonal nugget if rounding broke positive definiteness.
pub fn factor_block(cov: &DMatrix<f64>) -> Result<LowerFactor> {
    LowerFactor::factor_with_jitter(cov, 1e-12, 6)
        .map(|(f, _)| f)
        .map_err(|e| Error::NumericalHealth(format!("complete-model covariance: {e}")))
}

pub fn cond_loglik_exact(
    yi: &[f64],
    ti: &[f64],
    psi: &[f64],
    theta: &PopulationParams,
    model: &dyn StructuralModel,
) -> Result<f64> {
    let f = model.eval(ti, psi)?;
    Ok(iso_gaussian_logpdf(&residual(yi, &f), theta.sigma2))
}

pub fn cond_loglik_simple(
    yi: &[f64],
    ti: &[f64],
    psi: &[f64],
    theta: &PopulationParams,
    bank: &EmulatorBank,
) -> Result<f64> {
    let (m, _) = bank.predict(&bank.indices_for(ti)?, psi, false)?;
    Ok(iso_gaussian_logpdf(&residual(yi, &m), theta.sigma2))
}

pub fn cond_loglik_intermediate(
    yi: &[f64],
    ti: &[f64],
    psi: &[f64],
    theta: &PopulationParams,
    bank: &EmulatorBank,
) -> Result<f64> {
    let (m, lambda) = bank.predict(&bank.indices_for(ti)?, psi, true)?;
    let v: Vec<f64> = lambda.unwrap_or_default().iter().map(|l| theta.sigma2 + l).collect();
    Ok(diag_gaussian_logpdf(&residual(yi, &m), &v))
}

pub fn cond_loglik_complete(
    data: &Dataset,
    psi: &[Vec<f64>],
    theta: &PopulationParams,
    bank: &EmulatorBank,
) -> Result<f64> {
    Evaluator::new(ModelVariant::Complete(bank), data)?.complete_loglik(psi, theta)
}

/// Gauss–Hermite nodes and weights for the weight function `e^{-x²}`.
pub fn gauss_hermite(n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if n == 0 {
        return Err(Error::domain("gauss-hermite needs at least one node"));
    }
    let pim4 = std::f64::consts::PI.powf(-0.25);
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let m = n.div_ceil(2);
    let nf = n as f64;
    let mut z = 0.0f64;
    for i in 0..m {
        z = match i {
            0 => (2.0 * nf + 1.0).sqrt() - 1.85575 * (2.0 * nf + 1.0).powf(-1.0 / 6.0),
            1 => z - 1.14 * nf.powf(0.426) / z,
            2 => 1.86 * z - 0.86 * x[0],
            3 => 1.91 * z - 0.91 * x[1],
            _ => 2.0 * z - x[i - 2],
        };
        let mut pp = 0.0;
        let mut converged = false;
        for _ in 0..100 {
            let mut p1 = pim4;
            let mut p2 = 0.0;
            for j in 1..=n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = z * (2.0 / jf).sqrt() * p2 - ((jf - 1.0) / jf).sqrt() * p3;
            }
            pp = (2.0 * nf).sqrt() * p2;
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() <= 1e-14 * z.abs().max(1.0) {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(Error::NumericalHealth(format!("gauss-hermite root {i} did not converge")));
        }
        x[i] = z;
        x[n - 1 - i] = -z;
        w[i] = 2.0 / (pp * pp);
        w[n - 1 - i] = w[i];
    }
    Ok((x, w))
}

/// `Σ_i log ∫ p(y_i | ψ) N(ψ; μ, Ω) dψ` by tensor Gauss–Hermite quadrature (d ≤ 2).
pub fn marginal_loglik_quadrature(
    evaluator: &Evaluator<'_>,
    theta: &PopulationParams,
    nodes: usize,
) -> Result<f64> {
    let d = theta.dim();
    if d > 2 {
        return Err(Error::UnsupportedDimension(format!("quadrature supports d <= 2, got {d}")));
    }
    if evaluator.variant().kind() == VariantKind::Complete {
        return Err(Error::domain("quadrature does not support the complete variant"));
    }
    if nodes < 5 {
        return Err(Error::domain("quadrature needs at least 5 nodes"));
    }
    let (x, w) = gauss_hermite(nodes)?;
    let l = LowerFactor::factor(&theta.omega_matrix())?.to_matrix();
    let norm = std::f64::consts::PI.powf(-(d as f64) / 2.0);
    let mut points: Vec<(Vec<f64>, f64)> = Vec::new();
    let mut idx = vec![0usize; d];
    loop {
        let z: Vec<f64> = idx.iter().map(|&k| std::f64::consts::SQRT_2 * x[k]).collect();
        let psi: Vec<f64> = (0..d)
            .map(|a| theta.mu[a] + (0..=a).map(|b| l[(a, b)] * z[b]).sum::<f64>())
            .collect();
        let weight: f64 = idx.iter().map(|&k| w[k]).product::<f64>() * norm;
        points.push((psi, weight.ln()));
        let mut k = 0;
        loop {
            if k == d {
                break;
            }
            idx[k] += 1;
            if idx[k] < nodes {
                break;
            }
            idx[k] = 0;
            k += 1;
        }
        if k == d {
            break;
        }
    }
    let mut total = 0.0;
    for i in 0..evaluator.data().len() {
        let terms = points
            .iter()
            .map(|(psi, lw)| Ok(lw + evaluator.cond_loglik(i, psi, theta)?))
            .collect::<Result<Vec<f64>>>()?;
        total += log_sum_exp(&terms);
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::{Bounds, Design};
    use crate::emulator::{EmulatorBank, EmulatorOptions, RegressorSpec};
    use crate::linalg::LN_2PI;
    use crate::models::{DecayToy, LinearToy};
    use approx::assert_relative_eq;

    fn theta1(mu: f64, w2: f64, s2: f64) -> PopulationParams {
        PopulationParams::diagonal(vec![mu], &[w2], s2).unwrap()
    }

    fn toy_data(ys: &[&[f64]], times: &[f64]) -> Dataset {
        Dataset::new(
            ys.iter()
                .enumerate()
                .map(|(k, y)| Individual { id: k.to_string(), times: times.to_vec(), y: y.to_vec() })
                .collect(),
        )
        .unwrap()
    }

    fn decay_bank(points: &[f64], times: &[f64]) -> EmulatorBank {
        let b = Bounds::new(vec![-1.0], vec![3.0]).unwrap();
        let d = Design::from_points(b, points.iter().map(|&p| vec![p]).collect(), 0).unwrap();
        let opts = EmulatorOptions { regressors: RegressorSpec::Constant, phi_bounds: (1.0, 1.0), ..Default::default() };
        EmulatorBank::fit(&DecayToy, times, &d, &opts).unwrap()
    }

    #[test]
    fn exact_at_truth() {
        let th = theta1(0.0, 1.0, 0.3);
        let t = [0.5, 1.0, 2.0];
        let y = DecayToy.eval(&t, &[1.3]).unwrap();
        let ll = cond_loglik_exact(&y, &t, &[1.3], &th, &DecayToy).unwrap();
        assert_relative_eq!(ll, -1.5 * (LN_2PI + 0.3f64.ln()), epsilon = 1e-12);
        let one = cond_loglik_exact(&[2.0], &[1.0], &[1.0], &th, &LinearToy).unwrap();
        let direct = -0.5 * (2.0 * std::f64::consts::PI * 0.3).ln() - 0.5 / 0.3;
        assert_relative_eq!(one, direct, epsilon = 1e-12);
    }

    #[test]
    fn design_point_collapses_variants() {
        let times = [0.5, 1.5];
        let bank = decay_bank(&[-0.5, 0.4, 1.1, 2.0, 2.7], &times);
        let th = theta1(1.0, 0.5, 0.2);
        let psi = [1.1];
        let y = [0.9, 0.3];
        let s = cond_loglik_simple(&y, &times, &psi, &th, &bank).unwrap();
        let i = cond_loglik_intermediate(&y, &times, &psi, &th, &bank).unwrap();
        let e = cond_loglik_exact(&y, &times, &psi, &th, &DecayToy).unwrap();
        assert_relative_eq!(s, i, epsilon = 1e-8);
        assert_relative_eq!(s, e, epsilon = 1e-6);
        let data = toy_data(&[&y, &[0.7, 0.2]], &times);
        let c = cond_loglik_complete(&data, &[vec![1.1], vec![2.0]], &th, &bank).unwrap();
        let ev = Evaluator::new(ModelVariant::Simple(&bank), &data).unwrap();
        let sum = ev.cond_loglik(0, &[1.1], &th).unwrap() + ev.cond_loglik(1, &[2.0], &th).unwrap();
        assert_relative_eq!(c, sum, epsilon = 1e-6);
    }

    #[test]
    fn intermediate_two_observation_oracle() {
        let times = [0.5, 1.5];
        let bank = decay_bank(&[-0.5, 0.4, 1.1, 2.0, 2.7], &times);
        let th = theta1(1.0, 0.5, 0.2);
        let psi = [0.77];
        let y = [0.9, 0.3];
        let got = cond_loglik_intermediate(&y, &times, &psi, &th, &bank).unwrap();
        let m: Vec<f64> = (0..2).map(|j| bank.emulator(j).predict_mean(&psi)).collect();
        let v: Vec<f64> = (0..2).map(|j| th.sigma2 + bank.emulator(j).predict_var(&psi).unwrap()).collect();
        let cov = DMatrix::from_row_slice(2, 2, &[v[0], 0.0, 0.0, v[1]]);
        let r = nalgebra::DVector::from_vec(vec![y[0] - m[0], y[1] - m[1]]);
        let q = (r.transpose() * cov.clone().try_inverse().unwrap() * &r)[(0, 0)];
        let want = -0.5 * (2.0 * LN_2PI + cov.determinant().ln() + q);
        assert_relative_eq!(got, want, epsilon = 1e-12);
    }

    #[test]
    fn complete_matches_dense_oracle() {
        let times = [0.5, 1.5];
        let bank = decay_bank(&[-0.5, 0.4, 1.1, 2.0, 2.7], &times);
        let th = theta1(1.0, 0.5, 0.2);
        let data = toy_data(&[&[0.9, 0.3], &[0.5, 0.1]], &times);
        let psi = vec![vec![0.77], vec![1.6]];
        let got = cond_loglik_complete(&data, &psi, &th, &bank).unwrap();
        // Observation order (i0 t0, i0 t1, i1 t0, i1 t1); cross-time entries are zero.
        let obs = [(0, 0), (0, 1), (1, 0), (1, 1)];
        let cov = DMatrix::from_fn(4, 4, |a, b| {
            let (ia, ja) = obs[a];
            let (ib, jb) = obs[b];
            let s = if a == b { th.sigma2 } else { 0.0 };
            if ja != jb {
                return s;
            }
            s + bank.emulator(ja).predict_cov(&psi[ia], &psi[ib]).unwrap()
        });
        let r = nalgebra::DVector::from_iterator(
            4,
            obs.iter().map(|&(i, j)| data.individuals[i].y[j] - bank.emulator(j).predict_mean(&psi[i])),
        );
        let q = (r.transpose() * cov.clone().try_inverse().unwrap() * &r)[(0, 0)];
        let want = -0.5 * (4.0 * LN_2PI + cov.determinant().ln() + q);
        assert_relative_eq!(got, want, epsilon = 1e-10);
    }

    #[test]
    fn quadrature_matches_conjugate_marginal() {
        let data = toy_data(&[&[0.4], &[1.7], &[-0.2]], &[1.0]);
        let th = theta1(0.5, 0.4, 1.0);
        let ev = Evaluator::new(ModelVariant::Exact(&LinearToy), &data).unwrap();
        let q = marginal_loglik_quadrature(&ev, &th, 31).unwrap();
        let v: f64 = 0.4 + 1.0;
        let exact: f64 = [0.4f64, 1.7, -0.2]
            .iter()
            .map(|y| -0.5 * (LN_2PI + v.ln() + (y - 0.5) * (y - 0.5) / v))
            .sum();
        assert_relative_eq!(q, exact, epsilon = 1e-8);
        let q21 = marginal_loglik_quadrature(&ev, &th, 21).unwrap();
        let q41 = marginal_loglik_quadrature(&ev, &th, 41).unwrap();
        assert!((q21 - q41).abs() < 1e-6);
    }

    #[test]
    fn quadrature_in_two_dimensions() {
        // f = ψ_1 + ψ_2 observed once: marginal N(μ_1+μ_2, 1ᵀΩ1 + σ²).
        struct Sum;
        impl StructuralModel for Sum {
            fn dim(&self) -> usize {
                2
            }
            fn eval(&self, t: &[f64], p: &[f64]) -> Result<Vec<f64>> {
                Ok(vec![p[0] + p[1]; t.len()])
            }
        }
        let data = toy_data(&[&[0.3]], &[1.0]);
        let omega = DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.1, 0.3]);
        let th = PopulationParams::new(vec![0.2, -0.4], &omega, 0.25).unwrap();
        let ev = Evaluator::new(ModelVariant::Exact(&Sum), &data).unwrap();
        let q = marginal_loglik_quadrature(&ev, &th, 21).unwrap();
        let v = 0.5 + 0.3 + 0.2 + 0.25;
        let want = -0.5 * (LN_2PI + f64::ln(v) + (0.3f64 + 0.2) * (0.3 + 0.2) / v);
        assert_relative_eq!(q, want, epsilon = 1e-8);
    }

    #[test]
    fn quadrature_rejects_high_dimension() {
        struct Three;
        impl StructuralModel for Three {
            fn dim(&self) -> usize {
                3
            }
            fn eval(&self, t: &[f64], _: &[f64]) -> Result<Vec<f64>> {
                Ok(vec![0.0; t.len()])
            }
        }
        let data = toy_data(&[&[0.3]], &[1.0]);
        let th = PopulationParams::diagonal(vec![0.0; 3], &[1.0; 3], 1.0).unwrap();
        let ev = Evaluator::new(ModelVariant::Exact(&Three), &data).unwrap();
        assert!(matches!(
            marginal_loglik_quadrature(&ev, &th, 11),
            Err(Error::UnsupportedDimension(_))
        ));
    }

    #[test]
    fn gauss_hermite_integrates_polynomials() {
        let (x, w) = gauss_hermite(10).unwrap();
        let sqrt_pi = std::f64::consts::PI.sqrt();
        assert_relative_eq!(w.iter().sum::<f64>(), sqrt_pi, epsilon = 1e-12);
        let m2: f64 = x.iter().zip(&w).map(|(x, w)| w * x * x).sum();
        assert_relative_eq!(m2, sqrt_pi / 2.0, epsilon = 1e-12);
        let m4: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(4)).sum();
        assert_relative_eq!(m4, 0.75 * sqrt_pi, epsilon = 1e-12);
    }

    #[test]
    fn dataset_csv_round_trip() {
        let data = toy_data(&[&[0.9, 0.3], &[0.5, 0.1]], &[0.5, 1.5]);
        let back = Dataset::from_csv(&data.to_csv()).unwrap();
        assert_eq!(back, data);
        assert!(Dataset::from_csv("id,t,y\n").is_err());
        assert!(Dataset::from_csv("id,time,y\n1,2.0,abc\n").is_err());
        assert!(Dataset::from_csv("id,time,y\n1,2.0,1\n1,1.0,1\n").is_err());
    }

    #[test]
    fn permutation_invariance() {
        let times = [0.5, 1.5];
        let bank = decay_bank(&[-0.5, 0.4, 1.1, 2.0, 2.7], &times);
        let th = theta1(1.0, 0.5, 0.2);
        let a = toy_data(&[&[0.9, 0.3], &[0.5, 0.1], &[1.2, 0.4]], &times);
        let mut b = a.clone();
        b.individuals.rotate_left(1);
        let pa = vec![vec![0.8], vec![1.5], vec![2.2]];
        let mut pb = pa.clone();
        pb.rotate_left(1);
        let ca = cond_loglik_complete(&a, &pa, &th, &bank).unwrap();
        let cb = cond_loglik_complete(&b, &pb, &th, &bank).unwrap();
        assert_relative_eq!(ca, cb, epsilon = 1e-10);
    }
}
