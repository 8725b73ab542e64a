//! Gaussian posterior of the emulator residual process given the data.
//!
//! With `y = m_D(ψ) + r + ε`, `r ~ N(0, C)` and `ε ~ N(0, σ² I)`, the residual given `y` is
//! Gaussian with covariance `Γ = (I/σ² + C⁻¹)⁻¹` and mean `Γ (y - m_D) / σ²`. Both are
//! evaluated in the equivalent forms `Γ = σ² (I - σ² A⁻¹)`, `mean = C A⁻¹ (y - m_D)` with
//! `A = C + σ² I`, which stay defined when `C` is singular.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::likelihood::{block_covariance, factor_block, residual, Evaluator, PopulationParams};

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualPosterior {
    pub mean: Vec<f64>,
    /// Diagonal of the posterior covariance.
    pub variances: Vec<f64>,
    pub cov_trace: f64,
    /// Full covariance, only for the complete model.
    pub cov: Option<DMatrix<f64>>,
}

/// Per-coordinate posterior with independent residuals of variance `lambda`.
pub fn intermediate_moments(resid: &[f64], lambda: &[f64], sigma2: f64) -> ResidualPosterior {
    let mut mean = Vec::with_capacity(resid.len());
    let mut variances = Vec::with_capacity(resid.len());
    for (&r, &l) in resid.iter().zip(lambda) {
        let (m, g) = if l <= 0.0 {
            (0.0, 0.0)
        } else if l.is_infinite() {
            (r, sigma2)
        } else {
            let s = sigma2 + l;
            (l * r / s, sigma2 * l / s)
        };
        mean.push(m);
        variances.push(g);
    }
    let cov_trace = variances.iter().sum();
    ResidualPosterior { mean, variances, cov_trace, cov: None }
}

/// `Σ_j (r_j - m_j)² + γ_j`, the intermediate-model contribution to s3.
pub fn intermediate_s3(resid: &[f64], lambda: &[f64], sigma2: f64) -> f64 {
    resid
        .iter()
        .zip(lambda)
        .map(|(&r, &l)| {
            if l <= 0.0 {
                r * r
            } else if l.is_infinite() {
                sigma2
            } else {
                let s = sigma2 + l;
                let e = sigma2 * r / s;
                e * e + sigma2 * l / s
            }
        })
        .sum()
}

pub fn residual_posterior_intermediate(
    ev: &Evaluator<'_>,
    i: usize,
    psi: &[f64],
    theta: &PopulationParams,
) -> Result<ResidualPosterior> {
    let (m, lambda) = ev.mean_and_lambda(i, psi)?;
    let r = residual(&ev.data().individuals[i].y, &m);
    Ok(intermediate_moments(&r, &lambda, theta.sigma2))
}

/// Posterior of a correlated residual block with prior covariance `c`.
pub fn complete_block_moments(resid: &[f64], c: &DMatrix<f64>, sigma2: f64) -> Result<ResidualPosterior> {
    let n = resid.len();
    if c.nrows() != n || c.ncols() != n {
        return Err(Error::domain("covariance block does not match the residual length"));
    }
    let mut a = c.clone();
    for k in 0..n {
        a[(k, k)] += sigma2;
    }
    let factor = factor_block(&a)?;
    let a_inv = factor.inverse();
    let u = factor.solve(resid);
    let mean: Vec<f64> = resid.iter().zip(&u).map(|(r, u)| r - sigma2 * u).collect();
    let mut gamma = -(a_inv * (sigma2 * sigma2));
    for k in 0..n {
        gamma[(k, k)] += sigma2;
    }
    let gamma = (&gamma + gamma.transpose()) * 0.5;
    let variances: Vec<f64> = (0..n).map(|k| gamma[(k, k)].max(0.0)).collect();
    let cov_trace = variances.iter().sum();
    Ok(ResidualPosterior { mean, variances, cov_trace, cov: Some(gamma) })
}

/// Joint posterior of all residuals under the complete model, in dataset order.
pub fn residual_posterior_complete(
    ev: &Evaluator<'_>,
    psi: &[Vec<f64>],
    theta: &PopulationParams,
) -> Result<ResidualPosterior> {
    let bank = ev
        .variant()
        .bank()
        .ok_or_else(|| Error::domain("complete posterior needs an emulator bank"))?;
    let data = ev.data();
    let mut offsets = Vec::with_capacity(data.len());
    let mut n_tot = 0;
    for ind in &data.individuals {
        offsets.push(n_tot);
        n_tot += ind.y.len();
    }
    let mut mean = vec![0.0; n_tot];
    let mut cov = DMatrix::zeros(n_tot, n_tot);
    for block in ev.time_blocks() {
        let em = bank.emulator(block.time_index);
        let pts: Vec<&[f64]> = block.members.iter().map(|&(i, _)| psi[i].as_slice()).collect();
        let whitened: Vec<Vec<f64>> = pts.iter().map(|p| em.whitened_kernel_vector(p)).collect();
        let c = block_covariance(em, &pts, &whitened)?;
        let r: Vec<f64> = block
            .members
            .iter()
            .zip(&pts)
            .map(|(&(i, pos), p)| data.individuals[i].y[pos] - em.predict_mean(p))
            .collect();
        let post = complete_block_moments(&r, &c, theta.sigma2)?;
        let g = post.cov.expect("complete block has a covariance");
        let rows: Vec<usize> = block.members.iter().map(|&(i, pos)| offsets[i] + pos).collect();
        for (a, &ra) in rows.iter().enumerate() {
            mean[ra] = post.mean[a];
            for (b, &rb) in rows.iter().enumerate() {
                cov[(ra, rb)] = g[(a, b)];
            }
        }
    }
    let variances: Vec<f64> = (0..n_tot).map(|k| cov[(k, k)]).collect();
    let cov_trace = variances.iter().sum();
    Ok(ResidualPosterior { mean, variances, cov_trace, cov: Some(cov) })
}

/// `‖r - m‖² + tr Γ` for one block, from the factor of `A = C + σ² I`.
pub(crate) fn complete_block_s3(resid: &[f64], factor: &crate::linalg::LowerFactor, sigma2: f64) -> f64 {
    let u = DVector::from_vec(factor.solve(resid));
    let inv = factor.inverse();
    let n = resid.len() as f64;
    sigma2 * sigma2 * u.norm_squared() + sigma2 * (n - sigma2 * inv.trace())
}
