//! Sufficient statistics, stochastic-approximation update and closed-form M-step.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::likelihood::{matrix_to_rows, PopulationParams};
use crate::linalg::{floor_eigenvalues, LowerFactor, LN_2PI, VARIANCE_FLOOR};

pub const OMEGA_EIGEN_FLOOR: f64 = 1e-10;

/// `s1 = Σ ψ_i`, `s2 = Σ ψ_i ψ_iᵀ`, `s3` = residual sum of squares (variant dependent).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SufficientStats {
    pub s1: Vec<f64>,
    pub s2: Vec<Vec<f64>>,
    pub s3: f64,
}

impl SufficientStats {
    pub fn zeros(d: usize) -> Self {
        Self { s1: vec![0.0; d], s2: vec![vec![0.0; d]; d], s3: 0.0 }
    }

    pub fn from_draws(psi: &[Vec<f64>], s3: f64) -> Self {
        let d = psi.first().map_or(0, Vec::len);
        let mut s = Self::zeros(d);
        for p in psi {
            for a in 0..d {
                s.s1[a] += p[a];
                for b in 0..d {
                    s.s2[a][b] += p[a] * p[b];
                }
            }
        }
        s.s3 = s3;
        s
    }

    pub fn dim(&self) -> usize {
        self.s1.len()
    }

    fn s2_matrix(&self) -> DMatrix<f64> {
        let d = self.dim();
        DMatrix::from_fn(d, d, |i, j| self.s2[i][j])
    }
}

/// `γ_k = 1` during burn-in, then `(k - burn_in)^(-exponent)`.
pub fn step_size(k: usize, burn_in: usize, exponent: f64) -> f64 {
    if k <= burn_in {
        1.0
    } else {
        ((k - burn_in) as f64).powf(-exponent)
    }
}

/// `s + γ (fresh - s)` for every statistic.
pub fn sa_update(stats: &SufficientStats, fresh: &SufficientStats, gamma: f64) -> SufficientStats {
    if gamma == 1.0 {
        return fresh.clone();
    }
    let mix = |old: f64, new: f64| old + gamma * (new - old);
    SufficientStats {
        s1: stats.s1.iter().zip(&fresh.s1).map(|(a, b)| mix(*a, *b)).collect(),
        s2: stats
            .s2
            .iter()
            .zip(&fresh.s2)
            .map(|(ra, rb)| ra.iter().zip(rb).map(|(a, b)| mix(*a, *b)).collect())
            .collect(),
        s3: mix(stats.s3, fresh.s3),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MStep {
    pub theta: PopulationParams,
    /// Ω̂ had eigenvalues below the floor and was projected.
    pub omega_floored: bool,
    /// s3 was zero, so σ̂² sits at the variance floor.
    pub sigma_floored: bool,
}

/// Closed-form maximizer of the complete-data likelihood given the statistics.
pub fn m_step(stats: &SufficientStats, n: usize, n_tot: usize) -> Result<MStep> {
    if n < 2 {
        return Err(Error::domain("the M-step needs at least two individuals"));
    }
    if n_tot == 0 {
        return Err(Error::domain("the M-step needs observations"));
    }
    if stats.s3 < 0.0 || !stats.s3.is_finite() {
        return Err(Error::InvariantViolation(format!("s3 = {} is not a nonnegative number", stats.s3)));
    }
    let nf = n as f64;
    let s1 = DVector::from_column_slice(&stats.s1);
    let mu = &s1 / nf;
    let omega = stats.s2_matrix() / nf - &s1 * s1.transpose() / (nf * nf);
    let (omega, omega_floored) = floor_eigenvalues(&omega, OMEGA_EIGEN_FLOOR);
    let mut sigma2 = stats.s3 / n_tot as f64;
    let sigma_floored = sigma2 < VARIANCE_FLOOR;
    if sigma_floored {
        sigma2 = VARIANCE_FLOOR;
    }
    let theta = PopulationParams { mu: mu.iter().copied().collect(), omega: matrix_to_rows(&omega), sigma2 };
    Ok(MStep { theta, omega_floored, sigma_floored })
}

/// Complete-data log-likelihood `log p(y, ψ; θ)` expressed through the statistics.
pub fn complete_data_loglik(
    stats: &SufficientStats,
    n: usize,
    n_tot: usize,
    theta: &PopulationParams,
) -> Result<f64> {
    let d = theta.dim();
    let nf = n as f64;
    let factor = LowerFactor::factor(&theta.omega_matrix())?;
    let p = factor.inverse();
    let mu = DVector::from_column_slice(&theta.mu);
    let s1 = DVector::from_column_slice(&stats.s1);
    let scatter = stats.s2_matrix() - &s1 * mu.transpose() - &mu * s1.transpose() + &mu * mu.transpose() * nf;
    let trace = (&p * scatter).trace();
    let re = -0.5 * nf * (d as f64 * LN_2PI + factor.log_det()) - 0.5 * trace;
    let obs = -0.5 * n_tot as f64 * (LN_2PI + theta.sigma2.ln()) - 0.5 * stats.s3 / theta.sigma2;
    Ok(re + obs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn draws() -> Vec<Vec<f64>> {
        vec![vec![0.1, 1.0], vec![0.5, 0.7], vec![-0.3, 1.4], vec![0.2, 0.9]]
    }

    #[test]
    fn m_step_matches_empirical_moments() {
        let psi = draws();
        let s = SufficientStats::from_draws(&psi, 2.0);
        let m = m_step(&s, 4, 10).unwrap();
        let mean: Vec<f64> = (0..2).map(|a| psi.iter().map(|p| p[a]).sum::<f64>() / 4.0).collect();
        for a in 0..2 {
            assert_relative_eq!(m.theta.mu[a], mean[a], epsilon = 1e-15);
            for b in 0..2 {
                let cov = psi.iter().map(|p| (p[a] - mean[a]) * (p[b] - mean[b])).sum::<f64>() / 4.0;
                assert_relative_eq!(m.theta.omega[a][b], cov, epsilon = 1e-14);
            }
        }
        assert_relative_eq!(m.theta.sigma2, 0.2);
        assert!(!m.omega_floored);
    }

    #[test]
    fn identical_draws_floor_omega() {
        let psi = vec![vec![0.3, 0.2]; 5];
        let m = m_step(&SufficientStats::from_draws(&psi, 1.0), 5, 5).unwrap();
        assert!(m.omega_floored);
        assert!(m.theta.omega[0][0] <= 2e-10);
    }

    #[test]
    fn negative_s3_is_rejected() {
        let s = SufficientStats::from_draws(&draws(), -1.0);
        assert!(matches!(m_step(&s, 4, 4), Err(Error::InvariantViolation(_))));
    }

    #[test]
    fn sa_update_extremes() {
        let a = SufficientStats::from_draws(&draws(), 1.0);
        let b = SufficientStats::from_draws(&draws()[..2], 3.0);
        assert_eq!(sa_update(&a, &b, 1.0), b);
        assert_eq!(sa_update(&a, &b, 0.0), a);
        let h = sa_update(&a, &b, 0.5);
        assert_relative_eq!(h.s3, 2.0);
    }

    #[test]
    fn schedule() {
        assert_eq!(step_size(1, 50, 1.0), 1.0);
        assert_eq!(step_size(50, 50, 1.0), 1.0);
        assert_eq!(step_size(51, 50, 1.0), 1.0);
        assert_relative_eq!(step_size(54, 50, 1.0), 0.25);
        assert_relative_eq!(step_size(54, 50, 0.5), 0.5);
    }

    #[test]
    fn m_step_beats_perturbations() {
        let s = SufficientStats::from_draws(&draws(), 2.5);
        let best = m_step(&s, 4, 10).unwrap().theta;
        let l0 = complete_data_loglik(&s, 4, 10, &best).unwrap();
        for k in 0..50 {
            let e = 0.01 * (k as f64 + 1.0);
            let mut t = best.clone();
            t.mu[k % 2] += if k % 3 == 0 { e } else { -e };
            t.omega[0][0] *= 1.0 + e;
            t.sigma2 *= 1.0 - e / 2.0;
            assert!(complete_data_loglik(&s, 4, 10, &t).unwrap() <= l0);
        }
    }
}
