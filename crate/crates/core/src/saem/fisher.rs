//! Observed Fisher information by the Louis identity, averaged over MCMC draws of ψ at θ̂.
//!
//! Parameters are ordered `(μ, vech Ω, σ²)` as in [`PopulationParams::to_vector`]. For each
//! draw the gradient and Hessian of the complete-data log-likelihood are accumulated;
//! the information is `-E[H] - (E[g gᵀ] - E[g] E[g]ᵀ)`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::likelihood::{residual, Evaluator, PopulationParams, VariantKind};
use crate::linalg::LowerFactor;
use crate::rng::{stream, tag};

use super::mcmc::{mh_transition, mh_transition_complete, ChainState, CompleteCache, MhCounts, Prior};
use super::SaemConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FisherResult {
    pub information: Vec<Vec<f64>>,
    /// `None` where the inverse-information diagonal is not positive or the parameter is
    /// outside the variant's scope.
    pub std_errors: Vec<Option<f64>>,
    pub pseudo_inverse: bool,
    pub flags: Vec<String>,
    pub draws: usize,
}

/// Derivatives of `log N(ψ; μ, Ω)` with respect to `(μ, vech Ω)`.
struct PriorDerivs {
    d: usize,
    mu: DVector<f64>,
    p: DMatrix<f64>,
    /// For each vech direction: `(D, P D, P D P)`.
    dirs: Vec<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)>,
}

impl PriorDerivs {
    fn new(theta: &PopulationParams) -> Result<Self> {
        let d = theta.dim();
        let p = LowerFactor::factor(&theta.omega_matrix())?.inverse();
        let mut dirs = Vec::new();
        for a in 0..d {
            for b in a..d {
                let mut dm = DMatrix::zeros(d, d);
                dm[(a, b)] = 1.0;
                dm[(b, a)] = 1.0;
                let pd = &p * &dm;
                let pdp = &pd * &p;
                dirs.push((dm, pd, pdp));
            }
        }
        Ok(Self { d, mu: DVector::from_column_slice(&theta.mu), p, dirs })
    }

    fn n_params(&self) -> usize {
        self.d + self.dirs.len()
    }

    /// Gradient and Hessian over `(μ, vech Ω)` at one draw.
    fn eval(&self, psi: &[f64], g: &mut [f64], h: &mut DMatrix<f64>) {
        let d = self.d;
        let e = DVector::from_column_slice(psi) - &self.mu;
        let pe = &self.p * &e;
        for a in 0..d {
            g[a] = pe[a];
            for b in 0..d {
                h[(a, b)] = -self.p[(a, b)];
            }
        }
        let pdpe: Vec<DVector<f64>> = self.dirs.iter().map(|(_, _, pdp)| pdp * &e).collect();
        for (k, (_, pd, _)) in self.dirs.iter().enumerate() {
            let row = d + k;
            g[row] = -0.5 * pd.trace() + 0.5 * e.dot(&pdpe[k]);
            for a in 0..d {
                h[(a, row)] = -pdpe[k][a];
                h[(row, a)] = -pdpe[k][a];
            }
            for (l, (dm2, pd2, _)) in self.dirs.iter().enumerate().take(k + 1) {
                // ½ tr(P D P D') - eᵀ P D P D' P e
                let tr = 0.5 * (pd * pd2).trace();
                let quad = pdpe[k].dot(&(dm2 * &pe));
                let col = d + l;
                h[(row, col)] = tr - quad;
                h[(col, row)] = tr - quad;
            }
        }
    }
}

/// σ² derivatives of the data term for one individual.
fn sigma_derivs(kind: VariantKind, y: &[f64], mean: &[f64], lambda: &[f64], sigma2: f64) -> (f64, f64) {
    let r = residual(y, mean);
    match kind {
        VariantKind::Intermediate => r.iter().zip(lambda).fold((0.0, 0.0), |(g, h), (ri, li)| {
            let v = sigma2 + li;
            (g - 0.5 / v + 0.5 * ri * ri / (v * v), h + 0.5 / (v * v) - ri * ri / (v * v * v))
        }),
        _ => {
            let n = r.len() as f64;
            let s: f64 = r.iter().map(|x| x * x).sum();
            let s4 = sigma2 * sigma2;
            (-0.5 * n / sigma2 + 0.5 * s / s4, 0.5 * n / s4 - s / (s4 * sigma2))
        }
    }
}

#[derive(Clone)]
struct Moments {
    n: usize,
    g: DVector<f64>,
    gg: DMatrix<f64>,
    h: DMatrix<f64>,
}

impl Moments {
    fn new(p: usize) -> Self {
        Self { n: 0, g: DVector::zeros(p), gg: DMatrix::zeros(p, p), h: DMatrix::zeros(p, p) }
    }

    fn push(&mut self, g: &[f64], h: &DMatrix<f64>) {
        let gv = DVector::from_column_slice(g);
        self.n += 1;
        self.gg += &gv * gv.transpose();
        self.g += gv;
        self.h += h;
    }

    /// `-E[H] - Cov(g)`.
    fn information(&self) -> DMatrix<f64> {
        let n = self.n as f64;
        let eg = &self.g / n;
        -(&self.h / n) - (&self.gg / n - &eg * eg.transpose())
    }
}

/// Louis-identity information at `theta`, continuing the chains from `psi_start`.
pub fn louis_information(
    ev: &Evaluator<'_>,
    theta: &PopulationParams,
    psi_start: &[Vec<f64>],
    scales: &[Vec<f64>],
    config: &SaemConfig,
) -> Result<FisherResult> {
    if config.fisher_iters == 0 {
        return Err(Error::domain("fisher_iters must be positive"));
    }
    let kind = ev.variant().kind();
    let data = ev.data();
    let n = data.len();
    let derivs = PriorDerivs::new(theta)?;
    let q = derivs.n_params();
    let p = q + 1;
    let prior = Prior::new(theta)?;
    let transitions = config.fisher_iters * config.m_mcmc;
    let mut flags = Vec::new();

    let info = if kind == VariantKind::Complete {
        let mut psi = psi_start.to_vec();
        let mut cache = CompleteCache::build(ev, &psi, theta.sigma2)?;
        let mut rngs: Vec<_> = (0..n).map(|i| stream(config.seed, &[tag::FISHER, i as u64])).collect();
        let mut counts = MhCounts::default();
        let mut mom = Moments::new(q);
        let mut g = vec![0.0; q];
        let mut h = DMatrix::zeros(q, q);
        let mut gi = vec![0.0; q];
        let mut hi = DMatrix::zeros(q, q);
        for _ in 0..transitions {
            for i in 0..n {
                mh_transition_complete(ev, i, &mut psi, &mut cache, &prior, &scales[i], &mut rngs[i], &mut counts);
            }
            g.iter_mut().for_each(|x| *x = 0.0);
            h.fill(0.0);
            for p_i in &psi {
                derivs.eval(p_i, &mut gi, &mut hi);
                g.iter_mut().zip(&gi).for_each(|(a, b)| *a += b);
                h += &hi;
            }
            mom.push(&g, &h);
        }
        flags.push("sigma2 information is not available for the complete variant".to_string());
        let sub = mom.information();
        let mut full = DMatrix::zeros(p, p);
        full.view_mut((0, 0), (q, q)).copy_from(&sub);
        full
    } else {
        let per: Vec<DMatrix<f64>> = (0..n)
            .into_par_iter()
            .map(|i| -> Result<DMatrix<f64>> {
                let mut rng = stream(config.seed, &[tag::FISHER, i as u64]);
                let mut state = ChainState::new(ev, i, psi_start[i].clone(), theta, &prior)?;
                let mut counts = MhCounts::default();
                let mut mom = Moments::new(p);
                let mut g = vec![0.0; p];
                let mut h = DMatrix::zeros(p, p);
                let y = &data.individuals[i].y;
                for _ in 0..transitions {
                    mh_transition(ev, i, &mut state, theta, &prior, &scales[i], &mut rng, &mut counts);
                    h.fill(0.0);
                    let mut hq = DMatrix::zeros(q, q);
                    derivs.eval(&state.psi, &mut g[..q], &mut hq);
                    h.view_mut((0, 0), (q, q)).copy_from(&hq);
                    let (gs, hs) = sigma_derivs(kind, y, &state.mean, &state.lambda, theta.sigma2);
                    g[q] = gs;
                    h[(q, q)] = hs;
                    mom.push(&g, &h);
                }
                Ok(mom.information())
            })
            .collect::<Result<_>>()?;
        per.iter().fold(DMatrix::zeros(p, p), |acc, m| acc + m)
    };
    let info = (&info + info.transpose()) * 0.5;

    let supported = if kind == VariantKind::Complete { q } else { p };
    let sub = info.view((0, 0), (supported, supported)).into_owned();
    let (inv, pseudo) = match sub.clone().try_inverse() {
        Some(m) if m.iter().all(|v| v.is_finite()) => (m, false),
        _ => {
            flags.push("information matrix is singular; pseudo-inverse used".to_string());
            let inv = sub
                .clone()
                .pseudo_inverse(1e-12)
                .map_err(|e| Error::NumericalHealth(format!("pseudo-inverse failed: {e}")))?;
            (inv, true)
        }
    };
    let names = PopulationParams::parameter_names(theta.dim());
    let mut std_errors = vec![None; p];
    for k in 0..supported {
        let v = inv[(k, k)];
        if v > 0.0 && v.is_finite() {
            std_errors[k] = Some(v.sqrt());
        } else {
            flags.push(format!("inverse information for {} is {v:e}; no standard error", names[k]));
        }
    }
    Ok(FisherResult {
        information: crate::likelihood::matrix_to_rows(&info),
        std_errors,
        pseudo_inverse: pseudo,
        flags,
        draws: transitions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn numeric_prior_derivs(theta: &PopulationParams, psi: &[f64]) -> (Vec<f64>, DMatrix<f64>) {
        let base = theta.to_vector();
        let d = theta.dim();
        let q = base.len() - 1;
        let f = |v: &[f64]| -> f64 {
            let mut omega = DMatrix::zeros(d, d);
            let mut k = d;
            for a in 0..d {
                for b in a..d {
                    omega[(a, b)] = v[k];
                    omega[(b, a)] = v[k];
                    k += 1;
                }
            }
            let l = LowerFactor::factor(&omega).unwrap();
            let e: Vec<f64> = (0..d).map(|a| psi[a] - v[a]).collect();
            let w = l.forward_solve(&e);
            -0.5 * l.log_det() - 0.5 * w.iter().map(|x| x * x).sum::<f64>()
        };
        let h = 1e-5;
        let mut g = vec![0.0; q];
        let mut hess = DMatrix::zeros(q, q);
        for a in 0..q {
            let mut up = base.clone();
            let mut dn = base.clone();
            up[a] += h;
            dn[a] -= h;
            g[a] = (f(&up) - f(&dn)) / (2.0 * h);
            for b in 0..q {
                let mut pp = base.clone();
                let mut pm = base.clone();
                let mut mp = base.clone();
                let mut mm = base.clone();
                pp[a] += h;
                pp[b] += h;
                pm[a] += h;
                pm[b] -= h;
                mp[a] -= h;
                mp[b] += h;
                mm[a] -= h;
                mm[b] -= h;
                hess[(a, b)] = (f(&pp) - f(&pm) - f(&mp) + f(&mm)) / (4.0 * h * h);
            }
        }
        (g, hess)
    }

    #[test]
    fn analytic_prior_derivatives_match_finite_differences() {
        let omega = DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.1, 0.3]);
        let theta = PopulationParams::new(vec![0.2, -0.4], &omega, 1.0).unwrap();
        let psi = [0.9, -0.1];
        let derivs = PriorDerivs::new(&theta).unwrap();
        let q = derivs.n_params();
        let mut g = vec![0.0; q];
        let mut h = DMatrix::zeros(q, q);
        derivs.eval(&psi, &mut g, &mut h);
        let (gn, hn) = numeric_prior_derivs(&theta, &psi);
        for a in 0..q {
            assert_relative_eq!(g[a], gn[a], epsilon = 1e-6);
            for b in 0..q {
                assert_relative_eq!(h[(a, b)], hn[(a, b)], epsilon = 1e-4);
            }
        }
    }

    #[test]
    fn sigma_derivatives_match_finite_differences() {
        let y = [1.0, 0.2, -0.3];
        let m = [0.8, 0.1, 0.0];
        let lam = [0.1, 0.0, 0.5];
        for kind in [VariantKind::Simple, VariantKind::Intermediate] {
            let f = |s2: f64| super::super::mcmc::data_loglik(kind, &y, &m, &lam, s2);
            let s2 = 0.4;
            let h = 1e-5;
            let (g, hh) = sigma_derivs(kind, &y, &m, &lam, s2);
            assert_relative_eq!(g, (f(s2 + h) - f(s2 - h)) / (2.0 * h), epsilon = 1e-6);
            assert_relative_eq!(hh, (f(s2 + h) - 2.0 * f(s2) + f(s2 - h)) / (h * h), epsilon = 1e-3);
        }
    }
}
