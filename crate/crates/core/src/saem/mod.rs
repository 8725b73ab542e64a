//! SAEM-MCMC estimation for the exact model and the three emulator-based variants.

pub mod fisher;
pub mod mcmc;
pub mod posterior;
pub mod stats;

use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::likelihood::{Dataset, Evaluator, ModelVariant, PopulationParams, VariantKind};
use crate::rng::{stream, tag};

pub use fisher::{louis_information, FisherResult};
pub use mcmc::{mh_step_complete, mh_step_individual, ChainState, CompleteCache, MhCounts, Prior};
pub use posterior::{
    complete_block_moments, intermediate_moments, residual_posterior_complete,
    residual_posterior_intermediate, ResidualPosterior,
};
pub use stats::{complete_data_loglik, m_step, sa_update, step_size, MStep, SufficientStats};

use mcmc::{mh_transition, mh_transition_complete};

/// Acceptance rate the burn-in scale adaptation steers toward.
pub const TARGET_ACCEPTANCE: f64 = 0.375;
const INITIAL_SCALE_MULTIPLIER: f64 = 0.5;
const LOG_MULT_RANGE: (f64, f64) = (-12.0, 4.0);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SaemConfig {
    pub k_iters: usize,
    pub m_mcmc: usize,
    pub burn_in: usize,
    pub sa_exponent: f64,
    /// Fixed base proposal scale; when absent, `sqrt(diag Ω̂)` of the previous iterate is used.
    pub proposal_scale: Option<Vec<f64>>,
    /// Adapt per-individual scale multipliers during burn-in.
    pub adapt: bool,
    /// Extra iterations at θ̂ used for the Louis information (0 skips it).
    pub fisher_iters: usize,
    pub seed: u64,
}

impl Default for SaemConfig {
    fn default() -> Self {
        Self {
            k_iters: 100,
            m_mcmc: 15,
            burn_in: 50,
            sa_exponent: 1.0,
            proposal_scale: None,
            adapt: true,
            fisher_iters: 20,
            seed: 1,
        }
    }
}

impl SaemConfig {
    pub fn validate(&self, d: usize) -> Result<()> {
        if self.k_iters <= self.burn_in {
            return Err(Error::domain(format!(
                "k_iters ({}) must exceed burn_in ({})",
                self.k_iters, self.burn_in
            )));
        }
        if self.m_mcmc == 0 {
            return Err(Error::domain("m_mcmc must be at least 1"));
        }
        if !(self.sa_exponent > 0.5 && self.sa_exponent <= 1.0) {
            return Err(Error::domain(format!("sa_exponent {} is outside (0.5, 1]", self.sa_exponent)));
        }
        if let Some(s) = &self.proposal_scale {
            if s.len() != d {
                return Err(Error::domain(format!("proposal_scale has {} entries, expected {d}", s.len())));
            }
            if s.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
                return Err(Error::domain("proposal_scale entries must be positive"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub seed: u64,
    /// Transitions over the SAEM iterations (Fisher sweeps excluded).
    pub mh: MhCounts,
    pub acceptance_rate: f64,
    /// Acceptance rate per iteration.
    pub acceptance_by_iter: Vec<f64>,
    pub omega_floor_events: usize,
    pub sigma_floor_events: usize,
    /// Final per-individual proposal scales.
    pub proposal_scales: Vec<Vec<f64>>,
    pub fisher_flags: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub variant: VariantKind,
    pub parameter_names: Vec<String>,
    pub theta_init: PopulationParams,
    pub theta_hat: PopulationParams,
    /// `theta_hat` flattened as `(μ, vech Ω, σ²)`.
    pub estimates: Vec<f64>,
    pub fisher: Option<FisherResult>,
    pub std_errors: Vec<Option<f64>>,
    /// Row `k` holds θ̂^(k); row 0 is the starting value.
    pub trajectories: Vec<Vec<f64>>,
    pub psi_final: Vec<Vec<f64>>,
    pub diagnostics: Diagnostics,
    #[serde(skip)]
    pub wall_time: Duration,
}

impl FitReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn trajectory_csv(&self) -> String {
        let mut out = String::from("iter");
        for n in &self.parameter_names {
            out.push(',');
            out.push_str(n);
        }
        out.push('\n');
        for (k, row) in self.trajectories.iter().enumerate() {
            out.push_str(&k.to_string());
            for v in row {
                out.push(',');
                out.push_str(&v.to_string());
            }
            out.push('\n');
        }
        out
    }

    /// 95% Wald interval for parameter `k`.
    pub fn wald_interval(&self, k: usize) -> Option<(f64, f64)> {
        let se = self.std_errors.get(k).copied().flatten()?;
        let est = self.estimates[k];
        Some((est - 1.959_963_984_540_054 * se, est + 1.959_963_984_540_054 * se))
    }
}

fn check_finite(theta: &PopulationParams, iter: usize) -> Result<()> {
    match theta.to_vector().iter().position(|v| !v.is_finite()) {
        Some(k) => Err(Error::Diverged {
            iter,
            detail: format!("{} is not finite", PopulationParams::parameter_names(theta.dim())[k]),
        }),
        None => Ok(()),
    }
}

fn scales_for(base: &[f64], log_mult: &[f64]) -> Vec<Vec<f64>> {
    log_mult.iter().map(|lm| base.iter().map(|b| b * lm.exp()).collect()).collect()
}

/// Runs SAEM from `theta_init`, followed by the Louis information when
/// `config.fisher_iters > 0`.
pub fn run_saem(
    variant: ModelVariant<'_>,
    data: &Dataset,
    config: &SaemConfig,
    theta_init: &PopulationParams,
) -> Result<FitReport> {
    let start = Instant::now();
    let d = variant.dim();
    config.validate(d)?;
    theta_init.validate()?;
    if theta_init.dim() != d {
        return Err(Error::domain(format!("theta has dimension {}, the model {d}", theta_init.dim())));
    }
    let ev = Evaluator::new(variant, data)?;
    let n = data.len();
    let n_tot = data.n_tot();
    let kind = variant.kind();

    let mut theta = theta_init.clone();
    let mut psi: Vec<Vec<f64>> = vec![theta.mu.clone(); n];
    let mut log_mult = vec![INITIAL_SCALE_MULTIPLIER.ln(); n];
    let mut stats = SufficientStats::zeros(d);
    let mut trajectories = vec![theta.to_vector()];
    let mut diag = Diagnostics { seed: config.seed, ..Default::default() };

    let mut states: Vec<ChainState> = if kind == VariantKind::Complete {
        Vec::new()
    } else {
        let prior = Prior::new(&theta)?;
        (0..n)
            .map(|i| ChainState::new(&ev, i, psi[i].clone(), &theta, &prior))
            .collect::<Result<_>>()?
    };

    for k in 1..=config.k_iters {
        let base = match &config.proposal_scale {
            Some(s) => s.clone(),
            None => (0..d).map(|a| theta.omega[a][a].sqrt()).collect(),
        };
        let scales = scales_for(&base, &log_mult);
        let prior = Prior::new(&theta)?;
        let mut counts = vec![MhCounts::default(); n];

        let s3 = if kind == VariantKind::Complete {
            let mut cache = CompleteCache::build(&ev, &psi, theta.sigma2)?;
            let mut rngs: Vec<_> = (0..n).map(|i| stream(config.seed, &[tag::MCMC, k as u64, i as u64])).collect();
            for _ in 0..config.m_mcmc {
                for i in 0..n {
                    mh_transition_complete(&ev, i, &mut psi, &mut cache, &prior, &scales[i], &mut rngs[i], &mut counts[i]);
                }
            }
            cache.s3()
        } else {
            states.par_iter_mut().zip(counts.par_iter_mut()).enumerate().for_each(|(i, (st, c))| {
                st.refresh(&ev, i, &theta, &prior);
                let mut rng = stream(config.seed, &[tag::MCMC, k as u64, i as u64]);
                for _ in 0..config.m_mcmc {
                    mh_transition(&ev, i, st, &theta, &prior, &scales[i], &mut rng, c);
                }
            });
            for (p, st) in psi.iter_mut().zip(&states) {
                p.clone_from(&st.psi);
            }
            states.iter().enumerate().map(|(i, st)| st.s3(&ev, i, theta.sigma2)).sum()
        };

        let mut it = MhCounts::default();
        for c in &counts {
            it.add(c);
        }
        diag.mh.add(&it);
        diag.acceptance_by_iter.push(it.rate());
        if config.adapt && k <= config.burn_in {
            let gain = 1.0 / (k as f64).sqrt();
            for (lm, c) in log_mult.iter_mut().zip(&counts) {
                *lm = (*lm + gain * (c.rate() - TARGET_ACCEPTANCE)).clamp(LOG_MULT_RANGE.0, LOG_MULT_RANGE.1);
            }
        }

        let fresh = SufficientStats::from_draws(&psi, s3);
        if !fresh.s3.is_finite() || fresh.s1.iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged { iter: k, detail: "sufficient statistics are not finite".into() });
        }
        stats = sa_update(&stats, &fresh, step_size(k, config.burn_in, config.sa_exponent));
        let step = m_step(&stats, n, n_tot)?;
        check_finite(&step.theta, k)?;
        diag.omega_floor_events += usize::from(step.omega_floored);
        diag.sigma_floor_events += usize::from(step.sigma_floored);
        theta = step.theta;
        trajectories.push(theta.to_vector());
    }
    diag.acceptance_rate = diag.mh.rate();
    let base = match &config.proposal_scale {
        Some(s) => s.clone(),
        None => (0..d).map(|a| theta.omega[a][a].sqrt()).collect(),
    };
    diag.proposal_scales = scales_for(&base, &log_mult);

    let p = theta.to_vector().len();
    let mut report = FitReport {
        variant: kind,
        parameter_names: PopulationParams::parameter_names(d),
        theta_init: theta_init.clone(),
        estimates: theta.to_vector(),
        theta_hat: theta,
        fisher: None,
        std_errors: vec![None; p],
        trajectories,
        psi_final: psi,
        diagnostics: diag,
        wall_time: Duration::ZERO,
    };
    if config.fisher_iters > 0 {
        let fisher = fisher_information(variant, data, &report, config)?;
        report.std_errors = fisher.std_errors.clone();
        report.diagnostics.fisher_flags = fisher.flags.clone();
        report.fisher = Some(fisher);
    }
    report.wall_time = start.elapsed();
    Ok(report)
}

/// Louis information at a fitted θ̂, continuing the chains from the fit's final ψ.
pub fn fisher_information(
    variant: ModelVariant<'_>,
    data: &Dataset,
    fit: &FitReport,
    config: &SaemConfig,
) -> Result<FisherResult> {
    let ev = Evaluator::new(variant, data)?;
    louis_information(&ev, &fit.theta_hat, &fit.psi_final, &fit.diagnostics.proposal_scales, config)
}
