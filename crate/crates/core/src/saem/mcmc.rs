//! Metropolis–Hastings transitions for the individual parameters.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::likelihood::{factor_block, residual, Evaluator, PopulationParams, VariantKind};
use crate::linalg::{diag_gaussian_logpdf, iso_gaussian_logpdf, mvn_logpdf_factored, LowerFactor};

use super::posterior::{complete_block_s3, intermediate_s3};

/// `log N(ψ; μ, Ω)` up to a constant.
#[derive(Debug, Clone)]
pub struct Prior {
    mu: Vec<f64>,
    factor: LowerFactor,
}

impl Prior {
    pub fn new(theta: &PopulationParams) -> Result<Self> {
        let factor = LowerFactor::factor(&theta.omega_matrix())
            .map_err(|_| Error::NumericalHealth("omega is not positive definite".into()))?;
        Ok(Self { mu: theta.mu.clone(), factor })
    }

    pub fn logpdf(&self, psi: &[f64]) -> f64 {
        let e: Vec<f64> = psi.iter().zip(&self.mu).map(|(a, b)| a - b).collect();
        let v = self.factor.forward_solve(&e);
        -0.5 * v.iter().map(|x| x * x).sum::<f64>()
    }
}

/// MH bookkeeping.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MhCounts {
    pub proposed: usize,
    pub accepted: usize,
    /// Candidates whose density could not be evaluated or was not finite.
    pub nonfinite: usize,
    /// Candidates outside the emulator domain.
    pub extrapolated: usize,
}

impl MhCounts {
    pub fn add(&mut self, o: &MhCounts) {
        self.proposed += o.proposed;
        self.accepted += o.accepted;
        self.nonfinite += o.nonfinite;
        self.extrapolated += o.extrapolated;
    }

    pub fn rate(&self) -> f64 {
        if self.proposed == 0 {
            0.0
        } else {
            self.accepted as f64 / self.proposed as f64
        }
    }
}

/// Data term `log p(y_i | ψ_i)` from a cached mean and emulator variance.
pub fn data_loglik(kind: VariantKind, y: &[f64], mean: &[f64], lambda: &[f64], sigma2: f64) -> f64 {
    let r = residual(y, mean);
    match kind {
        VariantKind::Intermediate => {
            let v: Vec<f64> = lambda.iter().map(|l| sigma2 + l).collect();
            diag_gaussian_logpdf(&r, &v)
        }
        _ => iso_gaussian_logpdf(&r, sigma2),
    }
}

/// Current state of one individual's chain with its cached model output.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainState {
    pub psi: Vec<f64>,
    pub mean: Vec<f64>,
    pub lambda: Vec<f64>,
    pub cond_loglik: f64,
    pub log_prior: f64,
}

impl ChainState {
    pub fn new(ev: &Evaluator<'_>, i: usize, psi: Vec<f64>, theta: &PopulationParams, prior: &Prior) -> Result<Self> {
        let (mean, lambda) = ev.mean_and_lambda(i, &psi)?;
        let mut s = Self { psi, mean, lambda, cond_loglik: 0.0, log_prior: 0.0 };
        s.refresh(ev, i, theta, prior);
        Ok(s)
    }

    /// Recompute the cached densities after θ changed.
    pub fn refresh(&mut self, ev: &Evaluator<'_>, i: usize, theta: &PopulationParams, prior: &Prior) {
        let y = &ev.data().individuals[i].y;
        self.cond_loglik = data_loglik(ev.variant().kind(), y, &self.mean, &self.lambda, theta.sigma2);
        self.log_prior = prior.logpdf(&self.psi);
    }

    pub fn log_target(&self) -> f64 {
        self.cond_loglik + self.log_prior
    }

    /// This individual's contribution to s3.
    pub fn s3(&self, ev: &Evaluator<'_>, i: usize, sigma2: f64) -> f64 {
        let r = residual(&ev.data().individuals[i].y, &self.mean);
        match ev.variant().kind() {
            VariantKind::Intermediate => intermediate_s3(&r, &self.lambda, sigma2),
            _ => r.iter().map(|x| x * x).sum(),
        }
    }
}

fn propose(psi: &[f64], scale: &[f64], rng: &mut impl Rng) -> (Vec<f64>, f64) {
    let cand: Vec<f64> = psi
        .iter()
        .zip(scale)
        .map(|(p, s)| p + s * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let u: f64 = rng.gen();
    (cand, u)
}

/// One random-walk MH transition targeting `p(ψ_i | y_i; θ)` (separable variants).
#[allow(clippy::too_many_arguments)]
pub fn mh_transition(
    ev: &Evaluator<'_>,
    i: usize,
    state: &mut ChainState,
    theta: &PopulationParams,
    prior: &Prior,
    scale: &[f64],
    rng: &mut impl Rng,
    counts: &mut MhCounts,
) -> bool {
    let (cand, u) = propose(&state.psi, scale, rng);
    counts.proposed += 1;
    if let Some(bank) = ev.variant().bank() {
        if !bank.in_domain(&cand) {
            counts.extrapolated += 1;
        }
    }
    let Ok((mean, lambda)) = ev.mean_and_lambda(i, &cand) else {
        counts.nonfinite += 1;
        return false;
    };
    let y = &ev.data().individuals[i].y;
    let cond = data_loglik(ev.variant().kind(), y, &mean, &lambda, theta.sigma2);
    let lp = prior.logpdf(&cand);
    if !(cond + lp).is_finite() {
        counts.nonfinite += 1;
        return false;
    }
    if u.ln() < cond + lp - state.log_target() {
        *state = ChainState { psi: cand, mean, lambda, cond_loglik: cond, log_prior: lp };
        counts.accepted += 1;
        true
    } else {
        false
    }
}

/// One MH transition for individual `i` from `psi_current`; returns the new state and
/// whether the candidate was accepted.
pub fn mh_step_individual(
    ev: &Evaluator<'_>,
    i: usize,
    psi_current: &[f64],
    theta: &PopulationParams,
    proposal_scale: &[f64],
    rng: &mut impl Rng,
) -> Result<(Vec<f64>, bool)> {
    if ev.variant().kind() == VariantKind::Complete {
        return Err(Error::domain("use mh_step_complete for the complete variant"));
    }
    let prior = Prior::new(theta)?;
    let mut state = ChainState::new(ev, i, psi_current.to_vec(), theta, &prior)?;
    let mut counts = MhCounts::default();
    let acc = mh_transition(ev, i, &mut state, theta, &prior, proposal_scale, rng, &mut counts);
    Ok((state.psi, acc))
}

#[derive(Debug, Clone)]
struct BlockCache {
    time_index: usize,
    members: Vec<(usize, usize)>,
    y: Vec<f64>,
    whitened: Vec<Vec<f64>>,
    means: Vec<f64>,
    cov: DMatrix<f64>,
    factor: LowerFactor,
    loglik: f64,
}

impl BlockCache {
    fn resid(&self) -> Vec<f64> {
        residual(&self.y, &self.means)
    }
}

/// Joint-likelihood cache for the complete variant: one Gaussian block per emulator time,
/// updated only where an individual's candidate touches it.
#[derive(Debug, Clone)]
pub struct CompleteCache {
    sigma2: f64,
    blocks: Vec<BlockCache>,
    /// For each individual, `(block, slot)` pairs it occupies.
    membership: Vec<Vec<(usize, usize)>>,
}

fn finish_block(
    time_index: usize,
    members: Vec<(usize, usize)>,
    y: Vec<f64>,
    whitened: Vec<Vec<f64>>,
    means: Vec<f64>,
    cov: DMatrix<f64>,
    sigma2: f64,
) -> Result<BlockCache> {
    let mut a = cov.clone();
    for k in 0..a.nrows() {
        a[(k, k)] += sigma2;
    }
    let factor = factor_block(&a)?;
    let loglik = mvn_logpdf_factored(&residual(&y, &means), &factor);
    Ok(BlockCache { time_index, members, y, whitened, means, cov, factor, loglik })
}

impl CompleteCache {
    pub fn build(ev: &Evaluator<'_>, psi: &[Vec<f64>], sigma2: f64) -> Result<Self> {
        let bank = ev
            .variant()
            .bank()
            .ok_or_else(|| Error::domain("complete cache needs an emulator bank"))?;
        let data = ev.data();
        let mut membership = vec![Vec::new(); data.len()];
        let mut blocks = Vec::new();
        for (b, block) in ev.time_blocks().into_iter().enumerate() {
            let em = bank.emulator(block.time_index);
            let pts: Vec<&[f64]> = block.members.iter().map(|&(i, _)| psi[i].as_slice()).collect();
            let whitened: Vec<Vec<f64>> = pts.iter().map(|p| em.whitened_kernel_vector(p)).collect();
            let means: Vec<f64> = pts.iter().map(|p| em.predict_mean(p)).collect();
            let y: Vec<f64> = block.members.iter().map(|&(i, pos)| data.individuals[i].y[pos]).collect();
            let cov = crate::likelihood::block_covariance(em, &pts, &whitened)?;
            for (slot, &(i, _)) in block.members.iter().enumerate() {
                membership[i].push((b, slot));
            }
            blocks.push(finish_block(block.time_index, block.members, y, whitened, means, cov, sigma2)?);
        }
        Ok(Self { sigma2, blocks, membership })
    }

    pub fn loglik(&self) -> f64 {
        self.blocks.iter().map(|b| b.loglik).sum()
    }

    pub fn s3(&self) -> f64 {
        self.blocks
            .iter()
            .map(|b| complete_block_s3(&b.resid(), &b.factor, self.sigma2))
            .sum()
    }

    /// Mean predictions for individual `i` in observation order.
    pub fn means_of(&self, i: usize, n_obs: usize) -> Vec<f64> {
        let mut m = vec![0.0; n_obs];
        for &(b, slot) in &self.membership[i] {
            let block = &self.blocks[b];
            m[block.members[slot].1] = block.means[slot];
        }
        m
    }

    fn candidate_blocks(
        &self,
        ev: &Evaluator<'_>,
        i: usize,
        psi: &[Vec<f64>],
        cand: &[f64],
    ) -> Result<Vec<(usize, BlockCache)>> {
        let bank = ev.variant().bank().expect("complete variant has a bank");
        let mut out = Vec::with_capacity(self.membership[i].len());
        for &(b, slot) in &self.membership[i] {
            let old = &self.blocks[b];
            let em = bank.emulator(old.time_index);
            let v = em.whitened_kernel_vector(cand);
            let mut cov = old.cov.clone();
            let var = em.params().sigma2 * (1.0 - v.iter().map(|x| x * x).sum::<f64>());
            cov[(slot, slot)] = em.clamp_variance(var)?;
            for (q, &(iq, _)) in old.members.iter().enumerate() {
                if q != slot {
                    let c = em.cov_from_whitened(cand, &psi[iq], &v, &old.whitened[q]);
                    cov[(slot, q)] = c;
                    cov[(q, slot)] = c;
                }
            }
            let mut whitened = old.whitened.clone();
            whitened[slot] = v;
            let mut means = old.means.clone();
            means[slot] = em.predict_mean(cand);
            let block = finish_block(
                old.time_index,
                old.members.clone(),
                old.y.clone(),
                whitened,
                means,
                cov,
                self.sigma2,
            )?;
            out.push((b, block));
        }
        Ok(out)
    }
}

/// One MH transition for individual `i` under the complete model, holding the other
/// individuals fixed. The cache is updated in place on acceptance.
#[allow(clippy::too_many_arguments)]
pub fn mh_transition_complete(
    ev: &Evaluator<'_>,
    i: usize,
    psi: &mut [Vec<f64>],
    cache: &mut CompleteCache,
    prior: &Prior,
    scale: &[f64],
    rng: &mut impl Rng,
    counts: &mut MhCounts,
) -> bool {
    let (cand, u) = propose(&psi[i], scale, rng);
    counts.proposed += 1;
    let bank = ev.variant().bank().expect("complete variant has a bank");
    if !bank.in_domain(&cand) {
        counts.extrapolated += 1;
    }
    let Ok(updated) = cache.candidate_blocks(ev, i, psi, &cand) else {
        counts.nonfinite += 1;
        return false;
    };
    let old: f64 = updated.iter().map(|(b, _)| cache.blocks[*b].loglik).sum();
    let new: f64 = updated.iter().map(|(_, blk)| blk.loglik).sum();
    let lp_new = prior.logpdf(&cand);
    let log_ratio = new - old + lp_new - prior.logpdf(&psi[i]);
    if !log_ratio.is_finite() {
        counts.nonfinite += 1;
        return false;
    }
    if u.ln() < log_ratio {
        for (b, blk) in updated {
            cache.blocks[b] = blk;
        }
        psi[i] = cand;
        counts.accepted += 1;
        true
    } else {
        false
    }
}

/// One complete-model MH transition for individual `i` from scratch.
pub fn mh_step_complete(
    ev: &Evaluator<'_>,
    i: usize,
    psi_all: &[Vec<f64>],
    theta: &PopulationParams,
    proposal_scale: &[f64],
    rng: &mut impl Rng,
) -> Result<(Vec<f64>, bool)> {
    let prior = Prior::new(theta)?;
    let mut psi = psi_all.to_vec();
    let mut cache = CompleteCache::build(ev, &psi, theta.sigma2)?;
    let mut counts = MhCounts::default();
    let acc = mh_transition_complete(ev, i, &mut psi, &mut cache, &prior, proposal_scale, rng, &mut counts);
    Ok((psi.swap_remove(i), acc))
}
