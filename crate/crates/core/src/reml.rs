//! SAEM for restricted maximum likelihood.
//!
//! The fixed effects join the random effects as missing data `z = (phi, beta)`.
//! Under a flat prior on `beta`, `beta | phi` is Gaussian and is drawn
//! exactly; `phi | beta` uses the Metropolis kernel of [`crate::saem`].

use std::sync::Arc;

use log::debug;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Result, SnmmError};
use crate::model::{Curve, GammaFactor, LongitudinalDataset, RandomEffects, SnmmModel, ThetaEstimate};
use crate::rng::StreamRng;
use crate::saem::{
    check_inputs, gls_beta, repair_gamma, shapes_for, step_size, symmetrize, ChainEnsemble, PhiTarget,
    ProposalScales, SaemConfig, ShapeProvider, Trace,
};

/// Running statistics `(s~1, s~2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RemlStats {
    /// Average of `sum_i eta_i eta_i'` with `eta_i = phi_i - A_i beta`.
    pub s1_tilde: DMatrix<f64>,
    /// Average residual sum of squares.
    pub s2_tilde: f64,
}

impl RemlStats {
    pub fn zeros(p: usize) -> Self {
        Self { s1_tilde: DMatrix::zeros(p, p), s2_tilde: 0.0 }
    }

    /// Average over chains of `(sum_i eta_i eta_i', ||y - g(z, f)||^2)`.
    pub fn chain_average(
        chains: &[(&RandomEffects, &DVector<f64>)],
        data: &LongitudinalDataset,
        model: &SnmmModel,
        shapes: &[Arc<dyn Curve>],
    ) -> Self {
        let p = model.p();
        let m = chains.len() as f64;
        let mut out = Self::zeros(p);
        for ((phi, beta), f) in chains.iter().zip(shapes) {
            for (v, mean) in phi.phi.iter().zip(model.prior_means(beta)) {
                let eta = v - mean;
                out.s1_tilde += &eta * eta.transpose();
            }
            out.s2_tilde += model.rss(data, phi, f.as_ref());
        }
        out.s1_tilde = symmetrize(&(out.s1_tilde / m));
        out.s2_tilde /= m;
        out
    }
}

pub fn update_reml_stats(
    stats: &RemlStats,
    chains: &[(&RandomEffects, &DVector<f64>)],
    data: &LongitudinalDataset,
    model: &SnmmModel,
    shapes: &[Arc<dyn Curve>],
    gamma_k: f64,
) -> RemlStats {
    let target = RemlStats::chain_average(chains, data, model, shapes);
    let keep = 1.0 - gamma_k;
    RemlStats {
        s1_tilde: symmetrize(&(&stats.s1_tilde * keep + target.s1_tilde * gamma_k)),
        s2_tilde: keep * stats.s2_tilde + gamma_k * target.s2_tilde,
    }
}

/// `Gamma = s~1 / N`, `sigma2 = s~2 / n`.
pub fn m_step_reml(stats: &RemlStats, model: &SnmmModel, n_individuals: usize, n_total: usize) -> (DMatrix<f64>, f64) {
    let gamma = repair_gamma(model, &stats.s1_tilde / n_individuals as f64);
    (gamma, stats.s2_tilde / n_total as f64)
}

/// Exact draw of `beta | phi, Gamma` under a flat prior:
/// `N(H^-1 sum_i A_i' Gamma^-1 phi_i, H^-1)` with `H = sum_i A_i' Gamma^-1 A_i`.
pub fn draw_beta(model: &SnmmModel, gamma: &DMatrix<f64>, phi: &RandomEffects, rng: &mut StreamRng) -> Result<DVector<f64>> {
    let factor = GammaFactor::new(gamma)?;
    let (mean, h) = gls_beta(model, &factor.inverse, &phi.phi).map_err(|e| SnmmError::Sampler {
        individual: "all".into(),
        message: e.to_string(),
    })?;
    let chol = h.cholesky().ok_or_else(|| SnmmError::Sampler {
        individual: "all".into(),
        message: "sum_i A_i' Gamma^-1 A_i is singular".into(),
    })?;
    // H = L L' so L'^-1 z has covariance H^-1.
    let z = DVector::from_iterator(mean.len(), (0..mean.len()).map(|_| rng.sample::<f64, _>(StandardNormal)));
    let offset = chol
        .l()
        .transpose()
        .solve_upper_triangular(&z)
        .ok_or_else(|| SnmmError::Numerical("triangular solve failed in beta draw".into()))?;
    Ok(mean + offset)
}

/// One Gibbs scan: `phi | y, beta` by Metropolis sweeps, then `beta | phi` exactly.
#[allow(clippy::too_many_arguments)]
pub fn gibbs_sample_z(
    data: &LongitudinalDataset,
    model: &SnmmModel,
    gamma: &DMatrix<f64>,
    sigma2: f64,
    f: &dyn Curve,
    phi: &mut RandomEffects,
    beta: &mut DVector<f64>,
    scales: &ProposalScales,
    sweeps: usize,
    rng: &mut StreamRng,
) -> Result<()> {
    let factor = GammaFactor::new(gamma)?;
    let means = model.prior_means(beta);
    PhiTarget { data, model, factor: &factor, sigma2, f }.sweep(phi, &means, scales, sweeps, rng)?;
    *beta = draw_beta(model, gamma, phi, rng)?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct RemlRun {
    /// `Gamma` and `sigma2` from the last M-step; `beta` is the average of
    /// the final draws over chains.
    pub theta: ThetaEstimate,
    pub chains: ChainEnsemble,
    pub trace: Trace,
}

/// SAEM-REML. Trace `beta_mean_*` columns hold the chain average of the
/// current `beta` draws.
pub fn run_saem_reml(
    data: &LongitudinalDataset,
    model: &SnmmModel,
    init: &ThetaEstimate,
    provider: &mut dyn ShapeProvider,
    cfg: &SaemConfig,
) -> Result<RemlRun> {
    check_inputs(data, model, init, cfg)?;
    let mut gamma = init.gamma.clone();
    let mut sigma2 = init.sigma2;
    let mut chains = ChainEnsemble::initialize(model, &init.beta, cfg, true);
    let mut stats = RemlStats::zeros(model.p());
    let mut trace = Trace::new(model.q(), model.p(), "beta_mean");
    let mut beta_mean = init.beta.clone();

    for k in 1..=cfg.iterations {
        let shapes = shapes_for(provider, k, data, model, &chains, sigma2)?;
        let factor = GammaFactor::new(&gamma)?;
        let targets: Vec<PhiTarget<'_>> = shapes
            .iter()
            .map(|f| PhiTarget { data, model, factor: &factor, sigma2, f: f.as_ref() })
            .collect();
        chains.simulate(k, k <= cfg.burn_in, cfg.mh_steps, &targets, |c| {
            model.prior_means(c.beta.as_ref().expect("REML chains carry beta"))
        })?;
        drop(targets);
        for l in 0..chains.len() {
            let phi = chains.chains[l].phi.clone();
            let beta = draw_beta(model, &gamma, &phi, chains.rng_mut(l))
                .map_err(|e| SnmmError::Chain { iteration: k, chain: l, source: Box::new(e) })?;
            chains.chains[l].beta = Some(beta);
        }
        let shapes = provider.recenter(k, model, &mut chains, shapes)?;

        let pairs: Vec<(&RandomEffects, &DVector<f64>)> =
            chains.chains.iter().map(|c| (&c.phi, c.beta.as_ref().expect("REML chains carry beta"))).collect();
        stats = update_reml_stats(&stats, &pairs, data, model, &shapes, step_size(k, cfg));
        (gamma, sigma2) = m_step_reml(&stats, model, data.n_individuals(), data.n_total());
        beta_mean = pairs.iter().map(|(_, b)| (*b).clone()).sum::<DVector<f64>>() / pairs.len() as f64;
        debug!("saem-reml k={k} sigma2={sigma2:.5}");
        trace.push(k, &ThetaEstimate { beta: beta_mean.clone(), gamma: gamma.clone(), sigma2 });
    }
    Ok(RemlRun { theta: ThetaEstimate { beta: beta_mean, gamma, sigma2 }, chains, trace })
}
