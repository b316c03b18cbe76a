//! Stochastic-approximation EM for maximum likelihood.
//!
//! Each iteration runs a Metropolis-Hastings simulation step on `m`
//! independent chains, mixes the chain-averaged complete-data sufficient
//! statistics into the running ones with step `gamma_k`, and applies the
//! closed-form M-step.

use std::io::Write;
use std::sync::Arc;

use log::{debug, warn};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SnmmError};
use crate::model::{Curve, GammaFactor, LongitudinalDataset, RandomEffects, SnmmModel, ThetaEstimate};
use crate::rng::{self, StreamRng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaemConfig {
    /// Total number of iterations `K`.
    pub iterations: usize,
    /// Iterations run with step size 1.
    pub burn_in: usize,
    /// Number of chains `m`.
    pub chains: usize,
    /// Metropolis sweeps per simulation step.
    #[serde(default = "default_mh_steps")]
    pub mh_steps: usize,
    /// Initial random-walk scale per coordinate of `phi`.
    pub proposal_scale: Vec<f64>,
    pub seed: u64,
}

fn default_mh_steps() -> usize {
    5
}

impl SaemConfig {
    pub fn new(iterations: usize, burn_in: usize, chains: usize, p: usize, seed: u64) -> Self {
        Self { iterations, burn_in, chains, mh_steps: default_mh_steps(), proposal_scale: vec![0.5; p], seed }
    }

    pub fn validate(&self, p: usize) -> Result<()> {
        if self.burn_in < 1 || self.burn_in >= self.iterations {
            return Err(SnmmError::Config(format!(
                "need 1 <= burn_in < iterations, got burn_in={} iterations={}",
                self.burn_in, self.iterations
            )));
        }
        if self.chains == 0 || self.mh_steps == 0 {
            return Err(SnmmError::Config("chains and mh_steps must be at least 1".into()));
        }
        if self.proposal_scale.len() != p {
            return Err(SnmmError::Config(format!(
                "proposal_scale has {} entries, model has p = {p}",
                self.proposal_scale.len()
            )));
        }
        if self.proposal_scale.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(SnmmError::Config("proposal_scale entries must be positive".into()));
        }
        Ok(())
    }
}

/// `gamma_k = 1` for `k <= burn_in`, `1 / (k - burn_in)` afterwards.
pub fn step_size(k: usize, cfg: &SaemConfig) -> f64 {
    if k <= cfg.burn_in {
        1.0
    } else {
        1.0 / (k - cfg.burn_in) as f64
    }
}

const TARGET_ACCEPT_LOW: f64 = 0.25;
const TARGET_ACCEPT_HIGH: f64 = 0.45;

/// Random-walk scales, one per individual and coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct ProposalScales {
    pub scales: Vec<Vec<f64>>,
}

impl ProposalScales {
    pub fn uniform(n_individuals: usize, per_coordinate: &[f64]) -> Self {
        Self { scales: vec![per_coordinate.to_vec(); n_individuals] }
    }

    /// Nudge each scale toward the target acceptance band.
    fn adapt(&mut self, counts: &AcceptanceCounts) {
        for (i, row) in self.scales.iter_mut().enumerate() {
            for (r, s) in row.iter_mut().enumerate() {
                let proposed = counts.proposed[i][r];
                if proposed == 0 {
                    continue;
                }
                let rate = counts.accepted[i][r] as f64 / proposed as f64;
                if rate < TARGET_ACCEPT_LOW {
                    *s *= 0.8;
                } else if rate > TARGET_ACCEPT_HIGH {
                    *s *= 1.25;
                }
            }
        }
    }
}

/// Accepted and proposed moves per individual and coordinate.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AcceptanceCounts {
    pub accepted: Vec<Vec<u64>>,
    pub proposed: Vec<Vec<u64>>,
}

impl AcceptanceCounts {
    pub fn zeros(n_individuals: usize, p: usize) -> Self {
        Self { accepted: vec![vec![0; p]; n_individuals], proposed: vec![vec![0; p]; n_individuals] }
    }

    fn add(&mut self, other: &AcceptanceCounts) {
        for (a, b) in self.accepted.iter_mut().zip(&other.accepted) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        for (a, b) in self.proposed.iter_mut().zip(&other.proposed) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    /// Overall acceptance rate of individual `i`.
    pub fn rate(&self, i: usize) -> f64 {
        let acc: u64 = self.accepted[i].iter().sum();
        let prop: u64 = self.proposed[i].iter().sum();
        if prop == 0 { 0.0 } else { acc as f64 / prop as f64 }
    }
}

/// Target `p(y_i | phi_i) p(phi_i)` for one individual, with its own prior mean.
pub(crate) struct PhiTarget<'a> {
    pub data: &'a LongitudinalDataset,
    pub model: &'a SnmmModel,
    pub factor: &'a GammaFactor,
    pub sigma2: f64,
    pub f: &'a dyn Curve,
}

impl PhiTarget<'_> {
    /// Half the negative log target, split as (rss, prior quadratic form).
    fn terms(&self, i: usize, phi: &DVector<f64>, mean: &DVector<f64>) -> (f64, f64) {
        let rss = self.model.individual_rss(&self.data.individuals()[i], phi.as_slice(), self.f);
        (rss, self.factor.quad(&(phi - mean)))
    }

    /// Componentwise random-walk sweeps for every individual.
    pub fn sweep(
        &self,
        phi: &mut RandomEffects,
        means: &[DVector<f64>],
        scales: &ProposalScales,
        sweeps: usize,
        rng: &mut StreamRng,
    ) -> Result<AcceptanceCounts> {
        let p = self.model.p();
        let mut counts = AcceptanceCounts::zeros(phi.len(), p);
        for (i, current) in phi.phi.iter_mut().enumerate() {
            let (mut rss, mut quad) = self.terms(i, current, &means[i]);
            let mut finite = 0usize;
            for _ in 0..sweeps {
                for r in 0..p {
                    let step: f64 = rng.sample(StandardNormal);
                    let mut proposal = current.clone();
                    proposal[r] += scales.scales[i][r] * step;
                    let (rss_new, quad_new) = self.terms(i, &proposal, &means[i]);
                    let u: f64 = rng.random();
                    counts.proposed[i][r] += 1;
                    if !(rss_new.is_finite() && quad_new.is_finite()) {
                        continue;
                    }
                    finite += 1;
                    let log_ratio = -0.5 * ((rss_new - rss) / self.sigma2 + (quad_new - quad));
                    let accept = !(rss.is_finite() && quad.is_finite()) || u.ln() < log_ratio || log_ratio.is_nan();
                    if accept {
                        *current = proposal;
                        rss = rss_new;
                        quad = quad_new;
                        counts.accepted[i][r] += 1;
                    }
                }
            }
            if finite == 0 {
                return Err(SnmmError::Sampler {
                    individual: self.data.individuals()[i].id.clone(),
                    message: format!("all {} proposals gave a non-finite density", sweeps * p),
                });
            }
        }
        Ok(counts)
    }
}

/// One simulation step: `sweeps` componentwise Metropolis sweeps targeting
/// `p(phi_i | y_i; theta)` for every individual.
#[allow(clippy::too_many_arguments)]
pub fn mh_sample_phi(
    data: &LongitudinalDataset,
    model: &SnmmModel,
    theta: &ThetaEstimate,
    f: &dyn Curve,
    chain: &mut RandomEffects,
    scales: &ProposalScales,
    sweeps: usize,
    rng: &mut StreamRng,
) -> Result<AcceptanceCounts> {
    let factor = GammaFactor::new(&theta.gamma)?;
    let means = model.prior_means(&theta.beta);
    PhiTarget { data, model, factor: &factor, sigma2: theta.sigma2, f }.sweep(chain, &means, scales, sweeps, rng)
}

/// State of one chain.
#[derive(Debug, Clone)]
pub struct ChainState {
    pub phi: RandomEffects,
    /// Sampled fixed effects; only used by the REML engine.
    pub beta: Option<DVector<f64>>,
    pub scales: ProposalScales,
    pub counts: AcceptanceCounts,
    rng: StreamRng,
}

#[derive(Debug, Clone)]
pub struct ChainEnsemble {
    pub chains: Vec<ChainState>,
}

impl ChainEnsemble {
    /// Start every chain at `phi_i = A_i beta0` with its own random stream.
    pub fn initialize(model: &SnmmModel, beta0: &DVector<f64>, cfg: &SaemConfig, with_beta: bool) -> Self {
        let n = model.n_individuals();
        let chains = (0..cfg.chains)
            .map(|l| ChainState {
                phi: RandomEffects::at_prior_mean(model, beta0),
                beta: with_beta.then(|| beta0.clone()),
                scales: ProposalScales::uniform(n, &cfg.proposal_scale),
                counts: AcceptanceCounts::zeros(n, model.p()),
                rng: rng::stream(cfg.seed, rng::streams::CHAIN_BASE + l as u64),
            })
            .collect();
        Self { chains }
    }

    pub fn len(&self) -> usize {
        self.chains.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chains.is_empty()
    }

    pub fn phis(&self) -> Vec<&RandomEffects> {
        self.chains.iter().map(|c| &c.phi).collect()
    }

    /// Acceptance rate of each individual pooled over chains and the whole run.
    pub fn acceptance_rates(&self) -> Vec<f64> {
        let Some(first) = self.chains.first() else { return vec![] };
        let mut total = AcceptanceCounts::zeros(first.counts.accepted.len(), first.counts.accepted[0].len());
        for c in &self.chains {
            total.add(&c.counts);
        }
        (0..total.accepted.len()).map(|i| total.rate(i)).collect()
    }

    /// Run the simulation step on every chain in parallel. `means_of` gives
    /// the prior means for a chain.
    pub(crate) fn simulate<F>(
        &mut self,
        iteration: usize,
        adapt: bool,
        sweeps: usize,
        targets: &[PhiTarget<'_>],
        means_of: F,
    ) -> Result<()>
    where
        F: Fn(&ChainState) -> Vec<DVector<f64>> + Sync,
    {
        self.chains
            .par_iter_mut()
            .zip(targets.par_iter())
            .enumerate()
            .map(|(l, (chain, target))| {
                let means = means_of(chain);
                let counts = target
                    .sweep(&mut chain.phi, &means, &chain.scales, sweeps, &mut chain.rng)
                    .map_err(|e| SnmmError::Chain { iteration, chain: l, source: Box::new(e) })?;
                if adapt {
                    chain.scales.adapt(&counts);
                }
                chain.counts.add(&counts);
                Ok(())
            })
            .collect::<Result<Vec<()>>>()?;
        Ok(())
    }

    pub(crate) fn rng_mut(&mut self, l: usize) -> &mut StreamRng {
        &mut self.chains[l].rng
    }
}

/// Running sufficient statistics of the complete model.
#[derive(Debug, Clone, PartialEq)]
pub struct SufficientStats {
    /// Per-individual average of `phi_i`.
    pub s1: Vec<DVector<f64>>,
    /// Average of `sum_i phi_i phi_i'`.
    pub s2: DMatrix<f64>,
    /// Average residual sum of squares.
    pub s3: f64,
}

impl SufficientStats {
    pub fn zeros(n_individuals: usize, p: usize) -> Self {
        Self { s1: vec![DVector::zeros(p); n_individuals], s2: DMatrix::zeros(p, p), s3: 0.0 }
    }

    /// Average of the statistics over chains, each chain with its own shape.
    pub fn chain_average(
        chains: &[&RandomEffects],
        data: &LongitudinalDataset,
        model: &SnmmModel,
        shapes: &[Arc<dyn Curve>],
    ) -> Self {
        let p = model.p();
        let m = chains.len() as f64;
        let mut out = Self::zeros(data.n_individuals(), p);
        for (phi, f) in chains.iter().zip(shapes) {
            for (i, v) in phi.phi.iter().enumerate() {
                out.s1[i] += v;
                out.s2 += v * v.transpose();
            }
            out.s3 += model.rss(data, phi, f.as_ref());
        }
        out.s1.iter_mut().for_each(|v| *v /= m);
        out.s2 /= m;
        out.s2 = symmetrize(&out.s2);
        out.s3 /= m;
        out
    }

    /// `new = (1 - gamma_k) old + gamma_k target`.
    pub fn mix(&self, target: &SufficientStats, gamma_k: f64) -> Self {
        let keep = 1.0 - gamma_k;
        Self {
            s1: self.s1.iter().zip(&target.s1).map(|(a, b)| a * keep + b * gamma_k).collect(),
            s2: symmetrize(&(&self.s2 * keep + &target.s2 * gamma_k)),
            s3: keep * self.s3 + gamma_k * target.s3,
        }
    }
}

/// Stochastic-approximation update of the statistics from the current chains.
pub fn update_stats(
    stats: &SufficientStats,
    chains: &[&RandomEffects],
    data: &LongitudinalDataset,
    model: &SnmmModel,
    shapes: &[Arc<dyn Curve>],
    gamma_k: f64,
) -> SufficientStats {
    stats.mix(&SufficientStats::chain_average(chains, data, model, shapes), gamma_k)
}

pub(crate) fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Symmetrize, apply the covariance constraint, and floor the eigenvalues
/// at `1e-8 * trace / p`.
pub fn repair_gamma(model: &SnmmModel, gamma: DMatrix<f64>) -> DMatrix<f64> {
    let mut g = symmetrize(&gamma);
    model.constrain(&mut g);
    let p = g.nrows();
    let mut floor = 1e-8 * g.trace() / p as f64;
    if !(floor > 0.0) {
        floor = 1e-12;
    }
    let eig = g.clone().symmetric_eigen();
    if eig.eigenvalues.min() >= floor {
        return g;
    }
    warn!("Gamma not positive definite (min eigenvalue {:e}); flooring at {:e}", eig.eigenvalues.min(), floor);
    let clamped = eig.eigenvalues.map(|v| v.max(floor));
    let q = &eig.eigenvectors;
    symmetrize(&(q * DMatrix::from_diagonal(&clamped) * q.transpose()))
}

/// Generalized-least-squares `beta` given per-individual targets, and the
/// normal-equations matrix `sum_i A_i' Gamma^-1 A_i`.
pub(crate) fn gls_beta(
    model: &SnmmModel,
    gamma_inv: &DMatrix<f64>,
    targets: &[DVector<f64>],
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let q = model.q();
    let mut h = DMatrix::zeros(q, q);
    let mut rhs = DVector::zeros(q);
    for (a, t) in model.design().iter().zip(targets) {
        let at_ginv = a.transpose() * gamma_inv;
        h += &at_ginv * a;
        rhs += at_ginv * t;
    }
    let h = symmetrize(&h);
    let chol = h
        .clone()
        .cholesky()
        .ok_or_else(|| SnmmError::Estimation("sum_i A_i' Gamma^-1 A_i is singular".into()))?;
    Ok((chol.solve(&rhs), h))
}

/// Closed-form M-step: `beta` by GLS with the previous `Gamma`, then `Gamma`
/// and `sigma2` from the statistics.
pub fn m_step_ml(
    stats: &SufficientStats,
    model: &SnmmModel,
    theta_prev: &ThetaEstimate,
    data: &LongitudinalDataset,
) -> Result<ThetaEstimate> {
    let factor = GammaFactor::new(&theta_prev.gamma)?;
    let (beta, _) = gls_beta(model, &factor.inverse, &stats.s1)?;
    let p = model.p();
    let mut cross = DMatrix::zeros(p, p);
    for (mean, s1) in model.prior_means(&beta).iter().zip(&stats.s1) {
        cross += mean * s1.transpose() + s1 * mean.transpose() - mean * mean.transpose();
    }
    let gamma = (&stats.s2 - cross) / data.n_individuals() as f64;
    Ok(ThetaEstimate {
        beta,
        gamma: repair_gamma(model, gamma),
        sigma2: stats.s3 / data.n_total() as f64,
    })
}

/// Supplies the shape used by each chain at an iteration.
pub trait ShapeProvider: Send {
    /// Shapes `f^(k,l)` for iteration `k`, one per chain, given the current
    /// chain states and `sigma2^(k)`.
    fn shapes(
        &mut self,
        iteration: usize,
        data: &LongitudinalDataset,
        model: &SnmmModel,
        chains: &ChainEnsemble,
        sigma2: f64,
    ) -> Result<Vec<Arc<dyn Curve>>>;

    /// Runs after the simulation step. May move the chains along a direction
    /// that leaves every `g` unchanged and return the matching shapes.
    fn recenter(
        &mut self,
        _iteration: usize,
        _model: &SnmmModel,
        _chains: &mut ChainEnsemble,
        shapes: Vec<Arc<dyn Curve>>,
    ) -> Result<Vec<Arc<dyn Curve>>> {
        Ok(shapes)
    }
}

/// The same known shape for every chain and iteration.
pub struct FixedShape(pub Arc<dyn Curve>);

impl ShapeProvider for FixedShape {
    fn shapes(
        &mut self,
        _iteration: usize,
        _data: &LongitudinalDataset,
        _model: &SnmmModel,
        chains: &ChainEnsemble,
        _sigma2: f64,
    ) -> Result<Vec<Arc<dyn Curve>>> {
        Ok(vec![self.0.clone(); chains.len()])
    }
}

/// Parameter path, one row per iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Trace {
    /// Columns: `iteration`, `{beta_prefix}_1..q`, `gamma_i_j` for `i <= j`, `sigma2`.
    pub fn new(q: usize, p: usize, beta_prefix: &str) -> Self {
        let mut columns = vec!["iteration".to_string()];
        columns.extend((1..=q).map(|j| format!("{beta_prefix}_{j}")));
        for i in 1..=p {
            for j in i..=p {
                columns.push(format!("gamma_{i}_{j}"));
            }
        }
        columns.push("sigma2".into());
        Self { columns, rows: Vec::new() }
    }

    pub fn push(&mut self, iteration: usize, theta: &ThetaEstimate) {
        let mut row = vec![iteration as f64];
        row.extend(theta.beta.iter());
        let p = theta.gamma.nrows();
        for i in 0..p {
            for j in i..p {
                row.push(theta.gamma[(i, j)]);
            }
        }
        row.push(theta.sigma2);
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let idx = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r[idx]).collect())
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(&self.columns)?;
        for row in &self.rows {
            w.write_record(row.iter().enumerate().map(|(c, v)| {
                if c == 0 { format!("{}", *v as u64) } else { format!("{v}") }
            }))?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SaemRun {
    pub theta: ThetaEstimate,
    pub chains: ChainEnsemble,
    pub trace: Trace,
}

pub(crate) fn check_inputs(
    data: &LongitudinalDataset,
    model: &SnmmModel,
    init: &ThetaEstimate,
    cfg: &SaemConfig,
) -> Result<()> {
    model.check_data(data)?;
    cfg.validate(model.p())?;
    init.validate()?;
    if init.beta.len() != model.q() || init.gamma.nrows() != model.p() {
        return Err(SnmmError::Config(format!(
            "initial theta has dim(beta)={} and Gamma {}x{}, model has q={} p={}",
            init.beta.len(),
            init.gamma.nrows(),
            init.gamma.ncols(),
            model.q(),
            model.p()
        )));
    }
    Ok(())
}

pub(crate) fn shapes_for(
    provider: &mut dyn ShapeProvider,
    k: usize,
    data: &LongitudinalDataset,
    model: &SnmmModel,
    chains: &ChainEnsemble,
    sigma2: f64,
) -> Result<Vec<Arc<dyn Curve>>> {
    let shapes = provider.shapes(k, data, model, chains, sigma2)?;
    if shapes.len() != chains.len() {
        return Err(SnmmError::Config(format!(
            "shape provider returned {} shapes for {} chains",
            shapes.len(),
            chains.len()
        )));
    }
    Ok(shapes)
}

/// SAEM for maximum likelihood. The final `theta` is the last iterate.
pub fn run_saem_ml(
    data: &LongitudinalDataset,
    model: &SnmmModel,
    init: &ThetaEstimate,
    provider: &mut dyn ShapeProvider,
    cfg: &SaemConfig,
) -> Result<SaemRun> {
    check_inputs(data, model, init, cfg)?;
    let mut theta = init.clone();
    let mut chains = ChainEnsemble::initialize(model, &init.beta, cfg, false);
    let mut stats = SufficientStats::zeros(data.n_individuals(), model.p());
    let mut trace = Trace::new(model.q(), model.p(), "beta");

    for k in 1..=cfg.iterations {
        let shapes = shapes_for(provider, k, data, model, &chains, theta.sigma2)?;
        let factor = GammaFactor::new(&theta.gamma)?;
        let targets: Vec<PhiTarget<'_>> = shapes
            .iter()
            .map(|f| PhiTarget { data, model, factor: &factor, sigma2: theta.sigma2, f: f.as_ref() })
            .collect();
        let means = model.prior_means(&theta.beta);
        chains.simulate(k, k <= cfg.burn_in, cfg.mh_steps, &targets, |_| means.clone())?;
        drop(targets);
        let shapes = provider.recenter(k, model, &mut chains, shapes)?;

        let gamma_k = step_size(k, cfg);
        stats = update_stats(&stats, &chains.phis(), data, model, &shapes, gamma_k);
        theta = m_step_ml(&stats, model, &theta, data)
            .map_err(|e| SnmmError::Chain { iteration: k, chain: 0, source: Box::new(e) })?;
        debug!("saem-ml k={k} sigma2={:.5}", theta.sigma2);
        trace.push(k, &theta);
    }
    Ok(SaemRun { theta, chains, trace })
}
