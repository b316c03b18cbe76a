//! LASSO-SAEM: each iteration refits the shape function per chain by a
//! weighted LASSO over a dictionary, then runs one SAEM (ML or REML) step
//! with every chain using its own fit. The fits from the last `L0`
//! iterations form an ensemble that gives the point estimate of `f` and a
//! pointwise band.

use std::collections::VecDeque;
use std::io::Write;
use std::sync::Arc;

use log::{debug, warn};
use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::dictionary::{transform_to_regression, DictionaryBasis, Expansion};
use crate::error::{Result, SnmmError};
use crate::lasso::{penalties_from_norms, solve_problem, LassoFit, LassoProblem, PenaltyVariant};
use crate::model::{Curve, LongitudinalDataset, RandomEffects, SnmmModel, ThetaEstimate};
use crate::reml::run_saem_reml;
use crate::saem::{run_saem_ml, ChainEnsemble, SaemConfig, ShapeProvider, Trace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum EstimationMode {
    Ml,
    #[default]
    Reml,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LassoSaemConfig {
    pub saem: SaemConfig,
    pub mode: EstimationMode,
    /// Penalty constant `gamma` in `r_j = sigma sqrt(gamma ln M / n) ||phi_j||_n`.
    pub gamma: f64,
    pub penalty: PenaltyVariant,
    /// Iterations retained in the ensemble; `None` keeps every post-burn-in iteration.
    pub l0: Option<usize>,
    /// KKT tolerance relative to `max(r_max, max_j |beta^_j|)`.
    pub lasso_tol: f64,
    pub lasso_max_iter: usize,
    /// Hold each chain's mean log-scale effect at its starting value by
    /// moving scale between `phi` and `f` (see [`LassoShapeProvider`]).
    pub recenter_scale: bool,
}

impl LassoSaemConfig {
    pub fn new(saem: SaemConfig, mode: EstimationMode, gamma: f64) -> Self {
        Self {
            saem,
            mode,
            gamma,
            penalty: PenaltyVariant::Standard,
            l0: None,
            lasso_tol: 1e-6,
            lasso_max_iter: 100_000,
            recenter_scale: true,
        }
    }

    pub fn retained(&self) -> usize {
        self.l0.unwrap_or(self.saem.iterations - self.saem.burn_in)
    }

    pub fn validate(&self, p: usize) -> Result<()> {
        self.saem.validate(p)?;
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(SnmmError::Config(format!("gamma must be positive, got {}", self.gamma)));
        }
        let l0 = self.retained();
        if l0 == 0 || l0 > self.saem.iterations {
            return Err(SnmmError::Config(format!("L0 = {l0} must lie in 1..={}", self.saem.iterations)));
        }
        if !(self.lasso_tol > 0.0) || self.lasso_max_iter == 0 {
            return Err(SnmmError::Config("lasso tolerance and iteration cap must be positive".into()));
        }
        Ok(())
    }
}

/// Coefficient vectors `f^{(k,l)}` from the last `L0` iterations of all chains.
#[derive(Debug, Clone)]
pub struct FunctionEnsemble {
    dict: Arc<DictionaryBasis>,
    l0: usize,
    chains: usize,
    /// Total and stabilization iteration counts of the run that filled it.
    pub iterations: usize,
    pub stabilization: usize,
    members: VecDeque<(usize, usize, DVector<f64>)>,
}

impl FunctionEnsemble {
    pub fn new(dict: Arc<DictionaryBasis>, l0: usize, chains: usize, iterations: usize, stabilization: usize) -> Self {
        Self { dict, l0, chains, iterations, stabilization, members: VecDeque::with_capacity(l0 * chains) }
    }

    /// Appends one iteration's coefficient vectors in chain order, dropping
    /// the oldest iteration when the buffer is full.
    pub fn push_iteration(&mut self, iteration: usize, coefficients: &[DVector<f64>]) -> Result<()> {
        if coefficients.len() != self.chains {
            return Err(SnmmError::Config(format!("{} fits for {} chains", coefficients.len(), self.chains)));
        }
        if coefficients.iter().any(|c| c.len() != self.dict.len()) {
            return Err(SnmmError::Config("coefficient vector does not match the dictionary".into()));
        }
        for (l, c) in coefficients.iter().enumerate() {
            self.members.push_back((iteration, l, c.clone()));
        }
        while self.members.len() > self.l0 * self.chains {
            self.members.pop_front();
        }
        Ok(())
    }

    pub fn dict(&self) -> &Arc<DictionaryBasis> {
        &self.dict
    }

    pub fn l0(&self) -> usize {
        self.l0
    }

    pub fn chains(&self) -> usize {
        self.chains
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// `(iteration, chain, coefficients)` in insertion order.
    pub fn members(&self) -> impl Iterator<Item = (usize, usize, &DVector<f64>)> {
        self.members.iter().map(|(k, l, c)| (*k, *l, c))
    }

    pub fn mean_coefficients(&self) -> Result<DVector<f64>> {
        if self.members.is_empty() {
            return Err(SnmmError::Estimation("function ensemble is empty".into()));
        }
        let mut sum = DVector::zeros(self.dict.len());
        for (_, _, c) in &self.members {
            sum += c;
        }
        Ok(sum / self.members.len() as f64)
    }

    pub fn mean_expansion(&self) -> Result<Expansion> {
        Ok(self.dict.expansion(&self.mean_coefficients()?))
    }

    /// Atom with the largest absolute averaged coefficient.
    pub fn leading_atom(&self) -> Result<Option<usize>> {
        let mean = self.mean_coefficients()?;
        Ok(mean
            .iter()
            .enumerate()
            .filter(|(_, v)| **v != 0.0)
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
            .map(|(j, _)| j))
    }

    /// Per atom: fraction of members selecting it and its mean coefficient.
    pub fn atom_frequencies(&self) -> Result<Vec<AtomFrequency>> {
        let mean = self.mean_coefficients()?;
        let total = self.members.len() as f64;
        Ok((0..self.dict.len())
            .map(|j| AtomFrequency {
                index: j,
                descriptor: self.dict.atoms()[j].descriptor.clone(),
                selected: self.members.iter().filter(|(_, _, c)| c[j] != 0.0).count() as f64 / total,
                mean_coefficient: mean[j],
            })
            .collect())
    }

    fn evaluations(&self, grid: &[f64]) -> Vec<Vec<f64>> {
        let table: Vec<Vec<f64>> = (0..self.dict.len()).map(|j| grid.iter().map(|t| self.dict.eval(j, *t)).collect()).collect();
        self.members
            .iter()
            .map(|(_, _, c)| {
                let mut v = vec![0.0; grid.len()];
                for (j, cj) in c.iter().enumerate().filter(|(_, cj)| **cj != 0.0) {
                    for (vi, a) in v.iter_mut().zip(&table[j]) {
                        *vi += cj * a;
                    }
                }
                v
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AtomFrequency {
    pub index: usize,
    pub descriptor: String,
    pub selected: f64,
    pub mean_coefficient: f64,
}

pub fn write_atom_frequencies<W: Write>(rows: &[AtomFrequency], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// `f^` on `grid`: the averaged coefficient vector evaluated pointwise.
pub fn point_estimate(ensemble: &FunctionEnsemble, grid: &[f64]) -> Result<Vec<f64>> {
    let f = ensemble.mean_expansion()?;
    Ok(grid.iter().map(|t| f.eval(*t)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConfidenceBand {
    pub grid: Vec<f64>,
    pub center: Vec<f64>,
    pub half_width: Vec<f64>,
    pub alpha: f64,
}

impl ConfidenceBand {
    pub fn lower(&self) -> Vec<f64> {
        self.center.iter().zip(&self.half_width).map(|(c, h)| c - h).collect()
    }

    pub fn upper(&self) -> Vec<f64> {
        self.center.iter().zip(&self.half_width).map(|(c, h)| c + h).collect()
    }

    /// Columns `x, center, lo, hi`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["x", "center", "lo", "hi"])?;
        for i in 0..self.grid.len() {
            let (c, h) = (self.center[i], self.half_width[i]);
            w.write_record([self.grid[i], c, c - h, c + h].map(|v| v.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }

    /// Line plot of the center with a shaded band; `truth` is drawn dashed.
    pub fn write_svg<W: Write>(&self, truth: Option<&[f64]>, mut out: W) -> Result<()> {
        let (width, height, pad) = (640.0, 400.0, 40.0);
        let lo = self.lower();
        let hi = self.upper();
        let mut ys: Vec<f64> = lo.iter().chain(&hi).copied().collect();
        if let Some(t) = truth {
            ys.extend_from_slice(t);
        }
        let ymin = ys.iter().copied().fold(f64::INFINITY, f64::min);
        let ymax = ys.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let yspan = if ymax > ymin { ymax - ymin } else { 1.0 };
        let x0 = self.grid.first().copied().unwrap_or(0.0);
        let x1 = self.grid.last().copied().unwrap_or(1.0);
        let xspan = if x1 > x0 { x1 - x0 } else { 1.0 };
        let px = |x: f64| pad + (x - x0) / xspan * (width - 2.0 * pad);
        let py = |y: f64| height - pad - (y - ymin) / yspan * (height - 2.0 * pad);
        let path = |vals: &[f64]| -> String {
            self.grid.iter().zip(vals).map(|(x, y)| format!("{:.2},{:.2}", px(*x), py(*y))).collect::<Vec<_>>().join(" ")
        };
        let mut polygon = path(&hi);
        let lower_back: Vec<String> =
            self.grid.iter().zip(&lo).rev().map(|(x, y)| format!("{:.2},{:.2}", px(*x), py(*y))).collect();
        polygon.push(' ');
        polygon.push_str(&lower_back.join(" "));

        writeln!(out, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">"#)?;
        writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#)?;
        writeln!(out, r##"<polygon points="{polygon}" fill="#9ecae1" fill-opacity="0.6" stroke="none"/>"##)?;
        writeln!(out, r##"<polyline points="{}" fill="none" stroke="#08519c" stroke-width="2"/>"##, path(&self.center))?;
        if let Some(t) = truth {
            writeln!(out, r#"<polyline points="{}" fill="none" stroke="black" stroke-dasharray="6,4"/>"#, path(t))?;
        }
        writeln!(
            out,
            r#"<text x="{pad}" y="{}" font-size="12">x in [{x0:.3}, {x1:.3}], y in [{ymin:.3}, {ymax:.3}], alpha = {}</text>"#,
            height - 10.0,
            self.alpha
        )?;
        writeln!(out, "</svg>")?;
        Ok(())
    }
}

/// Pointwise band `f^(x) +- z_{alpha/2} sqrt(S^2(x) / (m L0))`, where `S^2`
/// is the unbiased variance of the ensemble members at `x`.
pub fn confidence_band(ensemble: &FunctionEnsemble, grid: &[f64], alpha: f64) -> Result<ConfidenceBand> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(SnmmError::Config(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    let size = ensemble.len();
    if size < 2 {
        return Err(SnmmError::Estimation(format!("a band needs at least 2 ensemble members, have {size}")));
    }
    let center = point_estimate(ensemble, grid)?;
    let z = Normal::standard().inverse_cdf(1.0 - alpha / 2.0);
    let evals = ensemble.evaluations(grid);
    let half_width = (0..grid.len())
        .map(|i| {
            let s2 = evals.iter().map(|v| (v[i] - center[i]).powi(2)).sum::<f64>() / (size - 1) as f64;
            z * (s2 / size as f64).sqrt()
        })
        .collect();
    Ok(ConfidenceBand { grid: grid.to_vec(), center, half_width, alpha })
}

/// Trapezoidal `int (f^ - f)^2` over `grid`.
pub fn ise(grid: &[f64], f_hat: &[f64], f_true: &[f64]) -> f64 {
    assert!(grid.len() >= 2 && f_hat.len() == grid.len() && f_true.len() == grid.len(), "ise needs matching grids of length >= 2");
    let d2: Vec<f64> = f_hat.iter().zip(f_true).map(|(a, b)| (a - b).powi(2)).collect();
    grid.windows(2).zip(d2.windows(2)).map(|(x, d)| 0.5 * (x[1] - x[0]) * (d[0] + d[1])).sum()
}

pub fn uniform_grid(lo: f64, hi: f64, points: usize) -> Vec<f64> {
    assert!(points >= 2);
    (0..points).map(|i| lo + (hi - lo) * i as f64 / (points - 1) as f64).collect()
}

/// Refits `f` per chain by LASSO at every SAEM iteration.
///
/// The LASSO shrinks `f` toward zero by a fixed fraction each time it is
/// refit, and when `b = e^{phi_k} b_0` the sampler undoes that by raising
/// `phi_k`, so the split of `b f` between the two drifts without bound.
/// With recentering on, after each simulation step every chain is moved
/// along `phi_k -> phi_k - s`, `f -> e^s f` (and `beta` along the matching
/// fixed-effect direction), which leaves `g` and `eta` unchanged and keeps
/// the chain mean of `phi_k` at its starting value.
pub struct LassoShapeProvider {
    dict: Arc<DictionaryBasis>,
    scale: Option<ScaleGauge>,
    coefficients: Vec<DVector<f64>>,
    gamma: f64,
    penalty: PenaltyVariant,
    tol: f64,
    max_iter: usize,
    keep_from: usize,
    warm: Vec<Option<DVector<f64>>>,
    last_fits: Vec<LassoFit>,
    ensemble: FunctionEnsemble,
}

#[derive(Debug, Clone)]
struct ScaleGauge {
    coordinate: usize,
    anchor: f64,
    /// `beta` shift per unit shift of `phi_k`.
    beta_direction: DVector<f64>,
}

impl ScaleGauge {
    fn new(model: &SnmmModel, beta0: &DVector<f64>) -> Result<Option<Self>> {
        let Some(k) = model.structure.log_scale_coordinate() else {
            return Ok(None);
        };
        let means = model.prior_means(beta0);
        let anchor = means.iter().map(|m| m[k]).sum::<f64>() / means.len() as f64;
        let q = model.q();
        let mut ata = nalgebra::DMatrix::zeros(q, q);
        let mut atk = DVector::zeros(q);
        for a in model.design() {
            ata += a.tr_mul(a);
            atk += a.row(k).transpose();
        }
        let beta_direction = ata
            .svd(true, true)
            .solve(&atk, 1e-12)
            .map_err(|e| SnmmError::Numerical(format!("fixed-effect direction for recentering: {e}")))?;
        Ok(Some(Self { coordinate: k, anchor, beta_direction }))
    }
}

impl LassoShapeProvider {
    /// Enables scale recentering for `model`, anchored at the mean of
    /// `A_i beta0` in the log-scale coordinate.
    pub fn with_recentering(mut self, model: &SnmmModel, beta0: &DVector<f64>) -> Result<Self> {
        self.scale = ScaleGauge::new(model, beta0)?;
        Ok(self)
    }

    pub fn new(dict: Arc<DictionaryBasis>, cfg: &LassoSaemConfig) -> Self {
        let l0 = cfg.retained();
        let chains = cfg.saem.chains;
        Self {
            gamma: cfg.gamma,
            penalty: cfg.penalty,
            tol: cfg.lasso_tol,
            max_iter: cfg.lasso_max_iter,
            keep_from: cfg.saem.iterations + 1 - l0,
            scale: None,
            coefficients: Vec::new(),
            warm: vec![None; chains],
            last_fits: Vec::new(),
            ensemble: FunctionEnsemble::new(
                Arc::clone(&dict),
                l0,
                chains,
                cfg.saem.iterations,
                cfg.saem.iterations - cfg.saem.burn_in,
            ),
            dict,
        }
    }

    fn fit_chain(
        &self,
        data: &LongitudinalDataset,
        model: &SnmmModel,
        chains: &ChainEnsemble,
        l: usize,
        sigma2: f64,
    ) -> Result<LassoFit> {
        let design = transform_to_regression(data, model, &chains.chains[l].phi, sigma2)?;
        let problem = LassoProblem::new(&self.dict, &design);
        let penalties = penalties_from_norms(&problem.norms(), design.sigma, self.gamma, design.len(), self.penalty)?;
        let scale = penalties.r_max().max(problem.beta_hat.amax());
        let tol = if scale > 0.0 { self.tol * scale } else { self.tol };
        solve_problem(&problem, &penalties.r, tol, self.max_iter, self.warm[l].as_ref())
    }
}

impl ShapeProvider for LassoShapeProvider {
    fn shapes(
        &mut self,
        iteration: usize,
        data: &LongitudinalDataset,
        model: &SnmmModel,
        chains: &ChainEnsemble,
        sigma2: f64,
    ) -> Result<Vec<Arc<dyn Curve>>> {
        let this = &*self;
        let fits: Vec<LassoFit> = (0..chains.len())
            .into_par_iter()
            .map(|l| {
                this.fit_chain(data, model, chains, l, sigma2)
                    .map_err(|e| SnmmError::Chain { iteration, chain: l, source: Box::new(e) })
            })
            .collect::<Result<_>>()?;
        let coefficients: Vec<DVector<f64>> = fits.iter().map(|f| f.lambda_hat.clone()).collect();
        if iteration >= self.keep_from {
            self.ensemble.push_iteration(iteration, &coefficients)?;
        }
        debug!(
            "lasso k={iteration} active={:?}",
            fits.iter().map(|f| f.active_set.len()).collect::<Vec<_>>()
        );
        self.warm = coefficients.iter().cloned().map(Some).collect();
        let shapes = coefficients.iter().map(|c| Arc::new(self.dict.expansion(c)) as Arc<dyn Curve>).collect();
        self.coefficients = coefficients;
        self.last_fits = fits;
        Ok(shapes)
    }

    fn recenter(
        &mut self,
        _iteration: usize,
        _model: &SnmmModel,
        chains: &mut ChainEnsemble,
        shapes: Vec<Arc<dyn Curve>>,
    ) -> Result<Vec<Arc<dyn Curve>>> {
        let Some(gauge) = &self.scale else {
            return Ok(shapes);
        };
        let k = gauge.coordinate;
        let mut out = Vec::with_capacity(shapes.len());
        for (l, chain) in chains.chains.iter_mut().enumerate() {
            let n = chain.phi.phi.len() as f64;
            let s = chain.phi.phi.iter().map(|v| v[k]).sum::<f64>() / n - gauge.anchor;
            for v in chain.phi.phi.iter_mut() {
                v[k] -= s;
            }
            if let Some(beta) = chain.beta.as_mut() {
                *beta -= &gauge.beta_direction * s;
            }
            let coef = &self.coefficients[l] * s.exp();
            self.warm[l] = Some(coef.clone());
            out.push(Arc::new(self.dict.expansion(&coef)) as Arc<dyn Curve>);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone)]
pub struct LassoSaemRun {
    /// For REML, `beta` is the chain average of the final draws.
    pub theta: ThetaEstimate,
    pub ensemble: FunctionEnsemble,
    pub trace: Trace,
    pub last_fits: Vec<LassoFit>,
    pub acceptance_rates: Vec<f64>,
    pub chains: ChainEnsemble,
}

impl LassoSaemRun {
    /// Final random effects averaged over chains.
    pub fn mean_phi(&self) -> RandomEffects {
        let chains = &self.chains.chains;
        let n = chains[0].phi.phi.len();
        RandomEffects::new(
            (0..n)
                .map(|i| chains.iter().map(|c| c.phi.phi[i].clone()).sum::<DVector<f64>>() / chains.len() as f64)
                .collect(),
        )
    }
}

pub fn run_lasso_saem(
    data: &LongitudinalDataset,
    model: &SnmmModel,
    init: &ThetaEstimate,
    dict: Arc<DictionaryBasis>,
    cfg: &LassoSaemConfig,
) -> Result<LassoSaemRun> {
    cfg.validate(model.p())?;
    let mut provider = LassoShapeProvider::new(dict, cfg);
    if cfg.recenter_scale {
        provider = provider.with_recentering(model, &init.beta)?;
    }
    let (theta, trace, chains) = match cfg.mode {
        EstimationMode::Ml => {
            let run = run_saem_ml(data, model, init, &mut provider, &cfg.saem)?;
            (run.theta, run.trace, run.chains)
        }
        EstimationMode::Reml => {
            let run = run_saem_reml(data, model, init, &mut provider, &cfg.saem)?;
            (run.theta, run.trace, run.chains)
        }
    };
    let acceptance_rates = chains.acceptance_rates();
    if acceptance_rates.iter().any(|r| *r < 0.05) {
        warn!("low Metropolis acceptance in some chain: {acceptance_rates:?}");
    }
    Ok(LassoSaemRun { theta, ensemble: provider.ensemble, trace, last_fits: provider.last_fits, acceptance_rates, chains })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dictionary::{build_named_dictionary, DictionarySpec, FamilyBlock};
    use crate::model::{simulate_dataset, ScenarioSpec};
    use crate::rng;
    use proptest::prelude::*;
    use rand::Rng;

    fn small_dict() -> Arc<DictionaryBasis> {
        Arc::new(
            build_named_dictionary(&DictionarySpec::Custom {
                domain: (0.0, 1.0),
                blocks: vec![FamilyBlock::Constant, FamilyBlock::Fourier { harmonics: 2, half_period: false }],
                expected_total: Some(5),
            })
            .unwrap(),
        )
    }

    fn ensemble_of(dict: &Arc<DictionaryBasis>, coefs: &[Vec<f64>], chains: usize) -> FunctionEnsemble {
        let l0 = coefs.len() / chains;
        let mut e = FunctionEnsemble::new(Arc::clone(dict), l0, chains, l0, l0);
        for (k, block) in coefs.chunks(chains).enumerate() {
            let v: Vec<DVector<f64>> = block.iter().map(|c| DVector::from_column_slice(c)).collect();
            e.push_iteration(k + 1, &v).unwrap();
        }
        e
    }

    #[test]
    fn identical_members_give_zero_width() {
        let dict = small_dict();
        let c = vec![0.5, 0.0, 1.0, 0.0, -0.2];
        let e = ensemble_of(&dict, &[c.clone(), c.clone(), c.clone(), c.clone()], 2);
        let grid = uniform_grid(0.0, 1.0, 21);
        let band = confidence_band(&e, &grid, 0.05).unwrap();
        let single = dict.expansion(&DVector::from_vec(c));
        for (i, t) in grid.iter().enumerate() {
            assert!((band.center[i] - single.eval(*t)).abs() < 1e-14);
            assert_eq!(band.half_width[i], 0.0);
        }
    }

    #[test]
    fn opposite_members_cancel() {
        let dict = small_dict();
        let c = vec![0.5, 0.3, 1.0, -0.7, -0.2];
        let neg: Vec<f64> = c.iter().map(|v| -v).collect();
        let e = ensemble_of(&dict, &[c, neg], 1);
        let f = point_estimate(&e, &uniform_grid(0.0, 1.0, 11)).unwrap();
        assert!(f.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn ring_buffer_keeps_last_iterations() {
        let dict = small_dict();
        let mut e = FunctionEnsemble::new(Arc::clone(&dict), 2, 2, 5, 3);
        for k in 1..=5 {
            let v = vec![DVector::from_element(5, k as f64), DVector::from_element(5, -(k as f64))];
            e.push_iteration(k, &v).unwrap();
            assert!(e.len() <= 4);
        }
        let kept: Vec<(usize, usize)> = e.members().map(|(k, l, _)| (k, l)).collect();
        assert_eq!(kept, vec![(4, 0), (4, 1), (5, 0), (5, 1)]);
        assert!(e.push_iteration(6, &[DVector::zeros(5)]).is_err());
    }

    #[test]
    fn empty_and_degenerate_ensembles_error() {
        let dict = small_dict();
        let e = FunctionEnsemble::new(Arc::clone(&dict), 1, 1, 1, 1);
        assert!(point_estimate(&e, &[0.0, 1.0]).is_err());
        let one = ensemble_of(&dict, &[vec![1.0; 5]], 1);
        assert!(point_estimate(&one, &[0.0, 1.0]).is_ok());
        assert!(confidence_band(&one, &[0.0, 1.0], 0.05).is_err());
        let two = ensemble_of(&dict, &[vec![1.0; 5], vec![0.0; 5]], 1);
        assert!(confidence_band(&two, &[0.0, 1.0], 0.0).is_err());
        assert!(confidence_band(&two, &[0.0, 1.0], 1.0).is_err());
    }

    #[test]
    fn band_multiplier_is_the_normal_quantile() {
        let dict = small_dict();
        let e = ensemble_of(&dict, &[vec![1.0, 0.0, 0.0, 0.0, 0.0], vec![-1.0, 0.0, 0.0, 0.0, 0.0]], 1);
        let band = confidence_band(&e, &[0.3], 0.05).unwrap();
        // members 1 and -1: S^2 = 2, so half width = z sqrt(2/2)
        let z = band.half_width[0];
        // bisection on the normal cdf as the oracle
        let cdf = |x: f64| 0.5 * (1.0 + erf_series(x / 2f64.sqrt()));
        let (mut lo, mut hi) = (0.0, 5.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if cdf(mid) < 0.975 { lo = mid } else { hi = mid }
        }
        assert!((z - lo).abs() < 1e-9, "{z} vs {lo}");
        assert!((z - 1.95996).abs() < 1e-5);
    }

    // Maclaurin series, fine for |x| < 3.
    fn erf_series(x: f64) -> f64 {
        let mut term = x;
        let mut sum = x;
        for n in 1..200 {
            term *= -x * x / n as f64;
            sum += term / (2 * n + 1) as f64;
        }
        2.0 / std::f64::consts::PI.sqrt() * sum
    }

    #[test]
    fn band_shrinks_with_replication() {
        let dict = small_dict();
        let base = vec![vec![1.0, 0.2, 0.0, 0.0, 0.0], vec![-0.5, 0.0, 0.3, 0.0, 0.0], vec![0.0, 0.0, 0.0, 1.0, 0.4]];
        let four: Vec<Vec<f64>> = (0..4).flat_map(|_| base.clone()).collect();
        let e1 = ensemble_of(&dict, &base, 1);
        let e4 = ensemble_of(&dict, &four, 1);
        let grid = uniform_grid(0.0, 1.0, 9);
        let b1 = confidence_band(&e1, &grid, 0.1).unwrap();
        let b4 = confidence_band(&e4, &grid, 0.1).unwrap();
        for i in 0..grid.len() {
            // S^2 goes from ss/2 to 4ss/11 and the size from 3 to 12
            let expected = b1.half_width[i] * (2.0f64 / 11.0).sqrt();
            assert!((b4.half_width[i] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn ise_cases() {
        let grid = uniform_grid(0.0, 1.0, 101);
        let f: Vec<f64> = grid.iter().map(|t| t * t).collect();
        assert_eq!(ise(&grid, &f, &f), 0.0);
        let g: Vec<f64> = f.iter().map(|v| v + 1.0).collect();
        assert!((ise(&grid, &g, &f) - 1.0).abs() < 1e-14);
    }

    #[test]
    fn ise_matches_fine_quadrature() {
        let fh = |t: f64| (3.0 * t).sin() + 0.2 * t;
        let ft = |t: f64| t.cos();
        let grid = uniform_grid(0.0, 1.0, 4001);
        let a: Vec<f64> = grid.iter().map(|t| fh(*t)).collect();
        let b: Vec<f64> = grid.iter().map(|t| ft(*t)).collect();
        // composite Simpson on a finer grid
        let n = 20_000;
        let h = 1.0 / n as f64;
        let d2 = |t: f64| (fh(t) - ft(t)).powi(2);
        let simpson = h / 3.0
            * (0..=n)
                .map(|i| {
                    let w = if i == 0 || i == n { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
                    w * d2(i as f64 * h)
                })
                .sum::<f64>();
        assert!((ise(&grid, &a, &b) - simpson).abs() < 1e-6);
    }

    #[test]
    fn band_csv_and_svg() {
        let dict = small_dict();
        let e = ensemble_of(&dict, &[vec![1.0, 0.0, 0.5, 0.0, 0.0], vec![0.8, 0.0, 0.4, 0.0, 0.0]], 1);
        let grid = uniform_grid(0.0, 1.0, 5);
        let band = confidence_band(&e, &grid, 0.05).unwrap();
        let mut buf = Vec::new();
        band.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("x,center,lo,hi\n"));
        assert_eq!(text.lines().count(), 6);
        let mut svg = Vec::new();
        band.write_svg(Some(&[0.0; 5]), &mut svg).unwrap();
        assert!(String::from_utf8(svg).unwrap().contains("<polyline"));
        let freq = e.atom_frequencies().unwrap();
        assert_eq!(freq[0].selected, 1.0);
        assert_eq!(freq[1].selected, 0.0);
        assert_eq!(e.leading_atom().unwrap(), Some(0));
    }

    fn study_like(seed: u64, sigma2: f64) -> (LongitudinalDataset, SnmmModel, ThetaEstimate) {
        let mut spec = ScenarioSpec::study1();
        spec.n_individuals = 12;
        spec.sigma2 = sigma2;
        let (data, _, truth) = simulate_dataset(&spec, seed).unwrap();
        let model = SnmmModel::with_shared_design(
            Arc::new(spec.structure()),
            nalgebra::DMatrix::identity(3, 3),
            data.n_individuals(),
            crate::model::CovarianceStructure::Diagonal,
        )
        .unwrap();
        (data, model, truth)
    }

    fn sine_dict() -> Arc<DictionaryBasis> {
        Arc::new(
            build_named_dictionary(&DictionarySpec::Custom {
                domain: (-0.5, 1.5),
                blocks: vec![FamilyBlock::Fourier { harmonics: 3, half_period: false }],
                expected_total: Some(6),
            })
            .unwrap(),
        )
    }

    #[test]
    fn single_chain_single_iteration_equals_last_fit() {
        let (data, model, truth) = study_like(3, 0.05);
        let mut cfg = LassoSaemConfig::new(SaemConfig::new(12, 6, 1, 3, 5), EstimationMode::Ml, 1.0);
        cfg.l0 = Some(1);
        let run = run_lasso_saem(&data, &model, &truth, sine_dict(), &cfg).unwrap();
        assert_eq!(run.ensemble.len(), 1);
        assert_eq!(run.ensemble.mean_coefficients().unwrap(), run.last_fits[0].lambda_hat);
    }

    #[test]
    fn recovers_shape_in_dictionary_span() {
        let mut spec = ScenarioSpec::study1();
        spec.n_individuals = 12;
        spec.sigma2 = 0.01;
        let (data, true_phi, truth) = simulate_dataset(&spec, 11).unwrap();
        let model = SnmmModel::with_shared_design(
            Arc::new(spec.structure()),
            nalgebra::DMatrix::identity(3, 3),
            data.n_individuals(),
            crate::model::CovarianceStructure::Diagonal,
        )
        .unwrap();
        let cfg = LassoSaemConfig::new(SaemConfig::new(60, 30, 3, 3, 9), EstimationMode::Ml, 0.5);
        let run = run_lasso_saem(&data, &model, &truth, sine_dict(), &cfg).unwrap();
        // f is only identified jointly with the random effects, so compare
        // the individual curves a + b f(x - s) over the observed window
        let structure = spec.structure();
        let fhat = run.ensemble.mean_expansion().unwrap();
        let sine = |t: f64| (2.0 * std::f64::consts::PI * t).sin();
        let curve = |phi: &DVector<f64>, f: &dyn Curve, x: f64| {
            use crate::model::MixedStructure;
            let p = phi.as_slice();
            structure.a(p, &[x]) + structure.b(p, &[x]) * f.eval(structure.c(p, &[x]))
        };
        let grid = uniform_grid(1.0 / 12.0, 10.0 / 12.0, 101);
        let fitted = run.mean_phi();
        let mut total = 0.0;
        for i in 0..data.n_individuals() {
            let est: Vec<f64> = grid.iter().map(|x| curve(&fitted.phi[i], &fhat, *x)).collect();
            let tru: Vec<f64> = grid.iter().map(|x| curve(&true_phi.phi[i], &sine, *x)).collect();
            total += ise(&grid, &est, &tru);
        }
        let err = total / data.n_individuals() as f64;
        assert!(err < 0.05, "ISE {err}");
        let lead = run.ensemble.leading_atom().unwrap().unwrap();
        assert_eq!(run.ensemble.dict().atoms()[lead].descriptor, "sin(2*pi*t)");
    }

    #[test]
    fn runs_are_deterministic() {
        let (data, model, truth) = study_like(5, 0.1);
        let cfg = LassoSaemConfig::new(SaemConfig::new(15, 8, 2, 3, 77), EstimationMode::Reml, 1.0);
        let a = run_lasso_saem(&data, &model, &truth, sine_dict(), &cfg).unwrap();
        let b = run_lasso_saem(&data, &model, &truth, sine_dict(), &cfg).unwrap();
        assert_eq!(a.theta, b.theta);
        let grid = uniform_grid(0.0, 1.0, 17);
        assert_eq!(confidence_band(&a.ensemble, &grid, 0.05).unwrap(), confidence_band(&b.ensemble, &grid, 0.05).unwrap());
        assert_eq!(a.ensemble.len(), 2 * 7);
    }

    #[test]
    fn invalid_config_is_rejected() {
        let (data, model, truth) = study_like(5, 0.1);
        let mut cfg = LassoSaemConfig::new(SaemConfig::new(15, 8, 2, 3, 77), EstimationMode::Ml, 1.0);
        cfg.l0 = Some(16);
        assert!(run_lasso_saem(&data, &model, &truth, sine_dict(), &cfg).is_err());
        cfg.l0 = None;
        cfg.gamma = -1.0;
        assert!(matches!(run_lasso_saem(&data, &model, &truth, sine_dict(), &cfg), Err(SnmmError::Config(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn band_reproduces_textbook_statistics(seed in 0u64..100_000, members in 2usize..9) {
            let dict = small_dict();
            let mut r = rng::stream(seed, 3);
            let coefs: Vec<Vec<f64>> = (0..members).map(|_| (0..5).map(|_| r.random::<f64>() * 2.0 - 1.0).collect()).collect();
            let e = ensemble_of(&dict, &coefs, 1);
            let grid = vec![r.random::<f64>(), r.random::<f64>()];
            let band = confidence_band(&e, &grid, 0.1).unwrap();
            let z = Normal::standard().inverse_cdf(0.95);
            for (i, t) in grid.iter().enumerate() {
                let vals: Vec<f64> = coefs.iter().map(|c| (0..5).map(|j| c[j] * dict.eval(j, *t)).sum()).collect();
                let mean = vals.iter().sum::<f64>() / members as f64;
                let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (members - 1) as f64;
                prop_assert!((band.center[i] - mean).abs() < 1e-12);
                prop_assert!((band.half_width[i] - z * (var / members as f64).sqrt()).abs() < 1e-12);
                prop_assert!(band.half_width[i] >= 0.0);
            }
        }
    }
}
