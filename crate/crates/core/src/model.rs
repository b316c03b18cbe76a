//! Longitudinal data, the partially linear mixed structure
//! `g(x, phi, f) = a(phi; x) + b(phi; x) f(c(phi; x))`, parameters, the
//! complete-data log-likelihood and the seeded scenario generators.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SnmmError};
use crate::rng;

/// A real function of one variable: the shape `f` or any dictionary expansion.
pub trait Curve: Send + Sync {
    fn eval(&self, t: f64) -> f64;
}

impl<F> Curve for F
where
    F: Fn(f64) -> f64 + Send + Sync,
{
    fn eval(&self, t: f64) -> f64 {
        self(t)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndividualRecord {
    pub id: String,
    /// Covariate vectors, one per observation, all of dimension `d`.
    pub x: Vec<Vec<f64>>,
    pub y: Vec<f64>,
}

impl IndividualRecord {
    pub fn n_obs(&self) -> usize {
        self.y.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LongitudinalDataset {
    individuals: Vec<IndividualRecord>,
    n_total: usize,
    dim: usize,
}

impl LongitudinalDataset {
    pub fn new(individuals: Vec<IndividualRecord>) -> Result<Self> {
        if individuals.is_empty() {
            return Err(SnmmError::Data("dataset has no individuals".into()));
        }
        let dim = individuals[0].x.first().map(|v| v.len()).unwrap_or(0);
        if dim == 0 {
            return Err(SnmmError::Data("covariate dimension must be at least 1".into()));
        }
        let mut n_total = 0;
        for ind in &individuals {
            if ind.y.is_empty() {
                return Err(SnmmError::Data(format!("individual {} has no observations", ind.id)));
            }
            if ind.x.len() != ind.y.len() {
                return Err(SnmmError::Data(format!(
                    "individual {}: {} covariates for {} responses",
                    ind.id,
                    ind.x.len(),
                    ind.y.len()
                )));
            }
            if ind.x.iter().any(|v| v.len() != dim) {
                return Err(SnmmError::Data(format!(
                    "individual {}: covariate dimension differs from {dim}",
                    ind.id
                )));
            }
            if ind.y.iter().chain(ind.x.iter().flatten()).any(|v| !v.is_finite()) {
                return Err(SnmmError::Data(format!("individual {} has non-finite values", ind.id)));
            }
            n_total += ind.y.len();
        }
        Ok(Self { individuals, n_total, dim })
    }

    pub fn individuals(&self) -> &[IndividualRecord] {
        &self.individuals
    }

    /// `N`, the number of individuals.
    pub fn n_individuals(&self) -> usize {
        self.individuals.len()
    }

    /// `n = sum_i n_i`.
    pub fn n_total(&self) -> usize {
        self.n_total
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
}

/// The known maps `a`, `b`, `c` of the conditionally linear structure.
pub trait MixedStructure: Send + Sync + fmt::Debug {
    /// Dimension of the individual parameter vector `phi_i`.
    fn p(&self) -> usize;
    fn a(&self, phi: &[f64], x: &[f64]) -> f64;
    fn b(&self, phi: &[f64], x: &[f64]) -> f64;
    fn c(&self, phi: &[f64], x: &[f64]) -> f64;
    /// Coordinate `k` with `b(phi + t e_k) = e^t b(phi)` while `a` and `c`
    /// ignore `phi_k`, if there is one. Along it only the product `b f` is
    /// identified.
    fn log_scale_coordinate(&self) -> Option<usize> {
        None
    }
}

/// Numerically stable logistic function.
pub fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HorizontalShift {
    /// `c = x - logistic(phi_3)`
    Logistic,
    /// `c = x - phi_3`
    Linear,
}

/// Shape-invariant curves: `phi_1 + amplitude * exp(phi_2) * f(x - shift(phi_3))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShapeInvariant {
    pub amplitude: f64,
    pub shift: HorizontalShift,
}

impl MixedStructure for ShapeInvariant {
    fn p(&self) -> usize {
        3
    }
    fn a(&self, phi: &[f64], _x: &[f64]) -> f64 {
        phi[0]
    }
    fn b(&self, phi: &[f64], _x: &[f64]) -> f64 {
        self.amplitude * phi[1].exp()
    }
    fn c(&self, phi: &[f64], x: &[f64]) -> f64 {
        match self.shift {
            HorizontalShift::Logistic => x[0] - logistic(phi[2]),
            HorizontalShift::Linear => x[0] - phi[2],
        }
    }
    fn log_scale_coordinate(&self) -> Option<usize> {
        Some(1)
    }
}

/// Random intercept only: `g = phi_1 + f(x_1)`. With `f = 0` this is the
/// one-way random-effects model.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RandomIntercept;

impl MixedStructure for RandomIntercept {
    fn p(&self) -> usize {
        1
    }
    fn a(&self, phi: &[f64], _x: &[f64]) -> f64 {
        phi[0]
    }
    fn b(&self, _phi: &[f64], _x: &[f64]) -> f64 {
        1.0
    }
    fn c(&self, _phi: &[f64], x: &[f64]) -> f64 {
        x[0]
    }
}

type MapFn = dyn Fn(&[f64], &[f64]) -> f64 + Send + Sync;

/// User-supplied `a`, `b`, `c`.
pub struct CustomStructure {
    pub p: usize,
    pub a: Box<MapFn>,
    pub b: Box<MapFn>,
    pub c: Box<MapFn>,
}

impl fmt::Debug for CustomStructure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CustomStructure").field("p", &self.p).finish_non_exhaustive()
    }
}

impl MixedStructure for CustomStructure {
    fn p(&self) -> usize {
        self.p
    }
    fn a(&self, phi: &[f64], x: &[f64]) -> f64 {
        (self.a)(phi, x)
    }
    fn b(&self, phi: &[f64], x: &[f64]) -> f64 {
        (self.b)(phi, x)
    }
    fn c(&self, phi: &[f64], x: &[f64]) -> f64 {
        (self.c)(phi, x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceStructure {
    #[default]
    Full,
    Diagonal,
}

/// Structure plus fixed-effects design matrices `A_i` (each `p x q`).
#[derive(Debug, Clone)]
pub struct SnmmModel {
    pub structure: Arc<dyn MixedStructure>,
    design: Vec<DMatrix<f64>>,
    pub covariance: CovarianceStructure,
}

impl SnmmModel {
    pub fn new(
        structure: Arc<dyn MixedStructure>,
        design: Vec<DMatrix<f64>>,
        covariance: CovarianceStructure,
    ) -> Result<Self> {
        let p = structure.p();
        let q = design.first().map(|a| a.ncols()).unwrap_or(0);
        if design.is_empty() || q == 0 {
            return Err(SnmmError::Config("model needs at least one p x q design matrix".into()));
        }
        if let Some(i) = design.iter().position(|a| a.nrows() != p || a.ncols() != q) {
            return Err(SnmmError::Config(format!(
                "design matrix {i} is {}x{}, expected {p}x{q}",
                design[i].nrows(),
                design[i].ncols()
            )));
        }
        Ok(Self { structure, design, covariance })
    }

    /// Same design matrix for every individual.
    pub fn with_shared_design(
        structure: Arc<dyn MixedStructure>,
        design: DMatrix<f64>,
        n_individuals: usize,
        covariance: CovarianceStructure,
    ) -> Result<Self> {
        Self::new(structure, vec![design; n_individuals], covariance)
    }

    pub fn p(&self) -> usize {
        self.structure.p()
    }

    pub fn q(&self) -> usize {
        self.design[0].ncols()
    }

    pub fn design(&self) -> &[DMatrix<f64>] {
        &self.design
    }

    pub fn n_individuals(&self) -> usize {
        self.design.len()
    }

    pub fn check_data(&self, data: &LongitudinalDataset) -> Result<()> {
        if data.n_individuals() != self.design.len() {
            return Err(SnmmError::Config(format!(
                "model has {} design matrices but data has {} individuals",
                self.design.len(),
                data.n_individuals()
            )));
        }
        Ok(())
    }

    pub fn g(&self, phi: &[f64], x: &[f64], f: &dyn Curve) -> f64 {
        let s = &*self.structure;
        s.a(phi, x) + s.b(phi, x) * f.eval(s.c(phi, x))
    }

    /// `||y_i - g_i(phi_i, f)||^2`.
    pub fn individual_rss(&self, ind: &IndividualRecord, phi: &[f64], f: &dyn Curve) -> f64 {
        ind.x
            .iter()
            .zip(&ind.y)
            .map(|(x, y)| {
                let r = y - self.g(phi, x, f);
                r * r
            })
            .sum()
    }

    pub fn rss(&self, data: &LongitudinalDataset, phi: &RandomEffects, f: &dyn Curve) -> f64 {
        data.individuals()
            .iter()
            .zip(&phi.phi)
            .map(|(ind, p)| self.individual_rss(ind, p.as_slice(), f))
            .sum()
    }

    /// `A_i beta` for every individual.
    pub fn prior_means(&self, beta: &DVector<f64>) -> Vec<DVector<f64>> {
        self.design.iter().map(|a| a * beta).collect()
    }

    /// Restrict `gamma` to the configured covariance structure.
    pub fn constrain(&self, gamma: &mut DMatrix<f64>) {
        if self.covariance == CovarianceStructure::Diagonal {
            let d = gamma.diagonal();
            *gamma = DMatrix::from_diagonal(&d);
        }
    }
}

/// `theta = (beta, Gamma, sigma^2)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThetaEstimate {
    pub beta: DVector<f64>,
    pub gamma: DMatrix<f64>,
    pub sigma2: f64,
}

impl ThetaEstimate {
    pub fn new(beta: DVector<f64>, gamma: DMatrix<f64>, sigma2: f64) -> Result<Self> {
        let theta = Self { beta, gamma, sigma2 };
        theta.validate()?;
        Ok(theta)
    }

    pub fn from_diagonal(beta: &[f64], gamma_diag: &[f64], sigma2: f64) -> Result<Self> {
        Self::new(
            DVector::from_column_slice(beta),
            DMatrix::from_diagonal(&DVector::from_column_slice(gamma_diag)),
            sigma2,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let g = &self.gamma;
        if !g.is_square() {
            return Err(SnmmError::Numerical("Gamma is not square".into()));
        }
        if !(self.sigma2 > 0.0 && self.sigma2.is_finite()) {
            return Err(SnmmError::Numerical(format!("sigma2 = {} is not positive", self.sigma2)));
        }
        for i in 0..g.nrows() {
            for j in 0..i {
                if (g[(i, j)] - g[(j, i)]).abs() > 1e-12 {
                    return Err(SnmmError::Numerical(format!("Gamma is not symmetric at ({i},{j})")));
                }
            }
        }
        if g.clone().cholesky().is_none() {
            return Err(SnmmError::Numerical("Gamma is not positive definite".into()));
        }
        Ok(())
    }
}

/// One parameter vector `phi_i` per individual.
#[derive(Debug, Clone, PartialEq)]
pub struct RandomEffects {
    pub phi: Vec<DVector<f64>>,
}

impl RandomEffects {
    pub fn new(phi: Vec<DVector<f64>>) -> Self {
        Self { phi }
    }

    /// `phi_i = A_i beta`, the prior mean.
    pub fn at_prior_mean(model: &SnmmModel, beta: &DVector<f64>) -> Self {
        Self { phi: model.prior_means(beta) }
    }

    pub fn len(&self) -> usize {
        self.phi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phi.is_empty()
    }
}

/// Precision and log-determinant of `Gamma` via Cholesky.
pub(crate) struct GammaFactor {
    pub inverse: DMatrix<f64>,
    pub log_det: f64,
}

impl GammaFactor {
    pub fn new(gamma: &DMatrix<f64>) -> Result<Self> {
        let chol = gamma.clone().cholesky().ok_or_else(|| {
            SnmmError::Numerical(format!("Gamma is singular or indefinite: {gamma}"))
        })?;
        let log_det = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        Ok(Self { inverse: chol.inverse(), log_det })
    }

    pub fn quad(&self, v: &DVector<f64>) -> f64 {
        v.dot(&(&self.inverse * v))
    }
}

/// Complete-data log-likelihood without the additive constant:
/// `-1/2 {n log s2 + N log|G| + ||y - g||^2 / s2 + sum_i (phi_i - A_i b)' G^-1 (phi_i - A_i b)}`.
pub fn complete_log_likelihood(
    data: &LongitudinalDataset,
    model: &SnmmModel,
    theta: &ThetaEstimate,
    phi: &RandomEffects,
    f: &dyn Curve,
) -> Result<f64> {
    model.check_data(data)?;
    let factor = GammaFactor::new(&theta.gamma)?;
    let rss = model.rss(data, phi, f);
    if !rss.is_finite() {
        return Err(SnmmError::Evaluation("g(phi, f) is not finite on the data".into()));
    }
    let prior: f64 = model
        .prior_means(&theta.beta)
        .iter()
        .zip(&phi.phi)
        .map(|(m, p)| factor.quad(&(p - m)))
        .sum();
    let n = data.n_total() as f64;
    let big_n = data.n_individuals() as f64;
    Ok(-0.5 * (n * theta.sigma2.ln() + big_n * factor.log_det + rss / theta.sigma2 + prior))
}

/// Laplace kernel `exp(-rate |t - center|)` normalized to unit mass on `[0, 1]`.
pub fn laplace_bump(t: f64, center: f64, rate: f64) -> f64 {
    let mass = (2.0 - (-rate * center).exp() - (-rate * (1.0 - center)).exp()) / rate;
    (-rate * (t - center).abs()).exp() / mass
}

/// Shape of the second simulation design: a sine plus two Laplace peaks at
/// 0.75 and 0.80.
pub fn eval_study2_f(t: f64) -> f64 {
    0.6 * (2.0 * PI * t).sin()
        + 0.2 * laplace_bump(t, 0.75, 40.0) / 2.0
        + 0.2 * laplace_bump(t, 0.80, 40.0) / 2.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrueShape {
    /// `sin(2 pi t)`
    Sine,
    /// Sine plus two Laplace peaks.
    SinePeaks,
}

impl TrueShape {
    pub fn eval(self, t: f64) -> f64 {
        match self {
            TrueShape::Sine => (2.0 * PI * t).sin(),
            TrueShape::SinePeaks => eval_study2_f(t),
        }
    }
}

impl Curve for TrueShape {
    fn eval(&self, t: f64) -> f64 {
        TrueShape::eval(*self, t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    Study1,
    Study2,
    Custom,
}

/// Generator settings for
/// `y_ij = phi_1i + exp(phi_2i) * 2 f(j/N - logistic(phi_3i)) + eps_ij`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub kind: ScenarioKind,
    pub n_individuals: usize,
    pub n_obs: usize,
    pub mu: Vec<f64>,
    pub gamma_diag: Vec<f64>,
    pub sigma2: f64,
    pub shape: TrueShape,
    #[serde(default = "default_amplitude")]
    pub amplitude: f64,
}

fn default_amplitude() -> f64 {
    2.0
}

impl ScenarioSpec {
    pub fn study1() -> Self {
        Self {
            kind: ScenarioKind::Study1,
            n_individuals: 10,
            n_obs: 10,
            mu: vec![1.0, 0.0, 0.0],
            gamma_diag: vec![1.0, 0.25, 0.16],
            sigma2: 1.0,
            shape: TrueShape::Sine,
            amplitude: 2.0,
        }
    }

    pub fn study2() -> Self {
        Self {
            kind: ScenarioKind::Study2,
            n_individuals: 10,
            n_obs: 20,
            mu: vec![1.0, 0.0, 0.0],
            gamma_diag: vec![0.25, 0.16, 0.04],
            sigma2: 0.4,
            shape: TrueShape::SinePeaks,
            amplitude: 2.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_individuals == 0 || self.n_obs == 0 {
            return Err(SnmmError::Config("scenario needs N >= 1 and J >= 1".into()));
        }
        if self.mu.len() != 3 || self.gamma_diag.len() != 3 {
            return Err(SnmmError::Config("scenario mu and gamma_diag must have length 3".into()));
        }
        if self.sigma2 < 0.0 || self.gamma_diag.iter().any(|g| *g < 0.0) {
            return Err(SnmmError::Config("scenario variances must be non-negative".into()));
        }
        if !self.sigma2.is_finite() || self.mu.iter().chain(&self.gamma_diag).any(|v| !v.is_finite()) {
            return Err(SnmmError::Config("scenario values must be finite".into()));
        }
        Ok(())
    }

    pub fn structure(&self) -> ShapeInvariant {
        ShapeInvariant { amplitude: self.amplitude, shift: HorizontalShift::Logistic }
    }
}

/// Draw one dataset. Returns the data, the true `phi` and the true `theta`
/// (with `beta = mu`, `Gamma = diag(gamma_diag)`).
///
/// The true `theta` is returned unvalidated so that noise-free scenarios
/// (zero variances) can be generated.
pub fn simulate_dataset(
    scenario: &ScenarioSpec,
    seed: u64,
) -> Result<(LongitudinalDataset, RandomEffects, ThetaEstimate)> {
    scenario.validate()?;
    let mut rng = rng::stream(seed, rng::streams::SIMULATION);
    let structure = scenario.structure();
    let big_n = scenario.n_individuals;
    let mut individuals = Vec::with_capacity(big_n);
    let mut phis = Vec::with_capacity(big_n);
    for i in 0..big_n {
        let phi = DVector::from_iterator(
            3,
            (0..3).map(|r| {
                let z: f64 = StandardNormal.sample(&mut rng);
                scenario.mu[r] + scenario.gamma_diag[r].sqrt() * z
            }),
        );
        let mut x = Vec::with_capacity(scenario.n_obs);
        let mut y = Vec::with_capacity(scenario.n_obs);
        for j in 1..=scenario.n_obs {
            let xj = vec![j as f64 / big_n as f64];
            let mean = structure.a(phi.as_slice(), &xj)
                + structure.b(phi.as_slice(), &xj) * scenario.shape.eval(structure.c(phi.as_slice(), &xj));
            let eps: f64 = if scenario.sigma2 > 0.0 {
                scenario.sigma2.sqrt() * rng.sample::<f64, _>(StandardNormal)
            } else {
                0.0
            };
            x.push(xj);
            y.push(mean + eps);
        }
        individuals.push(IndividualRecord { id: format!("{}", i + 1), x, y });
        phis.push(phi);
    }
    let theta = ThetaEstimate {
        beta: DVector::from_column_slice(&scenario.mu),
        gamma: DMatrix::from_diagonal(&DVector::from_column_slice(&scenario.gamma_diag)),
        sigma2: scenario.sigma2,
    };
    Ok((LongitudinalDataset::new(individuals)?, RandomEffects::new(phis), theta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn one_way(y: &[&[f64]]) -> (LongitudinalDataset, SnmmModel) {
        let individuals = y
            .iter()
            .enumerate()
            .map(|(i, ys)| IndividualRecord {
                id: i.to_string(),
                x: ys.iter().map(|_| vec![0.0]).collect(),
                y: ys.to_vec(),
            })
            .collect();
        let data = LongitudinalDataset::new(individuals).unwrap();
        let model = SnmmModel::with_shared_design(
            Arc::new(RandomIntercept),
            DMatrix::from_element(1, 1, 1.0),
            y.len(),
            CovarianceStructure::Full,
        )
        .unwrap();
        (data, model)
    }

    #[test]
    fn dataset_rejects_ragged_and_empty_input() {
        assert!(LongitudinalDataset::new(vec![]).is_err());
        let bad = IndividualRecord { id: "a".into(), x: vec![vec![0.0]], y: vec![1.0, 2.0] };
        assert!(LongitudinalDataset::new(vec![bad]).is_err());
        let empty = IndividualRecord { id: "a".into(), x: vec![], y: vec![] };
        assert!(LongitudinalDataset::new(vec![empty]).is_err());
    }

    #[test]
    fn loglik_is_zero_for_perfect_fit_at_identity() {
        let (data, model) = one_way(&[&[2.0, 2.0], &[2.0]]);
        let theta = ThetaEstimate::from_diagonal(&[2.0], &[1.0], 1.0).unwrap();
        let phi = RandomEffects::new(vec![DVector::from_element(1, 2.0); 2]);
        let zero = |_t: f64| 0.0;
        let v = complete_log_likelihood(&data, &model, &theta, &phi, &zero).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn loglik_single_observation() {
        let (data, model) = one_way(&[&[1.0]]);
        let theta = ThetaEstimate::from_diagonal(&[0.0], &[1.0], 1.0).unwrap();
        let phi = RandomEffects::new(vec![DVector::from_element(1, 0.0)]);
        let v = complete_log_likelihood(&data, &model, &theta, &phi, &|_t: f64| 0.0).unwrap();
        assert_eq!(v, -0.5);
    }

    #[test]
    fn loglik_matches_density_product() {
        // Oracle: log of prod_ij N(y_ij; g, s2) * prod_i N(phi_i; A_i b, G),
        // plus the dropped constant (n + N p)/2 log(2 pi).
        let scenario = ScenarioSpec::study1();
        let (data, phi, _) = simulate_dataset(&scenario, 11).unwrap();
        let gamma = DMatrix::from_row_slice(3, 3, &[1.0, 0.2, 0.0, 0.2, 0.5, 0.1, 0.0, 0.1, 0.3]);
        let theta = ThetaEstimate::new(DVector::from_column_slice(&[0.9, 0.1, -0.2]), gamma, 0.7).unwrap();
        let model = SnmmModel::with_shared_design(
            Arc::new(scenario.structure()),
            DMatrix::identity(3, 3),
            data.n_individuals(),
            CovarianceStructure::Full,
        )
        .unwrap();
        let f = TrueShape::Sine;
        let got = complete_log_likelihood(&data, &model, &theta, &phi, &f).unwrap();

        let mut oracle = 0.0;
        for (ind, p) in data.individuals().iter().zip(&phi.phi) {
            for (x, y) in ind.x.iter().zip(&ind.y) {
                let g = p[0] + 2.0 * p[1].exp() * (2.0 * PI * (x[0] - 1.0 / (1.0 + (-p[2]).exp()))).sin();
                oracle += -0.5 * (2.0 * PI * theta.sigma2).ln() - (y - g).powi(2) / (2.0 * theta.sigma2);
            }
            let d = p - &theta.beta;
            let inv = theta.gamma.clone().try_inverse().unwrap();
            oracle += -1.5 * (2.0 * PI).ln() - 0.5 * theta.gamma.determinant().ln() - 0.5 * d.dot(&(inv * &d));
        }
        let n = data.n_total() as f64;
        let constant = 0.5 * (n + 3.0 * data.n_individuals() as f64) * (2.0 * PI).ln();
        assert!((got - (oracle + constant)).abs() < 1e-9, "{got} vs {}", oracle + constant);
    }

    #[test]
    fn loglik_decreases_with_residuals_and_sigma_maximizer_is_rss_over_n() {
        let (data, model) = one_way(&[&[1.0, 2.0, 0.5], &[0.3, -1.0]]);
        let phi = RandomEffects::new(vec![DVector::from_element(1, 0.4), DVector::from_element(1, -0.1)]);
        let zero = |_t: f64| 0.0;
        let rss = model.rss(&data, &phi, &zero);
        let ll = |s2: f64| {
            let theta = ThetaEstimate::from_diagonal(&[0.0], &[1.0], s2).unwrap();
            complete_log_likelihood(&data, &model, &theta, &phi, &zero).unwrap()
        };
        let target = rss / data.n_total() as f64;
        let grid: Vec<f64> = (1..4000).map(|k| k as f64 * 0.001).collect();
        let best = grid.iter().cloned().fold((f64::NAN, f64::NEG_INFINITY), |acc, s| {
            let v = ll(s);
            if v > acc.1 { (s, v) } else { acc }
        });
        assert!((best.0 - target).abs() <= 0.001, "{} vs {target}", best.0);
        assert!(ll(target) >= ll(target * 1.01) && ll(target) >= ll(target * 0.99));

        let shifted = RandomEffects::new(vec![DVector::from_element(1, 0.4), DVector::from_element(1, -0.1)]);
        let theta = ThetaEstimate::from_diagonal(&[0.0], &[1.0], 1.0).unwrap();
        let base = complete_log_likelihood(&data, &model, &theta, &shifted, &zero).unwrap();
        let worse = complete_log_likelihood(&data, &model, &theta, &shifted, &|_t: f64| 1.0).unwrap();
        assert!(model.rss(&data, &shifted, &|_t: f64| 1.0) > rss);
        assert!(worse < base);
    }

    #[test]
    fn loglik_invariant_under_permutation() {
        let scenario = ScenarioSpec::study2();
        let (data, phi, theta) = simulate_dataset(&scenario, 3).unwrap();
        let model = SnmmModel::with_shared_design(
            Arc::new(scenario.structure()),
            DMatrix::identity(3, 3),
            data.n_individuals(),
            CovarianceStructure::Diagonal,
        )
        .unwrap();
        let f = TrueShape::SinePeaks;
        let a = complete_log_likelihood(&data, &model, &theta, &phi, &f).unwrap();
        let mut inds = data.individuals().to_vec();
        let mut phis = phi.phi.clone();
        inds.reverse();
        phis.reverse();
        let permuted = LongitudinalDataset::new(inds).unwrap();
        let b = complete_log_likelihood(&permuted, &model, &theta, &RandomEffects::new(phis), &f).unwrap();
        assert!((a - b).abs() < 1e-9 * a.abs().max(1.0));
    }

    #[test]
    fn singular_gamma_is_reported() {
        let (data, model) = one_way(&[&[1.0]]);
        let theta = ThetaEstimate {
            beta: DVector::from_element(1, 0.0),
            gamma: DMatrix::from_element(1, 1, 0.0),
            sigma2: 1.0,
        };
        let phi = RandomEffects::new(vec![DVector::from_element(1, 0.0)]);
        let err = complete_log_likelihood(&data, &model, &theta, &phi, &|_t: f64| 0.0).unwrap_err();
        assert!(matches!(err, SnmmError::Numerical(_)));
    }

    #[test]
    fn logistic_is_stable_in_both_tails() {
        assert_eq!(logistic(0.0), 0.5);
        assert!(logistic(-800.0) >= 0.0 && logistic(-800.0).is_finite());
        assert_eq!(logistic(800.0), 1.0);
        assert!((logistic(2.0) + logistic(-2.0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn scenario_defaults() {
        let s1 = ScenarioSpec::study1();
        assert_eq!((s1.n_individuals, s1.n_obs), (10, 10));
        assert_eq!(s1.mu, vec![1.0, 0.0, 0.0]);
        assert_eq!(s1.gamma_diag, vec![1.0, 0.25, 0.16]);
        assert_eq!(s1.sigma2, 1.0);
        let s2 = ScenarioSpec::study2();
        assert_eq!((s2.n_individuals, s2.n_obs), (10, 20));
        assert_eq!(s2.gamma_diag, vec![0.25, 0.16, 0.04]);
        assert_eq!(s2.sigma2, 0.4);
    }

    #[test]
    fn noiseless_scenario_gives_mean_curve() {
        let mut s = ScenarioSpec::study1();
        s.sigma2 = 0.0;
        s.gamma_diag = vec![0.0; 3];
        let (data, phi, _) = simulate_dataset(&s, 5).unwrap();
        for (ind, p) in data.individuals().iter().zip(&phi.phi) {
            assert_eq!(p.as_slice(), &[1.0, 0.0, 0.0]);
            for (j, (x, y)) in ind.x.iter().zip(&ind.y).enumerate() {
                assert_eq!(x[0], (j + 1) as f64 / 10.0);
                assert_eq!(*y, 1.0 + 2.0 * (2.0 * PI * (x[0] - 0.5)).sin());
            }
        }
    }

    #[test]
    fn negative_variance_is_a_config_error() {
        let mut s = ScenarioSpec::study2();
        s.sigma2 = -0.1;
        assert!(matches!(simulate_dataset(&s, 1), Err(SnmmError::Config(_))));
    }

    #[test]
    fn simulation_is_deterministic() {
        let s = ScenarioSpec::study2();
        let (a, pa, _) = simulate_dataset(&s, 42).unwrap();
        let (b, pb, _) = simulate_dataset(&s, 42).unwrap();
        let (c, _, _) = simulate_dataset(&s, 43).unwrap();
        assert_eq!(a, b);
        assert_eq!(pa, pb);
        assert_ne!(a, c);
    }

    fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
        fn rec(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
            let m = 0.5 * (a + b);
            let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
            let (flm, frm) = (f(lm), f(rm));
            let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
            let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
            if depth == 0 || (left + right - whole).abs() <= 15.0 * tol {
                left + right + (left + right - whole) / 15.0
            } else {
                rec(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1) + rec(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
            }
        }
        let (fa, fb, fm) = (f(a), f(b), f(0.5 * (a + b)));
        rec(f, a, b, fa, fm, fb, (b - a) / 6.0 * (fa + 4.0 * fm + fb), tol, 50)
    }

    #[test]
    fn laplace_bumps_have_unit_mass() {
        for c in [0.75, 0.80] {
            // split at the kink so Simpson sees smooth pieces
            let g = |t: f64| laplace_bump(t, c, 40.0);
            let mass = adaptive_simpson(&g, 0.0, c, 1e-12) + adaptive_simpson(&g, c, 1.0, 1e-12);
            assert!((mass - 1.0).abs() < 1e-6, "mass {mass}");
        }
    }

    #[test]
    fn study2_shape_values() {
        // f(0): sine vanishes, only the far tails of the peaks remain.
        let unnorm = |c: f64| adaptive_simpson(&|t: f64| (-40.0 * (t - c).abs()).exp(), 0.0, c, 1e-13)
            + adaptive_simpson(&|t: f64| (-40.0 * (t - c).abs()).exp(), c, 1.0, 1e-13);
        let (i1, i2) = (unnorm(0.75), unnorm(0.80));
        let printed = |t: f64| {
            0.6 * (2.0 * PI * t).sin()
                + 0.2 * (-40.0 * (t - 0.75f64).abs()).exp() / (2.0 * i1)
                + 0.2 * (-40.0 * (t - 0.8f64).abs()).exp() / (2.0 * i2)
        };
        for t in [0.0, 0.3, 0.75, 0.8, 0.9, 1.3] {
            assert!((eval_study2_f(t) - printed(t)).abs() < 1e-9, "t={t}");
        }
        let at0 = eval_study2_f(0.0);
        assert!(at0 > 0.0 && at0 < 0.2 * 20.0 * (-30.0f64).exp() * 1.01);
        // the first peak is a local maximum of its own bump term
        let b = |t: f64| laplace_bump(t, 0.75, 40.0);
        assert!(b(0.75) > b(0.7499) && b(0.75) > b(0.7501));
    }

    #[test]
    fn custom_structure_evaluates() {
        let s = CustomStructure {
            p: 1,
            a: Box::new(|phi, _x| phi[0]),
            b: Box::new(|_phi, _x| 2.0),
            c: Box::new(|_phi, x| x[0] * 3.0),
        };
        let model = SnmmModel::with_shared_design(Arc::new(s), DMatrix::from_element(1, 1, 1.0), 1, CovarianceStructure::Full).unwrap();
        let f = |t: f64| t + 1.0;
        assert_eq!(model.g(&[1.0], &[2.0], &f), 1.0 + 2.0 * 7.0);
        let _ = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    }
}
