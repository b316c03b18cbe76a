//! Exact small-scale theory quantities for the dictionary regression:
//! restricted eigenvalues and correlations of the Gram matrix, the
//! constants `kappa_s` and `mu_s`, oracle-inequality bounds, and Monte Carlo
//! checks of the noise tail bound and of support recovery.

use std::collections::BTreeMap;

use itertools::Itertools;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::dictionary::{DictionaryBasis, WeightedDesign};
use crate::error::{Result, SnmmError};
use crate::lasso::{dantzig_margins, solve_problem, LassoFit, LassoProblem, PenaltyLevels, PenaltyVariant};
use crate::model::Curve;
use crate::rng;

/// Largest dictionary size accepted by the subset enumeration.
pub const MAX_ENUMERATION_ATOMS: usize = 20;
/// Largest subset size accepted by the subset enumeration.
pub const MAX_ENUMERATION_SUBSET: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RestrictedSpectrum {
    pub m: usize,
    /// `nu_min(l)` keyed by `l`.
    pub nu_min: BTreeMap<usize, f64>,
    pub nu_max: BTreeMap<usize, f64>,
    /// `delta_{l,l'}` keyed by `(l, l')`.
    pub delta: BTreeMap<(usize, usize), f64>,
}

impl RestrictedSpectrum {
    /// `kappa_s = sqrt(nu_min(2s)) (1 - delta_{s,2s} / nu_min(2s))`.
    pub fn kappa(&self, s: usize) -> Option<f64> {
        let nu = *self.nu_min.get(&(2 * s))?;
        let d = *self.delta.get(&(s, 2 * s))?;
        Some(nu.max(0.0).sqrt() * (1.0 - d / nu))
    }

    /// `mu_s = delta_{s,2s} / sqrt(nu_min(2s))`.
    pub fn mu(&self, s: usize) -> Option<f64> {
        let nu = *self.nu_min.get(&(2 * s))?;
        let d = *self.delta.get(&(s, 2 * s))?;
        Some(d / nu.max(0.0).sqrt())
    }
}

fn check_budget(m: usize, l: usize) -> Result<()> {
    if m > MAX_ENUMERATION_ATOMS || l > MAX_ENUMERATION_SUBSET {
        return Err(SnmmError::EnumerationTooLarge(format!(
            "M = {m}, subset size {l}; limits are M <= {MAX_ENUMERATION_ATOMS}, size <= {MAX_ENUMERATION_SUBSET}"
        )));
    }
    Ok(())
}

fn submatrix(g: &DMatrix<f64>, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |i, j| g[(rows[i], cols[j])])
}

/// Exact enumeration over subsets. Eigenvalues of `G_JJ` interlace, so the
/// extremes over `|J| <= l` are reached at `|J| = min(l, M)`; singular values
/// of `G_{J,J'}` grow with the blocks, so `delta` uses the largest sizes
/// that still allow disjoint sets.
pub fn restricted_spectrum(g: &DMatrix<f64>, l_max: usize, pairs: &[(usize, usize)]) -> Result<RestrictedSpectrum> {
    let m = g.nrows();
    if !g.is_square() || m == 0 {
        return Err(SnmmError::Config("Gram matrix must be square and nonempty".into()));
    }
    if (g - g.transpose()).amax() > 1e-10 * g.amax().max(1.0) {
        return Err(SnmmError::Config("Gram matrix is not symmetric".into()));
    }
    check_budget(m, l_max)?;
    for &(a, b) in pairs {
        check_budget(m, a.max(b))?;
    }

    let mut nu_min = BTreeMap::new();
    let mut nu_max = BTreeMap::new();
    for l in 1..=l_max {
        let size = l.min(m);
        let subsets: Vec<Vec<usize>> = (0..m).combinations(size).collect();
        let (lo, hi) = subsets
            .par_iter()
            .map(|j| {
                let e = submatrix(g, j, j).symmetric_eigen().eigenvalues;
                (e.min(), e.max())
            })
            .reduce(|| (f64::INFINITY, f64::NEG_INFINITY), |a, b| (a.0.min(b.0), a.1.max(b.1)));
        nu_min.insert(l, lo);
        nu_max.insert(l, hi);
    }

    let mut delta = BTreeMap::new();
    for &(l, lp) in pairs {
        let a = l.min(m);
        let b = lp.min(m.saturating_sub(a));
        if a == 0 || b == 0 {
            delta.insert((l, lp), 0.0);
            continue;
        }
        let firsts: Vec<Vec<usize>> = (0..m).combinations(a).collect();
        let value = firsts
            .par_iter()
            .map(|j| {
                let rest: Vec<usize> = (0..m).filter(|k| !j.contains(k)).collect();
                rest.iter()
                    .copied()
                    .combinations(b)
                    .map(|jp| submatrix(g, j, &jp).singular_values().max())
                    .fold(0.0, f64::max)
            })
            .reduce(|| 0.0, f64::max);
        delta.insert((l, lp), value);
    }
    Ok(RestrictedSpectrum { m, nu_min, nu_max, delta })
}

/// Everything needed for `kappa_s` and `mu_s`.
pub fn spectrum_for_sparsity(g: &DMatrix<f64>, s: usize) -> Result<RestrictedSpectrum> {
    restricted_spectrum(g, 2 * s, &[(s, 2 * s)])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct A1Check {
    pub holds: bool,
    /// `nu_min(2s) - delta_{s,2s}`
    pub margin: f64,
}

pub fn check_a1(spectrum: &RestrictedSpectrum, s: usize) -> Result<A1Check> {
    let nu = spectrum
        .nu_min
        .get(&(2 * s))
        .ok_or_else(|| SnmmError::Config(format!("spectrum lacks nu_min({})", 2 * s)))?;
    let d = spectrum
        .delta
        .get(&(s, 2 * s))
        .ok_or_else(|| SnmmError::Config(format!("spectrum lacks delta_({s},{})", 2 * s)))?;
    let margin = nu - d;
    Ok(A1Check { holds: margin > 0.0, margin })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundVariant {
    /// Bias `alpha (1 + 2 mu/kappa)^2 Lambda^2 / s`, variance `16 s (1/alpha + 1/kappa^2) r_n^2`.
    Penalized,
    /// Bias `alpha (1 + 2 mu/kappa)^2 (|l_J0c|_1 + |l^_J0c|_1) / s`, variance with 32.
    Dantzig,
    /// `32 s r~_n^2 / kappa_s`.
    SparseOracle,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "snake_case", tag = "status", content = "reason")]
pub enum BoundStatus {
    Holds,
    Violated,
    NotApplicable(String),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleBoundReport {
    pub variant: BoundVariant,
    /// `||f^ - f||_n^2`
    pub lhs: f64,
    pub approximation: f64,
    pub bias: f64,
    pub variance: f64,
    pub alpha: f64,
    pub j0: Vec<usize>,
    /// For the sparse-oracle bound: `32 s r~_n^2 / kappa_s^2`, the limit of the
    /// Dantzig bound as `alpha` grows.
    pub dantzig_limit: Option<f64>,
    pub status: BoundStatus,
}

impl OracleBoundReport {
    pub fn bound(&self) -> f64 {
        self.approximation + self.bias + self.variance
    }

    pub fn holds(&self) -> Option<bool> {
        match self.status {
            BoundStatus::Holds => Some(true),
            BoundStatus::Violated => Some(false),
            BoundStatus::NotApplicable(_) => None,
        }
    }
}

/// Inputs of [`oracle_bound`] besides the fit.
pub struct BoundInputs<'a> {
    pub dict: &'a DictionaryBasis,
    pub design: &'a WeightedDesign,
    pub truth: &'a dyn Curve,
    /// Comparison vector `lambda`.
    pub lambda: &'a DVector<f64>,
    pub j0: &'a [usize],
    pub alpha: f64,
    pub spectrum: &'a RestrictedSpectrum,
    pub penalties: &'a PenaltyLevels,
}

fn l1_outside(v: &DVector<f64>, j0: &[usize]) -> f64 {
    v.iter().enumerate().filter(|(j, _)| !j0.contains(j)).map(|(_, x)| x.abs()).sum()
}

/// Evaluate the right-hand side of an oracle inequality at the given
/// `(lambda, J0, alpha)` and compare with `||f^ - f||_n^2`.
pub fn oracle_bound(fit: &LassoFit, inputs: &BoundInputs<'_>, variant: BoundVariant) -> Result<OracleBoundReport> {
    let BoundInputs { dict, design, truth, lambda, j0, alpha, spectrum, penalties } = *inputs;
    let problem = LassoProblem::new(dict, design);
    let n = design.len();
    if lambda.len() != problem.m() || fit.lambda_hat.len() != problem.m() {
        return Err(SnmmError::Config("coefficient vectors do not match the dictionary".into()));
    }
    let bf: DVector<f64> = DVector::from_iterator(n, (0..n).map(|i| design.b[i] * truth.eval(design.x[i])));
    let lhs = (&problem.z * &fit.lambda_hat - &bf).norm_squared() / n as f64;
    let approximation = (&problem.z * lambda - &bf).norm_squared() / n as f64;
    let s = j0.len();

    let mut report = OracleBoundReport {
        variant,
        lhs,
        approximation,
        bias: f64::NAN,
        variance: f64::NAN,
        alpha,
        j0: j0.to_vec(),
        dantzig_limit: None,
        status: BoundStatus::NotApplicable(String::new()),
    };
    let not_applicable = |mut r: OracleBoundReport, why: String| {
        r.status = BoundStatus::NotApplicable(why);
        Ok(r)
    };
    if s == 0 || 2 * s >= n {
        return not_applicable(report, format!("need 1 <= s < n/2, got s = {s}"));
    }
    if !(alpha > 0.0) {
        return not_applicable(report, format!("alpha = {alpha} must be positive"));
    }
    let a1 = match check_a1(spectrum, s) {
        Ok(a) => a,
        Err(e) => return not_applicable(report, e.to_string()),
    };
    if !a1.holds {
        return not_applicable(report, format!("A1({s}) fails with margin {:e}", a1.margin));
    }
    let kappa = spectrum.kappa(s).expect("checked by A1");
    let mu = spectrum.mu(s).expect("checked by A1");
    let r_n = penalties.r_max();
    let lead = alpha * (1.0 + 2.0 * mu / kappa).powi(2);

    match variant {
        BoundVariant::Penalized => {
            let big_lambda =
                l1_outside(lambda, j0) + (fit.lambda_hat.lp_norm(1) - lambda.lp_norm(1)).max(0.0) / 2.0;
            report.bias = lead * big_lambda * big_lambda / s as f64;
            report.variance = 16.0 * s as f64 * (1.0 / alpha + 1.0 / (kappa * kappa)) * r_n * r_n;
        }
        BoundVariant::Dantzig => {
            let dz = dantzig_margins(&problem, lambda, &penalties.r);
            if !dz.member(1e-10) {
                return not_applicable(report, format!("lambda violates the Dantzig constraint by {:e}", -dz.min_margin()));
            }
            report.bias = lead * (l1_outside(lambda, j0) + l1_outside(&fit.lambda_hat, j0)) / s as f64;
            report.variance = 32.0 * s as f64 * (1.0 / alpha + 1.0 / (kappa * kappa)) * r_n * r_n;
        }
        BoundVariant::SparseOracle => {
            if !matches!(penalties.variant, PenaltyVariant::Inflated { .. }) {
                return not_applicable(report, "the sparse-oracle bound needs inflated penalties".into());
            }
            let support: Vec<usize> = (0..lambda.len()).filter(|&j| lambda[j] != 0.0).collect();
            let mut sorted = j0.to_vec();
            sorted.sort_unstable();
            if support != sorted {
                return not_applicable(report, "J0 must be the support of lambda".into());
            }
            report.approximation = approximation;
            report.bias = 0.0;
            report.variance = 32.0 * s as f64 * r_n * r_n / kappa;
            report.dantzig_limit = Some(32.0 * s as f64 * r_n * r_n / (kappa * kappa));
        }
    }
    report.status = if lhs <= report.bound() { BoundStatus::Holds } else { BoundStatus::Violated };
    Ok(report)
}

/// `P(|Z| >= sqrt(gamma ln M))` for standard normal `Z`.
pub fn gaussian_tail(gamma: f64, m: usize) -> f64 {
    let normal = Normal::standard();
    2.0 * normal.sf((gamma * (m as f64).ln()).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TailReport {
    /// Empirical `P(|V_j| >= r_j)` per atom.
    pub exceedance: Vec<f64>,
    /// `M^{-gamma/2}`
    pub bound: f64,
    pub replicates: usize,
}

impl TailReport {
    pub fn max_exceedance(&self) -> f64 {
        self.exceedance.iter().cloned().fold(0.0, f64::max)
    }

    /// Binomial standard error at the bound.
    pub fn standard_error(&self) -> f64 {
        (self.bound * (1.0 - self.bound) / self.replicates as f64).sqrt()
    }
}

const MC_BATCHES: usize = 64;

fn batch_sizes(total: usize) -> Vec<usize> {
    let batches = MC_BATCHES.min(total.max(1));
    (0..batches).map(|b| total / batches + usize::from(b < total % batches)).collect()
}

/// Monte Carlo frequency of `|V_j| >= r_j` with `V_j = (1/n) sum_i b_i phi_j(x_i) eps_i`
/// and `eps_i ~ N(0, sigma^2)`.
pub fn tail_lemma_check(
    design: &WeightedDesign,
    dict: &DictionaryBasis,
    penalties: &PenaltyLevels,
    sigma: f64,
    replicates: usize,
    seed: u64,
) -> TailReport {
    let problem = LassoProblem::new(dict, design);
    let (n, m) = (problem.n(), problem.m());
    let zt = problem.z.transpose();
    let counts: Vec<Vec<u64>> = batch_sizes(replicates)
        .into_par_iter()
        .enumerate()
        .map(|(b, size)| {
            let mut rng = rng::stream(seed, rng::streams::MONTE_CARLO + 1 + b as u64);
            let mut hits = vec![0u64; m];
            let mut eps = DVector::zeros(n);
            for _ in 0..size {
                for e in eps.iter_mut() {
                    *e = sigma * rng.sample::<f64, _>(StandardNormal);
                }
                let v = &zt * &eps / n as f64;
                for j in 0..m {
                    if v[j].abs() >= penalties.r[j] {
                        hits[j] += 1;
                    }
                }
            }
            hits
        })
        .collect();
    let exceedance = (0..m)
        .map(|j| counts.iter().map(|c| c[j]).sum::<u64>() as f64 / replicates.max(1) as f64)
        .collect();
    TailReport { exceedance, bound: (m as f64).powf(-penalties.gamma / 2.0), replicates }
}

/// A sparse truth `f = f_{lambda*}` and the tuning pair for support recovery.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SupportScenario {
    pub lambda_star: DVector<f64>,
    pub c: f64,
    pub gamma: f64,
    pub gamma_tilde: f64,
}

impl SupportScenario {
    pub fn support(&self) -> Vec<usize> {
        (0..self.lambda_star.len()).filter(|&j| self.lambda_star[j] != 0.0).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SupportConditions {
    pub rho: f64,
    pub s_star: usize,
    /// `s* rho(S*)`
    pub coherence: f64,
    /// `(sqrt(g~) + sqrt(g)) / (sqrt(g~) - sqrt(g))`
    pub tuning_ratio: f64,
    /// `(1 - c) / (2c)`
    pub tuning_limit: f64,
    pub holds: bool,
}

/// `rho(S*) = max_{k in S*} max_{j != k} |<phi_j, phi_k>| / (||phi_j|| ||phi_k||)`.
pub fn coherence_rho(gram: &DMatrix<f64>, support: &[usize]) -> f64 {
    let m = gram.nrows();
    let mut rho: f64 = 0.0;
    for &k in support {
        for j in (0..m).filter(|&j| j != k) {
            let denom = (gram[(j, j)] * gram[(k, k)]).sqrt();
            if denom > 0.0 {
                rho = rho.max(gram[(j, k)].abs() / denom);
            }
        }
    }
    rho
}

pub fn support_conditions(gram: &DMatrix<f64>, scenario: &SupportScenario) -> SupportConditions {
    let support = scenario.support();
    let rho = coherence_rho(gram, &support);
    let s_star = support.len();
    let (sg, sgt) = (scenario.gamma.sqrt(), scenario.gamma_tilde.sqrt());
    let tuning_ratio = if sgt > sg { (sgt + sg) / (sgt - sg) } else { f64::INFINITY };
    let tuning_limit = (1.0 - scenario.c) / (2.0 * scenario.c);
    let coherence = s_star as f64 * rho;
    let holds = scenario.c > 0.0
        && scenario.c < 1.0 / 3.0
        && coherence <= scenario.c
        && tuning_ratio <= tuning_limit;
    SupportConditions { rho, s_star, coherence, tuning_ratio, tuning_limit, holds }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "snake_case", tag = "status")]
pub enum SupportTrial {
    Ran {
        conditions: SupportConditions,
        replicates: usize,
        /// Fraction of replicates with `S^ subset of S*`.
        frequency: f64,
        /// `1 - 2 M^{1 - gamma/2}`
        bound: f64,
    },
    NotApplicable { conditions: SupportConditions },
}

/// Noise draws for one replicate: `y_i = b_i f_{lambda*}(x_i) + sigma eps_i`.
fn simulate_response(problem: &LassoProblem, signal: &DVector<f64>, sigma: f64, rng: &mut rng::StreamRng) -> DVector<f64> {
    DVector::from_iterator(problem.n(), signal.iter().map(|s| s + sigma * rng.sample::<f64, _>(StandardNormal)))
}

/// Fits with the inflated penalties `r~` on `replicates` noisy copies of
/// `f_{lambda*}` and counts how often the selected support stays inside `S*`.
pub fn support_recovery_trial(
    scenario: &SupportScenario,
    design: &WeightedDesign,
    dict: &DictionaryBasis,
    replicates: usize,
    seed: u64,
) -> Result<SupportTrial> {
    let base = LassoProblem::new(dict, design);
    let conditions = support_conditions(&base.gram, scenario);
    if !conditions.holds {
        return Ok(SupportTrial::NotApplicable { conditions });
    }
    let m = base.m();
    let penalties = crate::lasso::penalties_from_norms(
        &base.norms(),
        design.sigma,
        scenario.gamma_tilde,
        design.len(),
        PenaltyVariant::Inflated { base_gamma: scenario.gamma },
    )?;
    let support = scenario.support();
    let signal = &base.z * &scenario.lambda_star;
    let hits: Vec<usize> = batch_sizes(replicates)
        .into_par_iter()
        .enumerate()
        .map(|(b, size)| -> Result<usize> {
            let mut rng = rng::stream(seed, rng::streams::MONTE_CARLO + 1 + b as u64);
            let mut ok = 0;
            for _ in 0..size {
                let y = simulate_response(&base, &signal, design.sigma, &mut rng);
                let problem = LassoProblem::from_matrix(base.z.clone(), y.as_slice());
                let fit = solve_problem(&problem, &penalties.r, 1e-10, 100_000, None)?;
                if fit.active_set.iter().all(|j| support.contains(j)) {
                    ok += 1;
                }
            }
            Ok(ok)
        })
        .collect::<Result<_>>()?;
    let total: usize = hits.iter().sum();
    Ok(SupportTrial::Ran {
        conditions,
        replicates,
        frequency: total as f64 / replicates as f64,
        bound: 1.0 - 2.0 * (m as f64).powf(1.0 - scenario.gamma / 2.0),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundTrial {
    pub replicates: usize,
    pub holds: usize,
    pub violated: usize,
    pub not_applicable: usize,
    /// `1 - 4 M^{1 - gamma/2}`
    pub bound: f64,
    pub max_ratio: f64,
}

impl BoundTrial {
    pub fn frequency(&self) -> f64 {
        self.holds as f64 / self.replicates as f64
    }
}

/// Monte Carlo frequency with which the sparse-oracle bound holds for the
/// inflated-penalty LASSO on noisy copies of `f_{lambda*}`.
pub fn sparse_oracle_trial(
    scenario: &SupportScenario,
    design: &WeightedDesign,
    dict: &DictionaryBasis,
    spectrum: &RestrictedSpectrum,
    replicates: usize,
    seed: u64,
) -> Result<BoundTrial> {
    let base = LassoProblem::new(dict, design);
    let m = base.m();
    let penalties = crate::lasso::penalties_from_norms(
        &base.norms(),
        design.sigma,
        scenario.gamma_tilde,
        design.len(),
        PenaltyVariant::Inflated { base_gamma: scenario.gamma },
    )?;
    let support = scenario.support();
    let signal = &base.z * &scenario.lambda_star;
    let truth = dict_expansion(dict, &scenario.lambda_star);
    let reports: Vec<Vec<OracleBoundReport>> = batch_sizes(replicates)
        .into_par_iter()
        .enumerate()
        .map(|(b, size)| -> Result<Vec<OracleBoundReport>> {
            let mut rng = rng::stream(seed, rng::streams::MONTE_CARLO + 1 + b as u64);
            let mut out = Vec::with_capacity(size);
            for _ in 0..size {
                let y = simulate_response(&base, &signal, design.sigma, &mut rng);
                let problem = LassoProblem::from_matrix(base.z.clone(), y.as_slice());
                let fit = solve_problem(&problem, &penalties.r, 1e-10, 100_000, None)?;
                let noisy = WeightedDesign { y: y.as_slice().to_vec(), ..design.clone() };
                let inputs = BoundInputs {
                    dict,
                    design: &noisy,
                    truth: &truth,
                    lambda: &scenario.lambda_star,
                    j0: &support,
                    alpha: 1.0,
                    spectrum,
                    penalties: &penalties,
                };
                out.push(oracle_bound(&fit, &inputs, BoundVariant::SparseOracle)?);
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let flat: Vec<OracleBoundReport> = reports.into_iter().flatten().collect();
    Ok(BoundTrial {
        replicates,
        holds: flat.iter().filter(|r| r.holds() == Some(true)).count(),
        violated: flat.iter().filter(|r| r.holds() == Some(false)).count(),
        not_applicable: flat.iter().filter(|r| r.holds().is_none()).count(),
        bound: 1.0 - 4.0 * (m as f64).powf(1.0 - scenario.gamma / 2.0),
        max_ratio: flat.iter().map(|r| r.lhs / r.bound()).filter(|v| v.is_finite()).fold(0.0, f64::max),
    })
}

struct DenseExpansion<'a> {
    dict: &'a DictionaryBasis,
    coef: &'a DVector<f64>,
}

impl Curve for DenseExpansion<'_> {
    fn eval(&self, t: f64) -> f64 {
        self.coef.iter().enumerate().filter(|(_, c)| **c != 0.0).map(|(j, c)| c * self.dict.eval(j, t)).sum()
    }
}

fn dict_expansion<'a>(dict: &'a DictionaryBasis, coef: &'a DVector<f64>) -> DenseExpansion<'a> {
    DenseExpansion { dict, coef }
}
