//! Weighted l1-penalized least squares over a dictionary.
//!
//! Minimizes `crit(l) = (1/n) sum_i (y_i - b_i f_l(x_i))^2 + 2 sum_j r_j |l_j|`
//! by cyclic coordinate descent on the Gram form with an active-set loop,
//! and only returns once the KKT conditions hold to the requested tolerance.

use std::io::Write;

use log::debug;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dictionary::{correlations, gram_from, weighted_matrix, DictionaryBasis, WeightedDesign};
use crate::error::{Result, SnmmError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum PenaltyVariant {
    /// `r_j = sigma ||phi_j||_n sqrt(gamma log M / n)`
    Standard,
    /// Same form with an inflated constant `gamma > base_gamma`.
    Inflated { base_gamma: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PenaltyLevels {
    pub r: DVector<f64>,
    pub gamma: f64,
    pub variant: PenaltyVariant,
}

impl PenaltyLevels {
    /// `r_n = max_j r_j`.
    pub fn r_max(&self) -> f64 {
        self.r.max()
    }
}

/// Penalties from atom norms: `r_j = sigma * norm_j * sqrt(gamma ln M / n)`.
pub fn penalties_from_norms(norms: &[f64], sigma: f64, gamma: f64, n: usize, variant: PenaltyVariant) -> Result<PenaltyLevels> {
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(SnmmError::Config(format!("penalty constant gamma = {gamma} must be positive")));
    }
    if let PenaltyVariant::Inflated { base_gamma } = variant {
        if !(gamma > base_gamma) {
            return Err(SnmmError::Config(format!(
                "inflated penalty needs gamma~ = {gamma} > gamma = {base_gamma}"
            )));
        }
    }
    let m = norms.len() as f64;
    let scale = sigma * (gamma * m.ln() / n as f64).sqrt();
    Ok(PenaltyLevels { r: DVector::from_iterator(norms.len(), norms.iter().map(|v| v * scale)), gamma, variant })
}

pub fn penalty_levels(
    dict: &DictionaryBasis,
    design: &WeightedDesign,
    gamma: f64,
    variant: PenaltyVariant,
) -> Result<PenaltyLevels> {
    let g = gram_from(&weighted_matrix(dict, design));
    let norms: Vec<f64> = g.diagonal().iter().map(|v| v.max(0.0).sqrt()).collect();
    penalties_from_norms(&norms, design.sigma, gamma, design.len(), variant)
}

/// Regression quantities shared by the solver and the checks.
#[derive(Debug, Clone)]
pub struct LassoProblem {
    /// `Z_ij = b_i phi_j(x_i)`
    pub z: DMatrix<f64>,
    pub y: DVector<f64>,
    pub gram: DMatrix<f64>,
    /// `(1/n) Z'y`
    pub beta_hat: DVector<f64>,
}

impl LassoProblem {
    pub fn new(dict: &DictionaryBasis, design: &WeightedDesign) -> Self {
        Self::from_matrix(weighted_matrix(dict, design), &design.y)
    }

    pub fn from_matrix(z: DMatrix<f64>, y: &[f64]) -> Self {
        let gram = gram_from(&z);
        let beta_hat = correlations(&z, y);
        Self { z, y: DVector::from_column_slice(y), gram, beta_hat }
    }

    pub fn n(&self) -> usize {
        self.z.nrows()
    }

    pub fn m(&self) -> usize {
        self.z.ncols()
    }

    /// Atom norms `||phi_j||_n`.
    pub fn norms(&self) -> Vec<f64> {
        self.gram.diagonal().iter().map(|v| v.max(0.0).sqrt()).collect()
    }

    /// Objective from the raw residuals.
    pub fn crit(&self, lambda: &DVector<f64>, r: &DVector<f64>) -> f64 {
        let resid = &self.y - &self.z * lambda;
        resid.norm_squared() / self.n() as f64 + 2.0 * r.iter().zip(lambda.iter()).map(|(r, l)| r * l.abs()).sum::<f64>()
    }

    /// `beta_hat - G lambda`.
    pub fn residual_correlation(&self, lambda: &DVector<f64>) -> DVector<f64> {
        &self.beta_hat - &self.gram * lambda
    }

    /// Per-atom KKT residuals: `|c_j| - r_j` when inactive and
    /// `|c_j - r_j sign(l_j)|` when active, with `c = beta_hat - G lambda`.
    pub fn kkt_residuals(&self, lambda: &DVector<f64>, r: &DVector<f64>) -> DVector<f64> {
        let c = self.residual_correlation(lambda);
        DVector::from_iterator(
            c.len(),
            (0..c.len()).map(|j| {
                if lambda[j] == 0.0 {
                    c[j].abs() - r[j]
                } else {
                    (c[j] - r[j] * lambda[j].signum()).abs()
                }
            }),
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LassoFit {
    pub lambda_hat: DVector<f64>,
    pub active_set: Vec<usize>,
    pub objective: f64,
    pub kkt_residuals: DVector<f64>,
    /// Coordinate sweeps performed.
    pub iterations: usize,
}

impl LassoFit {
    pub fn max_kkt_residual(&self) -> f64 {
        self.kkt_residuals.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Index of the largest coefficient in absolute value, lowest index on ties.
    pub fn leading_atom(&self) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for &j in &self.active_set {
            let v = self.lambda_hat[j].abs();
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((j, v));
            }
        }
        best.map(|(j, _)| j)
    }

    /// `descriptor,coefficient` for every selected atom.
    pub fn write_csv<W: Write>(&self, dict: &DictionaryBasis, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["atom", "coefficient"])?;
        for &j in &self.active_set {
            w.write_record([dict.atoms()[j].descriptor.clone(), format!("{}", self.lambda_hat[j])])?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn crit(lambda: &DVector<f64>, dict: &DictionaryBasis, design: &WeightedDesign, penalties: &PenaltyLevels) -> f64 {
    LassoProblem::new(dict, design).crit(lambda, &penalties.r)
}

fn soft(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

/// Atoms with `||phi_j||_n` below this fraction of the largest norm are
/// treated as vanishing on the design and kept at zero.
pub const VANISHING_NORM_RATIO: f64 = 1e-10;

/// Coordinate descent on a prepared problem, optionally warm-started.
pub fn solve_problem(
    problem: &LassoProblem,
    r: &DVector<f64>,
    tol: f64,
    max_iter: usize,
    start: Option<&DVector<f64>>,
) -> Result<LassoFit> {
    let m = problem.m();
    if r.len() != m {
        return Err(SnmmError::Config(format!("{} penalties for {m} atoms", r.len())));
    }
    if !(tol > 0.0) || r.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(SnmmError::Config("lasso needs tol > 0 and finite non-negative penalties".into()));
    }
    let g = &problem.gram;
    // atoms whose design norm is rounding noise next to the largest one
    let floor = VANISHING_NORM_RATIO.powi(2) * (0..m).map(|j| g[(j, j)]).fold(0.0, f64::max);
    let usable: Vec<bool> = (0..m).map(|j| g[(j, j)] > floor).collect();
    let skipped = usable.iter().filter(|u| !**u).count();
    if skipped > 0 {
        debug!("{skipped} atoms vanish on the design and are left out");
    }
    let mut lambda = match start {
        Some(s) if s.len() == m => s.map(|v| if v.is_finite() { v } else { 0.0 }),
        _ => DVector::zeros(m),
    };
    for j in 0..m {
        if !usable[j] {
            lambda[j] = 0.0;
        }
    }
    let gmax = (0..m).map(|j| g[(j, j)]).fold(0.0, f64::max).sqrt();
    let mut c = problem.residual_correlation(&lambda);

    let update = |j: usize, lambda: &mut DVector<f64>, c: &mut DVector<f64>| -> f64 {
        let gjj = g[(j, j)];
        let old = lambda[j];
        let new = soft(c[j] + gjj * old, r[j]) / gjj;
        let delta = new - old;
        if delta != 0.0 {
            lambda[j] = new;
            c.axpy(-delta, &g.column(j), 1.0);
        }
        delta.abs() * gjj.sqrt() * gmax
    };

    let mut sweeps = 0;
    let mut worst = f64::INFINITY;
    while sweeps < max_iter {
        for j in 0..m {
            if usable[j] {
                update(j, &mut lambda, &mut c);
            }
        }
        sweeps += 1;
        let active: Vec<usize> = (0..m).filter(|&j| lambda[j] != 0.0).collect();
        while sweeps < max_iter {
            let mut change: f64 = 0.0;
            for &j in &active {
                change = change.max(update(j, &mut lambda, &mut c));
            }
            sweeps += 1;
            if change <= 0.01 * tol {
                break;
            }
        }
        c = problem.residual_correlation(&lambda);
        let kkt = problem.kkt_residuals(&lambda, r);
        worst = kkt.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if worst <= tol {
            let active_set = (0..m).filter(|&j| lambda[j] != 0.0).collect();
            return Ok(LassoFit {
                objective: problem.crit(&lambda, r),
                lambda_hat: lambda,
                active_set,
                kkt_residuals: kkt,
                iterations: sweeps,
            });
        }
    }
    Err(SnmmError::Convergence { iterations: sweeps, worst_residual: worst })
}

pub fn solve_lasso(
    dict: &DictionaryBasis,
    design: &WeightedDesign,
    penalties: &PenaltyLevels,
    tol: f64,
    max_iter: usize,
) -> Result<LassoFit> {
    solve_problem(&LassoProblem::new(dict, design), &penalties.r, tol, max_iter, None)
}

/// Margins `r_j - |(G lambda)_j - beta_hat_j|` of the Dantzig constraint.
#[derive(Debug, Clone, PartialEq)]
pub struct DantzigReport {
    pub margins: DVector<f64>,
}

impl DantzigReport {
    pub fn satisfied(&self) -> Vec<bool> {
        self.margins.iter().map(|m| *m >= 0.0).collect()
    }

    pub fn member(&self, tol: f64) -> bool {
        self.margins.iter().all(|m| *m >= -tol)
    }

    pub fn min_margin(&self) -> f64 {
        self.margins.min()
    }
}

pub fn dantzig_margins(problem: &LassoProblem, lambda: &DVector<f64>, r: &DVector<f64>) -> DantzigReport {
    let c = problem.residual_correlation(lambda);
    DantzigReport { margins: DVector::from_iterator(c.len(), (0..c.len()).map(|j| r[j] - c[j].abs())) }
}

pub fn dantzig_check(
    lambda: &DVector<f64>,
    dict: &DictionaryBasis,
    design: &WeightedDesign,
    penalties: &PenaltyLevels,
) -> DantzigReport {
    dantzig_margins(&LassoProblem::new(dict, design), lambda, &penalties.r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dictionary::{Atom, DictionaryBasis};
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;
    use std::f64::consts::PI;
    use std::sync::Arc;

    fn random_problem(seed: u64, n: usize, m: usize) -> LassoProblem {
        let mut rng = crate::rng::stream(seed, 77);
        let z = DMatrix::from_fn(n, m, |_, _| rng.sample::<f64, _>(StandardNormal));
        let truth: Vec<f64> = (0..m).map(|j| if j % 3 == 0 { 1.0 - 0.2 * j as f64 } else { 0.0 }).collect();
        let y: Vec<f64> = (0..n)
            .map(|i| (0..m).map(|j| z[(i, j)] * truth[j]).sum::<f64>() + 0.5 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        LassoProblem::from_matrix(z, &y)
    }

    /// Accelerated proximal gradient, run to a tiny step change.
    fn fista(p: &LassoProblem, r: &DVector<f64>) -> DVector<f64> {
        let lip = 2.0 * p.gram.clone().symmetric_eigen().eigenvalues.max();
        let m = p.m();
        let (mut x, mut yk) = (DVector::zeros(m), DVector::zeros(m));
        let mut t: f64 = 1.0;
        for _ in 0..200_000 {
            let grad = (&p.gram * &yk - &p.beta_hat) * 2.0;
            let v = &yk - grad / lip;
            let next = DVector::from_iterator(m, (0..m).map(|j| soft(v[j], 2.0 * r[j] / lip)));
            let t_next = (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0;
            yk = &next + (&next - &x) * ((t - 1.0) / t_next);
            let done = (&next - &x).amax() < 1e-14;
            x = next;
            t = t_next;
            if done {
                break;
            }
        }
        x
    }

    #[test]
    fn zero_lambda_objective_and_perfect_fit() {
        let p = random_problem(1, 20, 4);
        let r = DVector::from_element(4, 0.3);
        assert!((p.crit(&DVector::zeros(4), &r) - p.y.norm_squared() / 20.0).abs() < 1e-15);

        let dict = DictionaryBasis::new(vec![Atom::custom("one", Arc::new(|_t: f64| 1.0))], (0.0, 1.0)).unwrap();
        let design = WeightedDesign::new(vec![0.1, 0.5, 0.9], vec![1.0; 3], vec![2.5; 3], 1.0).unwrap();
        let pen = PenaltyLevels { r: DVector::zeros(1), gamma: 2.0, variant: PenaltyVariant::Standard };
        assert_eq!(crit(&DVector::from_element(1, 2.5), &dict, &design, &pen), 0.0);
    }

    #[test]
    fn crit_matches_straight_line() {
        let dict = DictionaryBasis::new(
            vec![
                Atom::custom("a", Arc::new(|t: f64| t)),
                Atom::custom("b", Arc::new(|t: f64| (3.0 * t).sin())),
            ],
            (0.0, 1.0),
        )
        .unwrap();
        let x = vec![0.1, 0.4, 0.8];
        let b = vec![1.0, -2.0, 0.5];
        let y = vec![0.3, -0.2, 1.1];
        let design = WeightedDesign::new(x.clone(), b.clone(), y.clone(), 1.0).unwrap();
        let pen = PenaltyLevels { r: DVector::from_column_slice(&[0.1, 0.05]), gamma: 2.0, variant: PenaltyVariant::Standard };
        let lam = DVector::from_column_slice(&[0.7, -0.4]);
        let mut loss = 0.0;
        for i in 0..3 {
            let f = 0.7 * x[i] - 0.4 * (3.0 * x[i]).sin();
            loss += (y[i] - b[i] * f).powi(2);
        }
        let expected = loss / 3.0 + 2.0 * (0.1 * 0.7 + 0.05 * 0.4);
        assert!((crit(&lam, &dict, &design, &pen) - expected).abs() < 1e-12);
    }

    #[test]
    fn huge_penalties_give_zero() {
        let p = random_problem(2, 30, 6);
        let r = DVector::from_element(6, p.beta_hat.amax() * 1.01);
        let fit = solve_problem(&p, &r, 1e-10, 1000, None).unwrap();
        assert!(fit.lambda_hat.iter().all(|v| *v == 0.0));
        assert!(fit.active_set.is_empty());
    }

    #[test]
    fn orthonormal_design_soft_thresholds() {
        let n = 32;
        let x: Vec<f64> = (0..n).map(|i| i as f64 / n as f64).collect();
        let s = 2f64.sqrt();
        let atoms = vec![
            Atom::custom("1", Arc::new(|_t: f64| 1.0)),
            Atom::custom("c1", Arc::new(move |t: f64| s * (2.0 * PI * t).cos())),
            Atom::custom("s1", Arc::new(move |t: f64| s * (2.0 * PI * t).sin())),
            Atom::custom("c2", Arc::new(move |t: f64| s * (4.0 * PI * t).cos())),
        ];
        let dict = DictionaryBasis::new(atoms, (0.0, 1.0)).unwrap();
        let mut rng = crate::rng::stream(3, 3);
        let y: Vec<f64> = x.iter().map(|t| 0.8 * (2.0 * PI * t).sin() + 0.3 * rng.sample::<f64, _>(StandardNormal)).collect();
        let design = WeightedDesign::new(x, vec![1.0; n], y, 0.3).unwrap();
        let problem = LassoProblem::new(&dict, &design);
        assert!((&problem.gram - DMatrix::identity(4, 4)).amax() < 1e-12);
        let pen = penalty_levels(&dict, &design, 2.0, PenaltyVariant::Standard).unwrap();
        let fit = solve_lasso(&dict, &design, &pen, 1e-12, 10_000).unwrap();
        for j in 0..4 {
            assert!((fit.lambda_hat[j] - soft(problem.beta_hat[j], pen.r[j])).abs() < 1e-10);
        }
    }

    #[test]
    fn matches_proximal_gradient_reference() {
        for seed in 0..10 {
            let p = random_problem(100 + seed, 50, 10);
            let r = DVector::from_iterator(10, p.norms().iter().map(|v| 0.5 * v * (2.0 * (10f64).ln() / 50.0).sqrt()));
            let fit = solve_problem(&p, &r, 1e-10, 100_000, None).unwrap();
            let reference = fista(&p, &r);
            let (a, b) = (fit.objective, p.crit(&reference, &r));
            assert!((a - b).abs() <= 1e-6 * b.abs(), "seed {seed}: {a} vs {b}");
            assert!(fit.max_kkt_residual() <= 1e-10);
            assert!(dantzig_margins(&p, &fit.lambda_hat, &r).member(1e-10));
            assert!((fit.objective - p.crit(&fit.lambda_hat, &r)).abs() < 1e-10);
        }
    }

    #[test]
    fn zero_norm_atom_is_excluded() {
        let z = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 2.0, 0.0, -1.0, 0.0]);
        let p = LassoProblem::from_matrix(z, &[1.0, 2.0, 0.5]);
        let pen = penalties_from_norms(&p.norms(), 1.0, 2.0, 3, PenaltyVariant::Standard).unwrap();
        assert_eq!(pen.r[1], 0.0);
        let fit = solve_problem(&p, &pen.r, 1e-12, 1000, None).unwrap();
        assert_eq!(fit.lambda_hat[1], 0.0);
        assert_eq!(fit.active_set, vec![0]);
    }

    #[test]
    fn rounding_noise_atom_is_excluded() {
        let z = DMatrix::from_row_slice(3, 2, &[1.0, 1e-16, 2.0, -1e-16, -1.0, 1e-16]);
        let p = LassoProblem::from_matrix(z, &[1.0, 2.0, 0.5]);
        let pen = penalties_from_norms(&p.norms(), 1.0, 2.0, 3, PenaltyVariant::Standard).unwrap();
        let fit = solve_problem(&p, &pen.r, 1e-12, 1000, None).unwrap();
        assert_eq!(fit.lambda_hat[1], 0.0);
    }

    #[test]
    fn penalty_formula() {
        // sigma=1, ||phi||=1, gamma=2, M=e, n=2 -> sqrt(2 * 1 / 2) = 1
        let pen = penalties_from_norms(&[1.0], 1.0, 2.0, 2, PenaltyVariant::Standard).unwrap();
        let scale = (2.0 * 1f64.ln() / 2.0).sqrt();
        assert_eq!(pen.r[0], scale);
        let m = std::f64::consts::E;
        assert!(((2.0 * m.ln() / 2.0).sqrt() - 1.0).abs() < 1e-15);
        let norms = [0.5, 2.0, 0.0];
        let pen = penalties_from_norms(&norms, 0.7, 1.0 / 3.0, 200, PenaltyVariant::Standard).unwrap();
        for j in 0..3 {
            assert!((pen.r[j] - 0.7 * norms[j] * (1.0 / 3.0 * 3f64.ln() / 200.0).sqrt()).abs() < 1e-12);
        }
        assert_eq!(pen.r_max(), pen.r[1]);
        assert!(penalties_from_norms(&norms, 1.0, 2.0, 10, PenaltyVariant::Inflated { base_gamma: 3.0 }).is_err());
        assert!(penalties_from_norms(&norms, 1.0, 0.0, 10, PenaltyVariant::Standard).is_err());
    }

    #[test]
    fn dantzig_examples() {
        // noiseless, f in the span: exact least squares has zero residual correlation
        let z = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 1.0, 1.0, 1.0, 2.0, 1.0, 3.0]);
        let y: Vec<f64> = (0..4).map(|i| 2.0 - 0.5 * i as f64).collect();
        let p = LassoProblem::from_matrix(z, &y);
        let r = DVector::from_element(2, 0.01);
        assert!(dantzig_margins(&p, &DVector::from_column_slice(&[2.0, -0.5]), &r).member(1e-12));
        let zero = dantzig_margins(&p, &DVector::zeros(2), &r);
        assert!(!zero.member(0.0));
        assert!(zero.satisfied().iter().any(|s| !s));
    }

    #[test]
    fn convergence_error_carries_residual() {
        let p = random_problem(5, 40, 8);
        let r = DVector::from_element(8, 0.01);
        match solve_problem(&p, &r, 1e-14, 1, None) {
            Err(SnmmError::Convergence { iterations, worst_residual }) => {
                assert_eq!(iterations, 1);
                assert!(worst_residual > 1e-14);
            }
            other => panic!("expected convergence error, got {other:?}"),
        }
    }

    #[test]
    fn lasso_beats_reference_points() {
        let p = random_problem(9, 60, 8);
        let r = DVector::from_iterator(8, p.norms().iter().map(|v| 0.1 * v));
        let fit = solve_problem(&p, &r, 1e-10, 100_000, None).unwrap();
        let ridge = (&p.gram + DMatrix::identity(8, 8) * 0.1).cholesky().unwrap().solve(&p.beta_hat);
        let mut oracle = DVector::zeros(8);
        for j in [0usize, 3, 6] {
            oracle[j] = 1.0 - 0.2 * j as f64;
        }
        for cand in [DVector::zeros(8), ridge, oracle] {
            assert!(fit.objective <= p.crit(&cand, &r) + 1e-12);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn crit_is_convex(seed in 0u64..1000, t in 0.0f64..1.0) {
            let p = random_problem(seed, 15, 5);
            let mut rng = crate::rng::stream(seed, 5);
            let a = DVector::from_fn(5, |_, _| rng.sample::<f64, _>(StandardNormal));
            let b = DVector::from_fn(5, |_, _| rng.sample::<f64, _>(StandardNormal));
            let r = DVector::from_element(5, 0.2);
            let mid = &a * t + &b * (1.0 - t);
            prop_assert!(p.crit(&mid, &r) <= t * p.crit(&a, &r) + (1.0 - t) * p.crit(&b, &r) + 1e-12);
        }

        #[test]
        fn larger_penalties_shrink_l1_norm(seed in 0u64..1000, base in 0.01f64..0.3, factor in 1.0f64..3.0) {
            let p = random_problem(seed, 40, 6);
            let r1 = DVector::from_iterator(6, p.norms().iter().map(|v| base * v));
            let r2 = &r1 * factor;
            let f1 = solve_problem(&p, &r1, 1e-11, 100_000, None).unwrap();
            let f2 = solve_problem(&p, &r2, 1e-11, 100_000, None).unwrap();
            prop_assert!(f2.lambda_hat.lp_norm(1) <= f1.lambda_hat.lp_norm(1) + 1e-8);
            prop_assert!(dantzig_margins(&p, &f1.lambda_hat, &r1).member(1e-11));
        }

        #[test]
        fn warm_start_reaches_the_same_optimum(seed in 0u64..1000) {
            let p = random_problem(seed, 30, 7);
            let r = DVector::from_iterator(7, p.norms().iter().map(|v| 0.05 * v));
            let cold = solve_problem(&p, &r, 1e-11, 100_000, None).unwrap();
            let start = DVector::from_element(7, 0.3);
            let warm = solve_problem(&p, &r, 1e-11, 100_000, Some(&start)).unwrap();
            prop_assert!((cold.objective - warm.objective).abs() < 1e-9);
        }
    }
}
