//! Function dictionaries, the weighted regression design obtained from the
//! mixed model, empirical norms and the Gram matrix.

use std::collections::HashSet;
use std::f64::consts::PI;
use std::sync::Arc;

use log::{info, warn};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SnmmError};
use crate::model::{Curve, LongitudinalDataset, RandomEffects, SnmmModel};

#[derive(Debug, Clone, PartialEq)]
pub enum AtomKind {
    Constant,
    Cos { freq: f64 },
    Sin { freq: f64 },
    /// `sqrt(2^level / L) psi(2^level u - shift)` with the Haar mother wavelet.
    Haar { level: u32, shift: u32 },
    /// `sqrt(2^level / L) 1[0,1)(2^level u - shift)`, the Haar scaling function.
    HaarScaling { level: u32, shift: u32 },
    /// Clamped B-spline `index` of the given degree on `knots` in `[0, 1]`.
    BSpline { degree: usize, index: usize, knots: Arc<Vec<f64>> },
    /// `u^exponent` on the clamped mapped coordinate.
    Power { exponent: f64 },
    /// `exp(rate u)` on the clamped mapped coordinate.
    Exp { rate: f64 },
    /// `1 / (1 + exp(-slope (u - center)))` on the clamped mapped coordinate.
    Logit { center: f64, slope: f64 },
}

#[derive(Clone)]
pub struct Atom {
    pub descriptor: String,
    kind: AtomEval,
}

#[derive(Clone)]
enum AtomEval {
    Builtin(AtomKind),
    Custom(Arc<dyn Curve>),
}

impl std::fmt::Debug for Atom {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.descriptor)
    }
}

impl Atom {
    pub fn builtin(descriptor: impl Into<String>, kind: AtomKind) -> Self {
        Self { descriptor: descriptor.into(), kind: AtomEval::Builtin(kind) }
    }

    pub fn custom(descriptor: impl Into<String>, f: Arc<dyn Curve>) -> Self {
        Self { descriptor: descriptor.into(), kind: AtomEval::Custom(f) }
    }

    pub fn kind(&self) -> Option<&AtomKind> {
        match &self.kind {
            AtomEval::Builtin(k) => Some(k),
            AtomEval::Custom(_) => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DictionaryBasis {
    atoms: Vec<Atom>,
    lo: f64,
    hi: f64,
}

impl DictionaryBasis {
    pub fn new(atoms: Vec<Atom>, domain: (f64, f64)) -> Result<Self> {
        let (lo, hi) = domain;
        if !(lo < hi && lo.is_finite() && hi.is_finite()) {
            return Err(SnmmError::Config(format!("invalid dictionary domain [{lo}, {hi}]")));
        }
        if atoms.is_empty() {
            return Err(SnmmError::Config("dictionary has no atoms".into()));
        }
        let mut seen = HashSet::new();
        for a in &atoms {
            if !seen.insert(a.descriptor.as_str()) {
                return Err(SnmmError::Config(format!("duplicate atom descriptor {}", a.descriptor)));
            }
        }
        let dict = Self { atoms, lo, hi };
        for k in 0..=200 {
            let t = lo + (hi - lo) * k as f64 / 200.0;
            for j in 0..dict.len() {
                if !dict.eval(j, t).is_finite() {
                    return Err(SnmmError::Config(format!(
                        "atom {} is not finite at t = {t}",
                        dict.atoms[j].descriptor
                    )));
                }
            }
        }
        Ok(dict)
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.lo, self.hi)
    }

    pub fn atoms(&self) -> &[Atom] {
        &self.atoms
    }

    pub fn descriptors(&self) -> Vec<&str> {
        self.atoms.iter().map(|a| a.descriptor.as_str()).collect()
    }

    fn mapped(&self, t: f64) -> f64 {
        (t - self.lo) / (self.hi - self.lo)
    }

    /// Value of atom `j` at `t`.
    pub fn eval(&self, j: usize, t: f64) -> f64 {
        match &self.atoms[j].kind {
            AtomEval::Custom(f) => f.eval(t),
            AtomEval::Builtin(kind) => match kind {
                AtomKind::Constant => 1.0,
                AtomKind::Cos { freq } => (freq * t).cos(),
                AtomKind::Sin { freq } => (freq * t).sin(),
                AtomKind::Haar { level, shift } => {
                    let scale = 2f64.powi(*level as i32);
                    let v = scale * self.mapped(t) - *shift as f64;
                    let psi = if (0.0..0.5).contains(&v) {
                        1.0
                    } else if (0.5..1.0).contains(&v) {
                        -1.0
                    } else {
                        0.0
                    };
                    (scale / (self.hi - self.lo)).sqrt() * psi
                }
                AtomKind::HaarScaling { level, shift } => {
                    let scale = 2f64.powi(*level as i32);
                    let v = scale * self.mapped(t) - *shift as f64;
                    if (0.0..1.0).contains(&v) { (scale / (self.hi - self.lo)).sqrt() } else { 0.0 }
                }
                AtomKind::BSpline { degree, index, knots } => {
                    bspline(knots, *index, *degree, self.mapped(t).clamp(0.0, 1.0))
                }
                AtomKind::Power { exponent } => self.mapped(t).clamp(0.0, 1.0).powf(*exponent),
                AtomKind::Exp { rate } => (rate * self.mapped(t).clamp(0.0, 1.0)).exp(),
                AtomKind::Logit { center, slope } => {
                    crate::model::logistic(slope * (self.mapped(t).clamp(0.0, 1.0) - center))
                }
            },
        }
    }

    /// `sum_j lambda_j phi_j(t)` over the nonzero coefficients.
    pub fn expansion(self: &Arc<Self>, lambda: &DVector<f64>) -> Expansion {
        Expansion {
            dict: Arc::clone(self),
            terms: lambda.iter().enumerate().filter(|(_, v)| **v != 0.0).map(|(j, v)| (j, *v)).collect(),
        }
    }

    /// One `index<TAB>descriptor` line per atom.
    pub fn describe(&self) -> String {
        self.atoms.iter().enumerate().map(|(j, a)| format!("{j}\t{}\n", a.descriptor)).collect()
    }
}

/// Sparse linear combination of dictionary atoms.
#[derive(Debug, Clone)]
pub struct Expansion {
    dict: Arc<DictionaryBasis>,
    terms: Vec<(usize, f64)>,
}

impl Expansion {
    pub fn terms(&self) -> &[(usize, f64)] {
        &self.terms
    }
}

impl Curve for Expansion {
    fn eval(&self, t: f64) -> f64 {
        self.terms.iter().map(|(j, c)| c * self.dict.eval(*j, t)).sum()
    }
}

/// Cox-de Boor recursion. The last nonempty span is closed on the right so
/// that the basis sums to one on all of `[knots[0], knots[last]]`.
pub fn bspline(knots: &[f64], i: usize, degree: usize, u: f64) -> f64 {
    if degree == 0 {
        let (a, b) = (knots[i], knots[i + 1]);
        let last = *knots.last().expect("nonempty knots");
        let in_span = (a <= u && u < b) || (u == last && b == last && a < b);
        return if in_span { 1.0 } else { 0.0 };
    }
    let mut out = 0.0;
    let d1 = knots[i + degree] - knots[i];
    if d1 > 0.0 {
        out += (u - knots[i]) / d1 * bspline(knots, i, degree - 1, u);
    }
    let d2 = knots[i + degree + 1] - knots[i + 1];
    if d2 > 0.0 {
        out += (knots[i + degree + 1] - u) / d2 * bspline(knots, i + 1, degree - 1, u);
    }
    out
}

/// Clamped knot vector: boundary knots repeated `degree + 1` times.
pub fn clamped_knots(breakpoints: &[f64], degree: usize) -> Vec<f64> {
    let first = breakpoints[0];
    let last = *breakpoints.last().expect("nonempty breakpoints");
    let mut k = vec![first; degree];
    k.extend_from_slice(breakpoints);
    k.extend(std::iter::repeat_n(last, degree));
    k
}

/// One family of atoms in a dictionary description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum FamilyBlock {
    Constant,
    /// `cos(pi t), sin(pi t)` when `half_period`, then `cos(2 pi k t), sin(2 pi k t)`
    /// for `k = 1..=harmonics`, in raw `t`.
    Fourier { harmonics: usize, #[serde(default)] half_period: bool },
    /// Levels `min_level..=max_level`, all shifts, minus the first `drop_first` atoms.
    /// `scaling` swaps the mother wavelet for the box scaling function.
    Haar {
        min_level: u32,
        max_level: u32,
        #[serde(default)]
        drop_first: usize,
        #[serde(default)]
        scaling: bool,
    },
    /// Breakpoints in `[0, 1]` including both ends.
    BSpline { degree: usize, breakpoints: Vec<f64> },
    Power { exponents: Vec<f64> },
    Exp { rates: Vec<f64> },
    Logit { centers: Vec<f64>, slope: f64 },
}

fn fmt_num(v: f64) -> String {
    format!("{v}")
}

impl FamilyBlock {
    fn atoms(&self) -> Result<Vec<Atom>> {
        let mut out = Vec::new();
        match self {
            FamilyBlock::Constant => out.push(Atom::builtin("1", AtomKind::Constant)),
            FamilyBlock::Fourier { harmonics, half_period } => {
                if *half_period {
                    out.push(Atom::builtin("cos(pi*t)", AtomKind::Cos { freq: PI }));
                    out.push(Atom::builtin("sin(pi*t)", AtomKind::Sin { freq: PI }));
                }
                for k in 1..=*harmonics {
                    let freq = 2.0 * PI * k as f64;
                    let tag = if k == 1 { "2*pi*t".to_string() } else { format!("{k}*2*pi*t") };
                    out.push(Atom::builtin(format!("cos({tag})"), AtomKind::Cos { freq }));
                    out.push(Atom::builtin(format!("sin({tag})"), AtomKind::Sin { freq }));
                }
            }
            FamilyBlock::Haar { min_level, max_level, drop_first, scaling } => {
                if min_level > max_level || *max_level > 20 {
                    return Err(SnmmError::Config(format!("bad Haar levels {min_level}..={max_level}")));
                }
                for level in *min_level..=*max_level {
                    for shift in 0..(1u32 << level) {
                        let atom = if *scaling {
                            Atom::builtin(format!("haar_box[j={level},k={shift}]"), AtomKind::HaarScaling { level, shift })
                        } else {
                            Atom::builtin(format!("haar[j={level},k={shift}]"), AtomKind::Haar { level, shift })
                        };
                        out.push(atom);
                    }
                }
                if *drop_first > out.len() {
                    return Err(SnmmError::Config("Haar drop_first exceeds the block size".into()));
                }
                out.drain(..*drop_first);
            }
            FamilyBlock::BSpline { degree, breakpoints } => {
                if breakpoints.len() < 2
                    || breakpoints.windows(2).any(|w| w[0] >= w[1])
                    || breakpoints[0] != 0.0
                    || *breakpoints.last().unwrap() != 1.0
                {
                    return Err(SnmmError::Config(
                        "B-spline breakpoints must increase strictly from 0 to 1".into(),
                    ));
                }
                let knots = Arc::new(clamped_knots(breakpoints, *degree));
                let count = breakpoints.len() + degree - 1;
                for index in 0..count {
                    out.push(Atom::builtin(
                        format!("bspline[deg={degree},i={index}]"),
                        AtomKind::BSpline { degree: *degree, index, knots: Arc::clone(&knots) },
                    ));
                }
            }
            FamilyBlock::Power { exponents } => {
                for e in exponents {
                    if !(*e > 0.0) {
                        return Err(SnmmError::Config(format!("power exponent {e} must be positive")));
                    }
                    out.push(Atom::builtin(format!("pow(u,{})", fmt_num(*e)), AtomKind::Power { exponent: *e }));
                }
            }
            FamilyBlock::Exp { rates } => {
                for r in rates {
                    out.push(Atom::builtin(format!("exp({}*u)", fmt_num(*r)), AtomKind::Exp { rate: *r }));
                }
            }
            FamilyBlock::Logit { centers, slope } => {
                for c in centers {
                    out.push(Atom::builtin(
                        format!("logit(u;c={},s={})", fmt_num(*c), fmt_num(*slope)),
                        AtomKind::Logit { center: *c, slope: *slope },
                    ));
                }
            }
        }
        Ok(out)
    }
}

/// Dictionary description: a named preset or explicit family blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum DictionarySpec {
    /// Constant, half- and full-period Fourier terms up to 5 harmonics, and
    /// Haar atoms at levels 4 to 7 (box functions unless `haar_scaling` is off).
    Study2FourierHaar {
        #[serde(default = "study2_domain")]
        domain: (f64, f64),
        #[serde(default = "default_haar_drop")]
        haar_drop_first: usize,
        #[serde(default = "default_true")]
        haar_scaling: bool,
        #[serde(default = "study2_total")]
        expected_total: Option<usize>,
    },
    /// Cubic and quartic B-splines, power, exponential and logistic atoms.
    AuctionMixed {
        #[serde(default = "auction_domain")]
        domain: (f64, f64),
        #[serde(default = "auction_breakpoints")]
        breakpoints: Vec<f64>,
        #[serde(default = "auction_exponents")]
        exponents: Vec<f64>,
        #[serde(default = "auction_rates")]
        rates: Vec<f64>,
        #[serde(default = "auction_centers")]
        logit_centers: Vec<f64>,
        #[serde(default = "auction_slope")]
        logit_slope: f64,
        #[serde(default = "auction_total")]
        expected_total: Option<usize>,
    },
    Custom {
        domain: (f64, f64),
        blocks: Vec<FamilyBlock>,
        #[serde(default)]
        expected_total: Option<usize>,
    },
}

fn study2_domain() -> (f64, f64) {
    (-0.4, 1.6)
}
fn default_true() -> bool {
    true
}
fn default_haar_drop() -> usize {
    8
}
fn study2_total() -> Option<usize> {
    Some(245)
}
fn auction_domain() -> (f64, f64) {
    (0.0, 1.0)
}
/// Unequally spaced, denser near both ends and around the middle.
pub fn auction_breakpoints() -> Vec<f64> {
    vec![0.0, 0.02, 0.05, 0.1, 0.2, 0.3, 0.4, 0.45, 0.5, 0.55, 0.6, 0.7, 0.8, 0.9, 0.95, 0.98, 1.0]
}
fn auction_exponents() -> Vec<f64> {
    vec![0.15, 0.25, 0.35, 0.5, 0.75, 1.0, 1.5, 2.0, 3.0, 4.0]
}
fn auction_rates() -> Vec<f64> {
    vec![0.1, 0.3, 0.5, 0.7, 0.9, 1.2, 1.5, 2.0, 3.0, 4.0]
}
fn auction_centers() -> Vec<f64> {
    vec![0.1, 0.3, 0.5, 0.7, 0.9]
}
fn auction_slope() -> f64 {
    20.0
}
fn auction_total() -> Option<usize> {
    Some(64)
}

impl DictionarySpec {
    pub fn study2() -> Self {
        DictionarySpec::Study2FourierHaar {
            domain: study2_domain(),
            haar_drop_first: default_haar_drop(),
            haar_scaling: true,
            expected_total: study2_total(),
        }
    }

    pub fn auction() -> Self {
        DictionarySpec::AuctionMixed {
            domain: auction_domain(),
            breakpoints: auction_breakpoints(),
            exponents: auction_exponents(),
            rates: auction_rates(),
            logit_centers: auction_centers(),
            logit_slope: auction_slope(),
            expected_total: auction_total(),
        }
    }

    fn layout(&self) -> ((f64, f64), Vec<FamilyBlock>, Option<usize>) {
        match self {
            DictionarySpec::Study2FourierHaar { domain, haar_drop_first, haar_scaling, expected_total } => (
                *domain,
                vec![
                    FamilyBlock::Constant,
                    FamilyBlock::Fourier { harmonics: 5, half_period: true },
                    FamilyBlock::Haar {
                        min_level: 4,
                        max_level: 7,
                        drop_first: *haar_drop_first,
                        scaling: *haar_scaling,
                    },
                ],
                *expected_total,
            ),
            DictionarySpec::AuctionMixed {
                domain,
                breakpoints,
                exponents,
                rates,
                logit_centers,
                logit_slope,
                expected_total,
            } => (
                *domain,
                vec![
                    FamilyBlock::BSpline { degree: 3, breakpoints: breakpoints.clone() },
                    FamilyBlock::BSpline { degree: 4, breakpoints: breakpoints.clone() },
                    FamilyBlock::Power { exponents: exponents.clone() },
                    FamilyBlock::Exp { rates: rates.clone() },
                    FamilyBlock::Logit { centers: logit_centers.clone(), slope: *logit_slope },
                ],
                *expected_total,
            ),
            DictionarySpec::Custom { domain, blocks, expected_total } => (*domain, blocks.clone(), *expected_total),
        }
    }
}

pub fn build_named_dictionary(spec: &DictionarySpec) -> Result<DictionaryBasis> {
    let (domain, blocks, expected) = spec.layout();
    let mut atoms = Vec::new();
    for b in &blocks {
        atoms.extend(b.atoms()?);
    }
    if let DictionarySpec::Study2FourierHaar { haar_drop_first, .. } = spec {
        if *haar_drop_first > 0 {
            warn!(
                "Haar block trimmed by its first {haar_drop_first} atoms to reach the expected dictionary size"
            );
        }
    }
    if let Some(total) = expected {
        if atoms.len() != total {
            return Err(SnmmError::Config(format!(
                "dictionary has {} atoms, expected {total}",
                atoms.len()
            )));
        }
    }
    info!("built dictionary with {} atoms on [{}, {}]", atoms.len(), domain.0, domain.1);
    DictionaryBasis::new(atoms, domain)
}

/// Regression data `y_i = b_i f(x_i) + eps_i` with the plug-in noise level.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedDesign {
    pub x: Vec<f64>,
    pub b: Vec<f64>,
    pub y: Vec<f64>,
    pub sigma: f64,
}

impl WeightedDesign {
    pub fn new(x: Vec<f64>, b: Vec<f64>, y: Vec<f64>, sigma: f64) -> Result<Self> {
        if x.len() != b.len() || x.len() != y.len() || x.is_empty() {
            return Err(SnmmError::Data("weighted design needs equal nonzero lengths".into()));
        }
        if let Some(i) = b.iter().position(|v| *v == 0.0) {
            return Err(SnmmError::Data(format!("weight b[{i}] is zero")));
        }
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(SnmmError::Data(format!("sigma = {sigma} must be finite and non-negative")));
        }
        Ok(Self { x, b, y, sigma })
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }
}

/// Flatten the data into `y~ = y - a(phi; x)`, `b = b(phi; x)`,
/// `x~ = c(phi; x)`, individual-major then observation order.
pub fn transform_to_regression(
    data: &LongitudinalDataset,
    model: &SnmmModel,
    phi: &RandomEffects,
    sigma2: f64,
) -> Result<WeightedDesign> {
    model.check_data(data)?;
    let s = &*model.structure;
    let n = data.n_total();
    let (mut x, mut b, mut y) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for (i, (ind, p)) in data.individuals().iter().zip(&phi.phi).enumerate() {
        let p = p.as_slice();
        for (j, (xij, yij)) in ind.x.iter().zip(&ind.y).enumerate() {
            let bij = s.b(p, xij);
            if bij == 0.0 || !bij.is_finite() {
                return Err(SnmmError::Transform { individual: i, observation: j });
            }
            x.push(s.c(p, xij));
            b.push(bij);
            y.push(yij - s.a(p, xij));
        }
    }
    WeightedDesign::new(x, b, y, sigma2.max(0.0).sqrt())
}

/// `||h||_n = sqrt((1/n) sum_i b_i^2 h(x_i)^2)`.
pub fn empirical_norm(h: &dyn Curve, design: &WeightedDesign) -> f64 {
    let n = design.len() as f64;
    (design.x.iter().zip(&design.b).map(|(x, b)| (b * h.eval(*x)).powi(2)).sum::<f64>() / n).sqrt()
}

/// `Z` with `Z_ij = b_i phi_j(x_i)`.
pub fn weighted_matrix(dict: &DictionaryBasis, design: &WeightedDesign) -> DMatrix<f64> {
    DMatrix::from_fn(design.len(), dict.len(), |i, j| design.b[i] * dict.eval(j, design.x[i]))
}

/// `G = Z'Z / n`.
pub fn gram_matrix(dict: &DictionaryBasis, design: &WeightedDesign) -> DMatrix<f64> {
    gram_from(&weighted_matrix(dict, design))
}

pub(crate) fn gram_from(z: &DMatrix<f64>) -> DMatrix<f64> {
    let g = z.tr_mul(z) / z.nrows() as f64;
    (&g + g.transpose()) * 0.5
}

/// `beta_hat_j = (1/n) sum_i b_i phi_j(x_i) y_i`.
pub fn correlations(z: &DMatrix<f64>, y: &[f64]) -> DVector<f64> {
    z.tr_mul(&DVector::from_column_slice(y)) / z.nrows() as f64
}
