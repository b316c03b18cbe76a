//! Run configuration, seeded study replication, auction ingestion and the
//! files written by every run.

use std::collections::HashMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use log::{info, warn};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::dictionary::{build_named_dictionary, gram_matrix, DictionarySpec, FamilyBlock, WeightedDesign};
use crate::dictionary::DictionaryBasis;
use crate::error::{Result, SnmmError};
use crate::lasso::{penalty_levels, PenaltyVariant};
use crate::model::{
    simulate_dataset, CovarianceStructure, Curve, HorizontalShift, IndividualRecord, LongitudinalDataset,
    MixedStructure, RandomIntercept, ScenarioSpec, ShapeInvariant, SnmmModel, ThetaEstimate,
};
use crate::oracle::{
    check_a1, sparse_oracle_trial, restricted_spectrum, spectrum_for_sparsity, support_recovery_trial, tail_lemma_check,
    A1Check, BoundTrial, RestrictedSpectrum, SupportScenario, SupportTrial, TailReport,
};
use crate::reml::run_saem_reml;
use crate::rng::{self, replicate_seed};
use crate::saem::{run_saem_ml, FixedShape, SaemConfig, Trace};
use crate::semiparam::{
    confidence_band, ise, point_estimate, run_lasso_saem, uniform_grid, write_atom_frequencies, AtomFrequency,
    ConfidenceBand, EstimationMode, FunctionEnsemble, LassoSaemConfig,
};

/// Version of the CSV and JSON layouts written by this module.
pub const SCHEMA_VERSION: u32 = 1;

pub const EXPECTED_AUCTIONS: usize = 183;
pub const EXPECTED_BIDS: usize = 3280;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Study1,
    Study2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScenarioChoice {
    Preset(Preset),
    Custom(ScenarioSpec),
}

impl ScenarioChoice {
    pub fn spec(&self) -> ScenarioSpec {
        match self {
            ScenarioChoice::Preset(Preset::Study1) => ScenarioSpec::study1(),
            ScenarioChoice::Preset(Preset::Study2) => ScenarioSpec::study2(),
            ScenarioChoice::Custom(s) => s.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StructureChoice {
    /// `phi_1 + amplitude exp(phi_2) f(x - shift(phi_3))`
    ShapeInvariant {
        #[serde(default = "two")]
        amplitude: f64,
        #[serde(default = "logistic_shift")]
        shift: HorizontalShift,
    },
    RandomIntercept,
}

fn two() -> f64 {
    2.0
}
fn logistic_shift() -> HorizontalShift {
    HorizontalShift::Logistic
}

impl StructureChoice {
    fn build(&self) -> Arc<dyn MixedStructure> {
        match *self {
            StructureChoice::ShapeInvariant { amplitude, shift } => Arc::new(ShapeInvariant { amplitude, shift }),
            StructureChoice::RandomIntercept => Arc::new(RandomIntercept),
        }
    }
}

/// Fixed-effects design shared by all individuals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FixedEffects {
    /// `A_i = I_p`: one mean per coordinate of `phi`.
    #[default]
    Identity,
    /// `A_i = e_1`: only the first coordinate has a nonzero mean.
    Intercept,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSettings {
    #[serde(default = "default_structure")]
    pub structure: StructureChoice,
    #[serde(default)]
    pub fixed_effects: FixedEffects,
    #[serde(default = "diagonal")]
    pub covariance: CovarianceStructure,
}

fn default_structure() -> StructureChoice {
    StructureChoice::ShapeInvariant { amplitude: 2.0, shift: HorizontalShift::Logistic }
}
fn diagonal() -> CovarianceStructure {
    CovarianceStructure::Diagonal
}

impl Default for ModelSettings {
    fn default() -> Self {
        Self { structure: default_structure(), fixed_effects: FixedEffects::Identity, covariance: diagonal() }
    }
}

impl ModelSettings {
    pub fn build(&self, n_individuals: usize) -> Result<SnmmModel> {
        let structure = self.structure.build();
        let p = structure.p();
        let a = match self.fixed_effects {
            FixedEffects::Identity => DMatrix::identity(p, p),
            FixedEffects::Intercept => {
                let mut a = DMatrix::zeros(p, 1);
                a[(0, 0)] = 1.0;
                a
            }
        };
        SnmmModel::with_shared_design(structure, a, n_individuals, self.covariance)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SaemSettings {
    #[serde(default = "eighty")]
    pub iterations: usize,
    #[serde(default = "fifty")]
    pub burn_in: usize,
    #[serde(default = "five")]
    pub chains: usize,
    #[serde(default = "five")]
    pub mh_steps: usize,
    /// Defaults to 0.5 for every coordinate.
    #[serde(default)]
    pub proposal_scale: Option<Vec<f64>>,
}

fn eighty() -> usize {
    80
}
fn fifty() -> usize {
    50
}
fn five() -> usize {
    5
}

impl Default for SaemSettings {
    fn default() -> Self {
        Self { iterations: 80, burn_in: 50, chains: 5, mh_steps: 5, proposal_scale: None }
    }
}

impl SaemSettings {
    pub fn to_config(&self, p: usize, seed: u64) -> SaemConfig {
        let mut cfg = SaemConfig::new(self.iterations, self.burn_in, self.chains, p, seed);
        cfg.mh_steps = self.mh_steps;
        if let Some(s) = &self.proposal_scale {
            cfg.proposal_scale = s.clone();
        }
        cfg
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LassoSettings {
    #[serde(default)]
    pub mode: EstimationMode,
    #[serde(default = "one_third")]
    pub gamma: f64,
    /// Inflated constant for the oracle support and bound commands.
    #[serde(default)]
    pub gamma_tilde: Option<f64>,
    /// Retained iterations; all post-burn-in iterations when absent.
    #[serde(default)]
    pub l0: Option<usize>,
    #[serde(default = "yes")]
    pub recenter_scale: bool,
    #[serde(default = "default_lasso_tol")]
    pub tol: f64,
    #[serde(default = "default_lasso_iter")]
    pub max_iter: usize,
}

fn one_third() -> f64 {
    1.0 / 3.0
}
fn yes() -> bool {
    true
}
fn default_lasso_tol() -> f64 {
    1e-6
}
fn default_lasso_iter() -> usize {
    100_000
}

impl Default for LassoSettings {
    fn default() -> Self {
        Self {
            mode: EstimationMode::Reml,
            gamma: one_third(),
            gamma_tilde: None,
            l0: None,
            recenter_scale: true,
            tol: default_lasso_tol(),
            max_iter: default_lasso_iter(),
        }
    }
}

/// Where the shape function comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeSource {
    /// LASSO refit inside every SAEM iteration.
    #[default]
    Lasso,
    /// The scenario's true shape, held fixed.
    Truth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitSettings {
    pub beta: Vec<f64>,
    pub gamma_diag: Vec<f64>,
    pub sigma2: f64,
}

impl InitSettings {
    pub fn theta(&self) -> Result<ThetaEstimate> {
        ThetaEstimate::from_diagonal(&self.beta, &self.gamma_diag, self.sigma2)
    }
}

/// Starting values used in both simulation studies.
pub fn study_init() -> InitSettings {
    InitSettings { beta: vec![1.0, 0.0, 0.0], gamma_diag: vec![1.0, 0.3, 0.1], sigma2: 2.0 }
}

/// Column names of a delimited auction file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuctionSchema {
    #[serde(default = "col_id")]
    pub auction_id: String,
    #[serde(default = "col_time")]
    pub bid_time: String,
    #[serde(default = "col_bid")]
    pub live_bid: String,
    #[serde(default = "comma")]
    pub delimiter: char,
    /// Time is divided by this to land in `[0, 1]`.
    #[serde(default = "seven")]
    pub duration_days: f64,
    /// Reject auctions whose live bids decrease over time.
    #[serde(default = "yes")]
    pub require_monotone: bool,
}

fn col_id() -> String {
    "auction_id".into()
}
fn col_time() -> String {
    "bid_time".into()
}
fn col_bid() -> String {
    "live_bid".into()
}
fn comma() -> char {
    ','
}
fn seven() -> f64 {
    7.0
}

impl Default for AuctionSchema {
    fn default() -> Self {
        Self {
            auction_id: col_id(),
            bid_time: col_time(),
            live_bid: col_bid(),
            delimiter: comma(),
            duration_days: seven(),
            require_monotone: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuctionSettings {
    #[serde(default)]
    pub schema: AuctionSchema,
    #[serde(default = "yes")]
    pub validate_totals: bool,
}

impl Default for AuctionSettings {
    fn default() -> Self {
        Self { schema: AuctionSchema::default(), validate_totals: true }
    }
}

/// Everything a CLI run needs. Every section has defaults, so an empty file
/// describes a study-2 LASSO-SAEM fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "study2_choice")]
    pub scenario: ScenarioChoice,
    /// Long-format data file (`id,x,y`) fitted instead of a simulated dataset.
    #[serde(default)]
    pub data: Option<PathBuf>,
    #[serde(default)]
    pub model: ModelSettings,
    #[serde(default)]
    pub saem: SaemSettings,
    #[serde(default = "DictionarySpec::study2")]
    pub dictionary: DictionarySpec,
    #[serde(default)]
    pub lasso: LassoSettings,
    #[serde(default)]
    pub shape: ShapeSource,
    /// Study starting values when absent (data-driven for auctions).
    #[serde(default)]
    pub init: Option<InitSettings>,
    #[serde(default)]
    pub auction: AuctionSettings,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
}

fn study2_choice() -> ScenarioChoice {
    ScenarioChoice::Preset(Preset::Study2)
}
fn default_output() -> PathBuf {
    PathBuf::from("snmm-out")
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            scenario: study2_choice(),
            data: None,
            model: ModelSettings::default(),
            saem: SaemSettings::default(),
            dictionary: DictionarySpec::study2(),
            lasso: LassoSettings::default(),
            shape: ShapeSource::Lasso,
            init: None,
            auction: AuctionSettings::default(),
            output_dir: default_output(),
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let line = e.span().map(|s| text[..s.start].matches('\n').count() + 1).unwrap_or(0);
            SnmmError::Parse { line, message: e.message().to_string() }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| SnmmError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| SnmmError::Config(format!("config not serializable: {e}")))
    }

    /// Defaults for the two simulation studies.
    pub fn for_study(study: Preset) -> Self {
        match study {
            Preset::Study1 => Self {
                scenario: ScenarioChoice::Preset(Preset::Study1),
                shape: ShapeSource::Truth,
                init: Some(study_init()),
                ..Self::default()
            },
            Preset::Study2 => Self { init: Some(study_init()), ..Self::default() },
        }
    }

    /// REML, `gamma = 2`, 100 iterations with the step break at 60, 3 chains,
    /// the last 8 iterations retained, full covariance and
    /// `y = phi_1 + exp(phi_2) f(t - phi_3)`.
    pub fn for_auction() -> Self {
        Self {
            scenario: ScenarioChoice::Preset(Preset::Study2),
            model: ModelSettings {
                structure: StructureChoice::ShapeInvariant { amplitude: 1.0, shift: HorizontalShift::Linear },
                fixed_effects: FixedEffects::Identity,
                covariance: CovarianceStructure::Full,
            },
            saem: SaemSettings { iterations: 100, burn_in: 60, chains: 3, mh_steps: 5, proposal_scale: None },
            dictionary: DictionarySpec::auction(),
            lasso: LassoSettings { gamma: 2.0, l0: Some(8), ..LassoSettings::default() },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.scenario.spec().validate()?;
        if let Some(path) = &self.data {
            if !path.exists() {
                return Err(SnmmError::Config(format!("data file {} does not exist", path.display())));
            }
        }
        if let Some(init) = &self.init {
            init.theta()?;
        }
        let p = self.model.structure.build().p();
        self.lasso_config(p).validate(p)?;
        Ok(())
    }

    pub fn lasso_config(&self, p: usize) -> LassoSaemConfig {
        let mut cfg = LassoSaemConfig::new(self.saem.to_config(p, self.seed), self.lasso.mode, self.lasso.gamma);
        cfg.l0 = self.lasso.l0;
        cfg.recenter_scale = self.lasso.recenter_scale;
        cfg.lasso_tol = self.lasso.tol;
        cfg.lasso_max_iter = self.lasso.max_iter;
        cfg
    }
}

/// Reproduction record written next to every output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub schema: u32,
    pub command: String,
    pub seed: u64,
    pub worker_threads: usize,
    pub config: serde_json::Value,
    pub extra: serde_json::Value,
}

impl Manifest {
    pub fn new<C: Serialize>(command: &str, seed: u64, config: &C, extra: serde_json::Value) -> Result<Self> {
        Ok(Self {
            tool: "snmm".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            schema: SCHEMA_VERSION,
            command: command.into(),
            seed,
            worker_threads: rayon::current_num_threads(),
            config: serde_json::to_value(config).map_err(json_err)?,
            extra,
        })
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        write_json_atomic(&dir.join("manifest.json"), self)
    }
}

fn json_err(e: serde_json::Error) -> SnmmError {
    SnmmError::Config(format!("json: {e}"))
}

/// Writes to a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_json_atomic<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(json_err)?;
    write_atomic(path, text.as_bytes())
}

fn create_file(path: &Path) -> Result<std::io::BufWriter<fs::File>> {
    Ok(std::io::BufWriter::new(fs::File::create(path)?))
}

// ---------------------------------------------------------------------------
// Long-format data files

/// Header `id,x,y` for one covariate, `id,x1,..,xd,y` otherwise.
pub fn write_dataset_csv<W: Write>(data: &LongitudinalDataset, out: W) -> Result<()> {
    let d = data.dim();
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["id".to_string()];
    if d == 1 {
        header.push("x".into());
    } else {
        header.extend((1..=d).map(|k| format!("x{k}")));
    }
    header.push("y".into());
    w.write_record(&header)?;
    for ind in data.individuals() {
        for (x, y) in ind.x.iter().zip(&ind.y) {
            let mut row = vec![ind.id.clone()];
            row.extend(x.iter().map(|v| v.to_string()));
            row.push(y.to_string());
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Rows are grouped by `id` in order of first appearance.
pub fn read_dataset_csv<R: Read>(input: R) -> Result<LongitudinalDataset> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let header = rdr.headers()?.clone();
    let cols: Vec<&str> = header.iter().collect();
    if cols.len() < 3 || cols[0] != "id" || cols[cols.len() - 1] != "y" {
        return Err(SnmmError::Parse { line: 1, message: format!("expected header id,x..,y, got {cols:?}") });
    }
    let d = cols.len() - 2;
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut individuals: Vec<IndividualRecord> = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        let num = |k: usize| -> Result<f64> {
            let s = rec.get(k).unwrap_or("");
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| SnmmError::Parse { line, message: format!("column {}: not a finite number: {s:?}", cols[k]) })
        };
        let x = (1..=d).map(num).collect::<Result<Vec<f64>>>()?;
        let y = num(d + 1)?;
        let id = rec.get(0).unwrap_or("").to_string();
        let slot = *index.entry(id.clone()).or_insert_with(|| {
            individuals.push(IndividualRecord { id, x: Vec::new(), y: Vec::new() });
            individuals.len() - 1
        });
        individuals[slot].x.push(x);
        individuals[slot].y.push(y);
    }
    LongitudinalDataset::new(individuals)
}

// ---------------------------------------------------------------------------
// Single fits

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThetaSummary {
    pub beta: Vec<f64>,
    pub gamma: Vec<Vec<f64>>,
    pub sigma2: f64,
}

impl From<&ThetaEstimate> for ThetaSummary {
    fn from(t: &ThetaEstimate) -> Self {
        Self {
            beta: t.beta.iter().cloned().collect(),
            gamma: (0..t.gamma.nrows()).map(|i| t.gamma.row(i).iter().cloned().collect()).collect(),
            sigma2: t.sigma2,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub mode: EstimationMode,
    pub theta: ThetaEstimate,
    pub trace: Trace,
    /// Present for LASSO fits.
    pub ensemble: Option<FunctionEnsemble>,
    pub acceptance_rates: Vec<f64>,
}

/// Fits `data` as configured. `truth` is required for [`ShapeSource::Truth`].
pub fn fit_dataset(
    data: &LongitudinalDataset,
    cfg: &RunConfig,
    init: &ThetaEstimate,
    truth: Option<Arc<dyn Curve>>,
    seed: u64,
) -> Result<FitOutcome> {
    let model = cfg.model.build(data.n_individuals())?;
    let p = model.p();
    match cfg.shape {
        ShapeSource::Truth => {
            let f = truth.ok_or_else(|| SnmmError::Config("shape = \"truth\" needs a known shape".into()))?;
            let saem = cfg.saem.to_config(p, seed);
            let mut provider = FixedShape(f);
            let (theta, trace, chains) = match cfg.lasso.mode {
                EstimationMode::Ml => {
                    let r = run_saem_ml(data, &model, init, &mut provider, &saem)?;
                    (r.theta, r.trace, r.chains)
                }
                EstimationMode::Reml => {
                    let r = run_saem_reml(data, &model, init, &mut provider, &saem)?;
                    (r.theta, r.trace, r.chains)
                }
            };
            Ok(FitOutcome {
                mode: cfg.lasso.mode,
                theta,
                trace,
                ensemble: None,
                acceptance_rates: chains.acceptance_rates(),
            })
        }
        ShapeSource::Lasso => {
            let dict = Arc::new(build_named_dictionary(&cfg.dictionary)?);
            let mut lcfg = cfg.lasso_config(p);
            lcfg.saem.seed = seed;
            let run = run_lasso_saem(data, &model, init, dict, &lcfg)?;
            Ok(FitOutcome {
                mode: cfg.lasso.mode,
                theta: run.theta,
                trace: run.trace,
                ensemble: Some(run.ensemble),
                acceptance_rates: run.acceptance_rates,
            })
        }
    }
}

/// Writes `theta.json`, `trace.csv` and, for LASSO fits, `band.csv`,
/// `band.svg` and `atoms.csv`.
pub fn write_fit_outputs(dir: &Path, fit: &FitOutcome, truth: Option<&dyn Curve>, grid_points: usize) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_json_atomic(&dir.join("theta.json"), &ThetaSummary::from(&fit.theta))?;
    fit.trace.write_csv(create_file(&dir.join("trace.csv"))?)?;
    if let Some(ens) = &fit.ensemble {
        let grid = uniform_grid(0.0, 1.0, grid_points);
        let band = confidence_band(ens, &grid, 0.05)?;
        band.write_csv(create_file(&dir.join("band.csv"))?)?;
        let truth_vals: Option<Vec<f64>> = truth.map(|f| grid.iter().map(|t| f.eval(*t)).collect());
        band.write_svg(truth_vals.as_deref(), create_file(&dir.join("band.svg"))?)?;
        write_atom_frequencies(&ens.atom_frequencies()?, create_file(&dir.join("atoms.csv"))?)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Study replication

/// One parameter column of a summary table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterSummary {
    pub name: String,
    pub truth: f64,
    pub mean: f64,
    /// `(1/R) sum_r (theta - theta^_r)^2`
    pub mse: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
}

/// Mean, MSE and 95% normal interval for the mean over the given estimates.
pub fn summarize(name: &str, truth: f64, estimates: &[f64]) -> ParameterSummary {
    let r = estimates.len() as f64;
    let mean = estimates.iter().sum::<f64>() / r;
    let mse = estimates.iter().map(|e| (truth - e).powi(2)).sum::<f64>() / r;
    let var = if estimates.len() > 1 {
        estimates.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (r - 1.0)
    } else {
        0.0
    };
    let z = Normal::standard().inverse_cdf(0.975);
    let half = z * (var / r).sqrt();
    ParameterSummary { name: name.into(), truth, mean, mse, ci_lower: mean - half, ci_upper: mean + half }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryTable {
    pub name: String,
    pub columns: Vec<ParameterSummary>,
}

impl SummaryTable {
    /// Rows `true`, `mean`, `mse`, `ci_lower`, `ci_upper`; one column per parameter.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["row".to_string()];
        header.extend(self.columns.iter().map(|c| c.name.clone()));
        w.write_record(&header)?;
        let rows: [(&str, fn(&ParameterSummary) -> f64); 5] = [
            ("true", |c| c.truth),
            ("mean", |c| c.mean),
            ("mse", |c| c.mse),
            ("ci_lower", |c| c.ci_lower),
            ("ci_upper", |c| c.ci_upper),
        ];
        for (label, get) in rows {
            let mut rec = vec![label.to_string()];
            rec.extend(self.columns.iter().map(|c| get(c).to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn column(&self, name: &str) -> Option<&ParameterSummary> {
        self.columns.iter().find(|c| c.name == name)
    }
}

/// Outcome of one replicate: named estimates, or the failure message.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRecord {
    pub index: usize,
    pub seed: u64,
    pub values: Vec<(String, f64)>,
    pub leading_atom: Option<String>,
    pub error: Option<String>,
}

impl ReplicateRecord {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.values.iter().find(|(k, _)| k == name).map(|(_, v)| *v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionSummary {
    pub ise_zero: f64,
    pub median_ise: f64,
    pub beats_zero: usize,
    pub leading_sine: usize,
    pub mean_atoms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub study: Preset,
    pub replicates: usize,
    pub successes: usize,
    pub tables: Vec<SummaryTable>,
    pub records: Vec<ReplicateRecord>,
    pub function: Option<FunctionSummary>,
}

impl StudyReport {
    pub fn table(&self, name: &str) -> Option<&SummaryTable> {
        self.tables.iter().find(|t| t.name == name)
    }

    pub fn failures(&self) -> impl Iterator<Item = &ReplicateRecord> {
        self.records.iter().filter(|r| r.error.is_some())
    }

    /// One row per replicate; failed replicates keep their seed and error
    /// and leave the estimate cells empty.
    pub fn write_raw_csv<W: Write>(&self, out: W) -> Result<()> {
        let names: Vec<String> = self
            .records
            .iter()
            .find(|r| r.error.is_none())
            .map(|r| r.values.iter().map(|(k, _)| k.clone()).collect())
            .unwrap_or_default();
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["replicate".to_string(), "seed".into()];
        header.extend(names.iter().cloned());
        header.extend(["leading_atom".to_string(), "error".into()]);
        w.write_record(&header)?;
        for r in &self.records {
            let mut row = vec![r.index.to_string(), r.seed.to_string()];
            row.extend(names.iter().map(|n| r.get(n).map(|v| v.to_string()).unwrap_or_default()));
            row.push(r.leading_atom.clone().unwrap_or_default());
            row.push(r.error.clone().unwrap_or_default());
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Evaluation grid for `f` on `[0, 1]`.
pub const STUDY_GRID_POINTS: usize = 401;

fn study1_replicate(cfg: &RunConfig, seed: u64) -> Result<(Vec<(String, f64)>, Option<String>)> {
    let spec = cfg.scenario.spec();
    let (data, _, _) = simulate_dataset(&spec, seed)?;
    let init = cfg.init.clone().unwrap_or_else(study_init).theta()?;
    let truth: Arc<dyn Curve> = Arc::new(spec.shape);
    let mut values = Vec::new();
    for mode in [EstimationMode::Ml, EstimationMode::Reml] {
        let mut c = cfg.clone();
        c.shape = ShapeSource::Truth;
        c.lasso.mode = mode;
        let fit = fit_dataset(&data, &c, &init, Some(truth.clone()), seed)?;
        let tag = match mode {
            EstimationMode::Ml => "ml",
            EstimationMode::Reml => "reml",
        };
        push_theta(&mut values, tag, &fit.theta);
    }
    Ok((values, None))
}

fn push_theta(values: &mut Vec<(String, f64)>, tag: &str, theta: &ThetaEstimate) {
    for (k, b) in theta.beta.iter().enumerate() {
        values.push((format!("{tag}_mu{}", k + 1), *b));
    }
    for k in 0..theta.gamma.nrows() {
        values.push((format!("{tag}_gamma{}", k + 1), theta.gamma[(k, k)]));
    }
    values.push((format!("{tag}_sigma2"), theta.sigma2));
}

fn study2_replicate(cfg: &RunConfig, seed: u64) -> Result<(Vec<(String, f64)>, Option<String>)> {
    let spec = cfg.scenario.spec();
    let (data, _, _) = simulate_dataset(&spec, seed)?;
    let init = cfg.init.clone().unwrap_or_else(study_init).theta()?;
    let mut c = cfg.clone();
    c.shape = ShapeSource::Lasso;
    let fit = fit_dataset(&data, &c, &init, None, seed)?;
    let ens = fit.ensemble.as_ref().expect("lasso fit has an ensemble");
    let tag = match fit.mode {
        EstimationMode::Ml => "ml",
        EstimationMode::Reml => "reml",
    };
    let mut values = Vec::new();
    push_theta(&mut values, tag, &fit.theta);
    let grid = uniform_grid(0.0, 1.0, STUDY_GRID_POINTS);
    let f_true: Vec<f64> = grid.iter().map(|t| spec.shape.eval(*t)).collect();
    let f_hat = point_estimate(ens, &grid)?;
    values.push(("ise".into(), ise(&grid, &f_hat, &f_true)));
    let mean = ens.mean_coefficients()?;
    values.push(("atoms".into(), mean.iter().filter(|v| **v != 0.0).count() as f64));
    let leading = ens.leading_atom()?.map(|j| ens.dict().atoms()[j].descriptor.clone());
    Ok((values, leading))
}

/// Runs `replicates` seeded fits in parallel. Replicate `r` uses
/// `replicate_seed(base_seed, r)` for both data and sampler, so results do
/// not depend on the worker count. When `out_dir` is given, each replicate
/// is written atomically under `replicates/`, followed by `raw.csv`, one
/// CSV per summary table, `report.json` and `manifest.json`.
pub fn replicate_study(
    study: Preset,
    replicates: usize,
    base_seed: u64,
    out_dir: Option<&Path>,
    cfg: &RunConfig,
) -> Result<StudyReport> {
    if replicates < 2 {
        return Err(SnmmError::Config(format!("need at least 2 replicates, got {replicates}")));
    }
    cfg.validate()?;
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir.join("replicates"))?;
    }
    let records: Vec<ReplicateRecord> = (0..replicates)
        .into_par_iter()
        .map(|index| -> Result<ReplicateRecord> {
            let seed = replicate_seed(base_seed, index as u64);
            let outcome = match study {
                Preset::Study1 => study1_replicate(cfg, seed),
                Preset::Study2 => study2_replicate(cfg, seed),
            };
            let record = match outcome {
                Ok((values, leading_atom)) => ReplicateRecord { index, seed, values, leading_atom, error: None },
                Err(e) => {
                    warn!("replicate {index} (seed {seed}) failed: {e}");
                    ReplicateRecord { index, seed, values: Vec::new(), leading_atom: None, error: Some(e.to_string()) }
                }
            };
            if let Some(dir) = out_dir {
                write_json_atomic(&dir.join("replicates").join(format!("replicate_{index:04}.json")), &record)?;
            }
            Ok(record)
        })
        .collect::<Result<_>>()?;
    let report = summarize_study(study, &cfg.scenario.spec(), records);
    info!("{:?}: {}/{} replicates succeeded", study, report.successes, report.replicates);
    if let Some(dir) = out_dir {
        report.write_raw_csv(create_file(&dir.join("raw.csv"))?)?;
        for t in &report.tables {
            t.write_csv(create_file(&dir.join(format!("{}.csv", t.name)))?)?;
        }
        write_json_atomic(&dir.join("report.json"), &report)?;
        Manifest::new(
            &format!("replicate {}", preset_name(study)),
            base_seed,
            cfg,
            serde_json::json!({ "replicates": replicates }),
        )?
        .write(dir)?;
    }
    Ok(report)
}

fn preset_name(p: Preset) -> &'static str {
    match p {
        Preset::Study1 => "study1",
        Preset::Study2 => "study2",
    }
}

/// Builds the summary tables from replicate records alone.
pub fn summarize_study(study: Preset, spec: &ScenarioSpec, records: Vec<ReplicateRecord>) -> StudyReport {
    let ok: Vec<&ReplicateRecord> = records.iter().filter(|r| r.error.is_none()).collect();
    let column = |name: &str, truth: f64| -> ParameterSummary {
        let v: Vec<f64> = ok.iter().filter_map(|r| r.get(name)).collect();
        summarize(name, truth, &v)
    };
    let variances = |tag: &str| -> Vec<ParameterSummary> {
        let mut cols: Vec<ParameterSummary> =
            (0..3).map(|k| column(&format!("{tag}_gamma{}", k + 1), spec.gamma_diag[k])).collect();
        cols.push(column(&format!("{tag}_sigma2"), spec.sigma2));
        cols
    };
    let mut tables = Vec::new();
    let mut function = None;
    if !ok.is_empty() {
        match study {
            Preset::Study1 => {
                tables.push(SummaryTable {
                    name: "ml_means".into(),
                    columns: (0..3).map(|k| column(&format!("ml_mu{}", k + 1), spec.mu[k])).collect(),
                });
                tables.push(SummaryTable { name: "ml_variances".into(), columns: variances("ml") });
                tables.push(SummaryTable { name: "reml_variances".into(), columns: variances("reml") });
            }
            Preset::Study2 => {
                let tag = if ok[0].get("reml_sigma2").is_some() { "reml" } else { "ml" };
                tables.push(SummaryTable { name: format!("{tag}_variances"), columns: variances(tag) });
                let grid = uniform_grid(0.0, 1.0, STUDY_GRID_POINTS);
                let f_true: Vec<f64> = grid.iter().map(|t| spec.shape.eval(*t)).collect();
                let ise_zero = ise(&grid, &vec![0.0; grid.len()], &f_true);
                let mut ises: Vec<f64> = ok.iter().filter_map(|r| r.get("ise")).collect();
                ises.sort_by(f64::total_cmp);
                let mid = ises.len() / 2;
                let median_ise =
                    if ises.len() % 2 == 1 { ises[mid] } else { 0.5 * (ises[mid - 1] + ises[mid]) };
                function = Some(FunctionSummary {
                    ise_zero,
                    median_ise,
                    beats_zero: ises.iter().filter(|v| **v < ise_zero).count(),
                    leading_sine: ok.iter().filter(|r| r.leading_atom.as_deref() == Some("sin(2*pi*t)")).count(),
                    mean_atoms: ok.iter().filter_map(|r| r.get("atoms")).sum::<f64>() / ok.len() as f64,
                });
            }
        }
    }
    StudyReport { study, replicates: records.len(), successes: ok.len(), tables, records, function }
}

// ---------------------------------------------------------------------------
// Auction data

/// Parses a delimited bid file. Responses are `sqrt(live_bid)`, covariates
/// `bid_time / duration_days`; bids are sorted by time within an auction.
pub fn parse_auctions<R: Read>(input: R, schema: &AuctionSchema, validate_totals: bool) -> Result<LongitudinalDataset> {
    let delimiter = u8::try_from(schema.delimiter)
        .map_err(|_| SnmmError::Config(format!("delimiter {:?} is not a single byte", schema.delimiter)))?;
    let mut rdr = csv::ReaderBuilder::new().delimiter(delimiter).trim(csv::Trim::All).from_reader(input);
    let header = rdr.headers()?.clone();
    let find = |name: &str| {
        header.iter().position(|h| h == name).ok_or_else(|| SnmmError::Parse {
            line: 1,
            message: format!("missing column {name:?}; header is {:?}", header.iter().collect::<Vec<_>>()),
        })
    };
    let (ci, ct, cb) = (find(&schema.auction_id)?, find(&schema.bid_time)?, find(&schema.live_bid)?);
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut auctions: Vec<(String, Vec<(f64, f64)>)> = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        let num = |k: usize, what: &str| -> Result<f64> {
            let s = rec.get(k).unwrap_or("");
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| SnmmError::Parse { line, message: format!("{what}: not a finite number: {s:?}") })
        };
        let t = num(ct, &schema.bid_time)?;
        let bid = num(cb, &schema.live_bid)?;
        if bid <= 0.0 {
            return Err(SnmmError::Parse { line, message: format!("live bid must be positive, got {bid}") });
        }
        if !(0.0..=schema.duration_days).contains(&t) {
            return Err(SnmmError::Parse {
                line,
                message: format!("bid time {t} outside [0, {}]", schema.duration_days),
            });
        }
        let id = rec.get(ci).unwrap_or("").to_string();
        let slot = *index.entry(id.clone()).or_insert_with(|| {
            auctions.push((id, Vec::new()));
            auctions.len() - 1
        });
        auctions[slot].1.push((t, bid));
    }
    if auctions.is_empty() {
        return Err(SnmmError::Data("auction file contains no bids".into()));
    }
    let mut individuals = Vec::with_capacity(auctions.len());
    for (id, mut bids) in auctions {
        bids.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
        if let Some(w) = bids.windows(2).find(|w| w[1].1 < w[0].1) {
            let msg = format!("auction {id}: live bid drops from {} to {} at day {}", w[0].1, w[1].1, w[1].0);
            if schema.require_monotone {
                return Err(SnmmError::Integrity(msg));
            }
            warn!("{msg}");
        }
        individuals.push(IndividualRecord {
            id,
            x: bids.iter().map(|(t, _)| vec![t / schema.duration_days]).collect(),
            y: bids.iter().map(|(_, b)| b.sqrt()).collect(),
        });
    }
    let data = LongitudinalDataset::new(individuals)?;
    if validate_totals && (data.n_individuals() != EXPECTED_AUCTIONS || data.n_total() != EXPECTED_BIDS) {
        return Err(SnmmError::Integrity(format!(
            "expected {EXPECTED_AUCTIONS} auctions with {EXPECTED_BIDS} bids, found {} with {}",
            data.n_individuals(),
            data.n_total()
        )));
    }
    Ok(data)
}

pub fn ingest_auctions(path: &Path, schema: &AuctionSchema, validate_totals: bool) -> Result<LongitudinalDataset> {
    let file = fs::File::open(path)
        .map_err(|e| SnmmError::Config(format!("cannot open auction file {}: {e}", path.display())))?;
    parse_auctions(std::io::BufReader::new(file), schema, validate_totals)
}

/// Starting values from the data: `mu_1` and its variance from each
/// auction's opening response, the other coordinates at zero.
pub fn auction_init(data: &LongitudinalDataset) -> Result<ThetaEstimate> {
    let first: Vec<f64> = data.individuals().iter().map(|i| i.y[0]).collect();
    let n = first.len() as f64;
    let mean = first.iter().sum::<f64>() / n;
    let var = first.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    ThetaEstimate::from_diagonal(&[mean, 0.0, 0.0], &[var.max(1.0), 0.3, 0.1], 2.0)
}

/// Mean vector, correlations with variances on the diagonal, and `sigma2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterReport {
    pub mean: Vec<f64>,
    pub variances: Vec<f64>,
    pub correlation: Vec<Vec<f64>>,
    pub sigma2: f64,
}

impl ParameterReport {
    pub fn from_theta(theta: &ThetaEstimate) -> Self {
        let p = theta.gamma.nrows();
        let variances: Vec<f64> = (0..p).map(|k| theta.gamma[(k, k)]).collect();
        let correlation = (0..p)
            .map(|i| {
                (0..p)
                    .map(|j| {
                        let d = (variances[i] * variances[j]).sqrt();
                        if i == j {
                            1.0
                        } else if d > 0.0 {
                            theta.gamma[(i, j)] / d
                        } else {
                            0.0
                        }
                    })
                    .collect()
            })
            .collect();
        Self { mean: theta.beta.iter().cloned().collect(), variances, correlation, sigma2: theta.sigma2 }
    }

    /// Rows `mean`, `phi1..phip` (correlations, variance on the diagonal), `sigma2`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let p = self.variances.len();
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["row".to_string()];
        header.extend((1..=p).map(|k| format!("phi{k}")));
        w.write_record(&header)?;
        let mut mean = vec!["mean".to_string()];
        mean.extend(self.mean.iter().map(|v| v.to_string()));
        mean.resize(p + 1, String::new());
        w.write_record(&mean)?;
        for i in 0..p {
            let mut row = vec![format!("phi{}", i + 1)];
            row.extend((0..p).map(|j| if i == j { self.variances[i] } else { self.correlation[i][j] }.to_string()));
            w.write_record(&row)?;
        }
        let mut s = vec!["sigma2".to_string(), self.sigma2.to_string()];
        s.resize(p + 1, String::new());
        w.write_record(&s)?;
        w.flush()?;
        Ok(())
    }

    /// Plain-text rendering with `1 (variance)` on the diagonal.
    pub fn render(&self) -> String {
        let p = self.variances.len();
        let mut s = String::new();
        s.push_str(&format!("{:<12}", ""));
        for k in 1..=p {
            s.push_str(&format!("{:>16}", format!("phi{k}")));
        }
        s.push_str(&format!("\n{:<12}", "mean"));
        for v in &self.mean {
            s.push_str(&format!("{v:>16.3}"));
        }
        for i in 0..p {
            s.push_str(&format!("\n{:<12}", format!("phi{}", i + 1)));
            for j in 0..p {
                let cell = if i == j {
                    format!("1 ({:.2})", self.variances[i])
                } else {
                    format!("{:.2}", self.correlation[i][j])
                };
                s.push_str(&format!("{cell:>16}"));
            }
        }
        s.push_str(&format!("\n{:<12}{:>16.3}\n", "sigma2", self.sigma2));
        s
    }
}

#[derive(Debug, Clone)]
pub struct AuctionFit {
    pub fit: FitOutcome,
    pub report: ParameterReport,
    pub band: ConfidenceBand,
    pub atoms: Vec<AtomFrequency>,
    /// Fraction of adjacent grid pairs where `f^` does not decrease.
    pub monotone_fraction: f64,
}

/// Fraction of adjacent pairs with `v[i+1] >= v[i]`.
pub fn nondecreasing_fraction(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 1.0;
    }
    v.windows(2).filter(|w| w[1] >= w[0]).count() as f64 / (v.len() - 1) as f64
}

pub const AUCTION_GRID_POINTS: usize = 201;

pub fn fit_auction(data: &LongitudinalDataset, cfg: &RunConfig) -> Result<AuctionFit> {
    let init = match &cfg.init {
        Some(i) => i.theta()?,
        None => auction_init(data)?,
    };
    let mut c = cfg.clone();
    c.shape = ShapeSource::Lasso;
    let fit = fit_dataset(data, &c, &init, None, cfg.seed)?;
    let ens = fit.ensemble.as_ref().expect("lasso fit has an ensemble");
    let grid = uniform_grid(0.0, 1.0, AUCTION_GRID_POINTS);
    let band = confidence_band(ens, &grid, 0.05)?;
    let monotone_fraction = nondecreasing_fraction(&band.center);
    let atoms = ens.atom_frequencies()?;
    let report = ParameterReport::from_theta(&fit.theta);
    Ok(AuctionFit { fit, report, band, atoms, monotone_fraction })
}

/// Writes the parameter table (CSV and text), band, atom report, the
/// retained ensemble members on the grid, the trace and a manifest.
pub fn write_auction_outputs(dir: &Path, result: &AuctionFit, cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(dir)?;
    result.report.write_csv(create_file(&dir.join("parameters.csv"))?)?;
    write_atomic(&dir.join("parameters.txt"), result.report.render().as_bytes())?;
    result.band.write_csv(create_file(&dir.join("band.csv"))?)?;
    result.band.write_svg(None, create_file(&dir.join("band.svg"))?)?;
    write_atom_frequencies(&result.atoms, create_file(&dir.join("atoms.csv"))?)?;
    result.fit.trace.write_csv(create_file(&dir.join("trace.csv"))?)?;
    if let Some(ens) = &result.fit.ensemble {
        write_members_csv(ens, &result.band.grid, create_file(&dir.join("members.csv"))?)?;
    }
    Manifest::new(
        "auction fit",
        cfg.seed,
        cfg,
        serde_json::json!({
            "iterations": cfg.saem.iterations,
            "step_break": cfg.saem.burn_in,
            "chains": cfg.saem.chains,
            "gamma": cfg.lasso.gamma,
            "monotone_fraction": result.monotone_fraction,
        }),
    )?
    .write(dir)
}

/// Column `x`, then one column per retained member `k{iteration}_c{chain}`.
pub fn write_members_csv<W: Write>(ens: &FunctionEnsemble, grid: &[f64], out: W) -> Result<()> {
    let dict = ens.dict();
    let members: Vec<(usize, usize, Vec<f64>)> = ens
        .members()
        .map(|(k, c, coef)| {
            let f = dict.expansion(coef);
            (k, c, grid.iter().map(|t| f.eval(*t)).collect())
        })
        .collect();
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["x".to_string()];
    header.extend(members.iter().map(|(k, c, _)| format!("k{k}_c{c}")));
    w.write_record(&header)?;
    for (i, t) in grid.iter().enumerate() {
        let mut row = vec![t.to_string()];
        row.extend(members.iter().map(|(_, _, v)| v[i].to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// One synthetic bid row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuctionRow {
    pub auction_id: String,
    pub bid_time: f64,
    pub live_bid: f64,
}

/// Seven-day price paths `sqrt(price) = phi_1 + exp(phi_2) f(t - phi_3) + noise`
/// with an increasing `f`, bids clustered at both ends, and a running
/// maximum so that live bids never decrease.
pub fn synthetic_auctions(n_auctions: usize, seed: u64) -> Vec<AuctionRow> {
    let mut rng = rng::stream(seed, rng::streams::SIMULATION);
    let f = |u: f64| {
        let u = u.clamp(0.0, 1.0);
        8.0 * u.powf(0.35) + 4.0 * ((0.9 * u).exp() - 1.0) / (0.9f64.exp() - 1.0)
    };
    let mut rows = Vec::new();
    for a in 0..n_auctions {
        let z = |rng: &mut rng::StreamRng| rng.sample::<f64, _>(StandardNormal);
        let phi1 = 1.0 + 1.5 * z(&mut rng);
        let phi2 = 0.15 + 0.4 * z(&mut rng);
        let phi3 = -0.05 + 0.1 * z(&mut rng);
        let bids = rng.random_range(2..=30usize);
        let mut times: Vec<f64> = (0..bids)
            .map(|_| {
                let u: f64 = rng.random();
                match rng.random_range(0..10u8) {
                    0..=3 => u.powi(3),
                    4..=7 => 1.0 - u.powi(3),
                    _ => u,
                }
            })
            .collect();
        times.sort_by(f64::total_cmp);
        let mut running: f64 = 0.01;
        for t in times {
            let level = phi1 + phi2.exp() * f(t - phi3) + 0.8 * z(&mut rng);
            running = running.max(level.max(0.1).powi(2));
            rows.push(AuctionRow { auction_id: format!("a{:03}", a + 1), bid_time: 7.0 * t, live_bid: running });
        }
    }
    rows
}

pub fn write_auction_csv<W: Write>(rows: &[AuctionRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Oracle experiments

/// `cos(2 pi k t), sin(2 pi k t)` for `k = 1..=harmonics` (`M = 2 harmonics`)
/// on the midpoint grid `x_i = (i + 1/2) / n` with unit weights, where the
/// atoms are exactly orthogonal for `harmonics < n / 2`.
#[derive(Debug, Clone)]
pub struct TrigSetup {
    pub dict: DictionaryBasis,
    pub design: WeightedDesign,
}

pub fn trigonometric_setup(harmonics: usize, n: usize, sigma: f64) -> Result<TrigSetup> {
    let dict = build_named_dictionary(&DictionarySpec::Custom {
        domain: (0.0, 1.0),
        blocks: vec![FamilyBlock::Fourier { harmonics, half_period: false }],
        expected_total: Some(2 * harmonics),
    })?;
    let x: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect();
    let design = WeightedDesign::new(x, vec![1.0; n], vec![0.0; n], sigma)?;
    Ok(TrigSetup { dict, design })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SparseTruthSettings {
    #[serde(default = "six")]
    pub harmonics: usize,
    #[serde(default = "two_hundred")]
    pub n: usize,
    #[serde(default = "unit")]
    pub sigma: f64,
    /// Atom indices of the true support and their coefficients.
    #[serde(default = "default_support")]
    pub support: Vec<usize>,
    #[serde(default = "default_coefficients")]
    pub coefficients: Vec<f64>,
    #[serde(default = "default_c")]
    pub c: f64,
    #[serde(default = "three")]
    pub gamma: f64,
    #[serde(default = "thirty")]
    pub gamma_tilde: f64,
}

fn six() -> usize {
    6
}
fn two_hundred() -> usize {
    200
}
fn unit() -> f64 {
    1.0
}
fn default_support() -> Vec<usize> {
    vec![1, 4]
}
fn default_coefficients() -> Vec<f64> {
    vec![2.0, -1.5]
}
fn default_c() -> f64 {
    0.2
}
fn three() -> f64 {
    3.0
}
fn thirty() -> f64 {
    30.0
}

impl Default for SparseTruthSettings {
    fn default() -> Self {
        Self {
            harmonics: 6,
            n: 200,
            sigma: 1.0,
            support: default_support(),
            coefficients: default_coefficients(),
            c: default_c(),
            gamma: 3.0,
            gamma_tilde: 30.0,
        }
    }
}

impl SparseTruthSettings {
    pub fn setup(&self) -> Result<(TrigSetup, SupportScenario)> {
        let setup = trigonometric_setup(self.harmonics, self.n, self.sigma)?;
        let m = setup.dict.len();
        if self.support.len() != self.coefficients.len() || self.support.iter().any(|j| *j >= m) {
            return Err(SnmmError::Config(format!(
                "support {:?} and coefficients {:?} must match and index {m} atoms",
                self.support, self.coefficients
            )));
        }
        let mut lambda_star = DVector::zeros(m);
        for (j, v) in self.support.iter().zip(&self.coefficients) {
            lambda_star[*j] = *v;
        }
        let scenario = SupportScenario { lambda_star, c: self.c, gamma: self.gamma, gamma_tilde: self.gamma_tilde };
        Ok((setup, scenario))
    }
}

pub fn run_support_trial(s: &SparseTruthSettings, replicates: usize, seed: u64) -> Result<SupportTrial> {
    let (setup, scenario) = s.setup()?;
    support_recovery_trial(&scenario, &setup.design, &setup.dict, replicates, seed)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleTrialReport {
    pub a1: A1Check,
    pub kappa: Option<f64>,
    pub mu: Option<f64>,
    pub trial: BoundTrial,
}

/// Checks A1 for `s = |S*|` by enumeration, then runs the Monte Carlo trial.
pub fn run_oracle_bound_trial(s: &SparseTruthSettings, replicates: usize, seed: u64) -> Result<OracleTrialReport> {
    let (setup, scenario) = s.setup()?;
    let g = gram_matrix(&setup.dict, &setup.design);
    let s_star = scenario.support().len().max(1);
    let spectrum = spectrum_for_sparsity(&g, s_star)?;
    let a1 = check_a1(&spectrum, s_star)?;
    let trial = sparse_oracle_trial(&scenario, &setup.design, &setup.dict, &spectrum, replicates, seed)?;
    Ok(OracleTrialReport { a1, kappa: spectrum.kappa(s_star), mu: spectrum.mu(s_star), trial })
}

pub fn run_tail_check(harmonics: usize, n: usize, gamma: f64, replicates: usize, seed: u64) -> Result<TailReport> {
    let setup = trigonometric_setup(harmonics, n, 1.0)?;
    let pen = penalty_levels(&setup.dict, &setup.design, gamma, PenaltyVariant::Standard)?;
    Ok(tail_lemma_check(&setup.design, &setup.dict, &pen, 1.0, replicates, seed))
}

/// Restricted eigenvalues for `l <= l_max` and correlations for all pairs
/// `l + l' <= l_max`.
pub fn spectrum_of(dict: &DictionaryBasis, design: &WeightedDesign, l_max: usize) -> Result<RestrictedSpectrum> {
    let g = gram_matrix(dict, design);
    let pairs: Vec<(usize, usize)> =
        (1..=l_max).flat_map(|l| (l..=l_max).map(move |l2| (l, l2))).filter(|(l, l2)| l + l2 <= l_max).collect();
    restricted_spectrum(&g, l_max, &pairs)
}

/// Columns `quantity,l,l2,value` for `nu_min`, `nu_max`, `delta`, `kappa`, `mu`.
pub fn write_spectrum_csv<W: Write>(sp: &RestrictedSpectrum, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["quantity", "l", "l2", "value"])?;
    for (l, v) in &sp.nu_min {
        w.write_record(["nu_min", &l.to_string(), "", &v.to_string()])?;
    }
    for (l, v) in &sp.nu_max {
        w.write_record(["nu_max", &l.to_string(), "", &v.to_string()])?;
    }
    for ((l, l2), v) in &sp.delta {
        w.write_record(["delta", &l.to_string(), &l2.to_string(), &v.to_string()])?;
    }
    for s in 1..=sp.nu_min.len() {
        if let (Some(k), Some(m)) = (sp.kappa(s), sp.mu(s)) {
            w.write_record(["kappa", &s.to_string(), "", &k.to_string()])?;
            w.write_record(["mu", &s.to_string(), "", &m.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}
