use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use snmm::dictionary::{build_named_dictionary, DictionarySpec, WeightedDesign};
use snmm::harness::{
    self, fit_auction, fit_dataset, ingest_auctions, read_dataset_csv, replicate_study, run_oracle_bound_trial,
    run_support_trial, run_tail_check, spectrum_of, study_init, write_auction_outputs, write_dataset_csv,
    write_fit_outputs, write_json_atomic, write_spectrum_csv, Manifest, Preset, RunConfig, SparseTruthSettings,
    ThetaSummary,
};
use snmm::model::{simulate_dataset, Curve};
use snmm::{Result, SnmmError};

#[derive(Parser)]
#[command(name = "snmm", version, about = "Semiparametric nonlinear mixed-effects estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a dataset from the configured scenario.
    Simulate(RunArgs),
    /// Fit the configured model to a data file or a simulated dataset.
    Fit(RunArgs),
    /// Seeded replication of a simulation study.
    Replicate {
        #[arg(value_enum)]
        study: StudyArg,
        #[arg(long, default_value_t = 100)]
        replicates: usize,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Auction price-path analysis.
    Auction {
        #[command(subcommand)]
        command: AuctionCommand,
    },
    /// Restricted-eigenvalue and Monte Carlo checks of the LASSO guarantees.
    Oracle {
        #[command(subcommand)]
        command: OracleCommand,
    },
    /// Dictionary tools.
    Dict {
        #[command(subcommand)]
        command: DictCommand,
    },
}

#[derive(Args, Clone)]
struct RunArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides the config).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run seed (overrides the config); base seed for `replicate`.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum StudyArg {
    Study1,
    Study2,
}

#[derive(Subcommand)]
enum AuctionCommand {
    /// REML LASSO-SAEM fit of a bid file.
    Fit {
        /// Delimited bid file.
        #[arg(long)]
        data: PathBuf,
        /// Skip the expected auction and bid counts.
        #[arg(long)]
        no_validate_totals: bool,
        #[command(flatten)]
        run: RunArgs,
    },
}

#[derive(Args, Clone)]
struct SparseArgs {
    /// TOML file with sparse-truth settings.
    #[arg(long)]
    settings: Option<PathBuf>,
    #[arg(long, default_value_t = 500)]
    replicates: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum OracleCommand {
    /// Restricted eigenvalues and correlations of a dictionary Gram matrix.
    Spectrum {
        /// Named dictionary or a TOML dictionary description.
        #[arg(long, default_value = "trig12")]
        dictionary: String,
        /// Design size; points are cell midpoints of [0, 1].
        #[arg(long, default_value_t = 200)]
        n: usize,
        #[arg(long, default_value_t = 4)]
        l_max: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Frequency with which the sparse oracle bound holds.
    Bounds(SparseArgs),
    /// Frequency of support recovery with inflated penalties.
    Support(SparseArgs),
    /// Gaussian tail frequencies of the noise correlations.
    Tail {
        #[arg(long, default_value_t = 5)]
        harmonics: usize,
        #[arg(long, default_value_t = 200)]
        n: usize,
        #[arg(long, default_value_t = 4.0)]
        gamma: f64,
        #[arg(long, default_value_t = 100_000)]
        replicates: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum DictCommand {
    /// List the atoms of a dictionary.
    Describe {
        /// `study2_fourier_haar`, `auction_mixed`, or a TOML dictionary file.
        #[arg(default_value = "study2_fourier_haar")]
        dictionary: String,
    },
}

fn load_config(args: &RunArgs, base: RunConfig) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => base,
    };
    if let Some(out) = &args.out {
        cfg.output_dir = out.clone();
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn dictionary_spec(name: &str) -> Result<DictionarySpec> {
    match name {
        "study2_fourier_haar" => Ok(DictionarySpec::study2()),
        "auction_mixed" => Ok(DictionarySpec::auction()),
        path => {
            let text = fs::read_to_string(path)
                .map_err(|e| SnmmError::Config(format!("unknown dictionary {path:?}: {e}")))?;
            toml::from_str(&text).map_err(|e| SnmmError::Config(format!("{path}: {e}")))
        }
    }
}

fn out_dir(dir: Option<&PathBuf>, fallback: &str) -> Result<PathBuf> {
    let dir = dir.cloned().unwrap_or_else(|| PathBuf::from(fallback));
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn write_report<T: serde::Serialize>(dir: &Path, name: &str, value: &T) -> Result<()> {
    write_json_atomic(&dir.join(name), value)?;
    println!("{}", serde_json::to_string_pretty(value).map_err(|e| SnmmError::Config(e.to_string()))?);
    Ok(())
}

fn simulate(args: &RunArgs) -> Result<()> {
    let cfg = load_config(args, RunConfig::default())?;
    let spec = cfg.scenario.spec();
    let (data, phi, theta) = simulate_dataset(&spec, cfg.seed)?;
    fs::create_dir_all(&cfg.output_dir)?;
    write_dataset_csv(&data, fs::File::create(cfg.output_dir.join("data.csv"))?)?;
    let truth = serde_json::json!({
        "theta": ThetaSummary::from(&theta),
        "phi": phi.phi.iter().map(|v| v.iter().cloned().collect::<Vec<f64>>()).collect::<Vec<_>>(),
    });
    write_json_atomic(&cfg.output_dir.join("truth.json"), &truth)?;
    Manifest::new("simulate", cfg.seed, &cfg, serde_json::Value::Null)?.write(&cfg.output_dir)?;
    info!("wrote {} observations to {}", data.n_total(), cfg.output_dir.display());
    Ok(())
}

fn fit(args: &RunArgs) -> Result<()> {
    let cfg = load_config(args, RunConfig::default())?;
    let spec = cfg.scenario.spec();
    let data = match &cfg.data {
        Some(path) => read_dataset_csv(fs::File::open(path)?)?,
        None => simulate_dataset(&spec, cfg.seed)?.0,
    };
    let init = cfg.init.clone().unwrap_or_else(study_init).theta()?;
    let truth: Arc<dyn Curve> = Arc::new(spec.shape);
    let known = cfg.data.is_none().then(|| truth.clone());
    let outcome = fit_dataset(&data, &cfg, &init, Some(truth), cfg.seed)?;
    write_fit_outputs(&cfg.output_dir, &outcome, known.as_deref(), 201)?;
    Manifest::new("fit", cfg.seed, &cfg, serde_json::json!({ "acceptance": outcome.acceptance_rates }))?
        .write(&cfg.output_dir)?;
    println!(
        "{}",
        serde_json::to_string_pretty(&ThetaSummary::from(&outcome.theta)).map_err(|e| SnmmError::Config(e.to_string()))?
    );
    Ok(())
}

fn replicate(study: StudyArg, replicates: usize, args: &RunArgs) -> Result<()> {
    let preset = match study {
        StudyArg::Study1 => Preset::Study1,
        StudyArg::Study2 => Preset::Study2,
    };
    let cfg = load_config(args, RunConfig::for_study(preset))?;
    let report = replicate_study(preset, replicates, cfg.seed, Some(&cfg.output_dir), &cfg)?;
    let mut out = std::io::stdout().lock();
    writeln!(out, "{}/{} replicates succeeded", report.successes, report.replicates)?;
    for t in &report.tables {
        writeln!(out, "\n{}", t.name)?;
        t.write_csv(&mut out)?;
    }
    if let Some(f) = &report.function {
        writeln!(
            out,
            "\nmedian ISE {:.4} (f = 0: {:.4}); below f = 0 in {}; sin(2*pi*t) leading in {}; mean atoms {:.1}",
            f.median_ise, f.ise_zero, f.beats_zero, f.leading_sine, f.mean_atoms
        )?;
    }
    Ok(())
}

fn auction(data_path: &Path, no_validate: bool, args: &RunArgs) -> Result<()> {
    let mut cfg = load_config(args, RunConfig::for_auction())?;
    if no_validate {
        cfg.auction.validate_totals = false;
    }
    let data = ingest_auctions(data_path, &cfg.auction.schema, cfg.auction.validate_totals)?;
    info!("{} auctions, {} bids", data.n_individuals(), data.n_total());
    let result = fit_auction(&data, &cfg)?;
    write_auction_outputs(&cfg.output_dir, &result, &cfg)?;
    print!("{}", result.report.render());
    println!("f nondecreasing on {:.1}% of grid steps", 100.0 * result.monotone_fraction);
    Ok(())
}

fn sparse_settings(path: Option<&PathBuf>) -> Result<SparseTruthSettings> {
    match path {
        None => Ok(SparseTruthSettings::default()),
        Some(p) => {
            let text = fs::read_to_string(p)?;
            toml::from_str(&text).map_err(|e| SnmmError::Config(format!("{}: {e}", p.display())))
        }
    }
}

fn oracle(cmd: &OracleCommand) -> Result<()> {
    match cmd {
        OracleCommand::Spectrum { dictionary, n, l_max, out } => {
            let dict = match dictionary.as_str() {
                "trig12" => harness::trigonometric_setup(6, *n, 1.0)?.dict,
                "trig10" => harness::trigonometric_setup(5, *n, 1.0)?.dict,
                other => build_named_dictionary(&dictionary_spec(other)?)?,
            };
            let x: Vec<f64> = (0..*n).map(|i| (i as f64 + 0.5) / *n as f64).collect();
            let design = WeightedDesign::new(x, vec![1.0; *n], vec![0.0; *n], 1.0)?;
            let sp = spectrum_of(&dict, &design, *l_max)?;
            let dir = out_dir(out.as_ref(), "snmm-oracle")?;
            write_spectrum_csv(&sp, fs::File::create(dir.join("spectrum.csv"))?)?;
            write_spectrum_csv(&sp, std::io::stdout().lock())?;
        }
        OracleCommand::Bounds(a) => {
            let s = sparse_settings(a.settings.as_ref())?;
            let rep = run_oracle_bound_trial(&s, a.replicates, a.seed)?;
            let dir = out_dir(a.out.as_ref(), "snmm-oracle")?;
            write_report(&dir, "bounds.json", &rep)?;
        }
        OracleCommand::Support(a) => {
            let s = sparse_settings(a.settings.as_ref())?;
            let rep = run_support_trial(&s, a.replicates, a.seed)?;
            let dir = out_dir(a.out.as_ref(), "snmm-oracle")?;
            write_report(&dir, "support.json", &rep)?;
        }
        OracleCommand::Tail { harmonics, n, gamma, replicates, seed, out } => {
            let rep = run_tail_check(*harmonics, *n, *gamma, *replicates, *seed)?;
            let dir = out_dir(out.as_ref(), "snmm-oracle")?;
            write_report(&dir, "tail.json", &rep)?;
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate(a) => simulate(&a),
        Command::Fit(a) => fit(&a),
        Command::Replicate { study, replicates, run } => replicate(study, replicates, &run),
        Command::Auction { command: AuctionCommand::Fit { data, no_validate_totals, run } } => {
            auction(&data, no_validate_totals, &run)
        }
        Command::Oracle { command } => oracle(&command),
        Command::Dict { command: DictCommand::Describe { dictionary } } => {
            let dict = build_named_dictionary(&dictionary_spec(&dictionary)?)?;
            print!("{}", dict.describe());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.category().exit_code() as u8)
        }
    }
}
