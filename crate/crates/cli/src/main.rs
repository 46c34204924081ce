use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use iv_nonasym::confint::{
    ci_linear, ci_refined, ci_scalar_corrected, ci_uniform, CiLevels, DeltaHatSource, GammaSource, LambdaInput,
};
use iv_nonasym::estimator::{fit_iv, lift, FitReport};
use iv_nonasym::experiments::{run_study, ExperimentManifest, StudyKind};
use iv_nonasym::instrument::{
    read_fires, read_tracts, smoke_index, threshold_instrument, write_index_csv, InstrumentReport, SmokeIndexConfig,
    SmokeVariant,
};
use iv_nonasym::{IVDataset, IvError};
use nalgebra::{DMatrix, DVector};

#[derive(Debug, Parser)]
#[command(name = "iv-nonasym", version, about = "IV estimation with finite-sample bounds and corrected intervals")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit the IV estimator and print the fit with its sandwich covariance.
    Estimate {
        #[arg(long)]
        data: PathBuf,
        /// Treat the w columns as exogenous covariates and fit the lifted system.
        #[arg(long)]
        exog: bool,
        /// Level of the classical intervals in the report.
        #[arg(long, default_value_t = 0.05)]
        delta: f64,
    },
    /// Compute a confidence interval report.
    Ci(CiArgs),
    /// Run a Monte Carlo study and write its results.
    Simulate(SimulateArgs),
    /// Build the smoke-index instrument from fire and tract records.
    Instrument(InstrumentArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum CiMode {
    Scalar,
    Linear,
    Refined,
    Uniform,
}

#[derive(Debug, clap::Args)]
struct CiArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 0.05)]
    delta: f64,
    #[arg(long, default_value_t = 0.005)]
    delta_prime: f64,
    /// Almost-sure bound on the norm of z·ε.
    #[arg(long)]
    b: f64,
    #[arg(long, value_enum, default_value_t = CiMode::Scalar)]
    mode: CiMode,
    #[arg(long)]
    exog: bool,
    /// Direction v (linear) or unit vector u (refined, uniform); defaults to e1.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    direction: Option<Vec<f64>>,
    /// Known true parameter, used for oracle remainder terms.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    beta_true: Option<Vec<f64>>,
    /// Upper bound on the estimation error norm.
    #[arg(long)]
    delta_hat_bound: Option<f64>,
    /// Population cross moment, rows separated by ';' and entries by ','.
    #[arg(long, allow_hyphen_values = true)]
    gamma: Option<String>,
    /// Bound on the perturbation of the inverse cross moment along u.
    #[arg(long)]
    lambda: Option<f64>,
}

#[derive(Debug, clap::Args)]
struct SimulateArgs {
    #[arg(long)]
    study: String,
    /// Manifest JSON; desk-scale defaults for the study when omitted.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, env = "IV_NONASYM_SEED")]
    seed: u64,
    #[arg(long)]
    workers: Option<usize>,
    /// Override the manifest's trial count.
    #[arg(long)]
    trials: Option<usize>,
    /// Use the published trial counts.
    #[arg(long)]
    full_scale: bool,
}

#[derive(Debug, clap::Args)]
struct InstrumentArgs {
    #[arg(long)]
    fires: PathBuf,
    #[arg(long)]
    tracts: PathBuf,
    #[arg(long, value_enum, default_value_t = VariantArg::InverseSquare)]
    variant: VariantArg,
    #[arg(long, allow_hyphen_values = true)]
    threshold: Option<f64>,
    #[arg(long, default_value_t = 0.0)]
    west_weight: f64,
    #[arg(long, default_value_t = 100.0)]
    min_size_acres: f64,
    #[arg(long, default_value_t = 1.0)]
    min_distance_km: f64,
    /// Output CSV; written to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[allow(clippy::enum_variant_names)]
#[derive(Debug, Clone, Copy, ValueEnum)]
enum VariantArg {
    InverseSquare,
    InverseSquareWestWeighted,
    InverseLinear,
}

impl From<VariantArg> for SmokeVariant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::InverseSquare => SmokeVariant::InverseSquare,
            VariantArg::InverseSquareWestWeighted => SmokeVariant::InverseSquareWestWeighted,
            VariantArg::InverseLinear => SmokeVariant::InverseLinear,
        }
    }
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Core(IvError),
}

impl From<IvError> for CliError {
    fn from(e: IvError) -> Self {
        CliError::Core(e)
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        CliError::Core(IvError::Io(e))
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(IvError::Json(e))
    }
}

type CliResult<T> = Result<T, CliError>;

fn usage<T>(msg: impl Into<String>) -> CliResult<T> {
    Err(CliError::Usage(msg.into()))
}

fn open(path: &Path) -> CliResult<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| CliError::Core(IvError::Io(io::Error::new(e.kind(), format!("{}: {e}", path.display())))))
}

fn load_dataset(path: &Path, exog: bool) -> CliResult<IVDataset> {
    let data = IVDataset::read_csv(open(path)?)?;
    if exog {
        Ok(lift(&data)?.as_iv_dataset())
    } else if data.w.is_some() {
        usage("dataset has w columns; pass --exog to use them")
    } else {
        Ok(data)
    }
}

fn print_json<T: serde::Serialize>(value: &T) -> CliResult<()> {
    let mut out = io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn parse_matrix(text: &str, d: usize) -> CliResult<DMatrix<f64>> {
    let rows: Vec<Vec<f64>> = text
        .split(';')
        .map(|r| r.split(',').map(|v| v.trim().parse::<f64>()).collect())
        .collect::<Result<_, _>>()
        .map_err(|e| CliError::Usage(format!("--gamma: {e}")))?;
    if rows.len() != d || rows.iter().any(|r| r.len() != d) {
        return usage(format!("--gamma must be {d}x{d}"));
    }
    Ok(DMatrix::from_fn(d, d, |i, j| rows[i][j]))
}

fn vector_arg(values: &Option<Vec<f64>>, d: usize, name: &str) -> CliResult<Option<DVector<f64>>> {
    match values {
        None => Ok(None),
        Some(v) if v.len() == d => Ok(Some(DVector::from_column_slice(v))),
        Some(v) => usage(format!("--{name} has {} entries, expected {d}", v.len())),
    }
}

fn run_estimate(data: &Path, exog: bool, delta: f64) -> CliResult<()> {
    let data = IVDataset::read_csv(open(data)?)?;
    if data.w.is_some() && !exog {
        return usage("dataset has w columns; pass --exog to use them");
    }
    print_json(&FitReport::build(&data, exog, delta)?)
}

fn run_ci(args: &CiArgs) -> CliResult<()> {
    let data = load_dataset(&args.data, args.exog)?;
    let fit = fit_iv(&data)?;
    let d = data.d();
    let levels = CiLevels::new(args.delta, args.delta_prime, args.b);
    let direction = vector_arg(&args.direction, d, "direction")?.unwrap_or_else(|| {
        let mut e = DVector::zeros(d);
        e[0] = 1.0;
        e
    });
    let beta_true = vector_arg(&args.beta_true, d, "beta-true")?;
    let delta_hat_norm = match (&beta_true, args.delta_hat_bound) {
        (Some(beta), _) => Some((&fit.beta_hat - beta).norm()),
        (None, bound) => bound,
    };
    let report = match args.mode {
        CiMode::Scalar => ci_scalar_corrected(&fit, &data, &levels)?,
        CiMode::Linear => {
            let source = match (beta_true, args.delta_hat_bound) {
                (Some(beta), _) => DeltaHatSource::Oracle(beta),
                (None, Some(bound)) => DeltaHatSource::Bound(bound),
                (None, None) => return usage("linear mode needs --beta-true or --delta-hat-bound"),
            };
            ci_linear(&fit, &data, &direction, &levels, &source)?
        }
        CiMode::Refined => {
            let gamma = match &args.gamma {
                Some(text) => GammaSource::Oracle(parse_matrix(text, d)?),
                None => GammaSource::PlugIn,
            };
            ci_refined(&fit, &data, &direction, &gamma, &levels, beta_true.as_ref())?
        }
        CiMode::Uniform => {
            let Some(text) = &args.gamma else {
                return usage("uniform mode needs --gamma");
            };
            let Some(lambda) = args.lambda else {
                return usage("uniform mode needs --lambda");
            };
            let Some(dh) = delta_hat_norm else {
                return usage("uniform mode needs --beta-true or --delta-hat-bound");
            };
            let lambda = LambdaInput {
                value: lambda,
                source: "user-supplied".into(),
            };
            ci_uniform(&fit, &data, &direction, &parse_matrix(text, d)?, &lambda, &levels, dh)?
        }
    };
    print_json(&report)
}

fn sibling(out: &Path, suffix: &str) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    out.with_file_name(format!("{stem}.{suffix}"))
}

fn run_simulate(args: &SimulateArgs) -> CliResult<()> {
    let Some(kind) = StudyKind::parse(&args.study) else {
        let names: Vec<&str> = StudyKind::ALL.iter().map(|k| k.name()).collect();
        return usage(format!("unknown study '{}'; expected one of {}", args.study, names.join(", ")));
    };
    let mut manifest = match &args.manifest {
        Some(path) => {
            let text = io::read_to_string(open(path)?)?;
            let m = ExperimentManifest::from_json(&text)?;
            if m.kind() != kind {
                return usage(format!("manifest describes study '{}', not '{}'", m.kind().name(), kind.name()));
            }
            m
        }
        None => ExperimentManifest::desk(kind, args.seed),
    };
    manifest.seed = args.seed;
    if let Some(t) = args.trials {
        manifest.trials = t;
    }
    manifest.full_scale |= args.full_scale;
    manifest.validate()?;

    let result = match args.workers {
        Some(0) => return usage("--workers must be at least 1"),
        Some(k) => rayon::ThreadPoolBuilder::new()
            .num_threads(k)
            .build()
            .map_err(|e| CliError::Usage(format!("cannot start {k} workers: {e}")))?
            .install(|| run_study(&manifest))?,
        None => run_study(&manifest)?,
    };

    let mut csv_out = BufWriter::new(File::create(&args.out)?);
    result.write_csv(&mut csv_out)?;
    csv_out.flush()?;
    if result.as_ci().is_some() {
        let mut kde_out = BufWriter::new(File::create(sibling(&args.out, "kde.csv"))?);
        result.write_kde_csv(&mut kde_out)?;
        kde_out.flush()?;
    }
    let summary = result.summary(&manifest);
    let mut summary_out = BufWriter::new(File::create(sibling(&args.out, "summary.json"))?);
    serde_json::to_writer_pretty(&mut summary_out, &summary)?;
    writeln!(summary_out)?;
    summary_out.flush()?;
    print_json(&summary)
}

fn run_instrument(args: &InstrumentArgs) -> CliResult<()> {
    let fires = read_fires(open(&args.fires)?)?;
    let tracts = read_tracts(open(&args.tracts)?)?;
    let cfg = SmokeIndexConfig {
        variant: args.variant.into(),
        threshold: args.threshold,
        west_weight: args.west_weight,
        min_size_acres: args.min_size_acres,
        min_distance_km: args.min_distance_km,
    };
    if let Err(e) = cfg.validate() {
        return usage(e.to_string());
    }
    let zstar = smoke_index(&tracts, &fires, &cfg)?;
    let split = cfg.threshold.map(|c| threshold_instrument(&zstar, c));
    let report = InstrumentReport::new(&cfg, &fires, tracts.len(), split.as_ref());
    match &args.out {
        Some(path) => {
            let mut w = BufWriter::new(File::create(path)?);
            write_index_csv(&mut w, &tracts, &zstar, split.as_ref())?;
            w.flush()?;
            print_json(&report)
        }
        None => {
            write_index_csv(io::stdout().lock(), &tracts, &zstar, split.as_ref())?;
            eprintln!("{}", serde_json::to_string_pretty(&report)?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let outcome = match &cli.command {
        Command::Estimate { data, exog, delta } => run_estimate(data, *exog, *delta),
        Command::Ci(args) => run_ci(args),
        Command::Simulate(args) => run_simulate(args),
        Command::Instrument(args) => run_instrument(args),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Core(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 4 } else { 3 })
        }
    }
}
