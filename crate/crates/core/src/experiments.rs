//! Monte Carlo studies of the estimator, its error bounds and the corrected
//! confidence intervals.
//!
//! Every trial `t` draws its data from the stream `(seed, TRIAL_DOMAIN, t)`,
//! so the same trial index sees common random numbers across grid points and
//! results do not depend on how trials are scheduled over threads.

use std::io::Write;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bounds::{psi_functional, theorem1_terms, BSource, DrawIngredients, McEstimate, OracleSample};
use crate::confint::{ci_scalar_corrected, CiLevels, Regime};
use crate::ensembles::{
    BadkapConfig, Calibration, EndoConfig, Ensemble, EnsembleOracle, HardConfig, InstrumentLaw, WeakConfig,
};
use crate::error::{IvError, Result};
use crate::estimator::{fit_iv, sigma_hat, IVFit};
use crate::numerics::{gaussian_kde, normal_quantile, scott_bandwidth, spectral_norm, DensityEstimate, RandomStream};

/// Key domain of the per-trial data streams.
pub const TRIAL_DOMAIN: u64 = 0x7472_6961;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StudyKind {
    EndogeneitySweep,
    GrowingDims,
    HardTracewise,
    CorrectedCiSmallKappa,
    CorrectedCiLargeKappa,
}

impl StudyKind {
    pub const ALL: [StudyKind; 5] = [
        StudyKind::EndogeneitySweep,
        StudyKind::GrowingDims,
        StudyKind::HardTracewise,
        StudyKind::CorrectedCiSmallKappa,
        StudyKind::CorrectedCiLargeKappa,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StudyKind::EndogeneitySweep => "endogeneity-sweep",
            StudyKind::GrowingDims => "growing-dims",
            StudyKind::HardTracewise => "hard-tracewise",
            StudyKind::CorrectedCiSmallKappa => "corrected-ci-small-kappa",
            StudyKind::CorrectedCiLargeKappa => "corrected-ci-large-kappa",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }

    /// Trial counts for full-scale runs.
    pub fn full_scale_trials(self) -> usize {
        match self {
            StudyKind::EndogeneitySweep => 30_000,
            StudyKind::GrowingDims => 2000,
            StudyKind::HardTracewise => 2500,
            StudyKind::CorrectedCiSmallKappa | StudyKind::CorrectedCiLargeKappa => 10_000,
        }
    }

    pub fn desk_trials(self) -> usize {
        match self {
            StudyKind::EndogeneitySweep => 5000,
            StudyKind::GrowingDims => 500,
            StudyKind::HardTracewise => 2500,
            StudyKind::CorrectedCiSmallKappa | StudyKind::CorrectedCiLargeKappa => 10_000,
        }
    }
}

fn default_true() -> bool {
    true
}

/// Study-specific parameters, tagged by the study name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "study", rename_all = "kebab-case")]
pub enum StudySpec {
    EndogeneitySweep {
        n: usize,
        d: usize,
        alpha: f64,
        nu: f64,
        eta_grid: Vec<f64>,
        #[serde(default)]
        instrument_law: InstrumentLaw,
        /// Scale the noise so the asymptotic rescaled MSE equals 1.
        #[serde(default = "default_true")]
        unit_trace: bool,
    },
    GrowingDims {
        n_grid: Vec<usize>,
        /// `d = ⌈n^exponent⌉`.
        exponent: f64,
        alpha: f64,
        eta: f64,
        nu: f64,
    },
    HardTracewise {
        n: usize,
        d: usize,
        eta: f64,
        nu: f64,
        omega_grid: Vec<f64>,
    },
    CorrectedCiSmallKappa {
        n: usize,
        alpha1_grid: Vec<f64>,
    },
    CorrectedCiLargeKappa {
        n: usize,
        alpha1_grid: Vec<f64>,
        eta: f64,
        nu: f64,
    },
}

impl StudySpec {
    pub fn kind(&self) -> StudyKind {
        match self {
            StudySpec::EndogeneitySweep { .. } => StudyKind::EndogeneitySweep,
            StudySpec::GrowingDims { .. } => StudyKind::GrowingDims,
            StudySpec::HardTracewise { .. } => StudyKind::HardTracewise,
            StudySpec::CorrectedCiSmallKappa { .. } => StudyKind::CorrectedCiSmallKappa,
            StudySpec::CorrectedCiLargeKappa { .. } => StudyKind::CorrectedCiLargeKappa,
        }
    }

    pub fn default_for(kind: StudyKind) -> Self {
        match kind {
            StudyKind::EndogeneitySweep => StudySpec::EndogeneitySweep {
                n: 400,
                d: 5,
                alpha: 1.0,
                nu: 0.0,
                eta_grid: (0..=6).map(|i| 0.5 * i as f64).collect(),
                instrument_law: InstrumentLaw::Rademacher,
                unit_trace: true,
            },
            StudyKind::GrowingDims => StudySpec::GrowingDims {
                n_grid: vec![256, 1024, 4096],
                exponent: 0.3,
                alpha: 1.0,
                eta: 1.0,
                nu: 1.0,
            },
            StudyKind::HardTracewise => StudySpec::HardTracewise {
                n: 256,
                d: 10,
                eta: 1.0,
                nu: 1.0,
                omega_grid: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            },
            StudyKind::CorrectedCiSmallKappa => StudySpec::CorrectedCiSmallKappa {
                n: 256,
                alpha1_grid: vec![4.0, 6.0, 10.0],
            },
            StudyKind::CorrectedCiLargeKappa => StudySpec::CorrectedCiLargeKappa {
                n: 256,
                alpha1_grid: vec![0.25, 0.75],
                eta: 0.1,
                nu: 10.0,
            },
        }
    }
}

fn default_schema() -> u32 {
    crate::SCHEMA_VERSION
}

fn default_delta() -> f64 {
    0.05
}

fn default_delta_prime() -> f64 {
    0.005
}

fn default_calibration_draws() -> usize {
    Calibration::default().draws
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentManifest {
    #[serde(default = "default_schema")]
    pub schema_version: u32,
    #[serde(flatten)]
    pub spec: StudySpec,
    /// Monte Carlo trials per grid point.
    pub trials: usize,
    /// Replace `trials` by the published trial count.
    #[serde(default)]
    pub full_scale: bool,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default = "default_delta_prime")]
    pub delta_prime: f64,
    pub seed: u64,
    /// Draws used to calibrate `b` and `m3`.
    #[serde(default = "default_calibration_draws")]
    pub calibration_draws: usize,
    /// Known bound on `|zε|` for the interval studies; calibrated when absent.
    #[serde(default)]
    pub b: Option<f64>,
}

impl ExperimentManifest {
    /// Desk-scale defaults for `kind`.
    pub fn desk(kind: StudyKind, seed: u64) -> Self {
        Self {
            schema_version: crate::SCHEMA_VERSION,
            spec: StudySpec::default_for(kind),
            trials: kind.desk_trials(),
            full_scale: false,
            delta: default_delta(),
            delta_prime: default_delta_prime(),
            seed,
            calibration_draws: default_calibration_draws(),
            b: None,
        }
    }

    pub fn kind(&self) -> StudyKind {
        self.spec.kind()
    }

    pub fn effective_trials(&self) -> usize {
        if self.full_scale {
            self.kind().full_scale_trials()
        } else {
            self.trials
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(text)?;
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(IvError::InvalidConfig(msg));
        if self.schema_version != crate::SCHEMA_VERSION {
            return bad(format!("unsupported schema_version {}", self.schema_version));
        }
        if self.trials == 0 {
            return bad("trials must be at least 1".into());
        }
        for (name, p) in [("delta", self.delta), ("delta_prime", self.delta_prime)] {
            if !(p > 0.0 && p < 1.0) {
                return bad(format!("{name} must lie in (0, 1)"));
            }
        }
        if self.calibration_draws == 0 {
            return bad("calibration_draws must be at least 1".into());
        }
        if let Some(b) = self.b {
            if !(b.is_finite() && b > 0.0) {
                return bad("b must be positive".into());
            }
        }
        fn sorted(v: &[f64]) -> bool {
            !v.is_empty() && v.iter().all(|x| x.is_finite()) && v.windows(2).all(|w| w[0] < w[1])
        }
        let grid_ok = match &self.spec {
            StudySpec::EndogeneitySweep { eta_grid, .. } => sorted(eta_grid),
            StudySpec::GrowingDims { n_grid, exponent, .. } => {
                !n_grid.is_empty() && n_grid.windows(2).all(|w| w[0] < w[1]) && *exponent > 0.0
            }
            StudySpec::HardTracewise { omega_grid, .. } => sorted(omega_grid),
            StudySpec::CorrectedCiSmallKappa { alpha1_grid, .. }
            | StudySpec::CorrectedCiLargeKappa { alpha1_grid, .. } => sorted(alpha1_grid),
        };
        if !grid_ok {
            return bad("grids must be non-empty, finite and strictly increasing".into());
        }
        Ok(())
    }

    fn calibration(&self) -> Calibration {
        Calibration {
            draws: self.calibration_draws,
            inflation: 1.05,
            seed: self.seed,
        }
    }
}

/// `⌈n^exponent⌉`, treating values within rounding error of an integer as that integer.
pub fn growing_dimension(n: usize, exponent: f64) -> usize {
    let c = (n as f64).powf(exponent);
    let k = c.round();
    let d = if (c - k).abs() <= 1e-9 * c.max(1.0) { k } else { c.ceil() };
    (d as usize).max(1)
}

/// One grid point of a mean-squared-error study.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridRow {
    pub parameter: f64,
    pub n: usize,
    pub d: usize,
    pub trials: usize,
    pub failed_trials: usize,
    /// Rescaled MSE averaged over trials.
    pub mse_raw: f64,
    pub mse_raw_se: Option<f64>,
    /// Same quantity with the linearized error as control variate.
    pub mse_cv: f64,
    pub mse_cv_se: Option<f64>,
    pub asymptote: f64,
    /// Error bound, squared and rescaled like the MSE, averaged over trials.
    pub bound: f64,
    pub bound_se: Option<f64>,
    pub log_increase: f64,
    /// Mean squared approximate prediction, where defined.
    pub prediction: Option<f64>,
    pub log_prediction: Option<f64>,
    pub gamma_dev_mean: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GridResult {
    pub study: StudyKind,
    pub parameter_name: String,
    pub rows: Vec<GridRow>,
}

/// Per-trial outcome of a scalar interval study.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CiTrialRow {
    pub alpha1: f64,
    pub trial: u64,
    pub beta_hat: f64,
    pub abs_error: f64,
    pub kappa: f64,
    pub classical_half_width: f64,
    pub corrected_half_width: Option<f64>,
    pub regime: Regime,
    pub classical_covered: bool,
    pub corrected_covered: Option<bool>,
    pub log10_classical_ratio: f64,
    pub log10_corrected_ratio: Option<f64>,
    pub log10_classical_over_corrected: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Proportion {
    pub value: f64,
    pub std_error: f64,
    pub count: usize,
}

impl Proportion {
    fn new(count: usize, total: usize) -> Self {
        let p = if total == 0 { 0.0 } else { count as f64 / total as f64 };
        let se = if total == 0 { 0.0 } else { (p * (1.0 - p) / total as f64).sqrt() };
        Self {
            value: p,
            std_error: se,
            count,
        }
    }
}

/// Sample median with a density-based standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MedianEstimate {
    pub median: f64,
    pub std_error: Option<f64>,
    pub count: usize,
}

impl MedianEstimate {
    pub fn from_samples(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let m = v.len();
        let median = if m % 2 == 1 {
            v[m / 2]
        } else {
            0.5 * (v[m / 2 - 1] + v[m / 2])
        };
        let std_error = gaussian_kde(&v, &[median])
            .ok()
            .and_then(|k| (k.density[0] > 0.0).then(|| 1.0 / (2.0 * k.density[0] * (m as f64).sqrt())));
        Some(Self {
            median,
            std_error,
            count: m,
        })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CiGroupSummary {
    pub alpha1: f64,
    pub trials: usize,
    pub failed_trials: usize,
    pub kappa_median: Option<MedianEstimate>,
    pub classical_coverage: Proportion,
    pub regime_a: Proportion,
    pub regime_b: Proportion,
    pub inapplicable: Proportion,
    /// Coverage of the corrected interval among trials where one applies.
    pub corrected_coverage: Proportion,
    pub log10_classical_ratio: Option<MedianEstimate>,
    pub log10_corrected_ratio: Option<MedianEstimate>,
    /// Median `log₁₀(classical / corrected)` among regime-(b) trials.
    pub shrink_b: Option<MedianEstimate>,
}

#[derive(Debug, Clone, Serialize)]
pub struct KdeSeries {
    pub alpha1: f64,
    pub series: String,
    pub estimate: DensityEstimate,
}

#[derive(Debug, Clone, Serialize)]
pub struct CiStudyResult {
    pub study: StudyKind,
    pub n: usize,
    pub delta: f64,
    pub delta_prime: f64,
    pub b: f64,
    pub b_source: BSource,
    pub rows: Vec<CiTrialRow>,
    pub groups: Vec<CiGroupSummary>,
    #[serde(skip)]
    pub kde: Vec<KdeSeries>,
}

#[derive(Debug, Clone, Serialize)]
#[serde(untagged)]
pub enum StudyResult {
    Grid(GridResult),
    Ci(CiStudyResult),
}

/// Summary document written next to the main CSV output.
#[derive(Debug, Clone, Serialize)]
pub struct StudySummary<'a> {
    pub schema_version: u32,
    pub manifest: &'a ExperimentManifest,
    pub trials: usize,
    pub result: SummaryBody<'a>,
}

#[derive(Debug, Clone, Serialize)]
#[serde(untagged)]
pub enum SummaryBody<'a> {
    Grid(&'a [GridRow]),
    Ci(&'a [CiGroupSummary]),
}

impl StudyResult {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        match self {
            StudyResult::Grid(g) => {
                for row in &g.rows {
                    w.serialize(row)?;
                }
            }
            StudyResult::Ci(c) => {
                for row in &c.rows {
                    w.serialize(row)?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    /// KDE rows `alpha1,series,x,density`; empty for grid studies.
    pub fn write_kde_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["alpha1", "series", "x", "density"])?;
        if let StudyResult::Ci(c) = self {
            for s in &c.kde {
                for (x, f) in s.estimate.grid.iter().zip(&s.estimate.density) {
                    w.write_record([
                        crate::estimator::fmt_f64(s.alpha1),
                        s.series.clone(),
                        crate::estimator::fmt_f64(*x),
                        crate::estimator::fmt_f64(*f),
                    ])?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn summary<'a>(&'a self, manifest: &'a ExperimentManifest) -> StudySummary<'a> {
        StudySummary {
            schema_version: crate::SCHEMA_VERSION,
            manifest,
            trials: manifest.effective_trials(),
            result: match self {
                StudyResult::Grid(g) => SummaryBody::Grid(&g.rows),
                StudyResult::Ci(c) => SummaryBody::Ci(&c.groups),
            },
        }
    }

    pub fn as_grid(&self) -> Option<&GridResult> {
        match self {
            StudyResult::Grid(g) => Some(g),
            StudyResult::Ci(_) => None,
        }
    }

    pub fn as_ci(&self) -> Option<&CiStudyResult> {
        match self {
            StudyResult::Ci(c) => Some(c),
            StudyResult::Grid(_) => None,
        }
    }
}

/// Run the study described by `manifest` on the current rayon pool.
pub fn run_study(manifest: &ExperimentManifest) -> Result<StudyResult> {
    manifest.validate()?;
    Ok(match manifest.kind() {
        StudyKind::EndogeneitySweep => StudyResult::Grid(run_endogeneity_sweep(manifest)?),
        StudyKind::GrowingDims => StudyResult::Grid(run_growing_dims(manifest)?),
        StudyKind::HardTracewise => StudyResult::Grid(run_hard_tracewise(manifest)?),
        StudyKind::CorrectedCiSmallKappa | StudyKind::CorrectedCiLargeKappa => {
            StudyResult::Ci(run_corrected_ci_study(manifest)?)
        }
    })
}

/// Per-trial quantities of the MSE studies.
struct MseTrial {
    ingredients: DrawIngredients,
    /// Rescaled squared error and its linearization, absent if `Γ̂ₙ` was singular.
    fitted: Option<(f64, f64, f64)>,
}

/// What a grid study measures on each trial.
#[derive(Clone, Copy)]
enum Target {
    /// `(n/scale)‖β̂ − β*‖²` and the norm bound.
    Norm { scale: f64 },
    /// `n⟨e₁, β̂ − β*⟩²` and the linear-functional bound.
    FirstCoordinate,
}

fn run_mse_trials(oracle: &EnsembleOracle, trials: usize, seed: u64, target: Target) -> Result<Vec<MseTrial>> {
    let gamma = &oracle.moments.gamma;
    let gi = oracle.moments.gamma_inv();
    let n = oracle.n as f64;
    let d = gamma.nrows();
    (0..trials as u64)
        .into_par_iter()
        .map(|t| {
            let draw = oracle.draw(&mut RandomStream::with_domain(seed, TRIAL_DOMAIN, t))?;
            let g = &gi * draw.data.z.tr_mul(&draw.noise) / n.sqrt();
            let tilde = crate::bounds::tilde_sandwich(&draw.data, &draw.noise, &gi);
            let (fitted, gamma_dev) = match fit_iv(&draw.data) {
                Ok(fit) => {
                    let err = &fit.beta_hat - &draw.beta_true;
                    let dev = &fit.gamma_hat_inv * gamma - DMatrix::identity(d, d);
                    let gdev = spectral_norm(&dev)?;
                    let (raw, cv, pref) = match target {
                        Target::Norm { scale } => (n * err.norm_squared() / scale, g.norm_squared() / scale, gdev),
                        Target::FirstCoordinate => (n * err[0] * err[0], g[0] * g[0], dev.row(0).norm()),
                    };
                    (Some((raw, cv, pref)), Some(gdev))
                }
                Err(IvError::RankDeficient { .. }) => (None, None),
                Err(e) => return Err(e),
            };
            Ok(MseTrial {
                ingredients: DrawIngredients {
                    g,
                    tilde,
                    gamma_dev,
                },
                fitted,
            })
        })
        .collect()
}

/// Control-variate estimate `mean(raw − cv) + E[cv]`.
fn control_variate(raw: &[f64], cv: &[f64], cv_mean: f64) -> McEstimate {
    let diff: Vec<f64> = raw.iter().zip(cv).map(|(r, c)| r - c).collect();
    let e = McEstimate::from_samples(&diff);
    McEstimate {
        mean: e.mean + cv_mean,
        std_error: e.std_error,
    }
}

fn grid_row(
    parameter: f64,
    oracle: &EnsembleOracle,
    trials: &[MseTrial],
    target: Target,
    delta: f64,
) -> Result<GridRow> {
    let n = oracle.n;
    let d = oracle.moments.d();
    let fitted: Vec<(f64, f64, f64)> = trials.iter().filter_map(|t| t.fitted).collect();
    if fitted.is_empty() {
        return Err(IvError::DegenerateSample("every trial had a singular design".into()));
    }
    let sample = OracleSample::from_parts(trials.iter().map(|t| t.ingredients.clone()));
    let raw: Vec<f64> = fitted.iter().map(|f| f.0).collect();
    let cv: Vec<f64> = fitted.iter().map(|f| f.1).collect();
    let l = oracle.moments.l_matrix();
    let (asymptote, bound_sq, prediction): (f64, Vec<f64>, Option<Vec<f64>>) = match target {
        Target::Norm { scale } => {
            let s = theorem1_terms(&sample, oracle.moments.b, n, delta)?.sum();
            let b: Vec<f64> = fitted.iter().map(|f| ((1.0 + f.2) * s).powi(2) / scale).collect();
            (l.trace() / scale, b, None)
        }
        Target::FirstCoordinate => {
            let mut u = DMatrix::zeros(d, 1);
            u[(0, 0)] = 1.0;
            let pu = psi_functional(&u, delta, &sample, oracle.moments.b, n)?.sum();
            let pi = psi_functional(&DMatrix::identity(d, d), delta, &sample, oracle.moments.b, n)?.sum();
            let b: Vec<f64> = fitted.iter().map(|f| (pu + f.2 * pi).powi(2)).collect();
            let lead = l[(0, 0)].sqrt();
            let tr = l.trace().sqrt();
            let pred: Vec<f64> = fitted.iter().map(|f| (lead + f.2 * tr).powi(2)).collect();
            (l[(0, 0)], b, Some(pred))
        }
    };
    let raw_est = McEstimate::from_samples(&raw);
    let cv_est = control_variate(&raw, &cv, asymptote);
    let bound = McEstimate::from_samples(&bound_sq);
    let prediction = prediction.map(|p| McEstimate::from_samples(&p).mean);
    Ok(GridRow {
        parameter,
        n,
        d,
        trials: trials.len(),
        failed_trials: trials.len() - fitted.len(),
        mse_raw: raw_est.mean,
        mse_raw_se: raw_est.std_error,
        mse_cv: cv_est.mean,
        mse_cv_se: cv_est.std_error,
        asymptote,
        bound: bound.mean,
        bound_se: bound.std_error,
        log_increase: (cv_est.mean / asymptote).ln(),
        prediction,
        log_prediction: prediction.map(|p| (p / asymptote).ln()),
        gamma_dev_mean: McEstimate::from_samples(&sample.gamma_dev).mean,
    })
}

fn wrong_study(expected: StudyKind) -> IvError {
    IvError::InvalidConfig(format!("manifest is not a {} study", expected.name()))
}

pub fn run_endogeneity_sweep(manifest: &ExperimentManifest) -> Result<GridResult> {
    let StudySpec::EndogeneitySweep {
        n,
        d,
        alpha,
        nu,
        eta_grid,
        instrument_law,
        unit_trace,
    } = &manifest.spec
    else {
        return Err(wrong_study(StudyKind::EndogeneitySweep));
    };
    let trials = manifest.effective_trials();
    let rows = eta_grid
        .iter()
        .map(|&eta| {
            let mut cfg = EndoConfig::new(*d, *alpha, eta, *nu);
            cfg.instrument_law = *instrument_law;
            if *unit_trace {
                cfg = cfg.with_unit_trace();
            }
            let oracle = EnsembleOracle::new(Ensemble::Endo(cfg), *n, &manifest.calibration())?;
            let target = Target::Norm { scale: 1.0 };
            let t = run_mse_trials(&oracle, trials, manifest.seed, target)?;
            grid_row(eta, &oracle, &t, target, manifest.delta)
        })
        .collect::<Result<_>>()?;
    Ok(GridResult {
        study: StudyKind::EndogeneitySweep,
        parameter_name: "eta".into(),
        rows,
    })
}

pub fn run_growing_dims(manifest: &ExperimentManifest) -> Result<GridResult> {
    let StudySpec::GrowingDims {
        n_grid,
        exponent,
        alpha,
        eta,
        nu,
    } = &manifest.spec
    else {
        return Err(wrong_study(StudyKind::GrowingDims));
    };
    let trials = manifest.effective_trials();
    let rows = n_grid
        .iter()
        .map(|&n| {
            let d = growing_dimension(n, *exponent);
            let cfg = EndoConfig::new(d, *alpha, *eta, *nu);
            let oracle = EnsembleOracle::new(Ensemble::Endo(cfg), n, &manifest.calibration())?;
            let target = Target::Norm { scale: d as f64 };
            let t = run_mse_trials(&oracle, trials, manifest.seed, target)?;
            grid_row(n as f64, &oracle, &t, target, manifest.delta)
        })
        .collect::<Result<_>>()?;
    Ok(GridResult {
        study: StudyKind::GrowingDims,
        parameter_name: "n".into(),
        rows,
    })
}

pub fn run_hard_tracewise(manifest: &ExperimentManifest) -> Result<GridResult> {
    let StudySpec::HardTracewise {
        n,
        d,
        eta,
        nu,
        omega_grid,
    } = &manifest.spec
    else {
        return Err(wrong_study(StudyKind::HardTracewise));
    };
    let trials = manifest.effective_trials();
    let rows = omega_grid
        .iter()
        .map(|&omega| {
            let cfg = HardConfig {
                d: *d,
                omega,
                eta: *eta,
                nu: *nu,
            };
            let oracle = EnsembleOracle::new(Ensemble::Hard(cfg), *n, &manifest.calibration())?;
            let t = run_mse_trials(&oracle, trials, manifest.seed, Target::FirstCoordinate)?;
            grid_row(omega, &oracle, &t, Target::FirstCoordinate, manifest.delta)
        })
        .collect::<Result<_>>()?;
    Ok(GridResult {
        study: StudyKind::HardTracewise,
        parameter_name: "omega".into(),
        rows,
    })
}

fn ci_trial(
    ensemble: &Ensemble,
    n: usize,
    alpha1: f64,
    t: u64,
    seed: u64,
    levels: &CiLevels,
    r: f64,
) -> Result<Option<CiTrialRow>> {
    let draw = ensemble.draw(n, &mut RandomStream::with_domain(seed, TRIAL_DOMAIN, t))?;
    let fit: IVFit = match fit_iv(&draw.data) {
        Ok(f) => f,
        Err(IvError::RankDeficient { .. }) => return Ok(None),
        Err(e) => return Err(e),
    };
    let report = match ci_scalar_corrected(&fit, &draw.data, levels) {
        Ok(rep) => rep,
        Err(IvError::DegenerateInstrument(_)) => return Ok(None),
        Err(e) => return Err(e),
    };
    let cov = sigma_hat(&fit, &draw.data)?;
    let classical = r * (cov.sandwich[(0, 0)].max(0.0) / n as f64).sqrt();
    let err = (fit.beta_hat[0] - draw.beta_true[0]).abs();
    let corrected = report.interval.map(|i| i.half_width);
    Ok(Some(CiTrialRow {
        alpha1,
        trial: t,
        beta_hat: fit.beta_hat[0],
        abs_error: err,
        kappa: report.kappa.unwrap_or(f64::NAN),
        classical_half_width: classical,
        corrected_half_width: corrected,
        regime: report.regime.unwrap_or(Regime::Inapplicable),
        classical_covered: err <= classical,
        corrected_covered: corrected.map(|h| err <= h),
        log10_classical_ratio: (classical / err).log10(),
        log10_corrected_ratio: corrected.map(|h| (h / err).log10()),
        log10_classical_over_corrected: corrected.map(|h| (classical / h).log10()),
    }))
}

const KDE_POINTS: usize = 512;

fn kde_series(alpha1: f64, series: &str, values: &[f64]) -> Option<KdeSeries> {
    let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    let h = scott_bandwidth(&finite).ok()?;
    let lo = finite.iter().copied().fold(f64::INFINITY, f64::min) - 3.0 * h;
    let hi = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max) + 3.0 * h;
    let step = (hi - lo) / (KDE_POINTS - 1) as f64;
    let grid: Vec<f64> = (0..KDE_POINTS).map(|i| lo + step * i as f64).collect();
    Some(KdeSeries {
        alpha1,
        series: series.to_string(),
        estimate: gaussian_kde(&finite, &grid).ok()?,
    })
}

fn finite(values: impl Iterator<Item = f64>) -> Vec<f64> {
    values.filter(|v| v.is_finite()).collect()
}

pub fn run_corrected_ci_study(manifest: &ExperimentManifest) -> Result<CiStudyResult> {
    let (n, ensembles): (usize, Vec<(f64, Ensemble)>) = match &manifest.spec {
        StudySpec::CorrectedCiSmallKappa { n, alpha1_grid } => (
            *n,
            alpha1_grid
                .iter()
                .map(|&a| (a, Ensemble::Weak(WeakConfig { alpha1: a })))
                .collect(),
        ),
        StudySpec::CorrectedCiLargeKappa {
            n,
            alpha1_grid,
            eta,
            nu,
        } => (
            *n,
            alpha1_grid
                .iter()
                .map(|&a| {
                    let cfg = BadkapConfig {
                        alpha1: a,
                        eta: *eta,
                        nu: *nu,
                    };
                    (a, Ensemble::Badkap(cfg))
                })
                .collect(),
        ),
        _ => {
            return Err(IvError::InvalidConfig(
                "manifest is not a corrected-ci study".into(),
            ))
        }
    };
    let (b, b_source) = match manifest.b {
        Some(b) => (b, BSource::UserSupplied),
        None => {
            // |zε| = |ε| for both scalar ensembles, so one calibration serves all.
            let m = crate::ensembles::calibrate_moments(&ensembles[0].1, n, &manifest.calibration())?;
            (m.b_raw, m.b_source)
        }
    };
    let levels = CiLevels {
        delta: manifest.delta,
        delta_prime: manifest.delta_prime,
        b,
        b_source: b_source.clone(),
    };
    let r = normal_quantile(manifest.delta)?;
    let trials = manifest.effective_trials();
    let mut rows = Vec::new();
    let mut groups = Vec::new();
    let mut kde = Vec::new();
    for (alpha1, ensemble) in &ensembles {
        let outcomes: Vec<Option<CiTrialRow>> = (0..trials as u64)
            .into_par_iter()
            .map(|t| ci_trial(ensemble, n, *alpha1, t, manifest.seed, &levels, r))
            .collect::<Result<_>>()?;
        let group: Vec<CiTrialRow> = outcomes.into_iter().flatten().collect();
        let m = group.len();
        let count = |f: &dyn Fn(&CiTrialRow) -> bool| group.iter().filter(|r| f(r)).count();
        let applicable = count(&|r| r.corrected_half_width.is_some());
        let classical_ratio = finite(group.iter().map(|r| r.log10_classical_ratio));
        let corrected_ratio = finite(group.iter().filter_map(|r| r.log10_corrected_ratio));
        let shrink = finite(
            group
                .iter()
                .filter(|r| r.regime == Regime::ShrunkB)
                .filter_map(|r| r.log10_classical_over_corrected),
        );
        groups.push(CiGroupSummary {
            alpha1: *alpha1,
            trials: m,
            failed_trials: trials - m,
            kappa_median: MedianEstimate::from_samples(&finite(group.iter().map(|r| r.kappa))),
            classical_coverage: Proportion::new(count(&|r| r.classical_covered), m),
            regime_a: Proportion::new(count(&|r| r.regime == Regime::ClassicalCorrectedA), m),
            regime_b: Proportion::new(count(&|r| r.regime == Regime::ShrunkB), m),
            inapplicable: Proportion::new(count(&|r| r.regime == Regime::Inapplicable), m),
            corrected_coverage: Proportion::new(count(&|r| r.corrected_covered == Some(true)), applicable),
            log10_classical_ratio: MedianEstimate::from_samples(&classical_ratio),
            log10_corrected_ratio: MedianEstimate::from_samples(&corrected_ratio),
            shrink_b: MedianEstimate::from_samples(&shrink),
        });
        kde.extend(kde_series(*alpha1, "classical", &classical_ratio));
        kde.extend(kde_series(*alpha1, "corrected", &corrected_ratio));
        rows.extend(group);
    }
    Ok(CiStudyResult {
        study: manifest.kind(),
        n,
        delta: manifest.delta,
        delta_prime: manifest.delta_prime,
        b,
        b_source,
        rows,
        groups,
        kde,
    })
}
