//! Non-asymptotic error bounds for the IV estimator: the deviation `γₙ(Γ)`,
//! the vector `Gₙ`, the three-term bound on `‖β̂ − β*‖₂`, and the `Ψₙ`
//! functional controlling linear functionals `Uᵀ(θ̂ − θ*)`.
//!
//! Expectations over the data distribution have no closed form and are
//! estimated from an [`OracleSample`] of independent ensemble draws; every
//! estimated term carries a Monte Carlo standard error.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ensembles::EnsembleOracle;
use crate::error::{IvError, Result};
use crate::estimator::{fit_iv, IVDataset, IVFit};
use crate::numerics::{inverse_checked, spectral_norm, symmetrize, RandomStream};

/// Key domain for the independent draws behind [`OracleSample`].
pub const ORACLE_DOMAIN: u64 = 0x6f72_6163;

/// How the constant `b` was obtained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BSource {
    Analytic,
    /// Empirical maximum over `draws` oracle draws inflated by `inflation`.
    EmpiricalMax { draws: usize, inflation: f64 },
    UserSupplied,
}

/// Population quantities of a data-generating law.
#[derive(Debug, Clone, Serialize)]
pub struct PopulationMoments {
    /// `Γ = E[zxᵀ]` (or `Γₙ` when the law depends on `n`).
    pub gamma: DMatrix<f64>,
    /// `Σ = E[ε² zzᵀ]`.
    pub sigma: DMatrix<f64>,
    /// Almost-sure bound on `‖Γ⁻¹ z ε‖₂`, used by the error bounds.
    pub b: f64,
    /// Almost-sure bound on `‖z ε‖₂`, used by the confidence intervals.
    pub b_raw: f64,
    /// Third-moment bound `E‖Σ^{-1/2} z ε‖₂³`.
    pub m3: f64,
    pub b_source: BSource,
}

impl PopulationMoments {
    pub fn new(
        gamma: DMatrix<f64>,
        sigma: DMatrix<f64>,
        b: f64,
        b_raw: f64,
        m3: f64,
        b_source: BSource,
    ) -> Result<Self> {
        let d = gamma.nrows();
        if gamma.ncols() != d || sigma.shape() != (d, d) {
            return Err(IvError::Shape("gamma and sigma must be square of equal size".into()));
        }
        inverse_checked(&gamma)?;
        if (&sigma - sigma.transpose()).amax() > 1e-10 * sigma.amax().max(1.0) {
            return Err(IvError::Domain("sigma is not symmetric".into()));
        }
        let min_eig = symmetrize(&sigma).symmetric_eigenvalues().min();
        if min_eig < -1e-10 * sigma.amax().max(1.0) {
            return Err(IvError::Domain("sigma is not positive semidefinite".into()));
        }
        for (name, v) in [("b", b), ("b_raw", b_raw), ("m3", m3)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(IvError::Domain(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(Self {
            gamma,
            sigma,
            b,
            b_raw,
            m3,
            b_source,
        })
    }

    pub fn d(&self) -> usize {
        self.gamma.nrows()
    }

    pub fn gamma_inv(&self) -> DMatrix<f64> {
        inverse_checked(&self.gamma).expect("validated at construction").0
    }

    /// `Lₙ = Γ⁻¹ Σ Γ⁻ᵀ`, the asymptotic covariance of `√n (β̂ − β*)`.
    pub fn l_matrix(&self) -> DMatrix<f64> {
        let gi = self.gamma_inv();
        symmetrize(&(&gi * &self.sigma * gi.transpose()))
    }

    /// Asymptotic rescaled MSE `trace(Lₙ)`.
    pub fn asymptotic_mse(&self) -> f64 {
        self.l_matrix().trace()
    }
}

/// `γₙ(Γ) = ‖Γ̂ₙ⁻¹Γ − I‖₂`.
pub fn gamma_deviation(fit: &IVFit, gamma: &DMatrix<f64>) -> Result<f64> {
    if gamma.shape() != fit.gamma_hat.shape() {
        return Err(IvError::Shape("population gamma does not match the fit".into()));
    }
    let dev = &fit.gamma_hat_inv * gamma - DMatrix::identity(fit.d(), fit.d());
    spectral_norm(&dev)
}

/// `Gₙ = (1/√n) Σ Γₙ⁻¹ zᵢ εᵢ` with `εᵢ` taken from `beta_true`.
pub fn g_vector(data: &IVDataset, beta_true: &DVector<f64>, gamma_n: &DMatrix<f64>) -> Result<DVector<f64>> {
    if gamma_n.shape() != (data.d(), data.d()) {
        return Err(IvError::Shape("gamma_n must be d×d".into()));
    }
    let (gi, _) = inverse_checked(gamma_n)?;
    let eps = data.noise(beta_true)?;
    Ok(gi * data.z.tr_mul(&eps) / (data.n() as f64).sqrt())
}

/// `Γ⁻¹ Σ̃ₙ Γ⁻ᵀ` for a dataset with known noise.
pub fn tilde_sandwich(data: &IVDataset, noise: &DVector<f64>, gamma_inv: &DMatrix<f64>) -> DMatrix<f64> {
    let mut scaled = data.z.clone();
    for (i, mut row) in scaled.row_iter_mut().enumerate() {
        row *= noise[i] * noise[i];
    }
    let st = data.z.tr_mul(&scaled) / data.n() as f64;
    symmetrize(&(gamma_inv * st * gamma_inv.transpose()))
}

/// Mean of a Monte Carlo sample with its standard error (absent for a single
/// draw).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct McEstimate {
    pub mean: f64,
    pub std_error: Option<f64>,
}

impl McEstimate {
    pub fn from_samples(values: &[f64]) -> Self {
        let m = values.len();
        assert!(m > 0, "empty Monte Carlo sample");
        let mean = values.iter().sum::<f64>() / m as f64;
        let std_error = (m > 1).then(|| {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1) as f64;
            (var / m as f64).sqrt()
        });
        Self { mean, std_error }
    }
}

/// Per-draw ingredients of the bound expectations.
#[derive(Debug, Clone, Default)]
pub struct OracleSample {
    /// `Gₙ` for each draw.
    pub g: Vec<DVector<f64>>,
    /// `Γ⁻¹ Σ̃ₙ Γ⁻ᵀ` for each draw.
    pub tilde: Vec<DMatrix<f64>>,
    /// `γₙ(Γ)` for each draw whose `Γ̂ₙ` was invertible.
    pub gamma_dev: Vec<f64>,
}

/// Ingredients from a single draw.
#[derive(Debug, Clone)]
pub struct DrawIngredients {
    pub g: DVector<f64>,
    pub tilde: DMatrix<f64>,
    pub gamma_dev: Option<f64>,
}

impl DrawIngredients {
    pub fn compute(
        data: &IVDataset,
        noise: &DVector<f64>,
        gamma: &DMatrix<f64>,
        gamma_inv: &DMatrix<f64>,
    ) -> Result<Self> {
        let n = data.n() as f64;
        let g = gamma_inv * data.z.tr_mul(noise) / n.sqrt();
        let tilde = tilde_sandwich(data, noise, gamma_inv);
        let gamma_dev = match fit_iv(data) {
            Ok(fit) => Some(gamma_deviation(&fit, gamma)?),
            Err(IvError::RankDeficient { .. }) => None,
            Err(e) => return Err(e),
        };
        Ok(Self { g, tilde, gamma_dev })
    }
}

impl OracleSample {
    /// Draw `mc_reps` independent datasets from `oracle`.
    pub fn draw(oracle: &EnsembleOracle, mc_reps: usize, seed: u64) -> Result<Self> {
        if mc_reps == 0 {
            return Err(IvError::InvalidConfig("mc_reps must be at least 1".into()));
        }
        let gamma = &oracle.moments.gamma;
        let gi = oracle.moments.gamma_inv();
        let parts: Vec<DrawIngredients> = (0..mc_reps as u64)
            .into_par_iter()
            .map(|t| {
                let mut stream = RandomStream::with_domain(seed, ORACLE_DOMAIN, t);
                let draw = oracle.draw(&mut stream)?;
                DrawIngredients::compute(&draw.data, &draw.noise, gamma, &gi)
            })
            .collect::<Result<_>>()?;
        Ok(Self::from_parts(parts))
    }

    pub fn from_parts(parts: impl IntoIterator<Item = DrawIngredients>) -> Self {
        let mut s = Self::default();
        for p in parts {
            s.g.push(p.g);
            s.tilde.push(p.tilde);
            s.gamma_dev.extend(p.gamma_dev);
        }
        s
    }

    pub fn len(&self) -> usize {
        self.g.len()
    }

    pub fn is_empty(&self) -> bool {
        self.g.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.g.first().map_or(0, |g| g.len())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum PrefactorMode {
    /// Deviation of the realized dataset's `Γ̂ₙ`.
    #[default]
    Realized,
    /// Average deviation over the oracle sample.
    PopulationAverage,
}

/// The three additive terms of a bound, before the prefactor and `1/√n`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundTerms {
    pub leading: f64,
    pub leading_se: Option<f64>,
    pub deviation: f64,
    pub deviation_se: Option<f64>,
    pub bernstein: f64,
}

impl BoundTerms {
    pub fn sum(&self) -> f64 {
        self.leading + self.deviation + self.bernstein
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BoundReport {
    pub schema_version: u32,
    /// `"norm"` for the bound on `‖β̂ − β*‖₂`, `"linear-functional"` for `Uᵀ(θ̂ − θ*)`.
    pub kind: String,
    pub n: usize,
    pub delta: f64,
    pub mc_reps: usize,
    pub b: f64,
    pub b_source: BSource,
    pub prefactor_mode: PrefactorMode,
    /// `1 + γₙ(Γ)` for the norm bound; `‖Uᵀ(Γ̂ₙ⁻¹Γ − I)‖₂` for the functional bound.
    pub prefactor: f64,
    #[serde(flatten)]
    pub terms: BoundTerms,
    /// `Ψₙ(I; δ)` terms, multiplied by `prefactor` in the functional bound.
    pub identity_terms: Option<BoundTerms>,
    pub total: f64,
}

fn check_delta(delta: f64) -> Result<()> {
    if delta > 0.0 && delta < 1.0 {
        Ok(())
    } else {
        Err(IvError::Domain(format!("delta must lie in (0, 1), got {delta}")))
    }
}

/// `E‖AᵀGₙ‖₂`, `sqrt(2 L · E‖AᵀΓ⁻¹Σ̃ₙΓ⁻ᵀA‖₂)` and `3 b L / √n` with `L = log_term`.
fn assemble_terms(a: &DMatrix<f64>, sample: &OracleSample, b: f64, n: usize, log_term: f64) -> Result<BoundTerms> {
    if sample.is_empty() {
        return Err(IvError::InvalidConfig("oracle sample is empty".into()));
    }
    if a.nrows() != sample.dim() {
        return Err(IvError::Shape(format!(
            "A has {} rows, expected {}",
            a.nrows(),
            sample.dim()
        )));
    }
    let norms: Vec<f64> = sample.g.iter().map(|g| (a.tr_mul(g)).norm()).collect();
    let spreads: Vec<f64> = sample
        .tilde
        .iter()
        .map(|t| spectral_norm(&(a.transpose() * t * a)))
        .collect::<Result<_>>()?;
    let lead = McEstimate::from_samples(&norms);
    let spread = McEstimate::from_samples(&spreads);
    let deviation = (2.0 * log_term * spread.mean).sqrt();
    let deviation_se = spread.std_error.map(|se| {
        if spread.mean > 0.0 {
            (2.0 * log_term).sqrt() * se / (2.0 * spread.mean.sqrt())
        } else {
            0.0
        }
    });
    Ok(BoundTerms {
        leading: lead.mean,
        leading_se: lead.std_error,
        deviation,
        deviation_se,
        bernstein: 3.0 * b * log_term / (n as f64).sqrt(),
    })
}

fn prefactor_deviation(
    realized: &IVFit,
    oracle: &EnsembleOracle,
    sample: &OracleSample,
    mode: PrefactorMode,
) -> Result<f64> {
    match mode {
        PrefactorMode::Realized => gamma_deviation(realized, &oracle.moments.gamma),
        PrefactorMode::PopulationAverage => {
            if sample.gamma_dev.is_empty() {
                return Err(IvError::DegenerateSample(
                    "no invertible draws for the population-average prefactor".into(),
                ));
            }
            Ok(McEstimate::from_samples(&sample.gamma_dev).mean)
        }
    }
}

/// `E‖Gₙ‖₂`, `sqrt(2 log(1/δ) E‖Γ⁻¹Σ̃ₙΓ⁻ᵀ‖₂)` and `3b log(1/δ)/√n`.
pub fn theorem1_terms(sample: &OracleSample, b: f64, n: usize, delta: f64) -> Result<BoundTerms> {
    check_delta(delta)?;
    let d = sample.dim();
    assemble_terms(&DMatrix::identity(d, d), sample, b, n, (1.0 / delta).ln())
}

/// Three-term bound on `‖β̂ − β*‖₂` holding with probability `1 − δ`.
pub fn theorem1_bound(
    oracle: &EnsembleOracle,
    realized: &IVFit,
    delta: f64,
    sample: &OracleSample,
    mode: PrefactorMode,
) -> Result<BoundReport> {
    check_delta(delta)?;
    let n = oracle.n;
    let terms = theorem1_terms(sample, oracle.moments.b, n, delta)?;
    let prefactor = 1.0 + prefactor_deviation(realized, oracle, sample, mode)?;
    Ok(BoundReport {
        schema_version: crate::SCHEMA_VERSION,
        kind: "norm".into(),
        n,
        delta,
        mc_reps: sample.len(),
        b: oracle.moments.b,
        b_source: oracle.moments.b_source.clone(),
        prefactor_mode: mode,
        prefactor,
        terms,
        identity_terms: None,
        total: prefactor * terms.sum() / (n as f64).sqrt(),
    })
}

/// `Ψₙ(A; δ) = E‖AᵀGₙ‖₂ + sqrt(2 log(2/δ) E‖AᵀΓ⁻¹Σ̃ₙΓ⁻ᵀA‖₂) + 3b log(2/δ)/√n`.
pub fn psi_functional(a: &DMatrix<f64>, delta: f64, sample: &OracleSample, b: f64, n: usize) -> Result<BoundTerms> {
    check_delta(delta)?;
    assemble_terms(a, sample, b, n, (2.0 / delta).ln())
}

/// Bound on `‖Uᵀ(θ̂ − θ*)‖₂`:
/// `Ψₙ(U)/√n + ‖Uᵀ(Γ̂ₙ⁻¹Γ − I)‖₂ · Ψₙ(I)/√n`.
pub fn theorem2_bound(
    oracle: &EnsembleOracle,
    u: &DMatrix<f64>,
    realized: &IVFit,
    delta: f64,
    sample: &OracleSample,
) -> Result<BoundReport> {
    let n = oracle.n;
    let dim = oracle.moments.d();
    if u.nrows() != dim {
        return Err(IvError::Shape(format!("U has {} rows, expected {dim}", u.nrows())));
    }
    let b = oracle.moments.b;
    let terms = psi_functional(u, delta, sample, b, n)?;
    let identity = psi_functional(&DMatrix::identity(dim, dim), delta, sample, b, n)?;
    let dev = &realized.gamma_hat_inv * &oracle.moments.gamma - DMatrix::identity(dim, dim);
    let prefactor = spectral_norm(&u.tr_mul(&dev))?;
    let total = (terms.sum() + prefactor * identity.sum()) / (n as f64).sqrt();
    Ok(BoundReport {
        schema_version: crate::SCHEMA_VERSION,
        kind: "linear-functional".into(),
        n,
        delta,
        mc_reps: sample.len(),
        b,
        b_source: oracle.moments.b_source.clone(),
        prefactor_mode: PrefactorMode::Realized,
        prefactor,
        terms,
        identity_terms: Some(identity),
        total,
    })
}
