//! Synthetic IV ensembles with known population moments.
//!
//! All generators follow `x = αz + ηε·1 + νw`, differing in the laws of the
//! instrument `z`, the structural noise `ε` and the extra noise `w`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bounds::{BSource, PopulationMoments};
use crate::error::{IvError, Result};
use crate::estimator::IVDataset;
use crate::numerics::{symmetrize, RandomStream};

/// Key domain for the draws used to calibrate `b` and `m3`.
pub const CALIBRATION_DOMAIN: u64 = 0x6361_6c69;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum InstrumentLaw {
    #[default]
    Rademacher,
    Gaussian,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EndoConfig {
    pub d: usize,
    pub alpha: f64,
    pub eta: f64,
    pub nu: f64,
    #[serde(default)]
    pub instrument_law: InstrumentLaw,
    /// Standard deviation of `ε`.
    #[serde(default = "one")]
    pub noise_scale: f64,
    /// Coefficient vector; `1_d` when absent.
    #[serde(default)]
    pub beta_true: Option<Vec<f64>>,
}

impl EndoConfig {
    pub fn new(d: usize, alpha: f64, eta: f64, nu: f64) -> Self {
        Self {
            d,
            alpha,
            eta,
            nu,
            instrument_law: InstrumentLaw::Rademacher,
            noise_scale: 1.0,
            beta_true: None,
        }
    }

    /// Noise scale `α/√d` making `trace(Γ⁻¹ΣΓ⁻ᵀ) = dσ²/α² = 1`.
    pub fn unit_trace_noise_scale(d: usize, alpha: f64) -> f64 {
        alpha.abs() / (d as f64).sqrt()
    }

    pub fn with_unit_trace(mut self) -> Self {
        self.noise_scale = Self::unit_trace_noise_scale(self.d, self.alpha);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(IvError::InvalidConfig("endo ensemble needs d >= 1".into()));
        }
        for (name, v) in [("alpha", self.alpha), ("eta", self.eta), ("nu", self.nu)] {
            if !v.is_finite() {
                return Err(IvError::InvalidConfig(format!("{name} must be finite")));
            }
        }
        if self.alpha == 0.0 {
            return Err(IvError::InvalidConfig("alpha must be non-zero".into()));
        }
        if !(self.noise_scale.is_finite() && self.noise_scale >= 0.0) {
            return Err(IvError::InvalidConfig("noise_scale must be >= 0".into()));
        }
        if let Some(b) = &self.beta_true {
            if b.len() != self.d {
                return Err(IvError::InvalidConfig(format!(
                    "beta_true has length {}, expected {}",
                    b.len(),
                    self.d
                )));
            }
        }
        Ok(())
    }
}

/// Scalar weak-instrument ensemble with `α = α₁/√n`, `η = 1`, `ν = 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeakConfig {
    pub alpha1: f64,
}

/// Heteroskedastic ensemble with `Γ = I` and `Σ = diag(1, ω, …, ω)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HardConfig {
    pub d: usize,
    pub omega: f64,
    #[serde(default = "one")]
    pub eta: f64,
    #[serde(default = "one")]
    pub nu: f64,
}

/// Scalar weak ensemble whose extra noise `wᵢ = zᵢGᵢ` has `Σ Gᵢ = 0`, inflating
/// `κₙ` without changing `Γ̂ₙ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BadkapConfig {
    pub alpha1: f64,
    #[serde(default = "badkap_eta")]
    pub eta: f64,
    #[serde(default = "badkap_nu")]
    pub nu: f64,
}

fn badkap_eta() -> f64 {
    0.1
}

fn badkap_nu() -> f64 {
    10.0
}

impl BadkapConfig {
    pub fn new(alpha1: f64) -> Self {
        Self {
            alpha1,
            eta: badkap_eta(),
            nu: badkap_nu(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Ensemble {
    Endo(EndoConfig),
    Weak(WeakConfig),
    Hard(HardConfig),
    Badkap(BadkapConfig),
}

/// One generated dataset with its ground truth.
#[derive(Debug, Clone)]
pub struct Draw {
    pub data: IVDataset,
    pub beta_true: DVector<f64>,
    pub noise: DVector<f64>,
}

fn normal(rng: &mut RandomStream) -> f64 {
    rng.sample(StandardNormal)
}

fn sign(rng: &mut RandomStream) -> f64 {
    if rng.random::<bool>() {
        1.0
    } else {
        -1.0
    }
}

fn assemble(
    x: DMatrix<f64>,
    z: DMatrix<f64>,
    noise: DVector<f64>,
    beta_true: DVector<f64>,
) -> Result<Draw> {
    let y = &x * &beta_true + &noise;
    Ok(Draw {
        data: IVDataset::new(y, x, z, None)?,
        beta_true,
        noise,
    })
}

fn check_n(n: usize, min: usize) -> Result<()> {
    if n < min {
        Err(IvError::InsufficientSample { needed: min, got: n })
    } else {
        Ok(())
    }
}

pub fn gen_endo(cfg: &EndoConfig, n: usize, stream: &mut RandomStream) -> Result<Draw> {
    cfg.validate()?;
    check_n(n, 1)?;
    let d = cfg.d;
    let mut x = DMatrix::zeros(n, d);
    let mut z = DMatrix::zeros(n, d);
    let mut noise = DVector::zeros(n);
    for i in 0..n {
        let eps = cfg.noise_scale * normal(stream);
        noise[i] = eps;
        for j in 0..d {
            let zij = match cfg.instrument_law {
                InstrumentLaw::Rademacher => sign(stream),
                InstrumentLaw::Gaussian => normal(stream),
            };
            let w = normal(stream);
            z[(i, j)] = zij;
            x[(i, j)] = cfg.alpha * zij + cfg.eta * eps + cfg.nu * w;
        }
    }
    let beta = cfg
        .beta_true
        .as_ref()
        .map_or_else(|| DVector::from_element(d, 1.0), |b| DVector::from_column_slice(b));
    assemble(x, z, noise, beta)
}

pub fn gen_weak(alpha1: f64, n: usize, stream: &mut RandomStream) -> Result<Draw> {
    if !(alpha1.is_finite() && alpha1 > 0.0) {
        return Err(IvError::InvalidConfig("alpha1 must be positive".into()));
    }
    check_n(n, 1)?;
    let cfg = EndoConfig::new(1, alpha1 / (n as f64).sqrt(), 1.0, 0.0);
    gen_endo(&cfg, n, stream)
}

fn hard_row(d: usize, sd_off: f64, stream: &mut RandomStream, z: &mut [f64]) -> f64 {
    let first = stream.random::<bool>();
    let s2 = std::f64::consts::SQRT_2;
    for (j, zj) in z.iter_mut().enumerate().take(d) {
        let v = normal(stream);
        *zj = match (first, j == 0) {
            (true, true) | (false, false) => s2 * v,
            _ => 0.0,
        };
    }
    let sd = if z[0] != 0.0 { 1.0 } else { sd_off };
    sd * normal(stream)
}

fn validate_hard(cfg: &HardConfig) -> Result<()> {
    if cfg.d < 2 {
        return Err(IvError::InvalidConfig("hard ensemble needs d >= 2".into()));
    }
    if !(cfg.omega.is_finite() && cfg.omega >= 0.0) {
        return Err(IvError::InvalidConfig("omega must be >= 0".into()));
    }
    if !(cfg.eta.is_finite() && cfg.nu.is_finite()) {
        return Err(IvError::InvalidConfig("eta and nu must be finite".into()));
    }
    Ok(())
}

/// Noise is `ε = σ(z)·Ṽ` with `Var(ε | z) = 1` when `z₁ ≠ 0` and `ω` otherwise.
pub fn gen_hard(cfg: &HardConfig, n: usize, stream: &mut RandomStream) -> Result<Draw> {
    validate_hard(cfg)?;
    check_n(n, 1)?;
    let d = cfg.d;
    let sd_off = cfg.omega.sqrt();
    let mut x = DMatrix::zeros(n, d);
    let mut z = DMatrix::zeros(n, d);
    let mut noise = DVector::zeros(n);
    let mut row = vec![0.0; d];
    for i in 0..n {
        let eps = hard_row(d, sd_off, stream, &mut row);
        noise[i] = eps;
        for j in 0..d {
            let w = normal(stream);
            z[(i, j)] = row[j];
            x[(i, j)] = row[j] + cfg.eta * eps + cfg.nu * w;
        }
    }
    assemble(x, z, noise, DVector::from_element(d, 1.0))
}

pub fn gen_badkap(cfg: &BadkapConfig, n: usize, stream: &mut RandomStream) -> Result<Draw> {
    if !(cfg.alpha1.is_finite() && cfg.alpha1 > 0.0) {
        return Err(IvError::InvalidConfig("alpha1 must be positive".into()));
    }
    check_n(n, 2)?;
    let alpha = cfg.alpha1 / (n as f64).sqrt();
    let mut z = DMatrix::zeros(n, 1);
    let mut noise = DVector::zeros(n);
    let mut h = DVector::zeros(n);
    for i in 0..n {
        z[(i, 0)] = sign(stream);
        noise[i] = normal(stream);
        h[i] = normal(stream);
    }
    let scale = (n as f64 / (n as f64 - 1.0)).sqrt();
    let g = h.add_scalar(-h.mean()) * scale;
    let mut x = DMatrix::zeros(n, 1);
    for i in 0..n {
        let w = z[(i, 0)] * g[i];
        x[(i, 0)] = alpha * z[(i, 0)] + cfg.eta * noise[i] + cfg.nu * w;
    }
    assemble(x, z, noise, DVector::from_element(1, 1.0))
}

impl Ensemble {
    pub fn validate(&self) -> Result<()> {
        match self {
            Ensemble::Endo(c) => c.validate(),
            Ensemble::Weak(c) if !(c.alpha1.is_finite() && c.alpha1 > 0.0) => {
                Err(IvError::InvalidConfig("alpha1 must be positive".into()))
            }
            Ensemble::Badkap(c) if !(c.alpha1.is_finite() && c.alpha1 > 0.0) => {
                Err(IvError::InvalidConfig("alpha1 must be positive".into()))
            }
            Ensemble::Hard(c) => validate_hard(c),
            _ => Ok(()),
        }
    }

    pub fn d(&self) -> usize {
        match self {
            Ensemble::Endo(c) => c.d,
            Ensemble::Hard(c) => c.d,
            Ensemble::Weak(_) | Ensemble::Badkap(_) => 1,
        }
    }

    pub fn draw(&self, n: usize, stream: &mut RandomStream) -> Result<Draw> {
        match self {
            Ensemble::Endo(c) => gen_endo(c, n, stream),
            Ensemble::Weak(c) => gen_weak(c.alpha1, n, stream),
            Ensemble::Hard(c) => gen_hard(c, n, stream),
            Ensemble::Badkap(c) => gen_badkap(c, n, stream),
        }
    }

    /// Population `(Γ, Σ)` at sample size `n`.
    pub fn gamma_sigma(&self, n: usize) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        self.validate()?;
        let weak_alpha = |a1: f64| a1 / (n as f64).sqrt();
        Ok(match self {
            Ensemble::Endo(c) => (
                DMatrix::identity(c.d, c.d) * c.alpha,
                DMatrix::identity(c.d, c.d) * c.noise_scale.powi(2),
            ),
            Ensemble::Weak(c) => (
                DMatrix::from_element(1, 1, weak_alpha(c.alpha1)),
                DMatrix::identity(1, 1),
            ),
            Ensemble::Badkap(c) => (
                DMatrix::from_element(1, 1, weak_alpha(c.alpha1)),
                DMatrix::identity(1, 1),
            ),
            Ensemble::Hard(c) => {
                let mut sigma = DMatrix::identity(c.d, c.d) * c.omega;
                sigma[(0, 0)] = 1.0;
                (DMatrix::identity(c.d, c.d), sigma)
            }
        })
    }

    /// One draw of `(z, ε)`; the law of `x` is irrelevant for `b` and `m3`.
    fn instrument_noise(&self, stream: &mut RandomStream, z: &mut [f64]) -> f64 {
        match self {
            Ensemble::Endo(c) => {
                for zj in z.iter_mut() {
                    *zj = match c.instrument_law {
                        InstrumentLaw::Rademacher => sign(stream),
                        InstrumentLaw::Gaussian => normal(stream),
                    };
                }
                c.noise_scale * normal(stream)
            }
            Ensemble::Weak(_) | Ensemble::Badkap(_) => {
                z[0] = sign(stream);
                normal(stream)
            }
            Ensemble::Hard(c) => hard_row(c.d, c.omega.sqrt(), stream, z),
        }
    }
}

/// Settings for the Monte Carlo calibration of `b` and `m3`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Calibration {
    pub draws: usize,
    pub inflation: f64,
    pub seed: u64,
}

impl Default for Calibration {
    fn default() -> Self {
        Self {
            draws: 1_000_000,
            inflation: 1.05,
            seed: 0,
        }
    }
}

/// Moore–Penrose inverse square root of a symmetric PSD matrix.
fn pinv_sqrt(a: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = symmetrize(a).symmetric_eigen();
    let tol = 1e-12 * eig.eigenvalues.amax().max(f64::MIN_POSITIVE);
    let inv = eig.eigenvalues.map(|l| if l > tol { 1.0 / l.sqrt() } else { 0.0 });
    &eig.eigenvectors * DMatrix::from_diagonal(&inv) * eig.eigenvectors.transpose()
}

const CALIBRATION_CHUNK: usize = 10_000;

/// Empirical `b`, `b_raw` and `m3` from `cal.draws` draws of `(z, ε)`.
pub fn calibrate_moments(ensemble: &Ensemble, n: usize, cal: &Calibration) -> Result<PopulationMoments> {
    if cal.draws == 0 || !(cal.inflation >= 1.0) {
        return Err(IvError::InvalidConfig(
            "calibration needs draws >= 1 and inflation >= 1".into(),
        ));
    }
    let (gamma, sigma) = ensemble.gamma_sigma(n)?;
    let d = gamma.nrows();
    let gi = crate::numerics::inverse_checked(&gamma)?.0;
    let s_half = pinv_sqrt(&sigma);
    let chunks = cal.draws.div_ceil(CALIBRATION_CHUNK);
    let parts: Vec<(f64, f64, f64)> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut stream = RandomStream::with_domain(cal.seed, CALIBRATION_DOMAIN, c as u64);
            let count = CALIBRATION_CHUNK.min(cal.draws - c * CALIBRATION_CHUNK);
            let mut z = vec![0.0; d];
            let (mut b, mut b_raw, mut m3) = (0.0f64, 0.0f64, 0.0);
            for _ in 0..count {
                let eps = ensemble.instrument_noise(&mut stream, &mut z);
                let ze = DVector::from_column_slice(&z) * eps;
                b = b.max((&gi * &ze).norm());
                b_raw = b_raw.max(ze.norm());
                m3 += (&s_half * &ze).norm().powi(3);
            }
            (b, b_raw, m3)
        })
        .collect();
    let (b, b_raw, m3_sum) = parts
        .iter()
        .fold((0.0f64, 0.0f64, 0.0), |acc, p| (acc.0.max(p.0), acc.1.max(p.1), acc.2 + p.2));
    PopulationMoments::new(
        gamma,
        sigma,
        b * cal.inflation,
        b_raw * cal.inflation,
        m3_sum / cal.draws as f64,
        BSource::EmpiricalMax {
            draws: cal.draws,
            inflation: cal.inflation,
        },
    )
}

/// An ensemble at a fixed sample size together with its population moments.
#[derive(Debug, Clone)]
pub struct EnsembleOracle {
    pub ensemble: Ensemble,
    pub n: usize,
    pub moments: PopulationMoments,
}

impl EnsembleOracle {
    pub fn new(ensemble: Ensemble, n: usize, cal: &Calibration) -> Result<Self> {
        let moments = calibrate_moments(&ensemble, n, cal)?;
        Ok(Self { ensemble, n, moments })
    }

    pub fn with_moments(ensemble: Ensemble, n: usize, moments: PopulationMoments) -> Result<Self> {
        ensemble.validate()?;
        if moments.d() != ensemble.d() {
            return Err(IvError::Shape("moments do not match the ensemble dimension".into()));
        }
        Ok(Self { ensemble, n, moments })
    }

    pub fn draw(&self, stream: &mut RandomStream) -> Result<Draw> {
        self.ensemble.draw(self.n, stream)
    }
}
