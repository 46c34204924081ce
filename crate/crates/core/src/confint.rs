//! Data-driven confidence intervals with explicit finite-sample corrections.
//!
//! The key ingredients are the spread matrix `Qₙ(v)` of `Vᵢ = ⟨v, zᵢ⟩xᵢ`, the
//! error term `eₙ(Δ̂; v) = sqrt(Δ̂ᵀQₙ(v)Δ̂)` and, for scalar problems, the
//! instrument-strength coefficient `κₙ`.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bounds::BSource;
use crate::ensembles::EnsembleOracle;
use crate::error::{IvError, Result};
use crate::estimator::{fit_iv, sigma_hat, IVDataset, IVFit, Interval};
use crate::numerics::{inverse_checked, normal_quantile, spectral_norm, sym_inv_sqrt, sym_sqrt, symmetrize, RandomStream};

/// Key domain for the Monte Carlo choice of `λ`.
pub const LAMBDA_DOMAIN: u64 = 0x6c61_6d62;

/// `Qₙ(v) = (1/(n(n−1))) Σ_{i<j} (Vᵢ − Vⱼ)(Vᵢ − Vⱼ)ᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairwiseSpread {
    pub q: DMatrix<f64>,
    pub v: DVector<f64>,
}

/// Computes `Qₙ(v)` as the centered sample covariance `(1/(n−1)) Σ (Vᵢ − V̄)(Vᵢ − V̄)ᵀ`,
/// which equals the pairwise form exactly.
pub fn q_matrix(data: &IVDataset, v: &DVector<f64>) -> Result<PairwiseSpread> {
    let n = data.n();
    if n < 2 {
        return Err(IvError::InsufficientSample { needed: 2, got: n });
    }
    if v.len() != data.d() {
        return Err(IvError::Shape(format!("v has length {}, expected {}", v.len(), data.d())));
    }
    let weights = &data.z * v;
    let mut vs = data.x.clone();
    for (i, mut row) in vs.row_iter_mut().enumerate() {
        row *= weights[i];
    }
    let mean = vs.row_mean();
    for mut row in vs.row_iter_mut() {
        row -= &mean;
    }
    let q = symmetrize(&(vs.tr_mul(&vs) / (n as f64 - 1.0)));
    Ok(PairwiseSpread { q, v: v.clone() })
}

/// `eₙ(Δ̂; v) = sqrt(Δ̂ᵀ Qₙ(v) Δ̂)`.
pub fn e_error(delta_hat: &DVector<f64>, spread: &PairwiseSpread) -> Result<f64> {
    if delta_hat.len() != spread.q.nrows() {
        return Err(IvError::Shape("delta_hat does not match Q".into()));
    }
    Ok(delta_hat.dot(&(&spread.q * delta_hat)).max(0.0).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KappaCoefficient {
    pub kappa: f64,
    pub n: usize,
    /// `Qₙ(1)`, the sample variance of `zᵢxᵢ`.
    pub q1: f64,
    pub gamma_hat: f64,
}

/// `κₙ = (1/√n) · sqrt(Qₙ(1)) / |Γ̂ₙ|` for a scalar dataset.
pub fn kappa(data: &IVDataset) -> Result<KappaCoefficient> {
    if data.d() != 1 {
        return Err(IvError::Shape(format!("kappa needs d = 1, got {}", data.d())));
    }
    let n = data.n();
    let spread = q_matrix(data, &DVector::from_element(1, 1.0))?;
    let gamma_hat = data.z.column(0).dot(&data.x.column(0)) / n as f64;
    if gamma_hat == 0.0 || !gamma_hat.is_finite() {
        return Err(IvError::DegenerateInstrument(
            "sample cross moment of z and x is zero".into(),
        ));
    }
    let q1 = spread.q[(0, 0)];
    Ok(KappaCoefficient {
        kappa: q1.sqrt() / gamma_hat.abs() / (n as f64).sqrt(),
        n,
        q1,
        gamma_hat,
    })
}

/// Confidence levels and the boundedness constant shared by all intervals.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CiLevels {
    pub delta: f64,
    pub delta_prime: f64,
    /// Almost-sure bound on `‖zε‖₂`.
    pub b: f64,
    pub b_source: BSource,
}

impl CiLevels {
    pub fn new(delta: f64, delta_prime: f64, b: f64) -> Self {
        Self {
            delta,
            delta_prime,
            b,
            b_source: BSource::UserSupplied,
        }
    }

    fn validate(&self) -> Result<()> {
        for (name, p) in [("delta", self.delta), ("delta_prime", self.delta_prime)] {
            if !(p > 0.0 && p < 1.0) {
                return Err(IvError::Domain(format!("{name} must lie in (0, 1), got {p}")));
            }
        }
        if !(self.b.is_finite() && self.b >= 0.0) {
            return Err(IvError::Domain(format!("b must be non-negative, got {}", self.b)));
        }
        Ok(())
    }

    /// `sqrt(8 log(1/δ′) / (n − 1))`.
    fn mp_factor(&self, n: usize, log_arg: f64) -> f64 {
        (8.0 * log_arg.ln() / (n as f64 - 1.0)).sqrt()
    }
}

/// Source of `Δ̂ = β̂ − β*` in the error term `eₙ`.
#[derive(Debug, Clone, PartialEq)]
pub enum DeltaHatSource {
    /// True coefficients known (simulation).
    Oracle(DVector<f64>),
    /// `eₙ` replaced by `sqrt(‖Qₙ(v)‖₂) · bound` for a bound on `‖Δ̂‖₂`.
    Bound(f64),
}

impl DeltaHatSource {
    fn label(&self) -> &'static str {
        match self {
            DeltaHatSource::Oracle(_) => "oracle",
            DeltaHatSource::Bound(_) => "bound",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    ClassicalCorrectedA,
    ShrunkB,
    Inapplicable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CiMethod {
    Linear,
    Refined,
    Uniform,
    ScalarCorrected,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KappaThresholds {
    pub r_delta: f64,
    pub r_one_minus_delta: f64,
    pub kappa_r_delta: f64,
    pub kappa_r_one_minus_delta: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Provenance {
    pub b_source: Option<BSource>,
    pub delta_hat_mode: Option<String>,
    pub gamma_source: Option<String>,
    pub lambda_source: Option<String>,
    pub direction: Option<String>,
    pub kappa_formula: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ConfidenceReport {
    pub schema_version: u32,
    pub method: CiMethod,
    /// The functional the interval covers.
    pub target: String,
    pub point_estimate: f64,
    /// Absent when no regime applies.
    pub interval: Option<Interval>,
    /// Half-width on the `√n` scale.
    pub sqrt_n_half_width: Option<f64>,
    pub n: usize,
    pub delta: f64,
    pub delta_prime: f64,
    pub b: f64,
    pub regime: Option<Regime>,
    pub kappa: Option<f64>,
    pub thresholds: Option<KappaThresholds>,
    /// Additive terms of the interval, on the `√n` scale.
    pub terms: BTreeMap<String, f64>,
    /// Terms that need the unknown truth and are not part of the interval.
    pub diagnostic_terms: BTreeMap<String, f64>,
    pub nominal_coverage: f64,
    pub nominal_deficit: String,
    /// Plug-in `(1/n) Σ ‖Σ̂ₙ^{-1/2} ε̂ᵢ zᵢ‖³`, when `Σ̂ₙ` is invertible.
    pub m3_plugin: Option<f64>,
    pub provenance: Provenance,
}

/// `(1/n) Σ ‖Σ̂ₙ^{-1/2} ε̂ᵢ zᵢ‖³`.
pub fn m3_plugin(fit: &IVFit, data: &IVDataset, sigma_hat: &DMatrix<f64>) -> Option<f64> {
    let s = sym_inv_sqrt(sigma_hat).ok()?;
    let n = data.n();
    let total: f64 = (0..n)
        .map(|i| {
            let zi = data.z.row(i).transpose() * fit.residuals[i];
            (&s * zi).norm().powi(3)
        })
        .sum();
    Some(total / n as f64)
}

impl ConfidenceReport {
    fn base(method: CiMethod, target: String, point: f64, n: usize, levels: &CiLevels, m3: Option<f64>) -> Self {
        let nominal = 1.0 - levels.delta - levels.delta_prime;
        let m3_text = m3.map_or("unavailable".to_string(), |m| format!("{m:.6}"));
        Self {
            schema_version: crate::SCHEMA_VERSION,
            method,
            target,
            point_estimate: point,
            interval: None,
            sqrt_n_half_width: None,
            n,
            delta: levels.delta,
            delta_prime: levels.delta_prime,
            b: levels.b,
            regime: None,
            kappa: None,
            thresholds: None,
            terms: BTreeMap::new(),
            diagnostic_terms: BTreeMap::new(),
            nominal_coverage: nominal,
            nominal_deficit: format!(
                "coverage is 1 - delta - delta' = {nominal:.6} minus a Berry-Esseen slack c*m3/sqrt(n) \
                 whose universal constant c is unknown; plug-in m3 = {m3_text}"
            ),
            m3_plugin: m3,
            provenance: Provenance {
                b_source: Some(levels.b_source.clone()),
                ..Default::default()
            },
        }
    }

    fn set_half_width(&mut self, sqrt_n_half_width: f64) {
        self.sqrt_n_half_width = Some(sqrt_n_half_width);
        self.interval = Some(Interval::centered(
            self.point_estimate,
            sqrt_n_half_width / (self.n as f64).sqrt(),
        ));
    }

    fn term(&mut self, name: &str, value: f64) {
        self.terms.insert(name.to_string(), value);
    }
}

fn check_fit(fit: &IVFit, data: &IVDataset) -> Result<()> {
    if fit.n != data.n() || fit.d() != data.d() {
        return Err(IvError::Shape("fit does not match dataset".into()));
    }
    Ok(())
}

/// Interval for `⟨Γ̂ₙᵀv, β*⟩` from the bound
/// `√n |⟨v, Γ̂ₙΔ̂⟩| ≤ r_δ {sqrt(vᵀΣ̂ₙv) + b‖v‖₂ sqrt(8 log(1/δ′)/(n−1)) + eₙ(Δ̂; v)}`.
///
/// The direction `v` must not depend on the data; the caller attests to this.
pub fn ci_linear(
    fit: &IVFit,
    data: &IVDataset,
    v: &DVector<f64>,
    levels: &CiLevels,
    source: &DeltaHatSource,
) -> Result<ConfidenceReport> {
    levels.validate()?;
    check_fit(fit, data)?;
    let n = data.n();
    let cov = sigma_hat(fit, data)?;
    let spread = q_matrix(data, v)?;
    let e_n = match source {
        DeltaHatSource::Oracle(beta) => {
            if beta.len() != fit.d() {
                return Err(IvError::Shape("beta_true does not match the fit".into()));
            }
            e_error(&(&fit.beta_hat - beta), &spread)?
        }
        DeltaHatSource::Bound(bound) => {
            if !(bound.is_finite() && *bound >= 0.0) {
                return Err(IvError::Domain("delta-hat bound must be non-negative".into()));
            }
            spectral_norm(&spread.q)?.sqrt() * bound
        }
    };
    let r = normal_quantile(levels.delta)?;
    let leading = v.dot(&(&cov.sigma_hat * v)).max(0.0).sqrt();
    let term1 = levels.b * v.norm() * levels.mp_factor(n, 1.0 / levels.delta_prime);
    let w = fit.gamma_hat.tr_mul(v);
    let mut report = ConfidenceReport::base(
        CiMethod::Linear,
        "<gamma_hat^T v, beta>".into(),
        w.dot(&fit.beta_hat),
        n,
        levels,
        m3_plugin(fit, data, &cov.sigma_hat),
    );
    report.term("r_delta", r);
    report.term("sqrt_v_sigma_v", leading);
    report.term("term1_maurer_pontil", term1);
    report.term("term2_e_n", e_n);
    report.set_half_width(r * (leading + term1 + e_n));
    report.provenance.delta_hat_mode = Some(source.label().into());
    report.provenance.direction = Some("caller-attested deterministic".into());
    Ok(report)
}

/// Population `Γₙ` for the refined interval, or the plug-in `Γ̂ₙ`.
#[derive(Debug, Clone, PartialEq)]
pub enum GammaSource {
    Oracle(DMatrix<f64>),
    PlugIn,
}

fn check_unit(u: &DVector<f64>, d: usize) -> Result<()> {
    if u.len() != d {
        return Err(IvError::Shape(format!("u has length {}, expected {d}", u.len())));
    }
    if (u.norm() - 1.0).abs() > 1e-10 {
        return Err(IvError::Domain(format!("u must have unit norm, got {}", u.norm())));
    }
    Ok(())
}

/// Per-coordinate style interval for `⟨u, β*⟩` with computable part
/// `Term₃ = r_δ {sqrt(uᵀΓ̂ₙ⁻¹Σ̂ₙΓ̂ₙ⁻ᵀu) + b‖Γ̂ₙ⁻ᵀu‖₂ sqrt(8 log(1/δ′)/(n−1))}`.
///
/// With `beta_true`, the diagnostic remainder `Term₄` is reported separately.
pub fn ci_refined(
    fit: &IVFit,
    data: &IVDataset,
    u: &DVector<f64>,
    gamma: &GammaSource,
    levels: &CiLevels,
    beta_true: Option<&DVector<f64>>,
) -> Result<ConfidenceReport> {
    levels.validate()?;
    check_fit(fit, data)?;
    let d = fit.d();
    check_unit(u, d)?;
    let n = data.n();
    let cov = sigma_hat(fit, data)?;
    let r = normal_quantile(levels.delta)?;
    let mp = levels.mp_factor(n, 1.0 / levels.delta_prime);
    let gi = &fit.gamma_hat_inv;
    let leading = u.dot(&(&cov.sandwich * u)).max(0.0).sqrt();
    let mp_term = levels.b * gi.tr_mul(u).norm() * mp;
    let term3 = r * (leading + mp_term);

    let mut report = ConfidenceReport::base(
        CiMethod::Refined,
        "<u, beta>".into(),
        u.dot(&fit.beta_hat),
        n,
        levels,
        m3_plugin(fit, data, &cov.sigma_hat),
    );
    report.term("r_delta", r);
    report.term("sqrt_u_sandwich_u", leading);
    report.term("maurer_pontil", mp_term);
    report.term("term3", term3);
    report.set_half_width(term3);

    let gamma_n = match gamma {
        GammaSource::Oracle(g) => {
            if g.shape() != (d, d) {
                return Err(IvError::Shape("gamma_n must be d×d".into()));
            }
            report.provenance.gamma_source = Some("oracle".into());
            g.clone()
        }
        GammaSource::PlugIn => {
            report.provenance.gamma_source = Some("plug-in".into());
            fit.gamma_hat.clone()
        }
    };
    if let Some(beta) = beta_true {
        if beta.len() != d {
            return Err(IvError::Shape("beta_true does not match the fit".into()));
        }
        let (gn_inv, _) = inverse_checked(&gamma_n)?;
        let v = gn_inv.tr_mul(u);
        let spread = q_matrix(data, &v)?;
        let dh = (&fit.beta_hat - beta).norm();
        let dn = spectral_norm(&(&gn_inv * &fit.gamma_hat - DMatrix::identity(d, d)))?;
        let q_part = r * spectral_norm(&spread.q)? * dh;
        let inner = r * spectral_norm(&(gi * sym_sqrt(&cov.sigma_hat)?))?
            + levels.b * spectral_norm(&fit.gamma_hat)? * mp
            + (n as f64).sqrt() * dh;
        let diag = &mut report.diagnostic_terms;
        diag.insert("q_term".into(), q_part);
        diag.insert("d_norm".into(), dn);
        diag.insert("delta_hat_norm".into(), dh);
        diag.insert("dominant_sqrt_n_d_delta".into(), (n as f64).sqrt() * dn * dh);
        diag.insert("term4".into(), q_part + dn * inner);
        report.provenance.delta_hat_mode = Some("oracle".into());
    }
    Ok(report)
}

/// Bound `λ` on `‖Γ̂ₙ⁻¹u − Γ⁻¹u‖₂` together with how it was chosen.
#[derive(Debug, Clone, PartialEq)]
pub struct LambdaInput {
    pub value: f64,
    pub source: String,
}

/// Interval for `⟨u, β*⟩` valid uniformly over a union bound on `2d` directions:
/// `r_{δ/2d} {sqrt(uᵀΓ̂ₙ⁻ᵀΣ̂ₙΓ̂ₙ⁻¹u) + b T₅ sqrt(8 log(2d/δ′)/(n−1)) + 2λ‖Σ̂ₙ‖₂ + T₆ ‖Δ̂‖₂}`.
///
/// `delta_hat_norm` is the oracle `‖Δ̂‖₂` or a bound on it.
#[allow(clippy::too_many_arguments)]
pub fn ci_uniform(
    fit: &IVFit,
    data: &IVDataset,
    u: &DVector<f64>,
    gamma: &DMatrix<f64>,
    lambda: &LambdaInput,
    levels: &CiLevels,
    delta_hat_norm: f64,
) -> Result<ConfidenceReport> {
    levels.validate()?;
    check_fit(fit, data)?;
    let d = fit.d();
    if u.len() != d || gamma.shape() != (d, d) {
        return Err(IvError::Shape("u and gamma must match the fit dimension".into()));
    }
    if !(lambda.value.is_finite() && lambda.value >= 0.0) {
        return Err(IvError::Domain(format!("lambda must be non-negative, got {}", lambda.value)));
    }
    if !(delta_hat_norm.is_finite() && delta_hat_norm >= 0.0) {
        return Err(IvError::Domain("delta_hat_norm must be non-negative".into()));
    }
    let n = data.n();
    let cov = sigma_hat(fit, data)?;
    let two_d = 2.0 * d as f64;
    let r = normal_quantile(levels.delta / two_d)?;
    let gi = &fit.gamma_hat_inv;
    // Ordering Γ̂⁻ᵀ Σ̂ Γ̂⁻¹ kept exactly as in the bound.
    let leading = u.dot(&(gi.transpose() * &cov.sigma_hat * gi * u)).max(0.0).sqrt();
    let (pop_inv, _) = inverse_checked(gamma)?;
    let center = &pop_inv * u;
    let mut t5 = 0.0f64;
    let mut t6 = 0.0f64;
    for j in 0..d {
        for s in [1.0, -1.0] {
            let mut w = center.clone();
            w[j] += s * lambda.value;
            t5 = t5.max(w.norm());
            t6 = t6.max(spectral_norm(&q_matrix(data, &w)?.q)?.sqrt());
        }
    }
    let mp = levels.b * t5 * levels.mp_factor(n, two_d / levels.delta_prime);
    let sigma_term = 2.0 * lambda.value * spectral_norm(&cov.sigma_hat)?;
    let e_term = t6 * delta_hat_norm;
    let mut report = ConfidenceReport::base(
        CiMethod::Uniform,
        "<u, beta>".into(),
        u.dot(&fit.beta_hat),
        n,
        levels,
        m3_plugin(fit, data, &cov.sigma_hat),
    );
    report.term("r_delta_over_2d", r);
    report.term("sqrt_u_sandwich_u", leading);
    report.term("t5", t5);
    report.term("t6", t6);
    report.term("maurer_pontil", mp);
    report.term("lambda_sigma", sigma_term);
    report.term("t6_delta_hat", e_term);
    report.set_half_width(r * (leading + mp + sigma_term + e_term));
    report.provenance.lambda_source = Some(lambda.source.clone());
    report.provenance.gamma_source = Some("oracle".into());
    Ok(report)
}

/// `(1 − δ′)`-quantile of `‖Γ̂ₙ⁻¹u − Γ⁻¹u‖₂` over `reps` oracle draws.
pub fn lambda_by_monte_carlo(
    oracle: &EnsembleOracle,
    u: &DVector<f64>,
    delta_prime: f64,
    reps: usize,
    seed: u64,
) -> Result<LambdaInput> {
    if reps == 0 || !(delta_prime > 0.0 && delta_prime < 1.0) {
        return Err(IvError::InvalidConfig("need reps >= 1 and delta_prime in (0, 1)".into()));
    }
    let target = oracle.moments.gamma_inv() * u;
    let mut devs: Vec<f64> = (0..reps as u64)
        .into_par_iter()
        .map(|t| {
            let draw = oracle.draw(&mut RandomStream::with_domain(seed, LAMBDA_DOMAIN, t))?;
            match fit_iv(&draw.data) {
                Ok(fit) => Ok((&fit.gamma_hat_inv * u - &target).norm()),
                Err(IvError::RankDeficient { .. }) => Ok(f64::INFINITY),
                Err(e) => Err(e),
            }
        })
        .collect::<Result<_>>()?;
    devs.sort_by(f64::total_cmp);
    let k = ((1.0 - delta_prime) * reps as f64).ceil() as usize;
    let value = devs[k.clamp(1, reps) - 1];
    Ok(LambdaInput {
        value,
        source: format!("monte-carlo quantile 1-{delta_prime} over {reps} oracle draws"),
    })
}

/// Corrected scalar interval for `β*` driven by `κₙ`.
///
/// With `H = sqrt(Γ̂ₙ⁻¹Σ̂ₙΓ̂ₙ⁻¹) + (b/|Γ̂ₙ|) sqrt(8 log(1/δ′)/(n−1))`, the `√n`
/// half-width is `r_δ H / (1 − r_δ κₙ)` when `κₙ r_δ < 1`, and
/// `r_{1−δ} H / (κₙ r_{1−δ} − 1)` when `κₙ r_{1−δ} > 1`. Otherwise no
/// interval is produced.
pub fn ci_scalar_corrected(fit: &IVFit, data: &IVDataset, levels: &CiLevels) -> Result<ConfidenceReport> {
    levels.validate()?;
    if data.d() != 1 {
        return Err(IvError::Shape(format!("scalar interval needs d = 1, got {}", data.d())));
    }
    check_fit(fit, data)?;
    let n = data.n();
    let k = kappa(data)?;
    let cov = sigma_hat(fit, data)?;
    let r_a = normal_quantile(levels.delta)?;
    let r_b = normal_quantile(1.0 - levels.delta)?;
    let classical = cov.sandwich[(0, 0)].max(0.0).sqrt();
    let mp = levels.b / k.gamma_hat.abs() * levels.mp_factor(n, 1.0 / levels.delta_prime);
    let h = classical + mp;

    let mut report = ConfidenceReport::base(
        CiMethod::ScalarCorrected,
        "beta".into(),
        fit.beta_hat[0],
        n,
        levels,
        m3_plugin(fit, data, &cov.sigma_hat),
    );
    report.kappa = Some(k.kappa);
    report.thresholds = Some(KappaThresholds {
        r_delta: r_a,
        r_one_minus_delta: r_b,
        kappa_r_delta: k.kappa * r_a,
        kappa_r_one_minus_delta: k.kappa * r_b,
    });
    report.term("sqrt_sandwich", classical);
    report.term("maurer_pontil", mp);
    report.term("base_h", h);
    report.term("classical_sqrt_n_half_width", r_a * classical);
    report.provenance.kappa_formula = Some("square-root form: sqrt(Q_n(1)) / (sqrt(n) |gamma_hat|)".into());

    if k.kappa * r_a < 1.0 {
        let factor = r_a / (1.0 - r_a * k.kappa);
        report.regime = Some(Regime::ClassicalCorrectedA);
        report.term("correction_factor", factor);
        report.set_half_width(factor * h);
    } else if k.kappa * r_b > 1.0 {
        let factor = r_b / (k.kappa * r_b - 1.0);
        report.regime = Some(Regime::ShrunkB);
        report.term("correction_factor", factor);
        report.set_half_width(factor * h);
    } else {
        report.regime = Some(Regime::Inapplicable);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pairwise(data: &IVDataset, v: &DVector<f64>) -> DMatrix<f64> {
        let n = data.n();
        let vs: Vec<DVector<f64>> = (0..n)
            .map(|i| data.x.row(i).transpose() * data.z.row(i).transpose().dot(v))
            .collect();
        let mut q = DMatrix::zeros(data.d(), data.d());
        for i in 0..n {
            for j in i + 1..n {
                let diff = &vs[i] - &vs[j];
                q += &diff * diff.transpose();
            }
        }
        q / (n * (n - 1)) as f64
    }

    #[test]
    fn q_matrix_hand_value_and_pairwise_agreement() {
        let data = IVDataset::scalar(&[0.0, 0.0], &[0.0, 2.0], &[1.0, 1.0]).unwrap();
        let q = q_matrix(&data, &DVector::from_element(1, 1.0)).unwrap();
        assert!((q.q[(0, 0)] - 2.0).abs() < 1e-15);

        let x = DMatrix::from_fn(7, 2, |i, j| ((i * 3 + j) as f64).sin());
        let z = DMatrix::from_fn(7, 2, |i, j| ((i + 5 * j) as f64).cos());
        let data = IVDataset::new(DVector::zeros(7), x, z, None).unwrap();
        let v = DVector::from_vec(vec![0.3, -1.2]);
        let fast = q_matrix(&data, &v).unwrap().q;
        assert!((fast - pairwise(&data, &v)).amax() < 1e-13);
    }

    #[test]
    fn q_matrix_degenerate_inputs() {
        let data = IVDataset::scalar(&[0.0; 3], &[2.0; 3], &[1.0; 3]).unwrap();
        let q = q_matrix(&data, &DVector::from_element(1, 1.0)).unwrap();
        assert_eq!(q.q[(0, 0)], 0.0);
        let single = IVDataset::scalar(&[0.0], &[1.0], &[1.0]).unwrap();
        assert!(matches!(
            q_matrix(&single, &DVector::from_element(1, 1.0)),
            Err(IvError::InsufficientSample { .. })
        ));
    }

    #[test]
    fn e_error_values() {
        let spread = PairwiseSpread {
            q: DMatrix::identity(2, 2),
            v: DVector::zeros(2),
        };
        assert_eq!(e_error(&DVector::zeros(2), &spread).unwrap(), 0.0);
        assert!((e_error(&DVector::from_vec(vec![3.0, 4.0]), &spread).unwrap() - 5.0).abs() < 1e-15);
        assert!(e_error(&DVector::zeros(3), &spread).is_err());
    }

    #[test]
    fn kappa_hand_values() {
        let data = IVDataset::scalar(&[0.0, 0.0], &[0.0, 2.0], &[1.0, 1.0]).unwrap();
        assert!((kappa(&data).unwrap().kappa - 1.0).abs() < 1e-15);
        let flat = IVDataset::scalar(&[0.0; 4], &[1.5; 4], &[2.0; 4]).unwrap();
        assert_eq!(kappa(&flat).unwrap().kappa, 0.0);
        let zero = IVDataset::scalar(&[0.0, 0.0], &[1.0, 1.0], &[1.0, -1.0]).unwrap();
        assert!(matches!(kappa(&zero), Err(IvError::DegenerateInstrument(_))));
    }

    #[test]
    fn kappa_scale_invariance() {
        let data = IVDataset::scalar(&[0.0; 4], &[1.0, 2.0, 0.5, 3.0], &[1.0, -1.0, 1.0, 1.0]).unwrap();
        let mut scaled = data.clone();
        scaled.x *= -3.5;
        let a = kappa(&data).unwrap().kappa;
        let b = kappa(&scaled).unwrap().kappa;
        assert!((a - b).abs() < 1e-14 * a);
    }

    #[test]
    fn maurer_pontil_factor() {
        let levels = CiLevels::new(0.05, (-1.0f64).exp(), 1.0);
        assert!((levels.mp_factor(9, 1.0 / levels.delta_prime) - 1.0).abs() < 1e-15);
    }

    fn exact_fit_data() -> IVDataset {
        IVDataset::scalar(&[2.0, 4.0, 3.0, 1.0], &[1.0, 2.0, 1.5, 0.5], &[1.0, 1.0, -1.0, 1.0]).unwrap()
    }

    #[test]
    fn linear_ci_with_exact_fit() {
        let data = exact_fit_data();
        let fit = fit_iv(&data).unwrap();
        let levels = CiLevels::new(0.05, 0.005, 1.0);
        let v = DVector::from_element(1, 1.0);
        let rep = ci_linear(&fit, &data, &v, &levels, &DeltaHatSource::Oracle(fit.beta_hat.clone())).unwrap();
        let t = &rep.terms;
        assert_eq!(t["term2_e_n"], 0.0);
        let expected = t["r_delta"] * (t["sqrt_v_sigma_v"] + t["term1_maurer_pontil"]);
        assert!((rep.sqrt_n_half_width.unwrap() - expected).abs() < 1e-14);
        assert!(matches!(
            ci_linear(&fit, &data, &v, &levels, &DeltaHatSource::Bound(-1.0)),
            Err(IvError::Domain(_))
        ));
    }

    #[test]
    fn refined_scalar_reduces_to_classical_plus_mp() {
        let data = IVDataset::scalar(&[2.0, 4.5, 2.0, 1.0, 0.2], &[1.0, 2.0, 1.5, 0.5, 0.1], &[1.0, 1.0, -1.0, 1.0, 1.0]).unwrap();
        let fit = fit_iv(&data).unwrap();
        let cov = sigma_hat(&fit, &data).unwrap();
        let levels = CiLevels::new(0.05, 0.005, 2.0);
        let u = DVector::from_element(1, 1.0);
        let rep = ci_refined(&fit, &data, &u, &GammaSource::PlugIn, &levels, None).unwrap();
        let r = normal_quantile(0.05).unwrap();
        let classical = r * cov.sandwich[(0, 0)].sqrt();
        let mp = r * 2.0 / fit.gamma_hat[(0, 0)].abs() * (8.0 * 200f64.ln() / 4.0).sqrt();
        assert!((rep.sqrt_n_half_width.unwrap() - classical - mp).abs() < 1e-12);
        assert!(rep.diagnostic_terms.is_empty());
        let bad = DVector::from_element(1, 2.0);
        assert!(matches!(
            ci_refined(&fit, &data, &bad, &GammaSource::PlugIn, &levels, None),
            Err(IvError::Domain(_))
        ));
    }

    #[test]
    fn refined_term4_without_gamma_deviation() {
        let data = IVDataset::scalar(&[2.0, 4.5, 2.0, 1.0], &[1.0, 2.0, 1.5, 0.5], &[1.0, 1.0, -1.0, 1.0]).unwrap();
        let fit = fit_iv(&data).unwrap();
        let levels = CiLevels::new(0.05, 0.005, 1.0);
        let beta = DVector::from_element(1, 1.7);
        let u = DVector::from_element(1, 1.0);
        let rep = ci_refined(&fit, &data, &u, &GammaSource::PlugIn, &levels, Some(&beta)).unwrap();
        let dh = (fit.beta_hat[0] - 1.7).abs();
        let v = DVector::from_element(1, 1.0 / fit.gamma_hat[(0, 0)]);
        let q = q_matrix(&data, &v).unwrap().q[(0, 0)];
        let expected = normal_quantile(0.05).unwrap() * q * dh;
        assert!(rep.diagnostic_terms["d_norm"] < 1e-15);
        assert!((rep.diagnostic_terms["term4"] - expected).abs() < 1e-12);
    }

    #[test]
    fn uniform_t5_hand_enumeration() {
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 0.2, 0.1, 1.0, 0.5, 0.5]);
        let z = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let data = IVDataset::new(DVector::from_vec(vec![1.0, 2.0, 0.5]), x, z, None).unwrap();
        let fit = fit_iv(&data).unwrap();
        let levels = CiLevels::new(0.05, 0.005, 1.0);
        let u = DVector::from_vec(vec![1.0, 0.0]);
        let lambda = LambdaInput {
            value: 1.0,
            source: "fixed".into(),
        };
        let rep = ci_uniform(&fit, &data, &u, &DMatrix::identity(2, 2), &lambda, &levels, 0.0).unwrap();
        assert!((rep.terms["t5"] - 2.0).abs() < 1e-15);
        assert!((rep.terms["r_delta_over_2d"] - normal_quantile(0.0125).unwrap()).abs() < 1e-15);
        let neg = LambdaInput {
            value: -0.1,
            source: "fixed".into(),
        };
        assert!(ci_uniform(&fit, &data, &u, &DMatrix::identity(2, 2), &neg, &levels, 0.0).is_err());
    }

    fn scalar_with_kappa(target: f64) -> (IVFit, IVDataset) {
        // zx = (g - s, g + s) gives Q(1) = 2s², |Γ̂| = g and κ = s/g.
        let g = 1.0;
        let s = target * g;
        let data = IVDataset::scalar(&[0.3, 1.9], &[g - s, g + s], &[1.0, 1.0]).unwrap();
        (fit_iv(&data).unwrap(), data)
    }

    #[test]
    fn scalar_regimes() {
        let levels = CiLevels::new(0.05, 0.005, 1.0);
        let (fit, data) = scalar_with_kappa(0.25);
        let rep = ci_scalar_corrected(&fit, &data, &levels).unwrap();
        assert!((rep.kappa.unwrap() - 0.25).abs() < 1e-12);
        assert_eq!(rep.regime, Some(Regime::ClassicalCorrectedA));
        let factor = rep.terms["correction_factor"];
        assert!((factor / normal_quantile(0.05).unwrap() - 1.0 / (1.0 - 1.959963984540054 * 0.25)).abs() < 1e-9);

        let (fit, data) = scalar_with_kappa(50.0);
        let rep = ci_scalar_corrected(&fit, &data, &levels).unwrap();
        assert_eq!(rep.regime, Some(Regime::ShrunkB));
        let rb = normal_quantile(0.95).unwrap();
        assert!((rep.terms["correction_factor"] - rb / (50.0 * rb - 1.0)).abs() < 1e-9);

        let (fit, data) = scalar_with_kappa(1.0);
        let rep = ci_scalar_corrected(&fit, &data, &levels).unwrap();
        assert_eq!(rep.regime, Some(Regime::Inapplicable));
        assert!(rep.interval.is_none());
        let json = serde_json::to_value(&rep).unwrap();
        assert_eq!(json["regime"], "inapplicable");
    }

    #[test]
    fn scalar_zero_kappa_is_classical_plus_mp() {
        let data = IVDataset::scalar(&[1.0, 3.0, 2.0], &[2.0, 2.0, 2.0], &[1.0, 1.0, 1.0]).unwrap();
        let fit = fit_iv(&data).unwrap();
        let levels = CiLevels::new(0.05, 0.005, 1.0);
        let rep = ci_scalar_corrected(&fit, &data, &levels).unwrap();
        assert_eq!(rep.kappa, Some(0.0));
        let t = &rep.terms;
        let r = normal_quantile(0.05).unwrap();
        assert!((rep.sqrt_n_half_width.unwrap() - r * (t["sqrt_sandwich"] + t["maurer_pontil"])).abs() < 1e-12);
    }

    #[test]
    fn scalar_rejects_vector_problems() {
        let x = DMatrix::identity(2, 2);
        let data = IVDataset::new(DVector::zeros(2), x.clone(), x, None).unwrap();
        let fit = fit_iv(&data).unwrap();
        assert!(matches!(
            ci_scalar_corrected(&fit, &data, &CiLevels::new(0.05, 0.005, 1.0)),
            Err(IvError::Shape(_))
        ));
    }
}
