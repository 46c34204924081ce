//! Standard and lifted IV estimators, residual-based sandwich covariance and
//! classical Wald intervals.

mod dataset;

pub use dataset::IVDataset;
pub(crate) use dataset::fmt_f64;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{IvError, Result};
use crate::numerics::{inverse_checked, normal_quantile, symmetrize};

/// Standard IV fit `β̂ = Γ̂ₙ⁻¹ · (1/n)Σ zᵢyᵢ` with `Γ̂ₙ = (1/n)Σ zᵢxᵢᵀ`.
#[derive(Debug, Clone)]
pub struct IVFit {
    pub beta_hat: DVector<f64>,
    pub gamma_hat: DMatrix<f64>,
    pub gamma_hat_inv: DMatrix<f64>,
    /// 2-norm condition number of `gamma_hat`.
    pub condition: f64,
    pub residuals: DVector<f64>,
    pub n: usize,
}

impl IVFit {
    pub fn d(&self) -> usize {
        self.beta_hat.len()
    }

    /// `(1/n) Σ ε̂ᵢ zᵢ`; zero up to rounding at an exact fit.
    pub fn moment_residual(&self, data: &IVDataset) -> DVector<f64> {
        data.z.tr_mul(&self.residuals) / self.n as f64
    }
}

/// Fit the just-identified IV estimator on `(y, x, z)`. Exogenous columns, if
/// present, are ignored here; see [`lift`] for that case.
pub fn fit_iv(data: &IVDataset) -> Result<IVFit> {
    let n = data.n();
    let nf = n as f64;
    let gamma_hat = data.z.tr_mul(&data.x) / nf;
    let (gamma_hat_inv, condition) = inverse_checked(&gamma_hat)?;
    let zy = data.z.tr_mul(&data.y) / nf;
    let mut beta_hat = &gamma_hat_inv * &zy;
    // One step of iterative refinement tightens the first-order condition.
    let correction = &gamma_hat_inv * (&zy - &gamma_hat * &beta_hat);
    beta_hat += correction;
    let residuals = &data.y - &data.x * &beta_hat;
    Ok(IVFit {
        beta_hat,
        gamma_hat,
        gamma_hat_inv,
        condition,
        residuals,
        n,
    })
}

/// Lifted system `x' = [x | w]`, `z' = [z | w]` of dimension `D = d + p`.
#[derive(Debug, Clone)]
pub struct LiftedDataset {
    pub y: DVector<f64>,
    pub x_lift: DMatrix<f64>,
    pub z_lift: DMatrix<f64>,
    /// `D×d` selector with `Uᵀ = [I_d 0_p]`.
    pub selector_u: DMatrix<f64>,
    pub d: usize,
    pub p: usize,
}

impl LiftedDataset {
    pub fn dim(&self) -> usize {
        self.d + self.p
    }

    pub fn as_iv_dataset(&self) -> IVDataset {
        IVDataset {
            y: self.y.clone(),
            x: self.x_lift.clone(),
            z: self.z_lift.clone(),
            w: None,
        }
    }
}

pub fn lift(data: &IVDataset) -> Result<LiftedDataset> {
    let w = match &data.w {
        Some(w) if w.ncols() > 0 => w,
        _ => {
            return Err(IvError::Shape(
                "lifting needs at least one exogenous covariate column".into(),
            ))
        }
    };
    let (n, d, p) = (data.n(), data.d(), w.ncols());
    if w.nrows() != n {
        return Err(IvError::Shape(format!("w has {} rows, expected {n}", w.nrows())));
    }
    let big = d + p;
    let mut x_lift = DMatrix::zeros(n, big);
    let mut z_lift = DMatrix::zeros(n, big);
    x_lift.columns_mut(0, d).copy_from(&data.x);
    x_lift.columns_mut(d, p).copy_from(w);
    z_lift.columns_mut(0, d).copy_from(&data.z);
    z_lift.columns_mut(d, p).copy_from(w);
    let mut selector_u = DMatrix::zeros(big, d);
    selector_u.view_mut((0, 0), (d, d)).fill_with_identity();
    Ok(LiftedDataset {
        y: data.y.clone(),
        x_lift,
        z_lift,
        selector_u,
        d,
        p,
    })
}

/// Fit on the lifted system: `theta` is the full `D`-vector fit and
/// `beta_hat = Uᵀ θ̂`.
#[derive(Debug, Clone)]
pub struct LiftedFit {
    pub theta: IVFit,
    pub beta_hat: DVector<f64>,
}

pub fn fit_lifted(lifted: &LiftedDataset) -> Result<LiftedFit> {
    let theta = fit_iv(&lifted.as_iv_dataset())?;
    let beta_hat = lifted.selector_u.tr_mul(&theta.beta_hat);
    Ok(LiftedFit { theta, beta_hat })
}

#[derive(Debug, Clone)]
pub struct SandwichCovariance {
    /// `Σ̂ₙ = (1/(n−1)) Σ ε̂ᵢ² zᵢzᵢᵀ`.
    pub sigma_hat: DMatrix<f64>,
    /// `Γ̂ₙ⁻¹ Σ̂ₙ Γ̂ₙ⁻ᵀ`.
    pub sandwich: DMatrix<f64>,
    /// `Σ̃ₙ` from the true noise, when known (simulation only).
    pub sigma_tilde: Option<DMatrix<f64>>,
}

fn weighted_outer(z: &DMatrix<f64>, weights: &DVector<f64>) -> DMatrix<f64> {
    let mut scaled = z.clone();
    for (i, mut row) in scaled.row_iter_mut().enumerate() {
        row *= weights[i];
    }
    symmetrize(&z.tr_mul(&scaled))
}

pub fn sigma_hat(fit: &IVFit, data: &IVDataset) -> Result<SandwichCovariance> {
    let n = data.n();
    if n < 2 {
        return Err(IvError::InsufficientSample { needed: 2, got: n });
    }
    if fit.residuals.len() != n || fit.d() != data.z.ncols() {
        return Err(IvError::Shape("fit does not match dataset".into()));
    }
    let sq = fit.residuals.map(|e| e * e);
    let sigma_hat = weighted_outer(&data.z, &sq) / (n as f64 - 1.0);
    let sandwich = symmetrize(&(&fit.gamma_hat_inv * &sigma_hat * fit.gamma_hat_inv.transpose()));
    Ok(SandwichCovariance {
        sigma_hat,
        sandwich,
        sigma_tilde: None,
    })
}

/// `Σ̃ₙ = (1/n) Σ εᵢ² zᵢzᵢᵀ` using the true coefficients.
pub fn sigma_tilde(data: &IVDataset, beta_true: &DVector<f64>) -> Result<DMatrix<f64>> {
    let eps = data.noise(beta_true)?;
    let sq = eps.map(|e| e * e);
    Ok(weighted_outer(&data.z, &sq) / data.n() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Interval {
    pub lower: f64,
    pub upper: f64,
    pub half_width: f64,
}

impl Interval {
    pub fn centered(center: f64, half_width: f64) -> Self {
        Self {
            lower: center - half_width,
            upper: center + half_width,
            half_width,
        }
    }

    pub fn contains(&self, v: f64) -> bool {
        self.lower <= v && v <= self.upper
    }
}

/// Per-coordinate Wald intervals `β̂ⱼ ± r_δ · sqrt(sandwichⱼⱼ / n)`.
pub fn classical_ci(fit: &IVFit, cov: &SandwichCovariance, delta: f64) -> Result<Vec<Interval>> {
    let r = normal_quantile(delta)?;
    let n = fit.n as f64;
    (0..fit.d())
        .map(|j| {
            let var = cov.sandwich[(j, j)];
            if var < -1e-12 * cov.sandwich.amax().max(1.0) || !var.is_finite() {
                return Err(IvError::Domain(format!(
                    "sandwich diagonal entry {j} is negative ({var})"
                )));
            }
            Ok(Interval::centered(fit.beta_hat[j], r * (var.max(0.0) / n).sqrt()))
        })
        .collect()
}

/// JSON report emitted by `iv-nonasym estimate`.
#[derive(Debug, Clone, Serialize)]
pub struct FitReport {
    pub schema_version: u32,
    pub n: usize,
    pub d: usize,
    pub p: usize,
    pub lifted: bool,
    pub beta_hat: Vec<f64>,
    /// Full lifted coefficient vector `(β̂, α̂)` when exogenous covariates were used.
    pub theta_hat: Option<Vec<f64>>,
    pub gamma_hat: Vec<Vec<f64>>,
    pub condition_number: f64,
    pub sigma_hat: Vec<Vec<f64>>,
    pub sandwich: Vec<Vec<f64>>,
    pub delta: f64,
    pub classical_ci: Vec<Interval>,
}

pub(crate) fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().cloned().collect()).collect()
}

impl FitReport {
    /// Fit `data` (lifting it when `use_exogenous` is set) and assemble the
    /// report. For lifted fits the intervals cover the first `d` coordinates.
    pub fn build(data: &IVDataset, use_exogenous: bool, delta: f64) -> Result<Self> {
        let (fit, fit_data, lifted, d) = if use_exogenous {
            let lifted = lift(data)?;
            let lf = fit_lifted(&lifted)?;
            (lf.theta, lifted.as_iv_dataset(), true, data.d())
        } else {
            (fit_iv(data)?, data.clone(), false, data.d())
        };
        let cov = sigma_hat(&fit, &fit_data)?;
        let mut ci = classical_ci(&fit, &cov, delta)?;
        ci.truncate(d);
        let all: Vec<f64> = fit.beta_hat.iter().cloned().collect();
        Ok(Self {
            schema_version: crate::SCHEMA_VERSION,
            n: data.n(),
            d,
            p: if lifted { data.p() } else { 0 },
            lifted,
            beta_hat: all[..d].to_vec(),
            theta_hat: lifted.then(|| all.clone()),
            gamma_hat: rows(&fit.gamma_hat),
            condition_number: fit.condition,
            sigma_hat: rows(&cov.sigma_hat),
            sandwich: rows(&cov.sandwich),
            delta,
            classical_ci: ci,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_ratio_estimate() {
        let data = IVDataset::scalar(&[2.0, 4.0], &[1.0, 2.0], &[1.0, 1.0]).unwrap();
        let fit = fit_iv(&data).unwrap();
        assert!((fit.beta_hat[0] - 2.0).abs() < 1e-14);
        assert!(fit.moment_residual(&data).amax() < 1e-14);
    }

    #[test]
    fn uncorrelated_instrument_is_rank_deficient() {
        // Σ zᵢxᵢ = 0
        let data = IVDataset::scalar(&[1.0, 2.0], &[1.0, 1.0], &[1.0, -1.0]).unwrap();
        assert!(matches!(fit_iv(&data), Err(IvError::RankDeficient { .. })));
    }

    #[test]
    fn noiseless_identity_instrument_recovers_beta() {
        let x = DMatrix::from_row_slice(4, 2, &[1.0, 0.5, -0.3, 2.0, 0.7, -1.1, 2.2, 0.1]);
        let beta = DVector::from_vec(vec![1.5, -0.25]);
        let y = &x * &beta;
        let data = IVDataset::new(y, x.clone(), x, None).unwrap();
        let fit = fit_iv(&data).unwrap();
        assert!((&fit.beta_hat - &beta).amax() < 1e-10);
    }

    #[test]
    fn lift_layout() {
        let data = IVDataset::new(
            DVector::from_vec(vec![1.0, 2.0, 3.0]),
            DMatrix::from_column_slice(3, 1, &[1.0, 2.0, 0.5]),
            DMatrix::from_column_slice(3, 1, &[1.0, -1.0, 1.0]),
            Some(DMatrix::from_column_slice(3, 1, &[0.1, 0.2, 0.3])),
        )
        .unwrap();
        let l = lift(&data).unwrap();
        assert_eq!((l.x_lift.nrows(), l.x_lift.ncols()), (3, 2));
        assert_eq!(l.x_lift.column(1), l.z_lift.column(1));
        assert_eq!(l.selector_u, DMatrix::from_column_slice(2, 1, &[1.0, 0.0]));
    }

    #[test]
    fn lift_without_exogenous_is_shape_error() {
        let data = IVDataset::scalar(&[1.0], &[1.0], &[1.0]).unwrap();
        assert!(matches!(lift(&data), Err(IvError::Shape(_))));
        let mut empty = data.clone();
        empty.w = Some(DMatrix::zeros(1, 0));
        assert!(matches!(lift(&empty), Err(IvError::Shape(_))));
    }

    #[test]
    fn lift_with_w_in_instrument_span_is_singular() {
        // w duplicates z, so z' = [z | z] has two identical columns.
        let data = IVDataset::new(
            DVector::from_vec(vec![1.0, 3.0]),
            DMatrix::from_column_slice(2, 1, &[1.0, 2.0]),
            DMatrix::from_column_slice(2, 1, &[1.0, -1.0]),
            Some(DMatrix::from_column_slice(2, 1, &[1.0, -1.0])),
        )
        .unwrap();
        let l = lift(&data).unwrap();
        let g = l.z_lift.tr_mul(&l.x_lift) / 2.0;
        assert!(g.determinant().abs() < 1e-15);
        assert!(matches!(fit_lifted(&l), Err(IvError::RankDeficient { .. })));
    }

    #[test]
    fn sigma_hat_hand_values() {
        let data = IVDataset::scalar(&[0.0, 0.0], &[1.0, 1.0], &[1.0, 1.0]).unwrap();
        let mut fit = fit_iv(&data).unwrap();
        fit.residuals = DVector::from_vec(vec![1.0, -1.0]);
        let cov = sigma_hat(&fit, &data).unwrap();
        assert!((cov.sigma_hat[(0, 0)] - 2.0).abs() < 1e-15);

        fit.residuals *= 3.0;
        let scaled = sigma_hat(&fit, &data).unwrap();
        assert!((scaled.sigma_hat[(0, 0)] - 18.0).abs() < 1e-13);

        fit.residuals.fill(0.0);
        assert_eq!(sigma_hat(&fit, &data).unwrap().sigma_hat[(0, 0)], 0.0);
    }

    #[test]
    fn sigma_hat_needs_two_rows() {
        let data = IVDataset::scalar(&[1.0], &[1.0], &[1.0]).unwrap();
        let fit = fit_iv(&data).unwrap();
        assert!(matches!(
            sigma_hat(&fit, &data),
            Err(IvError::InsufficientSample { .. })
        ));
    }

    #[test]
    fn sigma_tilde_hand_value_and_normalization() {
        // ε = (2, 0), z = (1, 3) → (1/2)(4·1 + 0·9) = 2
        let data = IVDataset::scalar(&[2.0, 0.0], &[0.0, 0.0], &[1.0, 3.0]).unwrap();
        let st = sigma_tilde(&data, &DVector::from_vec(vec![5.0])).unwrap();
        assert!((st[(0, 0)] - 2.0).abs() < 1e-15);
        assert!(matches!(
            sigma_tilde(&data, &DVector::from_vec(vec![1.0, 2.0])),
            Err(IvError::Shape(_))
        ));

        let data = IVDataset::scalar(&[1.0, 2.5, -0.5], &[1.0, 2.0, 0.3], &[1.0, 1.5, -1.0]).unwrap();
        let fit = fit_iv(&data).unwrap();
        let cov = sigma_hat(&fit, &data).unwrap();
        let st = sigma_tilde(&data, &fit.beta_hat).unwrap();
        assert!((st[(0, 0)] - cov.sigma_hat[(0, 0)] * 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn classical_half_width() {
        let data = IVDataset::scalar(&[1.0, 2.0, 3.0, 4.0], &[1.0, 2.0, 3.0, 4.0], &[1.0; 4]).unwrap();
        let fit = fit_iv(&data).unwrap();
        let mut cov = sigma_hat(&fit, &data).unwrap();
        cov.sandwich = DMatrix::identity(1, 1);
        let ci = classical_ci(&fit, &cov, 0.05).unwrap();
        assert!((ci[0].half_width - 0.979_981_992_270_027).abs() < 1e-12);
        cov.sandwich *= 4.0;
        let wide = classical_ci(&fit, &cov, 0.05).unwrap();
        assert!((wide[0].half_width - 2.0 * ci[0].half_width).abs() < 1e-12);
        let narrow = classical_ci(&fit, &cov, 1.0 - 1e-9).unwrap();
        assert!(narrow[0].half_width < 1e-8);
    }
}
