use serde::Serialize;

use crate::error::{IvError, Result};

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

#[derive(Debug, Clone, Serialize)]
pub struct DensityEstimate {
    pub grid: Vec<f64>,
    pub density: Vec<f64>,
    pub bandwidth: f64,
}

impl DensityEstimate {
    /// Trapezoid-rule integral of the density over its grid.
    pub fn integral(&self) -> f64 {
        self.grid
            .windows(2)
            .zip(self.density.windows(2))
            .map(|(x, f)| 0.5 * (x[1] - x[0]) * (f[0] + f[1]))
            .sum()
    }
}

/// Scott's rule `σ̂ · n^(−1/5)` with the unbiased sample standard deviation.
pub fn scott_bandwidth(samples: &[f64]) -> Result<f64> {
    let n = samples.len();
    if n < 2 {
        return Err(IvError::InsufficientSample { needed: 2, got: n });
    }
    if samples.iter().any(|s| !s.is_finite()) {
        return Err(IvError::Domain("KDE samples must be finite".into()));
    }
    let mean = samples.iter().sum::<f64>() / n as f64;
    let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
    let sd = var.sqrt();
    if !(sd > 0.0) {
        return Err(IvError::DegenerateSample(
            "KDE samples have zero standard deviation".into(),
        ));
    }
    Ok(sd * (n as f64).powf(-0.2))
}

/// Gaussian kernel density estimate with Scott's-rule bandwidth, evaluated on
/// `grid` (which must be strictly increasing).
pub fn gaussian_kde(samples: &[f64], grid: &[f64]) -> Result<DensityEstimate> {
    let h = scott_bandwidth(samples)?;
    if grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(IvError::Domain("KDE grid must be strictly increasing".into()));
    }
    let norm = 1.0 / (samples.len() as f64 * h);
    let density = grid
        .iter()
        .map(|&x| {
            let s: f64 = samples
                .iter()
                .map(|&si| {
                    let u = (x - si) / h;
                    INV_SQRT_2PI * (-0.5 * u * u).exp()
                })
                .sum();
            norm * s
        })
        .collect();
    Ok(DensityEstimate {
        grid: grid.to_vec(),
        density,
        bandwidth: h,
    })
}
