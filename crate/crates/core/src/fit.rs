//! Ordinary least squares on log-log data.

use serde::{Deserialize, Serialize};

/// `(slope, intercept, max |residual|)` of the line through `(x, y)`.
pub fn least_squares(x: &[f64], y: &[f64]) -> Option<(f64, f64, f64)> {
    let n = x.len();
    if n < 2 || n != y.len() {
        return None;
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let sxx: f64 = x.iter().map(|&a| (a - mx) * (a - mx)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = x.iter().zip(y).map(|(&a, &b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let resid = x
        .iter()
        .zip(y)
        .map(|(&a, &b)| (b - (intercept + slope * a)).abs())
        .fold(0.0, f64::max);
    Some((slope, intercept, resid))
}

/// Fitted log-log exponent for one measured quantity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingFit {
    pub quantity: String,
    /// `"v"` or `"R"`.
    pub abscissa: String,
    pub slope: f64,
    pub intercept: f64,
    pub residual: f64,
    pub expected_slope: f64,
    pub stages: Vec<usize>,
}

impl ScalingFit {
    /// Fits `ln y` against `ln x`; needs at least four samples.
    pub fn fit(
        quantity: &str,
        abscissa: &str,
        xs: &[f64],
        ys: &[f64],
        expected_slope: f64,
        stages: Vec<usize>,
    ) -> crate::error::Result<Self> {
        if xs.len() < 4 {
            return Err(crate::error::LabError::InvalidParameter(format!(
                "scaling fit for {quantity} needs at least 4 stages, got {}",
                xs.len()
            )));
        }
        let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
        let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
        let (slope, intercept, residual) = least_squares(&lx, &ly).ok_or_else(|| {
            crate::error::LabError::InvalidParameter(format!("degenerate abscissa for {quantity}"))
        })?;
        Ok(Self {
            quantity: quantity.to_string(),
            abscissa: abscissa.to_string(),
            slope,
            intercept,
            residual,
            expected_slope,
            stages,
        })
    }

    pub fn relative_deviation(&self) -> f64 {
        ((self.slope - self.expected_slope) / self.expected_slope).abs()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn recovers_exact_power_laws(slope in -3.0f64..3.0, c in 0.1f64..10.0) {
            let xs: Vec<f64> = (0..6).map(|k| 2f64.powi(-(k + 3))).collect();
            let ys: Vec<f64> = xs.iter().map(|x| c * x.powf(slope)).collect();
            let f = ScalingFit::fit("q", "v", &xs, &ys, slope, vec![]).unwrap();
            prop_assert!((f.slope - slope).abs() < 1e-10);
            prop_assert!(f.residual < 1e-10);
        }
    }

    #[test]
    fn too_few_points_rejected() {
        assert!(
            ScalingFit::fit("q", "v", &[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0], 1.0, vec![]).is_err()
        );
    }
}
