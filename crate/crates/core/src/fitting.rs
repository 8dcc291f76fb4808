//! Small least-squares utilities shared by the diagnostic and experiment
//! paths: polynomial fits with a goodness-of-fit score, and log-log slope
//! estimation for empirical rate measurements.

use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};

/// Least-squares polynomial fit together with its coefficient of
/// determination on the fitting data.
#[derive(Debug, Clone)]
pub struct PolynomialFit {
    /// Coefficients in ascending degree order: `c[0] + c[1] x + ...`.
    pub coefficients: Vec<f64>,
    /// Coefficient of determination `1 - SS_res / SS_tot` (1 on constant
    /// data that is matched exactly).
    pub r_squared: f64,
}

impl PolynomialFit {
    /// Evaluate the fitted polynomial at `x` (Horner scheme).
    pub fn evaluate(&self, x: f64) -> f64 {
        self.coefficients
            .iter()
            .rev()
            .fold(0.0, |acc, &c| acc * x + c)
    }
}

/// Fit a polynomial of the given degree to `(xs, ys)` by least squares.
///
/// Requires strictly more data points than coefficients and finite inputs.
/// The normal equations are avoided; the Vandermonde system is solved
/// through an SVD so nearly collinear abscissae degrade gracefully.
pub fn fit_polynomial(xs: &[f64], ys: &[f64], degree: usize) -> Result<PolynomialFit> {
    if xs.len() != ys.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} abscissae vs {} ordinates",
            xs.len(),
            ys.len()
        )));
    }
    if xs.len() <= degree {
        return Err(Error::InvalidArgument(format!(
            "need more than {} points for a degree-{} fit, got {}",
            degree,
            degree,
            xs.len()
        )));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("polynomial fit input".into()));
    }
    let rows = xs.len();
    let cols = degree + 1;
    let mut vander = DMatrix::zeros(rows, cols);
    for (r, &x) in xs.iter().enumerate() {
        let mut p = 1.0;
        for c in 0..cols {
            vander[(r, c)] = p;
            p *= x;
        }
    }
    let rhs = DVector::from_column_slice(ys);
    let svd = vander.svd(true, true);
    let sol = svd
        .solve(&rhs, 1e-13)
        .map_err(|m| Error::NumericalBreakdown(m.to_string()))?;
    let coefficients: Vec<f64> = sol.iter().copied().collect();
    let fit = PolynomialFit {
        coefficients,
        r_squared: 0.0,
    };
    let mean = ys.iter().sum::<f64>() / rows as f64;
    let ss_tot: f64 = ys.iter().map(|&y| (y - mean) * (y - mean)).sum();
    let ss_res: f64 = xs
        .iter()
        .zip(ys)
        .map(|(&x, &y)| {
            let d = y - fit.evaluate(x);
            d * d
        })
        .sum();
    let r_squared = if ss_tot > 0.0 {
        1.0 - ss_res / ss_tot
    } else if ss_res <= 1e-24 {
        1.0
    } else {
        0.0
    };
    Ok(PolynomialFit {
        r_squared,
        ..fit
    })
}

/// Straight-line fit `y = intercept + slope * x`; returns `(intercept, slope)`.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> Result<(f64, f64)> {
    let fit = fit_polynomial(xs, ys, 1)?;
    Ok((fit.coefficients[0], fit.coefficients[1]))
}

/// Slope of `ln y` against `ln x`: the empirical exponent of a power law.
/// All data must be strictly positive.
pub fn log_log_slope(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.iter().chain(ys).any(|&v| !(v > 0.0)) {
        return Err(Error::InvalidArgument(
            "log-log slope needs strictly positive data".into(),
        ));
    }
    let lx: Vec<f64> = xs.iter().map(|&v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|&v| v.ln()).collect();
    let (_, slope) = linear_fit(&lx, &ly)?;
    Ok(slope)
}
