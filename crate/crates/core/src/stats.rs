//! Sample summaries and log-log rate fits.

use crate::error::{Error, Result};
use crate::linalg::pairwise_sum;

/// Sample mean and its standard error (`sd / √n`, zero for a single value).
pub fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = pairwise_sum(values) / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let sq: Vec<f64> = values.iter().map(|v| (v - mean) * (v - mean)).collect();
    let var = pairwise_sum(&sq) / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// Ordinary least squares `log y = intercept + slope · log x`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogLogFit {
    pub slope: f64,
    pub intercept: f64,
    /// Standard error of the slope from the regression residuals.
    pub slope_stderr: f64,
    pub points: usize,
}

impl LogLogFit {
    pub fn predict(&self, x: f64) -> f64 {
        (self.intercept + self.slope * x.ln()).exp()
    }
}

pub fn fit_log_log(xs: &[f64], ys: &[f64]) -> Result<LogLogFit> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "log-log fit needs matching inputs with at least 2 points, got {} and {}",
            xs.len(),
            ys.len()
        )));
    }
    if xs.iter().chain(ys).any(|v| !(v.is_finite() && *v > 0.0)) {
        return Err(Error::InvalidInput("log-log fit needs positive finite values".into()));
    }
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    if sxx == 0.0 {
        return Err(Error::InvalidInput("log-log fit needs at least two distinct x values".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let slope_stderr = if lx.len() > 2 {
        let rss: f64 = lx.iter().zip(&ly).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum();
        (rss / (n - 2.0) / sxx).sqrt()
    } else {
        0.0
    };
    Ok(LogLogFit {
        slope,
        intercept,
        slope_stderr,
        points: lx.len(),
    })
}

/// Smallest `C` with `y_i ≤ C · x_i^{power}` for every row.
pub fn envelope_constant(xs: &[f64], ys: &[f64], power: f64) -> f64 {
    xs.iter()
        .zip(ys)
        .map(|(x, y)| y / x.powf(power))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_power_law() {
        let xs = [10.0, 100.0, 1000.0, 10000.0];
        let ys: Vec<f64> = xs.iter().map(|x| 3.0 / x).collect();
        let fit = fit_log_log(&xs, &ys).unwrap();
        assert!((fit.slope + 1.0).abs() < 1e-12);
        assert!((fit.intercept - 3f64.ln()).abs() < 1e-12);
        assert!(fit.slope_stderr < 1e-12);
        assert!((fit.predict(50.0) - 0.06).abs() < 1e-12);
    }

    #[test]
    fn stderr_and_envelope() {
        let (m, se) = mean_stderr(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((se - (5.0f64 / 3.0 / 4.0).sqrt()).abs() < 1e-15);
        let c = envelope_constant(&[4.0, 16.0], &[1.0, 1.0], -0.5);
        assert_eq!(c, 4.0);
        assert!(fit_log_log(&[1.0, 2.0], &[0.0, 1.0]).is_err());
    }
}
