//! Exact correspondence between Gaussian log-likelihood and squared error.
//!
//! Under an isotropic Gaussian observation model with fixed scale `sigma`,
//! the per-sample log-likelihood is an affine function of that sample's sum
//! of squared errors:
//!
//! ```text
//! log q(x | mu) = -(d/2) ln(2 pi) - d ln(sigma) - ssq / (2 sigma^2)
//! ```
//!
//! so maximizing the likelihood and minimizing squared error are the same
//! objective. [`variational_mse_equivalence`] demonstrates this by fitting a
//! line through (sum of squared errors, log-likelihood) pairs and checking
//! that the slope is exactly `-1/(2 sigma^2)` and the intercept is the
//! normalizer, with zero residual.

use crate::error::{Error, Result};

/// Fitted line through (squared error, log-likelihood) pairs, and the
/// closed-form coefficients it must reproduce.
#[derive(Clone, Copy, Debug)]
pub struct VariationalReport {
    /// Observation scale used for the likelihood.
    pub sigma: f64,
    /// Dimensionality shared by every sample.
    pub dim: usize,
    /// Fitted slope of log-likelihood against the sum of squared errors.
    pub slope: f64,
    /// Fitted intercept.
    pub intercept: f64,
    /// `-1 / (2 sigma^2)`.
    pub expected_slope: f64,
    /// `-(d/2) ln(2 pi) - d ln(sigma)`.
    pub expected_intercept: f64,
    /// Largest absolute deviation of any point from the fitted line.
    pub max_residual: f64,
}

/// Log-density of `x` under an isotropic Gaussian centered at `mu` with
/// standard deviation `sigma` in every coordinate.
pub fn gaussian_log_likelihood(x: &[f64], mu: &[f64], sigma: f64) -> Result<f64> {
    if sigma <= 0.0 || !sigma.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "sigma must be positive and finite, got {sigma}"
        )));
    }
    if x.len() != mu.len() {
        return Err(Error::shape(
            "gaussian log-likelihood",
            format!("{} coordinates", x.len()),
            format!("{} coordinates", mu.len()),
        ));
    }
    if x.is_empty() {
        return Err(Error::InvalidArgument(
            "samples must have at least one coordinate".into(),
        ));
    }
    let d = x.len() as f64;
    let ssq: f64 = x.iter().zip(mu).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(-0.5 * d * (2.0 * std::f64::consts::PI).ln() - d * sigma.ln() - ssq / (2.0 * sigma * sigma))
}

/// Fit log-likelihood against per-sample sum of squared errors across
/// `samples` (pairs of observation and mean) and compare the fitted line
/// with the closed form.
///
/// Requires at least two samples with distinct squared errors; every sample
/// must share one dimensionality.
pub fn variational_mse_equivalence(
    samples: &[(Vec<f64>, Vec<f64>)],
    sigma: f64,
) -> Result<VariationalReport> {
    if sigma <= 0.0 || !sigma.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "sigma must be positive and finite, got {sigma}"
        )));
    }
    if samples.len() < 2 {
        return Err(Error::InvalidArgument(
            "need at least two samples to fit a line".into(),
        ));
    }
    let dim = samples[0].0.len();
    if dim == 0 {
        return Err(Error::InvalidArgument(
            "samples must have at least one coordinate".into(),
        ));
    }
    let mut xs = Vec::with_capacity(samples.len());
    let mut ys = Vec::with_capacity(samples.len());
    for (i, (x, mu)) in samples.iter().enumerate() {
        if x.len() != dim || mu.len() != dim {
            return Err(Error::shape(
                "equivalence samples",
                format!("{dim} coordinates"),
                format!("{} and {} coordinates at sample {i}", x.len(), mu.len()),
            ));
        }
        let ssq: f64 = x.iter().zip(mu).map(|(a, b)| (a - b) * (a - b)).sum();
        xs.push(ssq);
        ys.push(gaussian_log_likelihood(x, mu, sigma)?);
    }

    // Ordinary least squares on (ssq, log q).
    let n = xs.len() as f64;
    let mean_x: f64 = xs.iter().sum::<f64>() / n;
    let mean_y: f64 = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mean_x) * (x - mean_x)).sum();
    if sxx <= 0.0 {
        return Err(Error::InvalidArgument(
            "all samples have identical squared error; slope is undefined".into(),
        ));
    }
    let sxy: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (x - mean_x) * (y - mean_y))
        .sum();
    let slope = sxy / sxx;
    let intercept = mean_y - slope * mean_x;
    let max_residual = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (y - (slope * x + intercept)).abs())
        .fold(0.0, f64::max);

    let d = dim as f64;
    Ok(VariationalReport {
        sigma,
        dim,
        slope,
        intercept,
        expected_slope: -1.0 / (2.0 * sigma * sigma),
        expected_intercept: -0.5 * d * (2.0 * std::f64::consts::PI).ln() - d * sigma.ln(),
        max_residual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn perfect_prediction_leaves_only_the_normalizer() {
        let x = vec![0.3, -1.2, 0.7];
        let ll = gaussian_log_likelihood(&x, &x, 1.0).unwrap();
        let expected = -1.5 * (2.0 * std::f64::consts::PI).ln();
        assert!((ll - expected).abs() < 1e-15, "{ll} vs {expected}");
    }

    #[test]
    fn likelihood_is_affine_in_squared_error() {
        // Two samples, hand-computed: moving one coordinate by delta changes
        // the log-likelihood by exactly -delta^2 / (2 sigma^2).
        let sigma = 2.0;
        let mu = vec![0.0, 0.0];
        let base = gaussian_log_likelihood(&[0.0, 0.0], &mu, sigma).unwrap();
        let moved = gaussian_log_likelihood(&[3.0, 0.0], &mu, sigma).unwrap();
        assert!((base - moved - 9.0 / (2.0 * sigma * sigma)).abs() < 1e-12);
    }

    #[test]
    fn fitted_line_recovers_the_closed_form_for_each_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let dim = 6;
        let samples: Vec<(Vec<f64>, Vec<f64>)> = (0..40)
            .map(|_| {
                let mu: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let x: Vec<f64> = mu.iter().map(|m| m + rng.gen_range(-2.0..2.0)).collect();
                (x, mu)
            })
            .collect();
        for sigma in [0.5, 1.0, 2.0] {
            let report = variational_mse_equivalence(&samples, sigma).unwrap();
            assert!(
                (report.slope - report.expected_slope).abs() < 1e-9,
                "sigma {sigma}: slope {} vs {}",
                report.slope,
                report.expected_slope
            );
            assert!(
                (report.intercept - report.expected_intercept).abs() < 1e-9,
                "sigma {sigma}: intercept {} vs {}",
                report.intercept,
                report.expected_intercept
            );
            assert!(
                report.max_residual < 1e-9,
                "sigma {sigma}: the relation must be exactly linear, residual {}",
                report.max_residual
            );
        }
    }

    #[test]
    fn degenerate_inputs_are_rejected() {
        let samples = vec![(vec![1.0], vec![0.0]), (vec![2.0], vec![0.0])];
        assert!(variational_mse_equivalence(&samples, 0.0).is_err());
        assert!(variational_mse_equivalence(&samples, -1.0).is_err());
        assert!(variational_mse_equivalence(&samples[..1], 1.0).is_err());
        let constant = vec![(vec![1.0], vec![0.0]), (vec![-1.0], vec![0.0])];
        assert!(variational_mse_equivalence(&constant, 1.0).is_err());
        let ragged = vec![(vec![1.0], vec![0.0]), (vec![1.0, 2.0], vec![0.0, 0.0])];
        assert!(variational_mse_equivalence(&ragged, 1.0).is_err());
        assert!(gaussian_log_likelihood(&[1.0], &[1.0, 2.0], 1.0).is_err());
        assert!(gaussian_log_likelihood(&[], &[], 1.0).is_err());
    }
}
