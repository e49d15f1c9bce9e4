//! One-dimensional Gaussian mixture fits used to test predictive multimodality.

use crate::error::{Error, Result};
use crate::math::{log_mean_exp, normal_logpdf};

#[derive(Clone, Debug, PartialEq)]
pub struct MixtureFit {
    pub weights: Vec<f64>,
    pub means: Vec<f64>,
    pub variances: Vec<f64>,
    pub log_likelihood: f64,
    /// `p ln n - 2 ln L` with `p = 3K - 1` free parameters.
    pub bic: f64,
}

/// EM fit of a `components`-Gaussian mixture. Deterministic: components are
/// initialised at evenly spaced sample quantiles.
pub fn fit_gaussian_mixture(samples: &[f64], components: usize) -> Result<MixtureFit> {
    let n = samples.len();
    if components == 0 || n < 2 * components {
        return Err(Error::InsufficientData(format!("{n} samples for {components} mixture components")));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let total_var = {
        let m = samples.iter().sum::<f64>() / n as f64;
        samples.iter().map(|s| (s - m).powi(2)).sum::<f64>() / n as f64
    };
    // keeps components from collapsing onto single points
    let floor = (1e-6 * total_var).max(1e-12);
    let k = components;
    let mut weights = vec![1.0 / k as f64; k];
    let mut means: Vec<f64> = (0..k).map(|c| sorted[((2 * c + 1) * n) / (2 * k)]).collect();
    let mut variances = vec![total_var.max(floor); k];
    let mut resp = vec![0.0; n * k];
    let mut ll = f64::NEG_INFINITY;
    for _ in 0..500 {
        let mut new_ll = 0.0;
        for (i, x) in samples.iter().enumerate() {
            let logs: Vec<f64> = (0..k).map(|c| weights[c].ln() + normal_logpdf(*x, means[c], variances[c])).collect();
            let lse = log_mean_exp(&logs)? + (k as f64).ln();
            new_ll += lse;
            for c in 0..k {
                resp[i * k + c] = (logs[c] - lse).exp();
            }
        }
        for c in 0..k {
            let nc: f64 = (0..n).map(|i| resp[i * k + c]).sum();
            if nc < 1e-12 {
                continue;
            }
            weights[c] = nc / n as f64;
            means[c] = (0..n).map(|i| resp[i * k + c] * samples[i]).sum::<f64>() / nc;
            variances[c] = ((0..n).map(|i| resp[i * k + c] * (samples[i] - means[c]).powi(2)).sum::<f64>() / nc).max(floor);
        }
        let converged = (new_ll - ll).abs() < 1e-10 * new_ll.abs().max(1.0);
        ll = new_ll;
        if converged {
            break;
        }
    }
    let params = (3 * k - 1) as f64;
    Ok(MixtureFit { weights, means, variances, log_likelihood: ll, bic: params * (n as f64).ln() - 2.0 * ll })
}

/// True when a two-component mixture has a lower BIC than a single Gaussian.
pub fn bic_prefers_two_components(samples: &[f64]) -> Result<bool> {
    let one = fit_gaussian_mixture(samples, 1)?;
    let two = fit_gaussian_mixture(samples, 2)?;
    Ok(two.bic < one.bic)
}
