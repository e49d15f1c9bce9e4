//! One-dimensional demonstration simulators: non-stationary, multimodal and
//! heteroscedastic discrepancy surfaces.

use rand_distr::{Beta, Distribution};

use super::SummaryModel;
use crate::error::{Error, Result};
use crate::math::{normal_pdf, RngStream};

/// Prior support shared by the three toy examples.
pub const TOY_BOUNDS: (f64, f64) = (0.0, 100.0);

fn check_support(name: &str, theta: &[f64]) -> Result<f64> {
    match theta {
        [t] if t.is_finite() && *t >= TOY_BOUNDS.0 && *t <= TOY_BOUNDS.1 => Ok(*t),
        _ => Err(Error::Domain(format!("{name} expects one parameter in [0, 100], got {theta:?}"))),
    }
}

/// Sum of three Gaussian densities plus Gaussian noise.
///
/// The second argument of each density is a variance: `N(30, 15)` has
/// standard deviation `sqrt(15)`.
#[derive(Clone, Debug)]
pub struct Te1 {
    pub noise_variance: f64,
}

impl Default for Te1 {
    fn default() -> Self {
        Self { noise_variance: 0.005 }
    }
}

impl Te1 {
    pub fn mean(theta: f64) -> f64 {
        normal_pdf(theta, 30.0, 15.0) + normal_pdf(theta, 60.0, 5.0) + normal_pdf(theta, 100.0, 4.0)
    }
}

impl SummaryModel for Te1 {
    fn simulate(&self, theta: &[f64], rng: &mut RngStream) -> Result<Vec<f64>> {
        let t = check_support("TE1", theta)?;
        let noise = rng.normal() * self.noise_variance.sqrt();
        Ok(vec![Self::mean(t) + noise])
    }
}

/// Randomly picks one of two mirrored logistic curves.
#[derive(Clone, Debug)]
pub struct Te2 {
    pub noise_variance: f64,
}

impl Default for Te2 {
    fn default() -> Self {
        Self { noise_variance: 0.01 }
    }
}

impl Te2 {
    /// The two noise-free branches `(t/(1+t), 1/(1+t))` with `t = exp(-0.1 (theta - 50))`.
    pub fn branches(theta: f64) -> (f64, f64) {
        let t = (-0.1 * (theta - 50.0)).exp();
        (t / (1.0 + t), 1.0 / (1.0 + t))
    }
}

impl SummaryModel for Te2 {
    fn simulate(&self, theta: &[f64], rng: &mut RngStream) -> Result<Vec<f64>> {
        let t = check_support("TE2", theta)?;
        let (up, down) = Self::branches(t);
        let coin = rng.uniform() < 0.5;
        let noise = rng.normal() * self.noise_variance.sqrt();
        Ok(vec![if coin { up } else { down } + noise])
    }
}

/// Sum of a `Beta(theta + 1, 5)` and a `Beta(5, theta + 1)` draw.
#[derive(Clone, Debug, Default)]
pub struct Te3;

impl SummaryModel for Te3 {
    fn simulate(&self, theta: &[f64], rng: &mut RngStream) -> Result<Vec<f64>> {
        let t = check_support("TE3", theta)?;
        let a = Beta::new(t + 1.0, 5.0).map_err(|e| Error::Simulator(e.to_string()))?;
        let b = Beta::new(5.0, t + 1.0).map_err(|e| Error::Simulator(e.to_string()))?;
        Ok(vec![a.sample(rng) + b.sample(rng)])
    }
}
