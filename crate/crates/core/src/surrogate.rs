//! Common contract over the GP and latent-variable deep GP surrogates.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evidence::EvidenceSet;
use crate::math::{Bounds, RngStream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SurrogateKind {
    #[serde(rename = "gp")]
    Gp,
    #[serde(rename = "lv-gp")]
    LvGp,
    #[serde(rename = "lv-2gp")]
    Lv2Gp,
}

impl SurrogateKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SurrogateKind::Gp => "gp",
            SurrogateKind::LvGp => "lv-gp",
            SurrogateKind::Lv2Gp => "lv-2gp",
        }
    }

    /// Number of GP layers after the latent-variable layer; `None` for the vanilla GP.
    pub fn gp_layers(self) -> Option<usize> {
        match self {
            SurrogateKind::Gp => None,
            SurrogateKind::LvGp => Some(1),
            SurrogateKind::Lv2Gp => Some(2),
        }
    }
}

impl std::fmt::Display for SurrogateKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for SurrogateKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gp" => Ok(SurrogateKind::Gp),
            "lv-gp" => Ok(SurrogateKind::LvGp),
            "lv-2gp" => Ok(SurrogateKind::Lv2Gp),
            other => Err(Error::Config(format!("unknown surrogate '{other}', expected gp | lv-gp | lv-2gp"))),
        }
    }
}

/// Frozen sampling noise for `p` predictive draws at one input, so that a
/// sample-based surface is a deterministic function of the input.
#[derive(Clone, Debug, Default)]
pub struct CommonRandomNumbers {
    /// Latent-variable draws, one per predictive sample.
    pub latent: Vec<f64>,
    /// Per GP layer, a `p x outputs` matrix of standard normal draws.
    pub layers: Vec<DMatrix<f64>>,
    /// Likelihood noise draws, one per predictive sample.
    pub likelihood: Vec<f64>,
}

impl CommonRandomNumbers {
    pub fn samples(&self) -> usize {
        self.latent.len()
    }
}

/// Mean and variance summarising the predictive distribution at one input
/// in raw discrepancy units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Moments {
    pub mean: f64,
    pub variance: f64,
}

/// When a fit happens inside the optimisation loop.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FitPhase {
    /// First fit on the initial evidence.
    Initial,
    /// After the `n`-th acquisition (1-based).
    Refresh(usize),
    /// Full retrain before posterior extraction.
    Final,
}

pub trait SurrogateModel: Send + Sync {
    fn kind(&self) -> SurrogateKind;

    fn bounds(&self) -> &Bounds;

    /// (Re)trains on `evidence`; `phase` selects the amount of work.
    fn fit(&mut self, evidence: &EvidenceSet, phase: FitPhase, rng: &mut RngStream) -> Result<()>;

    /// Draws the frozen noise used by [`SurrogateModel::moments`].
    fn draw_crn(&self, rng: &mut RngStream) -> CommonRandomNumbers;

    /// Quantile-conditioned moments at `theta`: sample-based models keep draws
    /// below the `quantile` level; analytic models return the full predictive
    /// mean and latent variance.
    fn moments(&self, theta: &[f64], quantile: f64, crn: &CommonRandomNumbers) -> Result<Moments>;

    /// Gaussian likelihood noise variance in raw discrepancy units.
    fn noise_variance(&self) -> f64;

    /// Latent-function predictive samples at `theta` (no likelihood noise).
    fn latent_samples(&self, theta: &[f64], crn: &CommonRandomNumbers) -> Result<Vec<f64>>;
}

/// Returns `Err(Domain)` when `theta` lies outside `bounds`.
pub(crate) fn check_inside(bounds: &Bounds, theta: &[f64]) -> Result<()> {
    if bounds.contains(theta) {
        Ok(())
    } else {
        Err(Error::Domain(format!("{theta:?} outside surrogate bounds")))
    }
}
