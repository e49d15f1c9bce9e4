//! Accumulated `(theta, discrepancy)` pairs and their standardisation.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{rows_to_matrix, Bounds, Standardizer};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Initial,
    Acquired,
}

impl std::fmt::Display for Provenance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Provenance::Initial => "initial",
            Provenance::Acquired => "acquired",
        })
    }
}

/// Evidence gathered by the optimisation loop.
///
/// Standardizers are fitted once by [`EvidenceSet::freeze_standardizers`]
/// and then reused as points are appended, so surrogate coordinates stay
/// fixed across refreshes.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvidenceSet {
    bounds: Bounds,
    params: Vec<Vec<f64>>,
    discrepancies: Vec<f64>,
    provenance: Vec<Provenance>,
    input_std: Option<Standardizer>,
    target_std: Option<Standardizer>,
}

impl EvidenceSet {
    pub fn new(bounds: Bounds) -> Self {
        Self {
            bounds,
            params: Vec::new(),
            discrepancies: Vec::new(),
            provenance: Vec::new(),
            input_std: None,
            target_std: None,
        }
    }

    /// Builds a set of initial points in one go.
    pub fn from_pairs(bounds: Bounds, params: Vec<Vec<f64>>, discrepancies: Vec<f64>) -> Result<Self> {
        if params.len() != discrepancies.len() {
            return Err(Error::Shape(format!("{} parameters but {} discrepancies", params.len(), discrepancies.len())));
        }
        let mut set = Self::new(bounds);
        for (p, d) in params.into_iter().zip(discrepancies) {
            set.push(p, d, Provenance::Initial)?;
        }
        Ok(set)
    }

    pub fn push(&mut self, theta: Vec<f64>, discrepancy: f64, provenance: Provenance) -> Result<()> {
        if !self.bounds.contains(&theta) {
            return Err(Error::Domain(format!("evidence point {theta:?} outside bounds")));
        }
        if !(discrepancy >= 0.0) || !discrepancy.is_finite() {
            return Err(Error::Domain(format!("discrepancy must be finite and non-negative, got {discrepancy}")));
        }
        self.params.push(theta);
        self.discrepancies.push(discrepancy);
        self.provenance.push(provenance);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.bounds.dim()
    }

    pub fn bounds(&self) -> &Bounds {
        &self.bounds
    }

    pub fn params(&self) -> &[Vec<f64>] {
        &self.params
    }

    pub fn discrepancies(&self) -> &[f64] {
        &self.discrepancies
    }

    pub fn provenance(&self) -> &[Provenance] {
        &self.provenance
    }

    pub fn count(&self, which: Provenance) -> usize {
        self.provenance.iter().filter(|p| **p == which).count()
    }

    /// Fits input and target standardizers on the current points, unless already frozen.
    pub fn freeze_standardizers(&mut self) -> Result<()> {
        if self.input_std.is_none() {
            self.input_std = Some(Standardizer::fit(&rows_to_matrix(&self.params))?);
            self.target_std = Some(Standardizer::fit_column(&self.discrepancies)?);
        }
        Ok(())
    }

    /// Copies frozen standardizers from `other` when this set has none.
    pub(crate) fn adopt_standardizers(&mut self, other: &EvidenceSet) {
        if self.input_std.is_none() {
            self.input_std = other.input_std.clone();
            self.target_std = other.target_std.clone();
        }
    }

    pub fn standardizers(&self) -> Result<(&Standardizer, &Standardizer)> {
        match (&self.input_std, &self.target_std) {
            (Some(x), Some(y)) => Ok((x, y)),
            _ => Err(Error::State("evidence standardizers have not been fitted".into())),
        }
    }

    /// Standardized inputs (rows) and targets.
    pub fn standardized(&self) -> Result<(DMatrix<f64>, DVector<f64>)> {
        let (xs, ys) = self.standardizers()?;
        let x = xs.transform(&rows_to_matrix(&self.params));
        let y = DVector::from_iterator(self.len(), self.discrepancies.iter().map(|d| ys.forward1(*d)));
        Ok((x, y))
    }
}
