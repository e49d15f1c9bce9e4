//! Exact GP regression on standardized `(theta, discrepancy)` evidence.
//!
//! Kernel: ARD squared exponential plus a constant bias term, Gaussian noise.
//! Hyperparameters are MAP estimates under gamma priors, optimised in log
//! space with multi-start bounded L-BFGS.

use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evidence::EvidenceSet;
use crate::math::{cholesky_jittered, rbf_unchecked, Bounds, ParameterVector, RngStream, LN_2PI};
use crate::optim::{minimize, LbfgsOptions};
use crate::surrogate::{check_inside, CommonRandomNumbers, FitPhase, Moments, SurrogateKind, SurrogateModel};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GpHyperparameters {
    pub lengthscales: Vec<f64>,
    pub variance: f64,
    pub bias: f64,
    pub noise: f64,
}

impl GpHyperparameters {
    fn validate(&self) -> Result<()> {
        let all = self.lengthscales.iter().chain([&self.variance, &self.bias, &self.noise]);
        for v in all {
            if !(*v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidHyperparameter(format!("GP hyperparameters must be positive: {self:?}")));
            }
        }
        Ok(())
    }

    /// `[log l_1 .. log l_d, log variance, log bias, log noise]`.
    pub fn to_log(&self) -> Vec<f64> {
        self.lengthscales
            .iter()
            .chain([&self.variance, &self.bias, &self.noise])
            .map(|v| v.ln())
            .collect()
    }

    pub fn from_log(phi: &[f64]) -> Self {
        let d = phi.len() - 3;
        Self {
            lengthscales: phi[..d].iter().map(|v| v.exp()).collect(),
            variance: phi[d].exp(),
            bias: phi[d + 1].exp(),
            noise: phi[d + 2].exp(),
        }
    }
}

/// Gamma density with shape `k` and rate `r`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GammaPrior {
    pub shape: f64,
    pub rate: f64,
}

impl GammaPrior {
    /// Moment-matched prior with the given mean and coefficient of variation.
    pub fn from_mean_cv(mean: f64, cv: f64) -> Self {
        let shape = 1.0 / (cv * cv);
        Self { shape, rate: shape / mean }
    }

    pub fn mean(&self) -> f64 {
        self.shape / self.rate
    }

    pub fn ln_pdf(&self, x: f64) -> f64 {
        self.shape * self.rate.ln() - libm::lgamma(self.shape) + (self.shape - 1.0) * x.ln() - self.rate * x
    }

    /// Derivative of `ln_pdf(exp(phi))` with respect to `phi`.
    fn d_ln_pdf_dlog(&self, x: f64) -> f64 {
        (self.shape - 1.0) - self.rate * x
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GpPriors {
    pub lengthscales: Vec<GammaPrior>,
    pub variance: GammaPrior,
    pub bias: GammaPrior,
    pub noise: GammaPrior,
}

impl GpPriors {
    fn all(&self) -> Vec<GammaPrior> {
        let mut v = self.lengthscales.clone();
        v.extend([self.variance, self.bias, self.noise]);
        v
    }

    pub fn means(&self) -> GpHyperparameters {
        GpHyperparameters {
            lengthscales: self.lengthscales.iter().map(GammaPrior::mean).collect(),
            variance: self.variance.mean(),
            bias: self.bias.mean(),
            noise: self.noise.mean(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GpConfig {
    pub restarts: usize,
    /// Objective evaluations per restart.
    pub max_evaluations: usize,
    /// Expected lengthscale as a fraction of each standardized input range.
    pub lengthscale_fraction: f64,
    pub expected_variance: f64,
    pub expected_bias: f64,
    pub expected_noise: f64,
    /// Coefficient of variation of every gamma prior.
    pub prior_cv: f64,
    /// Full hyperparameter refit every this many acquisitions.
    pub refit_every: usize,
    /// Box on every log-hyperparameter during optimisation.
    pub log_bounds: (f64, f64),
}

impl Default for GpConfig {
    fn default() -> Self {
        Self {
            restarts: 5,
            max_evaluations: 50,
            lengthscale_fraction: 0.1,
            expected_variance: 1.0,
            expected_bias: 1.0,
            expected_noise: 0.1,
            prior_cv: 1.0,
            refit_every: 10,
            log_bounds: (-12.0, 8.0),
        }
    }
}

/// Result of one MAP fit.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FitReport {
    pub objective_at_init: f64,
    pub objective: f64,
    pub evaluations: usize,
}

#[derive(Clone, Debug)]
pub struct GpModel {
    bounds: Bounds,
    evidence: EvidenceSet,
    x: DMatrix<f64>,
    y: DVector<f64>,
    hyper: GpHyperparameters,
    priors: GpPriors,
    config: GpConfig,
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
}

/// Log marginal likelihood and its gradient with respect to log-hyperparameters.
pub fn log_marginal_likelihood(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    hyper: &GpHyperparameters,
    with_gradient: bool,
) -> Result<(f64, Vec<f64>)> {
    let n = x.nrows();
    let dim = x.ncols();
    let inv_sq: Vec<f64> = hyper.lengthscales.iter().map(|l| 1.0 / (l * l)).collect();
    let k_rbf = rbf_unchecked(x, x, &inv_sq, hyper.variance);
    let mut k = k_rbf.add_scalar(hyper.bias);
    for i in 0..n {
        k[(i, i)] += hyper.noise;
    }
    let (chol, _) = cholesky_jittered(&k)?;
    let alpha = chol.solve(y);
    let log_det: f64 = chol.l_dirty().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
    let value = -0.5 * y.dot(&alpha) - 0.5 * log_det - 0.5 * n as f64 * LN_2PI;
    if !with_gradient {
        return Ok((value, Vec::new()));
    }
    // W = alpha alpha^T - K^{-1}; dL/dphi = 0.5 * sum(W .* dK/dphi)
    let mut w = chol.inverse();
    w.neg_mut();
    w.ger(1.0, &alpha, &alpha, 1.0);
    let mut grad = vec![0.0; dim + 3];
    for j in 0..n {
        for i in 0..n {
            let wk = w[(i, j)] * k_rbf[(i, j)];
            grad[dim] += wk;
            for d in 0..dim {
                let diff = x[(i, d)] - x[(j, d)];
                grad[d] += wk * diff * diff * inv_sq[d];
            }
        }
    }
    grad[dim + 1] = hyper.bias * w.sum();
    grad[dim + 2] = hyper.noise * w.trace();
    for g in grad.iter_mut() {
        *g *= 0.5;
    }
    Ok((value, grad))
}

impl GpModel {
    /// Builds a model with fixed hyperparameters; evidence standardizers are frozen if needed.
    pub fn with_hyperparameters(evidence: &EvidenceSet, hyper: GpHyperparameters, config: GpConfig) -> Result<Self> {
        hyper.validate()?;
        let mut evidence = evidence.clone();
        if evidence.len() < 2 {
            return Err(Error::InsufficientData(format!("GP needs at least 2 evidence points, got {}", evidence.len())));
        }
        evidence.freeze_standardizers()?;
        let (x, y) = evidence.standardized()?;
        if hyper.lengthscales.len() != x.ncols() {
            return Err(Error::Shape(format!("{} lengthscales for {} inputs", hyper.lengthscales.len(), x.ncols())));
        }
        let priors = default_priors(&x, &config);
        let (chol, alpha) = factorize(&x, &y, &hyper)?;
        Ok(Self { bounds: evidence.bounds().clone(), evidence, x, y, hyper, priors, config, chol, alpha })
    }

    pub fn hyperparameters(&self) -> &GpHyperparameters {
        &self.hyper
    }

    pub fn priors(&self) -> &GpPriors {
        &self.priors
    }

    pub fn evidence(&self) -> &EvidenceSet {
        &self.evidence
    }

    /// Log posterior density of log-hyperparameters (up to a constant).
    pub fn map_objective(&self, hyper: &GpHyperparameters) -> Result<f64> {
        let (lml, _) = log_marginal_likelihood(&self.x, &self.y, hyper, false)?;
        Ok(lml + log_prior(&self.priors, hyper))
    }

    /// Replaces the evidence keeping hyperparameters.
    pub fn set_evidence(&mut self, evidence: &EvidenceSet) -> Result<()> {
        let mut evidence = evidence.clone();
        evidence.adopt_standardizers(&self.evidence);
        evidence.freeze_standardizers()?;
        let (x, y) = evidence.standardized()?;
        let (chol, alpha) = factorize(&x, &y, &self.hyper)?;
        self.evidence = evidence;
        self.x = x;
        self.y = y;
        self.chol = chol;
        self.alpha = alpha;
        Ok(())
    }

    /// MAP hyperparameters by multi-start bounded L-BFGS. Restart 0 starts
    /// from the current hyperparameters, the others from prior draws.
    pub fn fit_map(&mut self, rng: &mut RngStream) -> Result<FitReport> {
        let dim = self.x.ncols();
        let priors = self.priors.all();
        let lo = self.config.log_bounds.0;
        let hi = self.config.log_bounds.1;
        let box_ = Bounds::uniform(dim + 3, lo, hi)?;
        let (x, y) = (&self.x, &self.y);
        let mut objective = |phi: &[f64]| -> (f64, Vec<f64>) {
            let h = GpHyperparameters::from_log(phi);
            match log_marginal_likelihood(x, y, &h, true) {
                Ok((lml, mut g)) => {
                    let mut value = lml;
                    for (k, p) in priors.iter().enumerate() {
                        let v = phi[k].exp();
                        value += p.ln_pdf(v);
                        g[k] += p.d_ln_pdf_dlog(v);
                    }
                    (-value, g.into_iter().map(|v| -v).collect())
                }
                Err(_) => (f64::INFINITY, vec![0.0; phi.len()]),
            }
        };
        let options = LbfgsOptions {
            max_evaluations: self.config.max_evaluations,
            max_iterations: self.config.max_evaluations,
            ..Default::default()
        };
        let mut start = self.hyper.to_log();
        box_.clip(&mut start);
        let (init_value, _) = objective(&start);
        let mut best = minimize(&mut objective, &start, &box_, &options);
        let mut evaluations = best.evaluations + 1;
        for _ in 1..self.config.restarts.max(1) {
            let mut s: Vec<f64> = priors
                .iter()
                .map(|p| {
                    let g = Gamma::new(p.shape, 1.0 / p.rate).expect("valid gamma prior");
                    g.sample(rng).max(1e-6).ln()
                })
                .collect();
            box_.clip(&mut s);
            let r = minimize(&mut objective, &s, &box_, &options);
            evaluations += r.evaluations;
            if r.value < best.value {
                best = r;
            }
        }
        if !best.value.is_finite() {
            return Err(Error::NumericalFailure("GP MAP objective is not finite at any restart".into()));
        }
        let hyper = GpHyperparameters::from_log(&best.x);
        let (chol, alpha) = factorize(&self.x, &self.y, &hyper)?;
        self.hyper = hyper;
        self.chol = chol;
        self.alpha = alpha;
        Ok(FitReport { objective_at_init: -init_value, objective: -best.value, evaluations })
    }

    /// Posterior mean and latent variance at standardized input `z`, standardized units.
    pub fn predict_standardized(&self, z: &[f64]) -> (f64, f64) {
        let zm = DMatrix::from_row_slice(1, z.len(), z);
        let inv_sq: Vec<f64> = self.hyper.lengthscales.iter().map(|l| 1.0 / (l * l)).collect();
        let kx = rbf_unchecked(&self.x, &zm, &inv_sq, self.hyper.variance).add_scalar(self.hyper.bias);
        let kx = kx.column(0).into_owned();
        let mean = kx.dot(&self.alpha);
        let v = self.chol.l_dirty().solve_lower_triangular(&kx).expect("non-singular factor");
        let prior = self.hyper.variance + self.hyper.bias;
        (mean, (prior - v.norm_squared()).max(0.0))
    }

    /// Posterior mean and latent variance in raw discrepancy units.
    pub fn predict_raw(&self, theta: &[f64]) -> Result<(f64, f64)> {
        check_inside(&self.bounds, theta)?;
        let (xs, ys) = self.evidence.standardizers()?;
        let (m, v) = self.predict_standardized(&xs.transform_point(theta));
        let s = ys.scale[0];
        Ok((ys.inverse1(m), v * s * s))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let checkpoint = GpCheckpoint {
            format_version: 1,
            hyperparameters: self.hyper.clone(),
            priors: self.priors.clone(),
            config: self.config.clone(),
            evidence: self.evidence.clone(),
        };
        std::fs::write(path, serde_json::to_string_pretty(&checkpoint)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c: GpCheckpoint = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if c.format_version != 1 {
            return Err(Error::Config(format!("unsupported GP checkpoint version {}", c.format_version)));
        }
        let mut model = Self::with_hyperparameters(&c.evidence, c.hyperparameters, c.config)?;
        model.priors = c.priors;
        Ok(model)
    }
}

#[derive(Serialize, Deserialize)]
struct GpCheckpoint {
    format_version: u32,
    hyperparameters: GpHyperparameters,
    priors: GpPriors,
    config: GpConfig,
    evidence: EvidenceSet,
}

fn log_prior(priors: &GpPriors, h: &GpHyperparameters) -> f64 {
    priors.lengthscales.iter().zip(&h.lengthscales).map(|(p, v)| p.ln_pdf(*v)).sum::<f64>()
        + priors.variance.ln_pdf(h.variance)
        + priors.bias.ln_pdf(h.bias)
        + priors.noise.ln_pdf(h.noise)
}

/// Moment-matched gamma priors on standardized data.
fn default_priors(x: &DMatrix<f64>, config: &GpConfig) -> GpPriors {
    let lengthscales = x
        .column_iter()
        .map(|c| {
            let range = c.max() - c.min();
            GammaPrior::from_mean_cv((config.lengthscale_fraction * range).max(1e-3), config.prior_cv)
        })
        .collect();
    GpPriors {
        lengthscales,
        variance: GammaPrior::from_mean_cv(config.expected_variance, config.prior_cv),
        bias: GammaPrior::from_mean_cv(config.expected_bias, config.prior_cv),
        noise: GammaPrior::from_mean_cv(config.expected_noise, config.prior_cv),
    }
}

fn factorize(x: &DMatrix<f64>, y: &DVector<f64>, hyper: &GpHyperparameters) -> Result<(Cholesky<f64, Dyn>, DVector<f64>)> {
    let inv_sq: Vec<f64> = hyper.lengthscales.iter().map(|l| 1.0 / (l * l)).collect();
    let mut k = rbf_unchecked(x, x, &inv_sq, hyper.variance).add_scalar(hyper.bias);
    for i in 0..x.nrows() {
        k[(i, i)] += hyper.noise;
    }
    let (chol, _) = cholesky_jittered(&k)?;
    let alpha = chol.solve(y);
    Ok((chol, alpha))
}

/// MAP fit of a GP surrogate on `evidence`, starting from the prior means.
pub fn gp_fit_map(evidence: &EvidenceSet, config: &GpConfig, rng: &mut RngStream) -> Result<(GpModel, FitReport)> {
    let mut e = evidence.clone();
    if e.len() < 2 {
        return Err(Error::InsufficientData(format!("GP needs at least 2 evidence points, got {}", e.len())));
    }
    e.freeze_standardizers()?;
    let (x, _) = e.standardized()?;
    let init = default_priors(&x, config).means();
    let mut model = GpModel::with_hyperparameters(&e, init, config.clone())?;
    let report = model.fit_map(rng)?;
    Ok((model, report))
}

/// Posterior mean and latent variance at `theta`, raw units.
pub fn gp_predict(model: &GpModel, theta: &ParameterVector) -> Result<(f64, f64)> {
    model.predict_raw(theta.values())
}

/// Lower confidence bound `m(theta) - sqrt(eta2 * v(theta))`.
pub fn lcb_acquisition(model: &GpModel, theta: &ParameterVector, eta2: f64) -> Result<f64> {
    if !(eta2 >= 0.0) {
        return Err(Error::Domain(format!("exploration weight must be non-negative, got {eta2}")));
    }
    let (m, v) = gp_predict(model, theta)?;
    Ok(m - (eta2 * v).sqrt())
}

impl SurrogateModel for GpModel {
    fn kind(&self) -> SurrogateKind {
        SurrogateKind::Gp
    }

    fn bounds(&self) -> &Bounds {
        &self.bounds
    }

    fn fit(&mut self, evidence: &EvidenceSet, phase: FitPhase, rng: &mut RngStream) -> Result<()> {
        self.set_evidence(evidence)?;
        let refit = match phase {
            FitPhase::Initial | FitPhase::Final => true,
            FitPhase::Refresh(n) => self.config.refit_every > 0 && n % self.config.refit_every == 0,
        };
        if refit {
            self.fit_map(rng)?;
        }
        Ok(())
    }

    fn draw_crn(&self, _rng: &mut RngStream) -> CommonRandomNumbers {
        CommonRandomNumbers::default()
    }

    fn moments(&self, theta: &[f64], _quantile: f64, _crn: &CommonRandomNumbers) -> Result<Moments> {
        let (mean, variance) = self.predict_raw(theta)?;
        Ok(Moments { mean, variance })
    }

    fn noise_variance(&self) -> f64 {
        let s = self.evidence.standardizers().map(|(_, ys)| ys.scale[0]).unwrap_or(1.0);
        self.hyper.noise * s * s
    }

    fn latent_samples(&self, theta: &[f64], crn: &CommonRandomNumbers) -> Result<Vec<f64>> {
        let (m, v) = self.predict_raw(theta)?;
        Ok(crn.latent.iter().map(|z| m + v.sqrt() * z).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evidence::Provenance;

    fn evidence_1d(xs: &[f64], ys: &[f64]) -> EvidenceSet {
        EvidenceSet::from_pairs(
            Bounds::uniform(1, -100.0, 100.0).unwrap(),
            xs.iter().map(|v| vec![*v]).collect(),
            ys.to_vec(),
        )
        .unwrap()
    }

    fn pv(v: f64) -> ParameterVector {
        ParameterVector::new(vec![v], Bounds::uniform(1, -100.0, 100.0).unwrap()).unwrap()
    }

    fn hyper(l: f64, var: f64, bias: f64, noise: f64) -> GpHyperparameters {
        GpHyperparameters { lengthscales: vec![l], variance: var, bias, noise }
    }

    #[test]
    fn interpolates_training_targets_without_noise() {
        let e = evidence_1d(&[-1.0, 0.0, 0.7, 2.0], &[1.0, 0.2, 0.5, 3.0]);
        let m = GpModel::with_hyperparameters(&e, hyper(0.8, 1.0, 0.5, 1e-10), GpConfig::default()).unwrap();
        for (x, y) in [(-1.0, 1.0), (0.0, 0.2), (0.7, 0.5), (2.0, 3.0)] {
            let (mean, _) = gp_predict(&m, &pv(x)).unwrap();
            assert!((mean - y).abs() < 1e-6, "{x}: {mean} vs {y}");
        }
    }

    #[test]
    fn reverts_to_prior_far_from_data() {
        let e = evidence_1d(&[0.0, 0.1, 0.2], &[1.0, 2.0, 1.5]);
        let h = hyper(0.3, 1.3, 1e-10, 0.01);
        let m = GpModel::with_hyperparameters(&e, h.clone(), GpConfig::default()).unwrap();
        let (_, ys) = m.evidence().standardizers().unwrap();
        let (mean, var) = gp_predict(&m, &pv(90.0)).unwrap();
        assert!((mean - ys.mean[0]).abs() < 1e-9);
        assert!((var / ys.scale[0].powi(2) - h.variance).abs() < 1e-8);
    }

    #[test]
    fn matches_hand_cholesky_on_three_points() {
        let e = evidence_1d(&[-1.0, 0.5, 2.0], &[0.3, 1.1, 2.4]);
        let h = hyper(1.2, 0.9, 0.2, 0.05);
        let m = GpModel::with_hyperparameters(&e, h.clone(), GpConfig::default()).unwrap();
        let (xs, ys) = m.evidence().standardizers().unwrap();
        let z: Vec<f64> = [-1.0, 0.5, 2.0].iter().map(|v| xs.forward1(*v)).collect();
        let t: Vec<f64> = [0.3, 1.1, 2.4].iter().map(|v| ys.forward1(*v)).collect();
        let k = |a: f64, b: f64| h.variance * (-0.5 * (a - b).powi(2) / (h.lengthscales[0].powi(2))).exp() + h.bias;
        // explicit 3x3 Cholesky
        let mut a = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                a[i][j] = k(z[i], z[j]) + if i == j { h.noise + crate::math::JITTER } else { 0.0 };
            }
        }
        let l00 = a[0][0].sqrt();
        let l10 = a[1][0] / l00;
        let l20 = a[2][0] / l00;
        let l11 = (a[1][1] - l10 * l10).sqrt();
        let l21 = (a[2][1] - l20 * l10) / l11;
        let l22 = (a[2][2] - l20 * l20 - l21 * l21).sqrt();
        let fwd = |b: [f64; 3]| {
            let u0 = b[0] / l00;
            let u1 = (b[1] - l10 * u0) / l11;
            let u2 = (b[2] - l20 * u0 - l21 * u1) / l22;
            [u0, u1, u2]
        };
        let back = |u: [f64; 3]| {
            let a2 = u[2] / l22;
            let a1 = (u[1] - l21 * a2) / l11;
            let a0 = (u[0] - l10 * a1 - l20 * a2) / l00;
            [a0, a1, a2]
        };
        let alpha = back(fwd([t[0], t[1], t[2]]));
        for q in [-0.4, 0.9, 1.7] {
            let zq = xs.forward1(q);
            let kq = [k(z[0], zq), k(z[1], zq), k(z[2], zq)];
            let mean: f64 = (0..3).map(|i| kq[i] * alpha[i]).sum();
            let v = fwd(kq);
            let var = h.variance + h.bias - v.iter().map(|x| x * x).sum::<f64>();
            let (m_got, v_got) = m.predict_standardized(&[zq]);
            assert!((m_got - mean).abs() < 1e-10 && (v_got - var).abs() < 1e-10);
        }
    }

    #[test]
    fn lcb_examples() {
        let e = evidence_1d(&[-1.0, 0.0, 1.0], &[1.0, 0.0, 1.0]);
        let m = GpModel::with_hyperparameters(&e, hyper(1.0, 1.0, 0.1, 0.01), GpConfig::default()).unwrap();
        let (mean, var) = gp_predict(&m, &pv(0.3)).unwrap();
        assert!((lcb_acquisition(&m, &pv(0.3), 0.0).unwrap() - mean).abs() < 1e-15);
        assert!((lcb_acquisition(&m, &pv(0.3), 4.0).unwrap() - (mean - (4.0 * var).sqrt())).abs() < 1e-12);
        let mut prev = f64::INFINITY;
        for eta2 in [0.0, 0.5, 1.0, 4.0, 25.0] {
            let a = lcb_acquisition(&m, &pv(0.3), eta2).unwrap();
            assert!(a <= prev);
            prev = a;
        }
        assert!(matches!(lcb_acquisition(&m, &pv(0.3), -1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = RngStream::new(17, 0);
        for _ in 0..10 {
            let dim = 1 + rng.below(3);
            let x = DMatrix::from_fn(5, dim, |_, _| rng.normal());
            let y = DVector::from_fn(5, |_, _| rng.normal());
            let h = GpHyperparameters {
                lengthscales: (0..dim).map(|_| 0.5 + rng.uniform()).collect(),
                variance: 0.5 + rng.uniform(),
                bias: 0.1 + rng.uniform(),
                noise: 0.05 + 0.5 * rng.uniform(),
            };
            let (_, g) = log_marginal_likelihood(&x, &y, &h, true).unwrap();
            let phi = h.to_log();
            for k in 0..phi.len() {
                let (mut up, mut down) = (phi.clone(), phi.clone());
                up[k] += 1e-5;
                down[k] -= 1e-5;
                let fu = log_marginal_likelihood(&x, &y, &GpHyperparameters::from_log(&up), false).unwrap().0;
                let fd = log_marginal_likelihood(&x, &y, &GpHyperparameters::from_log(&down), false).unwrap().0;
                let fdg = (fu - fd) / 2e-5;
                let rel = (g[k] - fdg).abs() / fdg.abs().max(1e-6);
                assert!(rel <= 1e-4, "param {k}: {} vs {fdg}", g[k]);
            }
        }
    }

    #[test]
    fn variance_bounded_by_prior_and_shrinks_with_data() {
        let mut e = evidence_1d(&[-2.0, 0.0, 1.0, 3.0], &[1.0, 0.0, 0.5, 2.0]);
        let h = hyper(0.9, 1.1, 0.3, 0.02);
        let m = GpModel::with_hyperparameters(&e, h.clone(), GpConfig::default()).unwrap();
        let (_, ys) = m.evidence().standardizers().unwrap();
        let s2 = ys.scale[0].powi(2);
        for q in [-50.0, -2.0, 0.5, 2.2, 40.0] {
            let (_, v) = gp_predict(&m, &pv(q)).unwrap();
            assert!(v / s2 <= h.variance + h.bias + h.noise + 1e-8);
        }
        let (_, before) = gp_predict(&m, &pv(2.2)).unwrap();
        e.freeze_standardizers().unwrap();
        e.push(vec![2.2], 1.0, Provenance::Acquired).unwrap();
        let m2 = GpModel::with_hyperparameters(&e, h, GpConfig::default()).unwrap();
        let (_, after) = gp_predict(&m2, &pv(2.2)).unwrap();
        assert!(after <= before);
    }

    #[test]
    fn map_fit_ascends_and_is_deterministic() {
        let mut rng = RngStream::new(1, 0);
        let xs: Vec<f64> = (0..50).map(|i| -3.0 + 6.0 * i as f64 / 49.0).collect();
        let ys: Vec<f64> = xs.iter().map(|x| (x * 1.3).sin() + 2.0 + 0.05 * rng.normal()).collect();
        let e = evidence_1d(&xs, &ys);
        let (m1, r1) = gp_fit_map(&e, &GpConfig::default(), &mut RngStream::new(5, 0)).unwrap();
        let (m2, _) = gp_fit_map(&e, &GpConfig::default(), &mut RngStream::new(5, 0)).unwrap();
        assert!(r1.objective >= r1.objective_at_init);
        assert_eq!(m1.hyperparameters(), m2.hyperparameters());
        let l = m1.hyperparameters().lengthscales[0];
        assert!(l.is_finite() && l > 0.0);
        assert!((m1.map_objective(m1.hyperparameters()).unwrap() - r1.objective).abs() < 1e-8);
    }

    #[test]
    fn rejects_outside_points_and_small_evidence() {
        let e = evidence_1d(&[0.0, 1.0], &[0.0, 1.0]);
        let m = GpModel::with_hyperparameters(&e, hyper(1.0, 1.0, 1.0, 0.1), GpConfig::default()).unwrap();
        assert!(matches!(m.predict_raw(&[200.0]), Err(Error::Domain(_))));
        let one = evidence_1d(&[0.0], &[0.0]);
        assert!(matches!(gp_fit_map(&one, &GpConfig::default(), &mut RngStream::new(0, 0)), Err(Error::InsufficientData(_))));
        assert!(matches!(
            GpModel::with_hyperparameters(&e, hyper(-1.0, 1.0, 1.0, 0.1), GpConfig::default()),
            Err(Error::InvalidHyperparameter(_))
        ));
    }

    #[test]
    fn checkpoint_round_trip() {
        let e = evidence_1d(&[-1.0, 0.0, 2.0], &[0.1, 0.4, 0.9]);
        let m = GpModel::with_hyperparameters(&e, hyper(0.7, 1.2, 0.3, 0.04), GpConfig::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gp.json");
        m.save(&path).unwrap();
        let back = GpModel::load(&path).unwrap();
        assert_eq!(back.hyperparameters(), m.hyperparameters());
        assert_eq!(gp_predict(&back, &pv(0.5)).unwrap(), gp_predict(&m, &pv(0.5)).unwrap());
    }
}
