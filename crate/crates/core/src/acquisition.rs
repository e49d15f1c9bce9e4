//! Quantile-conditioned acquisition and the BOLFI outer loop.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dgp::{DgpConfig, LvDgpModel};
use crate::error::{Error, Result};
use crate::evidence::{EvidenceSet, Provenance};
use crate::gp::{gp_fit_map, GpConfig, GpModel};
use crate::math::{quantile_rank, Bounds, ParameterVector, RngStream};
use crate::optim::{minimize_multistart, numeric_gradient, LbfgsOptions};
use crate::simulators::SimulatorSpec;
use crate::surrogate::{CommonRandomNumbers, FitPhase, Moments, SurrogateKind, SurrogateModel};

/// Moments of the predictive samples at or below the lower empirical quantile.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantileMoments {
    pub mean: f64,
    pub variance: f64,
    pub count: usize,
}

/// Keeps samples `<=` the `q`-level lower empirical quantile, then returns
/// their mean and unbiased variance (0 when a single sample survives).
pub fn quantile_moments(samples: &[f64], q: f64) -> Result<QuantileMoments> {
    if samples.is_empty() {
        return Err(Error::InsufficientData("quantile moments of an empty sample".into()));
    }
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::Domain(format!("quantile level must lie in (0, 1], got {q}")));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let threshold = sorted[quantile_rank(sorted.len(), q) - 1];
    // ties at the threshold are kept, so filter rather than truncate
    let kept: Vec<f64> = samples.iter().copied().filter(|s| *s <= threshold).collect();
    let n = kept.len();
    let mean = kept.iter().sum::<f64>() / n as f64;
    let variance = if n > 1 {
        kept.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1) as f64
    } else {
        0.0
    };
    Ok(QuantileMoments { mean, variance, count: n })
}

/// Acquisition settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AcquisitionConfig {
    /// Quantile level for sample-based surrogates.
    pub quantile: f64,
    /// Confidence parameter of the exploration schedule.
    pub delta: f64,
    /// Fixed exploration weight instead of the schedule.
    pub eta2: Option<f64>,
    /// Optimiser restarts.
    pub restarts: usize,
    /// Optimiser memory (correction pairs).
    pub memory: usize,
    /// Objective evaluations per restart, gradient probes excluded.
    pub max_evaluations: usize,
    /// Finite-difference step as a fraction of each parameter range.
    pub gradient_step: f64,
    /// Standard deviation of batch jitter as a fraction of each parameter range.
    pub noise_fraction: f64,
    pub batch_size: usize,
    /// Random probes used when every restart fails.
    pub fallback_probes: usize,
}

impl Default for AcquisitionConfig {
    fn default() -> Self {
        Self {
            quantile: 0.3,
            delta: 0.1,
            eta2: None,
            restarts: 10,
            memory: 10,
            max_evaluations: 40,
            gradient_step: 1e-4,
            noise_fraction: 0.05,
            batch_size: 1,
            fallback_probes: 256,
        }
    }
}

impl AcquisitionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.quantile > 0.0 && self.quantile <= 1.0) {
            return Err(Error::Config(format!("acquisition.quantile must lie in (0, 1], got {}", self.quantile)));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::Config(format!("acquisition.delta must lie in (0, 1), got {}", self.delta)));
        }
        if let Some(e) = self.eta2 {
            if !(e >= 0.0) {
                return Err(Error::Config(format!("acquisition.eta2 must be >= 0, got {e}")));
            }
        }
        if self.restarts == 0 || self.memory == 0 || self.max_evaluations == 0 || self.batch_size == 0 || self.fallback_probes == 0 {
            return Err(Error::Config(
                "acquisition.restarts, memory, max_evaluations, batch_size and fallback_probes must be >= 1".into(),
            ));
        }
        if !(self.gradient_step > 0.0) || !(self.noise_fraction >= 0.0) {
            return Err(Error::Config("acquisition.gradient_step must be > 0 and noise_fraction >= 0".into()));
        }
        Ok(())
    }

    /// Exploration weight for the `t`-th acquisition (1-based).
    pub fn eta2_at(&self, t: usize, dim: usize) -> f64 {
        self.eta2.unwrap_or_else(|| exploration_schedule(t, dim, self.delta))
    }
}

/// `2 log(t^(d/2 + 2) pi^2 / (3 delta))`, floored at 0.
pub fn exploration_schedule(t: usize, dim: usize, delta: f64) -> f64 {
    let t = t.max(1) as f64;
    let pi2 = std::f64::consts::PI * std::f64::consts::PI;
    (2.0 * ((dim as f64 / 2.0 + 2.0) * t.ln() + (pi2 / (3.0 * delta)).ln())).max(0.0)
}

/// Lower confidence bound `mean - sqrt(eta2 * variance)` on the surrogate's
/// quantile-conditioned moments at `theta`.
pub fn quantile_lcb(
    surrogate: &dyn SurrogateModel,
    theta: &[f64],
    eta2: f64,
    quantile: f64,
    crn: &CommonRandomNumbers,
) -> Result<f64> {
    if !(eta2 >= 0.0) {
        return Err(Error::Domain(format!("exploration weight must be non-negative, got {eta2}")));
    }
    let m = surrogate.moments(theta, quantile, crn)?;
    Ok(m.mean - (eta2 * m.variance.max(0.0)).sqrt())
}

/// Outcome of a bounded surface minimisation.
#[derive(Clone, Debug, PartialEq)]
pub struct SurfaceMinimum {
    pub x: Vec<f64>,
    pub value: f64,
    /// True when every restart failed and random probing was used.
    pub fallback: bool,
}

/// Multi-start projected L-BFGS with central-difference gradients on a
/// deterministic surface. Starts are uniform in `bounds`.
pub fn minimize_surface(
    surface: &dyn Fn(&[f64]) -> Result<f64>,
    bounds: &Bounds,
    config: &AcquisitionConfig,
    rng: &mut RngStream,
) -> Result<SurfaceMinimum> {
    let steps: Vec<f64> = (0..bounds.dim()).map(|d| config.gradient_step * bounds.width(d)).collect();
    let mut value = |x: &[f64]| surface(x).ok().filter(|v| v.is_finite()).unwrap_or(f64::INFINITY);
    let options = LbfgsOptions {
        memory: config.memory,
        max_iterations: config.max_evaluations,
        max_evaluations: config.max_evaluations,
        gradient_tolerance: 1e-9,
        relative_tolerance: 1e-9,
    };
    let starts: Vec<Vec<f64>> = (0..config.restarts).map(|_| bounds.sample_uniform(rng)).collect();
    let mut objective = |x: &[f64]| {
        let f = value(x);
        let g = if f.is_finite() { numeric_gradient(&mut value, x, &steps, bounds) } else { vec![0.0; x.len()] };
        (f, g)
    };
    if let Some(best) = minimize_multistart(&mut objective, &starts, bounds, &options) {
        return Ok(SurfaceMinimum { x: best.x, value: best.value, fallback: false });
    }
    log::warn!("all {} acquisition restarts failed; probing {} random points", config.restarts, config.fallback_probes);
    let mut best: Option<(Vec<f64>, f64)> = None;
    for _ in 0..config.fallback_probes {
        let x = bounds.sample_uniform(rng);
        let v = value(&x);
        if best.as_ref().map_or(true, |b| v < b.1) {
            best = Some((x, v));
        }
    }
    let (x, value) = best.expect("at least one probe");
    if !value.is_finite() {
        return Err(Error::NumericalFailure("acquisition surface is not finite at any probe".into()));
    }
    Ok(SurfaceMinimum { x, value, fallback: true })
}

/// Next batch of parameters: the acquisition minimiser first, then copies
/// jittered by truncated Gaussian noise.
pub fn minimize_acquisition(
    surrogate: &dyn SurrogateModel,
    eta2: f64,
    config: &AcquisitionConfig,
    rng: &mut RngStream,
) -> Result<Vec<ParameterVector>> {
    let crn = surrogate.draw_crn(rng);
    let bounds = surrogate.bounds().clone();
    let surface = |x: &[f64]| quantile_lcb(surrogate, x, eta2, config.quantile, &crn);
    let best = minimize_surface(&surface, &bounds, config, rng)?;
    let mut batch = vec![ParameterVector::new(best.x.clone(), bounds.clone())?];
    for _ in 1..config.batch_size {
        let x = jitter_point(&best.x, &bounds, config.noise_fraction, rng);
        batch.push(ParameterVector::new(x, bounds.clone())?);
    }
    Ok(batch)
}

/// Gaussian jitter truncated to `bounds` by rejection (clipped after 100 tries).
fn jitter_point(x: &[f64], bounds: &Bounds, fraction: f64, rng: &mut RngStream) -> Vec<f64> {
    (0..x.len())
        .map(|d| {
            let sd = fraction * bounds.width(d);
            for _ in 0..100 {
                let v = x[d] + sd * rng.normal();
                if v >= bounds.lower[d] && v <= bounds.upper[d] {
                    return v;
                }
            }
            x[d].clamp(bounds.lower[d], bounds.upper[d])
        })
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SurrogateConfig {
    pub gp: GpConfig,
    pub dgp: DgpConfig,
}

/// Builds an untrained surrogate of the given kind over `bounds`.
pub fn make_surrogate(kind: SurrogateKind, bounds: &Bounds, config: &SurrogateConfig) -> Result<Box<dyn SurrogateModel>> {
    Ok(match kind {
        SurrogateKind::Gp => Box::new(LazyGp::new(bounds.clone(), config.gp.clone())),
        SurrogateKind::LvGp | SurrogateKind::Lv2Gp => {
            let dgp = DgpConfig { gp_layers: kind.gp_layers().unwrap_or(1), ..config.dgp.clone() };
            Box::new(LvDgpModel::new(bounds.clone(), dgp)?)
        }
    })
}

/// GP surrogate that is created on its first fit.
struct LazyGp {
    bounds: Bounds,
    config: GpConfig,
    model: Option<GpModel>,
}

impl LazyGp {
    fn new(bounds: Bounds, config: GpConfig) -> Self {
        Self { bounds, config, model: None }
    }

    fn model(&self) -> Result<&GpModel> {
        self.model.as_ref().ok_or_else(|| Error::State("GP has not been fitted".into()))
    }
}

impl SurrogateModel for LazyGp {
    fn kind(&self) -> SurrogateKind {
        SurrogateKind::Gp
    }

    fn bounds(&self) -> &Bounds {
        &self.bounds
    }

    fn fit(&mut self, evidence: &EvidenceSet, phase: FitPhase, rng: &mut RngStream) -> Result<()> {
        match &mut self.model {
            Some(m) => m.fit(evidence, phase, rng),
            None => {
                let (m, _) = gp_fit_map(evidence, &self.config, rng)?;
                self.model = Some(m);
                Ok(())
            }
        }
    }

    fn draw_crn(&self, _rng: &mut RngStream) -> CommonRandomNumbers {
        CommonRandomNumbers::default()
    }

    fn moments(&self, theta: &[f64], quantile: f64, crn: &CommonRandomNumbers) -> Result<Moments> {
        self.model()?.moments(theta, quantile, crn)
    }

    fn noise_variance(&self) -> f64 {
        self.model.as_ref().map_or(f64::NAN, |m| m.noise_variance())
    }

    fn latent_samples(&self, theta: &[f64], crn: &CommonRandomNumbers) -> Result<Vec<f64>> {
        self.model()?.latent_samples(theta, crn)
    }
}

/// One simulator invocation inside a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CallRecord {
    pub index: usize,
    pub theta: Vec<f64>,
    pub discrepancy: f64,
    pub provenance: Provenance,
    /// Seconds since the start of the run.
    pub wall_time: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BolfiConfig {
    pub acquisition: AcquisitionConfig,
    pub surrogate: SurrogateConfig,
}

pub struct BolfiOutcome {
    pub surrogate: Box<dyn SurrogateModel>,
    pub evidence: EvidenceSet,
    pub calls: Vec<CallRecord>,
    /// Simulator invocations, failures included.
    pub simulator_calls: usize,
    /// Acquisitions that fell back to random probing.
    pub fallbacks: usize,
}

/// Runs the optimisation loop: `n_init` prior draws, then acquisitions until
/// `s_total` simulator calls, then a final retrain.
pub fn bolfi_run(
    simulator: &SimulatorSpec,
    kind: SurrogateKind,
    n_init: usize,
    s_total: usize,
    config: &BolfiConfig,
    rng: &mut RngStream,
) -> Result<BolfiOutcome> {
    config.acquisition.validate()?;
    if n_init > s_total {
        return Err(Error::Config(format!("initial evidence {n_init} exceeds the budget {s_total}")));
    }
    if n_init < 2 {
        return Err(Error::Config("need at least 2 initial evidence points".into()));
    }
    let start = Instant::now();
    let mut sim_rng = rng.substream(1);
    let mut fit_rng = rng.substream(2);
    let mut acq_rng = rng.substream(3);
    let mut prior_rng = rng.substream(4);
    let mut surrogate = make_surrogate(kind, &simulator.bounds, &config.surrogate)?;
    let mut evidence = EvidenceSet::new(simulator.bounds.clone());
    let mut calls = Vec::with_capacity(s_total);
    let mut simulator_calls = 0usize;

    let mut record = |theta: Vec<f64>, provenance: Provenance, evidence: &mut EvidenceSet, resample: &mut dyn FnMut() -> Vec<f64>| -> Result<()> {
        let mut theta = theta;
        let mut attempt = 0;
        loop {
            simulator_calls += 1;
            match simulator.discrepancy(&theta, &mut sim_rng) {
                Ok(d) => {
                    calls.push(CallRecord {
                        index: calls.len(),
                        theta: theta.clone(),
                        discrepancy: d,
                        provenance,
                        wall_time: start.elapsed().as_secs_f64(),
                    });
                    return evidence.push(theta, d, provenance);
                }
                Err(e) if attempt == 0 => {
                    log::warn!("simulator failed at {theta:?}: {e}; retrying once");
                    attempt += 1;
                    theta = resample();
                }
                Err(e) => return Err(Error::Simulator(format!("{} failed twice: {e}", simulator.name))),
            }
        }
    };

    for _ in 0..n_init {
        let theta = simulator.sample_prior(&mut prior_rng);
        let mut again = || simulator.sample_prior(&mut prior_rng);
        record(theta, Provenance::Initial, &mut evidence, &mut again)?;
    }
    evidence.freeze_standardizers()?;
    let acquisitions = s_total - n_init;
    let mut fallbacks = 0;
    if acquisitions > 0 {
        surrogate.fit(&evidence, FitPhase::Initial, &mut fit_rng)?;
    }
    let mut t = 0;
    while evidence.len() < s_total {
        t += 1;
        let eta2 = config.acquisition.eta2_at(t, simulator.dim());
        let crn = surrogate.draw_crn(&mut acq_rng);
        let bounds = simulator.bounds.clone();
        let surface = |x: &[f64]| quantile_lcb(surrogate.as_ref(), x, eta2, config.acquisition.quantile, &crn);
        let best = minimize_surface(&surface, &bounds, &config.acquisition, &mut acq_rng)?;
        fallbacks += best.fallback as usize;
        let take = config.acquisition.batch_size.min(s_total - evidence.len());
        for b in 0..take {
            let theta = if b == 0 {
                best.x.clone()
            } else {
                jitter_point(&best.x, &bounds, config.acquisition.noise_fraction, &mut acq_rng)
            };
            let same = theta.clone();
            let mut again = || same.clone();
            record(theta, Provenance::Acquired, &mut evidence, &mut again)?;
        }
        if evidence.len() < s_total {
            surrogate.fit(&evidence, FitPhase::Refresh(t), &mut fit_rng)?;
        }
    }
    surrogate.fit(&evidence, FitPhase::Final, &mut fit_rng)?;
    Ok(BolfiOutcome { surrogate, evidence, calls, simulator_calls, fallbacks })
}

/// Writes call records as CSV with columns `index, theta_1..theta_d, discrepancy, provenance, wall_time`.
pub fn write_call_log<W: std::io::Write>(writer: W, calls: &[CallRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let dim = calls.first().map_or(0, |c| c.theta.len());
    let mut header = vec!["index".to_string()];
    header.extend((1..=dim).map(|d| format!("theta_{d}")));
    header.extend(["discrepancy", "provenance", "wall_time"].map(String::from));
    w.write_record(&header)?;
    for c in calls {
        let mut row = vec![c.index.to_string()];
        row.extend(c.theta.iter().map(|v| v.to_string()));
        row.push(c.discrepancy.to_string());
        row.push(c.provenance.to_string());
        row.push(format!("{:.6}", c.wall_time));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
