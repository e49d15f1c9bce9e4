//! Posterior extraction from a trained surrogate, the rejection-ABC
//! reference, and the debiased Sinkhorn divergence used to compare them.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::acquisition::{minimize_surface, AcquisitionConfig};
use crate::error::{Error, Result};
use crate::math::{median, std_normal_cdf, Bounds, RngStream};
use crate::simulators::SimulatorSpec;
use crate::surrogate::SurrogateModel;

/// ABC kernel `1/eps` on `[0, eps)`, zero elsewhere.
pub fn uniform_kernel(delta: f64, eps: f64) -> Result<f64> {
    if !(delta >= 0.0) {
        return Err(Error::Domain(format!("discrepancy must be non-negative, got {delta}")));
    }
    if !(eps > 0.0) {
        return Err(Error::Domain(format!("tolerance must be positive, got {eps}")));
    }
    Ok(if delta < eps { 1.0 / eps } else { 0.0 })
}

/// `Phi((eps - mu_q) / sqrt(nu_q + sigma2))`.
pub fn approximate_likelihood(mu_q: f64, nu_q: f64, sigma2: f64, eps: f64) -> Result<f64> {
    let s2 = nu_q.max(0.0) + sigma2;
    if !(s2 > 0.0) {
        return Err(Error::NumericalFailure(format!("degenerate predictive variance {s2}")));
    }
    Ok(std_normal_cdf((eps - mu_q) / s2.sqrt()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PosteriorConfig {
    /// Prior draws to weight.
    pub samples: usize,
    /// Manual likelihood threshold; by default the minimum surrogate mean.
    pub epsilon: Option<f64>,
    /// Unweighted draws produced by systematic resampling for evaluation.
    pub resample: usize,
    /// Random probes when the threshold optimisation fails.
    pub threshold_probes: usize,
}

impl Default for PosteriorConfig {
    fn default() -> Self {
        Self { samples: 10_000, epsilon: None, resample: 1000, threshold_probes: 10_000 }
    }
}

impl PosteriorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 || self.resample == 0 || self.threshold_probes == 0 {
            return Err(Error::Config("posterior.samples, resample and threshold_probes must be >= 1".into()));
        }
        if let Some(e) = self.epsilon {
            if !e.is_finite() {
                return Err(Error::Config("posterior.epsilon must be finite".into()));
            }
        }
        Ok(())
    }
}

/// Minimum over `bounds` of the surrogate's (quantile-conditioned) mean on
/// one frozen set of random numbers.
pub fn surrogate_threshold(
    surrogate: &dyn SurrogateModel,
    quantile: f64,
    acquisition: &AcquisitionConfig,
    probes: usize,
    rng: &mut RngStream,
) -> Result<f64> {
    let crn = surrogate.draw_crn(rng);
    let surface = |x: &[f64]| surrogate.moments(x, quantile, &crn).map(|m| m.mean);
    let config = AcquisitionConfig { fallback_probes: probes, ..acquisition.clone() };
    let best = minimize_surface(&surface, surrogate.bounds(), &config, rng)?;
    if best.fallback {
        log::warn!("threshold optimisation failed; used the best of {probes} probes");
    }
    Ok(best.value)
}

/// Prior draws with normalised importance weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightedPosterior {
    pub samples: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
    pub ess: f64,
    /// Likelihood threshold used for the weights.
    pub epsilon: f64,
    /// True when every weight underflowed and flat weights were substituted.
    pub flat_fallback: bool,
}

impl WeightedPosterior {
    /// Normalises `raw` weights; all-zero weights become uniform.
    pub fn from_raw(samples: Vec<Vec<f64>>, raw: Vec<f64>, epsilon: f64) -> Result<Self> {
        if samples.is_empty() || samples.len() != raw.len() {
            return Err(Error::Shape(format!("{} samples with {} weights", samples.len(), raw.len())));
        }
        if raw.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::Domain("weights must be finite and non-negative".into()));
        }
        let total: f64 = raw.iter().sum();
        let (weights, flat) = if total > 0.0 {
            (raw.iter().map(|w| w / total).collect::<Vec<_>>(), false)
        } else {
            log::warn!("all posterior weights are zero; the surrogate is uninformative, using flat weights");
            (vec![1.0 / raw.len() as f64; raw.len()], true)
        };
        let ess = 1.0 / weights.iter().map(|w| w * w).sum::<f64>();
        Ok(Self { samples, weights, ess, epsilon, flat_fallback: flat })
    }

    pub fn dim(&self) -> usize {
        self.samples[0].len()
    }

    /// Systematic resampling to `n` unweighted draws.
    pub fn resample(&self, n: usize, rng: &mut RngStream) -> Vec<Vec<f64>> {
        let u0 = rng.uniform() / n as f64;
        let mut out = Vec::with_capacity(n);
        let mut cum = self.weights[0];
        let mut i = 0;
        for k in 0..n {
            let u = u0 + k as f64 / n as f64;
            while u > cum && i + 1 < self.weights.len() {
                i += 1;
                cum += self.weights[i];
            }
            out.push(self.samples[i].clone());
        }
        out
    }

    /// CSV with columns `theta_1..theta_d, weight`.
    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header: Vec<String> = (1..=self.dim()).map(|d| format!("theta_{d}")).collect();
        header.push("weight".into());
        w.write_record(&header)?;
        for (s, wt) in self.samples.iter().zip(&self.weights) {
            let mut row: Vec<String> = s.iter().map(|v| v.to_string()).collect();
            row.push(wt.to_string());
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Weights `samples` prior draws by the quantile likelihood approximation.
/// Sample-based surrogates use fresh predictive draws at every point.
pub fn weighted_posterior_samples(
    surrogate: &dyn SurrogateModel,
    prior: &dyn Fn(&mut RngStream) -> Vec<f64>,
    samples: usize,
    epsilon: f64,
    quantile: f64,
    rng: &mut RngStream,
) -> Result<WeightedPosterior> {
    if samples == 0 {
        return Err(Error::Config("need at least one posterior sample".into()));
    }
    let sigma2 = surrogate.noise_variance();
    let mut thetas = Vec::with_capacity(samples);
    let mut raw = Vec::with_capacity(samples);
    for _ in 0..samples {
        let theta = prior(rng);
        let crn = surrogate.draw_crn(rng);
        let m = surrogate.moments(&theta, quantile, &crn)?;
        raw.push(approximate_likelihood(m.mean, m.variance, sigma2, epsilon)?);
        thetas.push(theta);
    }
    WeightedPosterior::from_raw(thetas, raw, epsilon)
}

/// Rejection ABC: simulate `budget` prior draws and keep the
/// `round(budget * keep)` with the smallest discrepancy. Work is split into
/// fixed chunks with their own streams, so the result does not depend on
/// the number of threads.
pub fn rejection_abc_reference(simulator: &SimulatorSpec, budget: usize, keep: f64, seed: u64) -> Result<Vec<Vec<f64>>> {
    if budget < 1000 {
        return Err(Error::Config(format!("reference budget must be >= 1000, got {budget}")));
    }
    if !(keep > 0.0 && keep <= 1.0) {
        return Err(Error::Config(format!("keep fraction must lie in (0, 1], got {keep}")));
    }
    let n_keep = ((budget as f64 * keep).round() as usize).max(1);
    const CHUNK: usize = 1000;
    let chunks = budget.div_ceil(CHUNK);
    let per_chunk: Vec<Vec<(f64, usize, Vec<f64>)>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = RngStream::new(seed, 0xabc0_0000 + c as u64);
            let lo = c * CHUNK;
            let hi = ((c + 1) * CHUNK).min(budget);
            let mut out = Vec::with_capacity(hi - lo);
            for index in lo..hi {
                let theta = simulator.sample_prior(&mut rng);
                match simulator.discrepancy(&theta, &mut rng) {
                    Ok(d) => out.push((d, index, theta)),
                    Err(e) => log::warn!("reference draw {index} failed: {e}"),
                }
            }
            out.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            out.truncate(n_keep);
            out
        })
        .collect();
    let mut all: Vec<(f64, usize, Vec<f64>)> = per_chunk.into_iter().flatten().collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    all.truncate(n_keep);
    Ok(all.into_iter().map(|(_, _, t)| t).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub simulator: String,
    pub budget: usize,
    pub keep: f64,
    pub seed: u64,
    /// Digest of the observed summary, so a changed observation misses the cache.
    pub observation: String,
    pub file: String,
    pub samples: usize,
    pub sha256: String,
}

/// On-disk cache of reference posteriors with a JSON manifest.
pub struct ReferenceCache {
    dir: PathBuf,
}

impl ReferenceCache {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir)?;
        Ok(Self { dir })
    }

    fn manifest_path(&self) -> PathBuf {
        self.dir.join("manifest.json")
    }

    pub fn manifest(&self) -> Result<Vec<ManifestEntry>> {
        let p = self.manifest_path();
        if !p.exists() {
            return Ok(Vec::new());
        }
        Ok(serde_json::from_str(&std::fs::read_to_string(p)?)?)
    }

    /// Returns the cached reference or builds and stores it. A checksum
    /// mismatch triggers a rebuild.
    pub fn load_or_build(&self, simulator: &SimulatorSpec, budget: usize, keep: f64, seed: u64) -> Result<Vec<Vec<f64>>> {
        let observation = observation_digest(simulator);
        let file = format!("{}_{}_{}_{}_{}.csv", simulator.name, budget, keep, seed, &observation[..12]);
        let mut manifest = self.manifest()?;
        if let Some(entry) = manifest.iter().find(|e| e.file == file) {
            let path = self.dir.join(&entry.file);
            if let Ok(bytes) = std::fs::read(&path) {
                if sha256_hex(&bytes) == entry.sha256 {
                    return read_samples(&bytes);
                }
            }
            log::warn!("reference cache entry {file} is missing or corrupt; rebuilding");
        }
        let samples = rejection_abc_reference(simulator, budget, keep, seed)?;
        let bytes = write_samples(&samples)?;
        std::fs::write(self.dir.join(&file), &bytes)?;
        manifest.retain(|e| e.file != file);
        manifest.push(ManifestEntry {
            simulator: simulator.name.clone(),
            budget,
            keep,
            seed,
            observation,
            file,
            samples: samples.len(),
            sha256: sha256_hex(&bytes),
        });
        std::fs::write(self.manifest_path(), serde_json::to_string_pretty(&manifest)?)?;
        Ok(samples)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }
}

fn observation_digest(simulator: &SimulatorSpec) -> String {
    let text = format!("{:?}|{:?}|{:?}", simulator.theta_obs, simulator.s_obs, simulator.weights);
    sha256_hex(text.as_bytes())
}

pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write_samples(samples: &[Vec<f64>]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let dim = samples.first().map_or(0, Vec::len);
    w.write_record((1..=dim).map(|d| format!("theta_{d}")))?;
    for s in samples {
        w.write_record(s.iter().map(|v| v.to_string()))?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

fn read_samples(bytes: &[u8]) -> Result<Vec<Vec<f64>>> {
    let mut r = csv::Reader::from_reader(bytes);
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let row = rec
            .iter()
            .map(|v| v.parse::<f64>().map_err(|e| Error::Config(format!("bad reference value '{v}': {e}"))))
            .collect::<Result<Vec<_>>>()?;
        out.push(row);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SinkhornConfig {
    /// Absolute entropic regularisation; overrides `epsilon_fraction`.
    pub epsilon: Option<f64>,
    /// Regularisation as a fraction of the median pairwise squared distance.
    pub epsilon_fraction: f64,
    pub max_iterations: usize,
    /// Stop when the L1 marginal error drops below this.
    pub tolerance: f64,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self { epsilon: None, epsilon_fraction: 0.05, max_iterations: 5000, tolerance: 1e-6 }
    }
}

impl SinkhornConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(e) = self.epsilon {
            if !(e > 0.0) {
                return Err(Error::Config(format!("sinkhorn.epsilon must be > 0, got {e}")));
            }
        }
        if !(self.epsilon_fraction > 0.0) || self.max_iterations == 0 || !(self.tolerance > 0.0) {
            return Err(Error::Config("sinkhorn.epsilon_fraction, max_iterations and tolerance must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SinkhornResult {
    pub value: f64,
    pub epsilon: f64,
    pub converged: bool,
}

/// Entropic OT value `<a, f> + <b, g>` at the Sinkhorn fixed point.
struct OtSolve {
    value: f64,
    converged: bool,
}

fn sq_cost(x: &[Vec<f64>], y: &[Vec<f64>]) -> DMatrix<f64> {
    DMatrix::from_fn(x.len(), y.len(), |i, j| x[i].iter().zip(&y[j]).map(|(a, b)| (a - b) * (a - b)).sum())
}

/// `-eps * log sum_i exp(lw_i + (g_i - c_ij) / eps)` for every column `j`
/// (columns are contiguous in memory).
fn soft_min_cols(cost: &DMatrix<f64>, lw: &[f64], g: &[f64], eps: f64, out: &mut [f64]) {
    let n = cost.nrows();
    let mut buf = vec![0.0; n];
    for (j, col) in cost.column_iter().enumerate() {
        let col = col.as_slice();
        let mut mx = f64::NEG_INFINITY;
        for i in 0..n {
            buf[i] = lw[i] + (g[i] - col[i]) / eps;
            mx = mx.max(buf[i]);
        }
        let s: f64 = buf.iter().map(|v| (v - mx).exp()).sum();
        out[j] = -eps * (mx + s.ln());
    }
}

/// Entropic OT between weights `a` and `b` under `cost`. When `symmetric`
/// (`a == b` with a symmetric cost) the averaged fixed-point update is used.
fn entropic_ot(a: &[f64], b: &[f64], cost: &DMatrix<f64>, eps: f64, symmetric: bool, config: &SinkhornConfig) -> OtSolve {
    if cost.max() / eps < 500.0 {
        if let Some(solve) = scaling_ot(a, b, cost, eps, symmetric, config) {
            return solve;
        }
    }
    log_ot(a, b, cost, eps, symmetric, config)
}

/// Log-domain potentials with eps-scaling: anneals from the cost scale down
/// to `eps`, then iterates in the scaling form with the potentials absorbed
/// into the kernel so that nothing underflows.
fn log_ot(a: &[f64], b: &[f64], cost: &DMatrix<f64>, eps: f64, symmetric: bool, config: &SinkhornConfig) -> OtSolve {
    let (n, m) = cost.shape();
    let la: Vec<f64> = a.iter().map(|x| x.ln()).collect();
    let lb: Vec<f64> = b.iter().map(|x| x.ln()).collect();
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; m];
    let mut tf = vec![0.0; n];
    let ct = cost.transpose();
    let log_step = |f: &mut Vec<f64>, g: &mut Vec<f64>, tf: &mut Vec<f64>, e: f64| {
        if symmetric {
            soft_min_cols(cost, &la, f, e, tf);
            for i in 0..n {
                f[i] = 0.5 * (f[i] + tf[i]);
            }
            g.copy_from_slice(f);
        } else {
            soft_min_cols(&ct, &lb, g, e, f);
            soft_min_cols(cost, &la, f, e, g);
        }
    };
    let mut stage_eps = cost.max();
    while stage_eps > eps {
        for _ in 0..10 {
            log_step(&mut f, &mut g, &mut tf, stage_eps);
        }
        stage_eps *= 0.5;
    }
    log_step(&mut f, &mut g, &mut tf, eps);

    let av = DVector::from_column_slice(a);
    let bv = DVector::from_column_slice(b);
    let absorbed = |f: &[f64], g: &[f64]| {
        let k = DMatrix::from_fn(n, m, |i, j| ((f[i] + g[j] - cost[(i, j)]) / eps).exp());
        let kt = k.transpose();
        (k, kt)
    };
    let (mut k, mut kt) = absorbed(&f, &g);
    let mut u = DVector::from_element(n, 1.0);
    let mut v = DVector::from_element(m, 1.0);
    let mut converged = false;
    for it in 0..config.max_iterations {
        if symmetric {
            let ku = &k * u.component_mul(&av);
            u = u.zip_map(&ku, |x, y| (x / y).sqrt());
            v.copy_from(&u);
        } else {
            u = (&k * v.component_mul(&bv)).map(|x| 1.0 / x);
            v = (&kt * u.component_mul(&av)).map(|x| 1.0 / x);
        }
        let finite = u.iter().chain(v.iter()).all(|x| x.is_finite() && *x > 0.0);
        if !finite {
            // restart from the last absorbed potentials with an exact log-domain step
            log_step(&mut f, &mut g, &mut tf, eps);
            (k, kt) = absorbed(&f, &g);
            u.fill(1.0);
            v.fill(1.0);
            continue;
        }
        if u.iter().chain(v.iter()).any(|x| x.ln().abs() > 30.0) {
            for i in 0..n {
                f[i] += eps * u[i].ln();
            }
            for j in 0..m {
                g[j] += eps * v[j].ln();
            }
            (k, kt) = absorbed(&f, &g);
            u.fill(1.0);
            v.fill(1.0);
        }
        if it % 5 == 4 || it + 1 == config.max_iterations {
            let row = (&k * v.component_mul(&bv)).component_mul(&u).component_mul(&av);
            if (row - &av).abs().sum() < config.tolerance {
                converged = true;
                break;
            }
        }
    }
    for i in 0..n {
        f[i] += eps * u[i].ln();
    }
    for j in 0..m {
        g[j] += eps * v[j].ln();
    }
    let value = a.iter().zip(&f).map(|(x, y)| x * y).sum::<f64>() + b.iter().zip(&g).map(|(x, y)| x * y).sum::<f64>();
    OtSolve { value, converged }
}

/// Scaling form `P = diag(u) K diag(v)`; `None` on underflow or overflow.
fn scaling_ot(a: &[f64], b: &[f64], cost: &DMatrix<f64>, eps: f64, symmetric: bool, config: &SinkhornConfig) -> Option<OtSolve> {
    let k = cost.map(|c| (-c / eps).exp());
    let av = DVector::from_column_slice(a);
    let bv = DVector::from_column_slice(b);
    let mut u = DVector::from_element(a.len(), 1.0);
    let mut v = DVector::from_element(b.len(), 1.0);
    let kt = if symmetric { None } else { Some(k.transpose()) };
    let mut converged = false;
    for it in 0..config.max_iterations {
        if symmetric {
            let ku = &k * &u;
            u = u.zip_map(&av.component_div(&ku), |x, y| (x * y).sqrt());
            v.copy_from(&u);
        } else {
            u = av.component_div(&(&k * &v));
            v = bv.component_div(&(kt.as_ref().unwrap() * &u));
        }
        if it % 5 == 4 || it + 1 == config.max_iterations {
            let err: f64 = (u.component_mul(&(&k * &v)) - &av).abs().sum();
            if !err.is_finite() {
                return None;
            }
            if err < config.tolerance {
                converged = true;
                break;
            }
        }
    }
    if !u.iter().chain(v.iter()).all(|x| x.is_finite() && *x > 0.0) {
        return None;
    }
    let f: f64 = (0..a.len()).map(|i| a[i] * eps * (u[i] / a[i]).ln()).sum();
    let g: f64 = (0..b.len()).map(|j| b[j] * eps * (v[j] / b[j]).ln()).sum();
    Some(OtSolve { value: f + g, converged })
}

fn uniform_weights(n: usize) -> Vec<f64> {
    vec![1.0 / n as f64; n]
}

/// Debiased entropic OT divergence between two uniformly weighted sample sets.
pub fn sinkhorn_divergence(x: &[Vec<f64>], y: &[Vec<f64>], config: &SinkhornConfig) -> Result<SinkhornResult> {
    sinkhorn_divergence_weighted(x, &uniform_weights(x.len()), y, &uniform_weights(y.len()), config)
}

/// `OT(a, b) - OT(a, a) / 2 - OT(b, b) / 2` with squared Euclidean cost.
pub fn sinkhorn_divergence_weighted(
    x: &[Vec<f64>],
    a: &[f64],
    y: &[Vec<f64>],
    b: &[f64],
    config: &SinkhornConfig,
) -> Result<SinkhornResult> {
    config.validate()?;
    if x.is_empty() || y.is_empty() {
        return Err(Error::InsufficientData("Sinkhorn divergence needs non-empty sample sets".into()));
    }
    let dim = x[0].len();
    if x.iter().chain(y).any(|p| p.len() != dim) {
        return Err(Error::Shape("sample sets have different dimensions".into()));
    }
    if a.len() != x.len() || b.len() != y.len() {
        return Err(Error::Shape("weights do not match the sample sets".into()));
    }
    let cxy = sq_cost(x, y);
    let eps = match config.epsilon {
        Some(e) => e,
        None => {
            let mut all: Vec<Vec<f64>> = x.to_vec();
            all.extend_from_slice(y);
            let med = median_pairwise_sq(&all);
            (config.epsilon_fraction * med).max(1e-12)
        }
    };
    let ab = entropic_ot(a, b, &cxy, eps, false, config);
    let aa = entropic_ot(a, a, &sq_cost(x, x), eps, true, config);
    let bb = entropic_ot(b, b, &sq_cost(y, y), eps, true, config);
    let converged = ab.converged && aa.converged && bb.converged;
    if !converged {
        log::warn!("Sinkhorn did not reach tolerance {} within {} iterations", config.tolerance, config.max_iterations);
    }
    Ok(SinkhornResult { value: ab.value - 0.5 * aa.value - 0.5 * bb.value, epsilon: eps, converged })
}

/// Median of squared distances over distinct pairs (strided for large sets).
fn median_pairwise_sq(points: &[Vec<f64>]) -> f64 {
    let n = points.len();
    if n < 2 {
        return 1.0;
    }
    let stride = (n / 400).max(1);
    let idx: Vec<usize> = (0..n).step_by(stride).collect();
    let mut d = Vec::with_capacity(idx.len() * idx.len() / 2);
    for (p, &i) in idx.iter().enumerate() {
        for &j in &idx[p + 1..] {
            d.push(points[i].iter().zip(&points[j]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>());
        }
    }
    let m = median(&d);
    if m > 0.0 {
        m
    } else {
        1.0
    }
}

/// Divides every value by the smallest one.
pub fn scaled_wasserstein<K: Ord + Clone>(distances: &BTreeMap<K, f64>) -> Result<BTreeMap<K, f64>> {
    let min = distances.values().copied().fold(f64::INFINITY, f64::min);
    if distances.is_empty() {
        return Err(Error::InsufficientData("no distances to scale".into()));
    }
    if !(min > 0.0) {
        return Err(Error::Domain(format!("distances must be positive, smallest is {min}")));
    }
    Ok(distances.iter().map(|(k, v)| (k.clone(), v / min)).collect())
}

/// Divides each coordinate by the per-dimension standard deviation of `reference`.
pub fn standardize_by_reference(reference: &[Vec<f64>], sets: &[&[Vec<f64>]]) -> Result<Vec<Vec<Vec<f64>>>> {
    if reference.len() < 2 {
        return Err(Error::InsufficientData("reference needs at least 2 samples".into()));
    }
    let dim = reference[0].len();
    let n = reference.len() as f64;
    let scale: Vec<f64> = (0..dim)
        .map(|d| {
            let m = reference.iter().map(|r| r[d]).sum::<f64>() / n;
            let v = reference.iter().map(|r| (r[d] - m).powi(2)).sum::<f64>() / n;
            v.sqrt().max(crate::math::SCALE_FLOOR)
        })
        .collect();
    Ok(sets
        .iter()
        .map(|s| s.iter().map(|p| p.iter().zip(&scale).map(|(v, sc)| v / sc).collect()).collect())
        .collect())
}

/// Prior sampler over a box.
pub fn uniform_prior(bounds: &Bounds) -> impl Fn(&mut RngStream) -> Vec<f64> + '_ {
    move |rng| bounds.sample_uniform(rng)
}
