//! Shared numerical primitives: parameter boxes, kernels, standardisation,
//! quantiles, stable log-sum computations and seeded random streams.

use nalgebra::{Cholesky, DMatrix, Dyn};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Diagonal jitter added to every Gram matrix before factorisation.
pub const JITTER: f64 = 1e-8;
/// Largest jitter tried before a factorisation is declared failed.
pub const MAX_JITTER: f64 = 1e-4;
/// Floor applied to standard deviations of near-constant columns.
pub const SCALE_FLOOR: f64 = 1e-8;

/// Closed box `[lower_d, upper_d]` over parameter space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Bounds {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() || lower.is_empty() {
            return Err(Error::Shape(format!(
                "bounds need matching non-empty lower/upper, got {} and {}",
                lower.len(),
                upper.len()
            )));
        }
        for (d, (lo, hi)) in lower.iter().zip(&upper).enumerate() {
            if !lo.is_finite() || !hi.is_finite() || lo > hi {
                return Err(Error::Domain(format!("bad interval [{lo}, {hi}] in dimension {d}")));
            }
        }
        Ok(Self { lower, upper })
    }

    /// Same interval in every one of `dim` dimensions.
    pub fn uniform(dim: usize, lower: f64, upper: f64) -> Result<Self> {
        Self::new(vec![lower; dim], vec![upper; dim])
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn width(&self, d: usize) -> f64 {
        self.upper[d] - self.lower[d]
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x.iter().zip(self.lower.iter().zip(&self.upper)).all(|(v, (lo, hi))| v.is_finite() && *v >= *lo && *v <= *hi)
    }

    /// Projects `x` onto the box in place.
    pub fn clip(&self, x: &mut [f64]) {
        for (d, v) in x.iter_mut().enumerate() {
            *v = v.clamp(self.lower[d], self.upper[d]);
        }
    }

    pub fn sample_uniform(&self, rng: &mut RngStream) -> Vec<f64> {
        (0..self.dim()).map(|d| self.lower[d] + self.width(d) * rng.uniform()).collect()
    }
}

/// A point in simulator parameter space, checked against its box.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParameterVector {
    values: Vec<f64>,
    bounds: Bounds,
}

impl ParameterVector {
    pub fn new(values: Vec<f64>, bounds: Bounds) -> Result<Self> {
        if values.len() != bounds.dim() {
            return Err(Error::Shape(format!(
                "parameter has {} entries but bounds have {}",
                values.len(),
                bounds.dim()
            )));
        }
        if !bounds.contains(&values) {
            return Err(Error::Domain(format!("parameter {values:?} outside bounds {bounds:?}")));
        }
        Ok(Self { values, bounds })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn bounds(&self) -> &Bounds {
        &self.bounds
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
}

/// Stacks points as the rows of a matrix.
pub fn rows_to_matrix<P: AsRef<[f64]>>(points: &[P]) -> DMatrix<f64> {
    let n = points.len();
    let d = points.first().map_or(0, |p| p.as_ref().len());
    DMatrix::from_fn(n, d, |i, j| points[i].as_ref()[j])
}

/// Squared-exponential kernel `variance * exp(-0.5 * sum_d (x_d - x'_d)^2 / l_d^2)`
/// between the rows of `x` and the rows of `x2`.
pub fn rbf_kernel_matrix(x: &DMatrix<f64>, x2: &DMatrix<f64>, lengthscales: &[f64], variance: f64) -> Result<DMatrix<f64>> {
    if !(variance > 0.0) || !variance.is_finite() {
        return Err(Error::InvalidHyperparameter(format!("kernel variance must be positive, got {variance}")));
    }
    if let Some(l) = lengthscales.iter().find(|l| !(**l > 0.0) || !l.is_finite()) {
        return Err(Error::InvalidHyperparameter(format!("lengthscale must be positive, got {l}")));
    }
    if x.ncols() != lengthscales.len() || x2.ncols() != lengthscales.len() {
        return Err(Error::Shape(format!(
            "inputs have {} and {} columns but {} lengthscales were given",
            x.ncols(),
            x2.ncols(),
            lengthscales.len()
        )));
    }
    if x.iter().chain(x2.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Domain("kernel inputs must be finite".into()));
    }
    let inv_sq: Vec<f64> = lengthscales.iter().map(|l| 1.0 / (l * l)).collect();
    Ok(rbf_unchecked(x, x2, &inv_sq, variance))
}

/// Kernel evaluation without validation; `inv_sq[d] = 1 / l_d^2`.
pub(crate) fn rbf_unchecked(x: &DMatrix<f64>, x2: &DMatrix<f64>, inv_sq: &[f64], variance: f64) -> DMatrix<f64> {
    let (n, m, dim) = (x.nrows(), x2.nrows(), x.ncols());
    let mut k = DMatrix::zeros(n, m);
    for j in 0..m {
        for i in 0..n {
            let mut r2 = 0.0;
            for d in 0..dim {
                let diff = x[(i, d)] - x2[(j, d)];
                r2 += diff * diff * inv_sq[d];
            }
            k[(i, j)] = variance * (-0.5 * r2).exp();
        }
    }
    k
}

/// Cholesky factorisation with jitter escalation from `JITTER` up to `MAX_JITTER`.
/// Returns the factor and the jitter that made it succeed.
pub fn cholesky_jittered(k: &DMatrix<f64>) -> Result<(Cholesky<f64, Dyn>, f64)> {
    let mut jitter = JITTER;
    while jitter <= MAX_JITTER * (1.0 + 1e-9) {
        let mut kj = k.clone();
        for i in 0..kj.nrows() {
            kj[(i, i)] += jitter;
        }
        if let Some(ch) = Cholesky::new(kj) {
            if ch.l_dirty().diagonal().iter().all(|v| v.is_finite() && *v > 0.0) {
                return Ok((ch, jitter));
            }
        }
        jitter *= 10.0;
    }
    Err(Error::NumericalFailure(format!(
        "Gram matrix of size {} is not positive definite even with jitter {MAX_JITTER}",
        k.nrows()
    )))
}

/// Per-column affine standardisation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    /// Column means and population standard deviations (ddof = 0), floored at `SCALE_FLOOR`.
    pub fn fit(data: &DMatrix<f64>) -> Result<Self> {
        if data.nrows() < 2 || data.ncols() == 0 {
            return Err(Error::InsufficientData(format!(
                "standardizer needs at least 2 rows, got {}",
                data.nrows()
            )));
        }
        let n = data.nrows() as f64;
        let mut mean = Vec::with_capacity(data.ncols());
        let mut scale = Vec::with_capacity(data.ncols());
        for col in data.column_iter() {
            let mu = col.iter().sum::<f64>() / n;
            let var = col.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
            mean.push(mu);
            scale.push(var.sqrt().max(SCALE_FLOOR));
        }
        Ok(Self { mean, scale })
    }

    pub fn fit_column(values: &[f64]) -> Result<Self> {
        Self::fit(&DMatrix::from_column_slice(values.len(), 1, values))
    }

    pub fn identity(dim: usize) -> Self {
        Self { mean: vec![0.0; dim], scale: vec![1.0; dim] }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn transform_point(&self, x: &[f64]) -> Vec<f64> {
        x.iter().enumerate().map(|(d, v)| (v - self.mean[d]) / self.scale[d]).collect()
    }

    pub fn inverse_point(&self, z: &[f64]) -> Vec<f64> {
        z.iter().enumerate().map(|(d, v)| v * self.scale[d] + self.mean[d]).collect()
    }

    pub fn transform(&self, data: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(data.nrows(), data.ncols(), |i, j| (data[(i, j)] - self.mean[j]) / self.scale[j])
    }

    pub fn inverse(&self, data: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(data.nrows(), data.ncols(), |i, j| data[(i, j)] * self.scale[j] + self.mean[j])
    }

    /// Scalar helpers for one-column standardizers.
    pub fn forward1(&self, v: f64) -> f64 {
        (v - self.mean[0]) / self.scale[0]
    }

    pub fn inverse1(&self, z: f64) -> f64 {
        z * self.scale[0] + self.mean[0]
    }
}

/// Lower empirical quantile: the `ceil(q * N)`-th order statistic.
pub fn empirical_quantile(samples: &[f64], q: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::InsufficientData("quantile of an empty sample".into()));
    }
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::Domain(format!("quantile level must lie in (0, 1], got {q}")));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(sorted[quantile_rank(samples.len(), q) - 1])
}

/// One-based rank `ceil(q * n)`, kept inside `1..=n`.
pub(crate) fn quantile_rank(n: usize, q: f64) -> usize {
    ((q * n as f64).ceil() as usize).clamp(1, n)
}

/// `log(mean(exp(values)))` with a max shift.
pub fn log_mean_exp(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::InsufficientData("log_mean_exp of an empty list".into()));
    }
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Ok(f64::NEG_INFINITY);
    }
    let sum: f64 = values.iter().map(|v| (v - max).exp()).sum();
    Ok(max + (sum / values.len() as f64).ln())
}

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

pub fn normal_pdf(x: f64, mean: f64, variance: f64) -> f64 {
    let z = x - mean;
    (-0.5 * z * z / variance).exp() / (2.0 * std::f64::consts::PI * variance).sqrt()
}

pub fn normal_logpdf(x: f64, mean: f64, variance: f64) -> f64 {
    let z = x - mean;
    -0.5 * (LN_2PI + variance.ln() + z * z / variance)
}

/// Standard normal cdf through erfc, accurate in both tails.
pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Reproducible random stream identified by `(seed, stream id)`.
#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self { seed, stream, rng }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream
    }

    /// Independent child stream; depends only on `(seed, stream id, tag)`.
    pub fn substream(&self, tag: u64) -> RngStream {
        RngStream::new(self.seed, splitmix64(self.stream ^ splitmix64(tag.wrapping_add(0x9E37_79B9_7F4A_7C15))))
    }

    /// Uniform draw on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    pub fn below(&mut self, n: usize) -> usize {
        ((self.uniform() * n as f64) as usize).min(n.saturating_sub(1))
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.rng.fill_bytes(dest)
    }

    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> std::result::Result<(), rand::Error> {
        self.rng.try_fill_bytes(dest)
    }
}

pub(crate) fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Median of a non-empty list; averages the two middle values for even lengths.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
