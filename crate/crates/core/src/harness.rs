//! Seeded experiment repetitions, result tables and model comparison.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::acquisition::{bolfi_run, write_call_log, AcquisitionConfig, BolfiConfig, SurrogateConfig};
use crate::dgp::DgpConfig;
use crate::error::{Error, Result};
use crate::gp::GpConfig;
use crate::math::{median, RngStream};
use crate::posterior::{
    sha256_hex, sinkhorn_divergence, standardize_by_reference, surrogate_threshold, weighted_posterior_samples,
    PosteriorConfig, ReferenceCache, SinkhornConfig,
};
use crate::simulators::{by_name, SimulatorConfig, SimulatorSpec};
use crate::surrogate::SurrogateKind;

/// Rejection-ABC oracle settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReferenceConfig {
    pub budget: usize,
    pub keep: f64,
    pub seed: u64,
    /// Cache directory; `<output_dir>/reference` when absent.
    pub cache_dir: Option<PathBuf>,
}

impl Default for ReferenceConfig {
    fn default() -> Self {
        Self { budget: 1_000_000, keep: 0.001, seed: 0, cache_dir: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub simulator: String,
    pub surrogates: Vec<SurrogateKind>,
    pub n_init: usize,
    pub s_total: usize,
    pub repetitions: usize,
    pub base_seed: u64,
    pub workers: usize,
    pub output_dir: PathBuf,
    pub simulator_options: SimulatorConfig,
    pub acquisition: AcquisitionConfig,
    pub gp: GpConfig,
    pub dgp: DgpConfig,
    pub posterior: PosteriorConfig,
    pub sinkhorn: SinkhornConfig,
    pub reference: ReferenceConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            simulator: "te2".into(),
            surrogates: vec![SurrogateKind::Gp, SurrogateKind::Lv2Gp],
            n_init: 100,
            s_total: 200,
            repetitions: 20,
            base_seed: 0,
            workers: 1,
            output_dir: PathBuf::from("runs"),
            simulator_options: SimulatorConfig::default(),
            acquisition: AcquisitionConfig::default(),
            gp: GpConfig::default(),
            dgp: DgpConfig::default(),
            posterior: PosteriorConfig::default(),
            sinkhorn: SinkhornConfig::default(),
            reference: ReferenceConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    /// The configuration with every default filled in.
    pub fn effective_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if !crate::simulators::SIMULATOR_NAMES.contains(&self.simulator.as_str()) {
            return Err(Error::Config(format!(
                "unknown simulator '{}', expected one of {:?}",
                self.simulator,
                crate::simulators::SIMULATOR_NAMES
            )));
        }
        if self.surrogates.is_empty() {
            return Err(Error::Config("at least one surrogate is required".into()));
        }
        if self.repetitions == 0 {
            return Err(Error::Config("repetitions must be >= 1".into()));
        }
        if self.n_init < 2 || self.n_init > self.s_total {
            return Err(Error::Config(format!("need 2 <= n_init <= s_total, got {} and {}", self.n_init, self.s_total)));
        }
        if self.workers == 0 {
            return Err(Error::Config("workers must be >= 1".into()));
        }
        if self.reference.budget < 1000 || !(self.reference.keep > 0.0 && self.reference.keep <= 1.0) {
            return Err(Error::Config("reference.budget must be >= 1000 and keep in (0, 1]".into()));
        }
        self.acquisition.validate()?;
        self.dgp.validate()?;
        self.posterior.validate()?;
        self.sinkhorn.validate()
    }

    pub fn bolfi(&self) -> BolfiConfig {
        BolfiConfig {
            acquisition: self.acquisition.clone(),
            surrogate: SurrogateConfig { gp: self.gp.clone(), dgp: self.dgp.clone() },
        }
    }

    pub fn simulator_spec(&self) -> Result<SimulatorSpec> {
        by_name(&self.simulator, &self.simulator_options)
    }

    fn cache_dir(&self) -> PathBuf {
        self.reference.cache_dir.clone().unwrap_or_else(|| self.output_dir.join("reference"))
    }

    /// First line of every table, so desk numbers are never read as full-scale results.
    pub fn scale_header(&self) -> String {
        format!(
            "# desk scale: {} repetitions (full protocol 1000); reference {} draws keep {} (full protocol 1e8 draws keep 0.001)",
            self.repetitions, self.reference.budget, self.reference.keep
        )
    }
}

/// One finished (or failed) repetition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub seed: u64,
    pub simulator: String,
    pub surrogate: SurrogateKind,
    /// Sinkhorn divergence to the reference in reference-standardized units; NaN on failure.
    pub wasserstein: f64,
    pub ess: f64,
    pub epsilon: f64,
    pub simulator_calls: usize,
    pub acquisition_fallbacks: usize,
    pub sinkhorn_converged: bool,
    pub flat_weights: bool,
    /// Digest of the reference sample the run was scored against.
    pub reference: String,
    /// Empty on success.
    pub error: String,
}

impl ResultRecord {
    pub fn succeeded(&self) -> bool {
        self.error.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingRecord {
    pub seed: u64,
    pub surrogate: SurrogateKind,
    pub wall_time: f64,
}

/// Output of [`run_experiment`].
pub struct ExperimentOutput {
    pub records: Vec<ResultRecord>,
    pub timings: Vec<TimingRecord>,
    pub comparison: Option<Vec<ComparisonRow>>,
}

fn posterior_file(sim: &str, kind: SurrogateKind, seed: u64) -> String {
    format!("{sim}_{kind}_seed{seed}.csv")
}

/// Builds (or loads) the reference sample for `config`.
pub fn reference_for(config: &ExperimentConfig, simulator: &SimulatorSpec) -> Result<Vec<Vec<f64>>> {
    let cache = ReferenceCache::new(config.cache_dir())?;
    cache.load_or_build(simulator, config.reference.budget, config.reference.keep, config.reference.seed)
}

struct RunArtifacts {
    record: ResultRecord,
    timing: TimingRecord,
    posterior: Option<Vec<u8>>,
    calls: Option<Vec<u8>>,
}

fn failed(config: &ExperimentConfig, kind: SurrogateKind, seed: u64, digest: &str, calls: usize, e: &Error) -> ResultRecord {
    ResultRecord {
        seed,
        simulator: config.simulator.clone(),
        surrogate: kind,
        wasserstein: f64::NAN,
        ess: f64::NAN,
        epsilon: f64::NAN,
        simulator_calls: calls,
        acquisition_fallbacks: 0,
        sinkhorn_converged: false,
        flat_weights: false,
        reference: digest.to_string(),
        error: e.to_string().replace(['\n', '\r'], " "),
    }
}

fn run_one(
    config: &ExperimentConfig,
    simulator: &SimulatorSpec,
    reference: &[Vec<f64>],
    digest: &str,
    kind: SurrogateKind,
    seed: u64,
) -> RunArtifacts {
    let start = Instant::now();
    // every surrogate sees the same initial evidence for a given seed
    let mut rng = RngStream::new(seed, 0);
    let bolfi = config.bolfi();
    let outcome = match bolfi_run(simulator, kind, config.n_init, config.s_total, &bolfi, &mut rng) {
        Ok(o) => o,
        Err(e) => {
            log::error!("{} {kind} seed {seed}: {e}", config.simulator);
            return RunArtifacts {
                record: failed(config, kind, seed, digest, 0, &e),
                timing: TimingRecord { seed, surrogate: kind, wall_time: start.elapsed().as_secs_f64() },
                posterior: None,
                calls: None,
            };
        }
    };
    let quantile = if kind == SurrogateKind::Gp { 1.0 } else { config.acquisition.quantile };
    let evaluate = || -> Result<(ResultRecord, Vec<u8>)> {
        let surrogate = outcome.surrogate.as_ref();
        let epsilon = match config.posterior.epsilon {
            Some(e) => e,
            None => surrogate_threshold(
                surrogate,
                quantile,
                &config.acquisition,
                config.posterior.threshold_probes,
                &mut rng.substream(5),
            )?,
        };
        let prior = |r: &mut RngStream| simulator.sample_prior(r);
        let post =
            weighted_posterior_samples(surrogate, &prior, config.posterior.samples, epsilon, quantile, &mut rng.substream(6))?;
        let draws = post.resample(config.posterior.resample, &mut rng.substream(7));
        let z = standardize_by_reference(reference, &[&draws, reference])?;
        let s = sinkhorn_divergence(&z[0], &z[1], &config.sinkhorn)?;
        let mut buf = Vec::new();
        post.write_csv(&mut buf)?;
        Ok((
            ResultRecord {
                seed,
                simulator: config.simulator.clone(),
                surrogate: kind,
                wasserstein: s.value,
                ess: post.ess,
                epsilon,
                simulator_calls: outcome.simulator_calls,
                acquisition_fallbacks: outcome.fallbacks,
                sinkhorn_converged: s.converged,
                flat_weights: post.flat_fallback,
                reference: digest.to_string(),
                error: String::new(),
            },
            buf,
        ))
    };
    let mut calls = Vec::new();
    let calls = write_call_log(&mut calls, &outcome.calls).ok().map(|_| calls);
    let (record, posterior) = match evaluate() {
        Ok((r, p)) => (r, Some(p)),
        Err(e) => {
            log::error!("{} {kind} seed {seed}: {e}", config.simulator);
            (failed(config, kind, seed, digest, outcome.simulator_calls, &e), None)
        }
    };
    RunArtifacts { record, timing: TimingRecord { seed, surrogate: kind, wall_time: start.elapsed().as_secs_f64() }, posterior, calls }
}

/// Runs every (surrogate, repetition) pair with seeds `base_seed + index` on
/// a pool of `config.workers` threads and writes the result files.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutput> {
    config.validate()?;
    let simulator = config.simulator_spec()?;
    let out = &config.output_dir;
    std::fs::create_dir_all(out.join("posteriors"))?;
    std::fs::create_dir_all(out.join("calls"))?;
    std::fs::write(out.join("effective_config.toml"), config.effective_toml()?)?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {} workers: {e}", config.workers)))?;
    let (records, timings) = pool.install(|| -> Result<_> {
        let reference = reference_for(config, &simulator)?;
        let digest = reference_digest(&reference);
        let jobs: Vec<(SurrogateKind, u64)> = config
            .surrogates
            .iter()
            .flat_map(|k| (0..config.repetitions as u64).map(move |i| (*k, config.base_seed + i)))
            .collect();
        let mut artifacts: Vec<RunArtifacts> = jobs
            .par_iter()
            .map(|(kind, seed)| run_one(config, &simulator, &reference, &digest, *kind, *seed))
            .collect();
        artifacts.sort_by_key(|a| (a.record.surrogate, a.record.seed));
        let mut records = Vec::new();
        let mut timings = Vec::new();
        for a in artifacts {
            let name = posterior_file(&config.simulator, a.record.surrogate, a.record.seed);
            if let Some(p) = &a.posterior {
                std::fs::write(out.join("posteriors").join(&name), p)?;
            }
            if let Some(c) = &a.calls {
                std::fs::write(out.join("calls").join(&name), c)?;
            }
            records.push(a.record);
            timings.push(a.timing);
        }
        Ok((records, timings))
    })?;

    let header = config.scale_header();
    write_records(std::fs::File::create(out.join("runs.csv"))?, &header, &records)?;
    write_timings(std::fs::File::create(out.join("timings.csv"))?, &timings)?;
    let comparison = if config.surrogates.len() >= 2 {
        let rows = compare_models(&records)?;
        write_comparison(std::fs::File::create(out.join("comparison.csv"))?, &header, &rows)?;
        Some(rows)
    } else {
        None
    };
    Ok(ExperimentOutput { records, timings, comparison })
}

pub fn reference_digest(reference: &[Vec<f64>]) -> String {
    let text: String = reference.iter().map(|r| format!("{r:?}\n")).collect();
    sha256_hex(text.as_bytes())[..16].to_string()
}

/// Writes `header` (if non-empty) followed by the records as CSV.
pub fn write_records<W: std::io::Write>(mut writer: W, header: &str, records: &[ResultRecord]) -> Result<()> {
    if !header.is_empty() {
        writeln!(writer, "{header}")?;
    }
    let mut w = csv::Writer::from_writer(writer);
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Parses a runs table; `#` lines are skipped.
pub fn read_records<R: std::io::Read>(reader: R) -> Result<Vec<ResultRecord>> {
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(reader);
    r.deserialize().map(|rec| rec.map_err(Error::from)).collect()
}

pub fn write_timings<W: std::io::Write>(writer: W, timings: &[TimingRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for t in timings {
        w.serialize(t)?;
    }
    w.flush()?;
    Ok(())
}

/// One line of the comparison table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub simulator: String,
    pub surrogate: SurrogateKind,
    pub runs: usize,
    pub median_raw: f64,
    pub median_scaled: f64,
    pub mean_scaled: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    /// `(lo, hi)` with two decimals.
    pub interval: String,
}

const BOOTSTRAP_RESAMPLES: usize = 10_000;

/// Scales every run by the smallest per-surrogate median of raw distances and
/// reports per-surrogate medians with a bootstrap 95% interval of the mean.
/// Failed runs are left out.
pub fn compare_models(records: &[ResultRecord]) -> Result<Vec<ComparisonRow>> {
    let ok: Vec<&ResultRecord> = records.iter().filter(|r| r.succeeded() && r.wasserstein.is_finite()).collect();
    let Some(first) = ok.first() else {
        return Err(Error::InsufficientData("no successful runs to compare".into()));
    };
    if ok.iter().any(|r| r.simulator != first.simulator || r.reference != first.reference) {
        return Err(Error::Config("runs were scored against different simulators or references".into()));
    }
    let mut groups: BTreeMap<SurrogateKind, Vec<f64>> = BTreeMap::new();
    for r in &ok {
        groups.entry(r.surrogate).or_default().push(r.wasserstein);
    }
    let medians: BTreeMap<SurrogateKind, f64> = groups.iter().map(|(k, v)| (*k, median(v))).collect();
    let scaled_medians = crate::posterior::scaled_wasserstein(&medians)?;
    let floor = medians.values().copied().fold(f64::INFINITY, f64::min);
    let mut rng = RngStream::new(0, 0xb007);
    Ok(groups
        .iter()
        .map(|(kind, raw)| {
            let scaled: Vec<f64> = raw.iter().map(|v| v / floor).collect();
            let mean = scaled.iter().sum::<f64>() / scaled.len() as f64;
            let (lo, hi) = bootstrap_mean_ci(&scaled, BOOTSTRAP_RESAMPLES, &mut rng);
            ComparisonRow {
                simulator: first.simulator.clone(),
                surrogate: *kind,
                runs: raw.len(),
                median_raw: medians[kind],
                median_scaled: scaled_medians[kind],
                mean_scaled: mean,
                ci_low: lo,
                ci_high: hi,
                interval: format!("({lo:.2}, {hi:.2})"),
            }
        })
        .collect())
}

/// Percentile bootstrap 95% interval of the mean.
pub fn bootstrap_mean_ci(values: &[f64], resamples: usize, rng: &mut RngStream) -> (f64, f64) {
    let n = values.len();
    let mut means: Vec<f64> = (0..resamples)
        .map(|_| (0..n).map(|_| values[rng.below(n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let at = |q: f64| means[((q * resamples as f64) as usize).min(resamples - 1)];
    (at(0.025), at(0.975))
}

pub fn write_comparison<W: std::io::Write>(mut writer: W, header: &str, rows: &[ComparisonRow]) -> Result<()> {
    if !header.is_empty() {
        writeln!(writer, "{header}")?;
    }
    let mut w = csv::Writer::from_writer(writer);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config(dir: &Path) -> ExperimentConfig {
        let mut c = ExperimentConfig {
            simulator: "te1".into(),
            surrogates: vec![SurrogateKind::Gp, SurrogateKind::LvGp],
            n_init: 8,
            s_total: 11,
            repetitions: 3,
            base_seed: 40,
            output_dir: dir.to_path_buf(),
            ..Default::default()
        };
        c.gp.restarts = 2;
        c.gp.max_evaluations = 10;
        c.acquisition.restarts = 2;
        c.acquisition.max_evaluations = 5;
        c.dgp = DgpConfig { inducing: 6, initial_steps: 10, refresh_steps: 2, final_steps: 10, predict_samples: 10, ..Default::default() };
        c.posterior = PosteriorConfig { samples: 200, resample: 50, threshold_probes: 50, epsilon: None };
        c.reference = ReferenceConfig { budget: 2000, keep: 0.05, seed: 1, cache_dir: None };
        c
    }

    fn record(seed: u64, kind: SurrogateKind, w: f64) -> ResultRecord {
        ResultRecord {
            seed,
            simulator: "te2".into(),
            surrogate: kind,
            wasserstein: w,
            ess: 12.5,
            epsilon: 0.1,
            simulator_calls: 200,
            acquisition_fallbacks: 0,
            sinkhorn_converged: true,
            flat_weights: false,
            reference: "abc".into(),
            error: String::new(),
        }
    }

    #[test]
    fn config_defaults_and_validation() {
        let c = ExperimentConfig::from_toml("simulator = \"te3\"\nrepetitions = 2\n[dgp]\ninducing = 20\n").unwrap();
        assert_eq!(c.simulator, "te3");
        assert_eq!(c.dgp.inducing, 20);
        assert_eq!(c.s_total, 200);
        assert!(ExperimentConfig::from_toml("simulator = \"bdm\"").is_err());
        assert!(ExperimentConfig::from_toml("repetitions = 0").is_err());
        assert!(ExperimentConfig::from_toml("n_init = 300").is_err());
        assert!(ExperimentConfig::from_toml("typo = 1").is_err());
        assert!(ExperimentConfig::from_toml("surrogates = [\"mlp\"]").is_err());
        let echo = c.effective_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&echo).unwrap(), c);
    }

    #[test]
    fn records_round_trip_through_csv() {
        let mut recs = vec![record(3, SurrogateKind::Gp, 0.123_456_789_012_345_67), record(4, SurrogateKind::Lv2Gp, 1e-300)];
        let mut bad = record(5, SurrogateKind::LvGp, f64::NAN);
        bad.error = "simulator failed, twice".into();
        recs.push(bad);
        let mut buf = Vec::new();
        write_records(&mut buf, "# header, with comma", &recs).unwrap();
        let back = read_records(buf.as_slice()).unwrap();
        assert_eq!(back.len(), 3);
        assert_eq!(back[..2], recs[..2]);
        assert!(back[2].wasserstein.is_nan() && back[2].error == recs[2].error);
    }

    #[test]
    fn comparison_scales_by_smallest_median() {
        let mut recs = Vec::new();
        for (i, v) in [1.5, 2.0, 2.5].iter().enumerate() {
            recs.push(record(i as u64, SurrogateKind::Lv2Gp, *v));
            recs.push(record(i as u64, SurrogateKind::Gp, 2.0 * v));
        }
        let rows = compare_models(&recs).unwrap();
        let by: BTreeMap<_, _> = rows.iter().map(|r| (r.surrogate, r)).collect();
        assert_eq!(by[&SurrogateKind::Lv2Gp].median_scaled, 1.0);
        assert_eq!(by[&SurrogateKind::Gp].median_scaled, 2.0);
        assert!(by[&SurrogateKind::Gp].interval.starts_with('('));
    }

    #[test]
    fn identical_tables_straddle_one() {
        let mut recs = Vec::new();
        for i in 0..20u64 {
            let v = 1.0 + 0.1 * ((i as f64) - 9.5);
            recs.push(record(i, SurrogateKind::Gp, v));
            recs.push(record(i, SurrogateKind::Lv2Gp, v));
        }
        for row in compare_models(&recs).unwrap() {
            assert!(row.ci_low < 1.0 && row.ci_high > 1.0, "{row:?}");
            assert_eq!(row.median_scaled, 1.0);
        }
    }

    #[test]
    fn mismatched_references_are_rejected() {
        let mut other = record(1, SurrogateKind::Gp, 1.0);
        other.reference = "def".into();
        assert!(matches!(compare_models(&[record(0, SurrogateKind::Lv2Gp, 1.0), other]), Err(Error::Config(_))));
    }

    #[test]
    fn tiny_experiment_is_deterministic_and_pool_independent() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let c1 = tiny_config(d1.path());
        let mut c2 = tiny_config(d2.path());
        c2.workers = 3;
        let o1 = run_experiment(&c1).unwrap();
        let o2 = run_experiment(&c2).unwrap();
        assert_eq!(o1.records.len(), 6);
        assert!(o1.records.iter().all(|r| r.succeeded() && r.simulator_calls == 11), "{:?}", o1.records);
        let text = std::fs::read_to_string(d1.path().join("runs.csv")).unwrap();
        assert!(text.starts_with("# desk scale"));
        assert_eq!(text.lines().count(), 1 + 1 + 6);
        let files = ["runs.csv", "comparison.csv", "posteriors/te1_lv-gp_seed41.csv"];
        for f in files {
            assert_eq!(std::fs::read(d1.path().join(f)).unwrap(), std::fs::read(d2.path().join(f)).unwrap(), "{f}");
        }
        assert!(o1.comparison.is_some());
        assert_eq!(o1.records, o2.records);
        assert_eq!(read_records(text.as_bytes()).unwrap(), o1.records);
    }
}
