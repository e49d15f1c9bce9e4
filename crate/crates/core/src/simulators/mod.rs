//! Stochastic simulators, their priors and the summary discrepancy.

mod gridworld;
mod toy;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{Bounds, RngStream};

pub use gridworld::{Action, Cell, GridWorld, NavigationWorld, QAgent, QLearningConfig, TrajectorySummary, DEFAULT_MAP};
pub use toy::{Te1, Te2, Te3, TOY_BOUNDS};

/// Forward model mapping a parameter to a summary vector.
pub trait SummaryModel: Send + Sync {
    fn simulate(&self, theta: &[f64], rng: &mut RngStream) -> Result<Vec<f64>>;
}

/// Per-dimension prior descriptor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PriorDim {
    Uniform { lower: f64, upper: f64 },
}

/// A simulator together with its prior, ground truth and observed summary.
#[derive(Clone)]
pub struct SimulatorSpec {
    pub name: String,
    pub bounds: Bounds,
    pub prior: Vec<PriorDim>,
    pub theta_obs: Vec<f64>,
    pub s_obs: Vec<f64>,
    pub weights: Vec<f64>,
    model: Arc<dyn SummaryModel>,
}

impl std::fmt::Debug for SimulatorSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SimulatorSpec")
            .field("name", &self.name)
            .field("bounds", &self.bounds)
            .field("theta_obs", &self.theta_obs)
            .field("s_obs", &self.s_obs)
            .field("weights", &self.weights)
            .finish()
    }
}

impl SimulatorSpec {
    /// Builds a spec with a uniform prior over `bounds`, simulating the observed
    /// summary at `theta_obs` with `obs_rng`.
    pub fn with_observation(
        name: impl Into<String>,
        bounds: Bounds,
        theta_obs: Vec<f64>,
        weights: Option<Vec<f64>>,
        model: Arc<dyn SummaryModel>,
        obs_rng: &mut RngStream,
    ) -> Result<Self> {
        if !bounds.contains(&theta_obs) {
            return Err(Error::Domain(format!("ground truth {theta_obs:?} outside bounds")));
        }
        let s_obs = model.simulate(&theta_obs, obs_rng)?;
        Self::new(name, bounds, theta_obs, s_obs, weights, model)
    }

    pub fn new(
        name: impl Into<String>,
        bounds: Bounds,
        theta_obs: Vec<f64>,
        s_obs: Vec<f64>,
        weights: Option<Vec<f64>>,
        model: Arc<dyn SummaryModel>,
    ) -> Result<Self> {
        if !bounds.contains(&theta_obs) {
            return Err(Error::Domain(format!("ground truth {theta_obs:?} outside bounds")));
        }
        let weights = weights.unwrap_or_else(|| vec![1.0; s_obs.len()]);
        if weights.len() != s_obs.len() {
            return Err(Error::Shape(format!(
                "{} discrepancy weights for a {}-dimensional summary",
                weights.len(),
                s_obs.len()
            )));
        }
        if weights.iter().any(|w| !(*w > 0.0)) {
            return Err(Error::Domain("discrepancy weights must be positive".into()));
        }
        let prior = (0..bounds.dim())
            .map(|d| PriorDim::Uniform { lower: bounds.lower[d], upper: bounds.upper[d] })
            .collect();
        Ok(Self { name: name.into(), bounds, prior, theta_obs, s_obs, weights, model })
    }

    pub fn dim(&self) -> usize {
        self.bounds.dim()
    }

    pub fn summary_dim(&self) -> usize {
        self.s_obs.len()
    }

    pub fn sample_prior(&self, rng: &mut RngStream) -> Vec<f64> {
        self.prior
            .iter()
            .map(|p| match p {
                PriorDim::Uniform { lower, upper } => lower + (upper - lower) * rng.uniform(),
            })
            .collect()
    }

    pub fn prior_density(&self, theta: &[f64]) -> f64 {
        self.prior
            .iter()
            .zip(theta)
            .map(|(p, v)| match p {
                PriorDim::Uniform { lower, upper } if *v >= *lower && *v <= *upper => 1.0 / (upper - lower),
                PriorDim::Uniform { .. } => 0.0,
            })
            .product()
    }

    pub fn simulate(&self, theta: &[f64], rng: &mut RngStream) -> Result<Vec<f64>> {
        if !self.bounds.contains(theta) {
            return Err(Error::Domain(format!("{}: parameter {theta:?} outside prior support", self.name)));
        }
        self.model.simulate(theta, rng)
    }

    /// Simulates at `theta` and returns the weighted distance to the observation.
    pub fn discrepancy(&self, theta: &[f64], rng: &mut RngStream) -> Result<f64> {
        let s = self.simulate(theta, rng)?;
        euclidean_discrepancy(&self.s_obs, &s, &self.weights)
    }
}

/// `sqrt(sum_i w_i (a_i - b_i)^2)`.
pub fn euclidean_discrepancy(s_obs: &[f64], s_theta: &[f64], weights: &[f64]) -> Result<f64> {
    if s_obs.len() != s_theta.len() || s_obs.len() != weights.len() {
        return Err(Error::Shape(format!(
            "summary lengths {} and {} with {} weights",
            s_obs.len(),
            s_theta.len(),
            weights.len()
        )));
    }
    Ok(s_obs
        .iter()
        .zip(s_theta)
        .zip(weights)
        .map(|((a, b), w)| w * (a - b) * (a - b))
        .sum::<f64>()
        .sqrt())
}

/// Settings for the built-in simulators.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulatorConfig {
    /// Seed of the stream that produces the observed summary.
    pub observation_seed: u64,
    /// Navigation world map file; the bundled map when absent.
    pub nw_map: Option<std::path::PathBuf>,
    pub nw_slip: f64,
    pub nw_episodes: usize,
    pub nw_trajectories: usize,
    pub nw_step_cap: usize,
    pub nw_training_seed: u64,
    pub q_learning: QLearningConfig,
}

impl Default for SimulatorConfig {
    fn default() -> Self {
        Self {
            observation_seed: 0,
            nw_map: None,
            nw_slip: 0.1,
            nw_episodes: 2_000,
            nw_trajectories: 5,
            nw_step_cap: 500,
            nw_training_seed: 0,
            q_learning: QLearningConfig::default(),
        }
    }
}

pub const SIMULATOR_NAMES: [&str; 4] = ["te1", "te2", "te3", "nw"];

const OBSERVATION_STREAM: u64 = 0x0b5e_7fed;

/// Looks up a built-in simulator by name.
pub fn by_name(name: &str, config: &SimulatorConfig) -> Result<SimulatorSpec> {
    let mut obs_rng = RngStream::new(config.observation_seed, OBSERVATION_STREAM);
    let toy_bounds = || Bounds::uniform(1, TOY_BOUNDS.0, TOY_BOUNDS.1);
    match name {
        "te1" => SimulatorSpec::with_observation(name, toy_bounds()?, vec![50.0], None, Arc::new(Te1::default()), &mut obs_rng),
        "te2" => SimulatorSpec::with_observation(name, toy_bounds()?, vec![20.0], None, Arc::new(Te2::default()), &mut obs_rng),
        "te3" => SimulatorSpec::with_observation(name, toy_bounds()?, vec![20.0], None, Arc::new(Te3), &mut obs_rng),
        "nw" => {
            let world = match &config.nw_map {
                Some(path) => GridWorld::parse(&std::fs::read_to_string(path)?)?,
                None => GridWorld::default_map(),
            };
            let nw = NavigationWorld {
                world: world.with_slip(config.nw_slip)?,
                episodes: config.nw_episodes,
                trajectories: config.nw_trajectories,
                step_cap: config.nw_step_cap,
                training_seed: config.nw_training_seed,
                q_learning: config.q_learning.clone(),
            };
            SimulatorSpec::with_observation(
                name,
                NavigationWorld::bounds(),
                NavigationWorld::TRUE_REWARDS.to_vec(),
                None,
                Arc::new(nw),
                &mut obs_rng,
            )
        }
        other => Err(Error::Config(format!(
            "unknown simulator '{other}', expected one of {SIMULATOR_NAMES:?}"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn discrepancy_examples() {
        let s = [1.0, -2.0, 3.5];
        assert_eq!(euclidean_discrepancy(&s, &s, &[1.0; 3]).unwrap(), 0.0);
        assert_eq!(euclidean_discrepancy(&[0.0, 0.0], &[3.0, 4.0], &[1.0, 1.0]).unwrap(), 5.0);
        assert!(matches!(euclidean_discrepancy(&[0.0], &[1.0, 2.0], &[1.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn weighted_discrepancy_uses_table_style_weights() {
        // weights of the form 100/0.6 scale individual summary terms
        let w = [1.0, 1.0, 100.0 / 0.6, 100.0 / 0.4, 2.0, 10.0, 10.0, 10.0];
        let a = [20.0, 10.0, 0.5, 0.2, 8.0, 1.0, 12.0, 6.0];
        let mut b = a;
        b[2] += 0.03;
        let d = euclidean_discrepancy(&a, &b, &w).unwrap();
        assert!((d - (w[2] * 0.03f64 * 0.03).sqrt()).abs() < 1e-9);
    }

    #[test]
    fn triangle_inequality_on_random_triples() {
        let mut rng = RngStream::new(11, 0);
        for _ in 0..10_000 {
            let dim = 1 + rng.below(6);
            let draw = |rng: &mut RngStream| (0..dim).map(|_| 10.0 * rng.normal()).collect::<Vec<_>>();
            let (a, b, c) = (draw(&mut rng), draw(&mut rng), draw(&mut rng));
            let w: Vec<f64> = (0..dim).map(|_| 0.1 + rng.uniform() * 5.0).collect();
            let ab = euclidean_discrepancy(&a, &b, &w).unwrap();
            let bc = euclidean_discrepancy(&b, &c, &w).unwrap();
            let ac = euclidean_discrepancy(&a, &c, &w).unwrap();
            assert!(ac <= ab + bc + 1e-9);
        }
    }

    #[test]
    fn registry_knows_builtins() {
        let cfg = SimulatorConfig::default();
        for name in ["te1", "te2", "te3"] {
            let spec = by_name(name, &cfg).unwrap();
            assert_eq!(spec.dim(), 1);
            assert_eq!(spec.summary_dim(), 1);
        }
        assert!(matches!(by_name("bdm", &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn prior_draws_stay_in_support() {
        let spec = by_name("te2", &SimulatorConfig::default()).unwrap();
        let mut rng = RngStream::new(5, 1);
        for _ in 0..100_000 {
            let t = spec.sample_prior(&mut rng);
            assert!(spec.bounds.contains(&t));
        }
        let b = NavigationWorld::bounds();
        for _ in 0..100_000 {
            let t = b.sample_uniform(&mut rng);
            assert!(b.contains(&t));
        }
    }

    #[test]
    fn simulators_are_deterministic_given_stream() {
        let cfg = SimulatorConfig { nw_episodes: 200, ..Default::default() };
        for name in SIMULATOR_NAMES {
            let spec = by_name(name, &cfg).unwrap();
            let mut rng = RngStream::new(9, 4);
            let theta = spec.sample_prior(&mut rng);
            let mut r1 = RngStream::new(77, 3);
            let mut r2 = r1.clone();
            let a = spec.simulate(&theta, &mut r1).unwrap();
            let b = spec.simulate(&theta, &mut r2).unwrap();
            assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        }
    }
}
