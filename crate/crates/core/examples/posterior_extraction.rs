//! Runs BOLFI on TE2, then extracts the weighted posterior: threshold from the
//! surrogate minimum, Gaussian-cdf weights, ESS and systematic resampling.
//!
//! cargo run --release --example posterior_extraction > posterior.csv

use bolfi_dgp::acquisition::{bolfi_run, BolfiConfig};
use bolfi_dgp::math::RngStream;
use bolfi_dgp::posterior::{surrogate_threshold, weighted_posterior_samples};
use bolfi_dgp::simulators::{by_name, SimulatorConfig};
use bolfi_dgp::surrogate::SurrogateKind;

fn main() -> bolfi_dgp::Result<()> {
    let sim = by_name("te2", &SimulatorConfig::default())?;
    let mut config = BolfiConfig::default();
    config.surrogate.dgp.initial_steps = 1000;
    config.surrogate.dgp.refresh_steps = 20;
    config.surrogate.dgp.final_steps = 1000;
    let mut rng = RngStream::new(1, 0);
    let out = bolfi_run(&sim, SurrogateKind::Lv2Gp, 100, 200, &config, &mut rng)?;
    let q = config.acquisition.quantile;
    let eps = surrogate_threshold(out.surrogate.as_ref(), q, &config.acquisition, 10_000, &mut rng)?;
    let prior = |r: &mut RngStream| sim.sample_prior(r);
    let post = weighted_posterior_samples(out.surrogate.as_ref(), &prior, 10_000, eps, q, &mut rng)?;
    let draws = post.resample(1000, &mut rng);
    let near = |c: f64| draws.iter().filter(|d| (d[0] - c).abs() < 15.0).count();
    eprintln!("epsilon {eps:.4}, ESS {:.0}; resampled draws within 15 of 20: {}, of 80: {}", post.ess, near(20.0), near(80.0));
    post.write_csv(std::io::stdout().lock())
}
