//! Draws from the four built-in simulators and their discrepancies to the
//! observed summary.
//!
//! cargo run --release --example simulators

use bolfi_dgp::math::RngStream;
use bolfi_dgp::simulators::{by_name, SimulatorConfig, SIMULATOR_NAMES};

fn main() -> bolfi_dgp::Result<()> {
    let config = SimulatorConfig::default();
    let mut rng = RngStream::new(1, 0);
    for name in SIMULATOR_NAMES {
        let sim = by_name(name, &config)?;
        println!("{name}: theta_obs {:?}", sim.theta_obs);
        println!("  s_obs {:?}", sim.s_obs);
        let truth = sim.theta_obs.clone();
        let at_truth: Vec<f64> = (0..5).map(|_| sim.discrepancy(&truth, &mut rng)).collect::<Result<_, _>>()?;
        println!("  discrepancy at the truth  {}", fmt(&at_truth));
        let from_prior: Vec<f64> = (0..5)
            .map(|_| {
                let theta = sim.sample_prior(&mut rng);
                sim.discrepancy(&theta, &mut rng)
            })
            .collect::<Result<_, _>>()?;
        println!("  discrepancy at prior draws {}", fmt(&from_prior));
    }
    Ok(())
}

fn fmt(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:9.3}")).collect::<Vec<_>>().join(" ")
}
