//! Quantile-conditioned moments of predictive samples, the exploration
//! schedule, and the resulting lower confidence bound on a trained LV-GP.
//!
//! cargo run --release --example quantile_acquisition

use bolfi_dgp::acquisition::{exploration_schedule, quantile_lcb, quantile_moments};
use bolfi_dgp::dgp::{DgpConfig, LvDgpModel};
use bolfi_dgp::evidence::{EvidenceSet, Provenance};
use bolfi_dgp::math::RngStream;
use bolfi_dgp::simulators::{by_name, SimulatorConfig};
use bolfi_dgp::surrogate::{FitPhase, SurrogateModel};

fn main() -> bolfi_dgp::Result<()> {
    let samples = [0.9, 0.1, 0.8, 0.05, 0.85, 0.12, 0.95, 0.07];
    for q in [0.3, 0.5, 1.0] {
        println!("q = {q}: {:?}", quantile_moments(&samples, q)?);
    }
    for t in [1, 10, 100] {
        println!("eta^2 at t = {t:3}, d = 1: {:.3}", exploration_schedule(t, 1, 0.1));
    }

    let sim = by_name("te2", &SimulatorConfig::default())?;
    let mut rng = RngStream::new(4, 0);
    let mut evidence = EvidenceSet::new(sim.bounds.clone());
    for _ in 0..100 {
        let theta = sim.sample_prior(&mut rng);
        let d = sim.discrepancy(&theta, &mut rng)?;
        evidence.push(theta, d, Provenance::Initial)?;
    }
    let config = DgpConfig { gp_layers: 1, initial_steps: 800, ..Default::default() };
    let mut model = LvDgpModel::new(sim.bounds.clone(), config)?;
    model.fit(&evidence, FitPhase::Initial, &mut rng)?;
    let crn = model.draw_crn(&mut rng);
    let eta2 = exploration_schedule(1, 1, 0.1);
    for theta in [5.0, 20.0, 50.0, 80.0, 95.0] {
        let full = model.moments(&[theta], 1.0, &crn)?;
        let low = model.moments(&[theta], 0.3, &crn)?;
        println!(
            "theta {theta:4.0}: mean {:.3} | 30% quantile mean {:.3} | LCB {:.3}",
            full.mean,
            low.mean,
            quantile_lcb(&model, &[theta], eta2, 0.3, &crn)?
        );
    }
    Ok(())
}
