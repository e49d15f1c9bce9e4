//! MAP fit of the vanilla GP surrogate on TE1 evidence, predictions, the
//! lower confidence bound, and a checkpoint round trip.
//!
//! cargo run --release --example gp_surrogate

use bolfi_dgp::acquisition::exploration_schedule;
use bolfi_dgp::evidence::EvidenceSet;
use bolfi_dgp::gp::{gp_fit_map, gp_predict, lcb_acquisition, GpConfig, GpModel};
use bolfi_dgp::math::{ParameterVector, RngStream};
use bolfi_dgp::simulators::{by_name, SimulatorConfig};

fn main() -> bolfi_dgp::Result<()> {
    let sim = by_name("te1", &SimulatorConfig::default())?;
    let mut rng = RngStream::new(2, 0);
    let mut evidence = EvidenceSet::new(sim.bounds.clone());
    for _ in 0..40 {
        let theta = sim.sample_prior(&mut rng);
        let d = sim.discrepancy(&theta, &mut rng)?;
        evidence.push(theta, d, bolfi_dgp::evidence::Provenance::Initial)?;
    }
    let (model, report) = gp_fit_map(&evidence, &GpConfig::default(), &mut rng)?;
    println!("log posterior {:.3} -> {:.3} in {} evaluations", report.objective_at_init, report.objective, report.evaluations);
    println!("{:?}", model.hyperparameters());
    let eta2 = exploration_schedule(1, 1, 0.1);
    for t in [10.0, 30.0, 50.0, 60.0, 90.0] {
        let theta = ParameterVector::new(vec![t], sim.bounds.clone())?;
        let (m, v) = gp_predict(&model, &theta)?;
        println!("theta {t:4.0}: mean {m:.4} sd {:.4} lcb {:.4}", v.sqrt(), lcb_acquisition(&model, &theta, eta2)?);
    }
    let path = std::env::temp_dir().join("bolfi_gp_example.json");
    model.save(&path)?;
    let back = GpModel::load(&path)?;
    let theta = ParameterVector::new(vec![50.0], sim.bounds.clone())?;
    assert_eq!(gp_predict(&model, &theta)?, gp_predict(&back, &theta)?);
    println!("checkpoint round trip ok ({})", path.display());
    Ok(())
}
