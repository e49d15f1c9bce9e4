//! Saves a trained LV-GP and reloads it; predictive draws with the same
//! random stream match exactly.
//!
//! cargo run --release --example dgp_checkpoint

use bolfi_dgp::dgp::{dgp_predict_samples, dgp_train, DgpConfig, LvDgpModel};
use bolfi_dgp::evidence::EvidenceSet;
use bolfi_dgp::math::{ParameterVector, RngStream};
use bolfi_dgp::simulators::{by_name, SimulatorConfig};

fn main() -> bolfi_dgp::Result<()> {
    let sim = by_name("te3", &SimulatorConfig::default())?;
    let mut rng = RngStream::new(9, 0);
    let params: Vec<Vec<f64>> = (0..80).map(|_| sim.sample_prior(&mut rng)).collect();
    let deltas = params.iter().map(|p| sim.discrepancy(p, &mut rng)).collect::<Result<Vec<_>, _>>()?;
    let evidence = EvidenceSet::from_pairs(sim.bounds.clone(), params, deltas)?;
    let mut model = LvDgpModel::new(sim.bounds.clone(), DgpConfig { gp_layers: 1, ..Default::default() })?;
    dgp_train(&mut model, &evidence, 300, &mut rng)?;

    let path = std::env::temp_dir().join("bolfi_dgp_example.json");
    model.save(&path)?;
    let back = LvDgpModel::load(&path)?;
    let theta = ParameterVector::new(vec![20.0], sim.bounds.clone())?;
    let a = dgp_predict_samples(&model, &theta, 10, &mut RngStream::new(1, 0))?;
    let b = dgp_predict_samples(&back, &theta, 10, &mut RngStream::new(1, 0))?;
    assert_eq!(a, b);
    println!("{} bytes at {}; samples {:.3?}", std::fs::metadata(&path)?.len(), path.display(), a);
    Ok(())
}
