//! Trains an LV-2GP on 200 TE2 pairs and compares its predictive samples at
//! theta = 20 with the vanilla GP's Gaussian predictive.
//!
//! cargo run --release --example lv_dgp_bimodal

use bolfi_dgp::dgp::{dgp_predict_samples, dgp_train, DgpConfig, LvDgpModel};
use bolfi_dgp::diagnostics::fit_gaussian_mixture;
use bolfi_dgp::evidence::EvidenceSet;
use bolfi_dgp::gp::{gp_fit_map, gp_predict, GpConfig};
use bolfi_dgp::math::{ParameterVector, RngStream};
use bolfi_dgp::simulators::{by_name, SimulatorConfig};
use bolfi_dgp::surrogate::SurrogateModel;

fn main() -> bolfi_dgp::Result<()> {
    let sim = by_name("te2", &SimulatorConfig::default())?;
    let mut rng = RngStream::new(0, 0);
    let (mut params, mut deltas) = (Vec::new(), Vec::new());
    for _ in 0..200 {
        let theta = sim.sample_prior(&mut rng);
        deltas.push(sim.discrepancy(&theta, &mut rng)?);
        params.push(theta);
    }
    let evidence = EvidenceSet::from_pairs(sim.bounds.clone(), params, deltas)?;
    let theta = ParameterVector::new(vec![20.0], sim.bounds.clone())?;

    let mut dgp = LvDgpModel::new(sim.bounds.clone(), DgpConfig::default())?;
    dgp_train(&mut dgp, &evidence, 1000, &mut rng)?;
    let trace = dgp.elbo_trace();
    println!("bound {:.2} -> {:.2}, noise {:.4}", trace[0], trace[trace.len() - 1], dgp.noise());
    let samples = dgp_predict_samples(&dgp, &theta, 500, &mut rng)?;
    report("LV-2GP", &samples)?;

    let (gp, _) = gp_fit_map(&evidence, &GpConfig::default(), &mut rng)?;
    let (m, v) = gp_predict(&gp, &theta)?;
    let sd = (v + gp.noise_variance()).sqrt();
    let gauss: Vec<f64> = (0..500).map(|_| m + sd * rng.normal()).collect();
    report("GP", &gauss)
}

fn report(name: &str, samples: &[f64]) -> bolfi_dgp::Result<()> {
    let one = fit_gaussian_mixture(samples, 1)?;
    let two = fit_gaussian_mixture(samples, 2)?;
    println!(
        "{name:6}: BIC 1 component {:.1}, 2 components {:.1}; means {:.3?} weights {:.2?}",
        one.bic, two.bic, two.means, two.weights
    );
    Ok(())
}
