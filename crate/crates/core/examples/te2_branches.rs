//! TE2 picks one of two mirrored logistic curves per call, so the
//! discrepancy at a fixed parameter is bimodal.
//!
//! cargo run --release --example te2_branches

use bolfi_dgp::math::RngStream;
use bolfi_dgp::simulators::{by_name, SimulatorConfig, Te2};

fn main() -> bolfi_dgp::Result<()> {
    let sim = by_name("te2", &SimulatorConfig::default())?;
    let mut rng = RngStream::new(3, 0);
    for theta in [0.0, 20.0, 50.0, 80.0, 100.0] {
        let (up, down) = Te2::branches(theta);
        let d: Vec<f64> = (0..2000).map(|_| sim.discrepancy(&[theta], &mut rng)).collect::<Result<_, _>>()?;
        let low = d.iter().filter(|x| **x < 0.25).count();
        println!("theta {theta:5.1}: branches ({up:.3}, {down:.3}), {low:4}/2000 draws with discrepancy < 0.25");
    }
    Ok(())
}
