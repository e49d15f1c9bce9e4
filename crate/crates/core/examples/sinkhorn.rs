//! Debiased Sinkhorn divergence between Gaussian clouds as one of them is
//! shifted, plus the two-point limit.
//!
//! cargo run --release --example sinkhorn

use bolfi_dgp::math::RngStream;
use bolfi_dgp::posterior::{scaled_wasserstein, sinkhorn_divergence, SinkhornConfig};
use std::collections::BTreeMap;

fn main() -> bolfi_dgp::Result<()> {
    let mut rng = RngStream::new(7, 0);
    let mut cloud = |n: usize, shift: f64| -> Vec<Vec<f64>> { (0..n).map(|_| vec![shift + rng.normal(), rng.normal()]).collect() };
    let base = cloud(500, 0.0);
    let config = SinkhornConfig::default();
    let mut table = BTreeMap::new();
    for shift in [0.0, 0.5, 1.0, 2.0] {
        let other = cloud(500, shift);
        let s = sinkhorn_divergence(&base, &other, &config)?;
        println!("shift {shift}: divergence {:.4} (eps {:.4}, converged {})", s.value, s.epsilon, s.converged);
        if shift > 0.0 {
            table.insert(format!("shift {shift}"), s.value);
        }
    }
    println!("scaled: {:?}", scaled_wasserstein(&table)?);
    let dirac = SinkhornConfig { epsilon: Some(1e-4), ..Default::default() };
    let s = sinkhorn_divergence(&[vec![0.0, 0.0]], &[vec![3.0, 4.0]], &dirac)?;
    println!("two points at distance 5: {:.4} (squared distance 25)", s.value);
    Ok(())
}
