//! Rejection-ABC reference posterior for TE2, cached on disk with a
//! checksummed manifest. A second call reads the cache.
//!
//! cargo run --release --example rejection_reference

use std::time::Instant;

use bolfi_dgp::posterior::ReferenceCache;
use bolfi_dgp::simulators::{by_name, SimulatorConfig};

fn main() -> bolfi_dgp::Result<()> {
    let sim = by_name("te2", &SimulatorConfig::default())?;
    let cache = ReferenceCache::new(std::env::temp_dir().join("bolfi_reference_example"))?;
    for attempt in 0..2 {
        let t = Instant::now();
        let samples = cache.load_or_build(&sim, 1_000_000, 0.001, 0)?;
        let mut v: Vec<f64> = samples.iter().map(|s| s[0]).collect();
        v.sort_by(f64::total_cmp);
        println!(
            "attempt {attempt}: {} samples in {:.2?}; quartiles {:.1} {:.1} {:.1}",
            v.len(),
            t.elapsed(),
            v[v.len() / 4],
            v[v.len() / 2],
            v[3 * v.len() / 4]
        );
    }
    for e in cache.manifest()? {
        println!("{} {} draws keep {} -> {} ({})", e.simulator, e.budget, e.keep, e.file, &e.sha256[..12]);
    }
    Ok(())
}
