//! A small seeded experiment through the harness: runs GP and LV-GP on TE1,
//! writes runs.csv, comparison.csv and per-run posteriors, and prints the
//! comparison table.
//!
//! cargo run --release --example experiment [output dir]

use bolfi_dgp::harness::{run_experiment, ExperimentConfig};

const CONFIG: &str = r#"
simulator = "te1"
surrogates = ["gp", "lv-gp"]
n_init = 30
s_total = 50
repetitions = 3

[dgp]
initial_steps = 300
refresh_steps = 10
final_steps = 300

[posterior]
samples = 2000

[reference]
budget = 100000
keep = 0.01
"#;

fn main() -> bolfi_dgp::Result<()> {
    let mut config = ExperimentConfig::from_toml(CONFIG)?;
    config.output_dir = std::env::args().nth(1).map_or_else(|| std::env::temp_dir().join("bolfi_experiment"), Into::into);
    let out = run_experiment(&config)?;
    for r in &out.records {
        println!("{} seed {} distance {:.4} ESS {:.0} calls {}", r.surrogate, r.seed, r.wasserstein, r.ess, r.simulator_calls);
    }
    for row in out.comparison.iter().flatten() {
        println!("{}: median scaled {:.2}, 95% CI {}", row.surrogate, row.median_scaled, row.interval);
    }
    println!("outputs in {}", config.output_dir.display());
    Ok(())
}
