//! One optimisation run on TE2 with the LV-2GP surrogate: 100 prior draws,
//! 100 acquisitions, then a final retrain. Writes the call log to stdout.
//!
//! cargo run --release --example bolfi_loop [gp|lv-gp|lv-2gp]

use bolfi_dgp::acquisition::{bolfi_run, write_call_log, BolfiConfig};
use bolfi_dgp::evidence::Provenance;
use bolfi_dgp::math::RngStream;
use bolfi_dgp::simulators::{by_name, SimulatorConfig};
use bolfi_dgp::surrogate::SurrogateKind;

fn main() -> bolfi_dgp::Result<()> {
    let kind: SurrogateKind = std::env::args().nth(1).as_deref().unwrap_or("lv-2gp").parse()?;
    let sim = by_name("te2", &SimulatorConfig::default())?;
    let mut config = BolfiConfig::default();
    // desk-scale training length
    config.surrogate.dgp.initial_steps = 1000;
    config.surrogate.dgp.refresh_steps = 20;
    config.surrogate.dgp.final_steps = 1000;
    let out = bolfi_run(&sim, kind, 100, 200, &config, &mut RngStream::new(0, 0))?;
    eprintln!(
        "{kind}: {} simulator calls, {} acquired, {} acquisition fallbacks",
        out.simulator_calls,
        out.evidence.count(Provenance::Acquired),
        out.fallbacks
    );
    write_call_log(std::io::stdout().lock(), &out.calls)
}
