//! Trains the Q-learning agent on the bundled map and prints the summarised
//! trajectories for the true colour rewards and for a flat reward vector.
//!
//! cargo run --release --example navigation_world

use bolfi_dgp::math::RngStream;
use bolfi_dgp::simulators::{GridWorld, NavigationWorld, QLearningConfig, DEFAULT_MAP};

fn main() -> bolfi_dgp::Result<()> {
    print!("{DEFAULT_MAP}");
    let nw = NavigationWorld {
        world: GridWorld::default_map().with_slip(0.1)?,
        episodes: 2000,
        trajectories: 5,
        step_cap: 500,
        training_seed: 0,
        q_learning: QLearningConfig::default(),
    };
    let mut rng = RngStream::new(0, 0);
    for rewards in [NavigationWorld::TRUE_REWARDS, [-1.0; 5]] {
        println!("rewards {rewards:?}");
        for t in nw.trajectories(&rewards, &mut rng)? {
            println!("  turns {:3} steps {:3} reward {:8.1} goal {}", t.turns, t.steps, t.reward, t.reached_goal);
        }
    }
    Ok(())
}
