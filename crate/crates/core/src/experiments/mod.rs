//! Synthetic demonstration generators: context-morphed limit cycles,
//! potential-field obstacle avoidance and joint-space reaching.
//!
//! All generators derive one random stream per trajectory (or scene) from the
//! master seed, so output is independent of generation order.

mod cycle;
mod goto;
mod obstacle;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use cycle::{gen_cycle_dataset, MorphingCycleSpec};
pub use goto::{gen_goto_dataset, GoToTaskSpec, GOTO_CONTEXT_DIM};
pub use obstacle::{
    gen_obstacle_dataset, sample_demonstration, scene_from_context, ObstacleSceneSpec, SceneDistribution,
};

/// Stream `index` of the ChaCha8 generator seeded with `seed`.
pub fn trajectory_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}
