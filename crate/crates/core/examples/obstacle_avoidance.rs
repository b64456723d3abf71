//! Potential-field obstacle avoidance: learn from expert scenes, then roll
//! the noiseless policy out on unseen scenes and count arrivals and contacts.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stableflow::experiments::{gen_obstacle_dataset, trajectory_rng, SceneDistribution};
use stableflow::flow::FlowConfig;
use stableflow::policy::ContextDynamics;
use stableflow::training::{train, LatentConfig, TrainConfig};

fn main() -> stableflow::Result<()> {
    env_logger::init();
    let dist = SceneDistribution::default();
    let data = gen_obstacle_dataset(&dist, 220, 11)?;
    println!("{} scenes, {} transitions", data.len(), data.transition_count());

    let config = TrainConfig {
        epochs: 120,
        train_fraction: 0.9,
        flow: FlowConfig {
            layers: 6,
            hidden: vec![32, 32],
            ..FlowConfig::default()
        },
        latent: LatentConfig::Attractor {
            alpha: Some(dist.attractive_gain),
            sigma: None,
            dt: None,
        },
        ..TrainConfig::default()
    };
    let (model, report) = train(&config, &data)?;
    println!(
        "best epoch {} of {}, test ll {:.3}, {:.1}s",
        report.best_epoch,
        report.history.len(),
        report.best_test_ll,
        report.wall_clock_s
    );

    let quiet = model.noiseless();
    let held_out = 50;
    let (mut reached, mut contact) = (0, 0);
    let mut worst_err: f64 = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for i in 0..held_out {
        let mut srng = trajectory_rng(9_999, i);
        let scene = dist.sample_scene(&mut srng)?;
        let start = dist.sample_start(&scene, &mut srng)?;
        let r = quiet.rollout(&start, &scene.context(), &ContextDynamics::Constant, 400, &[], &mut rng)?;
        let end = r.last_state();
        let err = (end[0] - scene.goal[0]).hypot(end[1] - scene.goal[1]);
        worst_err = worst_err.max(err);
        reached += usize::from(err < 0.05);
        contact += usize::from(r.states.iter().any(|y| scene.clearance(&[y[0], y[1]]) < 0.0));
    }
    println!(
        "held-out scenes: reached goal {reached}/{held_out}, obstacle contact {contact}/{held_out}, worst goal error {worst_err:.4}"
    );
    Ok(())
}
