//! 7-D reaching: push the arm away mid-motion and watch the pullback
//! Lyapunov function, then retarget it with a smoothly switching context.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stableflow::experiments::{gen_goto_dataset, GoToTaskSpec};
use stableflow::flow::FlowConfig;
use stableflow::policy::{ContextDynamics, Perturbation};
use stableflow::training::{train, LatentConfig, TrainConfig};

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn main() -> stableflow::Result<()> {
    env_logger::init();
    let spec = GoToTaskSpec::default();
    let data = gen_goto_dataset(&spec, 5)?;
    let config = TrainConfig {
        epochs: 60,
        flow: FlowConfig {
            layers: 6,
            hidden: vec![32, 32],
            ..FlowConfig::default()
        },
        latent: LatentConfig::Attractor {
            alpha: Some(0.8 * spec.omega),
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
    let radius = model.standardization().data_radius;
    // Three data radii along an alternating direction, at step 30.
    let dir: Vec<f64> = (0..spec.state_dim)
        .map(|i| if i % 2 == 0 { 1.0 } else { -1.0 })
        .collect();
    let n = (spec.state_dim as f64).sqrt();
    let push = Perturbation {
        step: 30,
        displacement: dir.iter().map(|x| 3.0 * radius * x / n).collect(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut worst_err, mut violations) = (0.0f64, 0usize);
    for t in data.trajectories.iter().take(20) {
        let c = &t.contexts[0];
        let r = quiet.rollout(
            &t.states[0],
            c,
            &ContextDynamics::Constant,
            400,
            std::slice::from_ref(&push),
            &mut rng,
        )?;
        let v: Vec<f64> = r
            .states
            .iter()
            .map(|y| quiet.pullback_v(y, c))
            .collect::<stableflow::Result<_>>()?;
        violations += v
            .windows(2)
            .enumerate()
            .filter(|(k, w)| k + 1 != push.step && w[0] > 1e-24 && !(w[1] < w[0]))
            .count();
        worst_err = worst_err.max(dist(r.last_state(), &spec.target(c)));
    }
    println!("perturbed rollouts: {violations} increases of V off the push, worst target error {worst_err:.4}");

    // Retarget: start on context a, switch exponentially towards context b.
    let (ca, cb) = (&data.trajectories[0].contexts[0], &data.trajectories[1].contexts[0]);
    let first = quiet.rollout(
        &data.trajectories[0].states[0],
        ca,
        &ContextDynamics::Constant,
        40,
        &[],
        &mut rng,
    )?;
    let switch = ContextDynamics::ExponentialApproach {
        target: cb.clone(),
        rate: 5.0,
    };
    let second = quiet.rollout(first.last_state(), ca, &switch, 400, &[], &mut rng)?;
    let end = second.last_state();
    println!(
        "context switch: distance to new attractor image {:.2e}, to new target {:.4}",
        dist(end, &quiet.to_state(&vec![0.0; spec.state_dim], second.last_context())?),
        dist(end, &spec.target(cb))
    );
    Ok(())
}
