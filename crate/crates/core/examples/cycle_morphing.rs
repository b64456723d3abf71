//! Morphing limit cycles: train on contexts 0 and 1, then evaluate the
//! held-out context 0.5 and check that noiseless rollouts settle on its curve.
//!
//! `cargo run --release --example cycle_morphing -- [context_linearity]`

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stableflow::experiments::{gen_cycle_dataset, MorphingCycleSpec};
use stableflow::flow::FlowConfig;
use stableflow::latent::LatentDynamics;
use stableflow::policy::{sample_ball, ContextDynamics, StablePolicyModel};
use stableflow::training::{evaluate, initial_model, train_from, LatentConfig, TrainConfig};

fn spec(c: f64) -> MorphingCycleSpec {
    MorphingCycleSpec {
        context: c,
        noise: 0.001,
        ..Default::default()
    }
}

/// Worst distance from the target curve over the last revolution of 20
/// noiseless rollouts.
fn curve_gap(model: &StablePolicyModel, c: f64, rng: &mut ChaCha8Rng) -> stableflow::Result<f64> {
    let st = model.standardization();
    let target = spec(c);
    let curve: Vec<Vec<f64>> = (0..4000)
        .map(|i| st.state(&target.point(2.0 * PI * i as f64 / 4000.0)))
        .collect();
    let quiet = model.noiseless();
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let y0 = sample_ball(&st.state_shift, st.data_radius, rng);
        let r = quiet.rollout(&y0, &[c], &ContextDynamics::Constant, 600, &[], rng)?;
        for y in &r.states[600 - target.samples_per_revolution..] {
            let e = st.state(y);
            let gap = curve
                .iter()
                .map(|p| (p[0] - e[0]).hypot(p[1] - e[1]))
                .fold(f64::INFINITY, f64::min);
            worst = worst.max(gap);
        }
    }
    Ok(worst)
}

fn main() -> stableflow::Result<()> {
    env_logger::init();
    let linearity: f64 = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(0.0);
    let ctxs = [spec(0.0), spec(1.0)];
    let train = gen_cycle_dataset(&ctxs, 5, 1)?;
    let valid = gen_cycle_dataset(&ctxs, 1, 2)?;
    let held_out = gen_cycle_dataset(&[spec(0.5)], 5, 3)?;

    // Low latent noise first, where the fit is easy to find, then full noise.
    let first = TrainConfig {
        epochs: 200,
        batch_size: 128,
        patience: 100,
        context_linearity: linearity,
        flow: FlowConfig {
            layers: 6,
            hidden: vec![32, 32],
            ..FlowConfig::default()
        },
        latent: LatentConfig::LimitCycle {
            r_star: None,
            beta: None,
            omega: None,
            sigma: Some(0.1),
            sigma_phase: None,
            dt: None,
        },
        ..TrainConfig::default()
    };
    let model = initial_model(&first, &train)?;
    let (model, a) = train_from(&first, model, &train, &valid)?;
    let LatentDynamics::LimitCycle(mut lc) = model.latent().clone() else {
        unreachable!()
    };
    lc.sigma = 1.0;
    let second = TrainConfig {
        epochs: 300,
        ..first.clone()
    };
    let (model, b) = train_from(
        &second,
        model.with_latent(LatentDynamics::LimitCycle(lc))?,
        &train,
        &valid,
    )?;
    println!(
        "trained {} + {} epochs in {:.1}s",
        a.history.len(),
        b.history.len(),
        a.wall_clock_s + b.wall_clock_s
    );

    let train_ll = evaluate(&model, &train, false)?.mean_ll;
    let held_ll = evaluate(&model, &held_out, false)?.mean_ll;
    println!("log-likelihood per transition: train {train_ll:.3}, held-out c=0.5 {held_ll:.3}");
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for c in [0.0, 0.5, 1.0] {
        println!("c={c}: worst curve gap {:.4}", curve_gap(&model, c, &mut rng)?);
    }
    Ok(())
}
