//! Simulate the two latent processes and watch their Lyapunov functions.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stableflow::latent::{LatentDynamics, LimitCycleLatent, LinearAttractor};

fn main() -> stableflow::Result<()> {
    let dt = 0.01;
    let systems = [
        LatentDynamics::Attractor(LinearAttractor::new(2, 2.0, 0.5, dt)?),
        LatentDynamics::LimitCycle(LimitCycleLatent::new(
            2,
            1.0,
            3.0,
            2.0 * std::f64::consts::PI,
            0.3,
            0.1,
            dt,
        )?),
    ];
    for lat in &systems {
        println!("{}:", lat.kind());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut z = vec![3.0, -2.0];
        for step in 0..=1000 {
            if step % 200 == 0 {
                println!(
                    "  t={:5.2}  z=({:+.3}, {:+.3})  U={:.4}  LU={:+.4}",
                    step as f64 * dt,
                    z[0],
                    z[1],
                    lat.lyapunov_u(&z)?,
                    lat.generator_lu(&z)?
                );
            }
            z = lat.em_step(&z, &mut rng)?;
        }
    }
    Ok(())
}
