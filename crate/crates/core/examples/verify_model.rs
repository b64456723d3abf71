//! Run the numerical stability checks on a model: the generator identity
//! for the pullback Lyapunov function and a convergence sweep.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stableflow::autodiff::Parameterized;
use stableflow::flow::{ConditionedFlow, FlowConfig};
use stableflow::latent::{LatentDynamics, LinearAttractor};
use stableflow::policy::{sample_ball, ConvergenceOptions, StablePolicyModel, Standardization};

fn main() -> stableflow::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut flow = ConditionedFlow::new(2, 1, &FlowConfig::default(), &mut rng)?;
    let mut p = flow.flatten();
    p.as_mut_slice()
        .iter_mut()
        .for_each(|v| *v = rng.random_range(-0.3..0.3));
    flow.unflatten(&p)?;
    let latent = LatentDynamics::Attractor(LinearAttractor::new(2, 2.0, 0.5, 0.01)?);
    let model = StablePolicyModel::new(flow, latent, Standardization::identity(2, 1))?;

    let mut worst = 0.0f64;
    for _ in 0..50 {
        let y = sample_ball(&[0.0, 0.0], 2.0, &mut rng);
        worst = worst.max(model.verify_generator_identity(&y, &[0.5], 1e-4)?.abs_diff);
    }
    println!("generator identity: max |LV - LU| = {worst:.2e} over 50 points");

    let opts = ConvergenceOptions {
        n_starts: 100,
        radius: 10.0,
        steps: 2000,
        tol: 0.05,
    };
    for m in [model.noiseless(), model.clone()] {
        let r = m.verify_convergence(&opts, &[vec![0.5]], &mut rng)?;
        println!(
            "convergence ({}): {}/{} starts within {} of the attractor, median distance {:.2e}",
            if r.noiseless { "noiseless" } else { "stochastic" },
            r.converged,
            r.n_starts,
            r.tol,
            r.median_distance
        );
    }
    Ok(())
}
