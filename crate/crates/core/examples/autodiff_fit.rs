//! Fit a small MLP to `sin(3x)` with the reverse-mode graph and Adam.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stableflow::autodiff::{Activation, AdamConfig, AdamState, Graph, Mlp, ParamVector, Parameterized};

fn main() -> stableflow::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut net = Mlp::new(&[1, 32, 32, 1], Activation::Tanh, &mut rng)?;
    let n = 128;
    let xs = Array2::from_shape_fn((n, 1), |(i, _)| -1.0 + 2.0 * i as f64 / (n - 1) as f64);
    let ys = xs.mapv(|x| (3.0 * x).sin());

    let mut params = net.flatten();
    let mut adam = AdamState::new(params.len(), AdamConfig::with_learning_rate(1e-2))?;
    for step in 0..=2000 {
        let (mse, grad) = {
            let mut g = Graph::new();
            let bound = net.bind(&mut g);
            let x = g.input(xs.clone());
            let target = g.input(ys.clone());
            let out = bound.apply(&mut g, x);
            let err = g.sub(out, target);
            let sq = g.square(err);
            let total = g.sum_all(sq);
            let loss = g.scale(total, 1.0 / n as f64);
            (g.scalar(loss), ParamVector::new(g.backward(loss)?.into_params()))
        };
        if step % 400 == 0 {
            println!("step {step:5}  mse {mse:.2e}");
        }
        adam.step(&mut params, &grad)?;
        net.unflatten(&params)?;
    }
    println!(
        "net(0.5) = {:.4}, sin(1.5) = {:.4}",
        net.forward(&[0.5])?[0],
        1.5f64.sin()
    );
    Ok(())
}
