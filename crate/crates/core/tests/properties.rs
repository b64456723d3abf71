use approx::assert_relative_eq;
use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use stableflow::autodiff::{Activation, Graph, Mlp, Parameterized};
use stableflow::dataset::TrajectoryDataset;
use stableflow::experiments::{gen_cycle_dataset, MorphingCycleSpec};
use stableflow::flow::{ConditionedFlow, FlowConfig};
use stableflow::latent::{LatentDynamics, LimitCycleLatent, LinearAttractor};
use stableflow::policy::{ContextDynamics, Perturbation, StablePolicyModel, Standardization};

fn random_flow(dim: usize, ctx: usize, seed: u64, spread: f64) -> ConditionedFlow {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = FlowConfig {
        layers: 4,
        hidden: vec![8],
        ..FlowConfig::default()
    };
    let mut flow = ConditionedFlow::new(dim, ctx, &cfg, &mut rng).unwrap();
    let mut p = flow.flatten();
    p.as_mut_slice()
        .iter_mut()
        .for_each(|v| *v = rng.random_range(-spread..spread));
    flow.unflatten(&p).unwrap();
    flow
}

fn random_model(latent: LatentDynamics, ctx: usize, seed: u64) -> StablePolicyModel {
    let d = latent.dim();
    let st = Standardization {
        state_shift: (0..d).map(|i| 0.3 * i as f64).collect(),
        state_scale: (0..d).map(|i| 1.0 + 0.5 * i as f64).collect(),
        context_shift: vec![0.1; ctx],
        context_scale: vec![2.0; ctx],
        data_radius: 1.0,
    };
    StablePolicyModel::new(random_flow(d, ctx, seed, 0.5), latent, st).unwrap()
}

fn attractor(dim: usize, sigma: f64) -> LatentDynamics {
    LatentDynamics::Attractor(LinearAttractor::new(dim, 2.0, sigma, 0.01).unwrap())
}

fn cycle(sigma: f64) -> LatentDynamics {
    LatentDynamics::LimitCycle(LimitCycleLatent::new(2, 1.0, 3.0, 6.0, sigma, 0.1, 0.01).unwrap())
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn vec_in(dim: usize, r: f64) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-r..r, dim)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn flow_is_a_bijection(
        seed in 0u64..1000,
        dim in 2usize..5,
        ctx in 0usize..3,
        z in vec_in(4, 3.0),
        c in vec_in(2, 2.0),
    ) {
        let flow = random_flow(dim, ctx, seed, 0.7);
        let z = &z[..dim];
        let c = &c[..ctx];
        let (y, ld) = flow.forward(z, c).unwrap();
        let (back, ld_inv) = flow.inverse(&y, c).unwrap();
        for (a, b) in z.iter().zip(&back) {
            prop_assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
        prop_assert!((ld + ld_inv).abs() < 1e-9);
    }

    #[test]
    fn mlp_graph_matches_pointwise_and_is_deterministic(
        seed in 0u64..1000,
        x in vec_in(3, 2.0),
        softplus in any::<bool>(),
    ) {
        let act = if softplus { Activation::Softplus } else { Activation::Tanh };
        let make = || Mlp::new(&[3, 6, 2], act, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let (a, b) = (make(), make());
        let out = a.forward(&x).unwrap();
        prop_assert_eq!(&out, &b.forward(&x).unwrap());
        let mut g = Graph::new();
        let bound = a.bind(&mut g);
        let xv = g.input(Array2::from_shape_vec((1, 3), x.clone()).unwrap());
        let yv = bound.apply(&mut g, xv);
        for (p, q) in g.value(yv).iter().zip(&out) {
            prop_assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn mlp_parameter_gradient_matches_finite_differences(seed in 0u64..1000, x in vec_in(2, 1.5)) {
        let mut mlp = Mlp::new(&[2, 5, 1], Activation::Tanh, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let loss = |m: &Mlp| m.forward(&x).unwrap()[0].powi(2);
        let grad = {
            let mut g = Graph::new();
            let bound = mlp.bind(&mut g);
            let xv = g.input(Array2::from_shape_vec((1, 2), x.clone()).unwrap());
            let y = bound.apply(&mut g, xv);
            let sq = g.square(y);
            let l = g.sum_all(sq);
            g.backward(l).unwrap().into_params()
        };
        let p0 = mlp.flatten();
        let h = 1e-4;
        for i in 0..p0.len() {
            let mut p = p0.clone();
            p.as_mut_slice()[i] += h;
            mlp.unflatten(&p).unwrap();
            let up = loss(&mlp);
            p.as_mut_slice()[i] -= 2.0 * h;
            mlp.unflatten(&p).unwrap();
            let down = loss(&mlp);
            let fd = (up - down) / (2.0 * h);
            prop_assert!((fd - grad[i]).abs() <= 1e-6 + 1e-4 * fd.abs(), "param {i}: {fd} vs {}", grad[i]);
        }
    }

    #[test]
    fn attractor_generator_is_negative_off_the_origin(z in vec_in(3, 1e3), sigma in 0.0f64..1.15) {
        prop_assume!(norm(&z) > 1e-6);
        let lat = attractor(3, sigma);
        prop_assert!(lat.generator_lu(&z).unwrap() < 0.0);
        let r2: f64 = z.iter().map(|x| x * x).sum();
        assert_relative_eq!(lat.lyapunov_u(&z).unwrap(), r2, max_relative = 1e-12);
    }

    #[test]
    fn limit_cycle_generator_is_negative_off_the_cycle(z in vec_in(2, 1e3), sigma in 0.0f64..2.0) {
        let lat = cycle(sigma);
        let r = norm(&z);
        prop_assume!((r - 1.0).abs() > 1e-6 && r > 1e-6);
        prop_assert!(lat.generator_lu(&z).unwrap() < 0.0);
        let d = lat.distance_to_attractor(&z).unwrap();
        assert_relative_eq!(lat.lyapunov_u(&z).unwrap(), d * d, max_relative = 1e-9);
        assert_relative_eq!(d, (r - 1.0).abs(), max_relative = 1e-9);
    }

    #[test]
    fn noiseless_attractor_u_is_monotone(z in vec_in(2, 50.0)) {
        let lat = attractor(2, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut z = z;
        let mut u = lat.lyapunov_u(&z).unwrap();
        for _ in 0..200 {
            z = lat.em_step(&z, &mut rng).unwrap();
            let next = lat.lyapunov_u(&z).unwrap();
            prop_assert!(next <= u);
            u = next;
        }
    }

    #[test]
    fn pullback_vanishes_exactly_on_the_attractor_image(seed in 0u64..1000, c in -2.0f64..2.0, y in vec_in(2, 3.0)) {
        let model = random_model(attractor(2, 0.3), 1, seed);
        let y_star = model.to_state(&[0.0, 0.0], &[c]).unwrap();
        prop_assert!(model.pullback_v(&y_star, &[c]).unwrap() < 1e-20);
        let away = model.pullback_v(&y, &[c]).unwrap();
        let gap = norm(&[y[0] - y_star[0], y[1] - y_star[1]]);
        prop_assert!(gap < 1e-6 || away > 0.0);
    }

    #[test]
    fn noiseless_rollout_approaches_the_attractor_geometrically(seed in 0u64..1000, y0 in vec_in(2, 4.0)) {
        let model = random_model(attractor(2, 0.3), 1, seed).noiseless();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = model.rollout(&y0, &[0.5], &ContextDynamics::Constant, 100, &[], &mut rng).unwrap();
        let d0 = norm(&r.latent[0]);
        prop_assume!(d0 > 1e-6);
        let rate: f64 = 1.0 - 2.0 * 0.01;
        for (k, z) in r.latent.iter().enumerate() {
            let expect = d0 * rate.powi(k as i32);
            prop_assert!((norm(z) - expect).abs() <= 1e-8 * (1.0 + d0), "step {k}");
        }
    }

    #[test]
    fn pullback_decreases_between_perturbations(seed in 0u64..1000, push in vec_in(2, 2.0)) {
        let model = random_model(attractor(2, 0.3), 1, seed).noiseless();
        let pushes = [
            Perturbation { step: 40, displacement: push.clone() },
            Perturbation { step: 90, displacement: vec![-push[1], push[0]] },
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let r = model.rollout(&[1.0, -1.0], &[0.0], &ContextDynamics::Constant, 150, &pushes, &mut rng).unwrap();
        let v: Vec<f64> = r.states.iter().map(|y| model.pullback_v(y, &[0.0]).unwrap()).collect();
        for k in 1..v.len() {
            if k == 40 || k == 90 || v[k - 1] <= 1e-24 {
                continue;
            }
            prop_assert!(v[k] < v[k - 1], "step {k}: {} -> {}", v[k - 1], v[k]);
        }
    }

    #[test]
    fn standardization_round_trips(y in vec_in(3, 100.0), scale in 0.01f64..10.0) {
        let st = Standardization {
            state_shift: vec![1.0, -2.0, 0.5],
            state_scale: vec![scale, 1.0, 2.0 * scale],
            context_shift: vec![],
            context_scale: vec![],
            data_radius: 1.0,
        };
        let back = st.unstate(&st.state(&y));
        for (a, b) in y.iter().zip(&back) {
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn dataset_json_round_trips(seed in 0u64..1000, noise in 0.0f64..0.05) {
        let spec = MorphingCycleSpec { noise, revolutions: 0.25, ..Default::default() };
        let ds = gen_cycle_dataset(&[spec], 2, seed).unwrap();
        let back = TrajectoryDataset::from_json_str(&ds.to_json_string()).unwrap();
        prop_assert_eq!(back.to_json_string(), ds.to_json_string());
        prop_assert_eq!(back.trajectories, ds.trajectories);
    }
}

#[test]
fn generator_identity_error_shrinks_with_step() {
    let model = random_model(cycle(0.4), 1, 7);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut ratios = Vec::new();
    for _ in 0..30 {
        let y: Vec<f64> = (0..2).map(|_| rng.random_range(-2.0..2.0)).collect();
        let e: Vec<f64> = [1e-2, 2.5e-3]
            .iter()
            .map(|&h| model.verify_generator_identity(&y, &[0.3], h).unwrap().abs_diff)
            .collect();
        if e[0] > 1e-6 {
            ratios.push(e[1] / e[0]);
        }
    }
    ratios.sort_by(f64::total_cmp);
    assert!(ratios.len() > 10);
    // At least first order: a quarter of the step gives at most a quarter of the error.
    assert!(ratios[ratios.len() / 2] <= 0.3, "{ratios:?}");
}

#[test]
fn euler_maruyama_moments_match_the_transition() {
    let lat = attractor(2, 0.5);
    let z = [1.5, -0.7];
    let tr = lat.transition(&z).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n = 100_000;
    let draws: Vec<Vec<f64>> = (0..n).map(|_| lat.em_step(&z, &mut rng).unwrap()).collect();
    for k in 0..2 {
        let mean = draws.iter().map(|d| d[k]).sum::<f64>() / n as f64;
        let var = draws.iter().map(|d| (d[k] - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let se_mean = (tr.variance()[k] / n as f64).sqrt();
        let se_var = tr.variance()[k] * (2.0 / (n - 1) as f64).sqrt();
        assert!(
            (mean - tr.mean()[k]).abs() < 3.0 * se_mean,
            "mean {k}: {mean} vs {}",
            tr.mean()[k]
        );
        assert!(
            (var - tr.variance()[k]).abs() < 3.0 * se_var,
            "var {k}: {var} vs {}",
            tr.variance()[k]
        );
    }
}

#[test]
fn sampled_steps_follow_the_model_density() {
    // A kernel density estimate of one-step samples agrees with the exact
    // conditional density at a few probe points.
    let model = random_model(attractor(2, 0.5), 1, 3);
    let (y, c) = ([0.4, -0.2], [0.5]);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let n = 200_000;
    let samples: Vec<Vec<f64>> = (0..n).map(|_| model.step(&y, &c, &mut rng).unwrap()).collect();
    let mean: Vec<f64> = (0..2)
        .map(|k| samples.iter().map(|s| s[k]).sum::<f64>() / n as f64)
        .collect();
    let spread: Vec<f64> = (0..2)
        .map(|k| (samples.iter().map(|s| (s[k] - mean[k]).powi(2)).sum::<f64>() / n as f64).sqrt())
        .collect();
    let bw: Vec<f64> = spread.iter().map(|s| 0.1 * s).collect();
    for offset in [[0.0, 0.0], [0.5, 0.0], [0.0, -0.5]] {
        let p: Vec<f64> = (0..2).map(|k| mean[k] + offset[k] * spread[k]).collect();
        let kde = samples
            .iter()
            .map(|s| (-0.5 * ((s[0] - p[0]) / bw[0]).powi(2) - 0.5 * ((s[1] - p[1]) / bw[1]).powi(2)).exp())
            .sum::<f64>()
            / (n as f64 * 2.0 * std::f64::consts::PI * bw[0] * bw[1]);
        let exact = model.log_cond_density(&y, &p, &c).unwrap().exp();
        assert!((kde / exact - 1.0).abs() < 0.1, "at {p:?}: kde {kde} exact {exact}");
    }
}

#[test]
fn cycle_noise_residuals_match_the_noise_scale() {
    let noise = 0.01;
    let spec = MorphingCycleSpec {
        noise,
        ..Default::default()
    };
    let ds = gen_cycle_dataset(std::slice::from_ref(&spec), 20, 4).unwrap();
    // With no morph the curve is a circle, so the radial residual is one
    // component of the isotropic noise.
    let res: Vec<f64> = ds.states().map(|y| norm(y) - spec.base_radius).collect();
    let n = res.len() as f64;
    let mean = res.iter().sum::<f64>() / n;
    let var = res.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let expect = noise * noise;
    assert!(mean.abs() < 3.0 * noise / n.sqrt(), "mean {mean}");
    assert!(
        (var - expect).abs() < 3.0 * expect * (2.0 / (n - 1.0)).sqrt(),
        "var {var} vs {expect}"
    );
}
