use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::trajectory_rng;
use crate::dataset::{Provenance, Trajectory, TrajectoryDataset};
use crate::error::{Error, Result};

pub const GOTO_CONTEXT_DIM: usize = 6;

/// Joint-space reaching: a critically damped second-order system released at
/// rest and converging to a target that depends smoothly on a 6-D context.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GoToTaskSpec {
    pub state_dim: usize,
    pub n_traj: usize,
    pub duration: f64,
    pub dt: f64,
    /// Natural frequency of the critically damped response.
    pub omega: f64,
    pub noise: f64,
    /// Starts are uniform in `[-spread, spread]^d`.
    pub start_spread: f64,
    /// Contexts are uniform in `[-range, range]^6`.
    pub context_range: f64,
}

impl Default for GoToTaskSpec {
    fn default() -> Self {
        Self {
            state_dim: 7,
            n_traj: 220,
            duration: 4.0,
            dt: 0.05,
            omega: 3.0,
            noise: 0.001,
            start_spread: 1.0,
            context_range: 1.0,
        }
    }
}

impl GoToTaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.state_dim < 2 || self.n_traj == 0 {
            return Err(Error::InvalidInput(
                "go-to task needs state_dim >= 2 and n_traj >= 1".into(),
            ));
        }
        let pos = [
            self.duration,
            self.dt,
            self.omega,
            self.start_spread,
            self.context_range,
        ];
        if !pos.iter().all(|x| x.is_finite() && *x > 0.0) || !(self.noise >= 0.0) {
            return Err(Error::InvalidInput(
                "go-to durations, rates and ranges must be positive".into(),
            ));
        }
        if self.duration < 2.0 * self.dt {
            return Err(Error::InvalidInput("duration must cover at least two steps".into()));
        }
        Ok(())
    }

    pub fn samples(&self) -> usize {
        (self.duration / self.dt).round() as usize + 1
    }

    /// Fixed smooth map from the context to the joint target.
    pub fn target(&self, c: &[f64]) -> Vec<f64> {
        (0..self.state_dim)
            .map(|i| {
                let a = c[i % GOTO_CONTEXT_DIM];
                let b = c[(i + 1) % GOTO_CONTEXT_DIM];
                let e = c[(i + 3) % GOTO_CONTEXT_DIM];
                0.5 * (0.8 * a + 0.3 * b).tanh() + 0.15 * (e + 0.4 * i as f64).sin()
            })
            .collect()
    }

    /// Noise-free position at time `t` from rest at `q0`.
    pub fn position(&self, q0: &[f64], target: &[f64], t: f64) -> Vec<f64> {
        let k = (1.0 + self.omega * t) * (-self.omega * t).exp();
        q0.iter().zip(target).map(|(a, g)| g + (a - g) * k).collect()
    }

    pub fn trajectory<R: Rng + ?Sized>(&self, q0: &[f64], c: &[f64], rng: &mut R) -> Trajectory {
        let target = self.target(c);
        let states = (0..self.samples())
            .map(|k| {
                self.position(q0, &target, k as f64 * self.dt)
                    .into_iter()
                    .map(|x| x + self.noise * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect();
        Trajectory {
            states,
            contexts: vec![c.to_vec(); self.samples()],
        }
    }
}

/// `spec.n_traj` reaching motions with random start and context; trajectory
/// `i` draws from stream `i` of the seed.
pub fn gen_goto_dataset(spec: &GoToTaskSpec, seed: u64) -> Result<TrajectoryDataset> {
    spec.validate()?;
    let trajectories = (0..spec.n_traj)
        .map(|i| {
            let mut rng = trajectory_rng(seed, i as u64);
            let c: Vec<f64> = (0..GOTO_CONTEXT_DIM)
                .map(|_| rng.random_range(-spec.context_range..=spec.context_range))
                .collect();
            let q0: Vec<f64> = (0..spec.state_dim)
                .map(|_| rng.random_range(-spec.start_spread..=spec.start_spread))
                .collect();
            spec.trajectory(&q0, &c, &mut rng)
        })
        .collect();
    let mut prov = Provenance::new("goto", seed);
    prov.config
        .insert("spec".into(), serde_json::to_value(spec).expect("spec serializes"));
    TrajectoryDataset::new(spec.state_dim, GOTO_CONTEXT_DIM, spec.dt, prov, trajectories)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::time::Instant;

    #[test]
    fn noiseless_long_run_reaches_target() {
        let spec = GoToTaskSpec {
            noise: 0.0,
            duration: 6.0,
            n_traj: 5,
            ..Default::default()
        };
        let ds = gen_goto_dataset(&spec, 1).unwrap();
        for t in &ds.trajectories {
            let target = spec.target(&t.contexts[0]);
            let last = t.states.last().unwrap();
            let err = last
                .iter()
                .zip(&target)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            assert!(err < 1e-3, "{err}");
        }
    }

    #[test]
    fn same_start_and_context_differ_only_by_noise() {
        let spec = GoToTaskSpec::default();
        let q0 = vec![0.2; 7];
        let c = vec![0.1, -0.3, 0.5, 0.0, 0.9, -0.7];
        let mut r1 = trajectory_rng(0, 1);
        let mut r2 = trajectory_rng(0, 2);
        let a = spec.trajectory(&q0, &c, &mut r1);
        let b = spec.trajectory(&q0, &c, &mut r2);
        let quiet = GoToTaskSpec {
            noise: 0.0,
            ..spec.clone()
        }
        .trajectory(&q0, &c, &mut r1);
        for k in 0..a.len() {
            for i in 0..7 {
                assert!((a.states[k][i] - quiet.states[k][i]).abs() < 10.0 * spec.noise);
                assert!((b.states[k][i] - quiet.states[k][i]).abs() < 10.0 * spec.noise);
            }
        }
        assert_ne!(a.states, b.states);
    }

    #[test]
    fn full_size_generation_is_fast() {
        let t0 = Instant::now();
        let ds = gen_goto_dataset(&GoToTaskSpec::default(), 3).unwrap();
        assert_eq!(ds.len(), 220);
        assert!(t0.elapsed().as_secs_f64() < 10.0);
    }
}
