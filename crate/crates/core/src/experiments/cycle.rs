use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::trajectory_rng;
use crate::dataset::{Provenance, Trajectory, TrajectoryDataset};
use crate::error::{Error, Result};

/// Star-morph closed curve `r(θ, c) = base·(1 + a·c·sin(kθ))` traversed at
/// constant angular speed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MorphingCycleSpec {
    pub base_radius: f64,
    pub amplitude: f64,
    pub lobes: u32,
    pub context: f64,
    /// Radians per unit time.
    pub angular_speed: f64,
    pub noise: f64,
    pub samples_per_revolution: usize,
    pub revolutions: f64,
}

impl Default for MorphingCycleSpec {
    fn default() -> Self {
        Self {
            base_radius: 1.0,
            amplitude: 0.3,
            lobes: 5,
            context: 0.0,
            angular_speed: 2.0 * PI,
            noise: 0.001,
            samples_per_revolution: 128,
            revolutions: 2.0,
        }
    }
}

impl MorphingCycleSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidInput(format!("cycle spec: {m}")));
        if !(self.base_radius > 0.0) {
            return bad("base radius must be positive");
        }
        if self.lobes < 2 {
            return bad("lobe count must be at least 2");
        }
        if !(0.0..=1.0).contains(&self.context) {
            return bad("context must lie in [0, 1]");
        }
        if !(self.amplitude >= 0.0 && self.amplitude * self.context < 1.0) {
            return bad("need 0 <= a and a·c < 1");
        }
        if !(self.angular_speed.is_finite() && self.angular_speed != 0.0) {
            return bad("angular speed must be non-zero");
        }
        if !(self.noise >= 0.0) {
            return bad("noise must be non-negative");
        }
        if self.samples_per_revolution < 16 {
            return bad("need at least 16 samples per revolution");
        }
        if !(self.revolutions > 0.0) {
            return bad("revolutions must be positive");
        }
        Ok(())
    }

    pub fn radius(&self, theta: f64) -> f64 {
        self.base_radius * (1.0 + self.amplitude * self.context * (self.lobes as f64 * theta).sin())
    }

    pub fn point(&self, theta: f64) -> [f64; 2] {
        let r = self.radius(theta);
        [r * theta.cos(), r * theta.sin()]
    }

    pub fn dt(&self) -> f64 {
        2.0 * PI / (self.angular_speed.abs() * self.samples_per_revolution as f64)
    }

    pub fn samples(&self) -> usize {
        (self.revolutions * self.samples_per_revolution as f64).ceil() as usize + 1
    }

    fn same_geometry(&self, other: &Self) -> bool {
        Self {
            context: other.context,
            ..self.clone()
        } == *other
    }

    /// One noisy traversal starting at phase `theta0`.
    pub fn trajectory<R: Rng + ?Sized>(&self, theta0: f64, rng: &mut R) -> Trajectory {
        let step = self.angular_speed * self.dt();
        let states = (0..self.samples())
            .map(|j| {
                let p = self.point(theta0 + step * j as f64);
                p.iter()
                    .map(|x| x + self.noise * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect();
        Trajectory {
            states,
            contexts: vec![vec![self.context]; self.samples()],
        }
    }
}

/// `n_traj` trajectories per spec, each from a uniformly random phase.
/// Trajectory `i` of the output draws from stream `i` of the seed.
pub fn gen_cycle_dataset(specs: &[MorphingCycleSpec], n_traj: usize, seed: u64) -> Result<TrajectoryDataset> {
    if specs.is_empty() || n_traj == 0 {
        return Err(Error::InvalidInput("need at least one spec and one trajectory".into()));
    }
    for s in specs {
        s.validate()?;
        if !specs[0].same_geometry(s) {
            return Err(Error::InvalidInput("cycle specs may differ only in context".into()));
        }
    }
    let mut trajectories = Vec::with_capacity(specs.len() * n_traj);
    for (si, spec) in specs.iter().enumerate() {
        for j in 0..n_traj {
            let mut rng = trajectory_rng(seed, (si * n_traj + j) as u64);
            let theta0 = rng.random_range(0.0..2.0 * PI);
            trajectories.push(spec.trajectory(theta0, &mut rng));
        }
    }
    let mut prov = Provenance::new("cycle", seed);
    prov.config.insert("n_traj".into(), n_traj.into());
    prov.config
        .insert("specs".into(), serde_json::to_value(specs).expect("specs serialize"));
    TrajectoryDataset::new(2, 1, specs[0].dt(), prov, trajectories)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_amplitude_gives_one_circle() {
        let spec = MorphingCycleSpec {
            amplitude: 0.0,
            context: 0.7,
            ..Default::default()
        };
        for t in [0.0, 1.0, 2.5] {
            assert_eq!(spec.radius(t), 1.0);
        }
    }

    #[test]
    fn zero_context_is_base_circle() {
        let spec = MorphingCycleSpec {
            base_radius: 2.0,
            amplitude: 0.9,
            lobes: 7,
            ..Default::default()
        };
        assert_eq!(spec.radius(0.3), 2.0);
    }

    #[test]
    fn lobe_peak() {
        let spec = MorphingCycleSpec {
            base_radius: 1.5,
            context: 1.0,
            ..Default::default()
        };
        assert!((spec.radius(PI / 10.0) - 1.5 * 1.3).abs() < 1e-12);
    }

    #[test]
    fn noiseless_samples_lie_on_curve() {
        let spec = MorphingCycleSpec {
            noise: 0.0,
            context: 1.0,
            ..Default::default()
        };
        let ds = gen_cycle_dataset(std::slice::from_ref(&spec), 3, 1).unwrap();
        for y in ds.states() {
            let theta = y[1].atan2(y[0]);
            assert!((y[0].hypot(y[1]) - spec.radius(theta)).abs() < 1e-12);
        }
    }

    #[test]
    fn deterministic_and_validated() {
        let specs = [
            MorphingCycleSpec::default(),
            MorphingCycleSpec {
                context: 1.0,
                ..Default::default()
            },
        ];
        assert_eq!(
            gen_cycle_dataset(&specs, 2, 5).unwrap(),
            gen_cycle_dataset(&specs, 2, 5).unwrap()
        );
        let bad = MorphingCycleSpec {
            lobes: 1,
            ..Default::default()
        };
        assert!(gen_cycle_dataset(&[bad], 1, 0).is_err());
        let other = MorphingCycleSpec {
            base_radius: 2.0,
            ..Default::default()
        };
        assert!(gen_cycle_dataset(&[MorphingCycleSpec::default(), other], 1, 0).is_err());
    }
}
