use log::info;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::trajectory_rng;
use crate::dataset::{Provenance, Trajectory, TrajectoryDataset};
use crate::error::{Error, Result};

/// A potential-field scene: quadratic attraction to the goal and inverse
/// repulsion from three disks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObstacleSceneSpec {
    pub goal: [f64; 2],
    pub obstacles: [[f64; 2]; 3],
    pub obstacle_radius: f64,
    pub attractive_gain: f64,
    pub repulsive_gain: f64,
    /// Distance from a disk surface beyond which it exerts no force.
    pub repulsive_range: f64,
    pub dt: f64,
    pub max_steps: usize,
    pub goal_tolerance: f64,
    /// Largest displacement per step.
    pub max_speed: f64,
}

impl ObstacleSceneSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.attractive_gain > 0.0 && self.repulsive_gain > 0.0 && self.repulsive_range > 0.0) {
            return Err(Error::InvalidInput("scene gains and range must be positive".into()));
        }
        if !(self.obstacle_radius > 0.0 && self.dt > 0.0 && self.goal_tolerance > 0.0 && self.max_speed > 0.0) {
            return Err(Error::InvalidInput(
                "scene radius, dt, tolerance and speed must be positive".into(),
            ));
        }
        if self.clearance(&self.goal) <= 0.0 {
            return Err(Error::InvalidInput("goal lies inside an obstacle".into()));
        }
        Ok(())
    }

    /// Context vector: the three obstacle centres followed by the goal.
    pub fn context(&self) -> Vec<f64> {
        let mut c: Vec<f64> = self.obstacles.iter().flatten().copied().collect();
        c.extend(self.goal);
        c
    }

    /// Signed distance to the nearest obstacle surface.
    pub fn clearance(&self, y: &[f64; 2]) -> f64 {
        self.obstacles
            .iter()
            .map(|o| (y[0] - o[0]).hypot(y[1] - o[1]) - self.obstacle_radius)
            .fold(f64::INFINITY, f64::min)
    }

    /// `-∇U` at `y`.
    pub fn velocity(&self, y: &[f64; 2]) -> [f64; 2] {
        let mut v = [
            -self.attractive_gain * (y[0] - self.goal[0]),
            -self.attractive_gain * (y[1] - self.goal[1]),
        ];
        for o in &self.obstacles {
            let (dx, dy) = (y[0] - o[0], y[1] - o[1]);
            let dist = dx.hypot(dy);
            let rho = (dist - self.obstacle_radius).max(1e-6);
            if rho < self.repulsive_range {
                let mag = self.repulsive_gain * (1.0 / rho - 1.0 / self.repulsive_range) / (rho * rho);
                v[0] += mag * dx / dist;
                v[1] += mag * dy / dist;
            }
        }
        v
    }

    /// Gradient descent from `start` until within the goal tolerance or out
    /// of steps; returns the path (including `start`) and whether it arrived.
    pub fn expert(&self, start: [f64; 2]) -> (Vec<[f64; 2]>, bool) {
        let mut path = vec![start];
        let mut y = start;
        let near = |y: &[f64; 2]| (y[0] - self.goal[0]).hypot(y[1] - self.goal[1]) <= self.goal_tolerance;
        for _ in 0..self.max_steps {
            if near(&y) {
                return (path, true);
            }
            let v = self.velocity(&y);
            let mut step = [v[0] * self.dt, v[1] * self.dt];
            let len = step[0].hypot(step[1]);
            if len > self.max_speed {
                step = [step[0] * self.max_speed / len, step[1] * self.max_speed / len];
            }
            y = [y[0] + step[0], y[1] + step[1]];
            path.push(y);
        }
        let ok = near(&y);
        (path, ok)
    }
}

/// Sampling ranges for random scenes and starts. Boxes are
/// `[x_min, x_max, y_min, y_max]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneDistribution {
    pub goal_box: [f64; 4],
    pub obstacle_box: [f64; 4],
    pub start_box: [f64; 4],
    pub obstacle_radius: f64,
    pub attractive_gain: f64,
    pub repulsive_gain: f64,
    pub repulsive_range: f64,
    pub dt: f64,
    pub max_steps: usize,
    pub goal_tolerance: f64,
    pub max_speed: f64,
    /// Required expert clearance from every disk.
    pub margin: f64,
    /// Minimum gap between obstacle disks and between disks and the goal.
    pub separation: f64,
    pub noise: f64,
    pub max_retries: usize,
}

impl Default for SceneDistribution {
    fn default() -> Self {
        Self {
            goal_box: [0.5, 0.8, -0.4, 0.4],
            obstacle_box: [-0.35, 0.3, -0.45, 0.45],
            start_box: [-0.95, -0.7, -0.6, 0.6],
            obstacle_radius: 0.12,
            attractive_gain: 1.0,
            repulsive_gain: 0.002,
            repulsive_range: 0.15,
            dt: 0.1,
            max_steps: 200,
            goal_tolerance: 0.01,
            max_speed: 0.08,
            margin: 0.02,
            separation: 0.1,
            noise: 0.0,
            max_retries: 1000,
        }
    }
}

fn uniform_in<R: Rng + ?Sized>(b: &[f64; 4], rng: &mut R) -> [f64; 2] {
    [rng.random_range(b[0]..=b[1]), rng.random_range(b[2]..=b[3])]
}

impl SceneDistribution {
    fn scene(&self, goal: [f64; 2], obstacles: [[f64; 2]; 3]) -> ObstacleSceneSpec {
        ObstacleSceneSpec {
            goal,
            obstacles,
            obstacle_radius: self.obstacle_radius,
            attractive_gain: self.attractive_gain,
            repulsive_gain: self.repulsive_gain,
            repulsive_range: self.repulsive_range,
            dt: self.dt,
            max_steps: self.max_steps,
            goal_tolerance: self.goal_tolerance,
            max_speed: self.max_speed,
        }
    }

    /// Random scene with separated disks that keep clear of the goal.
    pub fn sample_scene<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<ObstacleSceneSpec> {
        let gap = 2.0 * self.obstacle_radius + self.separation;
        for _ in 0..self.max_retries {
            let goal = uniform_in(&self.goal_box, rng);
            let obs = [0, 1, 2].map(|_| uniform_in(&self.obstacle_box, rng));
            let dist = |a: &[f64; 2], b: &[f64; 2]| (a[0] - b[0]).hypot(a[1] - b[1]);
            let apart = (0..3).all(|i| (i + 1..3).all(|j| dist(&obs[i], &obs[j]) >= gap));
            let scene = self.scene(goal, obs);
            if apart && scene.clearance(&goal) >= self.separation + self.margin {
                return Ok(scene);
            }
        }
        Err(Error::Generation("could not place obstacles".into()))
    }

    pub fn sample_start<R: Rng + ?Sized>(&self, scene: &ObstacleSceneSpec, rng: &mut R) -> Result<[f64; 2]> {
        for _ in 0..self.max_retries {
            let s = uniform_in(&self.start_box, rng);
            if scene.clearance(&s) >= self.margin {
                return Ok(s);
            }
        }
        Err(Error::Generation("could not place a start pose".into()))
    }
}

/// One scene and expert demonstration whose path reaches the goal and keeps
/// the required margin; failed scenes are resampled. Returns the number of
/// rejections alongside.
pub fn sample_demonstration<R: Rng + ?Sized>(
    dist: &SceneDistribution,
    rng: &mut R,
) -> Result<(ObstacleSceneSpec, Vec<[f64; 2]>, usize)> {
    for rejected in 0..dist.max_retries {
        let scene = dist.sample_scene(rng)?;
        let start = dist.sample_start(&scene, rng)?;
        let (path, reached) = scene.expert(start);
        let clear = path.iter().all(|p| scene.clearance(p) >= dist.margin);
        if reached && clear && path.len() >= 2 {
            return Ok((scene, path, rejected));
        }
    }
    Err(Error::Generation(format!(
        "no successful expert scene in {} attempts",
        dist.max_retries
    )))
}

/// `n_scenes` demonstrations, one per scene; scene `i` draws from stream `i`
/// of the seed. Context per sample is the scene's 8-D descriptor.
pub fn gen_obstacle_dataset(dist: &SceneDistribution, n_scenes: usize, seed: u64) -> Result<TrajectoryDataset> {
    if n_scenes == 0 {
        return Err(Error::InvalidInput("need at least one scene".into()));
    }
    let mut trajectories = Vec::with_capacity(n_scenes);
    let mut rejected = 0;
    for i in 0..n_scenes {
        let mut rng = trajectory_rng(seed, i as u64);
        let (scene, path, r) = sample_demonstration(dist, &mut rng)?;
        rejected += r;
        let c = scene.context();
        trajectories.push(Trajectory {
            states: path
                .iter()
                .map(|p| {
                    p.iter()
                        .map(|x| x + dist.noise * rng.sample::<f64, _>(StandardNormal))
                        .collect()
                })
                .collect(),
            contexts: vec![c; path.len()],
        });
    }
    if rejected > 0 {
        info!("obstacle data: rejected {rejected} expert scenes");
    }
    let mut prov = Provenance::new("obstacle", seed);
    prov.config.insert("n_scenes".into(), n_scenes.into());
    prov.config.insert("rejected_scenes".into(), rejected.into());
    prov.config.insert(
        "distribution".into(),
        serde_json::to_value(dist).expect("distribution serializes"),
    );
    TrajectoryDataset::new(2, 8, dist.dt, prov, trajectories)
}

/// Rebuilds a scene from an 8-D context using the distribution's physics.
pub fn scene_from_context(dist: &SceneDistribution, c: &[f64]) -> Result<ObstacleSceneSpec> {
    if c.len() != 8 {
        return Err(Error::InvalidInput(format!(
            "obstacle context has length {}, expected 8",
            c.len()
        )));
    }
    Ok(dist.scene([c[6], c[7]], [[c[0], c[1]], [c[2], c[3]], [c[4], c[5]]]))
}
