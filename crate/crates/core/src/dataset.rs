//! Demonstration datasets: sequences of `(state, context)` pairs sampled at a
//! fixed time step, with a JSON file form.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub generator: String,
    pub seed: u64,
    /// Generator parameters, recorded verbatim.
    #[serde(default)]
    pub config: serde_json::Map<String, serde_json::Value>,
}

impl Provenance {
    pub fn new(generator: &str, seed: u64) -> Self {
        Self {
            generator: generator.to_string(),
            seed,
            config: serde_json::Map::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Trajectory {
    pub states: Vec<Vec<f64>>,
    pub contexts: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn transitions(&self) -> usize {
        self.states.len().saturating_sub(1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectoryDataset {
    pub dim_y: usize,
    pub dim_c: usize,
    pub dt: f64,
    pub provenance: Provenance,
    pub trajectories: Vec<Trajectory>,
}

impl TrajectoryDataset {
    pub fn new(
        dim_y: usize,
        dim_c: usize,
        dt: f64,
        provenance: Provenance,
        trajectories: Vec<Trajectory>,
    ) -> Result<Self> {
        let ds = Self {
            dim_y,
            dim_c,
            dt,
            provenance,
            trajectories,
        };
        ds.validate()?;
        Ok(ds)
    }

    /// Checks lengths, dimensions and finiteness; errors name the trajectory.
    pub fn validate(&self) -> Result<()> {
        if self.dim_y == 0 {
            return Err(Error::Validation("dim_y must be positive".into()));
        }
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(Error::Validation(format!("dt = {} must be positive", self.dt)));
        }
        for (i, t) in self.trajectories.iter().enumerate() {
            let fail = |m: String| Err(Error::Validation(format!("trajectory {i}: {m}")));
            if t.states.len() != t.contexts.len() {
                return fail(format!("{} states but {} contexts", t.states.len(), t.contexts.len()));
            }
            if t.states.len() < 2 {
                return fail(format!("needs at least 2 samples, has {}", t.states.len()));
            }
            for (k, (s, c)) in t.states.iter().zip(&t.contexts).enumerate() {
                if s.len() != self.dim_y {
                    return fail(format!("state {k} has length {}, expected {}", s.len(), self.dim_y));
                }
                if c.len() != self.dim_c {
                    return fail(format!("context {k} has length {}, expected {}", c.len(), self.dim_c));
                }
                if !s.iter().chain(c).all(|x| x.is_finite()) {
                    return fail(format!("sample {k} is not finite"));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn transition_count(&self) -> usize {
        self.trajectories.iter().map(Trajectory::transitions).sum()
    }

    pub fn states(&self) -> impl Iterator<Item = &[f64]> + Clone {
        self.trajectories
            .iter()
            .flat_map(|t| t.states.iter().map(Vec::as_slice))
    }

    pub fn contexts(&self) -> impl Iterator<Item = &[f64]> + Clone {
        self.trajectories
            .iter()
            .flat_map(|t| t.contexts.iter().map(Vec::as_slice))
    }

    /// Same header with a different trajectory list.
    pub fn with_trajectories(&self, trajectories: Vec<Trajectory>) -> Self {
        Self {
            trajectories,
            ..self.clone()
        }
    }

    /// Seeded shuffle into `(train, test)`. The training part gets
    /// `round(fraction·n)` trajectories, at least one; the test part may be
    /// empty when `n = 1`.
    pub fn split(&self, fraction: f64, seed: u64) -> Result<(Self, Self)> {
        if !(fraction > 0.0 && fraction < 1.0) {
            return Err(Error::InvalidInput(format!(
                "train fraction {fraction} must lie in (0, 1)"
            )));
        }
        let n = self.len();
        if n == 0 {
            return Err(Error::InvalidInput("cannot split an empty dataset".into()));
        }
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_train = if n == 1 {
            1
        } else {
            ((fraction * n as f64).round() as usize).clamp(1, n - 1)
        };
        let pick = |ids: &[usize]| {
            let mut ids = ids.to_vec();
            ids.sort_unstable();
            self.with_trajectories(ids.iter().map(|&i| self.trajectories[i].clone()).collect())
        };
        Ok((pick(&idx[..n_train]), pick(&idx[n_train..])))
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string(self).expect("dataset serializes")
    }

    /// Parses and validates; nothing is returned on any error.
    pub fn from_json_str(text: &str) -> Result<Self> {
        let ds: Self = serde_json::from_str(text).map_err(Error::from_json)?;
        ds.validate()?;
        Ok(ds)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        self.validate()?;
        std::fs::write(path, self.to_json_string())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }
}
