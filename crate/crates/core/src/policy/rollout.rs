use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::StablePolicyModel;
use crate::error::{check_dim, Error, Result};

/// How the context evolves between steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ContextDynamics {
    Constant,
    /// `c ← c* + (c - c*)·exp(-rate·Δt)`.
    ExponentialApproach {
        target: Vec<f64>,
        rate: f64,
    },
}

impl ContextDynamics {
    pub fn validate(&self, context_dim: usize) -> Result<()> {
        if let ContextDynamics::ExponentialApproach { target, rate } = self {
            check_dim("context target", context_dim, target.len())?;
            if !(rate.is_finite() && *rate > 0.0) {
                return Err(Error::InvalidInput(format!("context rate {rate} must be positive")));
            }
            if !target.iter().all(|x| x.is_finite()) {
                return Err(Error::InvalidInput("non-finite context target".into()));
            }
        }
        Ok(())
    }

    pub fn advance(&self, c: &[f64], dt: f64) -> Vec<f64> {
        match self {
            ContextDynamics::Constant => c.to_vec(),
            ContextDynamics::ExponentialApproach { target, rate } => {
                let k = (-rate * dt).exp();
                c.iter().zip(target).map(|(x, t)| t + (x - t) * k).collect()
            }
        }
    }

    /// Parses `"c1,c2,...:rate"`.
    pub fn parse_approach(s: &str) -> Result<Self> {
        let (target, rate) = s
            .rsplit_once(':')
            .ok_or_else(|| Error::InvalidInput(format!("context dynamics {s:?} must be \"c*:rate\"")))?;
        let rate = rate
            .trim()
            .parse::<f64>()
            .map_err(|e| Error::InvalidInput(format!("rate {rate:?}: {e}")))?;
        Ok(ContextDynamics::ExponentialApproach {
            target: parse_vector(target)?,
            rate,
        })
    }
}

/// Comma-separated reals; the empty string is the empty vector.
pub fn parse_vector(s: &str) -> Result<Vec<f64>> {
    let s = s.trim();
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|e| Error::InvalidInput(format!("number {t:?}: {e}")))
        })
        .collect()
}

/// A displacement added to the state at a given step index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Perturbation {
    pub step: usize,
    pub displacement: Vec<f64>,
}

impl FromStr for Perturbation {
    type Err = Error;

    /// `"step:dx,dy[,...]"`.
    fn from_str(s: &str) -> Result<Self> {
        let (step, disp) = s
            .split_once(':')
            .ok_or_else(|| Error::InvalidInput(format!("perturbation {s:?} must be \"step:dx,dy,...\"")))?;
        let step = step
            .trim()
            .parse::<usize>()
            .map_err(|e| Error::InvalidInput(format!("perturbation step {step:?}: {e}")))?;
        let displacement = parse_vector(disp)?;
        if displacement.is_empty() {
            return Err(Error::InvalidInput(format!("perturbation {s:?} has no displacement")));
        }
        Ok(Self { step, displacement })
    }
}

/// Recorded trajectory of the policy. `states[k]` is the state after any
/// perturbation at step `k`, and `latent[k]` its latent preimage under
/// `contexts[k]`. `log_densities[k]` is the log-density of the sampled
/// transition into step `k` (`None` on step 0, for noiseless models and for
/// transitions without a density).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Rollout {
    pub dt: f64,
    pub states: Vec<Vec<f64>>,
    pub contexts: Vec<Vec<f64>>,
    pub latent: Vec<Vec<f64>>,
    pub log_densities: Vec<Option<f64>>,
    #[serde(default)]
    pub perturbations: Vec<Perturbation>,
}

impl Rollout {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn last_state(&self) -> &[f64] {
        self.states.last().expect("rollouts are non-empty")
    }

    pub fn last_context(&self) -> &[f64] {
        self.contexts.last().expect("rollouts are non-empty")
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("rollout serializes")
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let r: Rollout = serde_json::from_str(text).map_err(Error::from_json)?;
        let n = r.states.len();
        if n == 0 || r.contexts.len() != n || r.latent.len() != n || r.log_densities.len() != n {
            return Err(Error::Validation(
                "rollout sequences must share a non-zero length".into(),
            ));
        }
        Ok(r)
    }
}

fn at_step(k: usize, e: Error) -> Error {
    match e {
        Error::Numerical(m) => Error::Numerical(format!("step {k}: {m}")),
        Error::DegenerateDensity(m) => Error::DegenerateDensity(format!("step {k}: {m}")),
        Error::NonFinite { node, op } => Error::Numerical(format!("step {k}: non-finite value at node {node} ({op})")),
        other => other,
    }
}

impl StablePolicyModel {
    /// Iterates [`StablePolicyModel::step`] `steps` times from `y0` under
    /// context `c0`, applying the perturbations at their step indices.
    pub fn rollout<R: Rng + ?Sized>(
        &self,
        y0: &[f64],
        c0: &[f64],
        context_dyn: &ContextDynamics,
        steps: usize,
        perturbations: &[Perturbation],
        rng: &mut R,
    ) -> Result<Rollout> {
        check_dim("rollout start", self.dim(), y0.len())?;
        check_dim("rollout context", self.context_dim(), c0.len())?;
        context_dyn.validate(self.context_dim())?;
        for p in perturbations {
            check_dim("perturbation", self.dim(), p.displacement.len())?;
            if p.step > steps {
                return Err(Error::InvalidInput(format!(
                    "perturbation at step {} beyond rollout length {steps}",
                    p.step
                )));
            }
        }
        let noisy = !self.latent().is_noiseless();
        let dt = self.dt();
        let mut states = Vec::with_capacity(steps + 1);
        let mut contexts = Vec::with_capacity(steps + 1);
        let mut latent = Vec::with_capacity(steps + 1);
        let mut log_densities = Vec::with_capacity(steps + 1);

        let mut y = y0.to_vec();
        let mut c = c0.to_vec();
        let mut density = None;
        for k in 0..=steps {
            for p in perturbations.iter().filter(|p| p.step == k) {
                y.iter_mut().zip(&p.displacement).for_each(|(a, b)| *a += b);
            }
            let z = self.to_latent(&y, &c).map_err(|e| at_step(k, e))?;
            states.push(y.clone());
            contexts.push(c.clone());
            latent.push(z);
            log_densities.push(density);
            if k == steps {
                break;
            }
            let (next, _) = self.step_traced(&y, &c, rng).map_err(|e| at_step(k, e))?;
            density = if noisy {
                self.log_cond_density(&y, &next, &c).ok()
            } else {
                None
            };
            c = context_dyn.advance(&c, dt);
            y = next;
        }
        Ok(Rollout {
            dt,
            states,
            contexts,
            latent,
            log_densities,
            perturbations: perturbations.to_vec(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::super::tests::{attractor, random_model};
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_step_rollout() {
        let model = random_model(1, attractor(0.2), 1);
        let r = model
            .rollout(
                &[0.5, 0.5],
                &[0.0],
                &ContextDynamics::Constant,
                1,
                &[],
                &mut ChaCha8Rng::seed_from_u64(0),
            )
            .unwrap();
        assert_eq!(r.len(), 2);
        assert!(r.log_densities[0].is_none() && r.log_densities[1].is_some());
    }

    #[test]
    fn perturbation_is_additive() {
        let model = random_model(2, attractor(0.2), 1);
        let run = |p: &[Perturbation]| {
            model
                .rollout(
                    &[0.5, 0.5],
                    &[0.0],
                    &ContextDynamics::Constant,
                    6,
                    p,
                    &mut ChaCha8Rng::seed_from_u64(4),
                )
                .unwrap()
        };
        let base = run(&[]);
        let pushed = run(&["3:1.0,-0.5".parse().unwrap()]);
        assert_eq!(base.states[..3], pushed.states[..3]);
        assert!((pushed.states[3][0] - base.states[3][0] - 1.0).abs() < 1e-12);
        assert!((pushed.states[3][1] - base.states[3][1] + 0.5).abs() < 1e-12);
    }

    #[test]
    fn latent_trace_maps_to_states() {
        let model = random_model(3, attractor(0.3), 1);
        let dynamics = ContextDynamics::ExponentialApproach {
            target: vec![1.0],
            rate: 2.0,
        };
        let r = model
            .rollout(
                &[1.0, -1.0],
                &[0.0],
                &dynamics,
                20,
                &[],
                &mut ChaCha8Rng::seed_from_u64(5),
            )
            .unwrap();
        for k in 0..r.len() {
            let y = model.to_state(&r.latent[k], &r.contexts[k]).unwrap();
            for (a, b) in y.iter().zip(&r.states[k]) {
                assert!((a - b).abs() < 1e-8);
            }
        }
        let gaps: Vec<f64> = r.contexts.iter().map(|c| (c[0] - 1.0).abs()).collect();
        assert!(gaps.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn parse_flags() {
        let p: Perturbation = "500:1.0,0.0".parse().unwrap();
        assert_eq!(
            p,
            Perturbation {
                step: 500,
                displacement: vec![1.0, 0.0]
            }
        );
        assert!("x:1".parse::<Perturbation>().is_err());
        assert!("5".parse::<Perturbation>().is_err());
        assert_eq!(
            ContextDynamics::parse_approach("0.5,1:2").unwrap(),
            ContextDynamics::ExponentialApproach {
                target: vec![0.5, 1.0],
                rate: 2.0
            }
        );
    }

    #[test]
    fn json_round_trip() {
        let model = random_model(4, attractor(0.0), 1);
        let r = model
            .rollout(
                &[1.0, 0.0],
                &[0.0],
                &ContextDynamics::Constant,
                3,
                &[],
                &mut ChaCha8Rng::seed_from_u64(0),
            )
            .unwrap();
        let text = r.to_json_string();
        assert!(text.contains("\"log_densities\""));
        assert_eq!(Rollout::from_json_str(&text).unwrap(), r);
    }
}
