//! The composed policy: invert the flow, take a latent Euler–Maruyama step,
//! push forward again. States and contexts are given in raw units; the model
//! standardizes them internally.
//!
//! One context value is used for both the inverse and the forward map of a
//! step, and the transition density `p(y_next | y_prev, c)` is conditioned on
//! that same value.

mod rollout;
mod standardize;
mod verify;

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Matrix, Var};
use crate::error::{check_dim, Error, Result};
use crate::flow::{BoundFlow, ConditionedFlow, FlowJson};
use crate::latent::LatentDynamics;

pub use rollout::{parse_vector, ContextDynamics, Perturbation, Rollout};
pub use standardize::Standardization;
pub use verify::{sample_ball, ConvergenceOptions, ConvergenceReport, GeneratorCheck, CONDITION_LIMIT};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, PartialEq)]
pub struct StablePolicyModel {
    flow: ConditionedFlow,
    latent: LatentDynamics,
    standardization: Standardization,
}

/// Checkpoint file: flow, latent process and standardization in one object.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelCheckpoint {
    pub flow: FlowJson,
    pub latent: LatentDynamics,
    pub standardization: Standardization,
}

fn check_finite(what: &str, v: &[f64]) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numerical(format!("non-finite {what} {v:?}")))
    }
}

impl StablePolicyModel {
    pub fn new(flow: ConditionedFlow, latent: LatentDynamics, standardization: Standardization) -> Result<Self> {
        latent.validate()?;
        standardization.validate()?;
        check_dim("latent dim", flow.dim(), latent.dim())?;
        check_dim("standardization dim", flow.dim(), standardization.dim())?;
        check_dim(
            "standardization context dim",
            flow.context_dim(),
            standardization.context_dim(),
        )?;
        Ok(Self {
            flow,
            latent,
            standardization,
        })
    }

    /// Model with a layer-free flow and unit standardization: `f = id`.
    pub fn identity(latent: LatentDynamics, context_dim: usize) -> Result<Self> {
        let d = latent.dim();
        let flow = ConditionedFlow::from_layers(d, context_dim, Vec::new())?;
        Self::new(flow, latent, Standardization::identity(d, context_dim))
    }

    pub fn dim(&self) -> usize {
        self.flow.dim()
    }

    pub fn context_dim(&self) -> usize {
        self.flow.context_dim()
    }

    pub fn flow(&self) -> &ConditionedFlow {
        &self.flow
    }

    pub fn flow_mut(&mut self) -> &mut ConditionedFlow {
        &mut self.flow
    }

    pub fn latent(&self) -> &LatentDynamics {
        &self.latent
    }

    pub fn standardization(&self) -> &Standardization {
        &self.standardization
    }

    pub fn dt(&self) -> f64 {
        self.latent.dt()
    }

    /// Same model with the latent noise switched off.
    pub fn noiseless(&self) -> Self {
        Self {
            latent: self.latent.without_noise(),
            ..self.clone()
        }
    }

    pub fn with_latent(&self, latent: LatentDynamics) -> Result<Self> {
        Self::new(self.flow.clone(), latent, self.standardization.clone())
    }

    fn check_point(&self, y: &[f64], c: &[f64]) -> Result<()> {
        check_dim("state", self.dim(), y.len())?;
        check_dim("context", self.context_dim(), c.len())?;
        check_finite("state", y)?;
        check_finite("context", c)
    }

    /// `z = f⁻¹(standardize(y), standardize(c))`.
    pub fn to_latent(&self, y: &[f64], c: &[f64]) -> Result<Vec<f64>> {
        self.check_point(y, c)?;
        let st = &self.standardization;
        Ok(self.flow.inverse(&st.state(y), &st.context(c))?.0)
    }

    /// `y = destandardize(f(z, standardize(c)))`.
    pub fn to_state(&self, z: &[f64], c: &[f64]) -> Result<Vec<f64>> {
        check_dim("latent point", self.dim(), z.len())?;
        check_dim("context", self.context_dim(), c.len())?;
        let st = &self.standardization;
        let (y, _) = self.flow.forward(z, &st.context(c))?;
        Ok(st.unstate(&y))
    }

    pub fn to_latent_batch(&self, y: &Matrix, c: &Matrix) -> Result<Matrix> {
        let st = &self.standardization;
        Ok(self.flow.inverse_batch(&st.state_rows(y), &st.context_rows(c))?.0)
    }

    pub fn to_state_batch(&self, z: &Matrix, c: &Matrix) -> Result<Matrix> {
        let st = &self.standardization;
        let (y, _) = self.flow.forward_batch(z, &st.context_rows(c))?;
        Ok(st.unstate_rows(&y))
    }

    /// One stochastic step; returns `(y_next, z_next)`.
    pub fn step_traced<R: Rng + ?Sized>(&self, y: &[f64], c: &[f64], rng: &mut R) -> Result<(Vec<f64>, Vec<f64>)> {
        let z = self.to_latent(y, c)?;
        let z_next = self.latent.em_step(&z, rng)?;
        check_finite("latent state", &z_next)?;
        let y_next = self.to_state(&z_next, c)?;
        check_finite("state", &y_next)?;
        Ok((y_next, z_next))
    }

    pub fn step<R: Rng + ?Sized>(&self, y: &[f64], c: &[f64], rng: &mut R) -> Result<Vec<f64>> {
        Ok(self.step_traced(y, c, rng)?.0)
    }

    /// Row-wise [`Self::step`]; row `i` draws its noise after rows `0..i`.
    pub fn step_batch<R: Rng + ?Sized>(&self, y: &Matrix, c: &Matrix, rng: &mut R) -> Result<Matrix> {
        check_dim("state", self.dim(), y.ncols())?;
        let z = self.to_latent_batch(y, c)?;
        let mut next = Matrix::zeros(z.dim());
        for (i, zr) in z.rows().into_iter().enumerate() {
            let zn = self.latent.em_step(&zr.to_vec(), rng)?;
            check_finite("latent state", &zn)?;
            next.row_mut(i).assign(&ndarray::ArrayView1::from(&zn));
        }
        let out = self.to_state_batch(&next, c)?;
        if !out.iter().all(|v| v.is_finite()) {
            return Err(Error::Numerical("non-finite state in batched step".into()));
        }
        Ok(out)
    }

    /// Exact `log p(y_next | y_prev, c)` in raw units.
    pub fn log_cond_density(&self, y_prev: &[f64], y_next: &[f64], c: &[f64]) -> Result<f64> {
        self.check_point(y_prev, c)?;
        check_dim("state", self.dim(), y_next.len())?;
        let st = &self.standardization;
        let ct = st.context(c);
        let (z_prev, _) = self.flow.inverse(&st.state(y_prev), &ct)?;
        let (z_next, inv_ld) = self.flow.inverse(&st.state(y_next), &ct)?;
        Ok(self.latent.log_transition(&z_prev, &z_next)? + inv_ld - st.log_scale())
    }

    /// Static density of an initial state: a standard normal in latent space
    /// pulled through the flow.
    pub fn log_initial_density(&self, y: &[f64], c: &[f64]) -> Result<f64> {
        self.check_point(y, c)?;
        let st = &self.standardization;
        let (z, inv_ld) = self.flow.inverse(&st.state(y), &st.context(c))?;
        let quad: f64 = z.iter().map(|x| x * x).sum();
        Ok(-0.5 * (quad + LN_2PI * z.len() as f64) + inv_ld - st.log_scale())
    }

    /// Batched transition log-density as a graph node (`B×1`). Inputs are
    /// already standardized; `flow` must be this model's flow bound to `g`.
    pub fn log_density_graph(&self, g: &mut Graph<'_>, flow: &BoundFlow<'_>, prev: Var, next: Var, ctx: Var) -> Var {
        let (z_prev, _) = flow.inverse(g, prev, ctx);
        let (z_next, inv_ld) = flow.inverse(g, next, ctx);
        let lt = self.latent.log_transition_graph(g, z_prev, z_next);
        let total = g.add(lt, inv_ld);
        g.add_scalar(total, -self.standardization.log_scale())
    }

    /// Graph form of [`Self::log_initial_density`] on standardized inputs.
    pub fn log_initial_graph(&self, g: &mut Graph<'_>, flow: &BoundFlow<'_>, y: Var, ctx: Var) -> Var {
        let (z, inv_ld) = flow.inverse(g, y, ctx);
        let sq = g.square(z);
        let quad = g.sum_cols(sq);
        let base = g.scale(quad, -0.5);
        let total = g.add(base, inv_ld);
        let d = self.dim() as f64;
        g.add_scalar(total, -0.5 * LN_2PI * d - self.standardization.log_scale())
    }

    /// Pullback Lyapunov function `V(y) = U(f⁻¹(y))`.
    pub fn pullback_v(&self, y: &[f64], c: &[f64]) -> Result<f64> {
        self.latent.lyapunov_u(&self.to_latent(y, c)?)
    }

    /// Distance of `f⁻¹(y)` to the latent attractor set.
    pub fn distance_to_attractor(&self, y: &[f64], c: &[f64]) -> Result<f64> {
        self.latent.distance_to_attractor(&self.to_latent(y, c)?)
    }

    pub fn to_checkpoint(&self) -> ModelCheckpoint {
        ModelCheckpoint {
            flow: self.flow.to_json(),
            latent: self.latent.clone(),
            standardization: self.standardization.clone(),
        }
    }

    pub fn from_checkpoint(ck: &ModelCheckpoint) -> Result<Self> {
        let flow = ConditionedFlow::from_json(&ck.flow)?;
        Self::new(flow, ck.latent.clone(), ck.standardization.clone()).map_err(|e| Error::Validation(e.to_string()))
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(&self.to_checkpoint()).expect("checkpoint serializes")
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let ck: ModelCheckpoint = serde_json::from_str(text).map_err(Error::from_json)?;
        Self::from_checkpoint(&ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json_string())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::FlowConfig;
    use crate::latent::{LimitCycleLatent, LinearAttractor};
    use ndarray::Array2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn attractor(sigma: f64) -> LatentDynamics {
        LatentDynamics::Attractor(LinearAttractor::new(2, 1.0, sigma, 0.1).unwrap())
    }

    pub(crate) fn random_model(seed: u64, latent: LatentDynamics, ctx: usize) -> StablePolicyModel {
        use crate::autodiff::Parameterized;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = FlowConfig {
            layers: 4,
            hidden: vec![8],
            ..FlowConfig::default()
        };
        let mut flow = ConditionedFlow::new(latent.dim(), ctx, &cfg, &mut rng).unwrap();
        let mut p = flow.flatten();
        for v in p.as_mut_slice() {
            *v = rng.random_range(-0.5..0.5);
        }
        flow.unflatten(&p).unwrap();
        let d = latent.dim();
        let st = Standardization {
            state_shift: (0..d).map(|i| 0.1 * i as f64).collect(),
            state_scale: (0..d).map(|i| 1.0 + 0.5 * i as f64).collect(),
            context_shift: vec![0.2; ctx],
            context_scale: vec![2.0; ctx],
            data_radius: 1.0,
        };
        StablePolicyModel::new(flow, latent, st).unwrap()
    }

    #[test]
    fn identity_noiseless_step_is_latent_contraction() {
        let model = StablePolicyModel::identity(attractor(0.0), 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let y = model.step(&[1.0, -2.0], &[], &mut rng).unwrap();
        assert!((y[0] - 0.9).abs() < 1e-15 && (y[1] + 1.8).abs() < 1e-15);
    }

    #[test]
    fn stepping_is_deterministic_given_seed() {
        let model = random_model(1, attractor(0.3), 1);
        let a = model
            .step(&[0.5, 0.5], &[1.0], &mut ChaCha8Rng::seed_from_u64(7))
            .unwrap();
        let b = model
            .step(&[0.5, 0.5], &[1.0], &mut ChaCha8Rng::seed_from_u64(7))
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn batch_step_matches_pointwise() {
        let model = random_model(2, attractor(0.3), 1);
        let ys = ndarray::array![[0.5, 0.5], [-1.0, 2.0]];
        let cs = ndarray::array![[0.0], [1.0]];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let batch = model.step_batch(&ys, &cs, &mut rng).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for i in 0..2 {
            let y = model.step(&ys.row(i).to_vec(), &cs.row(i).to_vec(), &mut rng).unwrap();
            for k in 0..2 {
                assert!((y[k] - batch[[i, k]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identity_density_is_latent_transition() {
        let model = StablePolicyModel::identity(attractor(0.5), 0).unwrap();
        let lp = model.log_cond_density(&[1.0, 0.5], &[0.8, 0.3], &[]).unwrap();
        let lt = model.latent().log_transition(&[1.0, 0.5], &[0.8, 0.3]).unwrap();
        assert_eq!(lp, lt);
    }

    #[test]
    fn density_composes_latent_and_flow_terms() {
        let model = random_model(4, attractor(0.5), 1);
        let c = [0.7];
        let ct = model.standardization().context(&c);
        let (zp, zn) = (vec![0.4, -0.3], vec![0.35, -0.2]);
        let (yp, _) = model.flow().forward(&zp, &ct).unwrap();
        let (yn, fwd_ld) = model.flow().forward(&zn, &ct).unwrap();
        let st = model.standardization();
        let lp = model.log_cond_density(&st.unstate(&yp), &st.unstate(&yn), &c).unwrap();
        let expected = model.latent().log_transition(&zp, &zn).unwrap() - fwd_ld - st.log_scale();
        assert!((lp - expected).abs() < 1e-10, "{lp} vs {expected}");
    }

    #[test]
    fn density_normalizes_on_a_grid() {
        let model = random_model(5, attractor(0.5), 1);
        let c = [0.3];
        let y_prev = model.to_state(&[1.0, -0.5], &c).unwrap();
        let z_prev = model.to_latent(&y_prev, &c).unwrap();
        let mode = model
            .to_state(model.latent().transition(&z_prev).unwrap().mean(), &c)
            .unwrap();
        let (n, half) = (241, 1.5);
        let h = 2.0 * half / (n - 1) as f64;
        let mut mass = 0.0;
        for i in 0..n {
            for j in 0..n {
                let y = [mode[0] - half + i as f64 * h, mode[1] - half + j as f64 * h];
                mass += model.log_cond_density(&y_prev, &y, &c).unwrap().exp() * h * h;
            }
        }
        assert!((mass - 1.0).abs() < 2e-2, "mass {mass}");
    }

    #[test]
    fn degenerate_density_at_equilibrium() {
        let model = StablePolicyModel::identity(attractor(0.5), 0).unwrap();
        assert!(matches!(
            model.log_cond_density(&[0.0, 0.0], &[0.1, 0.0], &[]),
            Err(Error::DegenerateDensity(_))
        ));
    }

    #[test]
    fn graph_density_matches_pointwise() {
        let cycle = LatentDynamics::LimitCycle(LimitCycleLatent::new(3, 1.0, 2.0, 1.0, 0.4, 0.2, 0.05).unwrap());
        for latent in [attractor(0.4), cycle] {
            let model = random_model(6, latent, 2);
            let d = model.dim();
            let yp = Array2::from_shape_fn((3, d), |(i, k)| 0.3 * i as f64 - 0.2 * k as f64 + 0.5);
            let yn = Array2::from_shape_fn((3, d), |(i, k)| 0.25 * i as f64 - 0.1 * k as f64 + 0.55);
            let cs = Array2::from_shape_fn((3, 2), |(i, k)| i as f64 - 0.5 * k as f64);
            let st = model.standardization();
            let mut g = Graph::new();
            let bound = model.flow().bind(&mut g);
            let p = g.input(st.state_rows(&yp));
            let n = g.input(st.state_rows(&yn));
            let c = g.input(st.context_rows(&cs));
            let lp = model.log_density_graph(&mut g, &bound, p, n, c);
            let l0 = model.log_initial_graph(&mut g, &bound, p, c);
            for i in 0..3 {
                let (a, b, cc) = (yp.row(i).to_vec(), yn.row(i).to_vec(), cs.row(i).to_vec());
                let point = model.log_cond_density(&a, &b, &cc).unwrap();
                assert!((g.value(lp)[[i, 0]] - point).abs() < 1e-10);
                let init = model.log_initial_density(&a, &cc).unwrap();
                assert!((g.value(l0)[[i, 0]] - init).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn pullback_is_zero_on_attractor_image() {
        let model = random_model(8, attractor(0.2), 1);
        let y = model.to_state(&[0.0, 0.0], &[0.4]).unwrap();
        assert!(model.pullback_v(&y, &[0.4]).unwrap() < 1e-18);
        let id = StablePolicyModel::identity(attractor(0.2), 0).unwrap();
        assert_eq!(id.pullback_v(&[3.0, 4.0], &[]).unwrap(), 25.0);
    }

    #[test]
    fn checkpoint_round_trip() {
        let model = random_model(9, attractor(0.2), 1);
        let back = StablePolicyModel::from_json_str(&model.to_json_string()).unwrap();
        assert_eq!(model, back);
    }

    #[test]
    fn rejects_non_finite_state() {
        let model = StablePolicyModel::identity(attractor(0.2), 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            model.step(&[f64::NAN, 0.0], &[], &mut rng),
            Err(Error::Numerical(_))
        ));
    }
}
