//! Numerical stability checks: the generator identity `LV(y) = LU(f⁻¹(y))` for
//! the pullback Lyapunov function, and empirical convergence sweeps.

use nalgebra::DMatrix;
use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::StablePolicyModel;
use crate::autodiff::Matrix;
use crate::error::{check_dim, Error, Result};

/// Jacobians with a larger condition number are rejected.
pub const CONDITION_LIMIT: f64 = 1e8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeneratorCheck {
    pub lv_numeric: f64,
    pub lu_exact: f64,
    pub abs_diff: f64,
    pub condition: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceOptions {
    pub n_starts: usize,
    /// Radius of the start ball around the data mean, in raw units.
    pub radius: f64,
    pub steps: usize,
    /// Threshold on the latent distance to the attractor set.
    pub tol: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub n_starts: usize,
    pub converged: usize,
    pub fraction: f64,
    pub min_distance: f64,
    pub median_distance: f64,
    pub max_distance: f64,
    pub radius: f64,
    pub steps: usize,
    pub tol: f64,
    pub noiseless: bool,
}

/// Uniform sample from the ball of radius `r` around `center`.
pub fn sample_ball<R: Rng + ?Sized>(center: &[f64], r: f64, rng: &mut R) -> Vec<f64> {
    let d = center.len();
    let dir: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    let n = dir.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    let rho = r * rng.random::<f64>().powf(1.0 / d as f64);
    center.iter().zip(&dir).map(|(c, u)| c + rho * u / n).collect()
}

impl StablePolicyModel {
    /// `T(z) = destandardize(f(z, c̃))` on a batch of latent points.
    fn push_rows(&self, z: &Matrix, c: &[f64]) -> Result<Matrix> {
        let cs = Array2::from_shape_fn((z.nrows(), c.len()), |(_, k)| c[k]);
        self.to_state_batch(z, &cs)
    }

    fn pullback_rows(&self, y: &Matrix, c: &[f64]) -> Result<Vec<f64>> {
        let cs = Array2::from_shape_fn((y.nrows(), c.len()), |(_, k)| c[k]);
        let z = self.to_latent_batch(y, &cs)?;
        z.rows()
            .into_iter()
            .map(|r| self.latent().lyapunov_u(&r.to_vec()))
            .collect()
    }

    /// Compares `LV(y)`, assembled from finite-difference derivatives of the
    /// pullback `V` and the pushed-forward SDE, with the closed-form `LU`.
    ///
    /// The pushed-forward drift is `J v + ½ Σ_k D²T[g_k, g_k]` (Itô), where `J`
    /// is the Jacobian of `T = destandardize ∘ f` and `g_k` the diffusion
    /// columns.
    pub fn verify_generator_identity(&self, y: &[f64], c: &[f64], h: f64) -> Result<GeneratorCheck> {
        if !(h.is_finite() && h > 0.0) {
            return Err(Error::InvalidInput(format!("step h = {h} must be positive")));
        }
        let d = self.dim();
        check_dim("state", d, y.len())?;
        let z = self.to_latent(y, c)?;

        // T at z, z ± h e_j (Jacobian) and z ± h u_k (second directional derivatives)
        let g = self.latent().diffusion(&z)?;
        let mut dirs: Vec<(usize, Vec<f64>, f64)> = Vec::new();
        for k in 0..d {
            let col: Vec<f64> = g.column(k).to_vec();
            let n = col.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 0.0 {
                dirs.push((k, col.iter().map(|x| x / n).collect(), n));
            }
        }
        let n_pts = 1 + 2 * d + 2 * dirs.len();
        let mut pts = Array2::zeros((n_pts, d));
        for r in 0..n_pts {
            pts.row_mut(r).assign(&ndarray::ArrayView1::from(&z));
        }
        for j in 0..d {
            pts[[1 + 2 * j, j]] += h;
            pts[[2 + 2 * j, j]] -= h;
        }
        for (i, (_, u, _)) in dirs.iter().enumerate() {
            for k in 0..d {
                pts[[1 + 2 * d + 2 * i, k]] += h * u[k];
                pts[[2 + 2 * d + 2 * i, k]] -= h * u[k];
            }
        }
        let t = self.push_rows(&pts, c)?;
        let jac = Array2::from_shape_fn((d, d), |(i, j)| (t[[1 + 2 * j, i]] - t[[2 + 2 * j, i]]) / (2.0 * h));
        if !jac.iter().all(|x| x.is_finite()) {
            return Err(Error::Numerical("non-finite flow jacobian".into()));
        }
        let sv = DMatrix::from_fn(d, d, |i, j| jac[[i, j]]).singular_values();
        let (smax, smin) = (sv.max(), sv.min());
        let condition = if smin > 0.0 { smax / smin } else { f64::INFINITY };
        if !(condition <= CONDITION_LIMIT) {
            return Err(Error::IllConditioned {
                condition,
                limit: CONDITION_LIMIT,
            });
        }

        let v = self.latent().drift(&z)?;
        let mut drift_y: Vec<f64> = (0..d).map(|i| (0..d).map(|j| jac[[i, j]] * v[j]).sum()).collect();
        for (i, (_, _, n)) in dirs.iter().enumerate() {
            let (p, m) = (1 + 2 * d + 2 * i, 2 + 2 * d + 2 * i);
            for a in 0..d {
                let second = (t[[p, a]] - 2.0 * t[[0, a]] + t[[m, a]]) / (h * h);
                drift_y[a] += 0.5 * second * n * n;
            }
        }
        let g_y = jac.dot(&g);

        // V at y ± h e_i and y ± h e_i ± h e_j
        let yv = ndarray::ArrayView1::from(y);
        let mut vpts: Vec<Vec<f64>> = Vec::new();
        for i in 0..d {
            for s in [h, -h] {
                let mut p = yv.to_vec();
                p[i] += s;
                vpts.push(p);
            }
        }
        for i in 0..d {
            for j in i..d {
                for (si, sj) in [(h, h), (h, -h), (-h, h), (-h, -h)] {
                    let mut p = yv.to_vec();
                    p[i] += si;
                    p[j] += sj;
                    vpts.push(p);
                }
            }
        }
        let flat: Vec<f64> = vpts.iter().flatten().copied().collect();
        let vals = self.pullback_rows(&Array2::from_shape_vec((vpts.len(), d), flat).unwrap(), c)?;
        let grad: Vec<f64> = (0..d).map(|i| (vals[2 * i] - vals[2 * i + 1]) / (2.0 * h)).collect();
        let mut hess = Array2::zeros((d, d));
        let mut at = 2 * d;
        for i in 0..d {
            for j in i..d {
                let q = &vals[at..at + 4];
                let hij = (q[0] - q[1] - q[2] + q[3]) / (4.0 * h * h);
                hess[[i, j]] = hij;
                hess[[j, i]] = hij;
                at += 4;
            }
        }

        let first: f64 = grad.iter().zip(&drift_y).map(|(a, b)| a * b).sum();
        let trace = (g_y.t().dot(&hess).dot(&g_y)).diag().sum();
        let lv_numeric = first + 0.5 * trace;
        let lu_exact = self.latent().generator_lu(&z)?;
        Ok(GeneratorCheck {
            lv_numeric,
            lu_exact,
            abs_diff: (lv_numeric - lu_exact).abs(),
            condition,
        })
    }

    /// Rolls out `n_starts` uniformly sampled starts for `steps` steps under
    /// constant context and reports how many end within `tol` of the
    /// attractor image. Start `i` uses `contexts[i % contexts.len()]`.
    pub fn verify_convergence<R: Rng + ?Sized>(
        &self,
        opts: &ConvergenceOptions,
        contexts: &[Vec<f64>],
        rng: &mut R,
    ) -> Result<ConvergenceReport> {
        if opts.n_starts == 0 || !(opts.radius > 0.0) || contexts.is_empty() {
            return Err(Error::InvalidInput(
                "convergence check needs n_starts >= 1, radius > 0 and a context".into(),
            ));
        }
        let d = self.dim();
        let n = self.context_dim();
        let center = self.standardization().state_shift.clone();
        let mut y = Array2::zeros((opts.n_starts, d));
        let mut cs = Array2::zeros((opts.n_starts, n));
        for i in 0..opts.n_starts {
            let c = &contexts[i % contexts.len()];
            check_dim("context", n, c.len())?;
            let s = sample_ball(&center, opts.radius, rng);
            y.row_mut(i).assign(&ndarray::ArrayView1::from(&s));
            cs.row_mut(i).assign(&ndarray::ArrayView1::from(c.as_slice()));
        }
        for _ in 0..opts.steps {
            y = self.step_batch(&y, &cs, rng)?;
        }
        let z = self.to_latent_batch(&y, &cs)?;
        let mut dist = z
            .rows()
            .into_iter()
            .map(|r| self.latent().distance_to_attractor(&r.to_vec()))
            .collect::<Result<Vec<_>>>()?;
        let converged = dist.iter().filter(|&&x| x < opts.tol).count();
        dist.sort_by(f64::total_cmp);
        Ok(ConvergenceReport {
            n_starts: opts.n_starts,
            converged,
            fraction: converged as f64 / opts.n_starts as f64,
            min_distance: dist[0],
            median_distance: dist[dist.len() / 2],
            max_distance: dist[dist.len() - 1],
            radius: opts.radius,
            steps: opts.steps,
            tol: opts.tol,
            noiseless: self.latent().is_noiseless(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::super::tests::{attractor, random_model};
    use super::*;
    use crate::latent::{LatentDynamics, LimitCycleLatent};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cycle() -> LatentDynamics {
        LatentDynamics::LimitCycle(LimitCycleLatent::new(2, 1.0, 2.0, 3.0, 0.5, 0.3, 0.05).unwrap())
    }

    #[test]
    fn identity_flow_matches_exactly() {
        for latent in [attractor(0.5), cycle()] {
            let model = StablePolicyModel::identity(latent, 0).unwrap();
            let chk = model.verify_generator_identity(&[0.7, -1.2], &[], 1e-4).unwrap();
            assert!(chk.abs_diff < 1e-5, "{chk:?}");
            assert!((chk.condition - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn random_flow_matches_and_is_negative() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for latent in [attractor(0.5), cycle()] {
            let model = random_model(12, latent, 1);
            for _ in 0..20 {
                let y = sample_ball(&[0.0, 0.0], 2.0, &mut rng);
                let c = [rng.random_range(-1.0..1.0)];
                let chk = model.verify_generator_identity(&y, &c, 1e-4).unwrap();
                assert!(chk.abs_diff < 1e-3, "{chk:?}");
                assert!(chk.lv_numeric < 0.0);
            }
        }
    }

    #[test]
    fn huge_weights_fail_the_check() {
        let mut model = random_model(13, attractor(0.5), 1);
        for layer in model.flow_mut().layers_mut() {
            for w in layer.scale_net_mut().weights_mut() {
                w.fill(1e6);
            }
            for w in layer.translate_net_mut().weights_mut() {
                w.fill(1e6);
            }
        }
        // Saturated subnets bound the coupling scales, so the Jacobian can stay
        // well conditioned; the identity check still fails by a wide margin.
        match model.verify_generator_identity(&[0.3, 0.2], &[0.1], 1e-4) {
            Ok(chk) => assert!(chk.abs_diff > 1.0, "{chk:?}"),
            Err(e) => assert_eq!(e.exit_code(), 3, "{e}"),
        }
    }

    #[test]
    fn identity_converges_everywhere() {
        let model = StablePolicyModel::identity(attractor(0.0), 0).unwrap();
        let opts = ConvergenceOptions {
            n_starts: 50,
            radius: 10.0,
            steps: 300,
            tol: 1e-6,
        };
        let rep = model
            .verify_convergence(&opts, &[vec![]], &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap();
        assert_eq!(rep.fraction, 1.0);
        let none = ConvergenceOptions { steps: 0, ..opts };
        let rep = model
            .verify_convergence(&none, &[vec![]], &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap();
        assert_eq!(rep.fraction, 0.0);
    }

    #[test]
    fn ball_samples_stay_inside() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let p = sample_ball(&[1.0, 2.0, 3.0], 0.5, &mut rng);
            let r = ((p[0] - 1.0).powi(2) + (p[1] - 2.0).powi(2) + (p[2] - 3.0).powi(2)).sqrt();
            assert!(r <= 0.5);
        }
    }
}
