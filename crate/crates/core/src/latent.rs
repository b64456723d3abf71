//! Stable latent stochastic dynamics `dz = v(z) dt + g(z) dB`.
//!
//! Two concrete systems are provided, both with a closed-form Lyapunov
//! candidate `U` and diffusion generator `LU`:
//!
//! * [`LinearAttractor`]: `v(z) = -α z`, `g(z) = σ tanh(|z|) I`, `U = |z|²`.
//! * [`LimitCycleLatent`]: polar dynamics on dims 0/1 with a cycle of radius
//!   `r*`, the remaining dims contracting like a linear attractor, and
//!   `U = (r - r*)² + |z_rest|²`.
//!
//! Transitions are the Euler–Maruyama Gaussians obtained by freezing drift and
//! diffusion at the previous point. Diffusion vanishes on the attractor set,
//! so transitions that start exactly there have no density.

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Matrix, Var};
use crate::error::{check_dim, Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearAttractor {
    pub dim: usize,
    pub alpha: f64,
    pub sigma: f64,
    pub dt: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LimitCycleLatent {
    pub dim: usize,
    pub r_star: f64,
    pub beta: f64,
    pub omega: f64,
    /// Radial noise scale; the radial diffusion is `sigma·tanh(|r - r*|)`.
    pub sigma: f64,
    /// Constant phase noise; keeps the transition density non-degenerate
    /// along the cycle without touching the radial dynamics.
    #[serde(default)]
    pub sigma_phase: f64,
    pub dt: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LatentDynamics {
    Attractor(LinearAttractor),
    LimitCycle(LimitCycleLatent),
}

impl LinearAttractor {
    pub fn new(dim: usize, alpha: f64, sigma: f64, dt: f64) -> Result<Self> {
        let a = Self { dim, alpha, sigma, dt };
        a.validate()?;
        Ok(a)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.alpha, self.sigma, self.dt].iter().all(|x| x.is_finite());
        if !finite || self.dim == 0 || self.alpha <= 0.0 || self.sigma < 0.0 || self.dt <= 0.0 {
            return Err(Error::InvalidInput(format!("invalid attractor parameters {self:?}")));
        }
        if self.alpha * self.dt >= 1.0 {
            return Err(Error::InvalidInput(format!(
                "alpha*dt = {} must be < 1",
                self.alpha * self.dt
            )));
        }
        if 2.0 * self.alpha <= self.sigma * self.sigma * self.dim as f64 {
            return Err(Error::InvalidInput(format!(
                "stability margin violated: 2·alpha = {} <= sigma²·d = {}",
                2.0 * self.alpha,
                self.sigma * self.sigma * self.dim as f64
            )));
        }
        Ok(())
    }
}

impl LimitCycleLatent {
    pub fn new(dim: usize, r_star: f64, beta: f64, omega: f64, sigma: f64, sigma_phase: f64, dt: f64) -> Result<Self> {
        let c = Self {
            dim,
            r_star,
            beta,
            omega,
            sigma,
            sigma_phase,
            dt,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.r_star,
            self.beta,
            self.omega,
            self.sigma,
            self.sigma_phase,
            self.dt,
        ]
        .iter()
        .all(|x| x.is_finite());
        if !finite
            || self.dim < 2
            || self.r_star <= 0.0
            || self.beta <= 0.0
            || self.sigma < 0.0
            || self.sigma_phase < 0.0
            || self.dt <= 0.0
        {
            return Err(Error::InvalidInput(format!("invalid limit-cycle parameters {self:?}")));
        }
        if self.beta * self.dt >= 1.0 {
            return Err(Error::InvalidInput(format!(
                "beta*dt = {} must be < 1",
                self.beta * self.dt
            )));
        }
        let worst = (self.dim.saturating_sub(2)).max(1) as f64;
        if 2.0 * self.beta <= self.sigma * self.sigma * worst {
            return Err(Error::InvalidInput(format!(
                "stability margin violated: 2·beta = {} <= sigma²·{worst}",
                2.0 * self.beta
            )));
        }
        Ok(())
    }

    /// Radius, radial and tangential unit vectors of the (0, 1) plane.
    /// At the origin the frame defaults to the coordinate axes.
    fn polar(&self, z: &[f64]) -> (f64, [f64; 2], [f64; 2]) {
        let r = z[0].hypot(z[1]);
        if r > 0.0 {
            let er = [z[0] / r, z[1] / r];
            (r, er, [-er[1], er[0]])
        } else {
            (0.0, [1.0, 0.0], [0.0, 1.0])
        }
    }
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// One-step Gaussian law, diagonal in a local orthonormal frame.
///
/// When `frame` is set, `variance[0]` and `variance[1]` refer to the radial and
/// tangential directions `(cos φ, sin φ)` and `(-sin φ, cos φ)` of the (0, 1)
/// plane; the remaining entries are along coordinate axes.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianTransition {
    mean: Vec<f64>,
    variance: Vec<f64>,
    frame: Option<[f64; 2]>,
}

impl GaussianTransition {
    pub fn new(mean: Vec<f64>, variance: Vec<f64>, frame: Option<[f64; 2]>) -> Result<Self> {
        check_dim("transition variance", mean.len(), variance.len())?;
        if frame.is_some() && mean.len() < 2 {
            return Err(Error::InvalidInput("a polar frame needs at least two dims".into()));
        }
        if let Some(i) = variance.iter().position(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::DegenerateDensity(format!(
                "variance[{i}] = {} is not positive",
                variance[i]
            )));
        }
        Ok(Self { mean, variance, frame })
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn variance(&self) -> &[f64] {
        &self.variance
    }

    pub fn frame(&self) -> Option<[f64; 2]> {
        self.frame
    }

    /// Residual `x - mean` expressed in the local frame.
    pub fn local_residual(&self, x: &[f64]) -> Vec<f64> {
        let mut e: Vec<f64> = x.iter().zip(&self.mean).map(|(a, m)| a - m).collect();
        if let Some([c, s]) = self.frame {
            let (e0, e1) = (e[0], e[1]);
            e[0] = c * e0 + s * e1;
            e[1] = -s * e0 + c * e1;
        }
        e
    }

    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        check_dim("transition point", self.mean.len(), x.len())?;
        let e = self.local_residual(x);
        Ok(e.iter()
            .zip(&self.variance)
            .map(|(r, v)| -0.5 * (r * r / v + LN_2PI + v.ln()))
            .sum())
    }
}

impl LatentDynamics {
    pub fn validate(&self) -> Result<()> {
        match self {
            LatentDynamics::Attractor(a) => a.validate(),
            LatentDynamics::LimitCycle(c) => c.validate(),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            LatentDynamics::Attractor(a) => a.dim,
            LatentDynamics::LimitCycle(c) => c.dim,
        }
    }

    pub fn dt(&self) -> f64 {
        match self {
            LatentDynamics::Attractor(a) => a.dt,
            LatentDynamics::LimitCycle(c) => c.dt,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            LatentDynamics::Attractor(_) => "attractor",
            LatentDynamics::LimitCycle(_) => "limit_cycle",
        }
    }

    /// Same drift, all noise scales set to zero.
    pub fn without_noise(&self) -> Self {
        let mut out = self.clone();
        match &mut out {
            LatentDynamics::Attractor(a) => a.sigma = 0.0,
            LatentDynamics::LimitCycle(c) => {
                c.sigma = 0.0;
                c.sigma_phase = 0.0;
            }
        }
        out
    }

    pub fn is_noiseless(&self) -> bool {
        match self {
            LatentDynamics::Attractor(a) => a.sigma == 0.0,
            LatentDynamics::LimitCycle(c) => c.sigma == 0.0 && c.sigma_phase == 0.0,
        }
    }

    fn check(&self, z: &[f64]) -> Result<()> {
        check_dim("latent point", self.dim(), z.len())
    }

    /// Drift `v(z)`. For the limit cycle this is the polar drift mapped to
    /// Cartesian coordinates plus the Itô term `-½ σ_φ² z` that phase noise
    /// induces on dims 0/1.
    pub fn drift(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.check(z)?;
        Ok(match self {
            LatentDynamics::Attractor(a) => z.iter().map(|x| -a.alpha * x).collect(),
            LatentDynamics::LimitCycle(c) => {
                let (r, er, _) = c.polar(z);
                let radial = -c.beta * (r - c.r_star);
                let ito = -0.5 * c.sigma_phase * c.sigma_phase;
                let mut v = Vec::with_capacity(z.len());
                v.push(radial * er[0] - c.omega * z[1] + ito * z[0]);
                v.push(radial * er[1] + c.omega * z[0] + ito * z[1]);
                v.extend(z[2..].iter().map(|x| -c.beta * x));
                v
            }
        })
    }

    /// Diffusion matrix `g(z)` (`d×d`).
    pub fn diffusion(&self, z: &[f64]) -> Result<Matrix> {
        self.check(z)?;
        let d = z.len();
        let mut g = Array2::zeros((d, d));
        match self {
            LatentDynamics::Attractor(a) => {
                let s = a.sigma * norm(z).tanh();
                for i in 0..d {
                    g[[i, i]] = s;
                }
            }
            LatentDynamics::LimitCycle(c) => {
                let (r, er, ephi) = c.polar(z);
                let sr = c.sigma * (r - c.r_star).abs().tanh();
                let sphi = c.sigma_phase * r;
                for i in 0..2 {
                    g[[i, 0]] = sr * er[i];
                    g[[i, 1]] = sphi * ephi[i];
                }
                let sw = c.sigma * norm(&z[2..]).tanh();
                for i in 2..d {
                    g[[i, i]] = sw;
                }
            }
        }
        Ok(g)
    }

    /// The Euler–Maruyama one-step law from `z`.
    pub fn transition(&self, z: &[f64]) -> Result<GaussianTransition> {
        let v = self.drift(z)?;
        let dt = self.dt();
        let mean: Vec<f64> = z.iter().zip(&v).map(|(x, vx)| x + vx * dt).collect();
        match self {
            LatentDynamics::Attractor(a) => {
                let s = a.sigma * norm(z).tanh();
                GaussianTransition::new(mean, vec![s * s * dt; z.len()], None)
            }
            LatentDynamics::LimitCycle(c) => {
                let (r, er, _) = c.polar(z);
                let sr = c.sigma * (r - c.r_star).abs().tanh();
                let sphi = c.sigma_phase * r;
                let sw = c.sigma * norm(&z[2..]).tanh();
                let mut var = vec![sr * sr * dt, sphi * sphi * dt];
                var.extend(std::iter::repeat_n(sw * sw * dt, z.len() - 2));
                GaussianTransition::new(mean, var, Some(er))
            }
        }
    }

    /// `z' = z + v(z)Δt + g(z)√Δt ξ`. Always consumes `d` standard normals.
    pub fn em_step<R: Rng + ?Sized>(&self, z: &[f64], rng: &mut R) -> Result<Vec<f64>> {
        let v = self.drift(z)?;
        let g = self.diffusion(z)?;
        let dt = self.dt();
        let sq = dt.sqrt();
        let xi: Vec<f64> = (0..z.len()).map(|_| rng.sample(StandardNormal)).collect();
        let noise = g.dot(&ndarray::Array1::from(xi));
        Ok(z.iter()
            .zip(&v)
            .zip(noise.iter())
            .map(|((x, vx), n)| x + vx * dt + n * sq)
            .collect())
    }

    pub fn log_transition(&self, z_prev: &[f64], z_next: &[f64]) -> Result<f64> {
        self.check(z_next)?;
        self.transition(z_prev)?.log_density(z_next)
    }

    pub fn lyapunov_u(&self, z: &[f64]) -> Result<f64> {
        self.check(z)?;
        Ok(match self {
            LatentDynamics::Attractor(_) => z.iter().map(|x| x * x).sum(),
            LatentDynamics::LimitCycle(c) => {
                let r = z[0].hypot(z[1]);
                (r - c.r_star).powi(2) + z[2..].iter().map(|x| x * x).sum::<f64>()
            }
        })
    }

    /// Euclidean distance from `z` to the attractor set; equals `√U`.
    pub fn distance_to_attractor(&self, z: &[f64]) -> Result<f64> {
        Ok(self.lyapunov_u(z)?.sqrt())
    }

    /// Closed-form diffusion generator `LU(z) = U_z v + ½ Tr(gᵀ U_zz g)`.
    pub fn generator_lu(&self, z: &[f64]) -> Result<f64> {
        self.check(z)?;
        Ok(match self {
            LatentDynamics::Attractor(a) => {
                let n2: f64 = z.iter().map(|x| x * x).sum();
                let t = n2.sqrt().tanh();
                -2.0 * a.alpha * n2 + a.sigma * a.sigma * t * t * z.len() as f64
            }
            LatentDynamics::LimitCycle(c) => {
                let r = z[0].hypot(z[1]);
                let dr = r - c.r_star;
                let tr = dr.tanh();
                let w2: f64 = z[2..].iter().map(|x| x * x).sum();
                let tw = w2.sqrt().tanh();
                let s2 = c.sigma * c.sigma;
                -2.0 * c.beta * dr * dr + s2 * tr * tr - 2.0 * c.beta * w2 + s2 * tw * tw * (z.len() - 2) as f64
            }
        })
    }

    /// Batched transition log-density as a graph node (`B×1`); `z_prev` and
    /// `z_next` are `B×d`. Mirrors [`LatentDynamics::log_transition`].
    pub fn log_transition_graph(&self, g: &mut Graph<'_>, z_prev: Var, z_next: Var) -> Var {
        match self {
            LatentDynamics::Attractor(a) => {
                let mean = g.scale(z_prev, 1.0 - a.alpha * a.dt);
                isotropic_log_density(g, z_prev, z_next, mean, a.sigma, a.dt)
            }
            LatentDynamics::LimitCycle(c) => {
                let d = c.dim;
                let z0 = g.select(z_prev, &[0]);
                let z1 = g.select(z_prev, &[1]);
                let n0 = g.select(z_next, &[0]);
                let n1 = g.select(z_next, &[1]);
                let z0s = g.square(z0);
                let z1s = g.square(z1);
                let r2 = g.add(z0s, z1s);
                let r = g.sqrt(r2);
                let er0 = g.div(z0, r);
                let er1 = g.div(z1, r);
                let delta = g.add_scalar(r, -c.r_star);
                // mean = z + dt·(radial·e_r + ω J z - ½σ_φ² z)
                let radial = g.scale(delta, -c.beta * c.dt);
                let keep = 1.0 - 0.5 * c.sigma_phase * c.sigma_phase * c.dt;
                let m0 = {
                    let a = g.scale(z0, keep);
                    let b = g.mul(radial, er0);
                    let rot = g.scale(z1, -c.omega * c.dt);
                    let ab = g.add(a, b);
                    g.add(ab, rot)
                };
                let m1 = {
                    let a = g.scale(z1, keep);
                    let b = g.mul(radial, er1);
                    let rot = g.scale(z0, c.omega * c.dt);
                    let ab = g.add(a, b);
                    g.add(ab, rot)
                };
                let e0 = g.sub(n0, m0);
                let e1 = g.sub(n1, m1);
                // radial / tangential components of the residual
                let a0 = g.mul(er0, e0);
                let a1 = g.mul(er1, e1);
                let er = g.add(a0, a1);
                let b0 = g.mul(er0, e1);
                let b1 = g.mul(er1, e0);
                let et = g.sub(b0, b1);

                let th = g.tanh(delta);
                let th2 = g.square(th);
                let var_r = g.scale(th2, c.sigma * c.sigma * c.dt);
                let var_t = g.scale(r2, c.sigma_phase * c.sigma_phase * c.dt);
                let lr = gaussian_term(g, er, var_r);
                let lt = gaussian_term(g, et, var_t);
                let mut total = g.add(lr, lt);
                if d > 2 {
                    let rest: Vec<usize> = (2..d).collect();
                    let wp = g.select(z_prev, &rest);
                    let wn = g.select(z_next, &rest);
                    let mean = g.scale(wp, 1.0 - c.beta * c.dt);
                    let lw = isotropic_log_density(g, wp, wn, mean, c.sigma, c.dt);
                    total = g.add(total, lw);
                }
                total
            }
        }
    }
}

/// `-½ (e²/v + ln 2π + ln v)` for `B×1` residual and variance.
fn gaussian_term(g: &mut Graph<'_>, e: Var, var: Var) -> Var {
    let e2 = g.square(e);
    let q = g.div(e2, var);
    let lv = g.ln(var);
    let s = g.add(q, lv);
    let s = g.add_scalar(s, LN_2PI);
    g.scale(s, -0.5)
}

/// Isotropic Gaussian with variance `σ² tanh²(|x_prev|) Δt` on every dim.
fn isotropic_log_density(g: &mut Graph<'_>, x_prev: Var, x_next: Var, mean: Var, sigma: f64, dt: f64) -> Var {
    let d = g.value(x_prev).ncols() as f64;
    let sq = g.square(x_prev);
    let n2 = g.sum_cols(sq);
    let n = g.sqrt(n2);
    let t = g.tanh(n);
    let t2 = g.square(t);
    let var = g.scale(t2, sigma * sigma * dt);
    let e = g.sub(x_next, mean);
    let e2 = g.square(e);
    let q = g.sum_cols(e2);
    let quad = g.div(q, var);
    let lv = g.ln(var);
    let logdet = g.scale(lv, d);
    let s = g.add(quad, logdet);
    let s = g.add_scalar(s, d * LN_2PI);
    g.scale(s, -0.5)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn attractor(alpha: f64, sigma: f64, dt: f64) -> LatentDynamics {
        LatentDynamics::Attractor(LinearAttractor::new(2, alpha, sigma, dt).unwrap())
    }

    fn cycle(dim: usize) -> LatentDynamics {
        LatentDynamics::LimitCycle(LimitCycleLatent::new(dim, 1.0, 2.0, 1.0, 0.5, 0.3, 0.01).unwrap())
    }

    #[test]
    fn attractor_drift() {
        let a = attractor(1.0, 0.0, 0.1);
        assert_eq!(a.drift(&[2.0, 0.0]).unwrap(), vec![-2.0, 0.0]);
        assert_eq!(a.drift(&[0.0, 0.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn limit_cycle_drift_in_cartesian() {
        let c = LatentDynamics::LimitCycle(LimitCycleLatent::new(2, 1.0, 2.0, 1.0, 0.0, 0.0, 0.01).unwrap());
        // dr = -2·(2-1) = -2 along e_r=(1,0); dφ = 1 ⇒ r·dφ = 2 along e_φ=(0,1)
        let v = c.drift(&[2.0, 0.0]).unwrap();
        assert_relative_eq!(v[0], -2.0, epsilon = 1e-15);
        assert_relative_eq!(v[1], 2.0, epsilon = 1e-15);
    }

    #[test]
    fn diffusion_values() {
        let a = attractor(1.0, 0.5, 0.1);
        assert_eq!(a.diffusion(&[0.0, 0.0]).unwrap(), Array2::<f64>::zeros((2, 2)));
        let g = a.diffusion(&[10.0, 0.0]).unwrap();
        assert!((g[[0, 0]] - 0.5).abs() < 1e-4 && (g[[1, 1]] - 0.5).abs() < 1e-4);
        assert_eq!(g[[0, 1]], 0.0);
        let g = a.diffusion(&[1.0, 0.0]).unwrap();
        assert_relative_eq!(g[[0, 0]], 0.380797, epsilon = 1e-6);
        assert_relative_eq!(g[[1, 1]], 0.380797, epsilon = 1e-6);
    }

    #[test]
    fn noiseless_em_is_explicit_euler() {
        let a = attractor(1.0, 0.0, 0.1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let z = a.em_step(&[1.0, 1.0], &mut rng).unwrap();
        assert_relative_eq!(z[0], 0.9, epsilon = 1e-15);
        assert_relative_eq!(z[1], 0.9, epsilon = 1e-15);
    }

    #[test]
    fn em_rejects_wrong_dim() {
        let a = attractor(1.0, 0.1, 0.1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            a.em_step(&[1.0], &mut rng),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn transition_at_equilibrium_is_degenerate() {
        let a = attractor(1.0, 0.5, 0.1);
        assert!(matches!(
            a.log_transition(&[0.0, 0.0], &[0.0, 0.0]),
            Err(Error::DegenerateDensity(_))
        ));
        let silent = attractor(1.0, 0.0, 0.1);
        assert!(matches!(
            silent.log_transition(&[1.0, 0.0], &[0.9, 0.0]),
            Err(Error::DegenerateDensity(_))
        ));
    }

    #[test]
    fn gaussian_log_density_value() {
        let t = GaussianTransition::new(vec![0.0], vec![0.01], None).unwrap();
        // -½ ln(2π·0.01)
        assert_relative_eq!(t.log_density(&[0.0]).unwrap(), 1.383_646_559_789_373, epsilon = 1e-12);
    }

    #[test]
    fn density_peaks_at_the_mean() {
        let a = attractor(1.0, 0.5, 0.1);
        let zp = [0.7, -0.4];
        let t = a.transition(&zp).unwrap();
        let peak = a.log_transition(&zp, t.mean()).unwrap();
        for dx in [-1e-3, 1e-3] {
            let off = [t.mean()[0] + dx, t.mean()[1] - dx];
            assert!(a.log_transition(&zp, &off).unwrap() < peak);
        }
    }

    #[test]
    fn lyapunov_values() {
        let a = attractor(1.0, 0.5, 0.1);
        assert_eq!(a.lyapunov_u(&[0.0, 0.0]).unwrap(), 0.0);
        assert_eq!(a.lyapunov_u(&[3.0, 4.0]).unwrap(), 25.0);
        let c = cycle(3);
        assert_relative_eq!(c.lyapunov_u(&[2.0, 0.0, 0.5]).unwrap(), 1.25, epsilon = 1e-15);
        assert_eq!(c.lyapunov_u(&[0.0, 1.0, 0.0]).unwrap(), 0.0);
    }

    #[test]
    fn generator_values() {
        assert_eq!(attractor(1.0, 0.5, 0.1).generator_lu(&[0.0, 0.0]).unwrap(), 0.0);
        assert_eq!(attractor(1.0, 0.0, 0.1).generator_lu(&[1.0, 0.0]).unwrap(), -2.0);
        // -2 + σ²·tanh²(1)·d with σ = 0.5, d = 2
        assert_relative_eq!(
            attractor(1.0, 0.5, 0.1).generator_lu(&[1.0, 0.0]).unwrap(),
            -1.709_987_170_807_013,
            epsilon = 1e-12
        );
    }

    #[test]
    fn generator_matches_cartesian_ito_formula() {
        // LU = ∇U·v + ½ Σ_k g_kᵀ ∇²U g_k with ∇U, ∇²U by central differences.
        for dyn_ in [cycle(2), cycle(4), attractor(1.3, 0.6, 0.05)] {
            for z in [[1.7, -0.4, 0.3, 0.2], [0.3, 0.5, -1.0, 0.1]] {
                let z = &z[..dyn_.dim()];
                let d = z.len();
                let u = |x: &[f64]| dyn_.lyapunov_u(x).unwrap();
                let h = 1e-4;
                let v = dyn_.drift(z).unwrap();
                let g = dyn_.diffusion(z).unwrap();
                let mut lu = 0.0;
                for i in 0..d {
                    let mut p = z.to_vec();
                    let mut m = z.to_vec();
                    p[i] += h;
                    m[i] -= h;
                    lu += v[i] * (u(&p) - u(&m)) / (2.0 * h);
                }
                for k in 0..d {
                    let col: Vec<f64> = (0..d).map(|i| g[[i, k]]).collect();
                    let p: Vec<f64> = z.iter().zip(&col).map(|(a, b)| a + h * b).collect();
                    let m: Vec<f64> = z.iter().zip(&col).map(|(a, b)| a - h * b).collect();
                    lu += 0.5 * (u(&p) - 2.0 * u(z) + u(&m)) / (h * h);
                }
                assert_relative_eq!(lu, dyn_.generator_lu(z).unwrap(), epsilon = 1e-5);
            }
        }
    }

    #[test]
    fn graph_density_matches_pointwise() {
        for dyn_ in [cycle(2), cycle(3), attractor(1.0, 0.5, 0.1)] {
            let d = dyn_.dim();
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let rows = 6;
            let zp = Array2::from_shape_fn((rows, d), |_| rng.random_range(-2.0..2.0));
            let zn = Array2::from_shape_fn((rows, d), |(i, j)| zp[[i, j]] * 0.97 + 0.02 * (j as f64 - 0.5));
            let mut g = Graph::new();
            let a = g.input(zp.clone());
            let b = g.input(zn.clone());
            let ll = dyn_.log_transition_graph(&mut g, a, b);
            for i in 0..rows {
                let expected = dyn_.log_transition(&zp.row(i).to_vec(), &zn.row(i).to_vec()).unwrap();
                assert_relative_eq!(g.value(ll)[[i, 0]], expected, epsilon = 1e-10, max_relative = 1e-12);
            }
        }
    }

    #[test]
    fn invariants_are_enforced() {
        assert!(LinearAttractor::new(2, -1.0, 0.1, 0.1).is_err());
        assert!(LinearAttractor::new(2, 1.0, 1.0, 0.1).is_err()); // 2 <= 1·2
        assert!(LinearAttractor::new(2, 20.0, 0.1, 0.1).is_err()); // α·Δt >= 1
        assert!(LimitCycleLatent::new(1, 1.0, 1.0, 1.0, 0.1, 0.1, 0.01).is_err());
        assert!(LimitCycleLatent::new(2, 0.0, 1.0, 1.0, 0.1, 0.1, 0.01).is_err());
        assert!(LimitCycleLatent::new(2, 1.0, 1.0, 1.0, 2.0, 0.1, 0.01).is_err());
    }

    #[test]
    fn json_form() {
        let c = cycle(2);
        let v = serde_json::to_value(&c).unwrap();
        assert_eq!(v["kind"], "limit_cycle");
        assert_eq!(v["r_star"], 1.0);
        let back: LatentDynamics = serde_json::from_value(v).unwrap();
        assert_eq!(back, c);
        let a: LatentDynamics =
            serde_json::from_str(r#"{"kind":"attractor","dim":2,"alpha":1.0,"sigma":0.1,"dt":0.1}"#).unwrap();
        assert_eq!(a.kind(), "attractor");
        assert!(serde_json::from_str::<LatentDynamics>(
            r#"{"kind":"attractor","dim":2,"alpha":1.0,"sigma":0.1,"dt":0.1,"bogus":1}"#
        )
        .is_err());
    }
}
