use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autodiff::Matrix;
use crate::error::{check_dim, Error, Result};

/// Per-dimension affine normalization `ỹ = (y - shift) / scale` for states and
/// contexts. `data_radius` is the largest raw distance of a fitted state from
/// `state_shift`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Standardization {
    pub state_shift: Vec<f64>,
    pub state_scale: Vec<f64>,
    pub context_shift: Vec<f64>,
    pub context_scale: Vec<f64>,
    pub data_radius: f64,
}

/// Scales below this are treated as constant dimensions and left unscaled.
const MIN_SPREAD: f64 = 1e-9;

fn mean_and_scale<'a>(rows: impl Iterator<Item = &'a [f64]> + Clone, dim: usize) -> (Vec<f64>, Vec<f64>) {
    let mut mean = vec![0.0; dim];
    let mut count = 0usize;
    for r in rows.clone() {
        for (m, x) in mean.iter_mut().zip(r) {
            *m += x;
        }
        count += 1;
    }
    if count == 0 {
        return (vec![0.0; dim], vec![1.0; dim]);
    }
    mean.iter_mut().for_each(|m| *m /= count as f64);
    let mut var = vec![0.0; dim];
    for r in rows {
        for ((v, x), m) in var.iter_mut().zip(r).zip(&mean) {
            *v += (x - m) * (x - m);
        }
    }
    let scale = var
        .iter()
        .map(|v| {
            let s = (v / count as f64).sqrt();
            if s > MIN_SPREAD {
                s
            } else {
                1.0
            }
        })
        .collect();
    (mean, scale)
}

impl Standardization {
    pub fn identity(dim: usize, context_dim: usize) -> Self {
        Self {
            state_shift: vec![0.0; dim],
            state_scale: vec![1.0; dim],
            context_shift: vec![0.0; context_dim],
            context_scale: vec![1.0; context_dim],
            data_radius: 1.0,
        }
    }

    /// Mean / standard deviation fit. Constant dimensions get scale 1.
    pub fn fit<'a, S, C>(states: S, contexts: C, dim: usize, context_dim: usize) -> Result<Self>
    where
        S: Iterator<Item = &'a [f64]> + Clone,
        C: Iterator<Item = &'a [f64]> + Clone,
    {
        let (state_shift, state_scale) = mean_and_scale(states.clone(), dim);
        let (context_shift, context_scale) = mean_and_scale(contexts, context_dim);
        let data_radius = states
            .map(|s| {
                s.iter()
                    .zip(&state_shift)
                    .map(|(x, m)| (x - m) * (x - m))
                    .sum::<f64>()
                    .sqrt()
            })
            .fold(0.0, f64::max);
        let st = Self {
            state_shift,
            state_scale,
            context_shift,
            context_scale,
            data_radius: if data_radius > 0.0 { data_radius } else { 1.0 },
        };
        st.validate()?;
        Ok(st)
    }

    pub fn validate(&self) -> Result<()> {
        check_dim(
            "standardization state scale",
            self.state_shift.len(),
            self.state_scale.len(),
        )?;
        check_dim(
            "standardization context scale",
            self.context_shift.len(),
            self.context_scale.len(),
        )?;
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        let positive = |v: &[f64]| v.iter().all(|x| *x > 0.0);
        if !(finite(&self.state_shift) && finite(&self.context_shift)) {
            return Err(Error::Validation("non-finite standardization shift".into()));
        }
        if !(finite(&self.state_scale)
            && finite(&self.context_scale)
            && positive(&self.state_scale)
            && positive(&self.context_scale))
        {
            return Err(Error::Validation("standardization scales must be positive".into()));
        }
        if !(self.data_radius.is_finite() && self.data_radius > 0.0) {
            return Err(Error::Validation("data radius must be positive".into()));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.state_shift.len()
    }

    pub fn context_dim(&self) -> usize {
        self.context_shift.len()
    }

    pub fn state(&self, y: &[f64]) -> Vec<f64> {
        forward(y, &self.state_shift, &self.state_scale)
    }

    pub fn unstate(&self, y: &[f64]) -> Vec<f64> {
        y.iter()
            .zip(&self.state_shift)
            .zip(&self.state_scale)
            .map(|((x, m), s)| x * s + m)
            .collect()
    }

    pub fn context(&self, c: &[f64]) -> Vec<f64> {
        forward(c, &self.context_shift, &self.context_scale)
    }

    pub fn state_rows(&self, y: &Matrix) -> Matrix {
        rows(y, |r| self.state(r))
    }

    pub fn unstate_rows(&self, y: &Matrix) -> Matrix {
        rows(y, |r| self.unstate(r))
    }

    pub fn context_rows(&self, c: &Matrix) -> Matrix {
        rows(c, |r| self.context(r))
    }

    /// `Σ ln scale`: the log-determinant of destandardization.
    pub fn log_scale(&self) -> f64 {
        self.state_scale.iter().map(|s| s.ln()).sum()
    }
}

fn forward(x: &[f64], shift: &[f64], scale: &[f64]) -> Vec<f64> {
    x.iter().zip(shift).zip(scale).map(|((x, m), s)| (x - m) / s).collect()
}

fn rows(m: &Matrix, f: impl Fn(&[f64]) -> Vec<f64>) -> Matrix {
    let mut out = Array2::zeros(m.dim());
    for (i, r) in m.rows().into_iter().enumerate() {
        let v = f(&r.to_vec());
        out.row_mut(i).assign(&ndarray::ArrayView1::from(&v));
    }
    out
}
