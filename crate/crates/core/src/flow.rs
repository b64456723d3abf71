//! Context-conditioned invertible map `y = f(z, c)` built from affine
//! coupling layers.
//!
//! Each layer keeps the coordinates with mask bit 1 fixed and maps the rest
//! by `y_u = z_u ⊙ exp(s̃) + t`, where `s̃ = λ·tanh(s/λ)` and `s`, `t` are MLPs
//! of the fixed coordinates concatenated with the context. The log-determinant
//! is `Σ s̃`, and the inverse is closed form.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, BoundMlp, Graph, Matrix, Mlp, MlpJson, Parameterized, Var};
use crate::error::{check_dim, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowConfig {
    pub layers: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub clamp: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            layers: 6,
            hidden: vec![64, 64],
            activation: Activation::Tanh,
            clamp: 3.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CouplingLayer {
    mask: Vec<u8>,
    clamp: f64,
    scale_net: Mlp,
    translate_net: Mlp,
    pass: Vec<usize>,
    transformed: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CouplingLayerJson {
    pub mask: Vec<u8>,
    pub clamp: f64,
    pub scale_net: MlpJson,
    pub translate_net: MlpJson,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowJson {
    pub dim: usize,
    pub context_dim: usize,
    pub layers: Vec<CouplingLayerJson>,
}

fn split_mask(mask: &[u8]) -> Result<(Vec<usize>, Vec<usize>)> {
    if mask.iter().any(|&m| m > 1) {
        return Err(Error::InvalidInput(format!("mask {mask:?} is not binary")));
    }
    let pass: Vec<usize> = (0..mask.len()).filter(|&i| mask[i] == 1).collect();
    let transformed: Vec<usize> = (0..mask.len()).filter(|&i| mask[i] == 0).collect();
    if pass.is_empty() || transformed.is_empty() {
        return Err(Error::InvalidInput(format!(
            "mask {mask:?} needs at least one 0 and one 1"
        )));
    }
    Ok((pass, transformed))
}

/// Mask `1010…` for even layer indices and `0101…` for odd ones.
pub fn alternating_mask(dim: usize, layer: usize) -> Vec<u8> {
    (0..dim).map(|i| ((i + layer + 1) % 2) as u8).collect()
}

impl CouplingLayer {
    /// Layer with random hidden weights and zeroed output layers, so it starts
    /// as the identity.
    pub fn new<R: Rng + ?Sized>(
        mask: Vec<u8>,
        context_dim: usize,
        hidden: &[usize],
        activation: Activation,
        clamp: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let (pass, transformed) = split_mask(&mask)?;
        let mut widths = vec![pass.len() + context_dim];
        widths.extend_from_slice(hidden);
        widths.push(transformed.len());
        let mut scale_net = Mlp::new(&widths, activation, rng)?;
        let mut translate_net = Mlp::new(&widths, activation, rng)?;
        scale_net.zero_output_layer();
        translate_net.zero_output_layer();
        Self::from_parts(mask, clamp, scale_net, translate_net, context_dim)
    }

    pub fn from_parts(
        mask: Vec<u8>,
        clamp: f64,
        scale_net: Mlp,
        translate_net: Mlp,
        context_dim: usize,
    ) -> Result<Self> {
        let (pass, transformed) = split_mask(&mask)?;
        if !(clamp.is_finite() && clamp > 0.0) {
            return Err(Error::InvalidInput(format!("clamp {clamp} must be positive")));
        }
        for net in [&scale_net, &translate_net] {
            check_dim("coupling net input", pass.len() + context_dim, net.input_width())?;
            check_dim("coupling net output", transformed.len(), net.output_width())?;
        }
        Ok(Self {
            mask,
            clamp,
            scale_net,
            translate_net,
            pass,
            transformed,
        })
    }

    pub fn mask(&self) -> &[u8] {
        &self.mask
    }

    pub fn clamp(&self) -> f64 {
        self.clamp
    }

    pub fn scale_net(&self) -> &Mlp {
        &self.scale_net
    }

    pub fn translate_net(&self) -> &Mlp {
        &self.translate_net
    }

    pub fn scale_net_mut(&mut self) -> &mut Mlp {
        &mut self.scale_net
    }

    pub fn translate_net_mut(&mut self) -> &mut Mlp {
        &mut self.translate_net
    }

    fn apply(&self, nets: &(BoundMlp, BoundMlp), g: &mut Graph<'_>, x: Var, c: Var, inverse: bool) -> (Var, Var) {
        let fixed = g.select(x, &self.pass);
        let moving = g.select(x, &self.transformed);
        let cond = if g.value(c).ncols() > 0 {
            g.concat(&[fixed, c])
        } else {
            fixed
        };
        let raw = nets.0.apply(g, cond);
        let shrunk = g.scale(raw, 1.0 / self.clamp);
        let t = g.tanh(shrunk);
        let s = g.scale(t, self.clamp);
        let shift = nets.1.apply(g, cond);
        let (out, log_det) = if inverse {
            let neg = g.neg(s);
            let factor = g.exp(neg);
            let centered = g.sub(moving, shift);
            let out = g.mul(centered, factor);
            let ld = g.sum_cols(s);
            (out, g.neg(ld))
        } else {
            let factor = g.exp(s);
            let scaled = g.mul(moving, factor);
            (g.add(scaled, shift), g.sum_cols(s))
        };
        let merged = g.merge(
            &[(fixed, self.pass.clone()), (out, self.transformed.clone())],
            self.mask.len(),
        );
        (merged, log_det)
    }

    fn to_json(&self) -> CouplingLayerJson {
        CouplingLayerJson {
            mask: self.mask.clone(),
            clamp: self.clamp,
            scale_net: self.scale_net.to_json(),
            translate_net: self.translate_net.to_json(),
        }
    }
}

impl Parameterized for CouplingLayer {
    fn visit_params<'s>(&'s self, f: &mut dyn FnMut(&str, &'s Matrix)) {
        self.scale_net.visit_params(&mut |n, m| f(&format!("scale.{n}"), m));
        self.translate_net
            .visit_params(&mut |n, m| f(&format!("translate.{n}"), m));
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Matrix)) {
        self.scale_net.visit_params_mut(&mut |n, m| f(&format!("scale.{n}"), m));
        self.translate_net
            .visit_params_mut(&mut |n, m| f(&format!("translate.{n}"), m));
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionedFlow {
    dim: usize,
    context_dim: usize,
    layers: Vec<CouplingLayer>,
}

/// A flow whose parameters are registered with a graph.
pub struct BoundFlow<'a> {
    flow: &'a ConditionedFlow,
    nets: Vec<(BoundMlp, BoundMlp)>,
}

impl BoundFlow<'_> {
    /// `z: B×d`, `c: B×n` → (`y: B×d`, `log|det ∂y/∂z|: B×1`).
    pub fn forward(&self, g: &mut Graph<'_>, z: Var, c: Var) -> (Var, Var) {
        self.run(g, z, c, false)
    }

    /// `y: B×d`, `c: B×n` → (`z: B×d`, `log|det ∂z/∂y|: B×1`).
    pub fn inverse(&self, g: &mut Graph<'_>, y: Var, c: Var) -> (Var, Var) {
        self.run(g, y, c, true)
    }

    fn run(&self, g: &mut Graph<'_>, x: Var, c: Var, inverse: bool) -> (Var, Var) {
        let rows = g.value(x).nrows();
        let mut total = g.input(Matrix::zeros((rows, 1)));
        let mut h = x;
        let order: Box<dyn Iterator<Item = usize>> = if inverse {
            Box::new((0..self.nets.len()).rev())
        } else {
            Box::new(0..self.nets.len())
        };
        for i in order {
            let (out, ld) = self.flow.layers[i].apply(&self.nets[i], g, h, c, inverse);
            h = out;
            total = g.add(total, ld);
        }
        (h, total)
    }
}

fn row_matrix(v: &[f64]) -> Matrix {
    Array2::from_shape_vec((1, v.len()), v.to_vec()).expect("row shape")
}

impl ConditionedFlow {
    pub fn new<R: Rng + ?Sized>(dim: usize, context_dim: usize, config: &FlowConfig, rng: &mut R) -> Result<Self> {
        if dim < 2 {
            return Err(Error::InvalidInput("coupling flows need dim >= 2".into()));
        }
        let layers = (0..config.layers)
            .map(|l| {
                CouplingLayer::new(
                    alternating_mask(dim, l),
                    context_dim,
                    &config.hidden,
                    config.activation,
                    config.clamp,
                    rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            dim,
            context_dim,
            layers,
        })
    }

    pub fn from_layers(dim: usize, context_dim: usize, layers: Vec<CouplingLayer>) -> Result<Self> {
        for l in &layers {
            check_dim("coupling layer mask", dim, l.mask.len())?;
            check_dim(
                "coupling layer context",
                l.pass.len() + context_dim,
                l.scale_net.input_width(),
            )?;
        }
        Ok(Self {
            dim,
            context_dim,
            layers,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn context_dim(&self) -> usize {
        self.context_dim
    }

    pub fn layers(&self) -> &[CouplingLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [CouplingLayer] {
        &mut self.layers
    }

    pub fn bind<'a>(&'a self, g: &mut Graph<'a>) -> BoundFlow<'a> {
        let nets = self
            .layers
            .iter()
            .map(|l| (l.scale_net.bind(g), l.translate_net.bind(g)))
            .collect();
        BoundFlow { flow: self, nets }
    }

    fn check_batch(&self, x: &Matrix, c: &Matrix) -> Result<()> {
        check_dim("flow state", self.dim, x.ncols())?;
        check_dim("flow context", self.context_dim, c.ncols())?;
        check_dim("flow context rows", x.nrows(), c.nrows())
    }

    fn run_batch(&self, x: &Matrix, c: &Matrix, inverse: bool) -> Result<(Matrix, Vec<f64>)> {
        self.check_batch(x, c)?;
        let mut g = Graph::new();
        let nets: Vec<_> = self
            .layers
            .iter()
            .map(|l| (l.scale_net.bind(&mut g), l.translate_net.bind(&mut g)))
            .collect();
        let mut h = g.input(x.clone());
        let cv = g.input(c.clone());
        let mut total = vec![0.0; x.nrows()];
        let order: Vec<usize> = if inverse {
            (0..self.layers.len()).rev().collect()
        } else {
            (0..self.layers.len()).collect()
        };
        for i in order {
            let (out, ld) = self.layers[i].apply(&nets[i], &mut g, h, cv, inverse);
            if !g.value(out).iter().chain(g.value(ld).iter()).all(|v| v.is_finite()) {
                return Err(Error::Numerical(format!(
                    "coupling layer {i} produced a non-finite {}",
                    if inverse { "inverse" } else { "output" }
                )));
            }
            for (t, v) in total.iter_mut().zip(g.value(ld).column(0)) {
                *t += v;
            }
            h = out;
        }
        Ok((g.value(h).clone(), total))
    }

    /// Batched forward map with per-row `log|det ∂f/∂z|`.
    pub fn forward_batch(&self, z: &Matrix, c: &Matrix) -> Result<(Matrix, Vec<f64>)> {
        self.run_batch(z, c, false)
    }

    /// Batched inverse with per-row `log|det ∂f⁻¹/∂y|`.
    pub fn inverse_batch(&self, y: &Matrix, c: &Matrix) -> Result<(Matrix, Vec<f64>)> {
        self.run_batch(y, c, true)
    }

    pub fn forward(&self, z: &[f64], c: &[f64]) -> Result<(Vec<f64>, f64)> {
        let (y, ld) = self.forward_batch(&row_matrix(z), &row_matrix(c))?;
        Ok((y.row(0).to_vec(), ld[0]))
    }

    pub fn inverse(&self, y: &[f64], c: &[f64]) -> Result<(Vec<f64>, f64)> {
        let (z, ld) = self.inverse_batch(&row_matrix(y), &row_matrix(c))?;
        Ok((z.row(0).to_vec(), ld[0]))
    }

    /// Central-difference Jacobian `∂f/∂z` at `(z, c)`; entry `[i, j]` is
    /// `∂y_i/∂z_j`.
    pub fn jacobian_fd(&self, z: &[f64], c: &[f64], h: f64) -> Result<Matrix> {
        if !(h > 0.0) {
            return Err(Error::InvalidInput(format!("step h = {h} must be positive")));
        }
        check_dim("flow state", self.dim, z.len())?;
        let d = self.dim;
        // rows 2j / 2j+1 hold z ± h e_j
        let mut pts = Array2::zeros((2 * d, d));
        for j in 0..d {
            for k in 0..d {
                pts[[2 * j, k]] = z[k];
                pts[[2 * j + 1, k]] = z[k];
            }
            pts[[2 * j, j]] += h;
            pts[[2 * j + 1, j]] -= h;
        }
        let cs = Array2::from_shape_fn((2 * d, c.len()), |(_, k)| c[k]);
        let (ys, _) = self.forward_batch(&pts, &cs)?;
        Ok(Array2::from_shape_fn((d, d), |(i, j)| {
            (ys[[2 * j, i]] - ys[[2 * j + 1, i]]) / (2.0 * h)
        }))
    }

    pub fn to_json(&self) -> FlowJson {
        FlowJson {
            dim: self.dim,
            context_dim: self.context_dim,
            layers: self.layers.iter().map(CouplingLayer::to_json).collect(),
        }
    }

    pub fn from_json(json: &FlowJson) -> Result<Self> {
        let v = |e: Error| Error::Validation(e.to_string());
        let layers = json
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| {
                if l.mask.len() != json.dim {
                    return Err(Error::Validation(format!(
                        "layer {i}: mask length {} != dim {}",
                        l.mask.len(),
                        json.dim
                    )));
                }
                let s = Mlp::from_json(&l.scale_net)?;
                let t = Mlp::from_json(&l.translate_net)?;
                CouplingLayer::from_parts(l.mask.clone(), l.clamp, s, t, json.context_dim)
                    .map_err(|e| Error::Validation(format!("layer {i}: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_layers(json.dim, json.context_dim, layers).map_err(v)
    }
}

impl Parameterized for ConditionedFlow {
    fn visit_params<'s>(&'s self, f: &mut dyn FnMut(&str, &'s Matrix)) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit_params(&mut |n, m| f(&format!("coupling{i}.{n}"), m));
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Matrix)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_params_mut(&mut |n, m| f(&format!("coupling{i}.{n}"), m));
        }
    }
}
