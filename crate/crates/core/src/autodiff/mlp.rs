use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, Matrix, Var};
use super::params::Parameterized;
use crate::error::{check_dim, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Softplus,
}

/// Fully connected network with a smooth hidden activation and an affine
/// output layer.
///
/// Weights are stored `out×in`, biases as `1×out` rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    widths: Vec<usize>,
    activation: Activation,
    weights: Vec<Matrix>,
    biases: Vec<Matrix>,
}

/// On-disk form of an [`Mlp`]: weights are per-layer row-major `out×in`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpJson {
    pub layer_widths: Vec<usize>,
    pub activation: Activation,
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

fn validate_widths(widths: &[usize]) -> Result<()> {
    if widths.len() < 2 {
        return Err(Error::InvalidInput(
            "an MLP needs at least an input and an output width".into(),
        ));
    }
    if widths.contains(&0) {
        return Err(Error::InvalidInput("layer widths must be positive".into()));
    }
    Ok(())
}

impl Mlp {
    /// Uniform `[-1/√fan_in, 1/√fan_in]` initialization of weights and biases.
    pub fn new<R: Rng + ?Sized>(widths: &[usize], activation: Activation, rng: &mut R) -> Result<Self> {
        validate_widths(widths)?;
        let mut weights = Vec::with_capacity(widths.len() - 1);
        let mut biases = Vec::with_capacity(widths.len() - 1);
        for pair in widths.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            weights.push(Array2::from_shape_fn((fan_out, fan_in), |_| {
                rng.random_range(-bound..=bound)
            }));
            biases.push(Array2::from_shape_fn((1, fan_out), |_| {
                rng.random_range(-bound..=bound)
            }));
        }
        Ok(Self {
            widths: widths.to_vec(),
            activation,
            weights,
            biases,
        })
    }

    pub fn zeros(widths: &[usize], activation: Activation) -> Result<Self> {
        validate_widths(widths)?;
        let weights = widths.windows(2).map(|p| Matrix::zeros((p[1], p[0]))).collect();
        let biases = widths.windows(2).map(|p| Matrix::zeros((1, p[1]))).collect();
        Ok(Self {
            widths: widths.to_vec(),
            activation,
            weights,
            biases,
        })
    }

    /// Builds a network from explicit `out×in` weights and bias vectors.
    pub fn from_parts(activation: Activation, weights: Vec<Matrix>, biases: Vec<Vec<f64>>) -> Result<Self> {
        if weights.is_empty() || weights.len() != biases.len() {
            return Err(Error::InvalidInput("weights/biases layer count mismatch".into()));
        }
        let mut widths = vec![weights[0].ncols()];
        for (w, b) in weights.iter().zip(&biases) {
            check_dim("mlp layer chaining", *widths.last().unwrap(), w.ncols())?;
            check_dim("mlp bias length", w.nrows(), b.len())?;
            widths.push(w.nrows());
        }
        validate_widths(&widths)?;
        let biases = biases
            .into_iter()
            .map(|b| Array2::from_shape_vec((1, b.len()), b).expect("row shape"))
            .collect();
        let net = Self {
            widths,
            activation,
            weights,
            biases,
        };
        net.check_finite()?;
        Ok(net)
    }

    fn check_finite(&self) -> Result<()> {
        let ok = self
            .weights
            .iter()
            .chain(&self.biases)
            .all(|m| m.iter().all(|x| x.is_finite()));
        if ok {
            Ok(())
        } else {
            Err(Error::Validation("non-finite MLP parameter".into()))
        }
    }

    /// Zeroes the final affine layer so the network outputs exactly zero.
    pub fn zero_output_layer(&mut self) {
        self.weights.last_mut().unwrap().fill(0.0);
        self.biases.last_mut().unwrap().fill(0.0);
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn weights(&self) -> &[Matrix] {
        &self.weights
    }

    pub fn biases(&self) -> &[Matrix] {
        &self.biases
    }

    pub fn weights_mut(&mut self) -> &mut [Matrix] {
        &mut self.weights
    }

    pub fn biases_mut(&mut self) -> &mut [Matrix] {
        &mut self.biases
    }

    /// Single-input evaluation.
    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        check_dim("mlp input", self.input_width(), input.len())?;
        let mut g = Graph::new();
        let bound = self.bind(&mut g);
        let x = g.input(Array2::from_shape_vec((1, input.len()), input.to_vec()).unwrap());
        let y = bound.apply(&mut g, x);
        Ok(g.value(y).row(0).to_vec())
    }

    /// Registers this network's tensors with a graph, in
    /// [`Parameterized::visit_params`] order.
    pub fn bind<'a>(&'a self, g: &mut Graph<'a>) -> BoundMlp {
        let layers = self
            .weights
            .iter()
            .zip(&self.biases)
            .map(|(w, b)| (g.param(w), g.param(b)))
            .collect();
        BoundMlp {
            layers,
            activation: self.activation,
        }
    }

    pub fn to_json(&self) -> MlpJson {
        MlpJson {
            layer_widths: self.widths.clone(),
            activation: self.activation,
            weights: self.weights.iter().map(|w| w.iter().copied().collect()).collect(),
            biases: self.biases.iter().map(|b| b.iter().copied().collect()).collect(),
        }
    }

    pub fn from_json(json: &MlpJson) -> Result<Self> {
        validate_widths(&json.layer_widths).map_err(|e| Error::Validation(e.to_string()))?;
        let layers = json.layer_widths.len() - 1;
        if json.weights.len() != layers || json.biases.len() != layers {
            return Err(Error::Validation(format!(
                "expected {layers} weight and bias arrays, got {} and {}",
                json.weights.len(),
                json.biases.len()
            )));
        }
        let mut weights = Vec::with_capacity(layers);
        let mut biases = Vec::with_capacity(layers);
        for (l, pair) in json.layer_widths.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let w = Array2::from_shape_vec((fan_out, fan_in), json.weights[l].clone()).map_err(|_| {
                Error::Validation(format!(
                    "layer {l}: weight array has {} entries, expected {}",
                    json.weights[l].len(),
                    fan_out * fan_in
                ))
            })?;
            let b = Array2::from_shape_vec((1, fan_out), json.biases[l].clone()).map_err(|_| {
                Error::Validation(format!(
                    "layer {l}: bias array has {} entries, expected {fan_out}",
                    json.biases[l].len()
                ))
            })?;
            weights.push(w);
            biases.push(b);
        }
        let net = Self {
            widths: json.layer_widths.clone(),
            activation: json.activation,
            weights,
            biases,
        };
        net.check_finite()?;
        Ok(net)
    }
}

impl Parameterized for Mlp {
    fn visit_params<'s>(&'s self, f: &mut dyn FnMut(&str, &'s Matrix)) {
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            f(&format!("layer{l}.weight"), w);
            f(&format!("layer{l}.bias"), b);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Matrix)) {
        for (l, (w, b)) in self.weights.iter_mut().zip(self.biases.iter_mut()).enumerate() {
            f(&format!("layer{l}.weight"), w);
            f(&format!("layer{l}.bias"), b);
        }
    }
}

/// An [`Mlp`] whose parameters have been registered with a graph.
#[derive(Debug, Clone)]
pub struct BoundMlp {
    layers: Vec<(Var, Var)>,
    activation: Activation,
}

impl BoundMlp {
    pub fn apply(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let last = self.layers.len() - 1;
        let mut h = x;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let lin = g.matmul_t(h, w);
            h = g.add_row(lin, b);
            if i < last {
                h = match self.activation {
                    Activation::Tanh => g.tanh(h),
                    Activation::Softplus => g.softplus(h),
                };
            }
        }
        h
    }
}
