use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::graph::Matrix;
use crate::error::{Error, Result};

/// Flat, ordered view of every trainable scalar of a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }

    /// Hex SHA-256 of the little-endian bytes of every value.
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for v in &self.0 {
            hasher.update(v.to_le_bytes());
        }
        hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Where one parameter tensor lives inside a [`ParamVector`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamEntry {
    pub name: String,
    pub offset: usize,
    pub shape: (usize, usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ParamLayout {
    pub entries: Vec<ParamEntry>,
}

impl ParamLayout {
    pub fn len(&self) -> usize {
        self.entries
            .last()
            .map(|e| e.offset + e.shape.0 * e.shape.1)
            .unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Entry owning a flat index.
    pub fn locate(&self, index: usize) -> Option<&ParamEntry> {
        self.entries
            .iter()
            .find(|e| index >= e.offset && index < e.offset + e.shape.0 * e.shape.1)
    }
}

/// Models whose parameters can be flattened in a stable order.
///
/// The visiting order must match the order in which the model registers its
/// tensors with [`super::Graph::param`], so that graph gradients line up with
/// [`Parameterized::flatten`].
pub trait Parameterized {
    fn visit_params<'s>(&'s self, f: &mut dyn FnMut(&str, &'s Matrix));
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Matrix));

    fn layout(&self) -> ParamLayout {
        let mut entries = Vec::new();
        let mut offset = 0;
        self.visit_params(&mut |name, m| {
            entries.push(ParamEntry {
                name: name.to_string(),
                offset,
                shape: m.dim(),
            });
            offset += m.len();
        });
        ParamLayout { entries }
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, m| n += m.len());
        n
    }

    fn flatten(&self) -> ParamVector {
        let mut out = Vec::new();
        self.visit_params(&mut |_, m| out.extend(m.iter().copied()));
        ParamVector(out)
    }

    fn unflatten(&mut self, params: &ParamVector) -> Result<()> {
        let expected = self.param_count();
        if params.len() != expected {
            return Err(Error::DimensionMismatch {
                context: "parameter vector",
                expected,
                actual: params.len(),
            });
        }
        if !params.is_finite() {
            return Err(Error::Numerical("non-finite parameter value".into()));
        }
        let mut offset = 0;
        self.visit_params_mut(&mut |_, m| {
            let n = m.len();
            for (dst, src) in m.iter_mut().zip(&params.0[offset..offset + n]) {
                *dst = *src;
            }
            offset += n;
        });
        Ok(())
    }
}
