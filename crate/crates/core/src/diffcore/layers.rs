//! Small parameterized building blocks shared by the models.

use serde::{Deserialize, Serialize};

use crate::error::Result;

use super::graph::{Graph, Var};
use super::params::{Bindings, ParamId, Params};
use super::rng::Rng;
use super::tensor::Tensor;

pub(crate) fn glorot(rng: &mut Rng, rows: usize, cols: usize) -> Tensor {
    let std = (2.0 / (rows + cols) as f64).sqrt();
    Tensor::from_vec(rows, cols, rng.normal_vec(rows * cols, std)).expect("glorot shape")
}

/// `x·W + b`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(params: &mut Params, name: &str, in_dim: usize, out_dim: usize, rng: &mut Rng) -> Self {
        let w = params.add(format!("{name}.w"), glorot(rng, in_dim, out_dim));
        let b = params.add(format!("{name}.b"), Tensor::zeros(1, out_dim));
        Linear { w, b, in_dim, out_dim }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bindings, x: Var) -> Result<Var> {
        let h = g.matmul(x, p[self.w])?;
        g.add_row(h, p[self.b])
    }

    pub fn num_params(&self) -> usize {
        (self.in_dim + 1) * self.out_dim
    }
}

/// Two linear layers with a GELU in between.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(params: &mut Params, name: &str, dims: [usize; 3], rng: &mut Rng) -> Self {
        Mlp {
            fc1: Linear::new(params, &format!("{name}.fc1"), dims[0], dims[1], rng),
            fc2: Linear::new(params, &format!("{name}.fc2"), dims[1], dims[2], rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bindings, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, p, x)?;
        let h = g.gelu(h);
        self.fc2.forward(g, p, h)
    }

    pub fn num_params(&self) -> usize {
        self.fc1.num_params() + self.fc2.num_params()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(params: &mut Params, name: &str, dim: usize) -> Self {
        LayerNorm {
            gain: params.add(format!("{name}.gain"), Tensor::filled(1, dim, 1.0)),
            bias: params.add(format!("{name}.bias"), Tensor::zeros(1, dim)),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bindings, x: Var) -> Result<Var> {
        g.layer_norm(x, p[self.gain], p[self.bias])
    }
}
