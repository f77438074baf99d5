//! Differentiable substrate: tensors, the tape, layers, optimizers and
//! gradient verification.

pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tensor;

pub use gradcheck::{check_gradients, check_params, GradCheckReport};
pub use graph::{entropy_of, Graph, Var, EPS};
pub use layers::{LayerNorm, Linear, Mlp};
pub use optim::{Adam, AdamConfig};
pub use params::{Bindings, ParamId, Params};
pub use rng::Rng;
pub use tensor::Tensor;
