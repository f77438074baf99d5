use serde::{Deserialize, Serialize};

use crate::diffcore::{Bindings, Graph, Mlp, Params, Rng, Tensor, Var};
use crate::error::Result;
use crate::synthdata::{FactorBlock, FactorSpace};

/// Fixed linear map `x ↦ x·W` on sample vectors.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LinearEmbedder {
    pub name: String,
    /// `sample_dim × out_dim`.
    pub weights: Tensor,
}

impl LinearEmbedder {
    pub fn new(name: &str, weights: Tensor) -> Self {
        LinearEmbedder { name: name.into(), weights }
    }

    pub fn out_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn embed(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.constant(self.weights.clone());
        g.matmul(x, w)
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(Tensor::row_vector(x.to_vec()).matmul(&self.weights)?.into_data())
    }
}

/// Two-layer scorer on the concatenated pair `[I_t, I_x]`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Discriminator {
    pub params: Params,
    pub mlp: Mlp,
}

impl Discriminator {
    pub fn new(sample_dim: usize, hidden: usize, rng: &mut Rng) -> Self {
        let mut params = Params::new();
        let mlp = Mlp::new(&mut params, "disc", [2 * sample_dim, hidden, 1], rng);
        Discriminator { params, mlp }
    }

    /// Scores a `B×(2·sample_dim)` pair matrix, giving `B×1`.
    pub fn score(&self, g: &mut Graph, p: &Bindings, pair: Var) -> Result<Var> {
        self.mlp.forward(g, p, pair)
    }
}

/// The fixed embedders behind the loss terms, plus the trainable
/// discriminator.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EmbedderSuite {
    pub identity: LinearEmbedder,
    pub expression: LinearEmbedder,
    pub eyebrow: LinearEmbedder,
    pub perceptual: LinearEmbedder,
    pub contour: LinearEmbedder,
    pub discriminator: Discriminator,
}

/// Number of leading expression channels read by the eyebrow embedder.
pub const EYEBROW_CHANNELS: usize = 4;

fn random_square(rng: &mut Rng, n: usize) -> Tensor {
    Tensor::from_vec(n, n, rng.normal_vec(n * n, 1.0 / (n as f64).sqrt())).expect("square")
}

fn compose(readout: &Tensor, mix: &Tensor) -> Tensor {
    readout.matmul(mix).expect("embedder composition")
}

impl EmbedderSuite {
    /// Builds each embedder from the factor read-outs of `space`:
    /// identity reads identity factors, expression reads expression
    /// factors, eyebrow reads the leading expression channels, contour reads
    /// identity and pose, perceptual is a random full-rank map of the whole
    /// sample.
    pub fn from_space(space: &FactorSpace, disc_hidden: usize, rng: &mut Rng) -> Self {
        let c = &space.config;
        let id = space.readout_block(FactorBlock::Identity);
        let exp = space.readout_block(FactorBlock::Expression);
        let pose = space.readout_block(FactorBlock::Pose);

        let identity = compose(&id, &random_square(rng, c.dim_identity));
        let expression = compose(&exp, &random_square(rng, c.dim_expression));
        let brow = exp.slice(0, exp.rows(), 0, EYEBROW_CHANNELS.min(exp.cols()));
        let eyebrow = compose(&brow, &random_square(rng, brow.cols()));
        let mut contour_read = Tensor::zeros(c.sample_dim, c.dim_identity + c.dim_pose);
        for r in 0..c.sample_dim {
            contour_read.row_mut(r)[..c.dim_identity].copy_from_slice(id.row(r));
            contour_read.row_mut(r)[c.dim_identity..].copy_from_slice(pose.row(r));
        }
        let contour = compose(&contour_read, &random_square(rng, c.dim_identity + c.dim_pose));
        let perceptual = random_square(rng, c.sample_dim);
        EmbedderSuite {
            identity: LinearEmbedder::new("identity", identity),
            expression: LinearEmbedder::new("expression", expression),
            eyebrow: LinearEmbedder::new("eyebrow", eyebrow),
            perceptual: LinearEmbedder::new("perceptual", perceptual),
            contour: LinearEmbedder::new("contour", contour),
            discriminator: Discriminator::new(c.sample_dim, disc_hidden, rng),
        }
    }
}
