//! Stage one: identity normalization of sample vectors.
//!
//! A shared encoder embeds the original sample `I_o` and the target sample
//! `I_t` into patch embeddings, the expression merging module fuses them and
//! a decoder produces the normalized sample `I_n`.

mod embedders;
mod losses;
mod train;

pub use embedders::{Discriminator, EmbedderSuite, LinearEmbedder};
pub use losses::{discriminator_loss, norm_loss, NormLossBreakdown, NormLossWeights};
pub use train::{evaluate_losses, train_normalizer, LossCurves, NormTrainConfig, NormTrainReport};

use serde::{Deserialize, Serialize};

use crate::attention::{emm_forward, AttentionConfig, EmmParams};
use crate::diffcore::{Bindings, Graph, Mlp, Params, Rng, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizerConfig {
    pub sample_dim: usize,
    pub n_patches: usize,
    pub patch_dim: usize,
    pub num_heads: usize,
    pub encoder_hidden: usize,
    pub decoder_hidden: usize,
    /// Std of the encoder's output bias at init. Nonzero values give each
    /// patch slot a distinct offset, which lets attention align slots.
    pub token_bias_init: f64,
}

impl Default for NormalizerConfig {
    fn default() -> Self {
        NormalizerConfig {
            sample_dim: 64,
            n_patches: 16,
            patch_dim: 32,
            num_heads: 4,
            encoder_hidden: 128,
            decoder_hidden: 128,
            token_bias_init: 1.0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NormalizerModel {
    pub config: NormalizerConfig,
    pub attention: AttentionConfig,
    pub params: Params,
    /// Shared by `I_o` and `I_t`.
    pub encoder: Mlp,
    pub emm: EmmParams,
    pub decoder: Mlp,
}

impl NormalizerModel {
    pub fn new(config: NormalizerConfig, rng: &mut Rng) -> Result<Self> {
        let attention = AttentionConfig::new(config.patch_dim, config.num_heads)?;
        let patches = config.n_patches * config.patch_dim;
        let mut params = Params::new();
        let encoder = Mlp::new(&mut params, "encoder", [config.sample_dim, config.encoder_hidden, patches], rng);
        if config.token_bias_init > 0.0 {
            *params.get_mut(encoder.fc2.b) =
                Tensor::from_vec(1, patches, rng.normal_vec(patches, config.token_bias_init))?;
        }
        let emm = EmmParams::new(&mut params, "emm", &attention, rng);
        let decoder = Mlp::new(&mut params, "decoder", [patches, config.decoder_hidden, config.sample_dim], rng);
        Ok(NormalizerModel { config, attention, params, encoder, emm, decoder })
    }

    /// `E_s`: `B×sample_dim → (B·N)×L`.
    pub fn encode(&self, g: &mut Graph, p: &Bindings, x: Var) -> Result<Var> {
        let (b, d) = g.shape(x);
        if d != self.config.sample_dim {
            return Err(Error::Dimension { op: "normalizer.encode", lhs: (b, d), rhs: (b, self.config.sample_dim) });
        }
        let e = self.encoder.forward(g, p, x)?;
        g.reshape(e, b * self.config.n_patches, self.config.patch_dim)
    }

    /// `I_n = D_f(EMM(E_s(I_t), E_s(I_o)))` on row-stacked batches.
    pub fn forward(&self, g: &mut Graph, p: &Bindings, i_o: Var, i_t: Var) -> Result<Var> {
        if g.shape(i_o) != g.shape(i_t) {
            return Err(Error::Dimension { op: "normalize", lhs: g.shape(i_o), rhs: g.shape(i_t) });
        }
        let b = g.shape(i_o).0;
        let e_o = self.encode(g, p, i_o)?;
        let e_t = self.encode(g, p, i_t)?;
        let e_n = emm_forward(g, p, &self.emm, &self.attention, e_t, e_o, self.config.n_patches)?;
        let flat = g.reshape(e_n, b, self.config.n_patches * self.config.patch_dim)?;
        self.decoder.forward(g, p, flat)
    }

    /// Batch inference without gradients.
    pub fn normalize(&self, i_o: &Tensor, i_t: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let o = g.constant(i_o.clone());
        let t = g.constant(i_t.clone());
        let n = self.forward(&mut g, &p, o, t)?;
        Ok(g.value(n).clone())
    }

    /// Normalizes every row of `originals` toward one fixed target sample.
    pub fn normalize_to_target(&self, originals: &Tensor, target: &[f64], chunk: usize) -> Result<Tensor> {
        let mut out = Vec::with_capacity(originals.len());
        let mut r = 0;
        while r < originals.rows() {
            let r1 = (r + chunk.max(1)).min(originals.rows());
            let o = originals.slice(r, r1, 0, originals.cols());
            let mut t = Tensor::zeros(r1 - r, target.len());
            for i in 0..t.rows() {
                t.row_mut(i).copy_from_slice(target);
            }
            out.extend_from_slice(self.normalize(&o, &t)?.data());
            r = r1;
        }
        Tensor::from_vec(originals.rows(), self.config.sample_dim, out)
    }
}
