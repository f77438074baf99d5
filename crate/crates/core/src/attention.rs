//! Multi-head cross-attention and the expression merging module (EMM).
//!
//! Patch embeddings of a batch are stacked along rows: a batch of `B`
//! samples with `N` patches each is a `(B·N)×L` matrix, and attention is
//! evaluated independently inside every `N`-row block.

use serde::{Deserialize, Serialize};

use crate::diffcore::{Bindings, Graph, LayerNorm, Linear, Mlp, Params, Rng, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub model_dim: usize,
    pub num_heads: usize,
}

impl AttentionConfig {
    pub fn new(model_dim: usize, num_heads: usize) -> Result<Self> {
        let cfg = AttentionConfig { model_dim, num_heads };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 || self.model_dim == 0 || !self.model_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "model_dim {} must be a positive multiple of num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        Ok(())
    }

    pub fn d_k(&self) -> usize {
        self.model_dim / self.num_heads
    }
}

/// Q/K/V projections (each `L×L`, split column-wise across heads) plus the
/// output projection.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AttentionParams {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
}

impl AttentionParams {
    pub fn new(params: &mut Params, name: &str, dim: usize, rng: &mut Rng) -> Self {
        AttentionParams {
            query: Linear::new(params, &format!("{name}.q"), dim, dim, rng),
            key: Linear::new(params, &format!("{name}.k"), dim, dim, rng),
            value: Linear::new(params, &format!("{name}.v"), dim, dim, rng),
            out: Linear::new(params, &format!("{name}.o"), dim, dim, rng),
        }
    }
}

/// Pre-LN transformer block: `x + SA(LN(x))`, then `x + MLP(LN(x))`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TransformerBlock {
    pub ln_attn: LayerNorm,
    pub attn: AttentionParams,
    pub ln_mlp: LayerNorm,
    pub mlp: Mlp,
}

impl TransformerBlock {
    pub fn new(params: &mut Params, name: &str, dim: usize, rng: &mut Rng) -> Self {
        TransformerBlock {
            ln_attn: LayerNorm::new(params, &format!("{name}.ln1"), dim),
            attn: AttentionParams::new(params, &format!("{name}.attn"), dim, rng),
            ln_mlp: LayerNorm::new(params, &format!("{name}.ln2"), dim),
            mlp: Mlp::new(params, &format!("{name}.mlp"), [dim, 4 * dim, dim], rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bindings, cfg: &AttentionConfig, x: Var, n_patches: usize) -> Result<Var> {
        let h = self.ln_attn.forward(g, p, x)?;
        let a = self_attention(g, p, &self.attn, cfg, h, n_patches)?;
        let x = g.add(x, a)?;
        let h = self.ln_mlp.forward(g, p, x)?;
        let m = self.mlp.forward(g, p, h)?;
        g.add(x, m)
    }
}

/// Parameter layout of the expression merging module.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EmmParams {
    pub cross: AttentionParams,
    pub ln: LayerNorm,
    pub mlp: Mlp,
    pub blocks: Vec<TransformerBlock>,
}

impl EmmParams {
    pub fn new(params: &mut Params, name: &str, cfg: &AttentionConfig, rng: &mut Rng) -> Self {
        let dim = cfg.model_dim;
        EmmParams {
            cross: AttentionParams::new(params, &format!("{name}.cross"), dim, rng),
            ln: LayerNorm::new(params, &format!("{name}.ln"), dim),
            mlp: Mlp::new(params, &format!("{name}.mlp"), [dim, 4 * dim, dim], rng),
            blocks: (0..2).map(|i| TransformerBlock::new(params, &format!("{name}.block{i}"), dim, rng)).collect(),
        }
    }
}

/// Output of the attention core: concatenated heads and the per-(sample,
/// head) attention matrices, in sample-major order.
pub struct Attended {
    pub heads: Var,
    pub weights: Vec<Tensor>,
}

fn check_stacked(g: &Graph, cfg: &AttentionConfig, x: Var, n_patches: usize) -> Result<()> {
    let (rows, cols) = g.shape(x);
    if n_patches == 0 || rows == 0 {
        return Err(Error::EmptyInput("attention"));
    }
    if cols != cfg.model_dim || rows % n_patches != 0 {
        return Err(Error::Dimension { op: "attention", lhs: (rows, cols), rhs: (n_patches, cfg.model_dim) });
    }
    Ok(())
}

/// `softmax(Q Kᵀ / √d_k) V` per sample block and head; heads concatenated
/// along columns.
pub fn attend(g: &mut Graph, cfg: &AttentionConfig, q: Var, k: Var, v: Var, n_patches: usize) -> Result<Attended> {
    check_stacked(g, cfg, q, n_patches)?;
    if g.shape(k) != g.shape(q) || g.shape(v) != g.shape(q) {
        return Err(Error::Dimension { op: "attention", lhs: g.shape(q), rhs: g.shape(k) });
    }
    let (heads, weights) = g.block_attention(q, k, v, n_patches, cfg.num_heads)?;
    Ok(Attended { heads, weights })
}

pub struct CrossAttentionOutput {
    /// `V_fu` after the output projection.
    pub output: Var,
    /// `CA·V_o + V_t` before the output projection.
    pub fused: Var,
    pub weights: Vec<Tensor>,
}

/// Cross-attention with target queries and original keys/values:
/// `CA = softmax(Q_t K_oᵀ/√d_k)`, `V_fu = CA·V_o + V_t`, then the output
/// projection.
pub fn cross_attention(
    g: &mut Graph,
    p: &Bindings,
    params: &AttentionParams,
    cfg: &AttentionConfig,
    e_t: Var,
    e_o: Var,
    n_patches: usize,
) -> Result<CrossAttentionOutput> {
    check_stacked(g, cfg, e_t, n_patches)?;
    check_stacked(g, cfg, e_o, n_patches)?;
    if g.shape(e_t) != g.shape(e_o) {
        return Err(Error::Dimension { op: "cross_attention", lhs: g.shape(e_t), rhs: g.shape(e_o) });
    }
    let q_t = params.query.forward(g, p, e_t)?;
    let k_o = params.key.forward(g, p, e_o)?;
    let v_o = params.value.forward(g, p, e_o)?;
    let v_t = params.value.forward(g, p, e_t)?;
    let att = attend(g, cfg, q_t, k_o, v_o, n_patches)?;
    let fused = g.add(att.heads, v_t)?;
    let output = params.out.forward(g, p, fused)?;
    Ok(CrossAttentionOutput { output, fused, weights: att.weights })
}

pub fn self_attention(
    g: &mut Graph,
    p: &Bindings,
    params: &AttentionParams,
    cfg: &AttentionConfig,
    x: Var,
    n_patches: usize,
) -> Result<Var> {
    let q = params.query.forward(g, p, x)?;
    let k = params.key.forward(g, p, x)?;
    let v = params.value.forward(g, p, x)?;
    let att = attend(g, cfg, q, k, v, n_patches)?;
    params.out.forward(g, p, att.heads)
}

/// Cross-attention, then `x + MLP(LN(x))`, then two transformer blocks.
pub fn emm_forward(
    g: &mut Graph,
    p: &Bindings,
    params: &EmmParams,
    cfg: &AttentionConfig,
    e_t: Var,
    e_o: Var,
    n_patches: usize,
) -> Result<Var> {
    let ca = cross_attention(g, p, &params.cross, cfg, e_t, e_o, n_patches)?;
    let x = ca.output;
    let h = params.ln.forward(g, p, x)?;
    let m = params.mlp.forward(g, p, h)?;
    let mut x = g.add(x, m)?;
    for block in &params.blocks {
        x = block.forward(g, p, cfg, x, n_patches)?;
    }
    Ok(x)
}
