//! Stage two: a classifier fed both the normalized and the original sample.
//!
//! A shared feature extractor embeds both streams, a per-stream input block
//! `M_i` refines each embedding, the two are concatenated and passed through
//! an output block `M_o` and a linear head. Each block is a sparse MoE, a
//! parameter-matched MLP, or the identity, depending on the variant.

mod loss;
mod train;

pub use loss::{cla_loss, ClaLossBreakdown, ClaLossWeights};
pub use train::{
    predict, train_classifier, ClassifierInputs, ClassifierTrainConfig, ClassifierTrainReport, EpochMetric, Predictions,
};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::diffcore::{Bindings, Graph, Linear, Mlp, ParamId, Params, Rng, Var};
use crate::error::{Error, Result};
use crate::moe::{GateDecision, MoeBlock, MoeConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    AuDetect,
    AuIntensity,
    Fer,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::AuDetect => "au-detect",
            TaskKind::AuIntensity => "au-intensity",
            TaskKind::Fer => "fer",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "au-detect" => Ok(TaskKind::AuDetect),
            "au-intensity" => Ok(TaskKind::AuIntensity),
            "fer" => Ok(TaskKind::Fer),
            other => Err(Error::Config(format!("unknown task `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub n_labels: usize,
    /// Top of the intensity scale (intensity task only).
    pub intensity_scale_max: f64,
}

impl TaskSpec {
    /// 12 action units, 5 intensity-coded units on a 0..=5 scale, or 7
    /// expression classes.
    pub fn new(kind: TaskKind) -> Self {
        let n_labels = match kind {
            TaskKind::AuDetect => 12,
            TaskKind::AuIntensity => 5,
            TaskKind::Fer => 7,
        };
        TaskSpec { kind, n_labels, intensity_scale_max: 5.0 }
    }

    pub fn label_names(&self) -> Vec<String> {
        match self.kind {
            TaskKind::Fer => (0..self.n_labels).map(|c| format!("class{c}")).collect(),
            _ => (0..self.n_labels).map(|a| format!("AU{}", a + 1)).collect(),
        }
    }
}

/// Construction of a single `M_i` / `M_o` block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum BlockKind {
    Moe(MoeConfig),
    /// Dense two-layer MLP with the given hidden width.
    Mlp {
        hidden: usize,
    },
    Identity,
}

/// Architectural variants compared by the ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    Full,
    NoInputMoe,
    NoOutputMoe,
    NoMoe,
    Experts(usize),
}

impl Variant {
    pub const ABLATIONS: [&'static str; 9] = ["full", "no_Mi", "no_Mo", "no_both", "m0", "m1", "m2", "m4", "m8"];

    pub fn name(&self) -> String {
        match self {
            Variant::Full => "full".into(),
            Variant::NoInputMoe => "no_Mi".into(),
            Variant::NoOutputMoe => "no_Mo".into(),
            Variant::NoMoe => "no_both".into(),
            Variant::Experts(m) => format!("m{m}"),
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Variant::Full),
            "no_Mi" => Ok(Variant::NoInputMoe),
            "no_Mo" => Ok(Variant::NoOutputMoe),
            "no_both" => Ok(Variant::NoMoe),
            _ => s
                .strip_prefix('m')
                .and_then(|m| m.parse().ok())
                .map(Variant::Experts)
                .ok_or_else(|| Error::UnknownVariant(s.into())),
        }
    }
}

/// Hidden width of a dense MLP `d → H → d` whose parameter count matches a
/// `d → d` MoE block.
pub fn matched_mlp_hidden(moe: &MoeConfig, dim: usize) -> usize {
    let expert = dim * moe.expert_hidden + moe.expert_hidden + moe.expert_hidden * dim + dim;
    let total = moe.num_experts * expert + 2 * dim * moe.num_experts;
    let h = (total.saturating_sub(dim)) as f64 / (2 * dim + 1) as f64;
    (h.round() as usize).max(1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub task: TaskSpec,
    pub sample_dim: usize,
    pub extractor_hidden: usize,
    /// Width of each stream embedding; `M_o` sees twice this.
    pub feature_dim: usize,
    pub moe: MoeConfig,
    pub input_block: BlockKind,
    pub output_block: BlockKind,
}

impl ClassifierConfig {
    /// Architecture of `variant` built around the base MoE configuration.
    pub fn for_variant(task: TaskSpec, moe: MoeConfig, variant: Variant) -> Result<Self> {
        moe.validate()?;
        let feature_dim = 32;
        let fused = 2 * feature_dim;
        let as_mlp = |dim| BlockKind::Mlp { hidden: matched_mlp_hidden(&moe, dim) };
        let (input_block, output_block) = match variant {
            Variant::Full => (BlockKind::Moe(moe), BlockKind::Moe(moe)),
            Variant::NoInputMoe => (as_mlp(feature_dim), BlockKind::Moe(moe)),
            Variant::NoOutputMoe => (BlockKind::Moe(moe), as_mlp(fused)),
            Variant::NoMoe => (as_mlp(feature_dim), as_mlp(fused)),
            Variant::Experts(0) => (BlockKind::Identity, BlockKind::Identity),
            Variant::Experts(m) => {
                let cfg = MoeConfig { num_experts: m, top_k: moe.top_k.min(m), ..moe };
                (BlockKind::Moe(cfg), BlockKind::Moe(cfg))
            }
        };
        Ok(ClassifierConfig { task, sample_dim: 64, extractor_hidden: 64, feature_dim, moe, input_block, output_block })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub enum Block {
    Moe(MoeBlock),
    Mlp(Mlp),
    Identity,
}

impl Block {
    fn new(params: &mut Params, name: &str, kind: BlockKind, dim: usize, rng: &mut Rng) -> Result<Self> {
        Ok(match kind {
            BlockKind::Moe(cfg) => Block::Moe(MoeBlock::new(params, name, cfg, dim, dim, rng)?),
            BlockKind::Mlp { hidden } => Block::Mlp(Mlp::new(params, name, [dim, hidden, dim], rng)),
            BlockKind::Identity => Block::Identity,
        })
    }

    pub fn num_params(&self) -> usize {
        match self {
            Block::Moe(m) => m.num_params(),
            Block::Mlp(m) => m.num_params(),
            Block::Identity => 0,
        }
    }
}

/// Routing record of one MoE block in a forward pass.
pub struct BlockRouting {
    pub block: &'static str,
    pub probs: Var,
    pub gates: Var,
    pub decisions: Vec<GateDecision>,
    pub routed: Vec<Vec<usize>>,
}

pub struct ClassifierForward {
    /// `B × n_labels` raw outputs.
    pub logits: Var,
    pub routing: Vec<BlockRouting>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClassifierModel {
    pub config: ClassifierConfig,
    pub params: Params,
    /// Shared by both streams.
    pub extractor: Mlp,
    pub input_normalized: Block,
    pub input_original: Block,
    pub output: Block,
    pub head: Linear,
}

pub const BLOCK_NAMES: [&str; 3] = ["M_i.n", "M_i.o", "M_o"];

impl ClassifierModel {
    pub fn new(config: ClassifierConfig, rng: &mut Rng) -> Result<Self> {
        let mut params = Params::new();
        let f = config.feature_dim;
        let extractor = Mlp::new(&mut params, "extractor", [config.sample_dim, config.extractor_hidden, f], rng);
        let input_normalized = Block::new(&mut params, BLOCK_NAMES[0], config.input_block, f, rng)?;
        let input_original = Block::new(&mut params, BLOCK_NAMES[1], config.input_block, f, rng)?;
        let output = Block::new(&mut params, BLOCK_NAMES[2], config.output_block, 2 * f, rng)?;
        let head = Linear::new(&mut params, "head", 2 * f, config.task.n_labels, rng);
        Ok(ClassifierModel { config, params, extractor, input_normalized, input_original, output, head })
    }

    pub fn blocks(&self) -> [&Block; 3] {
        [&self.input_normalized, &self.input_original, &self.output]
    }

    /// Parameters of the three `M_i` / `M_o` blocks.
    pub fn block_params(&self) -> usize {
        self.blocks().iter().map(|b| b.num_params()).sum()
    }

    fn apply_block(
        g: &mut Graph,
        p: &Bindings,
        block: &Block,
        name: &'static str,
        x: Var,
        rng: Option<&mut Rng>,
        routing: &mut Vec<BlockRouting>,
    ) -> Result<Var> {
        match block {
            Block::Identity => Ok(x),
            Block::Mlp(mlp) => mlp.forward(g, p, x),
            Block::Moe(moe) => {
                let out = moe.forward(g, p, x, rng)?;
                routing.push(BlockRouting {
                    block: name,
                    probs: out.probs,
                    gates: out.gates,
                    decisions: out.decisions,
                    routed: out.routed,
                });
                Ok(out.y)
            }
        }
    }

    /// `head(M_o([M_i^n(E(I_n)), M_i^o(E(I_o))]))`. Router noise is drawn
    /// only when `rng` is supplied.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bindings,
        i_n: Var,
        i_o: Var,
        mut rng: Option<&mut Rng>,
    ) -> Result<ClassifierForward> {
        if g.shape(i_n) != g.shape(i_o) {
            return Err(Error::Dimension { op: "classify", lhs: g.shape(i_n), rhs: g.shape(i_o) });
        }
        let mut routing = Vec::new();
        let f_n = self.extractor.forward(g, p, i_n)?;
        let f_o = self.extractor.forward(g, p, i_o)?;
        let f_n =
            Self::apply_block(g, p, &self.input_normalized, BLOCK_NAMES[0], f_n, rng.as_deref_mut(), &mut routing)?;
        let f_o = Self::apply_block(g, p, &self.input_original, BLOCK_NAMES[1], f_o, rng.as_deref_mut(), &mut routing)?;
        let fused = g.concat_cols(&[f_n, f_o])?;
        let fused = Self::apply_block(g, p, &self.output, BLOCK_NAMES[2], fused, rng, &mut routing)?;
        let logits = self.head.forward(g, p, fused)?;
        Ok(ClassifierForward { logits, routing })
    }

    /// Expert parameter ids of every MoE block, as `(block, expert, ids)`.
    pub fn expert_params(&self) -> Vec<(&'static str, usize, [ParamId; 4])> {
        let mut out = Vec::new();
        for (block, name) in self.blocks().iter().zip(BLOCK_NAMES) {
            if let Block::Moe(m) = block {
                for j in 0..m.config.num_experts {
                    out.push((name, j, m.expert_param_ids(j)));
                }
            }
        }
        out
    }
}
