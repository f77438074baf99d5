//! Finite-difference verification of every differentiable primitive and of
//! the composite objectives, on tiny randomly initialized models.

use serde::{Deserialize, Serialize};

use crate::attention::{emm_forward, AttentionConfig, EmmParams};
use crate::classifier::{cla_loss, BlockKind, ClassifierConfig, ClassifierModel, TaskKind, TaskSpec};
use crate::diffcore::{check_gradients, check_params, GradCheckReport, Graph, Params, Rng, Tensor, Var};
use crate::error::Result;
use crate::moe::{global_local_graph, importance_loss_graph, MoeBlock, MoeConfig};
use crate::normalizer::{
    discriminator_loss, norm_loss, EmbedderSuite, NormLossWeights, NormalizerConfig, NormalizerModel,
};
use crate::synthdata::{FactorConfig, FactorSpace};

pub const SUITE_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteCase {
    pub name: String,
    pub seed: u64,
    pub max_rel_err: f64,
    pub passed: bool,
}

impl SuiteCase {
    fn from_report(name: &str, seed: u64, r: &GradCheckReport) -> Self {
        SuiteCase { name: name.into(), seed, max_rel_err: r.max_rel_err, passed: r.passed }
    }
}

fn random(rng: &mut Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::from_vec(rows, cols, rng.normal_vec(rows * cols, 1.0)).expect("shape")
}

/// Contracts `y` with fixed random weights so every output entry
/// contributes a distinct gradient.
fn project(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let (r, c) = g.shape(y);
    let w = random(&mut Rng::new(seed ^ 0x5eed), r, c);
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

type Primitive = fn(&mut Graph, &[Var]) -> Result<Var>;

/// `(name, operand shapes, builder)` for every primitive.
type PrimitiveCase = (&'static str, Vec<(usize, usize)>, Primitive);

fn primitives() -> Vec<PrimitiveCase> {
    vec![
        ("matmul", vec![(3, 4), (4, 2)], |g, v| g.matmul(v[0], v[1])),
        ("transpose", vec![(3, 4)], |g, v| Ok(g.transpose(v[0]))),
        ("add", vec![(3, 4), (3, 4)], |g, v| g.add(v[0], v[1])),
        ("sub", vec![(3, 4), (3, 4)], |g, v| g.sub(v[0], v[1])),
        ("mul", vec![(3, 4), (3, 4)], |g, v| g.mul(v[0], v[1])),
        ("div", vec![(3, 4), (3, 4)], |g, v| {
            let d = g.softplus(v[1]);
            let d = g.add_scalar(d, 0.5);
            g.div(v[0], d)
        }),
        ("add_row", vec![(3, 4), (1, 4)], |g, v| g.add_row(v[0], v[1])),
        ("mul_row", vec![(3, 4), (1, 4)], |g, v| g.mul_row(v[0], v[1])),
        ("mul_col", vec![(3, 4), (3, 1)], |g, v| g.mul_col(v[0], v[1])),
        ("scale", vec![(3, 4)], |g, v| Ok(g.scale(v[0], -1.7))),
        ("add_scalar", vec![(3, 4)], |g, v| Ok(g.add_scalar(v[0], 0.3))),
        ("relu", vec![(3, 4)], |g, v| Ok(g.relu(v[0]))),
        ("gelu", vec![(3, 4)], |g, v| Ok(g.gelu(v[0]))),
        ("softplus", vec![(3, 4)], |g, v| Ok(g.softplus(v[0]))),
        ("sum", vec![(3, 4)], |g, v| Ok(g.sum(v[0]))),
        ("mean", vec![(3, 4)], |g, v| g.mean(v[0])),
        ("std", vec![(3, 4)], |g, v| g.std(v[0])),
        ("col_sum", vec![(3, 4)], |g, v| Ok(g.col_sum(v[0]))),
        ("col_mean", vec![(3, 4)], |g, v| g.col_mean(v[0])),
        ("row_sum", vec![(3, 4)], |g, v| Ok(g.row_sum(v[0]))),
        ("softmax", vec![(3, 4)], |g, v| g.softmax(v[0])),
        ("log_softmax", vec![(3, 4)], |g, v| g.log_softmax(v[0])),
        ("layer_norm", vec![(3, 4), (1, 4), (1, 4)], |g, v| g.layer_norm(v[0], v[1], v[2])),
        ("row_norm", vec![(3, 4)], |g, v| Ok(g.row_norm(v[0]))),
        ("row_cosine", vec![(3, 4), (3, 4)], |g, v| g.row_cosine(v[0], v[1])),
        ("row_entropy", vec![(3, 4)], |g, v| {
            let p = g.softmax(v[0])?;
            g.row_entropy(p)
        }),
        ("entropy", vec![(1, 5)], |g, v| {
            let p = g.softmax(v[0])?;
            g.entropy(p)
        }),
        ("concat_cols", vec![(3, 4), (3, 2)], |g, v| g.concat_cols(&[v[0], v[1]])),
        ("concat_rows", vec![(3, 4), (2, 4)], |g, v| g.concat_rows(&[v[0], v[1]])),
        ("slice", vec![(3, 4)], |g, v| g.slice(v[0], 1, 3, 1, 4)),
        ("reshape", vec![(3, 4)], |g, v| g.reshape(v[0], 2, 6)),
        ("gather_rows", vec![(3, 4)], |g, v| g.gather_rows(v[0], &[2, 0, 2])),
        ("scatter_rows", vec![(2, 4)], |g, v| g.scatter_rows(v[0], &[3, 1], 5)),
        ("block_attention", vec![(6, 4), (6, 4), (6, 4)], |g, v| {
            g.block_attention(v[0], v[1], v[2], 3, 2).map(|(y, _)| y)
        }),
    ]
}

pub fn primitive_names() -> Vec<&'static str> {
    primitives().into_iter().map(|(n, _, _)| n).collect()
}

fn check_primitives(seed: u64) -> Result<Vec<SuiteCase>> {
    let mut out = Vec::new();
    for (i, (name, shapes, build)) in primitives().into_iter().enumerate() {
        let mut rng = Rng::new(seed).split(i as u64);
        let inputs: Vec<Tensor> = shapes.iter().map(|&(r, c)| random(&mut rng, r, c)).collect();
        let proj_seed = seed.wrapping_mul(131).wrapping_add(i as u64);
        let report = check_gradients(
            |g, v| {
                let y = build(g, v)?;
                project(g, y, proj_seed)
            },
            &inputs,
            SUITE_TOLERANCE,
        )?;
        out.push(SuiteCase::from_report(name, seed, &report));
    }
    Ok(out)
}

fn check_emm(seed: u64) -> Result<SuiteCase> {
    let mut rng = Rng::new(seed).split(100);
    let cfg = AttentionConfig::new(8, 2)?;
    let mut params = Params::new();
    let emm = EmmParams::new(&mut params, "emm", &cfg, &mut rng);
    let n_patches = 4;
    let e_t = random(&mut rng, 2 * n_patches, 8);
    let e_o = random(&mut rng, 2 * n_patches, 8);
    let report = check_params(
        |g, p| {
            let t = g.constant(e_t.clone());
            let o = g.constant(e_o.clone());
            let y = emm_forward(g, p, &emm, &cfg, t, o, n_patches)?;
            project(g, y, seed)
        },
        &params,
        SUITE_TOLERANCE,
    )?;
    Ok(SuiteCase::from_report("emm", seed, &report))
}

/// Smallest gap between the k-th and (k+1)-th routing probability over a
/// batch. Finite differences are only meaningful when no perturbation can
/// flip the Top-k selection.
fn topk_margin(probs: &Tensor, k: usize) -> f64 {
    let mut margin = f64::INFINITY;
    for r in 0..probs.rows() {
        let mut row = probs.row(r).to_vec();
        row.sort_by(|a, b| b.total_cmp(a));
        if k < row.len() {
            margin = margin.min(row[k - 1] - row[k]);
        }
    }
    margin
}

const MIN_MARGIN: f64 = 1e-4;

fn check_moe(seed: u64) -> Result<SuiteCase> {
    let cfg = MoeConfig { num_experts: 4, top_k: 2, expert_hidden: 5, noise_enabled: false };
    let mut rng = Rng::new(seed).split(200);
    let mut params = Params::new();
    let block = MoeBlock::new(&mut params, "moe", cfg, 6, 3, &mut rng)?;
    // Larger router weights make routing decisive.
    for id in [block.router.w_gate, block.router.w_noise] {
        let t = params.get_mut(id);
        *t = t.map(|v| v * 20.0);
    }
    let mut x = random(&mut rng, 5, 6);
    for _ in 0..100 {
        let mut g = Graph::new();
        let p = params.bind_frozen(&mut g);
        let xv = g.constant(x.clone());
        let out = block.forward(&mut g, &p, xv, None)?;
        if topk_margin(g.value(out.probs), cfg.top_k) > MIN_MARGIN {
            break;
        }
        x = random(&mut rng, 5, 6);
    }
    let report = check_params(
        |g, p| {
            let xv = g.constant(x.clone());
            let out = block.forward(g, p, xv, None)?;
            let y = project(g, out.y, seed)?;
            let imp = importance_loss_graph(g, out.gates)?;
            let (glob, local) = global_local_graph(g, out.probs)?;
            let reg = g.add(glob, local)?;
            let total = g.add(y, imp)?;
            g.add(total, reg)
        },
        &params,
        SUITE_TOLERANCE,
    )?;
    Ok(SuiteCase::from_report("moe_noise_off", seed, &report))
}

fn tiny_classifier(kind: TaskKind, rng: &mut Rng) -> Result<ClassifierModel> {
    let moe = MoeConfig { num_experts: 4, top_k: 2, expert_hidden: 3, noise_enabled: false };
    let task = TaskSpec { kind, n_labels: 3, intensity_scale_max: 5.0 };
    let config = ClassifierConfig {
        task,
        sample_dim: 5,
        extractor_hidden: 4,
        feature_dim: 3,
        moe,
        input_block: BlockKind::Moe(moe),
        output_block: BlockKind::Moe(moe),
    };
    let mut model = ClassifierModel::new(config, rng)?;
    let routers: Vec<_> = model
        .blocks()
        .iter()
        .filter_map(|b| match b {
            crate::classifier::Block::Moe(m) => Some(m.router),
            _ => None,
        })
        .collect();
    for r in routers {
        for id in [r.w_gate, r.w_noise] {
            let t = model.params.get_mut(id);
            *t = t.map(|v| v * 30.0);
        }
    }
    Ok(model)
}

fn tiny_targets(kind: TaskKind, rng: &mut Rng, rows: usize) -> Tensor {
    let mut t = Tensor::zeros(rows, 3);
    for r in 0..rows {
        match kind {
            TaskKind::AuDetect => {
                for c in 0..3 {
                    t.set(r, c, rng.bernoulli(0.5) as u8 as f64);
                }
            }
            TaskKind::AuIntensity => {
                for c in 0..3 {
                    t.set(r, c, rng.below(6) as f64);
                }
            }
            TaskKind::Fer => t.set(r, rng.below(3), 1.0),
        }
    }
    t
}

fn check_classifier(seed: u64, kind: TaskKind) -> Result<SuiteCase> {
    let mut rng = Rng::new(seed).split(300 + kind as u64);
    let model = tiny_classifier(kind, &mut rng)?;
    let targets = tiny_targets(kind, &mut rng, 4);
    let (mut i_n, mut i_o) = (random(&mut rng, 4, 5), random(&mut rng, 4, 5));
    for _ in 0..200 {
        let mut g = Graph::new();
        let p = model.params.bind_frozen(&mut g);
        let a = g.constant(i_n.clone());
        let b = g.constant(i_o.clone());
        let out = model.forward(&mut g, &p, a, b, None)?;
        let margin = out.routing.iter().map(|r| topk_margin(g.value(r.probs), 2)).fold(f64::INFINITY, f64::min);
        if margin > MIN_MARGIN {
            break;
        }
        i_n = random(&mut rng, 4, 5);
        i_o = random(&mut rng, 4, 5);
    }
    let report = check_params(
        |g, p| {
            let a = g.constant(i_n.clone());
            let b = g.constant(i_o.clone());
            let t = g.constant(targets.clone());
            let out = model.forward(g, p, a, b, None)?;
            let (total, _) = cla_loss(g, &model.config.task, out.logits, t, &out.routing, &Default::default())?;
            Ok(total)
        },
        &model.params,
        SUITE_TOLERANCE,
    )?;
    Ok(SuiteCase::from_report(&format!("classifier_{}", kind.name()), seed, &report))
}

fn tiny_normalizer(seed: u64) -> Result<(NormalizerModel, EmbedderSuite, FactorSpace)> {
    let factors = FactorConfig {
        n_identities: 4,
        dim_identity: 2,
        dim_expression: 2,
        dim_pose: 1,
        dim_background: 1,
        sample_dim: 6,
        world_seed: seed,
        ..Default::default()
    };
    let space = FactorSpace::new(factors)?;
    let mut rng = Rng::new(seed).split(400);
    let config = NormalizerConfig {
        sample_dim: 6,
        n_patches: 2,
        patch_dim: 4,
        num_heads: 2,
        encoder_hidden: 5,
        decoder_hidden: 5,
        token_bias_init: 1.0,
    };
    let model = NormalizerModel::new(config, &mut rng)?;
    let suite = EmbedderSuite::from_space(&space, 4, &mut rng);
    Ok((model, suite, space))
}

fn check_normalizer(seed: u64) -> Result<[SuiteCase; 2]> {
    let (model, suite, _) = tiny_normalizer(seed)?;
    let mut rng = Rng::new(seed).split(401);
    let i_o = random(&mut rng, 3, 6);
    let mut i_t = random(&mut rng, 3, 6);
    i_t.row_mut(0).copy_from_slice(i_o.row(0));
    let mask = [true, false, false];
    let weights = NormLossWeights::default();
    let gen = check_params(
        |g, p| {
            let d = suite.discriminator.params.bind_frozen(g);
            let o = g.constant(i_o.clone());
            let t = g.constant(i_t.clone());
            let n = model.forward(g, p, o, t)?;
            let (total, _) = norm_loss(g, o, t, n, &mask, &suite, &d, &weights)?;
            Ok(total)
        },
        &model.params,
        SUITE_TOLERANCE,
    )?;
    let fake = model.normalize(&i_o, &i_t)?;
    let disc = check_params(
        |g, d| {
            let o = g.constant(i_o.clone());
            let t = g.constant(i_t.clone());
            let n = g.constant(fake.clone());
            let real = g.concat_cols(&[t, o])?;
            let fake = g.concat_cols(&[t, n])?;
            let real = suite.discriminator.score(g, d, real)?;
            let fake = suite.discriminator.score(g, d, fake)?;
            discriminator_loss(g, real, fake)
        },
        &suite.discriminator.params,
        SUITE_TOLERANCE,
    )?;
    Ok([
        SuiteCase::from_report("normalizer_loss", seed, &gen),
        SuiteCase::from_report("discriminator_loss", seed, &disc),
    ])
}

/// Every primitive plus the composites (EMM, MoE without noise, the three
/// classifier objectives, the generator and discriminator objectives) for
/// one seed.
pub fn run_suite(seed: u64) -> Result<Vec<SuiteCase>> {
    let mut cases = check_primitives(seed)?;
    cases.push(check_emm(seed)?);
    cases.push(check_moe(seed)?);
    for kind in [TaskKind::AuDetect, TaskKind::AuIntensity, TaskKind::Fer] {
        cases.push(check_classifier(seed, kind)?);
    }
    cases.extend(check_normalizer(seed)?);
    Ok(cases)
}
