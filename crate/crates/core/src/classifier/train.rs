use serde::{Deserialize, Serialize};

use crate::diffcore::{Adam, AdamConfig, Graph, Rng, Tensor};
use crate::error::{Error, Result};
use crate::harness::metrics::evaluate_outputs;
use crate::moe::GateDecision;
use crate::normalizer::LossCurves;
use crate::synthdata::Label;

use super::{cla_loss, ClaLossBreakdown, ClaLossWeights, ClassifierModel, TaskKind};

/// `(I_n, I_o, target)` triples stacked as rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierInputs {
    pub i_n: Tensor,
    pub i_o: Tensor,
    pub targets: Tensor,
    pub labels: Vec<Label>,
}

impl ClassifierInputs {
    pub fn new(i_n: Tensor, i_o: Tensor, targets: Tensor, labels: Vec<Label>) -> Result<Self> {
        if i_n.shape() != i_o.shape() {
            return Err(Error::Dimension { op: "classifier inputs", lhs: i_n.shape(), rhs: i_o.shape() });
        }
        if targets.rows() != i_n.rows() {
            return Err(Error::LengthMismatch(targets.rows(), i_n.rows()));
        }
        if labels.len() != i_n.rows() {
            return Err(Error::LengthMismatch(labels.len(), i_n.rows()));
        }
        Ok(ClassifierInputs { i_n, i_o, targets, labels })
    }

    pub fn len(&self) -> usize {
        self.i_n.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn gather(t: &Tensor, rows: &[usize]) -> Tensor {
        let mut out = Tensor::zeros(rows.len(), t.cols());
        for (i, &r) in rows.iter().enumerate() {
            out.row_mut(i).copy_from_slice(t.row(r));
        }
        out
    }

    pub fn subset(&self, rows: &[usize]) -> ClassifierInputs {
        ClassifierInputs {
            i_n: Self::gather(&self.i_n, rows),
            i_o: Self::gather(&self.i_o, rows),
            targets: Self::gather(&self.targets, rows),
            labels: rows.iter().map(|&r| self.labels[r].clone()).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    pub weights: ClaLossWeights,
    /// Keep the feature extractor fixed at its initialization.
    pub freeze_extractor: bool,
}

impl ClassifierTrainConfig {
    /// Base learning rates 1e-4 (detection), 1e-3 (intensity), 2e-5
    /// (expression classes).
    pub fn for_task(kind: TaskKind) -> Self {
        let lr = match kind {
            TaskKind::AuDetect => 1e-4,
            TaskKind::AuIntensity => 1e-3,
            TaskKind::Fer => 2e-5,
        };
        ClassifierTrainConfig {
            epochs: 40,
            batch_size: 32,
            optimizer: AdamConfig { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 },
            weights: ClaLossWeights::default(),
            freeze_extractor: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetric {
    pub epoch: usize,
    pub train_loss: f64,
    pub metric: String,
    /// Held-out score after the epoch, NaN when no evaluation set is given.
    pub value: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClassifierTrainReport {
    pub curves: LossCurves,
    pub epochs: Vec<EpochMetric>,
    pub steps: usize,
    /// `(step, block, expert)` triples checked for exactly-zero gradient
    /// while unselected by every sample in the batch.
    pub idle_expert_checks: u64,
    pub idle_expert_violations: u64,
}

#[derive(Clone, Debug)]
pub struct Predictions {
    pub outputs: Tensor,
    /// Gate decisions per MoE block, in forward order.
    pub routing: Vec<(&'static str, Vec<GateDecision>)>,
}

/// Noise-free forward pass over `inputs` in chunks.
pub fn predict(model: &ClassifierModel, inputs: &ClassifierInputs, chunk: usize) -> Result<Predictions> {
    let mut data = Vec::with_capacity(inputs.len() * model.config.task.n_labels);
    let mut routing: Vec<(&'static str, Vec<GateDecision>)> = Vec::new();
    let mut r = 0;
    while r < inputs.len() {
        let r1 = (r + chunk.max(1)).min(inputs.len());
        let mut g = Graph::new();
        let p = model.params.bind_frozen(&mut g);
        let cols = inputs.i_n.cols();
        let i_n = g.constant(inputs.i_n.slice(r, r1, 0, cols));
        let i_o = g.constant(inputs.i_o.slice(r, r1, 0, cols));
        let out = model.forward(&mut g, &p, i_n, i_o, None)?;
        data.extend_from_slice(g.value(out.logits).data());
        for (i, br) in out.routing.into_iter().enumerate() {
            if routing.len() <= i {
                routing.push((br.block, Vec::new()));
            }
            routing[i].1.extend(br.decisions);
        }
        r = r1;
    }
    Ok(Predictions { outputs: Tensor::from_vec(inputs.len(), model.config.task.n_labels, data)?, routing })
}

fn check_finite(step: usize, b: &ClaLossBreakdown) -> Result<()> {
    for (term, value) in b.terms() {
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss { step, term: term.into(), value });
        }
    }
    Ok(())
}

/// Minibatch Adam training with router noise on. After every epoch the
/// primary metric on `eval` (if given) is recorded. Every step also checks
/// that experts no sample selected received exactly zero gradient.
pub fn train_classifier(
    model: &mut ClassifierModel,
    train: &ClassifierInputs,
    eval: Option<&ClassifierInputs>,
    config: &ClassifierTrainConfig,
    rng: &mut Rng,
) -> Result<ClassifierTrainReport> {
    if train.is_empty() {
        return Err(Error::EmptyInput("train_classifier"));
    }
    if config.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let task = model.config.task.clone();
    let mut opt = Adam::new(config.optimizer, &model.params);
    let mut order_rng = rng.split(1);
    let mut noise_rng = rng.split(2);
    let extractor_ids = [model.extractor.fc1.w, model.extractor.fc1.b, model.extractor.fc2.w, model.extractor.fc2.b];
    let expert_ids = model.expert_params();

    let mut report = ClassifierTrainReport {
        curves: LossCurves::default(),
        epochs: Vec::with_capacity(config.epochs),
        steps: 0,
        idle_expert_checks: 0,
        idle_expert_violations: 0,
    };
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..config.epochs {
        order_rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for rows in order.chunks(config.batch_size) {
            let batch = train.subset(rows);
            let step = report.steps;
            let mut g = Graph::new();
            let p = model.params.bind(&mut g);
            let i_n = g.constant(batch.i_n);
            let i_o = g.constant(batch.i_o);
            let targets = g.constant(batch.targets);
            let out = model.forward(&mut g, &p, i_n, i_o, Some(&mut noise_rng))?;
            let (total, breakdown) = cla_loss(&mut g, &task, out.logits, targets, &out.routing, &config.weights)?;
            check_finite(step, &breakdown)?;
            g.backward(total)?;

            for r in &out.routing {
                for (j, routed) in r.routed.iter().enumerate() {
                    if !routed.is_empty() {
                        continue;
                    }
                    for (block, expert, ids) in &expert_ids {
                        if *block == r.block && *expert == j {
                            report.idle_expert_checks += 1;
                            let nonzero = ids.iter().any(|&id| g.grad(p[id]).data().iter().any(|&v| v != 0.0));
                            if nonzero {
                                report.idle_expert_violations += 1;
                            }
                        }
                    }
                }
            }

            let mut grads = model.params.grads(&g, &p);
            if config.freeze_extractor {
                for id in extractor_ids {
                    grads[id.index()] = Tensor::zeros(grads[id.index()].rows(), grads[id.index()].cols());
                }
            }
            opt.step(&mut model.params, &grads);
            for (term, value) in breakdown.terms() {
                report.curves.push(step, term, value);
            }
            loss_sum += breakdown.total;
            batches += 1;
            report.steps += 1;
        }
        let (metric, value) = match eval {
            Some(eval) => {
                let preds = predict(model, eval, 512)?;
                let m = evaluate_outputs(&task, &preds.outputs, &eval.targets)?;
                (m.primary_name, m.primary)
            }
            None => (String::new(), f64::NAN),
        };
        report.epochs.push(EpochMetric { epoch, train_loss: loss_sum / batches as f64, metric, value });
    }
    Ok(report)
}
