use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::moe::{global_local_graph, importance_loss_graph};

use super::{BlockRouting, TaskKind, TaskSpec};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClaLossWeights {
    pub importance: f64,
    pub global_local: f64,
}

impl Default for ClaLossWeights {
    fn default() -> Self {
        ClaLossWeights { importance: 0.001, global_local: 0.001 }
    }
}

/// Task term, routing regularizers summed over MoE blocks, and the total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClaLossBreakdown {
    pub task: f64,
    pub importance: f64,
    pub global: f64,
    pub local: f64,
    pub total: f64,
}

impl ClaLossBreakdown {
    pub fn weighted_sum(&self, w: &ClaLossWeights) -> f64 {
        self.task + w.importance * self.importance + w.global_local * (self.global + self.local)
    }

    pub fn terms(&self) -> [(&'static str, f64); 5] {
        [
            ("task", self.task),
            ("importance", self.importance),
            ("global", self.global),
            ("local", self.local),
            ("total", self.total),
        ]
    }
}

/// Task loss on `B × n_labels` logits: mean binary cross-entropy with logits
/// for detection, mean squared error for intensity, mean softmax
/// cross-entropy (one-hot targets) for expression classes.
pub fn task_loss(g: &mut Graph, kind: TaskKind, logits: Var, targets: Var) -> Result<Var> {
    if g.shape(logits) != g.shape(targets) {
        return Err(Error::Dimension { op: "task_loss", lhs: g.shape(logits), rhs: g.shape(targets) });
    }
    match kind {
        TaskKind::AuDetect => {
            // softplus(z) − y·z
            let sp = g.softplus(logits);
            let yz = g.mul(targets, logits)?;
            let l = g.sub(sp, yz)?;
            g.mean(l)
        }
        TaskKind::AuIntensity => {
            let d = g.sub(logits, targets)?;
            let sq = g.mul(d, d)?;
            g.mean(sq)
        }
        TaskKind::Fer => {
            let batch = g.shape(logits).0 as f64;
            let ls = g.log_softmax(logits)?;
            let picked = g.mul(targets, ls)?;
            let s = g.sum(picked);
            Ok(g.scale(s, -1.0 / batch))
        }
    }
}

/// Rejects targets outside the task's label domain.
pub fn validate_targets(task: &TaskSpec, targets: &Tensor) -> Result<()> {
    if targets.cols() != task.n_labels {
        return Err(Error::Dimension { op: "targets", lhs: targets.shape(), rhs: (targets.rows(), task.n_labels) });
    }
    let bad = |msg: &str| Err(Error::Config(format!("target out of range: {msg}")));
    match task.kind {
        TaskKind::AuDetect => {
            if targets.data().iter().any(|&v| v != 0.0 && v != 1.0) {
                return bad("detection targets must be 0 or 1");
            }
        }
        TaskKind::AuIntensity => {
            if targets.data().iter().any(|&v| !(0.0..=task.intensity_scale_max).contains(&v)) {
                return bad("intensity outside the scale");
            }
        }
        TaskKind::Fer => {
            for r in 0..targets.rows() {
                let row = targets.row(r);
                let ones = row.iter().filter(|&&v| v == 1.0).count();
                let zeros = row.iter().filter(|&&v| v == 0.0).count();
                if ones != 1 || ones + zeros != row.len() {
                    return bad("class targets must be one-hot");
                }
            }
        }
    }
    Ok(())
}

/// Classifier objective `task + λ_imp·ΣL_imp + λ_gl·Σ(L_global + L_local)`,
/// with the sums running over the MoE blocks in `routing`.
pub fn cla_loss(
    g: &mut Graph,
    task: &TaskSpec,
    logits: Var,
    targets: Var,
    routing: &[BlockRouting],
    weights: &ClaLossWeights,
) -> Result<(Var, ClaLossBreakdown)> {
    validate_targets(task, g.value(targets))?;
    let term = task_loss(g, task.kind, logits, targets)?;
    let mut total = term;
    let mut breakdown = ClaLossBreakdown { task: g.scalar(term), ..Default::default() };
    for r in routing {
        let imp = importance_loss_graph(g, r.gates)?;
        let (global, local) = global_local_graph(g, r.probs)?;
        breakdown.importance += g.scalar(imp);
        breakdown.global += g.scalar(global);
        breakdown.local += g.scalar(local);
        let imp = g.scale(imp, weights.importance);
        let gl = g.add(global, local)?;
        let gl = g.scale(gl, weights.global_local);
        total = g.add(total, imp)?;
        total = g.add(total, gl)?;
    }
    breakdown.total = g.scalar(total);
    Ok((total, breakdown))
}
