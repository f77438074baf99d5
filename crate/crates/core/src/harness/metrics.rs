//! Evaluation metrics: F1, ICC(3,1), MSE/MAE and accuracy.

use serde::{Deserialize, Serialize};

use crate::classifier::{TaskKind, TaskSpec};
use crate::diffcore::Tensor;
use crate::error::{Error, Result};

fn same_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::LengthMismatch(a, b));
    }
    Ok(())
}

/// `2·TP / (2·TP + FP + FN)`, which equals `2PR/(P+R)`; 0 when there are no
/// true positives.
pub fn f1_score(predictions: &[bool], targets: &[bool]) -> Result<f64> {
    same_len(predictions.len(), targets.len())?;
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for (&p, &t) in predictions.iter().zip(targets) {
        match (p, t) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            (false, false) => {}
        }
    }
    if tp == 0 {
        return Ok(0.0);
    }
    Ok(2.0 * tp as f64 / (2 * tp + fp + fneg) as f64)
}

/// Per-label F1 over the columns of two 0/1 matrices, plus their unweighted
/// mean.
pub fn macro_f1(predictions: &Tensor, targets: &Tensor) -> Result<(Vec<f64>, f64)> {
    if predictions.shape() != targets.shape() {
        return Err(Error::Dimension { op: "macro_f1", lhs: predictions.shape(), rhs: targets.shape() });
    }
    if predictions.cols() == 0 {
        return Err(Error::EmptyInput("macro_f1"));
    }
    let mut per_label = Vec::with_capacity(predictions.cols());
    for c in 0..predictions.cols() {
        let p: Vec<bool> = (0..predictions.rows()).map(|r| predictions.get(r, c) > 0.5).collect();
        let t: Vec<bool> = (0..targets.rows()).map(|r| targets.get(r, c) > 0.5).collect();
        per_label.push(f1_score(&p, &t)?);
    }
    let mean = per_label.iter().sum::<f64>() / per_label.len() as f64;
    Ok((per_label, mean))
}

/// ICC(3,1): two-way mixed effects, consistency, single rater, on the
/// `n × 2` table whose columns are predictions and targets.
pub fn icc(predictions: &[f64], targets: &[f64]) -> Result<f64> {
    same_len(predictions.len(), targets.len())?;
    let n = predictions.len();
    if n < 2 {
        return Err(Error::DegenerateInput(format!("icc needs at least 2 subjects, got {n}")));
    }
    let k = 2.0;
    let nf = n as f64;
    let grand = (predictions.iter().sum::<f64>() + targets.iter().sum::<f64>()) / (k * nf);
    let mut ss_rows = 0.0;
    let mut ss_total = 0.0;
    for (&p, &t) in predictions.iter().zip(targets) {
        let m = (p + t) / 2.0;
        ss_rows += k * (m - grand).powi(2);
        ss_total += (p - grand).powi(2) + (t - grand).powi(2);
    }
    let mp = predictions.iter().sum::<f64>() / nf;
    let mt = targets.iter().sum::<f64>() / nf;
    let ss_cols = nf * ((mp - grand).powi(2) + (mt - grand).powi(2));
    let ss_err = (ss_total - ss_rows - ss_cols).max(0.0);
    let ms_rows = ss_rows / (nf - 1.0);
    let ms_err = ss_err / ((nf - 1.0) * (k - 1.0));
    let denom = ms_rows + (k - 1.0) * ms_err;
    if denom.is_nan() || denom <= 0.0 {
        return Err(Error::DegenerateInput("icc: zero variance".into()));
    }
    Ok((ms_rows - ms_err) / denom)
}

pub fn mse_mae(predictions: &[f64], targets: &[f64]) -> Result<(f64, f64)> {
    same_len(predictions.len(), targets.len())?;
    if predictions.is_empty() {
        return Err(Error::EmptyInput("mse_mae"));
    }
    let n = predictions.len() as f64;
    let (mut se, mut ae) = (0.0, 0.0);
    for (&p, &t) in predictions.iter().zip(targets) {
        let d = p - t;
        se += d * d;
        ae += d.abs();
    }
    Ok((se / n, ae / n))
}

pub fn accuracy(predictions: &[usize], targets: &[usize]) -> Result<f64> {
    same_len(predictions.len(), targets.len())?;
    if predictions.is_empty() {
        return Err(Error::EmptyInput("accuracy"));
    }
    let hits = predictions.iter().zip(targets).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / predictions.len() as f64)
}

/// Row-wise argmax; ties go to the lowest index.
pub fn argmax_rows(scores: &Tensor) -> Vec<usize> {
    (0..scores.rows())
        .map(|r| {
            let row = scores.row(r);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelScore {
    pub label: String,
    pub metric: String,
    pub value: f64,
}

/// Scores of one evaluation. `primary` is macro-F1 (detection), mean ICC
/// (intensity) or accuracy (expression classes).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub per_label: Vec<LabelScore>,
    pub aggregate: Vec<(String, f64)>,
    pub primary_name: String,
    pub primary: f64,
}

fn column(t: &Tensor, c: usize) -> Vec<f64> {
    (0..t.rows()).map(|r| t.get(r, c)).collect()
}

/// Converts raw model outputs into task metrics. Detection thresholds the
/// sigmoid at 0.5 (logit 0); intensity clamps to the label scale.
pub fn evaluate_outputs(task: &TaskSpec, outputs: &Tensor, targets: &Tensor) -> Result<TaskMetrics> {
    if outputs.shape() != targets.shape() {
        return Err(Error::Dimension { op: "evaluate", lhs: outputs.shape(), rhs: targets.shape() });
    }
    let names = task.label_names();
    let mut per_label = Vec::new();
    let (aggregate, primary_name, primary) = match task.kind {
        TaskKind::AuDetect => {
            let preds = outputs.map(|z| if z > 0.0 { 1.0 } else { 0.0 });
            let (f1s, mean) = macro_f1(&preds, targets)?;
            for (name, f1) in names.iter().zip(f1s) {
                per_label.push(LabelScore { label: name.clone(), metric: "f1".into(), value: f1 });
            }
            (vec![("macro_f1".to_string(), mean)], "macro_f1", mean)
        }
        TaskKind::AuIntensity => {
            let max = task.intensity_scale_max;
            let clamped = outputs.map(|v| v.clamp(0.0, max));
            let (mut si, mut sm, mut sa) = (0.0, 0.0, 0.0);
            for (c, name) in names.iter().enumerate() {
                let p = column(&clamped, c);
                let t = column(targets, c);
                let i = icc(&p, &t)?;
                let (mse, mae) = mse_mae(&p, &t)?;
                si += i;
                sm += mse;
                sa += mae;
                for (metric, value) in [("icc", i), ("mse", mse), ("mae", mae)] {
                    per_label.push(LabelScore { label: name.clone(), metric: metric.into(), value });
                }
            }
            let n = names.len() as f64;
            let agg = vec![
                ("mean_icc".to_string(), si / n),
                ("mean_mse".to_string(), sm / n),
                ("mean_mae".to_string(), sa / n),
            ];
            (agg, "mean_icc", si / n)
        }
        TaskKind::Fer => {
            let acc = accuracy(&argmax_rows(outputs), &argmax_rows(targets))?;
            (vec![("accuracy".to_string(), acc)], "accuracy", acc)
        }
    };
    Ok(TaskMetrics { per_label, aggregate, primary_name: primary_name.into(), primary })
}
