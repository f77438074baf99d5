//! Sparse mixture-of-experts block with a noisy Top-k router.
//!
//! Routing computes `softmax(x·W_g + ε ⊙ softplus(x·W_noise))` with
//! `ε ~ N(0, 1)` when noise is active, keeps the `k` largest probabilities
//! as gates (without renormalizing) and zeroes the rest. Only selected
//! experts are evaluated; their outputs are summed weighted by the gates.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffcore::graph::softplus_scalar;
use crate::diffcore::{entropy_of, Bindings, Graph, Mlp, ParamId, Params, Rng, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MoeConfig {
    pub num_experts: usize,
    pub top_k: usize,
    pub expert_hidden: usize,
    pub noise_enabled: bool,
}

impl Default for MoeConfig {
    fn default() -> Self {
        MoeConfig { num_experts: 4, top_k: 2, expert_hidden: 32, noise_enabled: true }
    }
}

impl MoeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.top_k == 0 || self.top_k > self.num_experts {
            return Err(Error::Config(format!(
                "top_k must satisfy 1 <= k <= m (k={}, m={})",
                self.top_k, self.num_experts
            )));
        }
        Ok(())
    }
}

/// Gating matrix `W_g` and noise-scale matrix `W_noise`, both `d×m`.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct RouterParams {
    pub w_gate: ParamId,
    pub w_noise: ParamId,
}

/// Routing outcome for one sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateDecision {
    /// Full softmax distribution over experts.
    pub probs: Vec<f64>,
    /// Chosen experts, highest probability first.
    pub selected: Vec<usize>,
    /// `probs` on the selected experts, zero elsewhere.
    pub gates: Vec<f64>,
}

/// Indices of the `k` largest entries; ties go to the lowest index.
pub fn top_k_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    order.truncate(k);
    order
}

impl GateDecision {
    pub fn from_probs(probs: Vec<f64>, k: usize) -> Self {
        let selected = top_k_indices(&probs, k);
        let mut gates = vec![0.0; probs.len()];
        for &j in &selected {
            gates[j] = probs[j];
        }
        GateDecision { probs, selected, gates }
    }
}

fn softmax_vec(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|v| v / total).collect()
}

/// Router logits for a single sample. `noise` supplies one `N(0,1)` draw per
/// expert; `None` disables the noise term.
pub fn router_logits(x: &[f64], w_gate: &Tensor, w_noise: &Tensor, noise: Option<&[f64]>) -> Result<Vec<f64>> {
    if w_gate.rows() != x.len() || w_noise.shape() != w_gate.shape() {
        return Err(Error::Dimension { op: "route", lhs: (1, x.len()), rhs: w_gate.shape() });
    }
    let m = w_gate.cols();
    let mut clean = vec![0.0; m];
    let mut raw_noise = vec![0.0; m];
    for (i, &xi) in x.iter().enumerate() {
        for j in 0..m {
            clean[j] += xi * w_gate.get(i, j);
            raw_noise[j] += xi * w_noise.get(i, j);
        }
    }
    if let Some(eps) = noise {
        for j in 0..m {
            clean[j] += eps[j] * softplus_scalar(raw_noise[j]);
        }
    }
    Ok(clean)
}

/// Routes one sample.
pub fn route(
    x: &[f64],
    params: &Params,
    router: &RouterParams,
    config: &MoeConfig,
    rng: Option<&mut Rng>,
) -> Result<GateDecision> {
    config.validate()?;
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericDomain("route: non-finite input".into()));
    }
    let w_gate = params.get(router.w_gate);
    if w_gate.cols() != config.num_experts {
        return Err(Error::Config(format!("router has {} columns for {} experts", w_gate.cols(), config.num_experts)));
    }
    let eps = match rng {
        Some(rng) if config.noise_enabled => Some(rng.normal_vec(config.num_experts, 1.0)),
        _ => None,
    };
    let logits = router_logits(x, w_gate, params.get(router.w_noise), eps.as_deref())?;
    Ok(GateDecision::from_probs(softmax_vec(&logits), config.top_k))
}

/// Graph-side result of routing and combining a batch.
pub struct MoeOutput {
    pub y: Var,
    /// `B×m` softmax probabilities.
    pub probs: Var,
    /// `B×m` truncated gates (probabilities masked to the Top-k).
    pub gates: Var,
    pub decisions: Vec<GateDecision>,
    /// Batch rows dispatched to each expert.
    pub routed: Vec<Vec<usize>>,
}

/// Sums `gate · expert(x)` over the rows routed to each expert. Experts with
/// no routed rows are never evaluated.
pub fn combine_experts<F>(
    g: &mut Graph,
    x: Var,
    gates: Var,
    routed: &[Vec<usize>],
    out_dim: usize,
    mut expert: F,
) -> Result<Var>
where
    F: FnMut(&mut Graph, usize, Var) -> Result<Var>,
{
    let batch = g.shape(x).0;
    let mut y: Option<Var> = None;
    for (j, rows) in routed.iter().enumerate() {
        if rows.is_empty() {
            continue;
        }
        let xj = if rows.len() == batch && rows.iter().enumerate().all(|(i, &r)| i == r) {
            x
        } else {
            g.gather_rows(x, rows)?
        };
        let out = expert(g, j, xj)?;
        let gate_col = g.slice(gates, 0, batch, j, j + 1)?;
        let gate_j = g.gather_rows(gate_col, rows)?;
        let weighted = g.mul_col(out, gate_j)?;
        let placed = g.scatter_rows(weighted, rows, batch)?;
        y = Some(match y {
            Some(acc) => g.add(acc, placed)?,
            None => placed,
        });
    }
    match y {
        Some(y) => Ok(y),
        None => Ok(g.constant(Tensor::zeros(batch, out_dim))),
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MoeBlock {
    pub config: MoeConfig,
    pub input_dim: usize,
    pub output_dim: usize,
    pub experts: Vec<Mlp>,
    pub router: RouterParams,
}

impl MoeBlock {
    pub fn new(
        params: &mut Params,
        name: &str,
        config: MoeConfig,
        input_dim: usize,
        output_dim: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        config.validate()?;
        let experts = (0..config.num_experts)
            .map(|j| Mlp::new(params, &format!("{name}.expert{j}"), [input_dim, config.expert_hidden, output_dim], rng))
            .collect();
        let m = config.num_experts;
        let small = |rng: &mut Rng| {
            Tensor::from_vec(input_dim, m, rng.normal_vec(input_dim * m, 0.1 / (input_dim as f64).sqrt()))
                .expect("router shape")
        };
        let w_gate = params.add(format!("{name}.router.w_gate"), small(rng));
        let w_noise = params.add(format!("{name}.router.w_noise"), small(rng));
        Ok(MoeBlock { config, input_dim, output_dim, experts, router: RouterParams { w_gate, w_noise } })
    }

    pub fn num_params(&self) -> usize {
        self.experts.iter().map(Mlp::num_params).sum::<usize>() + 2 * self.input_dim * self.config.num_experts
    }

    /// Every parameter id owned by expert `j`.
    pub fn expert_param_ids(&self, j: usize) -> [ParamId; 4] {
        let e = &self.experts[j];
        [e.fc1.w, e.fc1.b, e.fc2.w, e.fc2.b]
    }

    /// Routes and combines a `B×d` batch. Noise is drawn from `rng` only when
    /// the block has noise enabled and an rng is supplied.
    pub fn forward(&self, g: &mut Graph, p: &Bindings, x: Var, rng: Option<&mut Rng>) -> Result<MoeOutput> {
        let (batch, d) = g.shape(x);
        if d != self.input_dim {
            return Err(Error::Dimension { op: "moe", lhs: (batch, d), rhs: (batch, self.input_dim) });
        }
        let m = self.config.num_experts;
        let mut logits = g.matmul(x, p[self.router.w_gate])?;
        if let (true, Some(rng)) = (self.config.noise_enabled, rng) {
            let eps = Tensor::from_vec(batch, m, rng.normal_vec(batch * m, 1.0))?;
            let raw = g.matmul(x, p[self.router.w_noise])?;
            let scale = g.softplus(raw);
            let eps = g.constant(eps);
            let noise = g.mul(eps, scale)?;
            logits = g.add(logits, noise)?;
        }
        let probs = g.softmax(logits)?;

        let pt = g.value(probs).clone();
        let mut mask = Tensor::zeros(batch, m);
        let mut routed = vec![Vec::new(); m];
        let mut decisions = Vec::with_capacity(batch);
        for b in 0..batch {
            let decision = GateDecision::from_probs(pt.row(b).to_vec(), self.config.top_k);
            for &j in &decision.selected {
                mask.set(b, j, 1.0);
                routed[j].push(b);
            }
            decisions.push(decision);
        }
        let mask = g.constant(mask);
        let gates = g.mul(probs, mask)?;
        let y = combine_experts(g, x, gates, &routed, self.output_dim, |g, j, xj| self.experts[j].forward(g, p, xj))?;
        Ok(MoeOutput { y, probs, gates, decisions, routed })
    }
}

/// `(std / mean)²` of the per-expert importances (population std).
pub fn importance_cv2(importance: &[f64]) -> Result<f64> {
    if importance.is_empty() {
        return Err(Error::EmptyInput("importance_loss"));
    }
    let n = importance.len() as f64;
    let mean = importance.iter().sum::<f64>() / n;
    if mean == 0.0 {
        return Err(Error::DegenerateInput("all expert importances are zero".into()));
    }
    let var = importance.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Ok(var / (mean * mean))
}

/// Importance of each expert is the sum of its gates over the batch.
pub fn importance_loss(decisions: &[GateDecision]) -> Result<f64> {
    let first = decisions.first().ok_or(Error::EmptyInput("importance_loss"))?;
    let mut importance = vec![0.0; first.gates.len()];
    for d in decisions {
        for (acc, g) in importance.iter_mut().zip(&d.gates) {
            *acc += g;
        }
    }
    importance_cv2(&importance)
}

/// `(L_global, L_local)`: negative entropy of the batch-mean distribution and
/// mean per-sample entropy, both over the untruncated probabilities.
pub fn global_local_losses(decisions: &[GateDecision]) -> Result<(f64, f64)> {
    let first = decisions.first().ok_or(Error::EmptyInput("global_local_losses"))?;
    let b = decisions.len() as f64;
    let mut mean = vec![0.0; first.probs.len()];
    let mut local = 0.0;
    for d in decisions {
        for (acc, p) in mean.iter_mut().zip(&d.probs) {
            *acc += p / b;
        }
        local += entropy_of(&d.probs)?;
    }
    Ok((-entropy_of(&mean)?, local / b))
}

/// Differentiable importance loss over a `B×m` gate matrix.
pub fn importance_loss_graph(g: &mut Graph, gates: Var) -> Result<Var> {
    let importance = g.col_sum(gates);
    if g.value(importance).sum() == 0.0 {
        return Err(Error::DegenerateInput("all expert importances are zero".into()));
    }
    let std = g.std(importance)?;
    let mean = g.mean(importance)?;
    let cv = g.div(std, mean)?;
    g.mul(cv, cv)
}

/// Differentiable `(L_global, L_local)` over a `B×m` probability matrix.
pub fn global_local_graph(g: &mut Graph, probs: Var) -> Result<(Var, Var)> {
    let mean = g.col_mean(probs)?;
    let h_mean = g.entropy(mean)?;
    let global = g.scale(h_mean, -1.0);
    let h_rows = g.row_entropy(probs)?;
    let local = g.mean(h_rows)?;
    Ok((global, local))
}

/// Per-(label, expert) selection counts for one MoE block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouterTelemetry {
    pub labels: Vec<String>,
    pub num_experts: usize,
    pub counts: Vec<Vec<u64>>,
    pub totals: Vec<u64>,
}

impl RouterTelemetry {
    pub fn new(labels: Vec<String>, num_experts: usize) -> Self {
        let n = labels.len();
        RouterTelemetry { labels, num_experts, counts: vec![vec![0; num_experts]; n], totals: vec![0; n] }
    }

    /// Counts the decision once for every active label of the sample.
    pub fn record(&mut self, decision: &GateDecision, active_labels: &[usize]) {
        for &l in active_labels {
            self.totals[l] += 1;
            for &j in &decision.selected {
                self.counts[l][j] += 1;
            }
        }
    }

    /// Fraction of a label's samples that selected each expert.
    pub fn frequencies(&self) -> Vec<Vec<f64>> {
        self.counts
            .iter()
            .zip(&self.totals)
            .map(|(row, &t)| row.iter().map(|&c| if t == 0 { 0.0 } else { c as f64 / t as f64 }).collect())
            .collect()
    }

    pub fn write_csv(&self, path: &Path, format_version: u32, tag: &str) -> Result<()> {
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        writeln!(file, "# format_version={format_version} {tag}").map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(file);
        let mut header = vec!["label".to_string(), "samples".to_string()];
        header.extend((0..self.num_experts).map(|j| format!("expert_{j}")));
        w.write_record(&header)?;
        for ((label, freq), total) in self.labels.iter().zip(self.frequencies()).zip(&self.totals) {
            let mut rec = vec![label.clone(), total.to_string()];
            rec.extend(freq.iter().map(|f| format!("{f:.6}")));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}
