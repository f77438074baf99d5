//! Identity-entangled synthetic samples with known generating factors.
//!
//! A sample is `mix([identity | expression | pose | background]) + noise`,
//! where `mix` is a fixed full-column-rank linear map (optionally followed by
//! a monotone pointwise nonlinearity). Because the map is known, every
//! observed vector can be read back into its factors, which makes claims
//! about "expression kept, identity replaced" directly measurable.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::classifier::{TaskKind, TaskSpec};
use crate::diffcore::{Rng, Tensor};
use crate::error::{Error, Result};

pub const DATASET_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactorConfig {
    pub n_identities: usize,
    pub dim_identity: usize,
    pub dim_expression: usize,
    pub dim_pose: usize,
    pub dim_background: usize,
    pub sample_dim: usize,
    pub observation_noise_std: f64,
    /// Standard deviation of identity vectors.
    pub identity_scale: f64,
    pub pose_scale: f64,
    pub background_scale: f64,
    /// Norm scale of label prototypes / action-unit directions.
    pub expression_scale: f64,
    /// Per-sample Gaussian jitter added to expression vectors.
    pub expression_jitter: f64,
    /// Apply `z + c·tanh(z)` after mixing.
    pub nonlinear: bool,
    /// Seed of the mixing map, prototypes and identity vectors.
    pub world_seed: u64,
}

impl Default for FactorConfig {
    fn default() -> Self {
        FactorConfig {
            n_identities: 25,
            dim_identity: 16,
            dim_expression: 24,
            dim_pose: 4,
            dim_background: 8,
            sample_dim: 64,
            observation_noise_std: 0.0,
            identity_scale: 1.0,
            pose_scale: 1.0,
            background_scale: 1.0,
            expression_scale: 1.0,
            expression_jitter: 0.3,
            nonlinear: false,
            world_seed: 0,
        }
    }
}

impl FactorConfig {
    pub fn factor_dim(&self) -> usize {
        self.dim_identity + self.dim_expression + self.dim_pose + self.dim_background
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum Label {
    Bits(Vec<u8>),
    Intensities(Vec<f64>),
    Class(usize),
}

impl Label {
    /// Label row in the layout the classifier loss expects.
    pub fn target_row(&self, n_labels: usize) -> Vec<f64> {
        match self {
            Label::Bits(b) => b.iter().map(|&v| v as f64).collect(),
            Label::Intensities(v) => v.clone(),
            Label::Class(c) => {
                let mut row = vec![0.0; n_labels];
                row[*c] = 1.0;
                row
            }
        }
    }

    /// Labels counted as "active" for routing telemetry.
    pub fn active(&self) -> Vec<usize> {
        match self {
            Label::Bits(b) => (0..b.len()).filter(|&i| b[i] == 1).collect(),
            Label::Intensities(v) => (0..v.len()).filter(|&i| v[i] > 0.0).collect(),
            Label::Class(c) => vec![*c],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactorSample {
    pub identity_id: usize,
    pub identity_vec: Vec<f64>,
    pub expression_vec: Vec<f64>,
    pub pose_vec: Vec<f64>,
    pub background_vec: Vec<f64>,
    pub observed: Vec<f64>,
    pub label: Label,
}

/// Factors of a sample after read-out.
#[derive(Clone, Debug, PartialEq)]
pub struct Factors {
    pub identity: Vec<f64>,
    pub expression: Vec<f64>,
    pub pose: Vec<f64>,
    pub background: Vec<f64>,
}

/// Nuisance factors that identity normalization imposes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetFactors {
    pub identity_id: usize,
    pub identity: Vec<f64>,
    pub pose: Vec<f64>,
    pub background: Vec<f64>,
}

impl From<&FactorSample> for TargetFactors {
    fn from(s: &FactorSample) -> Self {
        TargetFactors {
            identity_id: s.identity_id,
            identity: s.identity_vec.clone(),
            pose: s.pose_vec.clone(),
            background: s.background_vec.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdentitySplit {
    pub train: usize,
    pub test: usize,
}

impl Default for IdentitySplit {
    fn default() -> Self {
        IdentitySplit { train: 20, test: 5 }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct Dataset {
    pub samples: Vec<FactorSample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn identities(&self) -> std::collections::BTreeSet<usize> {
        self.samples.iter().map(|s| s.identity_id).collect()
    }

    /// Observed vectors stacked as rows.
    pub fn observed(&self) -> Tensor {
        stack(self.samples.iter().map(|s| s.observed.as_slice()))
    }
}

pub(crate) fn stack<'a>(rows: impl Iterator<Item = &'a [f64]>) -> Tensor {
    let mut data = Vec::new();
    let mut n = 0;
    let mut cols = 0;
    for r in rows {
        cols = r.len();
        data.extend_from_slice(r);
        n += 1;
    }
    Tensor::from_vec(n, cols, data).expect("stack rows")
}

/// The fixed generative world: mixing map, its read-out, label prototypes
/// and the identity roster.
#[derive(Clone, Debug)]
pub struct FactorSpace {
    pub config: FactorConfig,
    /// `sample_dim × factor_dim`.
    mixing: DMatrix<f64>,
    /// Least-squares inverse, `factor_dim × sample_dim`.
    readout: DMatrix<f64>,
    nonlinear_gain: Vec<f64>,
    identities: Vec<Vec<f64>>,
    /// FER class prototypes.
    class_prototypes: Vec<Vec<f64>>,
    /// Action-unit directions in expression space.
    au_directions: Vec<Vec<f64>>,
}

fn random_unit_like(rng: &mut Rng, dim: usize, scale: f64) -> Vec<f64> {
    let v = rng.normal_vec(dim, 1.0);
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / norm * scale).collect()
}

impl FactorSpace {
    pub fn new(config: FactorConfig) -> Result<Self> {
        let k = config.factor_dim();
        let n = config.sample_dim;
        if n < k {
            return Err(Error::Config(format!("sample_dim {n} is smaller than the total factor dimension {k}")));
        }
        let root = Rng::new(config.world_seed);
        let mut rng = root.split(1);
        // Orthonormal columns: every coordinate mixes every factor, and the
        // read-out does not amplify any direction.
        let mixing = DMatrix::from_fn(n, k, |_, _| rng.normal()).qr().q();
        let svd = mixing.clone().svd(false, false);
        let smin = svd.singular_values.min();
        let smax = svd.singular_values.max();
        if smin.is_nan() || smin <= 1e-8 * smax {
            return Err(Error::Config("mixing map is rank deficient".into()));
        }
        let mtm = mixing.transpose() * &mixing;
        let inv = mtm.try_inverse().ok_or_else(|| Error::Config("mixing map is rank deficient".into()))?;
        let readout = inv * mixing.transpose();

        let mut rng = root.split(2);
        let nonlinear_gain = (0..n).map(|_| 0.2 + 0.6 * rng.uniform()).collect();
        let mut rng = root.split(3);
        let identities =
            (0..config.n_identities).map(|_| rng.normal_vec(config.dim_identity, config.identity_scale)).collect();
        let mut rng = root.split(4);
        let class_prototypes =
            (0..7).map(|_| random_unit_like(&mut rng, config.dim_expression, config.expression_scale)).collect();
        let au_directions =
            (0..12).map(|_| random_unit_like(&mut rng, config.dim_expression, config.expression_scale)).collect();
        Ok(FactorSpace { config, mixing, readout, nonlinear_gain, identities, class_prototypes, au_directions })
    }

    /// Condition number of the mixing map.
    pub fn condition_number(&self) -> f64 {
        let svd = self.mixing.clone().svd(false, false);
        svd.singular_values.max() / svd.singular_values.min()
    }

    pub fn identity_vec(&self, id: usize) -> &[f64] {
        &self.identities[id]
    }

    /// Noise-free observation of concatenated factors.
    pub fn mix(&self, identity: &[f64], expression: &[f64], pose: &[f64], background: &[f64]) -> Vec<f64> {
        let z: Vec<f64> = identity.iter().chain(expression).chain(pose).chain(background).cloned().collect();
        debug_assert_eq!(z.len(), self.config.factor_dim());
        let n = self.config.sample_dim;
        let mut out = vec![0.0; n];
        for (i, o) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (j, zj) in z.iter().enumerate() {
                acc += self.mixing[(i, j)] * zj;
            }
            *o = acc;
        }
        if self.config.nonlinear {
            for (o, c) in out.iter_mut().zip(&self.nonlinear_gain) {
                *o += c * o.tanh();
            }
        }
        out
    }

    fn observe(
        &self,
        identity: &[f64],
        expression: &[f64],
        pose: &[f64],
        background: &[f64],
        rng: &mut Rng,
    ) -> Vec<f64> {
        let mut x = self.mix(identity, expression, pose, background);
        let std = self.config.observation_noise_std;
        if std > 0.0 {
            for v in x.iter_mut() {
                *v += rng.normal() * std;
            }
        }
        x
    }

    fn unmix_pointwise(&self, observed: &[f64]) -> Vec<f64> {
        if !self.config.nonlinear {
            return observed.to_vec();
        }
        // Newton on z + c·tanh(z) = y; strictly monotone so it converges.
        observed
            .iter()
            .zip(&self.nonlinear_gain)
            .map(|(&y, &c)| {
                let mut z = y / (1.0 + c);
                for _ in 0..50 {
                    let t = z.tanh();
                    let f = z + c * t - y;
                    let df = 1.0 + c * (1.0 - t * t);
                    let step = f / df;
                    z -= step;
                    if step.abs() < 1e-15 {
                        break;
                    }
                }
                z
            })
            .collect()
    }

    /// Least-squares inversion of the mixing map.
    pub fn factor_readout(&self, observed: &[f64]) -> Result<Factors> {
        if observed.len() != self.config.sample_dim {
            return Err(Error::LengthMismatch(observed.len(), self.config.sample_dim));
        }
        let y = self.unmix_pointwise(observed);
        let k = self.config.factor_dim();
        let mut z = vec![0.0; k];
        for (i, zi) in z.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (j, yj) in y.iter().enumerate() {
                acc += self.readout[(i, j)] * yj;
            }
            *zi = acc;
        }
        let c = &self.config;
        let (a, b, p) =
            (c.dim_identity, c.dim_identity + c.dim_expression, c.dim_identity + c.dim_expression + c.dim_pose);
        Ok(Factors {
            identity: z[..a].to_vec(),
            expression: z[a..b].to_vec(),
            pose: z[b..p].to_vec(),
            background: z[p..].to_vec(),
        })
    }

    /// Read-out rows for a factor block as a linear map on observed vectors,
    /// `sample_dim × block_dim` (valid for linear mixing).
    pub fn readout_block(&self, block: FactorBlock) -> Tensor {
        let c = &self.config;
        let (start, len) = match block {
            FactorBlock::Identity => (0, c.dim_identity),
            FactorBlock::Expression => (c.dim_identity, c.dim_expression),
            FactorBlock::Pose => (c.dim_identity + c.dim_expression, c.dim_pose),
            FactorBlock::Background => (c.dim_identity + c.dim_expression + c.dim_pose, c.dim_background),
        };
        let n = c.sample_dim;
        let mut t = Tensor::zeros(n, len);
        for i in 0..n {
            for j in 0..len {
                t.set(i, j, self.readout[(start + j, i)]);
            }
        }
        t
    }

    fn expression_for(&self, task: &TaskSpec, rng: &mut Rng, class: usize) -> (Vec<f64>, Label) {
        let d = self.config.dim_expression;
        let mut e = rng.normal_vec(d, self.config.expression_jitter);
        let label = match task.kind {
            TaskKind::Fer => {
                for (v, p) in e.iter_mut().zip(&self.class_prototypes[class % 7]) {
                    *v += p;
                }
                Label::Class(class % task.n_labels)
            }
            TaskKind::AuDetect => {
                let mut bits: Vec<u8> = (0..task.n_labels).map(|_| rng.bernoulli(0.5) as u8).collect();
                // AU1 and AU2 co-occur: P(AU2 | AU1) = 0.7, P(AU2 | ¬AU1) = 0.3.
                if task.n_labels > 1 {
                    let p = if bits[0] == 1 { 0.7 } else { 0.3 };
                    bits[1] = rng.bernoulli(p) as u8;
                }
                for (a, &bit) in bits.iter().enumerate() {
                    if bit == 1 {
                        for (v, dir) in e.iter_mut().zip(&self.au_directions[a % 12]) {
                            *v += dir;
                        }
                    }
                }
                Label::Bits(bits)
            }
            TaskKind::AuIntensity => {
                let max = task.intensity_scale_max;
                let levels = max.round() as usize + 1;
                let intensities: Vec<f64> = (0..task.n_labels).map(|_| rng.below(levels) as f64).collect();
                for (a, &level) in intensities.iter().enumerate() {
                    for (v, dir) in e.iter_mut().zip(&self.au_directions[a % 12]) {
                        *v += dir * level / max;
                    }
                }
                Label::Intensities(intensities)
            }
        };
        (e, label)
    }

    /// Draws `n_samples` samples and splits them by identity into disjoint
    /// train and test sets.
    pub fn generate(
        &self,
        task: &TaskSpec,
        n_samples: usize,
        split: IdentitySplit,
        rng: &mut Rng,
    ) -> Result<(Dataset, Dataset)> {
        if split.train + split.test > self.config.n_identities || split.train == 0 {
            return Err(Error::Config(format!(
                "identity split {}+{} does not fit {} identities",
                split.train, split.test, self.config.n_identities
            )));
        }
        let mut roster: Vec<usize> = (0..self.config.n_identities).collect();
        rng.shuffle(&mut roster);
        let used = &roster[..split.train + split.test];
        let train_ids: std::collections::BTreeSet<usize> = roster[..split.train].iter().cloned().collect();

        let mut classes: Vec<usize> = (0..n_samples).map(|i| i % task.n_labels.max(1)).collect();
        rng.shuffle(&mut classes);

        let c = &self.config;
        let mut train = Dataset::default();
        let mut test = Dataset::default();
        for &class in &classes {
            let identity_id = used[rng.below(used.len())];
            let identity_vec = self.identities[identity_id].clone();
            let (expression_vec, label) = self.expression_for(task, rng, class);
            let pose_vec = rng.normal_vec(c.dim_pose, c.pose_scale);
            let background_vec = rng.normal_vec(c.dim_background, c.background_scale);
            let observed = self.observe(&identity_vec, &expression_vec, &pose_vec, &background_vec, rng);
            let sample =
                FactorSample { identity_id, identity_vec, expression_vec, pose_vec, background_vec, observed, label };
            if train_ids.contains(&identity_id) {
                train.samples.push(sample);
            } else {
                test.samples.push(sample);
            }
        }
        Ok((train, test))
    }

    /// Re-renders `sample` with the target's identity, pose and background,
    /// leaving the expression factor untouched.
    pub fn oracle_normalize(&self, sample: &FactorSample, target: &TargetFactors, rng: &mut Rng) -> FactorSample {
        let observed = self.observe(&target.identity, &sample.expression_vec, &target.pose, &target.background, rng);
        FactorSample {
            identity_id: target.identity_id,
            identity_vec: target.identity.clone(),
            expression_vec: sample.expression_vec.clone(),
            pose_vec: target.pose.clone(),
            background_vec: target.background.clone(),
            observed,
            label: sample.label.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FactorBlock {
    Identity,
    Expression,
    Pose,
    Background,
}

#[derive(Serialize, Deserialize)]
struct DatasetHeader {
    format_version: u32,
    kind: String,
    task: TaskSpec,
    split: String,
    /// Free-form provenance, e.g. the config hash and seed.
    #[serde(default)]
    source: String,
    n_samples: usize,
}

/// Writes a JSON-lines dataset: a header line, then one sample per line.
pub fn write_jsonl(path: &Path, task: &TaskSpec, split_name: &str, source: &str, data: &Dataset) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let header = DatasetHeader {
        format_version: DATASET_FORMAT_VERSION,
        kind: "factor-dataset".into(),
        task: task.clone(),
        split: split_name.into(),
        source: source.into(),
        n_samples: data.len(),
    };
    serde_json::to_writer(&mut w, &header)?;
    writeln!(w).map_err(|e| Error::io(path, e))?;
    for s in &data.samples {
        serde_json::to_writer(&mut w, s)?;
        writeln!(w).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl(path: &Path) -> Result<(TaskSpec, Dataset)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let first = lines
        .next()
        .ok_or_else(|| Error::Parse { what: path.display().to_string(), msg: "empty file".into() })?
        .map_err(|e| Error::io(path, e))?;
    let header: DatasetHeader = serde_json::from_str(&first)?;
    if header.format_version != DATASET_FORMAT_VERSION {
        return Err(Error::FormatVersion {
            what: path.display().to_string(),
            found: header.format_version,
            expected: DATASET_FORMAT_VERSION,
        });
    }
    let mut data = Dataset::default();
    for line in lines {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        data.samples.push(serde_json::from_str(&line)?);
    }
    Ok((header.task, data))
}
