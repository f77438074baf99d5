use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffcore::{Adam, AdamConfig, Graph, Rng, Tensor};
use crate::error::{Error, Result};
use crate::synthdata::{stack, Dataset};

use super::{discriminator_loss, norm_loss, EmbedderSuite, NormLossBreakdown, NormLossWeights, NormalizerModel};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Probability that a pair is drawn with `I_o = I_t`.
    pub p_rec: f64,
    pub optimizer: AdamConfig,
    pub disc_optimizer: AdamConfig,
    /// Linear ramp of both learning rates over the first steps.
    pub warmup_steps: usize,
    /// Anneal both learning rates to zero along a half cosine after warmup.
    pub cosine_decay: bool,
}

const STAGE_ONE_ADAM: AdamConfig = AdamConfig { lr: 2e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 };

impl Default for NormTrainConfig {
    fn default() -> Self {
        NormTrainConfig {
            steps: 2000,
            batch_size: 32,
            p_rec: 0.2,
            optimizer: STAGE_ONE_ADAM,
            disc_optimizer: STAGE_ONE_ADAM,
            warmup_steps: 100,
            cosine_decay: true,
        }
    }
}

impl NormTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.p_rec) {
            return Err(Error::Config(format!("p_rec {} outside [0, 1]", self.p_rec)));
        }
        Ok(())
    }

    /// Learning-rate multiplier at `step`.
    pub fn lr_factor(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return (step + 1) as f64 / self.warmup_steps as f64;
        }
        if !self.cosine_decay {
            return 1.0;
        }
        let span = self.steps.saturating_sub(self.warmup_steps).max(1) as f64;
        let t = (step - self.warmup_steps) as f64 / span;
        0.5 * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub term: String,
    pub value: f64,
}

/// Per-step values of every loss term, in `(step, term, value)` long form.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossCurves {
    pub points: Vec<CurvePoint>,
}

impl LossCurves {
    pub fn push(&mut self, step: usize, term: &str, value: f64) {
        self.points.push(CurvePoint { step, term: term.into(), value });
    }

    pub fn series(&self, term: &str) -> Vec<f64> {
        self.points.iter().filter(|p| p.term == term).map(|p| p.value).collect()
    }

    /// CSV with a `# format_version=N <stamp>` first line and columns
    /// `step,term,value`.
    pub fn write_csv(&self, path: &Path, format_version: u32, stamp: &str) -> Result<()> {
        use std::io::Write;
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        writeln!(file, "# format_version={format_version} {stamp}").map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(file);
        w.write_record(["step", "term", "value"])?;
        for p in &self.points {
            w.write_record([p.step.to_string(), p.term.clone(), format!("{:e}", p.value)])?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct NormTrainReport {
    pub curves: LossCurves,
    pub final_breakdown: NormLossBreakdown,
}

fn check_finite(step: usize, b: &NormLossBreakdown) -> Result<()> {
    for (term, value) in b.terms() {
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss { step, term: term.into(), value });
        }
    }
    Ok(())
}

struct PairBatch {
    i_o: Tensor,
    i_t: Tensor,
    rec_mask: Vec<bool>,
}

fn sample_pairs(data: &Dataset, batch: usize, p_rec: f64, rng: &mut Rng) -> PairBatch {
    let n = data.len();
    let mut o_rows = Vec::with_capacity(batch);
    let mut t_rows = Vec::with_capacity(batch);
    let mut rec_mask = Vec::with_capacity(batch);
    for _ in 0..batch {
        let o = rng.below(n);
        let rec = rng.bernoulli(p_rec);
        let t = if rec { o } else { rng.below(n) };
        o_rows.push(o);
        t_rows.push(t);
        rec_mask.push(rec);
    }
    PairBatch {
        i_o: stack(o_rows.iter().map(|&i| data.samples[i].observed.as_slice())),
        i_t: stack(t_rows.iter().map(|&i| data.samples[i].observed.as_slice())),
        rec_mask,
    }
}

/// Alternating adversarial training: one generator step on the combined
/// objective followed by one hinge step of the discriminator on real pairs
/// `[I_t, I_o]` and fake pairs `[I_t, I_n]`.
pub fn train_normalizer(
    model: &mut NormalizerModel,
    suite: &mut EmbedderSuite,
    data: &Dataset,
    weights: &NormLossWeights,
    config: &NormTrainConfig,
    rng: &mut Rng,
) -> Result<NormTrainReport> {
    config.validate()?;
    weights.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyInput("train_normalizer"));
    }
    let mut gen_opt = Adam::new(config.optimizer, &model.params);
    let mut disc_opt = Adam::new(config.disc_optimizer, &suite.discriminator.params);
    let mut curves = LossCurves::default();
    let mut last = NormLossBreakdown::default();

    for step in 0..config.steps {
        let f = config.lr_factor(step);
        gen_opt.config.lr = config.optimizer.lr * f;
        disc_opt.config.lr = config.disc_optimizer.lr * f;
        let batch = sample_pairs(data, config.batch_size, config.p_rec, rng);

        let mut g = Graph::new();
        let p = model.params.bind(&mut g);
        let d = suite.discriminator.params.bind_frozen(&mut g);
        let i_o = g.constant(batch.i_o.clone());
        let i_t = g.constant(batch.i_t.clone());
        let i_n = model.forward(&mut g, &p, i_o, i_t)?;
        let (total, breakdown) = norm_loss(&mut g, i_o, i_t, i_n, &batch.rec_mask, suite, &d, weights)?;
        check_finite(step, &breakdown)?;
        g.backward(total)?;
        let grads = model.params.grads(&g, &p);
        let fake = g.value(i_n).clone();
        gen_opt.step(&mut model.params, &grads);

        let mut g = Graph::new();
        let d = suite.discriminator.params.bind(&mut g);
        let i_o = g.constant(batch.i_o);
        let i_t = g.constant(batch.i_t);
        let i_n = g.constant(fake);
        let real = g.concat_cols(&[i_t, i_o])?;
        let fake = g.concat_cols(&[i_t, i_n])?;
        let real = suite.discriminator.score(&mut g, &d, real)?;
        let fake = suite.discriminator.score(&mut g, &d, fake)?;
        let d_loss = discriminator_loss(&mut g, real, fake)?;
        let d_value = g.scalar(d_loss);
        if !d_value.is_finite() {
            return Err(Error::NonFiniteLoss { step, term: "disc".into(), value: d_value });
        }
        g.backward(d_loss)?;
        let grads = suite.discriminator.params.grads(&g, &d);
        disc_opt.step(&mut suite.discriminator.params, &grads);

        for (term, value) in breakdown.terms() {
            curves.push(step, term, value);
        }
        curves.push(step, "disc", d_value);
        last = breakdown;
    }
    Ok(NormTrainReport { curves, final_breakdown: last })
}

/// Loss breakdown on fixed pairs without updating anything.
pub fn evaluate_losses(
    model: &NormalizerModel,
    suite: &EmbedderSuite,
    i_o: &Tensor,
    i_t: &Tensor,
    rec_mask: &[bool],
    weights: &NormLossWeights,
) -> Result<NormLossBreakdown> {
    let mut g = Graph::new();
    let p = model.params.bind_frozen(&mut g);
    let d = suite.discriminator.params.bind_frozen(&mut g);
    let o = g.constant(i_o.clone());
    let t = g.constant(i_t.clone());
    let n = model.forward(&mut g, &p, o, t)?;
    let (_, breakdown) = norm_loss(&mut g, o, t, n, rec_mask, suite, &d, weights)?;
    Ok(breakdown)
}
