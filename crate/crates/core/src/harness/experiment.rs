//! Two-stage experiment orchestration over a seed list.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::classifier::{
    predict, train_classifier, ClassifierInputs, ClassifierModel, ClassifierTrainReport, TaskKind, TaskSpec, Variant,
};
use crate::diffcore::{Rng, Tensor};
use crate::error::{Error, Result};
use crate::moe::RouterTelemetry;
use crate::normalizer::{train_normalizer, EmbedderSuite, NormLossBreakdown, NormTrainReport, NormalizerModel};
use crate::synthdata::{stack, write_jsonl, Dataset, FactorSample, FactorSpace, TargetFactors};

use super::config::{ExperimentConfig, Pipeline};
use super::io::{read_checkpoint, stamp, write_checkpoint, write_csv, write_epoch_csv, write_json, FORMAT_VERSION};
use super::metrics::{evaluate_outputs, LabelScore, TaskMetrics};
use super::report::summarize;

/// Stream labels for [`Rng::split`], one per independent random consumer.
mod stream {
    pub const DATA: u64 = 1;
    pub const NORM_INIT: u64 = 2;
    pub const NORM_SUITE: u64 = 3;
    pub const NORM_TRAIN: u64 = 4;
    pub const ORACLE: u64 = 5;
    pub const CLS_INIT: u64 = 6;
    pub const CLS_TRAIN: u64 = 7;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub format_version: u32,
    pub task: TaskKind,
    pub pipeline: Pipeline,
    pub variant: String,
    pub seed: u64,
    pub config_hash: String,
    pub per_label: Vec<LabelScore>,
    pub aggregate: Vec<(String, f64)>,
    pub primary_name: String,
    pub primary: f64,
    pub train_steps: usize,
    pub idle_expert_checks: u64,
    pub idle_expert_violations: u64,
}

impl MetricsReport {
    pub fn key(&self) -> String {
        format!("{}/{}", self.pipeline, self.variant)
    }
}

/// Wall-clock of a run, kept out of [`MetricsReport`] so reports of
/// identical runs stay byte-identical.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub format_version: u32,
    pub seed: u64,
    pub config_hash: String,
    pub wall_clock_s: f64,
}

/// Everything a seed shares across classifier variants.
pub struct SeedData {
    pub seed: u64,
    pub task: TaskSpec,
    pub space: FactorSpace,
    pub train: Dataset,
    pub test: Dataset,
    /// The common normalization target `I_t`.
    pub target: FactorSample,
    pub normalizer: Option<TrainedNormalizer>,
}

pub struct TrainedNormalizer {
    pub model: NormalizerModel,
    pub suite: EmbedderSuite,
    pub report: NormTrainReport,
    pub wall_clock_s: f64,
}

fn stage<T>(name: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| e.in_stage(name))
}

pub fn generate_data(cfg: &ExperimentConfig, seed: u64) -> Result<(FactorSpace, Dataset, Dataset)> {
    let space = FactorSpace::new(cfg.factors())?;
    let mut rng = Rng::new(seed).split(stream::DATA);
    let (train, test) = space.generate(&cfg.task_spec(), cfg.n_samples, cfg.split(), &mut rng)?;
    Ok((space, train, test))
}

/// Generates the seed's data and, when `with_normalizer`, trains stage one
/// on the training identities.
pub fn prepare_seed(cfg: &ExperimentConfig, seed: u64, with_normalizer: bool) -> Result<SeedData> {
    let mut data = seed_data(cfg, seed)?;
    let (space, train) = (&data.space, &data.train);
    data.normalizer = if with_normalizer {
        let root = Rng::new(seed);
        let start = Instant::now();
        let mut model =
            stage("normalizer", NormalizerModel::new(cfg.normalizer(), &mut root.split(stream::NORM_INIT)))?;
        let mut suite = EmbedderSuite::from_space(space, cfg.disc_hidden, &mut root.split(stream::NORM_SUITE));
        let report = stage(
            "normalizer",
            train_normalizer(
                &mut model,
                &mut suite,
                train,
                &cfg.norm_weights(),
                &cfg.norm_train(),
                &mut root.split(stream::NORM_TRAIN),
            ),
        )?;
        Some(TrainedNormalizer { model, suite, report, wall_clock_s: start.elapsed().as_secs_f64() })
    } else {
        None
    };
    Ok(data)
}

/// The seed's data splits and normalization target, without stage one.
fn seed_data(cfg: &ExperimentConfig, seed: u64) -> Result<SeedData> {
    cfg.validate()?;
    let (space, train, test) = stage("data", generate_data(cfg, seed))?;
    if train.is_empty() || test.is_empty() {
        return Err(
            Error::Config(format!("{} samples leave an empty train or test split", cfg.n_samples)).in_stage("data")
        );
    }
    let target = train.samples[0].clone();
    Ok(SeedData { seed, task: cfg.task_spec(), space, train, test, target, normalizer: None })
}

/// `(I_n, I_o, target)` rows for `data` under `pipeline`.
pub fn build_inputs(
    seed_data: &SeedData,
    pipeline: Pipeline,
    data: &Dataset,
    split_label: u64,
) -> Result<ClassifierInputs> {
    let i_o = data.observed();
    let i_n = match pipeline {
        Pipeline::None => i_o.clone(),
        Pipeline::Oracle => {
            let target = TargetFactors::from(&seed_data.target);
            let mut rng = Rng::new(seed_data.seed).split(stream::ORACLE).split(split_label);
            let rows: Vec<Vec<f64>> =
                data.samples.iter().map(|s| seed_data.space.oracle_normalize(s, &target, &mut rng).observed).collect();
            stack(rows.iter().map(Vec::as_slice))
        }
        Pipeline::Trained => {
            let n = seed_data
                .normalizer
                .as_ref()
                .ok_or_else(|| Error::Config("trained pipeline requested but stage one was not run".into()))?;
            n.model.normalize_to_target(&i_o, &seed_data.target.observed, 256)?
        }
    };
    let n_labels = seed_data.task.n_labels;
    let rows: Vec<f64> = data.samples.iter().flat_map(|s| s.label.target_row(n_labels)).collect();
    let targets = Tensor::from_vec(data.len(), n_labels, rows)?;
    ClassifierInputs::new(i_n, i_o, targets, data.samples.iter().map(|s| s.label.clone()).collect())
}

pub struct ClassifierRun {
    pub report: MetricsReport,
    pub train: ClassifierTrainReport,
    pub model: ClassifierModel,
    pub telemetry: Vec<(String, RouterTelemetry)>,
    pub wall_clock_s: f64,
}

/// A config with `pipeline` and `variant` substituted; its hash identifies
/// the run.
pub fn run_config(cfg: &ExperimentConfig, pipeline: Pipeline, variant: Variant) -> ExperimentConfig {
    ExperimentConfig { pipeline, variant: variant.name(), ..cfg.clone() }
}

/// Stage two for one seed: train on the training identities, evaluate on
/// the unseen test identities.
pub fn run_classifier(
    cfg: &ExperimentConfig,
    seed_data: &SeedData,
    pipeline: Pipeline,
    variant: Variant,
) -> Result<ClassifierRun> {
    let start = Instant::now();
    let run_cfg = run_config(cfg, pipeline, variant);
    let train = stage("inputs", build_inputs(seed_data, pipeline, &seed_data.train, 0))?;
    let test = stage("inputs", build_inputs(seed_data, pipeline, &seed_data.test, 1))?;
    let root = Rng::new(seed_data.seed);
    let mut model =
        stage("classifier", ClassifierModel::new(run_cfg.classifier(variant)?, &mut root.split(stream::CLS_INIT)))?;
    let train_report = stage(
        "classifier",
        train_classifier(
            &mut model,
            &train,
            Some(&test),
            &run_cfg.classifier_train(),
            &mut root.split(stream::CLS_TRAIN),
        ),
    )?;
    let (metrics, telemetry) = stage("evaluation", evaluate_model(&seed_data.task, &model, &test))?;

    let report = MetricsReport {
        format_version: FORMAT_VERSION,
        task: seed_data.task.kind,
        pipeline,
        variant: variant.name(),
        seed: seed_data.seed,
        config_hash: run_cfg.hash(),
        per_label: metrics.per_label,
        aggregate: metrics.aggregate,
        primary_name: metrics.primary_name,
        primary: metrics.primary,
        train_steps: train_report.steps,
        idle_expert_checks: train_report.idle_expert_checks,
        idle_expert_violations: train_report.idle_expert_violations,
    };
    Ok(ClassifierRun { report, train: train_report, model, telemetry, wall_clock_s: start.elapsed().as_secs_f64() })
}

/// Test-split metrics and per-block router telemetry of a trained model.
fn evaluate_model(
    task: &TaskSpec,
    model: &ClassifierModel,
    test: &ClassifierInputs,
) -> Result<(TaskMetrics, Vec<(String, RouterTelemetry)>)> {
    let preds = predict(model, test, 512)?;
    let metrics = evaluate_outputs(task, &preds.outputs, &test.targets)?;
    let mut telemetry = Vec::new();
    for (block, decisions) in &preds.routing {
        let m = decisions.first().map(|d| d.probs.len()).unwrap_or(0);
        let mut t = RouterTelemetry::new(task.label_names(), m);
        for (d, label) in decisions.iter().zip(&test.labels) {
            t.record(d, &label.active());
        }
        telemetry.push((block.to_string(), t));
    }
    Ok((metrics, telemetry))
}

fn mkdir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Directory name of a `(pipeline, variant)` run.
pub fn run_dir_name(pipeline: Pipeline, variant: Variant) -> String {
    format!("{}-{}", pipeline, variant.name())
}

fn write_normalizer(dir: &Path, cfg: &ExperimentConfig, seed: u64, n: &TrainedNormalizer) -> Result<()> {
    mkdir(dir)?;
    let hash = cfg.hash();
    n.report.curves.write_csv(&dir.join("loss_curves.csv"), FORMAT_VERSION, &stamp(&hash, seed))?;
    if cfg.save_checkpoints {
        write_checkpoint(&dir.join("normalizer.json"), "normalizer", &hash, seed, &n.model)?;
        write_checkpoint(&dir.join("embedders.json"), "embedders", &hash, seed, &n.suite)?;
    }
    write_json(
        &dir.join("timing.json"),
        &Timing { format_version: FORMAT_VERSION, seed, config_hash: hash, wall_clock_s: n.wall_clock_s },
    )
}

fn write_classifier_run(dir: &Path, cfg: &ExperimentConfig, run: &ClassifierRun) -> Result<()> {
    mkdir(dir)?;
    let r = &run.report;
    let tag = stamp(&r.config_hash, r.seed);
    write_json(&dir.join("metrics.json"), r)?;
    write_epoch_csv(&dir.join("epochs.csv"), &tag, &run.train.epochs)?;
    run.train.curves.write_csv(&dir.join("loss_curves.csv"), FORMAT_VERSION, &tag)?;
    for (block, t) in &run.telemetry {
        t.write_csv(&dir.join(format!("telemetry_{block}.csv")), FORMAT_VERSION, &tag)?;
    }
    let labels: Vec<Vec<String>> =
        r.per_label.iter().map(|s| vec![s.label.clone(), s.metric.clone(), format!("{:e}", s.value)]).collect();
    write_csv(&dir.join("per_label.csv"), &tag, &["label", "metric", "value"], &labels)?;
    if cfg.save_checkpoints {
        write_checkpoint(&dir.join("classifier.json"), "classifier", &r.config_hash, r.seed, &run.model)?;
    }
    write_json(
        &dir.join("timing.json"),
        &Timing {
            format_version: FORMAT_VERSION,
            seed: r.seed,
            config_hash: r.config_hash.clone(),
            wall_clock_s: run.wall_clock_s,
        },
    )
}

/// Median, minimum and maximum of one `(pipeline, variant)` cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub pipeline: Pipeline,
    pub variant: String,
    pub reports: Vec<MetricsReport>,
    pub median: f64,
    pub min: f64,
    pub max: f64,
}

/// Runs every `(pipeline, variant)` combination over the config's seeds.
/// Stage one is trained once per seed and shared by all variants. With
/// `out`, each run writes `<out>/<pipeline>-<variant>/seed-<s>/` and the
/// shared stage-one outputs go to `<out>/normalizer/seed-<s>/`.
pub fn run_grid(
    cfg: &ExperimentConfig,
    pipelines: &[Pipeline],
    variants: &[Variant],
    out: Option<&Path>,
) -> Result<Vec<RunSummary>> {
    cfg.validate()?;
    let needs_normalizer = pipelines.contains(&Pipeline::Trained);
    let mut reports: Vec<Vec<MetricsReport>> = vec![Vec::new(); pipelines.len() * variants.len()];
    if let Some(out) = out {
        for &p in pipelines {
            for &v in variants {
                let dir = out.join(run_dir_name(p, v));
                mkdir(&dir)?;
                run_config(cfg, p, v).save(&dir.join("config.toml"))?;
            }
        }
    }
    for &seed in &cfg.seeds {
        let data = prepare_seed(cfg, seed, needs_normalizer)?;
        if let (Some(out), Some(n)) = (out, &data.normalizer) {
            write_normalizer(&out.join("normalizer").join(format!("seed-{seed}")), cfg, seed, n)?;
        }
        for (pi, &p) in pipelines.iter().enumerate() {
            for (vi, &v) in variants.iter().enumerate() {
                let run = run_classifier(cfg, &data, p, v)?;
                if let Some(out) = out {
                    let dir = out.join(run_dir_name(p, v)).join(format!("seed-{seed}"));
                    write_classifier_run(&dir, &run_config(cfg, p, v), &run)?;
                }
                reports[pi * variants.len() + vi].push(run.report);
            }
        }
    }
    let mut summaries = Vec::new();
    for (i, reps) in reports.into_iter().enumerate() {
        let values: Vec<f64> = reps.iter().map(|r| r.primary).collect();
        let (median, min, max) = summarize(&values)?;
        summaries.push(RunSummary {
            pipeline: pipelines[i / variants.len()],
            variant: variants[i % variants.len()].name(),
            reports: reps,
            median,
            min,
            max,
        });
    }
    Ok(summaries)
}

/// The config's own pipeline and variant over its seeds.
pub fn run_experiment(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<RunSummary> {
    let mut s = run_grid(cfg, &[cfg.pipeline], &[cfg.variant()?], out)?;
    Ok(s.remove(0))
}

/// Trains and evaluates each variant under the config's pipeline with
/// identical seeds and budgets.
pub fn ablate(cfg: &ExperimentConfig, variants: &[Variant], out: Option<&Path>) -> Result<Vec<RunSummary>> {
    run_grid(cfg, &[cfg.pipeline], variants, out)
}

/// Writes `<out>/data/seed-<s>/{train,test}.jsonl` for every seed and
/// returns the written paths.
pub fn write_datasets(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let mut paths = Vec::new();
    for &seed in &cfg.seeds {
        let data = seed_data(cfg, seed)?;
        let dir = out.join("data").join(format!("seed-{seed}"));
        mkdir(&dir)?;
        let source = stamp(&cfg.hash(), seed);
        for (name, split) in [("train", &data.train), ("test", &data.test)] {
            let path = dir.join(format!("{name}.jsonl"));
            write_jsonl(&path, &data.task, name, &source, split)?;
            paths.push(path);
        }
    }
    Ok(paths)
}

/// Final-step loss breakdown of one seed's stage one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizerSummary {
    pub seed: u64,
    pub initial: NormLossBreakdown,
    pub last: NormLossBreakdown,
}

/// Stage one alone over the config's seeds. With `out`, writes
/// `<out>/normalizer/seed-<s>/`.
pub fn run_normalizers(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<Vec<NormalizerSummary>> {
    let mut summaries = Vec::new();
    for &seed in &cfg.seeds {
        let data = prepare_seed(cfg, seed, true)?;
        let n = data.normalizer.as_ref().expect("stage one requested");
        if let Some(out) = out {
            write_normalizer(&out.join("normalizer").join(format!("seed-{seed}")), cfg, seed, n)?;
        }
        let first = |term: &str| n.report.curves.series(term).first().copied().unwrap_or(f64::NAN);
        let initial = NormLossBreakdown {
            adv: first("adv"),
            rec: first("rec"),
            perc: first("perc"),
            id: first("id"),
            lm: first("lm"),
            exp: first("exp"),
            eye: first("eye"),
            total: first("total"),
        };
        summaries.push(NormalizerSummary { seed, initial, last: n.report.final_breakdown });
    }
    Ok(summaries)
}

/// Metrics recomputed from a saved classifier checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub format_version: u32,
    pub task: TaskKind,
    pub pipeline: Pipeline,
    pub variant: String,
    pub seed: u64,
    pub config_hash: String,
    pub per_label: Vec<LabelScore>,
    pub aggregate: Vec<(String, f64)>,
    pub primary_name: String,
    pub primary: f64,
}

/// Re-evaluates `<root>/<pipeline>-<variant>/seed-<seed>/classifier.json`
/// on the regenerated unseen-identity test split. The trained pipeline
/// reloads `<root>/normalizer/seed-<seed>/normalizer.json`.
pub fn evaluate_saved(root: &Path, pipeline: Pipeline, variant: Variant, seed: u64) -> Result<EvalReport> {
    let run_dir = root.join(run_dir_name(pipeline, variant));
    let cfg = stage("eval", ExperimentConfig::load(&run_dir.join("config.toml")))?;
    let ckpt = stage(
        "eval",
        read_checkpoint::<ClassifierModel>(&run_dir.join(format!("seed-{seed}")).join("classifier.json"), "classifier"),
    )?;
    if ckpt.config_hash != cfg.hash() {
        return Err(Error::IncompatibleRuns(format!(
            "checkpoint hash {} does not match config hash {}",
            ckpt.config_hash,
            cfg.hash()
        )));
    }
    let mut data = seed_data(&cfg, seed)?;
    if pipeline == Pipeline::Trained {
        let dir = root.join("normalizer").join(format!("seed-{seed}"));
        let model = stage("eval", read_checkpoint::<NormalizerModel>(&dir.join("normalizer.json"), "normalizer"))?;
        let suite = stage("eval", read_checkpoint::<EmbedderSuite>(&dir.join("embedders.json"), "embedders"))?;
        data.normalizer = Some(TrainedNormalizer {
            model: model.model,
            suite: suite.model,
            report: NormTrainReport::default(),
            wall_clock_s: 0.0,
        });
    }
    let test = stage("inputs", build_inputs(&data, pipeline, &data.test, 1))?;
    let (m, _) = stage("evaluation", evaluate_model(&data.task, &ckpt.model, &test))?;
    Ok(EvalReport {
        format_version: FORMAT_VERSION,
        task: data.task.kind,
        pipeline,
        variant: variant.name(),
        seed,
        config_hash: ckpt.config_hash,
        per_label: m.per_label,
        aggregate: m.aggregate,
        primary_name: m.primary_name,
        primary: m.primary,
    })
}

/// Output root: the explicit directory if given, else `$NORFACE_OUT`, else
/// `./runs`.
pub fn output_root(explicit: Option<PathBuf>) -> PathBuf {
    explicit.or_else(|| std::env::var_os("NORFACE_OUT").map(PathBuf::from)).unwrap_or_else(|| PathBuf::from("runs"))
}
