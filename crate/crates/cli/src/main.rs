use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::builder::{PossibleValuesParser, TypedValueParser};
use clap::{Parser, Subcommand};
use norface::classifier::{TaskKind, Variant};
use norface::harness::experiment::{evaluate_saved, output_root, run_dir_name, run_normalizers, write_datasets};
use norface::harness::gradsuite::{run_suite, SuiteCase, SUITE_TOLERANCE};
use norface::harness::io::{write_json, FORMAT_VERSION};
use norface::harness::report::load_reports;
use norface::harness::{ablate, compare, run_experiment, ExperimentConfig, Pipeline, RunSummary};
use serde::Serialize;

const DEFAULT_ABLATION: &str = "full,no_Mi,no_Mo,no_both,m0,m1,m2,m4,m8";

#[derive(Parser)]
#[command(name = "norface", version, about = "Identity normalization and MoE expression analysis on synthetic data")]
struct Cli {
    /// TOML experiment config; built-in defaults when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run a single seed instead of the config's seed list.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output root (falls back to $NORFACE_OUT, then ./runs).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Architecture variant: full, no_Mi, no_Mo, no_both or mK.
    #[arg(long, global = true)]
    variant: Option<String>,
    #[arg(
        long,
        global = true,
        value_parser = PossibleValuesParser::new(["au-detect", "au-intensity", "fer"])
            .try_map(|s| s.parse::<TaskKind>())
    )]
    task: Option<TaskKind>,
    /// Source of the normalized stream: trained, oracle or none.
    #[arg(long, global = true, value_parser = PossibleValuesParser::new(["trained", "oracle", "none"])
            .try_map(|s| s.parse::<Pipeline>()))]
    pipeline: Option<Pipeline>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Finite-difference check of every primitive and composite loss.
    Gradcheck,
    /// Generate and write the synthetic train/test splits.
    GenData,
    /// Train stage one (the normalizer) for every seed.
    TrainNormalizer,
    /// Train and evaluate the classifier for the configured pipeline.
    TrainClassifier,
    /// Re-evaluate saved classifier checkpoints on the test split.
    Eval,
    /// Train every listed variant with identical seeds and budgets.
    Ablate {
        /// Comma-separated variant names.
        #[arg(long, default_value = DEFAULT_ABLATION)]
        variants: String,
    },
    /// Median-of-seeds comparison table over saved runs.
    Report {
        /// Run directories or metrics files; defaults to the output root.
        paths: Vec<PathBuf>,
    },
}

#[derive(Serialize)]
struct GradcheckOutput<'a> {
    format_version: u32,
    config_hash: String,
    seeds: &'a [u64],
    tolerance: f64,
    passed: bool,
    cases: &'a [SuiteCase],
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(t) = cli.task {
        cfg.task = t;
    }
    if let Some(s) = cli.seed {
        cfg.seeds = vec![s];
    }
    if let Some(v) = &cli.variant {
        cfg.variant = v.clone();
    }
    if let Some(p) = cli.pipeline {
        cfg.pipeline = p;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_summary(s: &RunSummary) {
    for r in &s.reports {
        println!("{}/{} seed {}: {} = {:.4}", s.pipeline, s.variant, r.seed, r.primary_name, r.primary);
    }
    println!("{}/{} median {:.4} (min {:.4}, max {:.4})", s.pipeline, s.variant, s.median, s.min, s.max);
}

/// Columns of the MoE ablation table, weakest strategy first.
const STRATEGIES: [(&str, &str); 4] =
    [("no_both", "w/o M_i & M_o"), ("no_Mi", "w/o M_i"), ("no_Mo", "w/o M_o"), ("full", "full")];

fn write_table(out: &Path, stem: &str, reports: &[norface::harness::MetricsReport]) -> Result<()> {
    let table = compare(reports)?;
    let mut text = table.to_text();
    if let Some(first) = reports.first() {
        let keys: Vec<(String, &str)> =
            STRATEGIES.iter().map(|(v, h)| (format!("{}/{v}", first.pipeline), *h)).collect();
        let cols: Vec<(&str, &str)> = keys.iter().map(|(k, h)| (k.as_str(), *h)).collect();
        if cols.iter().all(|(k, _)| table.rows.iter().any(|r| r.key == *k)) {
            text = format!("{}\n{text}", table.to_columns(&cols)?);
        }
    }
    print!("{text}");
    std::fs::create_dir_all(out)?;
    table.write_csv(&out.join(format!("{stem}.csv")))?;
    let hashes: Vec<&str> = table.rows.iter().map(|r| r.config_hash.as_str()).collect();
    let seeds: Vec<String> = table.seeds.iter().map(u64::to_string).collect();
    let header =
        format!("# format_version={FORMAT_VERSION} config_hash={} seeds={}\n", hashes.join(","), seeds.join(","));
    std::fs::write(out.join(format!("{stem}.txt")), header + &text)?;
    Ok(())
}

fn run(cli: &Cli) -> Result<bool> {
    let cfg = load_config(cli)?;
    let out = output_root(cli.out.clone());
    match &cli.command {
        Command::Gradcheck => {
            let mut cases = Vec::new();
            for &seed in &cfg.seeds {
                cases.extend(run_suite(seed)?);
            }
            for c in &cases {
                let tag = if c.passed { "ok  " } else { "FAIL" };
                println!("{tag} seed {} {:<28} max rel err {:.3e}", c.seed, c.name, c.max_rel_err);
            }
            let passed = cases.iter().all(|c| c.passed);
            println!(
                "{} of {} checks passed (tolerance {SUITE_TOLERANCE:e})",
                cases.iter().filter(|c| c.passed).count(),
                cases.len()
            );
            std::fs::create_dir_all(&out)?;
            write_json(
                &out.join("gradcheck.json"),
                &GradcheckOutput {
                    format_version: FORMAT_VERSION,
                    config_hash: cfg.hash(),
                    seeds: &cfg.seeds,
                    tolerance: SUITE_TOLERANCE,
                    passed,
                    cases: &cases,
                },
            )?;
            Ok(passed)
        }
        Command::GenData => {
            for p in write_datasets(&cfg, &out)? {
                println!("wrote {}", p.display());
            }
            Ok(true)
        }
        Command::TrainNormalizer => {
            for s in run_normalizers(&cfg, Some(&out))? {
                println!(
                    "seed {}: total {:.4} -> {:.4}  exp {:.4} -> {:.4}  id {:.4} -> {:.4}",
                    s.seed, s.initial.total, s.last.total, s.initial.exp, s.last.exp, s.initial.id, s.last.id
                );
            }
            println!("normalizers under {}", out.join("normalizer").display());
            Ok(true)
        }
        Command::TrainClassifier => {
            print_summary(&run_experiment(&cfg, Some(&out))?);
            Ok(true)
        }
        Command::Eval => {
            let variant = cfg.variant()?;
            for &seed in &cfg.seeds {
                let r = evaluate_saved(&out, cfg.pipeline, variant, seed)?;
                let path = out.join(run_dir_name(cfg.pipeline, variant)).join(format!("seed-{seed}")).join("eval.json");
                write_json(&path, &r)?;
                println!("{}/{} seed {seed}: {} = {:.4}", r.pipeline, r.variant, r.primary_name, r.primary);
            }
            Ok(true)
        }
        Command::Ablate { variants } => {
            let variants: Vec<Variant> =
                variants.split(',').map(|v| v.trim().parse::<Variant>()).collect::<std::result::Result<_, _>>()?;
            if variants.is_empty() {
                bail!("no variants given");
            }
            let summaries = ablate(&cfg, &variants, Some(&out))?;
            let reports: Vec<_> = summaries.iter().flat_map(|s| s.reports.clone()).collect();
            write_table(&out, &format!("ablation-{}-{}", cfg.task, cfg.pipeline), &reports)?;
            Ok(true)
        }
        Command::Report { paths } => {
            let paths = if paths.is_empty() { vec![out.clone()] } else { paths.clone() };
            let reports = load_reports(&paths)?;
            write_table(&out, "comparison", &reports)?;
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
