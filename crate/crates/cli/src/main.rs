use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use crl_mmnar::datagen::{generate, Dataset};
use crl_mmnar::harness::artifacts::{
    load_model, load_rectifier, seed_dir, write_aggregate, write_atomic, write_config, write_seed_run,
    METRICS_CSV, METRICS_JSON, RECTIFIER_FILE,
};
use crl_mmnar::harness::experiments::{
    ablate, cohort_config, default_grid, fit_validation_rectifier, probe_model, run_seed, score_test, sweep,
    sweep_csv, ModelKind, RunData, SeedRun, SWEEPABLE,
};
use crl_mmnar::harness::{BaselineKind, RunConfig};
use crl_mmnar::metrics::MetricsReport;

/// Missingness-aware multimodal fusion: data generation, training,
/// evaluation and experiment drivers.
#[derive(Debug, Parser)]
#[command(name = "crl-mmnar", version)]
struct Cli {
    /// Log more (repeat for debug output).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Run configuration (TOML). Built-in defaults when omitted.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Run a single seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(short, long, default_value = "out")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct Stored {
    #[command(flatten)]
    common: Common,
    /// Checkpoint written by `train` or `baseline`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Accept a checkpoint trained under a different configuration.
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic cohort as JSON lines.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Include the generator's hidden ground truth.
        #[arg(long)]
        with_oracle: bool,
    },
    /// Train, fit the rectifier on validation and score the test split.
    Train(Common),
    /// Score a checkpoint on a dataset.
    Evaluate {
        #[command(flatten)]
        stored: Stored,
        /// Dataset to score (JSON lines).
        #[arg(long)]
        data: PathBuf,
        /// Rectifier table to apply; defaults to the one beside the checkpoint.
        #[arg(long)]
        rectifier: Option<PathBuf>,
    },
    /// Base, +fusion, +reconstruction and +rectifier runs per seed.
    Ablate(Common),
    /// Imputation baseline through the same pipeline.
    Baseline {
        #[command(flatten)]
        common: Common,
        /// zero_fill or mean_impute.
        #[arg(long, value_parser = parse_kind)]
        kind: BaselineKind,
    },
    /// Refit the rectifier for a checkpoint on its validation split.
    Rectify(Stored),
    /// Linear probes on the missingness embedding of the test split.
    Probe(Stored),
    /// Sensitivity grid over one named hyperparameter.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Hyperparameter name.
        #[arg(long)]
        param: String,
        /// Comma-separated grid; a default grid is used for common names.
        #[arg(long, value_delimiter = ',')]
        values: Vec<f64>,
    },
}

fn parse_kind(s: &str) -> Result<BaselineKind, String> {
    s.parse().map_err(|e: crl_mmnar::Error| e.to_string())
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seeds = vec![seed];
    }
    Ok(cfg)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)?;
    Ok(())
}

/// Runs every configured seed, writing per-seed artifacts and the aggregate.
fn run_all(cfg: &RunConfig, out: &Path, kind: ModelKind, rectify: bool) -> Result<Vec<SeedRun>> {
    write_config(out, cfg)?;
    let mut runs = Vec::new();
    for &seed in &cfg.seeds {
        let data = RunData::prepare(cfg, seed)?;
        let run = run_seed(cfg, &data, kind, seed, rectify).with_context(|| format!("seed {seed}"))?;
        let dir = seed_dir(out, seed);
        write_seed_run(&dir, cfg, &run, &data)?;
        let report = run.final_report();
        let aucs: Vec<String> = (0..report.tasks.len())
            .map(|t| format!("{}={}", report.tasks[t], report.auc(t).map_or("-".into(), |a| format!("{a:.4}"))))
            .collect();
        println!("seed {seed}: {} (epoch {}) -> {}", aucs.join(" "), run.fit.best_epoch, dir.display());
        runs.push(run);
    }
    let finals: Vec<&MetricsReport> = runs.iter().map(SeedRun::final_report).collect();
    let agg = write_aggregate(out, &finals)?;
    for (t, task) in agg.tasks.iter().enumerate() {
        println!("{task}: AUC {} AUPRC {} Brier {}", agg.auc[t], agg.auprc[t], agg.brier[t]);
    }
    Ok(runs)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { common, with_oracle } => {
            let cfg = load_config(&common)?;
            let gen = match common.seed {
                Some(seed) => cohort_config(&cfg, seed),
                None => cfg.data.generator.clone(),
            };
            let ds = generate(&gen)?;
            std::fs::create_dir_all(&common.out)?;
            let path = common.out.join("data.jsonl");
            ds.save(&path, with_oracle)?;
            println!("{} patients -> {}", ds.len(), path.display());
        }
        Command::Train(common) => {
            let cfg = load_config(&common)?;
            let kind = ModelKind::Fusion(cfg.ablation.components());
            run_all(&cfg, &common.out, kind, cfg.ablation.rectifier)?;
        }
        Command::Baseline { common, kind } => {
            let cfg = load_config(&common)?;
            run_all(&cfg, &common.out, ModelKind::Baseline { baseline: kind }, cfg.ablation.rectifier)?;
        }
        Command::Evaluate { stored, data, rectifier } => {
            let cfg = load_config(&stored.common)?;
            let (model, meta) = load_model(&stored.checkpoint, &cfg, stored.force)?;
            let ds = Dataset::load(&data)?;
            if ds.modalities != meta.schema.modalities || ds.dims != meta.schema.dims || ds.tasks != meta.schema.tasks {
                bail!("dataset schema does not match the checkpoint");
            }
            let rect_path = rectifier.or_else(|| {
                let beside = stored.checkpoint.with_file_name(RECTIFIER_FILE);
                beside.exists().then_some(beside)
            });
            let table = rect_path.as_deref().map(load_rectifier).transpose()?;
            let records: Vec<_> = ds.records.iter().collect();
            let (plain, rect) = score_test(
                &model,
                &records,
                &ds.tasks,
                table.as_ref(),
                meta.seed,
                &cfg.hash(),
                cfg.training.eval_chunk,
            )?;
            let mut reports = vec![&plain];
            reports.extend(rect.as_ref());
            let out = &stored.common.out;
            write_atomic(&out.join(METRICS_CSV), MetricsReport::to_csv(&reports).as_bytes())?;
            write_json(&out.join(METRICS_JSON), &reports)?;
            for r in &reports {
                let aucs: Vec<String> = (0..r.tasks.len())
                    .map(|t| format!("{}={}", r.tasks[t], r.auc(t).map_or("-".into(), |a| format!("{a:.4}"))))
                    .collect();
                println!("{}: {}", if r.rectified { "rectified" } else { "unrectified" }, aucs.join(" "));
            }
        }
        Command::Ablate(common) => {
            let cfg = load_config(&common)?;
            let runs = ablate(&cfg)?;
            write_config(&common.out, &cfg)?;
            write_atomic(&common.out.join("ablation.csv"), runs.table.to_csv().as_bytes())?;
            write_json(&common.out.join("ablation.json"), &runs.table)?;
            let rows: Vec<&MetricsReport> = runs.reports.iter().flatten().collect();
            write_atomic(&common.out.join(METRICS_CSV), MetricsReport::to_csv(&rows).as_bytes())?;
            print!("{}", runs.table.render());
        }
        Command::Rectify(stored) => {
            let cfg = load_config(&stored.common)?;
            let (model, meta) = load_model(&stored.checkpoint, &cfg, stored.force)?;
            let data = RunData::prepare(&cfg, meta.seed)?;
            let val = data.val();
            let probs = model.probs(&val, cfg.training.eval_chunk)?;
            let fit = fit_validation_rectifier(&cfg, &probs, &val, &meta.schema.tasks, meta.seed)?;
            let out = &stored.common.out;
            write_atomic(&out.join(RECTIFIER_FILE), fit.table.to_tsv().as_bytes())?;
            let mut scores = String::from("kappa,val_brier\n");
            for (k, b) in &fit.kappa_scores {
                scores.push_str(&format!("{k},{b:.6}\n"));
            }
            write_atomic(&out.join("kappa.csv"), scores.as_bytes())?;
            println!(
                "kappa {} ({:.1}% of fold cells fire) -> {}",
                fit.table.kappa,
                100.0 * fit.table.applied_fraction(),
                out.join(RECTIFIER_FILE).display()
            );
        }
        Command::Probe(stored) => {
            let cfg = load_config(&stored.common)?;
            let (model, meta) = load_model(&stored.checkpoint, &cfg, stored.force)?;
            let data = RunData::prepare(&cfg, meta.seed)?;
            let report = probe_model(&cfg, &model, &data.test(), meta.seed)?;
            write_json(&stored.common.out.join("probe.json"), &report)?;
            println!(
                "pattern probe accuracy {:.4} (majority {:.4}, {} patterns)",
                report.accuracy, report.majority_baseline, report.distinct_patterns
            );
        }
        Command::Sweep { common, param, values } => {
            let cfg = load_config(&common)?;
            let grid = if values.is_empty() {
                default_grid(&param).with_context(|| {
                    format!("no default grid for {param:?}; pass --values (known: {})", SWEEPABLE.join(", "))
                })?
            } else {
                values
            };
            let points = sweep(&cfg, &param, &grid)?;
            write_config(&common.out, &cfg)?;
            let csv = sweep_csv(&param, &points);
            write_atomic(&common.out.join("sweep.csv"), csv.as_bytes())?;
            print!("{csv}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).parse_default_env().init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
