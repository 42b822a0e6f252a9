//! Seeded runs, the component ablation and hyperparameter sweeps.

use serde::{Deserialize, Serialize};

use crate::datagen::{generate, split, Dataset, GenConfig, Pattern, PatientRecord, Split};
use crate::error::{Error, Result};
use crate::kernel::Tensor;
use crate::metrics::{embedding_probes, MetricsReport, ProbeReport};
use crate::model::{Components, FusionModel, Schema};
use crate::outcome::{fit_rectifier, predict, rectifier_folds, select_kappa, FoldRole, RectifierTable};

use super::baseline::{BaselineKind, ImputationBaseline};
use super::config::RunConfig;
use super::train::{fit, logits_for, mix_seed, FitReport, Predictor};

/// Generator settings of the synthetic cohort used by run `seed`.
pub fn cohort_config(cfg: &RunConfig, seed: u64) -> GenConfig {
    let mut gen = cfg.data.generator.clone();
    if cfg.data.reseed {
        gen.seed = mix_seed(gen.seed, seed, 1);
    }
    gen
}

/// A dataset and its train/validation/test partition for one seed.
#[derive(Debug, Clone)]
pub struct RunData {
    pub dataset: Dataset,
    pub split: Split,
}

impl RunData {
    /// Loads or generates the cohort and splits it. With `reseed` the
    /// generator seed is derived from the run seed.
    pub fn prepare(cfg: &RunConfig, seed: u64) -> Result<Self> {
        let dataset = match &cfg.data.path {
            Some(path) => Dataset::load(path)?,
            None => generate(&cohort_config(cfg, seed))?,
        };
        Self::from_dataset(dataset, cfg.data.split, seed)
    }

    pub fn from_dataset(dataset: Dataset, ratios: [f64; 3], seed: u64) -> Result<Self> {
        let split = split(&dataset, ratios, mix_seed(seed, 2, 0))?;
        Ok(Self { dataset, split })
    }

    fn pick(&self, idx: &[usize]) -> Vec<&PatientRecord> {
        idx.iter().map(|&i| &self.dataset.records[i]).collect()
    }

    pub fn train(&self) -> Vec<&PatientRecord> {
        self.pick(&self.split.train)
    }

    pub fn val(&self) -> Vec<&PatientRecord> {
        self.pick(&self.split.val)
    }

    pub fn test(&self) -> Vec<&PatientRecord> {
        self.pick(&self.split.test)
    }
}

/// What to train.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelKind {
    Fusion(Components),
    Baseline { baseline: BaselineKind },
}

impl ModelKind {
    pub fn label(&self) -> String {
        match self {
            Self::Fusion(c) => match (c.mmnar_fusion, c.reconstruction) {
                (false, false) => "base".into(),
                (true, false) => "base+fusion".into(),
                (false, true) => "base+recon".into(),
                (true, true) => "base+fusion+recon".into(),
            },
            Self::Baseline { baseline } => baseline.name().into(),
        }
    }
}

#[derive(Debug, Clone)]
pub enum TrainedModel {
    Fusion(FusionModel),
    Baseline(ImputationBaseline),
}

impl TrainedModel {
    pub fn build(kind: ModelKind, cfg: &RunConfig, schema: &Schema, train: &[&PatientRecord], seed: u64) -> Result<Self> {
        let init_seed = mix_seed(seed, 3, 0);
        Ok(match kind {
            ModelKind::Fusion(c) => Self::Fusion(FusionModel::new(schema, &cfg.model, c, init_seed)?),
            ModelKind::Baseline { baseline } => {
                Self::Baseline(ImputationBaseline::new(baseline, schema, &cfg.model, train, init_seed)?)
            }
        })
    }

    pub fn predictor(&self) -> &dyn Predictor {
        match self {
            Self::Fusion(m) => m,
            Self::Baseline(m) => m,
        }
    }

    /// Eval-mode logits `[n, T]`.
    pub fn logits(&self, records: &[&PatientRecord], chunk: usize) -> Result<Tensor> {
        match self {
            Self::Fusion(m) => logits_for(m, records, chunk),
            Self::Baseline(m) => logits_for(m, records, chunk),
        }
    }

    /// Eval-mode probabilities `[n, T]`.
    pub fn probs(&self, records: &[&PatientRecord], chunk: usize) -> Result<Tensor> {
        Ok(predict(&self.logits(records, chunk)?))
    }
}

/// Rectifier fitted on the validation split.
#[derive(Debug, Clone)]
pub struct RectifierFit {
    pub table: RectifierTable,
    /// `(κ, cross-fitted validation Brier)` over the grid.
    pub kappa_scores: Vec<(f64, f64)>,
}

/// Everything one (config, seed, model kind) run produces.
#[derive(Debug, Clone)]
pub struct SeedRun {
    pub seed: u64,
    pub kind: ModelKind,
    pub fit: FitReport,
    pub model: TrainedModel,
    pub rectifier: Option<RectifierFit>,
    pub unrectified: MetricsReport,
    pub rectified: Option<MetricsReport>,
}

impl SeedRun {
    /// The report the configuration asks for: rectified when a rectifier was fitted.
    pub fn final_report(&self) -> &MetricsReport {
        self.rectified.as_ref().unwrap_or(&self.unrectified)
    }
}

pub fn labels_tensor(records: &[&PatientRecord], tasks: usize) -> Tensor {
    Tensor::matrix(
        records.len(),
        tasks,
        records.iter().flat_map(|r| r.labels.iter().map(|&y| f64::from(y))).collect(),
    )
}

pub fn patterns_of(records: &[&PatientRecord]) -> Vec<Pattern> {
    records.iter().map(|r| r.mask).collect()
}

/// Selects κ and fits the cross-fitted table on validation predictions.
pub fn fit_validation_rectifier(
    cfg: &RunConfig,
    probs: &Tensor,
    val: &[&PatientRecord],
    tasks: &[String],
    seed: u64,
) -> Result<RectifierFit> {
    let labels = labels_tensor(val, tasks.len());
    let patterns = patterns_of(val);
    let folds = rectifier_folds(&patterns, mix_seed(seed, 4, 0));
    let r = &cfg.rectifier;
    let (kappa, kappa_scores) = select_kappa(probs, &labels, &patterns, &folds, tasks, &r.kappa_grid, r.min_support)?;
    let table = fit_rectifier(probs, &labels, &patterns, &folds, tasks, kappa, r.min_support)?;
    log::info!(
        "rectifier: kappa {kappa}, {:.1}% of fold cells fire",
        100.0 * table.applied_fraction()
    );
    Ok(RectifierFit { table, kappa_scores })
}

/// Test-set reports for a trained model, unrectified and (when a table is
/// given) rectified.
pub fn score_test(
    model: &TrainedModel,
    test: &[&PatientRecord],
    tasks: &[String],
    rectifier: Option<&RectifierTable>,
    seed: u64,
    config_hash: &str,
    chunk: usize,
) -> Result<(MetricsReport, Option<MetricsReport>)> {
    let probs = model.probs(test, chunk)?;
    let labels = labels_tensor(test, tasks.len());
    let patterns = patterns_of(test);
    let plain = MetricsReport::evaluate(&probs, &labels, &patterns, tasks, seed, config_hash, false);
    let rectified = rectifier.map(|table| {
        let (rect, unseen) = table.apply(&probs, &patterns, &vec![FoldRole::Test; test.len()]);
        if unseen > 0 {
            log::info!("{unseen} test patients have a pattern without a rectifier cell");
        }
        MetricsReport::evaluate(&rect, &labels, &patterns, tasks, seed, config_hash, true)
    });
    Ok((plain, rectified))
}

/// Trains, fits the rectifier on validation and scores the test split.
/// Test labels are read only in the final scoring step.
pub fn run_seed(cfg: &RunConfig, data: &RunData, kind: ModelKind, seed: u64, rectify: bool) -> Result<SeedRun> {
    let hash = cfg.hash();
    let schema = Schema::of(&data.dataset);
    let (train, val, test) = (data.train(), data.val(), data.test());
    let mut model = TrainedModel::build(kind, cfg, &schema, &train, seed)?;
    let fit_seed = mix_seed(seed, 5, 0);
    log::info!("seed {seed}: training {} on {} patients", kind.label(), train.len());
    let fit_report = match &mut model {
        TrainedModel::Fusion(m) => fit(m, &train, &val, &cfg.training, fit_seed)?,
        TrainedModel::Baseline(m) => fit(m, &train, &val, &cfg.training, fit_seed)?,
    };
    let rectifier = if rectify {
        let probs = model.probs(&val, cfg.training.eval_chunk)?;
        Some(fit_validation_rectifier(cfg, &probs, &val, &schema.tasks, seed)?)
    } else {
        None
    };
    let (unrectified, rectified) = score_test(
        &model,
        &test,
        &schema.tasks,
        rectifier.as_ref().map(|r| &r.table),
        seed,
        &hash,
        cfg.training.eval_chunk,
    )?;
    Ok(SeedRun {
        seed,
        kind,
        fit: fit_report,
        model,
        rectifier,
        unrectified,
        rectified,
    })
}

/// `run_seed` with the model and rectifier chosen by the ablation flags.
pub fn train_seed(cfg: &RunConfig, seed: u64) -> Result<SeedRun> {
    let data = RunData::prepare(cfg, seed)?;
    run_seed(cfg, &data, ModelKind::Fusion(cfg.ablation.components()), seed, cfg.ablation.rectifier)
}

/// Linear probes on the pattern embedding of `records`.
pub fn probe_model(cfg: &RunConfig, model: &TrainedModel, records: &[&PatientRecord], seed: u64) -> Result<ProbeReport> {
    let missing = || Error::Config("probes need a model with missingness fusion".into());
    let TrainedModel::Fusion(model) = model else {
        return Err(missing());
    };
    let z = model.outputs_for(records, cfg.training.eval_chunk)?.z.ok_or_else(missing)?;
    let labels = labels_tensor(records, model.schema().num_tasks());
    Ok(embedding_probes(&z, &patterns_of(records), &labels, mix_seed(seed, 6, 0)))
}

/// Mean and sample standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
    pub n: usize,
}

impl MeanSd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self { mean: f64::NAN, sd: f64::NAN, n };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let sd = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Self { mean, sd, n }
    }
}

impl std::fmt::Display for MeanSd {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.4} ± {:.4}", self.mean, self.sd)
    }
}

/// Overall test metrics across seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub config_hash: String,
    pub rectified: bool,
    pub seeds: Vec<u64>,
    pub tasks: Vec<String>,
    pub auc: Vec<MeanSd>,
    pub auprc: Vec<MeanSd>,
    pub brier: Vec<MeanSd>,
}

impl Aggregate {
    /// Seeds where a metric is undefined are left out of that metric.
    pub fn of(reports: &[&MetricsReport]) -> Result<Self> {
        let first = reports.first().ok_or_else(|| Error::Config("nothing to aggregate".into()))?;
        let tasks = first.tasks.clone();
        let collect = |f: &dyn Fn(&MetricsReport, usize) -> Option<f64>| -> Vec<MeanSd> {
            (0..tasks.len())
                .map(|t| MeanSd::of(&reports.iter().filter_map(|r| f(r, t)).collect::<Vec<_>>()))
                .collect()
        };
        Ok(Self {
            config_hash: first.config_hash.clone(),
            rectified: first.rectified,
            seeds: reports.iter().map(|r| r.seed).collect(),
            auc: collect(&|r, t| r.overall[t].auc.ok()),
            auprc: collect(&|r, t| r.overall[t].auprc.ok()),
            brier: collect(&|r, t| Some(r.overall[t].brier)),
            tasks,
        })
    }

    pub const CSV_HEADER: &'static str = "task,metric,mean,sd,n,config_hash";

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::CSV_HEADER);
        for (t, task) in self.tasks.iter().enumerate() {
            for (name, m) in [("auc", self.auc[t]), ("auprc", self.auprc[t]), ("brier", self.brier[t])] {
                s.push_str(&format!("{task},{name},{:.6},{:.6},{},{}\n", m.mean, m.sd, m.n, self.config_hash));
            }
        }
        s
    }
}

/// One ablation row: mean test AUC/AUPRC per task over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub auc: Vec<MeanSd>,
    pub auprc: Vec<MeanSd>,
    /// Mean AUC gain over the previous row; `None` for the first row.
    pub delta_auc: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub config_hash: String,
    pub tasks: Vec<String>,
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

pub const ABLATION_ROWS: [&str; 4] = ["base", "+mmnar_fusion", "+reconstruction", "+rectifier"];

impl AblationTable {
    /// `per_row[r]` holds the test reports of row `r`, one per seed.
    pub fn from_reports(per_row: &[Vec<MetricsReport>]) -> Result<Self> {
        let mut rows: Vec<AblationRow> = Vec::with_capacity(per_row.len());
        for (name, reports) in ABLATION_ROWS.iter().zip(per_row) {
            let refs: Vec<&MetricsReport> = reports.iter().collect();
            let agg = Aggregate::of(&refs)?;
            let delta_auc = match rows.last() {
                None => vec![None; agg.tasks.len()],
                Some(prev) => agg.auc.iter().zip(&prev.auc).map(|(a, b)| Some(a.mean - b.mean)).collect(),
            };
            rows.push(AblationRow {
                name: name.to_string(),
                auc: agg.auc,
                auprc: agg.auprc,
                delta_auc,
            });
        }
        let first = &per_row[0][0];
        Ok(Self {
            config_hash: first.config_hash.clone(),
            tasks: first.tasks.clone(),
            seeds: per_row[0].iter().map(|r| r.seed).collect(),
            rows,
        })
    }

    /// Column layout: per task AUC, APR and ΔAUC; "-" where undefined.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("row");
        for t in &self.tasks {
            s.push_str(&format!(",{t}_auc,{t}_apr,{t}_delta_auc"));
        }
        s.push('\n');
        for row in &self.rows {
            s.push_str(&row.name);
            for t in 0..self.tasks.len() {
                let delta = row.delta_auc[t].map_or_else(|| "-".to_string(), |d| format!("{d:+.4}"));
                s.push_str(&format!(",{:.4},{:.4},{delta}", row.auc[t].mean, row.auprc[t].mean));
            }
            s.push('\n');
        }
        s
    }

    /// Fixed-width text rendering.
    pub fn render(&self) -> String {
        let mut s = format!("{:<18}", "");
        for t in &self.tasks {
            s.push_str(&format!("{:<32}", t));
        }
        s.push('\n');
        s.push_str(&format!("{:<18}", "component"));
        for _ in &self.tasks {
            s.push_str(&format!("{:<10} {:<10} {:<10} ", "AUC", "APR", "ΔAUC"));
        }
        s.push('\n');
        for row in &self.rows {
            s.push_str(&format!("{:<18}", row.name));
            for t in 0..self.tasks.len() {
                let delta = row.delta_auc[t].map_or_else(|| "-".to_string(), |d| format!("{d:+.4}"));
                s.push_str(&format!("{:<10.4} {:<10.4} {:<10} ", row.auc[t].mean, row.auprc[t].mean, delta));
            }
            s.push('\n');
        }
        s
    }
}

/// Per-seed output of [`ablate`].
#[derive(Debug, Clone)]
pub struct AblationRuns {
    pub table: AblationTable,
    /// `reports[r][s]`: test report of row `r` on seed `s`.
    pub reports: Vec<Vec<MetricsReport>>,
}

/// Base, +fusion and full runs per seed; the last row is the full run's
/// rectified report.
pub fn ablate(cfg: &RunConfig) -> Result<AblationRuns> {
    let plus_fusion = Components {
        mmnar_fusion: true,
        reconstruction: false,
    };
    let mut reports: Vec<Vec<MetricsReport>> = vec![Vec::new(); 4];
    for &seed in &cfg.seeds {
        let data = RunData::prepare(cfg, seed)?;
        let base = run_seed(cfg, &data, ModelKind::Fusion(Components::BASE), seed, false)?;
        let fusion = run_seed(cfg, &data, ModelKind::Fusion(plus_fusion), seed, false)?;
        let full = run_seed(cfg, &data, ModelKind::Fusion(Components::FULL), seed, true)?;
        reports[0].push(base.unrectified);
        reports[1].push(fusion.unrectified);
        reports[2].push(full.unrectified);
        reports[3].push(full.rectified.expect("rectifier requested"));
    }
    Ok(AblationRuns {
        table: AblationTable::from_reports(&reports)?,
        reports,
    })
}

/// Hyperparameters [`set_hyperparameter`] understands.
pub const SWEEPABLE: [&str; 12] = [
    "dropout",
    "learning_rate",
    "weight_decay",
    "batch_size",
    "embed_dim",
    "miss_dim",
    "heads",
    "lambda_miss",
    "lambda_rec",
    "lambda_cont",
    "tau_cont",
    "min_support",
];

pub fn set_hyperparameter(cfg: &mut RunConfig, name: &str, value: f64) -> Result<()> {
    let as_count = || -> Result<usize> {
        if value >= 0.0 && value.fract() == 0.0 {
            Ok(value as usize)
        } else {
            Err(Error::Config(format!("{name} needs a non-negative integer, got {value}")))
        }
    };
    match name {
        "dropout" => cfg.model.dropout = value,
        "learning_rate" => cfg.training.learning_rate = value,
        "weight_decay" => cfg.training.weight_decay = value,
        "batch_size" => cfg.training.batch_size = as_count()?,
        "embed_dim" => cfg.model.embed_dim = as_count()?,
        "miss_dim" => cfg.model.miss_dim = as_count()?,
        "heads" => cfg.model.heads = as_count()?,
        "lambda_miss" => cfg.model.lambda_miss = value,
        "lambda_rec" => cfg.model.recon.lambda_rec = value,
        "lambda_cont" => cfg.model.recon.lambda_cont = value,
        "tau_cont" => cfg.model.recon.tau_cont = value,
        "min_support" => cfg.rectifier.min_support = as_count()?,
        other => {
            return Err(Error::Config(format!(
                "unknown hyperparameter {other:?}; expected one of {}",
                SWEEPABLE.join(", ")
            )))
        }
    }
    cfg.validate()
}

/// Default grid for a named hyperparameter.
pub fn default_grid(name: &str) -> Option<Vec<f64>> {
    Some(match name {
        "dropout" => vec![0.1, 0.2, 0.3, 0.4, 0.5],
        "learning_rate" => vec![1e-4, 2e-4, 5e-4, 1e-3],
        "weight_decay" => vec![0.0, 1e-6, 1e-5, 1e-4],
        "batch_size" => vec![16.0, 32.0, 64.0],
        "embed_dim" => vec![32.0, 64.0, 128.0],
        "lambda_miss" => vec![0.1, 0.25, 0.5, 1.0],
        "lambda_cont" => vec![0.1, 0.3, 0.5, 1.0],
        "tau_cont" => vec![0.05, 0.1, 0.15, 0.3],
        _ => return None,
    })
}

/// One sweep point: the aggregate over the configured seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: f64,
    pub aggregate: Aggregate,
}

pub fn sweep(cfg: &RunConfig, name: &str, values: &[f64]) -> Result<Vec<SweepPoint>> {
    let mut out = Vec::with_capacity(values.len());
    for &value in values {
        let mut point_cfg = cfg.clone();
        set_hyperparameter(&mut point_cfg, name, value)?;
        let runs = cfg
            .seeds
            .iter()
            .map(|&seed| train_seed(&point_cfg, seed))
            .collect::<Result<Vec<_>>>()?;
        let reports: Vec<&MetricsReport> = runs.iter().map(SeedRun::final_report).collect();
        out.push(SweepPoint {
            value,
            aggregate: Aggregate::of(&reports)?,
        });
    }
    Ok(out)
}

/// One row per grid value, with per-task AUC mean and sd.
pub fn sweep_csv(name: &str, points: &[SweepPoint]) -> String {
    let mut s = String::from("parameter,value");
    if let Some(p) = points.first() {
        for t in &p.aggregate.tasks {
            s.push_str(&format!(",{t}_auc_mean,{t}_auc_sd,{t}_brier_mean"));
        }
    }
    s.push('\n');
    for p in points {
        s.push_str(&format!("{name},{}", p.value));
        for t in 0..p.aggregate.tasks.len() {
            s.push_str(&format!(
                ",{:.6},{:.6},{:.6}",
                p.aggregate.auc[t].mean, p.aggregate.auc[t].sd, p.aggregate.brier[t].mean
            ));
        }
        s.push('\n');
    }
    s
}
