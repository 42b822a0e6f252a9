//! On-disk run artifacts. Every file is written to a temporary sibling and
//! renamed into place.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datagen::Dataset;
use crate::error::{Error, Result};
use crate::kernel::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::metrics::MetricsReport;
use crate::model::Schema;
use crate::outcome::RectifierTable;

use super::config::RunConfig;
use super::experiments::{Aggregate, ModelKind, RunData, SeedRun, TrainedModel};
use super::baseline::BaselineKind;
use super::train::{FitReport, Predictor};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const MODEL_FILE: &str = "model.json";
pub const RECTIFIER_FILE: &str = "rectifier.tsv";
pub const METRICS_JSON: &str = "metrics.json";
pub const METRICS_CSV: &str = "metrics.csv";
pub const CURVE_CSV: &str = "curve.csv";
pub const TEST_DATA: &str = "test.jsonl";
pub const CONFIG_FILE: &str = "config.toml";
pub const AGGREGATE_CSV: &str = "aggregate.csv";
pub const AGGREGATE_JSON: &str = "aggregate.json";

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// What a checkpoint was trained as, so it can be rebuilt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub model: ModelKind,
    pub seed: u64,
    pub config_hash: String,
    pub schema: Schema,
    /// Imputation values of a mean-impute baseline.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fill: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub model: String,
    pub seed: u64,
    pub config_hash: String,
    pub best_epoch: usize,
    pub best_val_pred: f64,
    pub epochs_run: usize,
    pub stopped_early: bool,
    pub kappa: Option<f64>,
    pub kappa_scores: Vec<(f64, f64)>,
    pub rectifier_applied_fraction: Option<f64>,
    pub unrectified: MetricsReport,
    pub rectified: Option<MetricsReport>,
}

impl RunSummary {
    pub fn of(run: &SeedRun) -> Self {
        let fit: &FitReport = &run.fit;
        Self {
            model: run.kind.label(),
            seed: run.seed,
            config_hash: run.unrectified.config_hash.clone(),
            best_epoch: fit.best_epoch,
            best_val_pred: fit.best_val_pred,
            epochs_run: fit.curve.len(),
            stopped_early: fit.stopped_early,
            kappa: run.rectifier.as_ref().map(|r| r.table.kappa),
            kappa_scores: run.rectifier.as_ref().map(|r| r.kappa_scores.clone()).unwrap_or_default(),
            rectifier_applied_fraction: run.rectifier.as_ref().map(|r| r.table.applied_fraction()),
            unrectified: run.unrectified.clone(),
            rectified: run.rectified.clone(),
        }
    }

    /// Unrectified rows first, then rectified ones.
    pub fn metrics_csv(&self) -> String {
        let mut reports = vec![&self.unrectified];
        reports.extend(self.rectified.as_ref());
        MetricsReport::to_csv(&reports)
    }
}

pub fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed-{seed}"))
}

fn to_json<T: Serialize>(value: &T) -> Vec<u8> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("artifact serializes");
    bytes.push(b'\n');
    bytes
}

/// Writes checkpoint, model metadata, rectifier table, metrics, curve and
/// the test split of one seed into `dir`.
pub fn write_seed_run(dir: &Path, cfg: &RunConfig, run: &SeedRun, data: &RunData) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let hash = cfg.hash();
    let (store, fill) = match &run.model {
        TrainedModel::Fusion(m) => (m.params(), None),
        TrainedModel::Baseline(m) => (
            Predictor::params(m),
            (m.kind() == BaselineKind::MeanImpute).then(|| m.fill_values().to_vec()),
        ),
    };
    save_checkpoint(&dir.join(CHECKPOINT_FILE), store, &hash)?;
    let meta = ModelMeta {
        model: run.kind,
        seed: run.seed,
        config_hash: hash.clone(),
        schema: Schema::of(&data.dataset),
        fill,
    };
    write_atomic(&dir.join(MODEL_FILE), &to_json(&meta))?;
    if let Some(r) = &run.rectifier {
        write_atomic(&dir.join(RECTIFIER_FILE), r.table.to_tsv().as_bytes())?;
    }
    let summary = RunSummary::of(run);
    write_atomic(&dir.join(METRICS_JSON), &to_json(&summary))?;
    write_atomic(&dir.join(METRICS_CSV), summary.metrics_csv().as_bytes())?;
    write_atomic(&dir.join(CURVE_CSV), run.fit.curve_csv().as_bytes())?;
    let mut test = data.dataset.subset(&data.split.test);
    test.strip_oracle();
    test.save(&dir.join(TEST_DATA), false)?;
    Ok(())
}

pub fn write_config(out: &Path, cfg: &RunConfig) -> Result<()> {
    let text = format!("# config hash {}\n{}", cfg.hash(), cfg.to_toml());
    write_atomic(&out.join(CONFIG_FILE), text.as_bytes())
}

pub fn write_aggregate(out: &Path, reports: &[&MetricsReport]) -> Result<Aggregate> {
    let agg = Aggregate::of(reports)?;
    write_atomic(&out.join(AGGREGATE_CSV), agg.to_csv().as_bytes())?;
    write_atomic(&out.join(AGGREGATE_JSON), &to_json(&agg))?;
    Ok(agg)
}

/// Rebuilds a trained model from `checkpoint.bin` and the `model.json` next
/// to it. A config hash differing from the checkpoint's is an error unless
/// `force` is set.
pub fn load_model(checkpoint: &Path, cfg: &RunConfig, force: bool) -> Result<(TrainedModel, ModelMeta)> {
    let dir = checkpoint.parent().unwrap_or(Path::new("."));
    let meta: ModelMeta = serde_json::from_slice(&std::fs::read(dir.join(MODEL_FILE))?).map_err(|e| Error::Format {
        what: "model metadata",
        reason: e.to_string(),
    })?;
    let ckpt: Checkpoint = load_checkpoint(checkpoint)?;
    let found = cfg.hash();
    if ckpt.config_hash != found {
        if !force {
            return Err(Error::ConfigHashMismatch {
                expected: ckpt.config_hash,
                found,
            });
        }
        log::warn!("config hash {found} differs from checkpoint's {}; continuing", ckpt.config_hash);
    }
    let mut model = TrainedModel::build(meta.model, cfg, &meta.schema, &[], meta.seed)?;
    match &mut model {
        TrainedModel::Fusion(m) => ckpt.restore_into(m.params_mut())?,
        TrainedModel::Baseline(m) => {
            ckpt.restore_into(Predictor::params_mut(m))?;
            if let Some(fill) = &meta.fill {
                m.set_fill_values(fill.clone())?;
            }
        }
    }
    Ok((model, meta))
}

pub fn load_rectifier(path: &Path) -> Result<RectifierTable> {
    RectifierTable::from_tsv(&std::fs::read_to_string(path)?)
}

/// Test split saved by a training run.
pub fn load_test_data(dir: &Path) -> Result<Dataset> {
    Ok(Dataset::load(&dir.join(TEST_DATA))?)
}
