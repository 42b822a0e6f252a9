use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::PatientRecord;
use crate::error::{Error, Result};
use crate::kernel::{softplus, AdamW, AdamWConfig, Graph, KernelError, ParamStore, Tensor, Var};
use crate::model::{Batch, ForwardOptions, FusionModel, Schema};

use super::config::TrainConfig;

/// Which losses a training step optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    /// `L_miss + L_rep + L_pred`.
    Total,
    /// `L_miss + L_rep` only.
    SelfSupervised,
}

/// Loss nodes of one training step.
#[derive(Debug, Clone, Copy)]
pub struct StepLosses {
    pub total: Var,
    pub pred: Var,
    pub miss: Option<Var>,
    pub rep: Option<Var>,
}

/// Anything the training loop can fit.
pub trait Predictor {
    fn schema(&self) -> &Schema;
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
    fn task_weights(&self) -> &[f64];
    /// Whether [`Objective::SelfSupervised`] has anything to optimize.
    fn has_self_supervision(&self) -> bool;
    fn step_losses(&self, g: &mut Graph, batch: &Batch, opts: ForwardOptions, objective: Objective) -> Result<StepLosses>;
    /// Eval-mode logits `[n, T]`.
    fn logits(&self, batch: &Batch) -> Result<Tensor>;
}

impl Predictor for FusionModel {
    fn schema(&self) -> &Schema {
        FusionModel::schema(self)
    }

    fn params(&self) -> &ParamStore {
        FusionModel::params(self)
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        FusionModel::params_mut(self)
    }

    fn task_weights(&self) -> &[f64] {
        &self.config().task_weights
    }

    fn has_self_supervision(&self) -> bool {
        let c = self.components();
        c.mmnar_fusion || c.reconstruction
    }

    fn step_losses(&self, g: &mut Graph, batch: &Batch, opts: ForwardOptions, objective: Objective) -> Result<StepLosses> {
        let f = self.forward(g, batch, ForwardOptions { losses: true, ..opts })?;
        let l = f.losses.expect("losses requested");
        let total = match objective {
            Objective::Total => l.total,
            Objective::SelfSupervised => match (l.miss, l.rep) {
                (Some(a), Some(b)) => g.add(a, b)?,
                (Some(a), None) | (None, Some(a)) => a,
                (None, None) => return Err(Error::Config("no self-supervised loss in this model".into())),
            },
        };
        Ok(StepLosses {
            total,
            pred: l.pred,
            miss: l.miss,
            rep: l.rep,
        })
    }

    fn logits(&self, batch: &Batch) -> Result<Tensor> {
        Ok(self.outputs(batch)?.logits)
    }
}

/// One row of the training curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub pretrain: bool,
    pub train_total: f64,
    pub train_pred: f64,
    pub train_miss: f64,
    pub train_rep: f64,
    pub val_pred: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub curve: Vec<EpochStats>,
    /// Epoch (1-based, end-to-end phase) whose parameters were kept.
    pub best_epoch: usize,
    pub best_val_pred: f64,
    pub stopped_early: bool,
}

impl FitReport {
    pub fn curve_csv(&self) -> String {
        let mut s = String::from("epoch,phase,train_total,train_pred,train_miss,train_rep,val_pred\n");
        for e in &self.curve {
            s.push_str(&format!(
                "{},{},{:.9},{:.9},{:.9},{:.9},{:.9}\n",
                e.epoch,
                if e.pretrain { "pretrain" } else { "train" },
                e.train_total,
                e.train_pred,
                e.train_miss,
                e.train_rep,
                e.val_pred
            ));
        }
        s
    }
}

/// SplitMix64 finalizer, used to derive independent sub-seeds.
pub fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Eval-mode logits for a list of records, scored in chunks.
pub fn logits_for<P: Predictor>(model: &P, records: &[&PatientRecord], chunk: usize) -> Result<Tensor> {
    let t = model.schema().num_tasks();
    let mut data = Vec::with_capacity(records.len() * t);
    for part in records.chunks(chunk.max(1)) {
        let batch = Batch::from_records(part, model.schema())?;
        data.extend(model.logits(&batch)?.into_data());
    }
    Ok(Tensor::matrix(records.len(), t, data))
}

/// `Σ_t λ_t · mean_i BCE` computed from logits.
pub fn weighted_bce(logits: &Tensor, labels: &Tensor, weights: &[f64]) -> f64 {
    let n = logits.rows() as f64;
    let mut total = 0.0;
    for i in 0..logits.rows() {
        for (t, w) in weights.iter().enumerate() {
            let (x, y) = (logits.get(i, t), labels.get(i, t));
            total += w * (y * softplus(-x) + (1.0 - y) * softplus(x)) / n;
        }
    }
    total
}

fn labels_of(records: &[&PatientRecord], tasks: usize) -> Tensor {
    Tensor::matrix(
        records.len(),
        tasks,
        records.iter().flat_map(|r| r.labels.iter().map(|&y| f64::from(y))).collect(),
    )
}

/// Minibatch AdamW with early stopping on validation `L_pred`. The
/// parameters of the best validation epoch are restored at the end.
pub fn fit<P: Predictor>(
    model: &mut P,
    train: &[&PatientRecord],
    val: &[&PatientRecord],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<FitReport> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::Config("training and validation splits must be non-empty".into()));
    }
    let mut opt = AdamW::new(
        AdamWConfig {
            learning_rate: cfg.learning_rate,
            weight_decay: cfg.weight_decay,
            ..AdamWConfig::default()
        },
        model.params(),
    );
    let val_labels = labels_of(val, model.schema().num_tasks());
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut curve = Vec::new();
    let pretrain = if model.has_self_supervision() { cfg.pretrain_epochs } else { 0 };
    let mut best = (f64::INFINITY, 0usize, model.params().clone());
    let mut since_best = 0;
    let mut stopped_early = false;

    for epoch in 1..=pretrain + cfg.max_epochs {
        let phase_pretrain = epoch <= pretrain;
        let objective = if phase_pretrain { Objective::SelfSupervised } else { Objective::Total };
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(seed, epoch as u64, 0)));
        let mut sums = [0.0; 4];
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let records: Vec<&PatientRecord> = idx.iter().map(|&i| train[i]).collect();
            let batch = Batch::from_records(&records, model.schema())?;
            let opts = ForwardOptions {
                train: true,
                seed: mix_seed(seed, epoch as u64, b as u64 + 1),
                losses: true,
            };
            let mut g = Graph::new();
            let losses = model.step_losses(&mut g, &batch, opts, objective)?;
            let total = g.value(losses.total).item();
            if !total.is_finite() {
                return Err(Error::Diverged { epoch, batch: b, loss: total });
            }
            let weight = records.len() as f64;
            sums[0] += total * weight;
            sums[1] += g.value(losses.pred).item() * weight;
            sums[2] += losses.miss.map_or(0.0, |v| g.value(v).item()) * weight;
            sums[3] += losses.rep.map_or(0.0, |v| g.value(v).item()) * weight;
            let grads = g.backward(losses.total)?.dense(model.params());
            opt.step(model.params_mut(), &grads).map_err(|e| match e {
                KernelError::NonFiniteGradient(name) => {
                    log::warn!("non-finite gradient in {name}");
                    Error::Diverged { epoch, batch: b, loss: total }
                }
                other => other.into(),
            })?;
        }
        let n = train.len() as f64;
        let val_pred = weighted_bce(&logits_for(model, val, cfg.eval_chunk)?, &val_labels, model.task_weights());
        if !val_pred.is_finite() {
            return Err(Error::Diverged { epoch, batch: 0, loss: val_pred });
        }
        curve.push(EpochStats {
            epoch,
            pretrain: phase_pretrain,
            train_total: sums[0] / n,
            train_pred: sums[1] / n,
            train_miss: sums[2] / n,
            train_rep: sums[3] / n,
            val_pred,
        });
        log::debug!("epoch {epoch}: train {:.5}, val pred {val_pred:.5}", sums[0] / n);
        if phase_pretrain {
            continue;
        }
        if val_pred < best.0 {
            best = (val_pred, epoch - pretrain, model.params().clone());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                stopped_early = true;
                break;
            }
        }
    }
    model.params_mut().copy_from(&best.2)?;
    Ok(FitReport {
        curve,
        best_epoch: best.1,
        best_val_pred: best.0,
        stopped_early,
    })
}
