//! Imputation baselines: fill missing modalities, concatenate, predict.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::PatientRecord;
use crate::error::{Error, Result};
use crate::fusion::dropout_mask;
use crate::kernel::{Graph, Init, ParamId, ParamStore, Tensor, Var};
use crate::model::{Batch, ForwardOptions, ModelConfig, Schema};
use crate::outcome::{pred_loss, TaskHeads};

use super::train::{Objective, Predictor, StepLosses};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    /// Zeros for missing features, with the mask bits appended.
    ZeroFill,
    /// Training-set feature means for missing features.
    MeanImpute,
}

impl BaselineKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::ZeroFill => "zero_fill",
            Self::MeanImpute => "mean_impute",
        }
    }
}

impl std::str::FromStr for BaselineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zero_fill" => Ok(Self::ZeroFill),
            "mean_impute" => Ok(Self::MeanImpute),
            other => Err(Error::Config(format!("unknown baseline kind {other:?}"))),
        }
    }
}

/// Concatenation MLP over imputed raw features.
#[derive(Debug, Clone)]
pub struct ImputationBaseline {
    kind: BaselineKind,
    schema: Schema,
    config: ModelConfig,
    /// Per-modality fill values.
    fill: Vec<Vec<f64>>,
    store: ParamStore,
    layers: [ParamId; 4],
    heads: TaskHeads,
}

impl ImputationBaseline {
    /// `train` supplies the imputation means; it is ignored for zero fill.
    pub fn new(
        kind: BaselineKind,
        schema: &Schema,
        config: &ModelConfig,
        train: &[&PatientRecord],
        seed: u64,
    ) -> Result<Self> {
        config.validate(schema)?;
        let fill = match kind {
            BaselineKind::ZeroFill => schema.dims.iter().map(|&d| vec![0.0; d]).collect(),
            BaselineKind::MeanImpute => feature_means(schema, train)?,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut width: usize = schema.dims.iter().sum();
        if kind == BaselineKind::ZeroFill {
            width += schema.num_modalities();
        }
        let (hidden, d) = (config.encoder_hidden, config.embed_dim);
        let layers = [
            store.add_init("base.w1", width, hidden, Init::Glorot, &mut rng),
            store.add_init("base.b1", 1, hidden, Init::Zeros, &mut rng),
            store.add_init("base.w2", hidden, d, Init::Glorot, &mut rng),
            store.add_init("base.b2", 1, d, Init::Zeros, &mut rng),
        ];
        let heads = TaskHeads::new(&mut store, &schema.tasks, d, config.head_hidden, &mut rng);
        Ok(Self {
            kind,
            schema: schema.clone(),
            config: config.clone(),
            fill,
            store,
            layers,
            heads,
        })
    }

    pub fn kind(&self) -> BaselineKind {
        self.kind
    }

    pub fn fill_values(&self) -> &[Vec<f64>] {
        &self.fill
    }

    /// Replaces the fill values, e.g. with means saved alongside a checkpoint.
    pub fn set_fill_values(&mut self, fill: Vec<Vec<f64>>) -> Result<()> {
        let shapes_match = fill.len() == self.schema.dims.len()
            && fill.iter().zip(&self.schema.dims).all(|(f, &d)| f.len() == d);
        if !shapes_match {
            return Err(Error::Config("fill values do not match the schema".into()));
        }
        self.fill = fill;
        Ok(())
    }

    /// The imputed design matrix `[n, width]`.
    pub fn inputs(&self, batch: &Batch) -> Tensor {
        let (dense, masks, _) = batch.to_dense(&self.schema.dims);
        let rows: Vec<Vec<f64>> = (0..batch.len())
            .map(|i| {
                let mut row = Vec::new();
                for (m, block) in dense.iter().enumerate() {
                    if masks[i].observed(m) {
                        row.extend_from_slice(block.row(i));
                    } else {
                        row.extend_from_slice(&self.fill[m]);
                    }
                }
                if self.kind == BaselineKind::ZeroFill {
                    row.extend(masks[i].to_floats());
                }
                row
            })
            .collect();
        Tensor::from_rows(&rows)
    }

    fn forward(&self, g: &mut Graph, batch: &Batch, opts: ForwardOptions) -> Result<Var> {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let x = g.constant(self.inputs(batch));
        let [w1, b1, w2, b2] = self.layers.map(|p| g.param(&self.store, p));
        let hid = g.linear(x, w1, b1)?;
        let hid = g.relu(hid);
        let h = g.linear(hid, w2, b2)?;
        let mut h = g.relu(h);
        let p = self.config.dropout;
        if opts.train && p > 0.0 {
            h = g.mul_const(h, dropout_mask(batch.len(), self.config.embed_dim, p, &mut rng))?;
            Ok(self.heads.logits(g, &self.store, h, Some((p, &mut rng)))?)
        } else {
            Ok(self.heads.logits::<ChaCha8Rng>(g, &self.store, h, None)?)
        }
    }
}

fn feature_means(schema: &Schema, train: &[&PatientRecord]) -> Result<Vec<Vec<f64>>> {
    let mut sums: Vec<Vec<f64>> = schema.dims.iter().map(|&d| vec![0.0; d]).collect();
    let mut counts = vec![0usize; schema.num_modalities()];
    for r in train {
        r.check(&schema.dims)?;
        for (m, f) in r.features.iter().enumerate() {
            if let Some(x) = f {
                counts[m] += 1;
                sums[m].iter_mut().zip(x).for_each(|(s, v)| *s += v);
            }
        }
    }
    for (m, s) in sums.iter_mut().enumerate() {
        if counts[m] == 0 {
            if train.is_empty() {
                continue;
            }
            log::warn!("modality {} never observed in training data; imputing zeros", schema.modalities[m]);
            continue;
        }
        s.iter_mut().for_each(|v| *v /= counts[m] as f64);
    }
    Ok(sums)
}

impl Predictor for ImputationBaseline {
    fn schema(&self) -> &Schema {
        &self.schema
    }

    fn params(&self) -> &ParamStore {
        &self.store
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn task_weights(&self) -> &[f64] {
        &self.config.task_weights
    }

    fn has_self_supervision(&self) -> bool {
        false
    }

    fn step_losses(&self, g: &mut Graph, batch: &Batch, opts: ForwardOptions, objective: Objective) -> Result<StepLosses> {
        if objective == Objective::SelfSupervised {
            return Err(Error::Config("imputation baselines have no self-supervised loss".into()));
        }
        let logits = self.forward(g, batch, opts)?;
        let pred = pred_loss(g, logits, &batch.labels, &self.config.task_weights, self.config.focal_gamma)?;
        Ok(StepLosses {
            total: pred,
            pred,
            miss: None,
            rep: None,
        })
    }

    fn logits(&self, batch: &Batch) -> Result<Tensor> {
        let mut g = Graph::new();
        let logits = self.forward(&mut g, batch, ForwardOptions::eval())?;
        Ok(g.value(logits).clone())
    }
}
