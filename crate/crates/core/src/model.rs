//! Batches and the composed fusion model.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{DataError, Dataset, Pattern, PatientRecord};
use crate::encoders::EncoderSet;
use crate::error::{Error, Result};
use crate::fusion::{dropout_mask, ConcatFusion, FusionCore, GateBank, MissingnessNet};
use crate::kernel::{sigmoid, Graph, ParamStore, Tensor, Var};
use crate::outcome::{pred_loss, TaskHeads, DEFAULT_TASK_WEIGHTS};
use crate::reconstruction::{contrastive_loss, leave_one_out, recon_loss, rep_loss, DecoderBank, ModalityRep, ReconLossConfig};

/// Modality names, feature widths and task names shared by data and model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema {
    pub modalities: Vec<String>,
    pub dims: Vec<usize>,
    pub tasks: Vec<String>,
}

impl Schema {
    pub fn of(ds: &Dataset) -> Self {
        Self {
            modalities: ds.modalities.clone(),
            dims: ds.dims.clone(),
            tasks: ds.tasks.clone(),
        }
    }

    pub fn num_modalities(&self) -> usize {
        self.modalities.len()
    }

    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }
}

/// Features of one modality for the patients that observe it.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityBlock {
    /// Batch positions of the observing patients, ascending.
    pub rows: Vec<usize>,
    /// `[rows.len(), dim]`, or `None` when no patient observes the modality.
    pub features: Option<Tensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub masks: Vec<Pattern>,
    /// `[n, T]` labels in {0, 1}.
    pub labels: Tensor,
    pub modalities: Vec<ModalityBlock>,
}

impl Batch {
    pub fn from_records(records: &[&PatientRecord], schema: &Schema) -> Result<Self, DataError> {
        let m_count = schema.num_modalities();
        let t_count = schema.num_tasks();
        let mut labels = Vec::with_capacity(records.len() * t_count);
        let mut blocks: Vec<(Vec<usize>, Vec<f64>)> = vec![(Vec::new(), Vec::new()); m_count];
        for (i, r) in records.iter().enumerate() {
            if r.features.len() != m_count || r.labels.len() != t_count {
                return Err(DataError::InconsistentRecord {
                    id: r.id,
                    reason: format!(
                        "{} modalities and {} labels, expected {m_count} and {t_count}",
                        r.features.len(),
                        r.labels.len()
                    ),
                });
            }
            labels.extend(r.labels.iter().map(|&y| f64::from(y)));
            for (m, f) in r.features.iter().enumerate() {
                if f.is_some() != r.mask.observed(m) {
                    return Err(DataError::InconsistentRecord {
                        id: r.id,
                        reason: format!("mask bit {m} disagrees with feature presence"),
                    });
                }
                if let Some(x) = f {
                    if x.len() != schema.dims[m] {
                        return Err(DataError::FeatureDim {
                            modality: schema.modalities[m].clone(),
                            expected: schema.dims[m],
                            found: x.len(),
                        });
                    }
                    blocks[m].0.push(i);
                    blocks[m].1.extend_from_slice(x);
                }
            }
        }
        Ok(Self {
            masks: records.iter().map(|r| r.mask).collect(),
            labels: Tensor::matrix(records.len(), t_count, labels),
            modalities: blocks
                .into_iter()
                .zip(&schema.dims)
                .map(|((rows, data), &dim)| ModalityBlock {
                    features: (!rows.is_empty()).then(|| Tensor::matrix(rows.len(), dim, data)),
                    rows,
                })
                .collect(),
        })
    }

    /// Builds a batch from full `[n, dim_m]` matrices. Rows of patients that
    /// do not observe a modality are never read.
    pub fn from_dense(dense: &[Tensor], masks: &[Pattern], labels: Tensor) -> Result<Self, DataError> {
        let n = masks.len();
        if labels.rows() != n || dense.iter().any(|t| t.rows() != n) {
            return Err(DataError::InvalidConfig(format!(
                "dense batch needs {n} rows in every block and in the labels"
            )));
        }
        let modalities = dense
            .iter()
            .enumerate()
            .map(|(m, t)| {
                let rows: Vec<usize> = (0..n).filter(|&i| masks[i].observed(m)).collect();
                let data: Vec<f64> = rows.iter().flat_map(|&i| t.row(i).iter().copied()).collect();
                ModalityBlock {
                    features: (!rows.is_empty()).then(|| Tensor::matrix(rows.len(), t.cols(), data)),
                    rows,
                }
            })
            .collect();
        Ok(Self {
            masks: masks.to_vec(),
            labels,
            modalities,
        })
    }

    /// Full matrices with zero rows for missing modalities.
    pub fn to_dense(&self, dims: &[usize]) -> (Vec<Tensor>, Vec<Pattern>, Tensor) {
        let n = self.len();
        let dense = self
            .modalities
            .iter()
            .zip(dims)
            .map(|(b, &dim)| {
                let mut t = Tensor::zeros(n, dim);
                if let Some(f) = &b.features {
                    for (j, &i) in b.rows.iter().enumerate() {
                        t.row_mut(i).copy_from_slice(f.row(j));
                    }
                }
                t
            })
            .collect();
        (dense, self.masks.clone(), self.labels.clone())
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    /// `[n, M]` matrix of mask bits.
    pub fn mask_matrix(&self) -> Tensor {
        let rows: Vec<Vec<f64>> = self.masks.iter().map(Pattern::to_floats).collect();
        Tensor::from_rows(&rows)
    }

    /// Patient-major slot mask of length `n·M`.
    pub fn slot_mask(&self) -> Vec<bool> {
        self.masks.iter().flat_map(Pattern::to_bools).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub encoder_hidden: usize,
    pub miss_dim: usize,
    pub miss_hidden: usize,
    pub heads: usize,
    pub decoder_hidden: usize,
    pub head_hidden: usize,
    pub dropout: f64,
    pub lambda_miss: f64,
    pub recon: ReconLossConfig,
    /// One weight per task, in dataset task order.
    pub task_weights: Vec<f64>,
    /// Focal focusing parameter; 0 is plain cross-entropy.
    pub focal_gamma: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed_dim: 128,
            encoder_hidden: 128,
            miss_dim: 32,
            miss_hidden: 32,
            heads: 4,
            decoder_hidden: 128,
            head_hidden: 64,
            dropout: 0.2,
            lambda_miss: 0.5,
            recon: ReconLossConfig::default(),
            task_weights: DEFAULT_TASK_WEIGHTS.to_vec(),
            focal_gamma: 0.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self, schema: &Schema) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.embed_dim == 0 || self.encoder_hidden == 0 || self.miss_dim == 0 || self.head_hidden == 0 {
            return bad("layer widths must be positive".into());
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return bad(format!("embed_dim {} is not divisible by {} heads", self.embed_dim, self.heads));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(self.recon.tau_cont > 0.0) {
            return bad(format!("tau_cont must be positive, got {}", self.recon.tau_cont));
        }
        if self.task_weights.len() != schema.num_tasks() {
            return bad(format!(
                "{} task weights for {} tasks",
                self.task_weights.len(),
                schema.num_tasks()
            ));
        }
        if schema.num_modalities() == 0 || schema.dims.len() != schema.num_modalities() {
            return bad("schema needs at least one modality with a width".into());
        }
        Ok(())
    }
}

/// Which optional stages are switched on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Components {
    /// Missingness embedding, gates and attention fusion; plain
    /// concatenation otherwise.
    pub mmnar_fusion: bool,
    /// Leave-one-out reconstruction and contrastive alignment.
    pub reconstruction: bool,
}

impl Components {
    pub const FULL: Self = Self {
        mmnar_fusion: true,
        reconstruction: true,
    };
    pub const BASE: Self = Self {
        mmnar_fusion: false,
        reconstruction: false,
    };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ForwardOptions {
    /// Enables dropout.
    pub train: bool,
    /// Seeds dropout masks and the choice of hidden modality.
    pub seed: u64,
    pub losses: bool,
}

impl ForwardOptions {
    pub fn eval() -> Self {
        Self {
            train: false,
            seed: 0,
            losses: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Losses {
    pub miss: Option<Var>,
    pub rep_parts: Vec<Option<ModalityRep>>,
    pub rep: Option<Var>,
    pub pred: Var,
    pub total: Var,
    /// Patients with nothing left to fuse after hiding a modality.
    pub skipped: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossValues {
    pub miss: f64,
    pub rec: Vec<f64>,
    pub cont: Vec<f64>,
    pub rep: f64,
    pub pred: f64,
    pub total: f64,
}

impl Losses {
    pub fn values(&self, g: &Graph) -> LossValues {
        let opt = |v: Option<Var>| v.map_or(0.0, |v| g.value(v).item());
        LossValues {
            miss: opt(self.miss),
            rec: self.rep_parts.iter().map(|p| opt(p.map(|p| p.rec))).collect(),
            cont: self.rep_parts.iter().map(|p| opt(p.map(|p| p.cont))).collect(),
            rep: opt(self.rep),
            pred: g.value(self.pred).item(),
            total: g.value(self.total).item(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Forward {
    pub h: Var,
    pub z: Option<Var>,
    pub logits: Var,
    pub losses: Option<Losses>,
}

/// Model outputs for a batch, detached from the graph.
#[derive(Debug, Clone, PartialEq)]
pub struct Outputs {
    pub logits: Tensor,
    pub probs: Tensor,
    pub h: Tensor,
    pub z: Option<Tensor>,
}

#[derive(Debug, Clone)]
enum Fuser {
    Mmnar {
        miss: MissingnessNet,
        gates: GateBank,
        core: FusionCore,
    },
    Concat(ConcatFusion),
}

/// Encoders, fusion, optional reconstruction decoders and task heads, with
/// their parameters.
#[derive(Debug, Clone)]
pub struct FusionModel {
    schema: Schema,
    config: ModelConfig,
    components: Components,
    store: ParamStore,
    encoders: EncoderSet,
    fuser: Fuser,
    decoders: Option<DecoderBank>,
    heads: TaskHeads,
}

impl FusionModel {
    pub fn new(schema: &Schema, config: &ModelConfig, components: Components, seed: u64) -> Result<Self> {
        config.validate(schema)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let m = schema.num_modalities();
        let d = config.embed_dim;
        let encoders = EncoderSet::new(&mut store, &schema.modalities, &schema.dims, config.encoder_hidden, d, &mut rng);
        let fuser = if components.mmnar_fusion {
            Fuser::Mmnar {
                miss: MissingnessNet::new(&mut store, m, config.miss_hidden, config.miss_dim, config.lambda_miss, &mut rng),
                gates: GateBank::new(&mut store, &schema.modalities, config.miss_dim, d, &mut rng),
                core: FusionCore::new(&mut store, m, d, config.heads, &mut rng),
            }
        } else {
            Fuser::Concat(ConcatFusion::new(&mut store, m, d, &mut rng))
        };
        let decoders = components
            .reconstruction
            .then(|| DecoderBank::new(&mut store, &schema.modalities, d, config.decoder_hidden, &mut rng));
        let heads = TaskHeads::new(&mut store, &schema.tasks, d, config.head_hidden, &mut rng);
        Ok(Self {
            schema: schema.clone(),
            config: config.clone(),
            components,
            store,
            encoders,
            fuser,
            decoders,
            heads,
        })
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn components(&self) -> Components {
        self.components
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn encoders(&self) -> &EncoderSet {
        &self.encoders
    }

    pub fn heads(&self) -> &TaskHeads {
        &self.heads
    }

    pub fn batch(&self, records: &[&PatientRecord]) -> Result<Batch> {
        Ok(Batch::from_records(records, &self.schema)?)
    }

    fn dropout(&self, rows: usize, cols: usize, opts: &ForwardOptions, rng: &mut ChaCha8Rng) -> Option<Tensor> {
        (opts.train && self.config.dropout > 0.0).then(|| dropout_mask(rows, cols, self.config.dropout, rng))
    }

    pub fn forward(&self, g: &mut Graph, batch: &Batch, opts: ForwardOptions) -> Result<Forward> {
        if batch.modalities.len() != self.schema.num_modalities() || batch.labels.cols() != self.schema.num_tasks() {
            return Err(Error::Config("batch does not match the model schema".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let n = batch.len();
        let m_count = self.schema.num_modalities();
        let d = self.config.embed_dim;
        let store = &self.store;
        let emb = self.encoders.encode(g, store, batch)?;

        let slot_mask = batch.slot_mask();
        let (h, z, miss_loss, stacked) = match &self.fuser {
            Fuser::Mmnar { miss, gates, core } => {
                let me = miss.embed(g, store, &batch.mask_matrix())?;
                let mut gated = Vec::with_capacity(m_count);
                for m in 0..m_count {
                    let present: Vec<bool> = batch.masks.iter().map(|p| p.observed(m)).collect();
                    gated.push(gates.gate(g, store, m, emb.dense[m], me.z, &present)?);
                }
                let stacked = core.stack(g, store, &gated)?;
                let drop = self.dropout(n * m_count, d, &opts, &mut rng);
                let fused = core.fuse(g, store, stacked, &slot_mask, drop)?;
                (fused.h, Some(me.z), Some(me.loss), Some(stacked))
            }
            Fuser::Concat(concat) => {
                let drop = self.dropout(n, d, &opts, &mut rng);
                (concat.fuse(g, store, &emb.dense, drop)?, None, None, None)
            }
        };

        let head_drop = (opts.train && self.config.dropout > 0.0).then_some(self.config.dropout);
        let logits = match head_drop {
            Some(p) => self.heads.logits(g, store, h, Some((p, &mut rng)))?,
            None => self.heads.logits::<ChaCha8Rng>(g, store, h, None)?,
        };
        if !opts.losses {
            return Ok(Forward { h, z, logits, losses: None });
        }

        let pred = pred_loss(g, logits, &batch.labels, &self.config.task_weights, self.config.focal_gamma)?;
        let mut rep_parts = vec![None; m_count];
        let mut skipped = 0;
        if let Some(decoders) = &self.decoders {
            let choices: Vec<Option<usize>> = batch.masks.iter().map(|&p| leave_one_out(p, &mut rng)).collect();
            skipped = choices.iter().filter(|c| c.is_none()).count();
            if choices.iter().any(Option::is_some) {
                let h_loo = match (&self.fuser, stacked) {
                    (Fuser::Mmnar { core, .. }, Some(stacked)) => {
                        let mut loo_mask = slot_mask.clone();
                        for (i, c) in choices.iter().enumerate() {
                            if let Some(m) = c {
                                loo_mask[i * m_count + m] = false;
                            }
                        }
                        let drop = self.dropout(n * m_count, d, &opts, &mut rng);
                        core.fuse(g, store, stacked, &loo_mask, drop)?.h
                    }
                    (Fuser::Concat(concat), _) => {
                        let mut dense = emb.dense.clone();
                        for (m, slot) in dense.iter_mut().enumerate() {
                            if choices.contains(&Some(m)) {
                                let keep = Tensor::matrix(
                                    n,
                                    d,
                                    choices
                                        .iter()
                                        .flat_map(|&c| std::iter::repeat_n(if c == Some(m) { 0.0 } else { 1.0 }, d))
                                        .collect(),
                                );
                                *slot = g.mul_const(*slot, keep)?;
                            }
                        }
                        let drop = self.dropout(n, d, &opts, &mut rng);
                        concat.fuse(g, store, &dense, drop)?
                    }
                    _ => unreachable!("attention fusion always stacks its slots"),
                };
                for (m, part) in rep_parts.iter_mut().enumerate() {
                    let who: Vec<usize> = (0..n).filter(|&i| choices[i] == Some(m)).collect();
                    if who.is_empty() {
                        continue;
                    }
                    let target = g.gather_rows(emb.dense[m], &who)?;
                    let source = g.gather_rows(h_loo, &who)?;
                    let recon = decoders.decode(g, store, m, source)?;
                    *part = Some(ModalityRep {
                        rec: recon_loss(g, target, recon)?,
                        cont: contrastive_loss(g, target, recon, self.config.recon.tau_cont)?,
                    });
                }
            }
        }
        let rep = rep_loss(g, &rep_parts, &self.config.recon);
        let mut total = pred;
        for extra in [miss_loss, rep].into_iter().flatten() {
            total = g.add(total, extra)?;
        }
        Ok(Forward {
            h,
            z,
            logits,
            losses: Some(Losses {
                miss: miss_loss,
                rep_parts,
                rep,
                pred,
                total,
                skipped,
            }),
        })
    }

    /// Eval-mode probabilities, representations and pattern embeddings.
    pub fn outputs(&self, batch: &Batch) -> Result<Outputs> {
        let mut g = Graph::new();
        let f = self.forward(&mut g, batch, ForwardOptions::eval())?;
        Ok(Outputs {
            logits: g.value(f.logits).clone(),
            probs: g.value(f.logits).map(sigmoid),
            h: g.value(f.h).clone(),
            z: f.z.map(|z| g.value(z).clone()),
        })
    }

    /// Outputs for a whole dataset, evaluated in chunks.
    pub fn outputs_for(&self, records: &[&PatientRecord], chunk: usize) -> Result<Outputs> {
        let mut logits = Vec::new();
        let mut probs = Vec::new();
        let mut h = Vec::new();
        let mut z: Option<Vec<f64>> = None;
        let mut zcols = 0;
        for part in records.chunks(chunk.max(1)) {
            let out = self.outputs(&self.batch(part)?)?;
            logits.extend(out.logits.into_data());
            probs.extend(out.probs.into_data());
            h.extend(out.h.into_data());
            if let Some(zt) = out.z {
                zcols = zt.cols();
                z.get_or_insert_with(Vec::new).extend(zt.into_data());
            }
        }
        let n = records.len();
        Ok(Outputs {
            logits: Tensor::matrix(n, self.schema.num_tasks(), logits),
            probs: Tensor::matrix(n, self.schema.num_tasks(), probs),
            h: Tensor::matrix(n, self.config.embed_dim, h),
            z: z.map(|z| Tensor::matrix(n, zcols, z)),
        })
    }

    /// Loss values of one batch.
    pub fn loss_values(&self, batch: &Batch, opts: ForwardOptions) -> Result<LossValues> {
        let mut g = Graph::new();
        let f = self.forward(&mut g, batch, ForwardOptions { losses: true, ..opts })?;
        Ok(f.losses.expect("losses requested").values(&g))
    }
}
