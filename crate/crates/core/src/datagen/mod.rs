//! Synthetic multimodal patient simulator.
//!
//! A latent health state `h*` drives modality contents, the clinician
//! observation pattern and the outcomes. Observation of every non-structured
//! modality depends on severity (`h*[0]`) and on the modality's own content;
//! outcomes are Bernoulli draws from a logistic model of `h*` plus an
//! additive, probability-scale pattern effect.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kernel::Tensor;

mod split;
pub use split::{kfold, split, Split};

/// Upper bound on modalities, set by the width of [`Pattern`].
pub const MAX_MODALITIES: usize = 8;

const GLOBAL_STREAM: u64 = u64::MAX;
const MAX_PROBABILITY_OVERSHOOT: f64 = 0.2;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid generator config: {0}")]
    InvalidConfig(String),
    #[error(
        "pattern effect {effect:+} on task `{task}` pushes probability {probability:.3} more than 0.2 outside [0, 1]"
    )]
    ProbabilityOutOfRange {
        task: String,
        effect: f64,
        probability: f64,
    },
    #[error("modality `{modality}`: expected {expected} features, found {found}")]
    FeatureDim {
        modality: String,
        expected: usize,
        found: usize,
    },
    #[error("record {id}: {reason}")]
    InconsistentRecord { id: u64, reason: String },
    #[error("split ratios must be non-negative and sum to 1, got {0:?}")]
    BadRatios(Vec<f64>),
    #[error("invalid pattern `{0}`")]
    BadPattern(String),
    #[error("dataset line {line}: {source}")]
    Parse {
        line: usize,
        source: serde_json::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Observation pattern δ as a bit set; bit `m` is set when modality `m` is
/// observed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Pattern {
    bits: u8,
    len: u8,
}

impl Pattern {
    pub fn from_bools(observed: &[bool]) -> Self {
        assert!(observed.len() <= MAX_MODALITIES);
        let bits = observed
            .iter()
            .enumerate()
            .fold(0u8, |acc, (m, &o)| if o { acc | (1 << m) } else { acc });
        Self {
            bits,
            len: observed.len() as u8,
        }
    }

    pub fn observed(&self, m: usize) -> bool {
        self.bits & (1 << m) != 0
    }

    pub fn len(&self) -> usize {
        self.len as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn count(&self) -> usize {
        self.bits.count_ones() as usize
    }

    pub fn without(&self, m: usize) -> Self {
        Self {
            bits: self.bits & !(1 << m),
            len: self.len,
        }
    }

    pub fn to_bools(&self) -> Vec<bool> {
        (0..self.len()).map(|m| self.observed(m)).collect()
    }

    pub fn to_floats(&self) -> Vec<f64> {
        (0..self.len()).map(|m| if self.observed(m) { 1.0 } else { 0.0 }).collect()
    }

    /// Dense index in `0..2^len` (bit `m` = modality `m`).
    pub fn index(&self) -> usize {
        self.bits as usize
    }

    pub fn all(len: usize) -> impl Iterator<Item = Pattern> {
        (0..(1u16 << len)).map(move |bits| Pattern {
            bits: bits as u8,
            len: len as u8,
        })
    }
}

/// Renders as a bit string in modality order, e.g. `1101`.
impl fmt::Display for Pattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for m in 0..self.len() {
            f.write_str(if self.observed(m) { "1" } else { "0" })?;
        }
        Ok(())
    }
}

impl FromStr for Pattern {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.is_empty() || s.len() > MAX_MODALITIES {
            return Err(DataError::BadPattern(s.to_string()));
        }
        let bools = s
            .chars()
            .map(|c| match c {
                '1' => Ok(true),
                '0' => Ok(false),
                _ => Err(DataError::BadPattern(s.to_string())),
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Pattern::from_bools(&bools))
    }
}

impl Serialize for Pattern {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Pattern {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum MissingMode {
    #[default]
    Mnar,
    Mcar,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModalitySpec {
    pub name: String,
    pub dim: usize,
    /// Observation intercept `c_m`.
    pub intercept: f64,
    /// Weight `w_m` of severity on the observation logit.
    pub severity_weight: f64,
    /// Weight `u_m` of the modality's own content on the observation logit.
    pub content_weight: f64,
    pub noise: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub name: String,
    /// Outcome intercept `b_t`.
    pub intercept: f64,
    /// Outcome coefficients `v_t`, one per latent coordinate.
    pub coefficients: Vec<f64>,
}

/// Planted probability-scale effect of one pattern on one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatternEffect {
    pub pattern: Pattern,
    pub task: String,
    pub effect: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub n_patients: usize,
    pub latent_dim: usize,
    pub mode: MissingMode,
    pub seed: u64,
    pub modalities: Vec<ModalitySpec>,
    pub tasks: Vec<TaskSpec>,
    pub pattern_effects: Vec<PatternEffect>,
}

impl Default for GenConfig {
    fn default() -> Self {
        let modality = |name: &str, dim, intercept, severity_weight, content_weight| ModalitySpec {
            name: name.to_string(),
            dim,
            intercept,
            severity_weight,
            content_weight,
            noise: 0.5,
        };
        let task = |name: &str, intercept, coefficients: [f64; 8]| TaskSpec {
            name: name.to_string(),
            intercept,
            coefficients: coefficients.to_vec(),
        };
        Self {
            n_patients: 5_000,
            latent_dim: 8,
            mode: MissingMode::Mnar,
            seed: 0,
            modalities: vec![
                modality("S", 32, 0.0, 0.0, 0.0),
                modality("I", 64, 0.4, 1.0, 0.5),
                modality("T", 48, 0.0, 0.8, 0.5),
                modality("R", 40, 1.1, 0.8, 0.5),
            ],
            tasks: vec![
                task("readmission", -1.4, [1.0, 0.6, -0.4, 0.0, 0.3, 0.0, 0.0, 0.0]),
                task("icu", -1.8, [1.2, 0.0, 0.5, -0.5, 0.0, 0.3, 0.0, 0.0]),
                task("mortality", -2.4, [1.4, 0.0, 0.0, 0.4, 0.0, 0.0, -0.5, 0.3]),
            ],
            pattern_effects: vec![PatternEffect {
                pattern: "1101".parse().unwrap(),
                task: "readmission".to_string(),
                effect: 0.08,
            }],
        }
    }
}

impl GenConfig {
    pub fn num_modalities(&self) -> usize {
        self.modalities.len()
    }

    pub fn modality_names(&self) -> Vec<String> {
        self.modalities.iter().map(|m| m.name.clone()).collect()
    }

    pub fn task_names(&self) -> Vec<String> {
        self.tasks.iter().map(|t| t.name.clone()).collect()
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |msg: String| Err(DataError::InvalidConfig(msg));
        if self.n_patients == 0 {
            return bad("n_patients must be positive".into());
        }
        if self.latent_dim == 0 {
            return bad("latent_dim must be positive".into());
        }
        if self.modalities.is_empty() || self.modalities.len() > MAX_MODALITIES {
            return bad(format!("between 1 and {MAX_MODALITIES} modalities required"));
        }
        if self.tasks.len() < 2 {
            return bad("at least 2 tasks required".into());
        }
        for m in &self.modalities {
            if m.dim == 0 || !(m.noise >= 0.0) {
                return bad(format!("modality `{}` needs dim > 0 and noise >= 0", m.name));
            }
        }
        for t in &self.tasks {
            if t.coefficients.len() != self.latent_dim {
                return bad(format!(
                    "task `{}` has {} coefficients for latent_dim {}",
                    t.name,
                    t.coefficients.len(),
                    self.latent_dim
                ));
            }
        }
        for e in &self.pattern_effects {
            if e.pattern.len() != self.modalities.len() {
                return bad(format!("pattern {} has wrong width", e.pattern));
            }
            if !e.pattern.observed(0) {
                return bad(format!("pattern {} drops the always-observed modality", e.pattern));
            }
            if !self.tasks.iter().any(|t| t.name == e.task) {
                return bad(format!("pattern effect names unknown task `{}`", e.task));
            }
        }
        Ok(())
    }

    /// τ*_{δ,t} lookup table, indexed `[pattern index][task]`.
    fn effect_table(&self) -> Vec<Vec<f64>> {
        let mut table = vec![vec![0.0; self.tasks.len()]; 1 << self.modalities.len()];
        for e in &self.pattern_effects {
            let t = self.tasks.iter().position(|t| t.name == e.task).unwrap();
            table[e.pattern.index()][t] += e.effect;
        }
        table
    }
}

/// Generator-side ground truth. Only evaluation and tests look at it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HiddenTruth {
    pub latent: Vec<f64>,
    /// σ(b_t + v_t·h*) before the pattern effect.
    pub base_probability: Vec<f64>,
    pub pattern_effect: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub id: u64,
    /// Raw features per modality; `None` marks a missing modality.
    pub features: Vec<Option<Vec<f64>>>,
    pub mask: Pattern,
    pub labels: Vec<u8>,
    #[serde(skip)]
    hidden: Option<HiddenTruth>,
}

impl PatientRecord {
    pub fn new(
        id: u64,
        features: Vec<Option<Vec<f64>>>,
        labels: Vec<u8>,
    ) -> Self {
        let mask = Pattern::from_bools(&features.iter().map(Option::is_some).collect::<Vec<_>>());
        Self {
            id,
            features,
            mask,
            labels,
            hidden: None,
        }
    }

    /// Ground truth planted by the generator, if this record carries it.
    pub fn oracle(&self) -> Option<&HiddenTruth> {
        self.hidden.as_ref()
    }

    pub fn strip_oracle(&mut self) {
        self.hidden = None;
    }

    pub fn check(&self, dims: &[usize]) -> Result<(), DataError> {
        if self.features.len() != dims.len() || self.mask.len() != dims.len() {
            return Err(DataError::InconsistentRecord {
                id: self.id,
                reason: format!("expected {} modalities", dims.len()),
            });
        }
        for (m, f) in self.features.iter().enumerate() {
            if f.is_some() != self.mask.observed(m) {
                return Err(DataError::InconsistentRecord {
                    id: self.id,
                    reason: format!("mask bit {m} disagrees with feature presence"),
                });
            }
            if let Some(x) = f {
                if x.len() != dims[m] {
                    return Err(DataError::InconsistentRecord {
                        id: self.id,
                        reason: format!("modality {m} has {} features, expected {}", x.len(), dims[m]),
                    });
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub modalities: Vec<String>,
    pub dims: Vec<usize>,
    pub tasks: Vec<String>,
    pub records: Vec<PatientRecord>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn num_modalities(&self) -> usize {
        self.modalities.len()
    }

    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            modalities: self.modalities.clone(),
            dims: self.dims.clone(),
            tasks: self.tasks.clone(),
            records: idx.iter().map(|&i| self.records[i].clone()).collect(),
        }
    }

    pub fn patterns(&self) -> Vec<Pattern> {
        self.records.iter().map(|r| r.mask).collect()
    }

    pub fn label_column(&self, task: usize) -> Vec<u8> {
        self.records.iter().map(|r| r.labels[task]).collect()
    }

    /// Pattern support counts in ascending pattern order.
    pub fn pattern_counts(&self) -> BTreeMap<Pattern, usize> {
        let mut counts = BTreeMap::new();
        for r in &self.records {
            *counts.entry(r.mask).or_insert(0) += 1;
        }
        counts
    }

    pub fn strip_oracle(&mut self) {
        self.records.iter_mut().for_each(PatientRecord::strip_oracle);
    }

    /// Writes one JSON object per line. The `hidden` object is emitted only
    /// when `with_oracle` is set.
    pub fn write_jsonl<W: Write>(&self, mut w: W, with_oracle: bool) -> Result<(), DataError> {
        for r in &self.records {
            let line = RecordLine::from_record(r, self, with_oracle);
            serde_json::to_writer(&mut w, &line).map_err(std::io::Error::other)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(reader: R) -> Result<Dataset, DataError> {
        let mut modalities: Option<Vec<String>> = None;
        let mut tasks: Option<Vec<String>> = None;
        let mut dims: Vec<Option<usize>> = Vec::new();
        let mut records = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: RecordLine =
                serde_json::from_str(&line).map_err(|source| DataError::Parse { line: i + 1, source })?;
            let names: Vec<String> = parsed.x.keys().cloned().collect();
            let task_names: Vec<String> = parsed.y.keys().cloned().collect();
            let modalities = modalities.get_or_insert_with(|| {
                dims = vec![None; names.len()];
                names.clone()
            });
            let tasks = tasks.get_or_insert_with(|| task_names.clone());
            if *modalities != names || *tasks != task_names {
                return Err(DataError::InconsistentRecord {
                    id: parsed.id,
                    reason: "modality or task keys differ from the first record".into(),
                });
            }
            let record = parsed.into_record()?;
            for (m, f) in record.features.iter().enumerate() {
                if let Some(x) = f {
                    match dims[m] {
                        None => dims[m] = Some(x.len()),
                        Some(d) if d != x.len() => {
                            return Err(DataError::FeatureDim {
                                modality: modalities[m].clone(),
                                expected: d,
                                found: x.len(),
                            })
                        }
                        _ => {}
                    }
                }
            }
            records.push(record);
        }
        let modalities = modalities.unwrap_or_default();
        let dims = dims
            .into_iter()
            .zip(&modalities)
            .map(|(d, name)| {
                d.ok_or_else(|| DataError::InvalidConfig(format!("modality `{name}` is never observed")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Dataset {
            modalities,
            dims,
            tasks: tasks.unwrap_or_default(),
            records,
        })
    }

    pub fn save(&self, path: &Path, with_oracle: bool) -> Result<(), DataError> {
        let tmp = path.with_extension("tmp");
        {
            let mut w = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
            self.write_jsonl(&mut w, with_oracle)?;
            w.flush()?;
        }
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Dataset, DataError> {
        let f = std::fs::File::open(path)?;
        Dataset::read_jsonl(std::io::BufReader::new(f))
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordLine {
    id: u64,
    x: serde_json::Map<String, serde_json::Value>,
    mask: Pattern,
    y: serde_json::Map<String, serde_json::Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    hidden: Option<HiddenTruth>,
}

impl RecordLine {
    fn from_record(r: &PatientRecord, ds: &Dataset, with_oracle: bool) -> Self {
        let x = ds
            .modalities
            .iter()
            .zip(&r.features)
            .map(|(name, f)| (name.clone(), serde_json::to_value(f).unwrap()))
            .collect();
        let y = ds
            .tasks
            .iter()
            .zip(&r.labels)
            .map(|(name, &l)| (name.clone(), serde_json::Value::from(l)))
            .collect();
        Self {
            id: r.id,
            x,
            mask: r.mask,
            y,
            hidden: if with_oracle { r.hidden.clone() } else { None },
        }
    }

    fn into_record(self) -> Result<PatientRecord, DataError> {
        let id = self.id;
        let features = self
            .x
            .into_iter()
            .map(|(_, v)| serde_json::from_value::<Option<Vec<f64>>>(v))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| DataError::InconsistentRecord {
                id,
                reason: format!("bad feature array: {e}"),
            })?;
        let labels = self
            .y
            .into_iter()
            .map(|(name, v)| match v.as_u64() {
                Some(l @ (0 | 1)) => Ok(l as u8),
                _ => Err(DataError::InconsistentRecord {
                    id,
                    reason: format!("label `{name}` is not 0 or 1"),
                }),
            })
            .collect::<Result<Vec<_>, _>>()?;
        let mut record = PatientRecord::new(id, features, labels);
        if record.mask != self.mask {
            return Err(DataError::InconsistentRecord {
                id,
                reason: format!("mask {} disagrees with present features {}", self.mask, record.mask),
            });
        }
        record.hidden = self.hidden;
        Ok(record)
    }
}

/// Fixed per-seed structure: loading matrices and content readouts.
struct World {
    loadings: Vec<Tensor>,
    readouts: Vec<Vec<f64>>,
    readout_scale: Vec<f64>,
}

impl World {
    fn draw(config: &GenConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(GLOBAL_STREAM);
        let k = config.latent_dim;
        let std = 1.0 / (k as f64).sqrt();
        let mut loadings = Vec::new();
        let mut readouts = Vec::new();
        let mut readout_scale = Vec::new();
        for m in &config.modalities {
            let a = Tensor::matrix(
                m.dim,
                k,
                (0..m.dim * k).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect(),
            );
            let mut r: Vec<f64> = (0..m.dim).map(|_| rng.sample(StandardNormal)).collect();
            let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            r.iter_mut().for_each(|v| *v /= norm);
            // Var(r·x) = |Aᵀr|² + noise², so q(x) has unit variance.
            let atr: f64 = (0..k)
                .map(|l| (0..m.dim).map(|j| r[j] * a.get(j, l)).sum::<f64>().powi(2))
                .sum();
            readout_scale.push(1.0 / (atr + m.noise * m.noise).sqrt());
            loadings.push(a);
            readouts.push(r);
        }
        Self {
            loadings,
            readouts,
            readout_scale,
        }
    }
}

fn logistic(x: f64) -> f64 {
    crate::kernel::sigmoid(x)
}

/// Draws a dataset. Patient `i` uses its own RNG stream, so records are
/// independent of generation order.
pub fn generate(config: &GenConfig) -> Result<Dataset, DataError> {
    config.validate()?;
    let world = World::draw(config);
    let effects = config.effect_table();
    let mcar = config.mode == MissingMode::Mcar;
    let k = config.latent_dim;
    let mut records = Vec::with_capacity(config.n_patients);
    for id in 0..config.n_patients as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(id);
        let latent: Vec<f64> = (0..k).map(|_| rng.sample(StandardNormal)).collect();
        let severity = latent[0];
        let mut features = Vec::with_capacity(config.modalities.len());
        for (m, spec) in config.modalities.iter().enumerate() {
            let a = &world.loadings[m];
            let x: Vec<f64> = (0..spec.dim)
                .map(|j| {
                    let signal: f64 = a.row(j).iter().zip(&latent).map(|(w, h)| w * h).sum();
                    signal + spec.noise * rng.sample::<f64, _>(StandardNormal)
                })
                .collect();
            // Draw the observation coin for every modality so the stream
            // layout does not depend on the mode.
            let coin: f64 = rng.random();
            let observed = if m == 0 {
                true
            } else {
                let (w, u) = if mcar {
                    (0.0, 0.0)
                } else {
                    (spec.severity_weight, spec.content_weight)
                };
                let q = world.readouts[m].iter().zip(&x).map(|(r, v)| r * v).sum::<f64>()
                    * world.readout_scale[m];
                coin < logistic(spec.intercept + w * severity + u * q)
            };
            features.push(observed.then_some(x));
        }
        let mask = Pattern::from_bools(&features.iter().map(Option::is_some).collect::<Vec<_>>());
        let mut labels = Vec::with_capacity(config.tasks.len());
        let mut base_probability = Vec::with_capacity(config.tasks.len());
        let mut pattern_effect = Vec::with_capacity(config.tasks.len());
        for (t, task) in config.tasks.iter().enumerate() {
            let eta: f64 = task.intercept
                + task.coefficients.iter().zip(&latent).map(|(v, h)| v * h).sum::<f64>();
            let base = logistic(eta);
            let effect = effects[mask.index()][t];
            let p = base + effect;
            if !(-MAX_PROBABILITY_OVERSHOOT..=1.0 + MAX_PROBABILITY_OVERSHOOT).contains(&p) {
                return Err(DataError::ProbabilityOutOfRange {
                    task: task.name.clone(),
                    effect,
                    probability: p,
                });
            }
            let coin: f64 = rng.random();
            labels.push(u8::from(coin < p.clamp(0.0, 1.0)));
            base_probability.push(base);
            pattern_effect.push(effect);
        }
        records.push(PatientRecord {
            id,
            features,
            mask,
            labels,
            hidden: Some(HiddenTruth {
                latent,
                base_probability,
                pattern_effect,
            }),
        });
    }
    Ok(Dataset {
        modalities: config.modality_names(),
        dims: config.modalities.iter().map(|m| m.dim).collect(),
        tasks: config.task_names(),
        records,
    })
}

#[cfg(test)]
mod tests;
