//! AUC, average precision, Brier score, per-pattern reports and probes of
//! the missingness embedding.

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::Pattern;
use crate::kernel::{AdamW, AdamWConfig, Graph, Init, ParamStore, Tensor};

/// Patterns with less support than this are pooled into "other".
pub const DEFAULT_SUPPORT_FLOOR: usize = 30;

/// Why a metric has no value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Undefined {
    Empty,
    NoPositives,
    NoNegatives,
    TooFewPatterns,
}

impl fmt::Display for Undefined {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Undefined::Empty => "no samples",
            Undefined::NoPositives => "no positive labels",
            Undefined::NoNegatives => "no negative labels",
            Undefined::TooFewPatterns => "fewer than 3 distinct patterns",
        })
    }
}

/// Mann–Whitney AUC: (concordant pairs + ½·tied pairs) / (P·N).
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64, Undefined> {
    assert_eq!(scores.len(), labels.len(), "scores and labels differ in length");
    let pos = labels.iter().filter(|&&y| y == 1).count();
    let neg = labels.len() - pos;
    if labels.is_empty() {
        return Err(Undefined::Empty);
    }
    if pos == 0 {
        return Err(Undefined::NoPositives);
    }
    if neg == 0 {
        return Err(Undefined::NoNegatives);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // For each group of tied scores, positives beat every lower negative and
    // tie with the negatives inside the group.
    let mut below_neg = 0.0;
    let mut total = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut gp, mut gn) = (0.0, 0.0);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] == 1 {
                gp += 1.0;
            } else {
                gn += 1.0;
            }
            j += 1;
        }
        total += gp * below_neg + 0.5 * gp * gn;
        below_neg += gn;
        i = j;
    }
    Ok(total / (pos as f64 * neg as f64))
}

/// Average precision. Samples are ranked by descending score; tied scores
/// keep their input order.
pub fn auprc(scores: &[f64], labels: &[u8]) -> Result<f64, Undefined> {
    assert_eq!(scores.len(), labels.len(), "scores and labels differ in length");
    let pos = labels.iter().filter(|&&y| y == 1).count();
    if labels.is_empty() {
        return Err(Undefined::Empty);
    }
    if pos == 0 {
        return Err(Undefined::NoPositives);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut hits = 0.0;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] == 1 {
            hits += 1.0;
            sum += hits / (rank + 1) as f64;
        }
    }
    Ok(sum / pos as f64)
}

/// Mean squared error between probabilities and binary outcomes.
pub fn brier(probs: &[f64], labels: &[u8]) -> f64 {
    assert_eq!(probs.len(), labels.len(), "probabilities and labels differ in length");
    let sq: f64 = probs
        .iter()
        .zip(labels)
        .map(|(p, &y)| (p - f64::from(y)) * (p - f64::from(y)))
        .sum();
    sq / probs.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub auc: Result<f64, Undefined>,
    pub auprc: Result<f64, Undefined>,
    pub brier: f64,
    pub support: usize,
}

impl TaskMetrics {
    pub fn compute(probs: &[f64], labels: &[u8]) -> Self {
        Self {
            auc: auc(probs, labels),
            auprc: auprc(probs, labels),
            brier: brier(probs, labels),
            support: probs.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternMetrics {
    /// Pattern bits, or "other" for the pooled low-support patterns.
    pub pattern: String,
    pub support: usize,
    pub tasks: Vec<TaskMetrics>,
}

/// Metrics stratified by exact pattern; patterns below `floor` are pooled
/// into "other", listed last.
pub fn pattern_report(probs: &Tensor, labels: &Tensor, patterns: &[Pattern], floor: usize) -> Vec<PatternMetrics> {
    let mut groups: BTreeMap<Pattern, Vec<usize>> = BTreeMap::new();
    for (i, p) in patterns.iter().enumerate() {
        groups.entry(*p).or_default().push(i);
    }
    let mut other = Vec::new();
    let mut out = Vec::new();
    let stratum = |name: String, rows: &[usize]| PatternMetrics {
        pattern: name,
        support: rows.len(),
        tasks: (0..probs.cols())
            .map(|t| {
                let p: Vec<f64> = rows.iter().map(|&i| probs.get(i, t)).collect();
                let y: Vec<u8> = rows.iter().map(|&i| labels.get(i, t) as u8).collect();
                TaskMetrics::compute(&p, &y)
            })
            .collect(),
    };
    for (p, rows) in groups {
        if rows.len() < floor {
            other.extend(rows);
        } else {
            out.push(stratum(p.to_string(), &rows));
        }
    }
    if !other.is_empty() {
        other.sort_unstable();
        out.push(stratum("other".into(), &other));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub seed: u64,
    pub config_hash: String,
    pub rectified: bool,
    pub tasks: Vec<String>,
    pub overall: Vec<TaskMetrics>,
    pub patterns: Vec<PatternMetrics>,
}

fn column(t: &Tensor, c: usize) -> Vec<f64> {
    (0..t.rows()).map(|r| t.get(r, c)).collect()
}

impl MetricsReport {
    /// Overall and per-pattern blocks from one pass over the evaluation set.
    pub fn evaluate(
        probs: &Tensor,
        labels: &Tensor,
        patterns: &[Pattern],
        tasks: &[String],
        seed: u64,
        config_hash: &str,
        rectified: bool,
    ) -> Self {
        let overall = (0..tasks.len())
            .map(|t| {
                let y: Vec<u8> = column(labels, t).iter().map(|&v| v as u8).collect();
                TaskMetrics::compute(&column(probs, t), &y)
            })
            .collect();
        Self {
            seed,
            config_hash: config_hash.to_string(),
            rectified,
            tasks: tasks.to_vec(),
            overall,
            patterns: pattern_report(probs, labels, patterns, DEFAULT_SUPPORT_FLOOR),
        }
    }

    pub fn auc(&self, task: usize) -> Option<f64> {
        self.overall[task].auc.ok()
    }

    pub const CSV_HEADER: &'static str = "seed,task,pattern,auc,auprc,brier,rectified";

    /// CSV rows without header; the overall block uses pattern "all".
    pub fn csv_rows(&self) -> String {
        let opt = |v: &Result<f64, Undefined>| v.map_or_else(|_| String::new(), |x| format!("{x:.6}"));
        let mut s = String::new();
        let mut push = |pattern: &str, t: usize, m: &TaskMetrics| {
            s.push_str(&format!(
                "{},{},{},{},{},{:.6},{}\n",
                self.seed,
                self.tasks[t],
                pattern,
                opt(&m.auc),
                opt(&m.auprc),
                m.brier,
                self.rectified
            ));
        };
        for (t, m) in self.overall.iter().enumerate() {
            push("all", t, m);
        }
        for p in &self.patterns {
            for (t, m) in p.tasks.iter().enumerate() {
                push(&p.pattern, t, m);
            }
        }
        s
    }

    pub fn to_csv(reports: &[&MetricsReport]) -> String {
        let mut s = format!("{}\n", Self::CSV_HEADER);
        for r in reports {
            s.push_str(&r.csv_rows());
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    /// Held-out accuracy of a linear probe predicting the exact pattern.
    pub accuracy: f64,
    /// Frequency of the most common pattern in the held-out half.
    pub majority_baseline: f64,
    pub distinct_patterns: usize,
    /// Set when only one pattern occurs, making the probe trivial.
    pub degenerate: bool,
    /// Per task: Pearson correlation between per-pattern mean ‖z‖ and
    /// per-pattern label rate.
    pub norm_label_correlation: Vec<Result<f64, Undefined>>,
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        0.0
    } else {
        cov / (vx * vy).sqrt()
    }
}

/// Multinomial logistic regression fitted on a seeded half of the rows and
/// scored on the other half.
fn linear_probe(z: &Tensor, classes: &[usize], num_classes: usize, seed: u64) -> (f64, f64) {
    let n = z.rows();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let cut = n.div_ceil(2);
    let (train, test) = idx.split_at(cut);
    let test = if test.is_empty() { train } else { test };

    // Standardize with training statistics.
    let d = z.cols();
    let mut mean = vec![0.0; d];
    let mut sd = vec![0.0; d];
    for &i in train {
        for (j, v) in z.row(i).iter().enumerate() {
            mean[j] += v / train.len() as f64;
        }
    }
    for &i in train {
        for (j, v) in z.row(i).iter().enumerate() {
            sd[j] += (v - mean[j]).powi(2) / train.len() as f64;
        }
    }
    let sd: Vec<f64> = sd.iter().map(|v| if *v > 1e-12 { v.sqrt() } else { 1.0 }).collect();
    let design = |rows: &[usize]| {
        Tensor::matrix(
            rows.len(),
            d,
            rows.iter()
                .flat_map(|&i| z.row(i).iter().enumerate().map(|(j, v)| (v - mean[j]) / sd[j]))
                .collect(),
        )
    };
    let (xtr, xte) = (design(train), design(test));
    let ytr: Vec<usize> = train.iter().map(|&i| classes[i]).collect();

    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = store.add_init("probe.w", d, num_classes, Init::Zeros, &mut rng);
    let b = store.add_init("probe.b", 1, num_classes, Init::Zeros, &mut rng);
    let mut opt = AdamW::new(
        AdamWConfig {
            learning_rate: 0.05,
            weight_decay: 0.0,
            ..AdamWConfig::default()
        },
        &store,
    );
    for _ in 0..400 {
        let mut g = Graph::new();
        let x = g.constant(xtr.clone());
        let (wv, bv) = (g.param(&store, w), g.param(&store, b));
        let logits = g.linear(x, wv, bv).expect("probe shapes");
        let xent = g.softmax_xent(logits, &ytr).expect("probe targets");
        let loss = g.mean_all(xent);
        let grads = g.backward(loss).expect("scalar loss").dense(&store);
        opt.step(&mut store, &grads).expect("finite probe gradients");
    }
    let mut g = Graph::new();
    let x = g.constant(xte);
    let (wv, bv) = (g.param(&store, w), g.param(&store, b));
    let logits = g.linear(x, wv, bv).expect("probe shapes");
    let scores = g.value(logits);
    let mut correct = 0;
    let mut counts = vec![0usize; num_classes];
    for (r, &i) in test.iter().enumerate() {
        let row = scores.row(r);
        let pred = (0..num_classes).max_by(|&a, &b| row[a].total_cmp(&row[b]).then(b.cmp(&a))).unwrap();
        correct += usize::from(pred == classes[i]);
        counts[classes[i]] += 1;
    }
    let majority = *counts.iter().max().unwrap() as f64 / test.len() as f64;
    (correct as f64 / test.len() as f64, majority)
}

/// Linear pattern probe on `z` and the ‖z‖–outcome correlation across
/// patterns.
pub fn embedding_probes(z: &Tensor, patterns: &[Pattern], labels: &Tensor, seed: u64) -> ProbeReport {
    let distinct: Vec<Pattern> = {
        let mut v = patterns.to_vec();
        v.sort();
        v.dedup();
        v
    };
    let classes: Vec<usize> = patterns.iter().map(|p| distinct.binary_search(p).unwrap()).collect();
    let (accuracy, majority_baseline) = if distinct.len() == 1 {
        (1.0, 1.0)
    } else {
        linear_probe(z, &classes, distinct.len(), seed)
    };
    let norm_label_correlation = (0..labels.cols())
        .map(|t| {
            if distinct.len() < 3 {
                return Err(Undefined::TooFewPatterns);
            }
            let mut norm = vec![0.0; distinct.len()];
            let mut rate = vec![0.0; distinct.len()];
            let mut count = vec![0.0; distinct.len()];
            for (i, &c) in classes.iter().enumerate() {
                norm[c] += z.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
                rate[c] += labels.get(i, t);
                count[c] += 1.0;
            }
            let norm: Vec<f64> = norm.iter().zip(&count).map(|(s, c)| s / c).collect();
            let rate: Vec<f64> = rate.iter().zip(&count).map(|(s, c)| s / c).collect();
            Ok(pearson(&norm, &rate))
        })
        .collect();
    ProbeReport {
        accuracy,
        majority_baseline,
        distinct_patterns: distinct.len(),
        degenerate: distinct.len() == 1,
        norm_label_correlation,
    }
}
