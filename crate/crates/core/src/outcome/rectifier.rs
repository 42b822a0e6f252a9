use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::datagen::Pattern;
use crate::error::{Error, Result};
use crate::kernel::Tensor;

pub const DEFAULT_KAPPA_GRID: [f64; 4] = [0.01, 0.02, 0.03, 0.05];
pub const FALLBACK_KAPPA: f64 = 0.05;

/// `clamp(ŷ + τ̂, 0, 1)` when `|τ̂| > κ`, else `ŷ` unchanged.
pub fn rectify(y_hat: f64, tau: f64, kappa: f64) -> f64 {
    if tau.abs() > kappa {
        (y_hat + tau).clamp(0.0, 1.0)
    } else {
        y_hat
    }
}

/// Fold estimates for one (pattern, task) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct RectifierCell {
    /// Mean residual `y − ŷ` on each fold; `None` for an empty fold.
    pub tau: [Option<f64>; 2],
    pub support: [usize; 2],
    pub applied: [bool; 2],
}

impl RectifierCell {
    fn refresh(&mut self, kappa: f64, min_support: usize) {
        for k in 0..2 {
            self.applied[k] = match self.tau[k] {
                Some(t) => t.abs() > kappa && self.support[k] >= min_support,
                None => false,
            };
        }
    }

    /// Correction for a patient of fold `k`, estimated on the other fold.
    fn cross_fitted(&self, k: usize) -> Option<f64> {
        let other = 1 - k;
        self.applied[other].then(|| self.tau[other].unwrap())
    }

    /// Test-time correction: mean of the applied fold estimates.
    fn pooled(&self) -> Option<f64> {
        let applied: Vec<f64> = (0..2).filter(|&k| self.applied[k]).map(|k| self.tau[k].unwrap()).collect();
        match applied.len() {
            0 => None,
            1 => Some(applied[0]),
            _ => Some((applied[0] + applied[1]) / 2.0),
        }
    }
}

/// Which estimate a patient may receive.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FoldRole {
    /// Validation patient in fold `k`; corrected with the other fold's estimate.
    Validation(usize),
    /// Held-out patient; corrected with the mean of the applied estimates.
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Correction {
    Applied(f64),
    Unchanged(f64),
    UnseenPattern(f64),
}

impl Correction {
    pub fn value(self) -> f64 {
        match self {
            Correction::Applied(v) | Correction::Unchanged(v) | Correction::UnseenPattern(v) => v,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RectifierTable {
    pub tasks: Vec<String>,
    pub kappa: f64,
    pub min_support: usize,
    cells: BTreeMap<(Pattern, usize), RectifierCell>,
}

fn check_inputs(probs: &Tensor, labels: &Tensor, patterns: &[Pattern], folds: &[usize], tasks: &[String]) -> Result<()> {
    let n = patterns.len();
    let bad = |reason: String| {
        Err(Error::Format {
            what: "rectifier input",
            reason,
        })
    };
    if probs.shape() != labels.shape() || probs.rows() != n || folds.len() != n || probs.cols() != tasks.len() {
        return bad(format!(
            "predictions {:?}, labels {:?}, {n} patterns, {} folds, {} tasks",
            probs.shape(),
            labels.shape(),
            folds.len(),
            tasks.len()
        ));
    }
    if folds.iter().any(|&f| f > 1) {
        return bad("fold ids must be 0 or 1".into());
    }
    Ok(())
}

/// Assigns every validation patient to one of two folds, alternating within
/// each pattern after a seeded shuffle so both folds see every pattern.
pub fn rectifier_folds(patterns: &[Pattern], seed: u64) -> Vec<usize> {
    let mut by_pattern: BTreeMap<Pattern, Vec<usize>> = BTreeMap::new();
    for (i, p) in patterns.iter().enumerate() {
        by_pattern.entry(*p).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut folds = vec![0; patterns.len()];
    let mut offset = 0;
    for mut members in by_pattern.into_values() {
        members.shuffle(&mut rng);
        for (j, &i) in members.iter().enumerate() {
            folds[i] = (offset + j) % 2;
        }
        offset += members.len();
    }
    folds
}

/// Per (pattern, task, fold) mean probability-scale residuals.
pub fn fit_rectifier(
    probs: &Tensor,
    labels: &Tensor,
    patterns: &[Pattern],
    folds: &[usize],
    tasks: &[String],
    kappa: f64,
    min_support: usize,
) -> Result<RectifierTable> {
    check_inputs(probs, labels, patterns, folds, tasks)?;
    let mut sums: BTreeMap<(Pattern, usize), ([f64; 2], [usize; 2])> = BTreeMap::new();
    for (i, p) in patterns.iter().enumerate() {
        for t in 0..tasks.len() {
            let entry = sums.entry((*p, t)).or_insert(([0.0; 2], [0; 2]));
            entry.0[folds[i]] += labels.get(i, t) - probs.get(i, t);
            entry.1[folds[i]] += 1;
        }
    }
    let cells = sums
        .into_iter()
        .map(|(key, (sum, count))| {
            let tau = [0, 1].map(|k| (count[k] > 0).then(|| sum[k] / count[k] as f64));
            let mut cell = RectifierCell {
                tau,
                support: count,
                applied: [false; 2],
            };
            cell.refresh(kappa, min_support);
            (key, cell)
        })
        .collect();
    Ok(RectifierTable {
        tasks: tasks.to_vec(),
        kappa,
        min_support,
        cells,
    })
}

impl RectifierTable {
    pub fn cell(&self, pattern: Pattern, task: usize) -> Option<&RectifierCell> {
        self.cells.get(&(pattern, task))
    }

    pub fn cells(&self) -> impl Iterator<Item = (Pattern, usize, &RectifierCell)> {
        self.cells.iter().map(|(&(p, t), c)| (p, t, c))
    }

    /// Same estimates under another threshold.
    pub fn with_kappa(&self, kappa: f64) -> Self {
        let mut out = self.clone();
        out.kappa = kappa;
        for cell in out.cells.values_mut() {
            cell.refresh(kappa, self.min_support);
        }
        out
    }

    /// Fraction of (pattern, task, fold) slots whose correction fires.
    pub fn applied_fraction(&self) -> f64 {
        let total = self.cells.len() * 2;
        if total == 0 {
            return 0.0;
        }
        let fired: usize = self.cells.values().map(|c| c.applied.iter().filter(|&&a| a).count()).sum();
        fired as f64 / total as f64
    }

    pub fn correct(&self, y_hat: f64, pattern: Pattern, task: usize, role: FoldRole) -> Correction {
        let Some(cell) = self.cells.get(&(pattern, task)) else {
            return Correction::UnseenPattern(y_hat);
        };
        let tau = match role {
            FoldRole::Validation(k) => cell.cross_fitted(k),
            FoldRole::Test => cell.pooled(),
        };
        match tau {
            Some(t) => Correction::Applied((y_hat + t).clamp(0.0, 1.0)),
            None => Correction::Unchanged(y_hat),
        }
    }

    /// Corrects a prediction matrix. Returns the corrected matrix and the
    /// number of patients whose pattern has no entry.
    pub fn apply(&self, probs: &Tensor, patterns: &[Pattern], roles: &[FoldRole]) -> (Tensor, usize) {
        let mut out = probs.clone();
        let mut unseen = 0;
        for (i, (p, role)) in patterns.iter().zip(roles).enumerate() {
            let mut missed = false;
            for (t, v) in out.row_mut(i).iter_mut().enumerate() {
                let c = self.correct(*v, *p, t, *role);
                missed |= matches!(c, Correction::UnseenPattern(_));
                *v = c.value();
            }
            unseen += usize::from(missed);
        }
        if unseen > 0 {
            log::info!("{unseen} patients had a pattern without rectifier entry");
        }
        (out, unseen)
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        let opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| x.to_string());
        writeln!(s, "kappa\t{}", self.kappa).unwrap();
        writeln!(s, "min_support\t{}", self.min_support).unwrap();
        writeln!(s, "pattern\ttask\ttau_1\ttau_2\tn_1\tn_2\tapplied_1\tapplied_2").unwrap();
        for (&(p, t), c) in &self.cells {
            writeln!(
                s,
                "{p}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                self.tasks[t],
                opt(c.tau[0]),
                opt(c.tau[1]),
                c.support[0],
                c.support[1],
                c.applied[0],
                c.applied[1]
            )
            .unwrap();
        }
        s
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let bad = |reason: String| Error::Format {
            what: "rectifier table",
            reason,
        };
        let mut lines = text.lines();
        let mut header = |key: &str| -> Result<String> {
            let line = lines.next().ok_or_else(|| bad(format!("missing `{key}` line")))?;
            line.strip_prefix(key)
                .and_then(|r| r.strip_prefix('\t'))
                .map(str::to_string)
                .ok_or_else(|| bad(format!("expected `{key}`, found `{line}`")))
        };
        let kappa: f64 = header("kappa")?.parse().map_err(|e| bad(format!("kappa: {e}")))?;
        let min_support: usize = header("min_support")?.parse().map_err(|e| bad(format!("min_support: {e}")))?;
        header("pattern")?;
        let mut tasks: Vec<String> = Vec::new();
        let mut cells = BTreeMap::new();
        for (no, line) in lines.enumerate() {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 8 {
                return Err(bad(format!("row {}: expected 8 fields", no + 1)));
            }
            let row_err = |what: &str| bad(format!("row {}: bad {what}", no + 1));
            let pattern: Pattern = f[0].parse().map_err(|_| row_err("pattern"))?;
            let t = match tasks.iter().position(|t| t == f[1]) {
                Some(t) => t,
                None => {
                    tasks.push(f[1].to_string());
                    tasks.len() - 1
                }
            };
            let tau = |s: &str| -> Result<Option<f64>> {
                if s == "-" {
                    Ok(None)
                } else {
                    s.parse().map(Some).map_err(|_| row_err("tau"))
                }
            };
            let num = |s: &str| s.parse::<usize>().map_err(|_| row_err("support"));
            let flag = |s: &str| s.parse::<bool>().map_err(|_| row_err("applied flag"));
            cells.insert(
                (pattern, t),
                RectifierCell {
                    tau: [tau(f[2])?, tau(f[3])?],
                    support: [num(f[4])?, num(f[5])?],
                    applied: [flag(f[6])?, flag(f[7])?],
                },
            );
        }
        Ok(Self {
            tasks,
            kappa,
            min_support,
            cells,
        })
    }
}

fn mean_brier(probs: &Tensor, labels: &Tensor) -> f64 {
    let sq: f64 = probs.data().iter().zip(labels.data()).map(|(p, y)| (p - y) * (p - y)).sum();
    sq / probs.len() as f64
}

/// Picks κ from `grid` by the mean Brier (over tasks) of the cross-fitted
/// rectified validation predictions. Ties go to the larger κ. Returns κ*
/// and the score of every grid value.
pub fn select_kappa(
    probs: &Tensor,
    labels: &Tensor,
    patterns: &[Pattern],
    folds: &[usize],
    tasks: &[String],
    grid: &[f64],
    min_support: usize,
) -> Result<(f64, Vec<(f64, f64)>)> {
    let mut grid: Vec<f64> = grid.iter().copied().filter(|k| k.is_finite() && *k >= 0.0).collect();
    if grid.is_empty() {
        log::warn!("degenerate kappa grid, using {FALLBACK_KAPPA}");
        return Ok((FALLBACK_KAPPA, Vec::new()));
    }
    grid.sort_by(|a, b| b.total_cmp(a));
    grid.dedup();
    let base = fit_rectifier(probs, labels, patterns, folds, tasks, grid[0], min_support)?;
    let roles: Vec<FoldRole> = folds.iter().map(|&k| FoldRole::Validation(k)).collect();
    let mut scores = Vec::with_capacity(grid.len());
    let mut best = (grid[0], f64::INFINITY);
    for &kappa in &grid {
        let (rect, _) = base.with_kappa(kappa).apply(probs, patterns, &roles);
        let score = mean_brier(&rect, labels);
        if score < best.1 {
            best = (kappa, score);
        }
        scores.push((kappa, score));
    }
    scores.reverse();
    Ok((best.0, scores))
}
