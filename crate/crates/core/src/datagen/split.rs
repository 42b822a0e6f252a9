use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{DataError, Dataset, Pattern};

/// Strata smaller than this cannot be spread over train/val/test and are
/// pooled into label-only strata.
const MIN_STRATUM: usize = 3;
/// Patterns with at least this support in the data must appear in both train
/// and validation whenever they appear in train.
const VAL_COVERAGE_SUPPORT: usize = 10;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Stratum {
    Joint(Pattern, u8),
    LabelOnly(u8),
}

fn strata(ds: &Dataset, seed: u64) -> Vec<Vec<usize>> {
    let mut joint: BTreeMap<Stratum, Vec<usize>> = BTreeMap::new();
    for (i, r) in ds.records.iter().enumerate() {
        let label = r.labels.first().copied().unwrap_or(0);
        joint.entry(Stratum::Joint(r.mask, label)).or_default().push(i);
    }
    let mut grouped: BTreeMap<Stratum, Vec<usize>> = BTreeMap::new();
    let mut pooled = 0;
    for (key, members) in joint {
        let key = match key {
            Stratum::Joint(_, label) if members.len() < MIN_STRATUM => {
                pooled += members.len();
                Stratum::LabelOnly(label)
            }
            k => k,
        };
        grouped.entry(key).or_default().extend(members);
    }
    if pooled > 0 {
        log::warn!(
            "{pooled} records fall in (label × pattern) strata smaller than {MIN_STRATUM}; \
             stratifying them by label only"
        );
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    grouped
        .into_values()
        .map(|mut members| {
            members.shuffle(&mut rng);
            members
        })
        .collect()
}

fn check_ratios(ratios: &[f64]) -> Result<(), DataError> {
    let sum: f64 = ratios.iter().sum();
    if ratios.iter().any(|r| !(*r >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
        return Err(DataError::BadRatios(ratios.to_vec()));
    }
    Ok(())
}

/// Stratified train/val/test split on (first-task label × pattern).
///
/// Quotas are assigned by cumulative rounding across strata, so partition
/// sizes are exactly `round(n·ratio)` for train and val and every stratum
/// receives within one of its proportional share.
pub fn split(ds: &Dataset, ratios: [f64; 3], seed: u64) -> Result<Split, DataError> {
    check_ratios(&ratios)?;
    let groups = strata(ds, seed);
    let mut out = Split {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    let mut seen = 0usize;
    let quota = |r: f64, c: usize| (r * c as f64).round() as usize;
    for members in groups {
        let before = seen;
        seen += members.len();
        let n_train = quota(ratios[0], seen) - quota(ratios[0], before);
        let n_val = quota(ratios[1], seen) - quota(ratios[1], before);
        let n_val = n_val.min(members.len() - n_train);
        out.train.extend_from_slice(&members[..n_train]);
        out.val.extend_from_slice(&members[n_train..n_train + n_val]);
        out.test.extend_from_slice(&members[n_train + n_val..]);
    }
    ensure_val_coverage(ds, &mut out);
    out.train.sort_unstable();
    out.val.sort_unstable();
    out.test.sort_unstable();
    Ok(out)
}

/// Moves one member of every sufficiently supported pattern that is missing
/// from validation, swapping a member of the best-covered validation pattern
/// back into train so partition sizes are unchanged.
fn ensure_val_coverage(ds: &Dataset, split: &mut Split) {
    if split.val.is_empty() {
        return;
    }
    let support = ds.pattern_counts();
    loop {
        let mut val_counts: BTreeMap<Pattern, usize> = BTreeMap::new();
        for &i in &split.val {
            *val_counts.entry(ds.records[i].mask).or_insert(0) += 1;
        }
        let missing = split.train.iter().position(|&i| {
            let p = ds.records[i].mask;
            support[&p] >= VAL_COVERAGE_SUPPORT && !val_counts.contains_key(&p)
        });
        let Some(ti) = missing else { break };
        let (&donor, &count) = val_counts.iter().max_by_key(|(_, &c)| c).unwrap();
        if count < 2 {
            break;
        }
        let vi = split.val.iter().position(|&i| ds.records[i].mask == donor).unwrap();
        std::mem::swap(&mut split.train[ti], &mut split.val[vi]);
    }
}

/// Stratified assignment of every record to one of `k` folds.
pub fn kfold(ds: &Dataset, k: usize, seed: u64) -> Result<Vec<usize>, DataError> {
    if k < 2 {
        return Err(DataError::InvalidConfig(format!("k-fold needs k >= 2, got {k}")));
    }
    let mut folds = vec![0; ds.len()];
    let mut offset = 0;
    for members in strata(ds, seed) {
        for (j, &i) in members.iter().enumerate() {
            folds[i] = (offset + j) % k;
        }
        offset += members.len();
    }
    Ok(folds)
}
