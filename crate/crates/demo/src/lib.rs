//! WebAssembly bindings for the static demo page. Every export returns a JSON
//! string; the pure functions behind them are usable natively.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use wasm_bindgen::prelude::*;

use crl_mmnar::datagen::{generate, Dataset, GenConfig, MissingMode, Pattern, PatternEffect, PatientRecord};
use crl_mmnar::kernel::{Graph, Tensor};
use crl_mmnar::metrics::brier;
use crl_mmnar::outcome::{fit_rectifier, rectifier_folds, FoldRole};
use crl_mmnar::reconstruction::contrastive_loss;

#[derive(Debug, Clone, Serialize)]
pub struct PatternRow {
    pub pattern: String,
    pub count: usize,
    pub share: f64,
    /// Observed outcome rate per task.
    pub rates: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CohortSummary {
    pub modalities: Vec<String>,
    pub tasks: Vec<String>,
    pub observed_share: Vec<f64>,
    pub patterns: Vec<PatternRow>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CellRow {
    pub pattern: String,
    pub task: String,
    pub tau: [Option<f64>; 2],
    pub support: [usize; 2],
    pub applied: [bool; 2],
    pub planted: f64,
    pub brier_before: Option<f64>,
    pub brier_after: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RectifierView {
    pub kappa: f64,
    pub min_support: usize,
    pub applied_fraction: f64,
    pub cells: Vec<CellRow>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ContrastivePoint {
    pub temperature: f64,
    pub loss: f64,
}

fn cohort(n: usize, mnar: bool, effect: f64, seed: u64) -> Result<Dataset, String> {
    let mut config = GenConfig {
        n_patients: n,
        seed,
        mode: if mnar { MissingMode::Mnar } else { MissingMode::Mcar },
        ..GenConfig::default()
    };
    config.pattern_effects = if effect == 0.0 {
        Vec::new()
    } else {
        vec![PatternEffect {
            pattern: "1101".parse().map_err(|e| format!("{e}"))?,
            task: config.tasks[0].name.clone(),
            effect,
        }]
    };
    generate(&config).map_err(|e| e.to_string())
}

/// Pattern frequencies and outcome rates of a generated cohort.
pub fn summarize_cohort(n: usize, mnar: bool, effect: f64, seed: u64) -> Result<CohortSummary, String> {
    let ds = cohort(n, mnar, effect, seed)?;
    let observed_share = (0..ds.num_modalities())
        .map(|m| ds.records.iter().filter(|r| r.mask.observed(m)).count() as f64 / ds.len() as f64)
        .collect();
    let patterns = ds
        .pattern_counts()
        .into_iter()
        .map(|(pattern, count)| {
            let members: Vec<&PatientRecord> = ds.records.iter().filter(|r| r.mask == pattern).collect();
            let rates = (0..ds.num_tasks())
                .map(|t| members.iter().map(|r| f64::from(r.labels[t])).sum::<f64>() / count as f64)
                .collect();
            PatternRow {
                pattern: pattern.to_string(),
                count,
                share: count as f64 / ds.len() as f64,
                rates,
            }
        })
        .collect();
    Ok(CohortSummary {
        modalities: ds.modalities.clone(),
        tasks: ds.tasks.clone(),
        observed_share,
        patterns,
    })
}

/// Fits the cross-fitted rectifier to oracle predictions that know the
/// latent state but not the planted pattern effect. Half the cohort fits the
/// table; the other half measures per-cell Brier before and after.
pub fn explore_rectifier(
    n: usize,
    mnar: bool,
    effect: f64,
    kappa: f64,
    min_support: usize,
    seed: u64,
) -> Result<RectifierView, String> {
    let ds = cohort(n, mnar, effect, seed)?;
    let (fit, held_out): (Vec<&PatientRecord>, Vec<&PatientRecord>) =
        ds.records.iter().enumerate().fold((Vec::new(), Vec::new()), |(mut a, mut b), (i, r)| {
            if i % 2 == 0 { a.push(r) } else { b.push(r) }
            (a, b)
        });
    let probs = |rs: &[&PatientRecord]| {
        let rows: Vec<Vec<f64>> = rs.iter().map(|r| r.oracle().expect("generated").base_probability.clone()).collect();
        Tensor::from_rows(&rows)
    };
    let labels = |rs: &[&PatientRecord]| {
        let rows: Vec<Vec<f64>> = rs.iter().map(|r| r.labels.iter().map(|&y| f64::from(y)).collect()).collect();
        Tensor::from_rows(&rows)
    };
    let patterns: Vec<Pattern> = fit.iter().map(|r| r.mask).collect();
    let folds = rectifier_folds(&patterns, seed);
    let table = fit_rectifier(&probs(&fit), &labels(&fit), &patterns, &folds, &ds.tasks, kappa, min_support)
        .map_err(|e| e.to_string())?;

    let test_probs = probs(&held_out);
    let test_patterns: Vec<Pattern> = held_out.iter().map(|r| r.mask).collect();
    let (rectified, _) = table.apply(&test_probs, &test_patterns, &vec![FoldRole::Test; held_out.len()]);
    let cells = table
        .cells()
        .map(|(pattern, t, cell)| {
            let idx: Vec<usize> = (0..held_out.len()).filter(|&i| test_patterns[i] == pattern).collect();
            let y: Vec<u8> = idx.iter().map(|&i| held_out[i].labels[t]).collect();
            let score = |p: &Tensor| {
                let col: Vec<f64> = idx.iter().map(|&i| p.get(i, t)).collect();
                (!idx.is_empty()).then(|| brier(&col, &y))
            };
            let planted = held_out
                .get(idx.first().copied().unwrap_or(usize::MAX))
                .map_or(0.0, |r| r.oracle().expect("generated").pattern_effect[t]);
            CellRow {
                pattern: pattern.to_string(),
                task: ds.tasks[t].clone(),
                tau: cell.tau,
                support: cell.support,
                applied: cell.applied,
                planted,
                brier_before: score(&test_probs),
                brier_after: score(&rectified),
            }
        })
        .collect();
    Ok(RectifierView {
        kappa,
        min_support,
        applied_fraction: table.applied_fraction(),
        cells,
    })
}

/// Contrastive loss of `batch` random targets against reconstructions that
/// are the targets plus Gaussian-like noise, across temperatures.
pub fn contrastive_curve(batch: usize, dim: usize, noise: f64, seed: u64) -> Result<Vec<ContrastivePoint>, String> {
    if batch == 0 || dim == 0 {
        return Err("batch and dim must be positive".into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut uniform = |len: usize| (0..len).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect::<Vec<f64>>();
    let target = uniform(batch * dim);
    let recon: Vec<f64> = target.iter().zip(uniform(batch * dim)).map(|(t, e)| t + noise * e).collect();
    [0.02, 0.05, 0.1, 0.15, 0.2, 0.3, 0.5, 0.75, 1.0, 2.0]
        .iter()
        .map(|&temperature| {
            let mut g = Graph::new();
            let e = g.constant(Tensor::matrix(batch, dim, target.clone()));
            let r = g.constant(Tensor::matrix(batch, dim, recon.clone()));
            let l = contrastive_loss(&mut g, e, r, temperature).map_err(|e| e.to_string())?;
            Ok(ContrastivePoint {
                temperature,
                loss: g.value(l).item(),
            })
        })
        .collect()
}

fn to_js<T: Serialize>(result: Result<T, String>) -> Result<String, JsValue> {
    result
        .and_then(|v| serde_json::to_string(&v).map_err(|e| e.to_string()))
        .map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen(js_name = summarizeCohort)]
pub fn summarize_cohort_js(n: usize, mnar: bool, effect: f64, seed: u32) -> Result<String, JsValue> {
    to_js(summarize_cohort(n, mnar, effect, seed.into()))
}

#[wasm_bindgen(js_name = exploreRectifier)]
pub fn explore_rectifier_js(
    n: usize,
    mnar: bool,
    effect: f64,
    kappa: f64,
    min_support: usize,
    seed: u32,
) -> Result<String, JsValue> {
    to_js(explore_rectifier(n, mnar, effect, kappa, min_support, seed.into()))
}

#[wasm_bindgen(js_name = contrastiveCurve)]
pub fn contrastive_curve_js(batch: usize, dim: usize, noise: f64, seed: u32) -> Result<String, JsValue> {
    to_js(contrastive_curve(batch, dim, noise, seed.into()))
}
