use crl_mmnar_demo::{contrastive_curve, explore_rectifier, summarize_cohort};

#[test]
fn cohort_summary_shares_add_up() {
    let s = summarize_cohort(2000, true, 0.08, 1).unwrap();
    let total: usize = s.patterns.iter().map(|p| p.count).sum();
    assert_eq!(total, 2000);
    assert!((s.patterns.iter().map(|p| p.share).sum::<f64>() - 1.0).abs() < 1e-12);
    assert_eq!(s.observed_share[0], 1.0);
    assert!(s.patterns.iter().all(|p| p.rates.len() == s.tasks.len()));
}

#[test]
fn planted_cell_fires_and_lowers_brier() {
    let view = explore_rectifier(20_000, true, 0.08, 0.05, 20, 3).unwrap();
    let cell = view
        .cells
        .iter()
        .find(|c| c.pattern == "1101" && c.task == "readmission")
        .unwrap();
    assert_eq!(cell.planted, 0.08);
    assert!(cell.applied.iter().any(|&a| a));
    assert!(cell.brier_after.unwrap() < cell.brier_before.unwrap());
    let json = serde_json::to_string(&view).unwrap();
    assert!(json.contains("\"applied_fraction\""));
}

#[test]
fn contrastive_loss_rises_with_reconstruction_noise() {
    let clean = contrastive_curve(16, 8, 0.0, 0).unwrap();
    let noisy = contrastive_curve(16, 8, 2.0, 0).unwrap();
    assert_eq!(clean.len(), noisy.len());
    assert!(clean.iter().zip(&noisy).all(|(c, n)| c.loss < n.loss));
    assert!(contrastive_curve(0, 8, 0.1, 0).is_err());
}
