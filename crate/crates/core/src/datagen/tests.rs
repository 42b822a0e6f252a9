use super::*;

fn config(n: usize, seed: u64) -> GenConfig {
    GenConfig {
        n_patients: n,
        seed,
        ..GenConfig::default()
    }
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

#[test]
fn structured_modality_is_always_observed() {
    for mode in [MissingMode::Mnar, MissingMode::Mcar] {
        let ds = generate(&GenConfig {
            mode,
            ..config(2000, 4)
        })
        .unwrap();
        assert!(ds.records.iter().all(|r| r.mask.observed(0) && r.features[0].is_some()));
        assert!(ds.records.iter().all(|r| r.check(&ds.dims).is_ok()));
    }
}

#[test]
fn same_seed_is_bit_identical() {
    let a = generate(&config(300, 21)).unwrap();
    let b = generate(&config(300, 21)).unwrap();
    assert_eq!(a, b);
    let c = generate(&config(300, 22)).unwrap();
    assert_ne!(a, c);
}

#[test]
fn records_do_not_depend_on_cohort_size() {
    let small = generate(&config(50, 3)).unwrap();
    let large = generate(&config(500, 3)).unwrap();
    assert_eq!(small.records[..], large.records[..50]);
}

#[test]
fn mcar_masks_are_uncorrelated_with_labels() {
    // Pattern effects are a direct δ → y arrow, so independence needs τ* = 0.
    let ds = generate(&GenConfig {
        mode: MissingMode::Mcar,
        pattern_effects: Vec::new(),
        ..config(10_000, 8)
    })
    .unwrap();
    for m in 1..ds.num_modalities() {
        let delta: Vec<f64> = ds.records.iter().map(|r| f64::from(u8::from(r.mask.observed(m)))).collect();
        for t in 0..ds.num_tasks() {
            let y: Vec<f64> = ds.records.iter().map(|r| f64::from(r.labels[t])).collect();
            let r = pearson(&delta, &y);
            assert!(r.abs() < 0.03, "modality {m} task {t}: r = {r}");
        }
    }
}

#[test]
fn mnar_full_pattern_has_higher_label_rate_than_structured_only() {
    let ds = generate(&config(10_000, 9)).unwrap();
    let full: Pattern = "1111".parse().unwrap();
    let s_only: Pattern = "1000".parse().unwrap();
    let rate = |p: Pattern, t: usize| {
        let ys: Vec<f64> = ds
            .records
            .iter()
            .filter(|r| r.mask == p)
            .map(|r| f64::from(r.labels[t]))
            .collect();
        assert!(ys.len() > 100, "pattern {p} has {} records", ys.len());
        ys.iter().sum::<f64>() / ys.len() as f64
    };
    for t in 0..ds.num_tasks() {
        assert!(rate(full, t) > rate(s_only, t), "task {t}");
    }
}

#[test]
fn planted_effect_is_recovered_by_monte_carlo() {
    let ds = generate(&config(40_000, 10)).unwrap();
    let target: Pattern = "1101".parse().unwrap();
    let residuals: Vec<f64> = ds
        .records
        .iter()
        .filter(|r| r.mask == target)
        .map(|r| f64::from(r.labels[0]) - r.oracle().unwrap().base_probability[0])
        .collect();
    assert!(residuals.len() >= 5_000, "{}", residuals.len());
    let mean = residuals.iter().sum::<f64>() / residuals.len() as f64;
    assert!((mean - 0.08).abs() <= 0.01, "mean residual {mean}");
}

#[test]
fn pattern_support_allows_per_pattern_analysis() {
    let ds = generate(&config(20_000, 12)).unwrap();
    let well_supported = ds.pattern_counts().values().filter(|&&c| c >= 200).count();
    assert!(well_supported >= 5, "{:?}", ds.pattern_counts());
}

/// Newton–Raphson logistic regression of `y` on `[1, h*]`.
fn logistic_fit(xs: &[Vec<f64>], ys: &[f64]) -> Vec<f64> {
    let p = xs[0].len() + 1;
    let mut beta = vec![0.0; p];
    for _ in 0..25 {
        let mut grad = vec![0.0; p];
        let mut hess = vec![vec![0.0; p]; p];
        for (x, &y) in xs.iter().zip(ys) {
            let row: Vec<f64> = std::iter::once(1.0).chain(x.iter().copied()).collect();
            let eta: f64 = row.iter().zip(&beta).map(|(a, b)| a * b).sum();
            let mu = 1.0 / (1.0 + (-eta).exp());
            for i in 0..p {
                grad[i] += (y - mu) * row[i];
                for j in 0..p {
                    hess[i][j] += mu * (1.0 - mu) * row[i] * row[j];
                }
            }
        }
        // Solve hess · step = grad by Gaussian elimination.
        let mut a: Vec<Vec<f64>> = hess
            .iter()
            .zip(&grad)
            .map(|(r, g)| r.iter().copied().chain(std::iter::once(*g)).collect())
            .collect();
        for c in 0..p {
            let pivot = (c..p).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap();
            a.swap(c, pivot);
            for r in 0..p {
                if r != c {
                    let f = a[r][c] / a[c][c];
                    for k in c..=p {
                        a[r][k] -= f * a[c][k];
                    }
                }
            }
        }
        for i in 0..p {
            beta[i] += a[i][p] / a[i][i];
        }
    }
    beta
}

#[test]
fn outcome_coefficients_are_recoverable_from_latent() {
    let cfg = config(20_000, 13);
    let ds = generate(&cfg).unwrap();
    let xs: Vec<Vec<f64>> = ds.records.iter().map(|r| r.oracle().unwrap().latent.clone()).collect();
    for (t, task) in cfg.tasks.iter().enumerate() {
        let ys: Vec<f64> = ds.records.iter().map(|r| f64::from(r.labels[t])).collect();
        let beta = logistic_fit(&xs, &ys);
        let est = &beta[1..];
        let dot: f64 = est.iter().zip(&task.coefficients).map(|(a, b)| a * b).sum();
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let cosine = dot / (norm(est) * norm(&task.coefficients));
        assert!(cosine >= 0.95, "task {}: cosine {cosine}", task.name);
    }
}

#[test]
fn oversized_pattern_effect_is_rejected() {
    let mut cfg = config(2000, 1);
    cfg.pattern_effects = vec![PatternEffect {
        pattern: "1101".parse().unwrap(),
        task: "mortality".into(),
        effect: -0.5,
    }];
    assert!(matches!(generate(&cfg), Err(DataError::ProbabilityOutOfRange { .. })));
}

#[test]
fn invalid_configs_are_rejected() {
    let mut cfg = config(10, 1);
    cfg.tasks.truncate(1);
    assert!(generate(&cfg).is_err());
    let mut cfg = config(10, 1);
    cfg.pattern_effects[0].pattern = "0101".parse().unwrap();
    assert!(generate(&cfg).is_err());
    let mut cfg = config(10, 1);
    cfg.tasks[0].coefficients.pop();
    assert!(generate(&cfg).is_err());
}

#[test]
fn mcar_mode_ignores_severity_and_content_weights() {
    let base = GenConfig {
        mode: MissingMode::Mcar,
        ..config(400, 5)
    };
    let mut tweaked = base.clone();
    for m in &mut tweaked.modalities {
        m.severity_weight = 9.0;
        m.content_weight = -9.0;
    }
    assert_eq!(generate(&base).unwrap().patterns(), generate(&tweaked).unwrap().patterns());
}

#[test]
fn jsonl_round_trip_keeps_missing_markers() {
    let ds = generate(&config(40, 2)).unwrap();
    let mut buf = Vec::new();
    ds.write_jsonl(&mut buf, true).unwrap();
    let text = String::from_utf8(buf.clone()).unwrap();
    assert_eq!(text.lines().count(), 40);
    assert!(text.contains("null"));
    assert!(text.contains("\"hidden\""));
    let back = Dataset::read_jsonl(&buf[..]).unwrap();
    assert_eq!(back, ds);

    let mut plain = Vec::new();
    ds.write_jsonl(&mut plain, false).unwrap();
    assert!(!String::from_utf8(plain.clone()).unwrap().contains("hidden"));
    let back = Dataset::read_jsonl(&plain[..]).unwrap();
    assert!(back.records.iter().all(|r| r.oracle().is_none()));
    assert_eq!(back.records[3].features, ds.records[3].features);
}

#[test]
fn inconsistent_mask_is_rejected_on_read() {
    let line = r#"{"id":0,"x":{"S":[1.0],"I":null},"mask":"11","y":{"a":0,"b":1}}"#;
    assert!(Dataset::read_jsonl(line.as_bytes()).is_err());
    let ok = r#"{"id":0,"x":{"S":[1.0],"I":null},"mask":"10","y":{"a":0,"b":1}}"#;
    let with_i = r#"{"id":1,"x":{"S":[1.0],"I":[2.0,3.0]},"mask":"11","y":{"a":1,"b":1}}"#;
    let ds = Dataset::read_jsonl(format!("{ok}\n{with_i}\n").as_bytes()).unwrap();
    assert_eq!(ds.dims, vec![1, 2]);
}

#[test]
fn pattern_text_round_trip() {
    for p in Pattern::all(4) {
        let s = p.to_string();
        assert_eq!(s.len(), 4);
        assert_eq!(s.parse::<Pattern>().unwrap(), p);
    }
    assert!("10x1".parse::<Pattern>().is_err());
}
