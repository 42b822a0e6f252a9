use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crl_mmnar::datagen::{generate, GenConfig, MissingMode, Pattern};
use crl_mmnar::kernel::{AdamW, AdamWConfig, Graph, ParamStore, Tensor};
use crl_mmnar::metrics::{auc, auprc, brier, pattern_report};
use crl_mmnar::outcome::{fit_rectifier, rectify, FoldRole};
use crl_mmnar::reconstruction::contrastive_loss;

fn values(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-3.0f64..3.0, len)
}

/// Group size, head count, head width, and a mask with at least one
/// observed token per group.
fn attention_case() -> impl Strategy<Value = (usize, usize, usize, Vec<bool>)> {
    (1usize..4, 1usize..5, 1usize..3, 1usize..4).prop_flat_map(|(n, tokens, heads, hd)| {
        let mask = prop::collection::vec(any::<bool>(), n * tokens).prop_map(move |mut m| {
            for i in 0..n {
                m[i * tokens] |= !m[i * tokens..(i + 1) * tokens].iter().any(|&b| b);
            }
            m
        });
        (Just(tokens), Just(heads), Just(hd), mask)
    })
}

fn task_inputs(n: usize) -> impl Strategy<Value = (Vec<f64>, Vec<u8>, Vec<u8>)> {
    (
        prop::collection::vec(0.0f64..=1.0, n),
        prop::collection::vec(0u8..=1, n),
        prop::collection::vec(0u8..4, n),
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn attention_ignores_masked_keys((tokens, heads, hd, mask) in attention_case(), seed in any::<u64>()) {
        let rows = mask.len();
        let d = heads * hd;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut random = || Tensor::matrix(rows, d, (0..rows * d).map(|_| rng.random_range(-3.0..3.0)).collect());
        let mut g = Graph::new();
        let (q, k, v) = (g.constant(random()), g.constant(random()), g.constant(random()));
        let out = g.masked_attention(q, k, v, &mask, tokens, heads).unwrap();
        prop_assert!(g.value(out).data().iter().all(|x| x.is_finite()));
        let weights = g.attention_weights(out).unwrap();
        for (r, row) in weights.chunks(tokens).enumerate() {
            let group = r / (heads * tokens);
            let active = &mask[group * tokens..(group + 1) * tokens];
            for (b, &w) in row.iter().enumerate() {
                if !active[b] {
                    prop_assert_eq!(w, 0.0);
                }
            }
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_fills_every_parameter(x in values(12), w in values(8), b in values(2)) {
        let mut store = ParamStore::new();
        let wid = store.add("w", Tensor::matrix(4, 2, w));
        let bid = store.add("b", Tensor::matrix(1, 2, b));
        let unused = store.add("unused", Tensor::matrix(3, 3, vec![0.0; 9]));
        let mut g = Graph::new();
        let xv = g.constant(Tensor::matrix(3, 4, x));
        let (wv, bv) = (g.param(&store, wid), g.param(&store, bid));
        let y = g.linear(xv, wv, bv).unwrap();
        let y = g.sigmoid(y);
        let loss = g.mean_all(y);
        let grads = g.backward(loss).unwrap();
        prop_assert!(grads.param(wid).is_some() && grads.param(bid).is_some());
        let dense = grads.dense(&store);
        for id in [wid, bid, unused] {
            prop_assert_eq!(dense[id.index()].shape(), store.get(id).shape());
            prop_assert!(dense[id.index()].data().iter().all(|v| v.is_finite()));
        }
        prop_assert!(dense[unused.index()].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn adamw_counts_steps_and_keeps_shapes(grads in prop::collection::vec(values(6), 1..6)) {
        let mut store = ParamStore::new();
        let id = store.add("p", Tensor::matrix(2, 3, vec![0.5; 6]));
        let mut opt = AdamW::new(AdamWConfig::default(), &store);
        let mut last = opt.steps();
        for g in grads {
            opt.step(&mut store, &[Tensor::matrix(2, 3, g)]).unwrap();
            prop_assert!(opt.steps() > last);
            last = opt.steps();
            prop_assert_eq!(store.get(id).shape(), &[2, 3]);
            prop_assert!(store.get(id).data().iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn generated_records_match_their_masks(n in 1usize..120, seed in any::<u64>(), mcar in any::<bool>()) {
        let ds = generate(&GenConfig {
            n_patients: n,
            seed,
            mode: if mcar { MissingMode::Mcar } else { MissingMode::Mnar },
            ..GenConfig::default()
        })
        .unwrap();
        prop_assert_eq!(ds.len(), n);
        for r in &ds.records {
            prop_assert!(r.mask.observed(0));
            for (m, f) in r.features.iter().enumerate() {
                prop_assert_eq!(f.is_some(), r.mask.observed(m));
                if let Some(x) = f {
                    prop_assert_eq!(x.len(), ds.dims[m]);
                }
            }
        }
    }

    #[test]
    fn rectify_stays_a_probability(y in 0.0f64..=1.0, tau in -1.0f64..1.0, kappa in 0.0f64..0.5) {
        let r = rectify(y, tau, kappa);
        prop_assert!((0.0..=1.0).contains(&r));
        if tau.abs() <= kappa {
            prop_assert_eq!(r, y);
        }
    }

    #[test]
    fn rectifier_gate_and_cross_fitting(
        (probs, labels, codes) in task_inputs(80),
        folds in prop::collection::vec(0usize..2, 80),
        kappa in 0.0f64..0.3,
        min_support in 0usize..15,
    ) {
        let all: Vec<Pattern> = ["1111", "1101", "1001", "1000"].iter().map(|s| s.parse().unwrap()).collect();
        let patterns: Vec<Pattern> = codes.iter().map(|&c| all[c as usize]).collect();
        let p = Tensor::matrix(80, 1, probs);
        let y = Tensor::matrix(80, 1, labels.iter().map(|&v| f64::from(v)).collect());
        let table = fit_rectifier(&p, &y, &patterns, &folds, &["t".into()], kappa, min_support).unwrap();
        for (pattern, t, cell) in table.cells() {
            for k in 0..2 {
                let rows: Vec<usize> = (0..80).filter(|&i| patterns[i] == pattern && folds[i] == k).collect();
                prop_assert_eq!(cell.support[k], rows.len());
                let expected = cell.tau[k].is_some_and(|tau| tau.abs() > kappa) && rows.len() >= min_support;
                prop_assert_eq!(cell.applied[k], expected);
                // A validation patient in fold k only ever sees fold 1 - k.
                let corrected = table.correct(0.4, pattern, t, FoldRole::Validation(k)).value();
                let other = 1 - k;
                let want = if cell.applied[other] { (0.4 + cell.tau[other].unwrap()).clamp(0.0, 1.0) } else { 0.4 };
                prop_assert_eq!(corrected, want);
            }
        }
    }

    #[test]
    fn metrics_are_bounded((scores, labels, codes) in task_inputs(40)) {
        prop_assert!((0.0..=1.0).contains(&brier(&scores, &labels)));
        if labels.contains(&0) && labels.contains(&1) {
            prop_assert!((0.0..=1.0).contains(&auc(&scores, &labels).unwrap()));
            prop_assert!((0.0..=1.0).contains(&auprc(&scores, &labels).unwrap()));
        }
        let all: Vec<Pattern> = ["1111", "1101", "1001", "1000"].iter().map(|s| s.parse().unwrap()).collect();
        let patterns: Vec<Pattern> = codes.iter().map(|&c| all[c as usize]).collect();
        let p = Tensor::matrix(40, 1, scores);
        let y = Tensor::matrix(40, 1, labels.iter().map(|&v| f64::from(v)).collect());
        for floor in [0, 8, 100] {
            let report = pattern_report(&p, &y, &patterns, floor);
            prop_assert_eq!(report.iter().map(|r| r.support).sum::<usize>(), 40);
        }
    }

    #[test]
    fn contrastive_loss_is_a_finite_cross_entropy(n in 1usize..6, e in values(18), r in values(18), tau in 0.05f64..2.0) {
        let mut g = Graph::new();
        let ev = g.constant(Tensor::matrix(n, 3, e[..n * 3].to_vec()));
        let rv = g.constant(Tensor::matrix(n, 3, r[..n * 3].to_vec()));
        let l = contrastive_loss(&mut g, ev, rv, tau).unwrap();
        let v = g.value(l).item();
        prop_assert!(v.is_finite() && v >= -1e-12);
    }
}
