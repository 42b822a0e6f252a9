use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

const STEP: f64 = 1e-5;
const REL_TOL: f64 = 1e-4;

fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.random_range(-1.5..1.5)).collect(),
    )
}

/// Builds `Σ out ⊙ proj` so every output coordinate contributes.
fn project(g: &mut Graph, out: Var, proj: &Tensor) -> Var {
    let weighted = g.mul_const(out, proj.clone()).unwrap();
    g.sum_all(weighted)
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Central-difference check of `build` against the tape gradient for
/// every input coordinate.
fn check_op(
    name: &str,
    inputs: &[Tensor],
    build: &dyn Fn(&mut Graph, &[Var]) -> Var,
    proj_seed: u64,
) {
    let eval = |xs: &[Tensor]| -> (f64, Option<Gradients>, Vec<Var>) {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &vars);
        let shape = g.value(out).shape().to_vec();
        let mut prng = ChaCha8Rng::seed_from_u64(proj_seed);
        let n: usize = shape.iter().product();
        let proj = Tensor::new(shape, (0..n).map(|_| prng.random_range(0.5..1.5)).collect()).unwrap();
        let loss = project(&mut g, out, &proj);
        let value = g.value(loss).item();
        let grads = g.backward(loss).unwrap();
        (value, Some(grads), vars)
    };
    let (_, grads, vars) = eval(inputs);
    let grads = grads.unwrap();
    for (which, input) in inputs.iter().enumerate() {
        let analytic = grads
            .of(vars[which])
            .cloned()
            .unwrap_or_else(|| input.map(|_| 0.0));
        for c in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[which].data_mut()[c] += STEP;
            let mut minus = inputs.to_vec();
            minus[which].data_mut()[c] -= STEP;
            let numeric = (eval(&plus).0 - eval(&minus).0) / (2.0 * STEP);
            let a = analytic.data()[c];
            assert!(
                rel_err(a, numeric) < REL_TOL || (a - numeric).abs() < 1e-9,
                "{name}: input {which} coord {c}: analytic {a} numeric {numeric}"
            );
        }
    }
}

/// Runs `check_op` at 20 random points.
fn sweep(name: &str, shapes: &[(usize, usize)], build: &dyn Fn(&mut Graph, &[Var]) -> Var) {
    let mut rng = ChaCha8Rng::seed_from_u64(name.len() as u64 * 7919);
    for point in 0..20 {
        let inputs: Vec<Tensor> = shapes.iter().map(|&(r, c)| random_tensor(&mut rng, r, c)).collect();
        check_op(name, &inputs, build, point);
    }
}

#[test]
fn sigmoid_at_zero_is_half() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::scalar(0.0));
    let y = g.sigmoid(x);
    assert_eq!(g.value(y).item(), 0.5);
    let grads = g.backward(y).unwrap();
    assert_eq!(grads.of(x).unwrap().item(), 0.25);
}

#[test]
fn square_derivative() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::scalar(3.0));
    let y = g.mul(x, x).unwrap();
    let grads = g.backward(y).unwrap();
    assert_eq!(grads.of(x).unwrap().item(), 6.0);
    assert_eq!(grads.of(y).unwrap().item(), 1.0);
}

#[test]
fn softmax_of_equal_logits_is_uniform() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::row_vector(vec![2.5, 2.5, 2.5]));
    let y = g.softmax_rows(x);
    for &p in g.value(y).data() {
        assert!((p - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut g = Graph::new();
    let x = g.constant(Tensor::matrix(
        50,
        7,
        (0..350).map(|_| rng.random_range(-40.0..40.0)).collect(),
    ));
    let y = g.softmax_rows(x);
    for r in 0..50 {
        let s: f64 = g.value(y).row(r).iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
}

#[test]
fn cosine_self_similarity_is_one() {
    let mut g = Graph::new();
    let v = g.constant(Tensor::row_vector(vec![0.3, -2.0, 5.0, 1e-3]));
    let c = g.cosine_sim(v, v).unwrap();
    assert!((g.value(c).item() - 1.0).abs() < 1e-12);
}

#[test]
fn masked_mean_pool_single_active_row_is_exact() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::matrix(3, 2, vec![0.1, 0.7, -3.3, 1.0 / 3.0, 9.0, 8.0]));
    let pooled = g.masked_mean_pool(x, &[false, true, false], 3).unwrap();
    assert_eq!(g.value(pooled).data(), &[-3.3, 1.0 / 3.0]);
}

#[test]
fn masked_attention_puts_no_mass_on_missing_keys() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut g = Graph::new();
    let q = g.constant(random_tensor(&mut rng, 8, 4));
    let k = g.constant(random_tensor(&mut rng, 8, 4));
    let v = g.constant(random_tensor(&mut rng, 8, 4));
    let mask = [true, false, true, false, true, true, true, false];
    let out = g.masked_attention(q, k, v, &mask, 4, 2).unwrap();
    let w = g.attention_weights(out).unwrap();
    for group in 0..2 {
        for head in 0..2 {
            for a in 0..4 {
                let base = ((group * 2 + head) * 4 + a) * 4;
                let row = &w[base..base + 4];
                let mut total = 0.0;
                for b in 0..4 {
                    if mask[group * 4 + b] {
                        total += row[b];
                    } else {
                        assert_eq!(row[b], 0.0);
                    }
                }
                assert!((total - 1.0).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn shape_mismatch_names_op_and_shapes() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(2, 3));
    let b = g.constant(Tensor::zeros(2, 3));
    let err = g.matmul(a, b).unwrap_err().to_string();
    assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
}

#[test]
fn non_scalar_loss_is_rejected() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(2, 3));
    assert!(matches!(g.backward(a), Err(KernelError::NonScalarLoss(_))));
}

#[test]
fn fd_matmul() {
    sweep("matmul", &[(3, 4), (4, 2)], &|g, v| g.matmul(v[0], v[1]).unwrap());
}

#[test]
fn fd_add_bias_and_elementwise() {
    sweep("add_bias", &[(3, 4), (1, 4)], &|g, v| g.add_bias(v[0], v[1]).unwrap());
    sweep("add", &[(2, 3), (2, 3)], &|g, v| g.add(v[0], v[1]).unwrap());
    sweep("sub", &[(2, 3), (2, 3)], &|g, v| g.sub(v[0], v[1]).unwrap());
    sweep("mul", &[(2, 3), (2, 3)], &|g, v| g.mul(v[0], v[1]).unwrap());
    sweep("scale", &[(2, 3)], &|g, v| g.scale(v[0], -1.7));
}

#[test]
fn fd_activations() {
    sweep("sigmoid", &[(3, 3)], &|g, v| g.sigmoid(v[0]));
    sweep("tanh", &[(3, 3)], &|g, v| g.tanh(v[0]));
    sweep("relu", &[(3, 3)], &|g, v| g.relu(v[0]));
    sweep("softmax_rows", &[(3, 5)], &|g, v| g.softmax_rows(v[0]));
}

#[test]
fn fd_reductions() {
    sweep("mean_axis0", &[(3, 4)], &|g, v| g.mean_axis(v[0], 0).unwrap());
    sweep("mean_axis1", &[(3, 4)], &|g, v| g.mean_axis(v[0], 1).unwrap());
    sweep("sum_all", &[(3, 4)], &|g, v| g.sum_all(v[0]));
    sweep("row_norm", &[(3, 4)], &|g, v| g.row_norm(v[0]));
    sweep("cosine_sim", &[(3, 4), (5, 4)], &|g, v| g.cosine_sim(v[0], v[1]).unwrap());
}

#[test]
fn fd_structural() {
    sweep("concat_cols", &[(2, 3), (2, 1), (2, 2)], &|g, v| g.concat_cols(v).unwrap());
    sweep("interleave", &[(2, 3), (2, 3), (2, 3)], &|g, v| g.interleave(v).unwrap());
    sweep("add_tiled", &[(6, 3), (3, 3)], &|g, v| g.add_tiled(v[0], v[1]).unwrap());
    sweep("gather_rows", &[(4, 3)], &|g, v| g.gather_rows(v[0], &[2, 0, 2]).unwrap());
    sweep("scatter_rows", &[(2, 3)], &|g, v| g.scatter_rows(v[0], &[3, 1], 5).unwrap());
    sweep("masked_mean_pool", &[(6, 3)], &|g, v| {
        g.masked_mean_pool(v[0], &[true, false, true, true, true, false], 3)
            .unwrap()
    });
}

#[test]
fn fd_masked_attention() {
    let mask = [true, true, false, true, false, true, true, true, true, false, false, false];
    sweep("masked_attention", &[(12, 4), (12, 4), (12, 4)], &|g, v| {
        g.masked_attention(v[0], v[1], v[2], &mask, 4, 2).unwrap()
    });
}

#[test]
fn fd_losses() {
    let targets = Tensor::matrix(2, 3, vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0]);
    let t2 = targets.clone();
    sweep("bce", &[(2, 3)], &move |g, v| g.bce_with_logits(v[0], t2.clone(), 0.0).unwrap());
    let t3 = targets.clone();
    sweep("focal", &[(2, 3)], &move |g, v| g.bce_with_logits(v[0], t3.clone(), 2.0).unwrap());
    sweep("softmax_xent", &[(3, 4)], &|g, v| g.softmax_xent(v[0], &[0, 3, 1]).unwrap());
    sweep("squared_error_sum", &[(2, 3), (2, 3)], &|g, v| g.squared_error_sum(v[0], v[1]).unwrap());
    sweep("mse", &[(2, 3), (2, 3)], &|g, v| g.mse(v[0], v[1]).unwrap());
}

#[test]
fn focal_with_zero_gamma_matches_bce() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let logits = random_tensor(&mut rng, 4, 3);
    let targets = Tensor::matrix(4, 3, (0..12).map(|i| (i % 2) as f64).collect());
    let mut g = Graph::new();
    let x = g.constant(logits.clone());
    let plain = g.bce_with_logits(x, targets.clone(), 0.0).unwrap();
    let focal = g.bce_with_logits(x, targets, 1e-300).unwrap();
    for (a, b) in g.value(plain).data().iter().zip(g.value(focal).data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn forward_and_backward_are_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut g = Graph::new();
        let a = g.constant(random_tensor(&mut rng, 5, 6));
        let b = g.constant(random_tensor(&mut rng, 6, 3));
        let c = g.matmul(a, b).unwrap();
        let s = g.softmax_rows(c);
        let t = g.tanh(s);
        let l = g.sum_all(t);
        let grads = g.backward(l).unwrap();
        (g.value(l).item().to_bits(), grads.of(a).unwrap().clone())
    };
    assert_eq!(run(), run());
}
