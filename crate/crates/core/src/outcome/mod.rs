//! Multitask prediction heads and the cross-fitted pattern rectifier.

use rand::Rng;

use crate::fusion::dropout_mask;
use crate::kernel::{sigmoid, Graph, Init, KernelError, ParamId, ParamStore, Tensor, Var};

mod rectifier;
pub use rectifier::{
    fit_rectifier, rectifier_folds, rectify, select_kappa, Correction, FoldRole, RectifierCell, RectifierTable,
    DEFAULT_KAPPA_GRID, FALLBACK_KAPPA,
};

/// Task weights `(readmission, icu, mortality)`.
pub const DEFAULT_TASK_WEIGHTS: [f64; 3] = [1.2, 1.0, 1.5];

/// One two-layer MLP `h → logit` per task; no parameters are shared.
#[derive(Debug, Clone)]
pub struct TaskHeads {
    heads: Vec<[ParamId; 4]>,
    hidden: usize,
}

impl TaskHeads {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        tasks: &[String],
        embed_dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let heads = tasks
            .iter()
            .map(|t| {
                [
                    store.add_init(format!("head.{t}.w1"), embed_dim, hidden, Init::Glorot, rng),
                    store.add_init(format!("head.{t}.b1"), 1, hidden, Init::Zeros, rng),
                    store.add_init(format!("head.{t}.w2"), hidden, 1, Init::Glorot, rng),
                    store.add_init(format!("head.{t}.b2"), 1, 1, Init::Zeros, rng),
                ]
            })
            .collect();
        Self { heads, hidden }
    }

    pub fn num_tasks(&self) -> usize {
        self.heads.len()
    }

    pub fn output_params(&self, t: usize) -> (ParamId, ParamId) {
        (self.heads[t][2], self.heads[t][3])
    }

    /// Logits `[n, T]`. With `dropout = Some((p, rng))` the hidden layer of
    /// every head is dropped out.
    pub fn logits<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        h: Var,
        mut dropout: Option<(f64, &mut R)>,
    ) -> Result<Var, KernelError> {
        let n = g.value(h).rows();
        let mut cols = Vec::with_capacity(self.heads.len());
        for ids in &self.heads {
            let [w1, b1, w2, b2] = ids.map(|p| g.param(store, p));
            let hid = g.linear(h, w1, b1)?;
            let mut hid = g.relu(hid);
            if let Some((p, rng)) = dropout.as_mut() {
                hid = g.mul_const(hid, dropout_mask(n, self.hidden, *p, *rng))?;
            }
            cols.push(g.linear(hid, w2, b2)?);
        }
        g.concat_cols(&cols)
    }
}

/// `ŷ = σ(logit)` elementwise.
pub fn predict(logits: &Tensor) -> Tensor {
    logits.map(sigmoid)
}

/// `Σ_t λ_t · mean_i BCE(logit_{i,t}, y_{i,t})`, optionally focal.
pub fn pred_loss(
    g: &mut Graph,
    logits: Var,
    labels: &Tensor,
    weights: &[f64],
    focal_gamma: f64,
) -> Result<Var, KernelError> {
    let (n, t) = (labels.rows(), labels.cols());
    if weights.len() != t {
        return Err(KernelError::InvalidArgument {
            op: "pred_loss",
            reason: format!("{} task weights for {t} tasks", weights.len()),
        });
    }
    let bce = g.bce_with_logits(logits, labels.clone(), focal_gamma)?;
    let scale = Tensor::matrix(
        n,
        t,
        (0..n).flat_map(|_| weights.iter().map(|w| w / n as f64)).collect(),
    );
    let weighted = g.mul_const(bce, scale)?;
    Ok(g.sum_all(weighted))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tasks() -> Vec<String> {
        ["readmission", "icu", "mortality"].iter().map(|s| s.to_string()).collect()
    }

    fn heads(zero: bool) -> (TaskHeads, ParamStore) {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let heads = TaskHeads::new(&mut store, &tasks(), 6, 5, &mut rng);
        if zero {
            for t in 0..3 {
                let (w, b) = heads.output_params(t);
                store.get_mut(w).data_mut().fill(0.0);
                store.get_mut(b).data_mut().fill(0.0);
            }
        }
        (heads, store)
    }

    fn run(heads: &TaskHeads, store: &ParamStore, h: Tensor) -> Tensor {
        let mut g = Graph::new();
        let hv = g.constant(h);
        let l = heads.logits::<ChaCha8Rng>(&mut g, store, hv, None).unwrap();
        predict(g.value(l))
    }

    #[test]
    fn zero_head_predicts_one_half() {
        let (heads, store) = heads(true);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let h = Tensor::matrix(4, 6, (0..24).map(|_| rng.random::<f64>() * 10.0 - 5.0).collect());
        let p = run(&heads, &store, h);
        assert_eq!(p.shape(), &[4, 3]);
        assert!(p.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn probabilities_are_strictly_inside_unit_interval() {
        let (heads, store) = heads(false);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let h = Tensor::matrix(20, 6, (0..120).map(|_| rng.random::<f64>() * 40.0 - 20.0).collect());
        let p = run(&heads, &store, h);
        assert!(p.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn saturated_predictions_have_negligible_loss() {
        let labels = Tensor::from_rows(&[vec![1.0, 0.0, 1.0], vec![0.0, 0.0, 1.0]]);
        let logits = labels.map(|y| if y > 0.5 { 30.0 } else { -30.0 });
        let mut g = Graph::new();
        let l = g.constant(logits);
        let loss = pred_loss(&mut g, l, &labels, &DEFAULT_TASK_WEIGHTS, 0.0).unwrap();
        assert!(g.value(loss).item() < 1e-6);
    }

    #[test]
    fn loss_is_weighted_sum_of_task_means() {
        let labels = Tensor::from_rows(&[vec![1.0, 0.0, 1.0], vec![0.0, 1.0, 1.0]]);
        let logits = Tensor::from_rows(&[vec![0.3, -1.0, 2.0], vec![0.1, 0.4, -0.7]]);
        let mut g = Graph::new();
        let l = g.constant(logits.clone());
        let loss = pred_loss(&mut g, l, &labels, &DEFAULT_TASK_WEIGHTS, 0.0).unwrap();
        let mut expected = 0.0;
        for t in 0..3 {
            let mut mean = 0.0;
            for i in 0..2 {
                let p = 1.0 / (1.0 + (-logits.get(i, t)).exp());
                let y = labels.get(i, t);
                mean += -(y * p.ln() + (1.0 - y) * (1.0 - p).ln()) / 2.0;
            }
            expected += DEFAULT_TASK_WEIGHTS[t] * mean;
        }
        assert!((g.value(loss).item() - expected).abs() < 1e-12);
    }

    #[test]
    fn focal_with_zero_focus_equals_cross_entropy() {
        let labels = Tensor::from_rows(&[vec![1.0, 0.0, 1.0], vec![0.0, 1.0, 0.0]]);
        let logits = Tensor::from_rows(&[vec![0.3, -1.0, 2.0], vec![0.1, 0.4, -0.7]]);
        let mut g = Graph::new();
        let l = g.constant(logits);
        let plain = pred_loss(&mut g, l, &labels, &DEFAULT_TASK_WEIGHTS, 0.0).unwrap();
        let focal = pred_loss(&mut g, l, &labels, &DEFAULT_TASK_WEIGHTS, 1e-300).unwrap();
        assert!((g.value(plain).item() - g.value(focal).item()).abs() <= 1e-12);
        let strong = pred_loss(&mut g, l, &labels, &DEFAULT_TASK_WEIGHTS, 2.0).unwrap();
        assert!(g.value(strong).item() < g.value(plain).item());
    }

    #[test]
    fn mismatched_weights_are_rejected() {
        let labels = Tensor::zeros(2, 3);
        let mut g = Graph::new();
        let l = g.constant(Tensor::zeros(2, 3));
        assert!(pred_loss(&mut g, l, &labels, &[1.0, 1.0], 0.0).is_err());
    }
}
