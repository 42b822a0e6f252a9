use std::collections::HashMap;

use super::tensor::{matmul, matmul_nt, matmul_tn};
use super::{KernelError, ParamId, ParamStore, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

const COSINE_EPS: f64 = 1e-12;

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Tensor),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    SoftmaxRows(Var),
    MeanAxis(Var, usize),
    SumAll(Var),
    RowNorm(Var),
    CosineSim {
        a: Var,
        b: Var,
        a_norm: Vec<f64>,
        b_norm: Vec<f64>,
    },
    ConcatCols(Vec<Var>),
    Interleave(Vec<Var>),
    AddTiled(Var, Var),
    MaskedMeanPool {
        input: Var,
        mask: Vec<bool>,
        tokens: usize,
    },
    MaskedAttention {
        q: Var,
        k: Var,
        v: Var,
        mask: Vec<bool>,
        tokens: usize,
        heads: usize,
        weights: Vec<f64>,
    },
    BceWithLogits {
        logits: Var,
        targets: Tensor,
        focal_gamma: f64,
    },
    SoftmaxXent {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    SquaredErrorSum(Var, Var),
    GatherRows(Var, Vec<usize>),
    ScatterRows(Var, Vec<usize>),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

/// Append-only tape. Rebuilt for every batch.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, Var>,
}

/// Gradients for every node reachable from the loss.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    pub fn of(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient w.r.t. a parameter; parameters the loss does not depend on
    /// get `None`.
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|(_, v)| self.grads[v.0].as_ref())
    }

    /// Dense gradient list in store order, zero-filled for unused parameters.
    pub fn dense(&self, store: &ParamStore) -> Vec<Tensor> {
        let mut by_id: HashMap<ParamId, Var> = HashMap::new();
        for &(p, v) in &self.params {
            by_id.insert(p, v);
        }
        store
            .iter()
            .map(|(id, _, t)| {
                by_id
                    .get(&id)
                    .and_then(|v| self.grads[v.0].clone())
                    .unwrap_or_else(|| Tensor::new(t.shape().to_vec(), vec![0.0; t.len()]).unwrap())
            })
            .collect()
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> KernelError {
    KernelError::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

/// Logistic function, evaluated without overflow for large |x|.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// ln(1 + e^x) without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value)
    }

    /// Records a parameter leaf; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_nodes.get(&id) {
            return v;
        }
        let v = self.push(Op::Param, store.get(id).clone());
        self.param_nodes.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, KernelError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.rows() {
            return Err(mismatch("matmul", ta, tb));
        }
        let (n, k, m) = (ta.rows(), ta.cols(), tb.cols());
        let out = Tensor::matrix(n, m, matmul(ta.data(), tb.data(), n, k, m));
        Ok(self.push(Op::MatMul(a, b), out))
    }

    /// `a[n,m] + bias[1,m]` broadcast over rows.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var, KernelError> {
        let (ta, tb) = (self.value(a), self.value(bias));
        if tb.rows() != 1 || tb.cols() != ta.cols() {
            return Err(mismatch("add_bias", ta, tb));
        }
        let mut out = ta.clone();
        let c = ta.cols();
        for r in 0..ta.rows() {
            for (o, b) in out.data_mut()[r * c..(r + 1) * c].iter_mut().zip(tb.data()) {
                *o += b;
            }
        }
        Ok(self.push(Op::AddBias(a, bias), out))
    }

    /// `x·W + b`
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var, KernelError> {
        let xw = self.matmul(x, w)?;
        self.add_bias(xw, b)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), KernelError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(op, ta, tb));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, KernelError> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(Op::Add(a, b), out))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, KernelError> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push(Op::Sub(a, b), out))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, KernelError> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push(Op::Mul(a, b), out))
    }

    /// Elementwise product with a constant (masks, dropout).
    pub fn mul_const(&mut self, a: Var, c: Tensor) -> Result<Var, KernelError> {
        let ta = self.value(a);
        if ta.shape() != c.shape() {
            return Err(mismatch("mul_const", ta, &c));
        }
        let out = ta.zip_map(&c, |x, y| x * y);
        Ok(self.push(Op::MulConst(a, c), out))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.push(Op::Scale(a, s), out)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(Op::Sigmoid(a), out)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        self.push(Op::Tanh(a), out)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        self.push(Op::Relu(a), out)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let c = ta.cols();
        let mut out = ta.clone();
        for row in out.data_mut().chunks_mut(c) {
            softmax_in_place(row);
        }
        self.push(Op::SoftmaxRows(a), out)
    }

    /// Mean over `axis` (0: rows → `[1,m]`, 1: columns → `[n,1]`).
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var, KernelError> {
        let ta = self.value(a);
        let (n, m) = (ta.rows(), ta.cols());
        let out = match axis {
            0 => {
                let mut acc = vec![0.0; m];
                for r in 0..n {
                    for (o, v) in acc.iter_mut().zip(ta.row(r)) {
                        *o += v;
                    }
                }
                Tensor::matrix(1, m, acc.into_iter().map(|s| s / n as f64).collect())
            }
            1 => Tensor::matrix(
                n,
                1,
                (0..n).map(|r| ta.row(r).iter().sum::<f64>() / m as f64).collect(),
            ),
            _ => {
                return Err(KernelError::InvalidArgument {
                    op: "mean_axis",
                    reason: format!("axis {axis} out of range for shape {:?}", ta.shape()),
                })
            }
        };
        Ok(self.push(Op::MeanAxis(a, axis), out))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(Op::SumAll(a), out)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Row-wise L2 norm, `[n,d] → [n,1]`.
    pub fn row_norm(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let out = Tensor::matrix(
            ta.rows(),
            1,
            (0..ta.rows())
                .map(|r| ta.row(r).iter().map(|v| v * v).sum::<f64>().sqrt())
                .collect(),
        );
        self.push(Op::RowNorm(a), out)
    }

    /// Cosine similarity between every row of `a[n,d]` and every row of
    /// `b[m,d]`, giving `[n,m]`. Norms are offset by 1e-12.
    pub fn cosine_sim(&mut self, a: Var, b: Var) -> Result<Var, KernelError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.cols() {
            return Err(mismatch("cosine_sim", ta, tb));
        }
        let (n, d, m) = (ta.rows(), ta.cols(), tb.rows());
        let a_norm: Vec<f64> = (0..n).map(|r| l2(ta.row(r)) + COSINE_EPS).collect();
        let b_norm: Vec<f64> = (0..m).map(|r| l2(tb.row(r)) + COSINE_EPS).collect();
        let mut dots = matmul_nt(ta.data(), tb.data(), n, d, m);
        for i in 0..n {
            for j in 0..m {
                dots[i * m + j] /= a_norm[i] * b_norm[j];
            }
        }
        let out = Tensor::matrix(n, m, dots);
        Ok(self.push(Op::CosineSim { a, b, a_norm, b_norm }, out))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, KernelError> {
        let first = self.value(parts[0]);
        let n = first.rows();
        for &p in &parts[1..] {
            if self.value(p).rows() != n {
                return Err(mismatch("concat_cols", first, self.value(p)));
            }
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(n * total);
        for r in 0..n {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        Ok(self.push(Op::ConcatCols(parts.to_vec()), Tensor::matrix(n, total, data)))
    }

    /// Stacks `M` tensors of shape `[n,d]` into `[n·M, d]`, row `i·M + m`
    /// holding row `i` of part `m`.
    pub fn interleave(&mut self, parts: &[Var]) -> Result<Var, KernelError> {
        let first = self.value(parts[0]);
        let (n, d) = (first.rows(), first.cols());
        for &p in &parts[1..] {
            if self.value(p).shape() != first.shape() {
                return Err(mismatch("interleave", first, self.value(p)));
            }
        }
        let mut data = Vec::with_capacity(n * d * parts.len());
        for r in 0..n {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let m = parts.len();
        Ok(self.push(Op::Interleave(parts.to_vec()), Tensor::matrix(n * m, d, data)))
    }

    /// `a[n·M, d] + tile(b[M, d])`.
    pub fn add_tiled(&mut self, a: Var, b: Var) -> Result<Var, KernelError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.cols() || ta.rows() % tb.rows() != 0 {
            return Err(mismatch("add_tiled", ta, tb));
        }
        let block = tb.len();
        let mut out = ta.clone();
        for chunk in out.data_mut().chunks_mut(block) {
            for (o, v) in chunk.iter_mut().zip(tb.data()) {
                *o += v;
            }
        }
        Ok(self.push(Op::AddTiled(a, b), out))
    }

    /// Mean over the unmasked token rows of each group of `tokens` rows.
    pub fn masked_mean_pool(
        &mut self,
        input: Var,
        mask: &[bool],
        tokens: usize,
    ) -> Result<Var, KernelError> {
        let ti = self.value(input);
        if ti.rows() != mask.len() || mask.len() % tokens != 0 {
            return Err(KernelError::InvalidArgument {
                op: "masked_mean_pool",
                reason: format!("mask of length {} for input {:?}", mask.len(), ti.shape()),
            });
        }
        let (n, d) = (mask.len() / tokens, ti.cols());
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            let active = &mask[i * tokens..(i + 1) * tokens];
            let count = active.iter().filter(|&&b| b).count();
            if count == 0 {
                return Err(KernelError::InvalidArgument {
                    op: "masked_mean_pool",
                    reason: format!("no observed modalities in row group {i}"),
                });
            }
            let orow = &mut out[i * d..(i + 1) * d];
            for (t, _) in active.iter().enumerate().filter(|(_, &b)| b) {
                for (o, v) in orow.iter_mut().zip(ti.row(i * tokens + t)) {
                    *o += v;
                }
            }
            if count > 1 {
                let inv = count as f64;
                orow.iter_mut().for_each(|o| *o /= inv);
            }
        }
        Ok(self.push(
            Op::MaskedMeanPool {
                input,
                mask: mask.to_vec(),
                tokens,
            },
            Tensor::matrix(n, d, out),
        ))
    }

    /// Multi-head scaled dot-product self-attention within each group of
    /// `tokens` rows. Keys at masked positions receive exactly zero weight.
    pub fn masked_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        mask: &[bool],
        tokens: usize,
        heads: usize,
    ) -> Result<Var, KernelError> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        if tq.shape() != tk.shape() {
            return Err(mismatch("masked_attention", tq, tk));
        }
        if tq.shape() != tv.shape() {
            return Err(mismatch("masked_attention", tq, tv));
        }
        let d = tq.cols();
        if heads == 0 || d % heads != 0 || tq.rows() != mask.len() || mask.len() % tokens != 0 {
            return Err(KernelError::InvalidArgument {
                op: "masked_attention",
                reason: format!(
                    "{heads} heads, mask length {} for input {:?}",
                    mask.len(),
                    tq.shape()
                ),
            });
        }
        let n = mask.len() / tokens;
        let hd = d / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut weights = vec![0.0; n * heads * tokens * tokens];
        let mut out = vec![0.0; n * tokens * d];
        let mut scores = vec![0.0; tokens];
        for i in 0..n {
            let active = &mask[i * tokens..(i + 1) * tokens];
            if !active.iter().any(|&b| b) {
                return Err(KernelError::InvalidArgument {
                    op: "masked_attention",
                    reason: format!("no observed modalities in row group {i}"),
                });
            }
            for h in 0..heads {
                let cols = h * hd..(h + 1) * hd;
                for a in 0..tokens {
                    let qa = &tq.row(i * tokens + a)[cols.clone()];
                    for b in 0..tokens {
                        scores[b] = if active[b] {
                            let kb = &tk.row(i * tokens + b)[cols.clone()];
                            qa.iter().zip(kb).map(|(x, y)| x * y).sum::<f64>() * scale
                        } else {
                            f64::NEG_INFINITY
                        };
                    }
                    masked_softmax_in_place(&mut scores, active);
                    let base = ((i * heads + h) * tokens + a) * tokens;
                    weights[base..base + tokens].copy_from_slice(&scores);
                    let orow = &mut out[(i * tokens + a) * d..(i * tokens + a + 1) * d];
                    for b in (0..tokens).filter(|&b| active[b]) {
                        let w = scores[b];
                        let vb = &tv.row(i * tokens + b)[cols.clone()];
                        for (o, x) in orow[cols.clone()].iter_mut().zip(vb) {
                            *o += w * x;
                        }
                    }
                }
            }
        }
        Ok(self.push(
            Op::MaskedAttention {
                q,
                k,
                v,
                mask: mask.to_vec(),
                tokens,
                heads,
                weights,
            },
            Tensor::matrix(n * tokens, d, out),
        ))
    }

    /// Attention weights cached by a `masked_attention` node, laid out as
    /// `[group, head, query, key]`.
    pub fn attention_weights(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::MaskedAttention { weights, .. } => Some(weights),
            _ => None,
        }
    }

    /// Elementwise binary cross-entropy on logits. With `focal_gamma > 0`
    /// each term is weighted by `(1 − p_true)^γ`.
    pub fn bce_with_logits(
        &mut self,
        logits: Var,
        targets: Tensor,
        focal_gamma: f64,
    ) -> Result<Var, KernelError> {
        let tl = self.value(logits);
        if tl.shape() != targets.shape() {
            return Err(mismatch("bce_with_logits", tl, &targets));
        }
        let out = tl.zip_map(&targets, |x, y| {
            let ce_pos = softplus(-x);
            let ce_neg = softplus(x);
            if focal_gamma == 0.0 {
                y * ce_pos + (1.0 - y) * ce_neg
            } else {
                let p = sigmoid(x);
                y * (1.0 - p).powf(focal_gamma) * ce_pos + (1.0 - y) * p.powf(focal_gamma) * ce_neg
            }
        });
        Ok(self.push(
            Op::BceWithLogits {
                logits,
                targets,
                focal_gamma,
            },
            out,
        ))
    }

    /// Per-row softmax cross-entropy against class indices, `[n,c] → [n,1]`.
    pub fn softmax_xent(&mut self, logits: Var, targets: &[usize]) -> Result<Var, KernelError> {
        let tl = self.value(logits);
        let (n, c) = (tl.rows(), tl.cols());
        if targets.len() != n || targets.iter().any(|&t| t >= c) {
            return Err(KernelError::InvalidArgument {
                op: "softmax_xent",
                reason: format!("{} targets for logits {:?}", targets.len(), tl.shape()),
            });
        }
        let mut probs = tl.data().to_vec();
        let mut losses = Vec::with_capacity(n);
        for (r, row) in probs.chunks_mut(c).enumerate() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            losses.push(lse - row[targets[r]]);
            softmax_in_place(row);
        }
        Ok(self.push(
            Op::SoftmaxXent {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            Tensor::matrix(n, 1, losses),
        ))
    }

    /// Σ (a − b)²
    pub fn squared_error_sum(&mut self, a: Var, b: Var) -> Result<Var, KernelError> {
        self.same_shape("squared_error_sum", a, b)?;
        let s = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        Ok(self.push(Op::SquaredErrorSum(a, b), Tensor::scalar(s)))
    }

    /// Mean of (a − b)².
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var, KernelError> {
        let n = self.value(a).len() as f64;
        let s = self.squared_error_sum(a, b)?;
        Ok(self.scale(s, 1.0 / n))
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var, KernelError> {
        let ta = self.value(a);
        if idx.is_empty() || idx.iter().any(|&i| i >= ta.rows()) {
            return Err(KernelError::InvalidArgument {
                op: "gather_rows",
                reason: format!("indices {idx:?} for input {:?}", ta.shape()),
            });
        }
        let mut data = Vec::with_capacity(idx.len() * ta.cols());
        for &i in idx {
            data.extend_from_slice(ta.row(i));
        }
        let out = Tensor::matrix(idx.len(), ta.cols(), data);
        Ok(self.push(Op::GatherRows(a, idx.to_vec()), out))
    }

    /// Places row `j` of `a` at row `idx[j]` of an `[n, d]` zero tensor.
    pub fn scatter_rows(&mut self, a: Var, idx: &[usize], n: usize) -> Result<Var, KernelError> {
        let ta = self.value(a);
        if idx.len() != ta.rows() || idx.iter().any(|&i| i >= n) {
            return Err(KernelError::InvalidArgument {
                op: "scatter_rows",
                reason: format!("indices {idx:?} into {n} rows for input {:?}", ta.shape()),
            });
        }
        let d = ta.cols();
        let mut out = Tensor::zeros(n, d);
        for (j, &i) in idx.iter().enumerate() {
            out.row_mut(i).copy_from_slice(ta.row(j));
        }
        Ok(self.push(Op::ScatterRows(a, idx.to_vec()), out))
    }

    /// Reverse pass from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients, KernelError> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(KernelError::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(lt.shape().to_vec(), vec![1.0])?);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let mut params: Vec<(ParamId, Var)> = self.param_nodes.iter().map(|(&p, &v)| (p, v)).collect();
        params.sort_by_key(|(p, _)| *p);
        Ok(Gradients { grads, params })
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (n, k, m) = (ta.rows(), ta.cols(), tb.cols());
                let ga = Tensor::matrix(n, k, matmul_nt(g.data(), tb.data(), n, m, k));
                let gb = Tensor::matrix(k, m, matmul_tn(ta.data(), g.data(), n, k, m));
                accumulate(grads, *a, ga);
                accumulate(grads, *b, gb);
            }
            Op::AddBias(a, b) => {
                let m = g.cols();
                let mut gb = vec![0.0; m];
                for r in 0..g.rows() {
                    for (o, v) in gb.iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, Tensor::matrix(1, m, gb));
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                accumulate(grads, *a, g.zip_map(self.value(*b), |x, y| x * y));
                accumulate(grads, *b, g.zip_map(self.value(*a), |x, y| x * y));
            }
            Op::MulConst(a, c) => accumulate(grads, *a, g.zip_map(c, |x, y| x * y)),
            Op::Scale(a, s) => accumulate(grads, *a, g.map(|x| x * s)),
            Op::Sigmoid(a) => accumulate(grads, *a, g.zip_map(out, |x, y| x * y * (1.0 - y))),
            Op::Tanh(a) => accumulate(grads, *a, g.zip_map(out, |x, y| x * (1.0 - y * y))),
            Op::Relu(a) => accumulate(
                grads,
                *a,
                g.zip_map(self.value(*a), |x, y| if y > 0.0 { x } else { 0.0 }),
            ),
            Op::SoftmaxRows(a) => {
                let c = out.cols();
                let mut ga = g.clone();
                for (grow, yrow) in ga.data_mut().chunks_mut(c).zip(out.data().chunks(c)) {
                    let dot: f64 = grow.iter().zip(yrow).map(|(x, y)| x * y).sum();
                    for (gi, yi) in grow.iter_mut().zip(yrow) {
                        *gi = yi * (*gi - dot);
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::MeanAxis(a, axis) => {
                let ta = self.value(*a);
                let (n, m) = (ta.rows(), ta.cols());
                let mut ga = Tensor::zeros(n, m);
                for r in 0..n {
                    for c in 0..m {
                        ga.data_mut()[r * m + c] = if *axis == 0 {
                            g.data()[c] / n as f64
                        } else {
                            g.data()[r] / m as f64
                        };
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::SumAll(a) => {
                let gv = g.item();
                accumulate(grads, *a, self.value(*a).map(|_| gv));
            }
            Op::RowNorm(a) => {
                let ta = self.value(*a);
                let d = ta.cols();
                let mut ga = Tensor::zeros(ta.rows(), d);
                for r in 0..ta.rows() {
                    let norm = out.data()[r];
                    if norm == 0.0 {
                        continue;
                    }
                    let f = g.data()[r] / norm;
                    for (o, x) in ga.row_mut(r).iter_mut().zip(ta.row(r)) {
                        *o = f * x;
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::CosineSim { a, b, a_norm, b_norm } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (n, d, m) = (ta.rows(), ta.cols(), tb.rows());
                let mut ga = Tensor::zeros(n, d);
                let mut gb = Tensor::zeros(m, d);
                for i in 0..n {
                    let ai = ta.row(i);
                    let ra = l2(ai);
                    for j in 0..m {
                        let gij = g.data()[i * m + j];
                        if gij == 0.0 {
                            continue;
                        }
                        let bj = tb.row(j);
                        let rb = l2(bj);
                        let dot: f64 = ai.iter().zip(bj).map(|(x, y)| x * y).sum();
                        let denom = a_norm[i] * b_norm[j];
                        // d/da [a·b / ((|a|+ε)(|b|+ε))]
                        let ca = if ra > 0.0 { dot / (denom * a_norm[i] * ra) } else { 0.0 };
                        let cb = if rb > 0.0 { dot / (denom * b_norm[j] * rb) } else { 0.0 };
                        let gai = ga.row_mut(i);
                        for t in 0..d {
                            gai[t] += gij * (bj[t] / denom - ca * ai[t]);
                        }
                        let gbj = gb.row_mut(j);
                        for t in 0..d {
                            gbj[t] += gij * (ai[t] / denom - cb * bj[t]);
                        }
                    }
                }
                accumulate(grads, *a, ga);
                accumulate(grads, *b, gb);
            }
            Op::ConcatCols(parts) => {
                let n = g.rows();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    let mut gp = Vec::with_capacity(n * w);
                    for r in 0..n {
                        gp.extend_from_slice(&g.row(r)[offset..offset + w]);
                    }
                    offset += w;
                    accumulate(grads, p, Tensor::matrix(n, w, gp));
                }
            }
            Op::Interleave(parts) => {
                let m = parts.len();
                let d = g.cols();
                let n = g.rows() / m;
                for (t, &p) in parts.iter().enumerate() {
                    let mut gp = Vec::with_capacity(n * d);
                    for r in 0..n {
                        gp.extend_from_slice(g.row(r * m + t));
                    }
                    accumulate(grads, p, Tensor::matrix(n, d, gp));
                }
            }
            Op::AddTiled(a, b) => {
                let tb = self.value(*b);
                let mut gb = vec![0.0; tb.len()];
                for chunk in g.data().chunks(tb.len()) {
                    for (o, v) in gb.iter_mut().zip(chunk) {
                        *o += v;
                    }
                }
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, Tensor::matrix(tb.rows(), tb.cols(), gb));
            }
            Op::MaskedMeanPool { input, mask, tokens } => {
                let d = g.cols();
                let mut gi = Tensor::zeros(mask.len(), d);
                for i in 0..g.rows() {
                    let active = &mask[i * tokens..(i + 1) * tokens];
                    let count = active.iter().filter(|&&b| b).count() as f64;
                    for t in (0..*tokens).filter(|&t| active[t]) {
                        for (o, x) in gi.row_mut(i * tokens + t).iter_mut().zip(g.row(i)) {
                            *o = x / count;
                        }
                    }
                }
                accumulate(grads, *input, gi);
            }
            Op::MaskedAttention {
                q,
                k,
                v,
                mask,
                tokens,
                heads,
                weights,
            } => {
                let (tq, tk, tv) = (self.value(*q), self.value(*k), self.value(*v));
                let d = tq.cols();
                let tokens = *tokens;
                let heads = *heads;
                let hd = d / heads;
                let scale = 1.0 / (hd as f64).sqrt();
                let n = mask.len() / tokens;
                let mut gq = Tensor::zeros(tq.rows(), d);
                let mut gk = Tensor::zeros(tq.rows(), d);
                let mut gv = Tensor::zeros(tq.rows(), d);
                let mut dw = vec![0.0; tokens];
                for i in 0..n {
                    let active = &mask[i * tokens..(i + 1) * tokens];
                    for h in 0..heads {
                        let cols = h * hd..(h + 1) * hd;
                        for a in 0..tokens {
                            let base = ((i * heads + h) * tokens + a) * tokens;
                            let w = &weights[base..base + tokens];
                            let go = &g.row(i * tokens + a)[cols.clone()];
                            let mut wdot = 0.0;
                            for b in (0..tokens).filter(|&b| active[b]) {
                                let vb = &tv.row(i * tokens + b)[cols.clone()];
                                dw[b] = go.iter().zip(vb).map(|(x, y)| x * y).sum();
                                wdot += w[b] * dw[b];
                                let gvb = &mut gv.row_mut(i * tokens + b)[cols.clone()];
                                for (o, x) in gvb.iter_mut().zip(go) {
                                    *o += w[b] * x;
                                }
                            }
                            for b in (0..tokens).filter(|&b| active[b]) {
                                let ds = w[b] * (dw[b] - wdot) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                let kb = tk.row(i * tokens + b)[cols.clone()].to_vec();
                                let qa = tq.row(i * tokens + a)[cols.clone()].to_vec();
                                for (o, x) in gq.row_mut(i * tokens + a)[cols.clone()].iter_mut().zip(&kb) {
                                    *o += ds * x;
                                }
                                for (o, x) in gk.row_mut(i * tokens + b)[cols.clone()].iter_mut().zip(&qa) {
                                    *o += ds * x;
                                }
                            }
                        }
                    }
                }
                accumulate(grads, *q, gq);
                accumulate(grads, *k, gk);
                accumulate(grads, *v, gv);
            }
            Op::BceWithLogits {
                logits,
                targets,
                focal_gamma,
            } => {
                let tl = self.value(*logits);
                let gamma = *focal_gamma;
                let mut gl = tl.zip_map(targets, |x, y| {
                    let p = sigmoid(x);
                    if gamma == 0.0 {
                        p - y
                    } else {
                        let ln_p = -softplus(-x);
                        let ln_q = -softplus(x);
                        let q = 1.0 - p;
                        let d_pos = gamma * p * q.powf(gamma) * ln_p - q.powf(gamma + 1.0);
                        let d_neg = p.powf(gamma + 1.0) - gamma * p.powf(gamma) * q * ln_q;
                        y * d_pos + (1.0 - y) * d_neg
                    }
                });
                for (o, x) in gl.data_mut().iter_mut().zip(g.data()) {
                    *o *= x;
                }
                accumulate(grads, *logits, gl);
            }
            Op::SoftmaxXent { logits, targets, probs } => {
                let c = self.value(*logits).cols();
                let mut gl = probs.clone();
                for (r, row) in gl.chunks_mut(c).enumerate() {
                    row[targets[r]] -= 1.0;
                    let gr = g.data()[r];
                    row.iter_mut().for_each(|x| *x *= gr);
                }
                accumulate(grads, *logits, Tensor::matrix(g.rows(), c, gl));
            }
            Op::SquaredErrorSum(a, b) => {
                let gv = g.item();
                let diff = self.value(*a).zip_map(self.value(*b), |x, y| 2.0 * gv * (x - y));
                accumulate(grads, *b, diff.map(|x| -x));
                accumulate(grads, *a, diff);
            }
            Op::GatherRows(a, idx) => {
                let ta = self.value(*a);
                let mut ga = Tensor::zeros(ta.rows(), ta.cols());
                for (j, &i) in idx.iter().enumerate() {
                    for (o, x) in ga.row_mut(i).iter_mut().zip(g.row(j)) {
                        *o += x;
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::ScatterRows(a, idx) => {
                let mut data = Vec::with_capacity(idx.len() * g.cols());
                for &i in idx {
                    data.extend_from_slice(g.row(i));
                }
                accumulate(grads, *a, Tensor::matrix(idx.len(), g.cols(), data));
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn l2(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    row.iter_mut().for_each(|x| *x /= sum);
}

/// Softmax over active entries; inactive entries are set to exactly 0.
fn masked_softmax_in_place(row: &mut [f64], active: &[bool]) {
    let max = row
        .iter()
        .zip(active)
        .filter(|(_, &a)| a)
        .map(|(x, _)| *x)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (x, &a) in row.iter_mut().zip(active) {
        *x = if a { (*x - max).exp() } else { 0.0 };
        sum += *x;
    }
    row.iter_mut().for_each(|x| *x /= sum);
}

#[cfg(test)]
mod tests;
