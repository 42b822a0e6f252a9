//! Missingness-aware fusion: pattern embedding, modality gates and masked
//! attention pooling to the patient representation `h`.

use rand::Rng;

use crate::kernel::{Graph, Init, KernelError, ParamId, ParamStore, Tensor, Var};

/// Two-layer MLP `δ → z` with a linear decoder `z → δ̂` logits.
#[derive(Debug, Clone)]
pub struct MissingnessNet {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    dec_w: ParamId,
    dec_b: ParamId,
    num_modalities: usize,
    pub lambda_miss: f64,
}

/// Output of [`MissingnessNet::embed`].
#[derive(Debug, Clone, Copy)]
pub struct MissEmbedding {
    pub z: Var,
    pub logits: Var,
    /// `λ_miss · mean_i Σ_m BCE(δ̂_i^(m), δ_i^(m))`.
    pub loss: Var,
}

impl MissingnessNet {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        num_modalities: usize,
        hidden: usize,
        dim_z: usize,
        lambda_miss: f64,
        rng: &mut R,
    ) -> Self {
        Self {
            w1: store.add_init("miss.w1", num_modalities, hidden, Init::Glorot, rng),
            b1: store.add_init("miss.b1", 1, hidden, Init::Zeros, rng),
            w2: store.add_init("miss.w2", hidden, dim_z, Init::Glorot, rng),
            b2: store.add_init("miss.b2", 1, dim_z, Init::Zeros, rng),
            dec_w: store.add_init("miss.dec.w", dim_z, num_modalities, Init::Glorot, rng),
            dec_b: store.add_init("miss.dec.b", 1, num_modalities, Init::Zeros, rng),
            num_modalities,
            lambda_miss,
        }
    }

    pub fn decoder_params(&self) -> (ParamId, ParamId) {
        (self.dec_w, self.dec_b)
    }

    /// Embeds the `[n, M]` mask matrix and scores its reconstruction.
    pub fn embed(&self, g: &mut Graph, store: &ParamStore, mask: &Tensor) -> Result<MissEmbedding, KernelError> {
        if mask.cols() != self.num_modalities {
            return Err(KernelError::InvalidArgument {
                op: "miss_embed",
                reason: format!("mask has {} columns for {} modalities", mask.cols(), self.num_modalities),
            });
        }
        let n = mask.rows();
        let x = g.constant(mask.clone());
        let (w1, b1) = (g.param(store, self.w1), g.param(store, self.b1));
        let (w2, b2) = (g.param(store, self.w2), g.param(store, self.b2));
        let hid = g.linear(x, w1, b1)?;
        let hid = g.relu(hid);
        let z = g.linear(hid, w2, b2)?;
        let (dw, db) = (g.param(store, self.dec_w), g.param(store, self.dec_b));
        let logits = g.linear(z, dw, db)?;
        let bce = g.bce_with_logits(logits, mask.clone(), 0.0)?;
        let total = g.sum_all(bce);
        let loss = g.scale(total, self.lambda_miss / n as f64);
        Ok(MissEmbedding { z, logits, loss })
    }
}

/// Per-modality vector gates `σ(W^(m) z + b^(m))`.
#[derive(Debug, Clone)]
pub struct GateBank {
    gates: Vec<(ParamId, ParamId)>,
}

impl GateBank {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        names: &[String],
        dim_z: usize,
        embed_dim: usize,
        rng: &mut R,
    ) -> Self {
        let gates = names
            .iter()
            .map(|name| {
                (
                    store.add_init(format!("gate.{name}.w"), dim_z, embed_dim, Init::Glorot, rng),
                    store.add_init(format!("gate.{name}.b"), 1, embed_dim, Init::Zeros, rng),
                )
            })
            .collect();
        Self { gates }
    }

    pub fn params(&self, m: usize) -> (ParamId, ParamId) {
        self.gates[m]
    }

    /// Gated embedding `δ^(m) · σ(W^(m) z + b^(m)) ⊙ e^(m)`. `dense` must hold
    /// zero rows for patients missing the modality; `present` is the `[n,1]`
    /// column of `δ^(m)`.
    pub fn gate(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        m: usize,
        dense: Var,
        z: Var,
        present: &[bool],
    ) -> Result<Var, KernelError> {
        let (w, b) = self.gates[m];
        let (w, b) = (g.param(store, w), g.param(store, b));
        let logit = g.linear(z, w, b)?;
        let sig = g.sigmoid(logit);
        let gated = g.mul(sig, dense)?;
        let d = g.value(dense).cols();
        let keep = Tensor::matrix(
            present.len(),
            d,
            present
                .iter()
                .flat_map(|&p| std::iter::repeat_n(if p { 1.0 } else { 0.0 }, d))
                .collect(),
        );
        g.mul_const(gated, keep)
    }
}

/// One layer of masked multi-head self-attention over the modality slots,
/// with a residual connection and a per-modality slot embedding, followed
/// by a mean-pool over observed slots.
#[derive(Debug, Clone)]
pub struct FusionCore {
    slots: ParamId,
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    heads: usize,
    tokens: usize,
}

/// Intermediate values of one fusion pass.
#[derive(Debug, Clone, Copy)]
pub struct Fused {
    /// Attention node; its cached weights are `[patient, head, query, key]`.
    pub attention: Var,
    /// Post-attention rows `[n·M, d]`.
    pub rows: Var,
    pub h: Var,
}

impl FusionCore {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        num_modalities: usize,
        embed_dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        let d = embed_dim;
        Self {
            slots: store.add_init("fuse.slots", num_modalities, d, Init::Normal(0.02), rng),
            wq: store.add_init("fuse.wq", d, d, Init::Glorot, rng),
            bq: store.add_init("fuse.bq", 1, d, Init::Zeros, rng),
            wk: store.add_init("fuse.wk", d, d, Init::Glorot, rng),
            bk: store.add_init("fuse.bk", 1, d, Init::Zeros, rng),
            wv: store.add_init("fuse.wv", d, d, Init::Glorot, rng),
            bv: store.add_init("fuse.bv", 1, d, Init::Zeros, rng),
            wo: store.add_init("fuse.wo", d, d, Init::Glorot, rng),
            bo: store.add_init("fuse.bo", 1, d, Init::Zeros, rng),
            heads,
            tokens: num_modalities,
        }
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    /// Stacks the gated embeddings into `[n·M, d]` slot rows.
    pub fn stack(&self, g: &mut Graph, store: &ParamStore, gated: &[Var]) -> Result<Var, KernelError> {
        let x = g.interleave(gated)?;
        let slots = g.param(store, self.slots);
        g.add_tiled(x, slots)
    }

    /// Fuses stacked slot rows under `mask` (length `n·M`, patient-major).
    /// `dropout` is an optional keep-mask already scaled by `1/(1−p)`.
    pub fn fuse(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        stacked: Var,
        mask: &[bool],
        dropout: Option<Tensor>,
    ) -> Result<Fused, KernelError> {
        let proj = |g: &mut Graph, w: ParamId, b: ParamId| {
            let (w, b) = (g.param(store, w), g.param(store, b));
            g.linear(stacked, w, b)
        };
        let q = proj(g, self.wq, self.bq)?;
        let k = proj(g, self.wk, self.bk)?;
        let v = proj(g, self.wv, self.bv)?;
        let attention = g.masked_attention(q, k, v, mask, self.tokens, self.heads)?;
        let (wo, bo) = (g.param(store, self.wo), g.param(store, self.bo));
        let mut out = g.linear(attention, wo, bo)?;
        if let Some(keep) = dropout {
            out = g.mul_const(out, keep)?;
        }
        let rows = g.add(stacked, out)?;
        let h = g.masked_mean_pool(rows, mask, self.tokens)?;
        Ok(Fused { attention, rows, h })
    }
}

/// Ablation fusion: `h = relu([e^(1) … e^(M)] W + b)` with zero blocks for
/// missing modalities.
#[derive(Debug, Clone)]
pub struct ConcatFusion {
    w: ParamId,
    b: ParamId,
}

impl ConcatFusion {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        num_modalities: usize,
        embed_dim: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            w: store.add_init("concat.w", num_modalities * embed_dim, embed_dim, Init::Glorot, rng),
            b: store.add_init("concat.b", 1, embed_dim, Init::Zeros, rng),
        }
    }

    pub fn fuse(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        dense: &[Var],
        dropout: Option<Tensor>,
    ) -> Result<Var, KernelError> {
        let x = g.concat_cols(dense)?;
        let (w, b) = (g.param(store, self.w), g.param(store, self.b));
        let lin = g.linear(x, w, b)?;
        let mut h = g.relu(lin);
        if let Some(keep) = dropout {
            h = g.mul_const(h, keep)?;
        }
        Ok(h)
    }
}

/// Inverted-dropout keep mask of shape `[rows, cols]`.
pub fn dropout_mask<R: Rng + ?Sized>(rows: usize, cols: usize, p: f64, rng: &mut R) -> Tensor {
    let scale = 1.0 / (1.0 - p);
    Tensor::matrix(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { scale })
            .collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn names(m: usize) -> Vec<String> {
        ["S", "I", "T", "R"][..m].iter().map(|s| s.to_string()).collect()
    }

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect())
    }

    #[test]
    fn saturated_decoder_gives_negligible_miss_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let net = MissingnessNet::new(&mut store, 4, 8, 6, 0.5, &mut rng);
        let mask = Tensor::from_rows(&[vec![1.0, 0.0, 1.0, 1.0], vec![1.0, 1.0, 0.0, 0.0]]);
        let (dw, db) = net.decoder_params();
        store.get_mut(dw).data_mut().fill(0.0);
        // Zero weights make the logits equal the bias; one row per case.
        for row in 0..2 {
            store.get_mut(db).data_mut().copy_from_slice(&mask.row(row).iter().map(|b| if *b > 0.5 { 20.0 } else { -20.0 }).collect::<Vec<_>>());
            let single = Tensor::row_vector(mask.row(row).to_vec());
            let mut g = Graph::new();
            let out = net.embed(&mut g, &store, &single).unwrap();
            assert!(g.value(out.loss).item() < 1e-6 * 0.5);
        }
    }

    #[test]
    fn zero_logits_give_ln2_per_modality() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let net = MissingnessNet::new(&mut store, 4, 8, 6, 0.5, &mut rng);
        let (dw, db) = net.decoder_params();
        store.get_mut(dw).data_mut().fill(0.0);
        store.get_mut(db).data_mut().fill(0.0);
        let mask = Tensor::from_rows(&[vec![1.0, 0.0, 1.0, 1.0], vec![1.0, 1.0, 0.0, 0.0]]);
        let mut g = Graph::new();
        let out = net.embed(&mut g, &store, &mask).unwrap();
        let expected = 0.5 * 4.0 * std::f64::consts::LN_2;
        assert!((g.value(out.loss).item() - expected).abs() < 1e-12);
    }

    fn gate_setup(d: usize) -> (GateBank, ParamStore, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let bank = GateBank::new(&mut store, &names(2), 3, d, &mut rng);
        (bank, store, rng)
    }

    #[test]
    fn gate_zeroes_missing_and_halves_at_zero_logit() {
        let (bank, mut store, mut rng) = gate_setup(5);
        let (w, b) = bank.params(1);
        store.get_mut(w).data_mut().fill(0.0);
        store.get_mut(b).data_mut().fill(0.0);
        let e = random(2, 5, &mut rng);
        let z = random(2, 3, &mut rng);
        let mut g = Graph::new();
        let (ev, zv) = (g.constant(e.clone()), g.constant(z));
        let out = bank.gate(&mut g, &store, 1, ev, zv, &[true, false]).unwrap();
        let t = g.value(out);
        for j in 0..5 {
            assert_eq!(t.get(0, j), 0.5 * e.get(0, j));
            assert_eq!(t.get(1, j), 0.0);
        }
    }

    #[test]
    fn gate_is_monotone_in_its_logit() {
        let (bank, mut store, mut rng) = gate_setup(4);
        let e = random(1, 4, &mut rng);
        let z = Tensor::row_vector(vec![0.0; 3]);
        let (_, b) = bank.params(0);
        let eval = |store: &ParamStore| {
            let mut g = Graph::new();
            let (ev, zv) = (g.constant(e.clone()), g.constant(z.clone()));
            let out = bank.gate(&mut g, store, 0, ev, zv, &[true]).unwrap();
            g.value(out).clone()
        };
        let low = eval(&store);
        store.get_mut(b).data_mut()[2] += 0.7;
        let high = eval(&store);
        assert!(high.get(0, 2).abs() > low.get(0, 2).abs());
        for j in [0, 1, 3] {
            assert_eq!(high.get(0, j), low.get(0, j));
        }
    }

    fn core_setup() -> (FusionCore, ParamStore, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let core = FusionCore::new(&mut store, 4, 8, 4, &mut rng);
        (core, store, rng)
    }

    #[test]
    fn single_observed_slot_passes_its_value_row() {
        let (core, store, mut rng) = core_setup();
        let gated: Vec<Tensor> = (0..4).map(|_| random(1, 8, &mut rng)).collect();
        let mut g = Graph::new();
        let vars: Vec<Var> = gated.iter().map(|t| g.constant(t.clone())).collect();
        let stacked = core.stack(&mut g, &store, &vars).unwrap();
        let mask = [false, false, true, false];
        let fused = core.fuse(&mut g, &store, stacked, &mask, None).unwrap();
        // Attention over one key returns that key's value row.
        let x = g.value(stacked).row(2).to_vec();
        let wv = store.get(core.wv);
        let bv = store.get(core.bv);
        let value: Vec<f64> = (0..8)
            .map(|j| bv.data()[j] + (0..8).map(|i| x[i] * wv.get(i, j)).sum::<f64>())
            .collect();
        let att = g.value(fused.attention).row(2);
        for (a, b) in att.iter().zip(&value) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(g.value(fused.h).row(0), g.value(fused.rows).row(2));
    }

    #[test]
    fn missing_slot_contents_do_not_reach_h() {
        let (core, store, mut rng) = core_setup();
        let mut gated: Vec<Tensor> = (0..4).map(|_| random(2, 8, &mut rng)).collect();
        let mask = [true, false, true, false, true, true, false, true];
        let run = |gated: &[Tensor]| {
            let mut g = Graph::new();
            let vars: Vec<Var> = gated.iter().map(|t| g.constant(t.clone())).collect();
            let stacked = core.stack(&mut g, &store, &vars).unwrap();
            let fused = core.fuse(&mut g, &store, stacked, &mask, None).unwrap();
            let weights = g.attention_weights(fused.attention).unwrap().to_vec();
            (g.value(fused.h).clone(), weights)
        };
        let (before, weights) = run(&gated);
        // Keys at masked slots carry no attention mass.
        for (idx, w) in weights.iter().enumerate() {
            let key = idx % 4;
            let patient = idx / (4 * 4 * 4);
            if !mask[patient * 4 + key] {
                assert_eq!(*w, 0.0);
            }
        }
        let (r1, r3) = (gated[1].row(0).to_vec(), gated[3].row(0).to_vec());
        gated[1].row_mut(0).copy_from_slice(&r3);
        gated[3].row_mut(0).copy_from_slice(&r1);
        gated[2].row_mut(1).iter_mut().for_each(|v| *v *= -7.0);
        let (after, _) = run(&gated);
        assert_eq!(before, after);
    }

    #[test]
    fn pattern_changes_h_through_gates() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let d = 8;
        let miss = MissingnessNet::new(&mut store, 4, 8, 6, 0.5, &mut rng);
        let gates = GateBank::new(&mut store, &names(4), 6, d, &mut rng);
        let core = FusionCore::new(&mut store, 4, d, 4, &mut rng);
        // Both patients observe S and I with identical content; one also has T.
        let content = random(1, d, &mut rng);
        let other = random(1, d, &mut rng);
        let masks = Tensor::from_rows(&[vec![1.0, 1.0, 0.0, 0.0], vec![1.0, 1.0, 1.0, 0.0]]);
        let mut g = Graph::new();
        let emb = miss.embed(&mut g, &store, &masks).unwrap();
        let both = Tensor::from_rows(&[content.data().to_vec(), content.data().to_vec()]);
        let third = Tensor::from_rows(&[vec![0.0; d], other.data().to_vec()]);
        let dense = [
            g.constant(both.clone()),
            g.constant(both),
            g.constant(third),
            g.constant(Tensor::zeros(2, d)),
        ];
        let present = [[true, true], [true, true], [false, true], [false, false]];
        let gated: Vec<Var> = (0..4)
            .map(|m| gates.gate(&mut g, &store, m, dense[m], emb.z, &present[m]).unwrap())
            .collect();
        // Slot rows of the shared modalities already differ through z.
        assert_ne!(g.value(gated[0]).row(0), g.value(gated[0]).row(1));
        // Fusing only the shared modalities still yields different h.
        let stacked = core.stack(&mut g, &store, &gated).unwrap();
        let shared = [true, true, false, false, true, true, false, false];
        let fused = core.fuse(&mut g, &store, stacked, &shared, None).unwrap();
        assert_ne!(g.value(fused.h).row(0), g.value(fused.h).row(1));
    }

    #[test]
    fn dropout_mask_is_inverted_and_reproducible() {
        let mut a = ChaCha8Rng::seed_from_u64(9);
        let mut b = ChaCha8Rng::seed_from_u64(9);
        let m1 = dropout_mask(50, 40, 0.2, &mut a);
        assert_eq!(m1, dropout_mask(50, 40, 0.2, &mut b));
        assert!(m1.data().iter().all(|&v| v == 0.0 || v == 1.25));
        let kept = m1.data().iter().filter(|&&v| v > 0.0).count() as f64 / 2000.0;
        assert!((kept - 0.8).abs() < 0.05);
    }
}
