//! Masked cross-modal reconstruction and InfoNCE alignment.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::Pattern;
use crate::kernel::{Graph, Init, KernelError, ParamId, ParamStore, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReconLossConfig {
    pub lambda_rec: f64,
    pub lambda_cont: f64,
    pub tau_cont: f64,
}

impl Default for ReconLossConfig {
    fn default() -> Self {
        Self {
            lambda_rec: 1.0,
            lambda_cont: 0.3,
            tau_cont: 0.15,
        }
    }
}

/// Per-modality two-layer decoders `φ^(m): R^d → R^d`.
#[derive(Debug, Clone)]
pub struct DecoderBank {
    decoders: Vec<[ParamId; 4]>,
}

impl DecoderBank {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        names: &[String],
        embed_dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let decoders = names
            .iter()
            .map(|name| {
                [
                    store.add_init(format!("dec.{name}.w1"), embed_dim, hidden, Init::Glorot, rng),
                    store.add_init(format!("dec.{name}.b1"), 1, hidden, Init::Zeros, rng),
                    store.add_init(format!("dec.{name}.w2"), hidden, embed_dim, Init::Glorot, rng),
                    store.add_init(format!("dec.{name}.b2"), 1, embed_dim, Init::Zeros, rng),
                ]
            })
            .collect();
        Self { decoders }
    }

    pub fn decode(&self, g: &mut Graph, store: &ParamStore, m: usize, h: Var) -> Result<Var, KernelError> {
        let [w1, b1, w2, b2] = self.decoders[m].map(|p| g.param(store, p));
        let hid = g.linear(h, w1, b1)?;
        let hid = g.relu(hid);
        g.linear(hid, w2, b2)
    }
}

/// Picks the modality to hide for one patient: uniform over observed
/// modalities other than the anchor (index 0), else the anchor itself.
/// Returns `None` when hiding it would leave nothing observed.
pub fn leave_one_out<R: Rng + ?Sized>(pattern: Pattern, rng: &mut R) -> Option<usize> {
    let candidates: Vec<usize> = (1..pattern.len()).filter(|&m| pattern.observed(m)).collect();
    let choice = if candidates.is_empty() {
        pattern.observed(0).then_some(0)?
    } else {
        candidates[rng.random_range(0..candidates.len())]
    };
    if pattern.count() <= 1 {
        log::debug!("pattern {pattern}: only modality {choice} observed, skipping reconstruction");
        return None;
    }
    Some(choice)
}

/// `Σ_i ‖e_i − ê_i‖²` over the rows given.
pub fn recon_loss(g: &mut Graph, target: Var, recon: Var) -> Result<Var, KernelError> {
    g.squared_error_sum(target, recon)
}

/// InfoNCE with cosine similarity: the mean over rows `i` of
/// `−log softmax_j(sim(e_i, ê_j)/τ)[i]`.
pub fn contrastive_loss(g: &mut Graph, target: Var, recon: Var, tau: f64) -> Result<Var, KernelError> {
    if !(tau > 0.0) {
        return Err(KernelError::InvalidArgument {
            op: "contrastive_loss",
            reason: format!("temperature must be positive, got {tau}"),
        });
    }
    let sim = g.cosine_sim(target, recon)?;
    let logits = g.scale(sim, 1.0 / tau);
    let n = g.value(logits).rows();
    let targets: Vec<usize> = (0..n).collect();
    let per_row = g.softmax_xent(logits, &targets)?;
    Ok(g.mean_all(per_row))
}

/// Reconstruction and contrastive terms of one modality.
#[derive(Debug, Clone, Copy)]
pub struct ModalityRep {
    pub rec: Var,
    pub cont: Var,
}

/// `L_rep = Σ_m (λ_rec L_rec^(m) + λ_cont L_cont^(m))` over the modalities
/// that have at least one reconstruction pair. `None` when there is none.
pub fn rep_loss(g: &mut Graph, parts: &[Option<ModalityRep>], cfg: &ReconLossConfig) -> Option<Var> {
    let mut total: Option<Var> = None;
    for part in parts.iter().flatten() {
        let rec = g.scale(part.rec, cfg.lambda_rec);
        let cont = g.scale(part.cont, cfg.lambda_cont);
        let both = g.add(rec, cont).expect("scalar losses");
        total = Some(match total {
            Some(t) => g.add(t, both).expect("scalar losses"),
            None => both,
        });
    }
    total
}
