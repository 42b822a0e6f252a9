//! Modality-specific feed-forward encoders.

use rand::Rng;

use crate::kernel::{Graph, Init, KernelError, ParamId, ParamStore, Var};
use crate::model::Batch;

#[derive(Debug, Clone)]
struct Encoder {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    input_dim: usize,
}

/// Two-layer ReLU encoder per modality, all mapping into the same `d`.
#[derive(Debug, Clone)]
pub struct EncoderSet {
    encoders: Vec<Encoder>,
    names: Vec<String>,
    embed_dim: usize,
}

/// Embeddings of one batch. `present[m]` holds the `[k_m, d]` embeddings
/// of the patients that observe modality `m`; `dense[m]` scatters them
/// into an `[n, d]` block with zero rows for missing patients.
#[derive(Debug, Clone)]
pub struct Embeddings {
    pub present: Vec<Option<Var>>,
    pub dense: Vec<Var>,
}

impl EncoderSet {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        names: &[String],
        input_dims: &[usize],
        hidden: usize,
        embed_dim: usize,
        rng: &mut R,
    ) -> Self {
        let encoders = names
            .iter()
            .zip(input_dims)
            .map(|(name, &dim)| Encoder {
                w1: store.add_init(format!("enc.{name}.w1"), dim, hidden, Init::Glorot, rng),
                b1: store.add_init(format!("enc.{name}.b1"), 1, hidden, Init::Zeros, rng),
                w2: store.add_init(format!("enc.{name}.w2"), hidden, embed_dim, Init::Glorot, rng),
                b2: store.add_init(format!("enc.{name}.b2"), 1, embed_dim, Init::Zeros, rng),
                input_dim: dim,
            })
            .collect();
        Self {
            encoders,
            names: names.to_vec(),
            embed_dim,
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn output_params(&self, m: usize) -> (ParamId, ParamId) {
        (self.encoders[m].w2, self.encoders[m].b2)
    }

    /// Encodes every observed modality of the batch. Missing modalities are
    /// never passed through an encoder.
    pub fn encode(&self, g: &mut Graph, store: &ParamStore, batch: &Batch) -> Result<Embeddings, KernelError> {
        let mut present = Vec::with_capacity(self.encoders.len());
        let mut dense = Vec::with_capacity(self.encoders.len());
        for (m, enc) in self.encoders.iter().enumerate() {
            let block = &batch.modalities[m];
            let emb = match &block.features {
                Some(x) => {
                    if x.cols() != enc.input_dim {
                        return Err(KernelError::InvalidArgument {
                            op: "encode",
                            reason: format!(
                                "modality `{}` expects {} features, got {}",
                                self.names[m],
                                enc.input_dim,
                                x.cols()
                            ),
                        });
                    }
                    let x = g.constant(x.clone());
                    let (w1, b1) = (g.param(store, enc.w1), g.param(store, enc.b1));
                    let (w2, b2) = (g.param(store, enc.w2), g.param(store, enc.b2));
                    let hid = g.linear(x, w1, b1)?;
                    let hid = g.relu(hid);
                    Some(g.linear(hid, w2, b2)?)
                }
                None => None,
            };
            let full = match emb {
                Some(e) => g.scatter_rows(e, &block.rows, batch.len())?,
                None => g.constant(crate::kernel::Tensor::zeros(batch.len(), self.embed_dim)),
            };
            present.push(emb);
            dense.push(full);
        }
        Ok(Embeddings { present, dense })
    }
}
