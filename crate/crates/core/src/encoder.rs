//! Token embeddings and bidirectional gated recurrent encoding.
//!
//! Selector, predictor and guider each own an [`Encoder`] under their own
//! parameter prefix; no weights are shared between them.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{glorot, uniform, ParamStore};
use crate::tensor::Tensor;

/// Reserved padding id; it embeds to the zero vector.
pub const PAD: usize = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderDims {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
}

/// Per-token hidden states `[n, 2h]` and the pooled sequence vector `[1, 2h]`.
#[derive(Clone, Copy, Debug)]
pub struct EncoderOutput {
    pub states: Var,
    pub pooled: Var,
}

/// Weight names of one recurrent direction.
#[derive(Clone, Debug)]
pub(crate) struct GruWeights {
    /// `[in, 3h]` input projection, gate order (update, reset, candidate).
    pub input: String,
    /// `[h, 3h]` recurrent projection.
    pub recurrent: String,
    /// `[1, 3h]`
    pub bias: String,
    pub hidden: usize,
}

impl GruWeights {
    pub fn new(prefix: &str, hidden: usize) -> Self {
        Self {
            input: format!("{prefix}.wx"),
            recurrent: format!("{prefix}.wh"),
            bias: format!("{prefix}.b"),
            hidden,
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R, store: &mut ParamStore, input_dim: usize) {
        let h = self.hidden;
        store.insert(&self.input, glorot(rng, input_dim, 3 * h));
        store.insert(&self.recurrent, glorot(rng, h, 3 * h));
        store.insert(&self.bias, Tensor::zeros(&[1, 3 * h]));
    }

    /// `[n, h]` states over the rows of `inputs` starting from `h0`; row `t`
    /// is the state after reading position `t`.
    pub fn run(&self, g: &mut Graph, inputs: Var, h0: Var, reverse: bool) -> Result<Var> {
        let wx = g.param(&self.input)?;
        let wh = g.param(&self.recurrent)?;
        let b = g.param(&self.bias)?;
        let projected = g.affine(inputs, wx, b)?;
        g.gru(projected, h0, wh, reverse)
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub dims: EncoderDims,
    embedding: String,
    forward: GruWeights,
    backward: GruWeights,
}

impl Encoder {
    pub fn new(prefix: &str, dims: EncoderDims) -> Self {
        Self {
            dims,
            embedding: format!("{prefix}.embed"),
            forward: GruWeights::new(&format!("{prefix}.fwd"), dims.hidden_dim),
            backward: GruWeights::new(&format!("{prefix}.bwd"), dims.hidden_dim),
        }
    }

    pub fn output_dim(&self) -> usize {
        2 * self.dims.hidden_dim
    }

    pub fn embedding_name(&self) -> &str {
        &self.embedding
    }

    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R, store: &mut ParamStore) {
        let d = self.dims;
        let mut table = uniform(rng, &[d.vocab_size, d.embed_dim], 0.5);
        table.data_mut()[..d.embed_dim].fill(0.0);
        store.insert(&self.embedding, table);
        self.forward.init(rng, store, d.embed_dim);
        self.backward.init(rng, store, d.embed_dim);
    }

    /// `[n, embed_dim]` rows of the table; the pad id maps to zeros.
    pub fn embed(&self, g: &mut Graph, tokens: &[usize]) -> Result<Var> {
        let table = g.param(&self.embedding)?;
        g.embedding(table, tokens, Some(PAD))
    }

    pub fn encode(&self, g: &mut Graph, embeddings: Var) -> Result<EncoderOutput> {
        let n = g.value(embeddings).rows();
        if g.value(embeddings).cols() != self.dims.embed_dim {
            return Err(Error::contract(format!(
                "encoder expects {}-wide embeddings, got {:?}",
                self.dims.embed_dim,
                g.value(embeddings).shape()
            )));
        }
        let h0 = g.leaf(Tensor::zeros(&[1, self.dims.hidden_dim]));
        let fwd = self.forward.run(g, embeddings, h0, false)?;
        let bwd = self.backward.run(g, embeddings, h0, true)?;
        let states = g.concat(&[fwd, bwd], 1)?;
        let last = g.slice(fwd, 0, n - 1, 1)?;
        let first = g.slice(bwd, 0, 0, 1)?;
        let pooled = g.concat(&[last, first], 1)?;
        Ok(EncoderOutput { states, pooled })
    }

    pub fn embed_and_encode(&self, g: &mut Graph, tokens: &[usize]) -> Result<EncoderOutput> {
        if tokens.is_empty() {
            return Err(Error::contract("cannot encode an empty sequence"));
        }
        let e = self.embed(g, tokens)?;
        self.encode(g, e)
    }
}
