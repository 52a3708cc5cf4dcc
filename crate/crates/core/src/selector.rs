//! Per-token selection probabilities, binary-concrete masks and the
//! information-bottleneck penalty on selection.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{Encoder, EncoderDims, PAD};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var, PROB_EPS};
use crate::params::{glorot, ParamStore};
use crate::tensor::Tensor;

/// Selection probabilities `p_i`, each inside `[PROB_EPS, 1 - PROB_EPS]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectionProbs(pub Vec<f64>);

impl SelectionProbs {
    /// Deterministic inference mask `p_i > 0.5`.
    pub fn hard_mask(&self) -> Vec<u8> {
        self.0.iter().map(|&p| u8::from(p > 0.5)).collect()
    }
}

/// Gumbel draws for the "select" and "skip" logits of every token.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GumbelNoise {
    pub select: Vec<f64>,
    pub skip: Vec<f64>,
}

/// `-log(-log u)` for `u` in `(0, 1)`.
pub fn gumbel(u: f64) -> f64 {
    -(-u.ln()).ln()
}

impl GumbelNoise {
    pub fn sample<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Self {
        let mut draw = || {
            // open interval: random() is in [0, 1)
            let u: f64 = rng.random();
            gumbel(u.max(f64::MIN_POSITIVE))
        };
        let select = (0..n).map(|_| draw()).collect();
        let skip = (0..n).map(|_| draw()).collect();
        Self { select, skip }
    }

    pub fn zeros(n: usize) -> Self {
        Self {
            select: vec![0.0; n],
            skip: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.select.len()
    }

    pub fn is_empty(&self) -> bool {
        self.select.is_empty()
    }
}

/// A sampled (or hardened) mask together with what produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct RelaxedMask {
    pub m: Vec<f64>,
    pub tau: f64,
    pub noise: Option<GumbelNoise>,
    pub hard: bool,
}

/// How a mask is drawn from selection probabilities.
#[derive(Clone, Debug)]
pub enum MaskMode<'a> {
    /// Two-class Gumbel-softmax per token at temperature `tau`.
    Relaxed { tau: f64, noise: &'a GumbelNoise },
    /// `m_i = [p_i > 0.5]`, no noise.
    Hard,
}

#[derive(Clone, Debug)]
pub struct Selector {
    pub encoder: Encoder,
    head_w: String,
    head_b: String,
}

impl Selector {
    pub fn new(dims: EncoderDims) -> Self {
        Self {
            encoder: Encoder::new("selector", dims),
            head_w: "selector.head.w".into(),
            head_b: "selector.head.b".into(),
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R, store: &mut ParamStore) {
        self.encoder.init(rng, store);
        store.insert(&self.head_w, glorot(rng, self.encoder.output_dim(), 1));
        store.insert(&self.head_b, Tensor::zeros(&[1, 1]));
    }

    /// `[n, 1]` column of clamped `sigmoid(w . H_i + b)`; pad tokens get `PROB_EPS`.
    pub fn select_probs(&self, g: &mut Graph, tokens: &[usize]) -> Result<Var> {
        let enc = self.encoder.embed_and_encode(g, tokens)?;
        let w = g.param(&self.head_w)?;
        let b = g.param(&self.head_b)?;
        let logits = g.affine(enc.states, w, b)?;
        let p = g.sigmoid(logits);
        let p = g.clamp(p, PROB_EPS, 1.0 - PROB_EPS);
        if !tokens.contains(&PAD) {
            return Ok(p);
        }
        let keep: Vec<f64> = tokens.iter().map(|&t| f64::from(u8::from(t != PAD))).collect();
        let floor: Vec<f64> = keep.iter().map(|k| (1.0 - k) * PROB_EPS).collect();
        let keep = g.leaf(Tensor::column(&keep));
        let floor = g.leaf(Tensor::column(&floor));
        let p = g.mul(p, keep)?;
        g.add(p, floor)
    }

    /// Inference-only probabilities.
    pub fn probs(&self, store: &ParamStore, tokens: &[usize]) -> Result<SelectionProbs> {
        let mut g = Graph::with_trainable(store, |_| false);
        let p = self.select_probs(&mut g, tokens)?;
        Ok(SelectionProbs(g.value(p).data().to_vec()))
    }
}

/// Draws the `[n, 1]` mask column from a `[n, 1]` probability column.
///
/// Relaxed: `m_i = sigmoid((log p_i - log(1 - p_i) + g1_i - g0_i) / tau)`,
/// which is the two-class softmax over `(log p_i + g1_i, log(1 - p_i) + g0_i)`.
pub fn sample_mask(g: &mut Graph, p: Var, mode: MaskMode<'_>) -> Result<Var> {
    let n = g.value(p).rows();
    match mode {
        MaskMode::Hard => {
            let hard: Vec<f64> = g
                .value(p)
                .data()
                .iter()
                .map(|&v| f64::from(u8::from(v > 0.5)))
                .collect();
            Ok(g.leaf(Tensor::column(&hard)))
        }
        MaskMode::Relaxed { tau, noise } => {
            if !(tau > 0.0) {
                return Err(Error::contract(format!("temperature must be positive, got {tau}")));
            }
            if noise.len() != n {
                return Err(Error::contract(format!(
                    "noise for {} tokens, sequence has {n}",
                    noise.len()
                )));
            }
            let log_p = g.log_prob(p);
            let q = g.rsub_scalar(1.0, p);
            let log_q = g.log_prob(q);
            let logit = g.sub(log_p, log_q)?;
            let diff: Vec<f64> = noise.select.iter().zip(&noise.skip).map(|(a, b)| a - b).collect();
            let diff = g.leaf(Tensor::column(&diff));
            let z = g.add(logit, diff)?;
            let z = g.scale(z, 1.0 / tau);
            Ok(g.sigmoid(z))
        }
    }
}

/// Value-level mask sampling for callers outside a graph.
pub fn sample_relaxed_mask<R: Rng + ?Sized>(
    probs: &SelectionProbs,
    tau: f64,
    rng: &mut R,
    hard: bool,
) -> Result<RelaxedMask> {
    let mut g = Graph::new();
    let p = g.leaf(Tensor::column(&probs.0));
    if hard {
        let m = sample_mask(&mut g, p, MaskMode::Hard)?;
        return Ok(RelaxedMask {
            m: g.value(m).data().to_vec(),
            tau,
            noise: None,
            hard: true,
        });
    }
    let noise = GumbelNoise::sample(rng, probs.0.len());
    let m = sample_mask(&mut g, p, MaskMode::Relaxed { tau, noise: &noise })?;
    Ok(RelaxedMask {
        m: g.value(m).data().to_vec(),
        tau,
        noise: Some(noise),
        hard: false,
    })
}

/// `sum_i KL(Bernoulli(p_i) || Bernoulli(r_select))` over non-pad tokens.
pub fn ib_loss(g: &mut Graph, p: Var, r_select: f64, tokens: &[usize]) -> Result<Var> {
    if !(r_select > 0.0 && r_select < 1.0) {
        return Err(Error::contract(format!("prior must lie in (0, 1), got {r_select}")));
    }
    let log_p = g.log_prob(p);
    let q = g.rsub_scalar(1.0, p);
    let log_q = g.log_prob(q);
    let sel = g.add_scalar(log_p, -r_select.ln());
    let sel = g.mul(p, sel)?;
    let skip = g.add_scalar(log_q, -(1.0 - r_select).ln());
    let skip = g.mul(q, skip)?;
    let kl = g.add(sel, skip)?;
    let kl = if tokens.contains(&PAD) {
        let keep: Vec<f64> = tokens.iter().map(|&t| f64::from(u8::from(t != PAD))).collect();
        let keep = g.leaf(Tensor::column(&keep));
        g.mul(kl, keep)?
    } else {
        kl
    };
    Ok(g.sum(kl))
}
