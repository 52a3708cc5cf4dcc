//! Bilinear recurrent language model, its negative-sampling pretraining and
//! the fluency regularizer over relaxed masks.
//!
//! The probability of token `x_i` given its prefix, with the target scaled by
//! its mask value, is `sigmoid(m_i * h_i^T M e_{x_i})`, where `h_i` is the
//! recurrent state after reading the *unmasked* tokens `x_<i` (a learned start
//! state for `i = 0`). Since the model is frozen during rationale training, the
//! scores `s_i = h_i^T M e_{x_i}` can be computed once per sequence.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adam::{AdamConfig, AdamState};
use crate::encoder::{GruWeights, PAD};
use crate::error::{Error, Result};
use crate::graph::{sigmoid, Graph, Var, PROB_EPS};
use crate::params::{accumulate, glorot, scale_grads, uniform, GradMap, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LmDims {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    /// Width of the output embeddings `e`.
    pub out_dim: usize,
}

#[derive(Clone, Debug)]
pub struct LanguageModel {
    pub dims: LmDims,
    gru: GruWeights,
}

impl LanguageModel {
    pub const EMBED: &'static str = "lm.embed";
    pub const START: &'static str = "lm.start";
    pub const OUT: &'static str = "lm.out";
    pub const BILINEAR: &'static str = "lm.m";

    pub fn new(dims: LmDims) -> Self {
        Self {
            dims,
            gru: GruWeights::new("lm.fwd", dims.hidden_dim),
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R, store: &mut ParamStore) {
        let d = self.dims;
        let mut embed = uniform(rng, &[d.vocab_size, d.embed_dim], 0.5);
        embed.data_mut()[..d.embed_dim].fill(0.0);
        store.insert(Self::EMBED, embed);
        self.gru.init(rng, store, d.embed_dim);
        store.insert(Self::START, uniform(rng, &[1, d.hidden_dim], 0.5));
        store.insert(Self::OUT, uniform(rng, &[d.vocab_size, d.out_dim], 0.1));
        store.insert(Self::BILINEAR, glorot(rng, d.hidden_dim, d.out_dim));
    }

    /// `[n, out_dim]` rows `h_i^T M`, with `h_i` read from `x_<i`.
    fn queries(&self, g: &mut Graph, tokens: &[usize]) -> Result<Var> {
        let n = tokens.len();
        if n == 0 {
            return Err(Error::contract("language model needs at least one token"));
        }
        let start = g.param(Self::START)?;
        let h = if n > 1 {
            let table = g.param(Self::EMBED)?;
            let e = g.embedding(table, &tokens[..n - 1], Some(PAD))?;
            let states = self.gru.run(g, e, start, false)?;
            g.concat(&[start, states], 0)?
        } else {
            start
        };
        let m = g.param(Self::BILINEAR)?;
        g.matmul(h, m)
    }

    fn scores_against(&self, g: &mut Graph, queries: Var, targets: &[usize]) -> Result<Var> {
        let out = g.param(Self::OUT)?;
        let e = g.embedding(out, targets, None)?;
        let prod = g.mul(queries, e)?;
        g.sum_axis(prod, 1)
    }

    /// `[n, 1]` column of `s_i = h_i^T M e_{x_i}`.
    pub fn score_column(&self, g: &mut Graph, tokens: &[usize]) -> Result<Var> {
        let q = self.queries(g, tokens)?;
        self.scores_against(g, q, tokens)
    }

    pub fn scores(&self, store: &ParamStore, tokens: &[usize]) -> Result<Vec<f64>> {
        let mut g = Graph::with_trainable(store, |_| false);
        let s = self.score_column(&mut g, tokens)?;
        Ok(g.value(s).data().to_vec())
    }

    /// `p_lm(m_i x_i | x_<i)` for position `i`.
    pub fn prob(&self, store: &ParamStore, tokens: &[usize], i: usize, m_i: f64) -> Result<f64> {
        if i >= tokens.len() {
            return Err(Error::contract(format!("position {i} outside {} tokens", tokens.len())));
        }
        let s = self.scores(store, &tokens[..=i])?[i];
        Ok(sigmoid(m_i * s).clamp(PROB_EPS, 1.0 - PROB_EPS))
    }

    /// Negative-sampling objective for one sequence:
    /// `-sum_i [log sigma(s_i) - mean_k log sigma(h_i^T M e_{neg_k,i})]`.
    ///
    /// `negatives[k]` holds one draw per position.
    pub fn pretrain_loss(&self, g: &mut Graph, tokens: &[usize], negatives: &[Vec<usize>]) -> Result<Var> {
        if negatives.is_empty() || negatives.iter().any(|d| d.len() != tokens.len()) {
            return Err(Error::contract("need at least one negative draw per position"));
        }
        let q = self.queries(g, tokens)?;
        let pos = self.scores_against(g, q, tokens)?;
        let pos = g.sigmoid(pos);
        let pos = g.log_prob(pos);
        let mut neg_terms = Vec::with_capacity(negatives.len());
        for draw in negatives {
            let s = self.scores_against(g, q, draw)?;
            let s = g.sigmoid(s);
            neg_terms.push(g.log_prob(s));
        }
        let neg = g.sum_all(&neg_terms)?;
        let neg = g.scale(neg, 1.0 / negatives.len() as f64);
        let per_pos = g.sub(neg, pos)?;
        Ok(g.sum(per_pos))
    }

    /// Rewrites the output embeddings of `tokens` so that each score
    /// `s_i` equals `targets[i]`, using the minimum-norm solution. The tokens
    /// must be distinct since each row can meet only one constraint.
    pub fn pin_scores(&self, store: &mut ParamStore, tokens: &[usize], targets: &[f64]) -> Result<()> {
        if tokens.len() != targets.len() {
            return Err(Error::contract("one target score per token"));
        }
        let mut seen = std::collections::HashSet::new();
        if !tokens.iter().all(|t| seen.insert(*t)) {
            return Err(Error::contract("pinned tokens must be distinct"));
        }
        let queries = {
            let mut g = Graph::with_trainable(store, |_| false);
            let q = self.queries(&mut g, tokens)?;
            g.value(q).clone()
        };
        let out = store.get_mut(Self::OUT).expect("initialised language model");
        let width = self.dims.out_dim;
        for (i, (&tok, &target)) in tokens.iter().zip(targets).enumerate() {
            let q = queries.row_slice(i);
            let norm2: f64 = q.iter().map(|v| v * v).sum();
            if norm2 < 1e-12 {
                return Err(Error::contract(format!("query at position {i} vanishes")));
            }
            let row = &mut out.data_mut()[tok * width..(tok + 1) * width];
            for (r, v) in row.iter_mut().zip(q) {
                *r = target * v / norm2;
            }
        }
        Ok(())
    }
}

/// `-sum_{i>=1} m_{i-1} log sigmoid(m_i s_i)` for an `[n, 1]` mask column and
/// precomputed scores; the first token carries no term (`m_0 = 0`).
pub fn lm_regularizer(g: &mut Graph, mask: Var, scores: &[f64]) -> Result<Var> {
    let n = scores.len();
    if g.value(mask).shape2() != (n, 1) {
        return Err(Error::contract(format!(
            "mask shape {:?} does not match {n} scores",
            g.value(mask).shape()
        )));
    }
    if n < 2 {
        return Ok(g.leaf(Tensor::scalar(0.0)));
    }
    let s = g.leaf(Tensor::column(scores));
    let ms = g.mul(mask, s)?;
    let p = g.sigmoid(ms);
    let lp = g.log_prob(p);
    let prev = g.slice(mask, 0, 0, n - 1)?;
    let next = g.slice(lp, 0, 1, n - 1)?;
    let terms = g.mul(prev, next)?;
    let total = g.sum(terms);
    Ok(g.scale(total, -1.0))
}

/// Token frequencies of a corpus, padding excluded.
#[derive(Clone, Debug)]
pub struct UnigramDistribution {
    probs: Vec<f64>,
    index: WeightedIndex<f64>,
}

impl UnigramDistribution {
    pub fn from_corpus<'a>(corpus: impl IntoIterator<Item = &'a [usize]>, vocab_size: usize) -> Result<Self> {
        let mut counts = vec![0.0; vocab_size];
        for seq in corpus {
            for &t in seq {
                if t >= vocab_size {
                    return Err(Error::contract(format!("token {t} outside vocab of {vocab_size}")));
                }
                if t != PAD {
                    counts[t] += 1.0;
                }
            }
        }
        let total: f64 = counts.iter().sum();
        if total == 0.0 {
            return Err(Error::Data("corpus has no tokens".into()));
        }
        let index = WeightedIndex::new(&counts).expect("positive total weight");
        Ok(Self {
            probs: counts.into_iter().map(|c| c / total).collect(),
            index,
        })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        self.index.sample(rng)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    /// Optimizer updates; zero leaves the model untouched.
    pub steps: usize,
    pub k_neg: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            k_neg: 5,
            batch_size: 16,
            lr: 1e-2,
            seed: 0,
        }
    }
}

/// Fits the language-model parameters in `store` and returns the mean
/// per-sequence loss of every step.
pub fn pretrain(lm: &LanguageModel, store: &mut ParamStore, corpus: &[Vec<usize>], cfg: &PretrainConfig) -> Result<Vec<f64>> {
    if corpus.is_empty() || corpus.iter().any(Vec::is_empty) {
        return Err(Error::Data("language-model corpus must hold nonempty sequences".into()));
    }
    if cfg.k_neg == 0 || cfg.batch_size == 0 {
        return Err(Error::Config("k_neg and batch_size must be positive".into()));
    }
    let unigram = UnigramDistribution::from_corpus(corpus.iter().map(Vec::as_slice), lm.dims.vocab_size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    });
    let mut history = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let mut grads = GradMap::new();
        let mut loss_sum = 0.0;
        for _ in 0..cfg.batch_size {
            let seq = corpus.choose(&mut rng).expect("nonempty corpus");
            let negatives: Vec<Vec<usize>> = (0..cfg.k_neg)
                .map(|_| seq.iter().map(|_| unigram.sample(&mut rng)).collect())
                .collect();
            let mut g = Graph::with_trainable(store, |name| name.starts_with("lm."));
            let loss = lm.pretrain_loss(&mut g, seq, &negatives)?;
            loss_sum += g.scalar(loss);
            accumulate(&mut grads, g.backward(loss)?);
        }
        let scale = 1.0 / cfg.batch_size as f64;
        scale_grads(&mut grads, scale);
        adam.step(store, &grads)?;
        history.push(loss_sum * scale);
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::relative_error;

    const DIMS: LmDims = LmDims {
        vocab_size: 12,
        embed_dim: 4,
        hidden_dim: 5,
        out_dim: 3,
    };

    fn model(seed: u64) -> (LanguageModel, ParamStore) {
        let lm = LanguageModel::new(DIMS);
        let mut store = ParamStore::new();
        lm.init(&mut ChaCha8Rng::seed_from_u64(seed), &mut store);
        (lm, store)
    }

    fn reg(mask: &[f64], scores: &[f64]) -> f64 {
        let mut g = Graph::new();
        let m = g.leaf(Tensor::column(mask));
        let l = lm_regularizer(&mut g, m, scores).unwrap();
        g.scalar(l)
    }

    #[test]
    fn zero_mask_target_gives_half() {
        let (lm, store) = model(1);
        assert_eq!(lm.prob(&store, &[3, 4, 5], 2, 0.0).unwrap(), 0.5);
        let s = lm.scores(&store, &[3, 4, 5]).unwrap()[2];
        assert!((lm.prob(&store, &[3, 4, 5], 2, 1.0).unwrap() - sigmoid(s)).abs() < 1e-15);
    }

    #[test]
    fn prob_monotone_in_mask_for_positive_score() {
        let (lm, mut store) = model(2);
        let toks = [2, 7, 9];
        lm.pin_scores(&mut store, &toks, &[0.3, 1.2, 2.5]).unwrap();
        let mut last = 0.0;
        for k in 0..=20 {
            let p = lm.prob(&store, &toks, 2, k as f64 / 20.0).unwrap();
            assert!(p > last);
            last = p;
        }
    }

    #[test]
    fn scores_do_not_depend_on_later_tokens() {
        let (lm, store) = model(3);
        let a = lm.scores(&store, &[1, 2, 3, 4]).unwrap();
        let b = lm.scores(&store, &[1, 2, 3, 9]).unwrap();
        assert_eq!(a[..3], b[..3]);
        assert_ne!(a[3], b[3]);
    }

    #[test]
    fn pinned_scores_are_met() {
        let (lm, mut store) = model(4);
        let toks = [5, 1, 8, 2, 11];
        let targets = [2.0, 3.1, 2.5, 3.9, 2.2];
        lm.pin_scores(&mut store, &toks, &targets).unwrap();
        let got = lm.scores(&store, &toks).unwrap();
        for (g, t) in got.iter().zip(targets) {
            assert!((g - t).abs() < 1e-10);
        }
        assert!(lm.pin_scores(&mut store, &[5, 5], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn regularizer_reductions() {
        let scores = [1.5, -0.3, 2.0, 0.7];
        assert_eq!(reg(&[0.0; 4], &scores), 0.0);
        let nll: f64 = scores[1..].iter().map(|&s| -sigmoid(s).ln()).sum();
        assert!((reg(&[1.0; 4], &scores) - nll).abs() < 1e-12);
        // only the pair (0, 1) contributes, with an unmasked-target probability of 1/2
        assert!((reg(&[1.0, 0.0, 0.0, 0.0], &scores) - 2f64.ln()).abs() < 1e-12);
        assert_eq!(reg(&[1.0], &[3.0]), 0.0);
        assert!(reg(&[0.3, 0.9, 0.1, 0.6], &scores) >= 0.0);
    }

    #[test]
    fn regularizer_gradient_in_mask() {
        let scores = [0.4, 2.2, -1.1, 3.0, 0.8];
        let m0 = [0.2, 0.9, 0.55, 0.05, 0.7];
        let mut g = Graph::new();
        let m = g.variable(Tensor::column(&m0));
        let l = lm_regularizer(&mut g, m, &scores).unwrap();
        let grad = g.grad_of(l, m).unwrap();
        let h = 1e-6;
        for i in 0..m0.len() {
            let mut up = m0;
            let mut down = m0;
            up[i] += h;
            down[i] -= h;
            let fd = (reg(&up, &scores) - reg(&down, &scores)) / (2.0 * h);
            assert!(relative_error(grad.data()[i], fd) < 1e-5, "position {i}");
        }
    }

    #[test]
    fn unigram_excludes_pad_and_normalises() {
        let corpus = [vec![0, 2, 2, 3], vec![3, 0, 2]];
        let u = UnigramDistribution::from_corpus(corpus.iter().map(Vec::as_slice), 5).unwrap();
        assert_eq!(u.probs(), &[0.0, 0.0, 0.6, 0.4, 0.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!((0..1000).all(|_| matches!(u.sample(&mut rng), 2 | 3)));
        assert!(UnigramDistribution::from_corpus([&[0usize, 0][..]], 3).is_err());
    }

    #[test]
    fn zero_steps_is_a_no_op() {
        let (lm, mut store) = model(5);
        let before = store.clone();
        let cfg = PretrainConfig {
            steps: 0,
            ..PretrainConfig::default()
        };
        let hist = pretrain(&lm, &mut store, &[vec![2, 3, 4]], &cfg).unwrap();
        assert!(hist.is_empty());
        assert_eq!(store, before);
    }

    #[test]
    fn pretraining_updates_only_lm_and_is_deterministic() {
        let (lm, store) = model(6);
        let mut a = store.clone();
        a.insert("other.w", Tensor::scalar(1.0));
        let mut b = a.clone();
        let corpus = vec![vec![2, 3, 4, 5], vec![6, 3, 2]];
        let cfg = PretrainConfig {
            steps: 3,
            batch_size: 2,
            ..PretrainConfig::default()
        };
        pretrain(&lm, &mut a, &corpus, &cfg).unwrap();
        pretrain(&lm, &mut b, &corpus, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.get("other.w").unwrap().item(), 1.0);
        assert_ne!(a.get(LanguageModel::OUT), store.get(LanguageModel::OUT));
    }
}
