//! Helpers shared by the integration and acceptance suites.
#![allow(dead_code)]

use infocal::graph::{sigmoid, Graph};
use infocal::lm::{lm_regularizer, LanguageModel, LmDims};
use infocal::{ParamStore, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const EPS: f64 = 0.01;

/// A language model whose scores on one sequence were pinned into
/// `[2, 3.9]`, with per-position mask values for the selected and the
/// unselected state.
pub struct PinnedLm {
    pub tokens: Vec<usize>,
    pub scores: Vec<f64>,
    pub on: Vec<f64>,
    pub off: Vec<f64>,
}

pub fn pinned_lm(seed: u64, n: usize) -> PinnedLm {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = LmDims {
        vocab_size: 16,
        embed_dim: 4,
        hidden_dim: 6,
        out_dim: 5,
    };
    let lm = LanguageModel::new(dims);
    let mut store = ParamStore::new();
    lm.init(&mut rng, &mut store);
    let mut ids: Vec<usize> = (2..dims.vocab_size).collect();
    ids.shuffle(&mut rng);
    let tokens = ids[..n].to_vec();
    let targets: Vec<f64> = (0..n).map(|_| rng.random_range(2.0..3.9)).collect();
    lm.pin_scores(&mut store, &tokens, &targets).unwrap();
    let scores = lm.scores(&store, &tokens).unwrap();
    let on = (0..n).map(|_| 1.0 - rng.random_range(0.0..EPS)).collect();
    let off = (0..n).map(|_| rng.random_range(0.0..EPS)).collect();
    PinnedLm {
        tokens,
        scores,
        on,
        off,
    }
}

impl PinnedLm {
    /// Checks the contiguity premises on the realised model.
    pub fn premises_hold(&self) -> bool {
        let n = self.tokens.len();
        let masked: Vec<f64> = (0..n).map(|i| sigmoid(self.off[i] * self.scores[i])).collect();
        let spread = masked.iter().cloned().fold(f64::MIN, f64::max) - masked.iter().cloned().fold(f64::MAX, f64::min);
        self.on.iter().all(|&m| m > 1.0 - EPS && m <= 1.0)
            && self.off.iter().all(|&m| (0.0..EPS).contains(&m))
            && spread < EPS
            && self.scores.iter().all(|s| (2.0 - 1e-9..=3.9 + 1e-9).contains(s))
    }

    pub fn mask_values(&self, pattern: &[bool]) -> Vec<f64> {
        pattern
            .iter()
            .enumerate()
            .map(|(i, &s)| if s { self.on[i] } else { self.off[i] })
            .collect()
    }

    pub fn loss(&self, pattern: &[bool]) -> f64 {
        let mut g = Graph::new();
        let m = g.leaf(Tensor::column(&self.mask_values(pattern)));
        let l = lm_regularizer(&mut g, m, &self.scores).unwrap();
        g.scalar(l)
    }
}

pub fn is_consecutive(pattern: &[bool]) -> bool {
    let first = pattern.iter().position(|&b| b);
    let last = pattern.iter().rposition(|&b| b);
    match (first, last) {
        (Some(a), Some(b)) => pattern[a..=b].iter().all(|&x| x),
        _ => true,
    }
}

/// All length-`n` patterns with exactly `k` selected positions.
pub fn patterns(n: usize, k: usize) -> Vec<Vec<bool>> {
    (0u32..1 << n)
        .filter(|b| b.count_ones() as usize == k)
        .map(|b| (0..n).map(|i| b >> i & 1 == 1).collect())
        .collect()
}

/// For every cardinality, whether a consecutive pattern attains the minimum.
pub fn consecutive_minimum(lm: &PinnedLm) -> Result<(), String> {
    let n = lm.tokens.len();
    for k in 1..n {
        let all = patterns(n, k);
        let best = all.iter().map(|p| lm.loss(p)).fold(f64::INFINITY, f64::min);
        let attained = all
            .iter()
            .filter(|p| is_consecutive(p))
            .any(|p| lm.loss(p) <= best);
        if !attained {
            return Err(format!("n={n} k={k}: no consecutive mask attains {best}"));
        }
    }
    Ok(())
}
