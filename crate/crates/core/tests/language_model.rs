mod common;

use common::{consecutive_minimum, is_consecutive, patterns, pinned_lm};
use infocal::lm::{pretrain, LanguageModel, LmDims, PretrainConfig, UnigramDistribution};
use infocal::ParamStore;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

#[test]
fn bigram_corpus_prefers_the_observed_successor() {
    let (a, b) = (2, 3);
    let dims = LmDims {
        vocab_size: 8,
        embed_dim: 4,
        hidden_dim: 6,
        out_dim: 4,
    };
    let lm = LanguageModel::new(dims);
    let mut store = ParamStore::new();
    lm.init(&mut ChaCha8Rng::seed_from_u64(11), &mut store);
    let corpus = vec![vec![a, b, a, b, a, b]; 8];
    let cfg = PretrainConfig {
        steps: 150,
        batch_size: 4,
        ..PretrainConfig::default()
    };
    let hist = pretrain(&lm, &mut store, &corpus, &cfg).unwrap();
    assert!(hist.last().unwrap() < &hist[0]);
    let p_b = lm.prob(&store, &[a, b], 1, 1.0).unwrap();
    for c in (0..dims.vocab_size).filter(|&c| c != b) {
        let p_c = lm.prob(&store, &[a, c], 1, 1.0).unwrap();
        assert!(p_b > p_c, "p(b|a)={p_b} p({c}|a)={p_c}");
    }
}

#[test]
fn negative_draws_follow_unigram() {
    let corpus = [vec![2, 2, 2, 3, 3, 4, 5, 5, 5, 5], vec![0, 6, 2, 4]];
    let u = UnigramDistribution::from_corpus(corpus.iter().map(Vec::as_slice), 8).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let draws = 10_000;
    let mut counts = [0usize; 8];
    for _ in 0..draws {
        counts[u.sample(&mut rng)] += 1;
    }
    let support: Vec<usize> = (0..8).filter(|&t| u.probs()[t] > 0.0).collect();
    assert!(counts.iter().enumerate().all(|(t, &c)| c == 0 || support.contains(&t)));
    let stat: f64 = support
        .iter()
        .map(|&t| {
            let e = u.probs()[t] * draws as f64;
            (counts[t] as f64 - e).powi(2) / e
        })
        .sum();
    let chi = ChiSquared::new((support.len() - 1) as f64).unwrap();
    let p = 1.0 - chi.cdf(stat);
    assert!(p > 0.01, "chi-square {stat}, p = {p}");
}

#[test]
fn consecutive_masks_minimise_the_regulariser() {
    for seed in 0..20 {
        for n in 3..=8 {
            let lm = pinned_lm(seed * 31 + n as u64, n);
            assert!(lm.premises_hold());
            consecutive_minimum(&lm).unwrap();
        }
    }
}

#[test]
fn length_six_choose_three_enumeration() {
    let lm = pinned_lm(7, 6);
    let all = patterns(6, 3);
    assert_eq!(all.len(), 20);
    let best = all.iter().min_by(|a, b| lm.loss(a).total_cmp(&lm.loss(b))).unwrap();
    assert!(is_consecutive(best), "{best:?}");
}

proptest! {
    #[test]
    fn extending_a_run_never_increases_the_loss(seed in 0u64..500, n in 4usize..=8, bits in any::<u32>()) {
        let lm = pinned_lm(seed, n);
        prop_assume!(lm.premises_hold());
        let pattern: Vec<bool> = (0..n).map(|i| bits >> i & 1 == 1).collect();
        // move an isolated selected position k < n - 1 next to another run
        for k in 0..n - 1 {
            let isolated = pattern[k]
                && (k == 0 || !pattern[k - 1])
                && !pattern[k + 1];
            if !isolated {
                continue;
            }
            for j in 0..n {
                if pattern[j] || j == k {
                    continue;
                }
                let touches = (j > 0 && pattern[j - 1] && j - 1 != k) || (j + 1 < n && pattern[j + 1] && j + 1 != k);
                if !touches {
                    continue;
                }
                let mut moved = pattern.clone();
                moved[k] = false;
                moved[j] = true;
                prop_assert!(lm.loss(&moved) <= lm.loss(&pattern) + 1e-12,
                    "moving {} to {} in {:?}", k, j, pattern);
            }
        }
    }
}
