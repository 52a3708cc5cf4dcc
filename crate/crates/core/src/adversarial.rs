//! Discriminator over dense features and the two adversarial losses.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var, PROB_EPS};
use crate::params::{glorot, ParamStore};
use crate::tensor::Tensor;

/// Form of the discriminator's loss on generated features.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscLoss {
    /// `-log D(real) + log D(fake)`
    #[default]
    Calibration,
    /// `-log D(real) - log(1 - D(fake))`
    Standard,
}

/// `d -> hidden (tanh) -> 1 (sigmoid)`, output clamped to `[eps, 1 - eps]`.
#[derive(Clone, Debug)]
pub struct Discriminator {
    pub dim: usize,
    pub hidden: usize,
}

impl Discriminator {
    pub fn new(dim: usize) -> Self {
        Self { dim, hidden: dim }
    }

    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R, store: &mut ParamStore) {
        store.insert("disc.hidden.w", glorot(rng, self.dim, self.hidden));
        store.insert("disc.hidden.b", Tensor::zeros(&[1, self.hidden]));
        store.insert("disc.out.w", glorot(rng, self.hidden, 1));
        store.insert("disc.out.b", Tensor::zeros(&[1, 1]));
    }

    /// Probability that `z` (`[1, d]`) came from the guider.
    pub fn discriminate(&self, g: &mut Graph, z: Var) -> Result<Var> {
        if g.value(z).cols() != self.dim {
            return Err(Error::contract(format!(
                "discriminator expects {} features, got {:?}",
                self.dim,
                g.value(z).shape()
            )));
        }
        let (w1, b1) = (g.param("disc.hidden.w")?, g.param("disc.hidden.b")?);
        let (w2, b2) = (g.param("disc.out.w")?, g.param("disc.out.b")?);
        let h = g.affine(z, w1, b1)?;
        let h = g.tanh(h);
        let o = g.affine(h, w2, b2)?;
        let p = g.sigmoid(o);
        Ok(g.clamp(p, PROB_EPS, 1.0 - PROB_EPS))
    }
}

/// Discriminator loss given `D(z_nero)` and `D(z~_nero)`.
pub fn d_loss(g: &mut Graph, d_real: Var, d_fake: Var, kind: DiscLoss) -> Var {
    let real = g.log_prob(d_real);
    let real = g.scale(real, -1.0);
    let fake = match kind {
        DiscLoss::Calibration => g.log_prob(d_fake),
        DiscLoss::Standard => {
            let q = g.rsub_scalar(1.0, d_fake);
            let lq = g.log_prob(q);
            g.scale(lq, -1.0)
        }
    };
    let both = g.add(real, fake).expect("scalars broadcast");
    g.sum(both)
}

/// Generator loss `-log D(z~_nero)`.
pub fn g_loss(g: &mut Graph, d_fake: Var) -> Var {
    let l = g.log_prob(d_fake);
    let l = g.scale(l, -1.0);
    g.sum(l)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn disc(dim: usize) -> (Discriminator, ParamStore) {
        let d = Discriminator::new(dim);
        let mut store = ParamStore::new();
        d.init(&mut ChaCha8Rng::seed_from_u64(5), &mut store);
        (d, store)
    }

    fn score(d: &Discriminator, store: &ParamStore, z: &[f64]) -> f64 {
        let mut g = Graph::with_store(store);
        let zv = g.leaf(Tensor::row(z));
        let p = d.discriminate(&mut g, zv).unwrap();
        g.scalar(p)
    }

    fn losses(real: f64, fake: f64, kind: DiscLoss) -> (f64, f64) {
        let mut g = Graph::new();
        let r = g.leaf(Tensor::scalar(real));
        let f = g.leaf(Tensor::scalar(fake));
        let dl = d_loss(&mut g, r, f, kind);
        let gl = g_loss(&mut g, f);
        (g.scalar(dl), g.scalar(gl))
    }

    #[test]
    fn zero_weights_give_half() {
        let (d, mut store) = disc(3);
        for (_, t) in store.iter_mut() {
            t.data_mut().fill(0.0);
        }
        assert_eq!(score(&d, &store, &[1.0, -2.0, 3.0]), 0.5);
    }

    #[test]
    fn output_stays_clamped_and_saturates_monotonically() {
        let (d, store) = disc(3);
        let z = [0.4, -1.0, 2.0];
        let mut last = None;
        for k in 0..60 {
            let mut s = store.clone();
            let scale = 1.5f64.powi(k);
            s.get_mut("disc.out.w").unwrap().data_mut().iter_mut().for_each(|w| *w *= scale);
            let p = score(&d, &s, &z);
            assert!((PROB_EPS..=1.0 - PROB_EPS).contains(&p));
            if let Some(prev) = last {
                let toward_bound = if p >= 0.5 { p >= prev } else { p <= prev };
                assert!(toward_bound, "step {k}: {prev} -> {p}");
            }
            last = Some(p);
        }
        let end = last.unwrap();
        assert!(end == PROB_EPS || end == 1.0 - PROB_EPS);
    }

    #[test]
    fn dimension_checked() {
        let (d, store) = disc(3);
        let mut g = Graph::with_store(&store);
        let z = g.leaf(Tensor::row(&[1.0, 2.0]));
        assert!(d.discriminate(&mut g, z).is_err());
    }

    #[test]
    fn loss_values() {
        assert_eq!(losses(0.5, 0.5, DiscLoss::Calibration).0, 0.0);
        let (dl, _) = losses(1.0 - PROB_EPS, PROB_EPS, DiscLoss::Calibration);
        let expect = -(1.0 - PROB_EPS).ln() + PROB_EPS.ln();
        assert!((dl - expect).abs() < 1e-12);
        assert!((dl + 16.118).abs() < 1e-3);
        let (a, _) = losses(0.8, 0.3, DiscLoss::Calibration);
        let (b, _) = losses(0.3, 0.8, DiscLoss::Calibration);
        assert!((a + b).abs() < 1e-15);
        let (_, gl) = losses(0.9, 0.5, DiscLoss::Calibration);
        assert!((gl - 2f64.ln()).abs() < 1e-15);
        let (_, gl) = losses(0.9, 1.0, DiscLoss::Calibration);
        assert!(gl < 1e-6);
        let (std, _) = losses(0.5, 0.5, DiscLoss::Standard);
        assert!((std - 2.0 * 2f64.ln()).abs() < 1e-12);
    }
}
