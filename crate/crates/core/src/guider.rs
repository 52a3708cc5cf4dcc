//! Full-input guider with a Gaussian dense feature and its KL bound.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::encoder::{Encoder, EncoderDims};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{glorot, ParamStore};
use crate::predictor::PredictionHead;
use crate::tensor::Tensor;

/// Added to the softplus scale so `log sigma` stays finite.
pub const SIGMA_FLOOR: f64 = 1e-4;

/// Standard-normal draws for the reparameterised sample.
pub fn gaussian_noise<R: Rng + ?Sized>(rng: &mut R, d: usize) -> Vec<f64> {
    (0..d).map(|_| StandardNormal.sample(rng)).collect()
}

#[derive(Clone, Copy, Debug)]
pub struct GuiderSample {
    pub mu: Var,
    pub sigma: Var,
    /// `u * sigma + mu`
    pub z: Var,
    pub y_hat: Var,
}

#[derive(Clone, Debug)]
pub struct Guider {
    pub encoder: Encoder,
    feature_dim: usize,
}

impl Guider {
    pub fn new(dims: EncoderDims) -> Self {
        let encoder = Encoder::new("guider", dims);
        let feature_dim = encoder.output_dim();
        Self {
            encoder,
            feature_dim,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R, store: &mut ParamStore) {
        let d = self.feature_dim;
        self.encoder.init(rng, store);
        store.insert("guider.mu.w", glorot(rng, d, d));
        store.insert("guider.mu.b", Tensor::zeros(&[1, d]));
        store.insert("guider.sigma.w", glorot(rng, d, d));
        // softplus(0.5413) ~= 1, so the initial scale is close to the prior
        store.insert("guider.sigma.b", Tensor::full(&[1, d], 0.5413));
    }

    /// Encodes the unmasked input and samples `z = u * sigma + mu`.
    pub fn forward(
        &self,
        g: &mut Graph,
        tokens: &[usize],
        noise: &[f64],
        head: &PredictionHead,
    ) -> Result<GuiderSample> {
        if noise.len() != self.feature_dim {
            return Err(Error::contract(format!(
                "guider noise has {} coordinates, feature dim is {}",
                noise.len(),
                self.feature_dim
            )));
        }
        let enc = self.encoder.embed_and_encode(g, tokens)?;
        let (wm, bm) = (g.param("guider.mu.w")?, g.param("guider.mu.b")?);
        let (ws, bs) = (g.param("guider.sigma.w")?, g.param("guider.sigma.b")?);
        let mu = g.affine(enc.pooled, wm, bm)?;
        let s = g.affine(enc.pooled, ws, bs)?;
        let s = g.softplus(s);
        let sigma = g.add_scalar(s, SIGMA_FLOOR);
        let u = g.leaf(Tensor::row(noise));
        let spread = g.mul(u, sigma)?;
        let z = g.add(spread, mu)?;
        let y_hat = head.forward(g, z)?;
        Ok(GuiderSample { mu, sigma, z, y_hat })
    }
}

/// `sum_k 0.5 * (mu_k^2 + sigma_k^2 - 1 - 2 log sigma_k)`.
pub fn mi_loss(g: &mut Graph, mu: Var, sigma: Var) -> Result<Var> {
    if let Some(bad) = g.value(sigma).data().iter().find(|&&s| !(s > 0.0)) {
        return Err(Error::contract(format!("sigma must be positive, found {bad}")));
    }
    let mu2 = g.mul(mu, mu)?;
    let s2 = g.mul(sigma, sigma)?;
    let log_s = g.ln(sigma);
    let log_s = g.scale(log_s, -2.0);
    let t = g.add(mu2, s2)?;
    let t = g.add(t, log_s)?;
    let t = g.add_scalar(t, -1.0);
    let total = g.sum(t);
    Ok(g.scale(total, 0.5))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::relative_error;
    use crate::predictor::TaskMode;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const DIMS: EncoderDims = EncoderDims {
        vocab_size: 9,
        embed_dim: 3,
        hidden_dim: 2,
    };

    fn setup() -> (Guider, PredictionHead, ParamStore) {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let guider = Guider::new(DIMS);
        let head = PredictionHead::new(TaskMode::Classification, 3, guider.feature_dim());
        let mut store = ParamStore::new();
        guider.init(&mut rng, &mut store);
        head.init(&mut rng, &mut store);
        (guider, head, store)
    }

    fn mi_value(mu: &[f64], sigma: &[f64]) -> f64 {
        let mut g = Graph::new();
        let m = g.leaf(Tensor::row(mu));
        let s = g.leaf(Tensor::row(sigma));
        let l = mi_loss(&mut g, m, s).unwrap();
        g.scalar(l)
    }

    #[test]
    fn mi_values() {
        assert_eq!(mi_value(&[0.0; 3], &[1.0; 3]), 0.0);
        assert!((mi_value(&[1.0], &[1.0]) - 0.5).abs() < 1e-15);
        let expect = 0.5 * (4.0 - 1.0 - 2.0 * 2f64.ln());
        assert!((mi_value(&[0.0], &[2.0]) - expect).abs() < 1e-12);
        assert!((expect - 0.806_85).abs() < 1e-5);
    }

    #[test]
    fn mi_nonnegative_on_grid() {
        for i in -20..=20 {
            for j in 1..=40 {
                let (mu, s) = (i as f64 * 0.1, j as f64 * 0.075);
                let v = mi_value(&[mu], &[s]);
                assert!(v >= 0.0);
                if v == 0.0 {
                    assert!(mu == 0.0 && (s - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn mi_rejects_non_positive_sigma() {
        let mut g = Graph::new();
        let m = g.leaf(Tensor::row(&[0.0]));
        let s = g.leaf(Tensor::row(&[0.0]));
        assert!(matches!(mi_loss(&mut g, m, s), Err(Error::Contract(_))));
    }

    #[test]
    fn mi_gradient_tight() {
        let (mu0, s0) = (0.7, 1.9);
        let mut g = Graph::new();
        let m = g.variable(Tensor::row(&[mu0]));
        let s = g.variable(Tensor::row(&[s0]));
        let l = mi_loss(&mut g, m, s).unwrap();
        let (gm, gs) = (g.grad_of(l, m).unwrap().item(), g.grad_of(l, s).unwrap().item());
        let h = 1e-6;
        let fm = (mi_value(&[mu0 + h], &[s0]) - mi_value(&[mu0 - h], &[s0])) / (2.0 * h);
        let fs = (mi_value(&[mu0], &[s0 + h]) - mi_value(&[mu0], &[s0 - h])) / (2.0 * h);
        assert!(relative_error(gm, fm) < 1e-6);
        assert!(relative_error(gs, fs) < 1e-6);
    }

    #[test]
    fn zero_noise_returns_mean() {
        let (guider, head, store) = setup();
        let mut g = Graph::with_store(&store);
        let s = guider.forward(&mut g, &[1, 2, 3], &[0.0; 4], &head).unwrap();
        assert_eq!(g.value(s.z), g.value(s.mu));
        assert!(g.value(s.sigma).data().iter().all(|&v| v >= SIGMA_FLOOR));
    }

    #[test]
    fn vanishing_scale_collapses_to_mean() {
        let (guider, head, mut store) = setup();
        store.get_mut("guider.sigma.w").unwrap().data_mut().fill(0.0);
        store.get_mut("guider.sigma.b").unwrap().data_mut().fill(-40.0);
        let mut g = Graph::with_store(&store);
        let s = guider.forward(&mut g, &[4, 5], &[1.5, -2.0, 0.3, 0.9], &head).unwrap();
        let gap = g
            .value(s.z)
            .data()
            .iter()
            .zip(g.value(s.mu).data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(gap < 1e-3);
    }

    #[test]
    fn seeded_noise_is_reproducible() {
        let (guider, head, store) = setup();
        let z = |seed| {
            let u = gaussian_noise(&mut ChaCha8Rng::seed_from_u64(seed), 4);
            let mut g = Graph::with_store(&store);
            let s = guider.forward(&mut g, &[1, 8], &u, &head).unwrap();
            g.value(s.z).clone()
        };
        assert_eq!(z(3), z(3));
        assert_ne!(z(3), z(4));
    }
}
