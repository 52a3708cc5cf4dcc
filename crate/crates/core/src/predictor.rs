//! Prediction from mask-scaled embeddings, and the prediction head shared
//! with the guider.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Label;
use crate::encoder::{Encoder, EncoderDims};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{glorot, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskMode {
    /// Softmax over classes with cross-entropy.
    Classification,
    /// Sigmoid score in `[0, 1]` with squared error.
    Regression,
}

/// The single `W_p, b_p` head. Predictor and guider both call into this
/// instance, so both receive gradients on the same parameters.
#[derive(Clone, Debug)]
pub struct PredictionHead {
    pub mode: TaskMode,
    pub num_outputs: usize,
    pub feature_dim: usize,
}

impl PredictionHead {
    pub const WEIGHT: &'static str = "head.w";
    pub const BIAS: &'static str = "head.b";

    pub fn new(mode: TaskMode, num_classes: usize, feature_dim: usize) -> Self {
        let num_outputs = match mode {
            TaskMode::Classification => num_classes,
            TaskMode::Regression => 1,
        };
        Self {
            mode,
            num_outputs,
            feature_dim,
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R, store: &mut ParamStore) {
        store.insert(Self::WEIGHT, glorot(rng, self.feature_dim, self.num_outputs));
        store.insert(Self::BIAS, Tensor::zeros(&[1, self.num_outputs]));
    }

    /// Class distribution `[1, K]` or a `[1, 1]` score.
    pub fn forward(&self, g: &mut Graph, feature: Var) -> Result<Var> {
        let w = g.param(Self::WEIGHT)?;
        let b = g.param(Self::BIAS)?;
        let logits = g.affine(feature, w, b)?;
        Ok(match self.mode {
            TaskMode::Classification => g.softmax(logits),
            TaskMode::Regression => g.sigmoid(logits),
        })
    }
}

/// Single-sample prediction loss: `-log y_hat[y]` or `(y_hat - y)^2`.
pub fn prediction_loss(g: &mut Graph, y_hat: Var, label: &Label, mode: TaskMode) -> Result<Var> {
    match (mode, label) {
        (TaskMode::Classification, &Label::Class(c)) => {
            let k = g.value(y_hat).cols();
            if c >= k {
                return Err(Error::contract(format!("label {c} out of range for {k} classes")));
            }
            let p = g.slice(y_hat, 1, c, 1)?;
            let lp = g.log_prob(p);
            let nll = g.scale(lp, -1.0);
            Ok(g.sum(nll))
        }
        (TaskMode::Regression, &Label::Score(y)) => {
            if !(0.0..=1.0).contains(&y) {
                return Err(Error::contract(format!("regression target {y} outside [0, 1]")));
            }
            let d = g.add_scalar(y_hat, -y);
            let sq = g.mul(d, d)?;
            Ok(g.sum(sq))
        }
        (mode, label) => Err(Error::contract(format!("label {label:?} does not fit {mode:?} mode"))),
    }
}

#[derive(Clone, Copy, Debug)]
pub struct PredictorOutput {
    /// Pooled dense feature `[1, d]`.
    pub feature: Var,
    pub y_hat: Var,
}

#[derive(Clone, Debug)]
pub struct Predictor {
    pub encoder: Encoder,
}

impl Predictor {
    pub fn new(dims: EncoderDims) -> Self {
        Self {
            encoder: Encoder::new("predictor", dims),
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R, store: &mut ParamStore) {
        self.encoder.init(rng, store);
    }

    /// Encodes the rows `m_i * embed(x_i)` and applies the shared head.
    ///
    /// `mask` is an `[n, 1]` column.
    pub fn predict_masked(
        &self,
        g: &mut Graph,
        tokens: &[usize],
        mask: Var,
        head: &PredictionHead,
    ) -> Result<PredictorOutput> {
        let n = tokens.len();
        if n == 0 {
            return Err(Error::contract("cannot predict from an empty sequence"));
        }
        if g.value(mask).shape2() != (n, 1) {
            return Err(Error::contract(format!(
                "mask shape {:?} does not match {n} tokens",
                g.value(mask).shape()
            )));
        }
        let e = self.encoder.embed(g, tokens)?;
        let masked = g.mul(e, mask)?;
        let enc = self.encoder.encode(g, masked)?;
        let y_hat = head.forward(g, enc.pooled)?;
        Ok(PredictorOutput {
            feature: enc.pooled,
            y_hat,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const DIMS: EncoderDims = EncoderDims {
        vocab_size: 12,
        embed_dim: 3,
        hidden_dim: 2,
    };

    fn setup(mode: TaskMode) -> (Predictor, PredictionHead, ParamStore) {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let pred = Predictor::new(DIMS);
        let head = PredictionHead::new(mode, 4, 4);
        let mut store = ParamStore::new();
        pred.init(&mut rng, &mut store);
        head.init(&mut rng, &mut store);
        store.get_mut(PredictionHead::BIAS).unwrap().data_mut()[0] = 0.4;
        (pred, head, store)
    }

    fn run(store: &ParamStore, pred: &Predictor, head: &PredictionHead, toks: &[usize], m: &[f64]) -> (Tensor, Tensor) {
        let mut g = Graph::with_store(store);
        let mask = g.leaf(Tensor::column(m));
        let out = pred.predict_masked(&mut g, toks, mask, head).unwrap();
        (g.value(out.feature).clone(), g.value(out.y_hat).clone())
    }

    #[test]
    fn null_mask_ignores_tokens() {
        let (pred, head, store) = setup(TaskMode::Classification);
        let a = run(&store, &pred, &head, &[1, 2, 3], &[0.0; 3]);
        let b = run(&store, &pred, &head, &[9, 4, 7], &[0.0; 3]);
        assert_eq!(a, b);
        // bias-only prediction
        let probs = a.1.data();
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn masked_tokens_do_not_matter() {
        let (pred, head, store) = setup(TaskMode::Classification);
        let m = [1.0, 0.0, 0.6, 0.0];
        let a = run(&store, &pred, &head, &[1, 2, 3, 4], &m);
        let b = run(&store, &pred, &head, &[1, 11, 3, 5], &m);
        assert_eq!(a, b);
        let c = run(&store, &pred, &head, &[1, 2, 8, 4], &m);
        assert_ne!(a, c);
    }

    #[test]
    fn identity_mask_equals_unmasked() {
        let (pred, head, store) = setup(TaskMode::Classification);
        let toks = [5, 6, 7];
        let masked = run(&store, &pred, &head, &toks, &[1.0; 3]);
        let mut g = Graph::with_store(&store);
        let enc = pred.encoder.embed_and_encode(&mut g, &toks).unwrap();
        let y = head.forward(&mut g, enc.pooled).unwrap();
        assert_eq!(&masked.0, g.value(enc.pooled));
        assert_eq!(&masked.1, g.value(y));
    }

    #[test]
    fn mask_length_checked() {
        let (pred, head, store) = setup(TaskMode::Classification);
        let mut g = Graph::with_store(&store);
        let mask = g.leaf(Tensor::column(&[1.0, 1.0]));
        assert!(pred.predict_masked(&mut g, &[1, 2, 3], mask, &head).is_err());
    }

    fn loss_of(probs: &[f64], label: Label, mode: TaskMode) -> Result<f64> {
        let mut g = Graph::new();
        let y = g.leaf(Tensor::row(probs));
        let l = prediction_loss(&mut g, y, &label, mode)?;
        Ok(g.scalar(l))
    }

    #[test]
    fn loss_values() {
        let uniform = loss_of(&[0.25; 4], Label::Class(2), TaskMode::Classification).unwrap();
        assert!((uniform - 4f64.ln()).abs() < 1e-12);
        let confident = loss_of(&[0.05, 0.9, 0.05], Label::Class(1), TaskMode::Classification).unwrap();
        assert!((confident - 0.105_360_5).abs() < 1e-5);
        assert_eq!(loss_of(&[0.3], Label::Score(0.3), TaskMode::Regression).unwrap(), 0.0);
        // clamped at -log(1e-7)
        let worst = loss_of(&[1.0, 0.0], Label::Class(1), TaskMode::Classification).unwrap();
        assert!((worst - (1e7f64).ln()).abs() < 1e-9);
    }

    #[test]
    fn loss_rejects_bad_labels() {
        assert!(loss_of(&[0.5, 0.5], Label::Class(2), TaskMode::Classification).is_err());
        assert!(loss_of(&[0.5], Label::Class(0), TaskMode::Regression).is_err());
        assert!(loss_of(&[0.5], Label::Score(1.5), TaskMode::Regression).is_err());
    }

    #[test]
    fn regression_head_is_sigmoid_scalar() {
        let (pred, head, store) = setup(TaskMode::Regression);
        let (_, y) = run(&store, &pred, &head, &[1, 2], &[1.0, 1.0]);
        assert_eq!(y.shape(), &[1, 1]);
        assert!(y.item() > 0.0 && y.item() < 1.0);
    }
}
