//! The full objective, alternating generator/discriminator training and
//! inference-time extraction.
//!
//! Per instance the generator objective is
//!
//! ```text
//! J = L_sp + l_ib * L_ib + (l_g * L_g + L_guide + l_mi * L_mi) + l_lm * L_lm
//! ```
//!
//! and batches average it. Each batch takes one Adam step on the selector,
//! predictor, shared head and guider, then one step on the discriminator
//! alone, with features recomputed from the updated weights under the same
//! noise.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adam::{AdamConfig, AdamState};
use crate::adversarial::{d_loss, g_loss, DiscLoss, Discriminator};
use crate::data::{Instance, Label};
use crate::encoder::{EncoderDims, PAD};
use crate::error::{Error, Result};
use crate::eval::{rationale_prf, selection_fraction, task_metrics, RationaleScore, TaskScore};
use crate::graph::{Graph, Var};
use crate::guider::{gaussian_noise, mi_loss, Guider};
use crate::lm::lm_regularizer;
use crate::params::{accumulate, scale_grads, GradMap, ParamGroup, ParamStore};
use crate::predictor::{prediction_loss, PredictionHead, Predictor, TaskMode};
use crate::selector::{ib_loss, sample_mask, GumbelNoise, MaskMode, Selector};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Hyperparams {
    pub lambda_ib: f64,
    pub lambda_g: f64,
    pub lambda_mi: f64,
    pub lambda_lm: f64,
    pub tau: f64,
    pub r_select: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub mode: TaskMode,
    /// Drops the guider and discriminator entirely.
    pub disable_adv: bool,
    pub disable_lm: bool,
    pub disable_ib: bool,
    pub disc_loss: DiscLoss,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self::classification()
    }
}

impl Hyperparams {
    pub fn regression() -> Self {
        Self {
            lambda_ib: 0.0003,
            lambda_g: 1.0,
            lambda_mi: 0.1,
            lambda_lm: 0.005,
            r_select: 0.001,
            mode: TaskMode::Regression,
            ..Self::classification()
        }
    }

    pub fn classification() -> Self {
        Self {
            lambda_ib: 0.05,
            lambda_g: 1.0,
            lambda_mi: 0.5,
            lambda_lm: 0.005,
            tau: 0.5,
            r_select: 0.1,
            lr: 1e-3,
            batch_size: 32,
            epochs: 30,
            seed: 0,
            mode: TaskMode::Classification,
            disable_adv: false,
            disable_lm: false,
            disable_ib: false,
            disc_loss: DiscLoss::Calibration,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let lambdas = [self.lambda_ib, self.lambda_g, self.lambda_mi, self.lambda_lm];
        if lambdas.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(Error::Config(format!("loss weights must be finite and nonnegative: {lambdas:?}")));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.r_select > 0.0 && self.r_select < 1.0) {
            return Err(Error::Config(format!("r_select must lie in (0, 1), got {}", self.r_select)));
        }
        if !(self.lr > 0.0) || self.batch_size == 0 {
            return Err(Error::Config("lr and batch_size must be positive".into()));
        }
        Ok(())
    }

    /// Weights after the ablation switches: `(ib, g, mi, lm)`.
    pub fn effective(&self) -> Effective {
        Effective {
            ib: if self.disable_ib { 0.0 } else { self.lambda_ib },
            g: if self.disable_adv { 0.0 } else { self.lambda_g },
            mi: if self.disable_adv { 0.0 } else { self.lambda_mi },
            lm: if self.disable_lm { 0.0 } else { self.lambda_lm },
            adversarial: !self.disable_adv,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Effective {
    pub ib: f64,
    pub g: f64,
    pub mi: f64,
    pub lm: f64,
    /// Whether the guider and discriminator take part at all.
    pub adversarial: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDims {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub num_classes: usize,
}

/// Everything needed to rebuild the network layout from a checkpoint.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub dims: ModelDims,
    pub mode: TaskMode,
}

#[derive(Clone, Debug)]
pub struct InfoCal {
    pub spec: ModelSpec,
    pub selector: Selector,
    pub predictor: Predictor,
    pub guider: Guider,
    pub head: PredictionHead,
    pub disc: Discriminator,
}

/// Gumbel draws for the mask and Gaussian draws for the guider feature.
#[derive(Clone, Debug, PartialEq)]
pub struct Noise {
    pub gumbel: GumbelNoise,
    pub gaussian: Vec<f64>,
}

impl Noise {
    pub fn sample(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Self {
        Self {
            gumbel: GumbelNoise::sample(rng, n),
            gaussian: gaussian_noise(rng, d),
        }
    }

    /// Noise stream of instance `index` in `epoch` under `seed`.
    pub fn for_instance(seed: u64, epoch: usize, index: usize, n: usize, d: usize) -> Self {
        Self::sample(&mut instance_rng(seed, epoch as u64, index as u64), n, d)
    }
}

fn instance_rng(seed: u64, epoch: u64, index: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&epoch.to_le_bytes());
    key[16..24].copy_from_slice(&index.to_le_bytes());
    key[24..].copy_from_slice(b"infocal\0");
    ChaCha8Rng::from_seed(key)
}

/// Graph nodes of one instance's generator objective.
#[derive(Clone, Copy, Debug)]
pub struct ObjectiveVars {
    pub total: Var,
    pub sp: Var,
    pub ib: Option<Var>,
    pub g: Option<Var>,
    pub guide: Option<Var>,
    pub mi: Option<Var>,
    pub lm: Option<Var>,
    pub probs: Var,
    /// Predictor feature `z~_nero`.
    pub feature: Var,
    /// Guider feature `z_nero`.
    pub guide_feature: Option<Var>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_sp: f64,
    pub l_ib: f64,
    pub l_g: f64,
    pub l_guide: f64,
    pub l_mi: f64,
    pub l_lm: f64,
    pub l_adv: f64,
    pub j_total: f64,
    pub l_d: f64,
}

impl LossBreakdown {
    /// `(L_adv, J_total)` recomposed from the parts.
    pub fn recompose(&self, w: &Effective) -> (f64, f64) {
        let adv = w.g * self.l_g + self.l_guide + w.mi * self.l_mi;
        (adv, self.l_sp + w.ib * self.l_ib + adv + w.lm * self.l_lm)
    }

    fn add_scaled(&mut self, other: &LossBreakdown, f: f64) {
        self.l_sp += f * other.l_sp;
        self.l_ib += f * other.l_ib;
        self.l_g += f * other.l_g;
        self.l_guide += f * other.l_guide;
        self.l_mi += f * other.l_mi;
        self.l_lm += f * other.l_lm;
        self.l_adv += f * other.l_adv;
        self.j_total += f * other.j_total;
        self.l_d += f * other.l_d;
    }
}

fn value(g: &Graph, v: Option<Var>) -> f64 {
    v.map_or(0.0, |v| g.scalar(v))
}

impl InfoCal {
    pub fn new(spec: ModelSpec) -> Self {
        let d = spec.dims;
        let enc = EncoderDims {
            vocab_size: d.vocab_size,
            embed_dim: d.embed_dim,
            hidden_dim: d.hidden_dim,
        };
        let predictor = Predictor::new(enc);
        let feature = predictor.encoder.output_dim();
        Self {
            spec,
            selector: Selector::new(enc),
            predictor,
            guider: Guider::new(enc),
            head: PredictionHead::new(spec.mode, d.num_classes, feature),
            disc: Discriminator::new(feature),
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.guider.feature_dim()
    }

    pub fn init(&self, seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        self.selector.init(&mut rng, &mut store);
        self.predictor.init(&mut rng, &mut store);
        self.guider.init(&mut rng, &mut store);
        self.head.init(&mut rng, &mut store);
        self.disc.init(&mut rng, &mut store);
        store
    }

    pub fn check_instance(&self, inst: &Instance) -> Result<()> {
        let v = self.spec.dims.vocab_size;
        if inst.tokens.is_empty() {
            return Err(Error::contract("empty instance"));
        }
        if let Some(&t) = inst.tokens.iter().find(|&&t| t >= v) {
            return Err(Error::contract(format!("token id {t} outside model vocab of {v}")));
        }
        match (self.spec.mode, inst.label) {
            (TaskMode::Classification, Label::Class(c)) if c < self.spec.dims.num_classes => Ok(()),
            (TaskMode::Regression, Label::Score(s)) if (0.0..=1.0).contains(&s) => Ok(()),
            (mode, label) => Err(Error::contract(format!("label {label:?} does not fit {mode:?} model"))),
        }
    }

    /// Builds one instance's generator objective on `g`.
    ///
    /// `lm_scores` must be present whenever the language-model term is on.
    pub fn objective(
        &self,
        g: &mut Graph,
        inst: &Instance,
        lm_scores: Option<&[f64]>,
        noise: &Noise,
        hp: &Hyperparams,
    ) -> Result<ObjectiveVars> {
        let w = hp.effective();
        let tokens = &inst.tokens;
        let probs = self.selector.select_probs(g, tokens)?;
        let mask = sample_mask(
            g,
            probs,
            MaskMode::Relaxed {
                tau: hp.tau,
                noise: &noise.gumbel,
            },
        )?;
        let pred = self.predictor.predict_masked(g, tokens, mask, &self.head)?;
        let sp = prediction_loss(g, pred.y_hat, &inst.label, self.spec.mode)?;
        let mut terms = vec![sp];

        let ib = if w.ib > 0.0 {
            let l = ib_loss(g, probs, hp.r_select, tokens)?;
            terms.push(g.scale(l, w.ib));
            Some(l)
        } else {
            None
        };

        let (mut gl, mut guide, mut mi, mut guide_feature) = (None, None, None, None);
        if w.adversarial {
            let sample = self.guider.forward(g, tokens, &noise.gaussian, &self.head)?;
            let lguide = prediction_loss(g, sample.y_hat, &inst.label, self.spec.mode)?;
            terms.push(lguide);
            let lmi = mi_loss(g, sample.mu, sample.sigma)?;
            terms.push(g.scale(lmi, w.mi));
            let d_fake = self.disc.discriminate(g, pred.feature)?;
            let lg = g_loss(g, d_fake);
            terms.push(g.scale(lg, w.g));
            (gl, guide, mi, guide_feature) = (Some(lg), Some(lguide), Some(lmi), Some(sample.z));
        }

        let lm = if w.lm > 0.0 {
            let scores = lm_scores.ok_or_else(|| Error::contract("language-model term needs scores"))?;
            let l = lm_regularizer(g, mask, scores)?;
            terms.push(g.scale(l, w.lm));
            Some(l)
        } else {
            None
        };

        let total = g.sum_all(&terms)?;
        Ok(ObjectiveVars {
            total,
            sp,
            ib,
            g: gl,
            guide,
            mi,
            lm,
            probs,
            feature: pred.feature,
            guide_feature,
        })
    }

    /// Generator objective of one instance and its gradients for the
    /// generator-side and guider groups.
    pub fn generator_step(
        &self,
        store: &ParamStore,
        inst: &Instance,
        lm_scores: Option<&[f64]>,
        noise: &Noise,
        hp: &Hyperparams,
    ) -> Result<(LossBreakdown, f64, GradMap)> {
        let mut g = Graph::with_trainable(store, is_generator_side);
        let o = self.objective(&mut g, inst, lm_scores, noise, hp)?;
        let b = breakdown(&g, &o, &hp.effective())?;
        let keep: Vec<bool> = inst.tokens.iter().map(|&t| t != PAD).collect();
        let hard: Vec<bool> = g.value(o.probs).data().iter().map(|&p| p > 0.5).collect();
        let sel = selection_fraction(&hard, &keep);
        let grads = g.backward(o.total)?;
        Ok((b, sel, grads))
    }

    /// Discriminator loss on features recomputed under `store`, with
    /// gradients for the discriminator only.
    pub fn discriminator_step(&self, store: &ParamStore, inst: &Instance, noise: &Noise, hp: &Hyperparams) -> Result<(f64, GradMap)> {
        let (fake, real) = {
            let mut g = Graph::with_trainable(store, |_| false);
            let probs = self.selector.select_probs(&mut g, &inst.tokens)?;
            let mask = sample_mask(
                &mut g,
                probs,
                MaskMode::Relaxed {
                    tau: hp.tau,
                    noise: &noise.gumbel,
                },
            )?;
            let pred = self.predictor.predict_masked(&mut g, &inst.tokens, mask, &self.head)?;
            let sample = self.guider.forward(&mut g, &inst.tokens, &noise.gaussian, &self.head)?;
            (g.value(pred.feature).clone(), g.value(sample.z).clone())
        };
        let mut g = Graph::with_trainable(store, |name| ParamGroup::of(name) == Some(ParamGroup::Discriminator));
        let (fv, rv) = (g.leaf(fake), g.leaf(real));
        let d_fake = self.disc.discriminate(&mut g, fv)?;
        let d_real = self.disc.discriminate(&mut g, rv)?;
        let l = d_loss(&mut g, d_real, d_fake, hp.disc_loss);
        let v = g.scalar(l);
        if !v.is_finite() {
            return Err(Error::numeric("L_d", format!("value {v}")));
        }
        Ok((v, g.backward(l)?))
    }

    /// Hard-mask rationale and prediction for one instance.
    pub fn extract_one(&self, store: &ParamStore, inst: &Instance) -> Result<Extraction> {
        self.check_tokens(&inst.tokens)?;
        let mut g = Graph::with_trainable(store, |_| false);
        let probs = self.selector.select_probs(&mut g, &inst.tokens)?;
        let mask = sample_mask(&mut g, probs, MaskMode::Hard)?;
        let pred = self.predictor.predict_masked(&mut g, &inst.tokens, mask, &self.head)?;
        let y = g.value(pred.y_hat).data();
        let pred_label = match self.spec.mode {
            TaskMode::Classification => Label::Class(argmax(y)),
            TaskMode::Regression => Label::Score(y[0]),
        };
        let mask: Vec<u8> = g.value(mask).data().iter().map(|&m| u8::from(m > 0.5)).collect();
        let keep: Vec<bool> = inst.tokens.iter().map(|&t| t != PAD).collect();
        let hard: Vec<bool> = mask.iter().map(|&m| m == 1).collect();
        Ok(Extraction {
            tokens: inst.tokens.clone(),
            sel_pct: selection_fraction(&hard, &keep),
            mask,
            pred: pred_label,
        })
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        let v = self.spec.dims.vocab_size;
        match tokens.iter().find(|&&t| t >= v) {
            Some(t) => Err(Error::contract(format!("token id {t} outside model vocab of {v}"))),
            None => Ok(()),
        }
    }
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &x)| if x > best.1 { (i, x) } else { best })
        .0
}

/// Selector, predictor, shared head and guider.
pub fn is_generator_side(name: &str) -> bool {
    matches!(ParamGroup::of(name), Some(ParamGroup::Generator | ParamGroup::Guider))
}

fn breakdown(g: &Graph, o: &ObjectiveVars, w: &Effective) -> Result<LossBreakdown> {
    let mut b = LossBreakdown {
        l_sp: g.scalar(o.sp),
        l_ib: value(g, o.ib),
        l_g: value(g, o.g),
        l_guide: value(g, o.guide),
        l_mi: value(g, o.mi),
        l_lm: value(g, o.lm),
        ..LossBreakdown::default()
    };
    let named = [
        ("L_sp", b.l_sp),
        ("L_ib", b.l_ib),
        ("L_g", b.l_g),
        ("L_guide", b.l_guide),
        ("L_mi", b.l_mi),
        ("L_lm", b.l_lm),
        ("J_total", g.scalar(o.total)),
    ];
    if let Some((name, v)) = named.iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::numeric(*name, format!("value {v}")));
    }
    (b.l_adv, b.j_total) = b.recompose(w);
    Ok(b)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Extraction {
    pub tokens: Vec<usize>,
    pub mask: Vec<u8>,
    pub pred: Label,
    pub sel_pct: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchLog {
    pub epoch: usize,
    pub batch: usize,
    pub losses: LossBreakdown,
    pub sel_pct: f64,
}

pub const CSV_HEADER: &str = "epoch,batch,L_sp,L_ib,L_g,L_guide,L_mi,L_lm,L_d,J_total,sel_pct";

pub fn write_metrics_csv(path: &Path, log: &[BatchLog]) -> Result<()> {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in log {
        let l = &r.losses;
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            r.epoch, r.batch, l.l_sp, l.l_ib, l.l_g, l.l_guide, l.l_mi, l.l_lm, l.l_d, l.j_total, r.sel_pct
        ));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Optimizer state of both update groups.
pub struct Trainer<'m> {
    pub model: &'m InfoCal,
    pub hp: Hyperparams,
    gen_opt: AdamState,
    disc_opt: AdamState,
}

impl<'m> Trainer<'m> {
    pub fn new(model: &'m InfoCal, hp: Hyperparams) -> Result<Self> {
        hp.validate()?;
        let cfg = AdamConfig {
            lr: hp.lr,
            ..AdamConfig::default()
        };
        Ok(Self {
            model,
            hp,
            gen_opt: AdamState::new(cfg),
            disc_opt: AdamState::new(cfg),
        })
    }

    /// Noise for every instance of `batch`, shared by both updates.
    pub fn batch_noise(&self, data: &[Instance], batch: &[usize], epoch: usize) -> Vec<Noise> {
        let d = self.model.feature_dim();
        batch
            .iter()
            .map(|&i| Noise::for_instance(self.hp.seed, epoch, i, data[i].tokens.len(), d))
            .collect()
    }

    /// Adam step on the generator side and guider from the batch-mean
    /// objective. Returns the mean losses and hard selection fraction.
    pub fn generator_update(
        &mut self,
        store: &mut ParamStore,
        data: &[Instance],
        lm_scores: Option<&[Vec<f64>]>,
        batch: &[usize],
        noises: &[Noise],
    ) -> Result<(LossBreakdown, f64)> {
        let f = 1.0 / batch.len() as f64;
        let mut mean = LossBreakdown::default();
        let mut sel = 0.0;
        let mut grads = GradMap::new();
        for (&i, noise) in batch.iter().zip(noises) {
            let scores = lm_scores.map(|s| s[i].as_slice());
            let (b, s, gr) = self.model.generator_step(store, &data[i], scores, noise, &self.hp)?;
            mean.add_scaled(&b, f);
            sel += f * s;
            accumulate(&mut grads, gr);
        }
        if !mean.j_total.is_finite() {
            return Err(Error::numeric("J_total", format!("batch mean {}", mean.j_total)));
        }
        scale_grads(&mut grads, f);
        self.gen_opt.step(store, &grads)?;
        Ok((mean, sel))
    }

    /// Adam step on the discriminator alone; returns the batch-mean `L_d`.
    pub fn discriminator_update(
        &mut self,
        store: &mut ParamStore,
        data: &[Instance],
        batch: &[usize],
        noises: &[Noise],
    ) -> Result<f64> {
        let f = 1.0 / batch.len() as f64;
        let mut mean = 0.0;
        let mut grads = GradMap::new();
        for (&i, noise) in batch.iter().zip(noises) {
            let (l, gr) = self.model.discriminator_step(store, &data[i], noise, &self.hp)?;
            mean += f * l;
            accumulate(&mut grads, gr);
        }
        scale_grads(&mut grads, f);
        self.disc_opt.step(store, &grads)?;
        Ok(mean)
    }

    /// One alternating update on the instances `batch` (indices into `data`).
    pub fn step_batch(
        &mut self,
        store: &mut ParamStore,
        data: &[Instance],
        lm_scores: Option<&[Vec<f64>]>,
        batch: &[usize],
        epoch: usize,
    ) -> Result<(LossBreakdown, f64)> {
        let noises = self.batch_noise(data, batch, epoch);
        let (mut mean, sel) = self.generator_update(store, data, lm_scores, batch, &noises)?;
        if self.hp.effective().adversarial {
            mean.l_d = self.discriminator_update(store, data, batch, &noises)?;
        }
        Ok((mean, sel))
    }
}

/// Instance order of one epoch; batches are consecutive chunks of it.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut instance_rng(seed, epoch as u64, u64::MAX));
    order
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub params: ParamStore,
    pub log: Vec<BatchLog>,
}

/// Runs `hp.epochs` epochs. `on_epoch` sees the parameters after each epoch,
/// so callers can checkpoint; an error from training leaves the last
/// reported parameters as the most recent good state.
pub fn train(
    model: &InfoCal,
    mut store: ParamStore,
    data: &[Instance],
    lm_scores: Option<&[Vec<f64>]>,
    hp: &Hyperparams,
    mut on_epoch: impl FnMut(usize, &ParamStore, &[BatchLog]) -> Result<()>,
) -> Result<TrainOutput> {
    if data.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    for inst in data {
        model.check_instance(inst)?;
    }
    if hp.effective().lm > 0.0 {
        let scores = lm_scores.ok_or_else(|| Error::Config("language-model term is on but no scores were given".into()))?;
        if scores.len() != data.len() || scores.iter().zip(data).any(|(s, i)| s.len() != i.tokens.len()) {
            return Err(Error::contract("language-model scores do not line up with the data"));
        }
    }
    let mut trainer = Trainer::new(model, hp.clone())?;
    let mut log = Vec::new();
    for epoch in 0..hp.epochs {
        let order = epoch_order(hp.seed, epoch, data.len());
        let start = log.len();
        for (b, batch) in order.chunks(hp.batch_size).enumerate() {
            let (losses, sel_pct) = trainer.step_batch(&mut store, data, lm_scores, batch, epoch)?;
            log.push(BatchLog {
                epoch,
                batch: b,
                losses,
                sel_pct,
            });
        }
        on_epoch(epoch, &store, &log[start..])?;
    }
    Ok(TrainOutput { params: store, log })
}

pub fn extract(model: &InfoCal, store: &ParamStore, data: &[Instance]) -> Result<Vec<Extraction>> {
    data.iter().map(|inst| model.extract_one(store, inst)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rationale: RationaleScore,
    pub task: TaskScore,
}

/// Scores extracted rationales against gold masks (instances without one
/// are skipped for overlap) and predictions against labels.
pub fn evaluate(model: &InfoCal, store: &ParamStore, data: &[Instance]) -> Result<EvalReport> {
    let ex = extract(model, store, data)?;
    let owned: Vec<(Vec<bool>, Vec<bool>, Vec<bool>)> = ex
        .iter()
        .zip(data)
        .filter_map(|(e, inst)| {
            inst.gold_mask.as_ref().map(|gold| {
                (
                    e.mask.iter().map(|&m| m == 1).collect(),
                    gold.clone(),
                    inst.tokens.iter().map(|&t| t != PAD).collect(),
                )
            })
        })
        .collect();
    let rationale = rationale_prf(owned.iter().map(|(p, g, k)| (p.as_slice(), g.as_slice(), k.as_slice())))?;
    let preds: Vec<Label> = ex.iter().map(|e| e.pred).collect();
    let golds: Vec<Label> = data.iter().map(|i| i.label).collect();
    Ok(EvalReport {
        rationale,
        task: task_metrics(&preds, &golds)?,
    })
}

/// Mean selection probability over all tokens; used to compare sparsity.
pub fn mean_selection_prob(model: &InfoCal, store: &ParamStore, data: &[Instance]) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for inst in data {
        let p = model.selector.probs(store, &inst.tokens)?;
        total += p.0.iter().sum::<f64>();
        n += p.0.len();
    }
    Ok(total / n.max(1) as f64)
}

impl InfoCal {
    /// Checks that `store` has exactly the layout of a fresh model.
    pub fn check_params(&self, store: &ParamStore) -> Result<()> {
        self.init(0).check_same_layout(store)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, SyntheticSpec};

    fn tiny() -> (InfoCal, ParamStore, Vec<Instance>) {
        let spec = SyntheticSpec {
            vocab_size: 40,
            class_pool: 4,
            keyphrases_per_class: 2,
            seq_len: (6, 9),
            train: 16,
            dev: 0,
            test: 0,
            ..SyntheticSpec::default()
        };
        let corpus = generate(&spec).unwrap();
        let model = InfoCal::new(ModelSpec {
            dims: ModelDims {
                vocab_size: 40,
                embed_dim: 4,
                hidden_dim: 3,
                num_classes: 4,
            },
            mode: TaskMode::Classification,
        });
        let store = model.init(3);
        (model, store, corpus.train)
    }

    fn fake_scores(data: &[Instance]) -> Vec<Vec<f64>> {
        data.iter()
            .map(|i| i.tokens.iter().map(|&t| (t % 5) as f64 - 1.0).collect())
            .collect()
    }

    #[test]
    fn presets() {
        let r = Hyperparams::regression();
        assert_eq!((r.lambda_ib, r.lambda_g, r.lambda_mi, r.lambda_lm, r.r_select), (0.0003, 1.0, 0.1, 0.005, 0.001));
        let c = Hyperparams::classification();
        assert_eq!((c.lambda_ib, c.lambda_g, c.lambda_mi, c.lambda_lm, c.r_select), (0.05, 1.0, 0.5, 0.005, 0.1));
        assert_eq!((c.tau, c.lr, c.batch_size), (0.5, 1e-3, 32));
    }

    #[test]
    fn validation() {
        let bad = Hyperparams {
            lambda_ib: -1.0,
            ..Hyperparams::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        assert!(Hyperparams { r_select: 1.0, ..Hyperparams::default() }.validate().is_err());
        assert!(Hyperparams { tau: 0.0, ..Hyperparams::default() }.validate().is_err());
    }

    #[test]
    fn breakdown_recomposes() {
        let (model, store, data) = tiny();
        let scores = fake_scores(&data);
        let hp = Hyperparams::default();
        for (i, inst) in data.iter().enumerate() {
            let noise = Noise::for_instance(1, 0, i, inst.tokens.len(), model.feature_dim());
            let mut g = Graph::with_store(&store);
            let o = model.objective(&mut g, inst, Some(&scores[i]), &noise, &hp).unwrap();
            let b = breakdown(&g, &o, &hp.effective()).unwrap();
            assert!((b.j_total - g.scalar(o.total)).abs() < 1e-10);
            let w = hp.effective();
            assert!((b.l_adv - (w.g * b.l_g + b.l_guide + w.mi * b.l_mi)).abs() < 1e-10);
            assert!(b.l_ib > 0.0 && b.l_guide > 0.0 && b.l_mi >= 0.0 && b.l_lm >= 0.0);
        }
    }

    #[test]
    fn zero_weights_reduce_to_two_terms() {
        let (model, store, data) = tiny();
        let hp = Hyperparams {
            lambda_ib: 0.0,
            lambda_g: 0.0,
            lambda_mi: 0.0,
            lambda_lm: 0.0,
            ..Hyperparams::default()
        };
        let noise = Noise::for_instance(0, 0, 0, data[0].tokens.len(), model.feature_dim());
        let mut g = Graph::with_store(&store);
        let o = model.objective(&mut g, &data[0], None, &noise, &hp).unwrap();
        let expect = g.scalar(o.sp) + g.scalar(o.guide.unwrap());
        assert!((g.scalar(o.total) - expect).abs() < 1e-12);
    }

    #[test]
    fn disabled_adversary_touches_no_guider_or_discriminator() {
        let (model, store, data) = tiny();
        let hp = Hyperparams {
            disable_adv: true,
            ..Hyperparams::default()
        };
        let noise = Noise::for_instance(0, 0, 0, data[0].tokens.len(), model.feature_dim());
        let scores = fake_scores(&data);
        let (b, _, grads) = model.generator_step(&store, &data[0], Some(&scores[0]), &noise, &hp).unwrap();
        assert_eq!((b.l_g, b.l_guide, b.l_mi), (0.0, 0.0, 0.0));
        for (name, gr) in &grads {
            if name.starts_with("guider.") {
                assert_eq!(gr.max_abs(), 0.0, "{name}");
            }
            assert!(!name.starts_with("disc."));
        }
    }

    #[test]
    fn generator_gradients_skip_discriminator() {
        let (model, store, data) = tiny();
        let noise = Noise::for_instance(0, 0, 0, data[0].tokens.len(), model.feature_dim());
        let scores = fake_scores(&data);
        let (_, _, grads) = model
            .generator_step(&store, &data[0], Some(&scores[0]), &noise, &Hyperparams::default())
            .unwrap();
        assert!(grads.keys().all(|n| is_generator_side(n)));
        assert!(grads["guider.mu.w"].max_abs() > 0.0);
        assert!(grads["selector.head.w"].max_abs() > 0.0);
        let (_, dgrads) = model.discriminator_step(&store, &data[0], &noise, &Hyperparams::default()).unwrap();
        assert!(dgrads.keys().all(|n| n.starts_with("disc.")));
    }

    #[test]
    fn missing_scores_rejected() {
        let (model, store, data) = tiny();
        let err = train(&model, store, &data, None, &Hyperparams::default(), |_, _, _| Ok(()));
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn nan_weights_abort_with_numeric_fault() {
        let (model, mut store, data) = tiny();
        store.get_mut("predictor.fwd.wx").unwrap().data_mut()[0] = f64::NAN;
        let hp = Hyperparams {
            epochs: 1,
            disable_lm: true,
            ..Hyperparams::default()
        };
        let err = train(&model, store, &data, None, &hp, |_, _, _| Ok(()));
        assert!(matches!(err, Err(Error::Numeric { .. })), "{err:?}");
    }

    #[test]
    fn extraction_edge_and_determinism() {
        let (model, mut store, data) = tiny();
        let a = extract(&model, &store, &data).unwrap();
        assert_eq!(a, extract(&model, &store, &data).unwrap());
        for e in &a {
            let sel = e.mask.iter().filter(|&&m| m == 1).count() as f64 / e.tokens.len() as f64;
            assert_eq!(e.sel_pct, sel);
        }
        // everything below threshold: empty rationale, bias-only prediction
        store.get_mut("selector.head.b").unwrap().data_mut()[0] = -100.0;
        let e = model.extract_one(&store, &data[0]).unwrap();
        assert!(e.mask.iter().all(|&m| m == 0));
        assert_eq!(e.sel_pct, 0.0);
        let other = model.extract_one(&store, &data[1]).unwrap();
        assert_eq!(e.pred, other.pred);
        let bad = Instance {
            tokens: vec![99],
            ..data[0].clone()
        };
        assert!(model.extract_one(&store, &bad).is_err());
    }
}
