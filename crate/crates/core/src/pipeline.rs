//! File-level commands behind the CLI plus an in-memory synthetic run.
//!
//! Every command writes its resolved configuration next to its main output
//! so a run can be repeated from the artifacts alone.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, LM_TAG, MODEL_TAG};
use crate::config::{hyperparams_hash, RunConfig, Split};
use crate::data::{generate, load_jsonl, save_jsonl, Instance, Label, LoadReport, Vocab};
use crate::error::{Error, Result};
use crate::gradcheck::{grad_check, GradCheckReport};
use crate::graph::Graph;
use crate::lm::{pretrain, LanguageModel, LmDims, PretrainConfig};
use crate::params::{ParamGroup, ParamStore};
use crate::predictor::TaskMode;
use crate::training::{
    evaluate, extract, mean_selection_prob, train, write_metrics_csv, BatchLog, EvalReport, Hyperparams, InfoCal, ModelDims,
    ModelSpec, Noise,
};

/// Resolved config path for an artifact: `model.json` -> `model.config.json`,
/// a directory `data` -> `data/config.json`.
pub fn resolved_config_path(artifact: &Path) -> PathBuf {
    if artifact.extension().is_none() {
        return artifact.join("config.json");
    }
    let stem = artifact.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    artifact.with_file_name(format!("{stem}.config.json"))
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent().filter(|d| !d.as_os_str().is_empty()) {
        Some(dir) => std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e)),
        None => Ok(()),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    ensure_parent(path)?;
    let text = serde_json::to_string_pretty(value)? + "\n";
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenSummary {
    pub vocab_size: usize,
    pub train: usize,
    pub dev: usize,
    pub test: usize,
}

/// Writes the synthetic splits and vocabulary under `paths.data_dir`.
pub fn gen_data(cfg: &RunConfig) -> Result<GenSummary> {
    let corpus = generate(&cfg.synthetic).map_err(|e| Error::Config(e.to_string()))?;
    let dir = &cfg.paths.data_dir;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    corpus.vocab.save(&cfg.paths.vocab())?;
    for (split, data) in [(Split::Train, &corpus.train), (Split::Dev, &corpus.dev), (Split::Test, &corpus.test)] {
        save_jsonl(&cfg.paths.split(split), data, &corpus.vocab)?;
    }
    cfg.save(&resolved_config_path(dir))?;
    Ok(GenSummary {
        vocab_size: corpus.vocab.len(),
        train: corpus.train.len(),
        dev: corpus.dev.len(),
        test: corpus.test.len(),
    })
}

/// Cuts an instance to its first `max_len` tokens.
pub fn truncate(inst: &mut Instance, max_len: usize) {
    inst.tokens.truncate(max_len);
    if let Some(g) = inst.gold_mask.as_mut() {
        g.truncate(max_len);
    }
}

pub fn load_split(cfg: &RunConfig, split: Split, vocab: &Vocab) -> Result<(Vec<Instance>, LoadReport)> {
    let (mut data, report) = load_jsonl(&cfg.paths.split(split), vocab)?;
    for inst in &mut data {
        truncate(inst, cfg.max_len);
    }
    Ok((data, report))
}

pub fn lm_dims(cfg: &RunConfig, vocab_size: usize) -> LmDims {
    LmDims {
        vocab_size,
        embed_dim: cfg.lm.embed_dim,
        hidden_dim: cfg.lm.hidden_dim,
        out_dim: cfg.lm.out_dim,
    }
}

/// Fresh language model fitted to `corpus`; returns the per-step losses too.
pub fn fit_lm(dims: LmDims, corpus: &[Vec<usize>], cfg: &PretrainConfig) -> Result<(LanguageModel, ParamStore, Vec<f64>)> {
    let lm = LanguageModel::new(dims);
    let mut store = ParamStore::new();
    lm.init(&mut ChaCha8Rng::seed_from_u64(cfg.seed), &mut store);
    let history = pretrain(&lm, &mut store, corpus, cfg)?;
    Ok((lm, store, history))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainSummary {
    pub steps: usize,
    pub first_loss: f64,
    pub last_loss: f64,
}

/// Pretrains the language model on the training split and checkpoints it.
pub fn pretrain_lm(cfg: &RunConfig) -> Result<PretrainSummary> {
    let vocab = Vocab::load(&cfg.paths.vocab())?;
    let (train, _) = load_split(cfg, Split::Train, &vocab)?;
    let corpus: Vec<Vec<usize>> = train.into_iter().map(|i| i.tokens).collect();
    let dims = lm_dims(cfg, vocab.len());
    let (_, store, history) = fit_lm(dims, &corpus, &cfg.lm.pretrain)?;
    let meta = serde_json::json!({ "dims": dims, "pretrain": cfg.lm.pretrain });
    checkpoint::save(&cfg.paths.lm, LM_TAG, &store, meta)?;
    cfg.save(&resolved_config_path(&cfg.paths.lm))?;
    Ok(PretrainSummary {
        steps: history.len(),
        first_loss: history.first().copied().unwrap_or(0.0),
        last_loss: history.last().copied().unwrap_or(0.0),
    })
}

/// Loads a language-model checkpoint and checks it against the vocabulary.
pub fn load_lm(path: &Path, vocab_size: usize) -> Result<(LanguageModel, ParamStore)> {
    let (store, manifest) = checkpoint::load(path, LM_TAG)?;
    let dims: LmDims = serde_json::from_value(manifest.meta["dims"].clone())
        .map_err(|e| Error::Data(format!("{}: bad language-model metadata: {e}", path.display())))?;
    if dims.vocab_size != vocab_size {
        return Err(Error::Data(format!(
            "{}: language model covers {} tokens but the vocabulary has {vocab_size}",
            path.display(),
            dims.vocab_size
        )));
    }
    let lm = LanguageModel::new(dims);
    let mut fresh = ParamStore::new();
    lm.init(&mut ChaCha8Rng::seed_from_u64(0), &mut fresh);
    fresh.check_same_layout(&store).map_err(|e| Error::Data(e.to_string()))?;
    Ok((lm, store))
}

pub fn lm_scores(lm: &LanguageModel, store: &ParamStore, data: &[Instance]) -> Result<Vec<Vec<f64>>> {
    data.iter().map(|i| lm.scores(store, &i.tokens)).collect()
}

/// Model layout for `train`: classes are counted from the labels.
pub fn model_spec(cfg: &RunConfig, vocab_size: usize, train: &[Instance]) -> Result<ModelSpec> {
    let num_classes = match cfg.hyper.mode {
        TaskMode::Regression => 1,
        TaskMode::Classification => {
            let mut k = 0;
            for inst in train {
                match inst.label {
                    Label::Class(c) => k = k.max(c + 1),
                    Label::Score(_) => return Err(Error::Data("score label in classification data".into())),
                }
            }
            if k < 2 {
                return Err(Error::Data("classification data needs at least two classes".into()));
            }
            k
        }
    };
    Ok(ModelSpec {
        dims: ModelDims {
            vocab_size,
            embed_dim: cfg.model.embed_dim,
            hidden_dim: cfg.model.hidden_dim,
            num_classes,
        },
        mode: cfg.hyper.mode,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub j_total: f64,
    pub sel_pct: f64,
    pub dev: Option<EvalReport>,
}

#[derive(Clone, Debug)]
pub struct FitOutput {
    pub model: InfoCal,
    pub params: ParamStore,
    pub log: Vec<BatchLog>,
    pub epochs: Vec<EpochSummary>,
}

/// Language-model scores when the term is on, from `lm` or a freshly
/// pretrained model.
fn scores_for(
    cfg: &RunConfig,
    vocab_size: usize,
    train_data: &[Instance],
    lm: Option<(&LanguageModel, &ParamStore)>,
) -> Result<Option<Vec<Vec<f64>>>> {
    if cfg.hyper.effective().lm == 0.0 {
        return Ok(None);
    }
    match lm {
        Some((lm, store)) => lm_scores(lm, store, train_data).map(Some),
        None => {
            let corpus: Vec<Vec<usize>> = train_data.iter().map(|i| i.tokens.clone()).collect();
            let (lm, store, _) = fit_lm(lm_dims(cfg, vocab_size), &corpus, &cfg.lm.pretrain)?;
            lm_scores(&lm, &store, train_data).map(Some)
        }
    }
}

/// Trains a fresh model. `on_epoch` receives each epoch's summary and
/// parameters after the dev set has been scored.
pub fn fit(
    cfg: &RunConfig,
    vocab_size: usize,
    train_data: &[Instance],
    dev: &[Instance],
    lm: Option<(&LanguageModel, &ParamStore)>,
    mut on_epoch: impl FnMut(&EpochSummary, &InfoCal, &ParamStore) -> Result<()>,
) -> Result<FitOutput> {
    let spec = model_spec(cfg, vocab_size, train_data)?;
    let model = InfoCal::new(spec);
    let scores = scores_for(cfg, vocab_size, train_data, lm)?;
    let mut epochs = Vec::new();
    let out = train(&model, model.init(cfg.hyper.seed), train_data, scores.as_deref(), &cfg.hyper, |epoch, store, log| {
        let n = log.len().max(1) as f64;
        let summary = EpochSummary {
            epoch,
            j_total: log.iter().map(|b| b.losses.j_total).sum::<f64>() / n,
            sel_pct: log.iter().map(|b| b.sel_pct).sum::<f64>() / n,
            dev: if dev.is_empty() {
                None
            } else {
                Some(evaluate(&model, store, dev)?)
            },
        };
        on_epoch(&summary, &model, store)?;
        epochs.push(summary);
        Ok(())
    })?;
    Ok(FitOutput {
        model,
        params: out.params,
        log: out.log,
        epochs,
    })
}

fn model_meta(model: &InfoCal, hp: &Hyperparams, epoch: usize) -> serde_json::Value {
    serde_json::json!({
        "spec": model.spec,
        "seed": hp.seed,
        "hyperparams_hash": hyperparams_hash(hp),
        "epoch": epoch,
    })
}

/// Path of the per-epoch summaries written next to the metrics CSV.
pub fn epochs_path(metrics: &Path) -> PathBuf {
    metrics.with_extension("epochs.jsonl")
}

/// Trains on the stored splits, checkpointing after every epoch so that a
/// numeric fault leaves the last good parameters on disk.
pub fn train_command(cfg: &RunConfig, mut progress: impl FnMut(&EpochSummary)) -> Result<Vec<EpochSummary>> {
    let vocab = Vocab::load(&cfg.paths.vocab())?;
    let (train_data, _) = load_split(cfg, Split::Train, &vocab)?;
    let (dev, _) = load_split(cfg, Split::Dev, &vocab)?;
    let lm = if cfg.hyper.effective().lm > 0.0 {
        Some(load_lm(&cfg.paths.lm, vocab.len())?)
    } else {
        None
    };
    cfg.save(&resolved_config_path(&cfg.paths.model))?;
    let epochs_file = epochs_path(&cfg.paths.metrics);
    ensure_parent(&epochs_file)?;
    let mut lines = std::fs::File::create(&epochs_file).map_err(|e| Error::io(&epochs_file, e))?;
    let out = fit(cfg, vocab.len(), &train_data, &dev, lm.as_ref().map(|(l, s)| (l, s)), |summary, model, store| {
        checkpoint::save(&cfg.paths.model, MODEL_TAG, store, model_meta(model, &cfg.hyper, summary.epoch))?;
        writeln!(lines, "{}", serde_json::to_string(summary)?).map_err(|e| Error::io(&epochs_file, e))?;
        progress(summary);
        Ok(())
    })?;
    write_metrics_csv(&cfg.paths.metrics, &out.log)?;
    if out.epochs.is_empty() {
        checkpoint::save(&cfg.paths.model, MODEL_TAG, &out.params, model_meta(&out.model, &cfg.hyper, 0))?;
    }
    Ok(out.epochs)
}

/// Loads a trained model and checks it against the vocabulary.
pub fn load_model(path: &Path, vocab_size: usize) -> Result<(InfoCal, ParamStore, serde_json::Value)> {
    let (store, manifest) = checkpoint::load(path, MODEL_TAG)?;
    let spec: ModelSpec = serde_json::from_value(manifest.meta["spec"].clone())
        .map_err(|e| Error::Data(format!("{}: bad model metadata: {e}", path.display())))?;
    if spec.dims.vocab_size != vocab_size {
        return Err(Error::Data(format!(
            "{}: model covers {} tokens but the vocabulary has {vocab_size}",
            path.display(),
            spec.dims.vocab_size
        )));
    }
    let model = InfoCal::new(spec);
    model.check_params(&store).map_err(|e| Error::Data(e.to_string()))?;
    Ok((model, store, manifest.meta))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub split: Split,
    pub instances: usize,
    pub seed: Option<u64>,
    pub hyperparams_hash: Option<String>,
    /// Epoch the scored checkpoint was saved after.
    pub epoch: Option<u64>,
    pub rationale: crate::eval::RationaleScore,
    pub task: crate::eval::TaskScore,
}

pub fn eval_command(cfg: &RunConfig) -> Result<Report> {
    let vocab = Vocab::load(&cfg.paths.vocab())?;
    let (model, store, meta) = load_model(&cfg.paths.model, vocab.len())?;
    let (data, _) = load_split(cfg, cfg.eval_split, &vocab)?;
    if data.is_empty() {
        return Err(Error::Data(format!("{} split is empty", cfg.eval_split.name())));
    }
    let r = evaluate(&model, &store, &data)?;
    let report = Report {
        split: cfg.eval_split,
        instances: data.len(),
        seed: meta["seed"].as_u64(),
        hyperparams_hash: meta["hyperparams_hash"].as_str().map(str::to_string),
        epoch: meta["epoch"].as_u64(),
        rationale: r.rationale,
        task: r.task,
    };
    write_json(&cfg.paths.report, &report)?;
    cfg.save(&resolved_config_path(&cfg.paths.report))?;
    Ok(report)
}

#[derive(Serialize)]
struct ExtractionRecord<'a> {
    tokens: Vec<&'a str>,
    mask: &'a [u8],
    pred: Label,
    sel_pct: f64,
}

/// Writes one rationale per line of the evaluation split.
pub fn extract_command(cfg: &RunConfig) -> Result<usize> {
    let vocab = Vocab::load(&cfg.paths.vocab())?;
    let (model, store, _) = load_model(&cfg.paths.model, vocab.len())?;
    let (data, _) = load_split(cfg, cfg.eval_split, &vocab)?;
    let rows = extract(&model, &store, &data)?;
    let path = &cfg.paths.extract;
    ensure_parent(path)?;
    let mut out = String::new();
    for e in &rows {
        let rec = ExtractionRecord {
            tokens: e.tokens.iter().map(|&t| vocab.token(t).unwrap_or("<unk>")).collect(),
            mask: &e.mask,
            pred: e.pred,
            sel_pct: e.sel_pct,
        };
        out.push_str(&serde_json::to_string(&rec)?);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))?;
    cfg.save(&resolved_config_path(path))?;
    Ok(rows.len())
}

/// Result of a generate-pretrain-train-evaluate run held in memory.
#[derive(Clone, Debug)]
pub struct SyntheticRun {
    pub test: EvalReport,
    pub mean_prob: f64,
    pub fit: FitOutput,
}

/// The whole pipeline on `cfg.synthetic` without touching the disk.
pub fn run_synthetic(cfg: &RunConfig) -> Result<SyntheticRun> {
    cfg.validate()?;
    let corpus = generate(&cfg.synthetic)?;
    let fit = fit(cfg, corpus.vocab.len(), &corpus.train, &[], None, |_, _, _| Ok(()))?;
    Ok(SyntheticRun {
        test: evaluate(&fit.model, &fit.params, &corpus.test)?,
        mean_prob: mean_selection_prob(&fit.model, &fit.params, &corpus.test)?,
        fit,
    })
}

/// Sizes for the full-model finite-difference check.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GradCheckDims {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub seq_len: usize,
    pub num_classes: usize,
}

impl Default for GradCheckDims {
    fn default() -> Self {
        Self {
            vocab_size: 20,
            embed_dim: 4,
            hidden_dim: 4,
            seq_len: 6,
            num_classes: 3,
        }
    }
}

/// Central differences against backpropagation for every parameter of the
/// generator objective (all terms on, noise fixed) and of the
/// discriminator loss. Returns the worse of the two reports.
pub fn full_model_gradcheck(dims: GradCheckDims, seed: u64) -> Result<GradCheckReport> {
    const STEP: f64 = 1e-5;
    const TOL: f64 = 1e-4;
    let model = InfoCal::new(ModelSpec {
        dims: ModelDims {
            vocab_size: dims.vocab_size,
            embed_dim: dims.embed_dim,
            hidden_dim: dims.hidden_dim,
            num_classes: dims.num_classes,
        },
        mode: TaskMode::Classification,
    });
    let store = model.init(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
    let tokens: Vec<usize> = (0..dims.seq_len)
        .map(|_| rand::Rng::random_range(&mut rng, 1..dims.vocab_size))
        .collect();
    let inst = Instance {
        tokens,
        label: Label::Class(seed as usize % dims.num_classes),
        gold_mask: None,
    };
    let lm = LanguageModel::new(LmDims {
        vocab_size: dims.vocab_size,
        embed_dim: dims.embed_dim,
        hidden_dim: dims.hidden_dim,
        out_dim: dims.hidden_dim,
    });
    let mut lm_store = ParamStore::new();
    lm.init(&mut rng, &mut lm_store);
    let scores = lm.scores(&lm_store, &inst.tokens)?;
    let noise = Noise::sample(&mut rng, inst.tokens.len(), model.feature_dim());
    let hp = Hyperparams {
        lambda_ib: 0.3,
        lambda_g: 1.0,
        lambda_mi: 0.5,
        lambda_lm: 0.2,
        ..Hyperparams::classification()
    };

    let objective = |p: &ParamStore| -> Result<f64> {
        let mut g = Graph::with_trainable(p, |_| false);
        let o = model.objective(&mut g, &inst, Some(&scores), &noise, &hp)?;
        Ok(g.scalar(o.total))
    };
    let objective_grads = |p: &ParamStore| {
        let mut g = Graph::with_store(p);
        let o = model.objective(&mut g, &inst, Some(&scores), &noise, &hp)?;
        g.backward(o.total)
    };
    let generator = grad_check(&store, objective, objective_grads, STEP, TOL)?;

    let disc_loss = |p: &ParamStore| model.discriminator_step(p, &inst, &noise, &hp).map(|(l, _)| l);
    let disc_grads = |p: &ParamStore| model.discriminator_step(p, &inst, &noise, &hp).map(|(_, g)| g);
    let disc = grad_check(&store, disc_loss, disc_grads, STEP, TOL)?;
    debug_assert!(disc.worst.iter().all(|(n, _)| ParamGroup::of(n) == Some(ParamGroup::Discriminator)));

    let checked = generator.checked + disc.checked;
    let mut worst = if disc.max_rel_error > generator.max_rel_error { disc } else { generator };
    worst.checked = checked;
    Ok(worst)
}
