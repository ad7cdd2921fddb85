//! Cross-entropy training with Adam, dev-EER model selection, and scoring.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::blocks::{Model, BONAFIDE, SPOOF};
use crate::config::KvMap;
use crate::corpus::{Checkpoint, Trial};
use crate::error::{Error, Result};
use crate::layers::{Mode, Module, ParamKind, Session};
use crate::metrics::{eer, Label, ScoreRecord};
use crate::tensor::{read_tensor, Real, Tape, Tensor};

/// Extension of feature tensor files.
pub const FEATURE_EXT: &str = "feat";

/// Path of the feature file for `trial_id` under `dir`.
pub fn feature_path(dir: &Path, trial_id: &str) -> PathBuf {
    dir.join(format!("{trial_id}.{FEATURE_EXT}"))
}

#[derive(Clone, Debug)]
pub struct Example<T> {
    pub trial_id: String,
    pub label: Label,
    /// `[D, T]` features.
    pub features: Tensor<T>,
}

/// Loads the features of every trial from `dir`.
pub fn load_examples(dir: &Path, trials: &[Trial]) -> Result<Vec<Example<f32>>> {
    trials
        .iter()
        .map(|t| {
            Ok(Example {
                trial_id: t.trial_id.clone(),
                label: t.label,
                features: read_tensor(&feature_path(dir, &t.trial_id))?,
            })
        })
        .collect()
}

fn class_index(label: Label) -> usize {
    match label {
        Label::Bonafide => BONAFIDE,
        Label::Spoof => SPOOF,
    }
}

fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln()
}

/// Softmax cross-entropy of `logits` against `label`, in log space.
pub fn ce_loss(logits: &[f64], label: Label) -> f64 {
    log_sum_exp(logits) - logits[class_index(label)]
}

/// Log-probability of the bonafide class.
pub fn score_logits(logits: &[f64]) -> f64 {
    logits[BONAFIDE] - log_sum_exp(logits)
}

/// Eval-mode score of one `[D, T]` spectrogram.
pub fn score<T: Real>(model: &Model<T>, x: &Tensor<T>) -> Result<f64> {
    Ok(score_batch(model, &[x], 1)?[0])
}

/// Eval-mode scores of many spectrograms, `batch` at a time.
pub fn score_batch<T: Real>(model: &Model<T>, xs: &[&Tensor<T>], batch: usize) -> Result<Vec<f64>> {
    let (d, t) = (model.cfg.input_bins, model.cfg.input_frames);
    let mut out = Vec::with_capacity(xs.len());
    for chunk in xs.chunks(batch.max(1)) {
        let logits = model.logits(&stack(chunk, d, t)?)?;
        let k = logits.shape()[1];
        out.extend(
            logits
                .data()
                .chunks(k)
                .map(|row| score_logits(&row.iter().map(|v| v.to_f64().unwrap()).collect::<Vec<_>>())),
        );
    }
    Ok(out)
}

fn stack<T: Real>(xs: &[&Tensor<T>], d: usize, t: usize) -> Result<Tensor<T>> {
    let mut data = Vec::with_capacity(xs.len() * d * t);
    for x in xs {
        if x.shape() != [d, t] {
            return Err(Error::Dimension(format!("expected [{d}, {t}] features, got {:?}", x.shape())));
        }
        data.extend_from_slice(x.data());
    }
    Tensor::new(&[xs.len(), 1, d, t], data)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 3e-4, beta1: 0.9, beta2: 0.98, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::default();
        kv.set("lr", self.lr);
        kv.set("beta1", self.beta1);
        kv.set("beta2", self.beta2);
        kv.set("eps", self.eps);
        kv
    }

    pub fn merge_kv(mut self, kv: &KvMap) -> Result<Self> {
        kv.update("lr", &mut self.lr)?;
        kv.update("beta1", &mut self.beta1)?;
        kv.update("beta2", &mut self.beta2)?;
        kv.update("eps", &mut self.eps)?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let beta = |b: f64| (0.0..1.0).contains(&b);
        // lr = 0 is allowed: it freezes the weights, which is useful as a control run
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !beta(self.beta1) || !beta(self.beta2) || !(self.eps > 0.0) {
            return Err(Error::Config(format!("invalid Adam settings {self:?}")));
        }
        Ok(())
    }
}

/// Bias-corrected Adam with per-parameter moments keyed by parameter name.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub cfg: AdamConfig,
    pub step: u64,
    moments: BTreeMap<String, (Vec<T>, Vec<T>)>,
}

impl<T: Real> Adam<T> {
    pub fn new(cfg: AdamConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg, step: 0, moments: BTreeMap::new() })
    }

    /// One update of every learnable parameter of `module` that holds a gradient.
    pub fn step(&mut self, module: &mut dyn Module<T>) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c = &self.cfg;
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (corr1, corr2) = (T::of(1.0 - c.beta1.powi(t)), T::of(1.0 - c.beta2.powi(t)));
        let (lr, eps) = (T::of(c.lr), T::of(c.eps));
        let mut result = Ok(());
        module.visit_mut(&mut |p| {
            if p.kind != ParamKind::Weight || result.is_err() {
                return;
            }
            let Some(g) = p.value.grad().map(<[T]>::to_vec) else { return };
            let n = p.value.numel();
            let (m, v) = self.moments.entry(p.name.clone()).or_insert_with(|| (vec![T::zero(); n], vec![T::zero(); n]));
            if m.len() != n || g.len() != n {
                result = Err(Error::ShapeMismatch { name: p.name.clone(), found: vec![m.len()], expected: vec![n] });
                return;
            }
            for (((w, &g), m), v) in p.value.data_mut().iter_mut().zip(&g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                let m_hat = *m / corr1;
                let v_hat = *v / corr2;
                *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
            }
        });
        result
    }

    /// Moment tensors for checkpointing, named `adam.m.<param>` / `adam.v.<param>`.
    pub fn state(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        for (name, (m, v)) in &self.moments {
            out.push((format!("adam.m.{name}"), Tensor::new(&[m.len()], m.clone()).unwrap()));
            out.push((format!("adam.v.{name}"), Tensor::new(&[v.len()], v.clone()).unwrap()));
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Where `best.ckpt`, `last.ckpt` and `train_log.csv` go, if anywhere.
    pub checkpoint_dir: Option<PathBuf>,
    /// Dev EER is computed every `eval_every` epochs and after the last one.
    pub eval_every: usize,
    /// Stop once the dev EER falls to this value or below.
    pub target_dev_eer: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 20, batch_size: 16, seed: 0, checkpoint_dir: None, eval_every: 1, target_dev_eer: None }
    }
}

impl TrainConfig {
    /// Every field except the checkpoint directory; an absent target is `none`.
    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::default();
        kv.set("epochs", self.epochs);
        kv.set("batch_size", self.batch_size);
        kv.set("seed", self.seed);
        kv.set("eval_every", self.eval_every);
        kv.set("target_dev_eer", self.target_dev_eer.map_or("none".to_string(), |v| v.to_string()));
        kv
    }

    pub fn merge_kv(mut self, kv: &KvMap) -> Result<Self> {
        kv.update("epochs", &mut self.epochs)?;
        kv.update("batch_size", &mut self.batch_size)?;
        kv.update("seed", &mut self.seed)?;
        kv.update("eval_every", &mut self.eval_every)?;
        match kv.get("target_dev_eer") {
            None => {}
            Some("none") => self.target_dev_eer = None,
            Some(_) => self.target_dev_eer = kv.parse_value("target_dev_eer")?,
        }
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::Config("epochs, batch size and eval cadence must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_eer: Option<f64>,
}

pub fn format_log(log: &[EpochLog]) -> String {
    let mut out = String::from("epoch,train_loss,dev_eer\n");
    for e in log {
        let eer = e.dev_eer.map(|v| v.to_string()).unwrap_or_default();
        out.push_str(&format!("{},{},{}\n", e.epoch, e.train_loss, eer));
    }
    out
}

pub struct TrainOutcome<T> {
    pub best: Checkpoint<T>,
    pub best_epoch: usize,
    pub best_dev_eer: f64,
    pub log: Vec<EpochLog>,
    /// The model after the last epoch.
    pub model: Model<T>,
}

/// One optimizer step on `batch`; returns the mean loss before the update.
pub fn train_step<T: Real>(model: &mut Model<T>, adam: &mut Adam<T>, batch: &[&Example<T>]) -> Result<f64> {
    let (d, t) = (model.cfg.input_bins, model.cfg.input_frames);
    let feats: Vec<&Tensor<T>> = batch.iter().map(|e| &e.features).collect();
    let targets: Vec<usize> = batch.iter().map(|e| class_index(e.label)).collect();
    let tape = Tape::new();
    let mut s = Session::new(&tape, Mode::Train);
    let x = tape.constant(stack(&feats, d, t)?);
    let loss = model.forward(&mut s, x)?.log_softmax().nll(&targets)?;
    let value = loss.scalar().to_f64().unwrap();
    if !value.is_finite() {
        return Err(Error::NonFiniteLoss { epoch: 0, step: adam.step as usize + 1 });
    }
    let grads = tape.backward(loss)?;
    model.zero_grad();
    s.accumulate_grads(&grads, model)?;
    s.commit_bn_stats(model);
    adam.step(model)?;
    Ok(value)
}

/// Dev EER of `model` (eval mode) on `dev`.
pub fn dev_eer<T: Real>(model: &Model<T>, dev: &[Example<T>], batch: usize) -> Result<f64> {
    let xs: Vec<&Tensor<T>> = dev.iter().map(|e| &e.features).collect();
    let scores = score_batch(model, &xs, batch)?;
    let records: Vec<ScoreRecord> =
        dev.iter().zip(scores).map(|(e, s)| ScoreRecord::new(e.trial_id.clone(), e.label, s)).collect();
    Ok(eer(&records)?.0)
}

/// Shuffled mini-batch training; keeps the checkpoint with the lowest dev
/// EER (earliest epoch on ties).
pub fn train<T: Real>(
    mut model: Model<T>,
    train_set: &[Example<T>],
    dev_set: &[Example<T>],
    tc: &TrainConfig,
    ac: &AdamConfig,
) -> Result<TrainOutcome<T>> {
    tc.validate()?;
    if train_set.is_empty() || dev_set.is_empty() {
        return Err(Error::Config("training needs non-empty train and dev sets".into()));
    }
    if let Some(dir) = &tc.checkpoint_dir {
        std::fs::create_dir_all(dir)?;
    }
    let mut adam = Adam::new(ac.clone())?;
    let mut log = Vec::new();
    let mut best: Option<(Checkpoint<T>, usize, f64)> = None;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=tc.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
        rng.set_stream(epoch as u64);
        order.sort_unstable();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (step, idx) in order.chunks(tc.batch_size).enumerate() {
            let batch: Vec<&Example<T>> = idx.iter().map(|&i| &train_set[i]).collect();
            let loss = train_step(&mut model, &mut adam, &batch).map_err(|e| match e {
                Error::NonFiniteLoss { .. } => Error::NonFiniteLoss { epoch, step: step + 1 },
                e => e,
            })?;
            total += loss * batch.len() as f64;
        }
        let train_loss = total / train_set.len() as f64;
        let evaluate = epoch % tc.eval_every == 0 || epoch == tc.epochs;
        let dev = if evaluate { Some(dev_eer(&model, dev_set, tc.batch_size)?) } else { None };
        log::info!(
            "epoch {epoch}: train loss {train_loss:.5}, dev EER {}",
            dev.map_or("-".to_string(), |v| format!("{v:.4}"))
        );
        log.push(EpochLog { epoch, train_loss, dev_eer: dev });
        if let Some(e) = dev {
            if best.as_ref().is_none_or(|(_, _, b)| e < *b) {
                let mut meta = KvMap::default();
                meta.set("epoch", epoch);
                meta.set("dev_eer", e);
                meta.set("seed", tc.seed);
                let ck = Checkpoint::from_model(&model, meta);
                if let Some(dir) = &tc.checkpoint_dir {
                    ck.save(&dir.join("best.ckpt"))?;
                }
                best = Some((ck, epoch, e));
            }
        }
        if let Some(dir) = &tc.checkpoint_dir {
            let mut meta = KvMap::default();
            meta.set("epoch", epoch);
            meta.set("adam.step", adam.step);
            Checkpoint::from_model(&model, meta).with_optimizer(adam.state()).save(&dir.join("last.ckpt"))?;
            std::fs::write(dir.join("train_log.csv"), format_log(&log))?;
        }
        if let (Some(target), Some(e)) = (tc.target_dev_eer, dev) {
            if e <= target {
                log::info!("dev EER {e:.4} reached target {target}; stopping after epoch {epoch}");
                break;
            }
        }
    }
    let (best, best_epoch, best_dev_eer) = best.expect("the last epoch is always evaluated");
    Ok(TrainOutcome { best, best_epoch, best_dev_eer, log, model })
}
