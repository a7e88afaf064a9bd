//! Training loop, evaluation and the ablation harness.

pub mod ablate;
pub mod checkpoint;
pub mod eval;
pub mod optim;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::classifier::objective;
use crate::config::KeyValues;
use crate::data::{load_dataset, shuffled, Batch, Dataset, Split};
use crate::model::{AgcdNet, ModelConfig};
use crate::params::ParamStore;
use crate::rng::{hash_str, stream};
use crate::tensor::{DType, Graph, Scalar, Tensor};
use crate::{Error, Result};

use checkpoint::{read_archive, write_archive, Archive};
use eval::{accuracy, predict};
use optim::{clip_global_norm, cosine_warm_restart_lr, AdamState, AdamW};

pub const METRICS_HEADER: &str = "epoch,step,lr,train_loss,train_acc,val_acc";

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr_base: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub label_smoothing: f64,
    pub t0: u64,
    pub t_mult: u64,
    pub seed: u64,
    pub dtype: DType,
    /// Random horizontal flips plus additive Gaussian pixel noise.
    pub augment: bool,
    pub aug_noise: f64,
    /// Global gradient-norm bound; `0` disables clipping.
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_base: 1e-5,
            lr_min: 0.0,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 128,
            epochs: 30,
            label_smoothing: 0.2,
            t0: 128,
            t_mult: 2,
            seed: 0,
            dtype: DType::F32,
            augment: true,
            aug_noise: 0.05,
            clip_norm: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_min >= 0.0 && self.lr_base > self.lr_min) {
            return Err(Error::config(format!("need lr_base > lr_min >= 0, got {} and {}", self.lr_base, self.lr_min)));
        }
        if self.t0 < 1 || self.t_mult < 1 {
            return Err(Error::config("t0 and t_mult must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::config(format!("label_smoothing {} outside [0, 1)", self.label_smoothing)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.adam_eps <= 0.0 || self.weight_decay < 0.0 {
            return Err(Error::config("invalid optimizer settings"));
        }
        if self.aug_noise < 0.0 || self.clip_norm < 0.0 {
            return Err(Error::config("aug_noise and clip_norm must be non-negative"));
        }
        Ok(())
    }

    pub fn optimizer(&self) -> AdamW {
        AdamW { beta1: self.beta1, beta2: self.beta2, eps: self.adam_eps, weight_decay: self.weight_decay }
    }

    pub fn lr(&self, step: u64) -> f64 {
        cosine_warm_restart_lr(step, self.t0, self.t_mult, self.lr_base, self.lr_min)
    }

    pub fn from_kv(mut kv: KeyValues) -> Result<Self> {
        let d = Self::default();
        let cfg = Self {
            lr_base: kv.take("lr_base", d.lr_base)?,
            lr_min: kv.take("lr_min", d.lr_min)?,
            weight_decay: kv.take("weight_decay", d.weight_decay)?,
            beta1: kv.take("beta1", d.beta1)?,
            beta2: kv.take("beta2", d.beta2)?,
            adam_eps: kv.take("adam_eps", d.adam_eps)?,
            batch_size: kv.take("batch_size", d.batch_size)?,
            epochs: kv.take("epochs", d.epochs)?,
            label_smoothing: kv.take("label_smoothing", d.label_smoothing)?,
            t0: kv.take("t0", d.t0)?,
            t_mult: kv.take("t_mult", d.t_mult)?,
            seed: kv.take("seed", d.seed)?,
            dtype: kv.take("dtype", d.dtype)?,
            augment: kv.take("augment", d.augment)?,
            aug_noise: kv.take("aug_noise", d.aug_noise)?,
            clip_norm: kv.take("clip_norm", d.clip_norm)?,
        };
        kv.finish()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::default();
        kv.set("lr_base", self.lr_base);
        kv.set("lr_min", self.lr_min);
        kv.set("weight_decay", self.weight_decay);
        kv.set("beta1", self.beta1);
        kv.set("beta2", self.beta2);
        kv.set("adam_eps", self.adam_eps);
        kv.set("batch_size", self.batch_size);
        kv.set("epochs", self.epochs);
        kv.set("label_smoothing", self.label_smoothing);
        kv.set("t0", self.t0);
        kv.set("t_mult", self.t_mult);
        kv.set("seed", self.seed);
        kv.set("dtype", self.dtype);
        kv.set("augment", self.augment);
        kv.set("aug_noise", self.aug_noise);
        kv.set("clip_norm", self.clip_norm);
        kv
    }
}

/// Fingerprint of everything that must match for a resume, i.e. all
/// settings except the epoch budget.
pub fn config_hash(model: &ModelConfig, train: &TrainConfig) -> u64 {
    let mut t = train.to_kv();
    t.remove("epochs");
    hash_str(&format!("{}--\n{}", model.to_kv(), t))
}

/// Everything needed to continue a run bit-exactly. Randomness is drawn from
/// streams keyed by `(seed, epoch)` and `(seed, step)`, so the counters are
/// the whole RNG state.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState<T> {
    pub params: ParamStore<T>,
    pub adam: AdamState<T>,
    pub step: u64,
    /// Completed epochs.
    pub epoch: usize,
    pub best_val: f64,
}

impl<T: Scalar> TrainState<T> {
    pub fn fresh(net: &AgcdNet, seed: u64) -> Self {
        let params = net.init(seed);
        let adam = AdamState::zeros_like(&params);
        Self { params, adam, step: 0, epoch: 0, best_val: f64::NEG_INFINITY }
    }

    fn archive_meta(&self, model: &ModelConfig, train: &TrainConfig) -> KeyValues {
        let mut meta = KeyValues::default();
        meta.set("step", self.step);
        meta.set("epoch", self.epoch);
        meta.set("best_val", self.best_val);
        meta.set("seed", train.seed);
        meta.set("dtype", T::DTYPE);
        meta.set("config_hash", format!("{:016x}", config_hash(model, train)));
        for (k, v) in model.to_kv().iter() {
            meta.set(&format!("model.{k}"), v);
        }
        for (k, v) in train.to_kv().iter() {
            meta.set(&format!("train.{k}"), v);
        }
        meta
    }

    pub fn save(&self, path: &Path, model: &ModelConfig, train: &TrainConfig, with_optimizer: bool) -> Result<()> {
        let mut entries: Vec<(String, &Tensor<T>)> = self.params.iter().map(|(n, t)| (format!("param/{n}"), t)).collect();
        if with_optimizer {
            entries.extend(self.adam.m.iter().map(|(n, t)| (format!("adam.m/{n}"), t)));
            entries.extend(self.adam.v.iter().map(|(n, t)| (format!("adam.v/{n}"), t)));
        }
        let mut meta = self.archive_meta(model, train);
        meta.set("adam_t", self.adam.t);
        write_archive(path, &entries, &meta)
    }
}

fn prefixed<T: Scalar>(archive: &Archive, prefix: &str, exact: bool) -> std::result::Result<ParamStore<T>, String> {
    let mut store = ParamStore::new();
    for (name, t) in &archive.entries {
        if let Some(n) = name.strip_prefix(prefix) {
            if exact && t.dtype() != T::DTYPE {
                return Err(format!("entry `{name}` is {}, expected {}", t.dtype(), T::DTYPE));
            }
            store.insert(n, t.cast());
        }
    }
    Ok(store)
}

fn meta_section(meta: &KeyValues, prefix: &str) -> KeyValues {
    let mut kv = KeyValues::default();
    for (k, v) in meta.iter() {
        if let Some(k) = k.strip_prefix(prefix) {
            kv.set(k, v);
        }
    }
    kv
}

/// A model restored from a checkpoint for inference.
pub struct LoadedModel<T> {
    pub net: AgcdNet,
    pub params: ParamStore<T>,
    pub meta: KeyValues,
}

pub fn load_model<T: Scalar>(path: &Path) -> Result<LoadedModel<T>> {
    let archive = read_archive(path)?;
    let cfg = ModelConfig::from_kv(meta_section(&archive.meta, "model.")).map_err(|e| Error::data(path, e.to_string()))?;
    let net = AgcdNet::new(cfg)?;
    let params = prefixed(&archive, "param/", false).map_err(|m| Error::data(path, m))?;
    let expected = net.init::<T>(0);
    for (name, t) in expected.iter() {
        let found = params.get(name).map_err(|_| Error::data(path, format!("missing parameter `{name}`")))?;
        if found.shape() != t.shape() {
            return Err(Error::data(path, format!("parameter `{name}` has shape {:?}, expected {:?}", found.shape(), t.shape())));
        }
    }
    Ok(LoadedModel { net, params, meta: archive.meta })
}

fn load_state<T: Scalar>(path: &Path, model: &ModelConfig, train: &TrainConfig) -> Result<TrainState<T>> {
    let archive = read_archive(path)?;
    let err = |m: String| Error::data(path, m);
    let meta = &archive.meta;
    let want = format!("{:016x}", config_hash(model, train));
    if meta.get_str("config_hash") != Some(want.as_str()) {
        return Err(err("checkpoint was written with a different model or training configuration".into()));
    }
    let num = |k: &str| -> Result<f64> { meta.get_str(k).and_then(|v| v.parse().ok()).ok_or_else(|| err(format!("metadata key `{k}` missing or invalid"))) };
    let params = prefixed(&archive, "param/", true).map_err(err)?;
    let m = prefixed(&archive, "adam.m/", true).map_err(err)?;
    let v = prefixed(&archive, "adam.v/", true).map_err(err)?;
    if m.len() != params.len() || v.len() != params.len() {
        return Err(err("checkpoint has no optimizer state".into()));
    }
    Ok(TrainState {
        params,
        adam: AdamState { m, v, t: num("adam_t")? as u64 },
        step: num("step")? as u64,
        epoch: num("epoch")? as usize,
        best_val: num("best_val")?,
    })
}

/// One row of `metrics.csv`.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
}

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        format!("{},{},{},{},{},{}", self.epoch, self.step, self.lr, self.train_loss, self.train_acc, self.val_acc)
    }
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub metrics: Vec<EpochMetrics>,
    pub best_val: f64,
    pub last_checkpoint: PathBuf,
    pub best_checkpoint: PathBuf,
}

/// Flips half the samples horizontally (face and context together) and adds
/// pixel noise outside the masked face region.
pub fn augment<T: Scalar>(batch: &mut Batch<T>, seed: u64, step: u64, noise: f64) {
    let mut r = stream(seed, "augment", step);
    let n = batch.labels.len();
    let flips: Vec<bool> = (0..n).map(|_| r.random_bool(0.5)).collect();
    let dist = Normal::new(0.0, noise).expect("finite noise");
    for t in [&mut batch.face, &mut batch.context] {
        let w = t.shape()[3];
        let per = t.numel() / n;
        for (i, img) in t.data_mut().chunks_mut(per).enumerate() {
            if flips[i] {
                img.chunks_mut(w).for_each(<[T]>::reverse);
            }
            if noise > 0.0 {
                for v in img.iter_mut().filter(|v| v.as_f64() != 0.0) {
                    *v = T::from_f64(v.as_f64() + dist.sample(&mut r));
                }
            }
        }
    }
}

/// Loss parts and correct-prediction count of one optimizer step.
pub struct StepOutcome {
    pub loss: f64,
    pub correct: usize,
    pub grad_norm: f64,
}

pub fn train_step<T: Scalar>(net: &AgcdNet, cfg: &TrainConfig, state: &mut TrainState<T>, batch: Batch<T>) -> Result<StepOutcome> {
    let mut g = Graph::new();
    let p = state.params.bind(&mut g, true);
    let (f, c) = (g.constant(batch.face), g.constant(batch.context));
    let out = net.forward(&mut g, &p, f, c)?;
    let (loss, parts) = objective(&mut g, out.logits, &batch.labels, cfg.label_smoothing, out.h_face, out.h_context)?;
    let correct = accuracy(g.value(out.logits), &batch.labels).0;
    g.backward(loss)?;
    let mut grads = ParamStore::new();
    for (name, var) in p.iter() {
        let grad = g.grad(var).cloned().unwrap_or_else(|| Tensor::zeros(g.shape(var).to_vec()));
        grads.insert(name, grad);
    }
    drop(g);
    let grad_norm = if cfg.clip_norm > 0.0 { clip_global_norm(&mut grads, cfg.clip_norm) } else { grads.iter().map(|(_, t)| t.sum_sq()).sum::<f64>().sqrt() };
    if !grad_norm.is_finite() {
        return Err(Error::Numerical(format!("non-finite gradient norm at step {}", state.step)));
    }
    let lr = cfg.lr(state.step);
    cfg.optimizer().step(&mut state.params, &grads, &mut state.adam, lr)?;
    state.step += 1;
    Ok(StepOutcome { loss: parts.total, correct, grad_norm })
}

fn check_compat(model: &ModelConfig, ds: &Dataset) -> Result<()> {
    if model.num_classes != ds.spec.k {
        return Err(Error::config(format!("model has {} classes, dataset has {}", model.num_classes, ds.spec.k)));
    }
    if model.encoder.in_channels != crate::data::CHANNELS {
        return Err(Error::config(format!("model expects {} input channels, images have {}", model.encoder.in_channels, crate::data::CHANNELS)));
    }
    Ok(())
}

/// Trains from scratch, or continues from `resume`, writing `metrics.csv`,
/// `last.ckpt` and `best.ckpt` into `out`.
pub fn train(model: &ModelConfig, cfg: &TrainConfig, data: &Path, out: &Path, resume: Option<&Path>, progress: &mut dyn FnMut(&EpochMetrics)) -> Result<RunSummary> {
    let train_ds = load_dataset(data, Split::Train)?;
    let val_ds = load_dataset(data, Split::Val)?;
    match cfg.dtype {
        DType::F32 => train_on::<f32>(model, cfg, &train_ds, &val_ds, out, resume, progress),
        DType::F64 => train_on::<f64>(model, cfg, &train_ds, &val_ds, out, resume, progress),
    }
}

fn read_metrics_prefix(path: &Path, epochs: usize) -> Result<String> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut kept = format!("{METRICS_HEADER}\n");
    for line in text.lines().skip(1).take(epochs) {
        kept.push_str(line);
        kept.push('\n');
    }
    Ok(kept)
}

pub fn train_on<T: Scalar>(
    model: &ModelConfig,
    cfg: &TrainConfig,
    train_ds: &Dataset,
    val_ds: &Dataset,
    out: &Path,
    resume: Option<&Path>,
    progress: &mut dyn FnMut(&EpochMetrics),
) -> Result<RunSummary> {
    cfg.validate()?;
    check_compat(model, train_ds)?;
    check_compat(model, val_ds)?;
    let net = AgcdNet::new(model.clone())?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let metrics_path = out.join("metrics.csv");
    let (last, best) = (out.join("last.ckpt"), out.join("best.ckpt"));

    let mut state = match resume {
        Some(path) => load_state::<T>(path, model, cfg)?,
        None => TrainState::fresh(&net, cfg.seed),
    };
    let header = if resume.is_some() && metrics_path.exists() { read_metrics_prefix(&metrics_path, state.epoch)? } else { format!("{METRICS_HEADER}\n") };
    fs::write(&metrics_path, header).map_err(|e| Error::io(&metrics_path, e))?;

    let mut metrics = Vec::new();
    while state.epoch < cfg.epochs {
        let order = shuffled(train_ds.len(), cfg.seed, state.epoch as u64);
        let (mut loss_sum, mut correct, mut lr) = (0.0, 0usize, cfg.lr(state.step));
        for idx in order.chunks(cfg.batch_size) {
            let mut batch = train_ds.batch::<T>(idx);
            if cfg.augment {
                augment(&mut batch, cfg.seed, state.step, cfg.aug_noise);
            }
            lr = cfg.lr(state.step);
            let o = train_step(&net, cfg, &mut state, batch)?;
            loss_sum += o.loss * idx.len() as f64;
            correct += o.correct;
        }
        let preds = predict(&net, &state.params, val_ds, cfg.batch_size, None)?;
        let val_acc = preds.iter().zip(val_ds.labels()).filter(|(p, y)| **p == *y).count() as f64 / val_ds.len().max(1) as f64;
        state.epoch += 1;
        let m = EpochMetrics {
            epoch: state.epoch,
            step: state.step,
            lr,
            train_loss: loss_sum / train_ds.len() as f64,
            train_acc: correct as f64 / train_ds.len() as f64,
            val_acc,
        };
        if val_acc > state.best_val {
            state.best_val = val_acc;
            state.save(&best, model, cfg, false)?;
        }
        state.save(&last, model, cfg, true)?;
        let mut f = fs::OpenOptions::new().append(true).open(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
        writeln!(f, "{}", m.csv_row()).map_err(|e| Error::io(&metrics_path, e))?;
        progress(&m);
        metrics.push(m);
    }
    Ok(RunSummary { metrics, best_val: state.best_val, last_checkpoint: last, best_checkpoint: best })
}
