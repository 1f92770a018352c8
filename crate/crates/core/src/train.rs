//! Optimisation: decoupled-weight-decay Adam, per-iteration cosine
//! schedule with per-group base rates, global-norm clipping, and the
//! epoch loop with kappa-based checkpoint selection.

use std::cell::RefCell;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::checkpoint;
use crate::data::LabeledSet;
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::model::MscgcKanModel;
use crate::nn::Mode;
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::tensor::{Tape, Tensor};
use crate::seeded;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub lr_backbone: f64,
    pub lr_head: f64,
    pub lr_min: f64,
    pub clip_norm: f64,
    pub dropout: f64,
    pub kernels: Vec<usize>,
    pub betas: (f64, f64),
    pub adam_eps: f64,
    /// Restrict weight decay to weights, kernels and the adjacency.
    pub decay_weights_only: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 64,
            weight_decay: 5e-2,
            lr_backbone: 1e-4,
            lr_head: 5e-4,
            lr_min: 1e-6,
            clip_norm: 1.0,
            dropout: 0.1,
            kernels: vec![3, 5],
            betas: (0.9, 0.999),
            adam_eps: 1e-8,
            decay_weights_only: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        for (name, v) in [
            ("lr_backbone", self.lr_backbone),
            ("lr_head", self.lr_head),
            ("lr_min", self.lr_min),
            ("clip_norm", self.clip_norm),
            ("adam_eps", self.adam_eps),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.lr_min > self.lr_backbone || self.lr_min > self.lr_head {
            return Err(Error::Config("lr_min exceeds a base learning rate".into()));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config("weight_decay must be nonnegative".into()));
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return Err(Error::Config(format!("betas {:?} outside [0, 1)", self.betas)));
        }
        Ok(())
    }

    pub fn base_lr(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Backbone => self.lr_backbone,
            ParamGroup::Head => self.lr_head,
        }
    }
}

/// `min + ½(base − min)(1 + cos(π t / T))`; `t > T` clamps to `min`.
pub fn cosine_lr(t: usize, total: usize, base: f64, min: f64) -> f64 {
    let total = total.max(1);
    if t > total {
        log::warn!("cosine schedule step {t} beyond horizon {total}; using lr_min");
        return min;
    }
    min + 0.5 * (base - min) * (1.0 + (std::f64::consts::PI * t as f64 / total as f64).cos())
}

/// Scales the gradients of `ids` so their global L2 norm is at most
/// `max_norm`. Returns the norm before scaling.
pub fn clip_gradients(store: &mut ParamStore, ids: &[ParamId], max_norm: f64) -> Result<f64> {
    let sq: f64 = ids.iter().filter_map(|&id| store.get(id).grad()).flatten().map(|g| g * g).sum();
    let norm = sq.sqrt();
    if !norm.is_finite() {
        return Err(Error::Numerical(format!("gradient norm is {norm}")));
    }
    if norm > max_norm {
        let scale = max_norm / norm;
        for &id in ids {
            if let Some(g) = store.get_mut(id).grad_mut() {
                g.iter_mut().for_each(|v| *v *= scale);
            }
        }
    }
    Ok(norm)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    moments: Vec<Option<(Vec<f64>, Vec<f64>)>>,
}

impl AdamW {
    pub fn new(betas: (f64, f64), eps: f64) -> Self {
        Self { beta1: betas.0, beta2: betas.1, eps, step: 0, moments: Vec::new() }
    }

    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self::new(cfg.betas, cfg.adam_eps)
    }

    pub fn moments(&self, id: ParamId) -> Option<(&[f64], &[f64])> {
        self.moments.get(id.index())?.as_ref().map(|(m, v)| (m.as_slice(), v.as_slice()))
    }

    pub(crate) fn set_moments(&mut self, id: ParamId, m: Vec<f64>, v: Vec<f64>) {
        if self.moments.len() <= id.index() {
            self.moments.resize(id.index() + 1, None);
        }
        self.moments[id.index()] = Some((m, v));
    }

    /// Ids with moment buffers, in ascending order.
    pub fn tracked(&self) -> Vec<ParamId> {
        self.moments
            .iter()
            .enumerate()
            .filter(|(_, m)| m.is_some())
            .map(|(i, _)| ParamId(i))
            .collect()
    }

    /// One update of every id in `ids`:
    /// `θ ← θ − lr·(m̂/(√v̂ + ε) + wd·θ)`, with `wd` applied only to
    /// parameters that are flagged for decay unless `decay_all`.
    pub fn update(
        &mut self,
        store: &mut ParamStore,
        ids: &[ParamId],
        lr: impl Fn(ParamGroup) -> f64,
        weight_decay: f64,
        decay_all: bool,
    ) -> Result<()> {
        for &id in ids {
            if let Some(g) = store.get(id).grad() {
                if let Some(bad) = g.iter().position(|v| !v.is_finite()) {
                    return Err(Error::Numerical(format!(
                        "non-finite gradient {} at {}[{bad}]",
                        g[bad],
                        store.entry(id).name
                    )));
                }
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for &id in ids {
            let entry = store.entry(id);
            let lr_t = lr(entry.group);
            let wd = if decay_all || entry.decay { weight_decay } else { 0.0 };
            let n = entry.tensor.numel();
            let grad: Vec<f64> = entry.tensor.grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; n]);
            if self.moments.len() <= id.index() {
                self.moments.resize(id.index() + 1, None);
            }
            let (m, v) = self.moments[id.index()].get_or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            let theta = store.get_mut(id).data_mut();
            for i in 0..n {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * grad[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                theta[i] -= lr_t * (m_hat / (v_hat.sqrt() + self.eps) + wd * theta[i]);
            }
        }
        Ok(())
    }
}

/// Index of the largest logit per row; ties go to the lowest index.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let m = *logits.shape().last().unwrap_or(&1);
    logits
        .data()
        .chunks(m)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

pub fn evaluate(model: &mut MscgcKanModel, x: &Tensor, labels: &[usize], batch: usize) -> Result<MetricsReport> {
    let logits = model.predict(x, batch)?;
    MetricsReport::from_predictions(labels, &argmax_rows(&logits), model.config.classes)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "phase", content = "epoch")]
pub enum ReadPhase {
    Epoch(usize),
    Final,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitRead {
    pub phase: ReadPhase,
    pub split: &'static str,
}

struct Guarded<'a> {
    set: &'a LabeledSet,
    name: &'static str,
    log: &'a RefCell<Vec<SplitRead>>,
}

impl Guarded<'_> {
    fn labels(&self, phase: ReadPhase) -> &[usize] {
        self.log.borrow_mut().push(SplitRead { phase, split: self.name });
        &self.set.y
    }
}

pub struct SplitSets {
    pub train: LabeledSet,
    pub val: LabeledSet,
    pub test: LabeledSet,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_ba: f64,
    pub val_kappa: Option<f64>,
    pub val_wf1: f64,
    pub lr_head: f64,
    pub lr_backbone: f64,
    /// Balanced accuracy of the training-mode batch predictions.
    pub train_ba: f64,
    pub improved: bool,
}

#[derive(Clone, Debug, Default)]
pub struct LoopOptions {
    /// Persist the best checkpoint here and reload it from disk before
    /// the test evaluation.
    pub checkpoint: Option<PathBuf>,
    pub eval_batch: usize,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub log: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_kappa: Option<f64>,
    pub test: MetricsReport,
    pub reads: Vec<SplitRead>,
    pub optimizer: AdamW,
}

pub fn train_loop(model: &mut MscgcKanModel, sets: &SplitSets, cfg: &TrainConfig, opts: &LoopOptions) -> Result<TrainOutcome> {
    cfg.validate()?;
    for (name, set) in [("train", &sets.train), ("val", &sets.val), ("test", &sets.test)] {
        if set.is_empty() {
            return Err(Error::Config(format!("{name} split is empty")));
        }
        if let Some(&bad) = set.y.iter().find(|&&y| y >= model.config.classes) {
            return Err(Error::Config(format!("{name} label {bad} outside the {} model classes", model.config.classes)));
        }
    }
    let reads = RefCell::new(Vec::new());
    let train = Guarded { set: &sets.train, name: "train", log: &reads };
    let val = Guarded { set: &sets.val, name: "val", log: &reads };
    let test = Guarded { set: &sets.test, name: "test", log: &reads };
    let eval_batch = if opts.eval_batch == 0 { 256 } else { opts.eval_batch };

    let n = sets.train.len();
    let batches = n.div_ceil(cfg.batch_size);
    let horizon = cfg.epochs * batches;
    let mut shuffle_rng = seeded(cfg.seed);
    let mut dropout_rng = seeded(cfg.seed.wrapping_add(0x5eed));
    let mut opt = AdamW::from_config(cfg);
    let ids = model.store.trainable();
    let decay_all = !cfg.decay_weights_only;

    let mut order: Vec<usize> = (0..n).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, ParamStore, AdamW)> = None;
    let mut best_kappa: Option<f64> = None;
    let mut step = 0usize;
    let (mut lr_h, mut lr_b) = (cfg.lr_head, cfg.lr_backbone);

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let y_train = train.labels(ReadPhase::Epoch(epoch));
        let mut loss_sum = 0.0;
        let mut preds = Vec::with_capacity(n);
        let mut truth = Vec::with_capacity(n);
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let xb = sets.train.x.select(chunk)?;
            let yb: Vec<usize> = chunk.iter().map(|&i| y_train[i]).collect();
            let mut tape = Tape::new();
            let xv = tape.constant(xb);
            let fo = model
                .forward(&mut tape, xv, Mode::Train, &mut dropout_rng)
                .map_err(|e| context(e, epoch, bi))?;
            let loss = tape.softmax_cross_entropy(fo.logits, &yb)?;
            let lv = tape.value(loss).item()?;
            if !lv.is_finite() {
                return Err(Error::Numerical(format!("loss {lv} at epoch {epoch} batch {bi}")));
            }
            preds.extend(argmax_rows(tape.value(fo.logits)));
            truth.extend_from_slice(&yb);
            tape.backward(loss)?;
            model.store.zero_grad();
            tape.accumulate_param_grads(&mut model.store)?;
            clip_gradients(&mut model.store, &ids, cfg.clip_norm).map_err(|e| context(e, epoch, bi))?;
            lr_h = cosine_lr(step, horizon, cfg.lr_head, cfg.lr_min);
            lr_b = cosine_lr(step, horizon, cfg.lr_backbone, cfg.lr_min);
            let lr = |g: ParamGroup| match g {
                ParamGroup::Head => lr_h,
                ParamGroup::Backbone => lr_b,
            };
            opt.update(&mut model.store, &ids, lr, cfg.weight_decay, decay_all)
                .map_err(|e| context(e, epoch, bi))?;
            step += 1;
            loss_sum += lv * chunk.len() as f64;
        }
        let train_ba = MetricsReport::from_predictions(&truth, &preds, model.config.classes)?.balanced_accuracy;

        let val_logits = model.predict(&sets.val.x, eval_batch)?;
        let report = MetricsReport::from_predictions(val.labels(ReadPhase::Epoch(epoch)), &argmax_rows(&val_logits), model.config.classes)?;
        let kappa = report.kappa_or_neg_inf();
        let improved = best.as_ref().is_none_or(|(_, k, _, _)| kappa > *k);
        if improved {
            if let Some(path) = &opts.checkpoint {
                checkpoint::save_checkpoint(path, model, Some(&opt), epoch, report.kappa)?;
            }
            best = Some((epoch, kappa, model.store.clone(), opt.clone()));
            best_kappa = report.kappa;
        }
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / n as f64,
            val_ba: report.balanced_accuracy,
            val_kappa: report.kappa,
            val_wf1: report.weighted_f1,
            lr_head: lr_h,
            lr_backbone: lr_b,
            train_ba,
            improved,
        };
        log::info!("{}", serde_json::to_string(&record)?);
        log.push(record);
    }

    let (best_epoch, _, snapshot, best_opt) = best.expect("at least one epoch ran");
    let optimizer = match &opts.checkpoint {
        Some(path) => {
            let mut restored = AdamW::from_config(cfg);
            let header = checkpoint::load_checkpoint(path, model, Some(&mut restored))?;
            if header.epoch != best_epoch {
                return Err(Error::Validation(format!(
                    "checkpoint holds epoch {} but the best epoch is {best_epoch}",
                    header.epoch
                )));
            }
            restored
        }
        None => {
            model.store = snapshot;
            best_opt
        }
    };
    let test_logits = model.predict(&sets.test.x, eval_batch)?;
    let test_report = MetricsReport::from_predictions(test.labels(ReadPhase::Final), &argmax_rows(&test_logits), model.config.classes)?;
    drop((train, val, test));
    Ok(TrainOutcome {
        log,
        best_epoch,
        best_val_kappa: best_kappa,
        test: test_report,
        reads: reads.into_inner(),
        optimizer,
    })
}

fn context(e: Error, epoch: usize, batch: usize) -> Error {
    if e.is_numerical() {
        Error::Numerical(format!("epoch {epoch} batch {batch}: {e}"))
    } else {
        e
    }
}
