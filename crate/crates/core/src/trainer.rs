//! Training loops for both stages: Adam updates, mini-batching with
//! seeded shuffling, per-sample augmentation, early stopping on the
//! monitored loss and best-epoch parameter retention.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use ndarray::{Array4, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{augment_image, augment_pair, sample_seed, AugmentConfig};
use crate::blocks::ParamStore;
use crate::clsmodel::{softmax, ClsModel};
use crate::dataio::{
    load_cls_batch, load_seg_batch, DatasetManifest, LesionClass, NormalizationPolicy,
};
use crate::error::{Error, Result};
use crate::losses::{categorical_cross_entropy, seg_loss, seg_loss_grad};
use crate::metrics::MetricsReport;
use crate::segmodel::SegModel;
use crate::tensor::Tensor4;

fn default_batch_size() -> usize {
    8
}

fn default_learning_rate() -> f64 {
    0.001
}

fn default_patience() -> usize {
    5
}

fn default_min_delta() -> f64 {
    1e-4
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Monitor {
    TrainLoss,
    ValLoss,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    pub max_epochs: usize,
    #[serde(default = "default_patience")]
    pub early_stop_patience: usize,
    #[serde(default = "default_min_delta")]
    pub early_stop_min_delta: f64,
    #[serde(default)]
    pub seed: u64,
    /// Loss the early-stopping rule watches. Defaults to validation loss
    /// when a validation manifest is supplied, training loss otherwise.
    #[serde(default)]
    pub monitor: Option<Monitor>,
}

impl TrainConfig {
    pub fn defaults_seg() -> TrainConfig {
        TrainConfig {
            batch_size: 8,
            learning_rate: 0.001,
            max_epochs: 15,
            early_stop_patience: 5,
            early_stop_min_delta: 1e-4,
            seed: 0,
            monitor: None,
        }
    }

    pub fn defaults_cls() -> TrainConfig {
        TrainConfig {
            max_epochs: 30,
            ..TrainConfig::defaults_seg()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        if self.learning_rate < 0.0 {
            return Err(Error::InvalidConfig("learning_rate must be >= 0".into()));
        }
        if self.early_stop_patience < 1 {
            return Err(Error::InvalidConfig("patience must be >= 1".into()));
        }
        Ok(())
    }

    fn effective_monitor(&self, has_val: bool) -> Monitor {
        match self.monitor {
            Some(m) => m,
            None if has_val => Monitor::ValLoss,
            None => Monitor::TrainLoss,
        }
    }
}

/// One epoch of the run log. Wall time is measured but excluded from the
/// serialized form so that rerunning an identical config produces
/// byte-identical logs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss_total: f64,
    pub loss_components: BTreeMap<String, f64>,
    pub val_loss: Option<f64>,
    pub metric_snapshot: Option<MetricsReport>,
    #[serde(skip_serializing, default)]
    pub wall_time_s: f64,
}

/// Write the run log as one JSON line per epoch.
pub fn write_epoch_log(path: &Path, records: &[EpochRecord]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(
            &serde_json::to_string(r).map_err(|e| Error::Other(format!("serialize record: {e}")))?,
        );
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Per-parameter first/second moment estimates.
pub struct AdamState {
    m: Vec<Tensor4>,
    v: Vec<Tensor4>,
    t: usize,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> AdamState {
        AdamState {
            m: params.values().iter().map(|p| Array4::zeros(p.dim())).collect(),
            v: params.values().iter().map(|p| Array4::zeros(p.dim())).collect(),
            t: 0,
        }
    }

    pub fn step_count(&self) -> usize {
        self.t
    }

    pub fn second_moment_sum(&self, idx: usize) -> f64 {
        self.v[idx].sum()
    }
}

/// One Adam update with bias correction. Parameters missing from `grads`
/// keep decaying moments toward zero.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &BTreeMap<usize, Tensor4>,
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    for (idx, g) in grads {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "gradient".into(),
                context: format!("parameter {idx}"),
            });
        }
    }
    state.t += 1;
    let t = state.t as f64;
    let bc1 = 1.0 - ADAM_BETA1.powf(t);
    let bc2 = 1.0 - ADAM_BETA2.powf(t);
    for idx in 0..params.len() {
        let zero;
        let g = match grads.get(&idx) {
            Some(g) => g,
            None => {
                zero = Array4::zeros(params.get(idx).dim());
                &zero
            }
        };
        let m = &mut state.m[idx];
        let v = &mut state.v[idx];
        let p = params.get_mut(idx);
        for ((mi, vi), (pi, gi)) in m
            .iter_mut()
            .zip(v.iter_mut())
            .zip(p.iter_mut().zip(g.iter()))
        {
            *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * gi;
            *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * gi * gi;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *pi -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

/// True iff the last `patience` entries all failed to improve on the
/// best value seen before them by more than `min_delta`.
pub fn early_stop_check(history: &[f64], patience: usize, min_delta: f64) -> bool {
    if history.len() <= patience {
        return false;
    }
    let best_epoch = history
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |(bi, bv), (i, &v)| {
            if v < bv - min_delta {
                (i, v)
            } else {
                (bi, bv)
            }
        })
        .0;
    history.len() - 1 - best_epoch >= patience
}

fn epoch_shuffle(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(seed, epoch, usize::MAX));
    order.shuffle(&mut rng);
    order
}

fn sample_slice(batch: &Tensor4, i: usize) -> Tensor4 {
    batch
        .index_axis(Axis(0), i)
        .insert_axis(Axis(0))
        .to_owned()
}

fn assemble(samples: Vec<Tensor4>) -> Tensor4 {
    let (_, h, w, c) = samples[0].dim();
    let mut out = Array4::zeros((samples.len(), h, w, c));
    for (i, s) in samples.iter().enumerate() {
        out.index_axis_mut(Axis(0), i).assign(&s.index_axis(Axis(0), 0));
    }
    out
}

fn check_finite(loss: f64, epoch: usize, batch: usize) -> Result<()> {
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            what: "loss".into(),
            context: format!("epoch {epoch}, batch {batch}"),
        });
    }
    Ok(())
}

struct Snapshot {
    params: Vec<Tensor4>,
    state: Vec<Tensor4>,
}

fn snapshot(params: &ParamStore, state: &crate::blocks::StateStore) -> Snapshot {
    Snapshot {
        params: params.values().to_vec(),
        state: state.values().to_vec(),
    }
}

fn restore(snap: &Snapshot, params: &mut ParamStore, state: &mut crate::blocks::StateStore) {
    for (dst, src) in params.values_mut().iter_mut().zip(&snap.params) {
        *dst = src.clone();
    }
    for (dst, src) in state.values_mut().iter_mut().zip(&snap.state) {
        *dst = src.clone();
    }
}

fn seg_eval_loss(model: &SegModel, manifest: &DatasetManifest, policy: &NormalizationPolicy, batch_size: usize) -> Result<f64> {
    let samples = manifest.seg_samples()?;
    let mut total = 0.0;
    for chunk in samples.chunks(batch_size) {
        let (images, masks) = load_seg_batch(chunk, policy)?;
        let fwd = model.forward_eval(&images)?;
        let loss = seg_loss(fwd.tape.value(fwd.prob), &masks)?;
        total += loss.total * chunk.len() as f64;
    }
    Ok(total / samples.len() as f64)
}

fn cls_eval_loss(model: &ClsModel, manifest: &DatasetManifest, policy: &NormalizationPolicy, batch_size: usize) -> Result<f64> {
    let samples = manifest.cls_samples()?;
    let mut total = 0.0;
    for chunk in samples.chunks(batch_size) {
        let (images, labels) = load_cls_batch(chunk, policy)?;
        let fwd = model.forward_eval(&images)?;
        let probs = softmax(fwd.tape.value(fwd.logits));
        for (i, label) in labels.iter().enumerate() {
            let row: Vec<f64> = (0..probs.dim().3).map(|c| probs[(i, 0, 0, c)]).collect();
            total += categorical_cross_entropy(&row, label.index())?;
        }
    }
    Ok(total / samples.len() as f64)
}

/// Train the segmenter on binary-cross-entropy + dice. Returns the epoch
/// log; the model ends at its best monitored-loss parameters.
pub fn train_segmentation(
    model: &mut SegModel,
    train_manifest: &DatasetManifest,
    val_manifest: Option<&DatasetManifest>,
    policy: &NormalizationPolicy,
    augment: Option<&AugmentConfig>,
    config: &TrainConfig,
) -> Result<Vec<EpochRecord>> {
    config.validate()?;
    let samples = train_manifest.seg_samples()?;
    if samples.is_empty() {
        return Err(Error::Other("empty training manifest".into()));
    }
    let monitor = config.effective_monitor(val_manifest.is_some());
    let range = policy.mode.bounds();

    let mut adam = AdamState::new(&model.params);
    let mut records = Vec::new();
    let mut monitored = Vec::new();
    let mut best: Option<(f64, Snapshot)> = None;

    for epoch in 0..config.max_epochs {
        let started = Instant::now();
        let order = epoch_shuffle(samples.len(), config.seed, epoch);
        let mut loss_sum = 0.0;
        let mut component_sums: BTreeMap<String, f64> = BTreeMap::new();

        for (bi, batch_idx) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<_> = batch_idx.iter().map(|&i| samples[i].clone()).collect();
            let (images, masks) = load_seg_batch(&batch, policy)?;
            let (images, masks) = match augment {
                Some(cfg) => {
                    let mut im = Vec::with_capacity(batch_idx.len());
                    let mut ma = Vec::with_capacity(batch_idx.len());
                    for (k, &i) in batch_idx.iter().enumerate() {
                        let seed = sample_seed(config.seed, epoch, i);
                        let (ai, am) = augment_pair(
                            &sample_slice(&images, k),
                            &sample_slice(&masks, k),
                            cfg,
                            seed,
                            range,
                        );
                        im.push(ai);
                        ma.push(am);
                    }
                    (assemble(im), assemble(ma))
                }
                None => (images, masks),
            };

            let fwd = model.forward_train(&images)?;
            let prob = fwd.tape.value(fwd.prob);
            let loss = seg_loss(prob, &masks)?;
            check_finite(loss.total, epoch, bi)?;
            loss_sum += loss.total * batch_idx.len() as f64;
            for (k, v) in &loss.components {
                *component_sums.entry(k.clone()).or_insert(0.0) += v * batch_idx.len() as f64;
            }

            let seed_grad = seg_loss_grad(prob, &masks)?;
            let grads = fwd.tape.backward(fwd.prob, seed_grad);
            let param_grads = fwd.tape.param_grads(&grads);
            adam_step(&mut model.params, &param_grads, &mut adam, config.learning_rate)?;
        }

        let n = samples.len() as f64;
        let loss_total = loss_sum / n;
        let loss_components = component_sums
            .into_iter()
            .map(|(k, v)| (k, v / n))
            .collect();
        let val_loss = match val_manifest {
            Some(vm) => Some(seg_eval_loss(model, vm, policy, config.batch_size)?),
            None => None,
        };
        let watched = match monitor {
            Monitor::ValLoss => val_loss.unwrap_or(loss_total),
            Monitor::TrainLoss => loss_total,
        };
        monitored.push(watched);
        if best.as_ref().map_or(true, |(b, _)| watched < *b) {
            best = Some((watched, snapshot(&model.params, &model.state)));
        }
        records.push(EpochRecord {
            epoch,
            loss_total,
            loss_components,
            val_loss,
            metric_snapshot: None,
            wall_time_s: started.elapsed().as_secs_f64(),
        });
        if early_stop_check(&monitored, config.early_stop_patience, config.early_stop_min_delta)
        {
            break;
        }
    }

    if let Some((_, snap)) = &best {
        restore(snap, &mut model.params, &mut model.state);
    }
    Ok(records)
}

/// Train the classifier on categorical cross-entropy. Softmax runs
/// outside the tape; the backward pass is seeded with (p − onehot)/N.
pub fn train_classification(
    model: &mut ClsModel,
    train_manifest: &DatasetManifest,
    val_manifest: Option<&DatasetManifest>,
    policy: &NormalizationPolicy,
    augment: Option<&AugmentConfig>,
    config: &TrainConfig,
) -> Result<Vec<EpochRecord>> {
    config.validate()?;
    let samples = train_manifest.cls_samples()?;
    if samples.is_empty() {
        return Err(Error::Other("empty training manifest".into()));
    }
    let monitor = config.effective_monitor(val_manifest.is_some());
    let range = policy.mode.bounds();

    let mut adam = AdamState::new(&model.params);
    let mut records = Vec::new();
    let mut monitored = Vec::new();
    let mut best: Option<(f64, Snapshot)> = None;

    for epoch in 0..config.max_epochs {
        let started = Instant::now();
        let order = epoch_shuffle(samples.len(), config.seed, epoch);
        let mut loss_sum = 0.0;

        for (bi, batch_idx) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<_> = batch_idx.iter().map(|&i| samples[i].clone()).collect();
            let (images, labels) = load_cls_batch(&batch, policy)?;
            let images = match augment {
                Some(cfg) => {
                    let mut im = Vec::with_capacity(batch_idx.len());
                    for (k, &i) in batch_idx.iter().enumerate() {
                        let seed = sample_seed(config.seed, epoch, i);
                        im.push(augment_image(&sample_slice(&images, k), cfg, seed, range));
                    }
                    assemble(im)
                }
                None => images,
            };

            let dropout_seed = sample_seed(config.seed.wrapping_add(1), epoch, bi);
            let fwd = model.forward_train(&images, dropout_seed)?;
            let probs = softmax(fwd.tape.value(fwd.logits));
            let nb = batch_idx.len();
            let k = probs.dim().3;
            let mut batch_loss = 0.0;
            let mut seed_grad = Array4::zeros((nb, 1usize, 1usize, k));
            for (i, label) in labels.iter().enumerate() {
                let row: Vec<f64> = (0..k).map(|c| probs[(i, 0, 0, c)]).collect();
                batch_loss += categorical_cross_entropy(&row, label.index())?;
                for c in 0..k {
                    let onehot = f64::from(c == label.index());
                    seed_grad[(i, 0, 0, c)] = (probs[(i, 0, 0, c)] - onehot) / nb as f64;
                }
            }
            let batch_loss = batch_loss / nb as f64;
            check_finite(batch_loss, epoch, bi)?;
            loss_sum += batch_loss * nb as f64;

            let grads = fwd.tape.backward(fwd.logits, seed_grad);
            let param_grads = fwd.tape.param_grads(&grads);
            adam_step(&mut model.params, &param_grads, &mut adam, config.learning_rate)?;
        }

        let loss_total = loss_sum / samples.len() as f64;
        let mut loss_components = BTreeMap::new();
        loss_components.insert("categorical_ce".to_string(), loss_total);
        let val_loss = match val_manifest {
            Some(vm) => Some(cls_eval_loss(model, vm, policy, config.batch_size)?),
            None => None,
        };
        let watched = match monitor {
            Monitor::ValLoss => val_loss.unwrap_or(loss_total),
            Monitor::TrainLoss => loss_total,
        };
        monitored.push(watched);
        if best.as_ref().map_or(true, |(b, _)| watched < *b) {
            best = Some((watched, snapshot(&model.params, &model.state)));
        }
        records.push(EpochRecord {
            epoch,
            loss_total,
            loss_components,
            val_loss,
            metric_snapshot: None,
            wall_time_s: started.elapsed().as_secs_f64(),
        });
        if early_stop_check(&monitored, config.early_stop_patience, config.early_stop_min_delta)
        {
            break;
        }
    }

    if let Some((_, snap)) = &best {
        restore(snap, &mut model.params, &mut model.state);
    }
    Ok(records)
}

/// Classification accuracy of a model over a manifest split.
pub fn cls_accuracy(
    model: &ClsModel,
    manifest: &DatasetManifest,
    policy: &NormalizationPolicy,
    batch_size: usize,
) -> Result<f64> {
    let samples = manifest.cls_samples()?;
    if samples.is_empty() {
        return Err(Error::Other("no samples".into()));
    }
    let mut correct = 0usize;
    for chunk in samples.chunks(batch_size) {
        let (images, labels) = load_cls_batch(chunk, policy)?;
        let preds = model.predict_classes(&images)?;
        correct += preds
            .iter()
            .zip(&labels)
            .filter(|(p, t): &(&LesionClass, &LesionClass)| p == t)
            .count();
    }
    Ok(correct as f64 / samples.len() as f64)
}
