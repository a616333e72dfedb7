//! Balanced mini-batch SGD with momentum and time-based decay, validation
//! AUC model selection and early stopping.
//!
//! Every random choice is drawn from a substream keyed by (epoch, batch,
//! slot), so batches assembled ahead of the optimizer by the prefetch thread
//! are identical to sequentially assembled ones.

use std::sync::mpsc::sync_channel;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::auc_from_scores;
use crate::nnet::{self, glorot_head, Mode, ModelKind, NetworkSpec, Parameters, Tensor};
use crate::patches::{augment, AugmentConfig, PatchPair};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub initial_lr: f64,
    pub momentum: f64,
    pub decay: f64,
    pub batch_size: usize,
    pub patience_epochs: usize,
    pub max_epochs: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn for_kind(kind: ModelKind) -> Self {
        let initial_lr = match kind {
            ModelKind::Baseline => 1e-2,
            ModelKind::Symmetry => 1e-3,
        };
        TrainConfig {
            initial_lr,
            momentum: 0.9,
            decay: initial_lr / 200.0,
            batch_size: 64,
            patience_epochs: 20,
            max_epochs: 200,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.initial_lr > 0.0 && self.initial_lr.is_finite()) {
            return Err(Error::config("initial_lr", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum", "must lie in [0, 1)"));
        }
        if !(self.decay >= 0.0 && self.decay.is_finite()) {
            return Err(Error::config("decay", "must be non-negative"));
        }
        if self.batch_size < 2 || self.batch_size % 2 != 0 {
            return Err(Error::config("batch_size", "must be even and at least 2"));
        }
        if self.patience_epochs == 0 {
            return Err(Error::config("patience_epochs", "must be positive"));
        }
        if self.max_epochs == 0 {
            return Err(Error::config("max_epochs", "must be positive"));
        }
        Ok(())
    }

    /// Learning rate for update number `t` (0-based).
    pub fn lr_at(&self, t: u64) -> f64 {
        self.initial_lr / (1.0 + self.decay * t as f64)
    }
}

/// One balanced batch: indices into the positive and negative pools.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochSchedule {
    pub batches: Vec<Batch>,
}

/// Every positive twice plus an equal number of negatives drawn without
/// replacement, shuffled into half-positive batches. A final partial batch
/// is dropped.
pub fn make_epoch_schedule<R: Rng + ?Sized>(
    n_positives: usize,
    n_negatives: usize,
    batch_size: usize,
    rng: &mut R,
) -> Result<EpochSchedule> {
    let half = batch_size / 2;
    if half == 0 || batch_size % 2 != 0 {
        return Err(Error::config("batch_size", "must be even and at least 2"));
    }
    let slots = 2 * n_positives;
    if slots < half {
        return Err(Error::InsufficientData(format!(
            "{n_positives} positives cannot fill half of a {batch_size}-sample batch twice over"
        )));
    }
    if n_negatives < slots {
        return Err(Error::InsufficientData(format!(
            "need at least {slots} negatives for {n_positives} positives, have {n_negatives}"
        )));
    }
    let mut pos: Vec<usize> = (0..n_positives).chain(0..n_positives).collect();
    pos.shuffle(rng);
    let neg: Vec<usize> = rand::seq::index::sample(rng, n_negatives, slots).into_vec();
    let batches = pos
        .chunks_exact(half)
        .zip(neg.chunks_exact(half))
        .map(|(p, n)| Batch {
            positives: p.to_vec(),
            negatives: n.to_vec(),
        })
        .collect();
    Ok(EpochSchedule { batches })
}

#[derive(Debug, Clone)]
pub struct SgdState {
    pub velocity: Parameters<f32>,
    /// Updates applied so far.
    pub step: u64,
}

impl SgdState {
    pub fn new(params: &Parameters<f32>) -> Self {
        SgdState {
            velocity: params.zeros_like(),
            step: 0,
        }
    }
}

/// `v ← μv − lr(t)·g`, `p ← p + v`. Returns the learning rate used.
pub fn sgd_step(
    params: &mut Parameters<f32>,
    grads: &Parameters<f32>,
    state: &mut SgdState,
    cfg: &TrainConfig,
) -> Result<f64> {
    let named = grads.named();
    if let Some((name, _)) = named.iter().find(|(_, g)| !g.all_finite()) {
        return Err(Error::NonFinite {
            layer: format!("gradient of {name}"),
        });
    }
    let lr = cfg.lr_at(state.step);
    let (lr32, mu) = (lr as f32, cfg.momentum as f32);
    let grads: Vec<&Tensor<f32>> = named.into_iter().map(|(_, t)| t).collect();
    let ps = params.tensors_mut();
    let vs = state.velocity.tensors_mut();
    if ps.len() != grads.len() || vs.len() != grads.len() {
        return Err(Error::Shape("gradient / parameter layout mismatch".into()));
    }
    for ((p, v), g) in ps.into_iter().zip(vs).zip(grads) {
        if p.shape() != g.shape() || v.shape() != g.shape() {
            return Err(Error::Shape(format!(
                "gradient {:?} does not match parameter {:?}",
                g.shape(),
                p.shape()
            )));
        }
        for ((pi, vi), &gi) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
            *vi = mu * *vi - lr32 * gi;
            *pi += *vi;
        }
    }
    state.step += 1;
    Ok(lr)
}

/// Both streams start as copies of the baseline extractor; the head is
/// freshly initialized for the wider concatenated input.
pub fn transfer_from_baseline<R: Rng + ?Sized>(
    baseline: &Parameters<f32>,
    symmetry_spec: &NetworkSpec,
    rng: &mut R,
) -> Result<Parameters<f32>> {
    if symmetry_spec.kind != ModelKind::Symmetry {
        return Err(Error::config("kind", "transfer target must be a symmetry spec"));
    }
    symmetry_spec.validate()?;
    baseline.check(&symmetry_spec.with_kind(ModelKind::Baseline))?;
    let stream = baseline.streams[0].clone();
    Ok(Parameters {
        streams: vec![stream.clone(), stream],
        head: glorot_head(symmetry_spec, rng),
    })
}

/// Gain applied after centring; phantom tissue texture varies by about 0.05
/// within a patch, so centred inputs land near unit scale.
pub const INPUT_GAIN: f32 = 20.0;

/// Stacks patch pairs into per-stream `[n, 1, S, S]` tensors. Both members
/// are centred on the primary patch's mean, so the pair keeps its relative
/// intensities; a missing contra-lateral patch stays all zero.
pub fn pairs_to_inputs(kind: ModelKind, pairs: &[&PatchPair]) -> Result<Vec<Tensor<f32>>> {
    let size = pairs.first().map(|p| p.size()).unwrap_or(0);
    let mut primary = Vec::with_capacity(pairs.len() * size * size);
    let mut contra = Vec::new();
    for p in pairs {
        if p.size() != size || p.contralateral.height() != size {
            return Err(Error::Shape("patches in one batch differ in size".into()));
        }
        let d = p.primary.data();
        let mean = (d.iter().map(|&v| v as f64).sum::<f64>() / d.len().max(1) as f64) as f32;
        primary.extend(d.iter().map(|&v| (v - mean) * INPUT_GAIN));
        if kind == ModelKind::Symmetry {
            if p.has_contralateral {
                contra.extend(p.contralateral.data().iter().map(|&v| (v - mean) * INPUT_GAIN));
            } else {
                contra.extend(std::iter::repeat(0.0).take(size * size));
            }
        }
    }
    let shape = [pairs.len(), 1, size, size];
    let mut out = vec![Tensor::new(&shape, primary)?];
    if kind == ModelKind::Symmetry {
        out.push(Tensor::new(&shape, contra)?);
    }
    Ok(out)
}

/// Positive-class probability for every pair, in chunks of `batch_size`.
pub fn score_pairs(
    spec: &NetworkSpec,
    params: &Parameters<f32>,
    pairs: &[PatchPair],
    batch_size: usize,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(batch_size.max(1)) {
        let refs: Vec<&PatchPair> = chunk.iter().collect();
        let inputs = pairs_to_inputs(spec.kind, &refs)?;
        let inputs: Vec<&Tensor<f32>> = inputs.iter().collect();
        let probs = nnet::predict(spec, params, &inputs)?;
        out.extend(probs.data().chunks(2).map(|r| r[1] as f64));
    }
    Ok(out)
}

pub fn validation_auc(
    spec: &NetworkSpec,
    params: &Parameters<f32>,
    pairs: &[PatchPair],
    batch_size: usize,
) -> Result<f64> {
    let scores = score_pairs(spec, params, pairs, batch_size)?;
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for (s, p) in scores.into_iter().zip(pairs) {
        if p.label.is_positive() {
            pos.push(s)
        } else {
            neg.push(s)
        }
    }
    auc_from_scores(&pos, &neg)
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr_last: f64,
    pub val_auc: f64,
    pub best_so_far: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best_params: Parameters<f32>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub best_val_auc: f64,
    pub history: Vec<EpochRecord>,
}

/// Assembled, augmented batch ready for the optimizer.
struct ReadyBatch {
    inputs: Vec<Tensor<f32>>,
    labels: Vec<usize>,
}

fn assemble(
    kind: ModelKind,
    positives: &[&PatchPair],
    negatives: &[&PatchPair],
    batch: &Batch,
    aug: &AugmentConfig,
    epoch: usize,
    index: usize,
) -> Result<ReadyBatch> {
    let members: Vec<&PatchPair> = batch
        .positives
        .iter()
        .map(|&i| positives[i])
        .chain(batch.negatives.iter().map(|&i| negatives[i]))
        .collect();
    let augmented: Vec<PatchPair> = members
        .par_iter()
        .enumerate()
        .map(|(slot, p)| {
            let mut r = rng::stream(aug.seed, &[rng::tag("augment"), epoch as u64, index as u64, slot as u64]);
            augment(p, aug, &mut r)
        })
        .collect();
    let refs: Vec<&PatchPair> = augmented.iter().collect();
    Ok(ReadyBatch {
        inputs: pairs_to_inputs(kind, &refs)?,
        labels: refs.iter().map(|p| p.label.class_index()).collect(),
    })
}

/// Trains from `init`, keeping the parameters with the best validation AUC.
/// `on_epoch` sees each history record as soon as it is produced.
pub fn train(
    spec: &NetworkSpec,
    init: Parameters<f32>,
    train_pairs: &[PatchPair],
    val_pairs: &[PatchPair],
    cfg: &TrainConfig,
    aug: &AugmentConfig,
    on_epoch: &mut dyn FnMut(&EpochRecord) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    aug.validate()?;
    spec.validate()?;
    init.check(spec)?;
    let val_pos = val_pairs.iter().filter(|p| p.label.is_positive()).count();
    if val_pos == 0 || val_pos == val_pairs.len() {
        return Err(Error::InsufficientData(
            "validation patches must contain both classes (AUC is undefined otherwise)".into(),
        ));
    }
    if let Some(p) = train_pairs.iter().chain(val_pairs).find(|p| p.size() != spec.input_size_px) {
        return Err(Error::Shape(format!(
            "patch {} is {} px, the network expects {} px",
            p.provenance.image_id,
            p.size(),
            spec.input_size_px
        )));
    }
    let positives: Vec<&PatchPair> = train_pairs.iter().filter(|p| p.label.is_positive()).collect();
    let negatives: Vec<&PatchPair> = train_pairs.iter().filter(|p| !p.label.is_positive()).collect();

    let mut params = init;
    let mut state = SgdState::new(&params);
    let mut best = (params.clone(), 0usize, f64::NEG_INFINITY);
    let mut history = Vec::new();
    let mut since_best = 0;

    for epoch in 1..=cfg.max_epochs {
        let mut sched_rng = rng::stream(cfg.seed, &[rng::tag("schedule"), epoch as u64]);
        let schedule = make_epoch_schedule(positives.len(), negatives.len(), cfg.batch_size, &mut sched_rng)?;
        let mut loss_sum = 0.0;
        let mut lr_last = cfg.lr_at(state.step);

        // Producer assembles batches while the optimizer consumes them in
        // schedule order; capacity 2 bounds memory.
        let (tx, rx) = sync_channel::<Result<ReadyBatch>>(2);
        let result: Result<()> = std::thread::scope(|scope| {
            let schedule = &schedule;
            let (positives, negatives) = (&positives, &negatives);
            scope.spawn(move || {
                for (i, b) in schedule.batches.iter().enumerate() {
                    let ready = assemble(spec.kind, positives, negatives, b, aug, epoch, i);
                    if tx.send(ready).is_err() {
                        break;
                    }
                }
            });
            for (i, ready) in rx.iter().enumerate() {
                let ready = ready?;
                let inputs: Vec<&Tensor<f32>> = ready.inputs.iter().collect();
                let mut drop_rng = rng::stream(cfg.seed, &[rng::tag("dropout"), epoch as u64, i as u64]);
                let pass = nnet::forward(spec, &params, &inputs, Mode::Train(&mut drop_rng))?;
                let (loss, grads) = nnet::backward(spec, &params, &pass, &ready.labels)?;
                loss_sum += loss as f64;
                lr_last = sgd_step(&mut params, &grads, &mut state, cfg)?;
            }
            Ok(())
        });
        result?;

        let auc = validation_auc(spec, &params, val_pairs, cfg.batch_size)?;
        if auc > best.2 {
            best = (params.clone(), epoch, auc);
            since_best = 0;
        } else {
            since_best += 1;
        }
        let record = EpochRecord {
            epoch,
            mean_loss: loss_sum / schedule.batches.len().max(1) as f64,
            lr_last,
            val_auc: auc,
            best_so_far: best.2,
        };
        on_epoch(&record)?;
        history.push(record);
        if since_best >= cfg.patience_epochs {
            break;
        }
    }
    Ok(TrainOutcome {
        best_params: best.0,
        best_epoch: best.1,
        best_val_auc: best.2,
        history,
    })
}
