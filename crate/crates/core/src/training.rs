//! Cross-entropy training with step-decayed SGD, and a synthetic clip
//! generator whose labels depend only on the order of frame events.
//!
//! Each synthetic clip is a static noisy face-like image in which exactly one
//! of two small regions (A near an eye, B near the mouth) is lit per frame.
//! Every class lights each region in exactly half of the frames, so all
//! classes share the same multiset of frames and an order-blind model cannot
//! beat chance:
//!
//! | class | pattern (T = 4) |
//! |-------|-----------------|
//! | 0     | A A B B         |
//! | 1     | B B A A         |
//! | 2     | A B A B         |
//! | 3     | B A B A         |
//!
//! Reversing time maps class 0 to class 1 and class 2 to class 3.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::checkpoint::{read_tensors, write_tensors};
use crate::backbone::FeaturePyramid;
use crate::config::{ModelConfig, TrainSchedule};
use crate::error::{Error, Result};
use crate::metrics::ConfusionMatrix;
use crate::model::Msstnet;
use crate::numerics::{log_sum_exp, Param, Rng, Sgd, Tape, Tensor, Var};
use crate::params::Parameters;

/// Labelled clips stored contiguously as `(B, T, C, H, W)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipBatch {
    pub clips: Tensor,
    pub labels: Vec<usize>,
    pub ids: Vec<String>,
}

impl ClipBatch {
    /// Checks the layout and that every value lies in `[0, 1]`.
    pub fn new(clips: Tensor, labels: Vec<usize>, ids: Vec<String>) -> Result<Self> {
        if clips.rank() != 5 {
            return Err(Error::InvalidShape {
                op: "clip batch",
                shape: clips.shape().to_vec(),
                reason: "expected (B, T, C, H, W)".into(),
            });
        }
        for (what, len) in [("clips and labels", labels.len()), ("clips and ids", ids.len())] {
            if clips.shape()[0] != len {
                return Err(Error::LengthMismatch {
                    what,
                    left: clips.shape()[0],
                    right: len,
                });
            }
        }
        if let Some(v) = clips.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Config(format!("clip value {v} outside [0, 1]")));
        }
        Ok(Self { clips, labels, ids })
    }

    /// Stacks equally shaped clips `(T, C, H, W)`.
    pub fn from_clips(clips: Vec<Tensor>, labels: Vec<usize>, ids: Vec<String>) -> Result<Self> {
        let first = clips.first().ok_or(Error::EmptyInput("no clips"))?.shape().to_vec();
        let mut data = Vec::with_capacity(clips.len() * clips[0].numel());
        for clip in &clips {
            if clip.shape() != first.as_slice() {
                return Err(Error::ShapeMismatch {
                    op: "stack clips",
                    lhs: first,
                    rhs: clip.shape().to_vec(),
                });
            }
            data.extend_from_slice(clip.data());
        }
        let mut shape = vec![clips.len()];
        shape.extend_from_slice(&first);
        Self::new(Tensor::new(shape, data)?, labels, ids)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Shape of a single clip, `(T, C, H, W)`.
    pub fn clip_shape(&self) -> &[usize] {
        &self.clips.shape()[1..]
    }

    pub fn clip(&self, i: usize) -> Tensor {
        let len: usize = self.clip_shape().iter().product();
        Tensor::new(self.clip_shape().to_vec(), self.clips.data()[i * len..(i + 1) * len].to_vec())
            .expect("slice matches clip shape")
    }

    pub fn check_labels(&self, classes: usize) -> Result<()> {
        match self.labels.iter().find(|&&l| l >= classes) {
            Some(&label) => Err(Error::LabelOutOfRange { label, classes }),
            None => Ok(()),
        }
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        Self::from_clips(
            indices.iter().map(|&i| self.clip(i)).collect(),
            indices.iter().map(|&i| self.labels[i]).collect(),
            indices.iter().map(|&i| self.ids[i].clone()).collect(),
        )
    }
}

/// Training and held-out validation clips.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub train: ClipBatch,
    pub val: ClipBatch,
}

/// Brightness added to a lit region.
pub const REGION_GAIN: f64 = 0.35;
/// Standard deviation of per-frame sensor noise.
pub const FRAME_NOISE: f64 = 0.03;
/// Largest number of classes the generator can express.
pub const MAX_SYNTHETIC_CLASSES: usize = 4;

/// Which region is lit in every frame: `true` for A, `false` for B.
pub fn class_schedule(label: usize, frames: usize) -> Result<Vec<bool>> {
    if frames < 2 || !frames.is_multiple_of(2) {
        return Err(Error::Config(format!("synthetic clips need an even frame count, got {frames}")));
    }
    let half = frames / 2;
    let schedule = match label {
        0 => (0..frames).map(|t| t < half).collect(),
        1 => (0..frames).map(|t| t >= half).collect(),
        2 | 3 if frames < 4 => {
            return Err(Error::Config(format!("class {label} needs at least 4 frames")));
        }
        2 => (0..frames).map(|t| t % 2 == 0).collect(),
        3 => (0..frames).map(|t| t % 2 == 1).collect(),
        _ => {
            return Err(Error::LabelOutOfRange {
                label,
                classes: MAX_SYNTHETIC_CLASSES,
            })
        }
    };
    Ok(schedule)
}

/// Inverse of [`class_schedule`]; `None` for patterns no class produces.
pub fn label_for_schedule(schedule: &[bool]) -> Option<usize> {
    (0..MAX_SYNTHETIC_CLASSES).find(|&label| class_schedule(label, schedule.len()).is_ok_and(|s| s == schedule))
}

/// Pixel rectangles `(row0, row1, col0, col1)` of regions A and B.
pub fn region_boxes(height: usize, width: usize) -> [(usize, usize, usize, usize); 2] {
    let r = |f: f64| (f * height as f64).round() as usize;
    let c = |f: f64| (f * width as f64).round() as usize;
    [(r(0.25), r(0.42), c(0.2), c(0.45)), (r(0.65), r(0.8), c(0.35), c(0.65))]
}

/// Static face-like image `(C, H, W)` with values in `[0, 1]`.
pub fn face_base(rng: &mut Rng, channels: usize, height: usize, width: usize) -> Tensor {
    let background = 0.15 + 0.15 * rng.uniform();
    let skin: Vec<f64> = (0..channels)
        .map(|c| 0.5 - 0.05 * c as f64 + 0.1 * (rng.uniform() - 0.5))
        .collect();
    let (cy, cx) = (height as f64 / 2.0, width as f64 / 2.0);
    let (ry, rx) = (0.45 * height as f64, 0.36 * width as f64);
    let mut base = rng.normal_tensor(&[channels, height, width], 0.04);
    for c in 0..channels {
        for y in 0..height {
            for x in 0..width {
                let dy = (y as f64 + 0.5 - cy) / ry;
                let dx = (x as f64 + 0.5 - cx) / rx;
                let level = if dy * dy + dx * dx <= 1.0 { skin[c] } else { background };
                let v = &mut base.data_mut()[(c * height + y) * width + x];
                *v = (*v + level).clamp(0.0, 1.0);
            }
        }
    }
    base
}

/// Renders frames `(T, C, H, W)`: `clamp(base + gain·mask_t + noise_t)`.
pub fn render_clip(base: &Tensor, schedule: &[bool], frame_noise: &[Tensor]) -> Result<Tensor> {
    if base.rank() != 3 {
        return Err(Error::InvalidShape {
            op: "render_clip",
            shape: base.shape().to_vec(),
            reason: "expected (C, H, W)".into(),
        });
    }
    if schedule.len() != frame_noise.len() {
        return Err(Error::LengthMismatch {
            what: "schedule and frame noise",
            left: schedule.len(),
            right: frame_noise.len(),
        });
    }
    let (channels, height, width) = (base.shape()[0], base.shape()[1], base.shape()[2]);
    let boxes = region_boxes(height, width);
    let mut data = Vec::with_capacity(schedule.len() * base.numel());
    for (&lit_a, noise) in schedule.iter().zip(frame_noise) {
        if noise.shape() != base.shape() {
            return Err(Error::ShapeMismatch {
                op: "render_clip",
                lhs: base.shape().to_vec(),
                rhs: noise.shape().to_vec(),
            });
        }
        let (r0, r1, c0, c1) = boxes[if lit_a { 0 } else { 1 }];
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    let i = (c * height + y) * width + x;
                    let gain = if (r0..r1).contains(&y) && (c0..c1).contains(&x) { REGION_GAIN } else { 0.0 };
                    data.push((base.data()[i] + gain + noise.data()[i]).clamp(0.0, 1.0));
                }
            }
        }
    }
    Tensor::new(vec![schedule.len(), channels, height, width], data)
}

/// Generates `n_clips` balanced clips and splits each class 80/20 into
/// training and validation sets.
pub fn make_synthetic_dataset(n_clips: usize, config: &ModelConfig, seed: u64) -> Result<SyntheticDataset> {
    let classes = config.classes;
    if classes > MAX_SYNTHETIC_CLASSES {
        return Err(Error::Config(format!(
            "the synthetic generator supports at most {MAX_SYNTHETIC_CLASSES} classes, got {classes}"
        )));
    }
    if n_clips < 2 * classes {
        return Err(Error::Config(format!("need at least {} clips for {classes} classes, got {n_clips}", 2 * classes)));
    }
    let schedules = (0..classes)
        .map(|label| class_schedule(label, config.frames))
        .collect::<Result<Vec<_>>>()?;
    let (height, width) = config.backbone.input_size;
    let channels = config.backbone.in_channels;

    let mut rng = Rng::new(seed);
    let mut train = Vec::new();
    let mut val = Vec::new();
    for label in 0..classes {
        let count = (n_clips - label).div_ceil(classes);
        let train_count = ((count as f64) * 0.8).round().clamp(1.0, (count - 1) as f64) as usize;
        for k in 0..count {
            let index = k * classes + label;
            let mut clip_rng = rng.fork();
            let base = face_base(&mut clip_rng, channels, height, width);
            let noise: Vec<Tensor> = (0..config.frames)
                .map(|_| clip_rng.normal_tensor(&[channels, height, width], FRAME_NOISE))
                .collect();
            let clip = render_clip(&base, &schedules[label], &noise)?;
            let item = (clip, label, format!("clip{index:05}"));
            if k < train_count {
                train.push(item);
            } else {
                val.push(item);
            }
        }
    }
    let mut stack = |mut items: Vec<(Tensor, usize, String)>| {
        rng.shuffle(&mut items);
        let (clips, rest): (Vec<_>, Vec<_>) = items.into_iter().map(|(c, l, i)| (c, (l, i))).unzip();
        let (labels, ids) = rest.into_iter().unzip();
        ClipBatch::from_clips(clips, labels, ids)
    };
    Ok(SyntheticDataset {
        train: stack(train)?,
        val: stack(val)?,
    })
}

/// Copy of `batch` with every clip's frames independently permuted.
pub fn shuffle_frames(batch: &ClipBatch, seed: u64) -> Result<ClipBatch> {
    let mut rng = Rng::new(seed);
    let frames = batch.clip_shape()[0];
    let frame_len: usize = batch.clip_shape()[1..].iter().product();
    let clips = (0..batch.len())
        .map(|i| {
            let clip = batch.clip(i);
            let order = rng.permutation(frames);
            let data = order
                .iter()
                .flat_map(|&t| clip.data()[t * frame_len..(t + 1) * frame_len].iter().copied())
                .collect();
            Tensor::new(clip.shape().to_vec(), data)
        })
        .collect::<Result<Vec<_>>>()?;
    ClipBatch::from_clips(clips, batch.labels.clone(), batch.ids.clone())
}

// -------------------------------------------------------------------- dataset files

const MANIFEST: &str = "manifest.csv";

/// Writes one split: `manifest.csv` plus one tensor file per clip.
pub fn write_split(dir: &Path, batch: &ClipBatch) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::from("clip_id,label,file\n");
    for i in 0..batch.len() {
        let file = format!("{}.bin", batch.ids[i]);
        let clip = batch.clip(i);
        write_tensors(&dir.join(&file), [("clip", &clip)])?;
        writeln!(manifest, "{},{},{}", batch.ids[i], batch.labels[i], file).unwrap();
    }
    let path = dir.join(MANIFEST);
    std::fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
}

pub fn read_split(dir: &Path) -> Result<ClipBatch> {
    let path = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("clip_id,label,file") {
        return Err(Error::format(&path, "missing manifest header"));
    }
    let (mut clips, mut labels, mut ids) = (Vec::new(), Vec::new(), Vec::new());
    for line in lines.filter(|l| !l.trim().is_empty()) {
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let [id, label, file] = fields[..] else {
            return Err(Error::format(&path, format!("expected 3 fields in {line:?}")));
        };
        let label = label
            .parse()
            .map_err(|_| Error::format(&path, format!("bad label in {line:?}")))?;
        let clip_path = dir.join(file);
        let mut tensors = read_tensors(&clip_path)?;
        if tensors.len() != 1 {
            return Err(Error::format(&clip_path, "expected exactly one tensor"));
        }
        clips.push(tensors.remove(0).1);
        labels.push(label);
        ids.push(id.to_string());
    }
    if clips.is_empty() {
        return Err(Error::format(&path, "manifest lists no clips"));
    }
    ClipBatch::from_clips(clips, labels, ids)
}

/// Writes `train/` and `val/` under `dir`.
pub fn write_dataset(dir: &Path, dataset: &SyntheticDataset) -> Result<()> {
    write_split(&dir.join("train"), &dataset.train)?;
    write_split(&dir.join("val"), &dataset.val)
}

pub fn read_dataset(dir: &Path) -> Result<SyntheticDataset> {
    Ok(SyntheticDataset {
        train: read_split(&dir.join("train"))?,
        val: read_split(&dir.join("val"))?,
    })
}

// -------------------------------------------------------------------- loss and evaluation

/// `-log softmax(logits)[label]`, evaluated through log-sum-exp.
pub fn cross_entropy(logits: &Tensor, label: usize) -> Result<f64> {
    let classes = logits.numel();
    if label >= classes {
        return Err(Error::LabelOutOfRange { label, classes });
    }
    Ok(log_sum_exp(logits.data()) - logits.data()[label])
}

/// Index of the largest logit; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    values
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

/// Predicted class of every clip, computed in parallel.
pub fn predict_labels(model: &Msstnet, batch: &ClipBatch) -> Result<Vec<usize>> {
    (0..batch.len())
        .into_par_iter()
        .map(|i| Ok(argmax(model.predict(&batch.clip(i), false)?.0.data())))
        .collect()
}

pub fn evaluate(model: &Msstnet, batch: &ClipBatch) -> Result<ConfusionMatrix> {
    batch.check_labels(model.config.classes)?;
    ConfusionMatrix::compute(&predict_labels(model, batch)?, &batch.labels, model.config.classes)
}

// -------------------------------------------------------------------- training

/// Loss, prediction and parameter gradients for one clip.
#[derive(Clone, Debug)]
pub struct ClipGradient {
    pub loss: f64,
    pub pred: usize,
    /// In [`Parameters::visit`] order; `None` where the loss does not depend
    /// on the parameter.
    pub grads: Vec<Option<Tensor>>,
}

fn gradient_with(
    params: &[Param],
    label: usize,
    forward: impl FnOnce(&mut Tape) -> Result<Var>,
) -> Result<ClipGradient> {
    let mut tape = Tape::new();
    let logits = forward(&mut tape)?;
    let pred = argmax(tape.value(logits).data());
    let loss = tape.cross_entropy(logits, label)?;
    let loss_value = tape.value(loss).item();
    tape.backward(loss)?;
    Ok(ClipGradient {
        loss: loss_value,
        pred,
        grads: params.iter().map(|p| tape.param_grad(p).cloned()).collect(),
    })
}

/// Gradients of the cross-entropy of one clip `(T, C, H, W)`.
pub fn clip_gradient(model: &Msstnet, params: &[Param], clip: &Tensor, label: usize) -> Result<ClipGradient> {
    gradient_with(params, label, |tape| {
        let x = tape.constant(clip.clone());
        Ok(model.forward(tape, x, false)?.0)
    })
}

/// Like [`clip_gradient`], starting from a precomputed feature pyramid.
pub fn pyramid_gradient(
    model: &Msstnet,
    params: &[Param],
    pyramid: &FeaturePyramid,
    label: usize,
) -> Result<ClipGradient> {
    gradient_with(params, label, |tape| Ok(model.forward_pyramid(tape, pyramid, false)?.0))
}

/// Standardizes the backbone's tapped features over `batch`; see
/// [`Backbone::calibrate`](crate::backbone::Backbone::calibrate).
pub fn calibrate_backbone(model: &mut Msstnet, batch: &ClipBatch) -> Result<()> {
    let clips: Vec<Tensor> = (0..batch.len()).map(|i| batch.clip(i)).collect();
    model.backbone.calibrate(&clips)
}

/// Feature pyramids of every clip, computed in parallel.
pub fn extract_pyramids(model: &Msstnet, batch: &ClipBatch) -> Result<Vec<FeaturePyramid>> {
    (0..batch.len())
        .into_par_iter()
        .map(|i| model.backbone.extract_pyramid(&batch.clip(i)))
        .collect()
}

/// Predicted classes from precomputed feature pyramids.
pub fn predict_pyramids(model: &Msstnet, pyramids: &[FeaturePyramid]) -> Result<Vec<usize>> {
    pyramids
        .par_iter()
        .map(|pyr| {
            let mut tape = Tape::no_grad();
            let (logits, _) = model.forward_pyramid(&mut tape, pyr, false)?;
            Ok(argmax(tape.value(logits).data()))
        })
        .collect()
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    /// Percent of training clips classified correctly during the epoch.
    pub train_acc: f64,
    pub val_war: f64,
    pub val_uar: f64,
}

pub fn log_csv(log: &[EpochLog]) -> String {
    let mut out = String::from("epoch,lr,train_loss,train_acc,val_war,val_uar\n");
    for e in log {
        writeln!(
            out,
            "{},{},{:.6},{:.4},{:.4},{:.4}",
            e.epoch, e.lr, e.train_loss, e.train_acc, e.val_war, e.val_uar
        )
        .unwrap();
    }
    out
}

pub fn write_log_csv(path: &Path, log: &[EpochLog]) -> Result<()> {
    std::fs::write(path, log_csv(log)).map_err(|e| Error::io(path, e))
}

const BACKBONE_PREFIX: &str = "model.backbone.";

/// Result of a training run. The trained model itself stays in the caller's
/// `Msstnet`.
#[derive(Clone, Debug)]
pub struct TrainReport {
    pub log: Vec<EpochLog>,
    /// Zero-based epoch with the highest validation WAR (latest on ties).
    pub best_epoch: usize,
    pub best_val_war: f64,
    /// Parameters at the end of `best_epoch`.
    pub best: Msstnet,
}

/// Mini-batch SGD on cross-entropy.
///
/// Clips are reshuffled every epoch from `seed`. Per-clip gradients may be
/// computed concurrently but are summed in batch order, so results do not
/// depend on the number of worker threads. With `freeze_backbone` the
/// backbone weights are left untouched and every clip's feature pyramid is
/// computed once up front. `on_epoch` sees each log row as
/// soon as it is complete.
pub fn train(
    model: &mut Msstnet,
    train_set: &ClipBatch,
    val_set: &ClipBatch,
    schedule: &TrainSchedule,
    seed: u64,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainReport> {
    schedule.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::EmptyInput("training and validation sets must be non-empty"));
    }
    train_set.check_labels(model.config.classes)?;
    val_set.check_labels(model.config.classes)?;

    let freeze = schedule.freeze_backbone;
    let (train_pyramids, val_pyramids) = if freeze {
        (Some(extract_pyramids(model, train_set)?), Some(extract_pyramids(model, val_set)?))
    } else {
        (None, None)
    };

    let mut rng = Rng::new(seed);
    let mut sgd = Sgd::new(schedule.momentum, schedule.weight_decay);
    let mut log = Vec::with_capacity(schedule.epochs);
    let mut best: Option<(usize, f64, Msstnet)> = None;

    for epoch in 0..schedule.epochs {
        let lr = schedule.lr_at(epoch)?;
        let order = rng.permutation(train_set.len());
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for batch in order.chunks(schedule.batch_size) {
            let params: Vec<Param> = model.named().into_iter().map(|(_, p)| p).collect();
            let frozen: &Msstnet = model;
            let results = batch
                .par_iter()
                .map(|&i| match &train_pyramids {
                    Some(pyr) => pyramid_gradient(frozen, &params, &pyr[i], train_set.labels[i]),
                    None => clip_gradient(frozen, &params, &train_set.clip(i), train_set.labels[i]),
                })
                .collect::<Result<Vec<_>>>()?;

            let mut summed: Vec<Option<Tensor>> = vec![None; params.len()];
            for (&i, result) in batch.iter().zip(results) {
                if !result.loss.is_finite() {
                    return Err(Error::Diverged {
                        epoch,
                        loss: result.loss,
                    });
                }
                loss_sum += result.loss;
                correct += usize::from(result.pred == train_set.labels[i]);
                for (acc, g) in summed.iter_mut().zip(result.grads) {
                    match (acc.as_mut(), g) {
                        (Some(a), Some(g)) => a.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b),
                        (None, Some(g)) => *acc = Some(g),
                        (_, None) => {}
                    }
                }
            }
            let mut factor = 1.0 / batch.len() as f64;
            if schedule.max_grad_norm > 0.0 {
                let mut index = 0;
                let mut sq = 0.0;
                model.visit("model", &mut |name, _| {
                    if !(freeze && name.starts_with(BACKBONE_PREFIX)) {
                        if let Some(g) = &summed[index] {
                            sq += g.data().iter().map(|v| v * v).sum::<f64>();
                        }
                    }
                    index += 1;
                });
                let norm = factor * sq.sqrt();
                if norm > schedule.max_grad_norm {
                    factor *= schedule.max_grad_norm / norm;
                }
            }
            let mut index = 0;
            let mut failure = None;
            model.visit_mut("model", &mut |name, p| {
                if !(freeze && name.starts_with(BACKBONE_PREFIX)) {
                    let grad = match summed[index].take() {
                        Some(g) => g.map(|v| v * factor),
                        None => Tensor::zeros(p.value().shape()),
                    };
                    if let Err(e) = sgd.update(index, p, &grad, lr) {
                        failure.get_or_insert(e);
                    }
                }
                index += 1;
            });
            if let Some(e) = failure {
                return Err(e);
            }
        }

        let cm = match &val_pyramids {
            Some(pyr) => ConfusionMatrix::compute(&predict_pyramids(model, pyr)?, &val_set.labels, model.config.classes)?,
            None => evaluate(model, val_set)?,
        };
        let entry = EpochLog {
            epoch,
            lr,
            train_loss: loss_sum / train_set.len() as f64,
            train_acc: 100.0 * correct as f64 / train_set.len() as f64,
            val_war: cm.war()?,
            val_uar: cm.uar()?,
        };
        on_epoch(&entry);
        if best.as_ref().is_none_or(|b| entry.val_war >= b.1) {
            best = Some((epoch, entry.val_war, model.clone()));
        }
        log.push(entry);
    }
    let (best_epoch, best_val_war, best) = best.expect("at least one epoch");
    Ok(TrainReport {
        log,
        best_epoch,
        best_val_war,
        best,
    })
}
