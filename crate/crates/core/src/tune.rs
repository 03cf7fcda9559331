//! Soft-tuning: curriculum background masking, soft cross-entropy against
//! majority/minority votes, and test-time augmentation for evaluation.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::distill::epoch_order;
use crate::error::{Error, Result};
use crate::imgcore::{
    apply_record, dilate, resize, rot90, vflip, AugmentPolicy, BinaryMask, ImageCrop, IMAGE_FILL,
};
use crate::losses::{soft_ce_logits, softmax, softmax_ce, SoftLabel};
use crate::seed::derive_seed;
use crate::tinynn::{
    encoder_backward, encoder_forward, fmap_from_image, head_backward, head_forward, Adam,
    AdamConfig, Head, Params, StepDecay,
};

/// Linear schedule of foreground dilations across tuning epochs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CurriculumSchedule {
    pub start_dilations: usize,
    pub end_dilations: usize,
    pub total_epochs: usize,
}

impl CurriculumSchedule {
    pub fn new(start_dilations: usize, end_dilations: usize, total_epochs: usize) -> Result<Self> {
        if start_dilations < end_dilations || total_epochs == 0 {
            return Err(Error::InvalidArgument(format!(
                "curriculum needs start >= end and at least one epoch, got {start_dilations} -> {end_dilations} over {total_epochs}"
            )));
        }
        Ok(Self {
            start_dilations,
            end_dilations,
            total_epochs,
        })
    }

    /// `round(start + (end - start) * epoch / (total - 1))`; a one-epoch schedule gives `end`.
    pub fn dilations_at(&self, epoch: usize) -> Result<usize> {
        if epoch >= self.total_epochs {
            return Err(Error::InvalidArgument(format!(
                "epoch {epoch} outside 0..{}",
                self.total_epochs
            )));
        }
        if self.total_epochs == 1 {
            return Ok(self.end_dilations);
        }
        let (s, e) = (self.start_dilations as f64, self.end_dilations as f64);
        Ok((s + (e - s) * epoch as f64 / (self.total_epochs - 1) as f64).round() as usize)
    }
}

/// Pixels per curriculum dilation: one step is one pixel of a 35-pixel frame,
/// so that the full schedule spans the frame at any crop size.
pub fn curriculum_step(height: usize, width: usize) -> usize {
    ((height.max(width) as f64 / 35.0).round() as usize).max(1)
}

/// Keeps `img` on `dilate(mask, n)` (in frame-scaled steps) and whitens the rest.
/// An empty mask leaves the image unmasked; the returned flag reports that case.
pub fn apply_curriculum_mask(
    img: &ImageCrop,
    mask: &BinaryMask,
    n: usize,
) -> Result<(ImageCrop, bool)> {
    let (h, w) = (img.height(), img.width());
    if mask.height() != h || mask.width() != w {
        return Err(Error::Shape(format!(
            "{h}x{w} crop with {}x{} mask",
            mask.height(),
            mask.width()
        )));
    }
    if mask.is_empty() {
        return Ok((img.clone(), true));
    }
    let fg = curriculum_foreground(mask, n);
    let c = img.channels();
    let mut data = img.data().to_vec();
    for (i, &keep) in fg.bits().iter().enumerate() {
        if !keep {
            data[i * c..(i + 1) * c].fill(IMAGE_FILL);
        }
    }
    Ok((ImageCrop::new(h, w, c, data)?, false))
}

/// Visible region after `n` curriculum dilations.
pub fn curriculum_foreground(mask: &BinaryMask, n: usize) -> BinaryMask {
    dilate(mask, n * curriculum_step(mask.height(), mask.width()))
}

/// One test-time view: an optional vertical flip followed by `rot` quarter turns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct View {
    pub flip: bool,
    pub rot: usize,
}

impl View {
    pub fn apply(&self, img: &ImageCrop) -> ImageCrop {
        let img = if self.flip { vflip(img) } else { img.clone() };
        rot90(&img, self.rot % 4)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TTAPolicy {
    views: Vec<View>,
}

impl TTAPolicy {
    pub fn new(views: Vec<View>) -> Result<Self> {
        if !views.contains(&View {
            flip: false,
            rot: 0,
        }) {
            return Err(Error::InvalidArgument(
                "test-time views must include the identity".into(),
            ));
        }
        if views.iter().any(|v| v.rot > 3) {
            return Err(Error::InvalidArgument(
                "view rotations are quarter turns 0..=3".into(),
            ));
        }
        Ok(Self { views })
    }

    pub fn identity() -> Self {
        Self {
            views: vec![View {
                flip: false,
                rot: 0,
            }],
        }
    }

    /// All eight flips and quarter turns.
    pub fn d4() -> Self {
        Self {
            views: [false, true]
                .into_iter()
                .flat_map(|flip| (0..4).map(move |rot| View { flip, rot }))
                .collect(),
        }
    }

    /// `"identity"`, `"flip"`, `"rot4"` or `"d4"`.
    pub fn by_name(name: &str) -> Option<Self> {
        let id = View {
            flip: false,
            rot: 0,
        };
        match name {
            "identity" => Some(Self::identity()),
            "flip" => Some(Self {
                views: vec![id, View { flip: true, rot: 0 }],
            }),
            "rot4" => Some(Self {
                views: (0..4).map(|rot| View { flip: false, rot }).collect(),
            }),
            "d4" => Some(Self::d4()),
            _ => None,
        }
    }

    pub fn views(&self) -> &[View] {
        &self.views
    }
}

/// Class probabilities for a prepared network input.
pub fn predict_probs(params: &Params<f32>, input: &ImageCrop) -> Result<Vec<f64>> {
    let enc = encoder_forward(params, &fmap_from_image(input))?;
    let (_, logits) = head_forward(params, Head::Class, &enc)?;
    Ok(softmax(
        &logits.iter().map(|&z| z as f64).collect::<Vec<_>>(),
    ))
}

/// Mean softmax over the policy's views of `input`.
pub fn tta_predict(
    params: &Params<f32>,
    input: &ImageCrop,
    policy: &TTAPolicy,
) -> Result<Vec<f64>> {
    let mut sum: Vec<f64> = Vec::new();
    for v in policy.views() {
        let p = predict_probs(params, &v.apply(input))?;
        if sum.is_empty() {
            sum = p;
        } else {
            sum.iter_mut().zip(&p).for_each(|(s, x)| *s += x);
        }
    }
    let n = policy.views().len() as f64;
    Ok(sum.into_iter().map(|s| s / n).collect())
}

fn argmax(p: &[f64]) -> usize {
    p.iter()
        .enumerate()
        .fold(
            (0, f64::NEG_INFINITY),
            |b, (i, &v)| if v > b.1 { (i, v) } else { b },
        )
        .0
}

/// One tuning or test crop: the aligned crop at native size, its teacher mask and label.
#[derive(Debug, Clone, PartialEq)]
pub struct TuneSample {
    pub id: String,
    pub image: ImageCrop,
    pub mask: BinaryMask,
    pub label: SoftLabel,
}

/// Masks with `n` curriculum dilations, then resizes to the network input.
pub fn prepare_input(s: &TuneSample, n: usize, size: usize) -> Result<ImageCrop> {
    let (masked, empty) = apply_curriculum_mask(&s.image, &s.mask, n)?;
    if empty {
        log::warn!(
            "crop {}: empty teacher mask, background left unmasked",
            s.id
        );
    }
    Ok(resize(&masked, size, size))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// λ-weighted majority/minority cross-entropy.
    Soft,
    /// Plain cross-entropy on the majority class.
    Vanilla,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TuneConfig {
    pub lambda: f64,
    pub loss: LossKind,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub milestones: Vec<usize>,
    pub lr_decay: f64,
    /// Augmentation preset for training views.
    pub policy: String,
    pub start_dilations: usize,
    pub end_dilations: usize,
    /// Test-time view set name.
    pub tta: String,
    pub seed: u64,
}

impl Default for TuneConfig {
    fn default() -> Self {
        Self {
            lambda: 0.85,
            loss: LossKind::Soft,
            batch_size: 8,
            epochs: 60,
            lr: 3e-3,
            milestones: vec![50],
            lr_decay: 0.1,
            policy: "scian-mild".into(),
            start_dilations: 15,
            end_dilations: 0,
            tta: "flip".into(),
            seed: 0,
        }
    }
}

impl TuneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad(format!("lambda must be in [0, 1], got {}", self.lambda));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("tune batch_size and epochs must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.lr_decay > 0.0 && self.lr_decay <= 1.0)
        {
            return bad(format!(
                "tune lr {} / lr_decay {} out of range",
                self.lr, self.lr_decay
            ));
        }
        self.schedule().map_err(|e| Error::Config(e.to_string()))?;
        self.augment_policy()?;
        self.tta_policy()?;
        Ok(())
    }

    pub fn schedule(&self) -> Result<CurriculumSchedule> {
        CurriculumSchedule::new(self.start_dilations, self.end_dilations, self.epochs)
    }

    pub fn augment_policy(&self) -> Result<AugmentPolicy> {
        AugmentPolicy::by_name(&self.policy)
            .ok_or_else(|| Error::Config(format!("unknown augmentation policy {:?}", self.policy)))
    }

    pub fn tta_policy(&self) -> Result<TTAPolicy> {
        TTAPolicy::by_name(&self.tta)
            .ok_or_else(|| Error::Config(format!("unknown test-time view set {:?}", self.tta)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub dilations: usize,
    pub lr: f64,
    pub loss: f64,
    pub train_accuracy: f64,
    pub val_accuracy: Option<f64>,
}

pub fn write_epoch_log(path: &Path, rows: &[EpochRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    for r in rows {
        w.serialize(r)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn input_size(params: &Params<f32>, size: usize) -> Result<usize> {
    let div = 1usize << params.arch().stages();
    if size == 0 || !size.is_multiple_of(div) {
        return Err(Error::Config(format!(
            "input size {size} is not a positive multiple of {div}"
        )));
    }
    if params.arch().num_classes == 0 {
        return Err(Error::InvalidArgument("network has no class head".into()));
    }
    Ok(size)
}

/// Per-crop gradient, loss and whether the majority class won.
fn tune_sample(
    params: &Params<f32>,
    input: &ImageCrop,
    label: &SoftLabel,
    loss: LossKind,
    policy: &AugmentPolicy,
    seed: u64,
    id: &str,
) -> Result<(Params<f32>, (f64, bool))> {
    let x = apply_record(input, &policy.sample(seed))?;
    let enc = encoder_forward(params, &fmap_from_image(&x))?;
    let (pooled, logits) = head_forward(params, Head::Class, &enc)?;
    let z: Vec<f64> = logits.iter().map(|&v| v as f64).collect();
    let l = match loss {
        LossKind::Soft => soft_ce_logits(&z, label)?,
        LossKind::Vanilla => softmax_ce(&z, label.c1)?,
    };
    if !l.value.is_finite() {
        return Err(Error::NonFinite(format!(
            "classification loss on crop {id}"
        )));
    }
    let mut g = params.zeros_like();
    let d: Vec<f32> = l.grad.iter().map(|&v| v as f32).collect();
    let d_low = head_backward(params, Head::Class, &enc, &pooled, &d, &mut g)?;
    let mut d_pyr = vec![None; params.arch().stages()];
    d_pyr.push(Some(d_low));
    encoder_backward(params, &enc, d_pyr, &mut g);
    Ok((g, (l.value, argmax(&z) == label.c1)))
}

/// Trains encoder and class head end to end. Each epoch masks every crop with
/// the curriculum's dilation count, applies the training augmentation and
/// steps Adam per batch; `val` (if given) is scored after each epoch with the
/// end-of-curriculum mask and no test-time views. On a non-finite loss or
/// gradient `params` is left at the last good step and an error is returned.
pub fn soft_tune(
    params: &mut Params<f32>,
    train: &[TuneSample],
    val: Option<&[TuneSample]>,
    size: usize,
    cfg: &TuneConfig,
) -> Result<Vec<EpochRow>> {
    cfg.validate()?;
    let size = input_size(params, size)?;
    if train.is_empty() {
        return Err(Error::Data("no crops to tune on".into()));
    }
    if let Some(s) = train.iter().find(|s| {
        s.label.c1 >= params.arch().num_classes || s.label.c2 >= params.arch().num_classes
    }) {
        return Err(Error::Label(format!(
            "crop {} has a class outside the {}-class head",
            s.id,
            params.arch().num_classes
        )));
    }
    let schedule = cfg.schedule()?;
    let policy = cfg.augment_policy()?;
    let lr_schedule = StepDecay::new(cfg.lr, &cfg.milestones, cfg.lr_decay);
    let mut adam = Adam::new(params, AdamConfig::default());
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let n_dil = schedule.dilations_at(epoch)?;
        let lr = lr_schedule.lr_at(epoch);
        let inputs = train
            .par_iter()
            .map(|s| prepare_input(s, n_dil, size))
            .collect::<Result<Vec<_>>>()?;
        let order = epoch_order(train.len(), epoch, derive_seed(cfg.seed, 3));
        let (mut loss_sum, mut hits) = (0.0, 0usize);
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let parts: Vec<_> = batch
                .par_iter()
                .enumerate()
                .map(|(slot, &i)| {
                    let seed = derive_seed(
                        cfg.seed,
                        ((epoch * train.len()) + b * cfg.batch_size + slot) as u64,
                    );
                    tune_sample(
                        params,
                        &inputs[i],
                        &train[i].label,
                        cfg.loss,
                        &policy,
                        seed,
                        &train[i].id,
                    )
                })
                .collect();
            let mut grads = params.zeros_like();
            for part in parts {
                let (g, (l, hit)) = part?;
                grads.add_assign(&g);
                loss_sum += l;
                hits += hit as usize;
            }
            grads.scale(1.0 / batch.len() as f32);
            adam.step(params, &grads, lr)?;
        }
        let val_accuracy = match val {
            Some(v) if !v.is_empty() => Some(accuracy(params, v, cfg.end_dilations, size)?),
            _ => None,
        };
        let row = EpochRow {
            epoch,
            dilations: n_dil,
            lr,
            loss: loss_sum / train.len() as f64,
            train_accuracy: hits as f64 / train.len() as f64,
            val_accuracy,
        };
        log::debug!("tune epoch {epoch}: {row:?}");
        log.push(row);
    }
    Ok(log)
}

fn accuracy(
    params: &Params<f32>,
    samples: &[TuneSample],
    n_dil: usize,
    size: usize,
) -> Result<f64> {
    let hits = samples
        .par_iter()
        .map(|s| {
            Ok(
                (argmax(&predict_probs(params, &prepare_input(s, n_dil, size)?)?) == s.label.c1)
                    as usize,
            )
        })
        .sum::<Result<usize>>()?;
    Ok(hits as f64 / samples.len() as f64)
}

/// Accuracy and macro-averaged recall, precision and F1. Classes absent from
/// the ground truth are left out of the macro averages and listed in `absent`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
    pub absent: Vec<usize>,
}

impl Metrics {
    /// Macro F1 is the mean of per-class F1 scores; a class never predicted has precision 0.
    pub fn from_predictions(truth: &[usize], pred: &[usize], num_classes: usize) -> Result<Self> {
        if truth.len() != pred.len() || truth.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "{} labels vs {} predictions",
                truth.len(),
                pred.len()
            )));
        }
        if let Some(&c) = truth.iter().chain(pred).find(|&&c| c >= num_classes) {
            return Err(Error::InvalidArgument(format!(
                "class {c} outside 0..{num_classes}"
            )));
        }
        let mut tp = vec![0usize; num_classes];
        let mut n_true = vec![0usize; num_classes];
        let mut n_pred = vec![0usize; num_classes];
        for (&t, &p) in truth.iter().zip(pred) {
            n_true[t] += 1;
            n_pred[p] += 1;
            tp[t] += (t == p) as usize;
        }
        let present: Vec<usize> = (0..num_classes).filter(|&c| n_true[c] > 0).collect();
        let absent: Vec<usize> = (0..num_classes).filter(|&c| n_true[c] == 0).collect();
        let (mut r, mut p, mut f) = (0.0, 0.0, 0.0);
        for &c in &present {
            let rc = tp[c] as f64 / n_true[c] as f64;
            let pc = if n_pred[c] > 0 {
                tp[c] as f64 / n_pred[c] as f64
            } else {
                0.0
            };
            let fc = if rc + pc > 0.0 {
                2.0 * pc * rc / (pc + rc)
            } else {
                0.0
            };
            r += rc;
            p += pc;
            f += fc;
        }
        let k = present.len() as f64;
        Ok(Self {
            accuracy: tp.iter().sum::<usize>() as f64 / truth.len() as f64,
            recall: r / k,
            precision: p / k,
            f1: f / k,
            absent,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub truth: usize,
    pub predicted: usize,
    pub confidence: f64,
}

/// Scores `samples` (majority vote as ground truth) with test-time views over
/// inputs masked with `n_dil` curriculum dilations.
pub fn evaluate(
    params: &Params<f32>,
    samples: &[TuneSample],
    policy: &TTAPolicy,
    n_dil: usize,
    size: usize,
) -> Result<(Metrics, Vec<Prediction>)> {
    let size = input_size(params, size)?;
    let preds = samples
        .par_iter()
        .map(|s| {
            let probs = tta_predict(params, &prepare_input(s, n_dil, size)?, policy)?;
            let predicted = argmax(&probs);
            Ok(Prediction {
                id: s.id.clone(),
                truth: s.label.c1,
                predicted,
                confidence: probs[predicted],
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let truth: Vec<usize> = preds.iter().map(|p| p.truth).collect();
    let pred: Vec<usize> = preds.iter().map(|p| p.predicted).collect();
    let metrics = Metrics::from_predictions(&truth, &pred, params.arch().num_classes)?;
    if !metrics.absent.is_empty() {
        log::warn!(
            "classes {:?} absent from the test fold; left out of macro averages",
            metrics.absent
        );
    }
    Ok((metrics, preds))
}
