//! Student-teacher pretraining: pixel-wise fine distillation against pseudo-mask
//! hierarchies, then coarse distillation by rotation prediction on aligned crops.
//! The teacher follows the student by exponential moving average only.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hpm::MaskHierarchy;
use crate::imgcore::{
    apply_geometric_mask, apply_record, largest_component, resize, resize_mask, rot90,
    AugmentPolicy, BinaryMask, ImageCrop,
};
use crate::losses::{consistency, rotation_ce, seg_partial_ce_logits, LossWeights, ProbMap};
use crate::seed::derive_seed;
use crate::tinynn::{
    decoder_backward, decoder_forward, ema_update, encoder_backward, encoder_forward,
    fmap_from_image, head_backward, head_forward, Adam, AdamConfig, Head, Params, Real, StepDecay,
};

/// One aligned crop with its hierarchy, both at network input size.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainSample {
    pub id: String,
    pub image: ImageCrop,
    pub hierarchy: MaskHierarchy,
    /// Rotation HPM applied to face the head right; `None` for unaligned crops.
    pub rotation_applied: Option<f64>,
}

impl PretrainSample {
    /// Resizes the crop (bilinear) and every mask (nearest) to `size`×`size`.
    pub fn new(
        id: &str,
        image: &ImageCrop,
        hierarchy: &MaskHierarchy,
        rotation_applied: Option<f64>,
        size: usize,
    ) -> Result<Self> {
        if image.height() != hierarchy.height() || image.width() != hierarchy.width() {
            return Err(Error::Shape(format!(
                "crop {id}: image and hierarchy sizes differ"
            )));
        }
        Ok(Self {
            id: id.to_string(),
            image: resize(image, size, size),
            hierarchy: hierarchy.map_masks(|m| Ok(resize_mask(m, size, size)))?,
            rotation_applied,
        })
    }
}

/// Student trained by gradient descent; teacher kept as an f64 running average.
#[derive(Debug, Clone, PartialEq)]
pub struct StudentTeacherPair {
    pub student: Params<f32>,
    pub teacher: Params<f64>,
    pub ema_decay: f64,
}

impl StudentTeacherPair {
    /// Starts the teacher as an exact copy of the student.
    pub fn new(student: Params<f32>, ema_decay: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&ema_decay) {
            return Err(Error::InvalidArgument(format!(
                "ema_decay must be in [0, 1), got {ema_decay}"
            )));
        }
        let teacher = student.cast();
        Ok(Self {
            student,
            teacher,
            ema_decay,
        })
    }

    pub fn teacher_f32(&self) -> Params<f32> {
        self.teacher.cast()
    }

    pub fn ema_step(&mut self) -> Result<()> {
        ema_update(&mut self.teacher, &self.student, self.ema_decay)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub alpha: f64,
    pub beta: f64,
    pub ema_decay: f64,
    pub batch_size: usize,
    pub fine_iterations: usize,
    pub coarse_iterations: usize,
    pub lr: f64,
    /// Epochs at which the learning rate is multiplied by `lr_decay`; an epoch
    /// is one pass over the samples, counted separately in each phase.
    pub milestones: Vec<usize>,
    pub lr_decay: f64,
    /// Augmentation preset name for both views.
    pub policy: String,
    pub mask_threshold: f64,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            ema_decay: 0.99,
            batch_size: 16,
            fine_iterations: 300,
            coarse_iterations: 400,
            lr: 1e-3,
            milestones: Vec::new(),
            lr_decay: 0.1,
            policy: "aid".into(),
            mask_threshold: 0.5,
            seed: 0,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        LossWeights::new(self.alpha, self.beta)?;
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return bad("distill batch_size must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.lr_decay > 0.0 && self.lr_decay <= 1.0)
        {
            return bad(format!(
                "distill lr {} / lr_decay {} out of range",
                self.lr, self.lr_decay
            ));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return bad(format!(
                "ema_decay must be in [0, 1), got {}",
                self.ema_decay
            ));
        }
        if !(0.0..=1.0).contains(&self.mask_threshold) {
            return bad(format!(
                "mask_threshold must be in [0, 1], got {}",
                self.mask_threshold
            ));
        }
        self.augment_policy().map(|_| ())
    }

    pub fn augment_policy(&self) -> Result<AugmentPolicy> {
        AugmentPolicy::by_name(&self.policy)
            .ok_or_else(|| Error::Config(format!("unknown augmentation policy {:?}", self.policy)))
    }

    fn weights(&self) -> Result<LossWeights> {
        LossWeights::new(self.alpha, self.beta)
    }

    fn schedule(&self) -> StepDecay {
        StepDecay::new(self.lr, &self.milestones, self.lr_decay)
    }
}

/// One row of the loss curve; losses a phase does not compute are empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub iteration: usize,
    pub seg: Option<f64>,
    pub con: Option<f64>,
    pub rot: Option<f64>,
    pub lr: f64,
}

pub fn write_loss_curve(path: &Path, rows: &[LossRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    for r in rows {
        w.serialize(r)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Sample order for one epoch: a seeded shuffle of `0..n`.
pub fn epoch_order(n: usize, epoch: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
        seed,
        epoch as u64,
    )));
    idx
}

/// Rotation labels for one epoch: `i mod 4` shuffled, so each label appears
/// `n/4` times up to one.
pub fn rotation_labels(n: usize, epoch: usize, seed: u64) -> Vec<usize> {
    let mut labels: Vec<usize> = (0..n).map(|i| i % 4).collect();
    labels.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
        seed ^ 0x726f_7461,
        epoch as u64,
    )));
    labels
}

/// Endless epoch-by-epoch stream of `(sample index, rotation label, epoch)`.
struct Stream {
    n: usize,
    seed: u64,
    epoch: usize,
    pos: usize,
    order: Vec<usize>,
    labels: Vec<usize>,
}

impl Stream {
    fn new(n: usize, seed: u64) -> Self {
        Self {
            n,
            seed,
            epoch: 0,
            pos: 0,
            order: epoch_order(n, 0, seed),
            labels: rotation_labels(n, 0, seed),
        }
    }

    /// Next batch and the epoch its first sample belongs to.
    fn batch(&mut self, size: usize) -> (Vec<(usize, usize)>, usize) {
        let epoch = self.epoch;
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.n {
                self.epoch += 1;
                self.pos = 0;
                self.order = epoch_order(self.n, self.epoch, self.seed);
                self.labels = rotation_labels(self.n, self.epoch, self.seed);
            }
            out.push((self.order[self.pos], self.labels[self.pos]));
            self.pos += 1;
        }
        (out, epoch)
    }
}

/// Rotation view used by coarse distillation: `k` quarter turns.
pub fn rotation_view(img: &ImageCrop, k: usize) -> ImageCrop {
    rot90(img, k % 4)
}

fn logits_f64<T: Real>(v: &[T]) -> Vec<f64> {
    v.iter().map(|z| z.as_f64()).collect()
}

fn to_real<T: Real>(v: &[f64]) -> Vec<T> {
    v.iter().map(|&z| T::from_f64_lossy(z)).collect()
}

/// Per-crop fine-distillation gradient for the student, with seg and con values.
fn fine_sample(
    student: &Params<f32>,
    teacher: Option<&Params<f32>>,
    s: &PretrainSample,
    policy: &AugmentPolicy,
    seed: u64,
    w: &LossWeights,
) -> Result<(Params<f32>, f64, f64)> {
    let r1 = policy.sample(derive_seed(seed, 0));
    let r2 = policy.sample(derive_seed(seed, 1));
    let x1 = apply_record(&s.image, &r1)?;
    let hier = s.hierarchy.map_masks(|m| apply_geometric_mask(m, &r1))?;
    let enc = encoder_forward(student, &fmap_from_image(&x1))?;
    let dec = decoder_forward(student, &enc);
    let (h, wd) = (dec.logits.h, dec.logits.w);
    let logits = logits_f64(&dec.logits.data);
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(Error::NonFinite(format!("student output on crop {}", s.id)));
    }
    let seg = seg_partial_ce_logits(h, wd, &logits, &hier)?;
    let mut d: Vec<f64> = seg.grad.iter().map(|g| w.alpha * g).collect();
    let mut con_value = 0.0;
    if let Some(teacher) = teacher {
        let x2 = apply_record(&s.image, &r2)?;
        let tenc = encoder_forward(teacher, &fmap_from_image(&x2))?;
        let pt = ProbMap::new(h, wd, decoder_forward(teacher, &tenc).probs())?;
        let ps = ProbMap::from_logits(h, wd, &logits)?;
        let con = consistency(&ps, &pt, &r1, &r2)?;
        for ((di, g), &p) in d.iter_mut().zip(&con.grad).zip(ps.values()) {
            *di += w.beta * g * p * (1.0 - p);
        }
        con_value = con.value;
    }
    if !seg.value.is_finite() || !con_value.is_finite() {
        return Err(Error::NonFinite(format!(
            "fine distillation loss on crop {}",
            s.id
        )));
    }
    let mut g = student.zeros_like();
    let d_pyr = decoder_backward(student, &enc, &dec, &to_real(&d), &mut g);
    encoder_backward(student, &enc, d_pyr.into_iter().map(Some).collect(), &mut g);
    Ok((g, seg.value, con_value))
}

/// Per-crop rotation-prediction gradient through encoder and rotation head.
fn coarse_sample(
    student: &Params<f32>,
    s: &PretrainSample,
    policy: &AugmentPolicy,
    seed: u64,
    k: usize,
) -> Result<(Params<f32>, f64)> {
    let r = policy.sample(derive_seed(seed, 0));
    let x = rotation_view(&apply_record(&s.image, &r)?, k);
    let enc = encoder_forward(student, &fmap_from_image(&x))?;
    let (pooled, logits) = head_forward(student, Head::Rotation, &enc)?;
    let loss = rotation_ce(&logits_f64(&logits), k)?;
    if !loss.value.is_finite() {
        return Err(Error::NonFinite(format!("rotation loss on crop {}", s.id)));
    }
    let mut g = student.zeros_like();
    let d_low = head_backward(
        student,
        Head::Rotation,
        &enc,
        &pooled,
        &to_real(&loss.grad),
        &mut g,
    )?;
    let mut d_pyr = vec![None; student.arch().stages()];
    d_pyr.push(Some(d_low));
    encoder_backward(student, &enc, d_pyr, &mut g);
    Ok((g, loss.value))
}

/// Sums per-sample results in batch order, so the total does not depend on
/// how the work was scheduled across threads.
fn reduce<E>(
    zero: Params<f32>,
    parts: Vec<Result<(Params<f32>, E)>>,
    mut acc: impl FnMut(E),
) -> Result<Params<f32>> {
    let n = parts.len();
    let mut total = zero;
    for part in parts {
        let (g, extra) = part?;
        total.add_assign(&g);
        acc(extra);
    }
    total.scale(1.0 / n as f32);
    Ok(total)
}

fn check_samples(samples: &[PretrainSample]) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::Data("no samples to train on".into()));
    }
    Ok(())
}

/// Fine distillation: per iteration, two augmented views per crop (student
/// and teacher), `alpha * seg + beta * con` backpropagated into the student
/// only, one Adam step, then the EMA update. `observer` sees the pair after
/// every iteration. On a non-finite loss or gradient the pair is left at the
/// last good iteration and an error is returned.
pub fn fine_distill(
    pair: &mut StudentTeacherPair,
    samples: &[PretrainSample],
    cfg: &DistillConfig,
    mut observer: impl FnMut(usize, &StudentTeacherPair),
) -> Result<Vec<LossRow>> {
    cfg.validate()?;
    check_samples(samples)?;
    let policy = cfg.augment_policy()?;
    let weights = cfg.weights()?;
    let schedule = cfg.schedule();
    let mut adam = Adam::new(&pair.student, AdamConfig::default());
    let mut stream = Stream::new(samples.len(), derive_seed(cfg.seed, 1));
    let mut log = Vec::with_capacity(cfg.fine_iterations);
    for it in 0..cfg.fine_iterations {
        let (batch, epoch) = stream.batch(cfg.batch_size);
        let lr = schedule.lr_at(epoch);
        let teacher = (cfg.beta != 0.0).then(|| pair.teacher_f32());
        let parts: Vec<_> = batch
            .par_iter()
            .enumerate()
            .map(|(slot, &(i, _))| {
                let seed = derive_seed(cfg.seed, (it * cfg.batch_size + slot) as u64);
                fine_sample(
                    &pair.student,
                    teacher.as_ref(),
                    &samples[i],
                    &policy,
                    seed,
                    &weights,
                )
                .map(|(g, seg, con)| (g, (seg, con)))
            })
            .collect();
        let (mut seg, mut con) = (0.0, 0.0);
        let grads = reduce(pair.student.zeros_like(), parts, |(s, c)| {
            seg += s;
            con += c;
        })?;
        adam.step(&mut pair.student, &grads, lr)?;
        pair.ema_step()?;
        let n = batch.len() as f64;
        log.push(LossRow {
            iteration: it + 1,
            seg: Some(seg / n),
            con: Some(con / n),
            rot: None,
            lr,
        });
        observer(it + 1, pair);
    }
    Ok(log)
}

/// Coarse distillation: each crop turned by a balanced random multiple of 90°
/// and classified by the rotation head; the decoder is left untouched. The EMA
/// update continues. Iteration numbers continue from `first_iteration`.
pub fn coarse_distill(
    pair: &mut StudentTeacherPair,
    samples: &[PretrainSample],
    cfg: &DistillConfig,
    first_iteration: usize,
) -> Result<Vec<LossRow>> {
    cfg.validate()?;
    check_samples(samples)?;
    if let Some(s) = samples.iter().find(|s| s.rotation_applied.is_none()) {
        return Err(Error::Data(format!(
            "crop {} is not aligned; rotation prediction needs aligned crops",
            s.id
        )));
    }
    let policy = cfg.augment_policy()?;
    let schedule = cfg.schedule();
    let mut adam = Adam::new(&pair.student, AdamConfig::default());
    let mut stream = Stream::new(samples.len(), derive_seed(cfg.seed, 2));
    let mut log = Vec::with_capacity(cfg.coarse_iterations);
    for it in 0..cfg.coarse_iterations {
        let (batch, epoch) = stream.batch(cfg.batch_size);
        let lr = schedule.lr_at(epoch);
        let parts: Vec<_> = batch
            .par_iter()
            .enumerate()
            .map(|(slot, &(i, k))| {
                let seed = derive_seed(cfg.seed ^ 0x636f_6172, (it * cfg.batch_size + slot) as u64);
                coarse_sample(&pair.student, &samples[i], &policy, seed, k)
            })
            .collect();
        let mut rot = 0.0;
        let grads = reduce(pair.student.zeros_like(), parts, |r| rot += r)?;
        adam.step(&mut pair.student, &grads, lr)?;
        pair.ema_step()?;
        log.push(LossRow {
            iteration: first_iteration + it + 1,
            seg: None,
            con: None,
            rot: Some(rot / batch.len() as f64),
            lr,
        });
    }
    Ok(log)
}

/// Fine then coarse distillation; returns the concatenated loss curve and the
/// result of `after_fine`, which sees the pair between the phases. Segmentation
/// outputs belong there: coarse distillation moves the encoder under a frozen decoder.
pub fn pretrain<T>(
    pair: &mut StudentTeacherPair,
    samples: &[PretrainSample],
    cfg: &DistillConfig,
    after_fine: impl FnOnce(&StudentTeacherPair) -> Result<T>,
) -> Result<(Vec<LossRow>, T)> {
    let mut log = fine_distill(pair, samples, cfg, |_, _| {})?;
    let out = after_fine(pair)?;
    log.extend(coarse_distill(pair, samples, cfg, cfg.fine_iterations)?);
    Ok((log, out))
}

/// Rotation-head accuracy over all four quarter turns of each sample.
pub fn rotation_accuracy(params: &Params<f32>, samples: &[PretrainSample]) -> Result<f64> {
    let hits = samples
        .par_iter()
        .map(|s| {
            (0..4)
                .map(|k| {
                    let enc =
                        encoder_forward(params, &fmap_from_image(&rotation_view(&s.image, k)))?;
                    let (_, logits) = head_forward(params, Head::Rotation, &enc)?;
                    let best = logits_f64(&logits)
                        .iter()
                        .enumerate()
                        .fold(
                            (0, f64::NEG_INFINITY),
                            |b, (j, &z)| if z > b.1 { (j, z) } else { b },
                        )
                        .0;
                    Ok((best == k) as usize)
                })
                .sum::<Result<usize>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(hits.iter().sum::<usize>() as f64 / (4 * samples.len().max(1)) as f64)
}

/// Foreground probabilities of the network's segmentation output for `img`
/// resized to `size`, mapped back to the crop's own size.
pub fn predict_foreground(params: &Params<f32>, img: &ImageCrop, size: usize) -> Result<Vec<f64>> {
    let enc = encoder_forward(params, &fmap_from_image(&resize(img, size, size)))?;
    let probs = decoder_forward(params, &enc).probs();
    if (img.height(), img.width()) == (size, size) {
        return Ok(probs);
    }
    let map = ImageCrop::new(size, size, 1, probs.iter().map(|&p| p as f32).collect())?;
    Ok(resize(&map, img.height(), img.width())
        .data()
        .iter()
        .map(|&p| p as f64)
        .collect())
}

/// Pixels with probability at least `threshold`, reduced to the largest component.
pub fn binarize(
    probs: &[f64],
    height: usize,
    width: usize,
    threshold: f64,
) -> Result<Option<BinaryMask>> {
    let mask = BinaryMask::new(
        height,
        width,
        probs.iter().map(|&p| p >= threshold).collect(),
    )?;
    Ok(largest_component(&mask))
}

/// Binary teacher masks keyed by crop id, at each crop's own size.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherMaskStore {
    pub threshold: f64,
    pub masks: BTreeMap<String, BinaryMask>,
    /// Crops whose prediction was empty and fell back to the confident pseudo-mask.
    pub fallbacks: BTreeSet<String>,
}

#[derive(Serialize, Deserialize)]
struct StoreIndex {
    threshold: f64,
    ids: Vec<String>,
    fallbacks: Vec<String>,
}

const STORE_INDEX: &str = "store.json";

impl TeacherMaskStore {
    pub fn get(&self, id: &str) -> Option<&BinaryMask> {
        self.masks.get(id)
    }

    /// Writes `store.json` and one `<id>.png` per mask into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.masks
            .par_iter()
            .try_for_each(|(id, m)| m.save_png(&dir.join(format!("{id}.png"))))?;
        let index = StoreIndex {
            threshold: self.threshold,
            ids: self.masks.keys().cloned().collect(),
            fallbacks: self.fallbacks.iter().cloned().collect(),
        };
        let path = dir.join(STORE_INDEX);
        fs::write(
            &path,
            serde_json::to_string_pretty(&index).expect("index serializes"),
        )
        .map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(STORE_INDEX);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let index: StoreIndex = serde_json::from_str(&text)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let masks = index
            .ids
            .par_iter()
            .map(|id| {
                Ok((
                    id.clone(),
                    BinaryMask::load_png(&dir.join(format!("{id}.png")))?,
                ))
            })
            .collect::<Result<BTreeMap<_, _>>>()?;
        Ok(Self {
            threshold: index.threshold,
            masks,
            fallbacks: index.fallbacks.into_iter().collect(),
        })
    }
}

/// One crop to export: the aligned crop and its confident pseudo-mask, both at native size.
#[derive(Debug, Clone, Copy)]
pub struct MaskSource<'a> {
    pub id: &'a str,
    pub image: &'a ImageCrop,
    pub fallback: &'a BinaryMask,
}

/// Teacher forward on unaugmented aligned crops, binarized at `threshold` and
/// reduced to the largest component; empty predictions fall back to the
/// crop's confident pseudo-mask and are recorded.
pub fn export_teacher_masks(
    pair: &StudentTeacherPair,
    sources: &[MaskSource<'_>],
    size: usize,
    threshold: f64,
) -> Result<TeacherMaskStore> {
    let teacher = pair.teacher_f32();
    let masks = sources
        .par_iter()
        .map(|s| {
            if (s.image.height(), s.image.width()) != (s.fallback.height(), s.fallback.width()) {
                return Err(Error::Shape(format!(
                    "crop {}: image and fallback mask sizes differ",
                    s.id
                )));
            }
            let probs = predict_foreground(&teacher, s.image, size)?;
            binarize(&probs, s.image.height(), s.image.width(), threshold)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut store = TeacherMaskStore {
        threshold,
        masks: BTreeMap::new(),
        fallbacks: BTreeSet::new(),
    };
    for (s, m) in sources.iter().zip(masks) {
        let m = m.unwrap_or_else(|| {
            log::warn!("crop {}: empty teacher mask, using the pseudo-mask", s.id);
            store.fallbacks.insert(s.id.to_string());
            s.fallback.clone()
        });
        store.masks.insert(s.id.to_string(), m);
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{generate_crop, random_spec, FramePreset};
    use crate::hpm::{hpm_pipeline, HpmParams};
    use crate::tinynn::Arch;

    fn small_arch() -> Arch {
        Arch {
            in_channels: 1,
            widths: vec![4, 8],
            decoder_width: 4,
            num_classes: 0,
        }
    }

    fn samples(n: usize, size: usize) -> Vec<PretrainSample> {
        (0..n)
            .map(|i| {
                let spec = random_spec(i % 4, FramePreset::Desk64, 0.05, 100 + i as u64);
                let (img, _) = generate_crop(&spec).unwrap();
                let r = hpm_pipeline(&img, &HpmParams::default(), i as u64).unwrap();
                PretrainSample::new(
                    &format!("c{i}"),
                    &r.aligned_image,
                    &r.hierarchy,
                    Some(r.rotation_applied),
                    size,
                )
                .unwrap()
            })
            .collect()
    }

    fn cfg(iters: usize) -> DistillConfig {
        DistillConfig {
            batch_size: 4,
            fine_iterations: iters,
            coarse_iterations: iters,
            seed: 3,
            ..DistillConfig::default()
        }
    }

    #[test]
    fn teacher_moves_only_by_ema() {
        let data = samples(6, 16);
        let mut pair =
            StudentTeacherPair::new(Params::init(&small_arch(), 1).unwrap(), 0.9).unwrap();
        let mut replay = pair.teacher.clone();
        let mut max_diff = 0.0f64;
        fine_distill(&mut pair, &data, &cfg(20), |_, p| {
            ema_update(&mut replay, &p.student, 0.9).unwrap();
            for (a, b) in replay.tensors().iter().zip(p.teacher.tensors()) {
                for (x, y) in a.data.iter().zip(&b.data) {
                    max_diff = max_diff.max((x - y).abs());
                }
            }
        })
        .unwrap();
        assert_eq!(max_diff, 0.0);
        assert_ne!(pair.teacher, pair.student.cast());
    }

    #[test]
    fn loss_curve_is_reproducible_and_thread_independent() {
        let data = samples(5, 16);
        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap();
            pool.install(|| {
                let mut pair =
                    StudentTeacherPair::new(Params::init(&small_arch(), 2).unwrap(), 0.99).unwrap();
                let (log, ()) = pretrain(&mut pair, &data, &cfg(6), |_| Ok(())).unwrap();
                (log, pair)
            })
        };
        let (a, pa) = run(1);
        let (b, pb) = run(1);
        let (c, pc) = run(4);
        assert_eq!(a, b);
        assert_eq!(a, c);
        assert_eq!(pa, pb);
        assert_eq!(pa, pc);
        assert_eq!(a.len(), 12);
        assert!(a[..6].iter().all(|r| r.seg.is_some() && r.rot.is_none()));
        assert!(a[6..].iter().all(|r| r.rot.is_some() && r.iteration > 6));
    }

    #[test]
    fn seg_loss_falls_on_one_crop() {
        let data = samples(1, 16);
        let c = DistillConfig {
            beta: 0.0,
            batch_size: 1,
            fine_iterations: 50,
            policy: "identity".into(),
            lr: 3e-3,
            ..DistillConfig::default()
        };
        let mut pair =
            StudentTeacherPair::new(Params::init(&small_arch(), 4).unwrap(), 0.99).unwrap();
        let log = fine_distill(&mut pair, &data, &c, |_, _| {}).unwrap();
        let first = log[0].seg.unwrap();
        let last = log[49].seg.unwrap();
        assert!(last < 0.5 * first, "{first} -> {last}");
    }

    #[test]
    fn decoder_untouched_by_coarse_phase() {
        let data = samples(4, 16);
        let mut pair =
            StudentTeacherPair::new(Params::init(&small_arch(), 5).unwrap(), 0.99).unwrap();
        let before = pair.student.clone();
        coarse_distill(&mut pair, &data, &cfg(3), 0).unwrap();
        for (a, b) in before.tensors().iter().zip(pair.student.tensors()) {
            if a.name.starts_with("dec.") {
                assert_eq!(a, b, "{}", a.name);
            } else if a.name.starts_with("enc.") || a.name.starts_with("rot.") {
                assert_ne!(a.data, b.data, "{}", a.name);
            }
        }
    }

    #[test]
    fn unaligned_crops_are_rejected() {
        let mut data = samples(2, 16);
        data[1].rotation_applied = None;
        let mut pair =
            StudentTeacherPair::new(Params::init(&small_arch(), 5).unwrap(), 0.99).unwrap();
        let err = coarse_distill(&mut pair, &data, &cfg(1), 0).unwrap_err();
        assert!(err.to_string().contains("c1"), "{err}");
    }

    #[test]
    fn rotation_labels_are_balanced() {
        for epoch in 0..5 {
            let labels = rotation_labels(203, epoch, 9);
            for k in 0..4 {
                let n = labels.iter().filter(|&&l| l == k).count() as f64;
                assert!((n / 203.0 - 0.25).abs() <= 0.05);
            }
        }
        assert_ne!(rotation_labels(40, 0, 9), rotation_labels(40, 1, 9));
    }

    #[test]
    fn stream_walks_whole_epochs() {
        let mut s = Stream::new(10, 1);
        let (b1, e1) = s.batch(4);
        let (b2, _) = s.batch(4);
        let (b3, e3) = s.batch(4);
        assert_eq!((e1, e3), (0, 0));
        let mut seen: Vec<usize> = b1.iter().chain(&b2).chain(&b3[..2]).map(|p| p.0).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        assert_eq!(s.batch(1).1, 1);
    }

    #[test]
    fn oracle_rotation_model_has_tiny_loss() {
        let img = samples(1, 16).remove(0).image;
        for k in 0..4 {
            let view = rotation_view(&img, k);
            let guess = (0..4).find(|&j| rot90(&view, (4 - j) % 4) == img).unwrap();
            let mut logits = vec![0.0; 4];
            logits[guess] = 20.0;
            assert!(rotation_ce(&logits, k).unwrap().value <= 0.01);
        }
    }

    #[test]
    fn constant_map_binarizes_to_full_frame() {
        let m = binarize(&vec![0.6; 30], 5, 6, 0.5).unwrap().unwrap();
        assert_eq!(m, BinaryMask::full(5, 6));
        assert!(binarize(&vec![0.4; 30], 5, 6, 0.5).unwrap().is_none());
    }

    #[test]
    fn store_round_trips_and_falls_back() {
        let data = samples(3, 16);
        let pair = StudentTeacherPair::new(Params::zeros(&small_arch()).unwrap(), 0.99).unwrap();
        let fallback = BinaryMask::from_fn(16, 16, |x, y| x > 4 && y > 6);
        let sources: Vec<_> = data
            .iter()
            .map(|s| MaskSource {
                id: &s.id,
                image: &s.image,
                fallback: &fallback,
            })
            .collect();
        // zero parameters give probability 0.5 everywhere
        let full = export_teacher_masks(&pair, &sources, 16, 0.5).unwrap();
        assert!(full.fallbacks.is_empty());
        assert!(full.masks.values().all(|m| m.count() == 256));
        let empty = export_teacher_masks(&pair, &sources, 16, 0.6).unwrap();
        assert_eq!(empty.fallbacks.len(), 3);
        assert_eq!(empty.get("c0"), Some(&fallback));
        let dir = tempfile::tempdir().unwrap();
        empty.save(dir.path()).unwrap();
        assert_eq!(TeacherMaskStore::load(dir.path()).unwrap(), empty);
    }

    #[test]
    fn non_finite_aborts_and_keeps_last_state() {
        let data = samples(2, 16);
        let mut pair =
            StudentTeacherPair::new(Params::init(&small_arch(), 6).unwrap(), 0.99).unwrap();
        pair.student.tensors_mut()[0].data[0] = f32::NAN;
        let before = pair.clone();
        let err = fine_distill(&mut pair, &data, &cfg(3), |_, _| {}).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)), "{err}");
        assert_eq!(format!("{:?}", pair), format!("{:?}", before));
    }
}
