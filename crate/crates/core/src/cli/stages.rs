//! Pipeline stages over on-disk artifacts. Pseudo-masks are computed once
//! under `<out>/masks/`; everything trained lives under `<run>/fold<f>/<stage>/`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::data::{load_dataset, make_folds, Dataset, FoldSplit};
use crate::distill::{
    export_teacher_masks, pretrain, write_loss_curve, MaskSource, PretrainSample,
    StudentTeacherPair, TeacherMaskStore,
};
use crate::error::{Error, Result};
use crate::hpm::{hpm_pipeline, MaskHierarchy, QualityFlag};
use crate::imgcore::{BinaryMask, ImageCrop};
use crate::seed::derive_seed;
use crate::tinynn::{checkpoint, Params};
use crate::tune::{evaluate, soft_tune, write_epoch_log, Metrics, Prediction, TuneSample};

/// Where one run reads its inputs and writes its artifacts.
#[derive(Debug, Clone)]
pub struct Layout {
    pub data: PathBuf,
    /// Shared pseudo-mask directory.
    pub masks: PathBuf,
    /// Root for fold directories and run-level outputs.
    pub run: PathBuf,
}

impl Layout {
    pub fn new(data: &Path, out: &Path) -> Self {
        Self {
            data: data.to_path_buf(),
            masks: out.join("masks"),
            run: out.to_path_buf(),
        }
    }

    pub fn with_run(&self, run: PathBuf) -> Self {
        Self {
            run,
            ..self.clone()
        }
    }

    pub fn stage_dir(&self, fold: usize, stage: &str) -> PathBuf {
        self.run.join(format!("fold{fold}")).join(stage)
    }
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn write_text(p: &Path, text: &str) -> Result<()> {
    fs::write(p, text).map_err(|e| Error::io(p, e))
}

/// Writes the resolved configuration and invocation next to a stage's artifacts.
pub fn echo_config(
    dir: &Path,
    stage: &str,
    invocation: &[(&str, String)],
    cfg: &RunConfig,
) -> Result<()> {
    let mut text = format!("# resolved configuration for `{stage}`\n");
    for (k, v) in invocation {
        text.push_str(&format!("# {k} = {v}\n"));
    }
    text.push('\n');
    text.push_str(&cfg.to_toml());
    write_text(&dir.join("config.toml"), &text)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskRecord {
    pub id: String,
    pub h: usize,
    pub rotation_applied: f64,
    pub flags: BTreeSet<QualityFlag>,
}

/// Pseudo-mask artifacts of one crop, loaded back from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskEntry {
    pub aligned: ImageCrop,
    pub hierarchy: MaskHierarchy,
    pub record: MaskRecord,
}

/// Runs the pseudo-mask pipeline on every labeled crop.
pub fn compute_masks(layout: &Layout, cfg: &RunConfig) -> Result<Vec<MaskRecord>> {
    let ds = load_dataset(&layout.data, cfg.tune.lambda)?;
    let (aligned_dir, hier_dir) = (layout.masks.join("aligned"), layout.masks.join("hierarchy"));
    create_dir(&aligned_dir)?;
    create_dir(&hier_dir)?;
    let records = ds
        .crops
        .par_iter()
        .enumerate()
        .map(|(i, c)| {
            let img = ImageCrop::load_png(&c.image_path)?;
            let r = hpm_pipeline(&img, &cfg.hpm, derive_seed(0, i as u64))?;
            r.aligned_image
                .save_png(&aligned_dir.join(format!("{}.png", c.id)))?;
            r.hierarchy
                .save_png(&hier_dir.join(format!("{}.png", c.id)))?;
            Ok(MaskRecord {
                id: c.id.clone(),
                h: r.hierarchy.h(),
                rotation_applied: r.rotation_applied,
                flags: r.quality_flags,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let path = layout.masks.join("masks.jsonl");
    let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    for r in &records {
        writeln!(
            f,
            "{}",
            serde_json::to_string(r).expect("record serializes")
        )
        .map_err(|e| Error::io(&path, e))?;
    }
    let flagged = records.iter().filter(|r| !r.flags.is_empty()).count();
    log::info!(
        "pseudo-masks for {} crops ({flagged} flagged) in {}",
        records.len(),
        layout.masks.display()
    );
    echo_config(
        &layout.masks,
        "masks",
        &[("data", layout.data.display().to_string())],
        cfg,
    )?;
    Ok(records)
}

/// Loads pseudo-masks for `ids`; every id must have been processed.
pub fn load_masks(layout: &Layout, ids: &[String]) -> Result<BTreeMap<String, MaskEntry>> {
    let path = layout.masks.join("masks.jsonl");
    let f = fs::File::open(&path).map_err(|e| {
        Error::Data(format!(
            "{}: {e}; run the `masks` stage first",
            path.display()
        ))
    })?;
    let mut records = BTreeMap::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let r: MaskRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Data(format!("{} line {}: {e}", path.display(), n + 1)))?;
        records.insert(r.id.clone(), r);
    }
    ids.par_iter()
        .map(|id| {
            let record = records
                .get(id)
                .ok_or_else(|| {
                    Error::Data(format!(
                        "crop {id} has no pseudo-mask in {}",
                        path.display()
                    ))
                })?
                .clone();
            let aligned =
                ImageCrop::load_png(&layout.masks.join("aligned").join(format!("{id}.png")))?;
            let hierarchy = MaskHierarchy::load_png(
                &layout.masks.join("hierarchy").join(format!("{id}.png")),
                record.h,
            )?;
            if (aligned.height(), aligned.width()) != (hierarchy.height(), hierarchy.width()) {
                return Err(Error::Data(format!(
                    "crop {id}: aligned crop and hierarchy sizes differ"
                )));
            }
            Ok((
                id.clone(),
                MaskEntry {
                    aligned,
                    hierarchy,
                    record,
                },
            ))
        })
        .collect()
}

/// Loads the dataset and its stratified split; writes the split to `<run>/folds.json`.
pub fn dataset_and_folds(layout: &Layout, cfg: &RunConfig) -> Result<(Dataset, FoldSplit)> {
    let ds = load_dataset(&layout.data, cfg.tune.lambda)?;
    let split = make_folds(&ds.strata(), cfg.folds.k, cfg.folds.seed)?;
    create_dir(&layout.run)?;
    let path = layout.run.join("folds.json");
    write_text(
        &path,
        &serde_json::to_string_pretty(&split).expect("split serializes"),
    )?;
    Ok((ds, split))
}

fn check_fold(split: &FoldSplit, fold: usize) -> Result<()> {
    if fold >= split.k {
        return Err(Error::InvalidArgument(format!(
            "fold {fold} outside 0..{}",
            split.k
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainReport {
    pub final_seg: Option<f64>,
    pub final_rot: Option<f64>,
    pub fallbacks: usize,
}

/// Distillation on the fold's training crops, then teacher masks for every crop.
pub fn pretrain_fold(
    layout: &Layout,
    cfg: &RunConfig,
    seed: u64,
    fold: usize,
) -> Result<PretrainReport> {
    let cfg = cfg.for_fold(seed, fold);
    let (ds, split) = dataset_and_folds(layout, &cfg)?;
    check_fold(&split, fold)?;
    let dir = layout.stage_dir(fold, "pretrain");
    create_dir(&dir)?;
    echo_config(
        &dir,
        "pretrain",
        &[
            ("data", layout.data.display().to_string()),
            ("fold", fold.to_string()),
            ("seed", seed.to_string()),
        ],
        &cfg,
    )?;
    let all: Vec<String> = ds.crops.iter().map(|c| c.id.clone()).collect();
    let masks = load_masks(layout, &all)?;
    let (train, _) = split.train_test(fold);
    let size = cfg.net.input_size;
    let samples = train
        .iter()
        .map(|id| {
            let m = &masks[id];
            PretrainSample::new(
                id,
                &m.aligned,
                &m.hierarchy,
                Some(m.record.rotation_applied),
                size,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let student = Params::init(
        &cfg.arch(ds.channels, 0),
        RunConfig::init_seed(seed, fold, false),
    )?;
    let mut pair = StudentTeacherPair::new(student, cfg.distill.ema_decay)?;
    let bases: Vec<BinaryMask> = all
        .iter()
        .map(|id| masks[id].hierarchy.base().clone())
        .collect();
    let sources: Vec<MaskSource<'_>> = all
        .iter()
        .zip(&bases)
        .map(|(id, b)| MaskSource {
            id,
            image: &masks[id].aligned,
            fallback: b,
        })
        .collect();
    log::info!("fold {fold}: pretraining on {} crops", samples.len());
    let export = |p: &StudentTeacherPair| {
        export_teacher_masks(p, &sources, size, cfg.distill.mask_threshold)
    };
    let (log, store) = match pretrain(&mut pair, &samples, &cfg.distill, export) {
        Ok(r) => r,
        Err(e) => {
            let p = dir.join("checkpoint.last_good.bin");
            checkpoint::save(&pair.teacher_f32(), &p)?;
            log::error!(
                "pretraining aborted; last good teacher saved to {}",
                p.display()
            );
            return Err(e);
        }
    };
    write_loss_curve(&dir.join("loss_curve.csv"), &log)?;
    checkpoint::save(&pair.teacher_f32(), &dir.join("checkpoint.bin"))?;
    checkpoint::save(&pair.student, &dir.join("student.bin"))?;
    store.save(&dir.join("teacher_masks"))?;
    Ok(PretrainReport {
        final_seg: log.iter().rev().find_map(|r| r.seg),
        final_rot: log.iter().rev().find_map(|r| r.rot),
        fallbacks: store.fallbacks.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
struct TuneMeta {
    pretrained: bool,
}

/// Tuning inputs for `ids`: aligned crops with teacher masks when pretrained,
/// or with the confident pseudo-mask otherwise.
fn tune_samples(
    layout: &Layout,
    ds: &Dataset,
    ids: &[String],
    fold: usize,
    pretrained: bool,
) -> Result<Vec<TuneSample>> {
    let masks = load_masks(layout, ids)?;
    let store = if pretrained {
        Some(TeacherMaskStore::load(
            &layout.stage_dir(fold, "pretrain").join("teacher_masks"),
        )?)
    } else {
        None
    };
    ids.iter()
        .map(|id| {
            let m = &masks[id];
            let mask = match &store {
                Some(s) => s
                    .get(id)
                    .ok_or_else(|| Error::Data(format!("crop {id} has no teacher mask")))?
                    .clone(),
                None => m.hierarchy.base().clone(),
            };
            let label = ds
                .get(id)
                .ok_or_else(|| Error::Data(format!("crop {id} not in dataset")))?
                .soft_label;
            Ok(TuneSample {
                id: id.clone(),
                image: m.aligned.clone(),
                mask,
                label,
            })
        })
        .collect()
}

/// Soft-tuning on the fold's training crops, from the pretrained teacher or from scratch.
pub fn tune_fold(
    layout: &Layout,
    cfg: &RunConfig,
    seed: u64,
    fold: usize,
    pretrained: bool,
) -> Result<()> {
    let cfg = cfg.for_fold(seed, fold);
    let (ds, split) = dataset_and_folds(layout, &cfg)?;
    check_fold(&split, fold)?;
    let dir = layout.stage_dir(fold, "tune");
    create_dir(&dir)?;
    echo_config(
        &dir,
        "tune",
        &[
            ("data", layout.data.display().to_string()),
            ("fold", fold.to_string()),
            ("seed", seed.to_string()),
            ("pretrained", pretrained.to_string()),
        ],
        &cfg,
    )?;
    let (train, _) = split.train_test(fold);
    let samples = tune_samples(layout, &ds, &train, fold, pretrained)?;
    let k = ds.num_classes();
    let head_seed = RunConfig::init_seed(seed, fold, true);
    let mut params = if pretrained {
        let ckpt = layout.stage_dir(fold, "pretrain").join("checkpoint.bin");
        checkpoint::load::<f32>(&ckpt)?.with_class_head(k, head_seed)?
    } else {
        Params::init(
            &cfg.arch(ds.channels, 0),
            RunConfig::init_seed(seed, fold, false),
        )?
        .with_class_head(k, head_seed)?
    };
    log::info!(
        "fold {fold}: tuning on {} crops ({})",
        samples.len(),
        if pretrained {
            "pretrained"
        } else {
            "from scratch"
        }
    );
    let log = match soft_tune(&mut params, &samples, None, cfg.net.input_size, &cfg.tune) {
        Ok(log) => log,
        Err(e) => {
            let p = dir.join("classifier.last_good.bin");
            checkpoint::save(&params, &p)?;
            log::error!(
                "tuning aborted; last good classifier saved to {}",
                p.display()
            );
            return Err(e);
        }
    };
    write_epoch_log(&dir.join("epochs.csv"), &log)?;
    checkpoint::save(&params, &dir.join("classifier.bin"))?;
    write_text(
        &dir.join("meta.json"),
        &serde_json::to_string(&TuneMeta { pretrained }).expect("meta serializes"),
    )
}

pub const METRIC_HEADER: [&str; 5] = ["fold", "accuracy", "recall", "precision", "f1"];

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| Error::Data(format!("{}: {e}", path.display()))
}

/// Scores the fold's tuned classifier on its held-out crops.
pub fn eval_fold(layout: &Layout, cfg: &RunConfig, fold: usize) -> Result<Metrics> {
    let (ds, split) = dataset_and_folds(layout, cfg)?;
    check_fold(&split, fold)?;
    let tune_dir = layout.stage_dir(fold, "tune");
    let meta_path = tune_dir.join("meta.json");
    let meta: TuneMeta = serde_json::from_str(&fs::read_to_string(&meta_path).map_err(|e| {
        Error::Data(format!(
            "{}: {e}; run the `tune` stage first",
            meta_path.display()
        ))
    })?)
    .map_err(|e| Error::Data(format!("{}: {e}", meta_path.display())))?;
    let params = checkpoint::load::<f32>(&tune_dir.join("classifier.bin"))?;
    let (_, test) = split.train_test(fold);
    let samples = tune_samples(layout, &ds, &test, fold, meta.pretrained)?;
    let (metrics, preds) = evaluate(
        &params,
        &samples,
        &cfg.tune.tta_policy()?,
        cfg.tune.end_dilations,
        cfg.net.input_size,
    )?;
    let dir = layout.stage_dir(fold, "eval");
    create_dir(&dir)?;
    echo_config(
        &dir,
        "eval",
        &[
            ("data", layout.data.display().to_string()),
            ("fold", fold.to_string()),
        ],
        cfg,
    )?;
    let path = dir.join("metrics.csv");
    let mut w = csv_writer(&path)?;
    w.write_record(METRIC_HEADER).map_err(csv_err(&path))?;
    w.write_record(metric_row(&fold.to_string(), &metrics))
        .map_err(csv_err(&path))?;
    w.flush().map_err(|e| Error::io(&path, e))?;
    write_predictions(&dir.join("predictions.csv"), &preds)?;
    log::info!(
        "fold {fold}: accuracy {:.4} recall {:.4} precision {:.4} f1 {:.4}",
        metrics.accuracy,
        metrics.recall,
        metrics.precision,
        metrics.f1
    );
    Ok(metrics)
}

fn metric_row(lead: &str, m: &Metrics) -> Vec<String> {
    let mut row = vec![lead.to_string()];
    row.extend(
        [m.accuracy, m.recall, m.precision, m.f1]
            .iter()
            .map(|v| v.to_string()),
    );
    row
}

fn write_predictions(path: &Path, preds: &[Prediction]) -> Result<()> {
    let mut w = csv_writer(path)?;
    for p in preds {
        w.serialize(p).map_err(csv_err(path))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FoldResult {
    pub run: usize,
    pub fold: usize,
    pub metrics: Metrics,
}

#[derive(Debug, Clone)]
pub struct RunAllOptions {
    pub seed: u64,
    pub runs: usize,
    /// Folds to run; all when empty.
    pub folds: Vec<usize>,
    pub pretrained: bool,
}

/// Mean and sample standard deviation.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// Masks once, then pretrain (unless skipped), tune and evaluate every fold of
/// every run. Run `r` uses master seed `seed + r`. Writes `metrics.csv` (one row
/// per run and fold) and `summary.csv` (mean and standard deviation) under `out`.
pub fn run_all(
    data: &Path,
    out: &Path,
    cfg: &RunConfig,
    opts: &RunAllOptions,
) -> Result<Vec<FoldResult>> {
    if opts.runs == 0 {
        return Err(Error::InvalidArgument("runs must be positive".into()));
    }
    let base = Layout::new(data, out);
    compute_masks(&base, cfg)?;
    let folds: Vec<usize> = if opts.folds.is_empty() {
        (0..cfg.folds.k).collect()
    } else {
        opts.folds.clone()
    };
    let mut results = Vec::new();
    for run in 0..opts.runs {
        let seed = opts.seed.wrapping_add(run as u64);
        let layout = if opts.runs == 1 {
            base.clone()
        } else {
            base.with_run(out.join(format!("run{run}")))
        };
        for &fold in &folds {
            if opts.pretrained {
                let rep = pretrain_fold(&layout, cfg, seed, fold)?;
                log::info!(
                    "fold {fold}: final seg {:?}, rot {:?}, {} mask fallbacks",
                    rep.final_seg,
                    rep.final_rot,
                    rep.fallbacks
                );
            }
            tune_fold(&layout, cfg, seed, fold, opts.pretrained)?;
            let metrics = eval_fold(&layout, cfg, fold)?;
            results.push(FoldResult { run, fold, metrics });
        }
    }
    write_run_metrics(out, &results)?;
    echo_config(
        out,
        "run-all",
        &[
            ("data", data.display().to_string()),
            ("seed", opts.seed.to_string()),
            ("runs", opts.runs.to_string()),
            ("pretrained", opts.pretrained.to_string()),
        ],
        cfg,
    )?;
    Ok(results)
}

fn write_run_metrics(out: &Path, results: &[FoldResult]) -> Result<()> {
    let path = out.join("metrics.csv");
    let mut w = csv_writer(&path)?;
    let mut header = vec!["run"];
    header.extend(METRIC_HEADER);
    w.write_record(&header).map_err(csv_err(&path))?;
    for r in results {
        let mut row = vec![r.run.to_string()];
        row.extend(metric_row(&r.fold.to_string(), &r.metrics));
        w.write_record(&row).map_err(csv_err(&path))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    let path = out.join("summary.csv");
    let mut w = csv_writer(&path)?;
    w.write_record(["metric", "mean", "std"])
        .map_err(csv_err(&path))?;
    type Pick = (&'static str, fn(&Metrics) -> f64);
    let pick: [Pick; 4] = [
        ("accuracy", |m| m.accuracy),
        ("recall", |m| m.recall),
        ("precision", |m| m.precision),
        ("f1", |m| m.f1),
    ];
    for (name, f) in pick {
        let v: Vec<f64> = results.iter().map(|r| f(&r.metrics)).collect();
        let (mean, std) = mean_std(&v);
        w.write_record([name.to_string(), mean.to_string(), std.to_string()])
            .map_err(csv_err(&path))?;
        log::info!("{name}: {mean:.4} ± {std:.4}");
    }
    w.flush().map_err(|e| Error::io(&path, e))
}

/// Side-by-side RGB panel: source crop, aligned crop with the confident mask
/// (red) and ignored ring (yellow), and the teacher mask (green) when given.
pub fn overlay_panel(
    source: &ImageCrop,
    entry: &MaskEntry,
    teacher: Option<&BinaryMask>,
) -> Result<ImageCrop> {
    let rgb = |img: &ImageCrop| -> ImageCrop {
        if img.channels() == 3 {
            img.clone()
        } else {
            let g = img.plane(0);
            ImageCrop::from_planes(img.height(), img.width(), &[g.clone(), g.clone(), g])
                .expect("same size")
        }
    };
    let tint = |img: &mut ImageCrop, m: &BinaryMask, color: [f32; 3]| {
        for y in 0..img.height() {
            for x in 0..img.width() {
                if m.get(x, y) {
                    for (c, &col) in color.iter().enumerate() {
                        let v = img.get(x, y, c);
                        img.set(x, y, c, 0.5 * v + 0.5 * col);
                    }
                }
            }
        }
    };
    let mut panels = vec![rgb(source)];
    let mut aligned = rgb(&entry.aligned);
    let base = entry.hierarchy.base();
    tint(
        &mut aligned,
        &entry.hierarchy.outer().difference(base)?,
        [1.0, 0.9, 0.0],
    );
    tint(&mut aligned, base, [1.0, 0.0, 0.0]);
    panels.push(aligned);
    if let Some(t) = teacher {
        let mut p = rgb(&entry.aligned);
        tint(&mut p, t, [0.0, 0.8, 0.0]);
        panels.push(p);
    }
    let gap = 2;
    let h = panels.iter().map(|p| p.height()).max().unwrap_or(0);
    let w = panels.iter().map(|p| p.width()).sum::<usize>() + gap * (panels.len() - 1);
    let mut out = ImageCrop::filled(h, w, 3, 1.0);
    let mut x0 = 0;
    for p in &panels {
        for y in 0..p.height() {
            for x in 0..p.width() {
                for c in 0..3 {
                    out.set(x0 + x, y, c, p.get(x, y, c));
                }
            }
        }
        x0 += p.width() + gap;
    }
    Ok(out)
}

/// Renders the overlay panel of crop `id` to `output`.
pub fn overlay(layout: &Layout, id: &str, fold: Option<usize>, output: &Path) -> Result<()> {
    let source = ImageCrop::load_png(&crate::data::dataset::image_path(&layout.data, id))?;
    let entry = load_masks(layout, &[id.to_string()])?
        .remove(id)
        .expect("loaded");
    let teacher = match fold {
        Some(f) => {
            let store =
                TeacherMaskStore::load(&layout.stage_dir(f, "pretrain").join("teacher_masks"))?;
            Some(
                store
                    .get(id)
                    .ok_or_else(|| Error::Data(format!("crop {id} has no teacher mask")))?
                    .clone(),
            )
        }
        None => None,
    };
    overlay_panel(&source, &entry, teacher.as_ref())?.save_png(output)
}
