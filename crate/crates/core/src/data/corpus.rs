//! Synthetic labeled corpora with simulated expert votes.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dataset::{image_path, write_votes};
use super::synth::{generate_crop, random_spec, FramePreset, SyntheticSpec, CLASS_NAMES};
use crate::error::{Error, Result};
use crate::seed::derive_seed;

/// Class counts of the 35×35 gray reference dataset.
pub const SCIAN_MIX: [usize; 5] = [100, 228, 76, 656, 72];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    /// Total crops when `class_counts` is absent, split evenly over `num_classes`.
    pub n: usize,
    pub num_classes: usize,
    pub class_counts: Option<Vec<usize>>,
    pub frame: FramePreset,
    pub noise: f64,
    /// Probability that one of the three experts votes for another class.
    pub dissent_rate: f64,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            n: 200,
            num_classes: 4,
            class_counts: None,
            frame: FramePreset::Desk64,
            noise: 0.05,
            dissent_rate: 0.2,
            seed: 0,
        }
    }
}

/// One manifest line: the crop id, its votes and the parameters that render it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusEntry {
    pub id: String,
    pub votes: Vec<usize>,
    pub spec: SyntheticSpec,
}

/// Deterministic corpus plan: class per crop, votes and rendering spec.
pub fn plan_corpus(cfg: &CorpusConfig) -> Result<Vec<CorpusEntry>> {
    if cfg.num_classes < 2 || cfg.num_classes > CLASS_NAMES.len() {
        return Err(Error::InvalidArgument(format!(
            "num_classes must be in 2..={}, got {}",
            CLASS_NAMES.len(),
            cfg.num_classes
        )));
    }
    if !(0.0..=1.0).contains(&cfg.dissent_rate) || !(cfg.noise >= 0.0) {
        return Err(Error::InvalidArgument(
            "dissent_rate must be in [0, 1] and noise >= 0".into(),
        ));
    }
    let classes: Vec<usize> = match &cfg.class_counts {
        Some(counts) => {
            if counts.len() != cfg.num_classes {
                return Err(Error::InvalidArgument(format!(
                    "{} class counts for {} classes",
                    counts.len(),
                    cfg.num_classes
                )));
            }
            // interleave classes so any prefix is roughly stratified
            let mut left = counts.clone();
            let mut out = Vec::with_capacity(counts.iter().sum());
            while left.iter().any(|&c| c > 0) {
                for (c, l) in left.iter_mut().enumerate() {
                    if *l > 0 {
                        out.push(c);
                        *l -= 1;
                    }
                }
            }
            out
        }
        None => (0..cfg.n).map(|i| i % cfg.num_classes).collect(),
    };
    Ok(classes
        .iter()
        .enumerate()
        .map(|(i, &class)| {
            let s = derive_seed(cfg.seed, i as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let mut votes = vec![class; 3];
            if rng.random::<f64>() < cfg.dissent_rate {
                let other = (class + rng.random_range(1..cfg.num_classes)) % cfg.num_classes;
                votes[rng.random_range(0..3)] = other;
            }
            CorpusEntry {
                id: format!("s{i:05}"),
                votes,
                spec: random_spec(class, cfg.frame, cfg.noise, s),
            }
        })
        .collect())
}

/// Renders a corpus into `out`: `images/`, `votes.csv`, `classes.txt` and `manifest.jsonl`.
pub fn generate_corpus(cfg: &CorpusConfig, out: &Path) -> Result<Vec<CorpusEntry>> {
    let entries = plan_corpus(cfg)?;
    let img_dir = out.join("images");
    fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    entries.par_iter().try_for_each(|e| {
        let (img, _) = generate_crop(&e.spec)?;
        img.save_png(&image_path(out, &e.id))
    })?;
    let votes: Vec<_> = entries
        .iter()
        .map(|e| (e.id.clone(), e.votes.clone()))
        .collect();
    write_votes(&out.join("votes.csv"), &votes)?;
    let classes_path = out.join("classes.txt");
    let names = CLASS_NAMES[..cfg.num_classes].join("\n") + "\n";
    fs::write(&classes_path, names).map_err(|e| Error::io(&classes_path, e))?;
    write_manifest(&out.join("manifest.jsonl"), &entries)?;
    Ok(entries)
}

pub fn write_manifest(path: &Path, entries: &[CorpusEntry]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for e in entries {
        let line = serde_json::to_string(e).expect("manifest entry serializes");
        writeln!(f, "{line}").map_err(|err| Error::io(path, err))?;
    }
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<CorpusEntry>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    BufReader::new(f)
        .lines()
        .enumerate()
        .filter(|(_, l)| l.as_ref().map_or(true, |l| !l.trim().is_empty()))
        .map(|(i, l)| {
            let l = l.map_err(|e| Error::io(path, e))?;
            serde_json::from_str(&l)
                .map_err(|e| Error::Data(format!("{} line {}: {e}", path.display(), i + 1)))
        })
        .collect()
}
