//! Run configuration: one TOML file with a section per stage, every field optional.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::distill::DistillConfig;
use crate::error::{Error, Result};
use crate::hpm::HpmParams;
use crate::seed::derive_seed;
use crate::tinynn::Arch;
use crate::tune::TuneConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    /// Side of the square network input; crops are resized to it.
    pub input_size: usize,
    pub widths: Vec<usize>,
    pub decoder_width: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            input_size: 32,
            widths: vec![8, 16, 32],
            decoder_width: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FoldConfig {
    pub k: usize,
    /// Split seed, kept apart from the training seed so repeated runs share folds.
    pub seed: u64,
}

impl Default for FoldConfig {
    fn default() -> Self {
        Self { k: 5, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub hpm: HpmParams,
    pub net: NetConfig,
    pub distill: DistillConfig,
    pub tune: TuneConfig,
    pub folds: FoldConfig,
}

/// Sets `a.b.c = value` in a TOML table; `value` is parsed as TOML, or taken
/// as a bare string when it does not parse.
fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
    let value = match format!("v = {}", raw.trim()).parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.trim().to_string()),
    };
    let parts: Vec<&str> = key.trim().split('.').collect();
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        cur = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {key:?}: {p} is not a section")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

impl RunConfig {
    /// Reads `path` (defaults when absent), applies `key=value` overrides and validates.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
                text.parse::<toml::Table>()
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let h = &self.hpm;
        if h.h == 0 || !(0.0..=1.0).contains(&h.tau_h) || !(h.dmax_factor > 0.0) {
            return bad(format!(
                "hpm: need h >= 1, tau_h in [0, 1], dmax_factor > 0; got {h:?}"
            ));
        }
        if h.nlm.patch.is_multiple_of(2)
            || h.nlm.search.is_multiple_of(2)
            || !(h.nlm.strength > 0.0)
        {
            return bad(format!(
                "hpm.nlm: patch and search must be odd and strength positive; got {:?}",
                h.nlm
            ));
        }
        self.arch(1, 0)
            .validate()
            .map_err(|e| Error::Config(format!("net: {e}")))?;
        let div = 1usize << self.net.widths.len();
        if self.net.input_size == 0 || !self.net.input_size.is_multiple_of(div) {
            return bad(format!(
                "net.input_size {} must be a positive multiple of {div}",
                self.net.input_size
            ));
        }
        self.distill.validate()?;
        self.tune.validate()?;
        if self.folds.k < 2 {
            return bad(format!("folds.k must be at least 2, got {}", self.folds.k));
        }
        Ok(())
    }

    pub fn arch(&self, in_channels: usize, num_classes: usize) -> Arch {
        Arch {
            in_channels,
            widths: self.net.widths.clone(),
            decoder_width: self.net.decoder_width,
            num_classes,
        }
    }

    /// Copy with the stage seeds derived from the master seed and fold.
    pub fn for_fold(&self, seed: u64, fold: usize) -> Self {
        let mut c = self.clone();
        // 63 bits keep the seeds representable as TOML integers
        c.distill.seed = derive_seed(seed, 2000 + fold as u64) >> 1;
        c.tune.seed = derive_seed(seed, 3000 + fold as u64) >> 1;
        c
    }

    /// Seed for network initialisation (`head = true`: the class head).
    pub fn init_seed(seed: u64, fold: usize, head: bool) -> u64 {
        derive_seed(seed, if head { 4000 } else { 1000 } + fold as u64)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
