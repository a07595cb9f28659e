//! Run configuration: preset defaults, an optional TOML overlay, then
//! command-line overrides.

use std::fs;
use std::path::{Path, PathBuf};

use colomil_core::eval::DEFAULT_KS;
use colomil_core::mil::{MilConfig, SamplingScope, DEFAULT_SAMPLE_CAP, DEFAULT_TOP_N};
use colomil_core::scorer::{ScorerConfig, TrainConfig};
use colomil_core::tiler::{DEFAULT_TILE_SIZE, DEFAULT_TISSUE_THRESHOLD};
use colomil_core::tissue::DEFAULT_MASK_FACTOR;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: String,
    pub manifest: PathBuf,
    pub workdir: PathBuf,
    /// Checkpoint written by `train` and read by `infer`; defaults to
    /// `<workdir>/checkpoints/model.ckpt`.
    pub checkpoint: Option<PathBuf>,
    /// Directory of `<id>.truth.jsonl` tile labels for every slide, used
    /// by retention analysis.
    pub truth_dir: Option<PathBuf>,
    pub tile_size: u32,
    pub mask_factor: u32,
    pub tissue_threshold: f64,
    pub scorer: ScorerConfig,
    pub train: TrainConfig,
    pub m: usize,
    pub top_n: usize,
    pub ks: Vec<usize>,
    pub scope: SamplingScope,
    pub sample_validation: bool,
    /// Rank every training tile at each weak epoch for retention curves.
    pub record_rankings: bool,
    /// Worker threads; 0 uses every core.
    pub threads: usize,
}

impl RunConfig {
    /// Full-size tiles and the published schedule.
    pub fn full() -> Self {
        Self {
            preset: "full".into(),
            manifest: PathBuf::from("manifest.jsonl"),
            workdir: PathBuf::from("work"),
            checkpoint: None,
            truth_dir: None,
            tile_size: DEFAULT_TILE_SIZE,
            mask_factor: DEFAULT_MASK_FACTOR,
            tissue_threshold: DEFAULT_TISSUE_THRESHOLD,
            scorer: ScorerConfig::full_tile(),
            train: TrainConfig::default(),
            m: DEFAULT_SAMPLE_CAP,
            top_n: DEFAULT_TOP_N,
            ks: DEFAULT_KS.to_vec(),
            scope: SamplingScope::TrainAndVal,
            sample_validation: true,
            record_rankings: false,
            threads: 0,
        }
    }

    /// 64px tiles, a two-block network and a short schedule that runs on a
    /// laptop in minutes.
    pub fn desk() -> Self {
        Self {
            preset: "desk".into(),
            tile_size: 64,
            mask_factor: 4,
            scorer: ScorerConfig::desk(),
            train: TrainConfig {
                lr: 3e-3,
                weight_decay: 1e-5,
                batch_train: 16,
                batch_infer: 256,
                epochs_full: 5,
                epochs_weak: 5,
                seed: 0,
                deterministic: true,
            },
            m: 20,
            ks: DEFAULT_KS.iter().map(|k| k.div_ceil(10)).collect(),
            record_rankings: true,
            ..Self::full()
        }
    }

    pub fn preset(name: &str) -> Result<Self, CliError> {
        match name {
            "full" => Ok(Self::full()),
            "desk" => Ok(Self::desk()),
            other => Err(CliError::Config(format!(
                "unknown preset `{other}` (expected full or desk)"
            ))),
        }
    }

    /// Reads a TOML file over its preset's defaults. Relative paths in the
    /// file resolve against the file's directory.
    pub fn load(path: &Path, fallback_preset: &str) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let overlay: toml::Table = text
            .parse()
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let preset = overlay
            .get("preset")
            .and_then(|v| v.as_str())
            .unwrap_or(fallback_preset);
        let base = Self::preset(preset)?;
        let mut merged = toml::Table::try_from(&base)
            .map_err(|e| CliError::Config(format!("preset does not serialize: {e}")))?;
        merge(&mut merged, overlay);
        let mut cfg: Self = toml::Value::Table(merged)
            .try_into()
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let dir = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.manifest, &mut cfg.workdir] {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        }
        for p in [cfg.checkpoint.as_mut(), cfg.truth_dir.as_mut()].into_iter().flatten() {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint
            .clone()
            .unwrap_or_else(|| self.workdir.join("checkpoints/model.ckpt"))
    }

    pub fn mil(&self) -> MilConfig {
        MilConfig {
            train: self.train.clone(),
            m: self.m,
            top_n: self.top_n,
            scope: self.scope,
            sample_validation: self.sample_validation,
            record_full_rankings: self.record_rankings,
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        self.scorer.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.train.validate().map_err(|e| CliError::Config(e.to_string()))?;
        if self.m == 0 || self.top_n == 0 {
            return bad("M and top_n must be at least 1".into());
        }
        if !self.mask_factor.is_power_of_two() {
            return bad(format!("mask factor {} is not a power of two", self.mask_factor));
        }
        if self.tile_size % self.mask_factor != 0 {
            return bad(format!(
                "tile size {} is not a multiple of the mask factor {}",
                self.tile_size, self.mask_factor
            ));
        }
        let side = self.scorer.input_size;
        if self.tile_size % side != 0 || !(self.tile_size / side).is_power_of_two() {
            return bad(format!(
                "tile size {} must be a power-of-two multiple of the network input {side}",
                self.tile_size
            ));
        }
        if !(0.0..=1.0).contains(&self.tissue_threshold) {
            return bad(format!("tissue threshold {} is outside [0, 1]", self.tissue_threshold));
        }
        if self.ks.is_empty() || self.ks.contains(&0) {
            return bad("ks must be a non-empty list of positive integers".into());
        }
        Ok(())
    }
}

fn merge(base: &mut toml::Table, overlay: toml::Table) {
    for (k, v) in overlay {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        RunConfig::full().validate().unwrap();
        RunConfig::desk().validate().unwrap();
        assert_eq!(RunConfig::desk().ks, vec![5, 8, 10, 15, 20]);
    }

    #[test]
    fn toml_overlay_keeps_unlisted_fields() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        fs::write(&path, "preset = \"desk\"\nm = 7\n[train]\nepochs_weak = 2\n").unwrap();
        let cfg = RunConfig::load(&path, "full").unwrap();
        assert_eq!(cfg.m, 7);
        assert_eq!(cfg.train.epochs_weak, 2);
        assert_eq!(cfg.train.epochs_full, RunConfig::desk().train.epochs_full);
        assert_eq!(cfg.manifest, dir.path().join("manifest.jsonl"));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        fs::write(&path, "bogus = 1\n").unwrap();
        assert!(matches!(RunConfig::load(&path, "full"), Err(CliError::Config(_))));
    }

    #[test]
    fn tile_must_be_multiple_of_input() {
        let mut cfg = RunConfig::desk();
        cfg.tile_size = 96;
        assert!(cfg.validate().is_err());
    }
}
