//! `train.toml` and the block manifests written by `partition`.
//!
//! ```toml
//! iterations = 2000
//! rates = "desk"          # or "standard" (default)
//! eval_every = 500
//!
//! [lr.fusion]             # any of sampler, fusion, appearance, anchor, opacity
//! start = 3e-3
//! end = 1e-4
//!
//! [weights]
//! ssim = 0.2
//! l1 = 0.8
//! proj = 0.01
//! vol = 0.01
//!
//! [rotation]
//! blocks = "blocks"       # directory of block_*.json, relative to this file
//! slots = 2
//! period = 100            # defaults to the scene's rotation period
//! ```
//!
//! Without `views`, training uses the scene's train split when it has one
//! and every view with an image otherwise.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use splatwave_core::losses::LossWeights;
use splatwave_core::partition::BlockManifest;
use splatwave_core::trainer::{BlockSchedule, LrSchedule, TrainConfig};

use crate::error::{file_err, format_err, IoError, Result};
use crate::scene_file::Splits;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Rates {
    #[default]
    Standard,
    Desk,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrOverrides {
    pub sampler: Option<LrSchedule>,
    pub fusion: Option<LrSchedule>,
    pub appearance: Option<LrSchedule>,
    pub anchor: Option<LrSchedule>,
    pub opacity: Option<LrSchedule>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RotationFile {
    pub blocks: PathBuf,
    pub slots: usize,
    pub period: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainFile {
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub rates: Rates,
    #[serde(default)]
    pub eval_every: usize,
    pub views: Option<Vec<u32>>,
    #[serde(default)]
    pub lr: LrOverrides,
    pub weights: Option<LossWeights>,
    pub rotation: Option<RotationFile>,
}

fn default_iterations() -> usize {
    TrainConfig::default().iterations
}

impl TrainFile {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(file_err(path))?;
        toml::from_str(&text).map_err(|source| IoError::Toml { path: path.to_path_buf(), source })
    }

    /// Resolves rates, views and the rotation schedule. `base` anchors
    /// relative paths; `rotation_period` is the scene's default period.
    pub fn to_config(&self, base: &Path, splits: Option<&Splits>, rotation_period: usize) -> Result<TrainConfig> {
        let mut c = match self.rates {
            Rates::Standard => TrainConfig { iterations: self.iterations, ..TrainConfig::default() },
            Rates::Desk => TrainConfig::desk(self.iterations),
        };
        c.seed = self.seed;
        c.eval_every = self.eval_every;
        c.weights = self.weights;
        let o = &self.lr;
        for (slot, over) in [
            (&mut c.lr_sampler, o.sampler),
            (&mut c.lr_fusion, o.fusion),
            (&mut c.lr_appearance, o.appearance),
            (&mut c.lr_anchor, o.anchor),
            (&mut c.lr_opacity, o.opacity),
        ] {
            if let Some(s) = over {
                *slot = s;
            }
        }
        c.views = self.views.clone().or_else(|| splits.map(|s| s.train.clone()));
        if let Some(r) = &self.rotation {
            let blocks = read_blocks(&base.join(&r.blocks))?;
            let allowed = c.views.clone();
            let blocks = blocks
                .iter()
                .map(|b| b.camera_ids().into_iter().filter(|id| allowed.as_ref().is_none_or(|v| v.contains(id))).collect())
                .collect();
            c.schedule = Some(BlockSchedule { blocks, slots: r.slots, period: r.period.unwrap_or(rotation_period) });
        }
        c.validate()?;
        Ok(c)
    }
}

/// File name of block `id` inside a partition directory.
pub fn block_file_name(id: usize) -> String {
    format!("block_{id:03}.json")
}

pub fn write_block(dir: &Path, block: &BlockManifest) -> Result<()> {
    let path = dir.join(block_file_name(block.id));
    let text = serde_json::to_string_pretty(block).map_err(|source| IoError::Json { path: path.clone(), source })?;
    fs::write(&path, text).map_err(file_err(&path))
}

/// Every `block_*.json` in `dir`, ordered by block id.
pub fn read_blocks(dir: &Path) -> Result<Vec<BlockManifest>> {
    let mut blocks = Vec::new();
    for entry in fs::read_dir(dir).map_err(file_err(dir))? {
        let path = entry.map_err(file_err(dir))?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        if name.starts_with("block_") && name.ends_with(".json") {
            let text = fs::read_to_string(&path).map_err(file_err(&path))?;
            blocks.push(serde_json::from_str::<BlockManifest>(&text).map_err(|source| IoError::Json { path, source })?);
        }
    }
    if blocks.is_empty() {
        return Err(format_err(dir, "no block_*.json manifests"));
    }
    blocks.sort_by_key(|b| b.id);
    Ok(blocks)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_rates_with_overrides() {
        let f: TrainFile = toml::from_str("iterations = 10\nrates = \"desk\"\n[lr.fusion]\nstart = 1e-3\nend = 1e-3\n").unwrap();
        let c = f.to_config(Path::new("."), None, 100).unwrap();
        assert_eq!(c.iterations, 10);
        assert_eq!(c.lr_fusion, LrSchedule::new(1e-3, 1e-3));
        assert_eq!(c.lr_sampler, TrainConfig::desk(10).lr_sampler);
        assert_eq!(c.views, None);
    }

    #[test]
    fn split_supplies_default_views() {
        let f: TrainFile = toml::from_str("").unwrap();
        let splits = Splits { train: vec![0, 2], heldout: vec![1] };
        let c = f.to_config(Path::new("."), Some(&splits), 100).unwrap();
        assert_eq!(c.views, Some(vec![0, 2]));
        assert_eq!(c.iterations, TrainConfig::default().iterations);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<TrainFile>("iteration = 3").is_err());
    }
}
