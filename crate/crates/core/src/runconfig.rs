//! The JSON document driving `train-toy`, `bench`, and the file-based
//! commands.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bench::BenchConfig;
use crate::error::{Error, Result};
use crate::nn::data::{octant_cloud, octant_config, sphere_and_plane, toy_config};
use crate::nn::{NetworkConfig, Sample, TrainConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    #[default]
    Toy,
    Octant,
    Small,
    Base,
    Large,
}

/// Fields replacing the preset's values when present.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkOverrides {
    pub channels: Option<usize>,
    pub block_counts: Option<[usize; 4]>,
    pub point_number: Option<usize>,
    pub dilation: Option<usize>,
    pub head_divisor: Option<usize>,
    pub num_classes: Option<usize>,
    pub use_cpe: Option<bool>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    #[default]
    SpherePlane,
    Octant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    pub clouds: usize,
    pub points_per_part: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            kind: DatasetKind::SpherePlane,
            clouds: 5,
            points_per_part: 1000,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub checkpoint: Option<PathBuf>,
    pub history_csv: Option<PathBuf>,
    pub bench_csv: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Replaces the preset's octree depth.
    pub octree_depth: Option<u32>,
    /// Voxel edge in file units at the octree depth; unset fits the bounding box.
    pub scale: Option<f64>,
    pub preset: Preset,
    pub network: NetworkOverrides,
    pub dataset: DatasetConfig,
    pub train: TrainConfig,
    pub bench: BenchConfig,
    pub output: OutputConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(s) = self.scale {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::Config(format!("scale {s} must be positive")));
            }
        }
        if self.dataset.clouds == 0 || !(1..=1_000_000).contains(&self.dataset.points_per_part) {
            return Err(Error::Config("dataset needs at least one cloud and 1..=1e6 points per part".into()));
        }
        self.network()?;
        self.train_config().validate()
    }

    /// The preset with overrides applied, validated.
    pub fn network(&self) -> Result<NetworkConfig> {
        let mut c = match self.preset {
            Preset::Toy => toy_config(),
            Preset::Octant => octant_config(true),
            Preset::Small => NetworkConfig::small(),
            Preset::Base => NetworkConfig::base(),
            Preset::Large => NetworkConfig::large(),
        };
        let o = &self.network;
        c.channels = o.channels.unwrap_or(c.channels);
        c.block_counts = o.block_counts.unwrap_or(c.block_counts);
        c.point_number = o.point_number.unwrap_or(c.point_number);
        c.dilation = o.dilation.unwrap_or(c.dilation);
        c.head_divisor = o.head_divisor.unwrap_or(c.head_divisor);
        c.num_classes = o.num_classes.unwrap_or(c.num_classes);
        c.use_cpe = o.use_cpe.unwrap_or(c.use_cpe);
        c.octree_depth = self.octree_depth.unwrap_or(c.octree_depth);
        c.validate()?;
        Ok(c)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    /// The synthetic training set described by `dataset`.
    pub fn dataset(&self) -> Result<Vec<Sample>> {
        match self.dataset.kind {
            DatasetKind::SpherePlane => sphere_and_plane(self.seed, self.dataset.clouds, self.dataset.points_per_part),
            DatasetKind::Octant => Ok(vec![octant_cloud()?]),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_overrides() {
        let c = RunConfig::from_json(r#"{"seed": 3, "network": {"channels": 32}, "train": {"epochs": 7}}"#).unwrap();
        let n = c.network().unwrap();
        assert_eq!((n.channels, n.num_classes), (32, 2));
        assert_eq!(c.train_config().seed, 3);
        assert_eq!(c.train_config().epochs, 7);
    }

    #[test]
    fn rejects_unknown_and_out_of_range() {
        assert!(RunConfig::from_json(r#"{"sed": 3}"#).is_err());
        assert!(RunConfig::from_json(r#"{"train": {"seed": 3}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"octree_depth": 3}"#).is_err());
        assert!(RunConfig::from_json(r#"{"scale": -1}"#).is_err());
        assert!(RunConfig::from_json(r#"{"network": {"channels": 12}}"#).is_err());
    }
}
