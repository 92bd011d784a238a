//! Seeded synthetic datasets for training checks.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{NetworkConfig, Task, Variant};
use super::train::Sample;
use crate::cloud::QuantizedCloud;
use crate::error::Result;

/// Small network used by the synthetic training tasks.
pub fn toy_config() -> NetworkConfig {
    NetworkConfig {
        variant: Variant::Custom,
        channels: 16,
        block_counts: [1, 1, 1, 1],
        head_divisor: 16,
        octree_depth: 7,
        use_position: true,
        use_color: false,
        use_normal: true,
        num_classes: 2,
        task: Task::Segmentation,
        fpn_channels: 32,
        head_hidden: 32,
        ..NetworkConfig::base()
    }
}

/// Clouds of a sphere (label 0) resting above a square plane (label 1), each
/// with about `2 * points_per_part` points and unit normals.
pub fn sphere_and_plane(seed: u64, clouds: usize, points_per_part: usize) -> Result<Vec<Sample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..clouds)
        .map(|_| {
            let z0 = rng.random_range(0.15..0.3);
            let r = rng.random_range(0.15..0.22);
            let cx = rng.random_range(0.35..0.65);
            let cy = rng.random_range(0.35..0.65);
            let cz = z0 + r + rng.random_range(0.03..0.08);
            let mut pos = Vec::with_capacity(2 * points_per_part);
            let mut nrm = Vec::with_capacity(2 * points_per_part);
            let mut labels = Vec::with_capacity(2 * points_per_part);
            for _ in 0..points_per_part {
                let u: f64 = rng.random_range(-1.0..1.0);
                let phi: f64 = rng.random_range(0.0..2.0 * PI);
                let s = (1.0 - u * u).sqrt();
                let n = [s * phi.cos(), s * phi.sin(), u];
                pos.push([cx + r * n[0], cy + r * n[1], cz + r * n[2]]);
                nrm.push(n);
                labels.push(0);
            }
            for _ in 0..points_per_part {
                pos.push([rng.random_range(0.05..0.95), rng.random_range(0.05..0.95), z0]);
                nrm.push([0.0, 0.0, 1.0]);
                labels.push(1);
            }
            Ok(Sample {
                cloud: QuantizedCloud::new(pos, 7)?.with_normals(nrm)?,
                labels,
            })
        })
        .collect()
}

/// Network for the octant task: color input only, eight classes.
pub fn octant_config(use_cpe: bool) -> NetworkConfig {
    NetworkConfig {
        use_position: false,
        use_color: true,
        use_normal: false,
        num_classes: 8,
        use_cpe,
        ..toy_config()
    }
}

/// One point in every cell of the 16³ grid at depth 4, all at the same
/// sub-cell offset and with the same color; the label is the octant of the
/// unit cube the point lies in. Depth-7 octree.
pub fn octant_cloud() -> Result<Sample> {
    let mut pos = Vec::with_capacity(4096);
    let mut labels = Vec::with_capacity(4096);
    for x in 0..16u32 {
        for y in 0..16u32 {
            for z in 0..16u32 {
                pos.push([x, y, z].map(|v| (v as f64 + 0.3) / 16.0));
                labels.push(((x / 8) * 4 + (y / 8) * 2 + z / 8) as usize);
            }
        }
    }
    let colors = vec![[0.5, 0.5, 0.5]; pos.len()];
    Ok(Sample {
        cloud: QuantizedCloud::new(pos, 7)?.with_colors(colors)?,
        labels,
    })
}
