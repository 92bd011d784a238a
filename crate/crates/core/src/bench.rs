//! Wall-clock scaling of the attention variants on synthetic surface clouds.

use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::attention::{windowed_attention, AttentionParams};
use crate::baselines::{cubic_attention, cubic_partition, global_attention, knn_sliding_attention, GLOBAL_ATTENTION_LIMIT};
use crate::cloud::QuantizedCloud;
use crate::error::{Error, Result};
use crate::octree::{build_octree, Octree};
use crate::partition::make_plan;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BenchVariant {
    Octree,
    Cubic,
    Knn,
    Global,
}

impl BenchVariant {
    pub fn name(self) -> &'static str {
        match self {
            Self::Octree => "octree",
            Self::Cubic => "cubic",
            Self::Knn => "knn",
            Self::Global => "global",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub sizes: Vec<usize>,
    pub variants: Vec<BenchVariant>,
    pub trials: usize,
    pub warmup: usize,
    pub channels: usize,
    pub heads: usize,
    /// Tokens per window for the octree variant.
    pub point_number: usize,
    pub dilation: usize,
    /// Neighbors per token for the kNN variant.
    pub neighbors: usize,
    /// Cube edge in leaf cells for the cubic variant.
    pub cube_size: u32,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            sizes: vec![10_000, 20_000, 50_000, 100_000, 200_000],
            variants: vec![BenchVariant::Octree, BenchVariant::Knn],
            trials: 3,
            warmup: 2,
            channels: 96,
            heads: 6,
            point_number: 32,
            dilation: 1,
            neighbors: 32,
            cube_size: 4,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sizes.is_empty() || self.variants.is_empty() {
            return Err(Error::Config("bench needs at least one size and one variant".into()));
        }
        if self.trials == 0 {
            return Err(Error::Config("bench needs at least one trial".into()));
        }
        if self.heads == 0 || !self.channels.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "{} channels do not split into {} heads",
                self.channels, self.heads
            )));
        }
        if self.point_number == 0 || self.dilation == 0 || self.neighbors == 0 || self.cube_size == 0 {
            return Err(Error::Config("window, dilation, neighbor and cube sizes must be positive".into()));
        }
        for &n in &self.sizes {
            if n == 0 {
                return Err(Error::Config("bench sizes must be positive".into()));
            }
            if self.variants.contains(&BenchVariant::Knn) && n < self.neighbors {
                return Err(Error::Config(format!("size {n} is smaller than the neighborhood")));
            }
            if self.variants.contains(&BenchVariant::Global) && n > GLOBAL_ATTENTION_LIMIT {
                return Err(Error::Resource(format!(
                    "global attention is limited to {GLOBAL_ATTENTION_LIMIT} tokens, size {n} requested"
                )));
            }
        }
        Ok(())
    }
}

/// One timing row. `checksum` is the sum of the last output and is not
/// written to the CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub variant: BenchVariant,
    pub n: usize,
    pub median_s: f64,
    pub iqr_s: f64,
    pub trials: usize,
    pub checksum: f64,
}

/// An octree with exactly `n` leaves sampled from the surfaces of a few
/// random spheres.
pub fn synthetic_octree(n: usize, seed: u64) -> Result<Octree> {
    if n == 0 {
        return Err(Error::EmptyInput("synthetic cloud of zero points".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spheres: Vec<([f64; 3], f64)> = (0..6)
        .map(|_| {
            let r = rng.random_range(0.08..0.2);
            ([0; 3].map(|_: i32| rng.random_range(r + 0.01..1.0 - r - 0.01)), r)
        })
        .collect();
    for depth in 4..=16u32 {
        let samples = 3 * n + 1000;
        let mut pts = Vec::with_capacity(samples);
        for _ in 0..samples {
            let (c, r) = spheres[rng.random_range(0..spheres.len())];
            let v: [f64; 3] = [0; 3].map(|_: i32| StandardNormal.sample(&mut rng));
            let len = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt().max(1e-12);
            pts.push([0, 1, 2].map(|a| c[a] + r * v[a] / len));
        }
        let tree = build_octree(&QuantizedCloud::new(pts, depth)?)?;
        let leaves = tree.num_leaves();
        if leaves < n {
            continue;
        }
        let side = (1u64 << depth) as f64;
        let centers: Vec<[f64; 3]> = (0..n)
            .map(|i| {
                let c = tree.coords(depth, i * leaves / n).expect("leaf index in range");
                c.map(|v| (v as f64 + 0.5) / side)
            })
            .collect();
        return build_octree(&QuantizedCloud::new(centers, depth)?);
    }
    Err(Error::Resource(format!("cannot place {n} distinct leaves")))
}

/// Linear-interpolated quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Median and interquartile range.
pub fn median_iqr(samples: &[f64]) -> (f64, f64) {
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    (quantile(&s, 0.5), quantile(&s, 0.75) - quantile(&s, 0.25))
}

/// Least-squares line `y = a + b x`, returning `(a, b, r²)`.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> (f64, f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let b = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let r2 = if syy > 0.0 { (b * sxy / syy).clamp(0.0, 1.0) } else { 1.0 };
    (my - b * mx, b, r2)
}

fn run_variant(
    variant: BenchVariant,
    cfg: &BenchConfig,
    tree: &Octree,
    x: &Tensor<f32>,
    params: &AttentionParams<f32>,
) -> Result<Tensor<f32>> {
    let depth = tree.depth();
    match variant {
        BenchVariant::Octree => {
            let plan = make_plan(x.rows(), cfg.point_number, cfg.dilation)?;
            windowed_attention(x, &plan, params)
        }
        BenchVariant::Cubic => {
            let part = cubic_partition(tree, depth, cfg.cube_size)?;
            cubic_attention(x, &part, params)
        }
        BenchVariant::Knn => knn_sliding_attention(x, tree, depth, cfg.neighbors, params),
        BenchVariant::Global => global_attention(x, params),
    }
}

/// Times every variant at every size. Each measurement includes building the
/// variant's grouping from the octree and the attention itself. `on_row` is
/// called as rows complete.
pub fn run_bench(cfg: &BenchConfig, seed: u64, mut on_row: impl FnMut(&BenchRow)) -> Result<Vec<BenchRow>> {
    cfg.validate()?;
    let params = AttentionParams::<f64>::random(cfg.channels, cfg.heads, 0.02, seed)?.cast::<f32>();
    let mut rows = Vec::new();
    for &n in &cfg.sizes {
        let tree = synthetic_octree(n, seed ^ n as u64)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(n as u64));
        let x = Tensor::from_fn(&[n, cfg.channels], |_| StandardNormal.sample(&mut rng));
        for &variant in &cfg.variants {
            for _ in 0..cfg.warmup {
                run_variant(variant, cfg, &tree, &x, &params)?;
            }
            let mut times = Vec::with_capacity(cfg.trials);
            let mut out = None;
            for _ in 0..cfg.trials {
                let t = Instant::now();
                let y = run_variant(variant, cfg, &tree, &x, &params)?;
                times.push(t.elapsed().as_secs_f64());
                out = Some(y);
            }
            let checksum = out.map_or(0.0, |y| y.data().iter().map(|&v| v as f64).sum());
            let (median_s, iqr_s) = median_iqr(&times);
            let row = BenchRow {
                variant,
                n,
                median_s,
                iqr_s,
                trials: cfg.trials,
                checksum,
            };
            on_row(&row);
            rows.push(row);
        }
    }
    Ok(rows)
}

pub fn write_bench_csv<W: Write>(mut w: W, rows: &[BenchRow]) -> Result<()> {
    writeln!(w, "variant,n,median_s,iqr_s,trials")?;
    for r in rows {
        writeln!(w, "{},{},{:.9},{:.9},{}", r.variant.name(), r.n, r.median_s, r.iqr_s, r.trials)?;
    }
    Ok(())
}
