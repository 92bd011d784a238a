//! Octrees storing only non-empty nodes, one sorted key array per depth.

use std::io::{Read, Write};
use std::ops::Range;
use std::sync::Arc;

use crate::cloud::QuantizedCloud;
use crate::error::{Error, Result};
use crate::morton::{deinterleave, interleave};
use crate::par;
use crate::tensor::{Scalar, Tensor, ABSENT};

const DUMP_MAGIC: &[u8; 4] = b"OCTF";
const DUMP_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq)]
struct Level {
    keys: Vec<u64>,
    /// Index of each node's parent one level up (empty at depth 0).
    parent: Vec<u32>,
    /// CSR offsets into the next level: children of node `i` are
    /// `child_start[i]..child_start[i + 1]`.
    child_start: Vec<u32>,
}

/// Non-empty octree nodes of a point cloud, sorted by shuffled key at every
/// depth. Depth 0 holds the root.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Octree {
    levels: Vec<Level>,
    point_leaf: Vec<u32>,
}

/// Row-major `(rows, taps)` table of node indices, [`ABSENT`] for missing nodes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IndexTable {
    pub rows: usize,
    pub taps: usize,
    pub idx: Arc<[u32]>,
}

impl IndexTable {
    pub fn get(&self, row: usize, tap: usize) -> u32 {
        self.idx[row * self.taps + tap]
    }

    pub fn row(&self, row: usize) -> &[u32] {
        &self.idx[row * self.taps..(row + 1) * self.taps]
    }
}

/// Smallest multiple of `k * d` that is at least `n`.
pub fn filter_and_pad_count(n: usize, k: usize, d: usize) -> usize {
    let block = k * d;
    n.div_ceil(block) * block
}

pub fn build_octree(cloud: &QuantizedCloud) -> Result<Octree> {
    if cloud.is_empty() {
        return Err(Error::EmptyInput("cannot build an octree from an empty cloud".into()));
    }
    let depth = cloud.depth() as usize;
    let point_codes: Vec<u64> = par::map_range(cloud.len(), |i| {
        let [x, y, z] = cloud.cell(i);
        interleave(x, y, z)
    });
    let mut leaves = point_codes.clone();
    par::sort_unstable(&mut leaves);
    leaves.dedup();
    let point_leaf = par::map_range(point_codes.len(), |i| {
        leaves.binary_search(&point_codes[i]).expect("leaf code present") as u32
    });

    let mut keys_per_depth = vec![leaves];
    for _ in 0..depth {
        let mut up: Vec<u64> = keys_per_depth.last().unwrap().iter().map(|c| c >> 3).collect();
        up.dedup();
        keys_per_depth.push(up);
    }
    keys_per_depth.reverse();

    let mut levels: Vec<Level> = keys_per_depth
        .into_iter()
        .map(|keys| Level {
            keys,
            parent: Vec::new(),
            child_start: Vec::new(),
        })
        .collect();
    for l in 1..=depth {
        let (upper, lower) = levels.split_at_mut(l);
        let up = &mut upper[l - 1];
        let cur = &mut lower[0];
        let mut parent = Vec::with_capacity(cur.keys.len());
        let mut starts = Vec::with_capacity(up.keys.len() + 1);
        let mut p = 0usize;
        starts.push(0u32);
        for (i, &code) in cur.keys.iter().enumerate() {
            while up.keys[p] != code >> 3 {
                p += 1;
                starts.push(i as u32);
            }
            parent.push(p as u32);
        }
        while starts.len() <= up.keys.len() {
            starts.push(cur.keys.len() as u32);
        }
        cur.parent = parent;
        up.child_start = starts;
    }
    let leaf = levels.last_mut().unwrap();
    leaf.child_start = vec![0; leaf.keys.len() + 1];
    Ok(Octree { levels, point_leaf })
}

impl Octree {
    /// Maximum depth (the leaf level).
    pub fn depth(&self) -> u32 {
        (self.levels.len() - 1) as u32
    }

    fn level(&self, depth: u32) -> Result<&Level> {
        self.levels
            .get(depth as usize)
            .ok_or_else(|| Error::Range(format!("depth {depth} exceeds octree depth {}", self.depth())))
    }

    /// Sorted codes of the non-empty nodes at `depth`.
    pub fn keys(&self, depth: u32) -> Result<&[u64]> {
        Ok(&self.level(depth)?.keys)
    }

    pub fn num_nodes(&self, depth: u32) -> Result<usize> {
        Ok(self.level(depth)?.keys.len())
    }

    pub fn num_leaves(&self) -> usize {
        self.levels.last().unwrap().keys.len()
    }

    pub fn num_points(&self) -> usize {
        self.point_leaf.len()
    }

    /// Index of the parent (at `depth - 1`) of every node at `depth`.
    pub fn parents(&self, depth: u32) -> Result<&[u32]> {
        if depth == 0 {
            return Err(Error::Domain("the root has no parent".into()));
        }
        Ok(&self.level(depth)?.parent)
    }

    /// Index range at `depth + 1` of the children of node `i` at `depth`.
    pub fn children(&self, depth: u32, i: usize) -> Result<Range<usize>> {
        let s = &self.level(depth)?.child_start;
        if i + 1 >= s.len() {
            return Err(Error::Index { index: i, len: s.len().saturating_sub(1) });
        }
        Ok(s[i] as usize..s[i + 1] as usize)
    }

    /// Leaf index of every input point.
    pub fn point_leaf(&self) -> &[u32] {
        &self.point_leaf
    }

    /// For every input point, the index of its ancestor node at `depth`.
    pub fn point_nodes(&self, depth: u32) -> Result<Vec<u32>> {
        self.level(depth)?;
        let mut idx = self.point_leaf.clone();
        for l in (depth + 1..=self.depth()).rev() {
            let parent = &self.levels[l as usize].parent;
            for v in &mut idx {
                *v = parent[*v as usize];
            }
        }
        Ok(idx)
    }

    pub fn coords(&self, depth: u32, i: usize) -> Result<[u32; 3]> {
        let keys = self.keys(depth)?;
        let code = *keys.get(i).ok_or(Error::Index { index: i, len: keys.len() })?;
        let (x, y, z) = deinterleave(code);
        Ok([x, y, z])
    }

    /// Index of the node with `code` at `depth`, if non-empty.
    pub fn find(&self, depth: u32, code: u64) -> Option<usize> {
        self.levels.get(depth as usize)?.keys.binary_search(&code).ok()
    }

    /// For each node at `depth` and each offset, the index of the node at the
    /// offset position, or [`ABSENT`].
    pub fn neighbor_indices(&self, depth: u32, offsets: &[[i32; 3]]) -> Result<IndexTable> {
        let keys = self.keys(depth)?;
        let side = 1i64 << depth;
        let rows: Vec<Vec<u32>> = par::map_range(keys.len(), |i| {
            let (x, y, z) = deinterleave(keys[i]);
            offsets
                .iter()
                .map(|o| {
                    let p = [x as i64 + o[0] as i64, y as i64 + o[1] as i64, z as i64 + o[2] as i64];
                    if p.iter().any(|&v| !(0..side).contains(&v)) {
                        return ABSENT;
                    }
                    let code = interleave(p[0] as u32, p[1] as u32, p[2] as u32);
                    keys.binary_search(&code).map_or(ABSENT, |j| j as u32)
                })
                .collect()
        });
        Ok(IndexTable {
            rows: keys.len(),
            taps: offsets.len(),
            idx: rows.into_iter().flatten().collect(),
        })
    }

    /// Per-leaf means of the selected point signals: position offset from the
    /// voxel center in voxel units, then color, then normal.
    pub fn init_leaf_features<T: Scalar>(
        &self,
        cloud: &QuantizedCloud,
        use_color: bool,
        use_normal: bool,
        use_position: bool,
    ) -> Result<Tensor<T>> {
        if cloud.len() != self.num_points() || cloud.depth() != self.depth() {
            return Err(Error::Config("cloud does not match the octree".into()));
        }
        let colors = match (use_color, cloud.colors()) {
            (true, None) => return Err(Error::Config("color features requested but the cloud has none".into())),
            (true, c) => c,
            _ => None,
        };
        let normals = match (use_normal, cloud.normals()) {
            (true, None) => return Err(Error::Config("normal features requested but the cloud has none".into())),
            (true, n) => n,
            _ => None,
        };
        let c = 3 * (use_position as usize + colors.is_some() as usize + normals.is_some() as usize);
        let n = self.num_leaves();
        let mut sums = vec![0.0f64; n * c];
        let mut counts = vec![0usize; n];
        let scale = (1u64 << cloud.depth()) as f64;
        for (i, &leaf) in self.point_leaf.iter().enumerate() {
            let leaf = leaf as usize;
            counts[leaf] += 1;
            let row = &mut sums[leaf * c..(leaf + 1) * c];
            let mut col = 0;
            let mut push = |v: [f64; 3]| {
                for (dst, x) in row[col..col + 3].iter_mut().zip(v) {
                    *dst += x;
                }
                col += 3;
            };
            if use_position {
                let cell = cloud.cell(i);
                let p = cloud.positions()[i];
                push([0, 1, 2].map(|a| p[a] * scale - cell[a] as f64 - 0.5));
            }
            if let Some(cs) = colors {
                push(cs[i]);
            }
            if let Some(ns) = normals {
                push(ns[i]);
            }
        }
        let data = sums
            .iter()
            .enumerate()
            .map(|(j, &s)| T::of(s / counts[j / c.max(1)] as f64))
            .collect();
        Tensor::new(vec![n, c], data)
    }

    /// Writes the binary dump: magic, version, depth, then per depth 1..=d the
    /// node count and keys, all little-endian.
    pub fn write_dump<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(DUMP_MAGIC)?;
        w.write_all(&DUMP_VERSION.to_le_bytes())?;
        w.write_all(&self.depth().to_le_bytes())?;
        for level in &self.levels[1..] {
            w.write_all(&(level.keys.len() as u64).to_le_bytes())?;
            let mut buf = Vec::with_capacity(level.keys.len() * 8);
            for k in &level.keys {
                buf.extend_from_slice(&k.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }
}

/// Per-depth key arrays read back from a dump, index 0 holding depth 1.
pub fn read_dump<R: Read>(mut r: R) -> Result<Vec<Vec<u64>>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != DUMP_MAGIC {
        return Err(Error::Format("not an octree dump".into()));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let version = u32::from_le_bytes(b4);
    if version != DUMP_VERSION {
        return Err(Error::Format(format!("unsupported octree dump version {version}")));
    }
    r.read_exact(&mut b4)?;
    let depth = u32::from_le_bytes(b4);
    let mut out = Vec::with_capacity(depth as usize);
    let mut b8 = [0u8; 8];
    for _ in 0..depth {
        r.read_exact(&mut b8)?;
        let n = u64::from_le_bytes(b8) as usize;
        let mut keys = Vec::with_capacity(n.min(1 << 24));
        for _ in 0..n {
            r.read_exact(&mut b8)?;
            keys.push(u64::from_le_bytes(b8));
        }
        out.push(keys);
    }
    Ok(out)
}

/// The 27 offsets of a 3×3×3 stencil, z fastest.
pub fn stencil3() -> Vec<[i32; 3]> {
    let mut v = Vec::with_capacity(27);
    for dx in -1..=1 {
        for dy in -1..=1 {
            for dz in -1..=1 {
                v.push([dx, dy, dz]);
            }
        }
    }
    v
}
