//! Competitors for the windowed octree attention: dense global attention,
//! variable-size cubic windows, and per-token k-nearest-neighbor attention.

use std::collections::BTreeMap;

use crate::attention::{windowed_attention, AttentionParams};
use crate::error::{Error, Result};
use crate::morton::deinterleave;
use crate::octree::Octree;
use crate::par;
use crate::partition::make_plan;
use crate::tensor::{self, Scalar, Tensor};

/// Largest token count [`global_attention`] accepts.
pub const GLOBAL_ATTENTION_LIMIT: usize = 4096;

/// Below this node count [`knn_indices`] compares all pairs.
pub const KNN_BRUTE_FORCE_BELOW: usize = 2048;

/// Dense attention over all `N` tokens.
pub fn global_attention<T: Scalar>(x: &Tensor<T>, params: &AttentionParams<T>) -> Result<Tensor<T>> {
    let n = x.rows();
    if n > GLOBAL_ATTENTION_LIMIT {
        return Err(Error::Resource(format!(
            "global attention over {n} tokens exceeds the limit of {GLOBAL_ATTENTION_LIMIT}"
        )));
    }
    windowed_attention(x, &make_plan(n, n.max(1), 1)?, params)
}

/// Nodes of one depth grouped by the cube of edge `window_size` they fall in.
#[derive(Clone, Debug, PartialEq)]
pub struct CubicPartition {
    pub window_size: u32,
    /// `(cube id, member node indices)` in increasing cube order.
    pub buckets: Vec<(u64, Vec<u32>)>,
}

impl CubicPartition {
    pub fn mean_count(&self) -> f64 {
        let total: usize = self.buckets.iter().map(|b| b.1.len()).sum();
        total as f64 / self.buckets.len().max(1) as f64
    }

    pub fn max_count(&self) -> usize {
        self.buckets.iter().map(|b| b.1.len()).max().unwrap_or(0)
    }
}

pub fn cubic_partition(octree: &Octree, depth: u32, window_size: u32) -> Result<CubicPartition> {
    if window_size == 0 {
        return Err(Error::Config("cube window size must be at least 1".into()));
    }
    let keys = octree.keys(depth)?;
    let mut map: BTreeMap<u64, Vec<u32>> = BTreeMap::new();
    for (i, &code) in keys.iter().enumerate() {
        let (x, y, z) = deinterleave(code);
        let cube = crate::morton::interleave(x / window_size, y / window_size, z / window_size);
        map.entry(cube).or_default().push(i as u32);
    }
    Ok(CubicPartition {
        window_size,
        buckets: map.into_iter().collect(),
    })
}

// Dense attention of the rows `members` against each other.
fn attend_group<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>, members: &[u32], heads: usize) -> Vec<T> {
    let c = q.cols();
    let dh = c / heads;
    let scale = T::of(1.0 / (dh as f64).sqrt());
    let m = members.len();
    let mut out = vec![T::zero(); m * c];
    let mut p = vec![T::zero(); m];
    for h in 0..heads {
        let r = h * dh..(h + 1) * dh;
        for (i, &qi) in members.iter().enumerate() {
            let qrow = &q.row(qi as usize)[r.clone()];
            for (j, &kj) in members.iter().enumerate() {
                p[j] = tensor::dot(qrow, &k.row(kj as usize)[r.clone()]) * scale;
            }
            softmax_in_place(&mut p);
            for (j, &vj) in members.iter().enumerate() {
                tensor::axpy(p[j], &v.row(vj as usize)[r.clone()], &mut out[i * c + r.start..i * c + r.end]);
            }
        }
    }
    out
}

fn softmax_in_place<T: Scalar>(p: &mut [T]) {
    let max = p.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in p.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = T::one() / sum;
    for v in p.iter_mut() {
        *v *= inv;
    }
}

/// Attention inside every cube of `partition`, one dense product per cube.
pub fn cubic_attention<T: Scalar>(
    x: &Tensor<T>,
    partition: &CubicPartition,
    params: &AttentionParams<T>,
) -> Result<Tensor<T>> {
    x.ensure_finite("attention input")?;
    let [q, k, v] = params.project_qkv(x)?;
    let c = x.cols();
    let outs = par::map_range(partition.buckets.len(), |b| {
        attend_group(&q, &k, &v, &partition.buckets[b].1, params.heads)
    });
    let mut y = Tensor::zeros(x.shape());
    for ((_, members), out) in partition.buckets.iter().zip(outs) {
        for (i, &m) in members.iter().enumerate() {
            y.row_mut(m as usize).copy_from_slice(&out[i * c..(i + 1) * c]);
        }
    }
    params.project_out(&y)
}

fn sq_dist(a: [u32; 3], b: [u32; 3]) -> u64 {
    (0..3).map(|i| (a[i] as i64 - b[i] as i64).pow(2) as u64).sum()
}

/// The `k` nearest nodes of every node at `depth` (including itself), as a
/// row-major `(N, k)` table sorted by distance with ties broken by key.
pub fn knn_indices(octree: &Octree, depth: u32, k: usize) -> Result<Vec<u32>> {
    let keys = octree.keys(depth)?;
    let n = keys.len();
    if k == 0 || k > n {
        return Err(Error::Config(format!("k = {k} neighbors requested from {n} nodes")));
    }
    let coords: Vec<[u32; 3]> = keys.iter().map(|&c| {
        let (x, y, z) = deinterleave(c);
        [x, y, z]
    }).collect();
    let side = 1i64 << depth;
    let rows = par::map_range(n, |i| {
        let q = coords[i];
        let brute = || {
            let mut all: Vec<(u64, u32)> = (0..n as u32).map(|j| (sq_dist(q, coords[j as usize]), j)).collect();
            all.select_nth_unstable(k - 1);
            all.truncate(k);
            all.sort_unstable();
            all
        };
        if n < KNN_BRUTE_FORCE_BELOW {
            return brute();
        }
        let mut r: i64 = 1;
        loop {
            let width = (2 * r + 1) as u64;
            if width.pow(3) > n as u64 || r >= side {
                return brute();
            }
            let mut cand: Vec<(u64, u32)> = Vec::new();
            for x in (q[0] as i64 - r).max(0)..=(q[0] as i64 + r).min(side - 1) {
                for y in (q[1] as i64 - r).max(0)..=(q[1] as i64 + r).min(side - 1) {
                    for z in (q[2] as i64 - r).max(0)..=(q[2] as i64 + r).min(side - 1) {
                        let code = crate::morton::interleave(x as u32, y as u32, z as u32);
                        if let Ok(j) = keys.binary_search(&code) {
                            cand.push((sq_dist(q, coords[j]), j as u32));
                        }
                    }
                }
            }
            if cand.len() >= k {
                cand.sort_unstable();
                let kth = cand[k - 1].0;
                // Every node within distance sqrt(kth) lies inside the box.
                if kth <= (r * r) as u64 {
                    cand.truncate(k);
                    return cand;
                }
                r = ((kth as f64).sqrt().ceil() as i64).max(r + 1);
            } else {
                r *= 2;
            }
        }
    });
    Ok(rows.into_iter().flat_map(|row| row.into_iter().map(|(_, j)| j)).collect())
}

fn project_row<T: Scalar>(x: &[T], w: &Tensor<T>, b: &Tensor<T>, out: &mut [T]) {
    let c = out.len();
    out.copy_from_slice(b.data());
    for (a, &xa) in x.iter().enumerate() {
        tensor::axpy(xa, &w.data()[a * c..(a + 1) * c], out);
    }
}

/// Per-token attention over each token's `k_neighbors` nearest nodes. Keys and
/// values of every neighborhood are projected afresh, so overlapping
/// neighborhoods share no work.
pub fn knn_sliding_attention<T: Scalar>(
    x: &Tensor<T>,
    octree: &Octree,
    depth: u32,
    k_neighbors: usize,
    params: &AttentionParams<T>,
) -> Result<Tensor<T>> {
    x.ensure_finite("attention input")?;
    let (n, c) = x.dims2()?;
    if n != octree.num_nodes(depth)? || c != params.channels() {
        return Err(crate::error::shape_err(format!(
            "input {:?} does not match {} nodes with {} channels",
            x.shape(),
            octree.num_nodes(depth)?,
            params.channels()
        )));
    }
    let nbrs = knn_indices(octree, depth, k_neighbors)?;
    let heads = params.heads;
    let dh = c / heads;
    let scale = T::of(1.0 / (dh as f64).sqrt());
    let mut y = Tensor::zeros(&[n, c]);
    par::for_each_chunk_mut(y.data_mut(), c, |i, out| {
        let nb = &nbrs[i * k_neighbors..(i + 1) * k_neighbors];
        let mut q = vec![T::zero(); c];
        project_row(x.row(i), &params.w_q, &params.b_q, &mut q);
        let mut kk = vec![T::zero(); k_neighbors * c];
        let mut vv = vec![T::zero(); k_neighbors * c];
        for (s, &j) in nb.iter().enumerate() {
            project_row(x.row(j as usize), &params.w_k, &params.b_k, &mut kk[s * c..(s + 1) * c]);
            project_row(x.row(j as usize), &params.w_v, &params.b_v, &mut vv[s * c..(s + 1) * c]);
        }
        let mut att = vec![T::zero(); c];
        let mut p = vec![T::zero(); k_neighbors];
        for h in 0..heads {
            let r = h * dh..(h + 1) * dh;
            for s in 0..k_neighbors {
                p[s] = tensor::dot(&q[r.clone()], &kk[s * c + r.start..s * c + r.end]) * scale;
            }
            softmax_in_place(&mut p);
            for s in 0..k_neighbors {
                tensor::axpy(p[s], &vv[s * c + r.start..s * c + r.end], &mut att[r.clone()]);
            }
        }
        project_row(&att, &params.w_o, &params.b_o, out);
    });
    Ok(y)
}
