//! Direct, unoptimized implementations used as oracles by the test suites and
//! the `selftest` command. Everything here is written from the definitions,
//! without sharing code with the optimized paths.

use crate::attention::AttentionParams;
use crate::partition::PartitionPlan;
use crate::tensor::Tensor;

/// Dense `N × N` multi-head attention at 64-bit where token `i` may attend to
/// token `j` iff `allowed(i, j)`. Disallowed logits get −1e9 added.
pub fn dense_masked_attention(
    x: &Tensor<f64>,
    params: &AttentionParams<f64>,
    allowed: impl Fn(usize, usize) -> bool,
) -> Tensor<f64> {
    let n = x.shape()[0];
    let c = x.shape()[1];
    let h = params.heads;
    let dh = c / h;
    let proj = |w: &Tensor<f64>, b: &Tensor<f64>| -> Vec<Vec<f64>> {
        (0..n)
            .map(|i| {
                (0..c)
                    .map(|o| b.data()[o] + (0..c).map(|a| x.data()[i * c + a] * w.data()[a * c + o]).sum::<f64>())
                    .collect()
            })
            .collect()
    };
    let q = proj(&params.w_q, &params.b_q);
    let k = proj(&params.w_k, &params.b_k);
    let v = proj(&params.w_v, &params.b_v);
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads_out = vec![vec![0.0; c]; n];
    for head in 0..h {
        let r = head * dh..(head + 1) * dh;
        for i in 0..n {
            let logits: Vec<f64> = (0..n)
                .map(|j| {
                    let s: f64 = r.clone().map(|a| q[i][a] * k[j][a]).sum::<f64>() * scale;
                    if allowed(i, j) {
                        s
                    } else {
                        s - 1e9
                    }
                })
                .collect();
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let z: f64 = e.iter().sum();
            for a in r.clone() {
                heads_out[i][a] = (0..n).map(|j| e[j] / z * v[j][a]).sum();
            }
        }
    }
    Tensor::from_fn(&[n, c], |idx| {
        let (i, o) = (idx / c, idx % c);
        params.b_o.data()[o] + (0..c).map(|a| heads_out[i][a] * params.w_o.data()[a * c + o]).sum::<f64>()
    })
}

/// Attention over the zero-padded sequence of `plan` with a window mask and
/// a key-padding mask, truncated back to the real tokens.
pub fn dense_window_attention(x: &Tensor<f64>, plan: &PartitionPlan, params: &AttentionParams<f64>) -> Tensor<f64> {
    let c = x.shape()[1];
    let padded = Tensor::from_fn(&[plan.padded(), c], |i| if i < x.len() { x.data()[i] } else { 0.0 });
    let window = |p: usize| plan.slot_of(p).0;
    let full = dense_masked_attention(&padded, params, |i, j| window(i) == window(j) && !plan.is_pad(j));
    Tensor::new(vec![plan.n(), c], full.data()[..plan.n() * c].to_vec()).unwrap()
}

/// Dense grid of `side³` cells with `c` channels, x slowest and z fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseGrid {
    pub side: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl DenseGrid {
    pub fn at(&self, x: i64, y: i64, z: i64, ch: usize) -> f64 {
        let s = self.side as i64;
        if x < 0 || y < 0 || z < 0 || x >= s || y >= s || z >= s {
            return 0.0;
        }
        self.data[(((x * s + y) * s + z) as usize) * self.channels + ch]
    }
}

/// Zero-padded dense 3D convolution. Weights are `(taps, cin, cout)` (or
/// `(taps, c)` when `depthwise`) with taps ordered x slowest, z fastest over
/// offsets `-1..=1` (kernel 3) or `0..=1` (kernel 2). Input of output cell
/// `p` at tap offset `o` is cell `stride·p + o`.
pub fn dense_conv3d(grid: &DenseGrid, weights: &[f64], kernel: usize, stride: usize, cout: usize, depthwise: bool) -> DenseGrid {
    let offs: Vec<i64> = if kernel == 3 { vec![-1, 0, 1] } else { vec![0, 1] };
    let side = grid.side / stride;
    let cin = grid.channels;
    let cout = if depthwise { cin } else { cout };
    let mut data = vec![0.0; side.pow(3) * cout];
    for x in 0..side {
        for y in 0..side {
            for z in 0..side {
                let cell = (x * side + y) * side + z;
                let mut t = 0;
                for &ox in &offs {
                    for &oy in &offs {
                        for &oz in &offs {
                            let (sx, sy, sz) = (
                                (stride * x) as i64 + ox,
                                (stride * y) as i64 + oy,
                                (stride * z) as i64 + oz,
                            );
                            for o in 0..cout {
                                let v = if depthwise {
                                    weights[t * cin + o] * grid.at(sx, sy, sz, o)
                                } else {
                                    (0..cin)
                                        .map(|a| weights[(t * cin + a) * cout + o] * grid.at(sx, sy, sz, a))
                                        .sum()
                                };
                                data[cell * cout + o] += v;
                            }
                            t += 1;
                        }
                    }
                }
            }
        }
    }
    DenseGrid {
        side,
        channels: cout,
        data,
    }
}

/// Indices of the `k` points closest to `points[query]`, ties broken by the
/// order of `order_key`.
pub fn brute_force_knn(points: &[[u32; 3]], order_key: &[u64], query: usize, k: usize) -> Vec<usize> {
    let q = points[query];
    let mut all: Vec<(u64, u64, usize)> = points
        .iter()
        .enumerate()
        .map(|(j, p)| {
            let d: u64 = (0..3).map(|a| (p[a] as i64 - q[a] as i64).pow(2) as u64).sum();
            (d, order_key[j], j)
        })
        .collect();
    all.sort();
    all.into_iter().take(k).map(|t| t.2).collect()
}
