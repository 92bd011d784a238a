//! Multi-head self-attention restricted to partition windows, and the
//! convolutional positional encoding applied before it.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Backward, Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::init::trunc_normal;
use crate::octconv::{conv_table, depthwise_forward};
use crate::octree::Octree;
use crate::par;
use crate::partition::PartitionPlan;
use crate::tensor::{self, BatchNorm, Mode, Scalar, Tensor};

/// Query/key/value/output projections of one attention module.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams<T> {
    pub w_q: Tensor<T>,
    pub w_k: Tensor<T>,
    pub w_v: Tensor<T>,
    pub b_q: Tensor<T>,
    pub b_k: Tensor<T>,
    pub b_v: Tensor<T>,
    pub w_o: Tensor<T>,
    pub b_o: Tensor<T>,
    pub heads: usize,
}

impl<T: Scalar> AttentionParams<T> {
    /// Truncated-normal weights with standard deviation `std`, zero biases.
    pub fn random(channels: usize, heads: usize, std: f64, seed: u64) -> Result<Self> {
        if heads == 0 || !channels.is_multiple_of(heads) {
            return Err(Error::Config(format!("{channels} channels do not split into {heads} heads")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w = || trunc_normal(&[channels, channels], std, &mut rng);
        let (w_q, w_k, w_v, w_o) = (w(), w(), w(), w());
        let zeros = || Tensor::zeros(&[channels]);
        Ok(Self {
            w_q,
            w_k,
            w_v,
            w_o,
            b_q: zeros(),
            b_k: zeros(),
            b_v: zeros(),
            b_o: zeros(),
            heads,
        })
    }

    pub fn channels(&self) -> usize {
        self.w_q.rows()
    }

    pub fn head_dim(&self) -> usize {
        self.channels() / self.heads
    }

    pub fn cast<U: Scalar>(&self) -> AttentionParams<U> {
        AttentionParams {
            w_q: self.w_q.cast(),
            w_k: self.w_k.cast(),
            w_v: self.w_v.cast(),
            b_q: self.b_q.cast(),
            b_k: self.b_k.cast(),
            b_v: self.b_v.cast(),
            w_o: self.w_o.cast(),
            b_o: self.b_o.cast(),
            heads: self.heads,
        }
    }

    /// `x · w + b` for each of the query, key and value projections.
    pub fn project_qkv(&self, x: &Tensor<T>) -> Result<[Tensor<T>; 3]> {
        let p = |w, b| tensor::add_row_bias(&tensor::matmul(x, w)?, b);
        Ok([p(&self.w_q, &self.b_q)?, p(&self.w_k, &self.b_k)?, p(&self.w_v, &self.b_v)?])
    }

    pub fn project_out(&self, y: &Tensor<T>) -> Result<Tensor<T>> {
        tensor::add_row_bias(&tensor::matmul(y, &self.w_o)?, &self.b_o)
    }
}

struct WindowOut<T> {
    out: Vec<T>,
    probs: Vec<T>,
}

fn check_qkv<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>, plan: &PartitionPlan, heads: usize) -> Result<()> {
    let (n, c) = q.dims2()?;
    k.expect_shape(q.shape())?;
    v.expect_shape(q.shape())?;
    if n != plan.n() {
        return Err(shape_err(format!("plan covers {} tokens, got {n}", plan.n())));
    }
    if heads == 0 || c % heads != 0 {
        return Err(shape_err(format!("{c} channels do not split into {heads} heads")));
    }
    Ok(())
}

/// Scaled dot-product attention inside every window of `plan`. Padded keys
/// take no weight and padded queries are never produced. Returns the head
/// outputs `(N, C)` and, when `keep_probs`, the per-window attention weights.
pub fn window_sdpa<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    plan: &PartitionPlan,
    heads: usize,
    keep_probs: bool,
) -> Result<(Tensor<T>, Vec<Vec<T>>)> {
    check_qkv(q, k, v, plan, heads)?;
    let c = q.cols();
    let dh = c / heads;
    let scale = T::of(1.0 / (dh as f64).sqrt());
    let results: Vec<WindowOut<T>> = par::map_range(plan.windows(), |w| {
        let members: Vec<usize> = plan.members(w).collect();
        let m = members.len();
        let mut out = vec![T::zero(); m * c];
        let mut probs = if keep_probs { vec![T::zero(); heads * m * m] } else { Vec::new() };
        let mut p = vec![T::zero(); m];
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            for (i, &qi) in members.iter().enumerate() {
                let qrow = &q.row(qi)[cols.clone()];
                let mut max = T::neg_infinity();
                for (j, &kj) in members.iter().enumerate() {
                    let s = tensor::dot(qrow, &k.row(kj)[cols.clone()]) * scale;
                    p[j] = s;
                    max = max.max(s);
                }
                let mut sum = T::zero();
                for s in p.iter_mut() {
                    *s = (*s - max).exp();
                    sum += *s;
                }
                let inv = T::one() / sum;
                let orow = &mut out[i * c + cols.start..i * c + cols.end];
                for (j, &vj) in members.iter().enumerate() {
                    p[j] *= inv;
                    tensor::axpy(p[j], &v.row(vj)[cols.clone()], orow);
                }
                if keep_probs {
                    probs[(h * m + i) * m..(h * m + i + 1) * m].copy_from_slice(&p);
                }
            }
        }
        WindowOut { out, probs }
    });
    let mut out = Tensor::zeros(&[plan.n(), c]);
    let mut all_probs = Vec::with_capacity(results.len());
    for (w, r) in results.into_iter().enumerate() {
        for (i, pos) in plan.members(w).enumerate() {
            out.row_mut(pos).copy_from_slice(&r.out[i * c..(i + 1) * c]);
        }
        all_probs.push(r.probs);
    }
    Ok((out, all_probs))
}

/// Gradients of [`window_sdpa`] given its stored attention weights.
pub fn window_sdpa_backward<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    plan: &PartitionPlan,
    heads: usize,
    probs: &[Vec<T>],
    grad: &Tensor<T>,
) -> Result<[Tensor<T>; 3]> {
    check_qkv(q, k, v, plan, heads)?;
    grad.expect_shape(q.shape())?;
    let c = q.cols();
    let dh = c / heads;
    let scale = T::of(1.0 / (dh as f64).sqrt());
    let results: Vec<[Vec<T>; 3]> = par::map_range(plan.windows(), |w| {
        let members: Vec<usize> = plan.members(w).collect();
        let m = members.len();
        let pw = &probs[w];
        let (mut dq, mut dk, mut dv) = (vec![T::zero(); m * c], vec![T::zero(); m * c], vec![T::zero(); m * c]);
        let mut ds = vec![T::zero(); m];
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            for (i, &qi) in members.iter().enumerate() {
                let prow = &pw[(h * m + i) * m..(h * m + i + 1) * m];
                let go = &grad.row(qi)[cols.clone()];
                // dP_ij = dO_i · V_j; dS = P ⊙ (dP − Σ_j P_ij dP_ij)
                let mut acc = T::zero();
                for (j, &vj) in members.iter().enumerate() {
                    let dp = tensor::dot(go, &v.row(vj)[cols.clone()]);
                    ds[j] = dp;
                    acc += prow[j] * dp;
                }
                for j in 0..m {
                    ds[j] = prow[j] * (ds[j] - acc) * scale;
                }
                let qrow = &q.row(qi)[cols.clone()];
                for (j, &kj) in members.iter().enumerate() {
                    let r = j * c + cols.start..j * c + cols.end;
                    tensor::axpy(prow[j], go, &mut dv[r.clone()]);
                    tensor::axpy(ds[j], qrow, &mut dk[r]);
                    tensor::axpy(ds[j], &k.row(kj)[cols.clone()], &mut dq[i * c + cols.start..i * c + cols.end]);
                }
            }
        }
        [dq, dk, dv]
    });
    let mut grads = [Tensor::zeros(q.shape()), Tensor::zeros(q.shape()), Tensor::zeros(q.shape())];
    for (w, r) in results.into_iter().enumerate() {
        for (i, pos) in plan.members(w).enumerate() {
            for (g, src) in grads.iter_mut().zip(&r) {
                g.row_mut(pos).copy_from_slice(&src[i * c..(i + 1) * c]);
            }
        }
    }
    Ok(grads)
}

/// Windowed multi-head self-attention of `x (N, C)` including projections.
pub fn windowed_attention<T: Scalar>(
    x: &Tensor<T>,
    plan: &PartitionPlan,
    params: &AttentionParams<T>,
) -> Result<Tensor<T>> {
    x.ensure_finite("attention input")?;
    if x.cols() != params.channels() {
        return Err(shape_err(format!(
            "attention expects {} channels, got {}",
            params.channels(),
            x.cols()
        )));
    }
    let [q, k, v] = params.project_qkv(x)?;
    let (y, _) = window_sdpa(&q, &k, &v, plan, params.heads, false)?;
    params.project_out(&y)
}

struct SdpaBackward<T> {
    plan: Arc<PartitionPlan>,
    heads: usize,
    probs: Vec<Vec<T>>,
}

impl<T: Scalar> Backward<T> for SdpaBackward<T> {
    fn backward(&self, inputs: &[&Tensor<T>], _output: &Tensor<T>, grad: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let g = window_sdpa_backward(inputs[0], inputs[1], inputs[2], &self.plan, self.heads, &self.probs, grad)?;
        Ok(g.into())
    }
}

/// Records [`window_sdpa`] on the tape.
pub fn sdpa_tape<T: Scalar>(
    tape: &Tape<T>,
    q: Var,
    k: Var,
    v: Var,
    plan: Arc<PartitionPlan>,
    heads: usize,
) -> Result<Var> {
    let (out, probs) = {
        let (qv, kv, vv) = (tape.value(q), tape.value(k), tape.value(v));
        window_sdpa(&qv, &kv, &vv, &plan, heads, true)?
    };
    Ok(tape.custom(&[q, k, v], out, Box::new(SdpaBackward { plan, heads, probs })))
}

/// Variables of one attention module on a tape.
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub b_q: Var,
    pub b_k: Var,
    pub b_v: Var,
    pub w_o: Var,
    pub b_o: Var,
}

impl AttentionVars {
    pub fn param<T: Scalar>(tape: &Tape<T>, p: &AttentionParams<T>) -> Self {
        Self {
            w_q: tape.param(p.w_q.clone()),
            w_k: tape.param(p.w_k.clone()),
            w_v: tape.param(p.w_v.clone()),
            b_q: tape.param(p.b_q.clone()),
            b_k: tape.param(p.b_k.clone()),
            b_v: tape.param(p.b_v.clone()),
            w_o: tape.param(p.w_o.clone()),
            b_o: tape.param(p.b_o.clone()),
        }
    }
}

/// Records windowed attention including projections.
pub fn attention_tape<T: Scalar>(
    tape: &Tape<T>,
    x: Var,
    p: &AttentionVars,
    plan: Arc<PartitionPlan>,
    heads: usize,
) -> Result<Var> {
    tape.value(x).ensure_finite("attention input")?;
    let q = tape.linear(x, p.w_q, Some(p.b_q))?;
    let k = tape.linear(x, p.w_k, Some(p.b_k))?;
    let v = tape.linear(x, p.w_v, Some(p.b_v))?;
    let y = sdpa_tape(tape, q, k, v, plan, heads)?;
    tape.linear(y, p.w_o, Some(p.b_o))
}

/// `x + batch_norm(depthwise_conv(x))` over the 3×3×3 neighborhood at `depth`.
pub fn conditional_positional_encoding<T: Scalar>(
    x: &Tensor<T>,
    octree: &Octree,
    depth: u32,
    kernel: &Tensor<T>,
    bn: &mut BatchNorm<T>,
    mode: Mode,
) -> Result<Tensor<T>> {
    let n = octree.num_nodes(depth)?;
    if x.rows() != n {
        return Err(shape_err(format!("{} rows for {n} nodes at depth {depth}", x.rows())));
    }
    let table = conv_table(octree, depth, 3, 1)?;
    let conv = depthwise_forward(x, &table, kernel)?;
    let pe = tensor::batch_norm(&conv, bn, mode, T::of(0.1), T::of(1e-5))?;
    tensor::add(x, &pe)
}
