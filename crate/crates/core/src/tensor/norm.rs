use super::{Scalar, Tensor};
use crate::error::{shape_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub struct LayerNormOutput<T> {
    pub y: Tensor<T>,
    /// Normalised input before the affine map.
    pub xhat: Tensor<T>,
    /// Per-row `1/sqrt(var + eps)`.
    pub rstd: Vec<T>,
}

/// Normalises each row to zero mean and unit variance, then applies `gamma`, `beta`.
pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<LayerNormOutput<T>> {
    let c = x.cols();
    if gamma.len() != c || beta.len() != c {
        return Err(shape_err("layer norm affine length mismatch"));
    }
    let rows = x.rows();
    let mut xhat = x.clone();
    let mut rstd = Vec::with_capacity(rows);
    let inv_c = T::of(1.0 / c as f64);
    for r in 0..rows {
        let row = xhat.row_mut(r);
        let mean = row.iter().copied().sum::<T>() * inv_c;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_c;
        let s = (var + eps).sqrt().recip();
        for v in row.iter_mut() {
            *v = (*v - mean) * s;
        }
        rstd.push(s);
    }
    let mut y = xhat.clone();
    for r in 0..rows {
        for ((v, &g), &b) in y.row_mut(r).iter_mut().zip(gamma.data()).zip(beta.data()) {
            *v = *v * g + b;
        }
    }
    Ok(LayerNormOutput { y, xhat, rstd })
}

/// Gradients `(dx, dgamma, dbeta)` of layer norm.
pub fn layer_norm_backward<T: Scalar>(
    xhat: &Tensor<T>,
    rstd: &[T],
    gamma: &Tensor<T>,
    grad: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let c = xhat.cols();
    let inv_c = T::of(1.0 / c as f64);
    let mut dx = Tensor::zeros(xhat.shape());
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for (r, &s) in rstd.iter().enumerate() {
        let (xh, g) = (xhat.row(r), grad.row(r));
        let mut m1 = T::zero();
        let mut m2 = T::zero();
        for j in 0..c {
            let d = g[j] * gamma.data()[j];
            m1 += d;
            m2 += d * xh[j];
            dgamma[j] += g[j] * xh[j];
            dbeta[j] += g[j];
        }
        m1 *= inv_c;
        m2 *= inv_c;
        for (j, o) in dx.row_mut(r).iter_mut().enumerate() {
            *o = s * (g[j] * gamma.data()[j] - m1 - xh[j] * m2);
        }
    }
    (
        dx,
        Tensor::new(vec![c], dgamma).unwrap(),
        Tensor::new(vec![c], dbeta).unwrap(),
    )
}

/// Affine parameters and running statistics of one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
}

impl<T: Scalar> BatchNorm<T> {
    /// Identity affine, zero mean, unit variance.
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::full(&[channels], T::one()),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], T::one()),
        }
    }
}

/// Result of the statistics half of batch norm.
pub struct BatchNormForward<T> {
    pub xhat: Tensor<T>,
    pub rstd: Vec<T>,
    pub mean: Vec<T>,
    /// Biased batch variance.
    pub var: Vec<T>,
}

/// Two-pass per-column mean and biased variance, then normalisation.
pub fn batch_norm_normalize<T: Scalar>(x: &Tensor<T>, eps: T) -> Result<BatchNormForward<T>> {
    let (n, c) = x.dims2()?;
    if n < 2 {
        return Err(Error::DegenerateBatch(format!(
            "batch norm in train mode needs at least 2 rows, got {n}"
        )));
    }
    let inv_n = T::of(1.0 / n as f64);
    let mut mean = vec![T::zero(); c];
    for r in 0..n {
        for (m, &v) in mean.iter_mut().zip(x.row(r)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m *= inv_n);
    let mut var = vec![T::zero(); c];
    for r in 0..n {
        for ((s, &v), &m) in var.iter_mut().zip(x.row(r)).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    var.iter_mut().for_each(|s| *s *= inv_n);
    let rstd: Vec<T> = var.iter().map(|&v| (v + eps).sqrt().recip()).collect();
    let mut xhat = x.clone();
    for r in 0..n {
        for ((v, &m), &s) in xhat.row_mut(r).iter_mut().zip(&mean).zip(&rstd) {
            *v = (*v - m) * s;
        }
    }
    Ok(BatchNormForward {
        xhat,
        rstd,
        mean,
        var,
    })
}

/// Normalisation with fixed statistics (eval mode).
pub fn batch_norm_fixed<T: Scalar>(x: &Tensor<T>, mean: &Tensor<T>, var: &Tensor<T>, eps: T) -> (Tensor<T>, Vec<T>) {
    let c = x.cols();
    let rstd: Vec<T> = var.data().iter().map(|&v| (v + eps).sqrt().recip()).collect();
    let mut xhat = x.clone();
    for r in 0..x.rows() {
        for ((v, &m), &s) in xhat.row_mut(r).iter_mut().zip(mean.data()).zip(&rstd) {
            *v = (*v - m) * s;
        }
    }
    debug_assert_eq!(rstd.len(), c);
    (xhat, rstd)
}

pub fn affine_cols<T: Scalar>(xhat: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>) -> Tensor<T> {
    let mut y = xhat.clone();
    for r in 0..y.rows() {
        for ((v, &g), &b) in y.row_mut(r).iter_mut().zip(gamma.data()).zip(beta.data()) {
            *v = *v * g + b;
        }
    }
    y
}

/// Gradients `(dx, dgamma, dbeta)` of batch norm. With `batch_stats` the
/// statistics depend on `x`; otherwise they are constants.
pub fn batch_norm_backward<T: Scalar>(
    xhat: &Tensor<T>,
    rstd: &[T],
    gamma: &Tensor<T>,
    grad: &Tensor<T>,
    batch_stats: bool,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (n, c) = (xhat.rows(), xhat.cols());
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for r in 0..n {
        for j in 0..c {
            let g = grad.row(r)[j];
            dgamma[j] += g * xhat.row(r)[j];
            dbeta[j] += g;
        }
    }
    let mut dx = Tensor::zeros(xhat.shape());
    let inv_n = T::of(1.0 / n.max(1) as f64);
    for r in 0..n {
        let (xh, g) = (xhat.row(r), grad.row(r));
        for (j, o) in dx.row_mut(r).iter_mut().enumerate() {
            let gj = gamma.data()[j];
            *o = if batch_stats {
                gj * rstd[j] * (g[j] - dbeta[j] * inv_n - xh[j] * dgamma[j] * inv_n)
            } else {
                gj * rstd[j] * g[j]
            };
        }
    }
    (
        dx,
        Tensor::new(vec![c], dgamma).unwrap(),
        Tensor::new(vec![c], dbeta).unwrap(),
    )
}

/// Batch norm over the rows of an `(N, C)` tensor.
///
/// Train mode normalises by batch statistics and folds them into the running
/// statistics with `momentum` (running variance uses the unbiased estimate).
/// Eval mode uses the stored statistics.
pub fn batch_norm<T: Scalar>(
    x: &Tensor<T>,
    state: &mut BatchNorm<T>,
    mode: Mode,
    momentum: T,
    eps: T,
) -> Result<Tensor<T>> {
    let (n, c) = x.dims2()?;
    if state.gamma.len() != c {
        return Err(shape_err("batch norm channel mismatch"));
    }
    match mode {
        Mode::Train => {
            let f = batch_norm_normalize(x, eps)?;
            update_running(state, &f.mean, &f.var, n, momentum);
            Ok(affine_cols(&f.xhat, &state.gamma, &state.beta))
        }
        Mode::Eval => {
            let (xhat, _) = batch_norm_fixed(x, &state.running_mean, &state.running_var, eps);
            Ok(affine_cols(&xhat, &state.gamma, &state.beta))
        }
    }
}

pub(crate) fn update_running<T: Scalar>(state: &mut BatchNorm<T>, mean: &[T], var: &[T], n: usize, momentum: T) {
    update_running_stats(&mut state.running_mean, &mut state.running_var, mean, var, n, momentum);
}

/// Folds batch statistics over `n` rows into running buffers.
pub fn update_running_stats<T: Scalar>(
    running_mean: &mut Tensor<T>,
    running_var: &mut Tensor<T>,
    mean: &[T],
    var: &[T],
    n: usize,
    momentum: T,
) {
    let unbias = T::of(n as f64 / (n as f64 - 1.0));
    let keep = T::one() - momentum;
    for (r, &m) in running_mean.data_mut().iter_mut().zip(mean) {
        *r = keep * *r + momentum * m;
    }
    for (r, &v) in running_var.data_mut().iter_mut().zip(var) {
        *r = keep * *r + momentum * v * unbias;
    }
}
