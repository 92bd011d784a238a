use super::{Scalar, Tensor, ABSENT};
use crate::error::{shape_err, Error, Result};
use crate::par;

/// Dot product with eight fixed accumulators; the summation order only
/// depends on the length, which keeps results bitwise reproducible.
#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut s = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    for (&x, &y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

#[inline]
pub fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `out (m×p) = a (m×k) · b (k×p)`.
pub fn gemm_nn<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, p: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * p);
    debug_assert_eq!(out.len(), m * p);
    if p == 0 {
        return;
    }
    par::for_each_chunk_mut(out, p, |i, row| {
        row.fill(T::zero());
        let ar = &a[i * k..(i + 1) * k];
        for (kk, &av) in ar.iter().enumerate() {
            if av != T::zero() {
                axpy(av, &b[kk * p..(kk + 1) * p], row);
            }
        }
    });
}

/// `out (m×p) = a (m×k) · bᵀ` with `b` stored as `(p×k)`.
pub fn gemm_nt<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, p: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), p * k);
    if p == 0 {
        return;
    }
    par::for_each_chunk_mut(out, p, |i, row| {
        let ar = &a[i * k..(i + 1) * k];
        for (j, o) in row.iter_mut().enumerate() {
            *o = dot(ar, &b[j * k..(j + 1) * k]);
        }
    });
}

/// `out (k×p) = aᵀ · b` with `a` stored as `(m×k)` and `b` as `(m×p)`.
pub fn gemm_tn<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, p: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * p);
    if p == 0 {
        return;
    }
    par::for_each_chunk_mut(out, p, |kk, row| {
        row.fill(T::zero());
        for i in 0..m {
            let av = a[i * k + kk];
            if av != T::zero() {
                axpy(av, &b[i * p..(i + 1) * p], row);
            }
        }
    });
}

fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(usize, usize, usize, usize)> {
    if a.len() < 2 || a.len() != b.len() {
        return Err(shape_err(format!("matmul of {a:?} and {b:?}")));
    }
    let r = a.len();
    if a[..r - 2] != b[..r - 2] || a[r - 1] != b[r - 2] {
        return Err(shape_err(format!("matmul of {a:?} and {b:?}")));
    }
    let batch = a[..r - 2].iter().product();
    Ok((batch, a[r - 2], a[r - 1], b[r - 1]))
}

/// Batched matrix product over identical leading dimensions.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (batch, m, k, p) = matmul_dims(a.shape(), b.shape())?;
    let mut shape = a.shape().to_vec();
    *shape.last_mut().unwrap() = p;
    let mut out = vec![T::zero(); batch * m * p];
    for bi in 0..batch {
        gemm_nn(
            &a.data()[bi * m * k..(bi + 1) * m * k],
            &b.data()[bi * k * p..(bi + 1) * k * p],
            &mut out[bi * m * p..(bi + 1) * m * p],
            m,
            k,
            p,
        );
    }
    Tensor::new(shape, out)
}

/// Gradients of `a · b` given the upstream gradient.
pub fn matmul_backward<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    grad: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (batch, m, k, p) = matmul_dims(a.shape(), b.shape())?;
    let mut da = vec![T::zero(); batch * m * k];
    let mut db = vec![T::zero(); batch * k * p];
    for bi in 0..batch {
        let g = &grad.data()[bi * m * p..(bi + 1) * m * p];
        gemm_nt(
            g,
            &b.data()[bi * k * p..(bi + 1) * k * p],
            &mut da[bi * m * k..(bi + 1) * m * k],
            m,
            p,
            k,
        );
        gemm_tn(
            &a.data()[bi * m * k..(bi + 1) * m * k],
            g,
            &mut db[bi * k * p..(bi + 1) * k * p],
            m,
            k,
            p,
        );
    }
    Ok((
        Tensor::new(a.shape().to_vec(), da)?,
        Tensor::new(b.shape().to_vec(), db)?,
    ))
}

pub fn transpose2d<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (r, c) = x.dims2()?;
    let d = x.data();
    Ok(Tensor::from_fn(&[c, r], |i| d[(i % r) * c + i / r]))
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    a.zip_map(b, |x, y| x + y)
}

pub fn sub<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    a.zip_map(b, |x, y| x - y)
}

pub fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    a.zip_map(b, |x, y| x * y)
}

/// Adds a length-`C` vector to every row of an `(.., C)` tensor.
pub fn add_row_bias<T: Scalar>(x: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let c = x.cols();
    if bias.len() != c {
        return Err(shape_err(format!(
            "bias of length {} for {c} columns",
            bias.len()
        )));
    }
    let mut out = x.clone();
    for row in out.data_mut().chunks_exact_mut(c.max(1)) {
        for (o, &b) in row.iter_mut().zip(bias.data()) {
            *o += b;
        }
    }
    Ok(out)
}

/// Column sums of an `(.., C)` tensor, shape `(C)`.
pub fn sum_rows<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let c = x.cols();
    let mut out = vec![T::zero(); c];
    if c > 0 {
        for row in x.data().chunks_exact(c) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
    }
    Tensor {
        shape: vec![c],
        data: out,
    }
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn relu_backward<T: Scalar>(x: &Tensor<T>, grad: &Tensor<T>) -> Result<Tensor<T>> {
    x.zip_map(grad, |v, g| if v > T::zero() { g } else { T::zero() })
}

/// Exact GELU, `x·Φ(x)` with the Gaussian CDF from `erf`.
pub fn gelu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let half = T::of(0.5);
    let inv_sqrt2 = T::of(std::f64::consts::FRAC_1_SQRT_2);
    x.map(|v| half * v * (T::one() + (v * inv_sqrt2).erf()))
}

pub fn gelu_backward<T: Scalar>(x: &Tensor<T>, grad: &Tensor<T>) -> Result<Tensor<T>> {
    let half = T::of(0.5);
    let inv_sqrt2 = T::of(std::f64::consts::FRAC_1_SQRT_2);
    let inv_sqrt2pi = T::of(0.5 * std::f64::consts::FRAC_2_SQRT_PI * std::f64::consts::FRAC_1_SQRT_2);
    x.zip_map(grad, |v, g| {
        let cdf = half * (T::one() + (v * inv_sqrt2).erf());
        let pdf = inv_sqrt2pi * (-half * v * v).exp();
        g * (cdf + v * pdf)
    })
}

fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(shape_err(format!("axis {axis} for shape {shape:?}")));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

/// Numerically stable softmax along `axis` (max subtracted before `exp`).
pub fn softmax<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let (outer, len, inner) = axis_split(x.shape(), axis)?;
    let mut out = x.clone();
    let d = out.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * len * inner + j * inner + i;
            let mut m = T::neg_infinity();
            for j in 0..len {
                m = m.max(d[at(j)]);
            }
            let mut s = T::zero();
            for j in 0..len {
                let e = (d[at(j)] - m).exp();
                d[at(j)] = e;
                s += e;
            }
            for j in 0..len {
                d[at(j)] = d[at(j)] / s;
            }
        }
    }
    Ok(out)
}

/// Gradient of softmax given its output `y`.
pub fn softmax_backward<T: Scalar>(y: &Tensor<T>, grad: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    y.expect_shape(grad.shape())?;
    let (outer, len, inner) = axis_split(y.shape(), axis)?;
    let (yd, gd) = (y.data(), grad.data());
    let mut out = vec![T::zero(); y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * len * inner + j * inner + i;
            let mut s = T::zero();
            for j in 0..len {
                s += yd[at(j)] * gd[at(j)];
            }
            for j in 0..len {
                out[at(j)] = yd[at(j)] * (gd[at(j)] - s);
            }
        }
    }
    Tensor::new(y.shape().to_vec(), out)
}

/// Gathers rows of an `(N, C)` tensor; [`ABSENT`] entries yield zero rows.
pub fn gather_rows<T: Scalar>(x: &Tensor<T>, idx: &[u32]) -> Result<Tensor<T>> {
    let (n, c) = x.dims2()?;
    if let Some(&bad) = idx.iter().find(|&&i| i != ABSENT && i as usize >= n) {
        return Err(Error::Index {
            index: bad as usize,
            len: n,
        });
    }
    let mut out = vec![T::zero(); idx.len() * c];
    par::for_each_chunk_mut(&mut out, c, |r, row| {
        let i = idx[r];
        if i != ABSENT {
            row.copy_from_slice(x.row(i as usize));
        }
    });
    Tensor::new(vec![idx.len(), c], out)
}

/// Adjoint of [`gather_rows`]: accumulates row `m` of `y` into row `idx[m]`.
pub fn scatter_add_rows<T: Scalar>(y: &Tensor<T>, idx: &[u32], n: usize) -> Result<Tensor<T>> {
    let c = y.cols();
    if y.rows() != idx.len() {
        return Err(shape_err(format!(
            "scatter of {} rows with {} indices",
            y.rows(),
            idx.len()
        )));
    }
    let mut out = vec![T::zero(); n * c];
    for (m, &i) in idx.iter().enumerate() {
        if i == ABSENT {
            continue;
        }
        let i = i as usize;
        if i >= n {
            return Err(Error::Index { index: i, len: n });
        }
        let src = y.row(m);
        for (o, &v) in out[i * c..(i + 1) * c].iter_mut().zip(src) {
            *o += v;
        }
    }
    Tensor::new(vec![n, c], out)
}

/// Mean negative log-likelihood over rows whose label is not `ignore_index`.
///
/// Returns the loss and the row-wise softmax probabilities.
pub fn cross_entropy<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[usize],
    ignore_index: usize,
) -> Result<(T, Tensor<T>)> {
    let (n, l) = logits.dims2()?;
    if labels.len() != n {
        return Err(shape_err(format!("{} labels for {n} rows", labels.len())));
    }
    let probs = softmax(logits, 1)?;
    let mut total = T::zero();
    let mut count = 0usize;
    for (i, &y) in labels.iter().enumerate() {
        if y == ignore_index {
            continue;
        }
        if y >= l {
            return Err(Error::Index { index: y, len: l });
        }
        let row = logits.row(i);
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
        total += lse - row[y];
        count += 1;
    }
    if count == 0 {
        return Err(Error::DegenerateLoss);
    }
    Ok((total / T::of(count as f64), probs))
}

pub fn cross_entropy_backward<T: Scalar>(
    probs: &Tensor<T>,
    labels: &[usize],
    ignore_index: usize,
    grad: T,
) -> Tensor<T> {
    let l = probs.cols();
    let count = labels.iter().filter(|&&y| y != ignore_index).count().max(1);
    let scale = grad / T::of(count as f64);
    let mut out = Tensor::zeros(probs.shape());
    for (i, &y) in labels.iter().enumerate() {
        if y == ignore_index {
            continue;
        }
        let row = out.row_mut(i);
        for (j, (o, &p)) in row.iter_mut().zip(probs.row(i)).enumerate() {
            let target = if j == y { T::one() } else { T::zero() };
            *o = scale * (p - target);
        }
        debug_assert_eq!(row.len(), l);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    fn naive_matmul(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
        let (m, k) = a.dims2().unwrap();
        let (_, p) = b.dims2().unwrap();
        let mut out = Tensor::zeros(&[m, p]);
        for i in 0..m {
            for j in 0..p {
                let mut s = 0.0;
                for t in 0..k {
                    s += a.data()[i * k + t] * b.data()[t * p + j];
                }
                out.data_mut()[i * p + j] = s;
            }
        }
        out
    }

    #[test]
    fn matmul_identity_and_scalar() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&[4, 5], &mut rng);
        assert_eq!(matmul(&Tensor::eye(4), &x).unwrap(), x);
        let a = Tensor::new(vec![1, 1], vec![3.0f32]).unwrap();
        let b = Tensor::new(vec![1, 1], vec![-2.0f32]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[-6.0]);
        assert!(matches!(matmul(&x, &x), Err(Error::Shape(_))));
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random(&[7, 5], &mut rng);
        let b = random(&[5, 3], &mut rng);
        let got = matmul(&a, &b).unwrap();
        let want = naive_matmul(&a, &b);
        for (g, w) in got.data().iter().zip(want.data()) {
            assert!((g - w).abs() <= 1e-6 * w.abs().max(1e-12) + 1e-15);
        }
        // Batched and transposed variants agree with the same oracle.
        let a3 = Tensor::new(vec![2, 7, 5], [a.data(), a.data()].concat()).unwrap();
        let b3 = Tensor::new(vec![2, 5, 3], [b.data(), b.data()].concat()).unwrap();
        let c3 = matmul(&a3, &b3).unwrap();
        assert_eq!(&c3.data()[..21], got.data());
        assert_eq!(&c3.data()[21..], got.data());
        let bt = transpose2d(&b).unwrap();
        let mut nt = vec![0.0; 21];
        gemm_nt(a.data(), bt.data(), &mut nt, 7, 5, 3);
        assert!(Tensor::new(vec![7, 3], nt).unwrap().max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn softmax_cases() {
        let row = Tensor::new(vec![1, 4], vec![2.5f64; 4]).unwrap();
        assert!(softmax(&row, 1).unwrap().data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let one = Tensor::new(vec![3, 1], vec![-5.0f32, 0.0, 7.0]).unwrap();
        assert_eq!(softmax(&one, 1).unwrap().data(), &[1.0, 1.0, 1.0]);
        let big = Tensor::new(vec![2], vec![1000.0f32, 1000.1]).unwrap();
        let s = softmax(&big, 0).unwrap();
        let e = (0.1f64).exp();
        let want = [1.0 / (1.0 + e), e / (1.0 + e)];
        for (g, w) in s.data().iter().zip(want) {
            assert!(g.is_finite());
            // 1000.1 is not exact in f32; allow for the input rounding.
            assert!((*g as f64 - w).abs() < 1e-5);
        }
        // Non-last axis.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&[3, 4, 2], &mut rng);
        let y = softmax(&x, 1).unwrap();
        for o in 0..3 {
            for i in 0..2 {
                let s: f64 = (0..4).map(|j| y.data()[o * 8 + j * 2 + i]).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn activations() {
        let x = Tensor::new(vec![2], vec![-1.0f64, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 2.0]);
        let g = gelu(&Tensor::new(vec![2], vec![0.0f64, 1.0]).unwrap());
        assert_eq!(g.data()[0], 0.0);
        // Phi(1) = 0.841344746...
        assert!((g.data()[1] - 0.841_344_746_068_543).abs() < 1e-12);
    }

    #[test]
    fn gather_and_scatter() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(&[5, 3], &mut rng);
        let all: Vec<u32> = (0..5).collect();
        assert_eq!(gather_rows(&x, &all).unwrap(), x);
        let none = vec![ABSENT; 4];
        assert!(gather_rows(&x, &none).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(matches!(gather_rows(&x, &[5]), Err(Error::Index { index: 5, len: 5 })));
        let idx = [4, ABSENT, 0, 4, 2, 1];
        let g = gather_rows(&x, &idx).unwrap();
        for (r, &i) in idx.iter().enumerate() {
            for c in 0..3 {
                let want = if i == ABSENT { 0.0 } else { x.data()[i as usize * 3 + c] };
                assert_eq!(g.data()[r * 3 + c], want);
            }
        }
    }

    #[test]
    fn cross_entropy_cases() {
        let mut logits = Tensor::<f64>::zeros(&[3, 4]);
        for (i, y) in [1usize, 3, 0].iter().enumerate() {
            logits.row_mut(i)[*y] = 1e6;
        }
        let (loss, _) = cross_entropy(&logits, &[1, 3, 0], usize::MAX).unwrap();
        assert!(loss.abs() < 1e-12);
        let uniform = Tensor::<f64>::zeros(&[5, 6]);
        let (loss, _) = cross_entropy(&uniform, &[0, 1, 2, 3, 4], usize::MAX).unwrap();
        assert!((loss - 6f64.ln()).abs() < 1e-12);
        assert!(matches!(
            cross_entropy(&uniform, &[9; 5], 9),
            Err(Error::DegenerateLoss)
        ));
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&[6, 3], &mut rng).map(|v| v * 4.0);
        let labels = [0, 2, 7, 1, 1, 0];
        let (loss, _) = cross_entropy(&x, &labels, 7).unwrap();
        let mut want = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            if y == 7 {
                continue;
            }
            let r = x.row(i);
            let z: f64 = r.iter().map(|v| v.exp()).sum();
            want += -(r[y].exp() / z).ln();
        }
        assert!((loss - want / 5.0).abs() < 1e-12);
    }
}
