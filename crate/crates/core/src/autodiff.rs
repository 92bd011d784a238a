//! Reverse-mode differentiation over [`Tensor`] operations.
//!
//! A [`Tape`] records every operation in creation order, which is already a
//! topological order, so `backward` walks the record once from the loss
//! towards the leaves.

use std::cell::{Ref, RefCell};
use std::sync::Arc;

use crate::error::{shape_err, Error, Result};
use crate::tensor::{self, Scalar, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Backward rule for an operation defined outside this module.
///
/// Returns one gradient per input, in input order.
pub trait Backward<T: Scalar> {
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
    ) -> Result<Vec<Tensor<T>>>;
}

enum Op<T: Scalar> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddBias(Var, Var),
    Relu(Var),
    Gelu(Var),
    Softmax(Var, usize),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor<T>,
        rstd: Vec<T>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor<T>,
        rstd: Vec<T>,
        batch_stats: bool,
    },
    Gather {
        x: Var,
        idx: Arc<[u32]>,
        rows: usize,
    },
    Reshape(Var),
    Transpose(Var),
    Sum(Var),
    DotConst(Var, Tensor<T>),
    MeanRows(Var),
    CrossEntropy {
        logits: Var,
        labels: Arc<[usize]>,
        ignore: usize,
        probs: Tensor<T>,
    },
    Custom {
        inputs: Vec<Var>,
        rule: Box<dyn Backward<T>>,
    },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Single-threaded record of tensor operations.
pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Batch statistics produced by [`Tape::batch_norm_train`].
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub rows: usize,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].needs_grad)
    }

    /// A leaf whose gradient is tracked.
    pub fn param(&self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf treated as a constant.
    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.value(v).shape().to_vec()
    }

    fn unary(&self, x: Var, f: impl FnOnce(&Tensor<T>) -> Result<Tensor<T>>, op: Op<T>) -> Result<Var> {
        let out = f(&self.value(x))?;
        let needs = self.needs(&[x]);
        Ok(self.push(out, op, needs))
    }

    fn binary(
        &self,
        a: Var,
        b: Var,
        f: impl FnOnce(&Tensor<T>, &Tensor<T>) -> Result<Tensor<T>>,
        op: Op<T>,
    ) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            f(&nodes[a.0].value, &nodes[b.0].value)?
        };
        let needs = self.needs(&[a, b]);
        Ok(self.push(out, op, needs))
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, tensor::matmul, Op::MatMul(a, b))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, tensor::add, Op::Add(a, b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, tensor::mul, Op::Mul(a, b))
    }

    pub fn scale(&self, x: Var, s: T) -> Result<Var> {
        self.unary(x, |t| Ok(t.map(|v| v * s)), Op::Scale(x, s))
    }

    /// Adds a `(C)` bias to every row of `x`.
    pub fn add_bias(&self, x: Var, bias: Var) -> Result<Var> {
        self.binary(x, bias, tensor::add_row_bias, Op::AddBias(x, bias))
    }

    /// `x · w + b` for `x (N, Cin)`, `w (Cin, Cout)`, `b (Cout)`.
    pub fn linear(&self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_bias(y, b),
            None => Ok(y),
        }
    }

    pub fn relu(&self, x: Var) -> Result<Var> {
        self.unary(x, |t| Ok(tensor::relu(t)), Op::Relu(x))
    }

    pub fn gelu(&self, x: Var) -> Result<Var> {
        self.unary(x, |t| Ok(tensor::gelu(t)), Op::Gelu(x))
    }

    pub fn softmax(&self, x: Var, axis: usize) -> Result<Var> {
        self.unary(x, |t| tensor::softmax(t, axis), Op::Softmax(x, axis))
    }

    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            tensor::layer_norm(&nodes[x.0].value, &nodes[gamma.0].value, &nodes[beta.0].value, eps)?
        };
        let needs = self.needs(&[x, gamma, beta]);
        Ok(self.push(
            out.y,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat: out.xhat,
                rstd: out.rstd,
            },
            needs,
        ))
    }

    /// Batch norm with batch statistics; returns them for the running update.
    pub fn batch_norm_train(&self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<(Var, BatchStats<T>)> {
        let (y, f, rows) = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            let f = tensor::norm_impl::batch_norm_normalize(xv, eps)?;
            let y = tensor::norm_impl::affine_cols(&f.xhat, &nodes[gamma.0].value, &nodes[beta.0].value);
            (y, f, xv.rows())
        };
        let needs = self.needs(&[x, gamma, beta]);
        let var = self.push(
            y,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat: f.xhat,
                rstd: f.rstd,
                batch_stats: true,
            },
            needs,
        );
        Ok((
            var,
            BatchStats {
                mean: f.mean,
                var: f.var,
                rows,
            },
        ))
    }

    /// Batch norm with fixed running statistics.
    pub fn batch_norm_eval(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &Tensor<T>,
        var: &Tensor<T>,
        eps: T,
    ) -> Result<Var> {
        let (y, xhat, rstd) = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            if mean.len() != xv.cols() {
                return Err(shape_err("batch norm statistics length mismatch"));
            }
            let (xhat, rstd) = tensor::norm_impl::batch_norm_fixed(xv, mean, var, eps);
            let y = tensor::norm_impl::affine_cols(&xhat, &nodes[gamma.0].value, &nodes[beta.0].value);
            (y, xhat, rstd)
        };
        let needs = self.needs(&[x, gamma, beta]);
        Ok(self.push(
            y,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
                batch_stats: false,
            },
            needs,
        ))
    }

    /// Row gather with [`tensor::ABSENT`] giving zero rows.
    pub fn gather_rows(&self, x: Var, idx: Arc<[u32]>) -> Result<Var> {
        let rows = self.value(x).rows();
        let out = tensor::gather_rows(&self.value(x), &idx)?;
        let needs = self.needs(&[x]);
        Ok(self.push(out, Op::Gather { x, idx, rows }, needs))
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        self.unary(x, |t| t.clone().reshape(shape), Op::Reshape(x))
    }

    pub fn transpose(&self, x: Var) -> Result<Var> {
        self.unary(x, tensor::transpose2d, Op::Transpose(x))
    }

    pub fn sum(&self, x: Var) -> Result<Var> {
        self.unary(x, |t| Ok(Tensor::scalar(t.sum())), Op::Sum(x))
    }

    /// `<x, c>` for a constant tensor `c`; the usual probe loss for gradient checks.
    pub fn dot_const(&self, x: Var, c: Tensor<T>) -> Result<Var> {
        let out = self.value(x).dot(&c)?;
        let needs = self.needs(&[x]);
        Ok(self.push(Tensor::scalar(out), Op::DotConst(x, c), needs))
    }

    /// Mean over rows: `(N, C) -> (1, C)`.
    pub fn mean_rows(&self, x: Var) -> Result<Var> {
        self.unary(
            x,
            |t| {
                let (n, c) = t.dims2()?;
                if n == 0 {
                    return Err(Error::DegenerateInput("mean over zero rows".into()));
                }
                let inv = T::of(1.0 / n as f64);
                Tensor::new(vec![1, c], tensor::sum_rows(t).data().iter().map(|&v| v * inv).collect())
            },
            Op::MeanRows(x),
        )
    }

    pub fn cross_entropy(&self, logits: Var, labels: Arc<[usize]>, ignore: usize) -> Result<Var> {
        let (loss, probs) = tensor::cross_entropy(&self.value(logits), &labels, ignore)?;
        let needs = self.needs(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels,
                ignore,
                probs,
            },
            needs,
        ))
    }

    /// Records an externally computed `output` of `inputs` with its backward rule.
    pub fn custom(&self, inputs: &[Var], output: Tensor<T>, rule: Box<dyn Backward<T>>) -> Var {
        let needs = self.needs(inputs);
        self.push(
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                rule,
            },
            needs,
        )
    }

    /// Propagates d`loss`/d(node) for every node that needs a gradient.
    ///
    /// The tape itself is not modified, so calling this twice yields identical
    /// gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        if nodes[loss.0].value.len() != 1 {
            return Err(shape_err(format!(
                "loss must be a scalar, got shape {:?}",
                nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(nodes[loss.0].value.shape(), T::one()));

        for id in (0..=loss.0).rev() {
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let val = |v: Var| &nodes[v.0].value;
            let mut acc = |v: Var, d: Tensor<T>| -> Result<()> {
                if !nodes[v.0].needs_grad {
                    return Ok(());
                }
                match &mut grads[v.0] {
                    Some(existing) => {
                        existing.expect_shape(d.shape())?;
                        for (e, x) in existing.data_mut().iter_mut().zip(d.data()) {
                            *e += *x;
                        }
                    }
                    slot @ None => *slot = Some(d),
                }
                Ok(())
            };
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (da, db) = tensor::matmul_backward(val(*a), val(*b), &g)?;
                    acc(*a, da)?;
                    acc(*b, db)?;
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone())?;
                    acc(*b, g.clone())?;
                }
                Op::Mul(a, b) => {
                    acc(*a, tensor::mul(&g, val(*b))?)?;
                    acc(*b, tensor::mul(&g, val(*a))?)?;
                }
                Op::Scale(x, s) => acc(*x, g.map(|v| v * *s))?,
                Op::AddBias(x, b) => {
                    acc(*b, tensor::sum_rows(&g).reshape(val(*b).shape())?)?;
                    acc(*x, g.clone())?;
                }
                Op::Relu(x) => acc(*x, tensor::relu_backward(val(*x), &g)?)?,
                Op::Gelu(x) => acc(*x, tensor::gelu_backward(val(*x), &g)?)?,
                Op::Softmax(x, axis) => acc(*x, tensor::softmax_backward(&node.value, &g, *axis)?)?,
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    rstd,
                } => {
                    let (dx, dg, db) = tensor::norm_impl::layer_norm_backward(xhat, rstd, val(*gamma), &g);
                    acc(*x, dx)?;
                    acc(*gamma, dg)?;
                    acc(*beta, db)?;
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    rstd,
                    batch_stats,
                } => {
                    let (dx, dg, db) =
                        tensor::norm_impl::batch_norm_backward(xhat, rstd, val(*gamma), &g, *batch_stats);
                    acc(*x, dx)?;
                    acc(*gamma, dg)?;
                    acc(*beta, db)?;
                }
                Op::Gather { x, idx, rows } => acc(*x, tensor::scatter_add_rows(&g, idx, *rows)?)?,
                Op::Reshape(x) => acc(*x, g.clone().reshape(val(*x).shape())?)?,
                Op::Transpose(x) => acc(*x, tensor::transpose2d(&g)?)?,
                Op::Sum(x) => {
                    let s = g.item()?;
                    acc(*x, Tensor::full(val(*x).shape(), s))?;
                }
                Op::DotConst(x, c) => {
                    let s = g.item()?;
                    acc(*x, c.map(|v| v * s))?;
                }
                Op::MeanRows(x) => {
                    let xv = val(*x);
                    let (n, c) = xv.dims2()?;
                    let inv = T::of(1.0 / n as f64);
                    let d = Tensor::from_fn(&[n, c], |i| g.data()[i % c] * inv);
                    acc(*x, d)?;
                }
                Op::CrossEntropy {
                    logits,
                    labels,
                    ignore,
                    probs,
                } => {
                    let d = tensor::cross_entropy_backward(probs, labels, *ignore, g.item()?);
                    acc(*logits, d)?;
                }
                Op::Custom { inputs, rule } => {
                    let ins: Vec<&Tensor<T>> = inputs.iter().map(|&v| val(v)).collect();
                    let ds = rule.backward(&ins, &node.value, &g)?;
                    if ds.len() != inputs.len() {
                        return Err(shape_err("custom backward returned the wrong arity"));
                    }
                    for (&v, d) in inputs.iter().zip(ds) {
                        acc(v, d)?;
                    }
                }
            }
            grads[id] = Some(g);
        }
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, zero when `v` does not influence the loss.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

/// Finite-difference gradient checking.
pub mod gradcheck {
    use super::*;

    /// Below this gradient norm the absolute difference is reported instead of
    /// the relative one.
    pub const ZERO_GRADIENT: f64 = 1e-6;

    /// Outcome of comparing analytic and central-difference gradients.
    #[derive(Clone, Debug)]
    pub struct Report {
        /// Per input: `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)` over
        /// the probed coordinates, or the plain difference for vanishing
        /// gradients.
        pub rel_errors: Vec<f64>,
        pub probed: usize,
    }

    impl Report {
        pub fn max_rel_error(&self) -> f64 {
            self.rel_errors.iter().copied().fold(0.0, f64::max)
        }
    }

    /// Compares the tape gradient of the scalar built by `f` against central
    /// differences with step `h`. At most `max_probes` coordinates per input are
    /// perturbed, spread evenly over the tensor.
    pub fn check<F>(inputs: &[Tensor<f64>], f: F, h: f64, max_probes: usize) -> Result<Report>
    where
        F: Fn(&Tape<f64>, &[Var]) -> Result<Var>,
    {
        let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
            let tape = Tape::new();
            let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
            let out = f(&tape, &vars)?;
            let v = tape.value(out).item()?;
            Ok(v)
        };
        let tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x.clone())).collect();
        let loss = f(&tape, &vars)?;
        let grads = tape.backward(loss)?;

        let mut rel_errors = Vec::with_capacity(inputs.len());
        let mut probed = 0;
        let mut work = inputs.to_vec();
        for (i, v) in vars.iter().enumerate() {
            let analytic = grads.wrt(*v);
            let n = inputs[i].len();
            let stride = n.div_ceil(max_probes.max(1)).max(1);
            let (mut diff, mut na, mut nn) = (0.0f64, 0.0f64, 0.0f64);
            for j in (0..n).step_by(stride) {
                let orig = work[i].data()[j];
                work[i].data_mut()[j] = orig + h;
                let plus = eval(&work)?;
                work[i].data_mut()[j] = orig - h;
                let minus = eval(&work)?;
                work[i].data_mut()[j] = orig;
                let numeric = (plus - minus) / (2.0 * h);
                let a = analytic.data()[j];
                diff += (a - numeric).powi(2);
                na += a * a;
                nn += numeric * numeric;
                probed += 1;
            }
            let denom = na.sqrt().max(nn.sqrt());
            rel_errors.push(if denom < ZERO_GRADIENT { diff.sqrt() } else { diff.sqrt() / denom });
        }
        Ok(Report { rel_errors, probed })
    }
}

#[cfg(test)]
mod tests {
    use super::gradcheck::check;
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_t(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn sum_gradient_is_ones() {
        let tape = Tape::<f64>::new();
        let x = tape.param(rand_t(&[3, 4], 1));
        let loss = tape.sum(x).unwrap();
        let g = tape.backward(loss).unwrap();
        assert!(g.wrt(x).data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn square_gradient() {
        let tape = Tape::<f64>::new();
        let x = tape.param(Tensor::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(x).item().unwrap(), 6.0);
        // Backward does not consume the tape.
        let again = tape.backward(y).unwrap();
        assert_eq!(again.wrt(x).item().unwrap(), 6.0);
    }

    #[test]
    fn unused_and_constant_inputs_get_zero() {
        let tape = Tape::<f64>::new();
        let x = tape.param(rand_t(&[2, 2], 2));
        let unused = tape.param(rand_t(&[5], 3));
        let c = tape.constant(rand_t(&[2, 2], 4));
        let y = tape.mul(x, c).unwrap();
        let loss = tape.sum(y).unwrap();
        let g = tape.backward(loss).unwrap();
        assert!(g.wrt(unused).data().iter().all(|&v| v == 0.0));
        assert!(g.get(c).is_none());
        assert_eq!(g.wrt(x), tape.value(c).clone());
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let tape = Tape::<f64>::new();
        let x = tape.param(rand_t(&[2, 2], 2));
        assert!(matches!(tape.backward(x), Err(Error::Shape(_))));
    }

    fn probe(shape: &[usize], seed: u64) -> Tensor<f64> {
        rand_t(shape, seed + 1000)
    }

    #[test]
    fn gradcheck_elementwise_and_matmul() {
        let inputs = [rand_t(&[4, 3], 1), rand_t(&[3, 5], 2), rand_t(&[5], 3)];
        let r = check(
            &inputs,
            |t, v| {
                let y = t.matmul(v[0], v[1])?;
                let y = t.add_bias(y, v[2])?;
                let y = t.gelu(y)?;
                let z = t.relu(y)?;
                let y = t.add(y, z)?;
                let y = t.mul(y, y)?;
                let y = t.scale(y, 0.7)?;
                t.dot_const(y, probe(&[4, 5], 0))
            },
            1e-5,
            64,
        )
        .unwrap();
        assert!(r.max_rel_error() < 1e-4, "{r:?}");
    }

    #[test]
    fn gradcheck_batched_matmul_and_softmax() {
        let inputs = [rand_t(&[2, 3, 4], 4), rand_t(&[2, 4, 3], 5)];
        let r = check(
            &inputs,
            |t, v| {
                let y = t.matmul(v[0], v[1])?;
                let s = t.softmax(y, 2)?;
                let s0 = t.softmax(y, 1)?;
                let y = t.add(s, s0)?;
                t.dot_const(y, probe(&[2, 3, 3], 1))
            },
            1e-5,
            64,
        )
        .unwrap();
        assert!(r.max_rel_error() < 1e-4, "{r:?}");
    }

    #[test]
    fn gradcheck_norms() {
        let inputs = [rand_t(&[6, 5], 6), rand_t(&[5], 7), rand_t(&[5], 8)];
        let r = check(
            &inputs,
            |t, v| {
                let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
                let (z, _) = t.batch_norm_train(y, v[1], v[2], 1e-5)?;
                let m = Tensor::from_fn(&[5], |i| 0.1 * i as f64);
                let var = Tensor::from_fn(&[5], |i| 1.0 + 0.2 * i as f64);
                let w = t.batch_norm_eval(z, v[1], v[2], &m, &var, 1e-5)?;
                t.dot_const(w, probe(&[6, 5], 2))
            },
            1e-5,
            64,
        )
        .unwrap();
        assert!(r.max_rel_error() < 1e-4, "{r:?}");
    }

    #[test]
    fn gradcheck_gather_reshape_transpose_mean_ce() {
        let inputs = [rand_t(&[5, 4], 9)];
        let idx: Arc<[u32]> = Arc::from(vec![2, tensor::ABSENT, 0, 2, 4, 1]);
        let r = check(
            &inputs,
            |t, v| {
                let g = t.gather_rows(v[0], idx.clone())?;
                let r = t.reshape(g, &[4, 6])?;
                let tr = t.transpose(r)?;
                let m = t.mean_rows(tr)?;
                let s = t.sum(m)?;
                let logits = t.scale(g, 3.0)?;
                let ce = t.cross_entropy(logits, Arc::from(vec![0, 1, 9, 3, 2, 1]), 9)?;
                t.add(ce, s)
            },
            1e-5,
            64,
        )
        .unwrap();
        assert!(r.max_rel_error() < 1e-4, "{r:?}");
    }

    #[test]
    fn gather_scatter_adjoint() {
        let x = rand_t(&[7, 3], 11);
        let idx = [6u32, 0, tensor::ABSENT, 3, 3, 1, 0, 5];
        let y = rand_t(&[8, 3], 12);
        let lhs = tensor::gather_rows(&x, &idx).unwrap().dot(&y).unwrap();
        let rhs = x.dot(&tensor::scatter_add_rows(&y, &idx, 7).unwrap()).unwrap();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
