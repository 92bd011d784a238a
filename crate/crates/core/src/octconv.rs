//! Sparse convolutions over the non-empty nodes of one octree depth.
//!
//! Every variant is a gather table (`rows × taps` node indices) followed by a
//! dense product with the weights. Absent neighbors read as zero rows.

use std::sync::Arc;

use crate::autodiff::{Backward, Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::octree::{stencil3, IndexTable, Octree};
use crate::par;
use crate::tensor::{self, Scalar, Tensor, ABSENT};

/// Kernel sizes of the five embedding convolutions.
pub const EMBED_KERNELS: [usize; 5] = [3, 2, 3, 2, 3];
/// Strides of the five embedding convolutions.
pub const EMBED_STRIDES: [usize; 5] = [1, 2, 1, 2, 1];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: usize,
    pub stride: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub depthwise: bool,
}

impl ConvSpec {
    pub fn new(kernel: usize, stride: usize, in_channels: usize, out_channels: usize) -> Result<Self> {
        let s = Self {
            kernel,
            stride,
            in_channels,
            out_channels,
            depthwise: false,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn depthwise(kernel: usize, stride: usize, channels: usize) -> Result<Self> {
        let s = Self {
            kernel,
            stride,
            in_channels: channels,
            out_channels: channels,
            depthwise: true,
        };
        s.validate()?;
        Ok(s)
    }

    fn validate(&self) -> Result<()> {
        match (self.kernel, self.stride) {
            (3, 1) | (3, 2) | (2, 2) => {}
            (k, s) => return Err(Error::Config(format!("unsupported convolution kernel {k} stride {s}"))),
        }
        if self.depthwise && self.in_channels != self.out_channels {
            return Err(Error::Config("depthwise convolution must keep the channel count".into()));
        }
        Ok(())
    }

    pub fn taps(&self) -> usize {
        self.kernel.pow(3)
    }

    /// `(taps, C_in, C_out)`, or `(taps, C)` when depthwise.
    pub fn weight_shape(&self) -> Vec<usize> {
        if self.depthwise {
            vec![self.taps(), self.in_channels]
        } else {
            vec![self.taps(), self.in_channels, self.out_channels]
        }
    }

    pub fn num_weights(&self) -> usize {
        self.weight_shape().iter().product()
    }

    /// Depth of the output nodes for input at `depth`.
    pub fn output_depth(&self, depth: u32) -> Result<u32> {
        if self.stride == 2 {
            if depth < 2 {
                return Err(Error::Range(format!("cannot downsample from depth {depth}")));
            }
            Ok(depth - 1)
        } else {
            Ok(depth)
        }
    }
}

/// Gather table for a convolution reading depth `depth`. Rows are output
/// nodes, taps are in z-fastest offset order.
pub fn conv_table(octree: &Octree, depth: u32, kernel: usize, stride: usize) -> Result<IndexTable> {
    if depth == 0 || depth > octree.depth() {
        return Err(Error::Range(format!(
            "depth {depth} outside [1, {}]",
            octree.depth()
        )));
    }
    match (kernel, stride) {
        (3, 1) => octree.neighbor_indices(depth, &stencil3()),
        (2, 2) => {
            let parents = octree.keys(depth - 1)?;
            let rows: Vec<[u32; 8]> = par::map_range(parents.len(), |i| {
                let mut row = [ABSENT; 8];
                for j in octree.children(depth - 1, i).expect("parent index in range") {
                    let code = octree.keys(depth).expect("depth checked")[j];
                    row[(code & 7) as usize] = j as u32;
                }
                row
            });
            Ok(IndexTable {
                rows: parents.len(),
                taps: 8,
                idx: rows.into_iter().flatten().collect(),
            })
        }
        (3, 2) => {
            let parents = octree.keys(depth - 1)?;
            let side = 1i64 << depth;
            let offs = stencil3();
            let rows: Vec<Vec<u32>> = par::map_range(parents.len(), |i| {
                let [x, y, z] = octree.coords(depth - 1, i).expect("index in range");
                let anchor = [2 * x as i64, 2 * y as i64, 2 * z as i64];
                offs.iter()
                    .map(|o| {
                        let p = [0, 1, 2].map(|a| anchor[a] + o[a] as i64);
                        if p.iter().any(|&v| !(0..side).contains(&v)) {
                            return ABSENT;
                        }
                        let code = crate::morton::interleave(p[0] as u32, p[1] as u32, p[2] as u32);
                        octree.find(depth, code).map_or(ABSENT, |j| j as u32)
                    })
                    .collect()
            });
            Ok(IndexTable {
                rows: parents.len(),
                taps: 27,
                idx: rows.into_iter().flatten().collect(),
            })
        }
        (k, s) => Err(Error::Config(format!("unsupported convolution kernel {k} stride {s}"))),
    }
}

fn check_input<T: Scalar>(x: &Tensor<T>, octree: &Octree, depth: u32, channels: usize) -> Result<()> {
    let (n, c) = x.dims2()?;
    let want = octree.num_nodes(depth)?;
    if n != want || c != channels {
        return Err(shape_err(format!(
            "convolution input {:?} does not match ({want}, {channels}) at depth {depth}",
            x.shape()
        )));
    }
    Ok(())
}

/// Applies a convolution at `depth` with explicit weights.
pub fn octree_conv<T: Scalar>(
    x: &Tensor<T>,
    octree: &Octree,
    depth: u32,
    spec: &ConvSpec,
    weights: &Tensor<T>,
) -> Result<Tensor<T>> {
    spec.validate()?;
    check_input(x, octree, depth, spec.in_channels)?;
    weights.expect_shape(&spec.weight_shape())?;
    let table = conv_table(octree, depth, spec.kernel, spec.stride)?;
    if spec.depthwise {
        depthwise_forward(x, &table, weights)
    } else {
        dense_forward(x, &table, weights)
    }
}

fn dense_forward<T: Scalar>(x: &Tensor<T>, table: &IndexTable, w: &Tensor<T>) -> Result<Tensor<T>> {
    let cin = x.cols();
    let cols = tensor::gather_rows(x, &table.idx)?.reshape(&[table.rows, table.taps * cin])?;
    let w2 = w.clone().reshape(&[table.taps * cin, w.len() / (table.taps * cin)])?;
    tensor::matmul(&cols, &w2)
}

/// `out[i, c] = Σ_t w[t, c] · x[table(i, t), c]`.
pub fn depthwise_forward<T: Scalar>(x: &Tensor<T>, table: &IndexTable, w: &Tensor<T>) -> Result<Tensor<T>> {
    let c = x.cols();
    w.expect_shape(&[table.taps, c])?;
    let n = x.rows();
    if let Some(&bad) = table.idx.iter().find(|&&j| j != ABSENT && j as usize >= n) {
        return Err(Error::Index { index: bad as usize, len: n });
    }
    let mut out = Tensor::zeros(&[table.rows, c]);
    par::for_each_chunk_mut(out.data_mut(), c.max(1), |i, row| {
        for (t, &j) in table.row(i).iter().enumerate() {
            if j != ABSENT {
                let src = x.row(j as usize);
                let wt = &w.data()[t * c..(t + 1) * c];
                for ((o, &a), &b) in row.iter_mut().zip(src).zip(wt) {
                    *o += a * b;
                }
            }
        }
    });
    Ok(out)
}

/// Gradients of [`depthwise_forward`] with respect to input and weights.
pub fn depthwise_backward<T: Scalar>(
    x: &Tensor<T>,
    table: &IndexTable,
    w: &Tensor<T>,
    grad: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let c = x.cols();
    let mut dx = Tensor::zeros(x.shape());
    let mut dw = Tensor::zeros(w.shape());
    for i in 0..table.rows {
        let g = grad.row(i);
        for (t, &j) in table.row(i).iter().enumerate() {
            if j == ABSENT {
                continue;
            }
            let j = j as usize;
            let wt = &w.data()[t * c..(t + 1) * c];
            for (k, v) in dx.row_mut(j).iter_mut().enumerate() {
                *v += wt[k] * g[k];
            }
            let xs = x.row(j);
            for (k, v) in dw.data_mut()[t * c..(t + 1) * c].iter_mut().enumerate() {
                *v += xs[k] * g[k];
            }
        }
    }
    (dx, dw)
}

struct DepthwiseBackward {
    table: IndexTable,
}

impl<T: Scalar> Backward<T> for DepthwiseBackward {
    fn backward(&self, inputs: &[&Tensor<T>], _output: &Tensor<T>, grad: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let (dx, dw) = depthwise_backward(inputs[0], &self.table, inputs[1], grad);
        Ok(vec![dx, dw])
    }
}

/// Records a depthwise convolution of `x` with weights `w (taps, C)`.
pub fn depthwise_tape<T: Scalar>(tape: &Tape<T>, x: Var, table: &IndexTable, w: Var) -> Result<Var> {
    let out = depthwise_forward(&tape.value(x), table, &tape.value(w))?;
    Ok(tape.custom(
        &[x, w],
        out,
        Box::new(DepthwiseBackward { table: table.clone() }),
    ))
}

/// Records a dense convolution of `x (N, C_in)` with weights `w (taps, C_in, C_out)`.
pub fn conv_tape<T: Scalar>(tape: &Tape<T>, x: Var, table: &IndexTable, w: Var) -> Result<Var> {
    let cin = tape.value(x).cols();
    let wshape = tape.shape(w);
    let [taps, wc, cout] = wshape[..] else {
        return Err(shape_err(format!("convolution weights must be 3-D, got {wshape:?}")));
    };
    if taps != table.taps || wc != cin {
        return Err(shape_err(format!(
            "weights {wshape:?} do not match {} taps over {cin} channels",
            table.taps
        )));
    }
    let g = tape.gather_rows(x, Arc::clone(&table.idx))?;
    let g = tape.reshape(g, &[table.rows, taps * cin])?;
    let w2 = tape.reshape(w, &[taps * cin, cout])?;
    tape.matmul(g, w2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloud::QuantizedCloud;
    use crate::octree::build_octree;

    fn grid(side: usize) -> Octree {
        let depth = side.trailing_zeros();
        let s = side as f64;
        let pts = (0..side.pow(3))
            .map(|i| [i / (side * side), (i / side) % side, i % side].map(|v| (v as f64 + 0.5) / s))
            .collect();
        build_octree(&QuantizedCloud::new(pts, depth).unwrap()).unwrap()
    }

    #[test]
    fn kernel2_sums_present_children() {
        let pts = vec![[0.1, 0.1, 0.1], [0.1, 0.1, 0.3], [0.3, 0.3, 0.3], [0.9, 0.9, 0.9]];
        let o = build_octree(&QuantizedCloud::new(pts, 2).unwrap()).unwrap();
        let spec = ConvSpec::depthwise(2, 2, 2).unwrap();
        let x = Tensor::<f64>::full(&[o.num_nodes(2).unwrap(), 2], 1.5);
        let w = Tensor::full(&[8, 2], 1.0);
        let y = octree_conv(&x, &o, 2, &spec, &w).unwrap();
        assert_eq!(y.shape(), &[2, 2]);
        assert_eq!(y.data(), &[4.5, 4.5, 1.5, 1.5]);
    }

    #[test]
    fn center_identity_kernel() {
        let o = grid(4);
        let spec = ConvSpec::new(3, 1, 3, 3).unwrap();
        let mut w = Tensor::<f64>::zeros(&spec.weight_shape());
        for c in 0..3 {
            w.data_mut()[13 * 9 + c * 3 + c] = 1.0;
        }
        let x = Tensor::from_fn(&[64, 3], |i| (i as f64).sin());
        assert_eq!(octree_conv(&x, &o, 2, &spec, &w).unwrap(), x);
    }

    #[test]
    fn rejects_bad_inputs() {
        let o = grid(4);
        let spec = ConvSpec::new(3, 1, 3, 3).unwrap();
        let w = Tensor::<f64>::zeros(&spec.weight_shape());
        assert!(octree_conv(&Tensor::zeros(&[5, 3]), &o, 2, &spec, &w).is_err());
        assert!(matches!(
            octree_conv(&Tensor::zeros(&[64, 3]), &o, 5, &spec, &w),
            Err(Error::Range(_))
        ));
        assert!(ConvSpec::new(4, 1, 1, 1).is_err());
    }

    #[test]
    fn depthwise_backward_is_adjoint() {
        let o = grid(4);
        let t = conv_table(&o, 2, 3, 1).unwrap();
        let x = Tensor::<f64>::from_fn(&[64, 2], |i| ((i * 7) % 11) as f64 - 5.0);
        let w = Tensor::from_fn(&[27, 2], |i| (i as f64 * 0.37).cos());
        let g = Tensor::from_fn(&[64, 2], |i| (i as f64 * 0.11).sin());
        let y = depthwise_forward(&x, &t, &w).unwrap();
        let (dx, dw) = depthwise_backward(&x, &t, &w, &g);
        let lhs = y.dot(&g).unwrap();
        assert!((lhs - x.dot(&dx).unwrap()).abs() < 1e-9);
        assert!((lhs - w.dot(&dw).unwrap()).abs() < 1e-9);
    }
}
