//! Fixed-size window partition of a z-order sorted token sequence.
//!
//! Tokens are padded to a multiple of `k * d`. With `d == 1` window `w` holds
//! positions `w*k .. (w+1)*k`; with `d > 1` the padded sequence is viewed as
//! `(B/d, k, d)`, transposed to `(B/d, d, k)` and flattened, so window
//! `b*d + j` holds positions `b*k*d + i*d + j` for `i in 0..k`.

use std::io::Write;

use crate::error::{shape_err, Result};
use crate::octree::filter_and_pad_count;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PartitionPlan {
    n: usize,
    k: usize,
    d: usize,
    padded: usize,
}

pub fn make_plan(n: usize, k: usize, d: usize) -> Result<PartitionPlan> {
    if k == 0 || d == 0 {
        return Err(crate::Error::Config(format!(
            "point number and dilation must be positive, got k={k} d={d}"
        )));
    }
    Ok(PartitionPlan {
        n,
        k,
        d,
        padded: filter_and_pad_count(n, k, d),
    })
}

impl PartitionPlan {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn padded(&self) -> usize {
        self.padded
    }

    pub fn windows(&self) -> usize {
        self.padded / self.k
    }

    /// Sequence position held by `(window, slot)`.
    #[inline]
    pub fn position(&self, window: usize, slot: usize) -> usize {
        let (b, j) = (window / self.d, window % self.d);
        b * self.k * self.d + slot * self.d + j
    }

    /// `(window, slot)` holding sequence position `pos`.
    #[inline]
    pub fn slot_of(&self, pos: usize) -> (usize, usize) {
        let kd = self.k * self.d;
        let (b, r) = (pos / kd, pos % kd);
        (b * self.d + r % self.d, r / self.d)
    }

    pub fn is_pad(&self, pos: usize) -> bool {
        pos >= self.n
    }

    pub fn mask(&self) -> Vec<bool> {
        (0..self.padded).map(|p| self.is_pad(p)).collect()
    }

    /// Flat window-major index `window * k + slot` of every sequence position.
    pub fn layout(&self) -> Vec<usize> {
        (0..self.padded)
            .map(|p| {
                let (w, s) = self.slot_of(p);
                w * self.k + s
            })
            .collect()
    }

    /// Real token positions in window `w`, in slot order.
    pub fn members(&self, w: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.k)
            .map(move |s| self.position(w, s))
            .take_while(move |&p| p < self.n)
    }

    /// Writes `window,slot,source_index,is_pad` rows; `source_index` is empty
    /// for padded slots.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "window,slot,source_index,is_pad")?;
        for win in 0..self.windows() {
            for slot in 0..self.k {
                let p = self.position(win, slot);
                if self.is_pad(p) {
                    writeln!(w, "{win},{slot},,1")?;
                } else {
                    writeln!(w, "{win},{slot},{p},0")?;
                }
            }
        }
        Ok(())
    }
}

/// Gathers `x (n, C)` into windows `(B, k, C)` with zero rows in padded slots.
pub fn apply_plan<T: Scalar>(x: &Tensor<T>, plan: &PartitionPlan) -> Result<Tensor<T>> {
    let (n, c) = x.dims2()?;
    if n != plan.n {
        return Err(shape_err(format!("plan expects {} rows, got {n}", plan.n)));
    }
    let mut out = Tensor::zeros(&[plan.windows(), plan.k, c]);
    let data = out.data_mut();
    for w in 0..plan.windows() {
        for s in 0..plan.k {
            let p = plan.position(w, s);
            if p < n {
                let dst = (w * plan.k + s) * c;
                data[dst..dst + c].copy_from_slice(x.row(p));
            }
        }
    }
    Ok(out)
}

/// Inverse of [`apply_plan`], dropping padded slots.
pub fn reverse_plan<T: Scalar>(y: &Tensor<T>, plan: &PartitionPlan) -> Result<Tensor<T>> {
    let [b, k, c] = y.shape()[..] else {
        return Err(shape_err(format!("expected (B, K, C) windows, got {:?}", y.shape())));
    };
    if b != plan.windows() || k != plan.k {
        return Err(shape_err(format!(
            "windows {:?} do not match plan ({}, {})",
            y.shape(),
            plan.windows(),
            plan.k
        )));
    }
    let mut out = Tensor::zeros(&[plan.n, c]);
    for p in 0..plan.n {
        let (w, s) = plan.slot_of(p);
        let src = (w * k + s) * c;
        out.row_mut(p).copy_from_slice(&y.data()[src..src + c]);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_dilated_example() {
        let p = make_plan(5, 4, 2).unwrap();
        assert_eq!(p.padded(), 8);
        assert_eq!(p.windows(), 2);
        assert_eq!(p.mask(), [false, false, false, false, false, true, true, true]);
        assert_eq!((0..4).map(|s| p.position(0, s)).collect::<Vec<_>>(), [0, 2, 4, 6]);
        assert_eq!((0..4).map(|s| p.position(1, s)).collect::<Vec<_>>(), [1, 3, 5, 7]);
        assert_eq!(p.members(1).collect::<Vec<_>>(), [1, 3]);
    }

    #[test]
    fn plain_plan_is_identity_layout() {
        let p = make_plan(28, 7, 1).unwrap();
        assert_eq!(p.windows(), 4);
        assert_eq!(p.layout(), (0..28).collect::<Vec<_>>());
    }

    #[test]
    fn layout_is_a_bijection() {
        for (n, k, d) in [(0, 3, 2), (1, 1, 1), (29, 7, 2), (100, 16, 4), (257, 32, 4)] {
            let p = make_plan(n, k, d).unwrap();
            let mut seen = vec![false; p.padded()];
            for (pos, &flat) in p.layout().iter().enumerate() {
                assert!(!seen[flat]);
                seen[flat] = true;
                assert_eq!(p.position(flat / k, flat % k), pos);
            }
            assert!(p.padded() - n < k * d);
        }
    }

    #[test]
    fn apply_then_reverse_is_identity() {
        let x = Tensor::<f64>::from_fn(&[29, 3], |i| i as f64);
        let p = make_plan(29, 4, 3).unwrap();
        let w = apply_plan(&x, &p).unwrap();
        assert_eq!(w.shape(), &[9, 4, 3]);
        for win in 0..9 {
            for s in 0..4 {
                let pos = p.position(win, s);
                let got = &w.data()[(win * 4 + s) * 3..(win * 4 + s + 1) * 3];
                if pos < 29 {
                    assert_eq!(got, x.row(pos));
                } else {
                    assert!(got.iter().all(|&v| v == 0.0));
                }
            }
        }
        assert_eq!(reverse_plan(&w, &p).unwrap(), x);
        assert!(apply_plan(&Tensor::<f64>::zeros(&[3, 3]), &p).is_err());
    }

    #[test]
    fn csv_dump() {
        let mut out = Vec::new();
        make_plan(5, 4, 2).unwrap().write_csv(&mut out).unwrap();
        let s = String::from_utf8(out).unwrap();
        let lines: Vec<&str> = s.lines().collect();
        assert_eq!(lines[0], "window,slot,source_index,is_pad");
        assert_eq!(lines[1], "0,0,0,0");
        assert_eq!(lines[4], "0,3,,1");
        assert_eq!(lines[6], "1,1,3,0");
    }
}
