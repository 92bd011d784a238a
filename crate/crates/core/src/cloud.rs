use crate::error::{Error, Result};
use crate::morton::MAX_DEPTH;

/// A point cloud normalized into the unit cube together with the octree depth
/// used to quantize it.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedCloud {
    positions: Vec<[f64; 3]>,
    colors: Option<Vec<[f64; 3]>>,
    normals: Option<Vec<[f64; 3]>>,
    depth: u32,
}

impl QuantizedCloud {
    pub fn new(positions: Vec<[f64; 3]>, depth: u32) -> Result<Self> {
        if !(1..=MAX_DEPTH).contains(&depth) {
            return Err(Error::Range(format!("depth {depth} not in [1, {MAX_DEPTH}]")));
        }
        if let Some((i, p)) = positions
            .iter()
            .enumerate()
            .find(|(_, p)| !p.iter().all(|v| (0.0..1.0).contains(v)))
        {
            return Err(Error::Domain(format!("point {i} at {p:?} lies outside [0,1)^3")));
        }
        Ok(Self {
            positions,
            colors: None,
            normals: None,
            depth,
        })
    }

    pub fn with_colors(mut self, colors: Vec<[f64; 3]>) -> Result<Self> {
        self.check_len(colors.len(), "colors")?;
        self.colors = Some(colors);
        Ok(self)
    }

    pub fn with_normals(mut self, normals: Vec<[f64; 3]>) -> Result<Self> {
        self.check_len(normals.len(), "normals")?;
        self.normals = Some(normals);
        Ok(self)
    }

    fn check_len(&self, n: usize, what: &str) -> Result<()> {
        if n == self.positions.len() {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "{what} has {n} entries for {} points",
                self.positions.len()
            )))
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn depth(&self) -> u32 {
        self.depth
    }

    pub fn positions(&self) -> &[[f64; 3]] {
        &self.positions
    }

    pub fn colors(&self) -> Option<&[[f64; 3]]> {
        self.colors.as_deref()
    }

    pub fn normals(&self) -> Option<&[[f64; 3]]> {
        self.normals.as_deref()
    }

    /// Same points quantized at another depth.
    pub fn at_depth(&self, depth: u32) -> Result<Self> {
        let mut c = Self::new(self.positions.clone(), depth)?;
        c.colors.clone_from(&self.colors);
        c.normals.clone_from(&self.normals);
        Ok(c)
    }

    /// Integer cell of point `i` at the cloud depth.
    pub fn cell(&self, i: usize) -> [u32; 3] {
        let s = (1u64 << self.depth) as f64;
        self.positions[i].map(|v| ((v * s).floor() as u32).min((1u32 << self.depth) - 1))
    }

    /// Keeps the points at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Self {
        let pick = |v: &Vec<[f64; 3]>| indices.iter().map(|&i| v[i]).collect();
        Self {
            positions: pick(&self.positions),
            colors: self.colors.as_ref().map(pick),
            normals: self.normals.as_ref().map(pick),
            depth: self.depth,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_points_outside_unit_cube() {
        assert!(QuantizedCloud::new(vec![[0.5, 0.5, 1.0]], 3).is_err());
        assert!(QuantizedCloud::new(vec![[0.5, -0.1, 0.5]], 3).is_err());
        assert!(QuantizedCloud::new(vec![[0.5, 0.5, 0.5]], 0).is_err());
    }

    #[test]
    fn attribute_lengths_must_match() {
        let c = QuantizedCloud::new(vec![[0.1; 3], [0.2; 3]], 2).unwrap();
        assert!(c.clone().with_colors(vec![[1.0; 3]]).is_err());
        assert!(c.with_normals(vec![[0.0, 0.0, 1.0]; 2]).is_ok());
    }

    #[test]
    fn cells_floor() {
        let c = QuantizedCloud::new(vec![[0.0, 0.25, 0.999_999]], 2).unwrap();
        assert_eq!(c.cell(0), [0, 1, 3]);
    }
}
