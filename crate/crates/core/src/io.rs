//! ASCII XYZ / PLY point files, normalization into the unit cube, and
//! rigid/scale augmentation.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cloud::QuantizedCloud;
use crate::error::{Error, Result};

/// Points as read from a file, in file units.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RawCloud {
    pub positions: Vec<[f64; 3]>,
    pub colors: Option<Vec<[f64; 3]>>,
    pub normals: Option<Vec<[f64; 3]>>,
}

fn parse_f64(tok: &str, line: usize) -> Result<f64> {
    let v: f64 = tok.parse().map_err(|_| Error::Parse {
        line,
        msg: format!("{tok:?} is not a number"),
    })?;
    if v.is_nan() {
        return Err(Error::Parse {
            line,
            msg: "NaN value".into(),
        });
    }
    Ok(v)
}

/// Whitespace-separated `x y z [r g b] [nx ny nz]` per line. Blank lines and
/// lines starting with `#` are skipped. Colors above 1 anywhere in the file
/// mark the file as using the 0–255 range.
pub fn read_xyz<R: BufRead>(r: R) -> Result<RawCloud> {
    let mut cloud = RawCloud::default();
    let mut colors = Vec::new();
    let mut normals = Vec::new();
    let mut width = None;
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let vals = t.split_whitespace().map(|s| parse_f64(s, lineno)).collect::<Result<Vec<f64>>>()?;
        if !matches!(vals.len(), 3 | 6 | 9) {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("expected 3, 6 or 9 columns, found {}", vals.len()),
            });
        }
        if *width.get_or_insert(vals.len()) != vals.len() {
            return Err(Error::Parse {
                line: lineno,
                msg: "column count differs from earlier lines".into(),
            });
        }
        cloud.positions.push([vals[0], vals[1], vals[2]]);
        if vals.len() >= 6 {
            colors.push([vals[3], vals[4], vals[5]]);
        }
        if vals.len() == 9 {
            normals.push([vals[6], vals[7], vals[8]]);
        }
    }
    if cloud.positions.is_empty() {
        return Err(Error::EmptyInput("point file contains no points".into()));
    }
    if !colors.is_empty() {
        if colors.iter().flatten().any(|&c| c > 1.0) {
            for c in colors.iter_mut().flatten() {
                *c /= 255.0;
            }
        }
        cloud.colors = Some(colors);
    }
    if !normals.is_empty() {
        cloud.normals = Some(normals);
    }
    Ok(cloud)
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum PlyType {
    Int,
    Float,
}

fn ply_type(name: &str) -> Option<PlyType> {
    match name {
        "char" | "uchar" | "short" | "ushort" | "int" | "uint" | "int8" | "uint8" | "int16" | "uint16" | "int32"
        | "uint32" => Some(PlyType::Int),
        "float" | "double" | "float32" | "float64" => Some(PlyType::Float),
        _ => None,
    }
}

/// ASCII PLY with a `vertex` element holding `x y z` and optionally
/// `red green blue` and `nx ny nz`. Integer colors are divided by 255.
pub fn read_ply<R: BufRead>(r: R) -> Result<RawCloud> {
    let mut lines = r.lines().enumerate();
    let mut next = |what: &str| -> Result<(usize, String)> {
        match lines.next() {
            Some((i, l)) => Ok((i + 1, l?)),
            None => Err(Error::Parse {
                line: 0,
                msg: format!("unexpected end of file in {what}"),
            }),
        }
    };
    let (_, first) = next("header")?;
    if first.trim() != "ply" {
        return Err(Error::Parse {
            line: 1,
            msg: "missing ply magic".into(),
        });
    }
    let mut vertex_count = None;
    let mut props: Vec<(String, PlyType)> = Vec::new();
    let mut in_vertex = false;
    let mut skipped_before = 0usize;
    loop {
        let (ln, line) = next("header")?;
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            ["format", "ascii", _] => {}
            ["format", f, _] => {
                return Err(Error::Parse {
                    line: ln,
                    msg: format!("unsupported PLY format {f}"),
                })
            }
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", name, n] => {
                let n: usize = n.parse().map_err(|_| Error::Parse {
                    line: ln,
                    msg: format!("bad element count {n:?}"),
                })?;
                in_vertex = *name == "vertex";
                if in_vertex {
                    vertex_count = Some(n);
                } else if vertex_count.is_none() {
                    skipped_before += n;
                }
            }
            ["property", "list", ..] if in_vertex => {
                return Err(Error::Parse {
                    line: ln,
                    msg: "list properties on vertices are not supported".into(),
                })
            }
            ["property", ty, name] if in_vertex => {
                let t = ply_type(ty).ok_or_else(|| Error::Parse {
                    line: ln,
                    msg: format!("unknown property type {ty}"),
                })?;
                props.push((name.to_string(), t));
            }
            ["property", ..] => {}
            ["end_header"] => break,
            _ => {
                return Err(Error::Parse {
                    line: ln,
                    msg: format!("unrecognized header line {line:?}"),
                })
            }
        }
    }
    if skipped_before > 0 {
        return Err(Error::Parse {
            line: 0,
            msg: "elements before the vertex element are not supported".into(),
        });
    }
    let n = vertex_count.ok_or_else(|| Error::Parse {
        line: 0,
        msg: "no vertex element".into(),
    })?;
    let col = |name: &str| props.iter().position(|p| p.0 == name);
    let pos_cols = ["x", "y", "z"].map(col);
    let color_cols = ["red", "green", "blue"].map(col);
    let normal_cols = ["nx", "ny", "nz"].map(col);
    let [Some(px), Some(py), Some(pz)] = pos_cols else {
        return Err(Error::Parse {
            line: 0,
            msg: "vertex element lacks x, y or z".into(),
        });
    };
    let all = |c: [Option<usize>; 3]| c.iter().all(Option::is_some).then(|| c.map(Option::unwrap));
    let (ccols, ncols) = (all(color_cols), all(normal_cols));
    let mut cloud = RawCloud::default();
    let mut colors = Vec::new();
    let mut normals = Vec::new();
    for _ in 0..n {
        let (ln, line) = next("vertex data")?;
        let vals = line.split_whitespace().map(|s| parse_f64(s, ln)).collect::<Result<Vec<f64>>>()?;
        if vals.len() != props.len() {
            return Err(Error::Parse {
                line: ln,
                msg: format!("expected {} values, found {}", props.len(), vals.len()),
            });
        }
        cloud.positions.push([vals[px], vals[py], vals[pz]]);
        if let Some(c) = ccols {
            colors.push(c.map(|i| if props[i].1 == PlyType::Int { vals[i] / 255.0 } else { vals[i] }));
        }
        if let Some(c) = ncols {
            normals.push(c.map(|i| vals[i]));
        }
    }
    if cloud.positions.is_empty() {
        return Err(Error::EmptyInput("PLY file contains no vertices".into()));
    }
    if ccols.is_some() {
        cloud.colors = Some(colors);
    }
    if ncols.is_some() {
        cloud.normals = Some(normals);
    }
    Ok(cloud)
}

/// Reads `.ply` files as PLY and anything else as XYZ.
pub fn read_point_file(path: &Path) -> Result<RawCloud> {
    let r = BufReader::new(File::open(path)?);
    let is_ply = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("ply"));
    if is_ply {
        read_ply(r)
    } else {
        read_xyz(r)
    }
}

fn write_row<W: Write>(w: &mut W, vals: &[f64]) -> Result<()> {
    let s: Vec<String> = vals.iter().map(|v| v.to_string()).collect();
    writeln!(w, "{}", s.join(" "))?;
    Ok(())
}

fn row(c: &RawCloud, i: usize) -> Vec<f64> {
    let mut v = c.positions[i].to_vec();
    if let Some(cs) = &c.colors {
        v.extend(cs[i]);
    }
    if let Some(ns) = &c.normals {
        v.extend(ns[i]);
    }
    v
}

/// Writes XYZ rows. A cloud with normals but no colors cannot be expressed
/// and is rejected.
pub fn write_xyz<W: Write>(mut w: W, c: &RawCloud) -> Result<()> {
    if c.normals.is_some() && c.colors.is_none() {
        return Err(Error::Format("XYZ needs colors to store normals".into()));
    }
    for i in 0..c.positions.len() {
        write_row(&mut w, &row(c, i))?;
    }
    Ok(())
}

/// Writes ASCII PLY with double coordinates, float colors in [0, 1] and
/// float normals.
pub fn write_ply<W: Write>(mut w: W, c: &RawCloud) -> Result<()> {
    writeln!(w, "ply\nformat ascii 1.0\nelement vertex {}", c.positions.len())?;
    for p in ["x", "y", "z"] {
        writeln!(w, "property double {p}")?;
    }
    if c.colors.is_some() {
        for p in ["red", "green", "blue"] {
            writeln!(w, "property float {p}")?;
        }
    }
    if c.normals.is_some() {
        for p in ["nx", "ny", "nz"] {
            writeln!(w, "property float {p}")?;
        }
    }
    writeln!(w, "end_header")?;
    for i in 0..c.positions.len() {
        write_row(&mut w, &row(c, i))?;
    }
    Ok(())
}

/// Maps file coordinates into the unit cube: `(p - origin) / extent`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub origin: [f64; 3],
    pub extent: f64,
}

/// Normalizes `raw` for an octree of `depth`. With `voxel_size` the cube edge
/// is `voxel_size * 2^depth` in file units; otherwise it is the longest
/// bounding-box side, slightly enlarged so every point lands inside.
pub fn normalize(raw: &RawCloud, depth: u32, voxel_size: Option<f64>) -> Result<(QuantizedCloud, Normalization)> {
    if raw.positions.is_empty() {
        return Err(Error::EmptyInput("no points to normalize".into()));
    }
    if raw.positions.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Domain("non-finite coordinate".into()));
    }
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in &raw.positions {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let side = (0..3).map(|a| hi[a] - lo[a]).fold(0.0, f64::max);
    let extent = match voxel_size {
        Some(s) if s > 0.0 && s.is_finite() => s * (1u64 << depth.min(60)) as f64,
        Some(s) => return Err(Error::Config(format!("voxel size {s} must be positive"))),
        None if side > 0.0 => side * (1.0 + 1e-6),
        None => 1.0,
    };
    let positions: Vec<[f64; 3]> = raw
        .positions
        .iter()
        .map(|p| [0, 1, 2].map(|a| (p[a] - lo[a]) / extent))
        .collect();
    if positions.iter().flatten().any(|&v| v >= 1.0) {
        return Err(Error::Domain(format!(
            "cloud spans {side} units, more than the {extent} covered by the octree"
        )));
    }
    let mut cloud = QuantizedCloud::new(positions, depth)?;
    if let Some(c) = &raw.colors {
        cloud = cloud.with_colors(c.clone())?;
    }
    if let Some(n) = &raw.normals {
        cloud = cloud.with_normals(n.clone())?;
    }
    Ok((cloud, Normalization { origin: lo, extent }))
}

pub fn load_point_cloud(path: &Path, depth: u32, voxel_size: Option<f64>) -> Result<QuantizedCloud> {
    normalize(&read_point_file(path)?, depth, voxel_size).map(|r| r.0)
}

/// Ranges of the random transforms; each value is drawn uniformly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Rotation about the vertical axis, degrees.
    pub rotation_deg: [f64; 2],
    pub scale: [f64; 2],
    /// Translation per axis in unit-cube coordinates.
    pub translation: [f64; 2],
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            rotation_deg: [-180.0, 180.0],
            scale: [0.75, 1.25],
            translation: [-0.1, 0.1],
        }
    }
}

impl AugmentConfig {
    pub fn identity() -> Self {
        Self {
            rotation_deg: [0.0, 0.0],
            scale: [1.0, 1.0],
            translation: [0.0, 0.0],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |r: [f64; 2]| r[0].is_finite() && r[1].is_finite() && r[0] <= r[1];
        if !ok(self.rotation_deg) || !ok(self.scale) || !ok(self.translation) || self.scale[0] <= 0.0 {
            return Err(Error::Config("augmentation ranges must be ordered, finite, and scale positive".into()));
        }
        Ok(())
    }
}

fn draw(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[0] < r[1] {
        rng.random_range(r[0]..r[1])
    } else {
        r[0]
    }
}

/// Applies `p' = c + s·Rz(θ)(p − c) + t` about the cube center `c`, rotating
/// normals with the points. Points leaving the unit cube are dropped; the
/// indices of the kept points are returned alongside.
pub fn augment(cloud: &QuantizedCloud, ops: &AugmentConfig, seed: u64) -> Result<(QuantizedCloud, Vec<usize>)> {
    ops.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let theta = draw(&mut rng, ops.rotation_deg).to_radians();
    let s = draw(&mut rng, ops.scale);
    let t = [0; 3].map(|_: i32| draw(&mut rng, ops.translation));
    if theta == 0.0 && s == 1.0 && t == [0.0; 3] {
        return Ok((cloud.clone(), (0..cloud.len()).collect()));
    }
    let (sin, cos) = theta.sin_cos();
    let rot = |v: [f64; 3]| [cos * v[0] - sin * v[1], sin * v[0] + cos * v[1], v[2]];
    let mut kept = Vec::new();
    let mut pos = Vec::new();
    for (i, p) in cloud.positions().iter().enumerate() {
        let r = rot([p[0] - 0.5, p[1] - 0.5, p[2] - 0.5]);
        let q = [0, 1, 2].map(|a| 0.5 + s * r[a] + t[a]);
        if q.iter().all(|v| (0.0..1.0).contains(v)) {
            kept.push(i);
            pos.push(q);
        }
    }
    if kept.is_empty() {
        return Err(Error::EmptyInput("augmentation moved every point out of the cube".into()));
    }
    let mut out = QuantizedCloud::new(pos, cloud.depth())?;
    if let Some(c) = cloud.colors() {
        out = out.with_colors(kept.iter().map(|&i| c[i]).collect())?;
    }
    if let Some(n) = cloud.normals() {
        out = out.with_normals(kept.iter().map(|&i| rot(n[i])).collect())?;
    }
    Ok((out, kept))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn xyz_basic_and_errors() {
        let c = read_xyz("0 0 0\n1 2 3\n\n# note\n4 5 6\n".as_bytes()).unwrap();
        assert_eq!(c.positions.len(), 3);
        assert!(c.colors.is_none());
        let err = read_xyz("0 0 0\n1 x 3\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
        assert!(matches!(read_xyz("1 nan 2\n".as_bytes()), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(read_xyz("".as_bytes()), Err(Error::EmptyInput(_))));
        let c = read_xyz("0 0 0 255 0 51\n".as_bytes()).unwrap();
        assert_eq!(c.colors.unwrap()[0], [1.0, 0.0, 0.2]);
    }

    #[test]
    fn ply_colors_scale() {
        let text = "ply\nformat ascii 1.0\ncomment x\nelement vertex 2\nproperty float x\nproperty float y\n\
                    property float z\nproperty uchar red\nproperty uchar green\nproperty uchar blue\n\
                    element face 0\nproperty list uchar int vertex_indices\nend_header\n\
                    0 0 0 255 0 0\n1 1 1 0 51 255\n";
        let c = read_ply(text.as_bytes()).unwrap();
        assert_eq!(c.positions[1], [1.0, 1.0, 1.0]);
        assert_eq!(c.colors.unwrap()[1], [0.0, 0.2, 1.0]);
    }

    #[test]
    fn normalization_fits_unit_cube() {
        let raw = RawCloud {
            positions: vec![[-1.0, 2.0, 0.0], [3.0, 2.5, 1.0]],
            ..Default::default()
        };
        let (c, n) = normalize(&raw, 4, None).unwrap();
        assert_eq!(n.origin, [-1.0, 2.0, 0.0]);
        assert!(c.positions().iter().flatten().all(|&v| (0.0..1.0).contains(&v)));
        assert!(normalize(&raw, 4, Some(0.1)).is_err());
        let (c, _) = normalize(&raw, 4, Some(0.5)).unwrap();
        assert_eq!(c.positions()[1], [0.5, 0.0625, 0.125]);
    }

    #[test]
    fn quarter_turn() {
        let c = QuantizedCloud::new(vec![[0.6, 0.5, 0.5]], 5)
            .unwrap()
            .with_normals(vec![[1.0, 0.0, 0.0]])
            .unwrap();
        let ops = AugmentConfig {
            rotation_deg: [90.0, 90.0],
            ..AugmentConfig::identity()
        };
        let (a, kept) = augment(&c, &ops, 0).unwrap();
        assert_eq!(kept, [0]);
        let p = a.positions()[0];
        assert!((p[0] - 0.5).abs() < 1e-12 && (p[1] - 0.6).abs() < 1e-12);
        let n = a.normals().unwrap()[0];
        assert!(n[0].abs() < 1e-12 && (n[1] - 1.0).abs() < 1e-12);
    }
}
