//! Shuffled keys: 3D z-order codes with the x bit highest in every triple.
//!
//! A key at depth `d` interleaves the `d` bits of each coordinate as
//! `x1 y1 z1 x2 y2 z2 ... xd yd zd`, so sorting keys walks the z-order curve
//! and the eight children of a node are the consecutive codes `8p..8p+8`.

use crate::error::{Error, Result};

pub const MAX_DEPTH: u32 = 21;

/// Interleaved-bit code of an octree node at a given depth.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ShuffledKey {
    code: u64,
    depth: u32,
}

// Spreads the low 21 bits of `v` so that bit i lands on bit 3i.
#[inline]
fn spread(v: u64) -> u64 {
    let mut x = v & 0x1f_ffff;
    x = (x | (x << 32)) & 0x001f_0000_0000_ffff;
    x = (x | (x << 16)) & 0x001f_0000_ff00_00ff;
    x = (x | (x << 8)) & 0x100f_00f0_0f00_f00f;
    x = (x | (x << 4)) & 0x10c3_0c30_c30c_30c3;
    x = (x | (x << 2)) & 0x1249_2492_4924_9249;
    x
}

#[inline]
fn compact(v: u64) -> u64 {
    let mut x = v & 0x1249_2492_4924_9249;
    x = (x | (x >> 2)) & 0x10c3_0c30_c30c_30c3;
    x = (x | (x >> 4)) & 0x100f_00f0_0f00_f00f;
    x = (x | (x >> 8)) & 0x001f_0000_ff00_00ff;
    x = (x | (x >> 16)) & 0x001f_0000_0000_ffff;
    x = (x | (x >> 32)) & 0x1f_ffff;
    x
}

/// Interleaves coordinates without range checks. Callers guarantee
/// `x, y, z < 2^21`.
#[inline]
pub fn interleave(x: u32, y: u32, z: u32) -> u64 {
    (spread(x as u64) << 2) | (spread(y as u64) << 1) | spread(z as u64)
}

#[inline]
pub fn deinterleave(code: u64) -> (u32, u32, u32) {
    (
        compact(code >> 2) as u32,
        compact(code >> 1) as u32,
        compact(code) as u32,
    )
}

fn check_depth(depth: u32) -> Result<()> {
    if (1..=MAX_DEPTH).contains(&depth) {
        Ok(())
    } else {
        Err(Error::Range(format!("depth {depth} outside [1, {MAX_DEPTH}]")))
    }
}

impl ShuffledKey {
    /// Wraps a raw code, checking `code < 8^depth`.
    pub fn new(code: u64, depth: u32) -> Result<Self> {
        check_depth(depth)?;
        if code >> (3 * depth) != 0 {
            return Err(Error::Range(format!(
                "code {code} does not fit depth {depth}"
            )));
        }
        Ok(Self { code, depth })
    }

    pub fn code(self) -> u64 {
        self.code
    }

    pub fn depth(self) -> u32 {
        self.depth
    }
}

pub fn encode(x: u32, y: u32, z: u32, depth: u32) -> Result<ShuffledKey> {
    check_depth(depth)?;
    let side = 1u64 << depth;
    for (name, v) in [("x", x), ("y", y), ("z", z)] {
        if v as u64 >= side {
            return Err(Error::Range(format!(
                "{name}={v} outside [0, {side}) at depth {depth}"
            )));
        }
    }
    Ok(ShuffledKey {
        code: interleave(x, y, z),
        depth,
    })
}

pub fn decode(key: ShuffledKey) -> Result<(u32, u32, u32)> {
    // Re-validate: keys can be built through `new` only, but keep decode total.
    ShuffledKey::new(key.code, key.depth)?;
    Ok(deinterleave(key.code))
}

/// Key of the parent node one level up.
pub fn parent_key(key: ShuffledKey) -> Result<ShuffledKey> {
    if key.depth < 2 {
        return Err(Error::Domain(
            "a depth-1 node has no parent node key".into(),
        ));
    }
    Ok(ShuffledKey {
        code: key.code >> 3,
        depth: key.depth - 1,
    })
}

/// The contiguous range of the eight child codes one level down.
pub fn child_codes(key: ShuffledKey) -> std::ops::Range<u64> {
    let base = key.code << 3;
    base..base + 8
}

/// Key of the node at `(x+dx, y+dy, z+dz)`, or `None` outside the grid.
pub fn neighbor_key(key: ShuffledKey, dx: i64, dy: i64, dz: i64) -> Option<ShuffledKey> {
    let (x, y, z) = deinterleave(key.code);
    let side = 1i64 << key.depth;
    let shift = |c: u32, d: i64| {
        let v = c as i64 + d;
        (0..side).contains(&v).then_some(v as u32)
    };
    let (nx, ny, nz) = (shift(x, dx)?, shift(y, dy)?, shift(z, dz)?);
    Some(ShuffledKey {
        code: interleave(nx, ny, nz),
        depth: key.depth,
    })
}
