//! Tiling patterns as data.
//!
//! A pattern is described twice, independently:
//!
//! * an **edge identification table**: where a pixel just beyond each edge
//!   of the patch lands back inside the patch, and
//! * a **tile table**: which transform of the patch occupies plane tile
//!   `(i, j)`, plus the per-row horizontal offset.
//!
//! The two must agree on every seam; [`TilingPattern::check_consistency`]
//! verifies this exhaustively.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatternName {
    Grid,
    Projective,
    Spherical,
    Hexagonal,
}

impl PatternName {
    pub const ALL: [PatternName; 4] =
        [PatternName::Grid, PatternName::Projective, PatternName::Spherical, PatternName::Hexagonal];
}

impl fmt::Display for PatternName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            PatternName::Grid => "grid",
            PatternName::Projective => "projective",
            PatternName::Spherical => "spherical",
            PatternName::Hexagonal => "hexagonal",
        };
        f.write_str(s)
    }
}

impl FromStr for PatternName {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "grid" => Ok(PatternName::Grid),
            "projective" => Ok(PatternName::Projective),
            "spherical" => Ok(PatternName::Spherical),
            "hexagonal" => Ok(PatternName::Hexagonal),
            other => Err(Error::Config(format!(
                "unknown tiling pattern {other:?} (expected grid, projective, spherical or hexagonal)"
            ))),
        }
    }
}

/// `u*u + t*t + last*(n-1) + half*(n/2)` for an axis of extent `n`.
///
/// `u` is the distance beyond the edge (0 for the first outside pixel), `t`
/// the coordinate along the edge.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IndexExpr {
    #[serde(default)]
    pub u: i64,
    #[serde(default)]
    pub t: i64,
    #[serde(default)]
    pub last: i64,
    #[serde(default)]
    pub half: i64,
}

impl IndexExpr {
    const fn new(u: i64, t: i64, last: i64, half: i64) -> Self {
        IndexExpr { u, t, last, half }
    }

    pub fn eval(&self, u: i64, t: i64, n: i64) -> i64 {
        self.u * u + self.t * t + self.last * (n - 1) + self.half * (n / 2)
    }

    fn uses_u_or_t(&self) -> bool {
        self.u != 0 || self.t != 0
    }
}

const U: IndexExpr = IndexExpr::new(1, 0, 0, 0);
const T: IndexExpr = IndexExpr::new(0, 1, 0, 0);
const LAST_MINUS_U: IndexExpr = IndexExpr::new(-1, 0, 1, 0);
const LAST_MINUS_T: IndexExpr = IndexExpr::new(0, -1, 1, 0);
const T_PLUS_HALF: IndexExpr = IndexExpr::new(0, 1, 0, 1);

/// Destination `(row, col)` of a point beyond one edge.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdgeMap {
    pub row: IndexExpr,
    pub col: IndexExpr,
}

/// One [`EdgeMap`] per patch edge. For `left`/`right` the edge coordinate
/// `t` is the row; for `top`/`bottom` it is the column.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdgeTable {
    pub right: EdgeMap,
    pub left: EdgeMap,
    pub bottom: EdgeMap,
    pub top: EdgeMap,
}

impl EdgeTable {
    /// True when some edge sends a column coordinate to a row or vice versa,
    /// which only makes sense for square planes.
    pub fn transposes(&self) -> bool {
        let horiz = [self.right, self.left];
        let vert = [self.bottom, self.top];
        // horizontal edges: u is a column distance, t a row; the row
        // expression must depend on t only and the column on u only
        horiz.iter().any(|m| m.row.u != 0 || m.col.t != 0)
            || vert.iter().any(|m| m.row.t != 0 || m.col.u != 0)
    }

    /// Maps an integer plane coordinate back into `[0,h) x [0,w)` by
    /// repeatedly crossing edges. `None` if it does not settle.
    pub fn resolve(&self, mut y: i64, mut x: i64, h: i64, w: i64) -> Option<(i64, i64)> {
        for _ in 0..16 {
            if x >= w || x < 0 {
                let (m, u) = if x >= w { (&self.right, x - w) } else { (&self.left, -1 - x) };
                let ny = m.row.eval(u, y, h);
                let nx = m.col.eval(u, y, w);
                y = ny;
                x = nx;
                continue;
            }
            if y >= h || y < 0 {
                let (m, u) = if y >= h { (&self.bottom, y - h) } else { (&self.top, -1 - y) };
                let ny = m.row.eval(u, x, h);
                let nx = m.col.eval(u, x, w);
                y = ny;
                x = nx;
                continue;
            }
            return Some((y, x));
        }
        None
    }
}

/// Orientation of one plane tile. `source(r, c)` is the patch pixel shown at
/// local position `(r, c)` of the tile.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transform {
    Identity,
    /// Left-right mirror.
    FlipH,
    /// Top-bottom flip.
    FlipV,
    Rot180,
    /// Quarter turn counter-clockwise.
    Rot90,
    /// Quarter turn clockwise.
    Rot270,
}

impl Transform {
    /// Affine in `(r, c)`, so it also extends to coordinates outside the tile.
    pub fn source(self, r: i64, c: i64, s: i64) -> (i64, i64) {
        let l = s - 1;
        match self {
            Transform::Identity => (r, c),
            Transform::FlipH => (r, l - c),
            Transform::FlipV => (l - r, c),
            Transform::Rot180 => (l - r, l - c),
            Transform::Rot90 => (c, l - r),
            Transform::Rot270 => (l - c, r),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TilingPattern {
    pub name: PatternName,
    /// Transform of tile `(i, j)` is `tiles[i % 2][j % 2]`.
    pub tiles: [[Transform; 2]; 2],
    /// Horizontal offset of tile row `i`, in half tiles: `row_shift[i % 2]`.
    pub row_shift: [u8; 2],
    pub edges: EdgeTable,
}

impl TilingPattern {
    pub fn get(name: PatternName) -> Self {
        use Transform::*;
        let grid_edges = EdgeTable {
            right: EdgeMap { row: T, col: U },
            left: EdgeMap { row: T, col: LAST_MINUS_U },
            bottom: EdgeMap { row: U, col: T },
            top: EdgeMap { row: LAST_MINUS_U, col: T },
        };
        match name {
            PatternName::Grid => TilingPattern {
                name,
                tiles: [[Identity, Identity], [Identity, Identity]],
                row_shift: [0, 0],
                edges: grid_edges,
            },
            // (S,y) ~ (0,S-y) and (x,0) ~ (S-x,S)
            PatternName::Projective => TilingPattern {
                name,
                tiles: [[Identity, FlipV], [FlipH, Rot180]],
                row_shift: [0, 0],
                edges: EdgeTable {
                    right: EdgeMap { row: LAST_MINUS_T, col: U },
                    left: EdgeMap { row: LAST_MINUS_T, col: LAST_MINUS_U },
                    bottom: EdgeMap { row: U, col: LAST_MINUS_T },
                    top: EdgeMap { row: LAST_MINUS_U, col: LAST_MINUS_T },
                },
            },
            // top edge glued to the right edge, bottom to the left, each
            // with a row/column exchange
            PatternName::Spherical => TilingPattern {
                name,
                tiles: [[Identity, Rot90], [Rot270, Rot180]],
                row_shift: [0, 0],
                edges: EdgeTable {
                    right: EdgeMap { row: U, col: LAST_MINUS_T },
                    left: EdgeMap { row: LAST_MINUS_U, col: LAST_MINUS_T },
                    bottom: EdgeMap { row: LAST_MINUS_T, col: U },
                    top: EdgeMap { row: LAST_MINUS_T, col: LAST_MINUS_U },
                },
            },
            // brick lattice: odd rows shifted by half a tile
            PatternName::Hexagonal => TilingPattern {
                name,
                tiles: [[Identity, Identity], [Identity, Identity]],
                row_shift: [0, 1],
                edges: EdgeTable {
                    bottom: EdgeMap { row: U, col: T_PLUS_HALF },
                    top: EdgeMap { row: LAST_MINUS_U, col: T_PLUS_HALF },
                    ..grid_edges
                },
            },
        }
    }

    pub fn all() -> Vec<TilingPattern> {
        PatternName::ALL.iter().map(|&n| Self::get(n)).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("pattern serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let p: TilingPattern = serde_json::from_str(s)?;
        if p.row_shift.iter().any(|&v| v > 1) {
            return Err(Error::Config("row_shift must be 0 or 1 half tiles".into()));
        }
        let e = &p.edges;
        for m in [e.right, e.left, e.bottom, e.top] {
            if !m.row.uses_u_or_t() && !m.col.uses_u_or_t() {
                return Err(Error::Config("edge map ignores both coordinates".into()));
            }
        }
        Ok(p)
    }

    /// Plane coordinate `(y, x)` (any integers) to patch pixel, by the tile
    /// table.
    pub fn patch_index(&self, y: i64, x: i64, s: usize) -> (usize, usize) {
        let s = s as i64;
        let i = y.div_euclid(s);
        let r = y.rem_euclid(s);
        let shift = self.row_shift[i.rem_euclid(2) as usize] as i64 * (s / 2);
        let xs = x - shift;
        let j = xs.div_euclid(s);
        let c = xs.rem_euclid(s);
        let t = self.tiles[i.rem_euclid(2) as usize][j.rem_euclid(2) as usize];
        let (pr, pc) = t.source(r, c, s);
        (pr as usize, pc as usize)
    }

    /// Top-left plane coordinate and transform of tile `(i, j)`.
    pub fn tile_origin(&self, i: i64, j: i64, s: usize) -> ((i64, i64), Transform) {
        let s = s as i64;
        let shift = self.row_shift[i.rem_euclid(2) as usize] as i64 * (s / 2);
        ((i * s, j * s + shift), self.tiles[i.rem_euclid(2) as usize][j.rem_euclid(2) as usize])
    }

    /// Period of the tiling in plane pixels `(rows, cols)`.
    pub fn period(&self, s: usize) -> (usize, usize) {
        let vertical_twice = self.row_shift[0] != self.row_shift[1]
            || self.tiles[0] != self.tiles[1];
        let horizontal_twice = self.tiles.iter().any(|row| row[0] != row[1]);
        (
            if vertical_twice { 2 * s } else { s },
            if horizontal_twice { 2 * s } else { s },
        )
    }

    /// Checks, for every tile of a `tiles x tiles` block and every pixel
    /// within `depth` of a seam, that the patch pixel derived from the
    /// neighbouring tile's transform equals the one derived by extending
    /// the current tile across its edge through the identification table.
    /// Returns the number of comparisons made.
    pub fn check_consistency(&self, s: usize, tiles: i64, depth: i64) -> Result<usize> {
        let si = s as i64;
        let mut checked = 0;
        for i in -1..tiles {
            for j in -1..tiles {
                let ((oy, ox), t) = self.tile_origin(i, j, s);
                for along in 0..si {
                    for u in 0..depth.min(si) {
                        // local coordinates just outside each edge
                        let outside = [
                            (along, si + u),
                            (along, -1 - u),
                            (si + u, along),
                            (-1 - u, along),
                        ];
                        for (lr, lc) in outside {
                            let via_tiles = self.patch_index(oy + lr, ox + lc, s);
                            let (pr, pc) = t.source(lr, lc, si);
                            let via_edges = self.edges.resolve(pr, pc, si, si).ok_or_else(|| {
                                Error::Invariant(format!("{}: edge resolution diverged", self.name))
                            })?;
                            if (via_tiles.0 as i64, via_tiles.1 as i64) != via_edges {
                                return Err(Error::Invariant(format!(
                                    "{} pattern: tile ({i},{j}) local ({lr},{lc}) maps to {via_tiles:?} \
                                     by the tile table but {via_edges:?} by edge identification",
                                    self.name
                                )));
                            }
                            checked += 1;
                        }
                    }
                }
            }
        }
        Ok(checked)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_pattern_is_seam_consistent_at_s8() {
        for p in TilingPattern::all() {
            let n = p.check_consistency(8, 4, 8).unwrap();
            assert!(n > 0);
        }
    }

    #[test]
    fn broken_table_is_detected() {
        let mut p = TilingPattern::get(PatternName::Projective);
        p.tiles[0][1] = Transform::Identity;
        assert!(p.check_consistency(8, 2, 1).is_err());
    }

    #[test]
    fn grid_is_identity_everywhere() {
        let p = TilingPattern::get(PatternName::Grid);
        assert_eq!(p.patch_index(13, -3, 8), (5, 5));
        assert_eq!(p.period(8), (8, 8));
    }

    #[test]
    fn json_round_trip() {
        for p in TilingPattern::all() {
            assert_eq!(TilingPattern::from_json(&p.to_json()).unwrap(), p);
        }
        assert!("triangle".parse::<PatternName>().is_err());
    }

    #[test]
    fn transforms_are_permutations() {
        use Transform::*;
        for t in [Identity, FlipH, FlipV, Rot180, Rot90, Rot270] {
            let mut seen = std::collections::HashSet::new();
            for r in 0..5 {
                for c in 0..5 {
                    let (a, b) = t.source(r, c, 5);
                    assert!((0..5).contains(&a) && (0..5).contains(&b));
                    seen.insert((a, b));
                }
            }
            assert_eq!(seen.len(), 25);
        }
    }
}
