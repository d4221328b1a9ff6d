//! Trilateration from three access-point distances.
//!
//! Subtracting the circle equations pairwise (1−2 and 2−3) leaves two linear
//! equations
//!
//! ```text
//! a·x + b·y = e
//! c·x + d·y = f
//! ```
//!
//! which are solved through the normal equations `AᵀA·p = Aᵀb` in closed form.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::protocol::ApCode;

/// Relative floor under which the Gram determinant counts as zero.
pub const DEFAULT_GEOMETRY_EPSILON: f64 = 1e-9;

/// A point in the floor plane, meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point2D {
    pub x: f64,
    pub y: f64,
}

impl Point2D {
    pub const fn new(x: f64, y: f64) -> Self {
        Point2D { x, y }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    pub fn distance_to(&self, other: &Point2D) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("coordinates must be finite")]
    NonFinite,
    #[error("access points {0} and {1} share a position")]
    CoincidentAps(usize, usize),
    #[error("access point code {0} used twice")]
    DuplicateCode(ApCode),
    #[error("distance s{index} must be finite and >= 0, got {value}")]
    InvalidDistance { index: usize, value: f64 },
    #[error(
        "access points are (nearly) collinear: Gram determinant {denom:e} below floor {floor:e}"
    )]
    DegenerateGeometry { denom: f64, floor: f64 },
}

/// Positions and codes of the three access points, in AP1, AP2, AP3 order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<ApPlacement>", into = "Vec<ApPlacement>")]
pub struct ApLayout {
    positions: [Point2D; 3],
    codes: [ApCode; 3],
}

/// One access point entry as stored in files and API payloads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApPlacement {
    pub code: ApCode,
    pub x: f64,
    pub y: f64,
}

impl ApLayout {
    pub fn new(aps: [(ApCode, Point2D); 3]) -> Result<Self, GeometryError> {
        let [(c1, p1), (c2, p2), (c3, p3)] = aps;
        let positions = [p1, p2, p3];
        if positions.iter().any(|p| !p.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        for (i, j) in [(0, 1), (0, 2), (1, 2)] {
            if positions[i] == positions[j] {
                return Err(GeometryError::CoincidentAps(i + 1, j + 1));
            }
        }
        if c1 == c2 || c1 == c3 {
            return Err(GeometryError::DuplicateCode(c1));
        }
        if c2 == c3 {
            return Err(GeometryError::DuplicateCode(c2));
        }
        Ok(ApLayout {
            positions,
            codes: [c1, c2, c3],
        })
    }

    pub fn positions(&self) -> &[Point2D; 3] {
        &self.positions
    }

    pub fn codes(&self) -> &[ApCode; 3] {
        &self.codes
    }

    pub fn position_of(&self, code: &ApCode) -> Option<Point2D> {
        self.codes
            .iter()
            .position(|c| c == code)
            .map(|i| self.positions[i])
    }

    /// Largest absolute coordinate among the three APs.
    pub fn scale(&self) -> f64 {
        self.positions
            .iter()
            .flat_map(|p| [p.x.abs(), p.y.abs()])
            .fold(0.0, f64::max)
    }

    /// Exact distances from each AP to `p`.
    pub fn distances_to(&self, p: &Point2D) -> DistanceTriple {
        let [a, b, c] = self.positions;
        DistanceTriple {
            s: [a.distance_to(p), b.distance_to(p), c.distance_to(p)],
        }
    }

    pub fn placements(&self) -> Vec<ApPlacement> {
        self.codes
            .iter()
            .zip(self.positions.iter())
            .map(|(code, p)| ApPlacement {
                code: code.clone(),
                x: p.x,
                y: p.y,
            })
            .collect()
    }
}

impl TryFrom<Vec<ApPlacement>> for ApLayout {
    type Error = String;
    fn try_from(entries: Vec<ApPlacement>) -> Result<Self, Self::Error> {
        let entries: [ApPlacement; 3] = entries
            .try_into()
            .map_err(|v: Vec<_>| format!("expected 3 access points, got {}", v.len()))?;
        ApLayout::new(entries.map(|e| (e.code, Point2D::new(e.x, e.y)))).map_err(|e| e.to_string())
    }
}

impl From<ApLayout> for Vec<ApPlacement> {
    fn from(layout: ApLayout) -> Self {
        layout.placements()
    }
}

/// Distances from AP1, AP2 and AP3 to the device, meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistanceTriple {
    s: [f64; 3],
}

impl DistanceTriple {
    pub fn new(s1: f64, s2: f64, s3: f64) -> Result<Self, GeometryError> {
        let s = [s1, s2, s3];
        for (i, &v) in s.iter().enumerate() {
            if !(v.is_finite() && v >= 0.0) {
                return Err(GeometryError::InvalidDistance {
                    index: i + 1,
                    value: v,
                });
            }
        }
        Ok(DistanceTriple { s })
    }

    pub fn as_array(&self) -> [f64; 3] {
        self.s
    }
}

/// Coefficients of the two linear equations left after subtracting circles.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearSystem2 {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
    pub e: f64,
    pub f: f64,
    /// Largest coordinate magnitude of the layout the system came from. Sets
    /// the degeneracy floor.
    pub scale: f64,
}

impl LinearSystem2 {
    /// System from raw coefficients; the scale is recovered from the AP
    /// coordinate differences in `a..d`.
    pub fn from_coefficients(a: f64, b: f64, c: f64, d: f64, e: f64, f: f64) -> Self {
        let scale = [a, b, c, d]
            .iter()
            .map(|v| v.abs() / 2.0)
            .fold(0.0, f64::max);
        LinearSystem2 {
            a,
            b,
            c,
            d,
            e,
            f,
            scale,
        }
    }

    /// Gram determinant of A, `(a²+c²)(b²+d²) − (ab+cd)²`.
    pub fn denom(&self) -> f64 {
        let (a, b, c, d) = (self.a, self.b, self.c, self.d);
        (a * a + c * c) * (b * b + d * d) - (a * b + c * d).powi(2)
    }

    pub fn degeneracy_floor(&self) -> f64 {
        degeneracy_floor(self.scale)
    }
}

fn degeneracy_floor(scale: f64) -> f64 {
    DEFAULT_GEOMETRY_EPSILON * scale.max(1.0).powi(4)
}

pub fn build_linear_system(layout: &ApLayout, dists: &DistanceTriple) -> LinearSystem2 {
    let [p1, p2, p3] = layout.positions;
    let [s1, s2, s3] = dists.s;
    let sq = |v: f64| v * v;
    LinearSystem2 {
        a: 2.0 * (p2.x - p1.x),
        b: 2.0 * (p2.y - p1.y),
        c: 2.0 * (p3.x - p2.x),
        d: 2.0 * (p3.y - p2.y),
        e: sq(s1) - sq(s2) - sq(p1.x) + sq(p2.x) - sq(p1.y) + sq(p2.y),
        f: sq(s2) - sq(s3) - sq(p2.x) + sq(p3.x) - sq(p2.y) + sq(p3.y),
        scale: layout.scale(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GeometryVerdict {
    Ok,
    Degenerate { denom: f64, floor: f64 },
}

impl GeometryVerdict {
    pub fn is_ok(&self) -> bool {
        matches!(self, GeometryVerdict::Ok)
    }
}

/// Collinearity test on the layout alone. Distances do not enter `a..d`.
pub fn check_geometry(layout: &ApLayout) -> GeometryVerdict {
    let probe = build_linear_system(layout, &DistanceTriple { s: [0.0; 3] });
    let (denom, floor) = (probe.denom(), probe.degeneracy_floor());
    if denom < floor {
        GeometryVerdict::Degenerate { denom, floor }
    } else {
        GeometryVerdict::Ok
    }
}

/// Normal-equation closed form of `(AᵀA)⁻¹Aᵀ(e, f)`.
pub fn solve_position(sys: &LinearSystem2) -> Result<Point2D, GeometryError> {
    let LinearSystem2 {
        a, b, c, d, e, f, ..
    } = *sys;
    let denom = sys.denom();
    let floor = sys.degeneracy_floor();
    if !(denom >= floor) {
        return Err(GeometryError::DegenerateGeometry { denom, floor });
    }
    let col_x = a * a + c * c;
    let col_y = b * b + d * d;
    let cross = a * b + c * d;
    let at_b_x = a * e + c * f;
    let at_b_y = b * e + d * f;
    Ok(Point2D {
        x: (col_y * at_b_x - cross * at_b_y) / denom,
        y: (col_x * at_b_y - cross * at_b_x) / denom,
    })
}

pub fn trilaterate(layout: &ApLayout, dists: &DistanceTriple) -> Result<Point2D, GeometryError> {
    solve_position(&build_linear_system(layout, dists))
}
