//! Reflector geometry: tile layout, focal-point tile orientation and the
//! user/segment compatibility prior.

use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Minimum norm of the bisector before a tile orientation is considered undefined.
const BISECTOR_EPS: f64 = 1e-9;
/// Two points closer than this are treated as coincident.
const COINCIDENT_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3::new(0.0, 0.0, 0.0);

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Vec3) -> Vec3 {
        Vec3::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn distance(self, o: Vec3) -> f64 {
        (self - o).norm()
    }

    /// Unit vector in the same direction, or `None` for a (near) zero vector.
    pub fn try_normalize(self) -> Option<Vec3> {
        let n = self.norm();
        if n < COINCIDENT_EPS || !n.is_finite() {
            None
        } else {
            Some(self / n)
        }
    }

    /// Mirror a direction about the plane with unit normal `n`.
    pub fn reflect(self, n: Vec3) -> Vec3 {
        self - n * (2.0 * self.dot(n))
    }

    /// Angle between two non-zero vectors, robust near 0 and pi.
    pub fn angle_to(self, o: Vec3) -> f64 {
        self.cross(o).norm().atan2(self.dot(o))
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn from_slice(s: &[f64]) -> Vec3 {
        Vec3::new(s[0], s[1], s[2])
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl AddAssign for Vec3 {
    fn add_assign(&mut self, o: Vec3) {
        *self = *self + o;
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }
}

impl Div<f64> for Vec3 {
    type Output = Vec3;
    fn div(self, s: f64) -> Vec3 {
        Vec3::new(self.x / s, self.y / s, self.z / s)
    }
}

impl Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

fn unit_from(from: Vec3, to: Vec3, what: &str) -> Result<Vec3> {
    (to - from)
        .try_normalize()
        .ok_or_else(|| Error::DegenerateGeometry(format!("{what} coincides with reference point")))
}

/// Layout of one reflector segment: a centered `rows x cols` grid of square
/// tiles spanned by two orthonormal in-plane axes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentSpec {
    pub origin: Vec3,
    pub axis_u: Vec3,
    pub axis_v: Vec3,
    pub rows: usize,
    pub cols: usize,
    pub pitch: f64,
}

impl SegmentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 {
            return Err(Error::Config("segment grid must have at least one tile".into()));
        }
        if !(self.pitch > 0.0 && self.pitch.is_finite()) {
            return Err(Error::Config(format!("tile pitch must be positive, got {}", self.pitch)));
        }
        let ortho = (self.axis_u.norm() - 1.0).abs() < 1e-12
            && (self.axis_v.norm() - 1.0).abs() < 1e-12
            && self.axis_u.dot(self.axis_v).abs() < 1e-12;
        if !ortho {
            return Err(Error::Config("segment axes must be orthonormal".into()));
        }
        if !self.origin.is_finite() {
            return Err(Error::Config("segment origin must be finite".into()));
        }
        Ok(())
    }

    /// Segment reference point `r_l`.
    pub fn reference(&self) -> Vec3 {
        self.origin
    }

    /// Outward face normal of the mounting plane.
    pub fn face_normal(&self) -> Vec3 {
        self.axis_u.cross(self.axis_v)
    }

    pub fn tile_count(&self) -> usize {
        self.rows * self.cols
    }
}

/// Tile centers in row-major order; the grid centroid is the segment origin.
pub fn tile_centers(spec: &SegmentSpec) -> Vec<Vec3> {
    let ci = (spec.rows as f64 - 1.0) / 2.0;
    let cj = (spec.cols as f64 - 1.0) / 2.0;
    let mut out = Vec::with_capacity(spec.tile_count());
    for i in 0..spec.rows {
        for j in 0..spec.cols {
            out.push(
                spec.origin
                    + spec.axis_u * ((i as f64 - ci) * spec.pitch)
                    + spec.axis_v * ((j as f64 - cj) * spec.pitch),
            );
        }
    }
    out
}

/// Orientation that specularly redirects the ray from `source_pos` through
/// `tile_pos` towards `focal_pos`: the normalized bisector of the two unit
/// directions seen from the tile.
pub fn tile_normal(tile_pos: Vec3, source_pos: Vec3, focal_pos: Vec3) -> Result<Vec3> {
    let to_focal = unit_from(tile_pos, focal_pos, "focal point")?;
    let to_source = unit_from(tile_pos, source_pos, "source")?;
    let half_sum = (to_focal + to_source) * 0.5;
    let n = half_sum.norm();
    if n < BISECTOR_EPS {
        return Err(Error::DegenerateGeometry(
            "source and focal directions are antiparallel".into(),
        ));
    }
    Ok(half_sum / n)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TileOrientation {
    pub normal: Vec3,
    pub elevation: f64,
    pub azimuth: f64,
}

impl TileOrientation {
    pub fn from_normal(normal: Vec3) -> Result<Self> {
        let (elevation, azimuth) = normal_to_angles(normal)?;
        Ok(Self { normal, elevation, azimuth })
    }
}

/// Elevation `asin(n_z)` in [-pi/2, pi/2] and azimuth `atan2(n_y, n_x)` in
/// (-pi, pi]. Azimuth is pinned to 0 at the poles.
pub fn normal_to_angles(n: Vec3) -> Result<(f64, f64)> {
    let norm = n.norm();
    if !((norm - 1.0).abs() <= 1e-9) {
        return Err(Error::NotUnit(norm));
    }
    let elevation = n.z.clamp(-1.0, 1.0).asin();
    if elevation.cos() < 1e-12 {
        return Ok((elevation, 0.0));
    }
    let mut azimuth = n.y.atan2(n.x);
    if azimuth <= -std::f64::consts::PI {
        azimuth = std::f64::consts::PI;
    }
    Ok((elevation, azimuth))
}

pub fn angles_to_normal(elevation: f64, azimuth: f64) -> Vec3 {
    let c = elevation.cos();
    Vec3::new(c * azimuth.cos(), c * azimuth.sin(), elevation.sin())
}

/// Half of the AP-reflector-user angle measured at the segment reference.
/// 0 for retro-reflection, pi/2 when the user lies opposite the AP.
pub fn reflection_half_angle(ap: Vec3, segment_ref: Vec3, user: Vec3) -> Result<f64> {
    let to_ap = unit_from(segment_ref, ap, "access point")?;
    let to_user = unit_from(segment_ref, user, "user")?;
    Ok(0.5 * to_ap.angle_to(to_user))
}

/// Geometric favorability `exp(-d/d0) * cos(theta)` of serving `user` from the
/// segment at `segment_ref`.
pub fn compatibility(user: Vec3, segment_ref: Vec3, ap: Vec3, d0: f64) -> Result<f64> {
    if !(d0 > 0.0) {
        return Err(Error::Config(format!("d0 must be positive, got {d0}")));
    }
    let theta = reflection_half_angle(ap, segment_ref, user)?;
    let d = user.distance(segment_ref);
    Ok(((-d / d0).exp() * theta.cos()).clamp(0.0, 1.0))
}

/// K x L compatibility matrix, `c[k][l]` scoring user `k` on segment `l`.
pub fn compatibility_matrix(
    users: &[Vec3],
    segment_refs: &[Vec3],
    ap: Vec3,
    d0: f64,
) -> Result<Vec<Vec<f64>>> {
    users
        .iter()
        .map(|&u| segment_refs.iter().map(|&r| compatibility(u, r, ap, d0)).collect())
        .collect()
}
