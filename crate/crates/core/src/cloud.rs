//! Point cloud types and canonical normalization.

use std::ops::{Add, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A position in model units.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3 {
    pub const ORIGIN: Point3 = Point3 {
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Point3 { x, y, z }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    #[inline]
    pub fn dot(&self, other: &Point3) -> f64 {
        self.x * other.x + self.y * other.y + self.z * other.z
    }

    #[inline]
    pub fn cross(&self, other: &Point3) -> Point3 {
        Point3::new(
            self.y * other.z - self.z * other.y,
            self.z * other.x - self.x * other.z,
            self.x * other.y - self.y * other.x,
        )
    }

    #[inline]
    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    /// Squared Euclidean distance. Every nearest-neighbor routine in the crate
    /// goes through this expression so results compare bitwise.
    #[inline]
    pub fn distance_squared(&self, other: &Point3) -> f64 {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        let dz = self.z - other.z;
        dx * dx + dy * dy + dz * dz
    }

    #[inline]
    pub fn distance(&self, other: &Point3) -> f64 {
        self.distance_squared(other).sqrt()
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }
}

impl From<[f64; 3]> for Point3 {
    fn from(a: [f64; 3]) -> Self {
        Point3::new(a[0], a[1], a[2])
    }
}

impl Add for Point3 {
    type Output = Point3;
    fn add(self, o: Point3) -> Point3 {
        Point3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl Sub for Point3 {
    type Output = Point3;
    fn sub(self, o: Point3) -> Point3 {
        Point3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Mul<f64> for Point3 {
    type Output = Point3;
    fn mul(self, s: f64) -> Point3 {
        Point3::new(self.x * s, self.y * s, self.z * s)
    }
}

impl Neg for Point3 {
    type Output = Point3;
    fn neg(self) -> Point3 {
        Point3::new(-self.x, -self.y, -self.z)
    }
}

/// A direction with Euclidean norm 1 (within 1e-9).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnitVector3(Point3);

impl UnitVector3 {
    pub const TOLERANCE: f64 = 1e-9;

    /// Normalizes `v`; `None` for zero or non-finite input.
    pub fn normalize(v: Point3) -> Option<Self> {
        let n = v.norm();
        if !n.is_finite() || n == 0.0 {
            return None;
        }
        let u = v * (1.0 / n);
        // One more pass pulls the norm back inside tolerance for badly scaled input.
        let n2 = u.norm();
        Some(UnitVector3(if (n2 - 1.0).abs() > Self::TOLERANCE {
            u * (1.0 / n2)
        } else {
            u
        }))
    }

    /// Accepts components that already have unit norm.
    pub fn try_new(x: f64, y: f64, z: f64) -> Option<Self> {
        let v = Point3::new(x, y, z);
        if v.is_finite() && (v.norm() - 1.0).abs() <= Self::TOLERANCE {
            Some(UnitVector3(v))
        } else {
            None
        }
    }

    /// Normalizes components when they are close to unit length, e.g. after
    /// reading a file with limited precision.
    pub fn from_components(x: f64, y: f64, z: f64) -> Option<Self> {
        Self::normalize(Point3::new(x, y, z))
    }

    #[inline]
    pub fn x(&self) -> f64 {
        self.0.x
    }
    #[inline]
    pub fn y(&self) -> f64 {
        self.0.y
    }
    #[inline]
    pub fn z(&self) -> f64 {
        self.0.z
    }

    #[inline]
    pub fn vector(&self) -> Point3 {
        self.0
    }

    pub fn flipped(&self) -> Self {
        UnitVector3(-self.0)
    }
}

/// Positions with optional per-point normals and binary edge labels.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<Point3>,
    normals: Option<Vec<UnitVector3>>,
    labels: Option<Vec<bool>>,
}

impl PointCloud {
    pub fn new(points: Vec<Point3>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidCloud("a cloud needs at least one point".into()));
        }
        if let Some(i) = points.iter().position(|p| !p.is_finite()) {
            return Err(Error::InvalidCloud(format!("point {i} is not finite")));
        }
        Ok(PointCloud {
            points,
            normals: None,
            labels: None,
        })
    }

    pub fn with_normals(mut self, normals: Vec<UnitVector3>) -> Result<Self> {
        if normals.len() != self.points.len() {
            return Err(Error::InvalidCloud(format!(
                "{} normals for {} points",
                normals.len(),
                self.points.len()
            )));
        }
        self.normals = Some(normals);
        Ok(self)
    }

    pub fn with_labels(mut self, labels: Vec<bool>) -> Result<Self> {
        if labels.len() != self.points.len() {
            return Err(Error::InvalidCloud(format!(
                "{} labels for {} points",
                labels.len(),
                self.points.len()
            )));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn without_normals(mut self) -> Self {
        self.normals = None;
        self
    }

    pub fn without_labels(mut self) -> Self {
        self.labels = None;
        self
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    pub fn normals(&self) -> Option<&[UnitVector3]> {
        self.normals.as_deref()
    }

    pub fn labels(&self) -> Option<&[bool]> {
        self.labels.as_deref()
    }

    pub fn centroid(&self) -> Point3 {
        centroid(&self.points)
    }

    /// Keeps the points at `indices` (in the given order), carrying normals and labels along.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let points = indices.iter().map(|&i| self.points[i]).collect();
        let mut out = PointCloud::new(points)?;
        if let Some(n) = &self.normals {
            out.normals = Some(indices.iter().map(|&i| n[i]).collect());
        }
        if let Some(l) = &self.labels {
            out.labels = Some(indices.iter().map(|&i| l[i]).collect());
        }
        Ok(out)
    }

    /// Replaces positions, keeping normals and labels.
    pub fn with_points(&self, points: Vec<Point3>) -> Result<Self> {
        if points.len() != self.points.len() {
            return Err(Error::InvalidCloud("point count changed".into()));
        }
        let mut out = PointCloud::new(points)?;
        out.normals = self.normals.clone();
        out.labels = self.labels.clone();
        Ok(out)
    }
}

pub fn centroid(points: &[Point3]) -> Point3 {
    let n = points.len().max(1) as f64;
    let s = points
        .iter()
        .fold(Point3::ORIGIN, |acc, p| acc + *p);
    s * (1.0 / n)
}

/// Maps model coordinates to the unit-radius frame: `(p - center) / scale`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizationTransform {
    pub center: Point3,
    pub scale: f64,
}

impl NormalizationTransform {
    pub fn identity() -> Self {
        NormalizationTransform {
            center: Point3::ORIGIN,
            scale: 1.0,
        }
    }

    pub fn apply(&self, p: Point3) -> Point3 {
        (p - self.center) * (1.0 / self.scale)
    }

    pub fn invert(&self, p: Point3) -> Point3 {
        p * self.scale + self.center
    }

    /// Centroid-centering plus max-radius-1 scaling. All-coincident input keeps scale 1.
    pub fn fit(points: &[Point3]) -> Self {
        let center = centroid(points);
        let radius = points
            .iter()
            .map(|p| p.distance(&center))
            .fold(0.0_f64, f64::max);
        NormalizationTransform {
            center,
            scale: if radius > 0.0 { radius } else { 1.0 },
        }
    }
}

/// Centers the cloud on its centroid and scales it to unit max radius.
pub fn normalize_cloud(cloud: &PointCloud) -> (PointCloud, NormalizationTransform) {
    let transform = NormalizationTransform::fit(cloud.points());
    let points = cloud.points().iter().map(|p| transform.apply(*p)).collect();
    let out = PointCloud {
        points,
        normals: cloud.normals.clone(),
        labels: cloud.labels.clone(),
    };
    (out, transform)
}

/// Normalizes a bare point set (used for predicted/ground-truth edge sets).
pub fn normalize_points(points: &[Point3]) -> (Vec<Point3>, NormalizationTransform) {
    let transform = NormalizationTransform::fit(points);
    (points.iter().map(|p| transform.apply(*p)).collect(), transform)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud(pts: &[[f64; 3]]) -> PointCloud {
        PointCloud::new(pts.iter().map(|&a| a.into()).collect()).unwrap()
    }

    #[test]
    fn normalize_two_points() {
        let (c, t) = normalize_cloud(&cloud(&[[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]]));
        assert_eq!(c.points(), &[Point3::new(-1.0, 0.0, 0.0), Point3::new(1.0, 0.0, 0.0)]);
        assert_eq!(t.center, Point3::new(1.0, 0.0, 0.0));
        assert_eq!(t.scale, 1.0);
    }

    #[test]
    fn normalize_single_point_uses_unit_scale() {
        let (c, t) = normalize_cloud(&cloud(&[[5.0, 5.0, 5.0]]));
        assert_eq!(c.points(), &[Point3::ORIGIN]);
        assert_eq!(t.scale, 1.0);
    }

    #[test]
    fn normalize_symmetric_triple() {
        let (c, _) = normalize_cloud(&cloud(&[[0.0, 0.0, 0.0], [0.0, 3.0, 0.0], [0.0, -3.0, 0.0]]));
        let expect = [[0.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, -1.0, 0.0]];
        for (p, e) in c.points().iter().zip(expect) {
            assert!(p.distance(&e.into()) < 1e-12);
        }
    }

    #[test]
    fn transform_inverts() {
        let c = cloud(&[[1.0, 2.0, 3.0], [-4.0, 0.5, 9.0], [0.0, 0.0, 1.0]]);
        let (n, t) = normalize_cloud(&c);
        for (a, b) in c.points().iter().zip(n.points()) {
            assert!(a.distance(&t.invert(*b)) < 1e-12);
        }
    }

    #[test]
    fn rejects_mismatched_attributes() {
        let c = cloud(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
        assert!(c.clone().with_labels(vec![true]).is_err());
        let n = UnitVector3::try_new(0.0, 0.0, 1.0).unwrap();
        assert!(c.with_normals(vec![n; 3]).is_err());
        assert!(PointCloud::new(vec![]).is_err());
        assert!(PointCloud::new(vec![Point3::new(f64::NAN, 0.0, 0.0)]).is_err());
    }

    #[test]
    fn unit_vector_construction() {
        assert!(UnitVector3::try_new(1.0, 1.0, 0.0).is_none());
        let u = UnitVector3::normalize(Point3::new(3.0, 4.0, 0.0)).unwrap();
        assert!((u.vector().norm() - 1.0).abs() < 1e-12);
        assert!(UnitVector3::normalize(Point3::ORIGIN).is_none());
    }
}
