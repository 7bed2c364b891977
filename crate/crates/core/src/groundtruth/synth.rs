//! Surface-sampled analytic shapes with exact normals and crease-band labels.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cloud::{Point3, PointCloud, UnitVector3};
use crate::error::{Error, Result};

/// Label band half-width is `BAND_FACTOR / sqrt(density)`.
pub const BAND_FACTOR: f64 = 1.5;

const MIN_POINTS: usize = 200;
const RADIUS: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ShapeKind {
    /// Unit cube centered at the origin; all 12 edges are creases.
    Cube,
    /// Radius 0.5, height 1, capped; the two rims are creases.
    Cylinder,
    /// Two unit squares meeting along a crease at the given dihedral angle.
    Wedge { angle_deg: f64 },
    /// A slab with a smaller box standing on top; all 24 box edges are creases.
    FusedBoxes,
}

impl ShapeKind {
    pub fn area(&self) -> f64 {
        match self {
            ShapeKind::Cube => 6.0,
            ShapeKind::Cylinder => 2.0 * PI * RADIUS + 2.0 * PI * RADIUS * RADIUS,
            ShapeKind::Wedge { .. } => 2.0,
            ShapeKind::FusedBoxes => fused_faces().iter().map(|f| f.area()).sum(),
        }
    }

    pub fn wedge(angle_deg: f64) -> Self {
        ShapeKind::Wedge { angle_deg }
    }
}

impl fmt::Display for ShapeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ShapeKind::Cube => f.write_str("cube"),
            ShapeKind::Cylinder => f.write_str("cylinder"),
            ShapeKind::Wedge { angle_deg } => write!(f, "wedge:{angle_deg}"),
            ShapeKind::FusedBoxes => f.write_str("fused_boxes"),
        }
    }
}

impl FromStr for ShapeKind {
    type Err = Error;

    /// `cube`, `cylinder`, `fused_boxes`, `wedge` (90 degrees) or `wedge:<degrees>`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("unknown shape '{s}'"));
        match s {
            "cube" => Ok(ShapeKind::Cube),
            "cylinder" => Ok(ShapeKind::Cylinder),
            "fused_boxes" => Ok(ShapeKind::FusedBoxes),
            "wedge" => Ok(ShapeKind::wedge(90.0)),
            _ => {
                let angle: f64 = s
                    .strip_prefix("wedge:")
                    .ok_or_else(bad)?
                    .parse()
                    .map_err(|_| bad())?;
                if !(angle > 0.0 && angle < 180.0) {
                    return Err(Error::InvalidArgument(format!(
                        "wedge angle {angle} must lie strictly between 0 and 180"
                    )));
                }
                Ok(ShapeKind::wedge(angle))
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthShape {
    pub kind: ShapeKind,
    /// Points with normals and labels.
    pub cloud: PointCloud,
    pub density: f64,
    pub band: f64,
}

impl SynthShape {
    pub fn labels(&self) -> &[bool] {
        self.cloud.labels().expect("synthetic shapes are labeled")
    }

    pub fn edge_count(&self) -> usize {
        self.labels().iter().filter(|&&l| l).count()
    }
}

/// Parallelogram face `origin + a*u + b*v`, `a, b` in `[0, 1]`.
#[derive(Debug, Clone, Copy)]
struct Rect {
    origin: Point3,
    u: Point3,
    v: Point3,
    normal: Point3,
}

impl Rect {
    fn area(&self) -> f64 {
        self.u.cross(&self.v).norm()
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> Point3 {
        let a: f64 = rng.random();
        let b: f64 = rng.random();
        self.origin + self.u * a + self.v * b
    }
}

fn p(x: f64, y: f64, z: f64) -> Point3 {
    Point3::new(x, y, z)
}

fn box_faces(lo: Point3, hi: Point3) -> [Rect; 6] {
    let d = hi - lo;
    let (ex, ey, ez) = (p(d.x, 0.0, 0.0), p(0.0, d.y, 0.0), p(0.0, 0.0, d.z));
    [
        Rect { origin: lo, u: ex, v: ey, normal: p(0.0, 0.0, -1.0) },
        Rect { origin: p(lo.x, lo.y, hi.z), u: ex, v: ey, normal: p(0.0, 0.0, 1.0) },
        Rect { origin: lo, u: ex, v: ez, normal: p(0.0, -1.0, 0.0) },
        Rect { origin: p(lo.x, hi.y, lo.z), u: ex, v: ez, normal: p(0.0, 1.0, 0.0) },
        Rect { origin: lo, u: ey, v: ez, normal: p(-1.0, 0.0, 0.0) },
        Rect { origin: p(hi.x, lo.y, lo.z), u: ey, v: ez, normal: p(1.0, 0.0, 0.0) },
    ]
}

fn box_edges(lo: Point3, hi: Point3) -> Vec<(Point3, Point3)> {
    let corner = |i: usize| {
        p(
            if i & 1 == 0 { lo.x } else { hi.x },
            if i & 2 == 0 { lo.y } else { hi.y },
            if i & 4 == 0 { lo.z } else { hi.z },
        )
    };
    let mut edges = Vec::with_capacity(12);
    for a in 0..8 {
        for bit in [1, 2, 4] {
            if a & bit == 0 {
                edges.push((corner(a), corner(a | bit)));
            }
        }
    }
    edges
}

const FUSED_A: ([f64; 3], [f64; 3]) = ([-0.5, -0.5, -0.5], [0.5, 0.5, 0.1]);
const FUSED_B: ([f64; 3], [f64; 3]) = ([-0.25, -0.25, 0.1], [0.25, 0.25, 0.4]);

fn corners(b: ([f64; 3], [f64; 3])) -> (Point3, Point3) {
    (Point3::from(b.0), Point3::from(b.1))
}

/// Faces of the fused solid, with the slab's top face marked by index 1 (its
/// area excludes the footprint of the upper box) and the upper box's bottom removed.
fn fused_faces() -> Vec<FusedFace> {
    let (alo, ahi) = corners(FUSED_A);
    let (blo, bhi) = corners(FUSED_B);
    let footprint = (bhi.x - blo.x) * (bhi.y - blo.y);
    let mut out = Vec::new();
    for (i, f) in box_faces(alo, ahi).into_iter().enumerate() {
        out.push(FusedFace { rect: f, hole: if i == 1 { footprint } else { 0.0 } });
    }
    for (i, f) in box_faces(blo, bhi).into_iter().enumerate() {
        if i != 0 {
            out.push(FusedFace { rect: f, hole: 0.0 });
        }
    }
    out
}

struct FusedFace {
    rect: Rect,
    hole: f64,
}

impl FusedFace {
    fn area(&self) -> f64 {
        self.rect.area() - self.hole
    }
}

fn in_footprint(q: &Point3) -> bool {
    let (blo, bhi) = corners(FUSED_B);
    q.x > blo.x && q.x < bhi.x && q.y > blo.y && q.y < bhi.y
}

fn segment_distance(q: &Point3, a: &Point3, b: &Point3) -> f64 {
    let ab = *b - *a;
    let t = ((*q - *a).dot(&ab) / ab.dot(&ab)).clamp(0.0, 1.0);
    q.distance(&(*a + ab * t))
}

fn count(density: f64, area: f64) -> usize {
    (density * area).round() as usize
}

/// Samples `kind` at `density` points per unit area with labels inside the crease band.
pub fn synth_shape(kind: ShapeKind, density: f64, seed: u64) -> Result<SynthShape> {
    if !(density > 0.0 && density.is_finite()) {
        return Err(Error::InvalidArgument(format!("density {density} must be positive")));
    }
    let expected = count(density, kind.area());
    if expected < MIN_POINTS {
        return Err(Error::InvalidArgument(format!(
            "density {density} yields about {expected} points; at least {MIN_POINTS} are needed"
        )));
    }
    let band = BAND_FACTOR / density.sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::with_capacity(expected);
    let mut normals = Vec::with_capacity(expected);
    let mut crease_distance: Vec<f64> = Vec::with_capacity(expected);
    let mut push = |q: Point3, n: Point3, d: f64| {
        points.push(q);
        normals.push(UnitVector3::normalize(n).expect("analytic normals are nonzero"));
        crease_distance.push(d);
    };
    match kind {
        ShapeKind::Cube => {
            let (lo, hi) = (p(-0.5, -0.5, -0.5), p(0.5, 0.5, 0.5));
            let edges = box_edges(lo, hi);
            for f in box_faces(lo, hi) {
                for _ in 0..count(density, f.area()) {
                    let q = f.sample(&mut rng);
                    let d = edges
                        .iter()
                        .map(|(a, b)| segment_distance(&q, a, b))
                        .fold(f64::INFINITY, f64::min);
                    push(q, f.normal, d);
                }
            }
        }
        ShapeKind::Cylinder => {
            let h = 0.5;
            let rim = |q: &Point3| {
                let rho = (q.x * q.x + q.y * q.y).sqrt() - RADIUS;
                (rho * rho + (q.z - h) * (q.z - h))
                    .sqrt()
                    .min((rho * rho + (q.z + h) * (q.z + h)).sqrt())
            };
            for _ in 0..count(density, 2.0 * PI * RADIUS * 2.0 * h) {
                let th = rng.random_range(0.0..2.0 * PI);
                let z = rng.random_range(-h..h);
                let q = p(RADIUS * th.cos(), RADIUS * th.sin(), z);
                push(q, p(th.cos(), th.sin(), 0.0), rim(&q));
            }
            for (z, nz) in [(-h, -1.0), (h, 1.0)] {
                for _ in 0..count(density, PI * RADIUS * RADIUS) {
                    let r = RADIUS * rng.random::<f64>().sqrt();
                    let th = rng.random_range(0.0..2.0 * PI);
                    let q = p(r * th.cos(), r * th.sin(), z);
                    push(q, p(0.0, 0.0, nz), rim(&q));
                }
            }
        }
        ShapeKind::Wedge { angle_deg } => {
            if !(angle_deg > 0.0 && angle_deg < 180.0) {
                return Err(Error::InvalidArgument(format!(
                    "wedge angle {angle_deg} must lie strictly between 0 and 180"
                )));
            }
            let a = angle_deg.to_radians();
            let (o, ex) = (p(-0.5, 0.0, 0.0), p(1.0, 0.0, 0.0));
            let faces = [
                Rect { origin: o, u: ex, v: p(0.0, 1.0, 0.0), normal: p(0.0, 0.0, -1.0) },
                Rect {
                    origin: o,
                    u: ex,
                    v: p(0.0, a.cos(), a.sin()),
                    normal: p(0.0, -a.sin(), a.cos()),
                },
            ];
            let (c0, c1) = (o, o + ex);
            for f in faces {
                for _ in 0..count(density, f.area()) {
                    let q = f.sample(&mut rng);
                    push(q, f.normal, segment_distance(&q, &c0, &c1));
                }
            }
        }
        ShapeKind::FusedBoxes => {
            let (alo, ahi) = corners(FUSED_A);
            let (blo, bhi) = corners(FUSED_B);
            let mut edges = box_edges(alo, ahi);
            edges.extend(box_edges(blo, bhi));
            for (i, f) in fused_faces().into_iter().enumerate() {
                for _ in 0..count(density, f.area()) {
                    let q = loop {
                        let q = f.rect.sample(&mut rng);
                        if i != 1 || !in_footprint(&q) {
                            break q;
                        }
                    };
                    let d = edges
                        .iter()
                        .map(|(a, b)| segment_distance(&q, a, b))
                        .fold(f64::INFINITY, f64::min);
                    push(q, f.rect.normal, d);
                }
            }
        }
    }
    let labels = crease_distance.iter().map(|&d| d <= band).collect();
    let cloud = PointCloud::new(points)?.with_normals(normals)?.with_labels(labels)?;
    Ok(SynthShape {
        kind,
        cloud,
        density,
        band,
    })
}

/// Same as [`synth_shape`] with the density chosen so about `n` points are drawn.
pub fn synth_shape_with_points(kind: ShapeKind, n: usize, seed: u64) -> Result<SynthShape> {
    synth_shape(kind, n as f64 / kind.area(), seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cube_labels_near_edges() {
        let s = synth_shape_with_points(ShapeKind::Cube, 3000, 1).unwrap();
        assert!((s.cloud.len() as i64 - 3000).abs() <= 6);
        for (q, &l) in s.cloud.points().iter().zip(s.labels()) {
            let near = [q.x, q.y, q.z]
                .iter()
                .filter(|c| 0.5 - c.abs() <= s.band + 1e-12)
                .count();
            // On a face one coordinate is at +-0.5; an edge needs a second near the boundary.
            assert_eq!(l, near >= 2, "{q:?}");
        }
    }

    #[test]
    fn cylinder_side_wall_unlabeled_away_from_rims() {
        let s = synth_shape_with_points(ShapeKind::Cylinder, 3000, 2).unwrap();
        for (q, &l) in s.cloud.points().iter().zip(s.labels()) {
            if (q.z.abs() - 0.5).abs() > s.band && q.z.abs() < 0.5 - 1e-12 {
                assert!(!l);
            }
        }
        assert!(s.edge_count() > 0);
    }

    #[test]
    fn fused_area_and_footprint() {
        assert!((ShapeKind::FusedBoxes.area() - 5.0).abs() < 1e-12);
        let s = synth_shape_with_points(ShapeKind::FusedBoxes, 2500, 3).unwrap();
        for q in s.cloud.points() {
            assert!(!(q.z == 0.1 && in_footprint(q) && (q.x.abs() > 0.25 || q.y.abs() > 0.25)));
        }
    }

    #[test]
    fn deterministic_and_parses() {
        let a = synth_shape(ShapeKind::wedge(60.0), 500.0, 4).unwrap();
        let b = synth_shape(ShapeKind::wedge(60.0), 500.0, 4).unwrap();
        assert_eq!(a.cloud, b.cloud);
        assert_eq!("wedge:60".parse::<ShapeKind>().unwrap(), ShapeKind::wedge(60.0));
        assert!("wedge:180".parse::<ShapeKind>().is_err());
        assert!(synth_shape(ShapeKind::Cube, 10.0, 0).is_err());
    }
}
