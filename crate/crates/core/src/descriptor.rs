//! Local-patch projection-distance descriptors.
//!
//! For a point `p_i` with neighbors `p_j`, `d1[i][j]` is how far `p_i` lies from the
//! tangent plane of `p_j`, and `d2[i][j]` how far `p_j` lies from the tangent plane of
//! `p_i`. Values below [`PROJECTION_THRESHOLD`] are snapped to zero.

use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::cloud::{normalize_cloud, Point3, PointCloud, UnitVector3};
use crate::error::{Error, Result};
use crate::spatial::KdTree;

pub const PROJECTION_THRESHOLD: f64 = 1e-6;
pub const DEFAULT_K: usize = 20;

const MAGIC: &[u8; 4] = b"EFD1";
const VERSION: u32 = 1;

/// `|p.n - q.n|`, or exactly 0 when that is below the threshold.
#[inline]
pub fn projection_distance(p: &Point3, q: &Point3, n: &UnitVector3) -> f64 {
    let pn = p.x * n.x() + p.y * n.y() + p.z * n.z();
    let qn = q.x * n.x() + q.y * n.y() + q.z * n.z();
    let d = (pn - qn).abs();
    if d >= PROJECTION_THRESHOLD {
        d
    } else {
        0.0
    }
}

/// Two `n x k` row-major descriptor matrices plus the neighbor indices they were built from.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchDescriptors {
    pub n: usize,
    pub k: usize,
    pub d1: Vec<f64>,
    pub d2: Vec<f64>,
    pub neighbor_indices: Vec<usize>,
}

impl PatchDescriptors {
    pub fn d1_row(&self, i: usize) -> &[f64] {
        &self.d1[i * self.k..(i + 1) * self.k]
    }

    pub fn d2_row(&self, i: usize) -> &[f64] {
        &self.d2[i * self.k..(i + 1) * self.k]
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbor_indices[i * self.k..(i + 1) * self.k]
    }

    pub fn d1_f32(&self) -> Vec<f32> {
        self.d1.iter().map(|&v| v as f32).collect()
    }

    pub fn d2_f32(&self) -> Vec<f32> {
        self.d2.iter().map(|&v| v as f32).collect()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// `EFD1`, version, N, K, then D1, D2 as f32 and neighbor indices as u32, all little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.n * self.k * 12);
        out.extend_from_slice(MAGIC);
        for v in [VERSION, self.n as u32, self.k as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in self.d1.iter().chain(&self.d2) {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        for &i in &self.neighbor_indices {
            out.extend_from_slice(&(i as u32).to_le_bytes());
        }
        out
    }

    /// Decodes the binary layout; matrix entries come back at f32 precision.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(Error::Format("missing EFD1 magic".into()));
        }
        let word = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
        let version = word(4);
        if version != VERSION {
            return Err(Error::Format(format!("unsupported descriptor version {version}")));
        }
        let n = word(8) as usize;
        let k = word(12) as usize;
        let cells = n * k;
        if bytes.len() != 16 + cells * 12 {
            return Err(Error::Format(format!(
                "expected {} bytes for N={n}, K={k}, found {}",
                16 + cells * 12,
                bytes.len()
            )));
        }
        let float_at = |o: usize| f32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as f64;
        let d1 = (0..cells).map(|c| float_at(16 + 4 * c)).collect();
        let d2 = (0..cells).map(|c| float_at(16 + 4 * (cells + c))).collect();
        let neighbor_indices = (0..cells)
            .map(|c| word(16 + 4 * (2 * cells + c)) as usize)
            .collect();
        Ok(PatchDescriptors {
            n,
            k,
            d1,
            d2,
            neighbor_indices,
        })
    }
}

/// Descriptor rows for every point, using its `k` nearest neighbors (self excluded)
/// in ascending-distance order.
pub fn compute_descriptors(cloud: &PointCloud, k: usize) -> Result<PatchDescriptors> {
    let normals = cloud.normals().ok_or(Error::NormalsRequired)?;
    let n = cloud.len();
    if k == 0 || n < k + 1 {
        return Err(Error::InsufficientNeighbors { k, n });
    }
    let pts = cloud.points();
    let tree = KdTree::build(pts);
    let mut d1 = vec![0.0; n * k];
    let mut d2 = vec![0.0; n * k];
    let mut neighbor_indices = vec![0usize; n * k];
    d1.par_chunks_mut(k)
        .zip(d2.par_chunks_mut(k))
        .zip(neighbor_indices.par_chunks_mut(k))
        .enumerate()
        .try_for_each(|(i, ((r1, r2), ri))| -> Result<()> {
            let nl = tree.knn(i, k)?;
            for (j, &nb) in nl.indices.iter().enumerate() {
                r1[j] = projection_distance(&pts[i], &pts[nb], &normals[nb]);
                r2[j] = projection_distance(&pts[nb], &pts[i], &normals[i]);
                ri[j] = nb;
            }
            Ok(())
        })?;
    Ok(PatchDescriptors {
        n,
        k,
        d1,
        d2,
        neighbor_indices,
    })
}

/// Normalizes the cloud to unit radius, then computes descriptors. This is the
/// form every training and inference path feeds to the network.
pub fn normalized_descriptors(cloud: &PointCloud, k: usize) -> Result<PatchDescriptors> {
    let (normalized, _) = normalize_cloud(cloud);
    compute_descriptors(&normalized, k)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(x: f64, y: f64, z: f64) -> UnitVector3 {
        UnitVector3::try_new(x, y, z).unwrap()
    }

    #[test]
    fn projection_distance_cases() {
        let o = Point3::ORIGIN;
        let up = Point3::new(0.0, 0.0, 1.0);
        assert_eq!(projection_distance(&up, &o, &unit(0.0, 0.0, 1.0)), 1.0);
        assert_eq!(projection_distance(&up, &o, &unit(1.0, 0.0, 0.0)), 0.0);
        let tiny = Point3::new(0.0, 0.0, 5e-7);
        assert_eq!(projection_distance(&tiny, &o, &unit(0.0, 0.0, 1.0)), 0.0);
        let edge = Point3::new(0.0, 0.0, 1e-6);
        assert_eq!(projection_distance(&edge, &o, &unit(0.0, 0.0, 1.0)), 1e-6);
    }

    #[test]
    fn two_point_patch() {
        // p_i = (0,0,1) with n_i = x, its single neighbor p_j = origin with n_j = z.
        let cloud = PointCloud::new(vec![Point3::new(0.0, 0.0, 1.0), Point3::ORIGIN])
            .unwrap()
            .with_normals(vec![unit(1.0, 0.0, 0.0), unit(0.0, 0.0, 1.0)])
            .unwrap();
        let d = compute_descriptors(&cloud, 1).unwrap();
        assert_eq!(d.d1_row(0), &[1.0]);
        assert_eq!(d.d2_row(0), &[0.0]);
    }

    #[test]
    fn planar_grid_is_all_zero() {
        let pts: Vec<Point3> = (0..100)
            .map(|i| Point3::new((i % 10) as f64 * 0.1, (i / 10) as f64 * 0.1, 0.3))
            .collect();
        let cloud = PointCloud::new(pts)
            .unwrap()
            .with_normals(vec![unit(0.0, 0.0, 1.0); 100])
            .unwrap();
        let d = compute_descriptors(&cloud, 20).unwrap();
        assert!(d.d1.iter().chain(&d.d2).all(|&v| v == 0.0));
    }

    #[test]
    fn needs_normals_and_enough_points() {
        let c = PointCloud::new(vec![Point3::ORIGIN, Point3::new(1.0, 0.0, 0.0)]).unwrap();
        assert!(matches!(compute_descriptors(&c, 1), Err(Error::NormalsRequired)));
        let c = c.with_normals(vec![unit(0.0, 0.0, 1.0); 2]).unwrap();
        assert!(matches!(
            compute_descriptors(&c, 2),
            Err(Error::InsufficientNeighbors { .. })
        ));
    }

    #[test]
    fn binary_layout() {
        let d = PatchDescriptors {
            n: 2,
            k: 1,
            d1: vec![0.5, 0.0],
            d2: vec![0.25, 1.0],
            neighbor_indices: vec![1, 0],
        };
        let b = d.to_bytes();
        assert_eq!(&b[..4], b"EFD1");
        assert_eq!(b.len(), 16 + 2 * 12);
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 2);
        assert_eq!(f32::from_le_bytes(b[16..20].try_into().unwrap()), 0.5);
        assert_eq!(PatchDescriptors::from_bytes(&b).unwrap(), d);
        assert!(PatchDescriptors::from_bytes(&b[..20]).is_err());
    }
}
