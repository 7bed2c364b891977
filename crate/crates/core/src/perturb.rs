//! Noise injection and downsampling for robustness experiments.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::cloud::{Point3, PointCloud};
use crate::error::{Error, Result};
use crate::spatial::KdTree;

pub const DENSITY_NEIGHBORS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DensityEstimate {
    pub s_density: f64,
    pub sampled: usize,
    pub k: usize,
}

/// Mean over `floor(N/10)` random points of the mean distance to their 10
/// nearest neighbors.
pub fn sampling_density(cloud: &PointCloud, seed: u64) -> Result<DensityEstimate> {
    let n = cloud.len();
    if n <= DENSITY_NEIGHBORS {
        return Err(Error::InsufficientNeighbors {
            n,
            k: DENSITY_NEIGHBORS,
        });
    }
    let m = n / 10;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = index::sample(&mut rng, n, m);
    let tree = KdTree::build(cloud.points());
    let mut total = 0.0;
    for i in picks.iter() {
        let nb = tree.knn(i, DENSITY_NEIGHBORS)?;
        total += nb.distances.iter().sum::<f64>() / DENSITY_NEIGHBORS as f64;
    }
    Ok(DensityEstimate {
        s_density: total / m as f64,
        sampled: m,
        k: DENSITY_NEIGHBORS,
    })
}

/// Adds independent zero-mean Gaussian noise with standard deviation
/// `scale * s_density` to every coordinate. Normals and labels are kept.
pub fn add_gaussian_noise(
    cloud: &PointCloud,
    scale: f64,
    s_density: f64,
    seed: u64,
) -> Result<PointCloud> {
    if !scale.is_finite() || scale < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "noise scale must be a nonnegative finite number, got {scale}"
        )));
    }
    if scale == 0.0 {
        return Ok(cloud.clone());
    }
    let std = scale * s_density;
    let normal = Normal::new(0.0, std)
        .map_err(|e| Error::InvalidArgument(format!("noise std {std}: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points = cloud
        .points()
        .iter()
        .map(|p| {
            Point3::new(
                p.x + normal.sample(&mut rng),
                p.y + normal.sample(&mut rng),
                p.z + normal.sample(&mut rng),
            )
        })
        .collect();
    cloud.with_points(points)
}

/// Keeps `floor(ratio * N)` points chosen uniformly without replacement, in their
/// original order. Returns the reduced cloud and the kept original indices.
pub fn random_downsample(
    cloud: &PointCloud,
    ratio: f64,
    seed: u64,
) -> Result<(PointCloud, Vec<usize>)> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "downsample ratio must lie in (0, 1], got {ratio}"
        )));
    }
    let keep = (ratio * cloud.len() as f64).floor() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut kept = index::sample(&mut rng, cloud.len(), keep).into_vec();
    kept.sort_unstable();
    Ok((cloud.select(&kept)?, kept))
}
