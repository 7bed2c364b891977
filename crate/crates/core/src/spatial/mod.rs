//! Exact nearest-neighbor search and normal estimation.

mod kdtree;
mod normals;

pub use kdtree::{brute_force_knn, KdTree, NeighborList};
pub use normals::{
    estimate_normals_pca, mesh_vertex_normals, mesh_vertex_normals_from, FALLBACK_K,
};

use crate::cloud::PointCloud;

/// Builds the exact index over a cloud's positions.
pub fn build_index(cloud: &PointCloud) -> KdTree {
    KdTree::build(cloud.points())
}
