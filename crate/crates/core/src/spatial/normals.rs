//! Normal estimation: PCA over k-neighborhoods with minimum-spanning-tree
//! orientation, and angle-weighted vertex normals for meshes.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::path::Path;

use nalgebra::{Matrix3, SymmetricEigen};

use super::kdtree::KdTree;
use crate::cloud::{centroid, Point3, PointCloud, UnitVector3};
use crate::error::{Error, Result};
use crate::io::{load_obj_mesh, ObjMesh};

/// Neighborhood size used for vertices without incident faces.
pub const FALLBACK_K: usize = 20;

/// Relative eigenvalue gap below which a neighborhood is treated as rank-deficient.
const RANK_TOLERANCE: f64 = 1e-12;

/// Smallest-eigenvalue eigenvector of the covariance of `pts`, unoriented.
fn pca_normal(pts: &[Point3], index: usize) -> Result<Point3> {
    let c = centroid(pts);
    let mut cov = Matrix3::<f64>::zeros();
    for p in pts {
        let d = *p - c;
        let v = [d.x, d.y, d.z];
        for r in 0..3 {
            for s in 0..3 {
                cov[(r, s)] += v[r] * v[s];
            }
        }
    }
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let (l0, l1, l2) = (
        eig.eigenvalues[order[0]],
        eig.eigenvalues[order[1]],
        eig.eigenvalues[order[2]],
    );
    // Coincident points (l2 = 0) or a line (l1 = l0 = 0) leave the normal undefined.
    if l2 <= 0.0 || (l1 - l0) <= RANK_TOLERANCE * l2 {
        return Err(Error::UndefinedNormal { index });
    }
    let v = eig.eigenvectors.column(order[0]);
    Ok(Point3::new(v[0], v[1], v[2]))
}

/// Estimates normals from the `k`-neighborhood of every point and orients them
/// consistently over a minimum spanning tree of the kNN graph.
pub fn estimate_normals_pca(cloud: &PointCloud, k: usize) -> Result<PointCloud> {
    let n = cloud.len();
    if k == 0 || n < k + 1 {
        return Err(Error::InsufficientNeighbors { k, n });
    }
    let tree = KdTree::build(cloud.points());
    let mut neighbors = Vec::with_capacity(n);
    let mut raw = Vec::with_capacity(n);
    let mut patch = Vec::with_capacity(k + 1);
    for i in 0..n {
        let nl = tree.knn(i, k)?;
        patch.clear();
        patch.push(cloud.points()[i]);
        patch.extend(nl.indices.iter().map(|&j| cloud.points()[j]));
        raw.push(pca_normal(&patch, i)?);
        neighbors.push(nl.indices);
    }
    let oriented = orient_by_mst(cloud.points(), &raw, &neighbors);
    let normals = oriented
        .into_iter()
        .enumerate()
        .map(|(i, v)| UnitVector3::normalize(v).ok_or(Error::UndefinedNormal { index: i }))
        .collect::<Result<Vec<_>>>()?;
    cloud.clone().with_normals(normals)
}

#[derive(PartialEq)]
struct Edge {
    weight: f64,
    from: usize,
    to: usize,
}

impl Eq for Edge {}

impl Ord for Edge {
    fn cmp(&self, other: &Self) -> Ordering {
        // Min-heap on weight; ties resolved by indices for determinism.
        other
            .weight
            .total_cmp(&self.weight)
            .then_with(|| other.to.cmp(&self.to))
            .then_with(|| other.from.cmp(&self.from))
    }
}

impl PartialOrd for Edge {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Prim's algorithm over the symmetrized kNN graph with weights `1 - |n_i . n_j|`.
/// Each component's root is its point farthest from the cloud centroid, oriented outward.
fn orient_by_mst(points: &[Point3], normals: &[Point3], neighbors: &[Vec<usize>]) -> Vec<Point3> {
    let n = points.len();
    let mut adj: Vec<Vec<usize>> = neighbors.to_vec();
    for (i, nb) in neighbors.iter().enumerate() {
        for &j in nb {
            adj[j].push(i);
        }
    }
    for a in adj.iter_mut() {
        a.sort_unstable();
        a.dedup();
    }
    let c = centroid(points);
    let mut out = normals.to_vec();
    let mut visited = vec![false; n];
    let mut by_distance: Vec<usize> = (0..n).collect();
    by_distance.sort_by(|&a, &b| {
        points[b]
            .distance_squared(&c)
            .total_cmp(&points[a].distance_squared(&c))
            .then(a.cmp(&b))
    });
    let mut heap = BinaryHeap::new();
    for &root in &by_distance {
        if visited[root] {
            continue;
        }
        if out[root].dot(&(points[root] - c)) < 0.0 {
            out[root] = -out[root];
        }
        visited[root] = true;
        let push = |heap: &mut BinaryHeap<Edge>, out: &[Point3], from: usize, visited: &[bool]| {
            for &to in &adj[from] {
                if !visited[to] {
                    heap.push(Edge {
                        weight: 1.0 - out[from].dot(&normals[to]).abs(),
                        from,
                        to,
                    });
                }
            }
        };
        push(&mut heap, &out, root, &visited);
        while let Some(e) = heap.pop() {
            if visited[e.to] {
                continue;
            }
            visited[e.to] = true;
            if out[e.from].dot(&out[e.to]) < 0.0 {
                out[e.to] = -out[e.to];
            }
            push(&mut heap, &out, e.to, &visited);
        }
    }
    out
}

fn corner_angle(a: Point3, b: Point3, c: Point3) -> f64 {
    let u = b - a;
    let v = c - a;
    let nu = u.norm();
    let nv = v.norm();
    if nu == 0.0 || nv == 0.0 {
        return 0.0;
    }
    (u.dot(&v) / (nu * nv)).clamp(-1.0, 1.0).acos()
}

/// Angle-weighted average of incident face normals per vertex. Polygons are
/// triangulated as fans. Vertices without faces fall back to PCA over
/// [`FALLBACK_K`] neighbors.
pub fn mesh_vertex_normals_from(mesh: &ObjMesh) -> Result<PointCloud> {
    let n = mesh.vertices.len();
    if n == 0 {
        return Err(Error::EmptyFile);
    }
    let v = &mesh.vertices;
    let mut acc = vec![Point3::ORIGIN; n];
    let mut touched = vec![false; n];
    for face in &mesh.faces {
        for t in 1..face.len() - 1 {
            let tri = [face[0], face[t], face[t + 1]];
            let fnorm = (v[tri[1]] - v[tri[0]]).cross(&(v[tri[2]] - v[tri[0]]));
            let Some(unit) = UnitVector3::normalize(fnorm) else {
                continue;
            };
            for c in 0..3 {
                let (a, b, d) = (tri[c], tri[(c + 1) % 3], tri[(c + 2) % 3]);
                let w = corner_angle(v[a], v[b], v[d]);
                acc[a] = acc[a] + unit.vector() * w;
                touched[a] = true;
            }
        }
    }
    let tree = if touched.iter().all(|&t| t) {
        None
    } else {
        Some(KdTree::build(v))
    };
    let c = centroid(v);
    let mut normals = Vec::with_capacity(n);
    for i in 0..n {
        let from_faces = if touched[i] {
            UnitVector3::normalize(acc[i])
        } else {
            None
        };
        let normal = match from_faces {
            Some(u) => u,
            None => {
                let tree = match &tree {
                    Some(t) => t,
                    None => return Err(Error::UndefinedNormal { index: i }),
                };
                let k = FALLBACK_K.min(n.saturating_sub(1));
                let nl = tree.knn(i, k)?;
                let mut patch = vec![v[i]];
                patch.extend(nl.indices.iter().map(|&j| v[j]));
                let mut p = pca_normal(&patch, i)?;
                if p.dot(&(v[i] - c)) < 0.0 {
                    p = -p;
                }
                UnitVector3::normalize(p).ok_or(Error::UndefinedNormal { index: i })?
            }
        };
        normals.push(normal);
    }
    PointCloud::new(v.clone())?.with_normals(normals)
}

pub fn mesh_vertex_normals(obj_path: &Path) -> Result<PointCloud> {
    mesh_vertex_normals_from(&load_obj_mesh(obj_path)?)
}
