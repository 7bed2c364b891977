use crate::cloud::Point3;
use crate::error::{Error, Result};

const DEFAULT_LEAF_SIZE: usize = 8;

/// The `k` nearest neighbors of one query, ascending by distance (ties by lower index).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct NeighborList {
    pub indices: Vec<usize>,
    pub distances: Vec<f64>,
}

impl NeighborList {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

#[derive(Debug, Clone)]
enum Node {
    Leaf {
        start: usize,
        end: usize,
    },
    Split {
        axis: usize,
        value: f64,
        left: usize,
        right: usize,
    },
}

/// Exact kd-tree over a fixed point set. Queries return indices into the source slice.
#[derive(Debug, Clone)]
pub struct KdTree {
    points: Vec<[f64; 3]>,
    order: Vec<usize>,
    nodes: Vec<Node>,
    leaf_size: usize,
}

/// Bounded candidate list ordered by (squared distance, index).
struct Candidates {
    k: usize,
    items: Vec<(f64, usize)>,
}

impl Candidates {
    fn new(k: usize) -> Self {
        Candidates {
            k,
            items: Vec::with_capacity(k + 1),
        }
    }

    #[inline]
    fn worst(&self) -> f64 {
        if self.items.len() < self.k {
            f64::INFINITY
        } else {
            self.items[self.k - 1].0
        }
    }

    #[inline]
    fn offer(&mut self, d2: f64, idx: usize) {
        if self.items.len() == self.k {
            let (wd, wi) = self.items[self.k - 1];
            if d2 > wd || (d2 == wd && idx > wi) {
                return;
            }
        }
        let pos = self
            .items
            .partition_point(|&(d, i)| d < d2 || (d == d2 && i < idx));
        self.items.insert(pos, (d2, idx));
        if self.items.len() > self.k {
            self.items.pop();
        }
    }
}

impl KdTree {
    pub fn build(points: &[Point3]) -> Self {
        Self::with_leaf_size(points, DEFAULT_LEAF_SIZE)
    }

    pub fn with_leaf_size(points: &[Point3], leaf_size: usize) -> Self {
        let leaf_size = leaf_size.max(1);
        let mut tree = KdTree {
            points: points.iter().map(|p| p.to_array()).collect(),
            order: (0..points.len()).collect(),
            nodes: Vec::new(),
            leaf_size,
        };
        if !points.is_empty() {
            let mut order = std::mem::take(&mut tree.order);
            tree.build_node(&mut order, 0);
            tree.order = order;
        }
        tree
    }

    fn build_node(&mut self, order: &mut [usize], offset: usize) -> usize {
        let id = self.nodes.len();
        if order.len() <= self.leaf_size {
            self.nodes.push(Node::Leaf {
                start: offset,
                end: offset + order.len(),
            });
            return id;
        }
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for &i in order.iter() {
            for a in 0..3 {
                lo[a] = lo[a].min(self.points[i][a]);
                hi[a] = hi[a].max(self.points[i][a]);
            }
        }
        let axis = (0..3)
            .max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])))
            .unwrap_or(0);
        if hi[axis] - lo[axis] == 0.0 {
            // All remaining points coincide.
            self.nodes.push(Node::Leaf {
                start: offset,
                end: offset + order.len(),
            });
            return id;
        }
        let mid = order.len() / 2;
        let pts = &self.points;
        order.select_nth_unstable_by(mid, |&a, &b| pts[a][axis].total_cmp(&pts[b][axis]));
        let value = self.points[order[mid]][axis];
        self.nodes.push(Node::Split {
            axis,
            value,
            left: 0,
            right: 0,
        });
        let (l, r) = order.split_at_mut(mid);
        let left = self.build_node(l, offset);
        let right = self.build_node(r, offset + mid);
        if let Node::Split {
            left: ls,
            right: rs,
            ..
        } = &mut self.nodes[id]
        {
            *ls = left;
            *rs = right;
        }
        id
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn leaf_size(&self) -> usize {
        self.leaf_size
    }

    pub fn point(&self, index: usize) -> Point3 {
        self.points[index].into()
    }

    /// The `k` nearest indexed points to point `query_index`, excluding itself.
    pub fn knn(&self, query_index: usize, k: usize) -> Result<NeighborList> {
        if k >= self.len() {
            return Err(Error::InsufficientNeighbors { k, n: self.len() });
        }
        Ok(self.search(&self.points[query_index], k, Some(query_index)))
    }

    /// The `k` nearest indexed points to an arbitrary location.
    pub fn knn_point(&self, query: &Point3, k: usize) -> Result<NeighborList> {
        if k > self.len() {
            return Err(Error::InsufficientNeighbors { k, n: self.len() });
        }
        Ok(self.search(&query.to_array(), k, None))
    }

    /// Nearest indexed point and its distance.
    pub fn nearest(&self, query: &Point3) -> Option<(usize, f64)> {
        if self.is_empty() {
            return None;
        }
        let r = self.search(&query.to_array(), 1, None);
        Some((r.indices[0], r.distances[0]))
    }

    fn search(&self, q: &[f64; 3], k: usize, exclude: Option<usize>) -> NeighborList {
        let mut cand = Candidates::new(k);
        if k > 0 && !self.nodes.is_empty() {
            self.visit(0, q, exclude, &mut cand);
        }
        NeighborList {
            indices: cand.items.iter().map(|&(_, i)| i).collect(),
            distances: cand.items.iter().map(|&(d, _)| d.sqrt()).collect(),
        }
    }

    fn visit(&self, node: usize, q: &[f64; 3], exclude: Option<usize>, cand: &mut Candidates) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                let qp = Point3::from(*q);
                for &i in &self.order[start..end] {
                    if Some(i) == exclude {
                        continue;
                    }
                    cand.offer(qp.distance_squared(&self.points[i].into()), i);
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = q[axis] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.visit(near, q, exclude, cand);
                // `<=` keeps equal-distance points reachable for index tie-breaking.
                if diff * diff <= cand.worst() {
                    self.visit(far, q, exclude, cand);
                }
            }
        }
    }
}

/// Exhaustive reference search with the same ordering rules as [`KdTree::knn`].
pub fn brute_force_knn(points: &[Point3], query_index: usize, k: usize) -> NeighborList {
    let q = points[query_index];
    let mut all: Vec<(f64, usize)> = points
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != query_index)
        .map(|(i, p)| (q.distance_squared(p), i))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    all.truncate(k);
    NeighborList {
        indices: all.iter().map(|&(_, i)| i).collect(),
        distances: all.iter().map(|&(d, _)| d.sqrt()).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_points(n: usize, seed: u64) -> Vec<Point3> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| Point3::new(rng.random(), rng.random(), rng.random()))
            .collect()
    }

    #[test]
    fn single_point_index() {
        let t = KdTree::build(&[Point3::new(1.0, 2.0, 3.0)]);
        assert_eq!(t.len(), 1);
        assert!(matches!(t.knn(0, 1), Err(Error::InsufficientNeighbors { .. })));
    }

    #[test]
    fn grid_index_size() {
        let pts: Vec<Point3> = (0..1000)
            .map(|i| Point3::new((i % 10) as f64, ((i / 10) % 10) as f64, (i / 100) as f64))
            .collect();
        let t = KdTree::build(&pts);
        assert_eq!(t.len(), 1000);
        // Grids are full of distance ties; the index must still agree with the scan.
        for q in [0, 555, 999] {
            assert_eq!(t.knn(q, 12).unwrap(), brute_force_knn(&pts, q, 12));
        }
    }

    #[test]
    fn collinear_ordering() {
        let pts: Vec<Point3> = (0..4).map(|i| Point3::new(i as f64, 0.0, 0.0)).collect();
        let r = KdTree::build(&pts).knn(0, 2).unwrap();
        assert_eq!(r.indices, vec![1, 2]);
        assert_eq!(r.distances, vec![1.0, 2.0]);
    }

    #[test]
    fn square_axis_neighbors() {
        let pts = [
            Point3::new(0.0, 0.0, 0.0),
            Point3::new(1.0, 0.0, 0.0),
            Point3::new(0.0, 1.0, 0.0),
            Point3::new(1.0, 1.0, 0.0),
        ];
        let r = KdTree::build(&pts).knn(0, 2).unwrap();
        assert_eq!(r.indices, vec![1, 2]);
        assert_eq!(r.distances, vec![1.0, 1.0]);
    }

    #[test]
    fn matches_exhaustive_scan_on_random_cloud() {
        let pts = random_points(200, 3);
        let t = KdTree::build(&pts);
        for q in 0..pts.len() {
            for k in [1, 5, 20] {
                assert_eq!(t.knn(q, k).unwrap(), brute_force_knn(&pts, q, k));
            }
        }
        let pts = random_points(500, 11);
        let t = KdTree::build(&pts);
        for q in 0..pts.len() {
            assert_eq!(t.knn(q, 20).unwrap(), brute_force_knn(&pts, q, 20));
        }
    }

    #[test]
    fn point_queries_and_duplicates() {
        let mut pts = random_points(50, 5);
        pts.push(pts[7]);
        let t = KdTree::build(&pts);
        let r = t.knn(7, 1).unwrap();
        assert_eq!(r.indices, vec![50]);
        assert_eq!(r.distances, vec![0.0]);
        let (i, d) = t.nearest(&pts[7]).unwrap();
        assert_eq!((i, d), (7, 0.0));
        assert_eq!(t.knn_point(&pts[3], 51).unwrap().len(), 51);
    }

    #[test]
    fn coincident_points_do_not_recurse_forever() {
        let pts = vec![Point3::new(1.0, 1.0, 1.0); 100];
        let t = KdTree::build(&pts);
        let r = t.knn(10, 3).unwrap();
        assert_eq!(r.indices, vec![0, 1, 2]);
    }
}
