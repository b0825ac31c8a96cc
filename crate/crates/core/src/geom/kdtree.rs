use std::cmp::Ordering;
use std::collections::BinaryHeap;

use super::{Point, PointCloud};
use crate::error::{Error, Result};

const LEAF_SIZE: usize = 12;

#[derive(Debug)]
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

/// Exact k-nearest-neighbour index over a fixed set of points.
///
/// Results are ordered by `(distance, index)`, so equidistant points come
/// back lowest index first.
#[derive(Debug)]
pub struct KdTree {
    points: Vec<[f64; 3]>,
    order: Vec<usize>,
    nodes: Vec<Node>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Candidate {
    dist2: f64,
    index: usize,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist2.total_cmp(&other.dist2).then(self.index.cmp(&other.index))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl KdTree {
    pub fn new(points: &[Point]) -> Self {
        let points: Vec<[f64; 3]> = points.iter().map(|p| [p.x, p.y, p.z]).collect();
        let mut order: Vec<usize> = (0..points.len()).collect();
        let mut nodes = Vec::new();
        if !points.is_empty() {
            build(&points, &mut order, 0, points.len(), &mut nodes);
        }
        KdTree { points, order, nodes }
    }

    pub fn from_cloud(cloud: &PointCloud) -> Self {
        Self::new(cloud.points())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Indices of the `k` nearest points to `query`, ascending by distance.
    /// Returns fewer than `k` when the tree is smaller.
    pub fn nearest_k(&self, query: &Point, k: usize) -> Vec<usize> {
        self.nearest_k_with_distances(query, k).into_iter().map(|(i, _)| i).collect()
    }

    /// Like [`KdTree::nearest_k`], paired with squared distances.
    pub fn nearest_k_with_distances(&self, query: &Point, k: usize) -> Vec<(usize, f64)> {
        if k == 0 || self.nodes.is_empty() {
            return Vec::new();
        }
        let q = [query.x, query.y, query.z];
        let mut heap = BinaryHeap::with_capacity(k + 1);
        self.search(0, &q, k, &mut heap);
        let mut out = heap.into_vec();
        out.sort();
        out.into_iter().map(|c| (c.index, c.dist2)).collect()
    }

    /// Nearest point within `max_dist`, as `(index, squared distance)`.
    pub fn nearest_within(&self, query: &Point, max_dist: f64) -> Option<(usize, f64)> {
        let (index, dist2) = *self.nearest_k_with_distances(query, 1).first()?;
        (dist2 <= max_dist * max_dist).then_some((index, dist2))
    }

    fn search(&self, node: usize, q: &[f64; 3], k: usize, heap: &mut BinaryHeap<Candidate>) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &index in &self.order[start..end] {
                    let p = &self.points[index];
                    let dist2 = (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2);
                    let cand = Candidate { dist2, index };
                    if heap.len() < k {
                        heap.push(cand);
                    } else if cand < *heap.peek().expect("k > 0") {
                        heap.pop();
                        heap.push(cand);
                    }
                }
            }
            Node::Split { axis, value, left, right } => {
                let diff = q[axis] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.search(near, q, k, heap);
                // Equal-distance points on the far side may still win on index.
                if heap.len() < k || diff * diff <= heap.peek().expect("non-empty").dist2 {
                    self.search(far, q, k, heap);
                }
            }
        }
    }
}

fn build(points: &[[f64; 3]], order: &mut [usize], start: usize, end: usize, nodes: &mut Vec<Node>) -> usize {
    let id = nodes.len();
    if end - start <= LEAF_SIZE {
        nodes.push(Node::Leaf { start, end });
        return id;
    }
    let slice = &mut order[start..end];
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for &i in slice.iter() {
        for k in 0..3 {
            lo[k] = lo[k].min(points[i][k]);
            hi[k] = hi[k].max(points[i][k]);
        }
    }
    let axis = (0..3).max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b]))).unwrap_or(0);
    if hi[axis] - lo[axis] == 0.0 {
        // All points coincide.
        nodes.push(Node::Leaf { start, end });
        return id;
    }
    let mid = slice.len() / 2;
    slice.select_nth_unstable_by(mid, |&a, &b| points[a][axis].total_cmp(&points[b][axis]));
    let value = points[slice[mid]][axis];

    nodes.push(Node::Leaf { start, end });
    let left = build(points, order, start, start + mid, nodes);
    let right = build(points, order, start + mid, end, nodes);
    nodes[id] = Node::Split { axis, value, left, right };
    id
}

/// Indices of the `k` nearest points of `cloud` to `query`, ascending by
/// distance, ties broken by lower index.
pub fn knn(cloud: &PointCloud, query: &Point, k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > cloud.len() {
        return Err(Error::InsufficientPoints {
            needed: k.max(1),
            got: cloud.len(),
        });
    }
    Ok(KdTree::from_cloud(cloud).nearest_k(query, k))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::RigidTransform;
    use crate::geom::Vector;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_force(points: &[Point], q: &Point, k: usize) -> Vec<usize> {
        let mut all: Vec<(f64, usize)> = points.iter().enumerate().map(|(i, p)| ((p - q).norm_squared(), i)).collect();
        all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        all.into_iter().take(k).map(|(_, i)| i).collect()
    }

    #[test]
    fn small_line() {
        let cloud = PointCloud::from_xyz(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]]).unwrap();
        assert_eq!(knn(&cloud, &Point::new(0.1, 0.0, 0.0), 2).unwrap(), vec![0, 1]);
        assert_eq!(knn(&cloud, &Point::new(0.1, 0.0, 0.0), 3).unwrap(), vec![0, 1, 2]);
        assert_eq!(knn(&cloud, &Point::new(1.9, 0.0, 0.0), 3).unwrap(), vec![2, 1, 0]);
    }

    #[test]
    fn k_too_large() {
        let cloud = PointCloud::from_xyz(&[[0.0, 0.0, 0.0]]).unwrap();
        assert!(matches!(
            knn(&cloud, &Point::origin(), 2),
            Err(Error::InsufficientPoints { needed: 2, got: 1 })
        ));
    }

    #[test]
    fn ties_prefer_lower_index() {
        // Many duplicates and a lattice of equidistant points.
        let mut pts = Vec::new();
        for i in 0..60 {
            pts.push([(i % 4) as f64, ((i / 4) % 4) as f64, 0.0]);
        }
        let cloud = PointCloud::from_xyz(&pts).unwrap();
        let q = Point::new(1.5, 1.5, 0.0);
        for k in 1..=60 {
            assert_eq!(knn(&cloud, &q, k).unwrap(), brute_force(cloud.points(), &q, k));
        }
    }

    #[test]
    fn matches_exhaustive_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let pts: Vec<Point> = (0..1000).map(|_| Point::new(rng.random(), rng.random(), rng.random())).collect();
        let tree = KdTree::new(&pts);
        for _ in 0..100 {
            let q = Point::new(rng.random_range(-0.2..1.2), rng.random(), rng.random());
            assert_eq!(tree.nearest_k(&q, 15), brute_force(&pts, &q, 15));
        }
    }

    proptest! {
        #[test]
        fn invariant_under_rigid_motion(
            pts in prop::collection::vec(prop::array::uniform3(-5.0..5.0f64), 20..80),
            q in prop::array::uniform3(-5.0..5.0f64),
            w in prop::array::uniform3(-2.0..2.0f64),
            t in prop::array::uniform3(-10.0..10.0f64),
        ) {
            let cloud = PointCloud::from_xyz(&pts).unwrap();
            let query = Point::from(q);
            let before = knn(&cloud, &query, 10).unwrap();
            // Exclude configurations where rounding could reorder near-ties.
            let d: Vec<f64> = before.iter().map(|&i| (cloud.points()[i] - query).norm()).collect();
            let all = brute_force(cloud.points(), &query, 11);
            let d11 = (cloud.points()[all[10]] - query).norm();
            prop_assume!(d.windows(2).all(|w| w[1] - w[0] > 1e-9) && d11 - d[9] > 1e-9);
            let motion = RigidTransform::from_axis_angle(Vector::from(w), Vector::from(t));
            let after = knn(&cloud.transformed(&motion), &motion.transform_point(&query), 10).unwrap();
            prop_assert_eq!(before, after);
        }
    }
}
