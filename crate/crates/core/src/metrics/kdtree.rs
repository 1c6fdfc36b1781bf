//! Static 3-d tree for nearest-neighbour queries over point clouds.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use nalgebra::Vector3;

/// Balanced k-d tree stored implicitly: the node of a subrange `[lo, hi)` is its midpoint.
#[derive(Debug, Clone)]
pub struct KdTree {
    points: Vec<Vector3<f64>>,
    /// Original index of each reordered point.
    index: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub dist_sq: f64,
}

impl Eq for Neighbor {}

impl Ord for Neighbor {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist_sq
            .total_cmp(&other.dist_sq)
            .then(self.index.cmp(&other.index))
    }
}

impl PartialOrd for Neighbor {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl KdTree {
    pub fn build(points: &[Vector3<f64>]) -> Self {
        let mut order: Vec<usize> = (0..points.len()).collect();
        split(points, &mut order, 0);
        Self {
            points: order.iter().map(|&i| points[i]).collect(),
            index: order,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Closest point to `query`; `None` for an empty tree.
    pub fn nearest(&self, query: &Vector3<f64>) -> Option<Neighbor> {
        let mut best = None;
        self.search_nearest(query, 0, self.points.len(), 0, &mut best);
        best
    }

    /// The `k` closest points, nearest first.
    pub fn knn(&self, query: &Vector3<f64>, k: usize) -> Vec<Neighbor> {
        if k == 0 {
            return Vec::new();
        }
        let mut heap = BinaryHeap::with_capacity(k + 1);
        self.search_knn(query, k, 0, self.points.len(), 0, &mut heap);
        heap.into_sorted_vec()
    }

    fn search_nearest(&self, q: &Vector3<f64>, lo: usize, hi: usize, depth: usize, best: &mut Option<Neighbor>) {
        if lo >= hi {
            return;
        }
        let mid = lo + (hi - lo) / 2;
        let p = &self.points[mid];
        let cand = Neighbor {
            index: self.index[mid],
            dist_sq: (p - q).norm_squared(),
        };
        if best.map_or(true, |b| cand < b) {
            *best = Some(cand);
        }
        let axis = depth % 3;
        let diff = q[axis] - p[axis];
        let (near, far) = if diff < 0.0 { ((lo, mid), (mid + 1, hi)) } else { ((mid + 1, hi), (lo, mid)) };
        self.search_nearest(q, near.0, near.1, depth + 1, best);
        if best.map_or(true, |b| diff * diff <= b.dist_sq) {
            self.search_nearest(q, far.0, far.1, depth + 1, best);
        }
    }

    fn search_knn(
        &self,
        q: &Vector3<f64>,
        k: usize,
        lo: usize,
        hi: usize,
        depth: usize,
        heap: &mut BinaryHeap<Neighbor>,
    ) {
        if lo >= hi {
            return;
        }
        let mid = lo + (hi - lo) / 2;
        let p = &self.points[mid];
        let cand = Neighbor {
            index: self.index[mid],
            dist_sq: (p - q).norm_squared(),
        };
        if heap.len() < k {
            heap.push(cand);
        } else if heap.peek().is_some_and(|w| cand < *w) {
            heap.pop();
            heap.push(cand);
        }
        let axis = depth % 3;
        let diff = q[axis] - p[axis];
        let (near, far) = if diff < 0.0 { ((lo, mid), (mid + 1, hi)) } else { ((mid + 1, hi), (lo, mid)) };
        self.search_knn(q, k, near.0, near.1, depth + 1, heap);
        let bound = heap.peek().map_or(f64::INFINITY, |w| w.dist_sq);
        if heap.len() < k || diff * diff <= bound {
            self.search_knn(q, k, far.0, far.1, depth + 1, heap);
        }
    }
}

fn split(points: &[Vector3<f64>], order: &mut [usize], depth: usize) {
    if order.len() <= 1 {
        return;
    }
    let axis = depth % 3;
    let mid = order.len() / 2;
    order.select_nth_unstable_by(mid, |&a, &b| points[a][axis].total_cmp(&points[b][axis]));
    let (left, right) = order.split_at_mut(mid);
    split(points, left, depth + 1);
    split(points, &mut right[1..], depth + 1);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{gaussian_vector, seeded_rng};

    fn cloud(n: usize, seed: u64) -> Vec<Vector3<f64>> {
        let mut rng = seeded_rng(seed);
        (0..n)
            .map(|_| {
                let v = gaussian_vector(3, 1.0, &mut rng);
                Vector3::new(v[0], v[1], v[2])
            })
            .collect()
    }

    #[test]
    fn nearest_matches_linear_scan() {
        let pts = cloud(500, 1);
        let tree = KdTree::build(&pts);
        for q in cloud(200, 2) {
            let got = tree.nearest(&q).unwrap();
            let best = pts
                .iter()
                .map(|p| (p - q).norm_squared())
                .fold(f64::INFINITY, f64::min);
            assert_eq!(got.dist_sq, best);
            assert_eq!((pts[got.index] - q).norm_squared(), best);
        }
    }

    #[test]
    fn knn_matches_sorted_scan() {
        let pts = cloud(300, 3);
        let tree = KdTree::build(&pts);
        for q in cloud(50, 4) {
            let got: Vec<f64> = tree.knn(&q, 7).iter().map(|n| n.dist_sq).collect();
            let mut all: Vec<f64> = pts.iter().map(|p| (p - q).norm_squared()).collect();
            all.sort_by(f64::total_cmp);
            assert_eq!(got, all[..7].to_vec());
        }
    }

    #[test]
    fn small_and_empty_trees() {
        let empty = KdTree::build(&[]);
        assert!(empty.nearest(&Vector3::zeros()).is_none());
        let one = KdTree::build(&[Vector3::new(1.0, 2.0, 3.0)]);
        assert_eq!(one.nearest(&Vector3::zeros()).unwrap().index, 0);
        assert_eq!(one.knn(&Vector3::zeros(), 5).len(), 1);
    }

    #[test]
    fn duplicate_points() {
        let pts = vec![Vector3::new(1.0, 1.0, 1.0); 10];
        let tree = KdTree::build(&pts);
        assert_eq!(tree.knn(&Vector3::zeros(), 4).len(), 4);
        assert_eq!(tree.nearest(&Vector3::new(1.0, 1.0, 1.0)).unwrap().dist_sq, 0.0);
    }
}
