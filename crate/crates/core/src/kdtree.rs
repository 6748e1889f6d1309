//! Static 3-D kd-tree for exact nearest-neighbor queries.

use crate::geometry::Point3;

const LEAF_SIZE: usize = 8;

pub struct KdTree {
    points: Vec<Point3>,
    /// Permutation of point indices laid out as an implicit balanced tree.
    order: Vec<usize>,
}

impl KdTree {
    pub fn build(points: &[Point3]) -> Self {
        let mut order: Vec<usize> = (0..points.len()).collect();
        split(points, &mut order, 0);
        Self {
            points: points.to_vec(),
            order,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Index of and distance to the closest stored point, `None` if empty.
    pub fn nearest(&self, q: &Point3) -> Option<(usize, f64)> {
        if self.points.is_empty() {
            return None;
        }
        let mut best = (usize::MAX, f64::INFINITY);
        self.search(q, 0, self.order.len(), 0, &mut best);
        Some((best.0, best.1.sqrt()))
    }

    fn search(&self, q: &Point3, lo: usize, hi: usize, depth: usize, best: &mut (usize, f64)) {
        if hi - lo <= LEAF_SIZE {
            for &i in &self.order[lo..hi] {
                let d2 = (self.points[i] - q).norm_squared();
                if d2 < best.1 || (d2 == best.1 && i < best.0) {
                    *best = (i, d2);
                }
            }
            return;
        }
        let mid = lo + (hi - lo) / 2;
        let axis = depth % 3;
        let pivot = self.order[mid];
        let diff = q[axis] - self.points[pivot][axis];
        let d2 = (self.points[pivot] - q).norm_squared();
        if d2 < best.1 || (d2 == best.1 && pivot < best.0) {
            *best = (pivot, d2);
        }
        let (near, far) = if diff < 0.0 {
            ((lo, mid), (mid + 1, hi))
        } else {
            ((mid + 1, hi), (lo, mid))
        };
        self.search(q, near.0, near.1, depth + 1, best);
        // A single squared coordinate never exceeds the full squared sum.
        if diff * diff <= best.1 {
            self.search(q, far.0, far.1, depth + 1, best);
        }
    }
}

fn split(points: &[Point3], order: &mut [usize], depth: usize) {
    if order.len() <= LEAF_SIZE {
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
    use rand::{Rng, SeedableRng};

    #[test]
    fn matches_brute_force() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        for n in [1usize, 2, 9, 100, 1000] {
            let pts: Vec<Point3> = (0..n)
                .map(|_| Point3::new(rng.random(), rng.random(), rng.random()))
                .collect();
            let tree = KdTree::build(&pts);
            for _ in 0..200 {
                let q = Point3::new(rng.random_range(-0.5..1.5), rng.random_range(-0.5..1.5), rng.random());
                let (_, d) = tree.nearest(&q).unwrap();
                let brute = pts.iter().map(|p| (p - q).norm()).fold(f64::INFINITY, f64::min);
                assert_eq!(d, brute);
            }
        }
    }

    #[test]
    fn duplicates_and_empty() {
        let pts = vec![Point3::new(1.0, 1.0, 1.0); 50];
        let tree = KdTree::build(&pts);
        assert_eq!(tree.nearest(&Point3::new(1.0, 1.0, 2.0)).unwrap(), (0, 1.0));
        assert!(KdTree::build(&[]).nearest(&Point3::origin()).is_none());
    }
}
