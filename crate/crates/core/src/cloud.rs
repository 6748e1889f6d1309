use std::collections::BTreeMap;

use crate::geometry::Point3;
use crate::kdtree::KdTree;

/// A set of world-frame points in meters.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    pub points: Vec<Point3>,
}

impl PointCloud {
    pub fn new(points: Vec<Point3>) -> Self {
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.points.iter().all(|p| p.iter().all(|c| c.is_finite()))
    }

    pub fn extend(&mut self, other: &PointCloud) {
        self.points.extend_from_slice(&other.points);
    }

    /// Voxel-grid downsampling.
    ///
    /// Each occupied voxel is represented by its input point closest to the
    /// voxel centroid, so every output point is an input point. A greedy
    /// pass in voxel order then drops representatives closer than
    /// `voxel / 2` to one already kept. Output follows voxel index order and
    /// does not depend on the input order.
    pub fn voxel_downsample(&self, voxel: f64) -> PointCloud {
        assert!(voxel > 0.0, "voxel size must be positive");
        let mut bins: BTreeMap<(i64, i64, i64), Vec<usize>> = BTreeMap::new();
        for (i, p) in self.points.iter().enumerate() {
            let key = (
                (p.x / voxel).floor() as i64,
                (p.y / voxel).floor() as i64,
                (p.z / voxel).floor() as i64,
            );
            bins.entry(key).or_default().push(i);
        }

        let min_spacing = voxel / 2.0;
        let mut kept: Vec<Point3> = Vec::with_capacity(bins.len());
        // Spatial hash over kept points with cell size `min_spacing`.
        let mut grid: std::collections::HashMap<(i64, i64, i64), Vec<usize>> = Default::default();
        let cell = |p: &Point3| {
            (
                (p.x / min_spacing).floor() as i64,
                (p.y / min_spacing).floor() as i64,
                (p.z / min_spacing).floor() as i64,
            )
        };
        for members in bins.values_mut() {
            members.sort_by(|&a, &b| lex_cmp(&self.points[a], &self.points[b]).then(a.cmp(&b)));
            let centroid = members
                .iter()
                .fold(nalgebra::Vector3::zeros(), |acc, &i| acc + self.points[i].coords)
                / members.len() as f64;
            let rep = members
                .iter()
                .map(|&i| self.points[i])
                .min_by(|a, b| {
                    (a.coords - centroid)
                        .norm_squared()
                        .total_cmp(&(b.coords - centroid).norm_squared())
                        .then_with(|| lex_cmp(a, b))
                })
                .expect("non-empty voxel");
            let c = cell(&rep);
            let mut crowded = false;
            'search: for dx in -1..=1 {
                for dy in -1..=1 {
                    for dz in -1..=1 {
                        if let Some(ids) = grid.get(&(c.0 + dx, c.1 + dy, c.2 + dz)) {
                            if ids.iter().any(|&j| (kept[j] - rep).norm() < min_spacing) {
                                crowded = true;
                                break 'search;
                            }
                        }
                    }
                }
            }
            if !crowded {
                grid.entry(c).or_default().push(kept.len());
                kept.push(rep);
            }
        }
        PointCloud::new(kept)
    }

    pub fn kdtree(&self) -> KdTree {
        KdTree::build(&self.points)
    }
}

fn lex_cmp(a: &Point3, b: &Point3) -> std::cmp::Ordering {
    a.x.total_cmp(&b.x)
        .then(a.y.total_cmp(&b.y))
        .then(a.z.total_cmp(&b.z))
}
