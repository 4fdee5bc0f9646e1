use std::collections::BTreeMap;

use super::{Point, PointCloud};
use crate::error::{Error, Result};

/// Occupied cells of a uniform voxel grid, in canonical `(z, y, x)` order.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    voxel_size: f64,
    cells: Vec<([i64; 3], Vec<usize>)>,
}

impl VoxelGrid {
    pub fn build(cloud: &PointCloud, voxel_size: f64) -> Result<Self> {
        if !(voxel_size.is_finite() && voxel_size > 0.0) {
            return Err(Error::Domain(format!("voxel size must be positive, got {voxel_size}")));
        }
        cloud.require_non_empty("voxel downsampling input")?;
        // keyed (z, y, x) so iteration order is the canonical order
        let mut map: BTreeMap<(i64, i64, i64), Vec<usize>> = BTreeMap::new();
        for (i, p) in cloud.iter().enumerate() {
            let c = [
                (p.x / voxel_size).floor() as i64,
                (p.y / voxel_size).floor() as i64,
                (p.z / voxel_size).floor() as i64,
            ];
            map.entry((c[2], c[1], c[0])).or_default().push(i);
        }
        let cells = map
            .into_iter()
            .map(|((z, y, x), members)| ([x, y, z], members))
            .collect();
        Ok(Self { voxel_size, cells })
    }

    pub fn voxel_size(&self) -> f64 {
        self.voxel_size
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    /// `(cell index [x, y, z], member point indices)` per occupied cell.
    pub fn cells(&self) -> &[([i64; 3], Vec<usize>)] {
        &self.cells
    }

    pub fn centroids(&self, cloud: &PointCloud) -> PointCloud {
        self.cells
            .iter()
            .map(|(_, members)| {
                let sum = members.iter().fold(Point::zeros(), |acc, &i| acc + cloud.point(i));
                sum / members.len() as f64
            })
            .collect()
    }

    /// For every input point, the position of its cell in [`cells`](Self::cells).
    pub fn assignment(&self, n_points: usize) -> Vec<usize> {
        let mut out = vec![0; n_points];
        for (cell, (_, members)) in self.cells.iter().enumerate() {
            for &i in members {
                out[i] = cell;
            }
        }
        out
    }
}

/// Replaces every occupied voxel by the centroid of its members.
///
/// Returns the centroid cloud and, per input point, the index of the
/// centroid that absorbed it.
pub fn voxel_downsample(cloud: &PointCloud, voxel_size: f64) -> Result<(PointCloud, Vec<usize>)> {
    let grid = VoxelGrid::build(cloud, voxel_size)?;
    Ok((grid.centroids(cloud), grid.assignment(cloud.len())))
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn two_points_one_cell() {
        let cloud = PointCloud::from_arrays(&[[0.0, 0.0, 0.0], [0.1, 0.0, 0.0]]).unwrap();
        let (out, assign) = voxel_downsample(&cloud, 1.0).unwrap();
        assert_eq!(out.len(), 1);
        assert!((out.point(0) - Point::new(0.05, 0.0, 0.0)).norm() < 1e-15);
        assert_eq!(assign, vec![0, 0]);
    }

    #[test]
    fn sparse_points_are_kept_in_canonical_order() {
        let cloud = PointCloud::from_arrays(&[
            [5.0, 0.0, 0.0],
            [0.0, 0.0, 5.0],
            [0.0, 5.0, 0.0],
            [0.5, 0.5, 0.5],
        ])
        .unwrap();
        let (out, assign) = voxel_downsample(&cloud, 1.0).unwrap();
        let expected = PointCloud::from_arrays(&[
            [0.5, 0.5, 0.5],
            [5.0, 0.0, 0.0],
            [0.0, 5.0, 0.0],
            [0.0, 0.0, 5.0],
        ])
        .unwrap();
        assert_eq!(out, expected);
        assert_eq!(assign, vec![1, 3, 2, 0]);
    }

    #[test]
    fn uniform_cube_occupies_at_most_64_cells() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<Point> = (0..1000)
            .map(|_| Point::new(rng.random(), rng.random(), rng.random()))
            .collect();
        let cloud = PointCloud::new(pts).unwrap();
        let (out, _) = voxel_downsample(&cloud, 0.25).unwrap();
        // enumeration oracle: distinct floor(p / 0.25) triples
        let occupied: HashSet<[i64; 3]> = cloud
            .iter()
            .map(|p| [(p.x / 0.25).floor() as i64, (p.y / 0.25).floor() as i64, (p.z / 0.25).floor() as i64])
            .collect();
        assert_eq!(out.len(), occupied.len());
        assert!(out.len() <= 64);
    }

    #[test]
    fn rejects_empty_and_bad_size() {
        assert!(matches!(voxel_downsample(&PointCloud::default(), 1.0), Err(Error::EmptyInput(_))));
        let cloud = PointCloud::from_arrays(&[[0.0, 0.0, 0.0]]).unwrap();
        assert!(voxel_downsample(&cloud, 0.0).is_err());
        assert!(voxel_downsample(&cloud, f64::NAN).is_err());
    }

    #[test]
    fn downsampling_centroids_again_keeps_them() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let pts: Vec<Point> = (0..500)
            .map(|_| Point::new(rng.random(), rng.random(), rng.random()) * 2.0)
            .collect();
        let cloud = PointCloud::new(pts).unwrap();
        let (once, _) = voxel_downsample(&cloud, 0.3).unwrap();
        let (twice, assign) = voxel_downsample(&once, 0.3).unwrap();
        // every centroid stays inside its own cell, so the second pass is a no-op
        assert_eq!(twice.len(), once.len());
        assert_eq!(assign, (0..once.len()).collect::<Vec<_>>());
        for (a, b) in once.iter().zip(twice.iter()) {
            assert!((a - b).norm() < 1e-12);
        }
    }
}
