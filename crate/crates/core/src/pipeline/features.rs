use nalgebra::{DMatrix, Matrix3, SymmetricEigen};

use super::Superpoints;
use crate::costs::FeatureMatrix;
use crate::error::{Error, Result};
use crate::geometry::{NeighborIndex, Point, PointCloud, RigidTransform};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Source,
    Target,
}

/// Source of per-point descriptors for both clouds of a pair.
pub trait FeatureProvider: Send + Sync {
    fn point_features(&self, cloud: &PointCloud, side: Side) -> Result<FeatureMatrix>;

    /// Descriptors of superpoints. Defaults to pooling the normalized
    /// descriptors of each group's members.
    fn superpoint_features(&self, sp: &Superpoints, cloud: &PointCloud, fine: &FeatureMatrix, side: Side) -> Result<FeatureMatrix> {
        let _ = side;
        pooled_features(sp, cloud, fine)
    }
}

/// Mean of the unit-normalized member rows per group. A group without
/// members borrows the row of the fine point nearest to its superpoint.
pub fn pooled_features(sp: &Superpoints, cloud: &PointCloud, fine: &FeatureMatrix) -> Result<FeatureMatrix> {
    if fine.len() != cloud.len() {
        return Err(Error::shape("pooled features", cloud.len(), fine.len()));
    }
    let m = fine.as_matrix();
    let d = fine.dim();
    let unit = |i: usize| {
        let r = m.row(i);
        r / r.norm()
    };
    let index = NeighborIndex::auto(cloud);
    let mut out = DMatrix::zeros(sp.len(), d);
    for (g, members) in sp.groups().iter().enumerate() {
        let mut row = nalgebra::RowDVector::zeros(d);
        if members.is_empty() {
            let (i, _) = index.nearest(sp.points().point(g)).ok_or(Error::EmptyInput("pooling support cloud"))?;
            row = unit(i);
        } else {
            for &i in members {
                row += unit(i);
            }
            row /= members.len() as f64;
        }
        out.set_row(g, &row);
    }
    FeatureMatrix::new(out)
}

/// Ground-truth-aligned coordinates plus a constant bias channel.
///
/// Source points are mapped through the true transform into the target
/// frame, so a point and its true counterpart get identical rows.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleFeatures {
    gt: RigidTransform,
    anchor: Point,
    bias: f64,
}

impl OracleFeatures {
    /// `anchor` is the origin of the shared frame, given in target coordinates.
    pub fn new(gt: RigidTransform, anchor: Point, bias: f64) -> Result<Self> {
        if !(bias > 0.0 && bias.is_finite()) {
            return Err(Error::Domain(format!("oracle bias must be positive, got {bias}")));
        }
        Ok(Self { gt, anchor, bias })
    }

    /// Frame anchored at the target centroid with unit bias.
    pub fn for_pair(gt: RigidTransform, target: &PointCloud) -> Result<Self> {
        let anchor = target.centroid().ok_or(Error::EmptyInput("oracle feature target cloud"))?;
        Self::new(gt, anchor, 1.0)
    }

    fn rows(&self, points: &[Point], side: Side) -> Result<FeatureMatrix> {
        let mut m = DMatrix::zeros(points.len(), 4);
        for (i, p) in points.iter().enumerate() {
            let aligned = match side {
                Side::Source => self.gt.apply(p),
                Side::Target => *p,
            } - self.anchor;
            m[(i, 0)] = aligned.x;
            m[(i, 1)] = aligned.y;
            m[(i, 2)] = aligned.z;
            m[(i, 3)] = self.bias;
        }
        FeatureMatrix::new(m)
    }
}

impl FeatureProvider for OracleFeatures {
    fn point_features(&self, cloud: &PointCloud, side: Side) -> Result<FeatureMatrix> {
        self.rows(cloud.points(), side)
    }

    fn superpoint_features(&self, sp: &Superpoints, _cloud: &PointCloud, _fine: &FeatureMatrix, side: Side) -> Result<FeatureMatrix> {
        self.rows(sp.points().points(), side)
    }
}

pub const SPECTRAL_BINS: usize = 8;

/// Rotation-invariant handcrafted descriptor on a neighborhood of radius `r`:
/// normalized covariance eigenvalues (3) and a normalized histogram of
/// neighbor distances over `(0, r]`, L2-normalized as one row.
///
/// Points with fewer than 3 neighbors use `(1/3, 1/3, 1/3)` for the
/// eigenvalue part.
pub fn spectral_descriptor(cloud: &PointCloud, radius: f64, bins: usize) -> Result<FeatureMatrix> {
    spectral_descriptor_with_support(cloud, cloud, radius, bins)
}

/// As [`spectral_descriptor`], with neighborhoods taken from `support`.
pub fn spectral_descriptor_with_support(queries: &PointCloud, support: &PointCloud, radius: f64, bins: usize) -> Result<FeatureMatrix> {
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(Error::Domain(format!("descriptor radius must be positive, got {radius}")));
    }
    if bins == 0 {
        return Err(Error::Domain("descriptor needs at least one histogram bin".into()));
    }
    let index = NeighborIndex::for_cloud(support, radius);
    let mut out = DMatrix::zeros(queries.len(), 3 + bins);
    for (row, q) in queries.iter().enumerate() {
        let hood: Vec<(usize, f64)> = index
            .within_radius(q, radius * (1.0 + 1e-12))
            .into_iter()
            .filter(|&(_, d)| d <= radius)
            .collect();
        let mut hist = vec![0.0; bins];
        let mut n_neighbors = 0usize;
        for &(_, d) in &hood {
            if d > 0.0 {
                let b = ((d / radius * bins as f64).ceil() as usize).clamp(1, bins) - 1;
                hist[b] += 1.0;
                n_neighbors += 1;
            }
        }
        if n_neighbors > 0 {
            hist.iter_mut().for_each(|h| *h /= n_neighbors as f64);
        }
        let eig = if n_neighbors < 3 {
            [1.0 / 3.0; 3]
        } else {
            normalized_eigenvalues(hood.iter().map(|&(i, _)| support.point(i)))
        };
        for (k, v) in eig.iter().chain(hist.iter()).enumerate() {
            out[(row, k)] = *v;
        }
        let norm = out.row(row).norm();
        out.row_mut(row).unscale_mut(norm);
    }
    FeatureMatrix::new(out)
}

fn normalized_eigenvalues<'a>(points: impl Iterator<Item = &'a Point> + Clone) -> [f64; 3] {
    let n = points.clone().count() as f64;
    let mean = points.clone().fold(Point::zeros(), |a, p| a + p) / n;
    let cov = points.fold(Matrix3::zeros(), |a, p| {
        let d = p - mean;
        a + d * d.transpose()
    }) / n;
    let mut ev: Vec<f64> = SymmetricEigen::new(cov).eigenvalues.iter().map(|&e| e.max(0.0)).collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    let sum: f64 = ev.iter().sum();
    if sum <= 0.0 {
        return [1.0 / 3.0; 3];
    }
    [ev[0] / sum, ev[1] / sum, ev[2] / sum]
}

/// Spectral descriptors at two radii: fine points use `fine_radius` on their
/// own cloud, superpoints use `coarse_radius` on the fine cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralFeatures {
    pub fine_radius: f64,
    pub coarse_radius: f64,
}

impl FeatureProvider for SpectralFeatures {
    fn point_features(&self, cloud: &PointCloud, _side: Side) -> Result<FeatureMatrix> {
        spectral_descriptor(cloud, self.fine_radius, SPECTRAL_BINS)
    }

    fn superpoint_features(&self, sp: &Superpoints, cloud: &PointCloud, _fine: &FeatureMatrix, _side: Side) -> Result<FeatureMatrix> {
        spectral_descriptor_with_support(sp.points(), cloud, self.coarse_radius, SPECTRAL_BINS)
    }
}

/// Descriptors supplied from outside, one matrix per side.
#[derive(Debug, Clone, PartialEq)]
pub struct ExternalFeatures {
    pub source: FeatureMatrix,
    pub target: FeatureMatrix,
}

impl FeatureProvider for ExternalFeatures {
    fn point_features(&self, cloud: &PointCloud, side: Side) -> Result<FeatureMatrix> {
        let f = match side {
            Side::Source => &self.source,
            Side::Target => &self.target,
        };
        if f.len() != cloud.len() {
            return Err(Error::shape("external feature rows", cloud.len(), f.len()));
        }
        Ok(f.clone())
    }
}

#[cfg(test)]
mod tests {
    use nalgebra::Vector3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::costs::feature_distance;
    use crate::geometry::apply_transform;
    use crate::pipeline::make_superpoints;

    fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> PointCloud {
        (0..n).map(|_| Point::new(rng.random(), rng.random(), rng.random())).collect()
    }

    fn random_tf(rng: &mut ChaCha8Rng) -> RigidTransform {
        let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        RigidTransform::from_axis_angle(&axis, rng.random_range(0.0..3.0), Vector3::new(rng.random(), rng.random(), rng.random()))
    }

    #[test]
    fn oracle_rows_agree_for_true_counterparts() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let src = random_cloud(&mut rng, 20);
        let gt = random_tf(&mut rng);
        let tgt = apply_transform(&src, &gt);
        let oracle = OracleFeatures::for_pair(gt, &tgt).unwrap();
        let fp = oracle.point_features(&src, Side::Source).unwrap();
        let fq = oracle.point_features(&tgt, Side::Target).unwrap();
        assert!((fp.as_matrix() - fq.as_matrix()).amax() < 1e-12);

        // an extra motion of the source folded into gt changes nothing
        let extra = random_tf(&mut rng);
        let moved = apply_transform(&src, &extra);
        let oracle2 = OracleFeatures::new(gt.compose(&extra.inverse()), tgt.centroid().unwrap(), 1.0).unwrap();
        let fm = oracle2.point_features(&moved, Side::Source).unwrap();
        assert!((fm.as_matrix() - fp.as_matrix()).amax() < 1e-12);
    }

    #[test]
    fn oracle_separates_distinct_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cloud = random_cloud(&mut rng, 200);
        let oracle = OracleFeatures::new(RigidTransform::identity(), Point::zeros(), 1.0).unwrap();
        let f = oracle.point_features(&cloud, Side::Target).unwrap();
        for i in 0..200 {
            for k in (i + 1)..200 {
                if (cloud.point(i) - cloud.point(k)).norm() >= 1e-3 {
                    assert!(feature_distance(&f.row(i), &f.row(k)).unwrap() > 0.0);
                }
            }
        }
    }

    #[test]
    fn planar_neighborhood_has_zero_third_eigenvalue() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let plane: PointCloud = (0..300).map(|_| Point::new(rng.random(), rng.random(), 0.5)).collect();
        let f = spectral_descriptor(&plane, 0.2, SPECTRAL_BINS).unwrap();
        for i in 0..plane.len() {
            let row = f.row(i);
            let eig_sum = row[0] + row[1] + row[2];
            assert!(row[2] / eig_sum < 1e-9);
        }
    }

    #[test]
    fn spectral_is_rigid_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cloud = random_cloud(&mut rng, 500);
        let tf = random_tf(&mut rng);
        let a = spectral_descriptor(&cloud, 0.15, SPECTRAL_BINS).unwrap();
        let b = spectral_descriptor(&apply_transform(&cloud, &tf), 0.15, SPECTRAL_BINS).unwrap();
        assert!((a.as_matrix() - b.as_matrix()).amax() < 1e-9);
    }

    #[test]
    fn isolated_point_uses_fallback() {
        let cloud = PointCloud::from_arrays(&[[0.0, 0.0, 0.0], [5.0, 0.0, 0.0]]).unwrap();
        let f = spectral_descriptor(&cloud, 1.0, SPECTRAL_BINS).unwrap();
        let third = 1.0 / 3.0f64;
        let n = (3.0 * third * third).sqrt();
        let row = f.row(0);
        for k in 0..3 {
            assert!((row[k] - third / n).abs() < 1e-15);
        }
        assert!(row[3..].iter().all(|&h| h == 0.0));
    }

    #[test]
    fn pooled_features_cover_every_superpoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cloud = random_cloud(&mut rng, 400);
        let sp = make_superpoints(&cloud, 0.3).unwrap();
        let f = spectral_descriptor(&cloud, 0.2, SPECTRAL_BINS).unwrap();
        let pooled = pooled_features(&sp, &cloud, &f).unwrap();
        assert_eq!(pooled.len(), sp.len());
    }

    #[test]
    fn external_rows_must_match_cloud() {
        let f = FeatureMatrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let ext = ExternalFeatures {
            source: f.clone(),
            target: f,
        };
        let two = PointCloud::from_arrays(&[[0.0; 3], [1.0; 3]]).unwrap();
        assert!(ext.point_features(&two, Side::Source).is_err());
    }
}
