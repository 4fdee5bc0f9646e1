//! Point clouds, rigid transforms, spatial queries and pose-error metrics.

mod index;
pub mod io;
mod voxel;

use nalgebra::{Matrix3, Matrix4, Rotation3, Unit, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use index::{nearest_neighbor, NeighborIndex, BRUTE_FORCE_LIMIT};
pub use voxel::{voxel_downsample, VoxelGrid};

pub type Point = Vector3<f64>;

/// Tolerance on `RᵀR = I` and `det R = 1` accepted by [`RigidTransform::new`].
pub const ROTATION_TOLERANCE: f64 = 1e-9;

/// An ordered set of 3D points; point ids are their 0-based positions.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    points: Vec<Point>,
}

impl PointCloud {
    /// Builds a cloud, rejecting non-finite coordinates. Empty clouds are
    /// allowed here; pipeline entry points reject them.
    pub fn new(points: Vec<Point>) -> Result<Self> {
        if points.iter().any(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(Error::NonFinite("point cloud coordinates"));
        }
        Ok(Self { points })
    }

    pub fn from_arrays(points: &[[f64; 3]]) -> Result<Self> {
        Self::new(points.iter().map(|p| Point::new(p[0], p[1], p[2])).collect())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn point(&self, i: usize) -> &Point {
        &self.points[i]
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Point> {
        self.points.iter()
    }

    pub fn into_points(self) -> Vec<Point> {
        self.points
    }

    /// Sub-cloud made of the given indices, in the given order.
    pub fn select(&self, indices: &[usize]) -> PointCloud {
        PointCloud {
            points: indices.iter().map(|&i| self.points[i]).collect(),
        }
    }

    pub fn centroid(&self) -> Option<Point> {
        if self.points.is_empty() {
            return None;
        }
        let sum = self.points.iter().fold(Point::zeros(), |acc, p| acc + p);
        Some(sum / self.points.len() as f64)
    }

    /// Axis-aligned bounding box as `(min, max)`.
    pub fn bounds(&self) -> Option<(Point, Point)> {
        let first = *self.points.first()?;
        Some(self.points.iter().fold((first, first), |(lo, hi), p| {
            (lo.inf(p), hi.sup(p))
        }))
    }

    /// Length of the bounding-box diagonal.
    pub fn diameter(&self) -> f64 {
        self.bounds().map_or(0.0, |(lo, hi)| (hi - lo).norm())
    }

    pub(crate) fn require_non_empty(&self, what: &'static str) -> Result<()> {
        if self.points.is_empty() {
            Err(Error::EmptyInput(what))
        } else {
            Ok(())
        }
    }
}

impl FromIterator<Point> for PointCloud {
    /// Collects points without validation; callers must supply finite values.
    fn from_iter<I: IntoIterator<Item = Point>>(iter: I) -> Self {
        Self {
            points: iter.into_iter().collect(),
        }
    }
}

/// A proper rigid motion `x ↦ R·x + t` with `R ∈ SO(3)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TransformRepr", into = "TransformRepr")]
pub struct RigidTransform {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl RigidTransform {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        if !rotation.iter().chain(translation.iter()).all(|v| v.is_finite()) {
            return Err(Error::InvalidTransform("non-finite entries".into()));
        }
        let gram_err = (rotation.transpose() * rotation - Matrix3::identity()).amax();
        if gram_err > ROTATION_TOLERANCE {
            return Err(Error::InvalidTransform(format!(
                "rotation is not orthonormal (max |RᵀR - I| = {gram_err:e})"
            )));
        }
        let det = rotation.determinant();
        if (det - 1.0).abs() > ROTATION_TOLERANCE {
            return Err(Error::InvalidTransform(format!(
                "rotation determinant is {det}, expected +1"
            )));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation,
        }
    }

    /// Rotation of `angle` radians about `axis`, followed by `translation`.
    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64, translation: Vector3<f64>) -> Self {
        let rotation = if axis.norm() > 0.0 {
            Rotation3::from_axis_angle(&Unit::new_normalize(*axis), angle).into_inner()
        } else {
            Matrix3::identity()
        };
        Self {
            rotation,
            translation,
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn apply(&self, p: &Point) -> Point {
        self.rotation * p + self.translation
    }

    /// `self ∘ first`: applies `first`, then `self`.
    pub fn compose(&self, first: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * first.rotation,
            translation: self.rotation * first.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn from_homogeneous(m: &Matrix4<f64>) -> Result<Self> {
        let last = m.fixed_view::<1, 4>(3, 0);
        if (last[0].abs() + last[1].abs() + last[2].abs() + (last[3] - 1.0).abs()) > 1e-12 {
            return Err(Error::InvalidTransform(
                "homogeneous matrix last row must be 0 0 0 1".into(),
            ));
        }
        Self::new(
            m.fixed_view::<3, 3>(0, 0).into_owned(),
            m.fixed_view::<3, 1>(0, 3).into_owned(),
        )
    }
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

/// Serialized form: row-major 4×4 homogeneous matrix.
#[derive(Serialize, Deserialize)]
struct TransformRepr {
    matrix: [[f64; 4]; 4],
}

impl TryFrom<TransformRepr> for RigidTransform {
    type Error = Error;

    fn try_from(repr: TransformRepr) -> Result<Self> {
        let m = Matrix4::from_fn(|r, c| repr.matrix[r][c]);
        RigidTransform::from_homogeneous(&m)
    }
}

impl From<RigidTransform> for TransformRepr {
    fn from(tf: RigidTransform) -> Self {
        let m = tf.to_homogeneous();
        let mut matrix = [[0.0; 4]; 4];
        for (r, row) in matrix.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = m[(r, c)];
            }
        }
        TransformRepr { matrix }
    }
}

/// Maps every point through `tf`; point order and count are preserved.
pub fn apply_transform(cloud: &PointCloud, tf: &RigidTransform) -> PointCloud {
    cloud.iter().map(|p| tf.apply(p)).collect()
}

/// Relative rotation error in degrees and translation error in scene units.
pub fn pose_error(est: &RigidTransform, gt: &RigidTransform) -> (f64, f64) {
    let cos = ((est.rotation.transpose() * gt.rotation).trace() - 1.0) / 2.0;
    let rre = cos.clamp(-1.0, 1.0).acos().to_degrees();
    let rte = (est.translation - gt.translation).norm();
    (rre, rte)
}

/// Root-mean-square residual of `est` over source/target index pairs.
pub fn rmse_under_transform(
    src: &PointCloud,
    tgt: &PointCloud,
    pairs: &[(usize, usize)],
    est: &RigidTransform,
) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::EmptyInput("ground-truth pair list"));
    }
    let mut sum = 0.0;
    for &(i, j) in pairs {
        if i >= src.len() || j >= tgt.len() {
            return Err(Error::shape(
                "rmse pair index",
                format!("< ({}, {})", src.len(), tgt.len()),
                format!("({i}, {j})"),
            ));
        }
        sum += (est.apply(src.point(i)) - tgt.point(j)).norm_squared();
    }
    Ok((sum / pairs.len() as f64).sqrt())
}
