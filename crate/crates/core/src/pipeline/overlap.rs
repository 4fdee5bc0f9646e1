use super::Superpoints;
use crate::error::{Error, Result};
use crate::geometry::{NeighborIndex, PointCloud, RigidTransform};
use crate::otsolve::OverlapScores;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Level {
    Coarse,
    Fine,
}

/// Per-point flag: does `gt(p)` have a point of `cloud_q` closer than `r_o`?
pub fn overlap_flags(cloud_p: &PointCloud, cloud_q: &PointCloud, gt: &RigidTransform, r_o: f64) -> Result<Vec<bool>> {
    if !(r_o > 0.0 && r_o.is_finite()) {
        return Err(Error::Domain(format!("overlap radius must be positive, got {r_o}")));
    }
    cloud_q.require_non_empty("overlap target cloud")?;
    let index = NeighborIndex::for_cloud(cloud_q, r_o);
    Ok(cloud_p
        .iter()
        .map(|p| index.nearest(&gt.apply(p)).is_some_and(|(_, d)| d < r_o))
        .collect())
}

/// Ground-truth overlap of `cloud_p` against `cloud_q`.
///
/// Fine level: 1 when the mapped point has a target neighbor within `r_o`,
/// else 0. Coarse level: the fraction of each superpoint's group with that
/// property (0 for an empty group).
pub fn gt_overlap_scores(
    cloud_p: &PointCloud,
    cloud_q: &PointCloud,
    gt: &RigidTransform,
    r_o: f64,
    level: Level,
    superpoints: Option<&Superpoints>,
) -> Result<OverlapScores> {
    let flags = overlap_flags(cloud_p, cloud_q, gt, r_o)?;
    match level {
        Level::Fine => OverlapScores::new(flags.iter().map(|&f| if f { 1.0 } else { 0.0 }).collect()),
        Level::Coarse => {
            let sp = superpoints.ok_or_else(|| Error::Config("coarse overlap scores need superpoints".into()))?;
            coarse_fractions(sp, &flags)
        }
    }
}

fn coarse_fractions(sp: &Superpoints, flags: &[bool]) -> Result<OverlapScores> {
    OverlapScores::new(
        sp.groups()
            .iter()
            .map(|g| {
                if g.is_empty() {
                    0.0
                } else {
                    g.iter().filter(|&&i| flags[i]).count() as f64 / g.len() as f64
                }
            })
            .collect(),
    )
}

/// Overlap scores for both clouds of a pair, at both levels.
pub trait OverlapProvider: Send + Sync {
    fn fine_scores(&self, src: &PointCloud, tgt: &PointCloud) -> Result<(OverlapScores, OverlapScores)>;

    fn coarse_scores(&self, src: &PointCloud, tgt: &PointCloud, sp_src: &Superpoints, sp_tgt: &Superpoints) -> Result<(OverlapScores, OverlapScores)>;
}

/// The same score everywhere; 1.0 unless configured otherwise.
#[derive(Debug, Clone, PartialEq)]
pub struct UniformOverlap {
    pub value: f64,
}

impl Default for UniformOverlap {
    fn default() -> Self {
        Self { value: 1.0 }
    }
}

impl OverlapProvider for UniformOverlap {
    fn fine_scores(&self, src: &PointCloud, tgt: &PointCloud) -> Result<(OverlapScores, OverlapScores)> {
        Ok((OverlapScores::uniform(src.len(), self.value)?, OverlapScores::uniform(tgt.len(), self.value)?))
    }

    fn coarse_scores(&self, _src: &PointCloud, _tgt: &PointCloud, sp_src: &Superpoints, sp_tgt: &Superpoints) -> Result<(OverlapScores, OverlapScores)> {
        Ok((OverlapScores::uniform(sp_src.len(), self.value)?, OverlapScores::uniform(sp_tgt.len(), self.value)?))
    }
}

/// Labels derived from the true transform (evaluation only).
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthOverlap {
    pub gt: RigidTransform,
    pub radius: f64,
}

impl GroundTruthOverlap {
    fn flags(&self, src: &PointCloud, tgt: &PointCloud) -> Result<(Vec<bool>, Vec<bool>)> {
        Ok((
            overlap_flags(src, tgt, &self.gt, self.radius)?,
            overlap_flags(tgt, src, &self.gt.inverse(), self.radius)?,
        ))
    }
}

impl OverlapProvider for GroundTruthOverlap {
    fn fine_scores(&self, src: &PointCloud, tgt: &PointCloud) -> Result<(OverlapScores, OverlapScores)> {
        let (fp, fq) = self.flags(src, tgt)?;
        let binary = |f: Vec<bool>| OverlapScores::new(f.into_iter().map(|b| if b { 1.0 } else { 0.0 }).collect());
        Ok((binary(fp)?, binary(fq)?))
    }

    fn coarse_scores(&self, src: &PointCloud, tgt: &PointCloud, sp_src: &Superpoints, sp_tgt: &Superpoints) -> Result<(OverlapScores, OverlapScores)> {
        let (fp, fq) = self.flags(src, tgt)?;
        Ok((coarse_fractions(sp_src, &fp)?, coarse_fractions(sp_tgt, &fq)?))
    }
}

#[cfg(test)]
mod tests {
    use nalgebra::Vector3;

    use super::*;
    use crate::pipeline::{group_by_nearest, make_superpoints};

    #[test]
    fn identical_clouds_fully_overlap() {
        let cloud = PointCloud::from_arrays(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]).unwrap();
        let fine = gt_overlap_scores(&cloud, &cloud, &RigidTransform::identity(), 0.1, Level::Fine, None).unwrap();
        assert!(fine.as_slice().iter().all(|&s| s == 1.0));
        let sp = make_superpoints(&cloud, 0.5).unwrap();
        let coarse = gt_overlap_scores(&cloud, &cloud, &RigidTransform::identity(), 0.1, Level::Coarse, Some(&sp)).unwrap();
        assert!(coarse.as_slice().iter().all(|&s| s == 1.0));
    }

    #[test]
    fn distant_patch_scores_zero() {
        let src = PointCloud::from_arrays(&[[0.0, 0.0, 0.0], [0.1, 0.0, 0.0]]).unwrap();
        let tgt = PointCloud::from_arrays(&[[5.0, 0.0, 0.0]]).unwrap();
        let sp = make_superpoints(&src, 1.0).unwrap();
        let s = gt_overlap_scores(&src, &tgt, &RigidTransform::identity(), 0.5, Level::Coarse, Some(&sp)).unwrap();
        assert_eq!(s.as_slice(), &[0.0]);
    }

    #[test]
    fn half_covered_patch_scores_half() {
        let src = PointCloud::from_arrays(&[[0.0, 0.0, 0.0], [0.1, 0.0, 0.0], [0.2, 0.0, 0.0], [0.3, 0.0, 0.0]]).unwrap();
        // target covers the first two source points after a unit shift
        let gt = RigidTransform::from_translation(Vector3::new(1.0, 0.0, 0.0));
        let tgt = PointCloud::from_arrays(&[[1.0, 0.0, 0.0], [1.1, 0.0, 0.0]]).unwrap();
        let sp = group_by_nearest(PointCloud::from_arrays(&[[0.15, 0.0, 0.0]]).unwrap(), &src, 1.0);
        let s = gt_overlap_scores(&src, &tgt, &gt, 0.05, Level::Coarse, Some(&sp)).unwrap();
        let hand_count = src.iter().filter(|p| tgt.iter().any(|q| (gt.apply(p) - q).norm() < 0.05)).count();
        assert_eq!(hand_count, 2);
        assert_eq!(s.as_slice(), &[0.5]);
    }

    #[test]
    fn coarse_level_needs_superpoints() {
        let c = PointCloud::from_arrays(&[[0.0; 3]]).unwrap();
        assert!(gt_overlap_scores(&c, &c, &RigidTransform::identity(), 0.1, Level::Coarse, None).is_err());
    }

    #[test]
    fn provider_scores_both_sides() {
        let src = PointCloud::from_arrays(&[[0.0, 0.0, 0.0], [3.0, 0.0, 0.0]]).unwrap();
        let tgt = PointCloud::from_arrays(&[[0.0, 0.0, 0.0], [0.0, 3.0, 0.0], [0.0, 0.0, 3.0]]).unwrap();
        let p = GroundTruthOverlap {
            gt: RigidTransform::identity(),
            radius: 0.1,
        };
        let (a, b) = p.fine_scores(&src, &tgt).unwrap();
        assert_eq!(a.as_slice(), &[1.0, 0.0]);
        assert_eq!(b.as_slice(), &[1.0, 0.0, 0.0]);
    }
}
