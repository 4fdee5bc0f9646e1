use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{PointCloud, RigidTransform};
use crate::pipeline::CorrespondenceSet;

/// Thresholds in scene units (degrees for rotation).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalThresholds {
    pub inlier_radius: f64,
    pub fmr_min_inlier_ratio: f64,
    pub rr_rmse: f64,
    pub rr_rre: f64,
    pub rr_rte: f64,
}

impl Default for EvalThresholds {
    fn default() -> Self {
        Self {
            inlier_radius: 0.1,
            fmr_min_inlier_ratio: 0.05,
            rr_rmse: 0.2,
            rr_rre: 5.0,
            rr_rte: 2.0,
        }
    }
}

impl EvalThresholds {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("inlier_radius", self.inlier_radius),
            ("fmr_min_inlier_ratio", self.fmr_min_inlier_ratio),
            ("rr_rmse", self.rr_rmse),
            ("rr_rre", self.rr_rre),
            ("rr_rte", self.rr_rte),
        ];
        match fields.iter().find(|(_, v)| !(*v > 0.0 && v.is_finite())) {
            Some((name, v)) => Err(Error::Config(format!("threshold {name} must be positive, got {v}"))),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RrMode {
    Rmse,
    RreRte,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InlierRatio {
    pub value: f64,
    /// Set when there were no pairs to score; `value` is then 0.
    pub empty: bool,
}

/// Fraction of pairs whose residual `‖gt(p_i) − q_j‖` is below `radius`.
pub fn inlier_ratio(pairs: &CorrespondenceSet, src: &PointCloud, tgt: &PointCloud, gt: &RigidTransform, radius: f64) -> Result<InlierRatio> {
    pairs.check_bounds(src.len(), tgt.len())?;
    if pairs.is_empty() {
        return Ok(InlierRatio { value: 0.0, empty: true });
    }
    let hits = pairs
        .iter()
        .filter(|c| (gt.apply(src.point(c.source)) - tgt.point(c.target)).norm() < radius)
        .count();
    Ok(InlierRatio {
        value: hits as f64 / pairs.len() as f64,
        empty: false,
    })
}

/// Fraction of pairs whose inlier ratio is strictly above `threshold`.
pub fn feature_matching_recall(inlier_ratios: &[f64], threshold: f64) -> Result<f64> {
    if inlier_ratios.is_empty() {
        return Err(Error::EmptyInput("inlier ratio list"));
    }
    let hits = inlier_ratios.iter().filter(|&&ir| ir > threshold).count();
    Ok(hits as f64 / inlier_ratios.len() as f64)
}

/// The fields of a pair record that registration recall reads.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PoseOutcome {
    pub rmse: Option<f64>,
    pub rre: Option<f64>,
    pub rte: Option<f64>,
    /// Pairs that failed upstream count as not recalled.
    pub failed: bool,
}

pub fn is_recalled(outcome: &PoseOutcome, thresholds: &EvalThresholds, mode: RrMode) -> Result<bool> {
    if outcome.failed {
        return Ok(false);
    }
    let missing = |field: &str| Error::ReportSchema(format!("{field} missing from a non-failed pair record"));
    Ok(match mode {
        RrMode::Rmse => outcome.rmse.ok_or_else(|| missing("rmse"))? < thresholds.rr_rmse,
        RrMode::RreRte => {
            let rre = outcome.rre.ok_or_else(|| missing("rre"))?;
            let rte = outcome.rte.ok_or_else(|| missing("rte"))?;
            rre < thresholds.rr_rre && rte < thresholds.rr_rte
        }
    })
}

pub fn registration_recall(outcomes: &[PoseOutcome], thresholds: &EvalThresholds, mode: RrMode) -> Result<f64> {
    if outcomes.is_empty() {
        return Err(Error::EmptyInput("pair record list"));
    }
    let mut hits = 0usize;
    for o in outcomes {
        if is_recalled(o, thresholds, mode)? {
            hits += 1;
        }
    }
    Ok(hits as f64 / outcomes.len() as f64)
}

#[cfg(test)]
mod tests {
    use nalgebra::Vector3;

    use super::*;
    use crate::pipeline::Correspondence;

    fn pose(rmse: f64, rre: f64, rte: f64) -> PoseOutcome {
        PoseOutcome {
            rmse: Some(rmse),
            rre: Some(rre),
            rte: Some(rte),
            failed: false,
        }
    }

    #[test]
    fn inlier_ratio_examples() {
        let src = PointCloud::from_arrays(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]).unwrap();
        let gt = RigidTransform::from_translation(Vector3::new(0.0, 0.0, 5.0));
        let tgt: PointCloud = src.iter().map(|p| gt.apply(p)).collect();
        let exact = CorrespondenceSet::from_index_pairs(&[(0, 0), (1, 1), (2, 2), (3, 3)]);
        assert_eq!(inlier_ratio(&exact, &src, &tgt, &gt, 0.1).unwrap().value, 1.0);
        let wrong = CorrespondenceSet::from_index_pairs(&[(0, 1), (1, 2)]);
        assert_eq!(inlier_ratio(&wrong, &src, &tgt, &gt, 0.1).unwrap().value, 0.0);
        // three exact pairs and one off by a unit distance
        let mixed = CorrespondenceSet::from_index_pairs(&[(0, 0), (1, 1), (2, 2), (3, 0)]);
        let hand = mixed
            .iter()
            .filter(|c| (gt.apply(src.point(c.source)) - tgt.point(c.target)).norm() < 0.1)
            .count();
        assert_eq!(hand, 3);
        assert_eq!(inlier_ratio(&mixed, &src, &tgt, &gt, 0.1).unwrap().value, 0.75);
        let none = inlier_ratio(&CorrespondenceSet::default(), &src, &tgt, &gt, 0.1).unwrap();
        assert_eq!((none.value, none.empty), (0.0, true));
        let out_of_range = CorrespondenceSet::new(vec![Correspondence::new(9, 0, 1.0)]).unwrap();
        assert!(inlier_ratio(&out_of_range, &src, &tgt, &gt, 0.1).is_err());
    }

    #[test]
    fn feature_matching_recall_examples() {
        assert_eq!(feature_matching_recall(&[1.0, 1.0, 1.0], 0.05).unwrap(), 1.0);
        assert_eq!(feature_matching_recall(&[0.04, 0.06], 0.05).unwrap(), 0.5);
        assert_eq!(feature_matching_recall(&[0.01, 0.3], 0.0).unwrap(), 1.0);
        assert!(matches!(feature_matching_recall(&[], 0.05), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn registration_recall_examples() {
        let th = EvalThresholds::default();
        let perfect = [pose(0.0, 0.0, 0.0); 3];
        assert_eq!(registration_recall(&perfect, &th, RrMode::Rmse).unwrap(), 1.0);
        assert_eq!(registration_recall(&perfect, &th, RrMode::RreRte).unwrap(), 1.0);
        let one = [pose(0.0, 10.0, 1.0)];
        assert_eq!(registration_recall(&one, &th, RrMode::RreRte).unwrap(), 0.0);
        let loose = EvalThresholds {
            rr_rre: 15.0,
            rr_rte: 6.0,
            ..th.clone()
        };
        assert_eq!(registration_recall(&one, &loose, RrMode::RreRte).unwrap(), 1.0);
        let two = [pose(0.1, 0.0, 0.0), pose(0.3, 0.0, 0.0)];
        assert_eq!(registration_recall(&two, &th, RrMode::Rmse).unwrap(), 0.5);
    }

    #[test]
    fn failed_pairs_count_against_recall() {
        let th = EvalThresholds::default();
        let failed = PoseOutcome {
            failed: true,
            ..PoseOutcome::default()
        };
        assert_eq!(registration_recall(&[pose(0.0, 0.0, 0.0), failed], &th, RrMode::Rmse).unwrap(), 0.5);
    }

    #[test]
    fn missing_fields_are_a_schema_error() {
        let th = EvalThresholds::default();
        let no_rmse = PoseOutcome {
            rmse: None,
            ..pose(0.0, 0.0, 0.0)
        };
        assert!(matches!(registration_recall(&[no_rmse], &th, RrMode::Rmse), Err(Error::ReportSchema(_))));
        assert!(registration_recall(&[no_rmse], &th, RrMode::RreRte).is_ok());
    }

    #[test]
    fn thresholds_must_be_positive() {
        assert!(EvalThresholds::default().validate().is_ok());
        let bad = EvalThresholds {
            rr_rte: 0.0,
            ..EvalThresholds::default()
        };
        assert!(bad.validate().is_err());
    }
}
