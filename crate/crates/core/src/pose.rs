//! Rigid transform estimation from correspondences.

use nalgebra::{Matrix3, SymmetricEigen};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Point, PointCloud, RigidTransform};
use crate::pipeline::CorrespondenceSet;

/// Smallest admissible ratio between the second and first principal
/// variance of the weighted source points.
pub const COLLINEARITY_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RansacConfig {
    pub max_iters: usize,
    pub inlier_threshold: f64,
    pub confidence: f64,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            max_iters: 50_000,
            inlier_threshold: 0.05,
            confidence: 0.999,
            seed: 0,
        }
    }
}

impl RansacConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::Config("ransac max_iters must be at least 1".into()));
        }
        if !(self.inlier_threshold > 0.0 && self.inlier_threshold.is_finite()) {
            return Err(Error::Config(format!("ransac inlier_threshold must be positive, got {}", self.inlier_threshold)));
        }
        if !(self.confidence > 0.0 && self.confidence < 1.0) {
            return Err(Error::Config(format!("ransac confidence must lie in (0, 1), got {}", self.confidence)));
        }
        Ok(())
    }
}

/// Weighted least-squares rigid fit of `src[k] -> tgt[k]`.
pub fn procrustes_points(src: &[Point], tgt: &[Point], weights: &[f64]) -> Result<RigidTransform> {
    if src.len() != tgt.len() || src.len() != weights.len() {
        return Err(Error::shape("procrustes inputs", src.len(), format!("{} targets, {} weights", tgt.len(), weights.len())));
    }
    if src.len() < 3 {
        return Err(Error::InsufficientPairs {
            needed: 3,
            got: src.len(),
        });
    }
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(Error::Domain("procrustes weights must be finite and nonnegative".into()));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::DegenerateGeometry("correspondence weights sum to zero".into()));
    }
    let mut p_bar = Point::zeros();
    let mut q_bar = Point::zeros();
    for ((p, q), w) in src.iter().zip(tgt).zip(weights) {
        p_bar += p * *w;
        q_bar += q * *w;
    }
    p_bar /= total;
    q_bar /= total;

    let mut cross = Matrix3::zeros();
    let mut scatter = Matrix3::zeros();
    for ((p, q), w) in src.iter().zip(tgt).zip(weights) {
        let dp = p - p_bar;
        cross += dp * (q - q_bar).transpose() * *w;
        scatter += dp * dp.transpose() * *w;
    }
    let mut spread: Vec<f64> = SymmetricEigen::new(scatter).eigenvalues.iter().copied().collect();
    spread.sort_by(|a, b| b.total_cmp(a));
    if !(spread[0] > 0.0) || spread[1] <= COLLINEARITY_TOLERANCE * spread[0] {
        return Err(Error::DegenerateGeometry("weighted source points are collinear".into()));
    }

    let svd = cross.svd(true, true);
    let u = svd.u.ok_or_else(|| Error::DegenerateGeometry("SVD failed".into()))?;
    let v = svd.v_t.ok_or_else(|| Error::DegenerateGeometry("SVD failed".into()))?.transpose();
    // flip the axis of the smallest singular value when the fit would reflect
    let smallest = (0..3).min_by(|&a, &b| svd.singular_values[a].total_cmp(&svd.singular_values[b])).unwrap_or(2);
    let mut d = Matrix3::identity();
    d[(smallest, smallest)] = (v * u.transpose()).determinant().signum();
    let rotation = v * d * u.transpose();
    let translation = q_bar - rotation * p_bar;
    RigidTransform::new(rotation, translation)
}

/// Minimizer of `Σ w_k ‖R·p_k + t − q_k‖²` over the given correspondences.
pub fn weighted_procrustes(pairs: &CorrespondenceSet, src: &PointCloud, tgt: &PointCloud, weights: &[f64]) -> Result<RigidTransform> {
    if weights.len() != pairs.len() {
        return Err(Error::shape("procrustes weights", pairs.len(), weights.len()));
    }
    pairs.check_bounds(src.len(), tgt.len())?;
    let p: Vec<Point> = pairs.iter().map(|c| *src.point(c.source)).collect();
    let q: Vec<Point> = pairs.iter().map(|c| *tgt.point(c.target)).collect();
    procrustes_points(&p, &q, weights)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RansacResult {
    pub transform: RigidTransform,
    /// Per-pair inlier flags under `transform`.
    pub inliers: Vec<bool>,
    pub inlier_count: usize,
    /// Hypotheses drawn before stopping.
    pub iterations: usize,
    /// Set when no hypothesis explained a single pair.
    pub no_inliers: bool,
}

fn inlier_mask(tf: &RigidTransform, src: &[Point], tgt: &[Point], threshold: f64) -> Vec<bool> {
    src.iter().zip(tgt).map(|(p, q)| (tf.apply(p) - q).norm() < threshold).collect()
}

fn iterations_needed(inlier_ratio: f64, confidence: f64) -> f64 {
    let all_good = inlier_ratio.powi(3);
    if all_good >= 1.0 {
        return 1.0;
    }
    if all_good <= 0.0 {
        return f64::INFINITY;
    }
    (1.0 - confidence).ln() / (1.0 - all_good).ln()
}

/// Three-point RANSAC with a final refit on the inliers of the best hypothesis.
pub fn ransac_register(pairs: &CorrespondenceSet, src: &PointCloud, tgt: &PointCloud, cfg: &RansacConfig) -> Result<RansacResult> {
    cfg.validate()?;
    pairs.check_bounds(src.len(), tgt.len())?;
    let n = pairs.len();
    if n < 3 {
        return Err(Error::InsufficientPairs { needed: 3, got: n });
    }
    let p: Vec<Point> = pairs.iter().map(|c| *src.point(c.source)).collect();
    let q: Vec<Point> = pairs.iter().map(|c| *tgt.point(c.target)).collect();
    let unit = [1.0; 3];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<(RigidTransform, usize)> = None;
    let mut iterations = 0;
    while iterations < cfg.max_iters {
        iterations += 1;
        let idx = sample(&mut rng, n, 3);
        let sp: Vec<Point> = idx.iter().map(|k| p[k]).collect();
        let sq: Vec<Point> = idx.iter().map(|k| q[k]).collect();
        let Ok(tf) = procrustes_points(&sp, &sq, &unit) else {
            continue;
        };
        let count = inlier_mask(&tf, &p, &q, cfg.inlier_threshold).iter().filter(|&&b| b).count();
        if best.as_ref().is_none_or(|(_, c)| count > *c) {
            best = Some((tf, count));
            let needed = iterations_needed(count as f64 / n as f64, cfg.confidence);
            if (iterations as f64) >= needed {
                break;
            }
        }
    }
    let (candidate, count) = best.ok_or_else(|| Error::DegenerateGeometry("every RANSAC sample was collinear".into()))?;
    if count == 0 {
        return Ok(RansacResult {
            transform: candidate,
            inliers: vec![false; n],
            inlier_count: 0,
            iterations,
            no_inliers: true,
        });
    }
    let mask = inlier_mask(&candidate, &p, &q, cfg.inlier_threshold);
    let (ip, iq): (Vec<Point>, Vec<Point>) = mask.iter().zip(p.iter().zip(&q)).filter(|(m, _)| **m).map(|(_, (a, b))| (*a, *b)).unzip();
    let mut transform = candidate;
    let mut inliers = mask;
    if ip.len() >= 3 {
        if let Ok(refit) = procrustes_points(&ip, &iq, &vec![1.0; ip.len()]) {
            let refit_mask = inlier_mask(&refit, &p, &q, cfg.inlier_threshold);
            if refit_mask.iter().filter(|&&b| b).count() >= count {
                transform = refit;
                inliers = refit_mask;
            }
        }
    }
    let inlier_count = inliers.iter().filter(|&&b| b).count();
    Ok(RansacResult {
        transform,
        inliers,
        inlier_count,
        iterations,
        no_inliers: false,
    })
}

#[cfg(test)]
mod tests {
    use nalgebra::Vector3;
    use rand::Rng;

    use super::*;
    use crate::geometry::apply_transform;

    fn random_tf(rng: &mut ChaCha8Rng) -> RigidTransform {
        let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let t = Vector3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
        RigidTransform::from_axis_angle(&axis, rng.random_range(0.0..std::f64::consts::PI), t)
    }

    fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> PointCloud {
        (0..n)
            .map(|_| Point::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect()
    }

    fn tf_close(a: &RigidTransform, b: &RigidTransform, tol: f64) -> bool {
        (a.rotation() - b.rotation()).norm() < tol && (a.translation() - b.translation()).norm() < tol
    }

    fn objective(tf: &RigidTransform, p: &[Point], q: &[Point], w: &[f64]) -> f64 {
        p.iter().zip(q).zip(w).map(|((a, b), w)| w * (tf.apply(a) - b).norm_squared()).sum()
    }

    #[test]
    fn exact_recovery_on_four_points() {
        let src = PointCloud::from_arrays(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]).unwrap();
        let gt = RigidTransform::from_axis_angle(&Vector3::new(1.0, 2.0, 3.0), 0.8, Vector3::new(0.5, -1.0, 2.0));
        let tgt = apply_transform(&src, &gt);
        let pairs = CorrespondenceSet::from_index_pairs(&[(0, 0), (1, 1), (2, 2), (3, 3)]);
        let est = weighted_procrustes(&pairs, &src, &tgt, &[1.0; 4]).unwrap();
        assert!(tf_close(&est, &gt, 1e-9));
    }

    #[test]
    fn zero_weight_pairs_are_inert() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let src = random_cloud(&mut rng, 8);
        let gt = random_tf(&mut rng);
        let mut tgt: Vec<Point> = apply_transform(&src, &gt).into_points();
        for q in tgt.iter_mut().skip(3) {
            *q += Vector3::new(5.0, -3.0, 1.0);
        }
        let tgt = PointCloud::new(tgt).unwrap();
        let pairs = CorrespondenceSet::from_index_pairs(&(0..8).map(|i| (i, i)).collect::<Vec<_>>());
        let mut w = vec![0.0; 8];
        w[..3].fill(2.5);
        let est = weighted_procrustes(&pairs, &src, &tgt, &w).unwrap();
        assert!(tf_close(&est, &gt, 1e-9));
    }

    #[test]
    fn noisy_fit_beats_random_perturbations() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let src = random_cloud(&mut rng, 30);
        let gt = random_tf(&mut rng);
        let tgt: Vec<Point> = src
            .iter()
            .map(|p| gt.apply(p) + Vector3::new(rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05)))
            .collect();
        let w: Vec<f64> = (0..30).map(|_| rng.random_range(0.1..2.0)).collect();
        let est = procrustes_points(src.points(), &tgt, &w).unwrap();
        let best = objective(&est, src.points(), &tgt, &w);
        for _ in 0..1000 {
            let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let delta = RigidTransform::from_axis_angle(&axis, rng.random_range(-0.05..0.05), axis * rng.random_range(-0.05..0.05));
            assert!(objective(&delta.compose(&est), src.points(), &tgt, &w) >= best - 1e-12);
        }
    }

    #[test]
    fn reflection_prone_input_yields_rotation() {
        // mirrored target: the unconstrained optimum is a reflection
        let src = PointCloud::from_arrays(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [1.0, 1.0, 1.0]]).unwrap();
        let tgt: PointCloud = src.iter().map(|p| Point::new(-p.x, p.y, p.z)).collect();
        let pairs = CorrespondenceSet::from_index_pairs(&[(0, 0), (1, 1), (2, 2), (3, 3)]);
        let est = weighted_procrustes(&pairs, &src, &tgt, &[1.0; 4]).unwrap();
        assert!((est.rotation().determinant() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn degenerate_inputs() {
        let line = PointCloud::from_arrays(&[[0.0, 0.0, 0.0], [1.0, 1.0, 1.0], [2.0, 2.0, 2.0], [3.0, 3.0, 3.0]]).unwrap();
        let pairs = CorrespondenceSet::from_index_pairs(&[(0, 0), (1, 1), (2, 2), (3, 3)]);
        assert!(matches!(weighted_procrustes(&pairs, &line, &line, &[1.0; 4]), Err(Error::DegenerateGeometry(_))));
        let two = CorrespondenceSet::from_index_pairs(&[(0, 0), (1, 1)]);
        assert!(matches!(
            weighted_procrustes(&two, &line, &line, &[1.0; 2]),
            Err(Error::InsufficientPairs { needed: 3, got: 2 })
        ));
        assert!(weighted_procrustes(&pairs, &line, &line, &[0.0; 4]).is_err());
    }

    #[test]
    fn equivariance_and_weight_scaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let src = random_cloud(&mut rng, 12);
            let tgt = random_cloud(&mut rng, 12);
            let w: Vec<f64> = (0..12).map(|_| rng.random_range(0.1..1.0)).collect();
            let est = procrustes_points(src.points(), tgt.points(), &w).unwrap();
            let a = random_tf(&mut rng);
            let moved = procrustes_points(apply_transform(&src, &a).points(), apply_transform(&tgt, &a).points(), &w).unwrap();
            let conj = a.compose(&est).compose(&a.inverse());
            assert!(tf_close(&moved, &conj, 1e-9));
            let scaled: Vec<f64> = w.iter().map(|x| x * 37.5).collect();
            let est2 = procrustes_points(src.points(), tgt.points(), &scaled).unwrap();
            assert!(tf_close(&est, &est2, 1e-12));
        }
    }

    #[test]
    fn ransac_all_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let src = random_cloud(&mut rng, 40);
        let gt = random_tf(&mut rng);
        let tgt = apply_transform(&src, &gt);
        let pairs = CorrespondenceSet::from_index_pairs(&(0..40).map(|i| (i, i)).collect::<Vec<_>>());
        let res = ransac_register(&pairs, &src, &tgt, &RansacConfig::default()).unwrap();
        assert!(res.inliers.iter().all(|&b| b));
        assert!(tf_close(&res.transform, &gt, 1e-9));
    }

    #[test]
    fn ransac_with_outliers_matches_inlier_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let src = random_cloud(&mut rng, 100);
        let gt = random_tf(&mut rng);
        let mut tgt = apply_transform(&src, &gt).into_points();
        for q in tgt.iter_mut().skip(70) {
            *q = Point::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
        }
        let tgt = PointCloud::new(tgt).unwrap();
        let pairs = CorrespondenceSet::from_index_pairs(&(0..100).map(|i| (i, i)).collect::<Vec<_>>());
        let cfg = RansacConfig {
            seed: 9,
            ..RansacConfig::default()
        };
        let res = ransac_register(&pairs, &src, &tgt, &cfg).unwrap();
        let inlier_pairs = CorrespondenceSet::from_index_pairs(&(0..70).map(|i| (i, i)).collect::<Vec<_>>());
        let oracle = weighted_procrustes(&inlier_pairs, &src, &tgt, &[1.0; 70]).unwrap();
        assert!(tf_close(&res.transform, &oracle, 1e-3));
        assert_eq!(res, ransac_register(&pairs, &src, &tgt, &cfg).unwrap());
    }

    #[test]
    fn ransac_rejects_bad_config_and_few_pairs() {
        let src = PointCloud::from_arrays(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]).unwrap();
        let pairs = CorrespondenceSet::from_index_pairs(&[(0, 0), (1, 1)]);
        assert!(matches!(
            ransac_register(&pairs, &src, &src, &RansacConfig::default()),
            Err(Error::InsufficientPairs { .. })
        ));
        let bad = RansacConfig {
            confidence: 1.0,
            ..RansacConfig::default()
        };
        assert!(ransac_register(&pairs, &src, &src, &bad).is_err());
    }

    #[test]
    fn ransac_without_inliers_sets_flag() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let src = random_cloud(&mut rng, 3);
        let tgt: PointCloud = src.iter().map(|p| p * 10.0).collect();
        let pairs = CorrespondenceSet::from_index_pairs(&[(0, 0), (1, 1), (2, 2)]);
        let cfg = RansacConfig {
            max_iters: 5,
            inlier_threshold: 1e-6,
            ..RansacConfig::default()
        };
        let res = ransac_register(&pairs, &src, &tgt, &cfg).unwrap();
        assert!(res.no_inliers);
        assert!(res.inliers.iter().all(|&b| !b));
    }
}
