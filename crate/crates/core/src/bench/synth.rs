use std::path::Path;

use nalgebra::Vector3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{StandardNormal, UnitSphere};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::io::{parse_rows, write_point_cloud, write_text, write_transform};
use crate::geometry::{NeighborIndex, Point, PointCloud, RigidTransform};

/// Crop attempts before generation gives up.
pub const MAX_CROP_ATTEMPTS: usize = 100;
/// Allowed gap between measured and requested overlap.
pub const OVERLAP_TOLERANCE: f64 = 0.05;

const BISECTION_STEPS: usize = 30;

const BUMPS_PER_FACE: usize = 10;
/// Bump amplitude relative to the shorter side of a face.
const BUMP_HEIGHT: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseShape {
    /// One box whose faces carry random Gaussian bumps.
    Box,
    /// Floor, two walls and a handful of boxes and spheres.
    Room,
    /// Two identical cubes on an asymmetric floor slab.
    TwinCubes,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub base: BaseShape,
    pub n_points: usize,
    pub overlap_fraction: f64,
    pub noise_sigma: f64,
    pub outlier_fraction: f64,
    pub density_skew: f64,
    /// Rotation angle in degrees about a random axis.
    pub rotation_magnitude: f64,
    pub translation_magnitude: f64,
    /// Radius for overlap measurement and ground-truth pairs.
    pub overlap_radius: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            base: BaseShape::Box,
            n_points: 5000,
            overlap_fraction: 0.5,
            noise_sigma: 0.0,
            outlier_fraction: 0.0,
            density_skew: 1.0,
            rotation_magnitude: 45.0,
            translation_magnitude: 0.5,
            overlap_radius: 0.0375,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.n_points < 3 {
            return bad(format!("n_points must be at least 3, got {}", self.n_points));
        }
        if !(self.overlap_fraction > 0.0 && self.overlap_fraction <= 1.0) {
            return bad(format!("overlap_fraction must lie in (0, 1], got {}", self.overlap_fraction));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma must be finite and non-negative, got {}", self.noise_sigma));
        }
        if !(0.0..1.0).contains(&self.outlier_fraction) {
            return bad(format!("outlier_fraction must lie in [0, 1), got {}", self.outlier_fraction));
        }
        if !(self.density_skew >= 1.0 && self.density_skew.is_finite()) {
            return bad(format!("density_skew must be at least 1, got {}", self.density_skew));
        }
        if !(0.0..=180.0).contains(&self.rotation_magnitude) {
            return bad(format!("rotation_magnitude must lie in [0, 180] degrees, got {}", self.rotation_magnitude));
        }
        if !(self.translation_magnitude >= 0.0 && self.translation_magnitude.is_finite()) {
            return bad(format!("translation_magnitude must be finite and non-negative, got {}", self.translation_magnitude));
        }
        if !(self.overlap_radius > 0.0 && self.overlap_radius.is_finite()) {
            return bad(format!("overlap_radius must be positive, got {}", self.overlap_radius));
        }
        Ok(())
    }
}

/// A generated registration problem: `gt` maps `source` onto `target`.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthPair {
    pub source: PointCloud,
    pub target: PointCloud,
    pub gt: RigidTransform,
    /// Mutual nearest neighbors within the overlap radius under `gt`.
    pub gt_pairs: Vec<(usize, usize)>,
    /// Fraction of source points with a target neighbor within the overlap radius.
    pub measured_overlap: f64,
}

impl SynthPair {
    /// Writes `source.txt`, `target.txt`, `gt.txt` and `gt_pairs.tsv` into `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|source| Error::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        write_point_cloud(&dir.join("source.txt"), &self.source)?;
        write_point_cloud(&dir.join("target.txt"), &self.target)?;
        write_transform(&dir.join("gt.txt"), &self.gt)?;
        write_text(&dir.join("gt_pairs.tsv"), &format_index_pairs(&self.gt_pairs))
    }
}

/// One `source<TAB>target` line per pair under a `#` header line.
pub fn format_index_pairs(pairs: &[(usize, usize)]) -> String {
    let mut out = String::from("# source\ttarget\n");
    for (i, j) in pairs {
        out.push_str(&format!("{i}\t{j}\n"));
    }
    out
}

enum Surface {
    /// `origin + u·e1 + v·e2` for `u, v ∈ [0, 1]`, displaced along the
    /// normal by a sum of Gaussian bumps.
    Patch {
        origin: Point,
        e1: Vector3<f64>,
        e2: Vector3<f64>,
        bumps: Vec<(f64, f64, f64, f64)>,
    },
    Sphere { center: Point, radius: f64 },
}

impl Surface {
    fn flat(origin: Point, e1: Vector3<f64>, e2: Vector3<f64>) -> Self {
        Surface::Patch {
            origin,
            e1,
            e2,
            bumps: Vec::new(),
        }
    }

    fn area(&self) -> f64 {
        match self {
            Surface::Patch { e1, e2, .. } => e1.cross(e2).norm(),
            Surface::Sphere { radius, .. } => 4.0 * std::f64::consts::PI * radius * radius,
        }
    }

    fn sample(&self, rng: &mut impl Rng) -> Point {
        match self {
            Surface::Patch { origin, e1, e2, bumps } => {
                let (u, v): (f64, f64) = (rng.random(), rng.random());
                let normal = e1.cross(e2).normalize();
                let h: f64 = bumps
                    .iter()
                    .map(|&(cu, cv, amp, width)| amp * (-((u - cu).powi(2) + (v - cv).powi(2)) / (2.0 * width * width)).exp())
                    .sum();
                origin + e1 * u + e2 * v + normal * h
            }
            Surface::Sphere { center, radius } => {
                let d: [f64; 3] = rng.sample(UnitSphere);
                center + Vector3::from(d) * *radius
            }
        }
    }
}

fn box_faces(lo: Point, hi: Point, bumpy: Option<&mut ChaCha8Rng>) -> Vec<Surface> {
    let d = hi - lo;
    let (x, y, z) = (Vector3::x() * d.x, Vector3::y() * d.y, Vector3::z() * d.z);
    // each face is oriented with an outward normal
    let faces = [
        (lo, y, x),
        (lo + z, x, y),
        (lo, x, z),
        (lo + y, z, x),
        (lo, z, y),
        (lo + x, y, z),
    ];
    let mut rng = bumpy;
    faces
        .into_iter()
        .map(|(origin, e1, e2)| {
            let bumps = match rng.as_deref_mut() {
                Some(r) => {
                    let scale = e1.norm().min(e2.norm());
                    (0..BUMPS_PER_FACE)
                        .map(|_| {
                            (
                                r.random(),
                                r.random(),
                                r.random_range(-BUMP_HEIGHT..BUMP_HEIGHT) * scale,
                                r.random_range(0.06..0.2),
                            )
                        })
                        .collect()
                }
                None => Vec::new(),
            };
            Surface::Patch { origin, e1, e2, bumps }
        })
        .collect()
}

fn surfaces_for(shape: BaseShape, rng: &mut ChaCha8Rng) -> Vec<Surface> {
    match shape {
        BaseShape::Box => {
            let hi = Point::new(rng.random_range(0.6..1.0), rng.random_range(0.45..0.8), rng.random_range(0.3..0.6));
            box_faces(Point::zeros(), hi, Some(rng))
        }
        BaseShape::Room => {
            let (w, d, h) = (1.0, 0.8, 0.5);
            let mut s = vec![
                Surface::flat(Point::zeros(), Vector3::x() * w, Vector3::y() * d),
                Surface::flat(Point::zeros(), Vector3::z() * h, Vector3::x() * w),
                Surface::flat(Point::zeros(), Vector3::y() * d, Vector3::z() * h),
            ];
            for k in 0..6 {
                let c = Point::new(rng.random_range(0.15..0.85) * w, rng.random_range(0.15..0.7) * d, 0.0);
                if k % 2 == 0 {
                    let size = Vector3::new(rng.random_range(0.08..0.2), rng.random_range(0.08..0.2), rng.random_range(0.05..0.3));
                    let lo = c - Vector3::new(size.x / 2.0, size.y / 2.0, 0.0);
                    s.extend(box_faces(lo, lo + size, None));
                } else {
                    let radius = rng.random_range(0.04..0.1);
                    s.push(Surface::Sphere {
                        center: c + Vector3::z() * radius,
                        radius,
                    });
                }
            }
            s
        }
        BaseShape::TwinCubes => {
            let mut s = vec![Surface::flat(Point::new(-0.7, -0.35, 0.0), Vector3::x() * 1.8, Vector3::y() * 0.7)];
            let size = Vector3::new(0.22, 0.22, 0.22);
            for x in [-0.3, 0.3] {
                let lo = Point::new(x - 0.11, -0.11, 0.0);
                s.extend(box_faces(lo, lo + size, None));
            }
            s
        }
    }
}

/// Samples `n` points from a built-in shape, centred and scaled so that the
/// bounding-box diagonal is 1.
pub fn make_base(shape: BaseShape, n: usize, seed: u64) -> Result<PointCloud> {
    if n == 0 {
        return Err(Error::EmptyInput("base shape point count"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let surfaces = surfaces_for(shape, &mut rng);
    let areas: Vec<f64> = surfaces.iter().map(Surface::area).collect();
    let total: f64 = areas.iter().sum();
    let mut cumulative = Vec::with_capacity(areas.len());
    let mut acc = 0.0;
    for a in &areas {
        acc += a / total;
        cumulative.push(acc);
    }
    let raw: PointCloud = (0..n)
        .map(|_| {
            let r: f64 = rng.random();
            let k = cumulative.iter().position(|&c| r < c).unwrap_or(surfaces.len() - 1);
            surfaces[k].sample(&mut rng)
        })
        .collect();
    let (lo, hi) = raw.bounds().ok_or(Error::EmptyInput("base shape"))?;
    let center = (lo + hi) / 2.0;
    let scale = (hi - lo).norm();
    Ok(raw.iter().map(|p| (p - center) / scale).collect())
}

/// Per-attempt random draws, fixed so that the crop size can be bisected.
struct Attempt {
    order: Vec<usize>,
    projection: Vec<f64>,
    keep_p: Vec<bool>,
    keep_q: Vec<bool>,
    noise_p: Vec<Vector3<f64>>,
    noise_q: Vec<Vector3<f64>>,
    outliers_p: Vec<Vector3<f64>>,
    outliers_q: Vec<Vector3<f64>>,
}

impl Attempt {
    fn draw(base: &PointCloud, cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Self {
        let n = base.len();
        let unit = |rng: &mut ChaCha8Rng| Vector3::from(rng.sample::<[f64; 3], _>(UnitSphere));
        let dir = unit(rng);
        let projection: Vec<f64> = base.iter().map(|p| p.dot(&dir)).collect();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        let skew_keep = |rng: &mut ChaCha8Rng| {
            let skew_dir = unit(rng);
            let s: Vec<f64> = base.iter().map(|p| p.dot(&skew_dir)).collect();
            let (lo, hi) = s.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
            let span = (hi - lo).max(f64::MIN_POSITIVE);
            s.iter()
                .map(|&x| {
                    let t = (x - lo) / span;
                    let u: f64 = rng.random();
                    u < cfg.density_skew.powf(-t)
                })
                .collect::<Vec<bool>>()
        };
        let keep_p = skew_keep(rng);
        let keep_q = skew_keep(rng);
        let gaussian = |rng: &mut ChaCha8Rng| {
            let g = Vector3::new(rng.sample::<f64, _>(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal));
            g * cfg.noise_sigma
        };
        let noise_p = (0..n).map(|_| gaussian(rng)).collect();
        let noise_q = (0..n).map(|_| gaussian(rng)).collect();
        let max_outliers = outlier_count(cfg.n_points, cfg.outlier_fraction);
        let cube = |rng: &mut ChaCha8Rng| (0..max_outliers).map(|_| Vector3::new(rng.random(), rng.random(), rng.random())).collect();
        let outliers_p = cube(rng);
        let outliers_q = cube(rng);
        Self {
            order,
            projection,
            keep_p,
            keep_q,
            noise_p,
            noise_q,
            outliers_p,
            outliers_q,
        }
    }

    /// Source and target in the base frame for crop fraction `a ∈ [0.5, 1]`.
    fn build(&self, base: &PointCloud, cfg: &SynthConfig, a: f64) -> (PointCloud, PointCloud) {
        let mut sorted = self.projection.clone();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let rank = |q: f64| ((q * n as f64).round() as usize).clamp(1, n) - 1;
        let upper = if a >= 1.0 { f64::INFINITY } else { sorted[rank(a)] };
        let lower = if a >= 1.0 { f64::NEG_INFINITY } else { sorted[n - 1 - rank(a)] };
        let side = |inside: &dyn Fn(f64) -> bool, keep: &[bool], noise: &[Vector3<f64>], outliers: &[Vector3<f64>]| {
            let mut pts: Vec<Point> = self
                .order
                .iter()
                .filter(|&&i| inside(self.projection[i]))
                .take(cfg.n_points)
                .filter(|&&i| keep[i])
                .map(|&i| base.point(i) + noise[i])
                .collect();
            if let Some((lo, hi)) = bounds_of(&pts) {
                let k = outlier_count(pts.len(), cfg.outlier_fraction).min(outliers.len());
                pts.extend(outliers[..k].iter().map(|u| lo + (hi - lo).component_mul(u)));
            }
            PointCloud::from_iter(pts)
        };
        let p = side(&|s| s <= upper, &self.keep_p, &self.noise_p, &self.outliers_p);
        let q = side(&|s| s >= lower, &self.keep_q, &self.noise_q, &self.outliers_q);
        (p, q)
    }
}

fn bounds_of(pts: &[Point]) -> Option<(Point, Point)> {
    let first = *pts.first()?;
    Some(pts.iter().fold((first, first), |(lo, hi), p| (lo.inf(p), hi.sup(p))))
}

fn outlier_count(inliers: usize, fraction: f64) -> usize {
    (inliers as f64 * fraction / (1.0 - fraction)).round() as usize
}

pub fn read_index_pairs(path: &Path) -> Result<Vec<(usize, usize)>> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_rows(path, &text)?
        .into_iter()
        .map(|(line, row)| match row.as_slice() {
            [i, j] if *i >= 0.0 && *j >= 0.0 && i.fract() == 0.0 && j.fract() == 0.0 => Ok((*i as usize, *j as usize)),
            _ => Err(Error::Parse {
                path: path.to_path_buf(),
                line,
                message: "expected `source target` indices".into(),
            }),
        })
        .collect()
}

/// Fraction of `p` having a point of `q` strictly within `radius`, both in
/// the same frame.
pub fn measured_overlap(p: &PointCloud, q: &PointCloud, radius: f64) -> f64 {
    if p.is_empty() {
        return 0.0;
    }
    let index = NeighborIndex::for_cloud(q, radius);
    let hits = p.iter().filter(|x| index.nearest(x).is_some_and(|(_, d)| d < radius)).count();
    hits as f64 / p.len() as f64
}

/// Mutual nearest neighbors between `gt(src)` and `tgt` closer than `radius`.
pub fn mutual_gt_pairs(src: &PointCloud, tgt: &PointCloud, gt: &RigidTransform, radius: f64) -> Vec<(usize, usize)> {
    let moved: PointCloud = src.iter().map(|p| gt.apply(p)).collect();
    let src_index = NeighborIndex::for_cloud(&moved, radius);
    let tgt_index = NeighborIndex::for_cloud(tgt, radius);
    moved
        .iter()
        .enumerate()
        .filter_map(|(i, p)| {
            let (j, d) = tgt_index.nearest(p)?;
            let (back, _) = src_index.nearest(tgt.point(j))?;
            (d < radius && back == i).then_some((i, j))
        })
        .collect()
}

/// Crops two overlapping views of `base` and moves the second one.
///
/// Each attempt draws a crop direction and then bisects the crop size until
/// the measured overlap is within [`OVERLAP_TOLERANCE`] of the target.
/// Density skew keeps a point with probability `skew^(−t)`, `t ∈ [0, 1]`
/// along a random direction. Outliers are uniform in each view's bounding
/// box. The target's point order is shuffled.
pub fn generate_pair(base: &PointCloud, cfg: &SynthConfig) -> Result<SynthPair> {
    cfg.validate()?;
    base.require_non_empty("base shape")?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let target = cfg.overlap_fraction;
    let mut best = f64::INFINITY;
    for _ in 0..MAX_CROP_ATTEMPTS {
        let attempt = Attempt::draw(base, cfg, &mut rng);
        let measure = |a: f64| {
            let (p, q) = attempt.build(base, cfg, a);
            let m = measured_overlap(&p, &q, cfg.overlap_radius);
            (m, p, q)
        };
        let mut found = None;
        let (m_full, p, q) = measure(1.0);
        if (m_full - target).abs() <= OVERLAP_TOLERANCE {
            found = Some((m_full, p, q));
        } else if m_full > target {
            let (mut lo, mut hi) = (0.5, 1.0);
            for _ in 0..BISECTION_STEPS {
                let mid = 0.5 * (lo + hi);
                let (m, p, q) = measure(mid);
                best = best.min((m - target).abs());
                if (m - target).abs() <= OVERLAP_TOLERANCE / 2.0 {
                    found = Some((m, p, q));
                    break;
                }
                if m < target {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
        } else {
            best = best.min((m_full - target).abs());
        }
        let Some((measured, p, q_base)) = found else {
            continue;
        };
        let axis = Vector3::from(rng.sample::<[f64; 3], _>(UnitSphere));
        let shift = Vector3::from(rng.sample::<[f64; 3], _>(UnitSphere)) * cfg.translation_magnitude;
        let gt = RigidTransform::from_axis_angle(&axis, cfg.rotation_magnitude.to_radians(), shift);
        let mut moved: Vec<Point> = q_base.iter().map(|x| gt.apply(x)).collect();
        moved.shuffle(&mut rng);
        let q = PointCloud::from_iter(moved);
        if p.len() < 3 || q.len() < 3 {
            continue;
        }
        let gt_pairs = mutual_gt_pairs(&p, &q, &gt, cfg.overlap_radius);
        return Ok(SynthPair {
            source: p,
            target: q,
            gt,
            gt_pairs,
            measured_overlap: measured,
        });
    }
    Err(Error::Generation(format!(
        "overlap target {target} not reached within {MAX_CROP_ATTEMPTS} crop attempts (closest miss {best:.3})"
    )))
}

/// Builds the configured base shape with enough points for two crops and
/// generates a pair from it.
pub fn generate_scene(cfg: &SynthConfig) -> Result<SynthPair> {
    cfg.validate()?;
    let base = make_base(cfg.base, cfg.n_points * 2, cfg.seed ^ 0x9e37_79b9_7f4a_7c15)?;
    generate_pair(&base, cfg)
}
