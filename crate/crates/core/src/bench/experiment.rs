use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{feature_matching_recall, inlier_ratio, is_recalled, registration_recall, EvalThresholds, PoseOutcome, RrMode};
use super::synth::{generate_scene, mutual_gt_pairs, read_index_pairs, SynthConfig};
use crate::costs::FeatureMatrix;
use crate::error::{Error, Result};
use crate::geometry::io::{read_matrix, read_point_cloud, read_transform};
use crate::geometry::{pose_error, rmse_under_transform, PointCloud, RigidTransform};
use crate::pipeline::{predict_correspondences, ExternalFeatures, MatchConfig, Providers};
use crate::pose::{ransac_register, weighted_procrustes, RansacConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    #[default]
    Ransac,
    /// Weighted Procrustes with coupling confidences as weights.
    Svd,
}

fn one() -> usize {
    1
}

/// Where the pairs of a scenario come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PairSpec {
    /// `count` synthetic pairs. The synth seed is replaced by one drawn from
    /// the pair's RNG stream; with `overlap_range` the overlap fraction is
    /// drawn uniformly from that interval as well.
    Generated {
        #[serde(default)]
        synth: SynthConfig,
        #[serde(default = "one")]
        count: usize,
        #[serde(default)]
        overlap_range: Option<[f64; 2]>,
    },
    /// Clouds and the true transform read from files. Relative paths are
    /// resolved against the scenario file's directory.
    Files {
        source: PathBuf,
        target: PathBuf,
        gt: PathBuf,
        #[serde(default)]
        source_features: Option<PathBuf>,
        #[serde(default)]
        target_features: Option<PathBuf>,
        #[serde(default)]
        gt_pairs: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Scenario {
    pub seed: u64,
    pub workers: usize,
    pub pairs: Vec<PairSpec>,
    pub matching: MatchConfig,
    pub ransac: RansacConfig,
    pub thresholds: EvalThresholds,
    pub estimator: Estimator,
    pub rr_mode: RrMode,
    /// Radius for ground-truth pairs of file-based pairs without a pair file.
    pub gt_pair_radius: f64,
    /// Wall-clock timings make reports differ between runs, so they are off
    /// by default.
    pub record_timings: bool,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            seed: 0,
            workers: 1,
            pairs: Vec::new(),
            matching: MatchConfig::default(),
            ransac: RansacConfig::default(),
            thresholds: EvalThresholds::default(),
            estimator: Estimator::Ransac,
            rr_mode: RrMode::Rmse,
            gt_pair_radius: 0.0375,
            record_timings: false,
        }
    }
}

impl Scenario {
    /// Parses a scenario file, resolves relative paths and checks that every
    /// referenced file exists.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut scenario: Scenario =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("malformed scenario {}: {e}", path.display())))?;
        let dir = path.parent().unwrap_or(Path::new("."));
        for spec in &mut scenario.pairs {
            if let PairSpec::Files {
                source,
                target,
                gt,
                source_features,
                target_features,
                gt_pairs,
            } = spec
            {
                for p in [Some(source), Some(target), Some(gt), source_features.as_mut(), target_features.as_mut(), gt_pairs.as_mut()]
                    .into_iter()
                    .flatten()
                {
                    if p.is_relative() {
                        *p = dir.join(&*p);
                    }
                }
            }
        }
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn validate(&self) -> Result<()> {
        if self.workers == 0 {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        if self.pairs.is_empty() {
            return Err(Error::Config("scenario lists no pairs".into()));
        }
        if !(self.gt_pair_radius > 0.0 && self.gt_pair_radius.is_finite()) {
            return Err(Error::Config(format!("gt_pair_radius must be positive, got {}", self.gt_pair_radius)));
        }
        self.matching.validate()?;
        self.ransac.validate()?;
        self.thresholds.validate()?;
        for spec in &self.pairs {
            match spec {
                PairSpec::Generated { synth, overlap_range, .. } => {
                    synth.validate()?;
                    if let Some([lo, hi]) = overlap_range {
                        if !(*lo > 0.0 && lo <= hi && *hi <= 1.0) {
                            return Err(Error::Config(format!("overlap_range [{lo}, {hi}] must satisfy 0 < lo <= hi <= 1")));
                        }
                    }
                }
                PairSpec::Files {
                    source,
                    target,
                    gt,
                    source_features,
                    target_features,
                    gt_pairs,
                } => {
                    for p in [Some(source), Some(target), Some(gt), source_features.as_ref(), target_features.as_ref(), gt_pairs.as_ref()]
                        .into_iter()
                        .flatten()
                    {
                        if !p.is_file() {
                            return Err(Error::Config(format!("missing point file {}", p.display())));
                        }
                    }
                    if source_features.is_some() != target_features.is_some() {
                        return Err(Error::Config("feature files must be given for both clouds or neither".into()));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn pair_count(&self) -> usize {
        self.pairs
            .iter()
            .map(|s| match s {
                PairSpec::Generated { count, .. } => *count,
                PairSpec::Files { .. } => 1,
            })
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    /// Correspondence prediction.
    pub model_ms: f64,
    /// Pose estimation.
    pub pose_ms: f64,
    pub total_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub pair_id: usize,
    pub n_source: usize,
    pub n_target: usize,
    pub n_correspondences: usize,
    /// 0 for failed pairs and for pairs without correspondences.
    pub inlier_ratio: f64,
    pub rmse: Option<f64>,
    pub rre: Option<f64>,
    pub rte: Option<f64>,
    pub fmr_success: bool,
    pub rr_success: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timings: Option<Timings>,
}

impl PairRecord {
    fn failed(pair_id: usize, error: &Error) -> Self {
        Self {
            pair_id,
            n_source: 0,
            n_target: 0,
            n_correspondences: 0,
            inlier_ratio: 0.0,
            rmse: None,
            rre: None,
            rte: None,
            fmr_success: false,
            rr_success: false,
            error: Some(error.to_string()),
            timings: None,
        }
    }

    pub fn outcome(&self) -> PoseOutcome {
        PoseOutcome {
            rmse: self.rmse,
            rre: self.rre,
            rte: self.rte,
            failed: self.error.is_some(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rr_mode: RrMode,
    pub thresholds: EvalThresholds,
    pub n_pairs: usize,
    pub n_failed: usize,
    /// Mean inlier ratio over all pairs.
    pub inlier_ratio: f64,
    pub feature_matching_recall: f64,
    pub registration_recall: f64,
    pub records: Vec<PairRecord>,
}

impl EvalReport {
    /// Aggregates computed from per-pair records in record order.
    pub fn from_records(records: Vec<PairRecord>, thresholds: EvalThresholds, rr_mode: RrMode) -> Result<Self> {
        let irs: Vec<f64> = records.iter().map(|r| r.inlier_ratio).collect();
        let outcomes: Vec<PoseOutcome> = records.iter().map(PairRecord::outcome).collect();
        let fmr = feature_matching_recall(&irs, thresholds.fmr_min_inlier_ratio)?;
        let rr = registration_recall(&outcomes, &thresholds, rr_mode)?;
        Ok(Self {
            rr_mode,
            n_pairs: records.len(),
            n_failed: records.iter().filter(|r| r.error.is_some()).count(),
            inlier_ratio: irs.iter().sum::<f64>() / irs.len() as f64,
            feature_matching_recall: fmr,
            registration_recall: rr,
            thresholds,
            records,
        })
    }

    /// True when the stored aggregates equal a fresh recomputation exactly.
    pub fn is_consistent(&self) -> bool {
        match Self::from_records(self.records.clone(), self.thresholds.clone(), self.rr_mode) {
            Ok(fresh) => fresh == *self,
            Err(_) => false,
        }
    }

    pub fn all_processed(&self) -> bool {
        self.n_failed == 0
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::ReportSchema(e.to_string()))
    }
}

struct LoadedPair {
    source: PointCloud,
    target: PointCloud,
    gt: RigidTransform,
    gt_pairs: Vec<(usize, usize)>,
    external: Option<ExternalFeatures>,
}

enum Job<'a> {
    Generated(SynthConfig),
    Files(&'a PairSpec),
}

struct Planned<'a> {
    pair_id: usize,
    job: Job<'a>,
    ransac_seed: u64,
}

/// Stream `pair_id` of the scenario seed.
pub fn pair_rng(seed: u64, pair_id: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(pair_id as u64);
    rng
}

fn plan(scenario: &Scenario) -> Vec<Planned<'_>> {
    let mut out = Vec::with_capacity(scenario.pair_count());
    for spec in &scenario.pairs {
        let copies = match spec {
            PairSpec::Generated { count, .. } => *count,
            PairSpec::Files { .. } => 1,
        };
        for _ in 0..copies {
            let pair_id = out.len();
            let mut rng = pair_rng(scenario.seed, pair_id);
            let job = match spec {
                PairSpec::Generated { synth, overlap_range, .. } => {
                    let mut cfg = synth.clone();
                    cfg.seed = rng.random();
                    if let Some([lo, hi]) = overlap_range {
                        cfg.overlap_fraction = rng.random_range(*lo..=*hi);
                    }
                    Job::Generated(cfg)
                }
                PairSpec::Files { .. } => Job::Files(spec),
            };
            out.push(Planned {
                pair_id,
                job,
                ransac_seed: rng.random(),
            });
        }
    }
    out
}

fn load_features(path: &Path) -> Result<FeatureMatrix> {
    FeatureMatrix::new(read_matrix(path)?)
}

fn load(job: &Job<'_>, gt_pair_radius: f64) -> Result<LoadedPair> {
    match job {
        Job::Generated(cfg) => {
            let pair = generate_scene(cfg)?;
            Ok(LoadedPair {
                source: pair.source,
                target: pair.target,
                gt: pair.gt,
                gt_pairs: pair.gt_pairs,
                external: None,
            })
        }
        Job::Files(PairSpec::Files {
            source,
            target,
            gt,
            source_features,
            target_features,
            gt_pairs,
        }) => {
            let source_cloud = read_point_cloud(source)?;
            let target_cloud = read_point_cloud(target)?;
            let gt = read_transform(gt)?;
            let gt_pairs = match gt_pairs {
                Some(p) => read_index_pairs(p)?,
                None => mutual_gt_pairs(&source_cloud, &target_cloud, &gt, gt_pair_radius),
            };
            let external = match (source_features, target_features) {
                (Some(fs), Some(ft)) => Some(ExternalFeatures {
                    source: load_features(fs)?,
                    target: load_features(ft)?,
                }),
                _ => None,
            };
            Ok(LoadedPair {
                source: source_cloud,
                target: target_cloud,
                gt,
                gt_pairs,
                external,
            })
        }
        Job::Files(PairSpec::Generated { .. }) => unreachable!("generated specs are planned as generated jobs"),
    }
}

fn evaluate_pair(planned: &Planned<'_>, scenario: &Scenario) -> PairRecord {
    let id = planned.pair_id;
    let started = Instant::now();
    let pair = match load(&planned.job, scenario.gt_pair_radius) {
        Ok(p) => p,
        Err(e) => return PairRecord::failed(id, &e),
    };
    let prediction = Providers::from_config(&scenario.matching, &pair.target, Some(&pair.gt), pair.external.clone())
        .and_then(|providers| predict_correspondences(&pair.source, &pair.target, &scenario.matching, &providers));
    let mut record = PairRecord {
        n_source: pair.source.len(),
        n_target: pair.target.len(),
        ..PairRecord::failed(id, &Error::EmptyInput("correspondences"))
    };
    let prediction = match prediction {
        Ok(p) => p,
        Err(e) => {
            record.error = Some(e.to_string());
            return record;
        }
    };
    let model_done = Instant::now();
    let corr = &prediction.correspondences;
    record.n_correspondences = corr.len();
    match inlier_ratio(corr, &pair.source, &pair.target, &pair.gt, scenario.thresholds.inlier_radius) {
        Ok(ir) => record.inlier_ratio = ir.value,
        Err(e) => {
            record.error = Some(e.to_string());
            return record;
        }
    }
    record.fmr_success = record.inlier_ratio > scenario.thresholds.fmr_min_inlier_ratio;
    let estimate = match scenario.estimator {
        Estimator::Ransac => {
            let cfg = RansacConfig {
                seed: planned.ransac_seed,
                ..scenario.ransac.clone()
            };
            ransac_register(corr, &pair.source, &pair.target, &cfg).map(|r| r.transform)
        }
        Estimator::Svd => weighted_procrustes(corr, &pair.source, &pair.target, &corr.confidences()),
    };
    let pose_done = Instant::now();
    let est = match estimate {
        Ok(t) => t,
        Err(e) => {
            record.error = Some(e.in_stage("pose").to_string());
            return record;
        }
    };
    let (rre, rte) = pose_error(&est, &pair.gt);
    record.rre = Some(rre);
    record.rte = Some(rte);
    record.rmse = rmse_under_transform(&pair.source, &pair.target, &pair.gt_pairs, &est).ok();
    record.error = None;
    match is_recalled(&record.outcome(), &scenario.thresholds, scenario.rr_mode) {
        Ok(ok) => record.rr_success = ok,
        Err(e) => record.error = Some(e.to_string()),
    }
    if scenario.record_timings {
        let ms = |a: Instant, b: Instant| (b - a).as_secs_f64() * 1e3;
        record.timings = Some(Timings {
            model_ms: ms(started, model_done),
            pose_ms: ms(model_done, pose_done),
            total_ms: ms(started, pose_done),
        });
    }
    record
}

/// Evaluates every pair of the scenario on `scenario.workers` threads.
/// Records come back ordered by pair id whatever the schedule.
pub fn run_scenario(scenario: &Scenario) -> Result<EvalReport> {
    scenario.validate()?;
    let planned = plan(scenario);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(scenario.workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {} workers: {e}", scenario.workers)))?;
    let records: Vec<PairRecord> = pool.install(|| planned.par_iter().map(|p| evaluate_pair(p, scenario)).collect());
    EvalReport::from_records(records, scenario.thresholds.clone(), scenario.rr_mode)
}

pub fn run_experiment(path: &Path) -> Result<EvalReport> {
    run_scenario(&Scenario::load(path)?)
}
