//! Coarse-to-fine correspondence search.
//!
//! Superpoints are matched first with the coupled solver and a mutual
//! argmax filter; every surviving superpoint pair is then refined by a
//! second, patch-sized transport problem over the member points.

mod correspondence;
mod features;
mod overlap;
mod superpoints;

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::costs::{CostBundle, FeatureMatrix};
use crate::error::{Error, Result};
use crate::geometry::{PointCloud, RigidTransform};
use crate::otsolve::{solve_coupled_ot, CouplingMatrix, OverlapScores, SolverConfig};

pub use correspondence::{Correspondence, CorrespondenceSet};
pub use features::{
    pooled_features, spectral_descriptor, spectral_descriptor_with_support, ExternalFeatures, FeatureProvider, OracleFeatures,
    Side, SpectralFeatures, SPECTRAL_BINS,
};
pub use overlap::{gt_overlap_scores, overlap_flags, GroundTruthOverlap, Level, OverlapProvider, UniformOverlap};
pub use superpoints::{group_by_nearest, make_superpoints, Superpoints};

/// Which descriptors feed the cost matrices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FeatureSpec {
    /// Ground-truth-aligned coordinates (needs the true transform).
    Oracle,
    Spectral {
        fine_radius: f64,
        coarse_radius: f64,
    },
    /// Rows read from feature files.
    External,
}

/// Which scores act as transport marginals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OverlapSpec {
    Uniform,
    /// Labels from the true transform with the given radius.
    GroundTruth { radius: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatchConfig {
    pub coarse_voxel: f64,
    /// Patch truncation size K.
    pub patch_size: usize,
    pub feature_provider: FeatureSpec,
    pub overlap_provider: OverlapSpec,
    pub coarse_solver: SolverConfig,
    pub fine_solver: SolverConfig,
    pub coarse_lambda: f64,
    pub fine_lambda: f64,
    pub mnn_enabled: bool,
    /// The coarse voxel grows until both clouds have at most this many superpoints.
    pub max_superpoints: usize,
    /// Pairs whose coupling entry falls below this are dropped at both levels.
    pub min_confidence: f64,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            coarse_voxel: 0.1,
            patch_size: 64,
            feature_provider: FeatureSpec::Spectral {
                fine_radius: 0.05,
                coarse_radius: 0.15,
            },
            overlap_provider: OverlapSpec::Uniform,
            coarse_solver: SolverConfig::default(),
            fine_solver: SolverConfig::default(),
            coarse_lambda: 0.1,
            fine_lambda: 0.1,
            mnn_enabled: true,
            max_superpoints: 2048,
            min_confidence: 1e-3,
        }
    }
}

impl MatchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.coarse_voxel > 0.0 && self.coarse_voxel.is_finite()) {
            return Err(Error::Config(format!("coarse_voxel must be positive, got {}", self.coarse_voxel)));
        }
        if self.patch_size < 3 {
            return Err(Error::Config(format!("patch_size must be at least 3, got {}", self.patch_size)));
        }
        if self.max_superpoints == 0 {
            return Err(Error::Config("max_superpoints must be at least 1".into()));
        }
        for (name, l) in [("coarse_lambda", self.coarse_lambda), ("fine_lambda", self.fine_lambda)] {
            if !(0.0..=1.0).contains(&l) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {l}")));
            }
        }
        if !(self.min_confidence >= 0.0 && self.min_confidence.is_finite()) {
            return Err(Error::Config(format!("min_confidence must be nonnegative, got {}", self.min_confidence)));
        }
        match &self.feature_provider {
            FeatureSpec::Spectral { fine_radius, coarse_radius } if !(*fine_radius > 0.0 && *coarse_radius > 0.0) => {
                return Err(Error::Config("spectral radii must be positive".into()));
            }
            _ => {}
        }
        if let OverlapSpec::GroundTruth { radius } = self.overlap_provider {
            if !(radius > 0.0) {
                return Err(Error::Config(format!("ground-truth overlap radius must be positive, got {radius}")));
            }
        }
        self.coarse_solver.validate()?;
        self.fine_solver.validate()
    }
}

/// Feature and overlap providers bound to one cloud pair.
pub struct Providers {
    pub features: Box<dyn FeatureProvider>,
    pub overlap: Box<dyn OverlapProvider>,
}

impl Providers {
    /// Instantiates the configured providers. The oracle and ground-truth
    /// variants need `gt`; the external variant needs `external`.
    pub fn from_config(cfg: &MatchConfig, target: &PointCloud, gt: Option<&RigidTransform>, external: Option<ExternalFeatures>) -> Result<Self> {
        let need_gt = |what: &str| Error::Config(format!("{what} requires a ground-truth transform"));
        let features: Box<dyn FeatureProvider> = match &cfg.feature_provider {
            FeatureSpec::Oracle => Box::new(OracleFeatures::for_pair(*gt.ok_or_else(|| need_gt("oracle features"))?, target)?),
            FeatureSpec::Spectral {
                fine_radius,
                coarse_radius,
            } => Box::new(SpectralFeatures {
                fine_radius: *fine_radius,
                coarse_radius: *coarse_radius,
            }),
            FeatureSpec::External => Box::new(external.ok_or_else(|| Error::Config("external features requested but no feature files given".into()))?),
        };
        let overlap: Box<dyn OverlapProvider> = match cfg.overlap_provider {
            OverlapSpec::Uniform => Box::new(UniformOverlap::default()),
            OverlapSpec::GroundTruth { radius } => Box::new(GroundTruthOverlap {
                gt: *gt.ok_or_else(|| need_gt("ground-truth overlap"))?,
                radius,
            }),
        };
        Ok(Self { features, overlap })
    }
}

/// Row-argmax pairs of `Γ`; with `mutual` only those that are also the
/// argmax of their column. Confidence is the coupling entry clamped to 1.
pub fn argmax_pairs(gamma: &CouplingMatrix, mutual: bool) -> Vec<Correspondence> {
    let rows = gamma.row_argmax();
    let cols = gamma.col_argmax();
    rows.iter()
        .enumerate()
        .filter(|&(i, &j)| !mutual || cols[j] == i)
        .map(|(i, &j)| Correspondence::new(i, j, gamma.get(i, j).min(1.0)))
        .collect()
}

/// Superpoint matching: coupled transport over superpoints, then the
/// mutual-argmax filter (when enabled) and the confidence floor.
#[allow(clippy::too_many_arguments)]
pub fn coarse_match(
    sp_p: &Superpoints,
    sp_q: &Superpoints,
    f_p: &FeatureMatrix,
    f_q: &FeatureMatrix,
    mu_p: &OverlapScores,
    mu_q: &OverlapScores,
    cfg: &MatchConfig,
) -> Result<CorrespondenceSet> {
    let bundle = CostBundle::build(sp_p.points(), f_p, sp_q.points(), f_q, cfg.coarse_lambda)?;
    let gamma = solve_coupled_ot(&bundle, mu_p, mu_q, &cfg.coarse_solver)?;
    CorrespondenceSet::new(
        argmax_pairs(&gamma, cfg.mnn_enabled)
            .into_iter()
            .filter(|c| c.confidence >= cfg.min_confidence)
            .collect(),
    )
}

/// Everything a patch needs from one side of the pair.
#[derive(Clone, Copy)]
pub struct PatchSide<'a> {
    pub cloud: &'a PointCloud,
    pub features: &'a FeatureMatrix,
    pub scores: &'a OverlapScores,
}

/// The `k` members with the highest score (ties to the lower index),
/// returned in ascending index order.
pub fn top_k_members(members: &[usize], scores: &OverlapScores, k: usize) -> Vec<usize> {
    let s = scores.as_slice();
    let mut ranked = members.to_vec();
    ranked.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));
    ranked.truncate(k);
    ranked.sort_unstable();
    ranked
}

/// Point matching inside one superpoint pair. Returned indices refer to the
/// full clouds.
pub fn fine_match(src_members: &[usize], tgt_members: &[usize], src: PatchSide<'_>, tgt: PatchSide<'_>, cfg: &MatchConfig) -> Result<CorrespondenceSet> {
    let ps = top_k_members(src_members, src.scores, cfg.patch_size);
    let qs = top_k_members(tgt_members, tgt.scores, cfg.patch_size);
    if ps.is_empty() || qs.is_empty() {
        return Err(Error::EmptyInput("patch after truncation"));
    }
    let bundle = CostBundle::build(
        &src.cloud.select(&ps),
        &src.features.select(&ps),
        &tgt.cloud.select(&qs),
        &tgt.features.select(&qs),
        cfg.fine_lambda,
    )?;
    let gamma = solve_coupled_ot(&bundle, &src.scores.select(&ps), &tgt.scores.select(&qs), &cfg.fine_solver)?;
    CorrespondenceSet::new(
        argmax_pairs(&gamma, true)
            .into_iter()
            .filter(|c| c.confidence >= cfg.min_confidence)
            .map(|c| Correspondence::new(ps[c.source], qs[c.target], c.confidence))
            .collect(),
    )
}

/// Merges pair lists, keeping the highest confidence per `(source, target)`;
/// output is sorted by index pair.
pub fn union_max(sets: impl IntoIterator<Item = CorrespondenceSet>) -> CorrespondenceSet {
    let mut best: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for set in sets {
        for c in set.iter() {
            let e = best.entry((c.source, c.target)).or_insert(c.confidence);
            *e = e.max(c.confidence);
        }
    }
    best.into_iter().map(|((s, t), c)| Correspondence::new(s, t, c)).collect()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub coarse_voxel_used: f64,
    pub source_superpoints: usize,
    pub target_superpoints: usize,
    pub coarse_pairs: usize,
    pub fine_patches_solved: usize,
    /// `(source superpoint, target superpoint, reason)` per skipped patch pair.
    pub skipped_patches: Vec<(usize, usize, String)>,
    pub messages: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub correspondences: CorrespondenceSet,
    pub coarse: CorrespondenceSet,
    pub diagnostics: Diagnostics,
}

fn superpoints_within_cap(p: &PointCloud, q: &PointCloud, cfg: &MatchConfig, diag: &mut Diagnostics) -> Result<(Superpoints, Superpoints)> {
    let mut voxel = cfg.coarse_voxel;
    loop {
        let sp = make_superpoints(p, voxel)?;
        let sq = make_superpoints(q, voxel)?;
        if sp.len() <= cfg.max_superpoints && sq.len() <= cfg.max_superpoints {
            if voxel != cfg.coarse_voxel {
                diag.messages.push(format!(
                    "warning: coarse voxel raised from {} to {voxel} to keep superpoints within {}",
                    cfg.coarse_voxel, cfg.max_superpoints
                ));
            }
            diag.coarse_voxel_used = voxel;
            return Ok((sp, sq));
        }
        voxel *= 1.25;
    }
}

/// Full coarse-to-fine correspondence prediction for one cloud pair.
pub fn predict_correspondences(cloud_p: &PointCloud, cloud_q: &PointCloud, cfg: &MatchConfig, providers: &Providers) -> Result<Prediction> {
    cfg.validate()?;
    cloud_p.require_non_empty("source cloud")?;
    cloud_q.require_non_empty("target cloud")?;
    let mut diag = Diagnostics::default();
    let (sp_p, sp_q) = superpoints_within_cap(cloud_p, cloud_q, cfg, &mut diag).map_err(|e| e.in_stage("superpoints"))?;
    diag.source_superpoints = sp_p.len();
    diag.target_superpoints = sp_q.len();

    let feats = &providers.features;
    let stage = |e: Error| e.in_stage("features");
    let ffp = feats.point_features(cloud_p, Side::Source).map_err(stage)?;
    let ffq = feats.point_features(cloud_q, Side::Target).map_err(stage)?;
    let fsp = feats.superpoint_features(&sp_p, cloud_p, &ffp, Side::Source).map_err(stage)?;
    let fsq = feats.superpoint_features(&sp_q, cloud_q, &ffq, Side::Target).map_err(stage)?;

    let stage = |e: Error| e.in_stage("overlap");
    let (mu_sp, mu_sq) = providers.overlap.coarse_scores(cloud_p, cloud_q, &sp_p, &sp_q).map_err(stage)?;
    let (mu_p, mu_q) = providers.overlap.fine_scores(cloud_p, cloud_q).map_err(stage)?;

    let coarse = match coarse_match(&sp_p, &sp_q, &fsp, &fsq, &mu_sp, &mu_sq, cfg) {
        Ok(c) => c,
        Err(Error::Infeasible(msg)) => {
            diag.messages.push(format!("no coarse matches: {msg}"));
            CorrespondenceSet::default()
        }
        Err(e) => return Err(e.in_stage("coarse")),
    };
    diag.coarse_pairs = coarse.len();
    if coarse.is_empty() {
        if diag.messages.iter().all(|m| !m.starts_with("no coarse matches")) {
            diag.messages.push("no coarse matches".into());
        }
        return Ok(Prediction {
            correspondences: CorrespondenceSet::default(),
            coarse,
            diagnostics: diag,
        });
    }

    let src = PatchSide {
        cloud: cloud_p,
        features: &ffp,
        scores: &mu_p,
    };
    let tgt = PatchSide {
        cloud: cloud_q,
        features: &ffq,
        scores: &mu_q,
    };
    let results: Vec<Result<CorrespondenceSet>> = coarse
        .pairs()
        .par_iter()
        .map(|c| fine_match(sp_p.group(c.source), sp_q.group(c.target), src, tgt, cfg))
        .collect();
    let mut sets = Vec::with_capacity(results.len());
    for (c, r) in coarse.iter().zip(results) {
        match r {
            Ok(set) => {
                diag.fine_patches_solved += 1;
                sets.push(set);
            }
            // empty or massless patches are reported, not fatal
            Err(e @ (Error::EmptyInput(_) | Error::Infeasible(_))) => diag.skipped_patches.push((c.source, c.target, e.to_string())),
            Err(e) => return Err(e.in_stage("fine")),
        }
    }
    Ok(Prediction {
        correspondences: union_max(sets),
        coarse,
        diagnostics: diag,
    })
}
