use super::*;
use crate::geometry::NeighborIndex;
use crate::pipeline::{FeatureSpec, MatchConfig, OverlapSpec};

fn small(base: BaseShape, overlap: f64, seed: u64) -> SynthConfig {
    SynthConfig {
        base,
        n_points: 1500,
        overlap_fraction: overlap,
        seed,
        ..SynthConfig::default()
    }
}

#[test]
fn bases_have_unit_diameter() {
    for shape in [BaseShape::Box, BaseShape::Room, BaseShape::TwinCubes] {
        let base = make_base(shape, 2000, 3).unwrap();
        assert_eq!(base.len(), 2000);
        assert!((base.diameter() - 1.0).abs() < 1e-12, "{shape:?}");
        let c = base.bounds().map(|(lo, hi)| (lo + hi) / 2.0).unwrap();
        assert!(c.norm() < 1e-12);
    }
}

#[test]
fn full_overlap_clean_pair_is_a_permutation() {
    let pair = generate_scene(&small(BaseShape::Box, 1.0, 11)).unwrap();
    assert_eq!(pair.source.len(), pair.target.len());
    assert_eq!(pair.measured_overlap, 1.0);
    assert_eq!(pair.gt_pairs.len(), pair.source.len());
    let mut seen_src = vec![false; pair.source.len()];
    let mut seen_tgt = vec![false; pair.target.len()];
    for &(i, j) in &pair.gt_pairs {
        assert!(!seen_src[i] && !seen_tgt[j]);
        seen_src[i] = true;
        seen_tgt[j] = true;
        assert!((pair.gt.apply(pair.source.point(i)) - pair.target.point(j)).norm() < 1e-12);
    }
}

#[test]
fn same_seed_same_pair() {
    let cfg = SynthConfig {
        noise_sigma: 0.005,
        outlier_fraction: 0.1,
        density_skew: 3.0,
        ..small(BaseShape::Room, 0.6, 5)
    };
    let a = generate_scene(&cfg).unwrap();
    let b = generate_scene(&cfg).unwrap();
    assert_eq!(a, b);
    let c = generate_scene(&SynthConfig { seed: 6, ..cfg }).unwrap();
    assert_ne!(a.source, c.source);
}

#[test]
fn half_overlap_is_measured_within_tolerance() {
    for seed in 0..5 {
        let cfg = small(BaseShape::Box, 0.5, seed);
        let pair = generate_scene(&cfg).unwrap();
        // direct loop over the output, independent of the generator's bookkeeping
        let idx = NeighborIndex::for_cloud(&pair.target, 0.0);
        let hits = pair
            .source
            .iter()
            .filter(|p| {
                let q = pair.gt.apply(p);
                idx.nearest(&q).is_some_and(|(_, d)| d < cfg.overlap_radius)
            })
            .count();
        let measured = hits as f64 / pair.source.len() as f64;
        assert!((0.45..=0.55).contains(&measured), "seed {seed}: {measured}");
        assert!((measured - pair.measured_overlap).abs() < 1e-3);
    }
}

#[test]
fn outliers_noise_and_skew_are_applied() {
    let clean = generate_scene(&small(BaseShape::Box, 0.7, 2)).unwrap();
    let skewed = generate_scene(&SynthConfig {
        density_skew: 4.0,
        ..small(BaseShape::Box, 0.7, 2)
    })
    .unwrap();
    assert!(skewed.source.len() < clean.source.len());
    let noisy = generate_scene(&SynthConfig {
        outlier_fraction: 0.2,
        ..small(BaseShape::Box, 0.7, 2)
    })
    .unwrap();
    assert!(noisy.source.len() > clean.source.len());
}

#[test]
fn unreachable_overlap_is_a_generation_error() {
    // two far-apart points: any crop either keeps both or neither overlaps
    let base = crate::geometry::PointCloud::from_arrays(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0], [3.0, 0.0, 0.0]]).unwrap();
    let cfg = SynthConfig {
        n_points: 4,
        overlap_fraction: 0.3,
        ..SynthConfig::default()
    };
    assert!(matches!(generate_pair(&base, &cfg), Err(crate::Error::Generation(_))));
}

#[test]
fn invalid_synth_config_is_rejected() {
    for cfg in [
        SynthConfig { overlap_fraction: 0.0, ..SynthConfig::default() },
        SynthConfig { outlier_fraction: 1.0, ..SynthConfig::default() },
        SynthConfig { density_skew: 0.5, ..SynthConfig::default() },
        SynthConfig { noise_sigma: -1.0, ..SynthConfig::default() },
    ] {
        assert!(cfg.validate().is_err());
    }
}

fn clean_scenario(estimator: Estimator) -> Scenario {
    let mut matching = MatchConfig {
        coarse_voxel: 0.1,
        feature_provider: FeatureSpec::Oracle,
        overlap_provider: OverlapSpec::GroundTruth { radius: 0.0375 },
        ..MatchConfig::default()
    };
    // soft fine marginals let points whose partner sits in another patch drop out
    matching.fine_solver.tau = 0.005;
    Scenario {
        seed: 3,
        pairs: vec![PairSpec::Generated {
            synth: SynthConfig {
                n_points: 800,
                overlap_fraction: 1.0,
                ..SynthConfig::default()
            },
            count: 10,
            overlap_range: None,
        }],
        matching,
        estimator,
        ..Scenario::default()
    }
}

#[test]
fn clean_full_overlap_scenario_is_solved() {
    let report = run_scenario(&clean_scenario(Estimator::Ransac)).unwrap();
    assert_eq!(report.n_pairs, 10);
    assert!(report.all_processed(), "{:?}", report.records);
    assert_eq!(report.registration_recall, 1.0);
    assert_eq!(report.inlier_ratio, 1.0);
    assert!(report.is_consistent());
    let svd = run_scenario(&clean_scenario(Estimator::Svd)).unwrap();
    let flags = |r: &EvalReport| r.records.iter().map(|p| (p.fmr_success, p.rr_success)).collect::<Vec<_>>();
    assert_eq!(flags(&report), flags(&svd));
}

#[test]
fn report_is_deterministic_across_worker_counts() {
    let mut sc = clean_scenario(Estimator::Ransac);
    if let PairSpec::Generated { count, .. } = &mut sc.pairs[0] {
        *count = 3;
    }
    let a = run_scenario(&sc).unwrap().to_json().unwrap();
    sc.workers = 3;
    let b = run_scenario(&sc).unwrap().to_json().unwrap();
    assert_eq!(a, b);
    assert!(!a.contains("timings"));
}

#[test]
fn tampered_aggregates_are_inconsistent() {
    let mut sc = clean_scenario(Estimator::Svd);
    if let PairSpec::Generated { count, .. } = &mut sc.pairs[0] {
        *count = 2;
    }
    let mut report = run_scenario(&sc).unwrap();
    assert!(report.is_consistent());
    report.feature_matching_recall = 0.5;
    assert!(!report.is_consistent());
}

#[test]
fn missing_point_file_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("scenario.json");
    std::fs::write(
        &path,
        r#"{"pairs": [{"kind": "files", "source": "nowhere.txt", "target": "t.txt", "gt": "gt.txt"}]}"#,
    )
    .unwrap();
    let err = run_experiment(&path).unwrap_err();
    assert!(err.is_config_error());
    assert!(err.to_string().contains("nowhere.txt"), "{err}");
}

#[test]
fn malformed_scenario_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("scenario.json");
    std::fs::write(&path, r#"{"pairs": [], "unknown_field": 1}"#).unwrap();
    assert!(run_experiment(&path).unwrap_err().is_config_error());
    std::fs::write(&path, r#"{"pairs": []}"#).unwrap();
    assert!(run_experiment(&path).unwrap_err().is_config_error());
}

#[test]
fn file_pairs_round_trip_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let pair = generate_scene(&SynthConfig {
        n_points: 600,
        overlap_fraction: 1.0,
        seed: 9,
        ..SynthConfig::default()
    })
    .unwrap();
    pair.write_to(dir.path()).unwrap();
    assert_eq!(read_index_pairs(&dir.path().join("gt_pairs.tsv")).unwrap(), pair.gt_pairs);
    let scenario = serde_json::json!({
        "pairs": [{"kind": "files", "source": "source.txt", "target": "target.txt", "gt": "gt.txt", "gt_pairs": "gt_pairs.tsv"}],
        "matching": {"coarse_voxel": 0.15, "feature_provider": {"kind": "oracle"}},
        "estimator": "svd"
    });
    let path = dir.path().join("scenario.json");
    std::fs::write(&path, scenario.to_string()).unwrap();
    let report = run_experiment(&path).unwrap();
    assert!(report.all_processed(), "{:?}", report.records);
    assert_eq!(report.registration_recall, 1.0);
}

#[test]
fn failed_pairs_are_recorded_and_the_run_continues() {
    let mut sc = clean_scenario(Estimator::Ransac);
    sc.pairs.push(PairSpec::Generated {
        synth: SynthConfig {
            n_points: 3,
            overlap_fraction: 0.2,
            ..SynthConfig::default()
        },
        count: 1,
        overlap_range: None,
    });
    if let PairSpec::Generated { count, .. } = &mut sc.pairs[0] {
        *count = 2;
    }
    let report = run_scenario(&sc).unwrap();
    assert_eq!(report.n_pairs, 3);
    assert_eq!(report.n_failed, 1);
    assert!(report.records[2].error.is_some());
    assert!((report.registration_recall - 2.0 / 3.0).abs() < 1e-15);
}
