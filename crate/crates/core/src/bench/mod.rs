//! Synthetic registration scenes, evaluation metrics and batch experiments.

mod experiment;
mod metrics;
mod synth;

pub use experiment::{pair_rng, run_experiment, run_scenario, EvalReport, Estimator, PairRecord, PairSpec, Scenario, Timings};
pub use metrics::{feature_matching_recall, inlier_ratio, is_recalled, registration_recall, EvalThresholds, InlierRatio, PoseOutcome, RrMode};
pub use synth::{
    format_index_pairs, generate_pair, generate_scene, make_base, measured_overlap, mutual_gt_pairs, read_index_pairs, BaseShape, SynthConfig,
    SynthPair, MAX_CROP_ATTEMPTS, OVERLAP_TOLERANCE,
};

#[cfg(test)]
mod tests;
