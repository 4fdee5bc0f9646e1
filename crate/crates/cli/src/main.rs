//! `couplereg` command-line tool.
//!
//! Exit codes: 0 on success, 2 for configuration or input errors, 3 for
//! failures at run time.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use couplereg::bench::{generate_scene, run_scenario, Estimator, Scenario, SynthConfig};
use couplereg::costs::{CostBundle, FeatureMatrix};
use couplereg::geometry::io::{read_matrix, read_point_cloud, read_transform, write_matrix, write_transform};
use couplereg::otsolve::{format_trace, solve_coupled_ot_traced, OverlapScores, SolverConfig};
use couplereg::pipeline::{predict_correspondences, ExternalFeatures, MatchConfig, Providers};
use couplereg::pose::{ransac_register, weighted_procrustes, RansacConfig};
use couplereg::{Error, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser)]
#[command(name = "couplereg", version, about = "Point-cloud registration with coupled optimal transport")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON configuration file for the subcommand.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the seed in the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads.
    #[arg(long)]
    workers: Option<usize>,
    /// Per-iteration trace or diagnostics output.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic pair: source.txt, target.txt, gt.txt, gt_pairs.tsv.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
    /// Predict correspondences between two clouds and estimate the transform.
    Register {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long, requires = "target_features")]
        source_features: Option<PathBuf>,
        #[arg(long, requires = "source_features")]
        target_features: Option<PathBuf>,
        /// True transform; needed by the oracle and ground-truth providers.
        #[arg(long)]
        gt: Option<PathBuf>,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
    /// Solve one coupled transport problem given as text matrices.
    Solve {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        cross: PathBuf,
        #[arg(long)]
        struct_p: PathBuf,
        #[arg(long)]
        struct_q: PathBuf,
        /// Source marginal, one value per line (all ones when omitted).
        #[arg(long)]
        mu_p: Option<PathBuf>,
        #[arg(long)]
        mu_q: Option<PathBuf>,
        #[arg(long)]
        output: PathBuf,
    },
    /// Run an evaluation scenario and write the report.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Report destination; standard output when omitted.
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

/// Settings of the `register` subcommand.
#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RegisterConfig {
    matching: MatchConfig,
    ransac: RansacConfig,
    estimator: Estimator,
}

fn load_json<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn init_workers(workers: Option<usize>) -> Result<()> {
    if let Some(n) = workers {
        if n == 0 {
            return Err(Error::Config("--workers must be at least 1".into()));
        }
        // a second initialization in the same process is harmless
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

fn read_scores(path: Option<&Path>, n: usize) -> Result<OverlapScores> {
    match path {
        None => Ok(OverlapScores::ones(n)),
        Some(p) => {
            let m = read_matrix(p)?;
            if m.ncols() != 1 {
                return Err(Error::Config(format!("{}: expected one value per line", p.display())));
            }
            OverlapScores::new(m.iter().copied().collect())
        }
    }
}

fn synth(common: &Common, out_dir: &Path) -> Result<()> {
    let mut cfg: SynthConfig = load_json(common.config.as_deref())?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    let pair = generate_scene(&cfg)?;
    pair.write_to(out_dir)?;
    eprintln!(
        "wrote {} source and {} target points, measured overlap {:.3}",
        pair.source.len(),
        pair.target.len(),
        pair.measured_overlap
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn register(
    common: &Common,
    source: &Path,
    target: &Path,
    source_features: Option<&Path>,
    target_features: Option<&Path>,
    gt: Option<&Path>,
    out_dir: &Path,
) -> Result<()> {
    let mut cfg: RegisterConfig = load_json(common.config.as_deref())?;
    if let Some(seed) = common.seed {
        cfg.ransac.seed = seed;
    }
    cfg.matching.validate()?;
    cfg.ransac.validate()?;
    init_workers(common.workers)?;
    let src = read_point_cloud(source)?;
    let tgt = read_point_cloud(target)?;
    let gt = gt.map(read_transform).transpose()?;
    let external = match (source_features, target_features) {
        (Some(fs), Some(ft)) => Some(ExternalFeatures {
            source: FeatureMatrix::new(read_matrix(fs)?)?,
            target: FeatureMatrix::new(read_matrix(ft)?)?,
        }),
        _ => None,
    };
    let providers = Providers::from_config(&cfg.matching, &tgt, gt.as_ref(), external)?;
    let pred = predict_correspondences(&src, &tgt, &cfg.matching, &providers)?;
    for m in &pred.diagnostics.messages {
        eprintln!("{m}");
    }
    create_dir(out_dir)?;
    pred.correspondences.write_tsv(&out_dir.join("correspondences.tsv"))?;
    if let Some(path) = &common.trace {
        let json = serde_json::to_string_pretty(&pred.diagnostics).map_err(|e| Error::ReportSchema(e.to_string()))?;
        write_file(path, &json)?;
    }
    let corr = &pred.correspondences;
    let transform = match cfg.estimator {
        Estimator::Ransac => {
            let result = ransac_register(corr, &src, &tgt, &cfg.ransac)?;
            if result.no_inliers {
                eprintln!("warning: no hypothesis had any inlier");
            }
            result.transform
        }
        Estimator::Svd => weighted_procrustes(corr, &src, &tgt, &corr.confidences())?,
    };
    write_transform(&out_dir.join("transform.txt"), &transform)?;
    eprintln!("{} correspondences", corr.len());
    Ok(())
}

fn solve(common: &Common, cross: &Path, struct_p: &Path, struct_q: &Path, mu_p: Option<&Path>, mu_q: Option<&Path>, output: &Path) -> Result<()> {
    let cfg: SolverConfig = load_json(common.config.as_deref())?;
    cfg.validate()?;
    // structure matrices are taken as given, so λ plays no role here
    let bundle = CostBundle::from_matrices(read_matrix(cross)?, read_matrix(struct_p)?, read_matrix(struct_q)?, 0.0)?;
    let (n, m) = bundle.shape();
    let mu_p = read_scores(mu_p, n)?;
    let mu_q = read_scores(mu_q, m)?;
    let solution = solve_coupled_ot_traced(&bundle, &mu_p, &mu_q, &cfg)?;
    write_matrix(output, solution.coupling.as_matrix())?;
    if let Some(path) = &common.trace {
        write_file(path, &format_trace(&solution.trace))?;
    }
    Ok(())
}

/// Returns whether every pair was processed.
fn eval(common: &Common, output: Option<&Path>) -> Result<bool> {
    let path = common
        .config
        .as_deref()
        .ok_or_else(|| Error::Config("eval needs --config <scenario.json>".into()))?;
    let mut scenario = Scenario::load(path)?;
    if let Some(seed) = common.seed {
        scenario.seed = seed;
    }
    if let Some(w) = common.workers {
        scenario.workers = w;
    }
    let report = run_scenario(&scenario)?;
    let json = report.to_json()?;
    match output {
        Some(p) => write_file(p, &json)?,
        None => println!("{json}"),
    }
    for r in report.records.iter().filter(|r| r.error.is_some()) {
        eprintln!("pair {} failed: {}", r.pair_id, r.error.as_deref().unwrap_or_default());
    }
    Ok(report.all_processed())
}

fn run(cli: Cli) -> Result<bool> {
    match &cli.command {
        Command::Synth { common, out_dir } => synth(common, out_dir).map(|_| true),
        Command::Register {
            common,
            source,
            target,
            source_features,
            target_features,
            gt,
            out_dir,
        } => register(
            common,
            source,
            target,
            source_features.as_deref(),
            target_features.as_deref(),
            gt.as_deref(),
            out_dir,
        )
        .map(|_| true),
        Command::Solve {
            common,
            cross,
            struct_p,
            struct_q,
            mu_p,
            mu_q,
            output,
        } => solve(common, cross, struct_p, struct_q, mu_p.as_deref(), mu_q.as_deref(), output).map(|_| true),
        Command::Eval { common, output } => eval(common, output.as_deref()),
    }
}

fn exit_code(result: &Result<bool>) -> u8 {
    match result {
        Ok(true) => 0,
        Ok(false) => EXIT_RUNTIME,
        Err(e) if e.is_config_error() => EXIT_CONFIG,
        Err(_) => EXIT_RUNTIME,
    }
}

fn main() -> ExitCode {
    let result = run(Cli::parse());
    if let Err(e) = &result {
        eprintln!("error: {e}");
    }
    ExitCode::from(exit_code(&result))
}
