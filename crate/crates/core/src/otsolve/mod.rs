//! Coupled Wasserstein / Gromov-Wasserstein transport solver.
//!
//! The outer loop is a proximal-point scheme centred on the previous
//! coupling `Γ^(k)`; each outer step solves an unbalanced entropic problem
//! with cost `ξ1·Cpq + ξ2·H(Γ^(k)) − ε·log Γ^(k)` by log-domain Sinkhorn.

mod sinkhorn;

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::costs::{gw_objective, gw_term, CostBundle};
use crate::error::{Error, Result};

pub use sinkhorn::{sinkhorn_unbalanced, sinkhorn_warm, SinkhornState, EARLY_EXIT_TOLERANCE};

pub const DEFAULT_GAMMA_FLOOR: f64 = 1e-30;

/// Per-point transport mass in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct OverlapScores(Vec<f64>);

impl OverlapScores {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if let Some((i, w)) = weights.iter().enumerate().find(|(_, w)| !(0.0..=1.0).contains(*w)) {
            return Err(Error::Domain(format!("overlap score {i} is {w}, outside [0, 1]")));
        }
        Ok(Self(weights))
    }

    pub fn uniform(n: usize, value: f64) -> Result<Self> {
        Self::new(vec![value; n])
    }

    pub fn ones(n: usize) -> Self {
        Self(vec![1.0; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn total(&self) -> f64 {
        self.0.iter().sum()
    }

    pub fn select(&self, indices: &[usize]) -> OverlapScores {
        OverlapScores(indices.iter().map(|&i| self.0[i]).collect())
    }

    pub fn to_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.0)
    }
}

impl TryFrom<Vec<f64>> for OverlapScores {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<OverlapScores> for Vec<f64> {
    fn from(s: OverlapScores) -> Self {
        s.0
    }
}

/// Nonnegative transport plan `Γ`.
#[derive(Debug, Clone, PartialEq)]
pub struct CouplingMatrix(DMatrix<f64>);

impl CouplingMatrix {
    pub fn new(entries: DMatrix<f64>) -> Result<Self> {
        if !entries.iter().all(|&g| g.is_finite() && g >= 0.0) {
            return Err(Error::Domain("coupling entries must be finite and nonnegative".into()));
        }
        Ok(Self(entries))
    }

    pub(crate) fn from_log(log_entries: &DMatrix<f64>) -> Self {
        Self(log_entries.map(f64::exp))
    }

    /// Product coupling `μp·μqᵀ`.
    pub fn product(mu_p: &OverlapScores, mu_q: &OverlapScores) -> Self {
        Self(mu_p.to_vector() * mu_q.to_vector().transpose())
    }

    pub fn shape(&self) -> (usize, usize) {
        self.0.shape()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0[(i, j)]
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }

    pub fn row_sums(&self) -> DVector<f64> {
        self.0.column_sum()
    }

    pub fn col_sums(&self) -> DVector<f64> {
        self.0.row_sum().transpose()
    }

    pub fn total_mass(&self) -> f64 {
        self.0.sum()
    }

    /// Column of the largest entry in each row; ties go to the lowest column.
    pub fn row_argmax(&self) -> Vec<usize> {
        self.0.row_iter().map(|r| first_argmax(r.iter().copied())).collect()
    }

    /// Row of the largest entry in each column; ties go to the lowest row.
    pub fn col_argmax(&self) -> Vec<usize> {
        self.0.column_iter().map(|c| first_argmax(c.iter().copied())).collect()
    }
}

fn first_argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// Parameters of the coupled solver.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub xi1: f64,
    /// Structure weight reached by the ramp, or used throughout without it.
    pub xi2_final: f64,
    pub tau: f64,
    pub epsilon: f64,
    pub outer_iters: usize,
    pub inner_iters: usize,
    pub gamma_floor: f64,
    pub ramp_xi2: bool,
    /// Stop an inner loop once a full u/v sweep moves no dual by more than
    /// [`EARLY_EXIT_TOLERANCE`].
    pub early_exit: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            xi1: 1.0,
            xi2_final: 1.0,
            tau: 5.0,
            epsilon: 0.001,
            outer_iters: 20,
            inner_iters: 100,
            gamma_floor: DEFAULT_GAMMA_FLOOR,
            ramp_xi2: true,
            early_exit: false,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, x: f64| {
            if x > 0.0 && x.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("solver {name} must be positive and finite, got {x}")))
            }
        };
        positive("tau", self.tau)?;
        positive("epsilon", self.epsilon)?;
        positive("gamma_floor", self.gamma_floor)?;
        for (name, x) in [("xi1", self.xi1), ("xi2_final", self.xi2_final)] {
            if !(x >= 0.0 && x.is_finite()) {
                return Err(Error::Config(format!("solver {name} must be nonnegative and finite, got {x}")));
            }
        }
        if self.outer_iters == 0 || self.inner_iters == 0 {
            return Err(Error::Config("solver iteration counts must be at least 1".into()));
        }
        Ok(())
    }

    /// Structure weight used at outer iteration `k` (0-based).
    pub fn xi2_at(&self, k: usize) -> f64 {
        if self.ramp_xi2 {
            k as f64 / self.outer_iters as f64 * self.xi2_final
        } else {
            self.xi2_final
        }
    }
}

/// `Σ a log(a/b) − a + b`, with `0·log 0 = 0`.
///
/// A positive `a_i` against `b_i = 0` gives `+∞`.
pub fn kl_divergence(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Domain(format!("KL arguments differ in length: {} vs {}", a.len(), b.len())));
    }
    if a.iter().chain(b).any(|&x| !(x >= 0.0)) {
        return Err(Error::Domain("KL arguments must be nonnegative".into()));
    }
    Ok(a.iter()
        .zip(b)
        .map(|(&x, &y)| if x > 0.0 { x * (x / y).ln() - x + y } else { y })
        .sum())
}

fn check_problem(bundle: &CostBundle, mu_p: &OverlapScores, mu_q: &OverlapScores) -> Result<()> {
    let (n, m) = bundle.shape();
    if mu_p.len() != n || mu_q.len() != m {
        return Err(Error::shape(
            "overlap scores vs cost bundle",
            format!("{n} and {m}"),
            format!("{} and {}", mu_p.len(), mu_q.len()),
        ));
    }
    Ok(())
}

fn floored(mu: &OverlapScores, floor: f64) -> Vec<f64> {
    mu.as_slice().iter().map(|&x| x.max(floor)).collect()
}

/// `C = ξ1·Cpq + ξ2·H(Cp, Cq, Γ^(k)) − ε·log max(Γ^(k), floor)`.
pub fn proximal_cost(bundle: &CostBundle, coupling_prev: &CouplingMatrix, config: &SolverConfig, xi2_now: f64) -> Result<DMatrix<f64>> {
    if coupling_prev.shape() != bundle.shape() {
        return Err(Error::shape("proximal cost coupling", format!("{:?}", bundle.shape()), format!("{:?}", coupling_prev.shape())));
    }
    let g = coupling_prev.as_matrix();
    let mut c = &bundle.cross * config.xi1;
    if xi2_now != 0.0 {
        c += gw_term(&bundle.struct_p, &bundle.struct_q, g)? * xi2_now;
    }
    c.zip_apply(g, |ci, gi| *ci -= config.epsilon * gi.max(config.gamma_floor).ln());
    Ok(c)
}

/// `ξ1⟨Cpq, Γ⟩ + ξ2⟨H(Γ), Γ⟩ + τ·(KL(Γ1 | μp) + KL(Γᵀ1 | μq))`.
///
/// Scores are floored at [`DEFAULT_GAMMA_FLOOR`] as in the solver.
#[allow(clippy::too_many_arguments)]
pub fn coupled_objective(
    bundle: &CostBundle,
    coupling: &CouplingMatrix,
    mu_p: &OverlapScores,
    mu_q: &OverlapScores,
    xi1: f64,
    xi2: f64,
    tau: f64,
) -> Result<f64> {
    Ok(objective_terms(bundle, coupling, mu_p, mu_q, xi1, xi2, tau, DEFAULT_GAMMA_FLOOR)?.0)
}

/// `(objective, row KL, column KL)`.
#[allow(clippy::too_many_arguments)]
fn objective_terms(
    bundle: &CostBundle,
    coupling: &CouplingMatrix,
    mu_p: &OverlapScores,
    mu_q: &OverlapScores,
    xi1: f64,
    xi2: f64,
    tau: f64,
    floor: f64,
) -> Result<(f64, f64, f64)> {
    check_problem(bundle, mu_p, mu_q)?;
    if coupling.shape() != bundle.shape() {
        return Err(Error::shape("objective coupling", format!("{:?}", bundle.shape()), format!("{:?}", coupling.shape())));
    }
    let g = coupling.as_matrix();
    let mut value = xi1 * bundle.cross.dot(g);
    if xi2 != 0.0 {
        value += xi2 * gw_objective(&bundle.struct_p, &bundle.struct_q, g)?;
    }
    let kl_row = kl_divergence(coupling.row_sums().as_slice(), &floored(mu_p, floor))?;
    let kl_col = kl_divergence(coupling.col_sums().as_slice(), &floored(mu_q, floor))?;
    Ok((value + tau * (kl_row + kl_col), kl_row, kl_col))
}

/// One outer iteration of the diagnostic trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub xi2: f64,
    pub objective: f64,
    pub kl_row: f64,
    pub kl_col: f64,
}

/// Tab-separated trace with a header line.
pub fn format_trace(rows: &[TraceRow]) -> String {
    let mut out = String::from("iteration\txi2\tobjective\tkl_row\tkl_col\n");
    for r in rows {
        let _ = writeln!(out, "{}\t{:e}\t{:e}\t{:e}\t{:e}", r.iteration, r.xi2, r.objective, r.kl_row, r.kl_col);
    }
    out
}

/// Full solver output.
#[derive(Debug, Clone)]
pub struct CoupledSolution {
    pub coupling: CouplingMatrix,
    pub state: SinkhornState,
    pub trace: Vec<TraceRow>,
}

/// Runs the proximal outer loop from `Γ^(0) = μp·μqᵀ`.
pub fn solve_coupled_ot(bundle: &CostBundle, mu_p: &OverlapScores, mu_q: &OverlapScores, config: &SolverConfig) -> Result<CouplingMatrix> {
    Ok(solve(bundle, mu_p, mu_q, config, false)?.coupling)
}

/// As [`solve_coupled_ot`], recording the objective after every outer step.
pub fn solve_coupled_ot_traced(
    bundle: &CostBundle,
    mu_p: &OverlapScores,
    mu_q: &OverlapScores,
    config: &SolverConfig,
) -> Result<CoupledSolution> {
    solve(bundle, mu_p, mu_q, config, true)
}

fn solve(bundle: &CostBundle, mu_p: &OverlapScores, mu_q: &OverlapScores, config: &SolverConfig, trace: bool) -> Result<CoupledSolution> {
    config.validate()?;
    check_problem(bundle, mu_p, mu_q)?;
    for (side, mu) in [("source", mu_p), ("target", mu_q)] {
        if mu.total() <= 0.0 {
            return Err(Error::Infeasible(format!("{side} overlap scores carry no mass")));
        }
    }
    let (n, m) = bundle.shape();
    let eps = config.epsilon;
    let log_floor = config.gamma_floor.ln();
    let mut gamma = CouplingMatrix::product(mu_p, mu_q);
    let mut log_gamma = gamma.as_matrix().map(|g| g.max(config.gamma_floor).ln());
    let mut state = SinkhornState::zeros(n, m);
    let mut rows = Vec::new();
    for k in 0..config.outer_iters {
        let xi2 = config.xi2_at(k);
        // log-kernel of the proximal cost, −C/ε, built from log Γ^(k) directly
        let mut log_kernel = &bundle.cross * (-config.xi1 / eps);
        if xi2 != 0.0 {
            log_kernel -= gw_term(&bundle.struct_p, &bundle.struct_q, gamma.as_matrix())? * (xi2 / eps);
        }
        log_kernel.zip_apply(&log_gamma, |lk, lg| *lk += lg.max(log_floor));
        sinkhorn::LogSinkhorn::new(&log_kernel, mu_p.as_slice(), mu_q.as_slice(), eps, config.tau, config.gamma_floor).run(
            &mut state,
            config.inner_iters,
            config.early_exit,
        );
        log_gamma = state.log_coupling(&log_kernel, eps);
        gamma = CouplingMatrix::from_log(&log_gamma);
        if !gamma.as_matrix().iter().all(|g| g.is_finite()) {
            return Err(Error::NonFinite("coupling after outer iteration"));
        }
        if trace {
            let (objective, kl_row, kl_col) = objective_terms(bundle, &gamma, mu_p, mu_q, config.xi1, xi2, config.tau, config.gamma_floor)?;
            rows.push(TraceRow {
                iteration: k,
                xi2,
                objective,
                kl_row,
                kl_col,
            });
        }
    }
    Ok(CoupledSolution {
        coupling: gamma,
        state,
        trace: rows,
    })
}
