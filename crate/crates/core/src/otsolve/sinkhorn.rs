use nalgebra::{DMatrix, DVector};

use super::{CouplingMatrix, OverlapScores, DEFAULT_GAMMA_FLOOR};
use crate::error::{Error, Result};

/// Dual potentials of the unbalanced entropic problem.
#[derive(Debug, Clone, PartialEq)]
pub struct SinkhornState {
    pub u: DVector<f64>,
    pub v: DVector<f64>,
}

impl SinkhornState {
    pub fn zeros(n: usize, m: usize) -> Self {
        Self {
            u: DVector::zeros(n),
            v: DVector::zeros(m),
        }
    }

    /// `Γ = diag(e^{u/ε})·e^{−C/ε}·diag(e^{v/ε})`, evaluated as one exponent per entry.
    pub fn coupling(&self, cost: &DMatrix<f64>, epsilon: f64) -> CouplingMatrix {
        let log_kernel = cost / -epsilon;
        CouplingMatrix::from_log(&self.log_coupling(&log_kernel, epsilon))
    }

    pub(crate) fn log_coupling(&self, log_kernel: &DMatrix<f64>, epsilon: f64) -> DMatrix<f64> {
        let (n, m) = log_kernel.shape();
        DMatrix::from_fn(n, m, |i, j| (self.u[i] + self.v[j]) / epsilon + log_kernel[(i, j)])
    }

    /// Row sums `a = Γ·1` and column sums `b = Γᵀ·1` of the induced coupling.
    pub fn marginals(&self, cost: &DMatrix<f64>, epsilon: f64) -> (DVector<f64>, DVector<f64>) {
        let g = self.coupling(cost, epsilon);
        (g.row_sums(), g.col_sums())
    }
}

/// Early-exit threshold on the largest dual change over one u/v sweep.
pub const EARLY_EXIT_TOLERANCE: f64 = 1e-9;

/// Terms this far below the maximum change the sum by less than `e^{-50}`
/// relative each, so their exponentials are skipped.
const LSE_CUTOFF: f64 = -50.0;

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let sum: f64 = values
        .map(|x| x - max)
        .filter(|&d| d > LSE_CUTOFF)
        .map(f64::exp)
        .sum();
    max + sum.ln()
}

/// Log-domain alternating dual ascent on a fixed log-kernel `−C/ε`.
///
/// Column-major storage makes `log_kernel` columns contiguous for the
/// v-update; a transposed copy serves the u-update.
pub(crate) struct LogSinkhorn<'a> {
    log_kernel: &'a DMatrix<f64>,
    log_kernel_t: DMatrix<f64>,
    log_mu_p: Vec<f64>,
    log_mu_q: Vec<f64>,
    epsilon: f64,
    scale: f64,
}

impl<'a> LogSinkhorn<'a> {
    pub(crate) fn new(
        log_kernel: &'a DMatrix<f64>,
        mu_p: &[f64],
        mu_q: &[f64],
        epsilon: f64,
        tau: f64,
        floor: f64,
    ) -> Self {
        let log_floored = |mu: &[f64]| mu.iter().map(|&x| x.max(floor).ln()).collect();
        Self {
            log_kernel,
            log_kernel_t: log_kernel.transpose(),
            log_mu_p: log_floored(mu_p),
            log_mu_q: log_floored(mu_q),
            epsilon,
            scale: epsilon * tau / (epsilon + tau),
        }
    }

    /// `u_i ← s·(log μp_i − lse_j(v_j/ε + logK_ij))`; returns the largest change.
    fn update_u(&self, state: &mut SinkhornState) -> f64 {
        let v_eps: Vec<f64> = state.v.iter().map(|v| v / self.epsilon).collect();
        let mut delta: f64 = 0.0;
        for (i, row) in self.log_kernel_t.column_iter().enumerate() {
            let lse = log_sum_exp(row.iter().zip(&v_eps).map(|(k, v)| k + v));
            let next = self.scale * (self.log_mu_p[i] - lse);
            delta = delta.max((next - state.u[i]).abs());
            state.u[i] = next;
        }
        delta
    }

    fn update_v(&self, state: &mut SinkhornState) -> f64 {
        let u_eps: Vec<f64> = state.u.iter().map(|u| u / self.epsilon).collect();
        let mut delta: f64 = 0.0;
        for (j, col) in self.log_kernel.column_iter().enumerate() {
            let lse = log_sum_exp(col.iter().zip(&u_eps).map(|(k, u)| k + u));
            let next = self.scale * (self.log_mu_q[j] - lse);
            delta = delta.max((next - state.v[j]).abs());
            state.v[j] = next;
        }
        delta
    }

    /// Runs `n_iters` single updates: u on even steps, v on odd steps.
    pub(crate) fn run(&self, state: &mut SinkhornState, n_iters: usize, early_exit: bool) -> usize {
        let mut sweep_delta: f64 = 0.0;
        for it in 0..n_iters {
            let d = if it % 2 == 0 {
                self.update_u(state)
            } else {
                self.update_v(state)
            };
            sweep_delta = sweep_delta.max(d);
            if it % 2 == 1 {
                if early_exit && sweep_delta < EARLY_EXIT_TOLERANCE {
                    return it + 1;
                }
                sweep_delta = 0.0;
            }
        }
        n_iters
    }
}

/// Unbalanced entropic Sinkhorn from zero potentials.
///
/// Minimizes `⟨C, Γ⟩ + ε·Σ Γ(log Γ − 1) + τ·KL(Γ1 | μp) + τ·KL(Γᵀ1 | μq)` through
/// its dual. Every reduction over `e^{−C/ε}` is a log-sum-exp, so entries far
/// outside the `f64` exponent range are handled without overflow.
pub fn sinkhorn_unbalanced(
    cost: &DMatrix<f64>,
    mu_p: &OverlapScores,
    mu_q: &OverlapScores,
    epsilon: f64,
    tau: f64,
    n_iters: usize,
) -> Result<(CouplingMatrix, SinkhornState)> {
    let (n, m) = cost.shape();
    let mut state = SinkhornState::zeros(n, m);
    let gamma = sinkhorn_warm(cost, mu_p, mu_q, epsilon, tau, n_iters, false, &mut state)?;
    Ok((gamma, state))
}

/// As [`sinkhorn_unbalanced`], continuing from the given potentials.
#[allow(clippy::too_many_arguments)]
pub fn sinkhorn_warm(
    cost: &DMatrix<f64>,
    mu_p: &OverlapScores,
    mu_q: &OverlapScores,
    epsilon: f64,
    tau: f64,
    n_iters: usize,
    early_exit: bool,
    state: &mut SinkhornState,
) -> Result<CouplingMatrix> {
    let (n, m) = cost.shape();
    if mu_p.len() != n || mu_q.len() != m {
        return Err(Error::shape("sinkhorn marginals", format!("{n} and {m}"), format!("{} and {}", mu_p.len(), mu_q.len())));
    }
    if state.u.len() != n || state.v.len() != m {
        return Err(Error::shape("sinkhorn warm-start duals", format!("{n} and {m}"), format!("{} and {}", state.u.len(), state.v.len())));
    }
    if !(epsilon > 0.0 && epsilon.is_finite() && tau > 0.0 && tau.is_finite()) {
        return Err(Error::Domain(format!("ε and τ must be positive, got ε = {epsilon}, τ = {tau}")));
    }
    if !cost.iter().all(|c| c.is_finite()) {
        return Err(Error::Domain("transport cost contains non-finite entries".into()));
    }
    let log_kernel = cost / -epsilon;
    LogSinkhorn::new(&log_kernel, mu_p.as_slice(), mu_q.as_slice(), epsilon, tau, DEFAULT_GAMMA_FLOOR).run(state, n_iters, early_exit);
    Ok(CouplingMatrix::from_log(&state.log_coupling(&log_kernel, epsilon)))
}
