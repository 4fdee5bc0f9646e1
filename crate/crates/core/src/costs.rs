//! Cost matrices for the coupled transport problem.
//!
//! * cross cost: distance between L2-normalized descriptors of the two clouds;
//! * structure cost: per-cloud blend of `2·tanh(‖x - y‖)` and descriptor distance;
//! * Gromov-Wasserstein term `H(Cp, Cq, Γ)` and objective `⟨H, Γ⟩`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::geometry::{Point, PointCloud};

/// Rows with a norm below this cannot be normalized and are rejected.
pub const MIN_FEATURE_NORM: f64 = 1e-12;

/// Per-point descriptors, one row per point, all of the same dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    rows: DMatrix<f64>,
}

impl FeatureMatrix {
    pub fn new(rows: DMatrix<f64>) -> Result<Self> {
        if !rows.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("feature matrix"));
        }
        for (i, row) in rows.row_iter().enumerate() {
            let norm = row.norm();
            if norm < MIN_FEATURE_NORM {
                return Err(Error::DegenerateFeature { row: i, norm });
            }
        }
        Ok(Self { rows })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != dim) {
            return Err(Error::shape("feature row width", dim, format!("{} (row {i})", r.len())));
        }
        Self::new(DMatrix::from_fn(rows.len(), dim, |r, c| rows[r][c]))
    }

    pub fn len(&self) -> usize {
        self.rows.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.rows.row(i).iter().copied().collect()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.rows
    }

    /// Sub-matrix with the given rows, in order.
    pub fn select(&self, indices: &[usize]) -> FeatureMatrix {
        FeatureMatrix {
            rows: self.rows.select_rows(indices),
        }
    }

    /// Row-normalized copy, stored row-major for fast pairwise distances.
    fn unit_rows(&self) -> Vec<Vec<f64>> {
        self.rows
            .row_iter()
            .map(|r| {
                let n = r.norm();
                r.iter().map(|v| v / n).collect()
            })
            .collect()
    }
}

/// Distance between two descriptors after L2 normalization; in `[0, 2]`.
pub fn feature_distance(f: &[f64], g: &[f64]) -> Result<f64> {
    if f.len() != g.len() {
        return Err(Error::shape("feature_distance", f.len(), g.len()));
    }
    let nf = f.iter().map(|v| v * v).sum::<f64>().sqrt();
    let ng = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    for (row, norm) in [(0, nf), (1, ng)] {
        if norm < MIN_FEATURE_NORM || !norm.is_finite() {
            return Err(Error::DegenerateFeature { row, norm });
        }
    }
    Ok(f.iter()
        .zip(g)
        .map(|(a, b)| (a / nf - b / ng).powi(2))
        .sum::<f64>()
        .sqrt())
}

fn unit_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Bounded Euclidean structure distance `2·tanh(‖p - q‖)`, in `[0, 2)`.
pub fn euclid_structure_distance(p: &Point, q: &Point) -> f64 {
    2.0 * (p - q).norm().tanh()
}

/// `C[i][j] = feature_distance(fp[i], fq[j])`.
pub fn build_cross_cost(fp: &FeatureMatrix, fq: &FeatureMatrix) -> Result<DMatrix<f64>> {
    if fp.dim() != fq.dim() {
        return Err(Error::shape("cross-cost feature dimension", fp.dim(), fq.dim()));
    }
    let up = fp.unit_rows();
    let uq = fq.unit_rows();
    Ok(DMatrix::from_fn(up.len(), uq.len(), |i, j| unit_distance(&up[i], &uq[j])))
}

/// Intra-cloud structure cost `λ·2tanh(‖x_i - x_k‖) + (1-λ)·D_f(f_i, f_k)`.
///
/// Symmetric with an exactly zero diagonal.
pub fn build_structure_cost(cloud: &PointCloud, features: &FeatureMatrix, lambda: f64) -> Result<DMatrix<f64>> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Domain(format!("structure blend λ must lie in [0, 1], got {lambda}")));
    }
    if cloud.len() != features.len() {
        return Err(Error::shape("structure cost cloud/feature rows", cloud.len(), features.len()));
    }
    let n = cloud.len();
    let unit = features.unit_rows();
    let mut c = DMatrix::zeros(n, n);
    for i in 0..n {
        for k in (i + 1)..n {
            let v = lambda * euclid_structure_distance(cloud.point(i), cloud.point(k))
                + (1.0 - lambda) * unit_distance(&unit[i], &unit[k]);
            c[(i, k)] = v;
            c[(k, i)] = v;
        }
    }
    Ok(c)
}

/// Cross cost plus both structure costs for one transport instance.
#[derive(Debug, Clone, PartialEq)]
pub struct CostBundle {
    pub cross: DMatrix<f64>,
    pub struct_p: DMatrix<f64>,
    pub struct_q: DMatrix<f64>,
    pub lambda: f64,
}

impl CostBundle {
    pub fn build(
        cloud_p: &PointCloud,
        features_p: &FeatureMatrix,
        cloud_q: &PointCloud,
        features_q: &FeatureMatrix,
        lambda: f64,
    ) -> Result<Self> {
        Ok(Self {
            cross: build_cross_cost(features_p, features_q)?,
            struct_p: build_structure_cost(cloud_p, features_p, lambda)?,
            struct_q: build_structure_cost(cloud_q, features_q, lambda)?,
            lambda,
        })
    }

    /// Bundle from precomputed matrices; shapes and finiteness are checked.
    pub fn from_matrices(cross: DMatrix<f64>, struct_p: DMatrix<f64>, struct_q: DMatrix<f64>, lambda: f64) -> Result<Self> {
        let (n, m) = cross.shape();
        if struct_p.shape() != (n, n) {
            return Err(Error::shape("struct_p", format!("{n}x{n}"), format!("{:?}", struct_p.shape())));
        }
        if struct_q.shape() != (m, m) {
            return Err(Error::shape("struct_q", format!("{m}x{m}"), format!("{:?}", struct_q.shape())));
        }
        if !cross.iter().chain(struct_p.iter()).chain(struct_q.iter()).all(|v| v.is_finite()) {
            return Err(Error::NonFinite("cost matrices"));
        }
        Ok(Self {
            cross,
            struct_p,
            struct_q,
            lambda,
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        self.cross.shape()
    }
}

fn check_gw_shapes(struct_p: &DMatrix<f64>, struct_q: &DMatrix<f64>, coupling: &DMatrix<f64>) -> Result<()> {
    let (n, m) = coupling.shape();
    if struct_p.shape() != (n, n) {
        return Err(Error::shape("gw_term struct_p", format!("{n}x{n}"), format!("{:?}", struct_p.shape())));
    }
    if struct_q.shape() != (m, m) {
        return Err(Error::shape("gw_term struct_q", format!("{m}x{m}"), format!("{:?}", struct_q.shape())));
    }
    Ok(())
}

/// `H[k][l] = Σ_i Σ_j (Cp[i][k] - Cq[j][l])² Γ[i][j]`.
///
/// Evaluated through the expansion of the square:
/// `H = (Cp∘Cp)ᵀ·a·1ᵀ + 1·((Cq∘Cq)ᵀ·b)ᵀ − 2·Cpᵀ·Γ·Cq` with `a = Γ·1`, `b = Γᵀ·1`,
/// which costs `O(N²M + NM²)` instead of `O(N²M²)`.
pub fn gw_term(struct_p: &DMatrix<f64>, struct_q: &DMatrix<f64>, coupling: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_gw_shapes(struct_p, struct_q, coupling)?;
    let (n, m) = coupling.shape();
    let a: DVector<f64> = coupling.column_sum();
    let b: DVector<f64> = coupling.row_sum().transpose();
    let row_part = struct_p.component_mul(struct_p).tr_mul(&a);
    let col_part = struct_q.component_mul(struct_q).tr_mul(&b);
    let mut h = struct_p.tr_mul(&(coupling * struct_q));
    h *= -2.0;
    for l in 0..m {
        for k in 0..n {
            h[(k, l)] += row_part[k] + col_part[l];
        }
    }
    Ok(h)
}

/// Gromov-Wasserstein objective `⟨H(Cp, Cq, Γ), Γ⟩`.
pub fn gw_objective(struct_p: &DMatrix<f64>, struct_q: &DMatrix<f64>, coupling: &DMatrix<f64>) -> Result<f64> {
    let h = gw_term(struct_p, struct_q, coupling)?;
    // the expansion can dip below zero by rounding when the true value is 0
    Ok(h.dot(coupling).max(0.0))
}
