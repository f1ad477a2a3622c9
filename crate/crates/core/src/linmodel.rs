//! Linearized squared-range model and the centralized closed-form
//! estimators built on it.
//!
//! Squaring `r_i = ‖s_i − p‖ + w_i` gives
//! `r_i² − ‖s_i‖² = ‖p‖² − 2 s_iᵀp + 2‖s_i − p‖w_i + w_i²`, which is linear in
//! the lifted unknown `x = [‖p‖², pᵀ]ᵀ` once the coupling between `x[0]` and
//! `p` is dropped. Each measurement becomes one row `y_i = a_iᵀx + e_i` with a
//! diagonal weight (inverse noise variance) that depends on whether the
//! `w_i²` term is neglected ([`WeightMode::Unbiased`]) or matched in second
//! moment ([`WeightMode::Quadratic`]).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sensing::{Measurement, NoiseModel};
use crate::world::Position;

/// Relative eigenvalue floor below which an information matrix is treated
/// as rank deficient.
pub const SINGULAR_RTOL: f64 = 1e-13;
/// Condition number above which solves log a warning.
pub const COND_WARN: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    /// `C_y⁻¹_ii = 1 / (4 d_i² σ_i²)`.
    Unbiased,
    /// `C_y⁻¹_ii = 1 / (4 d_i² σ_i² + 2 σ_i⁴)`.
    Quadratic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinRow {
    pub y: f64,
    /// `(1, −2 s_iᵀ)`.
    pub a: DVector<f64>,
    pub w_inv: f64,
}

impl LinRow {
    pub fn dim(&self) -> usize {
        self.a.len() - 1
    }
}

fn design_row(s: &Position) -> DVector<f64> {
    let d = s.dim();
    let mut a = DVector::zeros(d + 1);
    a[0] = 1.0;
    for (k, c) in s.coords().iter().enumerate() {
        a[k + 1] = -2.0 * c;
    }
    a
}

/// Weighted row for a noisy measurement. `dist_plugin` stands in for the
/// unknown `‖s_i − p‖` inside the weight.
pub fn build_row(
    s: &Position,
    r: f64,
    sigma: f64,
    dist_plugin: f64,
    mode: WeightMode,
) -> Result<LinRow> {
    let var_lin = 4.0 * dist_plugin * dist_plugin * sigma * sigma;
    let var = match mode {
        WeightMode::Unbiased => var_lin,
        WeightMode::Quadratic => var_lin + 2.0 * sigma.powi(4),
    };
    if !(sigma > 0.0 && dist_plugin > 0.0 && var > 0.0 && var.is_finite()) {
        return Err(Error::DegenerateWeight {
            sigma,
            dist: dist_plugin,
        });
    }
    Ok(LinRow {
        y: r * r - s.norm_squared(),
        a: design_row(s),
        w_inv: 1.0 / var,
    })
}

/// Row with unit weight, used when the data carry no noise.
pub fn build_row_noiseless(s: &Position, r: f64) -> LinRow {
    LinRow {
        y: r * r - s.norm_squared(),
        a: design_row(s),
        w_inv: 1.0,
    }
}

/// Where the distance inside the row weight comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightSource {
    /// Measured range, or distance to a prior estimate when one is supplied.
    Plugin,
    /// True agent/target distance and the generating sigma.
    Oracle,
}

/// Everything needed to turn a measurement into a weighted row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RowPolicy {
    pub mode: WeightMode,
    pub source: WeightSource,
    pub noise: NoiseModel,
    /// Floor applied to plug-in distances.
    pub min_distance: f64,
}

impl RowPolicy {
    /// `prior` is the estimator's previous target estimate, `truth` the true
    /// target position (only read in oracle mode).
    pub fn row(
        &self,
        m: &Measurement,
        prior: Option<&Position>,
        truth: Option<&Position>,
    ) -> Result<LinRow> {
        if self.noise.is_noiseless() {
            return Ok(build_row_noiseless(&m.agent_pos, m.range));
        }
        let (dist, sigma) = match (self.source, truth) {
            (WeightSource::Oracle, Some(p)) => (m.agent_pos.distance(p), m.sigma),
            (WeightSource::Oracle, None) => {
                return Err(Error::InvalidArgument(
                    "oracle weights need the true target position".into(),
                ))
            }
            (WeightSource::Plugin, _) => {
                let d = prior
                    .map(|p| m.agent_pos.distance(p))
                    .unwrap_or(m.range)
                    .max(self.min_distance);
                (d, self.noise.sigma_at(d))
            }
        };
        build_row(&m.agent_pos, m.range, sigma, dist, self.mode)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinSystem {
    pub rows: Vec<LinRow>,
    pub dim: usize,
    pub mode: WeightMode,
}

impl LinSystem {
    pub fn new(rows: Vec<LinRow>, dim: usize, mode: WeightMode) -> Self {
        LinSystem { rows, dim, mode }
    }

    /// `(AᵀC_y⁻¹A, AᵀC_y⁻¹y)`.
    pub fn normal_equations(&self) -> (DMatrix<f64>, DVector<f64>) {
        let m = self.dim + 1;
        let mut info = DMatrix::zeros(m, m);
        let mut vec = DVector::zeros(m);
        for row in &self.rows {
            info.ger(row.w_inv, &row.a, &row.a, 1.0);
            vec.axpy(row.w_inv * row.y, &row.a, 1.0);
        }
        (info, vec)
    }

    pub fn design_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.rows.len(), self.dim + 1, |i, j| self.rows[i].a[j])
    }

    pub fn observations(&self) -> DVector<f64> {
        DVector::from_iterator(self.rows.len(), self.rows.iter().map(|r| r.y))
    }

    pub fn weights(&self) -> DVector<f64> {
        DVector::from_iterator(self.rows.len(), self.rows.iter().map(|r| r.w_inv))
    }
}

/// Estimate of the lifted unknown `x = [‖p‖², pᵀ]ᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct Estimate {
    pub x_hat: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub p_hat: Position,
}

impl Estimate {
    pub fn dim(&self) -> usize {
        self.p_hat.dim()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiasVector {
    pub bias: DVector<f64>,
    pub psi: DVector<f64>,
}

/// Cholesky factor of an information matrix that passed the rank check.
/// The matrix is equilibrated first (`S = D^{-1/2} P D^{-1/2}`, `D` its
/// diagonal) so the check ignores the scale gap between the `‖p‖²` and
/// `p` coordinates.
pub(crate) struct InfoFactor {
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    scale: DVector<f64>,
}

impl InfoFactor {
    pub(crate) fn new(info: &DMatrix<f64>) -> Result<Self> {
        let m = info.nrows();
        let singular = || Error::SingularInformation { needed: m };
        if !info.iter().all(|v| v.is_finite()) {
            return Err(singular());
        }
        let sym = symmetrized(info);
        let diag = sym.diagonal();
        if !diag.iter().all(|&d| d > 0.0) {
            return Err(singular());
        }
        let scale = diag.map(|d| 1.0 / d.sqrt());
        let eq = DMatrix::from_fn(m, m, |i, j| sym[(i, j)] * scale[i] * scale[j]);
        let eig = eq.clone().symmetric_eigenvalues();
        let max = eig.max();
        let min = eig.min();
        if !(max > 0.0) || min <= SINGULAR_RTOL * max {
            return Err(singular());
        }
        if max / min > COND_WARN {
            log::warn!("ill-conditioned information matrix (cond {:.3e})", max / min);
        }
        let chol = eq.cholesky().ok_or_else(singular)?;
        Ok(InfoFactor { chol, scale })
    }

    pub(crate) fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let y = self.chol.solve(&b.component_mul(&self.scale));
        y.component_mul(&self.scale)
    }

    pub(crate) fn inverse(&self) -> DMatrix<f64> {
        let inv = self.chol.inverse();
        let m = inv.nrows();
        symmetrized(&DMatrix::from_fn(m, m, |i, j| inv[(i, j)] * self.scale[i] * self.scale[j]))
    }
}

pub(crate) fn symmetrized(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// `x̂ = P⁻¹z`, `cov = P⁻¹` for an information pair.
pub fn solve_information(info: &DMatrix<f64>, vec: &DVector<f64>) -> Result<Estimate> {
    if info.nrows() != vec.len() || info.ncols() != vec.len() {
        return Err(Error::DimensionMismatch {
            expected: info.nrows(),
            got: vec.len(),
        });
    }
    let factor = InfoFactor::new(info)?;
    let mut x_hat = factor.solve(vec);
    // one step of iterative refinement
    let residual = vec - info * &x_hat;
    x_hat += factor.solve(&residual);
    let cov = factor.inverse();
    let p_hat = Position::new(x_hat.as_slice()[1..].to_vec());
    Ok(Estimate { x_hat, cov, p_hat })
}

pub fn solve_centralized(sys: &LinSystem) -> Result<Estimate> {
    let (info, vec) = sys.normal_equations();
    solve_information(&info, &vec)
}

/// Closed-form mean error of the weighted estimator when the data carry the
/// `w∘w` term: `(AᵀC_y⁻¹A)⁻¹AᵀC_y⁻¹Ψ` with `Ψ_i = σ_i²`.
pub fn analytic_bias(sys: &LinSystem, sigmas: &[f64]) -> Result<BiasVector> {
    if sigmas.len() != sys.rows.len() {
        return Err(Error::DimensionMismatch {
            expected: sys.rows.len(),
            got: sigmas.len(),
        });
    }
    let (info, _) = sys.normal_equations();
    let factor = InfoFactor::new(&info)?;
    let psi = DVector::from_iterator(sigmas.len(), sigmas.iter().map(|s| s * s));
    let mut rhs = DVector::zeros(sys.dim + 1);
    for (row, p) in sys.rows.iter().zip(psi.iter()) {
        rhs.axpy(row.w_inv * p, &row.a, 1.0);
    }
    Ok(BiasVector {
        bias: factor.solve(&rhs),
        psi,
    })
}

/// `Σ_i (‖s_i − p‖² − r_i²)²`.
pub fn srls_cost(p: &Position, measurements: &[Measurement]) -> f64 {
    measurements
        .iter()
        .map(|m| {
            let d2 = m.agent_pos.distance(p).powi(2);
            (d2 - m.range * m.range).powi(2)
        })
        .sum()
}
