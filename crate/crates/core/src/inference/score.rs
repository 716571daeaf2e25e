//! Variance scale, profiled residuals and score contributions, the reduced
//! information and the sandwich covariance.
//!
//! Conditional on `(X̂, λ)` the random effects are profiled out by ridge
//! regression, which leaves the residual `(I − H_λ)(y_n − X̂Θa_n)` with
//! `H_λ = X̂(X̂ᵀX̂ + λI)⁻¹X̂ᵀ`. Scores are `S_n = −σ⁻² (X̂ᵀ r_n) a_nᵀ` and the
//! information is `σ⁻² (AAᵀ ⊗ F)` with `F = λ X̂ᵀX̂ (X̂ᵀX̂ + λI)⁻¹`. All vectors
//! over `Θ` use column-stacking order, index `q + Q k`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::complexity::df_u;
use crate::data::{DataSet, ModelParams};
use crate::error::{NmfreError, Result};
use crate::linalg::{condition_number, frobenius_sq, kron, ridge_gram_cholesky};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DfThetaMode {
    /// `df_Θ = QK`.
    #[default]
    FixedQk,
    /// `df_Θ = #{Θ̂_qk > δ}`.
    ActiveSet,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sigma2Estimate {
    pub sigma2: f64,
    pub rss: f64,
    pub df_u: f64,
    pub df_theta: f64,
    pub denominator: f64,
    pub mode: DfThetaMode,
    pub delta: f64,
}

/// Degrees-of-freedom adjusted scale `RSS / (PN − df_U − df_Θ)`.
///
/// `delta = None` uses `1e-8 · max Θ̂` for the active-set threshold.
pub fn sigma2_hat(
    data: &DataSet,
    params: &ModelParams,
    mode: DfThetaMode,
    delta: Option<f64>,
) -> Result<Sigma2Estimate> {
    let (p, n) = (data.p(), data.n());
    let theta = &params.theta;
    let delta = delta.unwrap_or_else(|| 1e-8 * theta.max().max(0.0));
    let df_theta = match mode {
        DfThetaMode::FixedQk => theta.len() as f64,
        DfThetaMode::ActiveSet => theta.iter().filter(|&&v| v > delta).count() as f64,
    };
    let df_u = df_u(&params.x, params.lambda, n);
    let rss = frobenius_sq(&(&data.y - &params.x * (theta * &data.a + &params.u)));
    let denominator = (p * n) as f64 - df_u - df_theta;
    if !(denominator > 0.0) {
        return Err(NmfreError::NonPositiveDf { denominator });
    }
    Ok(Sigma2Estimate {
        sigma2: rss / denominator,
        rss,
        df_u,
        df_theta,
        denominator,
        mode,
        delta,
    })
}

fn ridge_chol(x: &DMatrix<f64>, lambda: f64) -> Result<Cholesky<f64, Dyn>> {
    if !(lambda > 0.0) {
        return Err(NmfreError::SingularSystem(format!(
            "ridge penalty must be positive, got {lambda}"
        )));
    }
    ridge_gram_cholesky(x, lambda)
        .ok_or_else(|| NmfreError::SingularSystem("X̂ᵀX̂ + λI is not positive definite".into()))
}

/// `(I − H_λ)(Y − X̂ΘA)`, one column per unit.
pub fn profiled_residuals(
    data: &DataSet,
    x_hat: &DMatrix<f64>,
    theta: &DMatrix<f64>,
    lambda: f64,
) -> Result<DMatrix<f64>> {
    let chol = ridge_chol(x_hat, lambda)?;
    let e = &data.y - x_hat * (theta * &data.a);
    // H e = X̂ (X̂ᵀX̂ + λI)⁻¹ X̂ᵀ e
    let h_e = x_hat * chol.solve(&x_hat.tr_mul(&e));
    Ok(e - h_e)
}

/// Same residuals through the profiled random effects:
/// `Y − X̂(ΘA + Û(Θ))` with `Û(Θ)` the uncentered ridge solution.
pub fn profiled_residuals_via_u(
    data: &DataSet,
    x_hat: &DMatrix<f64>,
    theta: &DMatrix<f64>,
    lambda: f64,
) -> Result<DMatrix<f64>> {
    let u = crate::estimator::u_step_uncentered(data, x_hat, theta, lambda)?;
    Ok(&data.y - x_hat * (theta * &data.a + u))
}

/// Per-unit score contributions `S_n = −σ⁻² (X̂ᵀ r_n) a_nᵀ`, each `Q x K`.
pub fn score_contributions(
    data: &DataSet,
    x_hat: &DMatrix<f64>,
    theta: &DMatrix<f64>,
    lambda: f64,
    sigma2: f64,
) -> Result<Vec<DMatrix<f64>>> {
    if !(sigma2 > 0.0) {
        return Err(NmfreError::InvalidConfig(format!(
            "variance scale must be positive, got {sigma2}"
        )));
    }
    let r = profiled_residuals(data, x_hat, theta, lambda)?;
    let g = x_hat.tr_mul(&r) * (-1.0 / sigma2);
    Ok((0..data.n())
        .map(|n| g.column(n) * data.a.column(n).transpose())
        .collect())
}

/// Stacks `vec(S_n)` as the columns of a `QK x N` matrix.
pub fn stack_scores(scores: &[DMatrix<f64>]) -> DMatrix<f64> {
    let qk = scores.first().map_or(0, |s| s.len());
    let mut out = DMatrix::zeros(qk, scores.len());
    for (n, s) in scores.iter().enumerate() {
        out.column_mut(n).copy_from_slice(s.as_slice());
    }
    out
}

/// `Σ_n vec(S_n) vec(S_n)ᵀ`.
pub fn score_outer_product(scores: &[DMatrix<f64>]) -> DMatrix<f64> {
    let s = stack_scores(scores);
    &s * s.transpose()
}

/// `X̂ᵀ(I − H_λ)X̂` in the closed form `λ G (G + λI)⁻¹`, `G = X̂ᵀX̂`.
pub fn inner_information_factor(x_hat: &DMatrix<f64>, lambda: f64) -> Result<DMatrix<f64>> {
    let chol = ridge_chol(x_hat, lambda)?;
    let g = x_hat.tr_mul(x_hat);
    // G and (G + λI)⁻¹ commute, so solving from the left gives the same product.
    let f = chol.solve(&g) * lambda;
    Ok((&f + f.transpose()) * 0.5)
}

/// Reduced information `σ⁻² (AAᵀ ⊗ F)`, stored by its Kronecker factors.
#[derive(Debug, Clone)]
pub struct ReducedInformation {
    aat: DMatrix<f64>,
    f: DMatrix<f64>,
    sigma2: f64,
    aat_chol: Cholesky<f64, Dyn>,
    f_chol: Cholesky<f64, Dyn>,
}

impl ReducedInformation {
    pub fn new(x_hat: &DMatrix<f64>, a: &DMatrix<f64>, lambda: f64, sigma2: f64) -> Result<Self> {
        let f = inner_information_factor(x_hat, lambda)?;
        Self::from_factors(a * a.transpose(), f, sigma2)
    }

    pub fn from_factors(aat: DMatrix<f64>, f: DMatrix<f64>, sigma2: f64) -> Result<Self> {
        if !(sigma2 > 0.0) {
            return Err(NmfreError::InvalidConfig(format!(
                "variance scale must be positive, got {sigma2}"
            )));
        }
        let aat_chol = checked_chol(&aat).ok_or(NmfreError::SingularInformation { factor: "AAᵀ" })?;
        let f_chol = checked_chol(&f).ok_or(NmfreError::SingularInformation {
            factor: "X̂ᵀ(I − H_λ)X̂",
        })?;
        Ok(Self {
            aat,
            f,
            sigma2,
            aat_chol,
            f_chol,
        })
    }

    pub fn q(&self) -> usize {
        self.f.nrows()
    }

    pub fn k(&self) -> usize {
        self.aat.nrows()
    }

    pub fn aat(&self) -> &DMatrix<f64> {
        &self.aat
    }

    pub fn inner_factor(&self) -> &DMatrix<f64> {
        &self.f
    }

    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }

    /// `I⁻¹ vec(V) = σ² vec(F⁻¹ V (AAᵀ)⁻¹)` using only the small factors.
    pub fn solve_mat(&self, v: &DMatrix<f64>) -> DMatrix<f64> {
        let left = self.f_chol.solve(v);
        // (AAᵀ)⁻¹ is symmetric: left · (AAᵀ)⁻¹ = ((AAᵀ)⁻¹ leftᵀ)ᵀ.
        self.aat_chol.solve(&left.transpose()).transpose() * self.sigma2
    }

    pub fn solve_vec(&self, v: &DVector<f64>) -> DVector<f64> {
        let m = DMatrix::from_column_slice(self.q(), self.k(), v.as_slice());
        DVector::from_column_slice(self.solve_mat(&m).as_slice())
    }

    /// Applies `I⁻¹` to every column of a `QK x m` matrix.
    pub fn solve_columns(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(m.nrows(), m.ncols());
        for (j, col) in m.column_iter().enumerate() {
            let v = self.solve_vec(&col.into_owned());
            out.column_mut(j).copy_from(&v);
        }
        out
    }

    /// The full `QK x QK` information. Diagnostics and tests only.
    pub fn dense(&self) -> DMatrix<f64> {
        kron(&self.aat, &self.f) / self.sigma2
    }

    pub fn condition_numbers(&self) -> (f64, f64) {
        (condition_number(&self.aat), condition_number(&self.f))
    }
}

fn checked_chol(m: &DMatrix<f64>) -> Option<Cholesky<f64, Dyn>> {
    let chol = Cholesky::new(m.clone())?;
    let max_diag = m.diagonal().amax();
    let l = chol.l_dirty();
    let min_pivot = (0..m.nrows()).map(|i| l[(i, i)]).fold(f64::INFINITY, f64::min);
    // Reject numerically singular factors that Cholesky happens to accept.
    if min_pivot * min_pivot <= 1e-13 * max_diag {
        None
    } else {
        Some(chol)
    }
}

/// `I⁻¹ Ĵ I⁻¹` with `Ĵ = scale · Σ vec(S_n)vec(S_n)ᵀ`.
///
/// Built as `scale · M Mᵀ` with `M = I⁻¹ [vec(S_1) … vec(S_N)]`, which is
/// symmetric positive semidefinite by construction.
pub fn sandwich_cov(scores: &[DMatrix<f64>], info: &ReducedInformation, scale: f64) -> DMatrix<f64> {
    let m = info.solve_columns(&stack_scores(scores));
    let v = &m * m.transpose() * scale;
    (&v + v.transpose()) * 0.5
}
