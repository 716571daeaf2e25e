//! Inference for the covariate effects `Θ` conditional on `(X̂, λ)`.
//!
//! Standard errors come from the sandwich `I⁻¹ Ĵ I⁻¹` built on per-unit
//! profiled scores; bootstrap standard errors and percentile intervals come
//! from the one-step multiplier bootstrap projected onto `Θ ≥ 0`.

mod bootstrap;
mod score;

pub use bootstrap::{
    column_sd, draw_multipliers, one_step_bootstrap, one_step_replicates, percentile_intervals,
    quantile_sorted, BootstrapDraws, MultiplierDist,
};
pub use score::{
    inner_information_factor, profiled_residuals, profiled_residuals_via_u, sandwich_cov,
    score_contributions, score_outer_product, sigma2_hat, stack_scores, DfThetaMode,
    ReducedInformation, Sigma2Estimate,
};

use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::{DataSet, ModelParams};
use crate::error::{NmfreError, Result};
use crate::linalg::condition_number;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestSide {
    /// `H0: θ = 0` against `θ > 0`; the null sits on the boundary.
    #[default]
    OneSided,
    TwoSided,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SideOverride {
    pub q: usize,
    pub k: usize,
    pub side: TestSide,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    /// Bootstrap replicates; 0 skips the bootstrap.
    pub b: usize,
    pub multiplier_dist: MultiplierDist,
    pub df_theta_mode: DfThetaMode,
    /// Active-set threshold; `None` means `1e-8 · max Θ̂`.
    pub active_set_delta: Option<f64>,
    pub test_side: TestSide,
    pub side_overrides: Vec<SideOverride>,
    pub ci_level: f64,
    pub rng_seed: u64,
    /// Scale the score outer product by `N/(N − 1)` (and bootstrap
    /// multipliers by `sqrt(N/(N − 1))`).
    pub small_sample_correction: bool,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            b: 1000,
            multiplier_dist: MultiplierDist::ExpCentered,
            df_theta_mode: DfThetaMode::FixedQk,
            active_set_delta: None,
            test_side: TestSide::OneSided,
            side_overrides: Vec::new(),
            ci_level: 0.95,
            rng_seed: 0,
            small_sample_correction: true,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.ci_level > 0.0 && self.ci_level < 1.0) {
            return Err(NmfreError::InvalidConfig(format!(
                "ci_level must lie in (0, 1), got {}",
                self.ci_level
            )));
        }
        if let Some(d) = self.active_set_delta {
            if !(d >= 0.0 && d.is_finite()) {
                return Err(NmfreError::InvalidConfig(format!(
                    "active_set_delta must be finite and non-negative, got {d}"
                )));
            }
        }
        Ok(())
    }

    pub fn side_for(&self, q: usize, k: usize) -> TestSide {
        self.side_overrides
            .iter()
            .rev()
            .find(|o| o.q == q && o.k == k)
            .map_or(self.test_side, |o| o.side)
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| NmfreError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let cfg: Self = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientRow {
    pub covariate: String,
    pub basis: usize,
    pub q: usize,
    pub k: usize,
    pub estimate: f64,
    pub se: f64,
    pub bse: f64,
    pub z: f64,
    pub p_value: f64,
    pub side: TestSide,
    /// Wald interval with the lower end clipped at zero.
    pub wald_ci: (f64, f64),
    pub wald_ci_unclipped: (f64, f64),
    pub percentile_ci: Option<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionDiagnostics {
    pub aat: f64,
    pub inner_factor: f64,
    pub gram: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceReport {
    pub rows: Vec<CoefficientRow>,
    pub sigma2: Sigma2Estimate,
    pub lambda: f64,
    pub n: usize,
    pub condition: ConditionDiagnostics,
    /// Sandwich covariance of `vec(Θ̂)` (index `q + Q k`).
    #[serde(with = "crate::linalg::matrix_rows")]
    pub covariance: DMatrix<f64>,
    pub bootstrap_replicates: usize,
    pub multiplier_mean: Option<f64>,
    pub multiplier_var: Option<f64>,
    /// Largest `|Σ_n S_n|` over active coefficients, relative to the
    /// root sum of squared unit scores. Near zero at an interior optimum.
    pub score_stationarity: f64,
    pub warnings: Vec<String>,
    #[serde(skip)]
    pub replicates: Option<DMatrix<f64>>,
}

impl InferenceReport {
    pub fn row(&self, q: usize, k: usize) -> Option<&CoefficientRow> {
        self.rows.iter().find(|r| r.q == q && r.k == k)
    }

    /// Covariate, Basis, Estimate, SE, BSE, z, p.
    pub fn write_csv<W: Write>(&self, out: W) -> std::io::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["Covariate", "Basis", "Estimate", "SE", "BSE", "z", "p"])?;
        for r in &self.rows {
            w.write_record([
                r.covariate.clone(),
                r.basis.to_string(),
                format!("{:.3}", r.estimate),
                format!("{:.3}", r.se),
                format!("{:.3}", r.bse),
                format!("{:.2}", r.z),
                format!("{:.4}", r.p_value),
            ])?;
        }
        w.flush()
    }

    pub fn write_json<W: Write>(&self, out: W) -> Result<()> {
        serde_json::to_writer_pretty(out, self)?;
        Ok(())
    }
}

/// `(z, p)` for `H0: θ = 0`.
pub fn wald_test(estimate: f64, se: f64, side: TestSide) -> (f64, f64) {
    let z = estimate / se;
    let phi = Normal::standard();
    let p = match side {
        TestSide::OneSided => phi.sf(z),
        TestSide::TwoSided => 2.0 * phi.sf(z.abs()),
    };
    (z, p)
}

/// Wald interval `(clipped, unclipped)` at `level`.
pub fn wald_interval(estimate: f64, se: f64, level: f64) -> ((f64, f64), (f64, f64)) {
    let c = Normal::standard().inverse_cdf(0.5 + level / 2.0);
    let raw = (estimate - c * se, estimate + c * se);
    ((raw.0.max(0.0), raw.1.max(0.0)), raw)
}

/// Sandwich and bootstrap inference for `Θ̂` at the fitted `(X̂, λ)`.
pub fn infer(data: &DataSet, params: &ModelParams, cfg: &InferenceConfig) -> Result<InferenceReport> {
    cfg.validate()?;
    data.validate_shape_and_finite()?;
    let (q, k, n) = (params.q(), data.k(), data.n());
    if params.theta.shape() != (q, k) || params.x.nrows() != data.p() || params.u.shape() != (q, n) {
        return Err(NmfreError::DimensionMismatch(format!(
            "parameters do not match data: X {:?}, Theta {:?}, U {:?} vs P = {}, K = {k}, N = {n}",
            params.x.shape(),
            params.theta.shape(),
            params.u.shape(),
            data.p()
        )));
    }
    if n < 2 {
        return Err(NmfreError::InvalidConfig("inference needs at least two units".into()));
    }

    let s2 = sigma2_hat(data, params, cfg.df_theta_mode, cfg.active_set_delta)?;
    let scores = score_contributions(data, &params.x, &params.theta, params.lambda, s2.sigma2)?;
    let info = ReducedInformation::new(&params.x, &data.a, params.lambda, s2.sigma2)?;
    let scale = if cfg.small_sample_correction {
        n as f64 / (n - 1) as f64
    } else {
        1.0
    };
    let cov = sandwich_cov(&scores, &info, scale);

    let mut warnings = Vec::new();
    let boot = match cfg.b {
        0 => None,
        b => {
            if b == 1 {
                warnings.push("a single bootstrap replicate leaves BSE undefined".to_string());
            }
            Some(one_step_bootstrap(
                &params.theta,
                &scores,
                &info,
                b,
                cfg.multiplier_dist,
                cfg.rng_seed,
                scale,
            ))
        }
    };
    let pct = boot.as_ref().map(|bd| percentile_intervals(&bd.replicates, cfg.ci_level));

    let score_sum = scores.iter().fold(DMatrix::zeros(q, k), |acc, s| acc + s);
    let score_norm = scores.iter().map(|s| s.norm_squared()).sum::<f64>().sqrt();
    let active_thresh = s2.delta;
    let stationarity = (0..q * k)
        .filter(|&i| params.theta[i] > active_thresh)
        .map(|i| score_sum[i].abs())
        .fold(0.0, f64::max)
        / score_norm.max(f64::MIN_POSITIVE);

    let mut rows = Vec::with_capacity(q * k);
    let mut on_boundary = Vec::new();
    for kk in 0..k {
        for qq in 0..q {
            let i = qq + q * kk;
            let estimate = params.theta[i];
            let se = cov[(i, i)].max(0.0).sqrt();
            let side = cfg.side_for(qq, kk);
            let (z, p_value) = wald_test(estimate, se, side);
            let (wald_ci, wald_ci_unclipped) = wald_interval(estimate, se, cfg.ci_level);
            if estimate <= active_thresh {
                on_boundary.push(format!("({}, {})", qq + 1, data.row_labels_a[kk]));
            }
            rows.push(CoefficientRow {
                covariate: data.row_labels_a[kk].clone(),
                basis: qq + 1,
                q: qq,
                k: kk,
                estimate,
                se,
                bse: boot.as_ref().map_or(f64::NAN, |bd| bd.bse[i]),
                z,
                p_value,
                side,
                wald_ci,
                wald_ci_unclipped,
                percentile_ci: pct.as_ref().map(|p| p[i]),
            });
        }
    }
    if !on_boundary.is_empty() {
        warnings.push(format!(
            "estimates at the non-negativity boundary {}: Wald standard errors and intervals are \
             not valid there; prefer the bootstrap percentile intervals",
            on_boundary.join(", ")
        ));
    }

    let (c_aat, c_f) = info.condition_numbers();
    Ok(InferenceReport {
        rows,
        sigma2: s2,
        lambda: params.lambda,
        n,
        condition: ConditionDiagnostics {
            aat: c_aat,
            inner_factor: c_f,
            gram: condition_number(&params.x.tr_mul(&params.x)),
        },
        covariance: cov,
        bootstrap_replicates: cfg.b,
        multiplier_mean: boot.as_ref().map(|bd| bd.multiplier_mean),
        multiplier_var: boot.as_ref().map(|bd| bd.multiplier_var),
        score_stationarity: stationarity,
        warnings,
        replicates: boot.map(|bd| bd.replicates),
    })
}
