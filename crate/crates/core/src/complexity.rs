//! Effective degrees of freedom of the random effects and the dfU cap.
//!
//! For a fixed basis `X` with Gram eigenvalues `d_q`, the ridge update of `U`
//! consumes `df_U(λ) = N Σ_q d_q / (d_q + λ)` degrees of freedom. The map is
//! strictly decreasing in `λ`, so the smallest penalty meeting a cap
//! `df_U ≤ df_max` is found by bisection on `log λ`.

use std::io::Write;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{NmfreError, Result};
use crate::linalg::sym_eigenvalues;

pub const LAMBDA_SEARCH_LO: f64 = 1e-12;
pub const LAMBDA_SEARCH_HI: f64 = 1e12;
const BISECTION_MAX_ITER: usize = 200;
/// Eigenvalues below this fraction of the largest are treated as zero.
const RANK_TOL: f64 = 1e-14;
/// `df_U` within this fraction of `NQ` of the cap counts as binding.
pub const BINDING_TOL: f64 = 1e-6;

/// Eigenvalues of `XᵀX` with numerical noise floored to zero.
#[derive(Debug, Clone)]
pub struct Spectrum {
    d: Vec<f64>,
}

impl Spectrum {
    pub fn of(x: &DMatrix<f64>) -> Self {
        let mut d = sym_eigenvalues(&x.tr_mul(x));
        let max = d.iter().fold(0.0_f64, |m, v| m.max(*v));
        for v in &mut d {
            if *v < RANK_TOL * max || *v < 0.0 {
                *v = 0.0;
            }
        }
        Self { d }
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.d
    }

    pub fn q(&self) -> usize {
        self.d.len()
    }

    /// `Σ_q d_q / (d_q + λ)`, the trace of the ridge hat matrix.
    pub fn hat_trace(&self, lambda: f64) -> f64 {
        self.d
            .iter()
            .filter(|&&d| d > 0.0)
            .map(|&d| d / (d + lambda))
            .sum()
    }

    pub fn df(&self, lambda: f64, n: usize) -> f64 {
        n as f64 * self.hat_trace(lambda)
    }

    pub fn lambda_cap(&self, df_max: f64, n: usize) -> Result<f64> {
        let nq = (n * self.q()) as f64;
        if !(df_max > 0.0 && df_max < nq) {
            return Err(NmfreError::CapInfeasible { df_max, nq });
        }
        let df = |lambda: f64| self.df(lambda, n);
        if df(LAMBDA_SEARCH_LO) <= df_max {
            return Ok(LAMBDA_SEARCH_LO);
        }
        if df(LAMBDA_SEARCH_HI) > df_max {
            return Ok(LAMBDA_SEARCH_HI);
        }
        // Invariant: df(lo) > df_max >= df(hi).
        let (mut lo, mut hi) = (LAMBDA_SEARCH_LO.ln(), LAMBDA_SEARCH_HI.ln());
        for _ in 0..BISECTION_MAX_ITER {
            if hi - lo < 1e-14 {
                break;
            }
            let mid = 0.5 * (lo + hi);
            if df(mid.exp()) <= df_max {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        Ok(hi.exp())
    }
}

/// `df_U = N Σ_q d_q / (d_q + λ)` with `d_q` the eigenvalues of `XᵀX`.
pub fn df_u(x: &DMatrix<f64>, lambda: f64, n: usize) -> f64 {
    Spectrum::of(x).df(lambda, n)
}

/// Smallest `λ` in the search range with `df_U(λ) ≤ df_max`.
pub fn lambda_cap(x: &DMatrix<f64>, df_max: f64, n: usize) -> Result<f64> {
    Spectrum::of(x).lambda_cap(df_max, n)
}

/// `λ ← max(λ, λ_cap(X))`. Returns the enforced value and whether it moved.
/// A `None` cap is disabled.
pub fn enforce_cap(
    lambda_current: f64,
    x: &DMatrix<f64>,
    df_max: Option<f64>,
    n: usize,
) -> Result<(f64, bool)> {
    match df_max {
        None => Ok((lambda_current, false)),
        Some(m) => enforce_with(&Spectrum::of(x), lambda_current, m, n),
    }
}

pub(crate) fn enforce_with(
    spectrum: &Spectrum,
    lambda_current: f64,
    df_max: f64,
    n: usize,
) -> Result<(f64, bool)> {
    let cap = spectrum.lambda_cap(df_max, n)?;
    if cap > lambda_current {
        Ok((cap, true))
    } else {
        Ok((lambda_current, false))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LookupPoint {
    pub lambda: f64,
    pub r: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapCalibration {
    pub df_max: f64,
    pub r_max: f64,
    pub lambda_min: f64,
    pub table: Vec<LookupPoint>,
}

/// Saturation ratio `r(λ) = df_U(λ) / (NQ)` over `points` log-spaced values in `[lo, hi]`.
pub fn saturation_lookup(x: &DMatrix<f64>, lo: f64, hi: f64, points: usize) -> Vec<LookupPoint> {
    let s = Spectrum::of(x);
    let q = s.q() as f64;
    let (llo, lhi) = (lo.ln(), hi.ln());
    (0..points)
        .map(|i| {
            let t = if points > 1 {
                i as f64 / (points - 1) as f64
            } else {
                0.0
            };
            let lambda = (llo + t * (lhi - llo)).exp();
            LookupPoint {
                lambda,
                r: s.hat_trace(lambda) / q,
            }
        })
        .collect()
}

/// Translates a lower bound on `λ` into a cap: `df_max = df_U(X_fix, λ_min)`.
pub fn calibrate_cap(x_fix: &DMatrix<f64>, lambda_min: f64, n: usize) -> Result<CapCalibration> {
    if !(lambda_min > 0.0) {
        return Err(NmfreError::InvalidConfig(format!(
            "lambda_min = {lambda_min} must be positive"
        )));
    }
    let df_max = df_u(x_fix, lambda_min, n);
    let nq = (n * x_fix.ncols()) as f64;
    Ok(CapCalibration {
        df_max,
        r_max: df_max / nq,
        lambda_min,
        table: saturation_lookup(x_fix, 1e-6, 1e6, 50),
    })
}

pub fn write_lookup_csv<W: Write>(table: &[LookupPoint], out: W) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["lambda", "r"])?;
    for p in table {
        w.write_record([p.lambda.to_string(), p.r.to_string()])?;
    }
    w.flush()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComplexityDiagnostics {
    pub df_u: f64,
    pub saturation_ratio: f64,
    pub cap_ratio: Option<f64>,
    pub lambda_final: f64,
    pub cap_ever_activated: bool,
    pub binding: bool,
}

impl ComplexityDiagnostics {
    pub fn new(
        x: &DMatrix<f64>,
        lambda: f64,
        n: usize,
        cap_ratio: Option<f64>,
        cap_ever_activated: bool,
    ) -> Self {
        let nq = (n * x.ncols()) as f64;
        let df_u = df_u(x, lambda, n);
        let binding = cap_ratio.is_some_and(|r| (df_u - r * nq).abs() <= BINDING_TOL * nq);
        Self {
            df_u,
            saturation_ratio: df_u / nq,
            cap_ratio,
            lambda_final: lambda,
            cap_ever_activated,
            binding,
        }
    }
}
