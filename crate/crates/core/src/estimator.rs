//! Block-wise estimation of `Y ≈ X(ΘA + U)` under the penalized working
//! objective `‖Y − X(ΘA + U)‖²_F + λ‖U‖²_F`.
//!
//! Each iteration enforces the dfU cap, takes a ridge step in `U` (rows
//! centered afterwards), a stabilized multiplicative step in `X` followed by
//! column renormalization, and a stabilized multiplicative step in `Θ`. A
//! candidate that raises the objective is damped once and otherwise rolled
//! back, so accepted objective values never increase at a fixed `λ`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::complexity::{enforce_with, ComplexityDiagnostics, Spectrum};
use crate::data::{DataSet, FitConfig, ModelParams};
use crate::error::{NmfreError, Result};
use crate::linalg::{frobenius_sq, positive_part, ridge_gram_cholesky};

/// Added to every multiplicative denominator.
pub const EPS_DEN: f64 = 1e-12;
/// Guards the relative-change convergence test against a zero objective.
const CONV_EPS: f64 = 1e-12;
/// Columns with less mass than this cannot be renormalized.
const DEGENERATE_MASS: f64 = 1e-300;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iteration: usize,
    /// Objective at the start of the iteration, evaluated at the penalty in force.
    pub objective_start: f64,
    /// Accepted objective at the end of the iteration.
    pub objective: f64,
    pub lambda: f64,
    pub df_u: f64,
    pub cap_activated: bool,
    pub safeguard_triggered: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveTrace {
    pub records: Vec<TraceRecord>,
}

impl ObjectiveTrace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn last(&self) -> Option<&TraceRecord> {
        self.records.last()
    }

    pub fn write_csv<W: std::io::Write>(&self, out: W) -> std::io::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "iteration",
            "objective",
            "lambda",
            "df_u",
            "cap_activated",
            "safeguard_triggered",
        ])?;
        for r in &self.records {
            w.write_record([
                r.iteration.to_string(),
                r.objective.to_string(),
                r.lambda.to_string(),
                r.df_u.to_string(),
                r.cap_activated.to_string(),
                r.safeguard_triggered.to_string(),
            ])?;
        }
        w.flush()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub params: ModelParams,
    pub trace: ObjectiveTrace,
    pub diagnostics: ComplexityDiagnostics,
    pub restarts_tried: usize,
    pub best_restart: usize,
    pub converged: bool,
    pub iterations: usize,
    pub objective: f64,
    /// `‖Y − X(ΘA + U)‖²_F / (PN)` at the returned parameters.
    pub sigma2_working: f64,
}

fn check_shapes(y: &DMatrix<f64>, a: &DMatrix<f64>, p: &ModelParams) -> Result<()> {
    let (pp, n) = y.shape();
    let q = p.x.ncols();
    let ok = p.x.nrows() == pp
        && p.theta.shape() == (q, a.nrows())
        && p.u.shape() == (q, n)
        && a.ncols() == n;
    if ok {
        Ok(())
    } else {
        Err(NmfreError::DimensionMismatch(format!(
            "Y {:?}, A {:?}, X {:?}, Theta {:?}, U {:?}",
            y.shape(),
            a.shape(),
            p.x.shape(),
            p.theta.shape(),
            p.u.shape()
        )))
    }
}

fn objective_raw(
    y: &DMatrix<f64>,
    a: &DMatrix<f64>,
    x: &DMatrix<f64>,
    theta: &DMatrix<f64>,
    u: &DMatrix<f64>,
    lambda: f64,
) -> f64 {
    let fitted = x * (theta * a + u);
    frobenius_sq(&(y - fitted)) + lambda * frobenius_sq(u)
}

/// `‖Y − X(ΘA + U)‖²_F + λ‖U‖²_F`.
pub fn objective(data: &DataSet, p: &ModelParams) -> Result<f64> {
    check_shapes(&data.y, &data.a, p)?;
    Ok(objective_raw(&data.y, &data.a, &p.x, &p.theta, &p.u, p.lambda))
}

/// Ridge solution `(XᵀX + λI)⁻¹ Xᵀ (Y − XΘA)` for every unit, before centering.
pub fn u_step_uncentered(
    data: &DataSet,
    x: &DMatrix<f64>,
    theta: &DMatrix<f64>,
    lambda: f64,
) -> Result<DMatrix<f64>> {
    ridge_u(&data.y, &data.a, x, theta, lambda)
}

/// Ridge step for the random effects, rows centered to mean zero.
pub fn u_step(
    data: &DataSet,
    x: &DMatrix<f64>,
    theta: &DMatrix<f64>,
    lambda: f64,
) -> Result<DMatrix<f64>> {
    let mut u = ridge_u(&data.y, &data.a, x, theta, lambda)?;
    center_rows(&mut u);
    Ok(u)
}

fn ridge_u(
    y: &DMatrix<f64>,
    a: &DMatrix<f64>,
    x: &DMatrix<f64>,
    theta: &DMatrix<f64>,
    lambda: f64,
) -> Result<DMatrix<f64>> {
    if !(lambda > 0.0) {
        return Err(NmfreError::SingularSystem(format!(
            "ridge penalty must be positive, got {lambda}"
        )));
    }
    let chol = ridge_gram_cholesky(x, lambda)
        .ok_or_else(|| NmfreError::SingularSystem("XᵀX + λI is not positive definite".into()))?;
    // One Q x Q factorization shared by all N right-hand sides.
    let rhs = x.tr_mul(&(y - x * (theta * a)));
    Ok(chol.solve(&rhs))
}

pub(crate) fn center_rows(u: &mut DMatrix<f64>) {
    if u.ncols() == 0 {
        return;
    }
    for mut row in u.row_iter_mut() {
        let mean = row.mean();
        row.add_scalar_mut(-mean);
    }
}

fn x_update(
    y: &DMatrix<f64>,
    x: &DMatrix<f64>,
    b_u: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let bp = positive_part(b_u);
    let num = y * bp.transpose();
    let den = x * (&bp * bp.transpose());
    let mut x_new = x.component_mul(&num);
    x_new.zip_apply(&den, |v, d| *v /= d + EPS_DEN);
    let mut sums = DVector::zeros(x.ncols());
    for (j, mut col) in x_new.column_iter_mut().enumerate() {
        let s = col.sum();
        if !(s >= DEGENERATE_MASS) {
            return Err(NmfreError::DegenerateColumn { column: j });
        }
        col /= s;
        sums[j] = s;
    }
    Ok((x_new, sums))
}

/// Stabilized multiplicative basis update with `B_U⁺ = max(ΘA + U, 0)`,
/// followed by column renormalization.
///
/// Returns the normalized basis and the column masses `D`; the caller keeps
/// the fitted mean unchanged by rescaling `(Θ, U) ← (DΘ, DU)`.
pub fn x_step(data: &DataSet, p: &ModelParams) -> Result<(DMatrix<f64>, DVector<f64>)> {
    check_shapes(&data.y, &data.a, p)?;
    let b_u = &p.theta * &data.a + &p.u;
    x_update(&data.y, &p.x, &b_u)
}

/// Scales row `q` of `m` by `d[q]`.
pub fn scale_rows(m: &mut DMatrix<f64>, d: &DVector<f64>) {
    for (q, mut row) in m.row_iter_mut().enumerate() {
        row *= d[q];
    }
}

fn theta_update(
    y: &DMatrix<f64>,
    a: &DMatrix<f64>,
    x: &DMatrix<f64>,
    theta: &DMatrix<f64>,
    u: Option<&DMatrix<f64>>,
) -> DMatrix<f64> {
    let y_u = match u {
        Some(u) => positive_part(&(y - x * u)),
        None => positive_part(y),
    };
    let num = x.tr_mul(&y_u) * a.transpose();
    let den = (x.tr_mul(x) * theta) * (a * a.transpose());
    let mut out = theta.component_mul(&num);
    out.zip_apply(&den, |v, d| *v /= d + EPS_DEN);
    out
}

/// Stabilized multiplicative covariate-effect update with `Y_U⁺ = max(Y − XU, 0)`.
pub fn theta_step(data: &DataSet, p: &ModelParams) -> Result<DMatrix<f64>> {
    check_shapes(&data.y, &data.a, p)?;
    Ok(theta_update(&data.y, &data.a, &p.x, &p.theta, Some(&p.u)))
}

fn random_start(data: &DataSet, q: usize, rng: &mut ChaCha8Rng) -> (DMatrix<f64>, DMatrix<f64>) {
    let (p, k) = (data.p(), data.k());
    let mut x = DMatrix::from_fn(p, q, |_, _| rng.random_range(0.5..1.5));
    for mut col in x.column_iter_mut() {
        let s = col.sum();
        col /= s;
    }
    let mut theta = DMatrix::from_fn(q, k, |_, _| rng.random_range(0.0..1.0));
    let recon_mean = (&x * &theta * &data.a).mean();
    let y_mean = data.y.mean();
    if recon_mean > 0.0 && y_mean > 0.0 {
        theta *= y_mean / recon_mean;
    }
    (x, theta)
}

fn covariate_nmf_from(
    data: &DataSet,
    mut x: DMatrix<f64>,
    mut theta: DMatrix<f64>,
    maxit: usize,
    tol: f64,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let (y, a) = (&data.y, &data.a);
    let resid = |x: &DMatrix<f64>, t: &DMatrix<f64>| frobenius_sq(&(y - x * (t * a)));
    let mut l_old = resid(&x, &theta);
    for _ in 0..maxit {
        let (x_new, d) = x_update(y, &x, &(&theta * a))?;
        x = x_new;
        scale_rows(&mut theta, &d);
        theta = theta_update(y, a, &x, &theta, None);
        let l_new = resid(&x, &theta);
        let done = (l_old - l_new).abs() / (l_old + CONV_EPS) < tol;
        l_old = l_new;
        if done {
            break;
        }
    }
    Ok((x, theta))
}

fn restart_rng(seed: u64, restart: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(restart as u64);
    rng
}

/// Covariate-driven NMF with `U ≡ 0` from a seeded random start. The returned
/// basis is column-normalized and doubles as `X_fix` for cap calibration.
pub fn init_covariate_nmf(data: &DataSet, cfg: &FitConfig) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    cfg.validate()?;
    let mut rng = restart_rng(cfg.rng_seed, 0);
    let (x0, t0) = random_start(data, cfg.q, &mut rng);
    covariate_nmf_from(data, x0, t0, cfg.init_maxit, cfg.tol)
}

struct RestartOutcome {
    params: ModelParams,
    trace: ObjectiveTrace,
    converged: bool,
    cap_ever: bool,
    objective: f64,
}

struct State {
    x: DMatrix<f64>,
    theta: DMatrix<f64>,
    u: DMatrix<f64>,
}

fn run_restart(data: &DataSet, cfg: &FitConfig, restart: usize) -> Result<RestartOutcome> {
    let (y, a) = (&data.y, &data.a);
    let (p, n, q) = (data.p(), data.n(), cfg.q);
    let mut rng = restart_rng(cfg.rng_seed, restart);
    let (x0, t0) = random_start(data, q, &mut rng);
    let (x0, t0) = covariate_nmf_from(data, x0, t0, cfg.init_maxit, cfg.tol)?;

    let nq = (n * q) as f64;
    // A ratio of one cannot bind.
    let df_max = cfg.cap_ratio.filter(|&r| r < 1.0).map(|r| r * nq);
    let eta = cfg.damping_eta;

    let mut s = State {
        x: x0,
        theta: t0,
        u: DMatrix::zeros(q, n),
    };
    let mut sigma2 = 1.0;
    let mut lambda = cfg.lambda_init;
    let mut cap_ever = false;
    let mut converged = false;
    let mut trace = ObjectiveTrace::default();

    for t in 0..cfg.maxit {
        // (i) cap
        let nominal = cfg.lambda_init * sigma2;
        let (lam, activated) = match df_max {
            Some(m) => enforce_with(&Spectrum::of(&s.x), nominal, m, n)?,
            None => (nominal, false),
        };
        lambda = lam;
        cap_ever |= activated;
        let l_old = objective_raw(y, a, &s.x, &s.theta, &s.u, lambda);

        // (ii) U
        let u_new = {
            let mut u = ridge_u(y, a, &s.x, &s.theta, lambda)?;
            center_rows(&mut u);
            u
        };
        // (iii) X with rescaling of (Θ, U)
        let (x_c, d) = x_update(y, &s.x, &(&s.theta * a + &u_new))?;
        let mut theta_c = s.theta.clone();
        let mut u_c = u_new.clone();
        scale_rows(&mut theta_c, &d);
        scale_rows(&mut u_c, &d);
        // (iv) Θ
        let theta_c = theta_update(y, a, &x_c, &theta_c, Some(&u_c));

        // (v) safeguard
        let l_new = objective_raw(y, a, &x_c, &theta_c, &u_c, lambda);
        let mut safeguard = false;
        let l_acc = if l_new <= l_old {
            s = State {
                x: x_c,
                theta: theta_c,
                u: u_c,
            };
            l_new
        } else {
            safeguard = true;
            let mut x_d = &s.x * (1.0 - eta) + &x_c * eta;
            let mut theta_d = &s.theta * (1.0 - eta) + &theta_c * eta;
            let mut u_d = u_new.clone();
            // Convex combinations of normalized columns are normalized up to
            // rounding; renormalize anyway and carry the scale.
            let mut dd = DVector::zeros(q);
            for (j, mut col) in x_d.column_iter_mut().enumerate() {
                let sum = col.sum();
                col /= sum;
                dd[j] = sum;
            }
            scale_rows(&mut theta_d, &dd);
            scale_rows(&mut u_d, &dd);
            let l_damped = objective_raw(y, a, &x_d, &theta_d, &u_d, lambda);
            if l_damped <= l_old {
                s = State {
                    x: x_d,
                    theta: theta_d,
                    u: u_d,
                };
                l_damped
            } else {
                let l_keep_u = objective_raw(y, a, &s.x, &s.theta, &u_new, lambda);
                if l_keep_u <= l_old {
                    s.u = u_new;
                    l_keep_u
                } else {
                    l_old
                }
            }
        };

        trace.records.push(TraceRecord {
            iteration: t,
            objective_start: l_old,
            objective: l_acc,
            lambda,
            df_u: Spectrum::of(&s.x).df(lambda, n),
            cap_activated: activated,
            safeguard_triggered: safeguard,
        });

        // warm-start variance schedule
        let mut variance_settled = true;
        if let Some(ws) = cfg.warm_start {
            if t + 1 >= ws.freeze_iters {
                let rss = frobenius_sq(&(y - &s.x * (&s.theta * a + &s.u)));
                let next = (1.0 - ws.ema_rate) * sigma2 + ws.ema_rate * rss / (p * n) as f64;
                variance_settled = (next - sigma2).abs() <= cfg.tol * sigma2;
                sigma2 = next;
            } else {
                variance_settled = false;
            }
        }

        // (vi) convergence
        if variance_settled && (l_old - l_acc).abs() / (l_old + CONV_EPS) < cfg.tol {
            converged = true;
            break;
        }
    }

    // The cap was enforced at the start-of-iteration basis; re-check it at
    // the returned one and refresh U if the penalty has to move up.
    if let Some(m) = df_max {
        let (lam, activated) = enforce_with(&Spectrum::of(&s.x), lambda, m, n)?;
        if activated {
            lambda = lam;
            cap_ever = true;
            s.u = ridge_u(y, a, &s.x, &s.theta, lambda)?;
            center_rows(&mut s.u);
        }
    }

    let params = ModelParams {
        x: s.x,
        theta: s.theta,
        u: s.u,
        lambda,
    };
    let objective = objective_raw(y, a, &params.x, &params.theta, &params.u, lambda);
    Ok(RestartOutcome {
        params,
        trace,
        converged,
        cap_ever,
        objective,
    })
}

/// Runs `cfg.n_restarts` seeded initializations and keeps the one with the
/// smallest final objective. A run that hits `maxit` is still returned, with
/// `converged = false`.
pub fn fit(data: &DataSet, cfg: &FitConfig) -> Result<FitResult> {
    cfg.validate()?;
    if data.a.iter().any(|&v| v < 0.0) {
        return Err(NmfreError::InvalidConfig(
            "covariates must be non-negative; expand signed covariates into positive and negative parts"
                .into(),
        ));
    }
    let outcomes: Vec<Result<RestartOutcome>> = (0..cfg.n_restarts)
        .into_par_iter()
        .map(|r| run_restart(data, cfg, r))
        .collect();

    let mut best: Option<(usize, RestartOutcome)> = None;
    let mut first_err = None;
    for (r, outcome) in outcomes.into_iter().enumerate() {
        match outcome {
            Ok(o) => {
                let better = best
                    .as_ref()
                    .is_none_or(|(_, b)| o.objective < b.objective);
                if better {
                    best = Some((r, o));
                }
            }
            Err(e) => {
                first_err.get_or_insert(e);
            }
        }
    }
    let (best_restart, o) = match best {
        Some(b) => b,
        None => return Err(first_err.expect("at least one restart ran")),
    };

    let diagnostics = ComplexityDiagnostics::new(
        &o.params.x,
        o.params.lambda,
        data.n(),
        cfg.cap_ratio,
        o.cap_ever,
    );
    let rss = frobenius_sq(&(&data.y - &o.params.x * (&o.params.theta * &data.a + &o.params.u)));
    Ok(FitResult {
        iterations: o.trace.len(),
        sigma2_working: rss / (data.p() * data.n()) as f64,
        objective: o.objective,
        params: o.params,
        trace: o.trace,
        diagnostics,
        restarts_tried: cfg.n_restarts,
        best_restart,
        converged: o.converged,
    })
}
