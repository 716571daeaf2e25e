//! Monte Carlo harness: data generation under `Y = X(ΘA + U) + E`, fitting
//! and inference per replicate, and aggregation of bias, spread, rejection,
//! coverage and saturation summaries.

use std::io::Write;

use nalgebra::{dmatrix, DMatrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Bernoulli, Distribution, Exp1, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{DataSet, FitConfig, ModelParams, WarmStart};
use crate::error::{NmfreError, Result};
use crate::estimator::fit;
use crate::inference::{infer, quantile_sorted, wald_test, InferenceConfig, TestSide};
use crate::linalg::matrix_rows;

/// Male indicator of the bundled 27-subject sample (16 males first).
pub const ORTHODONT_MALES: usize = 16;
pub const ORTHODONT_N: usize = 27;
pub const ORTHODONT_X: [f64; 4] = [0.2308, 0.2409, 0.2566, 0.2717];
pub const INTERCEPT_EFFECT: f64 = 90.502;
pub const MALE_EFFECT: f64 = 9.4285;

/// Share of failed replicates at which a run is aborted.
pub const MAX_FAILURE_SHARE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorDist {
    Gaussian,
    /// `ξ − 1` with `ξ ~ Exp(1)`.
    ExpCentered,
}

impl ErrorDist {
    pub fn label(self) -> &'static str {
        match self {
            Self::Gaussian => "Gaussian",
            Self::ExpCentered => "Exp-centered",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    /// Target effect is zero, on the boundary of `Θ ≥ 0`.
    NullBoundary,
    AlternativeInterior,
}

impl Scenario {
    pub fn label(self) -> &'static str {
        match self {
            Self::NullBoundary => "Null",
            Self::AlternativeInterior => "Alternative",
        }
    }

    /// One-sided under the boundary null, two-sided otherwise.
    pub fn test_side(self) -> TestSide {
        match self {
            Self::NullBoundary => TestSide::OneSided,
            Self::AlternativeInterior => TestSide::TwoSided,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovariateGen {
    /// The bundled male pattern; requires `N = 27`.
    OrthodontFixed,
    Bernoulli(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimDesign {
    pub n: usize,
    #[serde(with = "matrix_rows")]
    pub x_true: DMatrix<f64>,
    /// `Q x 2`: intercept and male columns.
    #[serde(with = "matrix_rows")]
    pub theta_true: DMatrix<f64>,
    pub covariate_gen: CovariateGen,
    pub sigma2_true: f64,
    pub tau2_true: f64,
    pub error_dist: ErrorDist,
    pub scenario: Scenario,
    pub r: usize,
    pub b: usize,
    pub fit_cfg: FitConfig,
    pub inf_cfg: InferenceConfig,
    /// `(q, k)` of the coefficient summarized.
    pub target: (usize, usize),
    pub seed: u64,
}

impl SimDesign {
    /// Orthodont-based `Q = 1` design with the default cap.
    pub fn baseline(n: usize, error_dist: ErrorDist, scenario: Scenario) -> Self {
        let male = match scenario {
            Scenario::NullBoundary => 0.0,
            Scenario::AlternativeInterior => MALE_EFFECT,
        };
        let covariate_gen = if n == ORTHODONT_N {
            CovariateGen::OrthodontFixed
        } else {
            CovariateGen::Bernoulli(ORTHODONT_MALES as f64 / ORTHODONT_N as f64)
        };
        Self {
            n,
            x_true: DMatrix::from_column_slice(4, 1, &ORTHODONT_X),
            theta_true: dmatrix![INTERCEPT_EFFECT, male],
            covariate_gen,
            sigma2_true: 1.0,
            tau2_true: 1.0,
            error_dist,
            scenario,
            r: 200,
            b: 200,
            fit_cfg: FitConfig::default(),
            inf_cfg: InferenceConfig {
                test_side: scenario.test_side(),
                ..Default::default()
            },
            target: (0, 1),
            seed: 0,
        }
    }

    /// Three-trend `Q = 3`, `N = 100` design with a deliberately weak
    /// initial penalty. `cap = None` disables the cap.
    pub fn stress(cap: Option<f64>, error_dist: ErrorDist, scenario: Scenario) -> Self {
        let male = match scenario {
            Scenario::NullBoundary => 0.0,
            Scenario::AlternativeInterior => MALE_EFFECT,
        };
        let third = INTERCEPT_EFFECT / 3.0;
        Self {
            n: 100,
            x_true: dmatrix![
                0.45, 0.25, 0.10;
                0.30, 0.25, 0.15;
                0.15, 0.25, 0.30;
                0.10, 0.25, 0.45
            ],
            theta_true: dmatrix![third, male; third, 0.0; third, 0.0],
            covariate_gen: CovariateGen::Bernoulli(ORTHODONT_MALES as f64 / ORTHODONT_N as f64),
            sigma2_true: 1.0,
            tau2_true: 1.0,
            error_dist,
            scenario,
            r: 100,
            b: 200,
            fit_cfg: FitConfig {
                q: 3,
                lambda_init: 1e-3,
                cap_ratio: cap,
                n_restarts: 1,
                warm_start: Some(WarmStart::default()),
                ..Default::default()
            },
            inf_cfg: InferenceConfig {
                test_side: scenario.test_side(),
                ..Default::default()
            },
            target: (0, 1),
            seed: 0,
        }
    }

    pub fn p(&self) -> usize {
        self.x_true.nrows()
    }

    pub fn q(&self) -> usize {
        self.x_true.ncols()
    }

    pub fn cap_label(&self) -> String {
        match self.fit_cfg.cap_ratio {
            Some(r) => format!("{r:.2}"),
            None => "off".into(),
        }
    }

    pub fn truth(&self) -> f64 {
        self.theta_true[self.target]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(NmfreError::InvalidConfig(m));
        let (p, q) = self.x_true.shape();
        if p == 0 || q == 0 || self.n < 2 {
            return bad("design needs P, Q >= 1 and N >= 2".into());
        }
        if self.x_true.iter().any(|&v| v < 0.0)
            || self.x_true.column_iter().any(|c| (c.sum() - 1.0).abs() > 1e-8)
        {
            return bad("X_true must be non-negative with unit column sums".into());
        }
        if self.theta_true.shape() != (q, 2) || self.theta_true.iter().any(|&v| v < 0.0) {
            return bad("Theta_true must be a non-negative Q x 2 matrix".into());
        }
        if self.fit_cfg.q != q {
            return bad(format!("fit rank {} differs from Q = {q}", self.fit_cfg.q));
        }
        if !(self.sigma2_true >= 0.0 && self.tau2_true >= 0.0) {
            return bad("variances must be non-negative".into());
        }
        if self.r == 0 {
            return bad("R must be at least 1".into());
        }
        if self.target.0 >= q || self.target.1 >= 2 {
            return bad(format!("target {:?} out of range", self.target));
        }
        match self.covariate_gen {
            CovariateGen::OrthodontFixed if self.n != ORTHODONT_N => {
                bad(format!("the fixed covariate pattern needs N = {ORTHODONT_N}"))
            }
            CovariateGen::Bernoulli(pm) if !(pm > 0.0 && pm < 1.0) => {
                bad(format!("Bernoulli probability {pm} must lie in (0, 1)"))
            }
            _ => {
                self.fit_cfg.validate()?;
                self.inf_cfg.validate()
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct SimDataset {
    pub data: DataSet,
    pub u: DMatrix<f64>,
    pub e: DMatrix<f64>,
}

/// SplitMix64 finalizer; derives independent per-replicate seeds.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for `purpose` (0 data, 1 fit, 2 bootstrap) of replicate `rep`.
pub fn replicate_seed(master: u64, rep: usize, purpose: u64) -> u64 {
    mix(mix(mix(master) ^ rep as u64) ^ purpose)
}

/// Draws one data set from the design using `rng`.
pub fn generate_with<R: Rng + ?Sized>(design: &SimDesign, rng: &mut R) -> SimDataset {
    let (p, q, n) = (design.p(), design.q(), design.n);
    let mut a = DMatrix::from_element(2, n, 1.0);
    match design.covariate_gen {
        CovariateGen::OrthodontFixed => {
            for j in 0..n {
                a[(1, j)] = if j < ORTHODONT_MALES { 1.0 } else { 0.0 };
            }
        }
        CovariateGen::Bernoulli(pm) => {
            let bern = Bernoulli::new(pm).expect("probability checked by validate");
            for j in 0..n {
                a[(1, j)] = if bern.sample(rng) { 1.0 } else { 0.0 };
            }
        }
    }
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let tau = design.tau2_true.sqrt();
    let u = DMatrix::from_fn(q, n, |_, _| tau * std_normal.sample(rng));
    let sigma = design.sigma2_true.sqrt();
    let e = DMatrix::from_fn(p, n, |_, _| {
        let eps = match design.error_dist {
            ErrorDist::Gaussian => std_normal.sample(rng),
            ErrorDist::ExpCentered => {
                let z: f64 = Exp1.sample(rng);
                z - 1.0
            }
        };
        sigma * eps
    });
    let y = &design.x_true * (&design.theta_true * &a + &u) + &e;
    let mut data = DataSet::new_allow_negative(y, a).expect("generated shapes agree");
    data.row_labels_a = vec!["intercept".into(), "male".into()];
    SimDataset { data, u, e }
}

/// Replicate `rep` of the design, reproducible from `(design.seed, rep)`.
pub fn generate_dataset(design: &SimDesign, rep: usize) -> SimDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(replicate_seed(design.seed, rep, 0));
    generate_with(design, &mut rng)
}

/// Reorders fitted components to best match `x_true` (least squares over
/// column permutations), permuting `X` columns and `Θ`, `U` rows together.
pub fn align_components(params: &ModelParams, x_true: &DMatrix<f64>) -> ModelParams {
    let q = params.q();
    if q == 1 || x_true.shape() != params.x.shape() {
        return params.clone();
    }
    let cost = DMatrix::from_fn(q, q, |i, j| (params.x.column(j) - x_true.column(i)).norm_squared());
    let perm = best_assignment(&cost);
    let mut out = params.clone();
    for (i, &j) in perm.iter().enumerate() {
        out.x.set_column(i, &params.x.column(j));
        out.theta.set_row(i, &params.theta.row(j));
        out.u.set_row(i, &params.u.row(j));
    }
    out
}

/// `perm[i]` = fitted column assigned to true column `i`.
fn best_assignment(cost: &DMatrix<f64>) -> Vec<usize> {
    let q = cost.nrows();
    let mut perm: Vec<usize> = (0..q).collect();
    if q > 7 {
        // Greedy for large ranks; exhaustive search is cheap below that.
        let mut used = vec![false; q];
        for (i, slot) in perm.iter_mut().enumerate() {
            let j = (0..q)
                .filter(|&j| !used[j])
                .min_by(|&a, &b| cost[(i, a)].total_cmp(&cost[(i, b)]))
                .expect("unused column remains");
            used[j] = true;
            *slot = j;
        }
        return perm;
    }
    let total = |p: &[usize]| p.iter().enumerate().map(|(i, &j)| cost[(i, j)]).sum::<f64>();
    let mut best = perm.clone();
    let mut best_cost = total(&perm);
    permute(&mut perm, 0, &mut |p| {
        let c = total(p);
        if c < best_cost {
            best_cost = c;
            best = p.to_vec();
        }
    });
    best
}

fn permute(v: &mut [usize], k: usize, f: &mut impl FnMut(&[usize])) {
    if k == v.len() {
        f(v);
        return;
    }
    for i in k..v.len() {
        v.swap(k, i);
        permute(v, k + 1, f);
        v.swap(k, i);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRecord {
    pub rep: usize,
    pub estimate: f64,
    pub se: f64,
    pub bse: f64,
    pub reject_se: bool,
    pub reject_bse: bool,
    pub cover_se: bool,
    pub cover_bse: bool,
    pub cover_pct: bool,
    pub df_ratio: f64,
    pub lambda: f64,
    pub converged: bool,
    pub cap_activated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateFailure {
    pub rep: usize,
    pub message: String,
}

/// Fits and infers one replicate.
pub fn run_replicate(design: &SimDesign, rep: usize) -> Result<ReplicateRecord> {
    let sim = generate_dataset(design, rep);
    let fit_cfg = FitConfig {
        rng_seed: replicate_seed(design.seed, rep, 1),
        ..design.fit_cfg.clone()
    };
    let fitted = fit(&sim.data, &fit_cfg)?;
    let params = align_components(&fitted.params, &design.x_true);
    let inf_cfg = InferenceConfig {
        b: design.b,
        rng_seed: replicate_seed(design.seed, rep, 2),
        ..design.inf_cfg.clone()
    };
    let report = infer(&sim.data, &params, &inf_cfg)?;
    let (tq, tk) = design.target;
    let row = report.row(tq, tk).expect("target inside Θ");
    let truth = design.truth();
    let alpha = 1.0 - inf_cfg.ci_level;
    let (_, p_bse) = wald_test(row.estimate, row.bse, row.side);
    let (_, bse_unclipped) = crate::inference::wald_interval(row.estimate, row.bse, inf_cfg.ci_level);
    let inside = |(lo, hi): (f64, f64)| lo <= truth && truth <= hi;
    let record = ReplicateRecord {
        rep,
        estimate: row.estimate,
        se: row.se,
        bse: row.bse,
        reject_se: row.p_value < alpha,
        reject_bse: p_bse < alpha,
        cover_se: inside(row.wald_ci_unclipped),
        cover_bse: inside(bse_unclipped),
        cover_pct: row.percentile_ci.is_some_and(inside),
        df_ratio: fitted.diagnostics.saturation_ratio,
        lambda: params.lambda,
        converged: fitted.converged,
        cap_activated: fitted.diagnostics.cap_ever_activated,
    };
    let finite = [record.estimate, record.se, record.df_ratio, record.lambda]
        .iter()
        .all(|v| v.is_finite());
    if !finite {
        return Err(NmfreError::SingularSystem(format!("non-finite summary in replicate {rep}")));
    }
    Ok(record)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloSummary {
    pub n: usize,
    pub q: usize,
    pub scenario: Scenario,
    pub error_dist: ErrorDist,
    pub cap: String,
    pub truth: f64,
    pub r: usize,
    pub b: usize,
    pub completed: usize,
    pub failed: usize,
    pub not_converged: usize,
    pub bias: f64,
    /// Monte Carlo SD with denominator `R`, so `RMSE² = bias² + SD²`.
    pub sd: f64,
    pub rmse: f64,
    pub mean_se: f64,
    pub mean_bse: f64,
    pub reject_se: f64,
    pub reject_bse: f64,
    pub cover_se: f64,
    pub cover_bse: f64,
    pub cover_pct: f64,
    pub mean_df_ratio: f64,
    pub max_df_ratio: f64,
    /// 99th percentile of `df_U / (NQ)` over replicates.
    pub df_ratio_q99: f64,
    pub mean_lambda: f64,
    pub failures: Vec<ReplicateFailure>,
    #[serde(skip)]
    pub records: Vec<ReplicateRecord>,
}

/// Aggregates replicate records in order.
pub fn summarize(design: &SimDesign, records: Vec<ReplicateRecord>, failures: Vec<ReplicateFailure>) -> MonteCarloSummary {
    let m = records.len() as f64;
    let mean = |f: &dyn Fn(&ReplicateRecord) -> f64| records.iter().map(f).sum::<f64>() / m;
    let rate = |f: &dyn Fn(&ReplicateRecord) -> bool| records.iter().filter(|r| f(r)).count() as f64 / m;
    let truth = design.truth();
    let mean_est = mean(&|r| r.estimate);
    let bias = mean_est - truth;
    let sd = mean(&|r| (r.estimate - mean_est).powi(2)).sqrt();
    let mse = mean(&|r| (r.estimate - truth).powi(2));
    let mut ratios: Vec<f64> = records.iter().map(|r| r.df_ratio).collect();
    ratios.sort_by(|a, b| a.total_cmp(b));
    MonteCarloSummary {
        n: design.n,
        q: design.q(),
        scenario: design.scenario,
        error_dist: design.error_dist,
        cap: design.cap_label(),
        truth,
        r: design.r,
        b: design.b,
        completed: records.len(),
        failed: failures.len(),
        not_converged: records.iter().filter(|r| !r.converged).count(),
        bias,
        sd,
        rmse: mse.sqrt(),
        mean_se: mean(&|r| r.se),
        mean_bse: mean(&|r| r.bse),
        reject_se: rate(&|r| r.reject_se),
        reject_bse: rate(&|r| r.reject_bse),
        cover_se: rate(&|r| r.cover_se),
        cover_bse: rate(&|r| r.cover_bse),
        cover_pct: rate(&|r| r.cover_pct),
        mean_df_ratio: mean(&|r| r.df_ratio),
        max_df_ratio: ratios.last().copied().unwrap_or(f64::NAN),
        df_ratio_q99: quantile_sorted(&ratios, 0.99),
        mean_lambda: mean(&|r| r.lambda),
        failures,
        records,
    }
}

/// Runs all replicates in parallel and aggregates them in replicate order.
///
/// Failed replicates are excluded and counted; the run aborts when they
/// reach 1% of `R`.
pub fn run_monte_carlo(design: &SimDesign) -> Result<MonteCarloSummary> {
    design.validate()?;
    let outcomes: Vec<Result<ReplicateRecord>> =
        (0..design.r).into_par_iter().map(|rep| run_replicate(design, rep)).collect();
    let mut records = Vec::with_capacity(design.r);
    let mut failures = Vec::new();
    for (rep, out) in outcomes.into_iter().enumerate() {
        match out {
            Ok(r) => records.push(r),
            Err(e) => failures.push(ReplicateFailure { rep, message: e.to_string() }),
        }
    }
    if failures.len() as f64 >= MAX_FAILURE_SHARE * design.r as f64 && !failures.is_empty() {
        return Err(NmfreError::SimulationFailure {
            failed: failures.len(),
            total: design.r,
        });
    }
    Ok(summarize(design, records, failures))
}

/// Stress design with `R` replicates and `B` bootstrap draws.
pub fn run_stress_test(
    cap: Option<f64>,
    error_dist: ErrorDist,
    scenario: Scenario,
    r: usize,
    b: usize,
    seed: u64,
) -> Result<MonteCarloSummary> {
    let design = SimDesign {
        r,
        b,
        seed,
        ..SimDesign::stress(cap, error_dist, scenario)
    };
    run_monte_carlo(&design)
}

fn pair(a: f64, b: f64) -> String {
    format!("{a:.3}/{b:.3}")
}

/// Baseline table layout: SE/BSE pairs as `a/b`.
pub fn write_baseline_table<W: Write>(rows: &[MonteCarloSummary], out: W) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "N", "Hypothesis", "Error", "Bias", "SD", "RMSE", "Mean", "Reject", "Cover", "PctCover", "dfU",
    ])?;
    for s in rows {
        w.write_record([
            s.n.to_string(),
            s.scenario.label().into(),
            s.error_dist.label().into(),
            format!("{:.3}", s.bias),
            format!("{:.3}", s.sd),
            format!("{:.3}", s.rmse),
            pair(s.mean_se, s.mean_bse),
            pair(s.reject_se, s.reject_bse),
            pair(s.cover_se, s.cover_bse),
            format!("{:.3}", s.cover_pct),
            format!("{:.3}", s.mean_df_ratio),
        ])?;
    }
    w.flush()
}

/// Stress table layout; Reject and Cover are BSE based.
pub fn write_stress_table<W: Write>(rows: &[MonteCarloSummary], out: W) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "Hypothesis", "r_max", "Error", "Bias", "SD", "dfU_0.99", "MeanLambda", "Reject", "Cover",
    ])?;
    for s in rows {
        let lambda = if s.mean_lambda < 1e-3 {
            "<0.001".to_string()
        } else {
            format!("{:.4}", s.mean_lambda)
        };
        w.write_record([
            s.scenario.label().into(),
            s.cap.clone(),
            s.error_dist.label().into(),
            format!("{:.3}", s.bias),
            format!("{:.3}", s.sd),
            format!("{:.3}", s.df_ratio_q99),
            lambda,
            format!("{:.3}", s.reject_bse),
            format!("{:.3}", s.cover_bse),
        ])?;
    }
    w.flush()
}

/// One line per replicate, full precision.
pub fn write_replicates<W: Write>(records: &[ReplicateRecord], out: W) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        w.serialize(r)?;
    }
    w.flush()
}
