//! One-step Newton multiplier bootstrap.
//!
//! Replicate `b` reweights the unit scores with i.i.d. mean-zero,
//! unit-variance multipliers, maps the resampled score through `I⁻¹` and
//! projects onto `Θ ≥ 0`. Each replicate draws from its own ChaCha stream
//! `(seed, b)`, so serial and parallel runs agree bit for bit.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::score::{stack_scores, ReducedInformation};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MultiplierDist {
    /// `ζ − 1` with `ζ ~ Exp(1)`.
    #[default]
    ExpCentered,
    Rademacher,
    Gaussian,
}

impl MultiplierDist {
    pub fn sample<R: Rng + ?Sized>(self, rng: &mut R) -> f64 {
        match self {
            Self::ExpCentered => {
                let z: f64 = Exp1.sample(rng);
                z - 1.0
            }
            Self::Rademacher => {
                if rng.random::<bool>() {
                    1.0
                } else {
                    -1.0
                }
            }
            Self::Gaussian => StandardNormal.sample(rng),
        }
    }
}

/// Multipliers of replicate `b`.
pub fn draw_multipliers(dist: MultiplierDist, n: usize, seed: u64, b: usize) -> DVector<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(b as u64);
    DVector::from_fn(n, |_, _| dist.sample(&mut rng))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapDraws {
    /// `B x QK`, row `b` is the projected replicate `vec(Θ̂*)`.
    #[serde(with = "crate::linalg::matrix_rows")]
    pub replicates: DMatrix<f64>,
    /// Per-coefficient sample SD of the replicates (denominator `B − 1`).
    pub bse: Vec<f64>,
    pub multiplier_mean: f64,
    pub multiplier_var: f64,
}

/// Projects `vec(Θ̂) − sqrt(scale) · I⁻¹ Σ_n ξ_n vec(S_n)` onto the
/// non-negative orthant for each row of `multipliers` (`B x N`).
pub fn one_step_replicates(
    theta_hat: &DMatrix<f64>,
    scores: &[DMatrix<f64>],
    info: &ReducedInformation,
    multipliers: &DMatrix<f64>,
    scale: f64,
) -> DMatrix<f64> {
    let m = influence(scores, info, scale);
    let mut out = DMatrix::zeros(multipliers.nrows(), theta_hat.len());
    for (b, xi) in multipliers.row_iter().enumerate() {
        let row = replicate(theta_hat, &m, &xi.transpose());
        out.row_mut(b).copy_from(&row.transpose());
    }
    out
}

/// `sqrt(scale) · I⁻¹ [vec(S_1) … vec(S_N)]`.
fn influence(scores: &[DMatrix<f64>], info: &ReducedInformation, scale: f64) -> DMatrix<f64> {
    info.solve_columns(&stack_scores(scores)) * scale.sqrt()
}

fn replicate(theta_hat: &DMatrix<f64>, influence: &DMatrix<f64>, xi: &DVector<f64>) -> DVector<f64> {
    let step = influence * xi;
    DVector::from_fn(theta_hat.len(), |i, _| (theta_hat[i] - step[i]).max(0.0))
}

pub fn one_step_bootstrap(
    theta_hat: &DMatrix<f64>,
    scores: &[DMatrix<f64>],
    info: &ReducedInformation,
    b: usize,
    dist: MultiplierDist,
    seed: u64,
    scale: f64,
) -> BootstrapDraws {
    let n = scores.len();
    let m = influence(scores, info, scale);
    let draws: Vec<(DVector<f64>, f64, f64)> = (0..b)
        .into_par_iter()
        .map(|bi| {
            let xi = draw_multipliers(dist, n, seed, bi);
            let (s, ss) = xi.iter().fold((0.0, 0.0), |(s, ss), v| (s + v, ss + v * v));
            (replicate(theta_hat, &m, &xi), s, ss)
        })
        .collect();

    let qk = theta_hat.len();
    let mut replicates = DMatrix::zeros(b, qk);
    let (mut sum, mut sumsq) = (0.0, 0.0);
    for (bi, (row, s, ss)) in draws.iter().enumerate() {
        replicates.row_mut(bi).copy_from(&row.transpose());
        sum += s;
        sumsq += ss;
    }
    let count = (b * n) as f64;
    let multiplier_mean = sum / count;
    let multiplier_var = if count > 1.0 {
        (sumsq - count * multiplier_mean * multiplier_mean) / (count - 1.0)
    } else {
        f64::NAN
    };
    BootstrapDraws {
        bse: column_sd(&replicates),
        replicates,
        multiplier_mean,
        multiplier_var,
    }
}

/// Sample SD of each column with denominator `rows − 1`; NaN with fewer than two rows.
pub fn column_sd(m: &DMatrix<f64>) -> Vec<f64> {
    let rows = m.nrows();
    m.column_iter()
        .map(|c| {
            if rows < 2 {
                return f64::NAN;
            }
            let mean = c.mean();
            let ss: f64 = c.iter().map(|v| (v - mean).powi(2)).sum();
            (ss / (rows - 1) as f64).sqrt()
        })
        .collect()
}

/// Linear-interpolation quantile of an ascending slice (R type 7).
pub fn quantile_sorted(sorted: &[f64], prob: f64) -> f64 {
    match sorted.len() {
        0 => f64::NAN,
        1 => sorted[0],
        len => {
            let h = (len - 1) as f64 * prob.clamp(0.0, 1.0);
            let lo = h.floor() as usize;
            let hi = (lo + 1).min(len - 1);
            sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
        }
    }
}

/// Equal-tailed percentile interval of each column at `level`.
pub fn percentile_intervals(replicates: &DMatrix<f64>, level: f64) -> Vec<(f64, f64)> {
    let alpha = 1.0 - level;
    replicates
        .column_iter()
        .map(|c| {
            let mut v: Vec<f64> = c.iter().copied().collect();
            v.sort_by(|a, b| a.total_cmp(b));
            (quantile_sorted(&v, alpha / 2.0), quantile_sorted(&v, 1.0 - alpha / 2.0))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DataSet;
    use crate::inference::score::score_contributions;
    use nalgebra::dmatrix;

    fn setup() -> (DMatrix<f64>, Vec<DMatrix<f64>>, ReducedInformation) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 30;
        let mut a = DMatrix::from_fn(2, n, |_, _| f64::from(rng.random_range(0..2u8)));
        a.row_mut(0).fill(1.0);
        let y = DMatrix::from_fn(4, n, |_, _| rng.random_range(5.0..15.0));
        let x = dmatrix![0.2; 0.25; 0.25; 0.3];
        // Second coefficient sits on the boundary.
        let theta = dmatrix![40.0, 0.0];
        let data = DataSet::new(y, a).unwrap();
        let scores = score_contributions(&data, &x, &theta, 1.0, 1.0).unwrap();
        let info = ReducedInformation::new(&x, &data.a, 1.0, 1.0).unwrap();
        (theta, scores, info)
    }

    #[test]
    fn zero_multipliers_reproduce_estimate() {
        let (theta, scores, info) = setup();
        let reps = one_step_replicates(&theta, &scores, &info, &DMatrix::zeros(7, 30), 1.0);
        for row in reps.row_iter() {
            assert_eq!(row.iter().copied().collect::<Vec<_>>(), theta.as_slice().to_vec());
        }
        assert!(column_sd(&reps).iter().all(|&s| s == 0.0));
    }

    #[test]
    fn replicates_are_projected_and_reproducible() {
        let (theta, scores, info) = setup();
        let a = one_step_bootstrap(&theta, &scores, &info, 400, MultiplierDist::ExpCentered, 9, 1.0);
        let b = one_step_bootstrap(&theta, &scores, &info, 400, MultiplierDist::ExpCentered, 9, 1.0);
        assert_eq!(a, b);
        assert!(a.replicates.iter().all(|&v| v >= 0.0));
        // Boundary coefficient: an atom at zero.
        let zeros = a.replicates.column(1).iter().filter(|&&v| v == 0.0).count();
        assert!(zeros > 0);
        assert!(zeros < 400);
    }

    #[test]
    fn serial_matches_explicit_multipliers() {
        let (theta, scores, info) = setup();
        let boot = one_step_bootstrap(&theta, &scores, &info, 25, MultiplierDist::Rademacher, 4, 1.0);
        let mut xi = DMatrix::zeros(25, 30);
        for b in 0..25 {
            xi.row_mut(b).copy_from(&draw_multipliers(MultiplierDist::Rademacher, 30, 4, b).transpose());
        }
        let reps = one_step_replicates(&theta, &scores, &info, &xi, 1.0);
        assert_eq!(reps, boot.replicates);
    }

    #[test]
    fn multiplier_moments() {
        for dist in [MultiplierDist::ExpCentered, MultiplierDist::Rademacher, MultiplierDist::Gaussian] {
            let n = 50;
            let b = 400;
            let (mut s, mut ss) = (0.0, 0.0);
            for bi in 0..b {
                for v in draw_multipliers(dist, n, 17, bi).iter() {
                    s += v;
                    ss += v * v;
                }
            }
            let count = (n * b) as f64;
            let mean = s / count;
            let var = ss / count - mean * mean;
            assert!(mean.abs() < 4.0 / count.sqrt(), "{dist:?} mean {mean}");
            assert!((var - 1.0).abs() < 0.1, "{dist:?} var {var}");
        }
    }

    #[test]
    fn quantiles_type7() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile_sorted(&v, 0.0), 1.0);
        assert_eq!(quantile_sorted(&v, 1.0), 4.0);
        assert!((quantile_sorted(&v, 0.5) - 2.5).abs() < 1e-15);
        assert!((quantile_sorted(&v, 0.25) - 1.75).abs() < 1e-15);
    }

    #[test]
    fn single_replicate_sd_is_nan() {
        assert!(column_sd(&DMatrix::from_element(1, 2, 3.0))[0].is_nan());
    }
}
