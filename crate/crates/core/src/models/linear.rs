use nalgebra::DMatrix;
use ndarray::{Array2, Array3, ArrayView2};
use serde::{Deserialize, Serialize};

use super::config::{validate_quantiles, Architecture, LinearConfig};
use crate::dataio::CALENDAR_CARDINALITY;
use crate::error::{Error, Result};

/// Relative threshold on the QR diagonal below which a design is rank deficient.
const RANK_TOLERANCE: f64 = 1e-10;
const LASSO_MAX_SWEEPS: usize = 10_000;
const LASSO_TOLERANCE: f64 = 1e-9;

/// Columns of the linear design: intercept, one-hot month, day and weekday
/// with the first level of each dropped, then the predictors.
pub fn design_width(n_predictors: usize) -> usize {
    1 + CALENDAR_CARDINALITY.iter().map(|c| c - 1).sum::<usize>() + n_predictors
}

/// Builds the design matrix for rows of zero-based calendar indices and
/// normalized predictors.
pub fn design_matrix(calendar: &[[usize; 3]], predictors: ArrayView2<f32>) -> Result<Array2<f64>> {
    if calendar.len() != predictors.nrows() {
        return Err(Error::Layout(format!(
            "{} calendar rows for {} predictor rows",
            calendar.len(),
            predictors.nrows()
        )));
    }
    let p = predictors.ncols();
    let mut x = Array2::zeros((calendar.len(), design_width(p)));
    for (i, ix) in calendar.iter().enumerate() {
        x[[i, 0]] = 1.0;
        let mut col = 1;
        for (c, &card) in CALENDAR_CARDINALITY.iter().enumerate() {
            if ix[c] >= card {
                return Err(Error::Layout(format!("calendar index {} out of range {card}", ix[c])));
            }
            if ix[c] > 0 {
                x[[i, col + ix[c] - 1]] = 1.0;
            }
            col += card - 1;
        }
        for j in 0..p {
            x[[i, col + j]] = predictors[[i, j]] as f64;
        }
    }
    Ok(x)
}

fn to_dmatrix(a: ArrayView2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

fn from_dmatrix(m: &DMatrix<f64>) -> Array2<f64> {
    Array2::from_shape_fn((m.nrows(), m.ncols()), |(i, j)| m[(i, j)])
}

/// Least squares through a QR factorization. Fails on rank-deficient designs.
pub fn fit_ols(x: ArrayView2<f64>, y: ArrayView2<f64>) -> Result<Array2<f64>> {
    let (n, p) = x.dim();
    if y.nrows() != n {
        return Err(Error::Layout(format!("{n} design rows for {} responses", y.nrows())));
    }
    if n < p {
        return Err(Error::Singular(format!(
            "{n} samples cannot determine {p} coefficients; use ridge or lasso"
        )));
    }
    let qr = to_dmatrix(x).qr();
    let r = qr.r();
    let diag_max = r.diagonal().iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if let Some(k) = r.diagonal().iter().position(|v| v.abs() <= RANK_TOLERANCE * diag_max.max(1.0)) {
        return Err(Error::Singular(format!(
            "design matrix is rank deficient (column {k} is collinear or constant); use ridge or lasso"
        )));
    }
    let qty = qr.q().transpose() * to_dmatrix(y);
    let beta = r
        .solve_upper_triangular(&qty)
        .ok_or_else(|| Error::Singular("triangular solve failed".into()))?;
    Ok(from_dmatrix(&beta))
}

/// Minimizes `||y - X b||^2 + lambda ||b||^2`.
pub fn fit_ridge(x: ArrayView2<f64>, y: ArrayView2<f64>, lambda: f64) -> Result<Array2<f64>> {
    if y.nrows() != x.nrows() {
        return Err(Error::Layout(format!("{} design rows for {} responses", x.nrows(), y.nrows())));
    }
    let xm = to_dmatrix(x);
    let mut gram = xm.transpose() * &xm;
    for i in 0..gram.nrows() {
        gram[(i, i)] += lambda;
    }
    let rhs = xm.transpose() * to_dmatrix(y);
    let chol = gram
        .cholesky()
        .ok_or_else(|| Error::Singular(format!("ridge system is not positive definite at lambda {lambda}")))?;
    Ok(from_dmatrix(&chol.solve(&rhs)))
}

/// Minimizes `||y - X b||^2 / (2n) + alpha ||b||_1` by cyclic coordinate descent.
pub fn fit_lasso(x: ArrayView2<f64>, y: ArrayView2<f64>, alpha: f64) -> Result<Array2<f64>> {
    let (n, p) = x.dim();
    if y.nrows() != n {
        return Err(Error::Layout(format!("{n} design rows for {} responses", y.nrows())));
    }
    if n == 0 {
        return Err(Error::Data("no samples to fit".into()));
    }
    let nf = n as f64;
    let col_sq: Vec<f64> = (0..p).map(|j| x.column(j).iter().map(|v| v * v).sum::<f64>() / nf).collect();
    let mut beta = Array2::zeros((p, y.ncols()));
    for k in 0..y.ncols() {
        let mut resid: Vec<f64> = y.column(k).to_vec();
        let mut converged = false;
        for _ in 0..LASSO_MAX_SWEEPS {
            let mut max_step = 0.0f64;
            for j in 0..p {
                if col_sq[j] == 0.0 {
                    continue;
                }
                let col = x.column(j);
                let old = beta[[j, k]];
                let rho = col.iter().zip(&resid).map(|(a, r)| a * r).sum::<f64>() / nf + col_sq[j] * old;
                let new = soft_threshold(rho, alpha) / col_sq[j];
                if new != old {
                    let delta = new - old;
                    for (r, a) in resid.iter_mut().zip(col.iter()) {
                        *r -= a * delta;
                    }
                    beta[[j, k]] = new;
                    max_step = max_step.max(delta.abs());
                }
            }
            if max_step < LASSO_TOLERANCE {
                converged = true;
                break;
            }
        }
        if !converged {
            log::warn!("lasso coordinate descent hit {LASSO_MAX_SWEEPS} sweeps on output {k}");
        }
    }
    Ok(beta)
}

fn soft_threshold(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

/// Linear interpolation between order statistics of a sorted sample.
pub fn empirical_quantile(sorted: &[f64], tau: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of an empty sample");
    let pos = tau.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// A fitted linear regressor on the calendar-and-weather design.
///
/// The median track is the point forecast itself; other levels add the
/// training residual quantile measured relative to the residual median.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub variant: Architecture,
    pub n_predictors: usize,
    /// (design width, targets)
    pub coefficients: Array2<f64>,
    pub quantile_levels: Vec<f64>,
    /// (targets, quantiles)
    pub residual_offsets: Array2<f64>,
}

impl LinearModel {
    /// Fits every target column at once. Inputs and targets are normalized.
    pub fn fit(
        variant: Architecture,
        config: &LinearConfig,
        quantile_levels: &[f64],
        calendar: &[[usize; 3]],
        predictors: ArrayView2<f32>,
        targets: ArrayView2<f32>,
    ) -> Result<Self> {
        validate_quantiles(quantile_levels)?;
        let x = design_matrix(calendar, predictors)?;
        let y = targets.mapv(f64::from);
        let coefficients = match variant {
            Architecture::LinearO => fit_ols(x.view(), y.view())?,
            Architecture::LinearRidge => fit_ridge(x.view(), y.view(), config.ridge_lambda)?,
            Architecture::LinearLasso => fit_lasso(x.view(), y.view(), config.lasso_alpha)?,
            other => return Err(Error::Config(format!("{other} is not a linear architecture"))),
        };
        let fitted = x.dot(&coefficients);
        let m = y.ncols();
        let mut residual_offsets = Array2::zeros((m, quantile_levels.len()));
        for j in 0..m {
            let mut r: Vec<f64> = (0..y.nrows()).map(|i| y[[i, j]] - fitted[[i, j]]).collect();
            r.sort_by(f64::total_cmp);
            let median = empirical_quantile(&r, 0.5);
            for (q, &tau) in quantile_levels.iter().enumerate() {
                residual_offsets[[j, q]] = empirical_quantile(&r, tau) - median;
            }
        }
        Ok(LinearModel {
            variant,
            n_predictors: predictors.ncols(),
            coefficients,
            quantile_levels: quantile_levels.to_vec(),
            residual_offsets,
        })
    }

    pub fn n_targets(&self) -> usize {
        self.coefficients.ncols()
    }

    /// Point forecast, (rows, targets).
    pub fn predict_point(&self, calendar: &[[usize; 3]], predictors: ArrayView2<f32>) -> Result<Array2<f64>> {
        if predictors.ncols() != self.n_predictors {
            return Err(Error::Layout(format!(
                "expected {} predictors, got {}",
                self.n_predictors,
                predictors.ncols()
            )));
        }
        Ok(design_matrix(calendar, predictors)?.dot(&self.coefficients))
    }

    /// Quantile forecasts, (rows, targets, quantiles).
    pub fn predict(&self, calendar: &[[usize; 3]], predictors: ArrayView2<f32>) -> Result<Array3<f64>> {
        let point = self.predict_point(calendar, predictors)?;
        let (n, m) = point.dim();
        Ok(Array3::from_shape_fn((n, m, self.quantile_levels.len()), |(i, j, q)| {
            point[[i, j]] + self.residual_offsets[[j, q]]
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DVector;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_problem(n: usize, p: usize, seed: u64) -> (Array2<f64>, Array2<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Array2::from_shape_simple_fn((n, p), || rng.random_range(-1.0..1.0));
        let y = Array2::from_shape_simple_fn((n, 1), || rng.random_range(-1.0..1.0));
        (x, y)
    }

    #[test]
    fn ols_recovers_exact_line() {
        let x = Array2::from_shape_fn((10, 2), |(i, j)| if j == 0 { 1.0 } else { i as f64 });
        let y = Array2::from_shape_fn((10, 1), |(i, _)| 2.0 * i as f64);
        let b = fit_ols(x.view(), y.view()).unwrap();
        assert_abs_diff_eq!(b[[0, 0]], 0.0, epsilon = 1e-10);
        assert_abs_diff_eq!(b[[1, 0]], 2.0, epsilon = 1e-10);
    }

    #[test]
    fn ols_rejects_collinear_design() {
        let x = Array2::from_shape_fn((8, 3), |(i, j)| if j == 2 { 2.0 * i as f64 } else if j == 1 { i as f64 } else { 1.0 });
        let y = Array2::from_shape_fn((8, 1), |(i, _)| i as f64);
        assert!(matches!(fit_ols(x.view(), y.view()), Err(Error::Singular(_))));
        let (x, y) = random_problem(3, 5, 1);
        assert!(matches!(fit_ols(x.view(), y.view()), Err(Error::Singular(_))));
    }

    #[test]
    fn ridge_matches_normal_equations() {
        let (x, y) = random_problem(50, 5, 7);
        let lambda = 0.7;
        let b = fit_ridge(x.view(), y.view(), lambda).unwrap();
        // independent oracle: explicit inverse of the regularized Gram matrix
        let xm = to_dmatrix(x.view());
        let a = xm.transpose() * &xm + DMatrix::identity(5, 5) * lambda;
        let expected = a.try_inverse().unwrap() * xm.transpose() * DVector::from_column_slice(y.as_slice().unwrap());
        for j in 0..5 {
            assert_abs_diff_eq!(b[[j, 0]], expected[j], epsilon = 1e-8);
        }
    }

    #[test]
    fn ridge_shrinks_to_zero() {
        let (x, y) = random_problem(40, 4, 3);
        let small = fit_ridge(x.view(), y.view(), 1e-3).unwrap();
        let large = fit_ridge(x.view(), y.view(), 1e9).unwrap();
        assert!(large.iter().all(|v| v.abs() < 1e-7));
        assert!(small.iter().any(|v| v.abs() > 1e-3));
    }

    #[test]
    fn lasso_without_penalty_matches_ols_and_large_penalty_zeroes() {
        let (x, y) = random_problem(60, 4, 9);
        let ols = fit_ols(x.view(), y.view()).unwrap();
        let lasso = fit_lasso(x.view(), y.view(), 0.0).unwrap();
        for (a, b) in ols.iter().zip(lasso.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-6);
        }
        let zero = fit_lasso(x.view(), y.view(), 10.0).unwrap();
        assert!(zero.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn lasso_satisfies_optimality_conditions() {
        let (x, y) = random_problem(80, 6, 21);
        let alpha = 0.05;
        let b = fit_lasso(x.view(), y.view(), alpha).unwrap();
        let r = &y - &x.dot(&b);
        let g = x.t().dot(&r) / 80.0;
        for j in 0..6 {
            if b[[j, 0]] != 0.0 {
                assert_abs_diff_eq!(g[[j, 0]], alpha * b[[j, 0]].signum(), epsilon = 1e-6);
            } else {
                assert!(g[[j, 0]].abs() <= alpha + 1e-6);
            }
        }
    }

    #[test]
    fn design_is_one_hot_with_dropped_first_level() {
        let p = Array2::from_shape_vec((2, 1), vec![0.5f32, -1.0]).unwrap();
        let x = design_matrix(&[[0, 0, 0], [11, 30, 6]], p.view()).unwrap();
        assert_eq!(x.ncols(), 1 + 11 + 30 + 6 + 1);
        assert_eq!(x.row(0).iter().filter(|v| **v == 1.0).count(), 1);
        assert_eq!(x[[1, 11]], 1.0);
        assert_eq!(x[[1, 11 + 30]], 1.0);
        assert_eq!(x[[1, 11 + 30 + 6]], 1.0);
        assert_eq!(x[[1, 48]], -1.0);
    }

    #[test]
    fn empirical_quantile_interpolates() {
        let s = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(empirical_quantile(&s, 0.5), 3.0);
        assert_eq!(empirical_quantile(&s, 0.0), 1.0);
        assert_abs_diff_eq!(empirical_quantile(&s, 0.1), 1.4, epsilon = 1e-12);
    }

    #[test]
    fn linear_model_prediction_is_design_product() {
        let n = 400;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cal: Vec<[usize; 3]> = (0..n).map(|i| [(i / 31) % 12, i % 31, i % 7]).collect();
        let pred = Array2::from_shape_simple_fn((n, 2), || rng.random_range(-1.0f32..1.0));
        let tgt = Array2::from_shape_fn((n, 1), |(i, _)| pred[[i, 0]] * 0.8 + ((i * 7919) % 13) as f32 * 0.01);
        let q = [0.05, 0.5, 0.95];
        let model = LinearModel::fit(Architecture::LinearO, &LinearConfig::default(), &q, &cal, pred.view(), tgt.view()).unwrap();
        let point = model.predict_point(&cal, pred.view()).unwrap();
        let manual = design_matrix(&cal, pred.view()).unwrap().dot(&model.coefficients);
        assert_eq!(point, manual);
        let full = model.predict(&cal, pred.view()).unwrap();
        for i in 0..n {
            assert_eq!(full[[i, 0, 1]], point[[i, 0]]);
            assert!(full[[i, 0, 0]] <= full[[i, 0, 1]] && full[[i, 0, 1]] <= full[[i, 0, 2]]);
        }
    }
}
