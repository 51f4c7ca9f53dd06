//! Client-side estimation: lasso fits, debiasing, and assembly of the
//! summary packet that gets shipped to the aggregator.
//!
//! The local estimator is the unpenalized minimizer (least squares or
//! logistic maximum likelihood) when the dimension is comfortably below the
//! sample size, and a debiased lasso otherwise. Either way the packet holds
//! the estimate plus the gradient and Hessian of the local empirical loss at
//! it.

use nalgebra::{DMatrix, DVector};

use crate::error::{IcrError, Result};
use crate::loss::{empirical_gradient, empirical_hessian, loss_d2, sigmoid, LocalDataset};
use crate::model::{LossKind, SummaryPacket};

/// Configuration of the client-side fits.
#[derive(Debug, Clone)]
pub struct LassoConfig {
    /// Candidate penalty levels, strictly descending. Empty means "derive a
    /// 20-point logarithmic grid from the data".
    pub lambda_grid: Vec<f64>,
    /// Folds for the cross-validated choice of the main lasso penalty.
    pub cv_folds: usize,
    /// c in the nodewise penalty c * sqrt(log p / n).
    pub nodewise_lambda_scale: f64,
    /// Total coordinate-sweep budget per fit.
    pub max_iter: usize,
    /// KKT residual cutoff.
    pub tol: f64,
    /// Standardize covariate columns (mean 0, variance 1) inside
    /// `make_packet` before fitting. Coefficients are reported on the
    /// standardized scale; the scaling is not transmitted.
    pub standardize: bool,
}

impl Default for LassoConfig {
    fn default() -> Self {
        Self {
            lambda_grid: Vec::new(),
            cv_folds: 5,
            nodewise_lambda_scale: 1.0,
            max_iter: 10_000,
            tol: 1e-8,
            standardize: true,
        }
    }
}

impl LassoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.cv_folds < 2 {
            return Err(IcrError::InvalidArgument(
                "cross-validation needs at least 2 folds".into(),
            ));
        }
        if !(self.tol > 0.0) {
            return Err(IcrError::InvalidArgument("tolerance must be positive".into()));
        }
        for w in self.lambda_grid.windows(2) {
            if !(w[1] < w[0]) {
                return Err(IcrError::InvalidArgument(
                    "lambda grid must be strictly descending".into(),
                ));
            }
        }
        if self.lambda_grid.iter().any(|l| !(*l > 0.0)) {
            return Err(IcrError::InvalidArgument(
                "lambda grid entries must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// A lasso fit together with a convergence flag; non-convergence within the
/// sweep budget returns the best iterate flagged rather than an error.
#[derive(Debug, Clone)]
pub struct LassoFit {
    pub theta: DVector<f64>,
    pub converged: bool,
}

fn soft(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

/// Max KKT violation of `empirical_loss + lambda * sum_{j>=1} |theta_j|`.
fn kkt_residual(grad: &DVector<f64>, theta: &DVector<f64>, lambda: f64) -> f64 {
    let mut worst = grad[0].abs();
    for j in 1..theta.len() {
        let v = if theta[j] != 0.0 {
            (grad[j] + lambda * theta[j].signum()).abs()
        } else {
            (grad[j].abs() - lambda).max(0.0)
        };
        worst = worst.max(v);
    }
    worst
}

/// One pass of cyclic coordinate descent on the (optionally weighted)
/// penalized least squares problem. `residual` holds the working residual
/// `z - X theta`; `col_sq[j] = (1/n) sum_i w_i x_ij^2`. The intercept
/// (column 0) is never thresholded. Returns the largest coefficient move.
fn cd_sweep(
    x: &DMatrix<f64>,
    weights: Option<&DVector<f64>>,
    residual: &mut DVector<f64>,
    theta: &mut DVector<f64>,
    col_sq: &[f64],
    lambda: f64,
    n_inv: f64,
) -> f64 {
    let mut max_move = 0.0f64;
    for j in 0..theta.len() {
        if col_sq[j] <= 1e-12 {
            continue;
        }
        let xj = x.column(j);
        let corr = match weights {
            Some(w) => xj
                .iter()
                .zip(residual.iter())
                .zip(w.iter())
                .map(|((&xij, &ri), &wi)| wi * xij * ri)
                .sum::<f64>(),
            None => xj.dot(residual),
        } * n_inv;
        let rho = corr + col_sq[j] * theta[j];
        let updated = if j == 0 {
            rho / col_sq[j]
        } else {
            soft(rho, lambda) / col_sq[j]
        };
        let delta = updated - theta[j];
        if delta != 0.0 {
            theta[j] = updated;
            residual.axpy(-delta, &xj, 1.0);
            max_move = max_move.max(delta.abs());
        }
    }
    max_move
}

/// Lasso by cyclic coordinate descent: minimizes `empirical_loss + lambda *
/// sum_{j>=1} |theta_j|` with the intercept unpenalized. Covariates are
/// assumed standardized by the caller. Logistic losses go through an
/// iteratively reweighted quadratic approximation.
pub fn fit_lasso(data: &LocalDataset, lambda: f64, cfg: &LassoConfig) -> Result<LassoFit> {
    fit_lasso_from(data, lambda, cfg, None, None)
}

/// Same as `fit_lasso` with an optional warm start and an optional record of
/// the objective after every sweep (squared loss only; used by tests).
pub(crate) fn fit_lasso_from(
    data: &LocalDataset,
    lambda: f64,
    cfg: &LassoConfig,
    warm: Option<&DVector<f64>>,
    mut objective_trace: Option<&mut Vec<f64>>,
) -> Result<LassoFit> {
    cfg.validate()?;
    if !(lambda >= 0.0) {
        return Err(IcrError::InvalidArgument("lambda must be nonnegative".into()));
    }
    let (n, p) = (data.n(), data.dim());
    let n_inv = 1.0 / n as f64;
    let x = data.design();
    let mut theta = warm.cloned().unwrap_or_else(|| DVector::zeros(p));

    match data.loss_kind() {
        LossKind::Squared => {
            let col_sq: Vec<f64> = (0..p).map(|j| x.column(j).norm_squared() * n_inv).collect();
            let mut residual = data.response() - x * &theta;
            for sweep in 0..cfg.max_iter {
                cd_sweep(x, None, &mut residual, &mut theta, &col_sq, lambda, n_inv);
                if let Some(trace) = objective_trace.as_deref_mut() {
                    let obj = 0.5 * residual.norm_squared() * n_inv
                        + lambda * theta.rows(1, p - 1).iter().map(|v| v.abs()).sum::<f64>();
                    trace.push(obj);
                }
                if sweep % 4 == 3 || sweep == 0 {
                    let grad = -(x.transpose() * &residual) * n_inv;
                    if kkt_residual(&grad, &theta, lambda) <= cfg.tol {
                        return Ok(LassoFit { theta, converged: true });
                    }
                }
            }
            let grad = -(x.transpose() * &residual) * n_inv;
            let converged = kkt_residual(&grad, &theta, lambda) <= cfg.tol;
            Ok(LassoFit { theta, converged })
        }
        LossKind::Logistic => {
            let y = data.response();
            let mut sweeps_used = 0usize;
            // Outer reweighting loop; each round solves the local quadratic
            // model by coordinate sweeps.
            for _ in 0..200 {
                let a = x * &theta;
                let mut w = DVector::zeros(n);
                let mut z = DVector::zeros(n);
                for i in 0..n {
                    let s = sigmoid(a[i]);
                    let wi = (s * (1.0 - s)).max(1e-5);
                    w[i] = wi;
                    z[i] = a[i] + (y[i] - s) / wi;
                }
                let col_sq: Vec<f64> = (0..p)
                    .map(|j| {
                        x.column(j)
                            .iter()
                            .zip(w.iter())
                            .map(|(&xij, &wi)| wi * xij * xij)
                            .sum::<f64>()
                            * n_inv
                    })
                    .collect();
                let mut residual = &z - x * &theta;
                loop {
                    let moved = cd_sweep(
                        x,
                        Some(&w),
                        &mut residual,
                        &mut theta,
                        &col_sq,
                        lambda,
                        n_inv,
                    );
                    sweeps_used += 1;
                    if moved <= 1e-10 || sweeps_used >= cfg.max_iter {
                        break;
                    }
                }
                let grad = empirical_gradient(data, &theta)?;
                if kkt_residual(&grad, &theta, lambda) <= cfg.tol {
                    return Ok(LassoFit { theta, converged: true });
                }
                if sweeps_used >= cfg.max_iter {
                    break;
                }
            }
            let grad = empirical_gradient(data, &theta)?;
            let converged = kkt_residual(&grad, &theta, lambda) <= cfg.tol;
            Ok(LassoFit { theta, converged })
        }
    }
}

/// Data-driven default penalty grid: 20 log-spaced values from the level
/// that zeroes every covariate, down three decades.
pub fn default_lambda_grid(data: &LocalDataset) -> Vec<f64> {
    let n_inv = 1.0 / data.n() as f64;
    let y = data.response();
    let y_bar = y.mean();
    let mut lambda_max = 0.0f64;
    for j in 1..data.dim() {
        let corr = data
            .design()
            .column(j)
            .iter()
            .zip(y.iter())
            .map(|(&xij, &yi)| xij * (yi - y_bar))
            .sum::<f64>()
            .abs()
            * n_inv;
        lambda_max = lambda_max.max(corr);
    }
    lambda_max = lambda_max.max(1e-8);
    let points = 20;
    (0..points)
        .map(|i| lambda_max * 10f64.powf(-3.0 * i as f64 / (points - 1) as f64))
        .collect()
}

/// Choose the lasso penalty by k-fold cross-validated prediction loss over
/// the configured (or derived) grid; ties go to the larger penalty.
pub fn cross_validated_lambda(data: &LocalDataset, cfg: &LassoConfig) -> Result<f64> {
    cfg.validate()?;
    let grid = if cfg.lambda_grid.is_empty() {
        default_lambda_grid(data)
    } else {
        cfg.lambda_grid.clone()
    };
    let n = data.n();
    let folds = cfg.cv_folds.min(n);
    let mut cv_loss = vec![0.0f64; grid.len()];

    for fold in 0..folds {
        let train_rows: Vec<usize> = (0..n).filter(|i| i % folds != fold).collect();
        let test_rows: Vec<usize> = (0..n).filter(|i| i % folds == fold).collect();
        if train_rows.is_empty() || test_rows.is_empty() {
            continue;
        }
        let train = subset(data, &train_rows)?;
        let test = subset(data, &test_rows)?;
        let mut warm: Option<DVector<f64>> = None;
        for (gi, &lambda) in grid.iter().enumerate() {
            let fit = fit_lasso_from(&train, lambda, cfg, warm.as_ref(), None)?;
            cv_loss[gi] += crate::loss::empirical_loss(&test, &fit.theta)? * test.n() as f64;
            warm = Some(fit.theta);
        }
    }

    let mut best = 0usize;
    for gi in 1..grid.len() {
        if cv_loss[gi] < cv_loss[best] {
            best = gi;
        }
    }
    Ok(grid[best])
}

fn subset(data: &LocalDataset, rows: &[usize]) -> Result<LocalDataset> {
    let p = data.dim();
    let x = DMatrix::from_fn(rows.len(), p, |i, j| data.design()[(rows[i], j)]);
    let y = DVector::from_fn(rows.len(), |i, _| data.response()[rows[i]]);
    LocalDataset::new(x, y, data.loss_kind())
}

/// One Newton-type correction of a lasso estimate: `theta_lasso - Theta *
/// grad`, where `Theta` approximates the inverse Hessian at the lasso
/// solution. Below-sample dimension uses the exact inverse (quadratic losses
/// therefore land exactly on the unpenalized minimizer); in high dimension
/// the rows of `Theta` come from nodewise lasso regressions on the
/// curvature-weighted design.
pub fn debias(
    data: &LocalDataset,
    theta_lasso: &DVector<f64>,
    cfg: &LassoConfig,
) -> Result<DVector<f64>> {
    let (n, p) = (data.n(), data.dim());
    let grad = empirical_gradient(data, theta_lasso)?;
    if p < n {
        let hessian = empirical_hessian(data, theta_lasso)?;
        let correction = solve_spd_with_ridge(hessian, &grad)?;
        return Ok(theta_lasso - correction);
    }

    let a = data.design() * theta_lasso;
    let sqrt_w = DVector::from_fn(n, |i, _| {
        loss_d2(a[i], data.response()[i], data.loss_kind()).sqrt()
    });
    let xw = DMatrix::from_fn(n, p, |i, j| sqrt_w[i] * data.design()[(i, j)]);
    let lambda_node = cfg.nodewise_lambda_scale * ((p as f64).ln() / n as f64).sqrt();
    let n_inv = 1.0 / n as f64;

    let mut correction = DVector::zeros(p);
    for j in 0..p {
        let gamma = nodewise_regression(&xw, j, lambda_node, cfg);
        // tau_j^2 = ||x_j - X_{-j} gamma||^2 / n + lambda ||gamma||_1
        let mut fitted_residual = xw.column(j).into_owned();
        let mut l1 = 0.0;
        for (c, &g) in gamma.iter().enumerate() {
            if g != 0.0 {
                let col = if c < j { c } else { c + 1 };
                fitted_residual.axpy(-g, &xw.column(col), 1.0);
                l1 += g.abs();
            }
        }
        let tau_sq = fitted_residual.norm_squared() * n_inv + lambda_node * l1;
        if tau_sq <= 1e-12 {
            return Err(IcrError::Numerical(format!(
                "nodewise residual variance vanished at column {j}"
            )));
        }
        // Row j of the approximate inverse, applied to the gradient.
        let mut dot = grad[j];
        for (c, &g) in gamma.iter().enumerate() {
            let col = if c < j { c } else { c + 1 };
            dot -= g * grad[col];
        }
        correction[j] = dot / tau_sq;
    }
    Ok(theta_lasso - correction)
}

/// Lasso regression of column j on the remaining columns (no intercept, all
/// coefficients penalized). Returns the p-1 coefficients.
fn nodewise_regression(xw: &DMatrix<f64>, j: usize, lambda: f64, cfg: &LassoConfig) -> DVector<f64> {
    let (n, p) = (xw.nrows(), xw.ncols());
    let n_inv = 1.0 / n as f64;
    let cols: Vec<usize> = (0..p).filter(|&c| c != j).collect();
    let col_sq: Vec<f64> = cols
        .iter()
        .map(|&c| xw.column(c).norm_squared() * n_inv)
        .collect();
    let mut gamma = DVector::zeros(p - 1);
    let mut residual = xw.column(j).into_owned();
    let sweeps = 1000.min(cfg.max_iter.max(1));
    for _ in 0..sweeps {
        let mut max_move = 0.0f64;
        for (idx, &c) in cols.iter().enumerate() {
            if col_sq[idx] <= 1e-12 {
                continue;
            }
            let corr = xw.column(c).dot(&residual) * n_inv + col_sq[idx] * gamma[idx];
            let updated = soft(corr, lambda) / col_sq[idx];
            let delta = updated - gamma[idx];
            if delta != 0.0 {
                gamma[idx] = updated;
                residual.axpy(-delta, &xw.column(c), 1.0);
                max_move = max_move.max(delta.abs());
            }
        }
        if max_move <= 1e-9 {
            break;
        }
    }
    gamma
}

/// Solve `H x = b` for symmetric positive (semi)definite H, retrying with a
/// small ridge when the factorization fails.
pub(crate) fn solve_spd_with_ridge(h: DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    let p = h.nrows();
    match nalgebra::Cholesky::new(h.clone()) {
        Some(chol) => Ok(chol.solve(b)),
        None => {
            let mut ridged = h;
            for i in 0..p {
                ridged[(i, i)] += 1e-8;
            }
            nalgebra::Cholesky::new(ridged)
                .map(|c| c.solve(b))
                .ok_or_else(|| IcrError::Numerical("singular system even after ridge".into()))
        }
    }
}

/// Unpenalized fit: least squares for the squared loss, Newton maximum
/// likelihood with step halving for the logistic loss.
pub fn unpenalized_fit(data: &LocalDataset) -> Result<DVector<f64>> {
    match data.loss_kind() {
        LossKind::Squared => {
            let xtx = empirical_hessian(data, &DVector::zeros(data.dim()))?;
            let xty = data.design().transpose() * data.response() / data.n() as f64;
            solve_spd_with_ridge(xtx, &xty)
        }
        LossKind::Logistic => {
            let mut theta = DVector::zeros(data.dim());
            let mut loss = crate::loss::empirical_loss(data, &theta)?;
            for _ in 0..100 {
                let grad = empirical_gradient(data, &theta)?;
                if grad.amax() <= 1e-10 {
                    break;
                }
                let hessian = empirical_hessian(data, &theta)?;
                let direction = solve_spd_with_ridge(hessian, &grad)?;
                let mut step = 1.0;
                let mut accepted = false;
                for _ in 0..30 {
                    let candidate = &theta - &direction * step;
                    let candidate_loss = crate::loss::empirical_loss(data, &candidate)?;
                    if candidate_loss <= loss {
                        theta = candidate;
                        loss = candidate_loss;
                        accepted = true;
                        break;
                    }
                    step *= 0.5;
                }
                if !accepted {
                    break;
                }
            }
            Ok(theta)
        }
    }
}

/// Center and scale the covariate columns to mean 0, variance 1 (the
/// intercept column is left alone; constant columns are centered only).
pub fn standardize_columns(x: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, p) = x.shape();
    let mut out = x.clone();
    for j in 1..p {
        let mean = x.column(j).mean();
        let var = x.column(j).iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let sd = var.sqrt();
        if sd > 1e-12 {
            for i in 0..n {
                out[(i, j)] = (x[(i, j)] - mean) / sd;
            }
        } else {
            for i in 0..n {
                out[(i, j)] = x[(i, j)] - mean;
            }
        }
    }
    out
}

/// Fit the local estimator and package it with its gradient, Hessian, and
/// sample count. The estimator is the unpenalized fit when p < n/2 and the
/// cross-validated debiased lasso otherwise; the margin keeps near-square
/// designs away from ill-conditioned unpenalized solves.
pub fn make_packet(
    client_id: impl Into<String>,
    data: &LocalDataset,
    cfg: &LassoConfig,
) -> Result<SummaryPacket> {
    cfg.validate()?;
    let working;
    let data = if cfg.standardize {
        working = LocalDataset::new(
            standardize_columns(data.design()),
            data.response().clone(),
            data.loss_kind(),
        )?;
        &working
    } else {
        data
    };

    let (n, p) = (data.n(), data.dim());
    let theta_tilde = if p < n / 2 {
        unpenalized_fit(data)?
    } else {
        let lambda = cross_validated_lambda(data, cfg)?;
        let fit = fit_lasso(data, lambda, cfg)?;
        debias(data, &fit.theta, cfg)?
    };

    let grad_tilde = empirical_gradient(data, &theta_tilde)?;
    let hessian_tilde = empirical_hessian(data, &theta_tilde)?;
    SummaryPacket::new(
        client_id,
        n,
        theta_tilde,
        grad_tilde,
        hessian_tilde,
        data.loss_kind(),
    )
}
