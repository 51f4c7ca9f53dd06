//! Loss functions and their first two derivatives, plus the empirical local
//! loss, gradient, and Hessian over one client's data.
//!
//! Everything is per-observation-averaged (the 1/n factor is built in) so
//! summaries from clients with different sample sizes are comparable.

use nalgebra::{DMatrix, DVector};

use crate::error::{IcrError, Result};
use crate::model::LossKind;

/// One client's raw data. The first design column is fixed at 1 to carry the
/// intercept; logistic responses are coded {0, 1}.
#[derive(Debug, Clone)]
pub struct LocalDataset {
    x: DMatrix<f64>,
    y: DVector<f64>,
    loss_kind: LossKind,
}

impl LocalDataset {
    pub fn new(x: DMatrix<f64>, y: DVector<f64>, loss_kind: LossKind) -> Result<Self> {
        if x.nrows() != y.len() {
            return Err(IcrError::DimensionMismatch(format!(
                "{} rows but {} responses",
                x.nrows(),
                y.len()
            )));
        }
        if x.nrows() == 0 || x.ncols() < 2 {
            return Err(IcrError::InvalidArgument(
                "dataset needs at least one row and two columns (intercept + covariate)".into(),
            ));
        }
        if x.column(0).iter().any(|v| *v != 1.0) {
            return Err(IcrError::InvalidArgument(
                "first design column must be identically 1".into(),
            ));
        }
        if matches!(loss_kind, LossKind::Logistic) && y.iter().any(|v| *v != 0.0 && *v != 1.0) {
            return Err(IcrError::InvalidArgument(
                "logistic responses must be coded 0/1".into(),
            ));
        }
        if x.iter().any(|v| !v.is_finite()) || y.iter().any(|v| !v.is_finite()) {
            return Err(IcrError::InvalidArgument(
                "dataset contains non-finite values".into(),
            ));
        }
        Ok(Self { x, y, loss_kind })
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    /// Coefficient dimension (including the intercept column).
    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    pub fn design(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn response(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn loss_kind(&self) -> LossKind {
        self.loss_kind
    }
}

/// Numerically safe log(1 + exp(a)).
fn softplus(a: f64) -> f64 {
    if a > 30.0 {
        a + (-a).exp().ln_1p()
    } else {
        a.exp().ln_1p()
    }
}

/// Numerically safe logistic sigmoid.
pub fn sigmoid(a: f64) -> f64 {
    if a >= 0.0 {
        1.0 / (1.0 + (-a).exp())
    } else {
        let e = a.exp();
        e / (1.0 + e)
    }
}

/// Loss of one observation at linear predictor `a`.
pub fn loss_scalar(a: f64, y: f64, kind: LossKind) -> f64 {
    match kind {
        LossKind::Logistic => softplus(a) - y * a,
        LossKind::Squared => 0.5 * (y - a) * (y - a),
    }
}

/// First derivative of the loss with respect to the linear predictor.
pub fn loss_d1(a: f64, y: f64, kind: LossKind) -> f64 {
    match kind {
        LossKind::Logistic => sigmoid(a) - y,
        LossKind::Squared => a - y,
    }
}

/// Second derivative of the loss with respect to the linear predictor.
pub fn loss_d2(a: f64, y: f64, kind: LossKind) -> f64 {
    match kind {
        LossKind::Logistic => {
            let s = sigmoid(a);
            s * (1.0 - s)
        }
        LossKind::Squared => {
            let _ = y;
            1.0
        }
    }
}

fn check_theta(data: &LocalDataset, theta: &DVector<f64>) -> Result<()> {
    if theta.len() != data.dim() {
        return Err(IcrError::DimensionMismatch(format!(
            "coefficient length {} but design has {} columns",
            theta.len(),
            data.dim()
        )));
    }
    Ok(())
}

/// Average loss over the dataset: (1/n) sum_i f(x_i' theta, y_i).
pub fn empirical_loss(data: &LocalDataset, theta: &DVector<f64>) -> Result<f64> {
    check_theta(data, theta)?;
    let a = data.x() * theta;
    let n = data.n() as f64;
    Ok(a.iter()
        .zip(data.y().iter())
        .map(|(&ai, &yi)| loss_scalar(ai, yi, data.loss_kind))
        .sum::<f64>()
        / n)
}

/// Gradient of the average loss: (1/n) X' f'(X theta, y).
pub fn empirical_gradient(data: &LocalDataset, theta: &DVector<f64>) -> Result<DVector<f64>> {
    check_theta(data, theta)?;
    let a = data.x() * theta;
    let n = data.n() as f64;
    let d1 = DVector::from_iterator(
        data.n(),
        a.iter()
            .zip(data.y().iter())
            .map(|(&ai, &yi)| loss_d1(ai, yi, data.loss_kind) / n),
    );
    Ok(data.x().transpose() * d1)
}

/// Hessian of the average loss: (1/n) X' diag(f'') X. Symmetric and positive
/// semidefinite for both loss families.
pub fn empirical_hessian(data: &LocalDataset, theta: &DVector<f64>) -> Result<DMatrix<f64>> {
    check_theta(data, theta)?;
    let a = data.x() * theta;
    let n = data.n() as f64;
    let p = data.dim();
    let x = data.x();
    let mut h = DMatrix::zeros(p, p);
    for i in 0..data.n() {
        let w = loss_d2(a[i], data.y()[i], data.loss_kind) / n;
        if w == 0.0 {
            continue;
        }
        for c in 0..p {
            let scaled = w * x[(i, c)];
            if scaled == 0.0 {
                continue;
            }
            for r in c..p {
                h[(r, c)] += scaled * x[(i, r)];
            }
        }
    }
    for c in 0..p {
        for r in (c + 1)..p {
            h[(c, r)] = h[(r, c)];
        }
    }
    Ok(h)
}

impl LocalDataset {
    fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    fn y(&self) -> &DVector<f64> {
        &self.y
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_dataset(
        rng: &mut impl Rng,
        n: usize,
        p: usize,
        kind: LossKind,
    ) -> LocalDataset {
        let x = DMatrix::from_fn(n, p, |_, j| {
            if j == 0 {
                1.0
            } else {
                rng.random::<f64>() * 2.0 - 1.0
            }
        });
        let y = match kind {
            LossKind::Squared => DVector::from_fn(n, |_, _| rng.random::<f64>() * 2.0 - 1.0),
            LossKind::Logistic => DVector::from_fn(n, |_, _| f64::from(rng.random::<bool>())),
        };
        LocalDataset::new(x, y, kind).unwrap()
    }

    fn random_theta(rng: &mut impl Rng, p: usize) -> DVector<f64> {
        DVector::from_fn(p, |_, _| rng.random::<f64>() - 0.5)
    }

    #[test]
    fn scalar_loss_values() {
        assert_eq!(loss_scalar(0.0, 0.0, LossKind::Squared), 0.0);
        assert_abs_diff_eq!(
            loss_scalar(0.0, 1.0, LossKind::Logistic),
            std::f64::consts::LN_2,
            epsilon = 1e-15
        );
        // Correct classification with a huge margin costs essentially nothing,
        // and must not overflow.
        assert_abs_diff_eq!(loss_scalar(1000.0, 1.0, LossKind::Logistic), 0.0, epsilon = 1e-12);
        assert!(loss_scalar(-1000.0, 0.0, LossKind::Logistic).abs() < 1e-12);
    }

    #[test]
    fn derivative_values() {
        assert_eq!(loss_d2(123.4, -5.0, LossKind::Squared), 1.0);
        assert_eq!(loss_d2(0.0, 1.0, LossKind::Logistic), 0.25);

        let (a, y) = (0.3, 1.0);
        let h = 1e-6;
        let fd = (loss_scalar(a + h, y, LossKind::Logistic)
            - loss_scalar(a - h, y, LossKind::Logistic))
            / (2.0 * h);
        assert_abs_diff_eq!(loss_d1(a, y, LossKind::Logistic), fd, epsilon = 1e-6);
    }

    #[test]
    fn scalar_derivatives_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let h = 1e-5;
        for _ in 0..20 {
            let a = rng.random::<f64>() * 4.0 - 2.0;
            for (kind, y) in [
                (LossKind::Squared, rng.random::<f64>()),
                (LossKind::Logistic, f64::from(rng.random::<bool>())),
            ] {
                let d1 = (loss_scalar(a + h, y, kind) - loss_scalar(a - h, y, kind)) / (2.0 * h);
                let d2 = (loss_d1(a + h, y, kind) - loss_d1(a - h, y, kind)) / (2.0 * h);
                assert_abs_diff_eq!(loss_d1(a, y, kind), d1, epsilon = 1e-8);
                assert_abs_diff_eq!(loss_d2(a, y, kind), d2, epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn empirical_loss_special_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        // Squared loss vanishes at an interpolating coefficient vector.
        let x = DMatrix::from_fn(6, 2, |i, j| if j == 0 { 1.0 } else { i as f64 });
        let theta = DVector::from_vec(vec![0.5, 2.0]);
        let y = &x * &theta;
        let data = LocalDataset::new(x, y, LossKind::Squared).unwrap();
        assert_abs_diff_eq!(empirical_loss(&data, &theta).unwrap(), 0.0, epsilon = 1e-24);

        // Logistic loss at theta = 0 is log 2 regardless of the labels.
        let data = random_dataset(&mut rng, 40, 3, LossKind::Logistic);
        let zero = DVector::zeros(3);
        assert_abs_diff_eq!(
            empirical_loss(&data, &zero).unwrap(),
            std::f64::consts::LN_2,
            epsilon = 1e-12
        );
    }

    #[test]
    fn empirical_loss_matches_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for kind in [LossKind::Squared, LossKind::Logistic] {
            let data = random_dataset(&mut rng, 25, 4, kind);
            let theta = random_theta(&mut rng, 4);
            let mut acc = 0.0;
            for i in 0..data.n() {
                let mut a = 0.0;
                for j in 0..data.dim() {
                    a += data.design()[(i, j)] * theta[j];
                }
                acc += loss_scalar(a, data.response()[i], kind);
            }
            assert_relative_eq!(
                empirical_loss(&data, &theta).unwrap(),
                acc / data.n() as f64,
                max_relative = 1e-12
            );
        }
    }

    #[test]
    fn gradient_special_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let data = random_dataset(&mut rng, 30, 4, LossKind::Squared);

        // At the least-squares solution the gradient vanishes.
        let xtx = data.design().transpose() * data.design();
        let xty = data.design().transpose() * data.response();
        let ols = nalgebra::Cholesky::new(xtx).unwrap().solve(&xty);
        assert!(empirical_gradient(&data, &ols).unwrap().amax() < 1e-9);

        // At zero the squared-loss gradient is -X'y/n.
        let zero = DVector::zeros(4);
        let expected = -(data.design().transpose() * data.response()) / data.n() as f64;
        assert_relative_eq!(
            empirical_gradient(&data, &zero).unwrap(),
            expected,
            max_relative = 1e-12
        );
    }

    #[test]
    fn gradient_and_hessian_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = 1e-5;
        for kind in [LossKind::Squared, LossKind::Logistic] {
            for _ in 0..3 {
                let data = random_dataset(&mut rng, 20, 5, kind);
                let theta = random_theta(&mut rng, 5);
                let grad = empirical_gradient(&data, &theta).unwrap();
                let hess = empirical_hessian(&data, &theta).unwrap();
                for j in 0..5 {
                    let mut up = theta.clone();
                    let mut down = theta.clone();
                    up[j] += h;
                    down[j] -= h;
                    let fd =
                        (empirical_loss(&data, &up).unwrap() - empirical_loss(&data, &down).unwrap())
                            / (2.0 * h);
                    assert_abs_diff_eq!(grad[j], fd, epsilon = 1e-5 * (1.0 + fd.abs()));

                    let gfd = (empirical_gradient(&data, &up).unwrap()
                        - empirical_gradient(&data, &down).unwrap())
                        / (2.0 * h);
                    for i in 0..5 {
                        assert_abs_diff_eq!(
                            hess[(i, j)],
                            gfd[i],
                            epsilon = 1e-5 * (1.0 + gfd[i].abs())
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn hessian_structure() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let data = random_dataset(&mut rng, 30, 4, LossKind::Squared);

        // Squared loss: X'X/n independent of theta.
        let h0 = empirical_hessian(&data, &DVector::zeros(4)).unwrap();
        let h1 = empirical_hessian(&data, &random_theta(&mut rng, 4)).unwrap();
        assert_eq!(h0, h1);
        let xtx = data.design().transpose() * data.design() / data.n() as f64;
        assert_relative_eq!(h0, xtx, max_relative = 1e-12);

        // Logistic at zero: X'X/(4n).
        let logit = random_dataset(&mut rng, 30, 4, LossKind::Logistic);
        let h = empirical_hessian(&logit, &DVector::zeros(4)).unwrap();
        let expected = logit.design().transpose() * logit.design() / (4.0 * logit.n() as f64);
        assert_relative_eq!(h, expected, max_relative = 1e-12);
    }

    #[test]
    fn hessian_is_positive_semidefinite() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for kind in [LossKind::Squared, LossKind::Logistic] {
            let data = random_dataset(&mut rng, 25, 5, kind);
            let theta = random_theta(&mut rng, 5);
            let mut h = empirical_hessian(&data, &theta).unwrap();
            // lambda_min >= -1e-10 iff the 1e-10-shifted matrix factors.
            for i in 0..5 {
                h[(i, i)] += 1e-10;
            }
            assert!(nalgebra::Cholesky::new(h).is_some());
        }
    }

    #[test]
    fn dataset_validation() {
        let ones = DMatrix::from_element(3, 2, 1.0);
        let y = DVector::from_vec(vec![0.0, 1.0, 0.5]);
        assert!(LocalDataset::new(ones.clone(), y.clone(), LossKind::Logistic).is_err());
        assert!(LocalDataset::new(ones.clone(), y, LossKind::Squared).is_ok());

        let mut bad = ones;
        bad[(1, 0)] = 2.0;
        let y = DVector::zeros(3);
        assert!(LocalDataset::new(bad, y, LossKind::Squared).is_err());

        let x = DMatrix::from_element(3, 2, 1.0);
        assert!(LocalDataset::new(x, DVector::zeros(2), LossKind::Squared).is_err());
    }
}
