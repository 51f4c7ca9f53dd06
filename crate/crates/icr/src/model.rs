//! Shared domain types: summary packets, coefficient matrices, the pairwise
//! difference operator, fusion state, penalty specification, and the fitted
//! cluster solution.
//!
//! All types are immutable after construction and safe to share across
//! threads; the operations on them are pure.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{IcrError, Result};

/// Loss family used by a client.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Logistic,
    Squared,
}

/// Concave penalty family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PenaltyFamily {
    Mcp,
    Scad,
}

/// The four per-client statistics exchanged with the aggregator: local
/// estimate, per-observation-averaged gradient and Hessian of the local
/// empirical loss at that estimate, and the sample count.
///
/// Index 0 of every vector/matrix is the intercept.
#[derive(Debug, Clone)]
pub struct SummaryPacket {
    pub client_id: String,
    pub n: usize,
    pub theta_tilde: DVector<f64>,
    pub grad_tilde: DVector<f64>,
    pub hessian_tilde: DMatrix<f64>,
    pub loss_kind: LossKind,
}

/// Relative symmetry tolerance for packet Hessians.
const HESSIAN_SYMMETRY_RTOL: f64 = 1e-10;
/// The Hessian must satisfy `lambda_min >= -PSD_RTOL * ||V||_2`.
const PSD_RTOL: f64 = 1e-8;

impl SummaryPacket {
    pub fn new(
        client_id: impl Into<String>,
        n: usize,
        theta_tilde: DVector<f64>,
        grad_tilde: DVector<f64>,
        hessian_tilde: DMatrix<f64>,
        loss_kind: LossKind,
    ) -> Result<Self> {
        let p = theta_tilde.len();
        if p < 2 {
            return Err(IcrError::InvalidArgument(format!(
                "packet dimension must be at least 2 (intercept + one covariate), got {p}"
            )));
        }
        if n == 0 {
            return Err(IcrError::InvalidArgument(
                "sample count must be positive".into(),
            ));
        }
        if grad_tilde.len() != p || hessian_tilde.nrows() != p || hessian_tilde.ncols() != p {
            return Err(IcrError::DimensionMismatch(format!(
                "packet parts disagree: theta {p}, grad {}, hessian {}x{}",
                grad_tilde.len(),
                hessian_tilde.nrows(),
                hessian_tilde.ncols()
            )));
        }
        if theta_tilde.iter().any(|v| !v.is_finite())
            || grad_tilde.iter().any(|v| !v.is_finite())
            || hessian_tilde.iter().any(|v| !v.is_finite())
        {
            return Err(IcrError::InvalidArgument(
                "packet contains non-finite entries".into(),
            ));
        }

        let scale = hessian_tilde.amax().max(1e-300);
        for i in 0..p {
            for j in (i + 1)..p {
                if (hessian_tilde[(i, j)] - hessian_tilde[(j, i)]).abs()
                    > HESSIAN_SYMMETRY_RTOL * scale
                {
                    return Err(IcrError::InvalidArgument(format!(
                        "hessian is not symmetric at ({i},{j})"
                    )));
                }
            }
        }

        // Positive semidefiniteness up to -PSD_RTOL * ||V||_2: the shifted
        // matrix V + delta*I must admit a Cholesky factorization. The shift
        // uses the symmetric infinity norm, an upper bound on the spectral
        // norm.
        let shift = PSD_RTOL * sym_inf_norm(&hessian_tilde) + 1e-300;
        let mut shifted = hessian_tilde.clone();
        for i in 0..p {
            shifted[(i, i)] += shift;
        }
        if nalgebra::Cholesky::new(shifted).is_none() {
            return Err(IcrError::InvalidArgument(
                "hessian is not positive semidefinite".into(),
            ));
        }

        Ok(Self {
            client_id: client_id.into(),
            n,
            theta_tilde,
            grad_tilde,
            hessian_tilde,
            loss_kind,
        })
    }

    /// Coefficient dimension `p` (including the intercept).
    pub fn dim(&self) -> usize {
        self.theta_tilde.len()
    }

    /// The aggregation vector `V * theta - g`. Together with the Hessian it
    /// determines the client's quadratic surrogate loss.
    pub fn zeta(&self) -> DVector<f64> {
        &self.hessian_tilde * &self.theta_tilde - &self.grad_tilde
    }
}

/// Infinity norm of a symmetric matrix (max absolute row sum), which bounds
/// its spectral norm from above.
pub(crate) fn sym_inf_norm(m: &DMatrix<f64>) -> f64 {
    (0..m.nrows())
        .map(|i| m.row(i).iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Dense p x K coefficient matrix; column k holds client k's coefficients,
/// row j holds one variable's coefficients across clients.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientMatrix {
    values: DMatrix<f64>,
}

impl CoefficientMatrix {
    pub fn new(values: DMatrix<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(IcrError::InvalidArgument(
                "coefficient matrix contains non-finite entries".into(),
            ));
        }
        Ok(Self { values })
    }

    /// Stack the local estimates of a packet collection column by column.
    pub fn from_local_estimates(packets: &[SummaryPacket]) -> Result<Self> {
        let p = check_consistent_dim(packets)?;
        let mut m = DMatrix::zeros(p, packets.len());
        for (k, packet) in packets.iter().enumerate() {
            m.set_column(k, &packet.theta_tilde);
        }
        Self::new(m)
    }

    pub fn dim(&self) -> usize {
        self.values.nrows()
    }

    pub fn clients(&self) -> usize {
        self.values.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.values
    }

    pub fn column(&self, k: usize) -> DVector<f64> {
        self.values.column(k).into_owned()
    }

    /// Euclidean norm of row j (one variable across all clients).
    pub fn row_norm(&self, j: usize) -> f64 {
        self.values.row(j).norm()
    }
}

/// Verify that all packets share one dimension and return it.
pub fn check_consistent_dim(packets: &[SummaryPacket]) -> Result<usize> {
    let first = packets
        .first()
        .ok_or_else(|| IcrError::InvalidArgument("empty packet collection".into()))?;
    let p = first.dim();
    for packet in packets {
        if packet.dim() != p {
            return Err(IcrError::DimensionMismatch(format!(
                "packet '{}' has dimension {}, expected {}",
                packet.client_id,
                packet.dim(),
                p
            )));
        }
    }
    Ok(p)
}

/// The K x K(K-1)/2 pairwise difference operator. Column (k, k') of the
/// implicit matrix is `e_k - e_k'` for 0 <= k < k' < K, ordered
/// lexicographically. The matrix itself is never materialized; both
/// directions are applied in matrix-free form.
#[derive(Debug, Clone)]
pub struct DifferenceOperator {
    clients: usize,
    pairs: Vec<(usize, usize)>,
}

impl DifferenceOperator {
    pub fn new(clients: usize) -> Self {
        let mut pairs = Vec::with_capacity(clients * clients.saturating_sub(1) / 2);
        for a in 0..clients {
            for b in (a + 1)..clients {
                pairs.push((a, b));
            }
        }
        Self { clients, pairs }
    }

    pub fn clients(&self) -> usize {
        self.clients
    }

    pub fn pair_count(&self) -> usize {
        self.pairs.len()
    }

    /// Column index of the pair (k, k'), 0-based with k < k'. The ordering is
    /// lexicographic and frozen: it is part of the file format.
    pub fn pair_index(&self, k: usize, k_prime: usize) -> Result<usize> {
        if k >= k_prime || k_prime >= self.clients {
            return Err(IcrError::InvalidArgument(format!(
                "pair ({k},{k_prime}) is not an ordered pair of clients below {}",
                self.clients
            )));
        }
        // Lexicographic offset: all pairs with first index < k come first.
        Ok(k * self.clients - k * (k + 1) / 2 + (k_prime - k - 1))
    }

    /// The pair at a column index.
    pub fn pair(&self, index: usize) -> (usize, usize) {
        self.pairs[index]
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    /// `theta * A`: column (k,k') of the result is theta_k - theta_k'.
    pub fn apply(&self, theta: &DMatrix<f64>) -> DMatrix<f64> {
        assert_eq!(theta.ncols(), self.clients, "column count mismatch");
        let p = theta.nrows();
        let mut out = DMatrix::zeros(p, self.pairs.len());
        for (idx, &(a, b)) in self.pairs.iter().enumerate() {
            for i in 0..p {
                out[(i, idx)] = theta[(i, a)] - theta[(i, b)];
            }
        }
        out
    }

    /// `M * A^T` without materializing A: column k accumulates +M_(k,.) over
    /// pairs where k comes first and -M_(.,k) where it comes second.
    pub fn apply_adjoint(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        assert_eq!(m.ncols(), self.pairs.len(), "pair count mismatch");
        let p = m.nrows();
        let mut out = DMatrix::zeros(p, self.clients);
        for (idx, &(a, b)) in self.pairs.iter().enumerate() {
            for i in 0..p {
                let v = m[(i, idx)];
                out[(i, a)] += v;
                out[(i, b)] -= v;
            }
        }
        out
    }
}

/// Auxiliary pairwise differences, dual variables, and majorization weights
/// carried through the ADMM iterations. Columns are indexed like the
/// difference operator's pairs.
#[derive(Debug, Clone)]
pub struct FusionState {
    pub alpha: DMatrix<f64>,
    pub xi: DMatrix<f64>,
    pub weights: DVector<f64>,
}

impl FusionState {
    pub fn new(alpha: DMatrix<f64>, xi: DMatrix<f64>, weights: DVector<f64>) -> Result<Self> {
        if alpha.shape() != xi.shape() || alpha.ncols() != weights.len() {
            return Err(IcrError::DimensionMismatch(format!(
                "fusion state parts disagree: alpha {:?}, xi {:?}, weights {}",
                alpha.shape(),
                xi.shape(),
                weights.len()
            )));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(IcrError::InvalidArgument(
                "fusion weights must be nonnegative".into(),
            ));
        }
        Ok(Self { alpha, xi, weights })
    }

    pub fn zeros(dim: usize, op: &DifferenceOperator) -> Self {
        let pair_count = op.pair_count();
        Self {
            alpha: DMatrix::zeros(dim, pair_count),
            xi: DMatrix::zeros(dim, pair_count),
            weights: DVector::zeros(pair_count),
        }
    }
}

/// Penalty family and tuning constants for one solve.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PenaltySpec {
    pub family: PenaltyFamily,
    /// Concavity parameter; must exceed the FISTA step size so the group
    /// proximal map stays single-valued.
    pub tau: f64,
    /// Row-sparsity penalty level.
    pub lambda1: f64,
    /// Pairwise fusion penalty level.
    pub lambda2: f64,
    /// ADMM augmentation constant.
    pub nu: f64,
}

impl PenaltySpec {
    pub fn new(
        family: PenaltyFamily,
        tau: f64,
        lambda1: f64,
        lambda2: f64,
        nu: f64,
    ) -> Result<Self> {
        if !(tau > 1.0) {
            return Err(IcrError::InvalidArgument(format!(
                "concavity parameter must exceed 1, got {tau}"
            )));
        }
        if !(lambda1 >= 0.0) || !(lambda2 >= 0.0) {
            return Err(IcrError::InvalidArgument(
                "penalty levels must be nonnegative".into(),
            ));
        }
        if !(nu > 0.0) {
            return Err(IcrError::InvalidArgument(format!(
                "augmentation constant must be positive, got {nu}"
            )));
        }
        Ok(Self {
            family,
            tau,
            lambda1,
            lambda2,
            nu,
        })
    }

    /// MCP with the defaults used throughout the numerical studies
    /// (tau = 3, nu = 1).
    pub fn mcp(lambda1: f64, lambda2: f64) -> Result<Self> {
        Self::new(PenaltyFamily::Mcp, 3.0, lambda1, lambda2, 1.0)
    }

    pub fn with_lambdas(&self, lambda1: f64, lambda2: f64) -> Self {
        Self {
            lambda1,
            lambda2,
            ..*self
        }
    }
}

/// A fitted partition of the clients together with the cluster-level and
/// client-level coefficient matrices.
#[derive(Debug, Clone)]
pub struct ClusterSolution {
    /// Disjoint client-index sets covering 0..K, each sorted, ordered by
    /// smallest member.
    pub partition: Vec<Vec<usize>>,
    /// p x M matrix of per-cluster coefficients.
    pub psi: DMatrix<f64>,
    /// p x K matrix; column k equals the psi column of k's cluster.
    pub theta_hat: CoefficientMatrix,
    /// Row indices with nonzero coefficients; the intercept row 0 is always
    /// included.
    pub active_set: Vec<usize>,
    /// Whether the solver met its convergence cutoff.
    pub converged: bool,
}

impl ClusterSolution {
    /// Build a solution from a partition and per-cluster coefficients,
    /// expanding `psi` into the client-level matrix and deriving the active
    /// set.
    pub fn from_partition(
        partition: Vec<Vec<usize>>,
        psi: DMatrix<f64>,
        clients: usize,
        converged: bool,
    ) -> Result<Self> {
        if psi.ncols() != partition.len() {
            return Err(IcrError::DimensionMismatch(format!(
                "{} clusters but psi has {} columns",
                partition.len(),
                psi.ncols()
            )));
        }
        let mut seen = vec![false; clients];
        for members in &partition {
            for &k in members {
                if k >= clients || seen[k] {
                    return Err(IcrError::InvalidArgument(
                        "partition is not a partition of the client set".into(),
                    ));
                }
                seen[k] = true;
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(IcrError::InvalidArgument(
                "partition does not cover the client set".into(),
            ));
        }

        let p = psi.nrows();
        let mut theta = DMatrix::zeros(p, clients);
        for (m, members) in partition.iter().enumerate() {
            for &k in members {
                theta.set_column(k, &psi.column(m).into_owned());
            }
        }
        let active_set = active_rows(&theta);
        Ok(Self {
            partition,
            psi,
            theta_hat: CoefficientMatrix::new(theta)?,
            active_set,
            converged,
        })
    }

    /// Number of identified clusters.
    pub fn num_clusters(&self) -> usize {
        self.partition.len()
    }

    /// Cluster label of each client (position m of `partition` gets label m).
    pub fn labels(&self) -> Vec<usize> {
        let mut labels = vec![0usize; self.theta_hat.clients()];
        for (m, members) in self.partition.iter().enumerate() {
            for &k in members {
                labels[k] = m;
            }
        }
        labels
    }
}

/// Rows with a nonzero entry, with the intercept row always included.
pub(crate) fn active_rows(theta: &DMatrix<f64>) -> Vec<usize> {
    let mut rows = vec![0usize];
    for j in 1..theta.nrows() {
        if theta.row(j).iter().any(|v| *v != 0.0) {
            rows.push(j);
        }
    }
    rows
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn dense_a(op: &DifferenceOperator) -> DMatrix<f64> {
        let mut a = DMatrix::zeros(op.clients(), op.pair_count());
        for (idx, &(k, k_prime)) in op.pairs().iter().enumerate() {
            a[(k, idx)] = 1.0;
            a[(k_prime, idx)] = -1.0;
        }
        a
    }

    fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> DMatrix<f64> {
        DMatrix::from_fn(rows, cols, |_, _| rng.random::<f64>() * 2.0 - 1.0)
    }

    #[test]
    fn pair_index_first_and_last() {
        let op = DifferenceOperator::new(4);
        assert_eq!(op.pair_index(0, 1).unwrap(), 0);
        assert_eq!(op.pair_index(2, 3).unwrap(), 5);
    }

    #[test]
    fn pair_index_interior() {
        // Enumerating the lexicographic pairs of K=4 puts (1,3) fifth.
        let op = DifferenceOperator::new(4);
        assert_eq!(op.pair_index(1, 3).unwrap(), 4);
    }

    #[test]
    fn pair_index_is_lexicographic_bijection() {
        for clients in 2..8 {
            let op = DifferenceOperator::new(clients);
            let mut expected = 0usize;
            for a in 0..clients {
                for b in (a + 1)..clients {
                    assert_eq!(op.pair_index(a, b).unwrap(), expected);
                    assert_eq!(op.pair(expected), (a, b));
                    expected += 1;
                }
            }
            assert_eq!(expected, op.pair_count());
        }
    }

    #[test]
    fn pair_index_rejects_bad_arguments() {
        let op = DifferenceOperator::new(4);
        assert!(op.pair_index(1, 1).is_err());
        assert!(op.pair_index(2, 1).is_err());
        assert!(op.pair_index(1, 4).is_err());
    }

    #[test]
    fn apply_constant_columns_is_zero() {
        let theta = DMatrix::from_fn(3, 5, |i, _| i as f64 + 1.0);
        let op = DifferenceOperator::new(5);
        assert_eq!(op.apply(&theta).amax(), 0.0);
    }

    #[test]
    fn apply_two_clients() {
        let theta = DMatrix::from_columns(&[
            DVector::from_vec(vec![1.0, 0.0]),
            DVector::from_vec(vec![0.0, 1.0]),
        ]);
        let op = DifferenceOperator::new(2);
        let d = op.apply(&theta);
        assert_eq!(d.ncols(), 1);
        assert_eq!(d[(0, 0)], 1.0);
        assert_eq!(d[(1, 0)], -1.0);
    }

    #[test]
    fn apply_matches_dense_multiplication() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let op = DifferenceOperator::new(4);
        let theta = random_matrix(&mut rng, 3, 4);
        let expected = &theta * dense_a(&op);
        assert_relative_eq!(op.apply(&theta), expected, max_relative = 1e-12);
    }

    #[test]
    fn adjoint_zero_and_two_client_pattern() {
        let op = DifferenceOperator::new(2);
        let zero = DMatrix::zeros(3, 1);
        assert_eq!(op.apply_adjoint(&zero).amax(), 0.0);

        let m = DMatrix::from_column_slice(2, 1, &[1.0, -1.0]);
        let back = op.apply_adjoint(&m);
        assert_eq!(back.column(0), m.column(0));
        assert_eq!(back.column(1), -m.column(0));
    }

    #[test]
    fn adjoint_matches_dense_multiplication() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let op = DifferenceOperator::new(5);
        let m = random_matrix(&mut rng, 3, op.pair_count());
        let expected = &m * dense_a(&op).transpose();
        assert_relative_eq!(op.apply_adjoint(&m), expected, max_relative = 1e-12);
    }

    #[test]
    fn round_trip_equals_dense_gram() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for clients in [2usize, 3, 6] {
            let op = DifferenceOperator::new(clients);
            let theta = random_matrix(&mut rng, 4, clients);
            let gram = {
                let a = dense_a(&op);
                &a * a.transpose()
            };
            let direct = op.apply_adjoint(&op.apply(&theta));
            assert_relative_eq!(direct, &theta * &gram, max_relative = 1e-12);
            // Diagonal of A A^T is exactly K-1 and its rows sum to zero.
            for k in 0..clients {
                assert_eq!(gram[(k, k)], (clients - 1) as f64);
                assert_eq!(gram.row(k).sum(), 0.0);
            }
        }
    }

    proptest! {
        #[test]
        fn adjoint_identity(seed in 0u64..1000, clients in 2usize..7, p in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let op = DifferenceOperator::new(clients);
            let theta = random_matrix(&mut rng, p, clients);
            let m = random_matrix(&mut rng, p, op.pair_count());
            let lhs = op.apply(&theta).dot(&m);
            let rhs = theta.dot(&op.apply_adjoint(&m));
            prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs()));
        }
    }

    #[test]
    fn packet_validation_catches_defects() {
        let theta = DVector::from_vec(vec![0.5, -0.25]);
        let grad = DVector::zeros(2);
        let psd = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        assert!(SummaryPacket::new("a", 10, theta.clone(), grad.clone(), psd.clone(), LossKind::Squared).is_ok());

        let asym = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.6, 1.0]);
        assert!(SummaryPacket::new("a", 10, theta.clone(), grad.clone(), asym, LossKind::Squared).is_err());

        let indefinite = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(SummaryPacket::new("a", 10, theta.clone(), grad.clone(), indefinite, LossKind::Squared).is_err());

        let short = DVector::from_vec(vec![1.0]);
        assert!(SummaryPacket::new("a", 10, short.clone(), short, DMatrix::zeros(1, 1), LossKind::Squared).is_err());

        assert!(SummaryPacket::new("a", 10, theta, DVector::zeros(3), psd, LossKind::Squared).is_err());
    }

    #[test]
    fn zeta_is_hessian_theta_minus_gradient() {
        let v = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let theta = DVector::from_vec(vec![1.0, -1.0]);
        let grad = DVector::from_vec(vec![0.25, 0.5]);
        let packet =
            SummaryPacket::new("a", 5, theta.clone(), grad.clone(), v.clone(), LossKind::Squared)
                .unwrap();
        assert_relative_eq!(packet.zeta(), &v * &theta - &grad, max_relative = 1e-15);
    }

    #[test]
    fn cluster_solution_from_partition_expands_and_validates() {
        let psi = DMatrix::from_column_slice(3, 2, &[0.1, 1.0, 0.0, 0.2, -1.0, 0.0]);
        let sol =
            ClusterSolution::from_partition(vec![vec![0, 2], vec![1]], psi.clone(), 3, true)
                .unwrap();
        assert_eq!(sol.num_clusters(), 2);
        assert_eq!(sol.labels(), vec![0, 1, 0]);
        assert_eq!(sol.theta_hat.column(2), psi.column(0).into_owned());
        // Row 2 is identically zero, so the active set is the intercept and row 1.
        assert_eq!(sol.active_set, vec![0, 1]);

        assert!(
            ClusterSolution::from_partition(vec![vec![0], vec![0, 1]], psi.clone(), 2, true)
                .is_err()
        );
        assert!(ClusterSolution::from_partition(vec![vec![0]], psi, 2, true).is_err());
    }
}
