//! Tuning of the two penalty levels over a grid by a modified BIC:
//! surrogate loss plus log(log(Kp)) * (log N / N) times the complexity of
//! the fitted solution.

use rayon::prelude::*;

use crate::error::{IcrError, Result};
use crate::metrics::model_size;
use crate::model::{
    check_consistent_dim, ClusterSolution, CoefficientMatrix, DifferenceOperator, PenaltySpec,
    SummaryPacket,
};
use crate::solver::{solve, surrogate_loss, SolverConfig};

/// How the complexity count of the modified BIC reads the fitted clusters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ComplexityRule {
    /// Number of distinct nonzero values per variable, summed over the
    /// variables (the same count the model-size metric uses).
    #[default]
    DistinctRowValues,
    /// Number of nonzero entries of the cluster coefficient matrix (each
    /// cluster's coefficients counted separately).
    ClusterNonzeros,
}

/// Complexity of a fitted solution under the given rule.
pub fn complexity(solution: &ClusterSolution, rule: ComplexityRule) -> usize {
    match rule {
        ComplexityRule::DistinctRowValues => model_size(&solution.psi) as usize,
        ComplexityRule::ClusterNonzeros => solution.psi.iter().filter(|v| **v != 0.0).count(),
    }
}

/// Modified BIC with the default complexity rule.
pub fn mbic(packets: &[SummaryPacket], solution: &ClusterSolution) -> Result<f64> {
    mbic_with(packets, solution, ComplexityRule::default())
}

/// Modified BIC: surrogate loss + log(log(Kp)) * (log N / N) * complexity.
pub fn mbic_with(
    packets: &[SummaryPacket],
    solution: &ClusterSolution,
    rule: ComplexityRule,
) -> Result<f64> {
    let p = check_consistent_dim(packets)?;
    let clients = packets.len();
    let kp = (clients * p) as f64;
    if kp <= std::f64::consts::E {
        return Err(IcrError::InvalidArgument(format!(
            "modified BIC constant log(log(Kp)) undefined for Kp = {kp}"
        )));
    }
    let c_n = kp.ln().ln();
    let total_n: usize = packets.iter().map(|p| p.n).sum();
    let loss = surrogate_loss(packets, &solution.theta_hat)?;
    let q_hat = complexity(solution, rule) as f64;
    Ok(loss + c_n * (total_n as f64).ln() / total_n as f64 * q_hat)
}

/// One scored grid point.
#[derive(Debug, Clone)]
pub struct ScoreRow {
    pub lambda1: f64,
    pub lambda2: f64,
    pub mbic: f64,
    pub m_hat: usize,
    pub q_hat: usize,
    pub converged: bool,
}

/// Outcome of a grid search: the selected solution plus the full score
/// table in grid order.
#[derive(Debug, Clone)]
pub struct GridSearchResult {
    pub best: ClusterSolution,
    pub best_lambda1: f64,
    pub best_lambda2: f64,
    pub table: Vec<ScoreRow>,
}

/// Default row-penalty grid: 5 log-spaced levels from the smallest value
/// that zeroes every covariate row at the start (the max row norm of the
/// surrogate gradient at zero) down two decades.
pub fn default_lambda1_grid(packets: &[SummaryPacket]) -> Result<Vec<f64>> {
    let p = check_consistent_dim(packets)?;
    let total_n: usize = packets.iter().map(|pk| pk.n).sum();
    let mut max_row = 0.0f64;
    for j in 1..p {
        let mut acc = 0.0;
        for packet in packets {
            let term = 2.0 * packet.n as f64 / total_n as f64 * packet.zeta()[j];
            acc += term * term;
        }
        max_row = max_row.max(acc.sqrt());
    }
    Ok(log_grid(max_row.max(1e-8), 100.0, 5))
}

/// Default fusion grid: 5 log-spaced levels from the largest pairwise
/// distance of the local estimates down two decades.
pub fn default_lambda2_grid(packets: &[SummaryPacket]) -> Result<Vec<f64>> {
    check_consistent_dim(packets)?;
    let op = DifferenceOperator::new(packets.len());
    let mut max_diff = 0.0f64;
    for &(a, b) in op.pairs() {
        let diff = (&packets[a].theta_tilde - &packets[b].theta_tilde).norm();
        max_diff = max_diff.max(diff);
    }
    Ok(log_grid(max_diff.max(1e-8), 100.0, 5))
}

fn log_grid(top: f64, span: f64, points: usize) -> Vec<f64> {
    (0..points)
        .map(|i| top / span.powf(i as f64 / (points - 1) as f64))
        .collect()
}

/// Solve every (lambda1, lambda2) grid point and pick the smallest modified
/// BIC among the converged ones; ties break toward the larger fusion level,
/// then the larger row penalty. Within one lambda1 the lambda2 path is
/// warm-started from the previous solution; distinct lambda1 paths run in
/// parallel.
pub fn grid_search(
    packets: &[SummaryPacket],
    lambda1_grid: &[f64],
    lambda2_grid: &[f64],
    spec_base: &PenaltySpec,
    cfg: &SolverConfig,
) -> Result<GridSearchResult> {
    grid_search_with(
        packets,
        lambda1_grid,
        lambda2_grid,
        spec_base,
        cfg,
        ComplexityRule::default(),
    )
}

pub fn grid_search_with(
    packets: &[SummaryPacket],
    lambda1_grid: &[f64],
    lambda2_grid: &[f64],
    spec_base: &PenaltySpec,
    cfg: &SolverConfig,
    rule: ComplexityRule,
) -> Result<GridSearchResult> {
    if lambda1_grid.is_empty() || lambda2_grid.is_empty() {
        return Err(IcrError::InvalidArgument("empty tuning grid".into()));
    }
    check_consistent_dim(packets)?;

    // One lambda2 chain per lambda1 value, warm-started along the chain.
    let chains: Vec<Result<Vec<(ScoreRow, ClusterSolution)>>> = lambda1_grid
        .par_iter()
        .map(|&lambda1| {
            let mut chain = Vec::with_capacity(lambda2_grid.len());
            let mut warm: Option<CoefficientMatrix> = None;
            for &lambda2 in lambda2_grid {
                let spec = spec_base.with_lambdas(lambda1, lambda2);
                let (solution, trace) = solve(packets, &spec, cfg, warm.as_ref())?;
                let row = ScoreRow {
                    lambda1,
                    lambda2,
                    mbic: mbic_with(packets, &solution, rule)?,
                    m_hat: solution.num_clusters(),
                    q_hat: complexity(&solution, rule),
                    converged: trace.converged,
                };
                warm = Some(solution.theta_hat.clone());
                chain.push((row, solution));
            }
            Ok(chain)
        })
        .collect();

    let mut table = Vec::with_capacity(lambda1_grid.len() * lambda2_grid.len());
    let mut best: Option<(usize, &ScoreRow)> = None;
    let mut scored: Vec<(ScoreRow, ClusterSolution)> = Vec::new();
    for chain in chains {
        scored.extend(chain?);
    }
    for (idx, (row, _)) in scored.iter().enumerate() {
        if row.converged {
            let better = match best {
                None => true,
                Some((_, current)) => {
                    (row.mbic, -row.lambda2, -row.lambda1)
                        < (current.mbic, -current.lambda2, -current.lambda1)
                }
            };
            if better {
                best = Some((idx, row));
            }
        }
        table.push(row.clone());
    }

    let (best_idx, _) = best.ok_or_else(|| {
        IcrError::Numerical("no tuning grid point converged".into())
    })?;
    let (best_row, best_solution) = scored[best_idx].clone();
    Ok(GridSearchResult {
        best: best_solution,
        best_lambda1: best_row.lambda1,
        best_lambda2: best_row.lambda2,
        table,
    })
}

/// Convenience wrapper using the default data-driven grids.
pub fn grid_search_default(
    packets: &[SummaryPacket],
    spec_base: &PenaltySpec,
    cfg: &SolverConfig,
) -> Result<GridSearchResult> {
    let lambda1_grid = default_lambda1_grid(packets)?;
    let lambda2_grid = default_lambda2_grid(packets)?;
    grid_search(packets, &lambda1_grid, &lambda2_grid, spec_base, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::LossKind;
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use nalgebra::{DMatrix, DVector};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn packet_at(rng: &mut impl Rng, center: &DVector<f64>, n: usize, id: &str) -> SummaryPacket {
        let p = center.len();
        let rows = (2 * p).max(8);
        let x = DMatrix::from_fn(rows, p, |_, j| {
            if j == 0 {
                1.0
            } else {
                rng.sample::<f64, _>(StandardNormal)
            }
        });
        let v = x.transpose() * &x / rows as f64;
        SummaryPacket::new(id, n, center.clone(), DVector::zeros(p), v, LossKind::Squared)
            .unwrap()
    }

    fn identity_packet(center: &DVector<f64>, n: usize, id: &str) -> SummaryPacket {
        let p = center.len();
        SummaryPacket::new(
            id,
            n,
            center.clone(),
            DVector::zeros(p),
            DMatrix::identity(p, p),
            LossKind::Squared,
        )
        .unwrap()
    }

    fn solution_with(psi: DMatrix<f64>, clients: usize) -> ClusterSolution {
        let partition = vec![(0..clients).collect::<Vec<_>>()];
        ClusterSolution::from_partition(partition, psi, clients, true).unwrap()
    }

    #[test]
    fn mbic_of_zero_solution_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        let packets: Vec<SummaryPacket> = (0..3)
            .map(|k| {
                let c = DVector::from_fn(4, |_, _| rng.random::<f64>() - 0.5);
                packet_at(&mut rng, &c, 10, &format!("c{k}"))
            })
            .collect();
        let zero = solution_with(DMatrix::zeros(4, 1), 3);
        assert_eq!(mbic(&packets, &zero).unwrap(), 0.0);
    }

    #[test]
    fn mbic_complexity_counts_intercept_and_actives() {
        let mut rng = ChaCha8Rng::seed_from_u64(72);
        let p = 12;
        let packets: Vec<SummaryPacket> = (0..4)
            .map(|k| {
                let c = DVector::from_fn(p, |_, _| rng.random::<f64>() - 0.5);
                packet_at(&mut rng, &c, 10, &format!("c{k}"))
            })
            .collect();
        // One cluster, nonzero intercept plus 8 active variables: q = 9.
        let mut psi = DMatrix::zeros(p, 1);
        psi[(0, 0)] = 0.2;
        for j in 1..=8 {
            psi[(j, 0)] = 0.4;
        }
        let solution = solution_with(psi, 4);
        assert_eq!(complexity(&solution, ComplexityRule::DistinctRowValues), 9);
        assert_eq!(complexity(&solution, ComplexityRule::ClusterNonzeros), 9);

        // Decomposition identity.
        let total_n = 40.0f64;
        let c_n = ((4.0 * p as f64).ln()).ln();
        let loss = surrogate_loss(&packets, &solution.theta_hat).unwrap();
        assert_relative_eq!(
            mbic(&packets, &solution).unwrap(),
            loss + c_n * total_n.ln() / total_n * 9.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn mbic_prefers_smaller_complexity_at_equal_loss() {
        // Identity Hessians with zero zeta: the surrogate loss depends only
        // on the column norms, so these two solutions tie on loss and differ
        // in complexity.
        let center = DVector::zeros(4);
        let packets = vec![
            identity_packet(&center, 10, "a"),
            identity_packet(&center, 10, "b"),
        ];
        let mut sparse = DMatrix::zeros(4, 1);
        sparse[(1, 0)] = 0.5;
        let mut dense = DMatrix::zeros(4, 1);
        dense[(1, 0)] = 0.3;
        dense[(2, 0)] = 0.4;
        let sparse = solution_with(sparse, 2);
        let dense = solution_with(dense, 2);
        assert_abs_diff_eq!(
            surrogate_loss(&packets, &sparse.theta_hat).unwrap(),
            surrogate_loss(&packets, &dense.theta_hat).unwrap(),
            epsilon = 1e-15
        );
        assert!(mbic(&packets, &sparse).unwrap() < mbic(&packets, &dense).unwrap());
    }

    #[test]
    fn mbic_rejects_tiny_dimension_products() {
        let center = DVector::zeros(2);
        let packets = vec![identity_packet(&center, 10, "a")];
        let solution = solution_with(DMatrix::zeros(2, 1), 1);
        assert!(mbic(&packets, &solution).is_err());
    }

    fn two_cluster_packets(
        rng: &mut impl Rng,
        clients: usize,
        p: usize,
        active: usize,
    ) -> Vec<SummaryPacket> {
        let mut pattern = DVector::zeros(p);
        for j in 1..=active {
            pattern[j] = 0.5;
        }
        (0..clients)
            .map(|k| {
                let sign = if k < clients / 2 { 1.0 } else { -1.0 };
                let mut center = &pattern * sign;
                for j in 0..p {
                    center[j] += 0.03 * rng.sample::<f64, _>(StandardNormal);
                }
                packet_at(rng, &center, 50, &format!("c{k}"))
            })
            .collect()
    }

    #[test]
    fn single_point_grid_returns_that_solve() {
        let mut rng = ChaCha8Rng::seed_from_u64(73);
        let packets = two_cluster_packets(&mut rng, 4, 8, 3);
        let spec = PenaltySpec::mcp(0.0, 0.0).unwrap();
        let result = grid_search(
            &packets,
            &[0.05],
            &[0.4],
            &spec,
            &SolverConfig::default(),
        )
        .unwrap();
        assert_eq!(result.table.len(), 1);
        assert_eq!(result.best_lambda1, 0.05);
        assert_eq!(result.best_lambda2, 0.4);
    }

    #[test]
    fn table_has_one_row_per_grid_point_and_best_is_argmin() {
        let mut rng = ChaCha8Rng::seed_from_u64(74);
        let packets = two_cluster_packets(&mut rng, 6, 10, 4);
        let spec = PenaltySpec::mcp(0.0, 0.0).unwrap();
        let l1 = [0.2, 0.05];
        let l2 = [0.8, 0.4, 0.1];
        let result =
            grid_search(&packets, &l1, &l2, &spec, &SolverConfig::default()).unwrap();
        assert_eq!(result.table.len(), 6);

        let converged_min = result
            .table
            .iter()
            .filter(|r| r.converged)
            .map(|r| r.mbic)
            .fold(f64::INFINITY, f64::min);
        let best_row = result
            .table
            .iter()
            .find(|r| r.lambda1 == result.best_lambda1 && r.lambda2 == result.best_lambda2)
            .unwrap();
        assert_eq!(best_row.mbic, converged_min);
        assert_eq!(best_row.m_hat, result.best.num_clusters());
    }

    #[test]
    fn grid_search_recovers_structure_on_a_small_instance() {
        let mut rng = ChaCha8Rng::seed_from_u64(75);
        let packets = two_cluster_packets(&mut rng, 6, 12, 4);
        let spec = PenaltySpec::mcp(0.0, 0.0).unwrap();
        let result =
            grid_search_default(&packets, &spec, &SolverConfig::default()).unwrap();
        assert_eq!(result.best.num_clusters(), 2);
        let expected: Vec<usize> = (0..=4).collect();
        assert_eq!(result.best.active_set, expected);
        assert_eq!(
            result.best.partition,
            vec![vec![0, 1, 2], vec![3, 4, 5]]
        );
    }

    #[test]
    fn default_grids_are_descending_and_positive() {
        let mut rng = ChaCha8Rng::seed_from_u64(76);
        let packets = two_cluster_packets(&mut rng, 4, 8, 3);
        for grid in [
            default_lambda1_grid(&packets).unwrap(),
            default_lambda2_grid(&packets).unwrap(),
        ] {
            assert_eq!(grid.len(), 5);
            assert!(grid.iter().all(|l| *l > 0.0));
            for w in grid.windows(2) {
                assert!(w[1] < w[0]);
            }
            assert_relative_eq!(grid[0] / grid[4], 100.0, max_relative = 1e-9);
        }
    }
}
