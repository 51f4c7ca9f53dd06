//! Proximal ADMM minimization of the aggregated objective: quadratic
//! surrogate loss plus a concave group penalty over coefficient rows plus a
//! concave fusion penalty over all pairwise column differences.
//!
//! One outer iteration majorizes the fusion penalty by a weighted group norm
//! (local linear approximation), minimizes the resulting block by FISTA on
//! the smooth envelope whose gradient involves a ball projection per client
//! pair, refreshes the weights, and advances the dual variables through the
//! same projection. Exact zeros of the recovered pairwise differences define
//! the clusters.

use nalgebra::{DMatrix, DVector};

use crate::error::{IcrError, Result};
use crate::model::{
    check_consistent_dim, ClusterSolution, CoefficientMatrix, DifferenceOperator, FusionState,
    PenaltySpec, SummaryPacket,
};
use crate::penalty::{group_prox_scale, penalty_deriv, penalty_value};

/// Iteration limits and cutoffs. Convergence is declared when the max-abs
/// coefficient change between consecutive iterations falls below the cutoff.
#[derive(Debug, Clone, Copy)]
pub struct SolverConfig {
    pub outer_max: usize,
    pub outer_tol: f64,
    pub inner_max: usize,
    pub inner_tol: f64,
    /// Refresh the majorization weights from the extrapolated iterate inside
    /// the FISTA loop (in addition to the per-outer-iteration refresh).
    pub refresh_weights_in_fista: bool,
    /// Extract clusters from exact zeros of the recovered pairwise
    /// differences; otherwise require exact column equality.
    pub cluster_merge_from_alpha: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            outer_max: 100,
            outer_tol: 1e-5,
            inner_max: 500,
            inner_tol: 1e-6,
            refresh_weights_in_fista: true,
            cluster_merge_from_alpha: true,
        }
    }
}

/// Per-outer-iteration diagnostics.
#[derive(Debug, Clone, Default)]
pub struct SolveTrace {
    /// Full objective (surrogate + both penalties) after each outer step.
    pub objective: Vec<f64>,
    /// Frobenius norm of theta*A - alpha after each outer step.
    pub primal_residual: Vec<f64>,
    /// nu * Frobenius change of alpha between consecutive outer steps.
    pub dual_residual: Vec<f64>,
    /// FISTA iterations spent per outer step.
    pub inner_iterations: Vec<usize>,
    pub converged: bool,
}

/// Precomputed per-client quadratic pieces scaled for the gradient:
/// column k of the gradient is scaled_v[k] * theta_k - scaled_zeta[k]
/// with scaling 2 n_k / N.
struct Surrogate {
    scaled_v: Vec<DMatrix<f64>>,
    scaled_zeta: Vec<DVector<f64>>,
    /// Upper bound on the Lipschitz constant of the quadratic part's
    /// gradient: max_k || (2 n_k / N) V_k ||_2.
    lipschitz_g: f64,
    dim: usize,
}

impl Surrogate {
    fn from_packets(packets: &[SummaryPacket]) -> Result<Self> {
        let dim = check_consistent_dim(packets)?;
        let total_n: usize = packets.iter().map(|p| p.n).sum();
        let mut scaled_v = Vec::with_capacity(packets.len());
        let mut scaled_zeta = Vec::with_capacity(packets.len());
        let mut lipschitz_g = 0.0f64;
        for packet in packets {
            let scale = 2.0 * packet.n as f64 / total_n as f64;
            let v = &packet.hessian_tilde * scale;
            lipschitz_g = lipschitz_g.max(crate::model::sym_inf_norm(&v));
            scaled_v.push(v);
            scaled_zeta.push(packet.zeta() * scale);
        }
        Ok(Self {
            scaled_v,
            scaled_zeta,
            lipschitz_g,
            dim,
        })
    }

    fn clients(&self) -> usize {
        self.scaled_v.len()
    }

    /// (1/N) sum_k n_k (theta_k' V_k theta_k - 2 theta_k' zeta_k).
    fn loss(&self, theta: &DMatrix<f64>) -> f64 {
        let mut acc = 0.0;
        for k in 0..self.clients() {
            let col = theta.column(k);
            acc += 0.5 * (&self.scaled_v[k] * col).dot(&col) - self.scaled_zeta[k].dot(&col);
        }
        acc
    }

    /// Column k: (2 n_k / N)(V_k theta_k - zeta_k).
    fn gradient(&self, theta: &DMatrix<f64>) -> DMatrix<f64> {
        let mut grad = DMatrix::zeros(self.dim, self.clients());
        for k in 0..self.clients() {
            let col = &self.scaled_v[k] * theta.column(k) - &self.scaled_zeta[k];
            grad.set_column(k, &col);
        }
        grad
    }

    /// FISTA step size 1 / L with L = max(1, L_g) + 2 nu (K - 1). The
    /// constant-1 floor matches the step used when the quadratic part has
    /// unit-bounded curvature; taking the max keeps the step valid when a
    /// client Hessian is steeper, which happens for squared losses at small K.
    fn step_size(&self, nu: f64) -> f64 {
        let k = self.clients();
        1.0 / (self.lipschitz_g.max(1.0) + 2.0 * nu * (k.saturating_sub(1)) as f64)
    }
}

/// The quadratic surrogate loss at a coefficient matrix.
pub fn surrogate_loss(packets: &[SummaryPacket], theta: &CoefficientMatrix) -> Result<f64> {
    let surrogate = Surrogate::from_packets(packets)?;
    check_theta_shape(&surrogate, theta)?;
    Ok(surrogate.loss(theta.matrix()))
}

/// Gradient of the surrogate loss (p x K).
pub fn surrogate_gradient(
    packets: &[SummaryPacket],
    theta: &CoefficientMatrix,
) -> Result<DMatrix<f64>> {
    let surrogate = Surrogate::from_packets(packets)?;
    check_theta_shape(&surrogate, theta)?;
    Ok(surrogate.gradient(theta.matrix()))
}

fn check_theta_shape(surrogate: &Surrogate, theta: &CoefficientMatrix) -> Result<()> {
    if theta.dim() != surrogate.dim || theta.clients() != surrogate.clients() {
        return Err(IcrError::DimensionMismatch(format!(
            "coefficients are {}x{} but packets give {}x{}",
            theta.dim(),
            theta.clients(),
            surrogate.dim,
            surrogate.clients()
        )));
    }
    Ok(())
}

/// Full objective: surrogate loss + group row penalty + pairwise fusion
/// penalty.
pub fn full_objective(
    packets: &[SummaryPacket],
    theta: &CoefficientMatrix,
    spec: &PenaltySpec,
) -> Result<f64> {
    let surrogate = Surrogate::from_packets(packets)?;
    check_theta_shape(&surrogate, theta)?;
    let m = theta.matrix();
    Ok(surrogate.loss(m) + row_penalty(m, spec) + fusion_penalty(m, spec))
}

fn row_penalty(theta: &DMatrix<f64>, spec: &PenaltySpec) -> f64 {
    (1..theta.nrows())
        .map(|j| penalty_value(theta.row(j).norm(), spec.lambda1, spec.tau, spec.family))
        .sum()
}

fn fusion_penalty(theta: &DMatrix<f64>, spec: &PenaltySpec) -> f64 {
    let op = DifferenceOperator::new(theta.ncols());
    op.pairs()
        .iter()
        .map(|&(a, b)| {
            let diff = (theta.column(a) - theta.column(b)).norm();
            penalty_value(diff, spec.lambda2, spec.tau, spec.family)
        })
        .sum()
}

/// Majorization weight per client pair: derivative of the fusion penalty at
/// the current pairwise distance. Identical columns get the full level
/// lambda2; pairs past the concavity plateau get zero and are free.
pub fn lla_weights(theta: &CoefficientMatrix, spec: &PenaltySpec) -> DVector<f64> {
    lla_weights_of(theta.matrix(), spec)
}

fn lla_weights_of(theta: &DMatrix<f64>, spec: &PenaltySpec) -> DVector<f64> {
    let op = DifferenceOperator::new(theta.ncols());
    DVector::from_iterator(
        op.pair_count(),
        op.pairs().iter().map(|&(a, b)| {
            let diff = (theta.column(a) - theta.column(b)).norm();
            penalty_deriv(diff, spec.lambda2, spec.tau, spec.family)
        }),
    )
}

/// Project each column of `m` onto the ball with the matching radius.
fn project_columns(mut m: DMatrix<f64>, radii: &DVector<f64>) -> DMatrix<f64> {
    for idx in 0..m.ncols() {
        let norm = m.column(idx).norm();
        let r = radii[idx];
        if norm > r {
            let scale = if norm > 0.0 { r / norm } else { 0.0 };
            m.column_mut(idx).scale_mut(scale);
        }
    }
    m
}

/// Group-soft-threshold each column of `m` at the matching level.
fn soft_threshold_columns(mut m: DMatrix<f64>, thresholds: &DVector<f64>) -> DMatrix<f64> {
    for idx in 0..m.ncols() {
        let norm = m.column(idx).norm();
        let t = thresholds[idx];
        if norm <= t {
            m.column_mut(idx).fill(0.0);
        } else {
            m.column_mut(idx).scale_mut(1.0 - t / norm);
        }
    }
    m
}

/// Gradient of the smooth envelope minimized by the FISTA stage: the
/// surrogate gradient plus the ball-projected dual track mapped back through
/// the difference adjoint.
pub fn eta2_gradient(
    packets: &[SummaryPacket],
    theta: &CoefficientMatrix,
    xi: &DMatrix<f64>,
    weights: &DVector<f64>,
    nu: f64,
) -> Result<DMatrix<f64>> {
    let surrogate = Surrogate::from_packets(packets)?;
    check_theta_shape(&surrogate, theta)?;
    let op = DifferenceOperator::new(theta.clients());
    Ok(eta2_gradient_inner(
        &surrogate,
        &op,
        theta.matrix(),
        xi,
        weights,
        nu,
    ))
}

fn eta2_gradient_inner(
    surrogate: &Surrogate,
    op: &DifferenceOperator,
    theta: &DMatrix<f64>,
    xi: &DMatrix<f64>,
    weights: &DVector<f64>,
    nu: f64,
) -> DMatrix<f64> {
    let mut track = op.apply(theta) * nu;
    track += xi;
    let projected = project_columns(track, weights);
    surrogate.gradient(theta) + op.apply_adjoint(&projected)
}

/// Value of the smooth envelope: surrogate loss plus the partially minimized
/// augmented Lagrangian of the fusion block. Used for divergence monitoring
/// and by the finite-difference tests.
fn eta2_value(
    surrogate: &Surrogate,
    op: &DifferenceOperator,
    theta: &DMatrix<f64>,
    xi: &DMatrix<f64>,
    weights: &DVector<f64>,
    nu: f64,
) -> f64 {
    let d = op.apply(theta);
    let mut acc = surrogate.loss(theta);
    for idx in 0..op.pair_count() {
        let d_col = d.column(idx);
        let xi_col = xi.column(idx);
        // alpha*(theta) minimizes the column's augmented term in closed form.
        let mut shifted = d_col.into_owned();
        shifted.axpy(1.0 / nu, &xi_col, 1.0);
        let norm = shifted.norm();
        let t = weights[idx] / nu;
        let alpha = if norm <= t {
            DVector::zeros(shifted.len())
        } else {
            &shifted * (1.0 - t / norm)
        };
        let gap = d_col - &alpha;
        acc += weights[idx] * alpha.norm() + xi_col.dot(&gap) + 0.5 * nu * gap.norm_squared();
    }
    acc
}

fn h2_value(theta: &DMatrix<f64>, spec: &PenaltySpec) -> f64 {
    row_penalty(theta, spec)
}

/// Apply the group proximal map of the row penalty to every non-intercept
/// row.
fn prox_rows(theta: &mut DMatrix<f64>, step: f64, spec: &PenaltySpec) -> Result<()> {
    for j in 1..theta.nrows() {
        let norm = theta.row(j).norm();
        let scale = group_prox_scale(norm, step, spec.lambda1, spec.tau, spec.family)?;
        if scale != 1.0 {
            theta.row_mut(j).scale_mut(scale);
        }
    }
    Ok(())
}

/// One FISTA solve of the theta block at fixed dual variables: accelerated
/// proximal gradient on the smooth envelope plus the row penalty.
pub fn fista_theta_step(
    packets: &[SummaryPacket],
    state: &FusionState,
    spec: &PenaltySpec,
    cfg: &SolverConfig,
    from: &CoefficientMatrix,
) -> Result<CoefficientMatrix> {
    let surrogate = Surrogate::from_packets(packets)?;
    check_theta_shape(&surrogate, from)?;
    let op = DifferenceOperator::new(from.clients());
    let (theta, _iters) = fista_inner(
        &surrogate,
        &op,
        from.matrix().clone(),
        &state.xi,
        &state.weights,
        spec,
        cfg,
    )?;
    CoefficientMatrix::new(theta)
}

fn fista_inner(
    surrogate: &Surrogate,
    op: &DifferenceOperator,
    theta_start: DMatrix<f64>,
    xi: &DMatrix<f64>,
    outer_weights: &DVector<f64>,
    spec: &PenaltySpec,
    cfg: &SolverConfig,
) -> Result<(DMatrix<f64>, usize)> {
    let step = surrogate.step_size(spec.nu);
    let mut theta = theta_start.clone();
    let mut u = theta_start;
    let mut momentum = 1.0f64;

    let start_weights = if cfg.refresh_weights_in_fista {
        lla_weights_of(&u, spec)
    } else {
        outer_weights.clone()
    };
    let objective_start =
        eta2_value(surrogate, op, &theta, xi, &start_weights, spec.nu) + h2_value(&theta, spec);
    let mut objective_prev = objective_start;
    let mut rises = 0usize;
    let mut iterations = 0usize;

    for s in 1..=cfg.inner_max {
        iterations = s;
        let weights = if cfg.refresh_weights_in_fista {
            lla_weights_of(&u, spec)
        } else {
            outer_weights.clone()
        };

        let grad = eta2_gradient_inner(surrogate, op, &u, xi, &weights, spec.nu);
        let mut theta_next = &u - grad * step;
        prox_rows(&mut theta_next, step, spec)?;

        let momentum_next = 0.5 * (1.0 + (1.0 + 4.0 * momentum * momentum).sqrt());
        let beta = (momentum - 1.0) / momentum_next;
        let mut u_next = &theta_next * (1.0 + beta);
        u_next -= &theta * beta;

        let change = (&theta_next - &theta).amax();
        theta = theta_next;
        momentum = momentum_next;
        u = u_next;

        let objective =
            eta2_value(surrogate, op, &theta, xi, &weights, spec.nu) + h2_value(&theta, spec);
        if objective > objective_start + 1e3 * (1.0 + objective_start.abs()) {
            return Err(IcrError::Numerical(format!(
                "FISTA diverged at inner iteration {s}: objective {objective:.6e} from {objective_start:.6e}"
            )));
        }
        if objective > objective_prev {
            rises += 1;
            if rises >= 10 {
                // Concave prox can defeat the momentum; restart it.
                momentum = 1.0;
                u = theta.clone();
                rises = 0;
            }
        } else {
            rises = 0;
        }
        objective_prev = objective;

        if change <= cfg.inner_tol {
            break;
        }
    }
    Ok((theta, iterations))
}

/// Dual update: project the advanced dual track onto the per-pair balls.
pub fn dual_step(
    theta: &CoefficientMatrix,
    xi_prev: &DMatrix<f64>,
    weights: &DVector<f64>,
    nu: f64,
) -> DMatrix<f64> {
    let op = DifferenceOperator::new(theta.clients());
    dual_step_inner(&op, theta.matrix(), xi_prev, weights, nu)
}

fn dual_step_inner(
    op: &DifferenceOperator,
    theta: &DMatrix<f64>,
    xi_prev: &DMatrix<f64>,
    weights: &DVector<f64>,
    nu: f64,
) -> DMatrix<f64> {
    let mut track = op.apply(theta) * nu;
    track += xi_prev;
    project_columns(track, weights)
}

/// Recover the auxiliary pairwise differences by group soft thresholding;
/// their exact zeros are the fused pairs.
pub fn recover_alpha(
    theta: &CoefficientMatrix,
    xi: &DMatrix<f64>,
    weights: &DVector<f64>,
    nu: f64,
) -> DMatrix<f64> {
    let op = DifferenceOperator::new(theta.clients());
    recover_alpha_inner(&op, theta.matrix(), xi, weights, nu)
}

fn recover_alpha_inner(
    op: &DifferenceOperator,
    theta: &DMatrix<f64>,
    xi: &DMatrix<f64>,
    weights: &DVector<f64>,
    nu: f64,
) -> DMatrix<f64> {
    let mut track = op.apply(theta);
    track += xi * (1.0 / nu);
    let thresholds = weights / nu;
    soft_threshold_columns(track, &thresholds)
}

/// Minimizer of the pooled surrogate: (sum_k n_k V_k)^-1 (sum_k n_k zeta_k).
/// This is where the solver must land when the fusion level forces a single
/// cluster and the row penalty is off.
pub fn pooled_surrogate_minimizer(packets: &[SummaryPacket]) -> Result<DVector<f64>> {
    let p = check_consistent_dim(packets)?;
    let mut v = DMatrix::zeros(p, p);
    let mut zeta = DVector::zeros(p);
    for packet in packets {
        let w = packet.n as f64;
        v += &packet.hessian_tilde * w;
        zeta += packet.zeta() * w;
    }
    crate::local::solve_spd_with_ridge(v, &zeta)
}

/// Disjoint-set forest over client indices.
struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, i: usize) -> usize {
        if self.parent[i] != i {
            let root = self.find(self.parent[i]);
            self.parent[i] = root;
        }
        self.parent[i]
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.parent[ra.max(rb)] = ra.min(rb);
        }
    }
}

/// Full solve: LLA-weighted proximal ADMM from the local estimates (or a
/// caller-supplied start), followed by cluster extraction and within-cluster
/// column averaging.
pub fn solve(
    packets: &[SummaryPacket],
    spec: &PenaltySpec,
    cfg: &SolverConfig,
    theta_init: Option<&CoefficientMatrix>,
) -> Result<(ClusterSolution, SolveTrace)> {
    let surrogate = Surrogate::from_packets(packets)?;
    let clients = surrogate.clients();
    let op = DifferenceOperator::new(clients);

    let mut theta = match theta_init {
        Some(init) => {
            check_theta_shape(&surrogate, init)?;
            init.matrix().clone()
        }
        None => CoefficientMatrix::from_local_estimates(packets)?
            .into_inner(),
    };
    let mut xi = DMatrix::zeros(surrogate.dim, op.pair_count());
    let mut weights = lla_weights_of(&theta, spec);
    let mut alpha = recover_alpha_inner(&op, &theta, &xi, &weights, spec.nu);

    let mut trace = SolveTrace::default();
    let mut converged = false;

    for _ in 0..cfg.outer_max {
        let (theta_next, inner_iterations) = fista_inner(
            &surrogate,
            &op,
            theta.clone(),
            &xi,
            &weights,
            spec,
            cfg,
        )?;
        weights = lla_weights_of(&theta_next, spec);
        xi = dual_step_inner(&op, &theta_next, &xi, &weights, spec.nu);
        let alpha_next = recover_alpha_inner(&op, &theta_next, &xi, &weights, spec.nu);

        let objective = surrogate.loss(&theta_next)
            + row_penalty(&theta_next, spec)
            + fusion_penalty(&theta_next, spec);
        trace.objective.push(objective);
        trace
            .primal_residual
            .push((op.apply(&theta_next) - &alpha_next).norm());
        trace
            .dual_residual
            .push((&alpha_next - &alpha).norm() * spec.nu);
        trace.inner_iterations.push(inner_iterations);

        let change = (&theta_next - &theta).amax();
        theta = theta_next;
        alpha = alpha_next;
        if change <= cfg.outer_tol {
            converged = true;
            break;
        }
    }
    trace.converged = converged;

    // Fused pairs are the exact-zero columns of alpha (the soft threshold
    // produces them); connected components define the clusters.
    let mut uf = UnionFind::new(clients);
    for (idx, &(a, b)) in op.pairs().iter().enumerate() {
        let fused = if cfg.cluster_merge_from_alpha {
            alpha.column(idx).iter().all(|v| *v == 0.0)
        } else {
            theta.column(a) == theta.column(b)
        };
        if fused {
            uf.union(a, b);
        }
    }
    let mut clusters: Vec<Vec<usize>> = Vec::new();
    let mut root_to_cluster = vec![usize::MAX; clients];
    for k in 0..clients {
        let root = uf.find(k);
        if root_to_cluster[root] == usize::MAX {
            root_to_cluster[root] = clusters.len();
            clusters.push(Vec::new());
        }
        clusters[root_to_cluster[root]].push(k);
    }

    // Average columns within each cluster; this enforces exact equality for
    // reporting and leaves selected-out rows at exact zero.
    let mut psi = DMatrix::zeros(surrogate.dim, clusters.len());
    for (m, members) in clusters.iter().enumerate() {
        let mut col = DVector::zeros(surrogate.dim);
        for &k in members {
            col += theta.column(k);
        }
        col /= members.len() as f64;
        psi.set_column(m, &col);
    }

    let solution = ClusterSolution::from_partition(clusters, psi, clients, converged)?;
    Ok((solution, trace))
}
