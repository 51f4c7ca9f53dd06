//! Simulation designs and the benchmark harness: generate clustered
//! multi-client regression data, run the aggregator against the
//! client-local and cluster-oracle baselines, and summarize the metrics
//! over replicates.
//!
//! Four designs: two-cluster logistic (1), four-cluster logistic (2), and
//! their linear-regression counterparts (3, 4). Covariates are first-order
//! autoregressive Gaussians; the coefficient patterns put eight signal
//! variables at +/-0.4 (two clusters) or +/-0.6 (four clusters), with the
//! intercept at zero.

use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{IcrError, Result};
use crate::local::{cross_validated_lambda, debias, fit_lasso, make_packet, LassoConfig};
use crate::loss::{sigmoid, LocalDataset};
use crate::metrics::{
    adjusted_rand_index, partitions_equal, rand_index, rmse, selection_metrics,
};
use crate::model::{
    ClusterSolution, CoefficientMatrix, LossKind, PenaltySpec, SummaryPacket,
};
use crate::solver::SolverConfig;
use crate::tuning::{default_lambda1_grid, default_lambda2_grid, grid_search};

/// One simulation scenario. `p` counts the intercept, so there are p - 1
/// covariates of which the first eight carry signal.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ScenarioSpec {
    /// Design number, 1 through 4.
    pub example_id: u8,
    /// Client count; must be divisible by the design's cluster count.
    pub k: usize,
    /// Per-client sample size (all clients equal).
    pub n: usize,
    /// Coefficient dimension including the intercept.
    pub p: usize,
    /// Noise standard deviation (linear designs only).
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    /// Autoregressive covariate correlation.
    #[serde(default = "default_rho")]
    pub rho: f64,
    pub seed: u64,
}

fn default_sigma() -> f64 {
    1.0
}

fn default_rho() -> f64 {
    0.5
}

impl ScenarioSpec {
    pub fn cluster_count(&self) -> usize {
        match self.example_id {
            1 | 3 => 2,
            _ => 4,
        }
    }

    pub fn loss_kind(&self) -> LossKind {
        match self.example_id {
            1 | 2 => LossKind::Logistic,
            _ => LossKind::Squared,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=4).contains(&self.example_id) {
            return Err(IcrError::InvalidArgument(format!(
                "example_id must be 1..4, got {}",
                self.example_id
            )));
        }
        let m = self.cluster_count();
        if self.k == 0 || self.k % m != 0 {
            return Err(IcrError::InvalidArgument(format!(
                "client count {} must be a positive multiple of {m}",
                self.k
            )));
        }
        if self.p < 9 {
            return Err(IcrError::InvalidArgument(
                "dimension must cover the intercept plus eight signal variables".into(),
            ));
        }
        if self.n == 0 {
            return Err(IcrError::InvalidArgument("sample size must be positive".into()));
        }
        if !(self.rho.abs() < 1.0) {
            return Err(IcrError::InvalidArgument(format!(
                "autoregressive correlation must satisfy |rho| < 1, got {}",
                self.rho
            )));
        }
        if matches!(self.example_id, 3 | 4) && !(self.sigma > 0.0) {
            return Err(IcrError::InvalidArgument(
                "noise level must be positive for the linear designs".into(),
            ));
        }
        Ok(())
    }
}

/// True cluster coefficients (p x M) and the client partition in
/// consecutive equal blocks.
pub fn truth(spec: &ScenarioSpec) -> Result<(DMatrix<f64>, Vec<Vec<usize>>)> {
    spec.validate()?;
    let m = spec.cluster_count();
    let mut psi = DMatrix::zeros(spec.p, m);
    match spec.example_id {
        1 | 3 => {
            for j in 1..=8 {
                psi[(j, 0)] = 0.4;
                psi[(j, 1)] = -0.4;
            }
        }
        _ => {
            // Four sign patterns over the eight signal variables, in blocks
            // of 4, 2, 2, 4.
            let signs: [[f64; 8]; 4] = [
                [1.0, 1.0, 1.0, 1.0, -1.0, -1.0, -1.0, -1.0],
                [1.0, 1.0, -1.0, -1.0, 1.0, 1.0, -1.0, -1.0],
                [-1.0, -1.0, 1.0, 1.0, -1.0, -1.0, 1.0, 1.0],
                [-1.0, -1.0, -1.0, -1.0, 1.0, 1.0, 1.0, 1.0],
            ];
            for (cluster, pattern) in signs.iter().enumerate() {
                for (offset, sign) in pattern.iter().enumerate() {
                    psi[(1 + offset, cluster)] = 0.6 * sign;
                }
            }
        }
    }
    let block = spec.k / m;
    let partition = (0..m)
        .map(|c| (c * block..(c + 1) * block).collect())
        .collect();
    Ok((psi, partition))
}

/// Indices of the signal rows (covariates only; the intercept is excluded).
pub fn truth_active() -> Vec<usize> {
    (1..=8).collect()
}

/// The true p x K client-level coefficient matrix.
pub fn client_coefficients(spec: &ScenarioSpec) -> Result<DMatrix<f64>> {
    let (psi, partition) = truth(spec)?;
    let mut theta = DMatrix::zeros(spec.p, spec.k);
    for (cluster, members) in partition.iter().enumerate() {
        for &k in members {
            theta.set_column(k, &psi.column(cluster));
        }
    }
    Ok(theta)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Replicate seeds are derived, not sequential, so replicate streams never
/// collide with each other or with the base scenario.
pub fn replicate_seed(base: u64, replicate: usize) -> u64 {
    splitmix64(base ^ splitmix64(replicate as u64 + 1))
}

/// Generate the K client datasets of one replicate. Client k draws from its
/// own counter-based stream, so generation is reproducible independent of
/// scheduling.
pub fn generate(spec: &ScenarioSpec) -> Result<Vec<LocalDataset>> {
    spec.validate()?;
    let theta_star = client_coefficients(spec)?;
    let kind = spec.loss_kind();
    let scale = (1.0 - spec.rho * spec.rho).sqrt();
    (0..spec.k)
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(k as u64 + 1);
            let mut x = DMatrix::zeros(spec.n, spec.p);
            let mut y = DVector::zeros(spec.n);
            let beta = theta_star.column(k);
            for i in 0..spec.n {
                x[(i, 0)] = 1.0;
                let mut prev: f64 = rng.sample(StandardNormal);
                if spec.p > 1 {
                    x[(i, 1)] = prev;
                }
                for j in 2..spec.p {
                    let eps: f64 = rng.sample(StandardNormal);
                    prev = spec.rho * prev + scale * eps;
                    x[(i, j)] = prev;
                }
                let a = x.row(i).transpose().dot(&beta);
                y[i] = match kind {
                    LossKind::Logistic => f64::from(rng.random::<f64>() < sigmoid(a)),
                    LossKind::Squared => {
                        let eps: f64 = rng.sample(StandardNormal);
                        a + spec.sigma * eps
                    }
                };
            }
            LocalDataset::new(x, y, kind)
        })
        .collect()
}

/// Client-local baseline: each client fits its own cross-validated debiased
/// lasso, hard-thresholded at 1e-8, with no sharing across clients.
pub fn local_baseline(datasets: &[LocalDataset], cfg: &LassoConfig) -> Result<CoefficientMatrix> {
    let p = datasets
        .first()
        .map(|d| d.dim())
        .ok_or_else(|| IcrError::InvalidArgument("no datasets".into()))?;
    let mut theta = DMatrix::zeros(p, datasets.len());
    for (k, dataset) in datasets.iter().enumerate() {
        let working;
        let data = if cfg.standardize {
            working = LocalDataset::new(
                crate::local::standardize_columns(dataset.design()),
                dataset.response().clone(),
                dataset.loss_kind(),
            )?;
            &working
        } else {
            dataset
        };
        let lambda = cross_validated_lambda(data, cfg)?;
        let fit = fit_lasso(data, lambda, cfg)?;
        let mut debiased = debias(data, &fit.theta, cfg)?;
        for v in debiased.iter_mut() {
            if v.abs() < 1e-8 {
                *v = 0.0;
            }
        }
        theta.set_column(k, &debiased);
    }
    CoefficientMatrix::new(theta)
}

/// Infeasible benchmark that knows the true partition and active set: per
/// cluster, the aggregated quadratic restricted to the active rows (plus
/// intercept), zeros elsewhere.
pub fn oracle_baseline(
    packets: &[SummaryPacket],
    truth_partition: &[Vec<usize>],
    truth_active: &[usize],
) -> Result<ClusterSolution> {
    let p = crate::model::check_consistent_dim(packets)?;
    let mut rows = vec![0usize];
    rows.extend(truth_active.iter().copied().filter(|&j| j != 0));
    rows.sort_unstable();
    rows.dedup();

    let mut psi = DMatrix::zeros(p, truth_partition.len());
    for (m, members) in truth_partition.iter().enumerate() {
        let q = rows.len();
        let mut v = DMatrix::zeros(q, q);
        let mut zeta = DVector::zeros(q);
        for &k in members {
            let packet = packets
                .get(k)
                .ok_or_else(|| IcrError::InvalidArgument(format!("client {k} out of range")))?;
            let w = packet.n as f64;
            let full_zeta = packet.zeta();
            for (a, &ja) in rows.iter().enumerate() {
                zeta[a] += w * full_zeta[ja];
                for (b, &jb) in rows.iter().enumerate() {
                    v[(a, b)] += w * packet.hessian_tilde[(ja, jb)];
                }
            }
        }
        let solution = nalgebra::Cholesky::new(v)
            .ok_or_else(|| IcrError::Numerical(format!("singular aggregated block in cluster {m}")))?
            .solve(&zeta);
        for (a, &ja) in rows.iter().enumerate() {
            psi[(ja, m)] = solution[a];
        }
    }
    ClusterSolution::from_partition(truth_partition.to_vec(), psi, packets.len(), true)
}

/// Benchmarked estimators.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Icr,
    Local,
    Oracle,
}

impl Method {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "icr" => Ok(Method::Icr),
            "local" => Ok(Method::Local),
            "oracle" => Ok(Method::Oracle),
            other => Err(IcrError::InvalidArgument(format!(
                "unknown method '{other}' (expected icr, local, or oracle)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Method::Icr => "ICR",
            Method::Local => "Local",
            Method::Oracle => "Oracle",
        }
    }
}

/// Everything the benchmark needs besides the scenario itself.
#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub methods: Vec<Method>,
    pub replicates: usize,
    pub lasso: LassoConfig,
    pub solver: SolverConfig,
    pub penalty_base: PenaltySpec,
    /// Tuning grids; empty means data-driven defaults per replicate.
    pub lambda1_grid: Vec<f64>,
    pub lambda2_grid: Vec<f64>,
}

impl BenchConfig {
    pub fn new(methods: Vec<Method>, replicates: usize) -> Result<Self> {
        Ok(Self {
            methods,
            replicates,
            lasso: LassoConfig::default(),
            solver: SolverConfig::default(),
            penalty_base: PenaltySpec::mcp(0.0, 0.0)?,
            lambda1_grid: Vec::new(),
            lambda2_grid: Vec::new(),
        })
    }
}

/// Raw per-replicate measurements for one method.
#[derive(Debug, Clone, Copy)]
pub struct ReplicateMetrics {
    pub tpr: f64,
    pub fpr: f64,
    pub ms: f64,
    pub m_hat: f64,
    pub exact: bool,
    pub ri: f64,
    pub ari: f64,
    pub rmse: f64,
}

/// Mean/sd summary of one method over all replicates, in the order
/// TPR, FPR, MS, M_hat, Per, RI, ARI, RMSE.
#[derive(Debug, Clone)]
pub struct MethodSummary {
    pub method: Method,
    pub tpr: (f64, f64),
    pub fpr: (f64, f64),
    pub ms: (f64, f64),
    pub m_hat: (f64, f64),
    pub per: f64,
    pub ri: (f64, f64),
    pub ari: (f64, f64),
    pub rmse: (f64, f64),
}

/// Benchmark output: one summary row per method plus the raw per-replicate
/// records (replicate-major, method order as configured).
#[derive(Debug, Clone)]
pub struct BenchTable {
    pub summaries: Vec<MethodSummary>,
    pub replicates: Vec<Vec<(Method, ReplicateMetrics)>>,
}

fn evaluate_partitioned(
    theta_hat: &CoefficientMatrix,
    partition: &[Vec<usize>],
    theta_star: &DMatrix<f64>,
    truth_partition: &[Vec<usize>],
    active: &[usize],
) -> ReplicateMetrics {
    let (tpr, fpr, ms) = selection_metrics(theta_hat, active);
    ReplicateMetrics {
        tpr,
        fpr,
        ms,
        m_hat: partition.len() as f64,
        exact: partitions_equal(partition, truth_partition),
        ri: rand_index(partition, truth_partition),
        ari: adjusted_rand_index(partition, truth_partition),
        rmse: rmse(theta_hat, theta_star, active),
    }
}

/// Run one replicate of the configured methods and return their metrics.
pub fn run_replicate(
    spec: &ScenarioSpec,
    replicate: usize,
    cfg: &BenchConfig,
) -> Result<Vec<(Method, ReplicateMetrics)>> {
    let rep_spec = ScenarioSpec {
        seed: replicate_seed(spec.seed, replicate),
        ..*spec
    };
    let datasets = generate(&rep_spec)?;
    let (_, truth_partition) = truth(spec)?;
    let active = truth_active();
    let theta_star = client_coefficients(spec)?;

    let needs_packets = cfg
        .methods
        .iter()
        .any(|m| matches!(m, Method::Icr | Method::Oracle));
    let packets: Vec<SummaryPacket> = if needs_packets {
        datasets
            .iter()
            .enumerate()
            .map(|(k, data)| make_packet(format!("client{k}"), data, &cfg.lasso))
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };

    let mut out = Vec::with_capacity(cfg.methods.len());
    for &method in &cfg.methods {
        let metrics = match method {
            Method::Icr => {
                let lambda1_grid = if cfg.lambda1_grid.is_empty() {
                    default_lambda1_grid(&packets)?
                } else {
                    cfg.lambda1_grid.clone()
                };
                let lambda2_grid = if cfg.lambda2_grid.is_empty() {
                    default_lambda2_grid(&packets)?
                } else {
                    cfg.lambda2_grid.clone()
                };
                let result = grid_search(
                    &packets,
                    &lambda1_grid,
                    &lambda2_grid,
                    &cfg.penalty_base,
                    &cfg.solver,
                )?;
                evaluate_partitioned(
                    &result.best.theta_hat,
                    &result.best.partition,
                    &theta_star,
                    &truth_partition,
                    &active,
                )
            }
            Method::Local => {
                let theta = local_baseline(&datasets, &cfg.lasso)?;
                let singletons: Vec<Vec<usize>> = (0..spec.k).map(|k| vec![k]).collect();
                evaluate_partitioned(&theta, &singletons, &theta_star, &truth_partition, &active)
            }
            Method::Oracle => {
                let solution = oracle_baseline(&packets, &truth_partition, &active)?;
                evaluate_partitioned(
                    &solution.theta_hat,
                    &solution.partition,
                    &theta_star,
                    &truth_partition,
                    &active,
                )
            }
        };
        out.push((method, metrics));
    }
    Ok(out)
}

fn mean_sd(values: &[f64]) -> (f64, f64) {
    let r = values.len() as f64;
    let mean = values.iter().sum::<f64>() / r;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (r - 1.0);
    (mean, var.sqrt())
}

/// Run all replicates (in parallel) and aggregate per-method summaries. The
/// output is a deterministic function of the scenario and configuration,
/// independent of thread count.
pub fn run_replicates(spec: &ScenarioSpec, cfg: &BenchConfig) -> Result<BenchTable> {
    spec.validate()?;
    if cfg.replicates == 0 {
        return Err(IcrError::InvalidArgument("need at least one replicate".into()));
    }
    let replicates: Vec<Vec<(Method, ReplicateMetrics)>> = (0..cfg.replicates)
        .into_par_iter()
        .map(|rep| run_replicate(spec, rep, cfg))
        .collect::<Result<_>>()?;

    let mut summaries = Vec::with_capacity(cfg.methods.len());
    for (mi, &method) in cfg.methods.iter().enumerate() {
        let series = |f: &dyn Fn(&ReplicateMetrics) -> f64| -> Vec<f64> {
            replicates.iter().map(|row| f(&row[mi].1)).collect()
        };
        let exact = replicates
            .iter()
            .filter(|row| row[mi].1.exact)
            .count() as f64
            / cfg.replicates as f64;
        summaries.push(MethodSummary {
            method,
            tpr: mean_sd(&series(&|m| m.tpr)),
            fpr: mean_sd(&series(&|m| m.fpr)),
            ms: mean_sd(&series(&|m| m.ms)),
            m_hat: mean_sd(&series(&|m| m.m_hat)),
            per: exact,
            ri: mean_sd(&series(&|m| m.ri)),
            ari: mean_sd(&series(&|m| m.ari)),
            rmse: mean_sd(&series(&|m| m.rmse)),
        });
    }
    Ok(BenchTable {
        summaries,
        replicates,
    })
}
