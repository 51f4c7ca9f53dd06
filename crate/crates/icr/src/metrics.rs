//! Evaluation measures: variable-selection rates, model size, pair-counting
//! cluster agreement, and coefficient error.

use nalgebra::DMatrix;

use crate::model::CoefficientMatrix;

/// True and false positive rates over the covariate rows (the intercept row
/// never counts), plus the model size.
///
/// A row is selected when any of its entries is nonzero. The model size is
/// the total number of distinct nonzero values per row, summed over all
/// rows; exact equality is legitimate because cluster extraction rewrites
/// fused columns to identical values.
pub fn selection_metrics(
    theta_hat: &CoefficientMatrix,
    truth_active: &[usize],
) -> (f64, f64, f64) {
    let p = theta_hat.dim();
    let m = theta_hat.matrix();
    let is_true: Vec<bool> = {
        let mut v = vec![false; p];
        for &j in truth_active {
            v[j] = true;
        }
        v
    };
    let mut true_pos = 0usize;
    let mut false_pos = 0usize;
    for j in 1..p {
        let selected = m.row(j).iter().any(|v| *v != 0.0);
        if selected {
            if is_true[j] {
                true_pos += 1;
            } else {
                false_pos += 1;
            }
        }
    }
    let actives = truth_active.len();
    let inactives = (p - 1).saturating_sub(actives);
    let tpr = if actives == 0 {
        1.0
    } else {
        true_pos as f64 / actives as f64
    };
    let fpr = if inactives == 0 {
        0.0
    } else {
        false_pos as f64 / inactives as f64
    };
    (tpr, fpr, model_size(m))
}

/// Sum over rows of the number of distinct nonzero values in the row.
pub fn model_size(matrix: &DMatrix<f64>) -> f64 {
    let mut total = 0usize;
    for j in 0..matrix.nrows() {
        let mut values: Vec<u64> = matrix
            .row(j)
            .iter()
            .filter(|v| **v != 0.0)
            .map(|v| v.to_bits())
            .collect();
        values.sort_unstable();
        values.dedup();
        total += values.len();
    }
    total as f64
}

fn labels_of(partition: &[Vec<usize>]) -> Vec<usize> {
    let count: usize = partition.iter().map(|c| c.len()).sum();
    let mut labels = vec![usize::MAX; count];
    for (m, members) in partition.iter().enumerate() {
        for &k in members {
            labels[k] = m;
        }
    }
    assert!(
        labels.iter().all(|&l| l != usize::MAX),
        "partition must cover 0..K"
    );
    labels
}

/// Pair-counting agreement between two partitions of the same client set:
/// (together-together + apart-apart) / all pairs. One lone client gives 1.
pub fn rand_index(a: &[Vec<usize>], b: &[Vec<usize>]) -> f64 {
    let la = labels_of(a);
    let lb = labels_of(b);
    assert_eq!(la.len(), lb.len(), "partitions cover different client sets");
    let k = la.len();
    if k < 2 {
        return 1.0;
    }
    let mut agree = 0usize;
    let mut total = 0usize;
    for i in 0..k {
        for j in (i + 1)..k {
            let same_a = la[i] == la[j];
            let same_b = lb[i] == lb[j];
            if same_a == same_b {
                agree += 1;
            }
            total += 1;
        }
    }
    agree as f64 / total as f64
}

fn choose2(n: usize) -> f64 {
    (n * n.saturating_sub(1)) as f64 / 2.0
}

/// Chance-corrected pair agreement (Hubert-Arabie): subtracts the value a
/// random relabeling with the same cluster sizes would score. Identical
/// partitions give 1, independent ones about 0.
pub fn adjusted_rand_index(a: &[Vec<usize>], b: &[Vec<usize>]) -> f64 {
    let la = labels_of(a);
    let lb = labels_of(b);
    assert_eq!(la.len(), lb.len(), "partitions cover different client sets");
    let k = la.len();
    if k < 2 {
        return 1.0;
    }

    let mut contingency = vec![vec![0usize; b.len()]; a.len()];
    for i in 0..k {
        contingency[la[i]][lb[i]] += 1;
    }
    let index: f64 = contingency
        .iter()
        .flat_map(|row| row.iter())
        .map(|&n| choose2(n))
        .sum();
    let sum_a: f64 = a.iter().map(|c| choose2(c.len())).sum();
    let sum_b: f64 = b.iter().map(|c| choose2(c.len())).sum();
    let expected = sum_a * sum_b / choose2(k);
    let max_index = 0.5 * (sum_a + sum_b);
    if (max_index - expected).abs() < 1e-15 {
        return 1.0;
    }
    (index - expected) / (max_index - expected)
}

/// Root mean squared coefficient error over the true active rows only:
/// sqrt(sum_{j in A} ||row_j(theta_hat) - row_j(theta_star)||^2 / K).
pub fn rmse(
    theta_hat: &CoefficientMatrix,
    theta_star: &DMatrix<f64>,
    truth_active: &[usize],
) -> f64 {
    let clients = theta_hat.clients() as f64;
    let m = theta_hat.matrix();
    let mut acc = 0.0;
    for &j in truth_active {
        acc += (m.row(j) - theta_star.row(j)).norm_squared();
    }
    (acc / clients).sqrt()
}

/// Replicate-level clustering summary.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClusteringSummary {
    pub m_hat_mean: f64,
    /// Fraction of replicates whose partition equals the truth exactly (as
    /// an unordered set of sets).
    pub per: f64,
    pub ri_mean: f64,
    pub ari_mean: f64,
}

fn canonical(partition: &[Vec<usize>]) -> Vec<Vec<usize>> {
    let mut canon: Vec<Vec<usize>> = partition
        .iter()
        .map(|c| {
            let mut c = c.clone();
            c.sort_unstable();
            c
        })
        .collect();
    canon.sort();
    canon
}

/// Exact equality of partitions, order-insensitively.
pub fn partitions_equal(a: &[Vec<usize>], b: &[Vec<usize>]) -> bool {
    canonical(a) == canonical(b)
}

/// Aggregate the clustering measures of many fitted partitions against one
/// truth.
pub fn clustering_summary(partitions: &[Vec<Vec<usize>>], truth: &[Vec<usize>]) -> ClusteringSummary {
    assert!(!partitions.is_empty(), "no replicates to summarize");
    let r = partitions.len() as f64;
    let mut m_hat = 0.0;
    let mut exact = 0.0;
    let mut ri = 0.0;
    let mut ari = 0.0;
    for partition in partitions {
        m_hat += partition.len() as f64;
        if partitions_equal(partition, truth) {
            exact += 1.0;
        }
        ri += rand_index(partition, truth);
        ari += adjusted_rand_index(partition, truth);
    }
    ClusteringSummary {
        m_hat_mean: m_hat / r,
        per: exact / r,
        ri_mean: ri / r,
        ari_mean: ari / r,
    }
}
