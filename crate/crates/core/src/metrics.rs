//! Desk-scale evaluation proxies: negative-mode suppression, exact
//! 2-Wasserstein distance between equal-size point sets, and the vote-based
//! preference score.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Tensor;
use crate::scalar::Scalar;

/// Largest point set accepted by [`w2_exact`].
pub const W2_MAX_POINTS: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub suppression_rate: f64,
    pub mean_neg_mode_distance: f64,
    pub w2_to_target: f64,
    pub n_samples: usize,
}

impl MetricsReport {
    /// Suppression and distance over all `samples`; the Wasserstein term uses
    /// the first `min(n, W2_MAX_POINTS, |target|)` points of each set.
    pub fn compute<T: Scalar>(
        samples: &Tensor<T>,
        neg_center: &[T],
        pos_center: &[T],
        target: &Tensor<T>,
    ) -> Result<Self> {
        let n = samples.rows();
        let suppression_rate = suppression_rate(samples, neg_center, pos_center)?.to_f64_lossy();
        let mut dist = 0.0;
        for i in 0..n {
            dist += euclidean(samples.row(i), neg_center).to_f64_lossy();
        }
        let m = n.min(W2_MAX_POINTS).min(target.rows());
        let head = |t: &Tensor<T>| Tensor::new(vec![m, t.cols()], t.data()[..m * t.cols()].to_vec());
        let w2 = w2_exact(&head(samples)?, &head(target)?)?.to_f64_lossy();
        Ok(Self {
            suppression_rate,
            mean_neg_mode_distance: dist / n as f64,
            w2_to_target: w2,
            n_samples: n,
        })
    }
}

fn euclidean<T: Scalar>(a: &[T], b: &[T]) -> T {
    squared_distance(a, b).sqrt()
}

fn squared_distance<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += (x - y) * (x - y);
    }
    acc
}

/// Fraction of samples strictly closer to `neg_center` than to `pos_center`.
/// Equidistant samples count toward the positive side.
pub fn suppression_rate<T: Scalar>(samples: &Tensor<T>, neg_center: &[T], pos_center: &[T]) -> Result<T> {
    let n = samples.rows();
    if samples.is_empty() || n == 0 {
        return Err(Error::UndefinedMetric("suppression rate of zero samples".into()));
    }
    let d = samples.cols();
    if neg_center.len() != d || pos_center.len() != d {
        return Err(Error::dim(
            "suppression_rate",
            "center dimension differs from samples",
        ));
    }
    if neg_center == pos_center {
        return Err(Error::param("centers", "negative and positive centers coincide"));
    }
    let near_neg = (0..n)
        .filter(|&i| {
            let x = samples.row(i);
            squared_distance(x, neg_center) < squared_distance(x, pos_center)
        })
        .count();
    Ok(T::of(near_neg as f64) / T::of(n as f64))
}

/// Exact 2-Wasserstein distance between two equally weighted point sets of
/// the same size, from an optimal assignment on squared distances.
pub fn w2_exact<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<T> {
    let n = a.rows();
    if a.shape().len() != 2 || b.shape() != a.shape() {
        return Err(Error::dim(
            "w2_exact",
            format!("point sets {:?} and {:?} differ", a.shape(), b.shape()),
        ));
    }
    if n > W2_MAX_POINTS {
        return Err(Error::param(
            "w2_exact",
            format!("{n} points exceeds {W2_MAX_POINTS}"),
        ));
    }
    if n == 0 {
        return Err(Error::UndefinedMetric("W2 of empty point sets".into()));
    }
    if !a.is_finite() || !b.is_finite() {
        return Err(Error::UndefinedMetric("W2 of non-finite points".into()));
    }
    let cost: Vec<T> = (0..n)
        .flat_map(|i| (0..n).map(move |j| (i, j)))
        .map(|(i, j)| squared_distance(a.row(i), b.row(j)))
        .collect();
    let assignment = hungarian(&cost, n);
    let mut total = T::zero();
    for (i, &j) in assignment.iter().enumerate() {
        total += cost[i * n + j];
    }
    Ok((total / T::of(n as f64)).sqrt())
}

/// Minimum-cost perfect matching on a square `n x n` cost matrix (row-major).
/// Returns the column assigned to each row. O(n^3) shortest augmenting paths
/// with row and column potentials.
pub fn hungarian<T: Scalar>(cost: &[T], n: usize) -> Vec<usize> {
    assert_eq!(cost.len(), n * n, "cost matrix must be n x n");
    // 1-based internally; index 0 is the virtual source column
    let inf = T::infinity();
    let mut u = vec![T::zero(); n + 1];
    let mut v = vec![T::zero(); n + 1];
    let mut row_of_col = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for row in 1..=n {
        row_of_col[0] = row;
        let mut col0 = 0;
        let mut min_to = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[col0] = true;
            let i0 = row_of_col[col0];
            let mut delta = inf;
            let mut col1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let reduced = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                if reduced < min_to[j] {
                    min_to[j] = reduced;
                    way[j] = col0;
                }
                if min_to[j] < delta {
                    delta = min_to[j];
                    col1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of_col[j]] += delta;
                    v[j] -= delta;
                } else {
                    min_to[j] -= delta;
                }
            }
            col0 = col1;
            if row_of_col[col0] == 0 {
                break;
            }
        }
        loop {
            let prev = way[col0];
            row_of_col[col0] = row_of_col[prev];
            col0 = prev;
            if col0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        assignment[row_of_col[j] - 1] = j - 1;
    }
    assignment
}

/// `(p - n) / (p + s + n)` as a fraction in `[-1, 1]`.
pub fn preference_score(preferred: u64, non_preferred: u64, similar: u64) -> Result<f64> {
    let total = preferred + non_preferred + similar;
    if total == 0 {
        return Err(Error::UndefinedMetric("preference score without votes".into()));
    }
    Ok((preferred as f64 - non_preferred as f64) / total as f64)
}

/// [`preference_score`] in percent.
pub fn preference_percent(preferred: u64, non_preferred: u64, similar: u64) -> Result<f64> {
    Ok(100.0 * preference_score(preferred, non_preferred, similar)?)
}
