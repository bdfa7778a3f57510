//! Slow, obviously-correct reference computations.
//!
//! Everything here works on plain slices and closures so that it cannot
//! accidentally reuse code from the implementation it is meant to check.
//! Nothing in this crate is tuned for speed.

use std::cmp::Ordering;

/// Outcome of running an oracle against an implementation over many instances.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleReport {
    pub name: String,
    pub instances: usize,
    pub max_error: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl OracleReport {
    pub fn new(name: impl Into<String>, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            instances: 0,
            max_error: 0.0,
            tolerance,
            pass: true,
        }
    }

    /// Folds one instance's error into the report.
    pub fn record(&mut self, error: f64) {
        self.instances += 1;
        if error.is_nan() || error > self.max_error {
            self.max_error = if error.is_nan() { f64::INFINITY } else { error };
        }
        self.pass = self.max_error <= self.tolerance;
    }
}

impl std::fmt::Display for OracleReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "[{}] {}: {} instances, max error {:.3e} (tol {:.1e})",
            if self.pass { "PASS" } else { "FAIL" },
            self.name,
            self.instances,
            self.max_error,
            self.tolerance
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum OracleError {
    NonFinite { coordinate: usize },
    NonPositiveStep,
    SingleClass,
}

impl std::fmt::Display for OracleError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            OracleError::NonFinite { coordinate } => {
                write!(f, "non-finite evaluation while perturbing coordinate {coordinate}")
            }
            OracleError::NonPositiveStep => write!(f, "finite-difference step must be positive"),
            OracleError::SingleClass => write!(f, "labels contain a single class"),
        }
    }
}

impl std::error::Error for OracleError {}

/// Central finite differences of `f` at `x`, one coordinate at a time.
pub fn fd_gradient<F>(mut f: F, x: &[f64], step: f64) -> Result<Vec<f64>, OracleError>
where
    F: FnMut(&[f64]) -> f64,
{
    if step.partial_cmp(&0.0) != Some(Ordering::Greater) {
        return Err(OracleError::NonPositiveStep);
    }
    let mut point = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = point[i];
        point[i] = orig + step;
        let up = f(&point);
        point[i] = orig - step;
        let down = f(&point);
        point[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(OracleError::NonFinite { coordinate: i });
        }
        grad.push((up - down) / (2.0 * step));
    }
    Ok(grad)
}

/// Like [`fd_gradient`], but `f` also reports a fingerprint of its
/// piecewise-linear branch (for example, the sign pattern of every relu
/// input). Coordinates whose `±step` evaluations land on a different branch
/// than the unperturbed point straddle a kink and come back as `None`.
pub fn fd_gradient_smooth<F, P>(mut f: F, x: &[f64], step: f64) -> Result<Vec<Option<f64>>, OracleError>
where
    F: FnMut(&[f64]) -> (f64, P),
    P: PartialEq,
{
    if step.partial_cmp(&0.0) != Some(Ordering::Greater) {
        return Err(OracleError::NonPositiveStep);
    }
    let mut point = x.to_vec();
    let (_, base) = f(&point);
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = point[i];
        point[i] = orig + step;
        let (up, up_branch) = f(&point);
        point[i] = orig - step;
        let (down, down_branch) = f(&point);
        point[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(OracleError::NonFinite { coordinate: i });
        }
        if up_branch != base || down_branch != base {
            grad.push(None);
        } else {
            grad.push(Some((up - down) / (2.0 * step)));
        }
    }
    Ok(grad)
}

/// Indices of the `k` largest values. Ties go to the smaller index.
/// The result is sorted by index.
pub fn brute_topk(values: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    // Plain insertion sort: descending by value, ascending by index on ties.
    for i in 1..order.len() {
        let mut j = i;
        while j > 0 {
            let (a, b) = (order[j - 1], order[j]);
            let before = values[b] > values[a] || (values[b] == values[a] && b < a);
            if !before {
                break;
            }
            order.swap(j - 1, j);
            j -= 1;
        }
    }
    let mut kept: Vec<usize> = order.into_iter().take(k).collect();
    kept.sort_unstable();
    kept
}

/// Fraction of (positive, negative) pairs ranked correctly, ties counting ½.
pub fn pairwise_auc(scores: &[f64], labels: &[bool]) -> Result<f64, OracleError> {
    assert_eq!(scores.len(), labels.len());
    let mut wins = 0.0;
    let mut pairs = 0usize;
    for (i, &si) in scores.iter().enumerate() {
        if !labels[i] {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] {
                continue;
            }
            pairs += 1;
            if si > sj {
                wins += 1.0;
            } else if si == sj {
                wins += 0.5;
            }
        }
    }
    if pairs == 0 {
        return Err(OracleError::SingleClass);
    }
    Ok(wins / pairs as f64)
}

/// Number of triangles in an undirected simple graph given as an edge list.
/// Checks every node triple.
pub fn count_triangles(n: usize, edges: &[(usize, usize)]) -> usize {
    let mut adj = vec![vec![false; n]; n];
    for &(i, j) in edges {
        adj[i][j] = true;
        adj[j][i] = true;
    }
    let mut count = 0;
    for a in 0..n {
        for b in (a + 1)..n {
            if !adj[a][b] {
                continue;
            }
            for c in (b + 1)..n {
                if adj[a][c] && adj[b][c] {
                    count += 1;
                }
            }
        }
    }
    count
}

/// Row-major dense product, written as the textbook triple loop.
pub fn naive_matmul(a: &[f64], a_rows: usize, a_cols: usize, b: &[f64], b_cols: usize) -> Vec<f64> {
    assert_eq!(a.len(), a_rows * a_cols);
    assert_eq!(b.len(), a_cols * b_cols);
    let mut out = vec![0.0; a_rows * b_cols];
    for i in 0..a_rows {
        for j in 0..b_cols {
            let mut acc = 0.0;
            for k in 0..a_cols {
                acc += a[i * a_cols + k] * b[k * b_cols + j];
            }
            out[i * b_cols + j] = acc;
        }
    }
    out
}

/// Mean and biased variance of each column of a row-major matrix.
pub fn column_moments(data: &[f64], rows: usize, cols: usize) -> Vec<(f64, f64)> {
    (0..cols)
        .map(|c| {
            let mean = (0..rows).map(|r| data[r * cols + c]).sum::<f64>() / rows as f64;
            let var = (0..rows)
                .map(|r| (data[r * cols + c] - mean).powi(2))
                .sum::<f64>()
                / rows as f64;
            (mean, var)
        })
        .collect()
}

/// Binary cross-entropy of a probability against a (possibly soft) target,
/// evaluated directly from the definition.
pub fn bce_from_probability(p: f64, target: f64) -> f64 {
    -(target * p.ln() + (1.0 - target) * (1.0 - p).ln())
}

/// `max |a - b| / max(|a|, |b|, floor)` over paired entries.
pub fn max_relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fd_of_linear_function_is_exact() {
        let g = fd_gradient(|x| 3.0 * x[0] - 2.0 * x[1], &[0.3, -0.7], 1e-3).unwrap();
        assert!((g[0] - 3.0).abs() < 1e-12);
        assert!((g[1] + 2.0).abs() < 1e-12);
    }

    #[test]
    fn fd_of_quadratic_has_second_order_error() {
        // Central differences are exact on quadratics up to rounding.
        let g = fd_gradient(|x| x[0] * x[0], &[1.5], 1e-2).unwrap();
        assert!((g[0] - 3.0).abs() < 1e-10);
        let g = fd_gradient(|x| x[0].powi(3), &[1.0], 1e-2).unwrap();
        // error = step^2 for x^3
        assert!(((g[0] - 3.0) - 1e-4).abs() < 1e-9);
    }

    #[test]
    fn fd_rejects_bad_step() {
        assert_eq!(fd_gradient(|x| x[0], &[0.0], 0.0), Err(OracleError::NonPositiveStep));
    }

    #[test]
    fn smooth_fd_flags_kinks() {
        let relu = |x: &[f64]| (x[0].max(0.0), x[0] > 0.0);
        let g = fd_gradient_smooth(relu, &[1e-7], 1e-5).unwrap();
        assert_eq!(g, vec![None]);
        let g = fd_gradient_smooth(relu, &[0.5], 1e-5).unwrap();
        assert!((g[0].unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn topk_edge_cases() {
        assert!(brute_topk(&[1.0, 2.0], 0).is_empty());
        assert_eq!(brute_topk(&[1.0, 2.0], 5), vec![0, 1]);
        assert_eq!(brute_topk(&[0.5, 0.9, 0.5, 0.3], 2), vec![0, 1]);
        assert_eq!(brute_topk(&[0.5, 0.9, 0.5, 0.3], 3), vec![0, 1, 2]);
    }

    #[test]
    fn pairwise_auc_examples() {
        assert_eq!(pairwise_auc(&[0.9, 0.1], &[true, false]).unwrap(), 1.0);
        assert_eq!(pairwise_auc(&[0.3, 0.3, 0.3], &[true, false, true]).unwrap(), 0.5);
        let auc = pairwise_auc(&[0.1, 0.4, 0.5, 0.8], &[false, true, false, true]).unwrap();
        assert_eq!(auc, 0.75);
        assert_eq!(pairwise_auc(&[0.1], &[true]), Err(OracleError::SingleClass));
    }

    #[test]
    fn triangle_counts() {
        assert_eq!(count_triangles(3, &[(0, 1), (1, 2), (0, 2)]), 1);
        assert_eq!(count_triangles(4, &[(0, 1), (1, 2), (2, 3), (3, 0)]), 0);
        let k4 = [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)];
        assert_eq!(count_triangles(4, &k4), 4);
    }

    #[test]
    fn report_tracks_worst_instance() {
        let mut r = OracleReport::new("x", 1e-3);
        r.record(1e-5);
        r.record(2e-4);
        assert!(r.pass);
        r.record(1.0);
        assert!(!r.pass);
        assert_eq!(r.instances, 3);
        r.record(f64::NAN);
        assert_eq!(r.max_error, f64::INFINITY);
    }
}
