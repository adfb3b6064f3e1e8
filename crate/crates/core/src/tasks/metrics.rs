//! Evaluation metrics.

use pmp_autodiff::Tensor;

use crate::error::{PmpError, Result};

fn check_permutation(p: &[usize], name: &str) -> Result<()> {
    let mut seen = vec![false; p.len()];
    for &x in p {
        if x >= p.len() || std::mem::replace(&mut seen[x], true) {
            return Err(PmpError::InvalidArgument(format!(
                "{name} is not a permutation of 0..{}",
                p.len()
            )));
        }
    }
    Ok(())
}

/// Kendall rank correlation between two permutations by exhaustive pair
/// enumeration: `(concordant − discordant) / (n(n−1)/2)`.
pub fn kendall_tau(pred: &[usize], truth: &[usize]) -> Result<f64> {
    if pred.len() != truth.len() || pred.len() < 2 {
        return Err(PmpError::InvalidArgument(format!(
            "kendall_tau needs two permutations of equal length ≥ 2, got {} and {}",
            pred.len(),
            truth.len()
        )));
    }
    check_permutation(pred, "prediction")?;
    check_permutation(truth, "truth")?;
    let n = pred.len();
    let mut score: i64 = 0;
    for i in 0..n {
        for j in i + 1..n {
            let a = pred[i] < pred[j];
            let b = truth[i] < truth[j];
            score += if a == b { 1 } else { -1 };
        }
    }
    Ok(score as f64 / (n * (n - 1) / 2) as f64)
}

/// Row argmax with ties going to the lowest index.
pub fn argmax_rows(scores: &Tensor<f64>) -> Vec<usize> {
    (0..scores.rows())
        .map(|r| {
            let row = scores.row(r);
            let mut best = 0;
            for (c, &x) in row.iter().enumerate() {
                if x > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

/// Fraction of `mask` nodes whose argmax score equals the target.
pub fn per_node_accuracy(scores: &Tensor<f64>, targets: &[usize], mask: &[usize]) -> Result<f64> {
    if mask.is_empty() {
        return Err(PmpError::EmptyMask);
    }
    if targets.len() != scores.rows() {
        return Err(PmpError::Shape(format!(
            "{} targets for {} score rows",
            targets.len(),
            scores.rows()
        )));
    }
    let pred = argmax_rows(scores);
    let mut correct = 0usize;
    for &i in mask {
        if i >= pred.len() {
            return Err(PmpError::InvalidArgument(format!(
                "mask node {i} out of range"
            )));
        }
        correct += usize::from(pred[i] == targets[i]);
    }
    Ok(correct as f64 / mask.len() as f64)
}

/// Turns an `n×n` node-by-position score matrix into a permutation by
/// repeatedly taking the highest remaining score (ties to the lowest node,
/// then lowest position).
pub fn greedy_assignment(scores: &Tensor<f64>) -> Result<Vec<usize>> {
    let n = scores.rows();
    if scores.cols() != n {
        return Err(PmpError::Shape(format!(
            "assignment needs a square score matrix, got {:?}",
            scores.shape()
        )));
    }
    let mut cells: Vec<(usize, usize)> = (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).collect();
    cells.sort_by(|&(a, b), &(c, d)| {
        scores
            .get(c, d)
            .total_cmp(&scores.get(a, b))
            .then((a, b).cmp(&(c, d)))
    });
    let mut out = vec![usize::MAX; n];
    let mut used = vec![false; n];
    for (i, j) in cells {
        if out[i] == usize::MAX && !used[j] {
            out[i] = j;
            used[j] = true;
        }
    }
    Ok(out)
}
