//! Partition-agreement metrics: accuracy under optimal cluster-to-label
//! matching (Hungarian algorithm), normalized mutual information with sqrt
//! normalization, the adjusted Rand index, and binary F1.

use std::collections::HashMap;

use crate::error::{Error, Result};

/// Min-cost assignment over a square cost matrix (shortest augmenting path
/// with potentials, O(n^3)). Returns the column chosen for each row.
fn hungarian_min(cost: &[Vec<i64>]) -> Vec<usize> {
    let n = cost.len();
    let mut u = vec![0i64; n + 1];
    let mut v = vec![0i64; n + 1];
    let mut p = vec![0usize; n + 1]; // row assigned to column j
    let mut way = vec![0usize; n + 1];

    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![i64::MAX; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = i64::MAX;
            let mut j1 = 0usize;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![0usize; n];
    for j in 1..=n {
        if p[j] > 0 {
            row_to_col[p[j] - 1] = j - 1;
        }
    }
    row_to_col
}

/// Contingency counts between two partitions, with cluster/label sides
/// remapped to dense indices.
struct Contingency {
    counts: Vec<Vec<i64>>,
    row_sums: Vec<i64>,
    col_sums: Vec<i64>,
    n: i64,
}

fn contingency(assignments: &[usize], gold: &[usize]) -> Contingency {
    let mut row_ids: HashMap<usize, usize> = HashMap::new();
    let mut col_ids: HashMap<usize, usize> = HashMap::new();
    for &a in assignments {
        let next = row_ids.len();
        row_ids.entry(a).or_insert(next);
    }
    for &g in gold {
        let next = col_ids.len();
        col_ids.entry(g).or_insert(next);
    }
    let (r, c) = (row_ids.len(), col_ids.len());
    let mut counts = vec![vec![0i64; c]; r];
    for (&a, &g) in assignments.iter().zip(gold) {
        counts[row_ids[&a]][col_ids[&g]] += 1;
    }
    let row_sums: Vec<i64> = counts.iter().map(|row| row.iter().sum()).collect();
    let col_sums: Vec<i64> = (0..c).map(|j| counts.iter().map(|row| row[j]).sum()).collect();
    Contingency {
        counts,
        row_sums,
        col_sums,
        n: assignments.len() as i64,
    }
}

/// Best matched fraction over injective cluster-to-label assignments.
pub fn clustering_accuracy(assignments: &[usize], gold: &[usize]) -> Result<f64> {
    if assignments.len() != gold.len() {
        return Err(Error::Dimension("assignment/label length mismatch".into()));
    }
    if assignments.is_empty() {
        return Err(Error::Parameter("empty partition".into()));
    }
    let t = contingency(assignments, gold);
    let size = t.counts.len().max(t.counts[0].len());
    // Pad to square; minimize negated counts to maximize the matched sum.
    let mut cost = vec![vec![0i64; size]; size];
    for (i, row) in t.counts.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            cost[i][j] = -v;
        }
    }
    let matching = hungarian_min(&cost);
    let mut matched = 0i64;
    for (i, &j) in matching.iter().enumerate() {
        if i < t.counts.len() && j < t.counts[0].len() {
            matched += t.counts[i][j];
        }
    }
    Ok(matched as f64 / t.n as f64)
}

fn entropy(sums: &[i64], n: i64) -> f64 {
    sums.iter()
        .filter(|&&s| s > 0)
        .map(|&s| {
            let p = s as f64 / n as f64;
            -p * p.ln()
        })
        .sum()
}

/// `I(U;V) / sqrt(H(U) H(V))`; 0 when there is no mutual information, 1 when
/// both partitions are the same trivial partition.
pub fn nmi(assignments: &[usize], gold: &[usize]) -> Result<f64> {
    if assignments.len() != gold.len() {
        return Err(Error::Dimension("assignment/label length mismatch".into()));
    }
    if assignments.is_empty() {
        return Err(Error::Parameter("empty partition".into()));
    }
    let t = contingency(assignments, gold);
    if t.row_sums.len() == 1 && t.col_sums.len() == 1 {
        return Ok(1.0);
    }
    let n = t.n as f64;
    let mut mi = 0.0;
    for (i, row) in t.counts.iter().enumerate() {
        for (j, &nij) in row.iter().enumerate() {
            if nij > 0 {
                let pij = nij as f64 / n;
                mi += pij * ((n * nij as f64) / (t.row_sums[i] as f64 * t.col_sums[j] as f64)).ln();
            }
        }
    }
    if mi <= 1e-15 {
        return Ok(0.0);
    }
    let h_u = entropy(&t.row_sums, t.n);
    let h_v = entropy(&t.col_sums, t.n);
    Ok((mi / (h_u * h_v).sqrt()).min(1.0))
}

fn choose2(x: i64) -> i64 {
    x * (x - 1) / 2
}

/// Adjusted Rand index from the contingency table; degenerate cases (both
/// partitions trivial, hence identical) return 1.
pub fn ari(assignments: &[usize], gold: &[usize]) -> Result<f64> {
    if assignments.len() != gold.len() {
        return Err(Error::Dimension("assignment/label length mismatch".into()));
    }
    if assignments.is_empty() {
        return Err(Error::Parameter("empty partition".into()));
    }
    let t = contingency(assignments, gold);
    let s: i64 = t
        .counts
        .iter()
        .flat_map(|row| row.iter().map(|&v| choose2(v)))
        .sum();
    let a: i64 = t.row_sums.iter().map(|&v| choose2(v)).sum();
    let b: i64 = t.col_sums.iter().map(|&v| choose2(v)).sum();
    let total = choose2(t.n);
    // ARI = (S - AB/T) / ((A+B)/2 - AB/T), scaled by 2T to stay integral.
    let num = 2 * (i128::from(total) * i128::from(s) - i128::from(a) * i128::from(b));
    let den = i128::from(total) * (i128::from(a) + i128::from(b))
        - 2 * i128::from(a) * i128::from(b);
    if den == 0 {
        return Ok(1.0);
    }
    Ok(num as f64 / den as f64)
}

/// (accuracy, NMI, ARI) of a clustering against gold labels.
pub fn clustering_metrics(assignments: &[usize], gold: &[usize]) -> Result<(f64, f64, f64)> {
    Ok((
        clustering_accuracy(assignments, gold)?,
        nmi(assignments, gold)?,
        ari(assignments, gold)?,
    ))
}

/// `2PR / (P + R)`, zero when precision and recall are both zero.
pub fn f1_score(predictions: &[bool], gold: &[bool]) -> Result<f64> {
    if predictions.len() != gold.len() {
        return Err(Error::Dimension("prediction/label length mismatch".into()));
    }
    let mut tp = 0.0;
    let mut fp = 0.0;
    let mut fne = 0.0;
    for (&p, &g) in predictions.iter().zip(gold) {
        match (p, g) {
            (true, true) => tp += 1.0,
            (true, false) => fp += 1.0,
            (false, true) => fne += 1.0,
            (false, false) => {}
        }
    }
    let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
    let recall = if tp + fne > 0.0 { tp / (tp + fne) } else { 0.0 };
    if precision + recall == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * precision * recall / (precision + recall))
}
