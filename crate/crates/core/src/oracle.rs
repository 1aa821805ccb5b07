//! Independent reference implementations used to cross-check the production
//! paths. Each oracle takes a deliberately different route than the code it
//! checks: triple loops, exhaustive enumeration, pair counting, and the
//! Gram-matrix route for PCA (which reuses only the separately tested
//! Jacobi kernel, on a different matrix).

use crate::error::Result;
use crate::matrix::Matrix;

/// Textbook three-loop product, accumulating in (i, j, k) order.
pub fn matmul_triple_loop(a: &Matrix, b: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(a.rows(), b.cols());
    for i in 0..a.rows() {
        for j in 0..b.cols() {
            let mut acc = 0.0;
            for k in 0..a.cols() {
                acc += a.get(i, k) * b.get(k, j);
            }
            out.set(i, j, acc);
        }
    }
    out
}

/// Standard hard-label symmetric contrastive loss: cross-entropy of the
/// temperature-scaled row and column softmaxes against the diagonal.
pub fn hard_label_clip_loss(sim: &Matrix, tau: f64) -> f64 {
    let n = sim.rows();
    let mut row_loss = 0.0;
    for i in 0..n {
        let logits: Vec<f64> = (0..n).map(|j| sim.get(i, j) / tau).collect();
        let max = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + logits.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        row_loss -= logits[i] - lse;
    }
    let mut col_loss = 0.0;
    for j in 0..n {
        let logits: Vec<f64> = (0..n).map(|i| sim.get(i, j) / tau).collect();
        let max = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + logits.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        col_loss -= logits[j] - lse;
    }
    0.5 * (row_loss + col_loss) / n as f64
}

fn dense_ids(values: &[usize]) -> Vec<usize> {
    let mut seen: Vec<usize> = Vec::new();
    values
        .iter()
        .map(|&v| {
            if let Some(pos) = seen.iter().position(|&s| s == v) {
                pos
            } else {
                seen.push(v);
                seen.len() - 1
            }
        })
        .collect()
}

/// Exhaustive-permutation clustering accuracy: best matched fraction over
/// every injective assignment of clusters to (padded) labels.
pub fn accuracy_by_permutation(assignments: &[usize], gold: &[usize]) -> f64 {
    let a = dense_ids(assignments);
    let g = dense_ids(gold);
    let n_clusters = a.iter().max().map_or(0, |&m| m + 1);
    let n_labels = g.iter().max().map_or(0, |&m| m + 1);
    let size = n_clusters.max(n_labels);

    let mut counts = vec![vec![0usize; size]; size];
    for (&ai, &gi) in a.iter().zip(&g) {
        counts[ai][gi] += 1;
    }

    fn permute(
        counts: &[Vec<usize>],
        cluster: usize,
        used: &mut [bool],
        acc: usize,
        best: &mut usize,
    ) {
        if cluster == counts.len() {
            *best = (*best).max(acc);
            return;
        }
        for label in 0..counts.len() {
            if !used[label] {
                used[label] = true;
                permute(counts, cluster + 1, used, acc + counts[cluster][label], best);
                used[label] = false;
            }
        }
    }

    let mut best = 0;
    let mut used = vec![false; size];
    permute(&counts, 0, &mut used, 0, &mut best);
    best as f64 / assignments.len() as f64
}

/// Adjusted Rand index by brute-force pair counting.
pub fn ari_by_pair_counting(assignments: &[usize], gold: &[usize]) -> f64 {
    let n = assignments.len();
    let mut s: i64 = 0; // same in both
    let mut a: i64 = 0; // same cluster
    let mut b: i64 = 0; // same label
    for i in 0..n {
        for j in i + 1..n {
            let same_a = assignments[i] == assignments[j];
            let same_g = gold[i] == gold[j];
            if same_a {
                a += 1;
            }
            if same_g {
                b += 1;
            }
            if same_a && same_g {
                s += 1;
            }
        }
    }
    let total = (n as i64) * (n as i64 - 1) / 2;
    let num = 2 * (i128::from(total) * i128::from(s) - i128::from(a) * i128::from(b));
    let den =
        i128::from(total) * (i128::from(a) + i128::from(b)) - 2 * i128::from(a) * i128::from(b);
    if den == 0 {
        return 1.0;
    }
    num as f64 / den as f64
}

/// Every partition of `n` points, as restricted-growth strings.
pub fn enumerate_partitions(n: usize) -> Vec<Vec<usize>> {
    fn extend(prefix: &mut Vec<usize>, max_used: usize, n: usize, out: &mut Vec<Vec<usize>>) {
        if prefix.len() == n {
            out.push(prefix.clone());
            return;
        }
        for next in 0..=max_used + 1 {
            prefix.push(next);
            extend(prefix, max_used.max(next), n, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    if n == 0 {
        return out;
    }
    let mut prefix = vec![0usize];
    extend(&mut prefix, 0, n, &mut out);
    out
}

/// Principal directions via the Gram-matrix route: eigenvectors of the
/// N x N centered Gram matrix mapped back through the data. Returns d x k
/// unit columns spanning the same subspace as the covariance route.
pub fn pca_components_via_gram(x: &Matrix, k: usize) -> Result<Matrix> {
    let (n, d) = (x.rows(), x.cols());
    let mean: Vec<f64> = x.col_sums().into_iter().map(|s| s / n as f64).collect();
    let mut centered = x.clone();
    for i in 0..n {
        for (v, m) in centered.row_mut(i).iter_mut().zip(&mean) {
            *v -= m;
        }
    }
    let mut gram = centered.matmul(&centered.transpose())?;
    gram.scale(1.0 / (n as f64 - 1.0));
    let (_vals, vecs) = crate::eval::pca::symmetric_eigen(&gram)?;

    let mut components = Matrix::zeros(d, k);
    for j in 0..k {
        let u = Matrix::from_vec(n, 1, (0..n).map(|i| vecs.get(i, j)).collect())?;
        let dir = centered.transpose().matmul(&u)?;
        let norm: f64 = dir.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        for i in 0..d {
            components.set(i, j, dir.get(i, 0) / norm.max(1e-300));
        }
    }
    Ok(components)
}

/// Perceptron convergence check: returns true when the data is linearly
/// separable (no updates over a full pass within the epoch budget).
pub fn perceptron_separable(embeddings: &Matrix, labels: &[usize], max_epochs: usize) -> bool {
    let d = embeddings.cols();
    let mut w = vec![0.0_f64; d + 1];
    for _ in 0..max_epochs {
        let mut updates = 0;
        for i in 0..embeddings.rows() {
            let y = if labels[i] == 0 { -1.0 } else { 1.0 };
            let act: f64 = embeddings
                .row(i)
                .iter()
                .zip(&w[..d])
                .map(|(x, wi)| x * wi)
                .sum::<f64>()
                + w[d];
            if y * act <= 0.0 {
                for (wi, x) in w[..d].iter_mut().zip(embeddings.row(i)) {
                    *wi += y * x;
                }
                w[d] += y;
                updates += 1;
            }
        }
        if updates == 0 {
            return true;
        }
    }
    false
}
