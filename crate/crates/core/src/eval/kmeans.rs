//! Lloyd's k-means with k-means++ seeding.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::exec::{self, ExecMode};
use crate::matrix::Matrix;

#[derive(Debug, Clone)]
pub struct ClusteringResult {
    pub assignments: Vec<usize>,
    pub k: usize,
    pub centroids: Matrix,
    pub inertia: f64,
}

pub const DEFAULT_MAX_ITER: usize = 300;
pub const DEFAULT_TOL: f64 = 1e-6;

fn dist_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .fold(0.0, |acc, (x, y)| acc + (x - y) * (x - y))
}

/// Nearest centroid, ties to the lowest index.
fn assign_point(point: &[f64], centroids: &Matrix) -> (usize, f64) {
    let mut best = 0;
    let mut best_d = dist_sq(point, centroids.row(0));
    for c in 1..centroids.rows() {
        let d = dist_sq(point, centroids.row(c));
        if d < best_d {
            best_d = d;
            best = c;
        }
    }
    (best, best_d)
}

fn kmeans_pp_init(x: &Matrix, k: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let n = x.rows();
    let mut centroids = Matrix::zeros(k, x.cols());
    let first = rng.random_range(0..n);
    centroids.row_mut(0).copy_from_slice(x.row(first));

    let mut dist: Vec<f64> = (0..n).map(|i| dist_sq(x.row(i), x.row(first))).collect();
    for c in 1..k {
        let total: f64 = dist.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &d) in dist.iter().enumerate() {
                target -= d;
                if target <= 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            // All remaining points coincide with a centroid; fall back to a
            // uniform draw.
            rng.random_range(0..n)
        };
        centroids.row_mut(c).copy_from_slice(x.row(pick));
        for (i, d) in dist.iter_mut().enumerate() {
            *d = d.min(dist_sq(x.row(i), x.row(pick)));
        }
    }
    centroids
}

/// k-means++ initialization from the seed, then Lloyd iterations until the
/// largest centroid shift drops below `tol` or `max_iter` is hit. Empty
/// clusters are re-seeded with the point farthest from its centroid.
pub fn kmeans(
    x: &Matrix,
    k: usize,
    seed: u64,
    max_iter: usize,
    tol: f64,
    mode: ExecMode,
) -> Result<ClusteringResult> {
    let n = x.rows();
    if k == 0 || k > n {
        return Err(Error::Parameter(format!(
            "k = {k} must be in 1..=N ({n})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = kmeans_pp_init(x, k, &mut rng);
    let mut assignments = vec![0usize; n];

    for _iter in 0..max_iter.max(1) {
        let assigned = exec::map_indices(mode, n, |i| assign_point(x.row(i), &centroids));
        for (i, (a, _)) in assigned.into_iter().enumerate() {
            assignments[i] = a;
        }

        let mut sums = Matrix::zeros(k, x.cols());
        let mut counts = vec![0usize; k];
        for i in 0..n {
            let a = assignments[i];
            counts[a] += 1;
            for (s, v) in sums.row_mut(a).iter_mut().zip(x.row(i)) {
                *s += v;
            }
        }

        // Re-seed empty clusters with the farthest point.
        for c in 0..k {
            if counts[c] == 0 {
                let mut far = 0;
                let mut far_d = -1.0;
                for i in 0..n {
                    let d = dist_sq(x.row(i), centroids.row(assignments[i]));
                    if d > far_d {
                        far_d = d;
                        far = i;
                    }
                }
                sums.row_mut(c).copy_from_slice(x.row(far));
                counts[c] = 1;
                assignments[far] = c;
            }
        }

        let mut shift = 0.0_f64;
        for c in 0..k {
            let inv = 1.0 / counts[c] as f64;
            let mut moved = 0.0;
            for (j, s) in sums.row(c).iter().enumerate() {
                let newv = s * inv;
                let d = newv - centroids.get(c, j);
                moved += d * d;
                centroids.set(c, j, newv);
            }
            shift = shift.max(moved.sqrt());
        }
        if shift < tol {
            break;
        }
    }

    // Final assignment against the settled centroids.
    let assigned = exec::map_indices(mode, n, |i| assign_point(x.row(i), &centroids));
    let mut inertia = 0.0;
    for (i, (a, d)) in assigned.into_iter().enumerate() {
        assignments[i] = a;
        inertia += d;
    }

    Ok(ClusteringResult {
        assignments,
        k,
        centroids,
        inertia,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separated_pairs_are_grouped() {
        let x = Matrix::from_rows(&[
            vec![0.0, 0.0],
            vec![0.1, 0.0],
            vec![10.0, 10.0],
            vec![10.1, 10.0],
        ])
        .unwrap();
        let res = kmeans(&x, 2, 0, DEFAULT_MAX_ITER, DEFAULT_TOL, ExecMode::Sequential).unwrap();
        assert_eq!(res.assignments[0], res.assignments[1]);
        assert_eq!(res.assignments[2], res.assignments[3]);
        assert_ne!(res.assignments[0], res.assignments[2]);
    }

    #[test]
    fn k_equals_n_gives_zero_inertia() {
        let mut rng = crate::test_rng(241);
        let x = crate::random_matrix(&mut rng, 6, 3, 1.0);
        let res = kmeans(&x, 6, 1, DEFAULT_MAX_ITER, DEFAULT_TOL, ExecMode::Sequential).unwrap();
        assert!(res.inertia < 1e-20, "inertia {}", res.inertia);
        let mut seen = res.assignments.clone();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 6);
    }

    #[test]
    fn fixed_seed_is_deterministic() {
        let mut rng = crate::test_rng(251);
        let x = crate::random_matrix(&mut rng, 30, 4, 1.0);
        let a = kmeans(&x, 5, 7, DEFAULT_MAX_ITER, DEFAULT_TOL, ExecMode::Sequential).unwrap();
        let b = kmeans(&x, 5, 7, DEFAULT_MAX_ITER, DEFAULT_TOL, ExecMode::Sequential).unwrap();
        assert_eq!(a.assignments, b.assignments);
        assert_eq!(a.centroids.data(), b.centroids.data());
    }

    #[cfg(feature = "parallel")]
    #[test]
    fn parallel_assignment_matches_sequential() {
        let mut rng = crate::test_rng(257);
        let x = crate::random_matrix(&mut rng, 40, 4, 1.0);
        let a = kmeans(&x, 4, 3, DEFAULT_MAX_ITER, DEFAULT_TOL, ExecMode::Sequential).unwrap();
        let b = kmeans(&x, 4, 3, DEFAULT_MAX_ITER, DEFAULT_TOL, ExecMode::Parallel).unwrap();
        assert_eq!(a.assignments, b.assignments);
        assert_eq!(a.centroids.data(), b.centroids.data());
    }

    #[test]
    fn oversized_k_is_rejected() {
        let x = Matrix::zeros(3, 2);
        assert!(matches!(
            kmeans(&x, 4, 0, 10, 1e-6, ExecMode::Sequential),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn every_assignment_is_below_k() {
        let mut rng = crate::test_rng(263);
        let x = crate::random_matrix(&mut rng, 25, 3, 1.0);
        let res = kmeans(&x, 7, 9, DEFAULT_MAX_ITER, DEFAULT_TOL, ExecMode::Sequential).unwrap();
        assert!(res.assignments.iter().all(|&a| a < res.k));
    }
}
