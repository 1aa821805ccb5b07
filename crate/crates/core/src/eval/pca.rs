//! Principal component analysis via Jacobi eigendecomposition of the
//! covariance matrix, with a deterministic sign convention.

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Cyclic Jacobi eigendecomposition of a symmetric matrix. Returns
/// eigenvalues in descending order and the matching eigenvectors as columns.
pub fn symmetric_eigen(a: &Matrix) -> Result<(Vec<f64>, Matrix)> {
    if a.rows() != a.cols() {
        return Err(Error::Dimension("eigendecomposition needs a square matrix".into()));
    }
    let n = a.rows();
    let mut m = a.clone();
    let mut v = Matrix::identity(n);

    let off = |m: &Matrix| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += m.get(i, j) * m.get(i, j);
                }
            }
        }
        s.sqrt()
    };
    let scale = off(&m).max(1.0);

    for _sweep in 0..100 {
        if off(&m) <= 1e-14 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m.get(p, q);
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let theta = (m.get(q, q) - m.get(p, p)) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m.get(k, p);
                    let mkq = m.get(k, q);
                    m.set(k, p, c * mkp - s * mkq);
                    m.set(k, q, s * mkp + c * mkq);
                }
                for k in 0..n {
                    let mpk = m.get(p, k);
                    let mqk = m.get(q, k);
                    m.set(p, k, c * mpk - s * mqk);
                    m.set(q, k, s * mpk + c * mqk);
                }
                for k in 0..n {
                    let vkp = v.get(k, p);
                    let vkq = v.get(k, q);
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    let eigvals: Vec<f64> = (0..n).map(|i| m.get(i, i)).collect();
    order.sort_by(|&i, &j| eigvals[j].partial_cmp(&eigvals[i]).unwrap());

    let mut sorted_vals = Vec::with_capacity(n);
    let mut sorted_vecs = Matrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        sorted_vals.push(eigvals[src]);
        // Sign convention: largest-magnitude coordinate positive.
        let mut best = 0;
        for k in 1..n {
            if v.get(k, src).abs() > v.get(best, src).abs() {
                best = k;
            }
        }
        let flip = if v.get(best, src) < 0.0 { -1.0 } else { 1.0 };
        for k in 0..n {
            sorted_vecs.set(k, dst, flip * v.get(k, src));
        }
    }
    Ok((sorted_vals, sorted_vecs))
}

/// Fitted projection: column means plus the top principal directions.
#[derive(Debug, Clone)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// d x k, one component per column, descending eigenvalue order.
    pub components: Matrix,
    pub eigenvalues: Vec<f64>,
}

impl PcaModel {
    pub fn fit(x: &Matrix, out_dim: usize) -> Result<Self> {
        let (n, d) = (x.rows(), x.cols());
        if out_dim == 0 || out_dim > n.min(d) {
            return Err(Error::Parameter(format!(
                "out_dim {out_dim} must be in 1..=min(N={n}, d={d})"
            )));
        }
        let mean: Vec<f64> = x.col_sums().into_iter().map(|s| s / n as f64).collect();
        let mut centered = x.clone();
        for i in 0..n {
            for (v, m) in centered.row_mut(i).iter_mut().zip(&mean) {
                *v -= m;
            }
        }
        let divisor = (n.saturating_sub(1)).max(1) as f64;
        let mut cov = centered.transpose().matmul(&centered)?;
        cov.scale(1.0 / divisor);
        let (eigvals, eigvecs) = symmetric_eigen(&cov)?;

        let mut components = Matrix::zeros(d, out_dim);
        for j in 0..out_dim {
            for i in 0..d {
                components.set(i, j, eigvecs.get(i, j));
            }
        }
        Ok(Self {
            mean,
            components,
            eigenvalues: eigvals.into_iter().take(out_dim).collect(),
        })
    }

    pub fn transform(&self, x: &Matrix) -> Result<Matrix> {
        let mut centered = x.clone();
        for i in 0..x.rows() {
            for (v, m) in centered.row_mut(i).iter_mut().zip(&self.mean) {
                *v -= m;
            }
        }
        centered.matmul(&self.components)
    }

    pub fn inverse_transform(&self, y: &Matrix) -> Result<Matrix> {
        let mut x = y.matmul(&self.components.transpose())?;
        for i in 0..x.rows() {
            for (v, m) in x.row_mut(i).iter_mut().zip(&self.mean) {
                *v += m;
            }
        }
        Ok(x)
    }
}

/// Center, project onto the top `out_dim` principal directions.
pub fn pca_project(x: &Matrix, out_dim: usize) -> Result<Matrix> {
    PcaModel::fit(x, out_dim)?.transform(x)
}

/// Count of eigenvalues carrying real variance.
pub fn effective_rank(eigenvalues: &[f64]) -> usize {
    let max = eigenvalues.iter().fold(0.0_f64, |m, &v| m.max(v));
    if max <= 0.0 {
        return 0;
    }
    eigenvalues.iter().filter(|&&v| v > 1e-10 * max).count()
}
