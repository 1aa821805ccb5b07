//! Symmetric soft-label InfoNCE objective over an in-batch similarity matrix.
//!
//! Targets come from catalog ids: probability mass spreads uniformly over the
//! batch members sharing a catalog, so duplicate listings of one product stop
//! acting as negatives of each other. Logits are `sim / tau` with a learnable
//! temperature; the loss averages an image-to-text term (row softmax) and a
//! text-to-image term (column softmax).
//!
//! `d loss / d sim = ((P_row - z) + (P_col - z)) / (2 N tau)` and
//! `d loss / d log_tau = -<d loss / d sim, sim>`, both in closed form, so the
//! two-stream accumulation scheme can rebuild exact full-batch gradients from
//! micro-batch forwards.

use crate::error::{Error, Result};
use crate::exec::{self, ExecMode};
use crate::matrix::Matrix;

/// N x N cosine similarities between unit-row image and text embeddings.
#[derive(Debug, Clone)]
pub struct SimilarityMatrix(Matrix);

impl SimilarityMatrix {
    /// Wrap a precomputed matrix, checking the cosine range invariant.
    pub fn new(m: Matrix) -> Result<Self> {
        if m.rows() != m.cols() {
            return Err(Error::Dimension(format!(
                "similarity matrix must be square, got {}x{}",
                m.rows(),
                m.cols()
            )));
        }
        if m.data().iter().any(|v| v.abs() > 1.0 + 1e-9) {
            return Err(Error::Numeric(
                "similarity entries outside [-1-1e-9, 1+1e-9]".into(),
            ));
        }
        Ok(Self(m))
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn n(&self) -> usize {
        self.0.rows()
    }
}

/// Row-stochastic soft-label targets built from catalog ids.
#[derive(Debug, Clone)]
pub struct SoftLabelMatrix(Matrix);

impl SoftLabelMatrix {
    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn n(&self) -> usize {
        self.0.rows()
    }

    /// Hard (identity) labels: each pair is its own sole positive.
    pub fn identity(n: usize) -> Self {
        Self(Matrix::identity(n))
    }
}

/// `z[i][j] = 1/m_i` when items i and j share a catalog id (`m_i` = batch
/// members sharing i's catalog), else 0. Rows sum to one because each row has
/// exactly `m_i` entries of `1/m_i`.
pub fn soft_label_matrix<T: Eq + std::hash::Hash>(catalog_ids: &[T]) -> SoftLabelMatrix {
    let n = catalog_ids.len();
    let mut counts: std::collections::HashMap<&T, usize> = std::collections::HashMap::new();
    for id in catalog_ids {
        *counts.entry(id).or_insert(0) += 1;
    }
    let mut z = Matrix::zeros(n, n);
    for i in 0..n {
        let share = 1.0 / counts[&catalog_ids[i]] as f64;
        for j in 0..n {
            if catalog_ids[i] == catalog_ids[j] {
                z.set(i, j, share);
            }
        }
    }
    SoftLabelMatrix(z)
}

/// `sim = x . y^T` for unit-row-normalized embedding matrices of equal shape.
pub fn similarity_matrix(x: &Matrix, y: &Matrix) -> Result<SimilarityMatrix> {
    if x.rows() != y.rows() || x.cols() != y.cols() {
        return Err(Error::Dimension(format!(
            "embedding shapes differ: {}x{} vs {}x{}",
            x.rows(),
            x.cols(),
            y.rows(),
            y.cols()
        )));
    }
    SimilarityMatrix::new(x.matmul(&y.transpose())?)
}

/// Same product computed in row blocks (the per-device sharding pattern);
/// bit-identical to [`similarity_matrix`].
pub fn similarity_matrix_blocked(
    x: &Matrix,
    y: &Matrix,
    block_rows: usize,
    mode: ExecMode,
) -> Result<SimilarityMatrix> {
    if x.rows() != y.rows() || x.cols() != y.cols() {
        return Err(Error::Dimension("embedding shapes differ".into()));
    }
    if block_rows == 0 {
        return Err(Error::Parameter("block_rows must be >= 1".into()));
    }
    let n = x.rows();
    let yt = y.transpose();
    let blocks: Vec<(usize, usize)> = (0..n)
        .step_by(block_rows)
        .map(|start| (start, (start + block_rows).min(n)))
        .collect();
    let rows = exec::map_items(mode, &blocks, |&(start, end)| {
        let idx: Vec<usize> = (start..end).collect();
        x.select_rows(&idx).matmul(&yt)
    });
    let mut sim = Matrix::zeros(n, n);
    let mut at = 0;
    for block in rows {
        let block = block?;
        for i in 0..block.rows() {
            sim.row_mut(at).copy_from_slice(block.row(i));
            at += 1;
        }
    }
    SimilarityMatrix::new(sim)
}

/// Loss value plus the gradient w.r.t. every similarity entry.
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub loss: f64,
    pub d_sim: Matrix,
}

impl LossOutput {
    /// Gradient of the loss w.r.t. the log-temperature. Only the similarity
    /// matrix is involved, so this is available without any re-forward.
    pub fn d_log_tau(&self, sim: &SimilarityMatrix) -> f64 {
        -self
            .d_sim
            .frobenius_dot(sim.matrix())
            .expect("shapes fixed by construction")
    }
}

/// Symmetric soft-label cross-entropy over temperature-scaled logits.
pub fn eclip_loss(sim: &SimilarityMatrix, labels: &SoftLabelMatrix, tau: f64) -> Result<LossOutput> {
    if tau <= 0.0 {
        return Err(Error::Parameter(format!("tau must be positive, got {tau}")));
    }
    let n = sim.n();
    if labels.n() != n {
        return Err(Error::Dimension(format!(
            "labels {}x{} vs sim {}x{}",
            labels.n(),
            labels.n(),
            n,
            n
        )));
    }
    let s = sim.matrix();
    let z = labels.matrix();
    let inv_tau = 1.0 / tau;
    let nf = n as f64;

    // Row direction: softmax over j for each i.
    let mut loss_row = 0.0;
    let mut p_row = Matrix::zeros(n, n);
    for i in 0..n {
        let logits: Vec<f64> = s.row(i).iter().map(|v| v * inv_tau).collect();
        let (log_probs, probs) = log_softmax(&logits);
        p_row.row_mut(i).copy_from_slice(&probs);
        for j in 0..n {
            let zij = z.get(i, j);
            if zij != 0.0 {
                loss_row -= zij * log_probs[j];
            }
        }
    }
    loss_row /= nf;

    // Column direction: softmax over i for each j.
    let mut loss_col = 0.0;
    let mut p_col = Matrix::zeros(n, n);
    for j in 0..n {
        let logits: Vec<f64> = (0..n).map(|i| s.get(i, j) * inv_tau).collect();
        let (log_probs, probs) = log_softmax(&logits);
        for i in 0..n {
            p_col.set(i, j, probs[i]);
            let zij = z.get(i, j);
            if zij != 0.0 {
                loss_col -= zij * log_probs[i];
            }
        }
    }
    loss_col /= nf;

    let loss = 0.5 * (loss_row + loss_col);
    if !loss.is_finite() {
        return Err(Error::Numeric("loss is not finite".into()));
    }

    // Softmax cross-entropy gradient in each direction, scaled by the label
    // mass of that direction's normalization axis (1 for valid soft labels).
    let row_mass: Vec<f64> = (0..n).map(|i| z.row(i).iter().sum()).collect();
    let col_mass: Vec<f64> = (0..n).map(|j| (0..n).map(|i| z.get(i, j)).sum()).collect();
    let mut d_sim = Matrix::zeros(n, n);
    let scale = inv_tau / (2.0 * nf);
    for i in 0..n {
        for j in 0..n {
            let g_row = p_row.get(i, j) * row_mass[i] - z.get(i, j);
            let g_col = p_col.get(i, j) * col_mass[j] - z.get(i, j);
            d_sim.set(i, j, scale * (g_row + g_col));
        }
    }
    Ok(LossOutput { loss, d_sim })
}

/// Max-subtracted log-softmax; returns (log-probabilities, probabilities).
fn log_softmax(logits: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let mut sum = 0.0;
    let shifted: Vec<f64> = logits
        .iter()
        .map(|&v| {
            let e = (v - max).exp();
            sum += e;
            v - max
        })
        .collect();
    let lse = sum.ln();
    let log_probs: Vec<f64> = shifted.iter().map(|v| v - lse).collect();
    let probs: Vec<f64> = log_probs.iter().map(|v| v.exp()).collect();
    (log_probs, probs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sim_from(data: Vec<f64>, n: usize) -> SimilarityMatrix {
        SimilarityMatrix::new(Matrix::from_vec(n, n, data).unwrap()).unwrap()
    }

    #[test]
    fn soft_labels_two_shared_one_unique() {
        let z = soft_label_matrix(&["A", "A", "B"]);
        let want = [0.5, 0.5, 0.0, 0.5, 0.5, 0.0, 0.0, 0.0, 1.0];
        assert_eq!(z.matrix().data(), &want);
    }

    #[test]
    fn soft_labels_all_unique_is_identity() {
        let z = soft_label_matrix(&[1, 2, 3, 4]);
        assert_eq!(z.matrix(), &Matrix::identity(4));
    }

    #[test]
    fn soft_labels_all_same_is_uniform() {
        let z = soft_label_matrix(&["x"; 4]);
        assert!(z.matrix().data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn soft_label_rows_are_exactly_stochastic() {
        // Rational structure: every row holds exactly m entries of 1/m.
        let ids = [3u64, 1, 3, 3, 7, 1];
        let z = soft_label_matrix(&ids);
        for i in 0..ids.len() {
            let nonzero: Vec<f64> = z
                .matrix()
                .row(i)
                .iter()
                .copied()
                .filter(|&v| v != 0.0)
                .collect();
            let m = nonzero.len();
            assert!(nonzero.iter().all(|&v| v == 1.0 / m as f64));
            let sum: f64 = z.matrix().row(i).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            assert!(z.matrix().get(i, i) > 0.0);
        }
    }

    #[test]
    fn similarity_of_orthonormal_rows_is_identity() {
        let x = Matrix::identity(3);
        let sim = similarity_matrix(&x, &x).unwrap();
        assert_eq!(sim.matrix(), &Matrix::identity(3));
    }

    #[test]
    fn similarity_diagonal_is_one_for_equal_embeddings() {
        let mut rng = crate::test_rng(41);
        let x = crate::random_unit_rows(&mut rng, 5, 4);
        let sim = similarity_matrix(&x, &x).unwrap();
        for i in 0..5 {
            assert!((sim.matrix().get(i, i) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn similarity_matches_dot_product_oracle() {
        let mut rng = crate::test_rng(43);
        let x = crate::random_unit_rows(&mut rng, 6, 5);
        let y = crate::random_unit_rows(&mut rng, 6, 5);
        let sim = similarity_matrix(&x, &y).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                let dot: f64 = x.row(i).iter().zip(y.row(j)).map(|(a, b)| a * b).sum();
                assert!((sim.matrix().get(i, j) - dot).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn blocked_similarity_is_bit_identical() {
        let mut rng = crate::test_rng(47);
        let x = crate::random_unit_rows(&mut rng, 9, 4);
        let y = crate::random_unit_rows(&mut rng, 9, 4);
        let full = similarity_matrix(&x, &y).unwrap();
        for block in [1, 2, 4, 9, 100] {
            let blocked =
                similarity_matrix_blocked(&x, &y, block, ExecMode::Sequential).unwrap();
            assert_eq!(full.matrix().data(), blocked.matrix().data());
        }
    }

    #[test]
    fn loss_identity_sim_identity_labels() {
        // softmax([1,0]) puts e/(e+1) on the positive; -ln of that.
        let sim = sim_from(vec![1.0, 0.0, 0.0, 1.0], 2);
        let labels = SoftLabelMatrix::identity(2);
        let out = eclip_loss(&sim, &labels, 1.0).unwrap();
        let want = -(std::f64::consts::E / (std::f64::consts::E + 1.0)).ln();
        assert!((out.loss - want).abs() < 1e-12, "{} vs {want}", out.loss);
        assert!((out.loss - 0.31326).abs() < 1e-5);
    }

    #[test]
    fn loss_uniform_sim_forces_ln_n() {
        let sim = sim_from(vec![0.0; 4], 2);
        let labels = SoftLabelMatrix::identity(2);
        for tau in [0.07, 0.5, 1.0] {
            let out = eclip_loss(&sim, &labels, tau).unwrap();
            assert!((out.loss - (2.0f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_shared_catalog_pair() {
        let sim = sim_from(vec![1.0, 0.0, 0.0, 1.0], 2);
        let labels = soft_label_matrix(&["c", "c"]);
        let out = eclip_loss(&sim, &labels, 1.0).unwrap();
        // Hand-computed: 0.5 * (0.31326169 + 1.31326169).
        let e = std::f64::consts::E;
        let want = 0.5 * ((-(e / (e + 1.0)).ln()) + (-(1.0 / (e + 1.0)).ln()));
        assert!((out.loss - want).abs() < 1e-12);
        assert!((out.loss - 0.81326).abs() < 1e-5);
    }

    #[test]
    fn loss_rejects_non_positive_tau() {
        let sim = sim_from(vec![0.0; 4], 2);
        let labels = SoftLabelMatrix::identity(2);
        assert!(matches!(
            eclip_loss(&sim, &labels, 0.0),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn loss_symmetric_under_transpose_with_symmetric_labels() {
        let mut rng = crate::test_rng(53);
        let x = crate::random_unit_rows(&mut rng, 4, 6);
        let y = crate::random_unit_rows(&mut rng, 4, 6);
        let sim = similarity_matrix(&x, &y).unwrap();
        let labels = soft_label_matrix(&["a", "b", "a", "c"]);
        let transposed = SimilarityMatrix::new(sim.matrix().transpose()).unwrap();
        let a = eclip_loss(&sim, &labels, 0.3).unwrap();
        let b = eclip_loss(&transposed, &labels, 0.3).unwrap();
        assert!((a.loss - b.loss).abs() < 1e-12);
    }

    #[test]
    fn d_sim_matches_finite_differences() {
        let mut rng = crate::test_rng(59);
        let x = crate::random_unit_rows(&mut rng, 4, 5);
        let y = crate::random_unit_rows(&mut rng, 4, 5);
        let sim = similarity_matrix(&x, &y).unwrap();
        let labels = soft_label_matrix(&["a", "b", "a", "c"]);
        let tau = 0.2;
        let out = eclip_loss(&sim, &labels, tau).unwrap();

        let eps = 1e-6;
        for i in 0..4 {
            for j in 0..4 {
                let mut plus = sim.matrix().clone();
                plus.set(i, j, plus.get(i, j) + eps);
                let mut minus = sim.matrix().clone();
                minus.set(i, j, minus.get(i, j) - eps);
                let lp = eclip_loss(&SimilarityMatrix::new(plus).unwrap(), &labels, tau)
                    .unwrap()
                    .loss;
                let lm = eclip_loss(&SimilarityMatrix::new(minus).unwrap(), &labels, tau)
                    .unwrap()
                    .loss;
                let fd = (lp - lm) / (2.0 * eps);
                let an = out.d_sim.get(i, j);
                assert!(
                    (fd - an).abs() / 1e-8f64.max(fd.abs() + an.abs()) < 1e-6,
                    "entry ({i},{j}): fd {fd} analytic {an}"
                );
            }
        }
    }

    #[test]
    fn d_log_tau_matches_finite_differences() {
        let mut rng = crate::test_rng(61);
        let x = crate::random_unit_rows(&mut rng, 5, 4);
        let y = crate::random_unit_rows(&mut rng, 5, 4);
        let sim = similarity_matrix(&x, &y).unwrap();
        let labels = soft_label_matrix(&["a", "a", "b", "c", "b"]);
        let log_tau: f64 = (0.15f64).ln();
        let out = eclip_loss(&sim, &labels, log_tau.exp()).unwrap();
        let analytic = out.d_log_tau(&sim);
        let err = crate::gradcheck::finite_diff_scalar(
            |lt| Ok(eclip_loss(&sim, &labels, lt.exp())?.loss),
            log_tau,
            analytic,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-6, "err {err}");
    }

    #[test]
    fn unique_catalogs_reduce_to_hard_label_clip() {
        let mut rng = crate::test_rng(67);
        let x = crate::random_unit_rows(&mut rng, 6, 8);
        let y = crate::random_unit_rows(&mut rng, 6, 8);
        let sim = similarity_matrix(&x, &y).unwrap();
        let labels = soft_label_matrix(&[10, 20, 30, 40, 50, 60]);
        let ours = eclip_loss(&sim, &labels, 0.1).unwrap().loss;
        let oracle = crate::oracle::hard_label_clip_loss(sim.matrix(), 0.1);
        assert!((ours - oracle).abs() < 1e-12, "{ours} vs {oracle}");
    }

    #[test]
    fn loss_decreases_to_entropy_bound_as_tau_shrinks() {
        // Block-structured similarity: 1 within a catalog, 0 across.
        let ids = ["a", "a", "b", "b", "b", "c"];
        let n = ids.len();
        let labels = soft_label_matrix(&ids);
        let mut block = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                if ids[i] == ids[j] {
                    block.set(i, j, 1.0);
                }
            }
        }
        let sim = SimilarityMatrix::new(block).unwrap();

        // Mean row entropy of the uniform-over-group labels (rows == cols by
        // symmetry of the catalog relation).
        let bound: f64 = ids
            .iter()
            .map(|id| (ids.iter().filter(|o| *o == id).count() as f64).ln())
            .sum::<f64>()
            / n as f64;

        let mut prev = f64::INFINITY;
        for tau in [1.0, 0.5, 0.25, 0.1, 0.05, 0.02, 0.01] {
            let loss = eclip_loss(&sim, &labels, tau).unwrap().loss;
            assert!(loss <= prev + 1e-12, "loss not decreasing at tau {tau}");
            assert!(loss + 1e-12 >= bound, "loss {loss} fell below bound {bound}");
            prev = loss;
        }
        assert!((prev - bound).abs() < 1e-9, "tau=0.01 loss {prev} vs bound {bound}");
    }
}
