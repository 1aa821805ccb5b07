//! Named parameter tensors with paired gradient accumulators.

use crate::error::{Error, Result};
use crate::matrix::Matrix;

#[derive(Debug, Clone)]
pub struct ParamTensor {
    pub name: String,
    pub value: Matrix,
    pub grad: Matrix,
}

/// Ordered registry of named tensors. Iteration order is insertion order so
/// every walk over the set is deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    tensors: Vec<ParamTensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> usize {
        let grad = Matrix::zeros(value.rows(), value.cols());
        self.tensors.push(ParamTensor {
            name: name.into(),
            value,
            grad,
        });
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn tensor(&self, idx: usize) -> &ParamTensor {
        &self.tensors[idx]
    }

    pub fn tensor_mut(&mut self, idx: usize) -> &mut ParamTensor {
        &mut self.tensors[idx]
    }

    pub fn by_name(&self, name: &str) -> Option<&ParamTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamTensor> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut ParamTensor> {
        self.tensors.iter_mut()
    }

    pub fn zero_grads(&mut self) {
        for t in &mut self.tensors {
            t.grad = Matrix::zeros(t.value.rows(), t.value.cols());
        }
    }

    /// Accumulate into the gradient slot of tensor `idx`.
    pub fn accumulate_grad(&mut self, idx: usize, delta: &Matrix) -> Result<()> {
        self.tensors[idx].grad.add_scaled(delta, 1.0)
    }

    /// Snapshot the gradient accumulators, in tensor order.
    pub fn grads(&self) -> Vec<Matrix> {
        self.tensors.iter().map(|t| t.grad.clone()).collect()
    }

    pub fn values(&self) -> Vec<Matrix> {
        self.tensors.iter().map(|t| t.value.clone()).collect()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors
            .iter()
            .map(|t| t.value.rows() * t.value.cols())
            .sum()
    }
}

/// Per-tensor gradients aligned with a [`ParamSet`] by index.
#[derive(Debug, Clone)]
pub struct GradSet {
    pub tensors: Vec<Matrix>,
}

impl GradSet {
    pub fn zeros_like(params: &ParamSet) -> Self {
        Self {
            tensors: params
                .iter()
                .map(|t| Matrix::zeros(t.value.rows(), t.value.cols()))
                .collect(),
        }
    }

    pub fn from_params(params: &ParamSet) -> Self {
        Self {
            tensors: params.grads(),
        }
    }

    /// Plain in-order accumulation: `self += other`.
    pub fn add(&mut self, other: &GradSet) -> Result<()> {
        if self.tensors.len() != other.tensors.len() {
            return Err(Error::Dimension("grad set length mismatch".into()));
        }
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.add_scaled(b, 1.0)?;
        }
        Ok(())
    }

    pub fn max_rel_diff(&self, other: &GradSet) -> f64 {
        self.tensors
            .iter()
            .zip(&other.tensors)
            .fold(0.0_f64, |m, (a, b)| m.max(a.max_rel_diff(b)))
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Matrix::is_finite)
    }
}

/// Kahan-compensated accumulator over grad sets. Used when micro-batch
/// contributions may arrive in varying order; the compensation keeps the sum
/// order-independent to ~1e-12 instead of bit-exact.
#[derive(Debug, Clone)]
pub struct CompensatedGrads {
    sum: Vec<Matrix>,
    carry: Vec<Matrix>,
}

impl CompensatedGrads {
    pub fn zeros_like(params: &ParamSet) -> Self {
        let zeros: Vec<Matrix> = params
            .iter()
            .map(|t| Matrix::zeros(t.value.rows(), t.value.cols()))
            .collect();
        Self {
            sum: zeros.clone(),
            carry: zeros,
        }
    }

    pub fn add(&mut self, other: &GradSet) -> Result<()> {
        if self.sum.len() != other.tensors.len() {
            return Err(Error::Dimension("grad set length mismatch".into()));
        }
        for ((s, c), g) in self.sum.iter_mut().zip(&mut self.carry).zip(&other.tensors) {
            for ((sv, cv), gv) in s
                .data_mut()
                .iter_mut()
                .zip(c.data_mut())
                .zip(g.data().iter())
            {
                let y = gv - *cv;
                let t = *sv + y;
                *cv = (t - *sv) - y;
                *sv = t;
            }
        }
        Ok(())
    }

    pub fn finish(self) -> GradSet {
        GradSet { tensors: self.sum }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accumulation_is_additive() {
        let mut p = ParamSet::new();
        p.add("w", Matrix::zeros(2, 2));
        let g1 = Matrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let g2 = Matrix::from_vec(2, 2, vec![0.5, 0.5, 0.5, 0.5]).unwrap();

        p.accumulate_grad(0, &g1).unwrap();
        p.accumulate_grad(0, &g2).unwrap();
        let separate = p.tensor(0).grad.clone();

        p.zero_grads();
        let mut combined = g1.clone();
        combined.add_scaled(&g2, 1.0).unwrap();
        p.accumulate_grad(0, &combined).unwrap();

        // Same order of addition, so exactly equal.
        assert_eq!(separate.data(), p.tensor(0).grad.data());
    }

    #[test]
    fn zero_grads_resets_everything() {
        let mut p = ParamSet::new();
        p.add("w", Matrix::identity(3));
        p.accumulate_grad(0, &Matrix::identity(3)).unwrap();
        p.zero_grads();
        assert!(p.tensor(0).grad.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn compensated_sum_is_order_independent() {
        let mut rng = crate::test_rng(3);
        let mut proto = ParamSet::new();
        proto.add("w", Matrix::zeros(4, 4));

        let parts: Vec<GradSet> = (0..8)
            .map(|_| GradSet {
                tensors: vec![crate::random_matrix(&mut rng, 4, 4, 1e3)],
            })
            .collect();

        let mut forward = CompensatedGrads::zeros_like(&proto);
        for p in &parts {
            forward.add(p).unwrap();
        }
        let mut reverse = CompensatedGrads::zeros_like(&proto);
        for p in parts.iter().rev() {
            reverse.add(p).unwrap();
        }
        let diff = forward.finish().max_rel_diff(&reverse.finish());
        assert!(diff < 1e-12, "diff {diff}");
    }
}
