//! Small MLP text/image encoders producing L2-normalized embeddings.
//!
//! Both towers map fixed-length feature vectors (bag-of-token-hash counts for
//! titles, flattened gray pixels for images) into a shared `d`-dimensional
//! unit-sphere embedding space. When a spec declares more than one token step
//! per sample, each step runs through the same MLP and the step outputs are
//! mean-pooled before normalization.
//!
//! Gradients are hand-derived per layer and verified against central finite
//! differences; there is no autodiff graph.

use serde::{Deserialize, Serialize};
use std::sync::atomic::{AtomicUsize, Ordering};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::param::{GradSet, ParamSet};

/// Smallest vector norm accepted by [`l2_normalize`].
pub const NORM_FLOOR: f64 = 1e-12;

/// Learnable temperature bounds: tau stays in [0.01, 1.0].
pub const LOG_TAU_MIN: f64 = -4.605170185988091; // ln 0.01
pub const LOG_TAU_MAX: f64 = 0.0; // ln 1.0
/// Initial temperature.
pub const TAU_INIT: f64 = 0.07;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed in terms of the activation output `a`.
    #[inline]
    fn derivative_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
        }
    }
}

/// Architecture of one encoder tower.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderSpec {
    /// Feature dimension of a single token step.
    pub input_dim: usize,
    /// Hidden layer widths; may be empty for a single linear layer.
    pub hidden: Vec<usize>,
    /// Shared embedding dimension.
    pub output_dim: usize,
    pub activation: Activation,
    /// Token steps per sample; batch columns = `tokens_per_sample * input_dim`.
    #[serde(default = "default_tokens")]
    pub tokens_per_sample: usize,
}

fn default_tokens() -> usize {
    1
}

impl EncoderSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(Error::Parameter("encoder dims must be >= 1".into()));
        }
        if self.hidden.contains(&0) {
            return Err(Error::Parameter("hidden widths must be >= 1".into()));
        }
        if self.tokens_per_sample == 0 {
            return Err(Error::Parameter("tokens_per_sample must be >= 1".into()));
        }
        Ok(())
    }

    /// Expected number of columns in an input batch.
    pub fn batch_cols(&self) -> usize {
        self.tokens_per_sample * self.input_dim
    }

    fn layer_dims(&self) -> Vec<usize> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 2);
        dims.push(self.input_dim);
        dims.extend_from_slice(&self.hidden);
        dims.push(self.output_dim);
        dims
    }

    pub fn num_layers(&self) -> usize {
        self.hidden.len() + 1
    }

    /// Xavier-uniform initialization, reproducible from the caller's rng.
    pub fn init_params(&self, rng: &mut impl rand::Rng) -> ParamSet {
        let dims = self.layer_dims();
        let mut params = ParamSet::new();
        for l in 0..dims.len() - 1 {
            let (fan_in, fan_out) = (dims[l], dims[l + 1]);
            let scale = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let data: Vec<f64> = (0..fan_in * fan_out)
                .map(|_| (rng.random::<f64>() * 2.0 - 1.0) * scale)
                .collect();
            let w = Matrix::from_vec(fan_in, fan_out, data).expect("finite init");
            params.add(format!("layer{l}.weight"), w);
            params.add(format!("layer{l}.bias"), Matrix::zeros(1, fan_out));
        }
        params
    }
}

/// Both towers plus the learnable log-temperature.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub text: ParamSet,
    pub image: ParamSet,
    pub log_tau: f64,
}

impl ModelParams {
    pub fn init(text_spec: &EncoderSpec, image_spec: &EncoderSpec, seed: u64) -> Result<Self> {
        text_spec.validate()?;
        image_spec.validate()?;
        if text_spec.output_dim != image_spec.output_dim {
            return Err(Error::Parameter(format!(
                "towers must share the embedding dim: {} vs {}",
                text_spec.output_dim, image_spec.output_dim
            )));
        }
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            text: text_spec.init_params(&mut rng),
            image: image_spec.init_params(&mut rng),
            log_tau: TAU_INIT.ln(),
        })
    }

    pub fn tau(&self) -> f64 {
        self.log_tau.exp()
    }

    /// Keep the log-temperature inside its bounds; called after every
    /// optimizer step.
    pub fn clamp_log_tau(&mut self) {
        self.log_tau = self.log_tau.clamp(LOG_TAU_MIN, LOG_TAU_MAX);
    }

    pub fn zero_grads(&mut self) {
        self.text.zero_grads();
        self.image.zero_grads();
    }
}

/// Columnwise arithmetic mean of the rows of `token_reprs`.
pub fn pool_mean(token_reprs: &Matrix) -> Result<Vec<f64>> {
    if token_reprs.rows() == 0 {
        return Err(Error::EmptySequence);
    }
    let t = token_reprs.rows() as f64;
    Ok(token_reprs.col_sums().into_iter().map(|s| s / t).collect())
}

/// Scale a vector to unit norm, preserving direction.
pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    let norm = v.iter().fold(0.0, |acc, x| acc + x * x).sqrt();
    if norm <= NORM_FLOOR {
        return Err(Error::DegenerateVector { norm });
    }
    Ok(v.iter().map(|x| x / norm).collect())
}

/// Normalize each row; returns the normalized matrix and the original norms.
pub fn normalize_rows(m: &Matrix) -> Result<(Matrix, Vec<f64>)> {
    let mut out = m.clone();
    let mut norms = Vec::with_capacity(m.rows());
    for i in 0..m.rows() {
        let row = out.row_mut(i);
        let norm = row.iter().fold(0.0, |acc, x| acc + x * x).sqrt();
        if norm <= NORM_FLOOR {
            return Err(Error::DegenerateVector { norm });
        }
        for x in row.iter_mut() {
            *x /= norm;
        }
        norms.push(norm);
    }
    Ok((out, norms))
}

/// Pull a normalization gradient back to the pre-normalization vector:
/// `dp = (de - e * <de, e>) / s` for each row.
pub fn normalize_rows_backward(embeddings: &Matrix, norms: &[f64], d_emb: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(d_emb.rows(), d_emb.cols());
    for i in 0..d_emb.rows() {
        let e = embeddings.row(i);
        let de = d_emb.row(i);
        let dot: f64 = de.iter().zip(e).fold(0.0, |acc, (a, b)| acc + a * b);
        let s = norms[i];
        for (o, (dv, ev)) in out.row_mut(i).iter_mut().zip(de.iter().zip(e)) {
            *o = (dv - ev * dot) / s;
        }
    }
    out
}

/// Counts how many activation matrices a forward pass keeps alive. The
/// gradient-accumulation memory contract is asserted against `peak`.
#[derive(Debug, Default)]
pub struct ActivationMeter {
    live: AtomicUsize,
    peak: AtomicUsize,
}

impl ActivationMeter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn acquire(&self, n: usize) {
        let live = self.live.fetch_add(n, Ordering::SeqCst) + n;
        self.peak.fetch_max(live, Ordering::SeqCst);
    }

    pub fn release(&self, n: usize) {
        self.live.fetch_sub(n, Ordering::SeqCst);
    }

    pub fn live(&self) -> usize {
        self.live.load(Ordering::SeqCst)
    }

    pub fn peak(&self) -> usize {
        self.peak.load(Ordering::SeqCst)
    }
}

/// Activations retained by a forward pass for the paired backward.
#[derive(Debug)]
pub struct EncoderCache {
    /// Input to each layer (token-expanded rows).
    layer_inputs: Vec<Matrix>,
    /// Pre-normalization pooled outputs.
    norms: Vec<f64>,
    /// Normalized embeddings.
    embeddings: Matrix,
    batch_rows: usize,
}

impl EncoderCache {
    /// Matrices held alive by this cache.
    pub fn matrix_count(&self) -> usize {
        self.layer_inputs.len() + 1
    }
}

fn affine(a: &Matrix, w: &Matrix, b: &Matrix) -> Result<Matrix> {
    let mut z = a.matmul(w)?;
    for i in 0..z.rows() {
        for (zv, bv) in z.row_mut(i).iter_mut().zip(b.row(0)) {
            *zv += bv;
        }
    }
    Ok(z)
}

fn check_batch(spec: &EncoderSpec, params: &ParamSet, batch: &Matrix) -> Result<()> {
    if batch.cols() != spec.batch_cols() {
        return Err(Error::Dimension(format!(
            "batch has {} cols, spec expects {}",
            batch.cols(),
            spec.batch_cols()
        )));
    }
    if params.len() != 2 * spec.num_layers() {
        return Err(Error::Dimension(format!(
            "param set has {} tensors, spec expects {}",
            params.len(),
            2 * spec.num_layers()
        )));
    }
    Ok(())
}

fn mlp_forward(
    params: &ParamSet,
    spec: &EncoderSpec,
    expanded: Matrix,
    mut retain: Option<&mut Vec<Matrix>>,
) -> Result<Matrix> {
    let layers = spec.num_layers();
    let mut cur = expanded;
    for l in 0..layers {
        let w = &params.tensor(2 * l).value;
        let b = &params.tensor(2 * l + 1).value;
        let z = affine(&cur, w, b)?;
        if let Some(inputs) = retain.as_deref_mut() {
            inputs.push(cur);
        }
        cur = if l + 1 < layers {
            z.map(|v| spec.activation.apply(v))
        } else {
            z
        };
    }
    Ok(cur)
}

/// Mean over groups of `t` consecutive rows.
fn group_mean_pool(h: &Matrix, t: usize) -> Matrix {
    if t == 1 {
        return h.clone();
    }
    let n = h.rows() / t;
    let mut out = Matrix::zeros(n, h.cols());
    for i in 0..n {
        for step in 0..t {
            let src = h.row(i * t + step);
            for (o, v) in out.row_mut(i).iter_mut().zip(src) {
                *o += v;
            }
        }
        for o in out.row_mut(i).iter_mut() {
            *o /= t as f64;
        }
    }
    out
}

/// Forward pass without activation retention: only the current layer output
/// is alive at any point, so peak memory tracks the micro-batch, not the
/// logical batch.
pub fn encode(params: &ParamSet, spec: &EncoderSpec, batch: &Matrix) -> Result<Matrix> {
    check_batch(spec, params, batch)?;
    let expanded = batch.reshaped(batch.rows() * spec.tokens_per_sample, spec.input_dim)?;
    let h = mlp_forward(params, spec, expanded, None)?;
    let pooled = group_mean_pool(&h, spec.tokens_per_sample);
    let (emb, _) = normalize_rows(&pooled)?;
    Ok(emb)
}

/// Forward pass that retains per-layer inputs for [`encode_backward`].
pub fn encode_with_cache(
    params: &ParamSet,
    spec: &EncoderSpec,
    batch: &Matrix,
    meter: Option<&ActivationMeter>,
) -> Result<(Matrix, EncoderCache)> {
    check_batch(spec, params, batch)?;
    let expanded = batch.reshaped(batch.rows() * spec.tokens_per_sample, spec.input_dim)?;
    let mut inputs = Vec::with_capacity(spec.num_layers());
    let h = mlp_forward(params, spec, expanded, Some(&mut inputs))?;
    let pooled = group_mean_pool(&h, spec.tokens_per_sample);
    let (emb, norms) = normalize_rows(&pooled)?;
    let cache = EncoderCache {
        layer_inputs: inputs,
        norms,
        embeddings: emb.clone(),
        batch_rows: batch.rows(),
    };
    if let Some(m) = meter {
        m.acquire(cache.matrix_count());
    }
    Ok((emb, cache))
}

/// Backpropagate `d_emb` (gradient w.r.t. the normalized embeddings) through
/// the normalization, pooling, and MLP layers. Returns per-tensor parameter
/// gradients (aligned with `params`) and the gradient w.r.t. the input batch.
pub fn encode_backward(
    params: &ParamSet,
    spec: &EncoderSpec,
    cache: &EncoderCache,
    d_emb: &Matrix,
) -> Result<(GradSet, Matrix)> {
    if d_emb.rows() != cache.batch_rows || d_emb.cols() != spec.output_dim {
        return Err(Error::Dimension("d_emb shape mismatch".into()));
    }
    let t = spec.tokens_per_sample;
    let d_pooled = normalize_rows_backward(&cache.embeddings, &cache.norms, d_emb);

    // Undo the mean pooling: each token step receives d_pooled / t.
    let mut d_act = Matrix::zeros(cache.batch_rows * t, spec.output_dim);
    for i in 0..cache.batch_rows {
        let src = d_pooled.row(i);
        for step in 0..t {
            for (o, v) in d_act.row_mut(i * t + step).iter_mut().zip(src) {
                *o = v / t as f64;
            }
        }
    }

    let mut grads = GradSet::zeros_like(params);
    let layers = spec.num_layers();
    for l in (0..layers).rev() {
        // Hidden layers pass through the activation derivative; the output
        // layer is linear.
        let d_z = if l + 1 < layers {
            let act_out = &cache.layer_inputs[l + 1];
            let mut d = d_act.clone();
            for (dv, av) in d.data_mut().iter_mut().zip(act_out.data()) {
                *dv *= spec.activation.derivative_from_output(*av);
            }
            d
        } else {
            d_act
        };

        let input = &cache.layer_inputs[l];
        grads.tensors[2 * l] = input.transpose().matmul(&d_z)?;
        grads.tensors[2 * l + 1] = Matrix::from_vec(1, d_z.cols(), d_z.col_sums())?;
        d_act = d_z.matmul(&params.tensor(2 * l).value.transpose())?;
    }
    // d_act is now the gradient w.r.t. the token-expanded input.
    let d_batch = d_act.reshaped(cache.batch_rows, spec.batch_cols())?;
    Ok((grads, d_batch))
}

/// Release a cache's matrices from the meter once the backward pass is done.
pub fn release_cache(cache: EncoderCache, meter: Option<&ActivationMeter>) {
    if let Some(m) = meter {
        m.release(cache.matrix_count());
    }
    drop(cache);
}

/// Hash tokens into a fixed-length count vector (FNV-1a, stable across
/// platforms). This is the title featurizer for real manifests.
pub fn bag_of_token_hashes(tokens: &[String], dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; dim];
    for tok in tokens {
        let mut h: u64 = 0xcbf29ce484222325;
        for byte in tok.as_bytes() {
            h ^= u64::from(*byte);
            h = h.wrapping_mul(0x100000001b3);
        }
        out[(h % dim as u64) as usize] += 1.0;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec() -> EncoderSpec {
        EncoderSpec {
            input_dim: 5,
            hidden: vec![4],
            output_dim: 3,
            activation: Activation::Tanh,
            tokens_per_sample: 1,
        }
    }

    #[test]
    fn pool_mean_two_rows() {
        let m = Matrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(pool_mean(&m).unwrap(), vec![2.0, 3.0]);
    }

    #[test]
    fn pool_mean_single_row_is_identity() {
        let m = Matrix::from_vec(1, 2, vec![5.0, 6.0]).unwrap();
        assert_eq!(pool_mean(&m).unwrap(), vec![5.0, 6.0]);
    }

    #[test]
    fn pool_mean_matches_column_sum_oracle() {
        let mut rng = crate::test_rng(5);
        let m = crate::random_matrix(&mut rng, 100, 7, 1.0);
        let got = pool_mean(&m).unwrap();
        let want: Vec<f64> = m.col_sums().into_iter().map(|s| s / 100.0).collect();
        assert_eq!(got, want);
    }

    #[test]
    fn pool_mean_rejects_empty() {
        let m = Matrix::zeros(0, 3);
        assert!(matches!(pool_mean(&m), Err(Error::EmptySequence)));
    }

    #[test]
    fn l2_normalize_three_four_five() {
        let v = l2_normalize(&[3.0, 4.0]).unwrap();
        assert!((v[0] - 0.6).abs() < 1e-15);
        assert!((v[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn l2_normalize_unit_vector_unchanged() {
        let v = l2_normalize(&[1.0, 0.0, 0.0]).unwrap();
        assert_eq!(v, vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn l2_normalize_rejects_near_zero() {
        assert!(matches!(
            l2_normalize(&[0.0, 1e-13]),
            Err(Error::DegenerateVector { .. })
        ));
    }

    #[test]
    fn identity_linear_encoder_preserves_normalized_input() {
        // Single linear layer with identity weights on a pre-normalized row.
        let spec = EncoderSpec {
            input_dim: 3,
            hidden: vec![],
            output_dim: 3,
            activation: Activation::Relu,
            tokens_per_sample: 1,
        };
        let mut params = ParamSet::new();
        params.add("layer0.weight", Matrix::identity(3));
        params.add("layer0.bias", Matrix::zeros(1, 3));
        let x = Matrix::from_vec(1, 3, vec![0.6, 0.8, 0.0]).unwrap();
        let e = encode(&params, &spec, &x).unwrap();
        for (a, b) in e.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn output_rows_are_unit_norm() {
        let spec = tiny_spec();
        let mut rng = crate::test_rng(9);
        let params = spec.init_params(&mut rng);
        let batch = crate::random_matrix(&mut rng, 6, 5, 1.0);
        let e = encode(&params, &spec, &batch).unwrap();
        for i in 0..e.rows() {
            let norm: f64 = e.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn row_permutation_permutes_output() {
        let spec = tiny_spec();
        let mut rng = crate::test_rng(13);
        let params = spec.init_params(&mut rng);
        let batch = crate::random_matrix(&mut rng, 4, 5, 1.0);
        let perm = [2usize, 0, 3, 1];
        let permuted = batch.select_rows(&perm);
        let e = encode(&params, &spec, &batch).unwrap();
        let ep = encode(&params, &spec, &permuted).unwrap();
        for (dst, &src) in perm.iter().enumerate() {
            assert_eq!(ep.row(dst), e.row(src));
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let spec = tiny_spec();
        let mut rng = crate::test_rng(17);
        let params = spec.init_params(&mut rng);
        let batch = crate::random_matrix(&mut rng, 3, 5, 1.0);
        // Scalar head: sum of embeddings weighted by a fixed random matrix.
        let weights = crate::random_matrix(&mut rng, 3, 3, 1.0);

        let (_, cache) = encode_with_cache(&params, &spec, &batch, None).unwrap();
        let (analytic, _) = encode_backward(&params, &spec, &cache, &weights).unwrap();

        let err = crate::gradcheck::finite_diff_check(
            |ps| {
                let e = encode(ps, &spec, &batch)?;
                e.frobenius_dot(&weights)
            },
            &params,
            &analytic.tensors,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "finite diff err {err}");
    }

    #[test]
    fn backward_input_gradient_matches_finite_differences() {
        let spec = tiny_spec();
        let mut rng = crate::test_rng(19);
        let params = spec.init_params(&mut rng);
        let batch = crate::random_matrix(&mut rng, 2, 5, 1.0);
        let weights = crate::random_matrix(&mut rng, 2, 3, 1.0);

        let (_, cache) = encode_with_cache(&params, &spec, &batch, None).unwrap();
        let (_, d_batch) = encode_backward(&params, &spec, &cache, &weights).unwrap();

        // Finite differences w.r.t. the batch entries, via a one-tensor set.
        let mut input_params = ParamSet::new();
        input_params.add("batch", batch.clone());
        let err = crate::gradcheck::finite_diff_check(
            |ps| {
                let e = encode(&params, &spec, &ps.tensor(0).value)?;
                e.frobenius_dot(&weights)
            },
            &input_params,
            &[d_batch],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "input grad err {err}");
    }

    #[test]
    fn token_pooling_matches_manual_average() {
        let spec = EncoderSpec {
            input_dim: 4,
            hidden: vec![3],
            output_dim: 2,
            activation: Activation::Tanh,
            tokens_per_sample: 3,
        };
        let mut rng = crate::test_rng(23);
        let params = spec.init_params(&mut rng);
        let batch = crate::random_matrix(&mut rng, 2, 12, 1.0);
        let e = encode(&params, &spec, &batch).unwrap();

        // Manual: run each token step separately and pool before normalizing.
        let single = EncoderSpec {
            tokens_per_sample: 1,
            ..spec.clone()
        };
        for i in 0..2 {
            let mut steps = Vec::new();
            for t in 0..3 {
                let tok = Matrix::from_vec(1, 4, batch.row(i)[t * 4..(t + 1) * 4].to_vec()).unwrap();
                // Pre-normalization output of the MLP on this token.
                let h = mlp_forward(&params, &single, tok, None).unwrap();
                steps.push(h.row(0).to_vec());
            }
            let stacked = Matrix::from_rows(&steps).unwrap();
            let pooled = pool_mean(&stacked).unwrap();
            let manual = l2_normalize(&pooled).unwrap();
            for (a, b) in e.row(i).iter().zip(&manual) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn token_pooling_gradients_pass_finite_differences() {
        let spec = EncoderSpec {
            input_dim: 3,
            hidden: vec![4],
            output_dim: 3,
            activation: Activation::Tanh,
            tokens_per_sample: 2,
        };
        let mut rng = crate::test_rng(29);
        let params = spec.init_params(&mut rng);
        let batch = crate::random_matrix(&mut rng, 3, 6, 1.0);
        let weights = crate::random_matrix(&mut rng, 3, 3, 1.0);

        let (_, cache) = encode_with_cache(&params, &spec, &batch, None).unwrap();
        let (analytic, _) = encode_backward(&params, &spec, &cache, &weights).unwrap();

        let err = crate::gradcheck::finite_diff_check(
            |ps| encode(ps, &spec, &batch)?.frobenius_dot(&weights),
            &params,
            &analytic.tensors,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "finite diff err {err}");
    }

    #[test]
    fn meter_tracks_cache_lifetime() {
        let spec = tiny_spec();
        let mut rng = crate::test_rng(31);
        let params = spec.init_params(&mut rng);
        let batch = crate::random_matrix(&mut rng, 2, 5, 1.0);
        let meter = ActivationMeter::new();
        let (_, cache) = encode_with_cache(&params, &spec, &batch, Some(&meter)).unwrap();
        assert_eq!(meter.live(), cache.matrix_count());
        release_cache(cache, Some(&meter));
        assert_eq!(meter.live(), 0);
        assert!(meter.peak() > 0);
    }

    #[test]
    fn bag_of_token_hashes_is_stable() {
        let toks = vec!["galaxy".to_string(), "watch".to_string(), "watch".to_string()];
        let a = bag_of_token_hashes(&toks, 16);
        let b = bag_of_token_hashes(&toks, 16);
        assert_eq!(a, b);
        assert_eq!(a.iter().sum::<f64>(), 3.0);
    }
}
