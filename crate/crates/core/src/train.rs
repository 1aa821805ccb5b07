//! Training steps and loop.
//!
//! Two step implementations must agree: [`naive_step`] runs one full-batch
//! forward/backward and serves as the oracle; [`multistream_step`] rebuilds
//! the same gradients from micro-batches in two streams so that peak
//! activation memory tracks the micro-batch size rather than the logical
//! batch size.
//!
//! Stream 1 forwards every micro-batch without retaining activations,
//! concatenates the embeddings, and computes the full similarity matrix, the
//! loss, and the closed-form embedding gradients (plus the log-temperature
//! gradient, which needs nothing beyond the similarity matrix). Stream 2
//! re-forwards each micro-batch with retention, injects that micro-batch's
//! rows of the embedding gradient, and backpropagates; per-micro parameter
//! gradients are folded in a fixed order.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{
    encode, encode_backward, encode_with_cache, release_cache, ActivationMeter, EncoderSpec,
    ModelParams,
};
use crate::error::{Error, Result};
use crate::exec::{self, ExecMode};
use crate::loss::{
    eclip_loss, similarity_matrix, similarity_matrix_blocked, soft_label_matrix, SoftLabelMatrix,
};
use crate::matrix::Matrix;
use crate::optim::{adamw_update, AdamWConfig, AdamWState};
use crate::sampling::{compose_batch_category, compose_batch_uniform, CategoryTree};
use crate::schedule::{batch_size_schedule, ScheduleConfig};

/// One training batch: paired text/image features plus catalog keys.
#[derive(Debug, Clone)]
pub struct TrainBatch {
    pub text: Matrix,
    pub images: Matrix,
    pub catalogs: Vec<u64>,
}

impl TrainBatch {
    pub fn len(&self) -> usize {
        self.catalogs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.catalogs.is_empty()
    }
}

/// In-memory training set with interned catalog keys and category paths.
#[derive(Debug, Clone)]
pub struct TrainDataset {
    pub text: Matrix,
    pub images: Matrix,
    pub catalogs: Vec<u64>,
    pub category_paths: Vec<Vec<String>>,
}

impl TrainDataset {
    pub fn len(&self) -> usize {
        self.catalogs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.catalogs.is_empty()
    }

    pub fn gather(&self, indices: &[usize]) -> TrainBatch {
        TrainBatch {
            text: self.text.select_rows(indices),
            images: self.images.select_rows(indices),
            catalogs: indices.iter().map(|&i| self.catalogs[i]).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.catalogs.len();
        if self.text.rows() != n || self.images.rows() != n || self.category_paths.len() != n {
            return Err(Error::Dimension(
                "dataset fields disagree on the item count".into(),
            ));
        }
        Ok(())
    }
}

/// Whether targets use catalog-based soft labels or plain identity labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelMode {
    #[default]
    Soft,
    Hard,
}

fn labels_for(mode: LabelMode, catalogs: &[u64]) -> SoftLabelMatrix {
    match mode {
        LabelMode::Soft => soft_label_matrix(catalogs),
        LabelMode::Hard => SoftLabelMatrix::identity(catalogs.len()),
    }
}

/// Gradients for every model parameter, aligned with [`ModelParams`].
#[derive(Debug, Clone)]
pub struct ModelGrads {
    pub text: Vec<Matrix>,
    pub image: Vec<Matrix>,
    pub log_tau: f64,
}

impl ModelGrads {
    pub fn zeros_like(params: &ModelParams) -> Self {
        Self {
            text: params
                .text
                .iter()
                .map(|t| Matrix::zeros(t.value.rows(), t.value.cols()))
                .collect(),
            image: params
                .image
                .iter()
                .map(|t| Matrix::zeros(t.value.rows(), t.value.cols()))
                .collect(),
            log_tau: 0.0,
        }
    }

    /// Max relative discrepancy across every coordinate, log-temperature
    /// included.
    pub fn max_rel_diff(&self, other: &ModelGrads) -> f64 {
        let mut worst = (self.log_tau - other.log_tau).abs()
            / 1.0_f64.max(self.log_tau.abs()).max(other.log_tau.abs());
        for (a, b) in self.text.iter().zip(&other.text) {
            worst = worst.max(a.max_rel_diff(b));
        }
        for (a, b) in self.image.iter().zip(&other.image) {
            worst = worst.max(a.max_rel_diff(b));
        }
        worst
    }

    pub fn is_finite(&self) -> bool {
        self.log_tau.is_finite()
            && self.text.iter().all(Matrix::is_finite)
            && self.image.iter().all(Matrix::is_finite)
    }
}

#[derive(Debug, Clone)]
pub struct StepOutput {
    pub loss: f64,
    pub grads: ModelGrads,
}

/// Full-batch forward/backward in one pass: the gradient oracle.
pub fn naive_step(
    params: &ModelParams,
    text_spec: &EncoderSpec,
    image_spec: &EncoderSpec,
    batch: &TrainBatch,
    label_mode: LabelMode,
) -> Result<StepOutput> {
    let (txt_emb, txt_cache) = encode_with_cache(&params.text, text_spec, &batch.text, None)?;
    let (img_emb, img_cache) = encode_with_cache(&params.image, image_spec, &batch.images, None)?;

    let sim = similarity_matrix(&img_emb, &txt_emb)?;
    let labels = labels_for(label_mode, &batch.catalogs);
    let out = eclip_loss(&sim, &labels, params.tau())?;

    let d_img = out.d_sim.matmul(&txt_emb)?;
    let d_txt = out.d_sim.transpose().matmul(&img_emb)?;
    let log_tau_grad = out.d_log_tau(&sim);

    let (text_grads, _) = encode_backward(&params.text, text_spec, &txt_cache, &d_txt)?;
    let (image_grads, _) = encode_backward(&params.image, image_spec, &img_cache, &d_img)?;

    Ok(StepOutput {
        loss: out.loss,
        grads: ModelGrads {
            text: text_grads.tensors,
            image: image_grads.tensors,
            log_tau: log_tau_grad,
        },
    })
}

/// Two-stream accumulation step. With `micro_size == N` this degenerates to
/// the naive step and matches it bit for bit; for smaller micro-batches the
/// only difference is the association order of the cross-micro-batch sums.
#[allow(clippy::too_many_arguments)]
pub fn multistream_step(
    params: &ModelParams,
    text_spec: &EncoderSpec,
    image_spec: &EncoderSpec,
    batch: &TrainBatch,
    micro_size: usize,
    label_mode: LabelMode,
    mode: ExecMode,
    meter: Option<&ActivationMeter>,
) -> Result<StepOutput> {
    let n = batch.len();
    if micro_size == 0 || micro_size > n {
        return Err(Error::Parameter(format!(
            "micro size {micro_size} invalid for batch of {n}"
        )));
    }
    let ranges: Vec<(usize, usize)> = (0..n)
        .step_by(micro_size)
        .map(|s| (s, (s + micro_size).min(n)))
        .collect();

    // Stream 1: activation-free forwards, in micro-batch order.
    let stream1 = exec::map_items(mode, &ranges, |&(start, end)| -> Result<(Matrix, Matrix)> {
        let idx: Vec<usize> = (start..end).collect();
        let txt = encode(&params.text, text_spec, &batch.text.select_rows(&idx))?;
        let img = encode(&params.image, image_spec, &batch.images.select_rows(&idx))?;
        Ok((txt, img))
    });
    let mut txt_emb = Matrix::zeros(0, text_spec.output_dim);
    let mut img_emb = Matrix::zeros(0, image_spec.output_dim);
    for part in stream1 {
        let (t, i) = part?;
        txt_emb = Matrix::vstack(&txt_emb, &t)?;
        img_emb = Matrix::vstack(&img_emb, &i)?;
    }

    let sim = similarity_matrix_blocked(&img_emb, &txt_emb, micro_size, mode)?;
    let labels = labels_for(label_mode, &batch.catalogs);
    let out = eclip_loss(&sim, &labels, params.tau())?;

    let d_img = out.d_sim.matmul(&txt_emb)?;
    let d_txt = out.d_sim.transpose().matmul(&img_emb)?;
    // The temperature touches only the similarity matrix, so its gradient is
    // complete after stream 1.
    let log_tau_grad = out.d_log_tau(&sim);

    // Stream 2: re-forward with retention, inject this micro-batch's rows of
    // the embedding gradient, backpropagate.
    let stream2 = exec::map_items(
        mode,
        &ranges,
        |&(start, end)| -> Result<(crate::param::GradSet, crate::param::GradSet)> {
            let idx: Vec<usize> = (start..end).collect();
            let (_, txt_cache) =
                encode_with_cache(&params.text, text_spec, &batch.text.select_rows(&idx), meter)?;
            let (_, img_cache) = encode_with_cache(
                &params.image,
                image_spec,
                &batch.images.select_rows(&idx),
                meter,
            )?;
            let (tg, _) =
                encode_backward(&params.text, text_spec, &txt_cache, &d_txt.select_rows(&idx))?;
            let (ig, _) =
                encode_backward(&params.image, image_spec, &img_cache, &d_img.select_rows(&idx))?;
            release_cache(txt_cache, meter);
            release_cache(img_cache, meter);
            Ok((tg, ig))
        },
    );

    let mut text_grads = crate::param::GradSet::zeros_like(&params.text);
    let mut image_grads = crate::param::GradSet::zeros_like(&params.image);
    for part in stream2 {
        let (tg, ig) = part?;
        text_grads.add(&tg)?;
        image_grads.add(&ig)?;
    }

    Ok(StepOutput {
        loss: out.loss,
        grads: ModelGrads {
            text: text_grads.tensors,
            image: image_grads.tensors,
            log_tau: log_tau_grad,
        },
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub schedule: ScheduleConfig,
    /// Micro-batch size for the accumulation scheme.
    pub micro_batch: usize,
    pub optimizer: AdamWConfig,
    /// Fraction of steps before category sampling can activate.
    pub warmup_fraction: f64,
    /// Per-batch activation probability of category sampling after warmup.
    pub negative_sampling_prob: f64,
    /// Category truncation level; `None` means leaf depth - 1.
    pub negative_sampling_level: Option<usize>,
    pub label_mode: LabelMode,
    pub seed: u64,
    pub text_spec: EncoderSpec,
    pub image_spec: EncoderSpec,
    /// Metrics record cadence in steps.
    pub eval_interval: usize,
    /// Checkpoint cadence in steps; 0 disables checkpoints.
    pub checkpoint_interval: usize,
    pub deterministic: bool,
    pub freeze_text: bool,
    pub freeze_image: bool,
}

impl TrainConfig {
    pub fn validate(&self, dataset: &TrainDataset) -> Result<()> {
        self.schedule.validate()?;
        self.optimizer.validate()?;
        self.text_spec.validate()?;
        self.image_spec.validate()?;
        dataset.validate()?;
        if self.micro_batch == 0 || self.micro_batch > self.schedule.b0 {
            return Err(Error::Parameter(format!(
                "micro_batch {} must be in 1..=b0 ({})",
                self.micro_batch, self.schedule.b0
            )));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction)
            || !(0.0..=1.0).contains(&self.negative_sampling_prob)
        {
            return Err(Error::Parameter(
                "warmup_fraction and negative_sampling_prob must be in [0,1]".into(),
            ));
        }
        if self.eval_interval == 0 {
            return Err(Error::Parameter("eval_interval must be >= 1".into()));
        }
        if dataset.len() < self.schedule.bmax {
            return Err(Error::Capacity(format!(
                "dataset of {} cannot fill bmax {}",
                dataset.len(),
                self.schedule.bmax
            )));
        }
        if dataset.text.cols() != self.text_spec.batch_cols() {
            return Err(Error::Dimension(format!(
                "text features have {} cols, text spec expects {}",
                dataset.text.cols(),
                self.text_spec.batch_cols()
            )));
        }
        if dataset.images.cols() != self.image_spec.batch_cols() {
            return Err(Error::Dimension(format!(
                "image features have {} cols, image spec expects {}",
                dataset.images.cols(),
                self.image_spec.batch_cols()
            )));
        }
        Ok(())
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub loss: f64,
    pub batch_size: usize,
    pub tau: f64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub eval: BTreeMap<String, f64>,
}

/// Optional callbacks invoked during training.
#[derive(Default)]
pub struct TrainHooks<'a> {
    /// Runs at every metrics record; its output lands in the record.
    #[allow(clippy::type_complexity)]
    pub eval: Option<Box<dyn FnMut(usize, &ModelParams) -> BTreeMap<String, f64> + 'a>>,
    /// Runs every `checkpoint_interval` steps.
    #[allow(clippy::type_complexity)]
    pub checkpoint: Option<Box<dyn FnMut(usize, &ModelParams) -> Result<()> + 'a>>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub metrics: Vec<MetricsRecord>,
}

/// Per-seed rng streams, shared between the loop and its mirror in tests.
pub fn sampler_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

pub fn coin_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    rng
}

/// Run the full training loop: scheduled batch sizes, category-based hard
/// negatives after warmup, two-stream gradient accumulation, AdamW with a
/// constant learning rate, periodic metrics records and checkpoints.
/// Reproducible per seed.
pub fn train(
    cfg: &TrainConfig,
    dataset: &TrainDataset,
    hooks: &mut TrainHooks<'_>,
) -> Result<TrainOutcome> {
    cfg.validate(dataset)?;
    let mut params = ModelParams::init(&cfg.text_spec, &cfg.image_spec, cfg.seed)?;
    let mut state = AdamWState::new(&params);
    let tree = CategoryTree::build(&dataset.category_paths)?;
    let mut sampler = sampler_rng(cfg.seed);
    let mut coin = coin_rng(cfg.seed);
    let mode = ExecMode::from_deterministic(cfg.deterministic);

    let total = cfg.schedule.total_steps;
    let warmup_steps = (cfg.warmup_fraction * total as f64).floor() as usize;
    let level = cfg
        .negative_sampling_level
        .unwrap_or_else(|| tree.max_depth().saturating_sub(1).max(1));

    let mut metrics = Vec::new();
    for t in 0..total {
        let b = batch_size_schedule(t, &cfg.schedule)?;
        let toss: f64 = coin.random();
        let use_category = t >= warmup_steps && toss < cfg.negative_sampling_prob;
        let indices = if use_category {
            compose_batch_category(&tree, b, level, &mut sampler)?
        } else {
            compose_batch_uniform(dataset.len(), b, &mut sampler)?
        };
        let batch = dataset.gather(&indices);

        let step_out = multistream_step(
            &params,
            &cfg.text_spec,
            &cfg.image_spec,
            &batch,
            cfg.micro_batch.min(b),
            cfg.label_mode,
            mode,
            None,
        )?;

        let text_backup = cfg.freeze_text.then(|| params.text.clone());
        let image_backup = cfg.freeze_image.then(|| params.image.clone());
        adamw_update(&mut params, &step_out.grads, &mut state, &cfg.optimizer)?;
        if let Some(backup) = text_backup {
            params.text = backup;
        }
        if let Some(backup) = image_backup {
            params.image = backup;
        }

        if t % cfg.eval_interval == 0 {
            let eval = hooks
                .eval
                .as_mut()
                .map(|f| f(t, &params))
                .unwrap_or_default();
            metrics.push(MetricsRecord {
                step: t,
                loss: step_out.loss,
                batch_size: b,
                tau: params.tau(),
                eval,
            });
        }
        if cfg.checkpoint_interval > 0 && (t + 1) % cfg.checkpoint_interval == 0 {
            if let Some(f) = hooks.checkpoint.as_mut() {
                f(t, &params)?;
            }
        }
    }
    Ok(TrainOutcome { params, metrics })
}
