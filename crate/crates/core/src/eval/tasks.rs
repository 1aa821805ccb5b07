//! Transfer protocols over frozen embeddings: zero-shot classification with
//! optional multimodal averaging, leave-one-out top-1 matching, a linear
//! probe, end-to-end fine-tuning with a classification head, and the
//! concatenate/project/cluster pipeline.

use crate::encoder::{encode, encode_backward, encode_with_cache, EncoderSpec};
use crate::error::{Error, Result};
use crate::eval::kmeans::{kmeans, ClusteringResult, DEFAULT_MAX_ITER, DEFAULT_TOL};
use crate::eval::pca::{effective_rank, PcaModel};
use crate::exec::ExecMode;
use crate::matrix::Matrix;
use crate::optim::{AdamWConfig, ParamSetAdamW};
use crate::param::ParamSet;

/// Unit-norm embeddings paired with class ids.
#[derive(Debug, Clone)]
pub struct LabeledEmbeddings {
    pub embeddings: Matrix,
    pub labels: Vec<usize>,
}

impl LabeledEmbeddings {
    pub fn new(embeddings: Matrix, labels: Vec<usize>) -> Result<Self> {
        if embeddings.rows() != labels.len() {
            return Err(Error::Dimension(format!(
                "{} embedding rows vs {} labels",
                embeddings.rows(),
                labels.len()
            )));
        }
        for i in 0..embeddings.rows() {
            let norm: f64 = embeddings.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-6 {
                return Err(Error::Parameter(format!(
                    "row {i} has norm {norm}, expected unit rows"
                )));
            }
        }
        Ok(Self { embeddings, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Image,
    Multimodal,
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    dot / (na.sqrt() * nb.sqrt()).max(1e-300)
}

/// Most similar class-text row per item; ties go to the lowest class index.
/// Multimodal items are the renormalized average of the two embeddings.
pub fn zero_shot_classify(
    item_img: Option<&Matrix>,
    item_txt: Option<&Matrix>,
    class_txt: &Matrix,
    mode: Modality,
) -> Result<Vec<usize>> {
    let items: Matrix = match mode {
        Modality::Image => item_img
            .ok_or_else(|| Error::Parameter("image mode needs image embeddings".into()))?
            .clone(),
        Modality::Text => item_txt
            .ok_or_else(|| Error::Parameter("text mode needs text embeddings".into()))?
            .clone(),
        Modality::Multimodal => {
            let x = item_img
                .ok_or_else(|| Error::Parameter("multimodal mode needs image embeddings".into()))?;
            let y = item_txt
                .ok_or_else(|| Error::Parameter("multimodal mode needs text embeddings".into()))?;
            if x.rows() != y.rows() || x.cols() != y.cols() {
                return Err(Error::Dimension("modality shapes differ".into()));
            }
            let mut avg = x.clone();
            avg.add_scaled(y, 1.0)?;
            avg.scale(0.5);
            // Cosine scoring ignores the norm, so the renormalization of the
            // averaged vector is implicit.
            avg
        }
    };
    if items.cols() != class_txt.cols() {
        return Err(Error::Dimension("item/class embedding dims differ".into()));
    }
    let mut preds = Vec::with_capacity(items.rows());
    for i in 0..items.rows() {
        let mut best = 0usize;
        let mut best_score = cosine(items.row(i), class_txt.row(0));
        for k in 1..class_txt.rows() {
            let score = cosine(items.row(i), class_txt.row(k));
            if score > best_score {
                best_score = score;
                best = k;
            }
        }
        preds.push(best);
    }
    Ok(preds)
}

/// Fraction of queries whose nearest pool row (cosine) shares the query's
/// label. `self_map[q]`, when given, is the pool row holding query `q`
/// itself, which is skipped (leave-one-out).
pub fn top1_matching_accuracy(
    queries: &LabeledEmbeddings,
    pool: &LabeledEmbeddings,
    self_map: Option<&[usize]>,
) -> Result<f64> {
    if pool.is_empty() {
        return Err(Error::Capacity("matching pool is empty".into()));
    }
    if let Some(map) = self_map {
        if map.len() != queries.len() {
            return Err(Error::Dimension("self_map length mismatch".into()));
        }
    }
    let mut hits = 0usize;
    for q in 0..queries.len() {
        let skip = self_map.map(|m| m[q]);
        let mut best: Option<(usize, f64)> = None;
        for p in 0..pool.len() {
            if skip == Some(p) {
                continue;
            }
            let score = cosine(queries.embeddings.row(q), pool.embeddings.row(p));
            if best.is_none_or(|(_, s)| score > s) {
                best = Some((p, score));
            }
        }
        let (nearest, _) = best.ok_or_else(|| {
            Error::Capacity("pool only contains the query itself".into())
        })?;
        if pool.labels[nearest] == queries.labels[q] {
            hits += 1;
        }
    }
    Ok(hits as f64 / queries.len().max(1) as f64)
}

/// Dense class indexing shared between probe training and evaluation.
fn class_vocabulary(labels: &[usize]) -> Vec<usize> {
    let mut vocab: Vec<usize> = labels.to_vec();
    vocab.sort_unstable();
    vocab.dedup();
    vocab
}

fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

fn head_logits(x: &Matrix, head: &ParamSet) -> Result<Matrix> {
    let mut logits = x.matmul(&head.tensor(0).value)?;
    let bias = &head.tensor(1).value;
    for i in 0..logits.rows() {
        for (l, b) in logits.row_mut(i).iter_mut().zip(bias.row(0)) {
            *l += b;
        }
    }
    Ok(logits)
}

/// Cross-entropy gradient of a linear head: returns (dW, db, dX).
fn head_backward(
    x: &Matrix,
    head: &ParamSet,
    probs: &Matrix,
    class_of: &[usize],
) -> Result<(Matrix, Matrix, Matrix)> {
    let n = x.rows() as f64;
    let mut d_z = probs.clone();
    for (i, &c) in class_of.iter().enumerate() {
        d_z.set(i, c, d_z.get(i, c) - 1.0);
    }
    d_z.scale(1.0 / n);
    let d_w = x.transpose().matmul(&d_z)?;
    let d_b = Matrix::from_vec(1, d_z.cols(), d_z.col_sums())?;
    let d_x = d_z.matmul(&head.tensor(0).value.transpose())?;
    Ok((d_w, d_b, d_x))
}

fn argmax_row(row: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = k;
        }
    }
    best
}

/// Multinomial logistic regression on frozen embeddings, trained full-batch
/// with AdamW. Returns test accuracy; the encoders are never touched.
pub fn linear_probe(
    train: &LabeledEmbeddings,
    test: &LabeledEmbeddings,
    epochs: usize,
    lr: f64,
) -> Result<f64> {
    let vocab = class_vocabulary(&train.labels);
    if vocab.len() < 2 {
        return Err(Error::DegenerateTask(
            "linear probe needs at least two training classes".into(),
        ));
    }
    let class_index = |label: usize| vocab.binary_search(&label).ok();
    let train_classes: Vec<usize> = train
        .labels
        .iter()
        .map(|&l| class_index(l).expect("train labels define the vocabulary"))
        .collect();

    let d = train.embeddings.cols();
    let k = vocab.len();
    let mut head = ParamSet::new();
    head.add("head.weight", Matrix::zeros(d, k));
    head.add("head.bias", Matrix::zeros(1, k));
    let mut opt = ParamSetAdamW::new(
        &head,
        AdamWConfig {
            lr,
            weight_decay: 0.0,
            ..Default::default()
        },
    );

    for _ in 0..epochs {
        let logits = head_logits(&train.embeddings, &head)?;
        let probs = softmax_rows(&logits);
        let (d_w, d_b, _) = head_backward(&train.embeddings, &head, &probs, &train_classes)?;
        opt.step(&mut head, &[d_w, d_b])?;
    }

    let logits = head_logits(&test.embeddings, &head)?;
    let mut hits = 0usize;
    for (i, &label) in test.labels.iter().enumerate() {
        let pred = argmax_row(logits.row(i));
        if class_index(label) == Some(pred) {
            hits += 1;
        }
    }
    Ok(hits as f64 / test.len().max(1) as f64)
}

#[derive(Debug, Clone, Copy)]
pub struct FineTuneConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Freeze the encoder and train the head only.
    pub freeze_encoder: bool,
}

/// End-to-end fine-tuning: a linear head on one tower's embeddings, trained
/// with cross-entropy; gradients flow into the encoder unless frozen.
/// Returns test accuracy.
pub fn fine_tune(
    tower: &ParamSet,
    spec: &EncoderSpec,
    train_features: &Matrix,
    train_labels: &[usize],
    test_features: &Matrix,
    test_labels: &[usize],
    cfg: FineTuneConfig,
) -> Result<f64> {
    let vocab = class_vocabulary(train_labels);
    if vocab.len() < 2 {
        return Err(Error::DegenerateTask(
            "fine-tuning needs at least two training classes".into(),
        ));
    }
    let class_index = |label: usize| vocab.binary_search(&label).ok();
    let train_classes: Vec<usize> = train_labels
        .iter()
        .map(|&l| class_index(l).expect("train labels define the vocabulary"))
        .collect();

    let mut encoder = tower.clone();
    let k = vocab.len();
    let mut head = ParamSet::new();
    head.add("head.weight", Matrix::zeros(spec.output_dim, k));
    head.add("head.bias", Matrix::zeros(1, k));
    let adam = AdamWConfig {
        lr: cfg.lr,
        weight_decay: 0.0,
        ..Default::default()
    };
    let mut head_opt = ParamSetAdamW::new(&head, adam);
    let mut enc_opt = ParamSetAdamW::new(&encoder, adam);

    for _ in 0..cfg.epochs {
        let (emb, cache) = encode_with_cache(&encoder, spec, train_features, None)?;
        let logits = head_logits(&emb, &head)?;
        let probs = softmax_rows(&logits);
        let (d_w, d_b, d_emb) = head_backward(&emb, &head, &probs, &train_classes)?;
        if !cfg.freeze_encoder {
            let (enc_grads, _) = encode_backward(&encoder, spec, &cache, &d_emb)?;
            enc_opt.step(&mut encoder, &enc_grads.tensors)?;
        }
        head_opt.step(&mut head, &[d_w, d_b])?;
    }

    let emb = encode(&encoder, spec, test_features)?;
    let logits = head_logits(&emb, &head)?;
    let mut hits = 0usize;
    for (i, &label) in test_labels.iter().enumerate() {
        if class_index(label) == Some(argmax_row(logits.row(i))) {
            hits += 1;
        }
    }
    Ok(hits as f64 / test_labels.len().max(1) as f64)
}

/// Concatenate text and image embeddings, project with PCA (dimension
/// silently clamped to the effective rank), then k-means.
pub fn cluster_products(
    txt: &Matrix,
    img: &Matrix,
    k: usize,
    out_dim: usize,
    seed: u64,
) -> Result<ClusteringResult> {
    let joined = Matrix::hstack(txt, img)?;
    let max_dim = joined.rows().min(joined.cols());
    let probe = PcaModel::fit(&joined, out_dim.min(max_dim).max(1))?;
    let rank = effective_rank(&probe.eigenvalues).max(1);
    let dim = out_dim.min(max_dim).min(rank).max(1);
    let projected = if dim == probe.components.cols() {
        probe.transform(&joined)?
    } else {
        PcaModel::fit(&joined, dim)?.transform(&joined)?
    };
    kmeans(
        &projected,
        k,
        seed,
        DEFAULT_MAX_ITER,
        DEFAULT_TOL,
        ExecMode::Sequential,
    )
}
