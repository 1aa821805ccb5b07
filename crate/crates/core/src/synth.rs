//! Deterministic synthetic product datasets with controllable latent
//! classes, catalogs of duplicate listings, category trees, and noise.
//!
//! Structure: each class owns a random text prototype and a distinct striped
//! image pattern. A catalog draws a class-level offset of scale `sigma`
//! (text) and a pixel noise field (image); the catalog's duplicate listings
//! share that draw up to a much smaller per-member jitter, so duplicates are
//! near-identical, bit-identical at `sigma = 0`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifest::ProductRecord;
use crate::matrix::Matrix;
use crate::pixmap::ImageBuffer;
use crate::train::TrainDataset;

/// Member jitter relative to the catalog-level noise scale. Duplicates are
/// the same product listed with visible variation: close enough that the
/// catalog is the nearest-neighbour group, far enough apart that labels
/// treating them as distinct products have something to tear apart.
const DUP_JITTER: f64 = 0.3;
/// Pixel amplitude of the catalog-level image noise at sigma = 1.
const CATALOG_PIXEL_SCALE: f64 = 64.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_classes: usize,
    pub n_catalogs_per_class: usize,
    pub n_duplicates_per_catalog: usize,
    pub text_dim: usize,
    /// Images are square `image_size x image_size`.
    pub image_size: usize,
    pub noise_sigma: f64,
    /// Category tree depth, at most 4.
    pub category_depth: usize,
    pub seed: u64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes == 0
            || self.n_catalogs_per_class == 0
            || self.n_duplicates_per_catalog == 0
            || self.text_dim == 0
            || self.image_size == 0
            || self.category_depth == 0
        {
            return Err(Error::Parameter("all synth counts must be >= 1".into()));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::Parameter("noise_sigma must be >= 0".into()));
        }
        if self.category_depth > crate::sampling::MAX_CATEGORY_DEPTH {
            return Err(Error::Parameter(format!(
                "category_depth > {}",
                crate::sampling::MAX_CATEGORY_DEPTH
            )));
        }
        Ok(())
    }

    pub fn total_items(&self) -> usize {
        self.n_classes * self.n_catalogs_per_class * self.n_duplicates_per_catalog
    }
}

#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub records: Vec<ProductRecord>,
    /// n x text_dim feature rows aligned with `records`.
    pub text_features: Matrix,
    pub images: Vec<ImageBuffer>,
    pub class_of: Vec<usize>,
    /// Global catalog index per item.
    pub catalog_of: Vec<usize>,
    /// Root category group per item.
    pub group_of: Vec<usize>,
    /// Class prototypes: the class-name text stand-ins for zero-shot tasks.
    pub class_prompts: Matrix,
    /// Per-root-group mean prototypes (attribute-value text stand-ins).
    pub group_prompts: Matrix,
}

impl SynthDataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Flattened gray pixels in [0,1], one row per item.
    pub fn image_features(&self) -> Matrix {
        let cols = self.images[0].width() * self.images[0].height();
        let mut m = Matrix::zeros(self.images.len(), cols);
        for (i, img) in self.images.iter().enumerate() {
            m.row_mut(i).copy_from_slice(&img.gray_features());
        }
        m
    }

    pub fn to_train_dataset(&self) -> TrainDataset {
        TrainDataset {
            text: self.text_features.clone(),
            images: self.image_features(),
            catalogs: self.catalog_of.iter().map(|&c| c as u64).collect(),
            category_paths: self
                .records
                .iter()
                .map(|r| r.product_category.clone())
                .collect(),
        }
    }
}

fn category_path(class: usize, depth: usize) -> Vec<String> {
    (0..depth)
        .map(|level| format!("g{level}-{}", class >> (depth - 1 - level)))
        .collect()
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb).max(1e-300)
}

/// Rejection-sample class prototypes with pairwise cosine below 0.5.
fn sample_prototypes(
    n_classes: usize,
    dim: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<f64>>> {
    let normal = Normal::new(0.0, 1.0).expect("valid normal");
    let mut protos: Vec<Vec<f64>> = Vec::with_capacity(n_classes);
    let mut attempts = 0;
    while protos.len() < n_classes {
        attempts += 1;
        if attempts > 1000 * n_classes {
            return Err(Error::Parameter(format!(
                "could not place {n_classes} prototypes with pairwise cosine < 0.5 in {dim} dims"
            )));
        }
        let candidate: Vec<f64> = (0..dim).map(|_| normal.sample(rng)).collect();
        if protos.iter().all(|p| cos(p, &candidate) < 0.5) {
            protos.push(candidate);
        }
    }
    Ok(protos)
}

fn class_pattern(class: usize, size: usize) -> Vec<f64> {
    let a = 1 + class % 4;
    let b = 1 + (class / 4) % 4;
    let period = 5 + 3 * (class / 16);
    let phase = class % period;
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let on = (a * x + b * y + phase) % period < period.div_ceil(2);
            out.push(if on { 176.0 } else { 64.0 });
        }
    }
    out
}

/// Generate the dataset: manifest records, text features, and images, fully
/// reproducible per seed.
pub fn generate(spec: &SynthSpec) -> Result<SynthDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(3);
    let normal = Normal::new(0.0, 1.0).expect("valid normal");

    let protos = sample_prototypes(spec.n_classes, spec.text_dim, &mut rng)?;
    let size = spec.image_size;
    let sigma = spec.noise_sigma;

    let n = spec.total_items();
    let mut records = Vec::with_capacity(n);
    let mut text = Matrix::zeros(n, spec.text_dim);
    let mut images = Vec::with_capacity(n);
    let mut class_of = Vec::with_capacity(n);
    let mut catalog_of = Vec::with_capacity(n);
    let mut group_of = Vec::with_capacity(n);

    let mut item = 0usize;
    for class in 0..spec.n_classes {
        let pattern = class_pattern(class, size);
        let path = category_path(class, spec.category_depth);
        let group = class >> (spec.category_depth - 1);
        for cat in 0..spec.n_catalogs_per_class {
            let catalog = class * spec.n_catalogs_per_class + cat;
            // Catalog-level draws, shared by every duplicate in the catalog.
            let text_center: Vec<f64> = protos[class]
                .iter()
                .map(|&p| p + sigma * normal.sample(&mut rng))
                .collect();
            let image_field: Vec<f64> = (0..size * size)
                .map(|_| sigma * CATALOG_PIXEL_SCALE * normal.sample(&mut rng))
                .collect();

            for dup in 0..spec.n_duplicates_per_catalog {
                for (slot, &center) in text.row_mut(item).iter_mut().zip(&text_center) {
                    *slot = center + sigma * DUP_JITTER * normal.sample(&mut rng);
                }
                let mut pixels = Vec::with_capacity(size * size * 3);
                for (base, field) in pattern.iter().zip(&image_field) {
                    let jitter =
                        sigma * CATALOG_PIXEL_SCALE * DUP_JITTER * normal.sample(&mut rng);
                    let v = (base + field + jitter).clamp(0.0, 255.0).round() as u8;
                    pixels.extend_from_slice(&[v, v, v]);
                }
                let image = ImageBuffer::new(size, size, pixels)?;

                let day = item % 28 + 1;
                let month = (item / 28) % 12 + 1;
                let year = 2022 + item / (28 * 12);
                records.push(ProductRecord {
                    title: format!("item class{class} lot{catalog} unit{dup}"),
                    brand_name: Some(format!("brand{group}")),
                    maker_name: None,
                    mall_name: Some(format!("mall{}", item % 5)),
                    mall_category: path.clone(),
                    price: 1_000 + 10 * class as i64 + dup as i64,
                    registration_time: format!("{year:04}-{month:02}-{day:02}"),
                    popularity: rng.random::<f64>() * 100.0,
                    image_path: format!("img{item:05}.ppm"),
                    product_category: path.clone(),
                    catalog_id: format!("cat{catalog:05}"),
                    product_id: format!("p{item:05}"),
                    flagged: false,
                });
                images.push(image);
                class_of.push(class);
                catalog_of.push(catalog);
                group_of.push(group);
                item += 1;
            }
        }
    }

    let n_groups = ((spec.n_classes - 1) >> (spec.category_depth - 1)) + 1;
    let mut class_prompts = Matrix::zeros(spec.n_classes, spec.text_dim);
    for (c, proto) in protos.iter().enumerate() {
        class_prompts.row_mut(c).copy_from_slice(proto);
    }
    let mut group_prompts = Matrix::zeros(n_groups, spec.text_dim);
    let mut group_counts = vec![0usize; n_groups];
    for (c, proto) in protos.iter().enumerate() {
        let g = c >> (spec.category_depth - 1);
        group_counts[g] += 1;
        for (slot, v) in group_prompts.row_mut(g).iter_mut().zip(proto) {
            *slot += v;
        }
    }
    for g in 0..n_groups {
        let inv = 1.0 / group_counts[g].max(1) as f64;
        for v in group_prompts.row_mut(g) {
            *v *= inv;
        }
    }

    Ok(SynthDataset {
        records,
        text_features: text,
        images,
        class_of,
        catalog_of,
        group_of,
        class_prompts,
        group_prompts,
    })
}

/// Split indices: the last duplicate of every catalog is held out (when the
/// catalog has more than one member).
#[derive(Debug, Clone)]
pub struct HoldoutSplit {
    pub train: Vec<usize>,
    pub held_out: Vec<usize>,
}

pub fn holdout_last_duplicate(dataset: &SynthDataset) -> HoldoutSplit {
    use std::collections::HashMap;
    let mut last_of: HashMap<usize, usize> = HashMap::new();
    let mut members: HashMap<usize, usize> = HashMap::new();
    for (i, &cat) in dataset.catalog_of.iter().enumerate() {
        last_of.insert(cat, i);
        *members.entry(cat).or_insert(0) += 1;
    }
    let mut train = Vec::new();
    let mut held = Vec::new();
    for (i, &cat) in dataset.catalog_of.iter().enumerate() {
        if members[&cat] > 1 && last_of[&cat] == i {
            held.push(i);
        } else {
            train.push(i);
        }
    }
    HoldoutSplit {
        train,
        held_out: held,
    }
}
