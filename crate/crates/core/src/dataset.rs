//! On-disk dataset layout shared by the pipeline stages.
//!
//! A dataset directory holds `manifest.jsonl`, an `images/` directory of P6
//! pixmaps, and optionally `text_features.json` (explicit feature rows, as
//! emitted by the synthetic generator) plus prompt matrices for zero-shot
//! evaluation. Without a feature file, text features fall back to
//! bag-of-token-hash counts over the tokenized title.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoder::bag_of_token_hashes;
use crate::error::{Error, Result};
use crate::manifest::{read_manifest, write_manifest, ProductRecord};
use crate::matrix::Matrix;
use crate::pixmap::ImageBuffer;
use crate::preprocess::tokenize_title;
use crate::synth::SynthDataset;
use crate::train::TrainDataset;

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const IMAGES_DIR: &str = "images";
pub const TEXT_FEATURES_FILE: &str = "text_features.json";
pub const CLASS_PROMPTS_FILE: &str = "class_prompts.json";
pub const GROUP_PROMPTS_FILE: &str = "group_prompts.json";

#[derive(Debug, Serialize, Deserialize)]
struct MatrixFile {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

pub fn save_matrix(path: &Path, m: &Matrix) -> Result<()> {
    let file = std::fs::File::create(path)?;
    serde_json::to_writer(
        file,
        &MatrixFile {
            rows: m.rows(),
            cols: m.cols(),
            data: m.data().to_vec(),
        },
    )?;
    Ok(())
}

pub fn load_matrix(path: &Path) -> Result<Matrix> {
    let file = std::fs::File::open(path)?;
    let mf: MatrixFile = serde_json::from_reader(file)?;
    Matrix::from_vec(mf.rows, mf.cols, mf.data)
}

/// Write a generated dataset into `dir` in the pipeline's on-disk layout.
pub fn save_synth_dataset(dir: &Path, dataset: &SynthDataset) -> Result<()> {
    std::fs::create_dir_all(dir.join(IMAGES_DIR))?;
    write_manifest(&dir.join(MANIFEST_FILE), &dataset.records)?;
    for (rec, img) in dataset.records.iter().zip(&dataset.images) {
        img.save_ppm(&dir.join(IMAGES_DIR).join(&rec.image_path))?;
    }
    save_matrix(&dir.join(TEXT_FEATURES_FILE), &dataset.text_features)?;
    save_matrix(&dir.join(CLASS_PROMPTS_FILE), &dataset.class_prompts)?;
    save_matrix(&dir.join(GROUP_PROMPTS_FILE), &dataset.group_prompts)?;
    Ok(())
}

/// A dataset loaded back from disk, ready to train or evaluate on.
#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub records: Vec<ProductRecord>,
    pub images: Vec<ImageBuffer>,
    pub text_features: Matrix,
    pub class_prompts: Option<Matrix>,
    pub group_prompts: Option<Matrix>,
}

impl LoadedDataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn image_features(&self) -> Matrix {
        let cols = self
            .images
            .first()
            .map_or(0, |i| i.width() * i.height());
        let mut m = Matrix::zeros(self.images.len(), cols);
        for (i, img) in self.images.iter().enumerate() {
            m.row_mut(i).copy_from_slice(&img.gray_features());
        }
        m
    }

    /// Intern catalog ids (first-appearance order) and assemble the training
    /// view.
    pub fn to_train_dataset(&self) -> TrainDataset {
        let mut interned: HashMap<&str, u64> = HashMap::new();
        let catalogs: Vec<u64> = self
            .records
            .iter()
            .map(|r| {
                let next = interned.len() as u64;
                *interned.entry(r.catalog_id.as_str()).or_insert(next)
            })
            .collect();
        TrainDataset {
            text: self.text_features.clone(),
            images: self.image_features(),
            catalogs,
            category_paths: self
                .records
                .iter()
                .map(|r| r.product_category.clone())
                .collect(),
        }
    }
}

/// Load `dir`, keeping only `keep` (all records when `None`). Records whose
/// image fails to load are an error here; run the cleaning stage first for
/// untrusted manifests.
pub fn load_dataset(dir: &Path, keep: Option<&[usize]>, text_dim: usize) -> Result<LoadedDataset> {
    let all_records = read_manifest(&dir.join(MANIFEST_FILE))?;
    let indices: Vec<usize> = match keep {
        Some(k) => k.to_vec(),
        None => (0..all_records.len()).collect(),
    };

    let mut records = Vec::with_capacity(indices.len());
    let mut images = Vec::with_capacity(indices.len());
    for &i in &indices {
        let rec = all_records
            .get(i)
            .ok_or_else(|| Error::Parameter(format!("kept index {i} out of range")))?
            .clone();
        let img = ImageBuffer::load_ppm(&dir.join(IMAGES_DIR).join(&rec.image_path))?;
        images.push(img);
        records.push(rec);
    }

    let features_path = dir.join(TEXT_FEATURES_FILE);
    let text_features = if features_path.exists() {
        let full = load_matrix(&features_path)?;
        if full.rows() != all_records.len() {
            return Err(Error::Dimension(format!(
                "{} feature rows for {} manifest records",
                full.rows(),
                all_records.len()
            )));
        }
        full.select_rows(&indices)
    } else {
        let mut m = Matrix::zeros(records.len(), text_dim);
        for (row, rec) in records.iter().enumerate() {
            let feats = bag_of_token_hashes(&tokenize_title(&rec.title), text_dim);
            m.row_mut(row).copy_from_slice(&feats);
        }
        m
    };

    let load_optional = |name: &str| -> Result<Option<Matrix>> {
        let p: PathBuf = dir.join(name);
        if p.exists() {
            Ok(Some(load_matrix(&p)?))
        } else {
            Ok(None)
        }
    };

    Ok(LoadedDataset {
        records,
        images,
        text_features,
        class_prompts: load_optional(CLASS_PROMPTS_FILE)?,
        group_prompts: load_optional(GROUP_PROMPTS_FILE)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, SynthSpec};

    fn spec() -> SynthSpec {
        SynthSpec {
            n_classes: 2,
            n_catalogs_per_class: 2,
            n_duplicates_per_catalog: 2,
            text_dim: 16,
            image_size: 8,
            noise_sigma: 0.1,
            category_depth: 2,
            seed: 21,
        }
    }

    #[test]
    fn synth_dataset_round_trips_through_disk() {
        let ds = generate(&spec()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_synth_dataset(dir.path(), &ds).unwrap();
        let loaded = load_dataset(dir.path(), None, 16).unwrap();
        assert_eq!(loaded.records, ds.records);
        assert_eq!(loaded.images, ds.images);
        assert_eq!(loaded.text_features.data(), ds.text_features.data());
        assert!(loaded.class_prompts.is_some());

        let train_disk = loaded.to_train_dataset();
        let train_mem = ds.to_train_dataset();
        assert_eq!(train_disk.text.data(), train_mem.text.data());
        assert_eq!(train_disk.images.data(), train_mem.images.data());
        assert_eq!(train_disk.catalogs, train_mem.catalogs);
    }

    #[test]
    fn subset_loading_respects_kept_indices() {
        let ds = generate(&spec()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_synth_dataset(dir.path(), &ds).unwrap();
        let loaded = load_dataset(dir.path(), Some(&[0, 3, 5]), 16).unwrap();
        assert_eq!(loaded.len(), 3);
        assert_eq!(loaded.records[1], ds.records[3]);
        assert_eq!(loaded.text_features.row(2), ds.text_features.row(5));
    }

    #[test]
    fn titles_hash_when_no_feature_file_exists() {
        let ds = generate(&spec()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_synth_dataset(dir.path(), &ds).unwrap();
        std::fs::remove_file(dir.path().join(TEXT_FEATURES_FILE)).unwrap();
        let loaded = load_dataset(dir.path(), None, 32).unwrap();
        assert_eq!(loaded.text_features.cols(), 32);
        // Hashed titles of distinct items differ somewhere.
        assert_ne!(
            loaded.text_features.row(0),
            loaded.text_features.row(loaded.len() - 1)
        );
    }
}
