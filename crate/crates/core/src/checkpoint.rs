//! Model checkpoints: a versioned JSON container of named tensors plus the
//! encoder specs. Fields serialize in declaration order: `format_version`,
//! `text_spec`, `image_spec`, `log_tau`, `text_tensors`, `image_tensors`;
//! each tensor as `{name, rows, cols, data}` with row-major data.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderSpec, ModelParams};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::param::ParamSet;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub text_spec: EncoderSpec,
    pub image_spec: EncoderSpec,
    pub log_tau: f64,
    text_tensors: Vec<TensorEntry>,
    image_tensors: Vec<TensorEntry>,
}

fn entries(set: &ParamSet) -> Vec<TensorEntry> {
    set.iter()
        .map(|t| TensorEntry {
            name: t.name.clone(),
            rows: t.value.rows(),
            cols: t.value.cols(),
            data: t.value.data().to_vec(),
        })
        .collect()
}

fn param_set(entries: &[TensorEntry]) -> Result<ParamSet> {
    let mut set = ParamSet::new();
    for e in entries {
        let value = Matrix::from_vec(e.rows, e.cols, e.data.clone())?;
        set.add(e.name.clone(), value);
    }
    Ok(set)
}

impl Checkpoint {
    pub fn from_params(
        params: &ModelParams,
        text_spec: &EncoderSpec,
        image_spec: &EncoderSpec,
    ) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            text_spec: text_spec.clone(),
            image_spec: image_spec.clone(),
            log_tau: params.log_tau,
            text_tensors: entries(&params.text),
            image_tensors: entries(&params.image),
        }
    }

    pub fn into_params(self) -> Result<(ModelParams, EncoderSpec, EncoderSpec)> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "checkpoint format {} unsupported (expected {FORMAT_VERSION})",
                self.format_version
            )));
        }
        let text = param_set(&self.text_tensors)?;
        let image = param_set(&self.image_tensors)?;
        if text.len() != 2 * self.text_spec.num_layers()
            || image.len() != 2 * self.image_spec.num_layers()
        {
            return Err(Error::Format("tensor count does not match spec".into()));
        }
        let params = ModelParams {
            text,
            image,
            log_tau: self.log_tau,
        };
        Ok((params, self.text_spec, self.image_spec))
    }
}

pub fn save(
    path: &Path,
    params: &ModelParams,
    text_spec: &EncoderSpec,
    image_spec: &EncoderSpec,
) -> Result<()> {
    let ckpt = Checkpoint::from_params(params, text_spec, image_spec);
    let file = std::fs::File::create(path)?;
    serde_json::to_writer(file, &ckpt)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(ModelParams, EncoderSpec, EncoderSpec)> {
    let file = std::fs::File::open(path)?;
    let ckpt: Checkpoint = serde_json::from_reader(file)?;
    ckpt.into_params()
}
