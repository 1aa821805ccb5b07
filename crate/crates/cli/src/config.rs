//! Run configuration: TOML with one section per pipeline stage. Unknown
//! keys are rejected. The seed and output directory may be overridden by
//! `ECLIP_SEED` / `ECLIP_OUT` or the matching CLI flags (flag wins over
//! environment, environment over file).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use eclip_core::encoder::{Activation, EncoderSpec};
use eclip_core::optim::AdamWConfig;
use eclip_core::schedule::ScheduleConfig;
use eclip_core::synth::SynthSpec;
use eclip_core::train::{LabelMode, TrainConfig};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Directory holding the dataset (written by synth-gen, read by the
    /// other stages).
    pub dataset_dir: PathBuf,
    #[serde(default)]
    pub deterministic: bool,
    pub synth: SynthSection,
    #[serde(default)]
    pub preprocess: PreprocessSection,
    pub model: ModelSection,
    pub train: TrainSection,
    #[serde(default)]
    pub eval: EvalSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSection {
    pub n_classes: usize,
    pub n_catalogs_per_class: usize,
    pub n_duplicates_per_catalog: usize,
    pub text_dim: usize,
    pub image_size: usize,
    pub noise_sigma: f64,
    pub category_depth: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessSection {
    /// Reject images whose short side is below this.
    pub min_side: usize,
    /// Keep a single record per catalog id (aggressive filtering).
    pub catalog_filter: bool,
}

impl Default for PreprocessSection {
    fn default() -> Self {
        Self {
            min_side: 5,
            catalog_filter: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub embed_dim: usize,
    pub text_hidden: Vec<usize>,
    pub image_hidden: Vec<usize>,
    /// "relu" or "tanh".
    pub activation: String,
    #[serde(default = "one")]
    pub tokens_per_sample: usize,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub b0: usize,
    pub bmax: usize,
    pub total_steps: usize,
    pub micro_batch: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default = "default_warmup")]
    pub warmup_fraction: f64,
    #[serde(default = "default_neg_prob")]
    pub negative_sampling_prob: f64,
    #[serde(default)]
    pub negative_sampling_level: Option<usize>,
    #[serde(default)]
    pub label_mode: LabelMode,
    #[serde(default = "default_eval_interval")]
    pub eval_interval: usize,
    #[serde(default)]
    pub checkpoint_interval: usize,
    #[serde(default)]
    pub freeze_text: bool,
    #[serde(default)]
    pub freeze_image: bool,
    /// Train on the kept indices produced by the preprocess stage.
    #[serde(default)]
    pub use_preprocessed: bool,
}

fn default_lr() -> f64 {
    3e-5
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_warmup() -> f64 {
    0.1
}
fn default_neg_prob() -> f64 {
    0.5
}
fn default_eval_interval() -> usize {
    100
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Tasks to run: matching, clustering, category-zero-shot,
    /// category-linear-probe, attributes, adult.
    pub tasks: Vec<String>,
    pub clustering_out_dim: usize,
    pub probe_epochs: usize,
    pub probe_lr: f64,
    /// Root category group treated as the positive class for the binary
    /// recognition task.
    pub adult_group: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            tasks: vec![
                "matching".into(),
                "clustering".into(),
                "category-zero-shot".into(),
                "category-linear-probe".into(),
                "attributes".into(),
                "adult".into(),
            ],
            clustering_out_dim: 128,
            probe_epochs: 200,
            probe_lr: 0.05,
            adult_group: 0,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        let cfg: RunConfig = toml::from_str(&text).map_err(|e| format!("config: {e}"))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), String> {
        self.synth_spec()
            .validate()
            .map_err(|e| format!("synth: {e}"))?;
        let (text_spec, image_spec) = self.encoder_specs()?;
        text_spec.validate().map_err(|e| format!("model: {e}"))?;
        image_spec.validate().map_err(|e| format!("model: {e}"))?;
        let train = self.train_config()?;
        train.schedule.validate().map_err(|e| format!("train: {e}"))?;
        train
            .optimizer
            .validate()
            .map_err(|e| format!("train: {e}"))?;
        if train.micro_batch == 0 || train.micro_batch > train.schedule.b0 {
            return Err(format!(
                "train: micro_batch {} must be in 1..=b0 ({})",
                train.micro_batch, train.schedule.b0
            ));
        }
        for task in &self.eval.tasks {
            match task.as_str() {
                "matching" | "clustering" | "category-zero-shot" | "category-linear-probe"
                | "attributes" | "adult" => {}
                other => return Err(format!("eval: unknown task '{other}'")),
            }
        }
        Ok(())
    }

    pub fn synth_spec(&self) -> SynthSpec {
        SynthSpec {
            n_classes: self.synth.n_classes,
            n_catalogs_per_class: self.synth.n_catalogs_per_class,
            n_duplicates_per_catalog: self.synth.n_duplicates_per_catalog,
            text_dim: self.synth.text_dim,
            image_size: self.synth.image_size,
            noise_sigma: self.synth.noise_sigma,
            category_depth: self.synth.category_depth,
            seed: self.seed,
        }
    }

    pub fn encoder_specs(&self) -> Result<(EncoderSpec, EncoderSpec), String> {
        let activation = match self.model.activation.as_str() {
            "relu" => Activation::Relu,
            "tanh" => Activation::Tanh,
            other => return Err(format!("model: unknown activation '{other}'")),
        };
        let text = EncoderSpec {
            input_dim: self.synth.text_dim / self.model.tokens_per_sample.max(1),
            hidden: self.model.text_hidden.clone(),
            output_dim: self.model.embed_dim,
            activation,
            tokens_per_sample: self.model.tokens_per_sample,
        };
        let image = EncoderSpec {
            input_dim: self.synth.image_size * self.synth.image_size,
            hidden: self.model.image_hidden.clone(),
            output_dim: self.model.embed_dim,
            activation,
            tokens_per_sample: 1,
        };
        Ok((text, image))
    }

    pub fn train_config(&self) -> Result<TrainConfig, String> {
        let (text_spec, image_spec) = self.encoder_specs()?;
        Ok(TrainConfig {
            schedule: ScheduleConfig {
                b0: self.train.b0,
                bmax: self.train.bmax,
                total_steps: self.train.total_steps,
            },
            micro_batch: self.train.micro_batch,
            optimizer: AdamWConfig {
                lr: self.train.lr,
                weight_decay: self.train.weight_decay,
                beta1: self.train.beta1,
                beta2: self.train.beta2,
                eps: self.train.eps,
            },
            warmup_fraction: self.train.warmup_fraction,
            negative_sampling_prob: self.train.negative_sampling_prob,
            negative_sampling_level: self.train.negative_sampling_level,
            label_mode: self.train.label_mode,
            seed: self.seed,
            text_spec,
            image_spec,
            eval_interval: self.train.eval_interval,
            checkpoint_interval: self.train.checkpoint_interval,
            deterministic: self.deterministic,
            freeze_text: self.train.freeze_text,
            freeze_image: self.train.freeze_image,
        })
    }
}
