//! Pipeline stage implementations behind the subcommands.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde_json::{json, Value};

use eclip_core::checkpoint;
use eclip_core::dataset::{load_dataset, save_synth_dataset, LoadedDataset};
use eclip_core::encoder::{encode, EncoderSpec, ModelParams};
use eclip_core::eval::{
    clustering_metrics, f1_score, linear_probe, run_kmeans, top1_matching_accuracy,
    zero_shot_classify, LabeledEmbeddings, Modality, DEFAULT_MAX_ITER, DEFAULT_TOL,
};
use eclip_core::exec::ExecMode;
use eclip_core::manifest::write_manifest;
use eclip_core::matrix::Matrix;
use eclip_core::preprocess::{clean_from_disk, DedupOptions};
use eclip_core::train::{train, MetricsRecord, TrainHooks};

use crate::config::RunConfig;
use crate::{runtime_err, CliError};

pub fn stage_dir(cfg: &RunConfig, stage: &str) -> PathBuf {
    cfg.out_dir.join(stage)
}

/// Every stage records the fully resolved configuration it ran with.
pub fn write_snapshot(cfg: &RunConfig, stage: &str) -> Result<PathBuf, CliError> {
    let dir = stage_dir(cfg, stage);
    std::fs::create_dir_all(&dir).map_err(runtime_err)?;
    let text = toml::to_string_pretty(cfg)
        .map_err(|e| CliError::Runtime(format!("snapshot serialization: {e}")))?;
    let path = dir.join("resolved_config.toml");
    std::fs::write(&path, text).map_err(runtime_err)?;
    Ok(dir)
}

pub fn run_synth_gen(cfg: &RunConfig) -> Result<(), CliError> {
    write_snapshot(cfg, "synth-gen")?;
    let spec = cfg.synth_spec();
    let dataset = eclip_core::synth::generate(&spec).map_err(runtime_err)?;
    save_synth_dataset(&cfg.dataset_dir, &dataset).map_err(runtime_err)?;
    println!(
        "synth-gen: wrote {} records ({} classes x {} catalogs x {} duplicates) to {}",
        dataset.len(),
        spec.n_classes,
        spec.n_catalogs_per_class,
        spec.n_duplicates_per_catalog,
        cfg.dataset_dir.display()
    );
    Ok(())
}

pub fn run_preprocess(cfg: &RunConfig) -> Result<(), CliError> {
    let dir = write_snapshot(cfg, "preprocess")?;
    let records = eclip_core::manifest::read_manifest(
        &cfg.dataset_dir.join(eclip_core::dataset::MANIFEST_FILE),
    )
    .map_err(runtime_err)?;
    let options = DedupOptions {
        catalog_filter: cfg.preprocess.catalog_filter,
        mode: ExecMode::from_deterministic(cfg.deterministic),
    };
    let (kept, report, _) = clean_from_disk(
        &records,
        &cfg.dataset_dir.join(eclip_core::dataset::IMAGES_DIR),
        cfg.preprocess.min_side,
        &options,
    )
    .map_err(runtime_err)?;

    let cleaned: Vec<_> = kept.iter().map(|&i| records[i].clone()).collect();
    write_manifest(&dir.join("cleaned_manifest.jsonl"), &cleaned).map_err(runtime_err)?;
    let report_json = serde_json::to_string_pretty(&report)
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    std::fs::write(dir.join("dedup_report.json"), report_json).map_err(runtime_err)?;
    std::fs::write(
        dir.join("kept_indices.json"),
        serde_json::to_string(&kept).map_err(|e| CliError::Runtime(e.to_string()))?,
    )
    .map_err(runtime_err)?;

    println!(
        "preprocess: kept {}/{} (dup-title {}, dup-hash {}, dup-embedding {}, dup-catalog {}, invalid {})",
        report.kept,
        report.input,
        report.dup_title,
        report.dup_hash,
        report.dup_embedding,
        report.dup_catalog,
        report.no_image + report.small_image + report.corrupt + report.short_title + report.flagged,
    );
    Ok(())
}

fn load_stage_dataset(cfg: &RunConfig) -> Result<LoadedDataset, CliError> {
    let keep: Option<Vec<usize>> = if cfg.train.use_preprocessed {
        let path = stage_dir(cfg, "preprocess").join("kept_indices.json");
        let text = std::fs::read_to_string(&path).map_err(|e| {
            CliError::Runtime(format!(
                "use_preprocessed is set but {} is unreadable: {e}",
                path.display()
            ))
        })?;
        Some(serde_json::from_str(&text).map_err(|e| CliError::Runtime(e.to_string()))?)
    } else {
        None
    };
    load_dataset(&cfg.dataset_dir, keep.as_deref(), cfg.synth.text_dim).map_err(runtime_err)
}

/// Last member of every multi-member catalog is held out for evaluation.
fn holdout_split(data: &LoadedDataset) -> (Vec<usize>, Vec<usize>) {
    use std::collections::HashMap;
    let mut last_of: HashMap<&str, usize> = HashMap::new();
    let mut members: HashMap<&str, usize> = HashMap::new();
    for (i, rec) in data.records.iter().enumerate() {
        last_of.insert(&rec.catalog_id, i);
        *members.entry(&rec.catalog_id).or_insert(0) += 1;
    }
    let mut train_idx = Vec::new();
    let mut held = Vec::new();
    for (i, rec) in data.records.iter().enumerate() {
        let cat = rec.catalog_id.as_str();
        if members[cat] > 1 && last_of[cat] == i {
            held.push(i);
        } else {
            train_idx.push(i);
        }
    }
    (train_idx, held)
}

fn intern<'a>(values: impl Iterator<Item = &'a str>) -> Vec<usize> {
    let mut seen: BTreeMap<&str, usize> = BTreeMap::new();
    let mut out = Vec::new();
    for v in values {
        let next = seen.len();
        out.push(*seen.entry(v).or_insert(next));
    }
    out
}

/// The synthetic category components end in the class/group index
/// ("g1-17" -> 17); zero-shot tasks need it to line up with prompt rows.
fn trailing_index(component: &str) -> Option<usize> {
    component.rsplit('-').next()?.parse().ok()
}

struct Embeddings {
    text: Matrix,
    image: Matrix,
    multimodal: Matrix,
}

fn embed_all(
    params: &ModelParams,
    text_spec: &EncoderSpec,
    image_spec: &EncoderSpec,
    data: &LoadedDataset,
) -> Result<Embeddings, CliError> {
    let text = encode(&params.text, text_spec, &data.text_features).map_err(runtime_err)?;
    let image = encode(&params.image, image_spec, &data.image_features()).map_err(runtime_err)?;
    let mut avg = text.clone();
    avg.add_scaled(&image, 1.0).map_err(runtime_err)?;
    avg.scale(0.5);
    let (multimodal, _) = eclip_core::encoder::normalize_rows(&avg).map_err(runtime_err)?;
    Ok(Embeddings {
        text,
        image,
        multimodal,
    })
}

pub fn run_train(cfg: &RunConfig) -> Result<(), CliError> {
    let dir = write_snapshot(cfg, "train")?;
    let data = load_stage_dataset(cfg)?;
    let train_dataset = data.to_train_dataset();
    let train_cfg = cfg.train_config().map_err(CliError::Config)?;

    // Zero-shot probe on held-out items for the periodic metrics records.
    let (_, held) = holdout_split(&data);
    let class_prompts = data.class_prompts.clone();
    let held_text = data.text_features.select_rows(&held);
    let held_images = data.image_features().select_rows(&held);
    let held_classes: Vec<usize> = held
        .iter()
        .map(|&i| {
            data.records[i]
                .product_category
                .last()
                .and_then(|c| trailing_index(c))
                .unwrap_or(0)
        })
        .collect();
    let text_spec = train_cfg.text_spec.clone();
    let image_spec = train_cfg.image_spec.clone();

    let mut hooks = TrainHooks::default();
    if let Some(prompts) = class_prompts {
        if !held.is_empty() {
            hooks.eval = Some(Box::new(move |_step, params: &ModelParams| {
                let mut out = BTreeMap::new();
                let ok = (|| -> eclip_core::Result<f64> {
                    let txt = encode(&params.text, &text_spec, &held_text)?;
                    let img = encode(&params.image, &image_spec, &held_images)?;
                    let class_txt = encode(&params.text, &text_spec, &prompts)?;
                    let preds =
                        zero_shot_classify(Some(&img), Some(&txt), &class_txt, Modality::Multimodal)?;
                    let hits = preds
                        .iter()
                        .zip(&held_classes)
                        .filter(|(p, g)| p == g)
                        .count();
                    Ok(hits as f64 / held_classes.len().max(1) as f64)
                })();
                if let Ok(acc) = ok {
                    out.insert("zero_shot_multimodal".to_string(), acc);
                }
                out
            }));
        }
    }
    let ckpt_dir = dir.clone();
    let (ts, is) = (train_cfg.text_spec.clone(), train_cfg.image_spec.clone());
    hooks.checkpoint = Some(Box::new(move |step, params: &ModelParams| {
        checkpoint::save(
            &ckpt_dir.join(format!("checkpoint_step{step}.json")),
            params,
            &ts,
            &is,
        )
    }));

    let outcome = train(&train_cfg, &train_dataset, &mut hooks)
        .map_err(|e| CliError::Runtime(format!("train: {e}")))?;

    write_metrics(&dir.join("metrics.jsonl"), &outcome.metrics)?;
    checkpoint::save(
        &dir.join("checkpoint.json"),
        &outcome.params,
        &train_cfg.text_spec,
        &train_cfg.image_spec,
    )
    .map_err(runtime_err)?;

    let last = outcome.metrics.last();
    println!(
        "train: {} steps on {} items, final loss {:.6}, tau {:.4}, metrics records {}",
        train_cfg.schedule.total_steps,
        train_dataset.len(),
        last.map_or(f64::NAN, |m| m.loss),
        outcome.params.tau(),
        outcome.metrics.len()
    );
    Ok(())
}

fn write_metrics(path: &Path, metrics: &[MetricsRecord]) -> Result<(), CliError> {
    use std::io::Write;
    let mut file = std::fs::File::create(path).map_err(runtime_err)?;
    for rec in metrics {
        let line = serde_json::to_string(rec).map_err(|e| CliError::Runtime(e.to_string()))?;
        writeln!(file, "{line}").map_err(runtime_err)?;
    }
    Ok(())
}

fn modality_matrix(emb: &Embeddings, modality: Modality) -> &Matrix {
    match modality {
        Modality::Text => &emb.text,
        Modality::Image => &emb.image,
        Modality::Multimodal => &emb.multimodal,
    }
}

const MODALITIES: [(&str, Modality); 3] = [
    ("text", Modality::Text),
    ("image", Modality::Image),
    ("multimodal", Modality::Multimodal),
];

pub fn run_eval(cfg: &RunConfig) -> Result<(), CliError> {
    let dir = write_snapshot(cfg, "eval")?;
    let ckpt_path = stage_dir(cfg, "train").join("checkpoint.json");
    let (params, text_spec, image_spec) = checkpoint::load(&ckpt_path).map_err(|e| {
        CliError::Runtime(format!("checkpoint {}: {e}", ckpt_path.display()))
    })?;
    let data = load_stage_dataset(cfg)?;
    let (train_idx, held_idx) = holdout_split(&data);
    if held_idx.is_empty() {
        return Err(CliError::Runtime(
            "no catalog has more than one member; nothing to hold out for evaluation".into(),
        ));
    }
    let emb = embed_all(&params, &text_spec, &image_spec, &data)?;

    let catalogs = intern(data.records.iter().map(|r| r.catalog_id.as_str()));
    let class_paths: Vec<String> = data
        .records
        .iter()
        .map(|r| r.product_category.join(">"))
        .collect();
    let classes = intern(class_paths.iter().map(String::as_str));

    let select = |m: &Matrix, idx: &[usize]| m.select_rows(idx);
    let labels_at = |labels: &[usize], idx: &[usize]| -> Vec<usize> {
        idx.iter().map(|&i| labels[i]).collect()
    };

    let mut tasks: BTreeMap<String, Value> = BTreeMap::new();

    for task in &cfg.eval.tasks {
        match task.as_str() {
            "matching" => {
                let mut block = BTreeMap::new();
                for (name, modality) in MODALITIES {
                    let m = modality_matrix(&emb, modality);
                    let queries = LabeledEmbeddings::new(
                        select(m, &held_idx),
                        labels_at(&catalogs, &held_idx),
                    )
                    .map_err(runtime_err)?;
                    let pool = LabeledEmbeddings::new(
                        select(m, &train_idx),
                        labels_at(&catalogs, &train_idx),
                    )
                    .map_err(runtime_err)?;
                    let acc = top1_matching_accuracy(&queries, &pool, None).map_err(runtime_err)?;
                    block.insert(name.to_string(), json!(acc));
                }
                tasks.insert("matching".into(), json!(block));
            }
            "clustering" => {
                let gold = labels_at(&classes, &held_idx);
                let k = {
                    let mut distinct = gold.clone();
                    distinct.sort_unstable();
                    distinct.dedup();
                    distinct.len()
                };
                let mut block = BTreeMap::new();
                for (name, modality) in MODALITIES {
                    let rows = select(modality_matrix(&emb, modality), &held_idx);
                    let result = if modality == Modality::Multimodal {
                        eclip_core::eval::cluster_products(
                            &select(&emb.text, &held_idx),
                            &select(&emb.image, &held_idx),
                            k,
                            cfg.eval.clustering_out_dim,
                            cfg.seed,
                        )
                        .map_err(runtime_err)?
                    } else {
                        let dim = cfg
                            .eval
                            .clustering_out_dim
                            .min(rows.rows().min(rows.cols()))
                            .max(1);
                        let projected = eclip_core::eval::pca_project(&rows, dim)
                            .map_err(runtime_err)?;
                        run_kmeans(
                            &projected,
                            k,
                            cfg.seed,
                            DEFAULT_MAX_ITER,
                            DEFAULT_TOL,
                            ExecMode::from_deterministic(cfg.deterministic),
                        )
                        .map_err(runtime_err)?
                    };
                    let (acc, nmi, ari) =
                        clustering_metrics(&result.assignments, &gold).map_err(runtime_err)?;
                    block.insert(
                        name.to_string(),
                        json!({"acc": acc, "nmi": nmi, "ari": ari}),
                    );
                }
                tasks.insert("clustering".into(), json!(block));
            }
            "category-zero-shot" | "attributes" | "adult" => {
                let (prompts, level_from_path): (&Option<Matrix>, bool) = match task.as_str() {
                    "category-zero-shot" => (&data.class_prompts, false),
                    _ => (&data.group_prompts, true),
                };
                let Some(prompts) = prompts else {
                    return Err(CliError::Runtime(format!(
                        "task '{task}' needs prompt matrices in the dataset directory"
                    )));
                };
                let class_txt =
                    encode(&params.text, &text_spec, prompts).map_err(runtime_err)?;
                let gold: Vec<usize> = held_idx
                    .iter()
                    .map(|&i| {
                        let path = &data.records[i].product_category;
                        let component = if level_from_path {
                            path.first()
                        } else {
                            path.last()
                        };
                        component.and_then(|c| trailing_index(c)).unwrap_or(0)
                    })
                    .collect();

                if task == "adult" {
                    // Binary recognition: the configured group against the
                    // renormalized mean of the rest.
                    let g = cfg.eval.adult_group;
                    if g >= class_txt.rows() {
                        return Err(CliError::Runtime(format!(
                            "adult_group {g} out of range ({} groups)",
                            class_txt.rows()
                        )));
                    }
                    let mut rest = vec![0.0; class_txt.cols()];
                    for r in 0..class_txt.rows() {
                        if r != g {
                            for (acc, v) in rest.iter_mut().zip(class_txt.row(r)) {
                                *acc += v;
                            }
                        }
                    }
                    let rest = eclip_core::encoder::l2_normalize(&rest).map_err(runtime_err)?;
                    let mut binary = Matrix::zeros(2, class_txt.cols());
                    binary.row_mut(0).copy_from_slice(class_txt.row(g));
                    binary.row_mut(1).copy_from_slice(&rest);

                    let img = select(&emb.image, &held_idx);
                    let txt = select(&emb.text, &held_idx);
                    let preds =
                        zero_shot_classify(Some(&img), Some(&txt), &binary, Modality::Multimodal)
                            .map_err(runtime_err)?;
                    let predicted: Vec<bool> = preds.iter().map(|&p| p == 0).collect();
                    let actual: Vec<bool> = gold.iter().map(|&c| c == g).collect();
                    let f1 = f1_score(&predicted, &actual).map_err(runtime_err)?;
                    tasks.insert("adult".into(), json!({ "multimodal_f1": f1 }));
                } else {
                    let mut block = BTreeMap::new();
                    for (name, modality) in MODALITIES {
                        let img = select(&emb.image, &held_idx);
                        let txt = select(&emb.text, &held_idx);
                        let preds = zero_shot_classify(Some(&img), Some(&txt), &class_txt, modality)
                            .map_err(runtime_err)?;
                        let hits = preds.iter().zip(&gold).filter(|(p, g)| p == g).count();
                        block.insert(
                            name.to_string(),
                            json!(hits as f64 / gold.len().max(1) as f64),
                        );
                    }
                    tasks.insert(task.clone(), json!(block));
                }
            }
            "category-linear-probe" => {
                let mut block = BTreeMap::new();
                for (name, modality) in [("text", Modality::Text), ("image", Modality::Image)] {
                    let m = modality_matrix(&emb, modality);
                    let train_set = LabeledEmbeddings::new(
                        select(m, &train_idx),
                        labels_at(&classes, &train_idx),
                    )
                    .map_err(runtime_err)?;
                    let test_set = LabeledEmbeddings::new(
                        select(m, &held_idx),
                        labels_at(&classes, &held_idx),
                    )
                    .map_err(runtime_err)?;
                    let acc =
                        linear_probe(&train_set, &test_set, cfg.eval.probe_epochs, cfg.eval.probe_lr)
                            .map_err(runtime_err)?;
                    block.insert(name.to_string(), json!(acc));
                }
                tasks.insert("category-linear-probe".into(), json!(block));
            }
            other => {
                return Err(CliError::Config(format!("eval: unknown task '{other}'")));
            }
        }
    }

    let report = json!({
        "held_out_items": held_idx.len(),
        "pool_items": train_idx.len(),
        "tasks": tasks,
    });
    let text = serde_json::to_string_pretty(&report)
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    std::fs::write(dir.join("report.json"), &text).map_err(runtime_err)?;
    for (task, value) in &tasks {
        println!("eval {task}: {value}");
    }
    Ok(())
}

pub fn run_verify() -> Result<(), CliError> {
    let results = eclip_core::verify::run_all(|r| {
        println!(
            "{} {} - {}",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.detail
        );
    });
    let failed = results.iter().filter(|r| !r.passed).count();
    if failed > 0 {
        return Err(CliError::Runtime(format!("{failed} check(s) failed")));
    }
    println!("verify: all {} checks passed", results.len());
    Ok(())
}
