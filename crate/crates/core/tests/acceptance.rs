//! Acceptance suite: every release criterion as one test printing a
//! pass/fail line (run with `--nocapture` to see them). Tolerances and
//! thresholds are pinned here, not configurable.

use std::sync::OnceLock;
use std::time::Instant;

use eclip_core::encoder::{encode, Activation, EncoderSpec};
use eclip_core::eval::{top1_matching_accuracy, zero_shot_classify, LabeledEmbeddings, Modality};
use eclip_core::matrix::Matrix;
use eclip_core::optim::AdamWConfig;
use eclip_core::schedule::ScheduleConfig;
use eclip_core::synth::{generate, holdout_last_duplicate, SynthSpec};
use eclip_core::train::{train, LabelMode, TrainConfig, TrainDataset, TrainHooks};
use eclip_core::verify;

fn report(name: &str, passed: bool, detail: &str) {
    println!(
        "ACCEPTANCE {name}: {}  ({detail})",
        if passed { "PASS" } else { "FAIL" }
    );
    assert!(passed, "{name}: {detail}");
}

fn report_check(result: verify::CheckResult) {
    report(result.name, result.passed, &result.detail);
}

#[test]
fn criterion_gradient_equivalence() {
    let start = Instant::now();
    let result = verify::check_gradient_equivalence();
    let elapsed = start.elapsed().as_secs_f64();
    assert!(
        elapsed < 30.0,
        "gradient equivalence took {elapsed:.1}s, budget is 30s"
    );
    report_check(result);
}

#[test]
fn criterion_analytic_gradient_audit() {
    report_check(verify::check_finite_diff_audit());
}

#[test]
fn criterion_soft_label_contract() {
    report_check(verify::check_soft_label_contract());
}

#[test]
fn criterion_scheduler() {
    report_check(verify::check_scheduler());
}

#[test]
fn criterion_metric_oracles() {
    report_check(verify::check_metric_oracles());
}

#[test]
fn criterion_dedup() {
    report_check(verify::check_dedup_contract());
}

// --- End-to-end learning on the synthetic dataset -------------------------

#[derive(Debug, Clone)]
struct SeedOutcome {
    zs_text: f64,
    zs_image: f64,
    zs_multi: f64,
    matching: f64,
    final_loss: f64,
}

#[derive(Debug)]
struct Experiments {
    soft: Vec<SeedOutcome>,
    hard: Vec<SeedOutcome>,
    total_secs: f64,
}

fn e2e_specs() -> (EncoderSpec, EncoderSpec) {
    (
        EncoderSpec {
            input_dim: 64,
            hidden: vec![48],
            output_dim: 16,
            activation: Activation::Tanh,
            tokens_per_sample: 1,
        },
        EncoderSpec {
            input_dim: 144,
            hidden: vec![48],
            output_dim: 16,
            activation: Activation::Tanh,
            tokens_per_sample: 1,
        },
    )
}

fn multimodal_rows(txt: &Matrix, img: &Matrix) -> Matrix {
    let mut avg = txt.clone();
    avg.add_scaled(img, 1.0).unwrap();
    avg.scale(0.5);
    eclip_core::encoder::normalize_rows(&avg).unwrap().0
}

fn run_e2e(seed: u64, label_mode: LabelMode) -> SeedOutcome {
    // 32 classes x 8 catalogs x 3 duplicates, sigma = 0.1; the last
    // duplicate of every catalog is held out.
    let spec = SynthSpec {
        n_classes: 32,
        n_catalogs_per_class: 8,
        n_duplicates_per_catalog: 3,
        text_dim: 64,
        image_size: 12,
        noise_sigma: 0.1,
        category_depth: 3,
        seed,
    };
    let ds = generate(&spec).unwrap();
    let split = holdout_last_duplicate(&ds);
    let full = ds.to_train_dataset();
    let train_ds = TrainDataset {
        text: full.text.select_rows(&split.train),
        images: full.images.select_rows(&split.train),
        catalogs: split.train.iter().map(|&i| full.catalogs[i]).collect(),
        category_paths: split
            .train
            .iter()
            .map(|&i| full.category_paths[i].clone())
            .collect(),
    };

    let (text_spec, image_spec) = e2e_specs();
    let cfg = TrainConfig {
        schedule: ScheduleConfig {
            b0: 8,
            bmax: 64,
            total_steps: 2000,
        },
        micro_batch: 8,
        optimizer: AdamWConfig {
            lr: 3e-3,
            ..Default::default()
        },
        warmup_fraction: 0.1,
        negative_sampling_prob: 0.5,
        negative_sampling_level: None,
        label_mode,
        seed,
        text_spec: text_spec.clone(),
        image_spec: image_spec.clone(),
        eval_interval: 50,
        checkpoint_interval: 0,
        deterministic: true,
        freeze_text: false,
        freeze_image: false,
    };
    let out = train(&cfg, &train_ds, &mut TrainHooks::default()).unwrap();

    let held_txt = full.text.select_rows(&split.held_out);
    let held_img = full.images.select_rows(&split.held_out);
    let txt_emb = encode(&out.params.text, &text_spec, &held_txt).unwrap();
    let img_emb = encode(&out.params.image, &image_spec, &held_img).unwrap();
    let class_txt = encode(&out.params.text, &text_spec, &ds.class_prompts).unwrap();
    let gold: Vec<usize> = split.held_out.iter().map(|&i| ds.class_of[i]).collect();

    let zs = |mode: Modality| {
        let preds = zero_shot_classify(Some(&img_emb), Some(&txt_emb), &class_txt, mode).unwrap();
        preds.iter().zip(&gold).filter(|(p, g)| p == g).count() as f64 / gold.len() as f64
    };

    let pool_txt = encode(&out.params.text, &text_spec, &train_ds.text).unwrap();
    let pool_img = encode(&out.params.image, &image_spec, &train_ds.images).unwrap();
    let queries = LabeledEmbeddings::new(
        multimodal_rows(&txt_emb, &img_emb),
        split.held_out.iter().map(|&i| ds.catalog_of[i]).collect(),
    )
    .unwrap();
    let pool = LabeledEmbeddings::new(
        multimodal_rows(&pool_txt, &pool_img),
        split.train.iter().map(|&i| ds.catalog_of[i]).collect(),
    )
    .unwrap();
    let matching = top1_matching_accuracy(&queries, &pool, None).unwrap();

    // Final training loss: mean of the last five metrics records, all in the
    // fully grown batch regime.
    let tail = out.metrics.len().saturating_sub(5);
    let final_loss = out.metrics[tail..].iter().map(|m| m.loss).sum::<f64>()
        / (out.metrics.len() - tail) as f64;

    SeedOutcome {
        zs_text: zs(Modality::Text),
        zs_image: zs(Modality::Image),
        zs_multi: zs(Modality::Multimodal),
        matching,
        final_loss,
    }
}

fn experiments() -> &'static Experiments {
    static CELL: OnceLock<Experiments> = OnceLock::new();
    CELL.get_or_init(|| {
        let start = Instant::now();
        let soft: Vec<SeedOutcome> = (0..5).map(|s| run_e2e(s, LabelMode::Soft)).collect();
        let hard: Vec<SeedOutcome> = (0..5).map(|s| run_e2e(s, LabelMode::Hard)).collect();
        Experiments {
            soft,
            hard,
            total_secs: start.elapsed().as_secs_f64(),
        }
    })
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v[v.len() / 2]
}

#[test]
fn criterion_end_to_end_learning() {
    let exp = experiments();
    let zs: Vec<f64> = exp.soft.iter().map(|o| o.zs_multi).collect();
    let matching: Vec<f64> = exp.soft.iter().map(|o| o.matching).collect();
    let zs_median = median(&zs);
    let match_median = median(&matching);
    let passed = zs_median >= 0.90 && match_median >= 0.85 && exp.total_secs < 300.0;
    report(
        "end-to-end-learning",
        passed,
        &format!(
            "median zero-shot multimodal {zs_median:.3} (>= 0.90), median top-1 matching \
             {match_median:.3} (>= 0.85), 10 runs in {:.0}s (< 300s)",
            exp.total_secs
        ),
    );
}

#[test]
fn criterion_soft_vs_hard_ablation() {
    let exp = experiments();
    let mut wins = 0;
    let mut lines = Vec::new();
    for (seed, (s, h)) in exp.soft.iter().zip(&exp.hard).enumerate() {
        let ok = s.final_loss <= h.final_loss && s.matching >= h.matching;
        if ok {
            wins += 1;
        }
        lines.push(format!(
            "seed {seed}: loss {:.4} vs {:.4}, match {:.3} vs {:.3}",
            s.final_loss, h.final_loss, s.matching, h.matching
        ));
    }
    report(
        "soft-vs-hard-ablation",
        wins >= 4,
        &format!("soft at least as good in {wins}/5 seeds; {}", lines.join("; ")),
    );
}

#[test]
fn criterion_multimodal_beats_best_unimodal() {
    let exp = experiments();
    let mut wins = 0;
    for o in &exp.soft {
        if o.zs_multi >= o.zs_text.max(o.zs_image) {
            wins += 1;
        }
    }
    report(
        "multimodal-vs-unimodal",
        wins >= 4,
        &format!("multimodal >= best unimodal in {wins}/5 seeds"),
    );
}
