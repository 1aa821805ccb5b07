//! Self-check suite wiring the oracles against the production paths. The
//! `verify` CLI subcommand runs these and fails loudly on any mismatch; the
//! slower end-to-end learning checks live in the acceptance test suite.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoder::{Activation, EncoderSpec, ModelParams};
use crate::error::Result;
use crate::exec::ExecMode;
use crate::gradcheck::{finite_diff_check, finite_diff_scalar};
use crate::manifest::ProductRecord;
use crate::matrix::Matrix;
use crate::pixmap::ImageBuffer;
use crate::preprocess::{dedup, patch_gray_embedding, patch_hash, DedupOptions};
use crate::schedule::{batch_size_schedule, ScheduleConfig};
use crate::train::{multistream_step, naive_step, LabelMode, TrainBatch};

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, body: impl FnOnce() -> Result<String>) -> CheckResult {
    match body() {
        Ok(detail) => CheckResult {
            name,
            passed: true,
            detail,
        },
        Err(e) => CheckResult {
            name,
            passed: false,
            detail: e.to_string(),
        },
    }
}

fn fail(msg: String) -> crate::error::Error {
    crate::error::Error::Numeric(msg)
}

fn random_specs(rng: &mut ChaCha8Rng) -> (EncoderSpec, EncoderSpec) {
    let d = 3 + rng.random_range(0..3);
    (
        EncoderSpec {
            input_dim: 3 + rng.random_range(0..4),
            hidden: vec![3 + rng.random_range(0..4)],
            output_dim: d,
            activation: Activation::Tanh,
            tokens_per_sample: 1,
        },
        EncoderSpec {
            input_dim: 3 + rng.random_range(0..4),
            hidden: vec![3 + rng.random_range(0..4)],
            output_dim: d,
            activation: Activation::Tanh,
            tokens_per_sample: 1,
        },
    )
}

fn random_batch(
    rng: &mut ChaCha8Rng,
    n: usize,
    text_in: usize,
    image_in: usize,
) -> TrainBatch {
    let catalogs: Vec<u64> = (0..n).map(|_| rng.random_range(0..(n as u64 / 2 + 1))).collect();
    TrainBatch {
        text: crate::random_matrix(rng, n, text_in, 1.0),
        images: crate::random_matrix(rng, n, image_in, 1.0),
        catalogs,
    }
}

/// Two-stream accumulation against the naive full-batch oracle: 50 random
/// trials, micro sizes {1, 2, 4, N}, max relative error below 1e-9.
pub fn check_gradient_equivalence() -> CheckResult {
    check("gradient-equivalence", || {
        let mut rng = ChaCha8Rng::seed_from_u64(0xAC01);
        let mut worst = 0.0_f64;
        for trial in 0..50 {
            let (ts, is) = random_specs(&mut rng);
            let params = ModelParams::init(&ts, &is, 1000 + trial)?;
            let n = 2 + rng.random_range(0..31).min(30);
            let batch = random_batch(&mut rng, n, ts.input_dim, is.input_dim);
            let label_mode = if trial % 2 == 0 {
                LabelMode::Soft
            } else {
                LabelMode::Hard
            };
            let naive = naive_step(&params, &ts, &is, &batch, label_mode)?;
            for m in [1usize, 2, 4, n] {
                if m > n {
                    continue;
                }
                let multi = multistream_step(
                    &params,
                    &ts,
                    &is,
                    &batch,
                    m,
                    label_mode,
                    ExecMode::Sequential,
                    None,
                )?;
                let diff = naive.grads.max_rel_diff(&multi.grads);
                worst = worst.max(diff);
                if diff >= 1e-9 {
                    return Err(fail(format!(
                        "trial {trial}: N={n}, m={m}, gradient diff {diff:e}"
                    )));
                }
                if (naive.loss - multi.loss).abs() >= 1e-12 {
                    return Err(fail(format!(
                        "trial {trial}: loss diff {:e}",
                        (naive.loss - multi.loss).abs()
                    )));
                }
            }
        }
        Ok(format!("50 trials, worst gradient diff {worst:.2e}"))
    })
}

/// Finite differences of the full loss through both towers and the
/// log-temperature, 20 random 4-sample batches, error below 1e-5.
pub fn check_finite_diff_audit() -> CheckResult {
    check("analytic-gradient-audit", || {
        let mut rng = ChaCha8Rng::seed_from_u64(0xAC02);
        let mut worst = 0.0_f64;
        for trial in 0..20 {
            let (ts, is) = random_specs(&mut rng);
            let params = ModelParams::init(&ts, &is, 2000 + trial)?;
            let batch = random_batch(&mut rng, 4, ts.input_dim, is.input_dim);
            let out = naive_step(&params, &ts, &is, &batch, LabelMode::Soft)?;

            let text_err = finite_diff_check(
                |ps| {
                    let mut p = params.clone();
                    p.text = ps.clone();
                    Ok(naive_step(&p, &ts, &is, &batch, LabelMode::Soft)?.loss)
                },
                &params.text,
                &out.grads.text,
                1e-5,
            )?;
            let image_err = finite_diff_check(
                |ps| {
                    let mut p = params.clone();
                    p.image = ps.clone();
                    Ok(naive_step(&p, &ts, &is, &batch, LabelMode::Soft)?.loss)
                },
                &params.image,
                &out.grads.image,
                1e-5,
            )?;
            let tau_err = finite_diff_scalar(
                |lt| {
                    let mut p = params.clone();
                    p.log_tau = lt;
                    Ok(naive_step(&p, &ts, &is, &batch, LabelMode::Soft)?.loss)
                },
                params.log_tau,
                out.grads.log_tau,
                1e-6,
            )?;
            let err = text_err.max(image_err).max(tau_err);
            worst = worst.max(err);
            if err >= 1e-5 {
                return Err(fail(format!("trial {trial}: finite-diff error {err:e}")));
            }
        }
        Ok(format!("20 batches, worst error {worst:.2e}"))
    })
}

/// Soft-label targets: 1000 random catalog vectors (N <= 64), rows sum to 1
/// within 1e-12, unique ids reduce to the identity.
pub fn check_soft_label_contract() -> CheckResult {
    check("soft-label-contract", || {
        let mut rng = ChaCha8Rng::seed_from_u64(0xAC03);
        for _ in 0..1000 {
            let n = 1 + rng.random_range(0..64);
            let ids: Vec<u64> = (0..n).map(|_| rng.random_range(0..40)).collect();
            let z = crate::loss::soft_label_matrix(&ids);
            for i in 0..n {
                let sum: f64 = z.matrix().row(i).iter().sum();
                if (sum - 1.0).abs() >= 1e-12 {
                    return Err(fail(format!("row sum {sum} at N={n}")));
                }
                if z.matrix().get(i, i) <= 0.0 {
                    return Err(fail("zero diagonal entry".into()));
                }
            }
            let unique: Vec<u64> = (0..n as u64).collect();
            let zu = crate::loss::soft_label_matrix(&unique);
            if zu.matrix() != &Matrix::identity(n) {
                return Err(fail(format!("unique ids not identity at N={n}")));
            }
        }
        Ok("1000 random catalog vectors".into())
    })
}

/// Batch-size schedule values, monotonicity, and the configured growth cap.
pub fn check_scheduler() -> CheckResult {
    check("scheduler", || {
        let cfg = ScheduleConfig {
            b0: 8,
            bmax: 256,
            total_steps: 3600,
        };
        // Progress points 0, 1/4, 1/2, 2/3, 0.9 of 3600 steps.
        for (t, want) in [(0usize, 8usize), (900, 8), (1800, 16), (2400, 32), (3240, 256)] {
            let got = batch_size_schedule(t, &cfg)?;
            if got != want {
                return Err(fail(format!("step {t}: got {got}, want {want}")));
            }
        }
        let mut prev = 0;
        for t in 0..cfg.total_steps {
            let b = batch_size_schedule(t, &cfg)?;
            if b < prev || b < cfg.b0 || b > cfg.bmax {
                return Err(fail(format!("non-monotone or out of bounds at {t}")));
            }
            prev = b;
        }
        let capped = ScheduleConfig {
            b0: 8,
            bmax: 240,
            total_steps: 2000,
        };
        let max = (0..2000)
            .map(|t| batch_size_schedule(t, &capped).unwrap())
            .max()
            .unwrap();
        if max != 240 || max / capped.b0 > 30 {
            return Err(fail(format!("cap violated: max {max}")));
        }
        Ok("values {8,8,16,32,clamped 256}, monotone, 30x cap".into())
    })
}

/// Clustering metrics against exhaustive oracles on every pair of
/// partitions of up to 6 points, plus pipeline determinism per seed.
pub fn check_metric_oracles() -> CheckResult {
    check("metric-oracles", || {
        let mut pairs = 0usize;
        for n in 1..=6usize {
            let partitions = crate::oracle::enumerate_partitions(n);
            for a in &partitions {
                for g in &partitions {
                    let acc = crate::eval::metrics::clustering_accuracy(a, g)?;
                    let acc_oracle = crate::oracle::accuracy_by_permutation(a, g);
                    if acc != acc_oracle {
                        return Err(fail(format!(
                            "ACC mismatch on {a:?} vs {g:?}: {acc} vs {acc_oracle}"
                        )));
                    }
                    let ari = crate::eval::metrics::ari(a, g)?;
                    let ari_oracle = crate::oracle::ari_by_pair_counting(a, g);
                    if ari != ari_oracle {
                        return Err(fail(format!(
                            "ARI mismatch on {a:?} vs {g:?}: {ari} vs {ari_oracle}"
                        )));
                    }
                    pairs += 1;
                }
            }
        }

        // PCA + k-means pipeline determinism.
        let mut rng = ChaCha8Rng::seed_from_u64(0xAC04);
        let txt = crate::random_unit_rows(&mut rng, 24, 6);
        let img = crate::random_unit_rows(&mut rng, 24, 6);
        let a = crate::eval::tasks::cluster_products(&txt, &img, 4, 3, 99)?;
        let b = crate::eval::tasks::cluster_products(&txt, &img, 4, 3, 99)?;
        if a.assignments != b.assignments {
            return Err(fail("pipeline not deterministic per seed".into()));
        }
        Ok(format!("{pairs} partition pairs, pipeline deterministic"))
    })
}

/// Builds the 1000-record manifest with 10% injected exact duplicates used
/// by the dedup contract: 900 distinct bases plus 100 copies (half sharing a
/// title, half sharing pixels).
pub fn dedup_fixture() -> (Vec<ProductRecord>, Vec<ImageBuffer>, Vec<usize>) {
    // Patch digit d maps to a gray level landing in bucket d.
    fn digit_image(value: usize) -> ImageBuffer {
        let size = 20;
        let mut img = ImageBuffer::filled(size, size, [13, 13, 13]).unwrap();
        for (patch, scale) in [(0usize, 1usize), (1, 10), (2, 100), (3, 1000)] {
            let digit = (value / scale) % 10;
            let gray = (digit as f64 * 25.6 + 12.8).round() as u8;
            let (r, c) = (patch / 5, patch % 5);
            for y in r * 4..(r + 1) * 4 {
                for x in c * 4..(c + 1) * 4 {
                    img.set_rgb(x, y, [gray, gray, gray]);
                }
            }
        }
        img
    }
    fn record(i: usize, title: String, time_idx: usize) -> ProductRecord {
        ProductRecord {
            title,
            brand_name: None,
            maker_name: None,
            mall_name: None,
            mall_category: vec![],
            price: 100,
            registration_time: format!(
                "{:04}-{:02}-{:02}",
                2020 + time_idx / 336,
                (time_idx / 28) % 12 + 1,
                time_idx % 28 + 1
            ),
            popularity: 0.0,
            image_path: format!("{i}.ppm"),
            product_category: vec!["root".into()],
            catalog_id: format!("cat{i}"),
            product_id: format!("p{i:05}"),
            flagged: false,
        }
    }

    let mut records = Vec::new();
    let mut images = Vec::new();
    for i in 0..900 {
        records.push(record(i, format!("base product number {i}"), i));
        images.push(digit_image(i));
    }
    let mut injected = Vec::new();
    for j in 0..100 {
        let src = j * 9; // spread over the bases
        let idx = 900 + j;
        if j % 2 == 0 {
            // Same title as the source, fresh image.
            records.push(record(idx, format!("base product number {src}"), 900 + j));
            images.push(digit_image(1000 + j));
        } else {
            // Same pixels as the source, fresh title.
            records.push(record(idx, format!("copied listing variant {j}"), 900 + j));
            images.push(digit_image(src));
        }
        injected.push(idx);
    }
    (records, images, injected)
}

/// Dedup removes exactly the injected duplicates, is idempotent, and the
/// patch hash reproduces its pinned example vectors.
pub fn check_dedup_contract() -> CheckResult {
    check("dedup-contract", || {
        let gray = ImageBuffer::filled(100, 100, [128, 128, 128]).unwrap();
        if patch_hash(&gray)? != format!("{}0101", "5".repeat(25)) {
            return Err(fail("uniform-gray hash vector mismatch".into()));
        }
        let black = ImageBuffer::filled(100, 100, [0, 0, 0]).unwrap();
        if patch_hash(&black)? != format!("{}0101", "0".repeat(25)) {
            return Err(fail("all-black hash vector mismatch".into()));
        }

        let (records, images, injected) = dedup_fixture();
        let opts = DedupOptions::default();
        let (kept, report) = dedup(&records, &images, &patch_gray_embedding, &opts)?;
        let removed: Vec<usize> = (0..records.len()).filter(|i| !kept.contains(i)).collect();
        if removed != injected {
            return Err(fail(format!(
                "removed {} records, expected exactly the {} injected",
                removed.len(),
                injected.len()
            )));
        }
        if report.kept + report.removed() != report.input {
            return Err(fail("report does not partition the input".into()));
        }

        let records2: Vec<ProductRecord> = kept.iter().map(|&i| records[i].clone()).collect();
        let images2: Vec<ImageBuffer> = kept.iter().map(|&i| images[i].clone()).collect();
        let (kept2, report2) = dedup(&records2, &images2, &patch_gray_embedding, &opts)?;
        if kept2.len() != records2.len() || report2.removed() != 0 {
            return Err(fail("dedup is not idempotent".into()));
        }
        Ok(format!(
            "1000 records, {} injected duplicates removed, idempotent",
            injected.len()
        ))
    })
}

/// Run every fast check, invoking `progress` after each one.
pub fn run_all(mut progress: impl FnMut(&CheckResult)) -> Vec<CheckResult> {
    let checks: Vec<fn() -> CheckResult> = vec![
        check_gradient_equivalence,
        check_finite_diff_audit,
        check_soft_label_contract,
        check_scheduler,
        check_metric_oracles,
        check_dedup_contract,
    ];
    let mut results = Vec::with_capacity(checks.len());
    for c in checks {
        let r = c();
        progress(&r);
        results.push(r);
    }
    results
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dedup_fixture_has_exactly_ten_percent_duplicates() {
        let (records, images, injected) = dedup_fixture();
        assert_eq!(records.len(), 1000);
        assert_eq!(images.len(), 1000);
        assert_eq!(injected.len(), 100);
    }
}
