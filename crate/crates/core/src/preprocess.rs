//! Cleaning pipeline: validity filtering, then three deduplication passes
//! (normalized title, patch hash, quantized embedding), with an optional
//! catalog-level pass that keeps one record per catalog id.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{self, ExecMode};
use crate::manifest::ProductRecord;
use crate::pixmap::ImageBuffer;

/// Lowercase, map every non-alphanumeric codepoint to a space, split on
/// whitespace, drop empties.
pub fn tokenize_title(title: &str) -> Vec<String> {
    title
        .chars()
        .map(|c| if c.is_alphanumeric() { c } else { ' ' })
        .collect::<String>()
        .split_whitespace()
        .map(|t| t.to_lowercase())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RejectReason {
    NoImage,
    SmallImage,
    Corrupt,
    ShortTitle,
    Flagged,
    DupTitle,
    DupHash,
    DupEmbedding,
    DupCatalog,
}

/// Outcome of validity filtering; rejections are values, not errors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Keep,
    Reject(RejectReason),
}

/// State of a record's image as presented to [`validate`].
#[derive(Debug, Clone, Copy)]
pub enum ImageInput<'a> {
    Missing,
    Corrupt,
    Loaded(&'a ImageBuffer),
}

/// Rule-based validity filter. Checks run in order: image present and
/// parseable, image large enough, title has at least two tokens, record not
/// flagged by moderation.
pub fn validate(record: &ProductRecord, image: ImageInput<'_>, min_side: usize) -> Verdict {
    let img = match image {
        ImageInput::Missing => return Verdict::Reject(RejectReason::NoImage),
        ImageInput::Corrupt => return Verdict::Reject(RejectReason::Corrupt),
        ImageInput::Loaded(img) => img,
    };
    if img.width().min(img.height()) < min_side {
        return Verdict::Reject(RejectReason::SmallImage);
    }
    if tokenize_title(&record.title).len() < 2 {
        return Verdict::Reject(RejectReason::ShortTitle);
    }
    if record.flagged {
        return Verdict::Reject(RejectReason::Flagged);
    }
    Verdict::Keep
}

const GRID: usize = 5;

/// 29-digit perceptual hash: a 5x5 grid of one-digit gray-mean buckets in
/// row-major order, then two zero-padded two-digit size buckets
/// (`min(99, width/100)`, `min(99, height/100)`).
///
/// The bucket of a patch is `floor(gray_mean / 25.6)` capped at 9, computed
/// in integer arithmetic (`10 * sum(R+G+B) / (768 * pixels)`) so the digits
/// are bit-exact on every platform.
pub fn patch_hash(image: &ImageBuffer) -> Result<String> {
    let (w, h) = (image.width(), image.height());
    if w < GRID || h < GRID {
        return Err(Error::DegenerateImage(format!(
            "{w}x{h} image cannot be split into a {GRID}x{GRID} grid"
        )));
    }
    let mut out = String::with_capacity(29);
    for r in 0..GRID {
        let y0 = r * h / GRID;
        let y1 = (r + 1) * h / GRID;
        for c in 0..GRID {
            let x0 = c * w / GRID;
            let x1 = (c + 1) * w / GRID;
            let mut sum: u64 = 0;
            for y in y0..y1 {
                for x in x0..x1 {
                    let [pr, pg, pb] = image.rgb(x, y);
                    sum += pr as u64 + pg as u64 + pb as u64;
                }
            }
            let npix = ((y1 - y0) * (x1 - x0)) as u64;
            let digit = (10 * sum / (768 * npix)).min(9);
            out.push((b'0' + digit as u8) as char);
        }
    }
    out.push_str(&format!("{:02}", (w / 100).min(99)));
    out.push_str(&format!("{:02}", (h / 100).min(99)));
    Ok(out)
}

/// Per-patch gray means (0..255 scale), the default embedding for the
/// exact-equality dedup pass.
pub fn patch_gray_embedding(image: &ImageBuffer) -> Vec<f64> {
    let (w, h) = (image.width(), image.height());
    let mut out = Vec::with_capacity(GRID * GRID);
    for r in 0..GRID {
        let y0 = r * h / GRID;
        let y1 = ((r + 1) * h / GRID).max(y0 + 1).min(h);
        for c in 0..GRID {
            let x0 = c * w / GRID;
            let x1 = ((c + 1) * w / GRID).max(x0 + 1).min(w);
            let mut sum: u64 = 0;
            for y in y0..y1 {
                for x in x0..x1 {
                    let [pr, pg, pb] = image.rgb(x, y);
                    sum += pr as u64 + pg as u64 + pb as u64;
                }
            }
            let npix = ((y1 - y0) * (x1 - x0)) as f64;
            out.push(sum as f64 / (3.0 * npix));
        }
    }
    out
}

/// Counts of records removed per rule; `removed() + kept == input`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DedupReport {
    pub input: usize,
    pub kept: usize,
    pub no_image: usize,
    pub small_image: usize,
    pub corrupt: usize,
    pub short_title: usize,
    pub flagged: usize,
    pub dup_title: usize,
    pub dup_hash: usize,
    pub dup_embedding: usize,
    pub dup_catalog: usize,
}

impl DedupReport {
    pub fn removed(&self) -> usize {
        self.no_image
            + self.small_image
            + self.corrupt
            + self.short_title
            + self.flagged
            + self.dup_title
            + self.dup_hash
            + self.dup_embedding
            + self.dup_catalog
    }

    fn bump(&mut self, reason: RejectReason) {
        match reason {
            RejectReason::NoImage => self.no_image += 1,
            RejectReason::SmallImage => self.small_image += 1,
            RejectReason::Corrupt => self.corrupt += 1,
            RejectReason::ShortTitle => self.short_title += 1,
            RejectReason::Flagged => self.flagged += 1,
            RejectReason::DupTitle => self.dup_title += 1,
            RejectReason::DupHash => self.dup_hash += 1,
            RejectReason::DupEmbedding => self.dup_embedding += 1,
            RejectReason::DupCatalog => self.dup_catalog += 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DedupOptions {
    /// Keep one record per catalog id (the aggressively filtered variant).
    pub catalog_filter: bool,
    pub mode: ExecMode,
}

impl Default for DedupOptions {
    fn default() -> Self {
        Self {
            catalog_filter: false,
            mode: ExecMode::Sequential,
        }
    }
}

/// Precedence for keeping one record out of a duplicate group: earliest
/// registration time, then lowest product id.
fn precedence_order(records: &[ProductRecord]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.sort_by(|&a, &b| {
        records[a]
            .registration_time
            .cmp(&records[b].registration_time)
            .then_with(|| records[a].product_id.cmp(&records[b].product_id))
    });
    order
}

fn dedup_pass<K: Ord>(
    alive: &mut [bool],
    order: &[usize],
    key_of: impl Fn(usize) -> K,
    reason: RejectReason,
    report: &mut DedupReport,
) {
    let mut seen: BTreeMap<K, ()> = BTreeMap::new();
    for &idx in order {
        if !alive[idx] {
            continue;
        }
        if seen.insert(key_of(idx), ()).is_some() {
            alive[idx] = false;
            report.bump(reason);
        }
    }
}

/// Run the three dedup passes (plus the optional catalog pass) over validated
/// records. `images[i]` must be the loaded image of `records[i]`. Returns the
/// kept indices in original manifest order plus the per-rule counts.
///
/// Title keys are the ordered token sequence, not an unordered token set, so
/// reordered titles count as distinct.
pub fn dedup(
    records: &[ProductRecord],
    images: &[ImageBuffer],
    embedder: &(dyn Fn(&ImageBuffer) -> Vec<f64> + Sync),
    options: &DedupOptions,
) -> Result<(Vec<usize>, DedupReport)> {
    if records.len() != images.len() {
        return Err(Error::Dimension(format!(
            "{} records but {} images",
            records.len(),
            images.len()
        )));
    }
    let mut report = DedupReport {
        input: records.len(),
        ..Default::default()
    };
    let mut alive = vec![true; records.len()];
    let order = precedence_order(records);

    // Pass 1: normalized token sequence of the title.
    let titles: Vec<Vec<String>> =
        exec::map_items(options.mode, records, |r| tokenize_title(&r.title));
    dedup_pass(
        &mut alive,
        &order,
        |i| titles[i].clone(),
        RejectReason::DupTitle,
        &mut report,
    );

    // Pass 2: perceptual patch hash of the image.
    let hashes: Vec<Result<String>> = exec::map_items(options.mode, images, patch_hash);
    let mut hash_strings = Vec::with_capacity(hashes.len());
    for h in hashes {
        hash_strings.push(h?);
    }
    dedup_pass(
        &mut alive,
        &order,
        |i| hash_strings[i].clone(),
        RejectReason::DupHash,
        &mut report,
    );

    // Pass 3: embedding equality after quantizing to three decimal places.
    let embeddings: Vec<Vec<i64>> = exec::map_items(options.mode, images, |img| {
        embedder(img)
            .into_iter()
            .map(|v| (v * 1000.0).round() as i64)
            .collect()
    });
    dedup_pass(
        &mut alive,
        &order,
        |i| embeddings[i].clone(),
        RejectReason::DupEmbedding,
        &mut report,
    );

    if options.catalog_filter {
        dedup_pass(
            &mut alive,
            &order,
            |i| records[i].catalog_id.clone(),
            RejectReason::DupCatalog,
            &mut report,
        );
    }

    let kept: Vec<usize> = (0..records.len()).filter(|&i| alive[i]).collect();
    report.kept = kept.len();
    debug_assert_eq!(report.kept + report.removed(), report.input);
    Ok((kept, report))
}

/// Full cleaning pipeline: validity filter, then dedup over the survivors.
/// `images[i]` describes the image of `records[i]`. Returns kept indices
/// (into the input) and the combined report.
pub fn clean(
    records: &[ProductRecord],
    images: &[Option<ImageBuffer>],
    corrupt: &[bool],
    min_side: usize,
    embedder: &(dyn Fn(&ImageBuffer) -> Vec<f64> + Sync),
    options: &DedupOptions,
) -> Result<(Vec<usize>, DedupReport)> {
    if records.len() != images.len() || records.len() != corrupt.len() {
        return Err(Error::Dimension("pipeline input lengths differ".into()));
    }
    let verdicts: Vec<Verdict> = exec::map_indices(options.mode, records.len(), |i| {
        let input = if corrupt[i] {
            ImageInput::Corrupt
        } else {
            match &images[i] {
                None => ImageInput::Missing,
                Some(img) => ImageInput::Loaded(img),
            }
        };
        validate(&records[i], input, min_side)
    });

    let mut survivors = Vec::new();
    let mut survivor_records = Vec::new();
    let mut survivor_images = Vec::new();
    let mut report_head = DedupReport {
        input: records.len(),
        ..Default::default()
    };
    for (i, v) in verdicts.iter().enumerate() {
        match v {
            Verdict::Keep => {
                survivors.push(i);
                survivor_records.push(records[i].clone());
                survivor_images.push(images[i].clone().expect("keep implies image"));
            }
            Verdict::Reject(reason) => report_head.bump(*reason),
        }
    }

    let (kept_local, dedup_report) = dedup(&survivor_records, &survivor_images, embedder, options)?;
    let mut report = report_head;
    report.dup_title = dedup_report.dup_title;
    report.dup_hash = dedup_report.dup_hash;
    report.dup_embedding = dedup_report.dup_embedding;
    report.dup_catalog = dedup_report.dup_catalog;
    let kept: Vec<usize> = kept_local.into_iter().map(|i| survivors[i]).collect();
    report.kept = kept.len();
    debug_assert_eq!(report.kept + report.removed(), report.input);
    Ok((kept, report))
}

/// Loads images referenced by a manifest, classifying missing and corrupt
/// files, then runs [`clean`].
pub fn clean_from_disk(
    records: &[ProductRecord],
    image_root: &std::path::Path,
    min_side: usize,
    options: &DedupOptions,
) -> Result<(Vec<usize>, DedupReport, HashMap<usize, ImageBuffer>)> {
    let mut images: Vec<Option<ImageBuffer>> = Vec::with_capacity(records.len());
    let mut corrupt = vec![false; records.len()];
    for (i, rec) in records.iter().enumerate() {
        let path = image_root.join(&rec.image_path);
        if !path.exists() {
            images.push(None);
            continue;
        }
        match ImageBuffer::load_ppm(&path) {
            Ok(img) => images.push(Some(img)),
            Err(_) => {
                corrupt[i] = true;
                images.push(None);
            }
        }
    }
    let (kept, report) = clean(
        records,
        &images,
        &corrupt,
        min_side,
        &patch_gray_embedding,
        options,
    )?;
    let mut loaded = HashMap::new();
    for &i in &kept {
        if let Some(img) = &images[i] {
            loaded.insert(i, img.clone());
        }
    }
    Ok((kept, report, loaded))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(id: &str, title: &str, time: &str) -> ProductRecord {
        ProductRecord {
            title: title.to_string(),
            brand_name: None,
            maker_name: None,
            mall_name: None,
            mall_category: vec![],
            price: 100,
            registration_time: time.to_string(),
            popularity: 0.0,
            image_path: format!("{id}.ppm"),
            product_category: vec!["a".into()],
            catalog_id: format!("cat-{id}"),
            product_id: id.to_string(),
            flagged: false,
        }
    }

    #[test]
    fn tokenize_examples() {
        assert_eq!(
            tokenize_title("Galaxy watch-4 (40mm)"),
            vec!["galaxy", "watch", "4", "40mm"]
        );
        assert_eq!(tokenize_title("A!!"), vec!["a"]);
        assert_eq!(tokenize_title(""), Vec::<String>::new());
    }

    #[test]
    fn validate_accepts_a_clean_record() {
        let img = ImageBuffer::filled(200, 200, [10, 10, 10]).unwrap();
        let rec = record("a", "three token title", "2022-01-01");
        assert_eq!(validate(&rec, ImageInput::Loaded(&img), 64), Verdict::Keep);
    }

    #[test]
    fn validate_rejects_short_titles() {
        let img = ImageBuffer::filled(200, 200, [10, 10, 10]).unwrap();
        let rec = record("a", "A!!", "2022-01-01");
        assert_eq!(
            validate(&rec, ImageInput::Loaded(&img), 64),
            Verdict::Reject(RejectReason::ShortTitle)
        );
    }

    #[test]
    fn validate_rejects_small_images_on_min_side() {
        let img = ImageBuffer::filled(500, 32, [10, 10, 10]).unwrap();
        let rec = record("a", "three token title", "2022-01-01");
        assert_eq!(
            validate(&rec, ImageInput::Loaded(&img), 64),
            Verdict::Reject(RejectReason::SmallImage)
        );
    }

    #[test]
    fn validate_rejects_missing_corrupt_and_flagged() {
        let rec = record("a", "three token title", "2022-01-01");
        assert_eq!(
            validate(&rec, ImageInput::Missing, 64),
            Verdict::Reject(RejectReason::NoImage)
        );
        assert_eq!(
            validate(&rec, ImageInput::Corrupt, 64),
            Verdict::Reject(RejectReason::Corrupt)
        );
        let img = ImageBuffer::filled(200, 200, [0, 0, 0]).unwrap();
        let mut flagged = rec.clone();
        flagged.flagged = true;
        assert_eq!(
            validate(&flagged, ImageInput::Loaded(&img), 64),
            Verdict::Reject(RejectReason::Flagged)
        );
    }

    #[test]
    fn patch_hash_uniform_gray() {
        let img = ImageBuffer::filled(100, 100, [128, 128, 128]).unwrap();
        let want = format!("{}0101", "5".repeat(25));
        assert_eq!(patch_hash(&img).unwrap(), want);
    }

    #[test]
    fn patch_hash_all_black() {
        let img = ImageBuffer::filled(100, 100, [0, 0, 0]).unwrap();
        let want = format!("{}0101", "0".repeat(25));
        assert_eq!(patch_hash(&img).unwrap(), want);
    }

    #[test]
    fn patch_hash_is_29_digits_and_deterministic() {
        let mut img = ImageBuffer::filled(37, 53, [1, 2, 3]).unwrap();
        img.set_rgb(10, 10, [255, 0, 255]);
        let a = patch_hash(&img).unwrap();
        let b = patch_hash(&img).unwrap();
        assert_eq!(a.len(), 29);
        assert_eq!(a, b);
        assert!(a.chars().all(|c| c.is_ascii_digit()));
        assert_eq!(&a[25..], "0000");
    }

    #[test]
    fn patch_hash_rejects_tiny_images() {
        let img = ImageBuffer::filled(4, 100, [0, 0, 0]).unwrap();
        assert!(matches!(
            patch_hash(&img),
            Err(Error::DegenerateImage(_))
        ));
    }

    #[test]
    fn patch_hash_invariant_to_permutation_within_a_patch() {
        // 10x10 image: each patch is a 2x2 block; swapping pixels inside a
        // block cannot change the block mean.
        let mut img = ImageBuffer::filled(10, 10, [100, 100, 100]).unwrap();
        img.set_rgb(0, 0, [200, 10, 30]);
        img.set_rgb(1, 1, [7, 250, 99]);
        let before = patch_hash(&img).unwrap();
        let a = img.rgb(0, 0);
        let b = img.rgb(1, 1);
        img.set_rgb(0, 0, b);
        img.set_rgb(1, 1, a);
        assert_eq!(before, patch_hash(&img).unwrap());
    }

    fn distinct_image(seed: u8) -> ImageBuffer {
        // Top-left patch carries seed % 10 as a hash digit, the next patch
        // seed / 10, so distinct seeds give distinct patch hashes.
        let mut img = ImageBuffer::filled(20, 20, [13, 13, 13]).unwrap();
        for (patch, digit) in [(0usize, seed % 10), (1, seed / 10 % 10)] {
            let gray = (digit as f64 * 25.6 + 12.8).round() as u8;
            for y in 0..4 {
                for x in patch * 4..(patch + 1) * 4 {
                    img.set_rgb(x, y, [gray, gray, gray]);
                }
            }
        }
        img
    }

    #[test]
    fn identical_titles_remove_the_later_record() {
        let records = vec![
            record("a", "same title here", "2022-01-01"),
            record("b", "same title here", "2022-03-01"),
        ];
        let images = vec![distinct_image(1), distinct_image(2)];
        let (kept, report) =
            dedup(&records, &images, &patch_gray_embedding, &DedupOptions::default()).unwrap();
        assert_eq!(kept, vec![0]);
        assert_eq!(report.dup_title, 1);
        assert_eq!(report.kept + report.removed(), report.input);
    }

    #[test]
    fn earliest_registration_wins_regardless_of_position() {
        let records = vec![
            record("a", "same title here", "2022-05-01"),
            record("b", "same title here", "2022-01-01"),
        ];
        let images = vec![distinct_image(3), distinct_image(4)];
        let (kept, _) =
            dedup(&records, &images, &patch_gray_embedding, &DedupOptions::default()).unwrap();
        assert_eq!(kept, vec![1]);
    }

    #[test]
    fn identical_images_remove_by_hash() {
        let records = vec![
            record("a", "first unique title", "2022-01-01"),
            record("b", "second unique title", "2022-01-02"),
        ];
        let images = vec![distinct_image(9), distinct_image(9)];
        let (kept, report) =
            dedup(&records, &images, &patch_gray_embedding, &DedupOptions::default()).unwrap();
        assert_eq!(kept, vec![0]);
        assert_eq!(report.dup_hash, 1);
        assert_eq!(report.dup_title, 0);
    }

    #[test]
    fn clean_manifest_passes_through_with_zero_counts() {
        let records = vec![
            record("a", "first unique title", "2022-01-01"),
            record("b", "second unique title", "2022-01-02"),
        ];
        let images = vec![distinct_image(1), distinct_image(50)];
        let (kept, report) =
            dedup(&records, &images, &patch_gray_embedding, &DedupOptions::default()).unwrap();
        assert_eq!(kept, vec![0, 1]);
        assert_eq!(report.removed(), 0);
    }

    #[test]
    fn dedup_is_idempotent() {
        let records = vec![
            record("a", "same title here", "2022-01-01"),
            record("b", "same title here", "2022-01-02"),
            record("c", "another product title", "2022-01-03"),
            record("d", "another product name", "2022-01-04"),
        ];
        let images = vec![
            distinct_image(1),
            distinct_image(2),
            distinct_image(3),
            distinct_image(3),
        ];
        let opts = DedupOptions::default();
        let (kept, _) = dedup(&records, &images, &patch_gray_embedding, &opts).unwrap();
        let records2: Vec<ProductRecord> = kept.iter().map(|&i| records[i].clone()).collect();
        let images2: Vec<ImageBuffer> = kept.iter().map(|&i| images[i].clone()).collect();
        let (kept2, report2) = dedup(&records2, &images2, &patch_gray_embedding, &opts).unwrap();
        assert_eq!(kept2, (0..records2.len()).collect::<Vec<_>>());
        assert_eq!(report2.removed(), 0);
    }

    #[test]
    fn catalog_filter_keeps_one_record_per_catalog() {
        let mut records = vec![
            record("a", "first unique title", "2022-01-01"),
            record("b", "second unique title", "2022-01-02"),
            record("c", "third unique title", "2022-01-03"),
        ];
        records[1].catalog_id = records[0].catalog_id.clone();
        let images = vec![distinct_image(1), distinct_image(2), distinct_image(3)];
        let opts = DedupOptions {
            catalog_filter: true,
            ..Default::default()
        };
        let (kept, report) = dedup(&records, &images, &patch_gray_embedding, &opts).unwrap();
        assert_eq!(kept, vec![0, 2]);
        assert_eq!(report.dup_catalog, 1);
    }

    #[test]
    fn rejection_reasons_partition_removals() {
        let records = vec![
            record("a", "valid product title", "2022-01-01"),
            record("b", "x", "2022-01-02"),
            record("c", "valid product title", "2022-01-03"),
            record("d", "another product title", "2022-01-04"),
        ];
        let img = distinct_image(7);
        let images = vec![Some(img.clone()), Some(img.clone()), Some(img.clone()), None];
        let corrupt = vec![false, false, false, false];
        let (kept, report) = clean(
            &records,
            &images,
            &corrupt,
            5,
            &patch_gray_embedding,
            &DedupOptions::default(),
        )
        .unwrap();
        assert_eq!(report.input, 4);
        assert_eq!(report.kept + report.removed(), report.input);
        assert_eq!(report.short_title, 1);
        assert_eq!(report.no_image, 1);
        assert_eq!(report.dup_title, 1);
        assert_eq!(kept, vec![0]);
    }
}
