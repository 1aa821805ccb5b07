//! Product manifests: one JSON record per line.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;

/// One catalog entry. Field names match the manifest wire format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProductRecord {
    pub title: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub brand_name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub maker_name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mall_name: Option<String>,
    #[serde(default)]
    pub mall_category: Vec<String>,
    /// Integer currency units.
    pub price: i64,
    /// ISO date, e.g. "2022-01-04"; lexicographic order is chronological.
    pub registration_time: String,
    pub popularity: f64,
    /// Path to the product's P6 pixmap, relative to the manifest's image root.
    pub image_path: String,
    /// Assigned category path, at most four levels.
    pub product_category: Vec<String>,
    pub catalog_id: String,
    pub product_id: String,
    /// Set when the moderation system flagged the product.
    #[serde(default)]
    pub flagged: bool,
}

pub fn read_manifest(path: &Path) -> Result<Vec<ProductRecord>> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut records: Vec<ProductRecord> = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: ProductRecord = serde_json::from_str(&line)?;
        if !seen.insert(record.product_id.clone()) {
            return Err(crate::error::Error::Format(format!(
                "duplicate product_id '{}' in manifest",
                record.product_id
            )));
        }
        records.push(record);
    }
    Ok(records)
}

pub fn write_manifest(path: &Path, records: &[ProductRecord]) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    for rec in records {
        serde_json::to_writer(&mut file, rec)?;
        file.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn sample_record(id: &str) -> ProductRecord {
        ProductRecord {
            title: format!("product {id}"),
            brand_name: None,
            maker_name: None,
            mall_name: Some("mall".into()),
            mall_category: vec!["electronics".into()],
            price: 1000,
            registration_time: "2022-01-04".into(),
            popularity: 1.5,
            image_path: format!("{id}.ppm"),
            product_category: vec!["electronics".into(), "watch".into()],
            catalog_id: format!("cat-{id}"),
            product_id: id.to_string(),
            flagged: false,
        }
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.jsonl");
        let records = vec![sample_record("a"), sample_record("b")];
        write_manifest(&path, &records).unwrap();
        let back = read_manifest(&path).unwrap();
        assert_eq!(records, back);
    }

    #[test]
    fn duplicate_product_ids_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.jsonl");
        let mut b = sample_record("b");
        b.product_id = "a".into();
        write_manifest(&path, &[sample_record("a"), b]).unwrap();
        assert!(read_manifest(&path).is_err());
    }

    #[test]
    fn unknown_manifest_keys_are_rejected() {
        let line = r#"{"title":"t","price":1,"registration_time":"2022-01-01","popularity":0.0,"image_path":"x.ppm","product_category":["a"],"catalog_id":"c","product_id":"p","bogus":1}"#;
        let res: std::result::Result<ProductRecord, _> = serde_json::from_str(line);
        assert!(res.is_err());
    }
}
