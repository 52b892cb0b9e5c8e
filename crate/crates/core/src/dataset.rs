//! Manifest ingestion, annotation merging, rating normalization, and the
//! JSON record store that downstream commands consume.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CscaError, Result};
use crate::imaging::ChannelStats;
use crate::types::{ContentLabel, DrawingRecord, Split};
use crate::util::fnv1a64;

/// Columns required in a drawing manifest, in order.
const MANIFEST_HEADER: [&str; 4] = ["id", "image_path", "rating_raw", "split"];

/// Columns required in an annotation file, in order.
const ANNOTATION_HEADER: [&str; 2] = ["id", "content_label"];

fn check_header(path: &Path, got: &csv::StringRecord, want: &[&str]) -> Result<()> {
    let got_cols: Vec<&str> = got.iter().map(str::trim).collect();
    if got_cols != want {
        return Err(CscaError::MalformedRow {
            path: path.to_path_buf(),
            row: 1,
            detail: format!(
                "expected header `{}`, got `{}`",
                want.join(","),
                got_cols.join(",")
            ),
        });
    }
    Ok(())
}

/// Reads a drawing manifest CSV with columns `id,image_path,rating_raw,split`.
///
/// Records come back sorted by id with `rating_norm`, `content_label`, and
/// `style_scalar` unset. Duplicate ids, malformed rows, unknown splits, and
/// non-finite ratings are errors.
pub fn load_dataset(path: &Path) -> Result<Vec<DrawingRecord>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, 1, e))?;
    check_header(path, reader.headers().map_err(|e| csv_error(path, 1, e))?, &MANIFEST_HEADER)?;

    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (i, row) in reader.records().enumerate() {
        let row_no = i + 2;
        let row = row.map_err(|e| csv_error(path, row_no, e))?;
        if row.len() != MANIFEST_HEADER.len() {
            return Err(CscaError::MalformedRow {
                path: path.to_path_buf(),
                row: row_no,
                detail: format!("expected {} fields, got {}", MANIFEST_HEADER.len(), row.len()),
            });
        }
        let id = row[0].to_string();
        if id.is_empty() {
            return Err(CscaError::MalformedRow {
                path: path.to_path_buf(),
                row: row_no,
                detail: "empty id".into(),
            });
        }
        if !seen.insert(id.clone()) {
            return Err(CscaError::DuplicateId(id));
        }
        let image_path = row[1].to_string();
        if image_path.is_empty() {
            return Err(CscaError::MalformedRow {
                path: path.to_path_buf(),
                row: row_no,
                detail: "empty image_path".into(),
            });
        }
        let rating_raw: f64 = row[2].parse().map_err(|e| CscaError::MalformedRow {
            path: path.to_path_buf(),
            row: row_no,
            detail: format!("bad rating_raw `{}`: {}", &row[2], e),
        })?;
        if !rating_raw.is_finite() {
            return Err(CscaError::MalformedRow {
                path: path.to_path_buf(),
                row: row_no,
                detail: format!("non-finite rating_raw `{}`", &row[2]),
            });
        }
        let split: Split = row[3].parse()?;
        records.push(DrawingRecord {
            id,
            image_path,
            rating_raw,
            rating_norm: None,
            content_label: None,
            split,
            style_scalar: None,
        });
    }
    records.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(records)
}

/// Writes records back out in manifest form (the four manifest columns only).
pub fn save_dataset(records: &[DrawingRecord], path: &Path) -> Result<()> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| csv_error(path, 1, e))?;
    writer
        .write_record(MANIFEST_HEADER)
        .map_err(|e| csv_error(path, 1, e))?;
    for (i, r) in records.iter().enumerate() {
        writer
            .write_record([
                r.id.as_str(),
                r.image_path.as_str(),
                &format_float(r.rating_raw),
                r.split.as_str(),
            ])
            .map_err(|e| csv_error(path, i + 2, e))?;
    }
    writer.flush().map_err(|e| CscaError::io(path, e))?;
    Ok(())
}

/// Shortest decimal representation that round-trips the value, always with
/// a decimal point so the column stays visibly numeric.
fn format_float(v: f64) -> String {
    let mut buf = format!("{}", v);
    if !buf.contains('.') && !buf.contains('e') && !buf.contains("inf") && !buf.contains("NaN") {
        buf.push_str(".0");
    }
    buf
}

/// Result of merging an annotation file into a record set.
#[derive(Debug)]
pub struct MergeOutcome {
    pub records: Vec<DrawingRecord>,
    /// Record ids that had no annotation row.
    pub unannotated: Vec<String>,
    /// Annotation ids that matched no record.
    pub unmatched: Vec<String>,
}

/// Merges a `id,content_label` CSV into the record set.
///
/// Unknown labels are hard errors; ids on either side without a partner are
/// reported back so the caller can warn. Duplicate annotation ids are errors.
pub fn merge_annotations(records: Vec<DrawingRecord>, path: &Path) -> Result<MergeOutcome> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, 1, e))?;
    check_header(path, reader.headers().map_err(|e| csv_error(path, 1, e))?, &ANNOTATION_HEADER)?;

    let mut labels: HashMap<String, ContentLabel> = HashMap::new();
    let mut order: Vec<String> = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let row_no = i + 2;
        let row = row.map_err(|e| csv_error(path, row_no, e))?;
        if row.len() != ANNOTATION_HEADER.len() {
            return Err(CscaError::MalformedRow {
                path: path.to_path_buf(),
                row: row_no,
                detail: format!(
                    "expected {} fields, got {}",
                    ANNOTATION_HEADER.len(),
                    row.len()
                ),
            });
        }
        let id = row[0].to_string();
        let label: ContentLabel = row[1].parse()?;
        if labels.insert(id.clone(), label).is_some() {
            return Err(CscaError::DuplicateId(id));
        }
        order.push(id);
    }

    let mut records = records;
    let mut matched: HashSet<&str> = HashSet::new();
    let mut unannotated = Vec::new();
    for record in &mut records {
        match labels.get(&record.id) {
            Some(&label) => {
                record.content_label = Some(label);
                matched.insert(record.id.as_str());
            }
            None => unannotated.push(record.id.clone()),
        }
    }
    let unmatched: Vec<String> = order
        .into_iter()
        .filter(|id| !matched.contains(id.as_str()))
        .collect();

    Ok(MergeOutcome {
        records,
        unannotated,
        unmatched,
    })
}

/// Min-max normalizes `rating_raw` into `rating_norm` for every record,
/// using statistics from `stats_source` only.
///
/// Ratings outside the source range clamp to [0, 1]. An empty or constant
/// source split is an error.
pub fn normalize_ratings(
    mut records: Vec<DrawingRecord>,
    stats_source: Split,
) -> Result<Vec<DrawingRecord>> {
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    let mut count = 0usize;
    for r in &records {
        if r.split == stats_source {
            min = min.min(r.rating_raw);
            max = max.max(r.rating_raw);
            count += 1;
        }
    }
    if count == 0 {
        return Err(CscaError::EmptyInput(format!(
            "no records in `{}` split to normalize against",
            stats_source
        )));
    }
    if min == max {
        return Err(CscaError::DegenerateRatings {
            split: stats_source.to_string(),
            value: min,
        });
    }
    let range = max - min;
    for r in &mut records {
        let norm = ((r.rating_raw - min) / range).clamp(0.0, 1.0);
        r.rating_norm = Some(norm);
    }
    Ok(records)
}

/// Per-split record counts, keyed in `Split::ALL` order.
pub fn split_counts(records: &[DrawingRecord]) -> BTreeMap<Split, usize> {
    let mut counts = BTreeMap::new();
    for r in records {
        *counts.entry(r.split).or_insert(0) += 1;
    }
    counts
}

/// On-disk product of ingestion: normalized records plus the training-image
/// channel statistics every later command preprocesses with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordStore {
    pub version: u32,
    /// Digest of the ingested inputs, echoed in later outputs so runs can
    /// be traced back to their data.
    pub source_fingerprint: String,
    pub channel_stats: ChannelStats,
    pub records: Vec<DrawingRecord>,
}

pub const STORE_VERSION: u32 = 1;

impl RecordStore {
    pub fn new(
        records: Vec<DrawingRecord>,
        channel_stats: ChannelStats,
        source_fingerprint: String,
    ) -> Self {
        RecordStore {
            version: STORE_VERSION,
            source_fingerprint,
            channel_stats,
            records,
        }
    }

    /// Serializes to pretty JSON. Output bytes depend only on the contents,
    /// so re-ingesting identical inputs rewrites an identical file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut json = serde_json::to_string_pretty(self)
            .map_err(|e| CscaError::Checkpoint(format!("store serialization failed: {e}")))?;
        json.push('\n');
        fs::write(path, json).map_err(|e| CscaError::io(path, e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| CscaError::io(path, e))?;
        let store: RecordStore = serde_json::from_slice(&bytes).map_err(|e| {
            CscaError::Checkpoint(format!("{}: store parse failed: {e}", path.display()))
        })?;
        if store.version != STORE_VERSION {
            return Err(CscaError::Checkpoint(format!(
                "{}: unsupported store version {} (this build reads {})",
                path.display(),
                store.version,
                STORE_VERSION
            )));
        }
        Ok(store)
    }

    /// Records in the given split, in stored (id) order.
    pub fn split(&self, split: Split) -> Vec<&DrawingRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }
}

/// Digest over raw manifest and annotation bytes, recorded in the store.
pub fn source_fingerprint(manifest_bytes: &[u8], annotation_bytes: Option<&[u8]>) -> String {
    let mut buf = Vec::with_capacity(
        manifest_bytes.len() + annotation_bytes.map_or(0, |b| b.len()) + 1,
    );
    buf.extend_from_slice(manifest_bytes);
    buf.push(0);
    if let Some(b) = annotation_bytes {
        buf.extend_from_slice(b);
    }
    format!("{:016x}", fnv1a64(&buf))
}

fn csv_error(path: &Path, row: usize, e: csv::Error) -> CscaError {
    CscaError::MalformedRow {
        path: path.to_path_buf(),
        row,
        detail: e.to_string(),
    }
}
