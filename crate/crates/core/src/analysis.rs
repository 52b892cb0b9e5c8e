//! Style analyses: how strongly the ink-intensity proxy tracks human
//! ratings, overall and per content category.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{CscaError, Result};
use crate::evaluation::srcc;
use crate::types::{ContentLabel, DrawingRecord};

/// Two-sided p-value for a Spearman coefficient via the Student-t
/// approximation: `t = r * sqrt((n-2) / (1-r^2))` with `n-2` degrees of
/// freedom.
pub fn spearman_p_value(r: f64, n: usize) -> Result<f64> {
    if n < 3 {
        return Err(CscaError::TooFewSamples {
            context: "spearman p-value".into(),
            needed: 3,
            got: n,
        });
    }
    if !r.is_finite() || r.abs() > 1.0 {
        return Err(CscaError::NonFinite(format!(
            "correlation coefficient {r} outside [-1, 1]"
        )));
    }
    let df = (n - 2) as f64;
    if r.abs() >= 1.0 {
        return Ok(0.0);
    }
    let t = r * (df / (1.0 - r * r)).sqrt();
    let dist = StudentsT::new(0.0, 1.0, df)
        .map_err(|e| CscaError::Config(format!("t-distribution: {e}")))?;
    // Two-sided: P(|T| >= |t|).
    Ok(2.0 * (1.0 - dist.cdf(t.abs())))
}

/// One row of the style/rating correlation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationRow {
    /// `None` marks the combined row over all labeled records.
    pub category: Option<ContentLabel>,
    pub srcc: f64,
    pub p_value: f64,
    pub n: usize,
}

/// A category left out of the table, with the reason.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedCategory {
    pub category: ContentLabel,
    pub n: usize,
    pub reason: String,
}

/// Style/rating correlation table: one row per content category present in
/// the data plus one combined row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationTable {
    pub rows: Vec<CorrelationRow>,
    pub skipped: Vec<SkippedCategory>,
    /// Records without a content label, excluded from every row.
    pub unlabeled: usize,
}

/// Pairs of (style scalar, normalized rating) for labeled records.
fn style_rating_pairs(records: &[&DrawingRecord]) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut style = Vec::with_capacity(records.len());
    let mut rating = Vec::with_capacity(records.len());
    for r in records {
        let t = r.style_scalar.ok_or_else(|| {
            CscaError::Config(format!(
                "record `{}` has no style scalar; run ingestion first",
                r.id
            ))
        })?;
        let q = r.rating_norm.ok_or_else(|| {
            CscaError::Config(format!(
                "record `{}` has no normalized rating; run ingestion first",
                r.id
            ))
        })?;
        style.push(t);
        rating.push(q);
    }
    Ok((style, rating))
}

/// Builds the correlation table over all labeled records.
///
/// Categories with fewer than 3 records, or with a constant style or rating
/// vector, are skipped with a reason. The per-category row counts always
/// sum to the combined row's count.
pub fn style_rating_correlation(records: &[DrawingRecord]) -> Result<CorrelationTable> {
    let labeled: Vec<&DrawingRecord> =
        records.iter().filter(|r| r.content_label.is_some()).collect();
    let unlabeled = records.len() - labeled.len();
    if labeled.len() < 3 {
        return Err(CscaError::TooFewSamples {
            context: "style/rating correlation".into(),
            needed: 3,
            got: labeled.len(),
        });
    }

    let mut rows = Vec::new();
    let mut skipped = Vec::new();

    for label in ContentLabel::ALL {
        let subset: Vec<&DrawingRecord> = labeled
            .iter()
            .copied()
            .filter(|r| r.content_label == Some(label))
            .collect();
        if subset.is_empty() {
            continue;
        }
        if subset.len() < 3 {
            skipped.push(SkippedCategory {
                category: label,
                n: subset.len(),
                reason: "fewer than 3 records".into(),
            });
            continue;
        }
        let (style, rating) = style_rating_pairs(&subset)?;
        match srcc(&style, &rating) {
            Ok(r) => rows.push(CorrelationRow {
                category: Some(label),
                srcc: r,
                p_value: spearman_p_value(r, subset.len())?,
                n: subset.len(),
            }),
            Err(CscaError::ConstantInput(_)) => skipped.push(SkippedCategory {
                category: label,
                n: subset.len(),
                reason: "constant style or rating values".into(),
            }),
            Err(e) => return Err(e),
        }
    }

    let (style, rating) = style_rating_pairs(&labeled)?;
    let combined = srcc(&style, &rating)?;
    rows.push(CorrelationRow {
        category: None,
        srcc: combined,
        p_value: spearman_p_value(combined, labeled.len())?,
        n: labeled.len(),
    });

    Ok(CorrelationTable {
        rows,
        skipped,
        unlabeled,
    })
}

/// One cell of the binned-mean summary: a style bin crossed with a content
/// category.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinCell {
    /// Bin index, 0-based, over min-max normalized style values.
    pub bin: usize,
    pub category: ContentLabel,
    pub n: usize,
    /// Mean normalized rating; `None` when the cell is empty.
    pub mean_rating_norm: Option<f64>,
    /// Mean raw rating; `None` when the cell is empty.
    pub mean_rating_raw: Option<f64>,
}

/// Mean ratings per (style bin, category) cell.
///
/// Style values are min-max normalized over the analyzed records, then cut
/// into `n_bins` equal-width bins; the final bin is closed on the right so
/// the maximum lands in it. Empty cells are reported with `n = 0`.
pub fn binned_rating_means(records: &[DrawingRecord], n_bins: usize) -> Result<Vec<BinCell>> {
    if n_bins == 0 {
        return Err(CscaError::Config("n_bins must be at least 1".into()));
    }
    let labeled: Vec<&DrawingRecord> =
        records.iter().filter(|r| r.content_label.is_some()).collect();
    if labeled.is_empty() {
        return Err(CscaError::EmptyInput("binned means".into()));
    }
    let (style, _) = style_rating_pairs(&labeled)?;
    let min = style.iter().copied().fold(f64::INFINITY, f64::min);
    let max = style.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if min == max {
        return Err(CscaError::ConstantInput(
            "all style values are equal; binning is undefined".into(),
        ));
    }
    let range = max - min;

    // (count, sum of normalized ratings, sum of raw ratings) per cell.
    let mut cells = vec![(0usize, 0.0f64, 0.0f64); n_bins * 5];
    for (r, &t) in labeled.iter().zip(style.iter()) {
        let normalized = (t - min) / range;
        let bin = ((normalized * n_bins as f64) as usize).min(n_bins - 1);
        let label = r.content_label.expect("filtered to labeled records");
        let cell = &mut cells[bin * 5 + label.code()];
        cell.0 += 1;
        cell.1 += r.rating_norm.expect("checked by style_rating_pairs");
        cell.2 += r.rating_raw;
    }

    let mut out = Vec::with_capacity(n_bins * 5);
    for bin in 0..n_bins {
        for label in ContentLabel::ALL {
            let (n, norm_sum, raw_sum) = cells[bin * 5 + label.code()];
            out.push(BinCell {
                bin,
                category: label,
                n,
                mean_rating_norm: (n > 0).then(|| norm_sum / n as f64),
                mean_rating_raw: (n > 0).then(|| raw_sum / n as f64),
            });
        }
    }
    Ok(out)
}

/// Point in a scatter series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterPoint {
    pub x: f64,
    pub y: f64,
    pub id: String,
}

/// Declarative plot description for external renderers: per-category
/// scatter of (normalized style, normalized rating) plus per-category
/// binned-mean lines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotSpec {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub scatter: Vec<PlotSeries>,
    pub bin_lines: Vec<PlotSeries>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotSeries {
    pub name: String,
    pub points: Vec<ScatterPoint>,
}

/// Builds the plot description from labeled records.
pub fn plot_spec(records: &[DrawingRecord], n_bins: usize) -> Result<PlotSpec> {
    let labeled: Vec<&DrawingRecord> =
        records.iter().filter(|r| r.content_label.is_some()).collect();
    if labeled.is_empty() {
        return Err(CscaError::EmptyInput("plot spec".into()));
    }
    let (style, _) = style_rating_pairs(&labeled)?;
    let min = style.iter().copied().fold(f64::INFINITY, f64::min);
    let max = style.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if min == max {
        return Err(CscaError::ConstantInput(
            "all style values are equal; nothing to plot".into(),
        ));
    }
    let range = max - min;

    let mut scatter = Vec::new();
    for label in ContentLabel::ALL {
        let points: Vec<ScatterPoint> = labeled
            .iter()
            .zip(style.iter())
            .filter(|(r, _)| r.content_label == Some(label))
            .map(|(r, &t)| ScatterPoint {
                x: (t - min) / range,
                y: r.rating_norm.expect("checked by style_rating_pairs"),
                id: r.id.clone(),
            })
            .collect();
        if !points.is_empty() {
            scatter.push(PlotSeries {
                name: label.to_string(),
                points,
            });
        }
    }

    let cells = binned_rating_means(records, n_bins)?;
    let mut bin_lines = Vec::new();
    for label in ContentLabel::ALL {
        let points: Vec<ScatterPoint> = cells
            .iter()
            .filter(|c| c.category == label && c.n > 0)
            .map(|c| ScatterPoint {
                x: (c.bin as f64 + 0.5) / n_bins as f64,
                y: c.mean_rating_norm.expect("cells with n > 0 have means"),
                id: format!("{}-bin{}", label, c.bin),
            })
            .collect();
        if !points.is_empty() {
            bin_lines.push(PlotSeries {
                name: label.to_string(),
                points,
            });
        }
    }

    Ok(PlotSpec {
        title: "ink intensity vs creativity rating".into(),
        x_label: "normalized ink intensity".into(),
        y_label: "normalized rating".into(),
        scatter,
        bin_lines,
    })
}

/// Renders the correlation table as CSV: `category,srcc,p_value,n`.
pub fn correlation_csv(table: &CorrelationTable) -> String {
    let mut out = String::from("category,srcc,p_value,n\n");
    for row in &table.rows {
        let name = row
            .category
            .map_or("combined".to_string(), |c| c.to_string());
        out.push_str(&format!(
            "{},{},{},{}\n",
            name, row.srcc, row.p_value, row.n
        ));
    }
    out
}

/// Renders binned means as CSV: `bin,category,n,mean_rating_norm,mean_rating_raw`.
/// Empty cells leave the mean columns blank.
pub fn binned_means_csv(cells: &[BinCell]) -> String {
    let mut out = String::from("bin,category,n,mean_rating_norm,mean_rating_raw\n");
    for c in cells {
        let norm = c
            .mean_rating_norm
            .map_or(String::new(), |v| format!("{v}"));
        let raw = c.mean_rating_raw.map_or(String::new(), |v| format!("{v}"));
        out.push_str(&format!("{},{},{},{},{}\n", c.bin, c.category, c.n, norm, raw));
    }
    out
}
