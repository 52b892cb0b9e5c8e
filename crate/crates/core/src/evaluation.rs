//! Rank correlation metrics and per-split evaluation reports.

use serde::{Deserialize, Serialize};

use crate::error::{CscaError, Result};
use crate::model::CscaModel;
use crate::types::{DrawingRecord, Split};

fn check_finite(name: &str, x: &[f64]) -> Result<()> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(CscaError::NonFinite(format!("{name} vector")));
    }
    Ok(())
}

/// Average ranks (1-based): ties receive the mean of the positions they
/// occupy, so the ranks of `[1, 2, 2, 5]` are `[1, 2.5, 2.5, 4]`.
pub fn average_ranks(x: &[f64]) -> Result<Vec<f64>> {
    check_finite("rank input", x)?;
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].partial_cmp(&x[b]).expect("finiteness checked"));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        // Positions i..=j (0-based) share the mean 1-based rank.
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = rank;
        }
        i = j + 1;
    }
    Ok(ranks)
}

fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    let n = x.len() as f64;
    let mean_x = x.iter().sum::<f64>() / n;
    let mean_y = y.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut var_x = 0.0;
    let mut var_y = 0.0;
    for (a, b) in x.iter().zip(y.iter()) {
        let dx = a - mean_x;
        let dy = b - mean_y;
        cov += dx * dy;
        var_x += dx * dx;
        var_y += dy * dy;
    }
    if var_x == 0.0 || var_y == 0.0 {
        return Err(CscaError::ConstantInput(
            "a vector with zero variance has no linear correlation".into(),
        ));
    }
    Ok(cov / (var_x.sqrt() * var_y.sqrt()))
}

fn check_pair(x: &[f64], y: &[f64], context: &str) -> Result<()> {
    if x.len() != y.len() {
        return Err(CscaError::DimensionMismatch(format!(
            "{context}: {} vs {} samples",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 3 {
        return Err(CscaError::TooFewSamples {
            context: context.into(),
            needed: 3,
            got: x.len(),
        });
    }
    check_finite(context, x)?;
    check_finite(context, y)
}

/// Pearson linear correlation coefficient.
pub fn plcc(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y, "plcc")?;
    pearson(x, y)
}

/// Spearman rank correlation coefficient: Pearson correlation of average
/// ranks, which handles ties exactly.
pub fn srcc(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y, "srcc")?;
    let rx = average_ranks(x)?;
    let ry = average_ranks(y)?;
    pearson(&rx, &ry)
}

/// Correlations of one evaluation subset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalEntry {
    pub subset: String,
    pub srcc: f64,
    pub plcc: f64,
    pub n: usize,
}

/// Full evaluation report across subsets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub backbone_id: String,
    pub config_fingerprint: String,
    /// RFC 3339 creation time. Metadata only; the measured values depend
    /// solely on inputs and seed.
    pub timestamp: String,
    pub entries: Vec<EvalEntry>,
}

impl EvalReport {
    pub fn new(model: &CscaModel, entries: Vec<EvalEntry>) -> Self {
        EvalReport {
            backbone_id: model.bundle.model_id().to_string(),
            config_fingerprint: model.config.fingerprint(),
            timestamp: chrono::Utc::now().to_rfc3339(),
            entries,
        }
    }

    /// Plain-text table for terminals and report files.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "backbone: {}\nconfig fingerprint: {}\ngenerated: {}\n\n",
            self.backbone_id, self.config_fingerprint, self.timestamp
        ));
        out.push_str(&format!(
            "{:<14} {:>8} {:>8} {:>8}\n",
            "subset", "srcc", "plcc", "n"
        ));
        for e in &self.entries {
            out.push_str(&format!(
                "{:<14} {:>8.4} {:>8.4} {:>8}\n",
                e.subset, e.srcc, e.plcc, e.n
            ));
        }
        out
    }
}

/// Scores every record of `subset` with the model and correlates against
/// the normalized ratings.
///
/// Records are processed in id order; all of them are preprocessed with the
/// training-split channel statistics carried inside the model.
pub fn evaluate(
    model: &CscaModel,
    records: &[DrawingRecord],
    subset: Split,
) -> Result<EvalEntry> {
    let mut subset_records: Vec<&DrawingRecord> =
        records.iter().filter(|r| r.split == subset).collect();
    subset_records.sort_by(|a, b| a.id.cmp(&b.id));
    if subset_records.len() < 3 {
        return Err(CscaError::TooFewSamples {
            context: format!("evaluation on `{}`", subset.report_label()),
            needed: 3,
            got: subset_records.len(),
        });
    }

    let items = crate::training::featurize_records(
        &subset_records,
        &model.stats,
        model.bundle.as_ref(),
    )?;
    let mut predictions = Vec::with_capacity(items.len());
    let mut targets = Vec::with_capacity(items.len());
    for item in &items {
        let pred = model.predict_features(&item.features, item.t_i)?;
        predictions.push(pred.score);
        targets.push(item.target);
    }

    Ok(EvalEntry {
        subset: subset.report_label().to_string(),
        srcc: srcc(&predictions, &targets)?,
        plcc: plcc(&predictions, &targets)?,
        n: items.len(),
    })
}
