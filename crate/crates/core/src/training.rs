//! Losses, the optimizer, and the training loop.
//!
//! Training touches only [`CscaParameters`]; encoders stay frozen. The loop
//! is deterministic given `(records, bundle, stats, config)`: shuffling and
//! initialization both derive from `config.seed`.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use ndarray::Array1;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{EncoderBundle, FeatureVector};
use crate::error::{CscaError, Result};
use crate::imaging::ChannelStats;
use crate::model::{
    backward_one, featurize, forward_one, Checkpoint, ContentPromptBank, CscaModel,
    CscaParameters,
};
use crate::types::{AblationFlags, ContentLabel, DrawingRecord, RunConfig, Split};
use crate::util::splitmix64;

/// Floor inside the classification log so empty content probabilities stay
/// finite.
pub const LOG_FLOOR: f64 = 1e-12;

/// Mean squared error between predictions and targets.
pub fn regression_loss(predictions: &[f64], targets: &[f64]) -> Result<f64> {
    if predictions.len() != targets.len() {
        return Err(CscaError::DimensionMismatch(format!(
            "{} predictions vs {} targets",
            predictions.len(),
            targets.len()
        )));
    }
    if predictions.is_empty() {
        return Err(CscaError::EmptyInput("regression loss".into()));
    }
    let n = predictions.len() as f64;
    let sum: f64 = predictions
        .iter()
        .zip(targets.iter())
        .map(|(p, t)| (p - t) * (p - t))
        .sum();
    Ok(sum / n)
}

/// Mean negative log-likelihood of the true content labels under the rows
/// of `probs`. Each probability is floored at [`LOG_FLOOR`].
pub fn classification_loss(probs: &[Array1<f64>], labels: &[ContentLabel]) -> Result<f64> {
    if probs.len() != labels.len() {
        return Err(CscaError::DimensionMismatch(format!(
            "{} probability rows vs {} labels",
            probs.len(),
            labels.len()
        )));
    }
    if probs.is_empty() {
        return Err(CscaError::EmptyInput("classification loss".into()));
    }
    let n = probs.len() as f64;
    let mut sum = 0.0;
    for (row, label) in probs.iter().zip(labels.iter()) {
        if row.len() != 5 {
            return Err(CscaError::DimensionMismatch(format!(
                "content probability row has {} entries, expected 5",
                row.len()
            )));
        }
        sum -= row[label.code()].max(LOG_FLOOR).ln();
    }
    Ok(sum / n)
}

/// The three loss figures reported for every batch and epoch.
///
/// `total` is always formed by the same expression, `l_reg + lambda *
/// l_cls`, so logged numbers reproduce exactly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_reg: f64,
    pub l_cls: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(l_reg: f64, l_cls: f64, lambda: f64) -> Self {
        LossBreakdown {
            l_reg,
            l_cls,
            total: l_reg + lambda * l_cls,
        }
    }
}

/// One featurized example: everything the scoring head needs, with the
/// image decoded exactly once upstream.
#[derive(Debug, Clone)]
pub struct TrainItem {
    pub id: String,
    pub features: FeatureVector,
    pub t_i: f64,
    pub target: f64,
    pub label: Option<ContentLabel>,
}

/// Decodes and encodes every record in parallel.
///
/// Records must carry `rating_norm`; ink intensity is recomputed from the
/// image so items never depend on possibly stale stored values.
pub fn featurize_records(
    records: &[&DrawingRecord],
    stats: &ChannelStats,
    bundle: &dyn EncoderBundle,
) -> Result<Vec<TrainItem>> {
    records
        .par_iter()
        .map(|r| {
            let target = r.rating_norm.ok_or_else(|| {
                CscaError::Config(format!(
                    "record `{}` has no normalized rating; run ingestion first",
                    r.id
                ))
            })?;
            let (features, t_i) = featurize(Path::new(&r.image_path), stats, bundle)?;
            Ok(TrainItem {
                id: r.id.clone(),
                features,
                t_i,
                target,
                label: r.content_label,
            })
        })
        .collect()
}

/// Forward-only loss over a batch.
pub fn batch_loss(
    params: &CscaParameters,
    config: &RunConfig,
    levels: &[FeatureVector],
    prompts: &ContentPromptBank,
    items: &[&TrainItem],
) -> Result<LossBreakdown> {
    if items.is_empty() {
        return Err(CscaError::EmptyInput("loss over an empty batch".into()));
    }
    let mut predictions = Vec::with_capacity(items.len());
    let mut targets = Vec::with_capacity(items.len());
    let mut labeled_probs = Vec::new();
    let mut labels = Vec::new();
    for item in items {
        let trace = forward_one(params, config, levels, prompts, &item.features, item.t_i)?;
        predictions.push(trace.score);
        targets.push(item.target);
        if let Some(label) = item.label {
            labeled_probs.push(trace.z);
            labels.push(label);
        }
    }
    let l_reg = regression_loss(&predictions, &targets)?;
    let l_cls = if labels.is_empty() {
        0.0
    } else {
        classification_loss(&labeled_probs, &labels)?
    };
    Ok(LossBreakdown::new(l_reg, l_cls, config.lambda_cls))
}

/// Loss plus parameter gradients over a batch.
///
/// The classification term is reported but contributes no gradient: content
/// probabilities are computed entirely from frozen components, so its
/// derivative with respect to every trainable parameter is identically
/// zero. Only the regression term moves the parameters.
pub fn batch_loss_and_grads(
    params: &CscaParameters,
    config: &RunConfig,
    bundle: &dyn EncoderBundle,
    levels: &[FeatureVector],
    prompts: &ContentPromptBank,
    items: &[&TrainItem],
) -> Result<(LossBreakdown, CscaParameters)> {
    if items.is_empty() {
        return Err(CscaError::EmptyInput("loss over an empty batch".into()));
    }
    let d = levels.first().map_or(0, |l| l.len());
    let mut grads = params.zeros_like();
    let mut d_levels = vec![Array1::<f64>::zeros(d); 5];

    let n = items.len() as f64;
    let mut predictions = Vec::with_capacity(items.len());
    let mut targets = Vec::with_capacity(items.len());
    let mut labeled_probs = Vec::new();
    let mut labels = Vec::new();

    for item in items {
        let trace = forward_one(params, config, levels, prompts, &item.features, item.t_i)?;
        // d(l_reg)/d(score_i) for the mean of squared errors.
        let d_score = 2.0 * (trace.score - item.target) / n;
        backward_one(params, config, levels, &trace, d_score, &mut grads, &mut d_levels);
        predictions.push(trace.score);
        targets.push(item.target);
        if let Some(label) = item.label {
            labeled_probs.push(trace.z);
            labels.push(label);
        }
    }

    // Push level-embedding gradients through the frozen text encoder into
    // the rating tokens. With LCR disabled the level embeddings are fixed
    // template encodings and receive no gradient.
    if config.ablation.use_lcr {
        for (s, d_level) in d_levels.iter().enumerate() {
            let d_block = bundle.text_encode_vjp(&params.rating_tokens.tokens[s], d_level)?;
            grads.rating_tokens.tokens[s] += &d_block;
        }
    }

    let l_reg = regression_loss(&predictions, &targets)?;
    let l_cls = if labels.is_empty() {
        0.0
    } else {
        classification_loss(&labeled_probs, &labels)?
    };
    Ok((LossBreakdown::new(l_reg, l_cls, config.lambda_cls), grads))
}

/// Adam optimizer over a flat parameter vector. Standard defaults:
/// beta1 = 0.9, beta2 = 0.999, eps = 1e-8, no weight decay.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(learning_rate: f64, param_count: usize) -> Self {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
        }
    }

    /// One update in place. `params` and `grads` must both match the length
    /// the optimizer was built with.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(CscaError::DimensionMismatch(format!(
                "optimizer built for {} parameters, got {} params / {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let bias1 = 1.0 - self.beta1.powi(t);
        let bias2 = 1.0 - self.beta2.powi(t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bias1;
            let v_hat = self.v[i] / bias2;
            params[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// Loss figures for one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub l_reg: f64,
    pub l_cls: f64,
    pub total: f64,
    pub val_total: f64,
}

/// Mutable state of the training loop, exposed for inspection in tests.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub epoch: usize,
    pub best_val_metric: f64,
    pub epochs_since_best: usize,
    pub rng_seed: u64,
    pub params: CscaParameters,
}

/// Output of [`train`]: the best checkpoint by validation loss plus the
/// full epoch history.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochStats>,
}

/// Trains the conditional scoring head.
///
/// `records` must contain non-empty train and val splits with normalized
/// ratings. Early stopping watches the total validation loss; the returned
/// checkpoint holds the parameters from the best epoch, not the last one.
pub fn train(
    records: &[DrawingRecord],
    bundle: Arc<dyn EncoderBundle>,
    stats: &ChannelStats,
    config: &RunConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    let train_records: Vec<&DrawingRecord> =
        records.iter().filter(|r| r.split == Split::Train).collect();
    let val_records: Vec<&DrawingRecord> =
        records.iter().filter(|r| r.split == Split::Val).collect();
    if train_records.is_empty() {
        return Err(CscaError::EmptyInput("training needs train records".into()));
    }
    if val_records.is_empty() {
        return Err(CscaError::EmptyInput(
            "training needs val records for early stopping".into(),
        ));
    }

    let unlabeled = train_records
        .iter()
        .filter(|r| r.content_label.is_none())
        .count();
    if unlabeled > 0 {
        log::warn!(
            "{unlabeled} of {} training records have no content label; they are \
             excluded from the classification term",
            train_records.len()
        );
    }
    {
        let first = train_records[0].rating_norm;
        if first.is_some() && train_records.iter().all(|r| r.rating_norm == first) {
            log::warn!(
                "all training records share one normalized rating; the regression \
                 target is degenerate"
            );
        }
    }

    let train_items = featurize_records(&train_records, stats, bundle.as_ref())?;
    let val_items = featurize_records(&val_records, stats, bundle.as_ref())?;

    let mut model = CscaModel::init(bundle.clone(), *stats, config.clone())?;
    let mut flat = model.params.to_flat();
    let mut adam = Adam::new(config.learning_rate, flat.len());

    let shuffle_seed = splitmix64(config.seed ^ 0x73687566666c65);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(shuffle_seed);

    let mut state = TrainState {
        epoch: 0,
        best_val_metric: f64::INFINITY,
        epochs_since_best: 0,
        rng_seed: shuffle_seed,
        params: model.params.clone(),
    };
    let mut best_epoch = 0usize;
    let mut history = Vec::new();

    let val_refs: Vec<&TrainItem> = val_items.iter().collect();

    for epoch in 1..=config.max_epochs {
        state.epoch = epoch;
        let mut order: Vec<usize> = (0..train_items.len()).collect();
        order.shuffle(&mut shuffle_rng);

        // Accumulate epoch-level training losses weighted by batch size, so
        // the reported figure is the mean over examples, not over batches.
        let mut reg_sum = 0.0;
        let mut cls_sum = 0.0;
        let mut cls_count = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&TrainItem> = chunk.iter().map(|&i| &train_items[i]).collect();
            let levels = model.level_encodings()?;
            let (loss, grads) = batch_loss_and_grads(
                &model.params,
                config,
                model.bundle.as_ref(),
                &levels,
                &model.prompts,
                &batch,
            )?;
            let flat_grads = grads.to_flat();
            adam.step(&mut flat, &flat_grads)?;
            model.params.assign_flat(&flat)?;

            reg_sum += loss.l_reg * batch.len() as f64;
            let labeled = batch.iter().filter(|i| i.label.is_some()).count();
            cls_sum += loss.l_cls * labeled as f64;
            cls_count += labeled;
        }
        let l_reg = reg_sum / train_items.len() as f64;
        let l_cls = if cls_count > 0 {
            cls_sum / cls_count as f64
        } else {
            0.0
        };
        let train_loss = LossBreakdown::new(l_reg, l_cls, config.lambda_cls);

        let levels = model.level_encodings()?;
        let val_loss = batch_loss(&model.params, config, &levels, &model.prompts, &val_refs)?;

        history.push(EpochStats {
            epoch,
            l_reg: train_loss.l_reg,
            l_cls: train_loss.l_cls,
            total: train_loss.total,
            val_total: val_loss.total,
        });

        if val_loss.total < state.best_val_metric {
            state.best_val_metric = val_loss.total;
            state.epochs_since_best = 0;
            state.params = model.params.clone();
            best_epoch = epoch;
        } else {
            state.epochs_since_best += 1;
            if state.epochs_since_best > config.early_stop_patience {
                log::info!(
                    "early stop at epoch {epoch}: no val improvement for {} epochs",
                    state.epochs_since_best
                );
                break;
            }
        }
    }

    // Snapshot the best-epoch parameters, not the final ones.
    model.params = state.params.clone();
    let checkpoint = model.to_checkpoint(best_epoch, state.best_val_metric);
    Ok(TrainOutcome {
        checkpoint,
        history,
    })
}

/// The five standard component combinations, in presentation order:
///
/// 1. fixed templates only (no LCR, no tuners)
/// 2. LCR only
/// 3. LCR + SCT
/// 4. LCR + CCT
/// 5. LCR + SCT + CCT
pub fn ablation_configs(base: &RunConfig) -> Vec<RunConfig> {
    (1..=5)
        .map(|row| ablation_row(base, row).expect("rows 1..=5 are valid"))
        .collect()
}

/// One row of the standard ablation table (1-based).
pub fn ablation_row(base: &RunConfig, row: usize) -> Result<RunConfig> {
    let flags = match row {
        1 => AblationFlags {
            use_lcr: false,
            use_sct: false,
            use_cct: false,
        },
        2 => AblationFlags {
            use_lcr: true,
            use_sct: false,
            use_cct: false,
        },
        3 => AblationFlags {
            use_lcr: true,
            use_sct: true,
            use_cct: false,
        },
        4 => AblationFlags {
            use_lcr: true,
            use_sct: false,
            use_cct: true,
        },
        5 => AblationFlags {
            use_lcr: true,
            use_sct: true,
            use_cct: true,
        },
        other => {
            return Err(CscaError::Config(format!(
                "ablation row must be 1..=5, got {other}"
            )))
        }
    };
    let mut config = base.clone();
    config.ablation = flags;
    Ok(config)
}

/// Writes the per-epoch history as `epoch,l_reg,l_cls,total,val_total`.
pub fn write_history(path: &Path, history: &[EpochStats]) -> Result<()> {
    let mut out = String::from("epoch,l_reg,l_cls,total,val_total\n");
    for row in history {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            row.epoch, row.l_reg, row.l_cls, row.total, row.val_total
        ));
    }
    fs::write(path, out).map_err(|e| CscaError::io(path, e))?;
    Ok(())
}

/// Reads a history file produced by [`write_history`].
pub fn read_history(path: &Path) -> Result<Vec<EpochStats>> {
    let text = fs::read_to_string(path).map_err(|e| CscaError::io(path, e))?;
    let mut lines = text.lines();
    match lines.next() {
        Some("epoch,l_reg,l_cls,total,val_total") => {}
        other => {
            return Err(CscaError::MalformedRow {
                path: path.to_path_buf(),
                row: 1,
                detail: format!("bad history header: {other:?}"),
            })
        }
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let row_no = i + 2;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(CscaError::MalformedRow {
                path: path.to_path_buf(),
                row: row_no,
                detail: format!("expected 5 fields, got {}", fields.len()),
            });
        }
        let parse = |s: &str| -> Result<f64> {
            s.parse().map_err(|e| CscaError::MalformedRow {
                path: path.to_path_buf(),
                row: row_no,
                detail: format!("bad number `{s}`: {e}"),
            })
        };
        out.push(EpochStats {
            epoch: fields[0].parse().map_err(|e| CscaError::MalformedRow {
                path: path.to_path_buf(),
                row: row_no,
                detail: format!("bad epoch `{}`: {e}", fields[0]),
            })?,
            l_reg: parse(fields[1])?,
            l_cls: parse(fields[2])?,
            total: parse(fields[3])?,
            val_total: parse(fields[4])?,
        });
    }
    Ok(out)
}
