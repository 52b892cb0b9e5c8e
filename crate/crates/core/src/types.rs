//! Shared vocabulary types: content labels, creativity levels, dataset
//! splits, drawing records, and the run configuration.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{CscaError, Result};
use crate::util::fnv1a64;

/// The five-way content vocabulary used for conditioning.
///
/// The variant order is load-bearing: integer codes 0..=4 index the content
/// prompt bank and the rows of every per-category table, so it must never be
/// reordered.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContentLabel {
    Object,
    Plant,
    Animal,
    Human,
    Other,
}

impl ContentLabel {
    pub const ALL: [ContentLabel; 5] = [
        ContentLabel::Object,
        ContentLabel::Plant,
        ContentLabel::Animal,
        ContentLabel::Human,
        ContentLabel::Other,
    ];

    /// Stable integer code, 0..=4.
    pub fn code(self) -> usize {
        self as usize
    }

    pub fn from_code(code: usize) -> Result<Self> {
        Self::ALL
            .get(code)
            .copied()
            .ok_or_else(|| CscaError::UnknownLabel(code.to_string()))
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ContentLabel::Object => "object",
            ContentLabel::Plant => "plant",
            ContentLabel::Animal => "animal",
            ContentLabel::Human => "human",
            ContentLabel::Other => "other",
        }
    }

    /// The text prompt this label contributes to the content prompt bank.
    pub fn prompt(self) -> String {
        format!("a photo of {}", self.as_str())
    }
}

impl fmt::Display for ContentLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ContentLabel {
    type Err = CscaError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "object" => Ok(ContentLabel::Object),
            "plant" => Ok(ContentLabel::Plant),
            "animal" => Ok(ContentLabel::Animal),
            "human" => Ok(ContentLabel::Human),
            "other" => Ok(ContentLabel::Other),
            other => Err(CscaError::UnknownLabel(other.to_string())),
        }
    }
}

/// The five creativity levels scored by the rating head.
///
/// Variant order is ascending quality; the scalar weight of level `s` is
/// `(code + 1) / 5`, i.e. 0.2, 0.4, 0.6, 0.8, 1.0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CreativityLevel {
    Bad,
    Poor,
    Fair,
    Good,
    Perfect,
}

impl CreativityLevel {
    pub const ALL: [CreativityLevel; 5] = [
        CreativityLevel::Bad,
        CreativityLevel::Poor,
        CreativityLevel::Fair,
        CreativityLevel::Good,
        CreativityLevel::Perfect,
    ];

    /// Stable integer code, 0..=4, ascending in quality.
    pub fn code(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            CreativityLevel::Bad => "bad",
            CreativityLevel::Poor => "poor",
            CreativityLevel::Fair => "fair",
            CreativityLevel::Good => "good",
            CreativityLevel::Perfect => "perfect",
        }
    }

    /// Scalar weight of this level in the expected-score readout.
    pub fn weight(self) -> f64 {
        (self.code() as f64 + 1.0) / 5.0
    }

    /// The text template whose token embeddings seed this level's learnable
    /// rating tokens.
    pub fn template(self) -> String {
        format!("the creativity of the photo is {}", self.as_str())
    }
}

impl fmt::Display for CreativityLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Dataset partition a record belongs to.
///
/// `Train`, `Val`, and `Test` partition the primary corpus; `Rg1`, `Rg2`,
/// and `Fg` are held-out generalization sets scored with training-set
/// statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
    Rg1,
    Rg2,
    Fg,
}

impl Split {
    pub const ALL: [Split; 6] = [
        Split::Train,
        Split::Val,
        Split::Test,
        Split::Rg1,
        Split::Rg2,
        Split::Fg,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::Rg1 => "rg1",
            Split::Rg2 => "rg2",
            Split::Fg => "fg",
        }
    }

    /// Row label used in evaluation reports.
    pub fn report_label(self) -> &'static str {
        match self {
            Split::Test => "primary_test",
            other => other.as_str(),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = CscaError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" | "primary_test" => Ok(Split::Test),
            "rg1" => Ok(Split::Rg1),
            "rg2" => Ok(Split::Rg2),
            "fg" => Ok(Split::Fg),
            other => Err(CscaError::UnknownSplit(other.to_string())),
        }
    }
}

/// One drawing with its annotations.
///
/// `rating_norm` and `style_scalar` start out unset and are filled in by
/// rating normalization and by the imaging pipeline respectively.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrawingRecord {
    /// Unique, non-empty identifier.
    pub id: String,
    /// Image location as written in the manifest.
    pub image_path: String,
    /// Raw mean rater score on the annotation scale.
    pub rating_raw: f64,
    /// Min-max normalized rating in [0, 1], from training-split statistics.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rating_norm: Option<f64>,
    /// Optional five-way content label.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub content_label: Option<ContentLabel>,
    pub split: Split,
    /// Mean inverted-pixel intensity of the drawing, in [0, 1].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub style_scalar: Option<f64>,
}

/// Which conditioning components participate in the forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationFlags {
    /// Learnable rating-token sequences (versus fixed text templates).
    pub use_lcr: bool,
    /// Style conditional tuner driven by ink intensity.
    pub use_sct: bool,
    /// Content conditional tuner driven by content probabilities.
    pub use_cct: bool,
}

impl AblationFlags {
    pub fn all_enabled() -> Self {
        AblationFlags {
            use_lcr: true,
            use_sct: true,
            use_cct: true,
        }
    }
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self::all_enabled()
    }
}

/// Hyperparameters and switches for one training or evaluation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    /// Weight of the classification term in the total loss.
    pub lambda_cls: f64,
    /// Softmax temperature for both similarity heads.
    pub temperature: f64,
    pub seed: u64,
    /// Epochs without validation improvement tolerated before stopping.
    pub early_stop_patience: usize,
    /// Hidden width of both conditional tuners.
    pub tuner_hidden_dim: usize,
    /// Learnable tokens per creativity level; 0 keeps the full tokenized
    /// template length.
    pub tokens_per_level: usize,
    /// Score similarities against the modulated embedding. Disabling scores
    /// against the raw image embedding, which detaches both tuners from the
    /// loss.
    pub score_on_modulated: bool,
    /// Re-normalize the modulated embedding before similarity so logits stay
    /// bounded by 1/temperature.
    pub renormalize_modulated: bool,
    pub ablation: AblationFlags,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            batch_size: 16,
            learning_rate: 1e-5,
            max_epochs: 136,
            lambda_cls: 1e-3,
            temperature: 0.01,
            seed: 42,
            early_stop_patience: 10,
            tuner_hidden_dim: 64,
            tokens_per_level: 0,
            score_on_modulated: true,
            renormalize_modulated: true,
            ablation: AblationFlags::all_enabled(),
        }
    }
}

impl RunConfig {
    /// Checks ranges that the rest of the pipeline relies on.
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(CscaError::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(CscaError::Config(format!(
                "learning_rate must be finite and positive, got {}",
                self.learning_rate
            )));
        }
        if self.max_epochs == 0 {
            return Err(CscaError::Config("max_epochs must be at least 1".into()));
        }
        if !(self.lambda_cls.is_finite() && self.lambda_cls >= 0.0) {
            return Err(CscaError::Config(format!(
                "lambda_cls must be finite and non-negative, got {}",
                self.lambda_cls
            )));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(CscaError::Config(format!(
                "temperature must be finite and positive, got {}",
                self.temperature
            )));
        }
        if self.tuner_hidden_dim == 0 {
            return Err(CscaError::Config(
                "tuner_hidden_dim must be at least 1".into(),
            ));
        }
        if self.tokens_per_level > 256 {
            return Err(CscaError::Config(format!(
                "tokens_per_level must be at most 256, got {}",
                self.tokens_per_level
            )));
        }
        Ok(())
    }

    /// Deterministic 16-hex-digit digest of every field, embedded in all
    /// run outputs so they can be traced back to their configuration.
    pub fn fingerprint(&self) -> String {
        let json =
            serde_json::to_string(self).expect("RunConfig serialization cannot fail");
        format!("{:016x}", fnv1a64(json.as_bytes()))
    }
}
